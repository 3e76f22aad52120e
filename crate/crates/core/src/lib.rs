//! Fairness-aware edge augmentation for graph-based top-k recommendation.
//!
//! Given a LightGCN-style recommender trained on a user–item interaction
//! graph, this crate learns a small set of user–item edges to add to the
//! inference graph so that the recommendation utility (NDCG) of a
//! disadvantaged demographic group moves closer to that of the advantaged
//! group. The added edges are restricted to users of the disadvantaged group
//! and are optimized through a differentiable demographic-parity loss.
//!
//! Module map:
//!
//! - [`dataset`]: TSV ingestion, temporal 7:1:2 splits, group labels.
//! - [`graph`]: bipartite adjacency, symmetric normalization, candidate edges.
//! - [`tensor`]: dense arrays and a reverse-mode tape.
//! - [`lightgcn`]: propagation, BPR training, scoring, top-k, checkpoints.
//! - [`metrics`]: NDCG, ApproxNDCG, ΔNDCG, fairness and distance losses.
//! - [`policies`]: candidate user/item sampling (BM, ZN, LD, SP, FR, IP).
//! - [`augment`]: the perturbation-vector optimization loop.
//! - [`pipeline`]: baseline scoring and one-call policy runs.
//! - [`report`]: evaluation reports and comparison tables.
//! - [`synthetic`]: seeded biased datasets for demos and tests.

pub mod augment;
pub mod dataset;
pub mod graph;
pub mod lightgcn;
pub mod metrics;
pub mod pipeline;
pub mod policies;
pub mod report;
pub mod synthetic;
pub mod tensor;
