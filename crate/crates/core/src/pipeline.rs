//! One-call wrappers over the individual stages.
//!
//! [`Baseline::compute`] scores the unaugmented graph and designates the
//! groups; [`run_policy`] samples candidates and runs the optimization.

use thiserror::Error;

use crate::augment::{optimize, AugmentConfig, AugmentError, AugmentProblem, AugmentationResult};
use crate::dataset::{items_by_user, GroupPartition, SplitDataset};
use crate::graph::{build_candidate_space, build_graph, normalized_adjacency, BipartiteGraph, CandidateEdgeSpace, GraphError};
use crate::lightgcn::{predict_scores, topk, train_exclusions, GraphRecommender, ModelError};
use crate::metrics::{designate_groups, per_user_ndcg, GroupUtility, MetricsError};
use crate::policies::{apply_policy, PolicyContext, PolicyError, PolicySpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// The unaugmented state that every policy run starts from.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub graph: BipartiteGraph,
    /// Top-k list per user on the train graph, train items excluded.
    pub lists: Vec<Vec<usize>>,
    /// Perturbation-set (validation) items per user.
    pub relevant: Vec<Vec<usize>>,
    /// Per-user NDCG@k over users with validation items, and the
    /// designation. Group members are restricted to users with train edges.
    pub groups: GroupUtility,
    pub k: usize,
}

impl Baseline {
    pub fn compute<M: GraphRecommender>(
        model: &M,
        splits: &SplitDataset,
        partition: &GroupPartition,
        k: usize,
    ) -> Result<Self, PipelineError> {
        let graph = build_graph(&splits.train, splits.num_users, splits.num_items)?;
        let emb = model.embed(&normalized_adjacency(&graph, &[])?)?;
        let lists = topk(&predict_scores(&emb, splits.num_users), k, &train_exclusions(&graph));
        let relevant = items_by_user(&splits.validation, splits.num_users);
        let measured = (0..splits.num_users).filter(|&u| !relevant[u].is_empty());
        let per_user = per_user_ndcg(&lists, &relevant, measured, k);
        let partition = partition.restrict(|u| graph.user_degree(u) > 0);
        let groups = designate_groups(&per_user, &partition)?;
        Ok(Self {
            graph,
            lists,
            relevant,
            groups,
            k,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub space: CandidateEdgeSpace,
    pub result: AugmentationResult,
}

/// Applies `spec`, builds the candidate space and optimizes over it.
pub fn run_policy<M: GraphRecommender>(
    model: &M,
    baseline: &Baseline,
    spec: &PolicySpec,
    config: &AugmentConfig,
) -> Result<PolicyRun, PipelineError> {
    let ctx = PolicyContext {
        graph: &baseline.graph,
        disadvantaged: baseline.groups.disadvantaged_users(),
        advantaged: baseline.groups.advantaged_users(),
        lists: &baseline.lists,
        relevant: &baseline.relevant,
        k: baseline.k,
    };
    let (users, items) = apply_policy(spec, &ctx)?;
    let space = build_candidate_space(
        &baseline.graph,
        &users,
        &items,
        baseline.groups.disadvantaged_users(),
    )?;
    log::info!(
        "policy {spec}: {} users x {} items -> {} candidate edges",
        users.len(),
        items.len(),
        space.len()
    );
    let problem = AugmentProblem {
        model,
        graph: &baseline.graph,
        space: &space,
        groups: &baseline.groups,
        relevant: &baseline.relevant,
    };
    let result = optimize(&problem, config)?;
    Ok(PolicyRun {
        users,
        items,
        space,
        result,
    })
}
