//! Learning which candidate edges to add.
//!
//! Every candidate pair `h⁻¹(j)` owns a logit `p̂_j`, initialized at −5 so
//! that `σ(p̂_j) ≈ 0.0067` and the rounded graph equals the train graph. Each
//! epoch:
//!
//! 1. `w = σ(p̂)`; the augmented operator uses `w` as candidate weights;
//! 2. the frozen model scores perturbation-set users on that operator;
//! 3. `L = L_fair + L_dist`, where `L_fair` is the squared gap between the
//!    groups' mean smooth NDCG and `L_dist = β/2 · φ(Σ w²)`;
//! 4. the rounded vector `p = [p̂ ≥ 0]` is evaluated exactly (NDCG@k and
//!    |ΔNDCG| on the perturbation set) and recorded;
//! 5. `p̂` takes one adaptive gradient step.
//!
//! The returned edge set is the recorded checkpoint with the smallest
//! |ΔNDCG| (fewest edges, then earliest epoch, on ties).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Interaction, SplitDataset};
use crate::graph::{
    normalized_adjacency, normalized_adjacency_on_tape, BipartiteGraph, CandidateEdgeSpace,
    GraphError, NormalizedAdjacency,
};
use crate::lightgcn::{score_users, topk, train_exclusions, Adam, GraphRecommender, ModelError};
use crate::metrics::{
    self, approx_ndcg_rows, dist_loss, fairness_loss, group_mean, ApproxNdcg, GroupUtility,
    MetricsError,
};
use crate::tensor::{sigmoid, Tape, Tensor, TensorError, Var};

/// Initial logit of every candidate edge.
pub const INITIAL_LOGIT: f64 = -5.0;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("candidate edge space is empty")]
    EmptySpace,
    #[error("no disadvantaged user has perturbation-set items; nothing to optimize")]
    Degenerate,
    #[error("no advantaged user has perturbation-set items")]
    NoAdvantagedUsers,
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("expected {expected} candidate weights, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("added edge ({user}, {item}) does not start at a disadvantaged user")]
    ForeignUser { user: usize, item: usize },
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The learnable logits `p̂` over the candidate space.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector {
    p_hat: Vec<f64>,
}

impl PerturbationVector {
    pub fn new(len: usize) -> Self {
        Self {
            p_hat: vec![INITIAL_LOGIT; len],
        }
    }

    pub fn from_logits(p_hat: Vec<f64>) -> Self {
        Self { p_hat }
    }

    pub fn len(&self) -> usize {
        self.p_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_hat.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.p_hat
    }

    pub fn weights(&self) -> Vec<f64> {
        continuous_weights(&self.p_hat)
    }

    pub fn mask(&self) -> Vec<bool> {
        discretize(&self.p_hat)
    }
}

/// `σ(p̂)` elementwise.
pub fn continuous_weights(p_hat: &[f64]) -> Vec<f64> {
    p_hat.iter().map(|&x| sigmoid(x)).collect()
}

/// `p_j = 1` iff `σ(p̂_j) ≥ 0.5`, i.e. iff `p̂_j ≥ 0`.
pub fn discretize(p_hat: &[f64]) -> Vec<bool> {
    p_hat.iter().map(|&x| x >= 0.0).collect()
}

/// Augmented operator: train edges at weight 1, candidate `j` at
/// `weights[j]`, re-normalized with fractional degrees.
pub fn build_augmented(
    graph: &BipartiteGraph,
    space: &CandidateEdgeSpace,
    weights: &[f64],
) -> Result<NormalizedAdjacency, AugmentError> {
    if weights.len() != space.len() {
        return Err(AugmentError::LengthMismatch {
            expected: space.len(),
            got: weights.len(),
        });
    }
    let extra: Vec<(usize, usize, f64)> = space
        .pairs()
        .iter()
        .zip(weights)
        .map(|(&(u, i), &w)| (u, i, w))
        .collect();
    Ok(normalized_adjacency(graph, &extra)?)
}

/// [`build_augmented`] for a rounded vector.
pub fn build_augmented_discrete(
    graph: &BipartiteGraph,
    space: &CandidateEdgeSpace,
    mask: &[bool],
) -> Result<NormalizedAdjacency, AugmentError> {
    let weights: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    build_augmented(graph, space, &weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub beta: f64,
    pub temperature: f64,
    pub k: usize,
    /// Recorded for provenance; the loop itself draws no random numbers.
    pub seed: u64,
    /// Stop as soon as a checkpoint reaches `|ΔNDCG| <= target`.
    pub fairness_target: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 100,
            beta: 0.5,
            temperature: 0.1,
            k: 10,
            seed: 0,
            fairness_target: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if let Some(t) = self.fairness_target {
            if !(t >= 0.0) {
                return bad(format!("fairness target must be >= 0, got {t}"));
            }
        }
        Ok(())
    }
}

/// Exact perturbation-set utility of one graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMetrics {
    pub ndcg: f64,
    pub disadvantaged_ndcg: f64,
    pub advantaged_ndcg: f64,
    /// `disadvantaged_ndcg − advantaged_ndcg`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub fair_loss: f64,
    pub dist_loss: f64,
    /// |ΔNDCG@k| of the rounded graph on the perturbation set.
    pub abs_delta: f64,
    pub num_edges: usize,
    pub disadvantaged_ndcg: f64,
    pub advantaged_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationResult {
    pub added_edges: Vec<(usize, usize)>,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
    pub before: PerturbationMetrics,
    pub after: PerturbationMetrics,
    pub num_candidates: usize,
}

/// Everything the optimization reads. The model is frozen.
pub struct AugmentProblem<'a, M: GraphRecommender> {
    pub model: &'a M,
    pub graph: &'a BipartiteGraph,
    pub space: &'a CandidateEdgeSpace,
    pub groups: &'a GroupUtility,
    /// Perturbation-set items per user (sorted).
    pub relevant: &'a [Vec<usize>],
}

/// Loss inputs that stay fixed across epochs.
struct LossSetup {
    /// Evaluated disadvantaged users, then evaluated advantaged users.
    users: Vec<usize>,
    num_disadvantaged: usize,
    item_nodes: Vec<usize>,
    relevant: Rc<Vec<Vec<usize>>>,
    candidates: Rc<Vec<Vec<usize>>>,
    exclude: Vec<Vec<usize>>,
}

impl LossSetup {
    fn new<M: GraphRecommender>(p: &AugmentProblem<'_, M>) -> Result<Self, AugmentError> {
        let measured = |users: &[usize]| -> Vec<usize> {
            users.iter().copied().filter(|&u| !p.relevant[u].is_empty()).collect()
        };
        let d = measured(p.groups.disadvantaged_users());
        let a = measured(p.groups.advantaged_users());
        if d.is_empty() {
            return Err(AugmentError::Degenerate);
        }
        if a.is_empty() {
            return Err(AugmentError::NoAdvantagedUsers);
        }
        let num_disadvantaged = d.len();
        let users: Vec<usize> = d.into_iter().chain(a).collect();
        let nu = p.graph.num_users();
        let ni = p.graph.num_items();
        let exclude = train_exclusions(p.graph);
        let candidates = users
            .iter()
            .map(|&u| (0..ni).filter(|i| exclude[u].binary_search(i).is_err()).collect())
            .collect();
        Ok(Self {
            num_disadvantaged,
            item_nodes: (nu..nu + ni).collect(),
            relevant: Rc::new(users.iter().map(|&u| p.relevant[u].clone()).collect()),
            candidates: Rc::new(candidates),
            users,
            exclude,
        })
    }

    fn disadvantaged_rows(&self) -> Vec<usize> {
        (0..self.num_disadvantaged).collect()
    }

    fn advantaged_rows(&self) -> Vec<usize> {
        (self.num_disadvantaged..self.users.len()).collect()
    }
}

/// The scalar terms of one loss evaluation on a tape.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub fair: Var<'t>,
    pub dist: Var<'t>,
}

fn record_loss<'t, M: GraphRecommender>(
    tape: &'t Tape,
    problem: &AugmentProblem<'_, M>,
    setup: &LossSetup,
    config: &AugmentConfig,
    p_hat: Var<'t>,
) -> Result<LossTerms<'t>, AugmentError> {
    let w = tape.sigmoid(p_hat);
    let (pattern, values) = normalized_adjacency_on_tape(tape, problem.graph, problem.space, w)?;
    let emb = problem.model.embed_on_tape(tape, &pattern, values)?;
    let users = tape.select_rows(emb, &setup.users)?;
    let items = tape.select_rows(emb, &setup.item_nodes)?;
    let scores = tape.matmul_t(users, items)?;
    let metric = ApproxNdcg {
        temperature: config.temperature,
        cutoff: Some(config.k),
    };
    let utility = approx_ndcg_rows(
        tape,
        scores,
        setup.relevant.clone(),
        setup.candidates.clone(),
        metric,
    )?;
    let s_d = tape.mean(tape.gather(utility, &setup.disadvantaged_rows())?);
    let s_a = tape.mean(tape.gather(utility, &setup.advantaged_rows())?);
    let fair = fairness_loss(tape, &[s_d, s_a])?;
    let dist = dist_loss(tape, w, config.beta);
    let total = tape.add(fair, dist)?;
    Ok(LossTerms { total, fair, dist })
}

/// Records `L_fair + L_dist` as a function of the logits `p_hat` (a `B x 1`
/// node). Exposed for gradient checks.
pub fn augmentation_loss<'t, M: GraphRecommender>(
    tape: &'t Tape,
    problem: &AugmentProblem<'_, M>,
    config: &AugmentConfig,
    p_hat: Var<'t>,
) -> Result<LossTerms<'t>, AugmentError> {
    let setup = LossSetup::new(problem)?;
    record_loss(tape, problem, &setup, config, p_hat)
}

fn evaluate_operator<M: GraphRecommender>(
    problem: &AugmentProblem<'_, M>,
    setup: &LossSetup,
    operator: &NormalizedAdjacency,
    k: usize,
) -> Result<(BTreeMap<usize, f64>, PerturbationMetrics), AugmentError> {
    let emb = problem.model.embed(operator)?;
    let scores = score_users(&emb, problem.graph.num_users(), &setup.users);
    let lists = topk(&scores, k, &setup.exclude);
    let per_user = metrics::per_user_ndcg(&lists, problem.relevant, setup.users.iter().copied(), k);
    let d_users = &setup.users[..setup.num_disadvantaged];
    let a_users = &setup.users[setup.num_disadvantaged..];
    let d = group_mean(&per_user, d_users).unwrap_or(0.0);
    let a = group_mean(&per_user, a_users).unwrap_or(0.0);
    let overall = per_user.values().sum::<f64>() / per_user.len().max(1) as f64;
    Ok((
        per_user,
        PerturbationMetrics {
            ndcg: overall,
            disadvantaged_ndcg: d,
            advantaged_ndcg: a,
            delta: d - a,
        },
    ))
}

/// Exact perturbation-set metrics of the graph selected by `mask`.
pub fn evaluate_mask<M: GraphRecommender>(
    problem: &AugmentProblem<'_, M>,
    mask: &[bool],
    k: usize,
) -> Result<(BTreeMap<usize, f64>, PerturbationMetrics), AugmentError> {
    let setup = LossSetup::new(problem)?;
    let operator = build_augmented_discrete(problem.graph, problem.space, mask)?;
    evaluate_operator(problem, &setup, &operator, k)
}

fn is_better(candidate: &TraceRow, best: &TraceRow) -> bool {
    (candidate.abs_delta, candidate.num_edges) < (best.abs_delta, best.num_edges)
}

/// Runs the augmentation and returns the best rounded checkpoint.
pub fn optimize<M: GraphRecommender>(
    problem: &AugmentProblem<'_, M>,
    config: &AugmentConfig,
) -> Result<AugmentationResult, AugmentError> {
    config.validate()?;
    if problem.space.is_empty() {
        return Err(AugmentError::EmptySpace);
    }
    let setup = LossSetup::new(problem)?;
    let b = problem.space.len();
    let mut p_hat = PerturbationVector::new(b).p_hat;
    let mut adam = Adam::new(b, config.learning_rate);

    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.max_epochs + 1);
    let mut best: Option<(usize, Vec<bool>, PerturbationMetrics)> = None;
    let mut before = None;
    let mut cached: Option<(Vec<bool>, PerturbationMetrics)> = None;

    for epoch in 0..=config.max_epochs {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(p_hat.clone()));
        let terms = record_loss(&tape, problem, &setup, config, p)?;
        let (loss, fair, dist) = (terms.total.scalar(), terms.fair.scalar(), terms.dist.scalar());
        if !loss.is_finite() {
            return Err(AugmentError::NonFinite { epoch });
        }

        let mask = discretize(&p_hat);
        let metrics = match &cached {
            Some((m, metrics)) if *m == mask => *metrics,
            _ => {
                let operator = build_augmented_discrete(problem.graph, problem.space, &mask)?;
                let (_, metrics) = evaluate_operator(problem, &setup, &operator, config.k)?;
                cached = Some((mask.clone(), metrics));
                metrics
            }
        };
        let row = TraceRow {
            epoch,
            loss,
            fair_loss: fair,
            dist_loss: dist,
            abs_delta: metrics.delta.abs(),
            num_edges: mask.iter().filter(|&&x| x).count(),
            disadvantaged_ndcg: metrics.disadvantaged_ndcg,
            advantaged_ndcg: metrics.advantaged_ndcg,
        };
        log::debug!(
            "epoch {epoch}: loss {loss:.6} fair {fair:.6} dist {dist:.6} |ΔNDCG| {:.5} edges {}",
            row.abs_delta,
            row.num_edges
        );
        if before.is_none() {
            before = Some(metrics);
        }
        if best
            .as_ref()
            .map_or(true, |(e, _, _)| is_better(&row, &trace[*e]))
        {
            best = Some((epoch, mask, metrics));
        }
        let reached = config.fairness_target.is_some_and(|t| row.abs_delta <= t);
        trace.push(row);
        if reached || epoch == config.max_epochs {
            break;
        }

        tape.backward(terms.total)?;
        let grad = p.grad();
        adam.update(&mut p_hat, grad.data());
    }

    let (best_epoch, mask, after) = best.expect("at least one checkpoint");
    let added_edges: Vec<(usize, usize)> = problem
        .space
        .pairs()
        .iter()
        .zip(&mask)
        .filter(|(_, &on)| on)
        .map(|(&pair, _)| pair)
        .collect();
    let allowed = problem.groups.disadvantaged_users();
    if let Some(&(user, item)) = added_edges
        .iter()
        .find(|(u, _)| !allowed.contains(u))
    {
        return Err(AugmentError::ForeignUser { user, item });
    }
    Ok(AugmentationResult {
        added_edges,
        trace,
        best_epoch,
        before: before.expect("at least one checkpoint"),
        after,
        num_candidates: b,
    })
}

/// Moves the added edges into train (timestamp = the user's latest train
/// timestamp + 1) and drops matching pairs from validation and test.
pub fn finalize(added_edges: &[(usize, usize)], splits: &SplitDataset) -> SplitDataset {
    if added_edges.is_empty() {
        return splits.clone();
    }
    let mut latest: BTreeMap<usize, i64> = BTreeMap::new();
    for x in &splits.train {
        latest
            .entry(x.user)
            .and_modify(|t| *t = (*t).max(x.timestamp))
            .or_insert(x.timestamp);
    }
    let added: std::collections::BTreeSet<(usize, usize)> = added_edges.iter().copied().collect();
    let keep = |x: &&Interaction| !added.contains(&(x.user, x.item));
    let mut out = splits.clone();
    out.validation = splits.validation.iter().filter(keep).copied().collect();
    out.test = splits.test.iter().filter(keep).copied().collect();
    for &(u, i) in added_edges {
        let ts = latest.get(&u).map_or(0, |t| t + 1);
        out.train.push(Interaction::new(u, i, ts));
    }
    out.train.sort_by_key(|x| (x.user, x.timestamp, x.item));
    out
}

fn io_err(path: &Path, e: impl ToString) -> AugmentError {
    AugmentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// `added_edges.tsv`: dense ids followed by the original ids.
pub fn write_added_edges(
    path: impl AsRef<Path>,
    edges: &[(usize, usize)],
    user_ids: &[String],
    item_ids: &[String],
) -> Result<(), AugmentError> {
    let path = path.as_ref();
    let mut out = String::from("#user\titem\toriginal_user\toriginal_item\n");
    for &(u, i) in edges {
        let ou = user_ids.get(u).map(String::as_str).unwrap_or("?");
        let oi = item_ids.get(i).map(String::as_str).unwrap_or("?");
        out.push_str(&format!("{u}\t{i}\t{ou}\t{oi}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads the dense `(user, item)` columns of an `added_edges.tsv`.
pub fn read_added_edges(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>, AugmentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut edges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let parse = |v: Option<&str>| v.and_then(|s| s.trim().parse::<usize>().ok());
        match (parse(f.next()), parse(f.next())) {
            (Some(u), Some(i)) => edges.push((u, i)),
            _ => return Err(io_err(path, format!("line {}: malformed edge", n + 1))),
        }
    }
    Ok(edges)
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<(), AugmentError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = String::from(
        "epoch\tloss\tfair_loss\tdist_loss\tabs_delta_ndcg\tnum_edges\tdisadvantaged_ndcg\tadvantaged_ndcg\n",
    );
    for r in trace {
        out.push_str(&format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{}\t{:.10}\t{:.10}\n",
            r.epoch,
            r.loss,
            r.fair_loss,
            r.dist_loss,
            r.abs_delta,
            r.num_edges,
            r.disadvantaged_ndcg,
            r.advantaged_ndcg
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Plain-text JSON summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub num_candidates: usize,
    pub num_added_edges: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub before: PerturbationMetrics,
    pub after: PerturbationMetrics,
    pub disadvantaged_group: String,
    pub advantaged_group: String,
    pub config: AugmentConfig,
}

impl RunSummary {
    pub fn new(
        policy: &str,
        result: &AugmentationResult,
        groups: &GroupUtility,
        config: &AugmentConfig,
    ) -> Self {
        Self {
            policy: policy.to_string(),
            num_candidates: result.num_candidates,
            num_added_edges: result.added_edges.len(),
            best_epoch: result.best_epoch,
            epochs_run: result.trace.len(),
            before: result.before,
            after: result.after,
            disadvantaged_group: groups.disadvantaged_label().to_string(),
            advantaged_group: groups.advantaged_label().to_string(),
            config: config.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AugmentError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(path, e))?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}
