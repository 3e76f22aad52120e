//! LightGCN: linear propagation of free user/item embeddings over the
//! normalized interaction graph.
//!
//! ```text
//! E⁽⁰⁾ = [user embeddings; item embeddings]
//! E⁽ˡ⁺¹⁾ = Â E⁽ˡ⁾
//! E = (E⁽⁰⁾ + … + E⁽ᴷ⁾) / (K + 1)
//! score(u, i) = ⟨E_u, E_i⟩
//! ```
//!
//! Because `Â` is symmetric the whole map `E⁽⁰⁾ ↦ E` is a symmetric linear
//! operator, which BPR training uses to back-propagate without a tape.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{self, BipartiteGraph, GraphError, NormalizedAdjacency};
use crate::metrics;
use crate::tensor::{dot, sigmoid, SymmetricPattern, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no user has a positive interaction with a sampleable negative")]
    NoPositives,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("operator has {got} nodes, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite training loss at epoch {0}")]
    NonFinite(usize),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Trained LightGCN parameters (frozen during augmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_embeddings: Tensor,
    pub item_embeddings: Tensor,
    pub num_layers: usize,
}

impl ModelParams {
    pub fn num_users(&self) -> usize {
        self.user_embeddings.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.cols()
    }

    /// `E⁽⁰⁾`, users first.
    pub fn stacked(&self) -> Tensor {
        let mut data = self.user_embeddings.data().to_vec();
        data.extend_from_slice(self.item_embeddings.data());
        Tensor::from_vec(self.num_users() + self.num_items(), self.dim(), data)
            .expect("embedding blocks share the dimension")
    }

    fn from_stacked(stacked: &Tensor, num_users: usize, num_layers: usize) -> Self {
        let d = stacked.cols();
        let (u, i) = stacked.data().split_at(num_users * d);
        Self {
            user_embeddings: Tensor::from_vec(num_users, d, u.to_vec()).expect("user block"),
            item_embeddings: Tensor::from_vec(stacked.rows() - num_users, d, i.to_vec())
                .expect("item block"),
            num_layers,
        }
    }
}

/// A graph recommender whose scores depend on the inference graph through a
/// normalized adjacency. The augmentation only needs this surface, so other
/// propagation models can plug in here.
pub trait GraphRecommender {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;

    /// Final node representations (users first) for a fixed operator.
    fn embed(&self, operator: &NormalizedAdjacency) -> Result<Tensor, ModelError>;

    /// The same map recorded on a tape, differentiable in the operator values.
    fn embed_on_tape<'t>(
        &self,
        tape: &'t Tape,
        pattern: &Rc<SymmetricPattern>,
        values: Var<'t>,
    ) -> Result<Var<'t>, ModelError>;
}

impl GraphRecommender for ModelParams {
    fn num_users(&self) -> usize {
        ModelParams::num_users(self)
    }

    fn num_items(&self) -> usize {
        ModelParams::num_items(self)
    }

    fn embed(&self, operator: &NormalizedAdjacency) -> Result<Tensor, ModelError> {
        propagate(self, operator)
    }

    fn embed_on_tape<'t>(
        &self,
        tape: &'t Tape,
        pattern: &Rc<SymmetricPattern>,
        values: Var<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let n = self.num_users() + self.num_items();
        if pattern.dim() != n {
            return Err(ModelError::DimensionMismatch {
                expected: n,
                got: pattern.dim(),
            });
        }
        let e0 = tape.leaf(self.stacked());
        let mut layer = e0;
        let mut total = e0;
        for _ in 0..self.num_layers {
            layer = tape.sym_spmm(pattern, values, layer)?;
            total = tape.add(total, layer)?;
        }
        Ok(tape.scale(total, 1.0 / (self.num_layers + 1) as f64))
    }
}

/// Mean of `E⁽⁰⁾ … E⁽ᴷ⁾` under `operator`.
pub fn propagate(params: &ModelParams, operator: &NormalizedAdjacency) -> Result<Tensor, ModelError> {
    let n = params.num_users() + params.num_items();
    if operator.dim() != n {
        return Err(ModelError::DimensionMismatch {
            expected: n,
            got: operator.dim(),
        });
    }
    layer_mean(&params.stacked(), operator, params.num_layers)
}

fn layer_mean(
    e0: &Tensor,
    operator: &NormalizedAdjacency,
    layers: usize,
) -> Result<Tensor, ModelError> {
    let mut layer = e0.clone();
    let mut total = e0.clone();
    for _ in 0..layers {
        layer = operator.apply(&layer)?;
        total.add_assign(&layer);
    }
    Ok(total.scaled(1.0 / (layers + 1) as f64))
}

/// Predicted linking scores, `|U| x |I|` (or a subset of user rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// User id of each row.
    pub users: Vec<usize>,
    pub scores: Tensor,
}

impl ScoreMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        self.scores.row(r)
    }
}

/// Dot products between user rows and every item row of the final
/// embeddings.
pub fn predict_scores(embeddings: &Tensor, num_users: usize) -> ScoreMatrix {
    let users: Vec<usize> = (0..num_users).collect();
    score_users(embeddings, num_users, &users)
}

pub fn score_users(embeddings: &Tensor, num_users: usize, users: &[usize]) -> ScoreMatrix {
    let items: Vec<usize> = (num_users..embeddings.rows()).collect();
    let u = embeddings.select_rows(users);
    let i = embeddings.select_rows(&items);
    ScoreMatrix {
        users: users.to_vec(),
        scores: u.matmul_t(&i).expect("shared embedding dimension"),
    }
}

/// The `k` highest-scoring items not in `excluded` (sorted), ties by item id.
pub fn topk_row(scores: &[f64], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if cands.len() > k && k > 0 {
        cands.select_nth_unstable_by(k - 1, order);
        cands.truncate(k);
    }
    cands.sort_by(order);
    cands.truncate(k);
    cands
}

/// Top-k list for every row of `scores`; `exclude[u]` is user `u`'s sorted
/// train items. The result is indexed by user id (rows absent from `scores`
/// get an empty list).
pub fn topk(scores: &ScoreMatrix, k: usize, exclude: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); exclude.len()];
    for (r, &u) in scores.users.iter().enumerate() {
        lists[u] = topk_row(scores.row(r), k, &exclude[u]);
    }
    lists
}

/// Sorted train items per user of `graph`.
pub fn train_exclusions(graph: &BipartiteGraph) -> Vec<Vec<usize>> {
    (0..graph.num_users()).map(|u| graph.items_of(u).to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub reg: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Cutoff of the validation NDCG used for model selection.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            learning_rate: 1e-3,
            epochs: 100,
            reg: 1e-4,
            batch_size: 2048,
            seed: 42,
            k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.reg >= 0.0) {
            return bad("reg must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    /// Validation NDCG@k of the kept parameters (`None` without validation).
    pub best_ndcg: Option<f64>,
    /// Mean BPR loss per epoch.
    pub losses: Vec<f64>,
    /// Validation NDCG@k per epoch (empty without validation).
    pub validation_ndcg: Vec<f64>,
}

/// `(user, positive, negative)` triple.
pub type Triple = (usize, usize, usize);

/// Mean BPR loss over `triples` with L2 on the ego embeddings they touch,
/// and its gradient w.r.t. `E⁽⁰⁾` (users first).
pub fn bpr_loss_and_grad(
    params: &ModelParams,
    operator: &NormalizedAdjacency,
    triples: &[Triple],
    reg: f64,
) -> Result<(f64, Tensor), ModelError> {
    let nu = params.num_users();
    let e0 = params.stacked();
    let fin = layer_mean(&e0, operator, params.num_layers)?;
    let d = params.dim();
    let mut g_fin = Tensor::zeros(fin.rows(), d);
    let mut g_e0 = Tensor::zeros(fin.rows(), d);
    let scale = 1.0 / triples.len().max(1) as f64;
    let mut loss = 0.0;
    for &(u, p, q) in triples {
        let (ru, rp, rq) = (u, nu + p, nu + q);
        let x = dot(fin.row(ru), fin.row(rp)) - dot(fin.row(ru), fin.row(rq));
        // -ln σ(x) = ln(1 + e^{-x}), computed stably
        loss += if x > 0.0 {
            (-x).exp().ln_1p()
        } else {
            -x + x.exp().ln_1p()
        };
        let coef = -(1.0 - sigmoid(x)) * scale;
        for k in 0..d {
            let fu = fin.get(ru, k);
            let fp = fin.get(rp, k);
            let fq = fin.get(rq, k);
            g_fin.row_mut(ru)[k] += coef * (fp - fq);
            g_fin.row_mut(rp)[k] += coef * fu;
            g_fin.row_mut(rq)[k] -= coef * fu;
        }
        for r in [ru, rp, rq] {
            let row = e0.row(r);
            loss += reg * dot(row, row);
            for k in 0..d {
                g_e0.row_mut(r)[k] += 2.0 * reg * scale * row[k];
            }
        }
    }
    loss *= scale;
    // The layer-mean map is symmetric, so its adjoint is itself.
    let back = layer_mean(&g_fin, operator, params.num_layers)?;
    g_e0.add_assign(&back);
    Ok((loss, g_e0))
}

/// First-order adaptive optimizer with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn sample_negative(rng: &mut ChaCha8Rng, positives: &[usize], num_items: usize) -> Option<usize> {
    if positives.len() >= num_items {
        return None;
    }
    loop {
        let j = rng.gen_range(0..num_items);
        if positives.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

/// Mean validation NDCG@k over users with at least one validation item.
pub fn validation_ndcg(
    params: &ModelParams,
    operator: &NormalizedAdjacency,
    exclude: &[Vec<usize>],
    validation: &[Vec<usize>],
    k: usize,
) -> Result<f64, ModelError> {
    let fin = propagate(params, operator)?;
    let users: Vec<usize> = (0..params.num_users())
        .filter(|&u| !validation[u].is_empty())
        .collect();
    if users.is_empty() {
        return Ok(0.0);
    }
    let scores = score_users(&fin, params.num_users(), &users);
    let lists = topk(&scores, k, exclude);
    let per_user = metrics::per_user_ndcg(&lists, validation, users.iter().copied(), k);
    Ok(per_user.values().sum::<f64>() / per_user.len() as f64)
}

/// Trains embeddings with BPR over uniformly sampled negatives.
///
/// With `validation` (sorted items per user) the parameters of the epoch with
/// the highest validation NDCG@k are returned; otherwise those of the last
/// epoch. Deterministic for a given seed.
pub fn train_bpr(
    graph: &BipartiteGraph,
    config: &TrainConfig,
    validation: Option<&[Vec<usize>]>,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let (nu, ni) = (graph.num_users(), graph.num_items());
    let exclude = train_exclusions(graph);
    let edges: Vec<(usize, usize)> = graph
        .edges()
        .iter()
        .copied()
        .filter(|&(u, _)| exclude[u].len() < ni)
        .collect();
    if edges.is_empty() {
        return Err(ModelError::NoPositives);
    }
    let operator = graph::normalized_adjacency(graph, &[])?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let init: Vec<f64> = (0..(nu + ni) * config.dim).map(|_| normal.sample(&mut rng)).collect();
    let mut e0 = Tensor::from_vec(nu + ni, config.dim, init)?;
    let mut adam = Adam::new(e0.len(), config.learning_rate);

    let mut outcome = TrainOutcome {
        params: ModelParams::from_stacked(&e0, nu, config.layers),
        best_epoch: 0,
        best_ndcg: None,
        losses: Vec::with_capacity(config.epochs),
        validation_ndcg: Vec::new(),
    };
    let mut order = edges.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let triples: Vec<Triple> = chunk
                .iter()
                .filter_map(|&(u, p)| sample_negative(&mut rng, &exclude[u], ni).map(|q| (u, p, q)))
                .collect();
            let params = ModelParams::from_stacked(&e0, nu, config.layers);
            let (loss, grad) = bpr_loss_and_grad(&params, &operator, &triples, config.reg)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFinite(epoch));
            }
            adam.update(e0.data_mut(), grad.data());
            epoch_loss += loss;
            batches += 1;
        }
        outcome.losses.push(epoch_loss / batches as f64);

        let current = ModelParams::from_stacked(&e0, nu, config.layers);
        match validation {
            Some(val) => {
                let ndcg = validation_ndcg(&current, &operator, &exclude, val, config.k)?;
                outcome.validation_ndcg.push(ndcg);
                if outcome.best_ndcg.map_or(true, |b| ndcg > b) {
                    outcome.best_ndcg = Some(ndcg);
                    outcome.best_epoch = epoch;
                    outcome.params = current;
                }
                log::debug!("epoch {epoch}: loss {:.5} val ndcg {ndcg:.5}", epoch_loss / batches as f64);
            }
            None => {
                outcome.best_epoch = epoch;
                outcome.params = current;
            }
        }
    }
    Ok(outcome)
}

const CHECKPOINT_MAGIC: &str = "fairaug-lightgcn v1";

/// Writes a plain-text checkpoint.
///
/// ```text
/// fairaug-lightgcn v1
/// users <|U|>
/// items <|I|>
/// dim <d>
/// layers <K>
/// u <d values>      (|U| lines, row-major)
/// i <d values>      (|I| lines)
/// ```
///
/// Values use Rust's shortest round-trip float formatting, so a reload is
/// bit-exact.
pub fn checkpoint_to_string(params: &ModelParams) -> String {
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(s, "users {}", params.num_users()).unwrap();
    writeln!(s, "items {}", params.num_items()).unwrap();
    writeln!(s, "dim {}", params.dim()).unwrap();
    writeln!(s, "layers {}", params.num_layers).unwrap();
    for (tag, block) in [("u", &params.user_embeddings), ("i", &params.item_embeddings)] {
        for r in 0..block.rows() {
            s.push_str(tag);
            for v in block.row(r) {
                write!(s, " {v:?}").unwrap();
            }
            s.push('\n');
        }
    }
    s
}

pub fn checkpoint_from_str(text: &str, origin: &str) -> Result<ModelParams, ModelError> {
    let err = |message: String| ModelError::Checkpoint {
        path: origin.to_string(),
        message,
    };
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .map(|(n, l)| (n + 1, l))
            .ok_or_else(|| err(format!("unexpected end of file, expected {what}")))
    };
    let (_, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(err(format!("unsupported header {magic:?}")));
    }
    let mut header = |key: &str| -> Result<usize, ModelError> {
        let (n, line) = next(key)?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next().and_then(|v| v.parse().ok())) {
            (Some(k), Some(v)) if k == key => Ok(v),
            _ => Err(err(format!("line {n}: expected `{key} <count>`"))),
        }
    };
    let nu = header("users")?;
    let ni = header("items")?;
    let d = header("dim")?;
    let layers = header("layers")?;
    let mut read_block = |tag: &str, rows: usize| -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            let (n, line) = next(tag)?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(err(format!("line {n}: expected a `{tag}` row")));
            }
            let row: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(format!("line {n}: {e}")))?;
            if row.len() != d {
                return Err(err(format!("line {n}: expected {d} values, found {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("line {n}: non-finite value")));
            }
            data.extend(row);
        }
        Ok(Tensor::from_vec(rows, d, data)?)
    };
    let user_embeddings = read_block("u", nu)?;
    let item_embeddings = read_block("i", ni)?;
    Ok(ModelParams {
        user_embeddings,
        item_embeddings,
        num_layers: layers,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(params)).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    checkpoint_from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalized_adjacency;
    use crate::tensor::finite_difference_check;

    fn params(nu: usize, ni: usize, d: usize, layers: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = |rows| {
            let data = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(rows, d, data).unwrap()
        };
        ModelParams {
            user_embeddings: block(nu),
            item_embeddings: block(ni),
            num_layers: layers,
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = BipartiteGraph::from_pairs([(0, 0), (1, 1)], 2, 2).unwrap();
        let p = params(2, 2, 3, 0, 1);
        let out = propagate(&p, &normalized_adjacency(&g, &[]).unwrap()).unwrap();
        assert_eq!(out, p.stacked());
    }

    #[test]
    fn zero_operator_averages_with_empty_layers() {
        // all degrees zero for users 1.. and items 1..; restrict to a graph
        // whose only edge touches nodes we do not inspect
        let g = BipartiteGraph::from_pairs([(0, 0)], 3, 3).unwrap();
        let p = params(3, 3, 2, 2, 2);
        let out = propagate(&p, &normalized_adjacency(&g, &[]).unwrap()).unwrap();
        let e0 = p.stacked();
        for r in [1, 2, 4, 5] {
            for k in 0..2 {
                assert!((out.get(r, k) - e0.get(r, k) / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_layer_single_edge_by_hand() {
        let g = BipartiteGraph::from_pairs([(0, 0)], 1, 1).unwrap();
        let p = ModelParams {
            user_embeddings: Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
            item_embeddings: Tensor::from_vec(1, 2, vec![3.0, -1.0]).unwrap(),
            num_layers: 1,
        };
        let out = propagate(&p, &normalized_adjacency(&g, &[]).unwrap()).unwrap();
        // operator [[0,1],[1,0]]: user -> (e_u + e_i)/2, item -> (e_i + e_u)/2
        assert_eq!(out.data(), &[2.0, 0.5, 2.0, 0.5]);
    }

    #[test]
    fn scores_are_dot_products() {
        let emb = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.5, 2.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let s = predict_scores(&emb, 2);
        assert_eq!(s.scores.get(0, 0), 0.0); // orthogonal
        assert_eq!(s.scores.get(0, 1), 1.0); // identical unit vectors
        assert_eq!(s.scores.get(1, 0), 2.0);
        assert_eq!(s.scores.get(1, 1), 0.5);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_row(&[3.0, 1.0, 2.0], 2, &[]), vec![0, 2]);
        assert_eq!(topk_row(&[3.0, 1.0, 2.0], 2, &[0]), vec![2, 1]);
        assert_eq!(topk_row(&[3.0, 1.0, 2.0], 2, &[0, 1, 2]), Vec::<usize>::new());
        assert_eq!(topk_row(&[1.0, 1.0, 1.0, 0.0], 2, &[]), vec![0, 1]);
        assert_eq!(topk_row(&[1.0, 5.0], 5, &[]), vec![1, 0]);
    }

    #[test]
    fn bpr_at_zero_margin_is_ln_two() {
        let g = BipartiteGraph::from_pairs([(0, 0)], 1, 2).unwrap();
        let p = ModelParams {
            user_embeddings: Tensor::zeros(1, 2),
            item_embeddings: Tensor::zeros(2, 2),
            num_layers: 1,
        };
        let op = normalized_adjacency(&g, &[]).unwrap();
        let (loss, _) = bpr_loss_and_grad(&p, &op, &[(0, 0, 1)], 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let g = BipartiteGraph::from_pairs([(0, 0), (0, 1), (1, 1), (2, 2), (1, 3)], 3, 4).unwrap();
        let op = normalized_adjacency(&g, &[]).unwrap();
        let p = params(3, 4, 3, 2, 5);
        let triples = [(0, 0, 2), (1, 3, 0), (2, 2, 1), (0, 1, 3)];
        let reg = 0.01;
        let (_, grad) = bpr_loss_and_grad(&p, &op, &triples, reg).unwrap();
        let e0 = p.stacked();
        let eps = 1e-6;
        for k in 0..e0.len() {
            let mut plus = e0.clone();
            plus.data_mut()[k] += eps;
            let mut minus = e0.clone();
            minus.data_mut()[k] -= eps;
            let f = |e: &Tensor| {
                let q = ModelParams::from_stacked(e, 3, 2);
                bpr_loss_and_grad(&q, &op, &triples, reg).unwrap().0
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            assert!((grad.data()[k] - numeric).abs() < 1e-7, "coord {k}");
        }
    }

    #[test]
    fn tape_propagation_matches_plain() {
        let g = BipartiteGraph::from_pairs([(0, 0), (0, 1), (1, 1)], 2, 2).unwrap();
        let op = normalized_adjacency(&g, &[]).unwrap();
        let p = params(2, 2, 3, 2, 9);
        let tape = Tape::new();
        let values = tape.leaf(Tensor::vector(op.values().to_vec()));
        let out = p.embed_on_tape(&tape, op.pattern(), values).unwrap();
        let plain = propagate(&p, &op).unwrap();
        for (a, b) in out.value().data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        // gradient of a score w.r.t. operator values
        let x = Tensor::vector(op.values().to_vec());
        let err = finite_difference_check(
            |t, v| {
                let e = p.embed_on_tape(t, op.pattern(), v).unwrap();
                let sq = t.square(e);
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = params(3, 5, 4, 2, 11);
        let text = checkpoint_to_string(&p);
        assert_eq!(checkpoint_from_str(&text, "mem").unwrap(), p);
        assert!(checkpoint_from_str("bogus\n", "mem").is_err());
        let truncated: String = text.lines().take(7).collect::<Vec<_>>().join("\n");
        assert!(checkpoint_from_str(&truncated, "mem").is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let g = BipartiteGraph::from_pairs([(0, 0)], 1, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(train_bpr(&g, &cfg, None), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn users_owning_every_item_cannot_train() {
        let g = BipartiteGraph::from_pairs([(0, 0), (0, 1)], 1, 2).unwrap();
        assert!(matches!(
            train_bpr(&g, &TrainConfig::default(), None),
            Err(ModelError::NoPositives)
        ));
    }
}
