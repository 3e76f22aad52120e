//! Ranking utility, group disparity and the two augmentation losses.
//!
//! NDCG uses binary relevance and the `log2(rank + 1)` discount. The smooth
//! surrogate replaces each item's rank with
//!
//! ```text
//! rank(i) = 1 + Σ_{j ≠ i} σ((s_j − s_i) / T)
//! ```
//!
//! where `σ` is the logistic function and `T > 0` a temperature; as `T → 0`
//! it recovers the exact rank for distinct scores. The `@k` cutoff is applied
//! softly by weighting each relevant item with `σ((k + 0.5 − rank(i)) / T)`.

use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::dataset::GroupPartition;
use crate::tensor::{sigmoid, soft_bound, CustomOp, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("group {label:?} has no evaluated users")]
    EmptyGroup { label: String },
    #[error("fairness loss needs at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ideal DCG with `min(k, num_relevant)` relevant items at the top.
pub fn idcg(num_relevant: usize, k: usize) -> f64 {
    (1..=num_relevant.min(k))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum()
}

/// Exact NDCG@k with binary relevance; 0 when `relevant` is empty.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    dcg / idcg(relevant.len(), k)
}

/// NDCG@k for each listed user that has at least one relevant item.
pub fn per_user_ndcg(
    lists: &[Vec<usize>],
    relevant: &[Vec<usize>],
    users: impl IntoIterator<Item = usize>,
    k: usize,
) -> BTreeMap<usize, f64> {
    users
        .into_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| (u, ndcg_at_k(&lists[u], &relevant[u], k)))
        .collect()
}

fn inv_log2_1p(rank: f64) -> f64 {
    1.0 / (1.0 + rank).log2()
}

/// d/dπ of `1 / log2(1 + π)`.
fn inv_log2_1p_grad(rank: f64) -> f64 {
    let l = (1.0 + rank).ln();
    -std::f64::consts::LN_2 / ((1.0 + rank) * l * l)
}

/// Smooth NDCG of one score vector.
///
/// `candidates` lists the rankable items (all items when `None`); relevant
/// items outside it are ignored. `cutoff` enables the soft `@k` weight and
/// also caps the ideal DCG at `k`.
#[derive(Debug, Clone, Copy)]
pub struct ApproxNdcg {
    pub temperature: f64,
    pub cutoff: Option<usize>,
}

impl ApproxNdcg {
    fn ideal(&self, num_relevant: usize) -> f64 {
        idcg(num_relevant, self.cutoff.unwrap_or(num_relevant))
    }

    fn smooth_rank(&self, scores: &[f64], candidates: &[usize], item: usize) -> f64 {
        let si = scores[item];
        1.0 + candidates
            .iter()
            .filter(|&&j| j != item)
            .map(|&j| sigmoid((scores[j] - si) / self.temperature))
            .sum::<f64>()
    }

    fn cut_weight(&self, rank: f64) -> f64 {
        match self.cutoff {
            Some(k) => sigmoid((k as f64 + 0.5 - rank) / self.temperature),
            None => 1.0,
        }
    }

    pub fn value(&self, scores: &[f64], relevant: &[usize], candidates: &[usize]) -> f64 {
        let rel: Vec<usize> = relevant.iter().copied().filter(|i| candidates.contains(i)).collect();
        if rel.is_empty() {
            return 0.0;
        }
        let total: f64 = rel
            .iter()
            .map(|&i| {
                let rank = self.smooth_rank(scores, candidates, i);
                self.cut_weight(rank) * inv_log2_1p(rank)
            })
            .sum();
        total / self.ideal(rel.len())
    }

    /// Gradient of [`ApproxNdcg::value`] w.r.t. every score (zero outside
    /// `candidates`), scaled by `upstream`.
    pub fn gradient_into(
        &self,
        scores: &[f64],
        relevant: &[usize],
        candidates: &[usize],
        upstream: f64,
        out: &mut [f64],
    ) {
        let rel: Vec<usize> = relevant.iter().copied().filter(|i| candidates.contains(i)).collect();
        if rel.is_empty() || upstream == 0.0 {
            return;
        }
        let t = self.temperature;
        let norm = upstream / self.ideal(rel.len());
        for &i in &rel {
            let rank = self.smooth_rank(scores, candidates, i);
            let c = self.cut_weight(rank);
            let dc = match self.cutoff {
                Some(_) => -c * (1.0 - c) / t,
                None => 0.0,
            };
            let d_rank = norm * (c * inv_log2_1p_grad(rank) + dc * inv_log2_1p(rank));
            let si = scores[i];
            for &j in candidates {
                if j == i {
                    continue;
                }
                let s = sigmoid((scores[j] - si) / t);
                let ds = s * (1.0 - s) / t;
                out[j] += d_rank * ds;
                out[i] -= d_rank * ds;
            }
        }
    }
}

/// Row-wise smooth NDCG over a `users x items` score matrix.
struct ApproxNdcgRows {
    metric: ApproxNdcg,
    relevant: Rc<Vec<Vec<usize>>>,
    candidates: Rc<Vec<Vec<usize>>>,
}

impl CustomOp for ApproxNdcgRows {
    fn name(&self) -> &'static str {
        "approx_ndcg_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let scores = inputs[0];
        let mut g = Tensor::zeros(scores.rows(), scores.cols());
        for r in 0..scores.rows() {
            let up = grad_output.data()[r];
            let row = scores.row(r);
            let mut out = vec![0.0; row.len()];
            self.metric
                .gradient_into(row, &self.relevant[r], &self.candidates[r], up, &mut out);
            g.row_mut(r).copy_from_slice(&out);
        }
        vec![g]
    }
}

/// Records the smooth NDCG of every row of `scores` on the tape, returning a
/// `rows x 1` node. Row `r` ranks `candidates[r]` and is judged against
/// `relevant[r]`.
pub fn approx_ndcg_rows<'t>(
    tape: &'t Tape,
    scores: Var<'t>,
    relevant: Rc<Vec<Vec<usize>>>,
    candidates: Rc<Vec<Vec<usize>>>,
    metric: ApproxNdcg,
) -> Result<Var<'t>, MetricsError> {
    let value = scores.value();
    if relevant.len() != value.rows() || candidates.len() != value.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "approx_ndcg_rows",
            left: value.shape(),
            right: (relevant.len(), candidates.len()),
        }
        .into());
    }
    let out: Vec<f64> = (0..value.rows())
        .map(|r| metric.value(value.row(r), &relevant[r], &candidates[r]))
        .collect();
    let op = ApproxNdcgRows {
        metric,
        relevant,
        candidates,
    };
    Ok(tape.custom(Rc::new(op), &[scores], Tensor::vector(out)))
}

/// Mean NDCG of U_D minus mean NDCG of U_A over the users present in
/// `per_user`.
pub fn delta_ndcg(
    per_user: &BTreeMap<usize, f64>,
    disadvantaged: &[usize],
    advantaged: &[usize],
) -> Result<f64, MetricsError> {
    let d = group_mean(per_user, disadvantaged).ok_or_else(|| MetricsError::EmptyGroup {
        label: "disadvantaged".into(),
    })?;
    let a = group_mean(per_user, advantaged).ok_or_else(|| MetricsError::EmptyGroup {
        label: "advantaged".into(),
    })?;
    Ok(d - a)
}

/// Mean over the members present in `per_user`, `None` if there are none.
pub fn group_mean(per_user: &BTreeMap<usize, f64>, members: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = members.iter().filter_map(|u| per_user.get(u).copied()).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean squared pairwise gap between group utilities:
/// `(1 / C(|G|, 2)) Σ_{i<j} (S_i − S_j)²`.
pub fn fairness_loss<'t>(tape: &'t Tape, utilities: &[Var<'t>]) -> Result<Var<'t>, MetricsError> {
    let n = utilities.len();
    if n < 2 {
        return Err(MetricsError::TooFewGroups(n));
    }
    let mut total: Option<Var<'t>> = None;
    for i in 0..n {
        for j in i + 1..n {
            let sq = tape.square(tape.sub(utilities[i], utilities[j])?);
            total = Some(match total {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(tape.scale(total.expect("n >= 2"), 1.0 / pairs))
}

pub fn fairness_loss_value(utilities: &[f64]) -> Result<f64, MetricsError> {
    let n = utilities.len();
    if n < 2 {
        return Err(MetricsError::TooFewGroups(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (utilities[i] - utilities[j]).powi(2);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// `β · ½ · φ(Σ w²)` with `φ(x) = |x| / (1 + |x|)`.
///
/// The augmented adjacency differs from the original only on candidate
/// entries, so the squared distance is the sum of squared weights.
pub fn dist_loss<'t>(tape: &'t Tape, weights: Var<'t>, beta: f64) -> Var<'t> {
    let sq = tape.sum(tape.square(weights));
    tape.scale(tape.soft_bound(sq), 0.5 * beta)
}

pub fn dist_loss_value(weights: &[f64], beta: f64) -> f64 {
    0.5 * beta * soft_bound(weights.iter().map(|w| w * w).sum())
}

/// Signed relative change in percent, `None` when `before` is zero.
pub fn relative_difference(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before * 100.0)
}

/// Relative change of magnitudes in percent, used for ΔNDCG where −100%
/// means parity was reached.
pub fn relative_abs_difference(before: f64, after: f64) -> Option<f64> {
    relative_difference(before.abs(), after.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessLossConfig {
    pub beta: f64,
    pub temperature: f64,
    pub k: usize,
}

impl Default for FairnessLossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            temperature: 0.1,
            k: 10,
        }
    }
}

impl FairnessLossConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MetricsError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(MetricsError::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-user utility with the disadvantaged/advantaged designation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupUtility {
    pub per_user_ndcg: BTreeMap<usize, f64>,
    pub labels: [String; 2],
    pub members: [Vec<usize>; 2],
    pub group_means: [f64; 2],
    /// Index into `labels` of the disadvantaged group.
    pub disadvantaged: usize,
}

impl GroupUtility {
    pub fn advantaged(&self) -> usize {
        1 - self.disadvantaged
    }

    pub fn disadvantaged_label(&self) -> &str {
        &self.labels[self.disadvantaged]
    }

    pub fn advantaged_label(&self) -> &str {
        &self.labels[self.advantaged()]
    }

    /// All members of U_D, evaluated or not.
    pub fn disadvantaged_users(&self) -> &[usize] {
        &self.members[self.disadvantaged]
    }

    pub fn advantaged_users(&self) -> &[usize] {
        &self.members[self.advantaged()]
    }

    pub fn delta(&self) -> f64 {
        self.group_means[self.disadvantaged] - self.group_means[self.advantaged()]
    }
}

/// Labels the group with the lower mean NDCG as disadvantaged. Equal means
/// pick the first group by label order and log a warning.
pub fn designate_groups(
    per_user_ndcg: &BTreeMap<usize, f64>,
    partition: &GroupPartition,
) -> Result<GroupUtility, MetricsError> {
    let mut means = [0.0; 2];
    for g in 0..2 {
        means[g] = group_mean(per_user_ndcg, &partition.members[g]).ok_or_else(|| {
            MetricsError::EmptyGroup {
                label: partition.labels[g].clone(),
            }
        })?;
    }
    let disadvantaged = if means[0] == means[1] {
        log::warn!(
            "groups {:?} and {:?} have equal mean NDCG {}; designating {:?} as disadvantaged",
            partition.labels[0],
            partition.labels[1],
            means[0],
            partition.labels[0]
        );
        0
    } else if means[0] < means[1] {
        0
    } else {
        1
    };
    Ok(GroupUtility {
        per_user_ndcg: per_user_ndcg.clone(),
        labels: partition.labels.clone(),
        members: partition.members.clone(),
        group_means: means,
        disadvantaged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        let v = ndcg_at_k(&[9, 0, 8], &[0], 3);
        assert!(close(v, 1.0 / 3f64.log2(), 1e-15));
        assert!(close(v, 0.6309, 1e-4));
        assert_eq!(ndcg_at_k(&[1, 2], &[], 2), 0.0);
    }

    #[test]
    fn approx_ndcg_examples() {
        let all = [0, 1];
        let sharp = ApproxNdcg {
            temperature: 1e-3,
            cutoff: Some(2),
        };
        assert!(close(sharp.value(&[2.0, 1.0], &[0], &all), 1.0, 1e-3));

        let smooth = ApproxNdcg {
            temperature: 1.0,
            cutoff: None,
        };
        let want = 1.0 / (1.0 + 1.0 + sigmoid(-1.0)).log2();
        let got = smooth.value(&[2.0, 1.0], &[0], &all);
        assert!(close(got, want, 1e-15));
        assert!(close(got, 0.846, 1e-3));

        let mut g = vec![0.0; 2];
        smooth.gradient_into(&[2.0, 1.0], &[], &all, 1.0, &mut g);
        assert_eq!(smooth.value(&[2.0, 1.0], &[], &all), 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn delta_examples() {
        let per_user: BTreeMap<usize, f64> = [(0, 0.3), (1, 0.3)].into();
        assert_eq!(delta_ndcg(&per_user, &[0], &[1]).unwrap(), 0.0);

        let per_user: BTreeMap<usize, f64> = [(0, 0.1), (1, 0.3), (2, 0.5)].into();
        assert!(close(delta_ndcg(&per_user, &[0, 1], &[2]).unwrap(), -0.3, 1e-15));

        let per_user: BTreeMap<usize, f64> = [(0, 1.0), (1, 0.0)].into();
        assert_eq!(delta_ndcg(&per_user, &[0], &[1]).unwrap(), 1.0);
        assert_eq!(delta_ndcg(&per_user, &[1], &[0]).unwrap(), -1.0);
        assert!(delta_ndcg(&per_user, &[], &[0]).is_err());
    }

    #[test]
    fn fairness_loss_examples() {
        assert_eq!(fairness_loss_value(&[0.4, 0.4]).unwrap(), 0.0);
        assert!(close(fairness_loss_value(&[0.2, 0.5]).unwrap(), 0.09, 1e-15));
        assert_eq!(fairness_loss_value(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert_eq!(fairness_loss_value(&[0.3]), Err(MetricsError::TooFewGroups(1)));

        let tape = Tape::new();
        let s: Vec<_> = [0.2, 0.5].iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect();
        let l = fairness_loss(&tape, &s).unwrap();
        assert!(close(l.scalar(), 0.09, 1e-15));
    }

    #[test]
    fn dist_loss_examples() {
        assert_eq!(dist_loss_value(&[0.0; 4], 0.5), 0.0);
        let v = dist_loss_value(&[0.5; 3], 0.5);
        assert!(close(v, 0.5 * 0.5 * (0.75 / 1.75), 1e-15));
        assert!(close(v, 0.1071, 1e-4));
        let big = vec![1.0; 100_000];
        let v = dist_loss_value(&big, 0.5);
        assert!(v < 0.25 && v > 0.2499);

        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.5; 3]));
        assert!(close(dist_loss(&tape, w, 0.5).scalar(), 0.5 * 0.5 * (0.75 / 1.75), 1e-15));
    }

    #[test]
    fn relative_difference_examples() {
        assert_eq!(relative_abs_difference(0.05, 0.0), Some(-100.0));
        assert_eq!(relative_abs_difference(-0.05, 0.0), Some(-100.0));
        assert_eq!(relative_abs_difference(0.05, 0.05), Some(0.0));
        assert!(close(relative_abs_difference(0.04, 0.06).unwrap(), 50.0, 1e-9));
        assert_eq!(relative_abs_difference(0.0, 0.06), None);
        assert!(close(relative_difference(0.2, 0.1).unwrap(), -50.0, 1e-12));
    }

    fn partition() -> GroupPartition {
        GroupPartition {
            labels: ["F".into(), "M".into()],
            members: [vec![0, 1], vec![2, 3]],
        }
    }

    #[test]
    fn designation() {
        let p = partition();
        let lo_first: BTreeMap<usize, f64> = [(0, 0.1), (1, 0.1), (2, 0.4), (3, 0.4)].into();
        let g = designate_groups(&lo_first, &p).unwrap();
        assert_eq!(g.disadvantaged_label(), "F");

        let hi_first: BTreeMap<usize, f64> = [(0, 0.4), (1, 0.4), (2, 0.1), (3, 0.1)].into();
        assert_eq!(designate_groups(&hi_first, &p).unwrap().disadvantaged_label(), "M");

        let tie: BTreeMap<usize, f64> = [(0, 0.2), (2, 0.2)].into();
        let g = designate_groups(&tie, &p).unwrap();
        assert_eq!(g.disadvantaged, 0);
        assert!(g.group_means[g.disadvantaged] <= g.group_means[g.advantaged()]);

        let missing: BTreeMap<usize, f64> = [(0, 0.2)].into();
        assert!(matches!(
            designate_groups(&missing, &p),
            Err(MetricsError::EmptyGroup { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(FairnessLossConfig::default().validate().is_ok());
        for bad in [
            FairnessLossConfig { beta: -1.0, ..Default::default() },
            FairnessLossConfig { temperature: 0.0, ..Default::default() },
            FairnessLossConfig { k: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
