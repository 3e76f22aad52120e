//! Post-augmentation evaluation, policy comparison and utility/fairness
//! trade-off tables.
//!
//! A report holds, for the perturbation (validation) and test sets, the
//! overall NDCG@k, the two group means and ΔNDCG before and after
//! augmentation, plus relative differences: signed for NDCG, on magnitudes
//! for ΔNDCG (so −100% is parity).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{items_by_user, SplitDataset};
use crate::graph::{build_graph, normalized_adjacency, GraphError};
use crate::lightgcn::{
    score_users, topk, train_bpr, train_exclusions, GraphRecommender, ModelError, ModelParams,
    TrainConfig,
};
use crate::metrics::{self, group_mean, relative_abs_difference, relative_difference, GroupUtility};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no baseline report; evaluate the unaugmented model first")]
    MissingBaseline,
    #[error("group {label:?} has no users with {set} items")]
    EmptyGroup { label: String, set: &'static str },
    #[error("no reports to tabulate")]
    NoReports,
    #[error("report parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How post-augmentation scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Frozen model, augmented graph used for inference only.
    Reuse,
    /// Model retrained on the augmented train split.
    Retrain,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Reuse => "reuse",
            EvalMode::Retrain => "retrain",
        }
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reuse" => Ok(EvalMode::Reuse),
            "retrain" => Ok(EvalMode::Retrain),
            other => Err(format!("unknown evaluation mode {other:?} (expected reuse or retrain)")),
        }
    }
}

/// Utility of one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMetrics {
    pub ndcg: f64,
    pub disadvantaged_ndcg: f64,
    pub advantaged_ndcg: f64,
    pub delta: f64,
}

impl SetMetrics {
    pub fn from_means(ndcg: f64, disadvantaged_ndcg: f64, advantaged_ndcg: f64) -> Self {
        Self {
            ndcg,
            disadvantaged_ndcg,
            advantaged_ndcg,
            delta: disadvantaged_ndcg - advantaged_ndcg,
        }
    }
}

/// Before/after pair of one set with its relative differences (percent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetComparison {
    pub before: SetMetrics,
    pub after: SetMetrics,
    pub rel_ndcg: Option<f64>,
    pub rel_delta: Option<f64>,
}

impl SetComparison {
    pub fn new(before: SetMetrics, after: SetMetrics) -> Self {
        Self {
            before,
            after,
            rel_ndcg: relative_difference(before.ndcg, after.ndcg),
            rel_delta: relative_abs_difference(before.delta, after.delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub policy: String,
    /// Column label in policy tables, e.g. the dataset/model name.
    pub setting: String,
    pub mode: EvalMode,
    pub num_added_edges: usize,
    pub disadvantaged_group: String,
    pub advantaged_group: String,
    pub perturbation: SetComparison,
    pub test: SetComparison,
    /// Wall-clock seconds of the augmentation. Not written to `report.tsv`.
    pub runtime_secs: Option<f64>,
}

/// Exact NDCG@k of `model` on `graph`'s split, per set.
fn measure<M: GraphRecommender>(
    model: &M,
    splits: &SplitDataset,
    groups: &GroupUtility,
    k: usize,
) -> Result<(SetMetrics, SetMetrics), ReportError> {
    let graph = build_graph(&splits.train, splits.num_users, splits.num_items)?;
    let operator = normalized_adjacency(&graph, &[])?;
    let emb = model.embed(&operator)?;
    let exclude = train_exclusions(&graph);
    let one = |rows, set: &'static str| -> Result<SetMetrics, ReportError> {
        let relevant = items_by_user(rows, splits.num_users);
        let users: Vec<usize> = (0..splits.num_users).filter(|&u| !relevant[u].is_empty()).collect();
        let scores = score_users(&emb, splits.num_users, &users);
        let lists = topk(&scores, k, &exclude);
        let per_user = metrics::per_user_ndcg(&lists, &relevant, users.iter().copied(), k);
        let mean = |members: &[usize], label: &str| {
            group_mean(&per_user, members).ok_or_else(|| ReportError::EmptyGroup {
                label: label.to_string(),
                set,
            })
        };
        let d = mean(groups.disadvantaged_users(), groups.disadvantaged_label())?;
        let a = mean(groups.advantaged_users(), groups.advantaged_label())?;
        let overall = per_user.values().sum::<f64>() / per_user.len().max(1) as f64;
        Ok(SetMetrics::from_means(overall, d, a))
    };
    Ok((one(&splits.validation, "validation")?, one(&splits.test, "test")?))
}

/// Report of the unaugmented model: `after == before`, relative
/// differences 0.
pub fn baseline_report(
    model: &ModelParams,
    splits: &SplitDataset,
    groups: &GroupUtility,
    k: usize,
    setting: &str,
) -> Result<EvaluationReport, ReportError> {
    let (p, t) = measure(model, splits, groups, k)?;
    Ok(EvaluationReport {
        policy: "baseline".into(),
        setting: setting.into(),
        mode: EvalMode::Reuse,
        num_added_edges: 0,
        disadvantaged_group: groups.disadvantaged_label().into(),
        advantaged_group: groups.advantaged_label().into(),
        perturbation: SetComparison::new(p, p),
        test: SetComparison::new(t, t),
        runtime_secs: None,
    })
}

/// What [`evaluate`] needs besides the finalized splits.
pub struct EvaluationInput<'a> {
    pub model: &'a ModelParams,
    pub mode: EvalMode,
    /// Used by [`EvalMode::Retrain`] only.
    pub train_config: &'a TrainConfig,
    pub groups: &'a GroupUtility,
    pub k: usize,
    pub policy: &'a str,
    pub num_added_edges: usize,
    pub runtime_secs: Option<f64>,
}

/// Scores the finalized splits and compares them with `baseline`.
pub fn evaluate(
    input: &EvaluationInput<'_>,
    finalized: &SplitDataset,
    baseline: Option<&EvaluationReport>,
) -> Result<EvaluationReport, ReportError> {
    let baseline = baseline.ok_or(ReportError::MissingBaseline)?;
    let (p, t) = match input.mode {
        EvalMode::Reuse => measure(input.model, finalized, input.groups, input.k)?,
        EvalMode::Retrain => {
            let graph = build_graph(&finalized.train, finalized.num_users, finalized.num_items)?;
            let val = items_by_user(&finalized.validation, finalized.num_users);
            let outcome = train_bpr(&graph, input.train_config, Some(&val))?;
            measure(&outcome.params, finalized, input.groups, input.k)?
        }
    };
    Ok(EvaluationReport {
        policy: input.policy.into(),
        setting: baseline.setting.clone(),
        mode: input.mode,
        num_added_edges: input.num_added_edges,
        disadvantaged_group: input.groups.disadvantaged_label().into(),
        advantaged_group: input.groups.advantaged_label().into(),
        perturbation: SetComparison::new(baseline.perturbation.after, p),
        test: SetComparison::new(baseline.test.after, t),
        runtime_secs: input.runtime_secs,
    })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.1}%"),
        None => "n/a".into(),
    }
}

fn render_aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Policies × settings grid of the test-set relative difference in
/// |ΔNDCG|. Negative cells (mitigated) carry a trailing `*`; missing runs
/// read `n/a`.
pub fn policy_table(reports: &[EvaluationReport]) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    let mut policies: Vec<&str> = Vec::new();
    let mut settings: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), Option<f64>> = BTreeMap::new();
    for r in reports {
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
        cells.insert((&r.policy, &r.setting), r.test.rel_delta);
    }
    let mut rows = vec![std::iter::once("policy".to_string())
        .chain(settings.iter().map(|s| s.to_string()))
        .collect::<Vec<_>>()];
    for p in &policies {
        let mut row = vec![p.to_string()];
        for s in &settings {
            row.push(match cells.get(&(*p, *s)) {
                Some(Some(v)) if *v < 0.0 => format!("{}*", fmt_pct(Some(*v))),
                Some(v) => fmt_pct(*v),
                None => "n/a".into(),
            });
        }
        rows.push(row);
    }
    Ok(render_aligned(&rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Best,
    Second,
    Other,
}

/// Best and second-best flags; equal values share a flag.
pub fn rank_flags(values: &[f64], higher_is_better: bool) -> Vec<Rank> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| {
        if higher_is_better {
            b.total_cmp(a)
        } else {
            a.total_cmp(b)
        }
    });
    distinct.dedup();
    values
        .iter()
        .map(|v| {
            if distinct.first() == Some(v) {
                Rank::Best
            } else if distinct.get(1) == Some(v) {
                Rank::Second
            } else {
                Rank::Other
            }
        })
        .collect()
}

fn flagged(value: f64, rank: Rank) -> String {
    match rank {
        Rank::Best => format!("{value:.4} (1)"),
        Rank::Second => format!("{value:.4} (2)"),
        Rank::Other => format!("{value:.4}"),
    }
}

/// Test-set NDCG (higher is better) and |ΔNDCG| (lower is better) after
/// augmentation, one row per report; `(1)` marks the best value of a column
/// and `(2)` the second best.
pub fn tradeoff_table(reports: &[EvaluationReport]) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    let ndcg: Vec<f64> = reports.iter().map(|r| r.test.after.ndcg).collect();
    let gap: Vec<f64> = reports.iter().map(|r| r.test.after.delta.abs()).collect();
    let ndcg_rank = rank_flags(&ndcg, true);
    let gap_rank = rank_flags(&gap, false);
    let mut rows = vec![vec![
        "policy".to_string(),
        "setting".to_string(),
        "mode".to_string(),
        "NDCG".to_string(),
        "|ΔNDCG|".to_string(),
    ]];
    for (i, r) in reports.iter().enumerate() {
        rows.push(vec![
            r.policy.clone(),
            r.setting.clone(),
            r.mode.as_str().to_string(),
            flagged(ndcg[i], ndcg_rank[i]),
            flagged(gap[i], gap_rank[i]),
        ]);
    }
    Ok(render_aligned(&rows))
}

/// `(rel. diff NDCG, rel. diff |ΔNDCG|)` per report, test set.
pub fn scatter_tsv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("policy\tsetting\tmode\trel_diff_ndcg\trel_diff_delta_ndcg\n");
    for r in reports {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.policy,
            r.setting,
            r.mode.as_str(),
            f(r.test.rel_ndcg),
            f(r.test.rel_delta)
        )
        .unwrap();
    }
    out
}

const SET_FIELDS: [&str; 4] = ["ndcg", "disadvantaged_ndcg", "advantaged_ndcg", "delta"];

fn header() -> String {
    let mut cols: Vec<String> = [
        "policy",
        "setting",
        "mode",
        "num_added_edges",
        "disadvantaged_group",
        "advantaged_group",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for set in ["perturbation", "test"] {
        for stage in ["before", "after"] {
            for f in SET_FIELDS {
                cols.push(format!("{set}_{stage}_{f}"));
            }
        }
        cols.push(format!("{set}_rel_diff_ndcg"));
        cols.push(format!("{set}_rel_diff_delta_ndcg"));
    }
    cols.join("\t")
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:?}"))
}

/// Machine-readable `report.tsv`. Floats use shortest round-trip formatting
/// so [`reports_from_tsv`] restores them exactly.
pub fn reports_to_tsv(reports: &[EvaluationReport]) -> String {
    let mut out = header();
    out.push('\n');
    for r in reports {
        let mut cols = vec![
            r.policy.clone(),
            r.setting.clone(),
            r.mode.as_str().to_string(),
            r.num_added_edges.to_string(),
            r.disadvantaged_group.clone(),
            r.advantaged_group.clone(),
        ];
        for set in [&r.perturbation, &r.test] {
            for m in [&set.before, &set.after] {
                for v in [m.ndcg, m.disadvantaged_ndcg, m.advantaged_ndcg, m.delta] {
                    cols.push(format!("{v:?}"));
                }
            }
            cols.push(opt(set.rel_ndcg));
            cols.push(opt(set.rel_delta));
        }
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    out
}

pub fn reports_from_tsv(text: &str) -> Result<Vec<EvaluationReport>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header() => {}
        _ => {
            return Err(ReportError::Parse {
                line: 1,
                message: "unexpected header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 1;
        let err = |message: String| ReportError::Parse {
            line: line_no,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 + 2 * 10 {
            return Err(err(format!("expected 26 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let opt_num = |s: &str| if s == "n/a" { Ok(None) } else { num(s).map(Some) };
        let set = |at: usize| -> Result<SetComparison, ReportError> {
            let m = |o: usize| -> Result<SetMetrics, ReportError> {
                Ok(SetMetrics {
                    ndcg: num(f[o])?,
                    disadvantaged_ndcg: num(f[o + 1])?,
                    advantaged_ndcg: num(f[o + 2])?,
                    delta: num(f[o + 3])?,
                })
            };
            Ok(SetComparison {
                before: m(at)?,
                after: m(at + 4)?,
                rel_ndcg: opt_num(f[at + 8])?,
                rel_delta: opt_num(f[at + 9])?,
            })
        };
        out.push(EvaluationReport {
            policy: f[0].to_string(),
            setting: f[1].to_string(),
            mode: f[2].parse().map_err(err)?,
            num_added_edges: f[3].parse().map_err(|e| err(format!("{e}")))?,
            disadvantaged_group: f[4].to_string(),
            advantaged_group: f[5].to_string(),
            perturbation: set(6)?,
            test: set(16)?,
            runtime_secs: None,
        });
    }
    Ok(out)
}

/// Aligned, human-readable rendering of one report.
pub fn report_text(r: &EvaluationReport) -> String {
    let mut rows = vec![vec![
        "set".to_string(),
        "stage".to_string(),
        "NDCG".to_string(),
        format!("NDCG[{}]", r.disadvantaged_group),
        format!("NDCG[{}]", r.advantaged_group),
        "ΔNDCG".to_string(),
    ]];
    for (name, set) in [("perturbation", &r.perturbation), ("test", &r.test)] {
        for (stage, m) in [("before", &set.before), ("after", &set.after)] {
            rows.push(vec![
                name.to_string(),
                stage.to_string(),
                format!("{:.4}", m.ndcg),
                format!("{:.4}", m.disadvantaged_ndcg),
                format!("{:.4}", m.advantaged_ndcg),
                format!("{:+.4}", m.delta),
            ]);
        }
        rows.push(vec![
            name.to_string(),
            "rel. diff".to_string(),
            fmt_pct(set.rel_ndcg),
            String::new(),
            String::new(),
            fmt_pct(set.rel_delta),
        ]);
    }
    let mut out = format!(
        "policy {}  setting {}  mode {}  added edges {}\n",
        r.policy,
        r.setting,
        r.mode.as_str(),
        r.num_added_edges
    );
    if let Some(t) = r.runtime_secs {
        writeln!(out, "runtime {t:.2}s").unwrap();
    }
    out.push('\n');
    out.push_str(&render_aligned(&rows));
    out
}

fn io_err(path: &Path, e: impl ToString) -> ReportError {
    ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `report.tsv`, `report.txt` and `scatter.tsv` into `dir`.
pub fn write_report_files(dir: impl AsRef<Path>, reports: &[EvaluationReport]) -> Result<(), ReportError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    };
    write("report.tsv", reports_to_tsv(reports))?;
    write(
        "report.txt",
        reports.iter().map(report_text).collect::<Vec<_>>().join("\n"),
    )?;
    write("scatter.tsv", scatter_tsv(reports))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvaluationReport>, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    reports_from_tsv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(policy: &str, setting: &str, before: (f64, f64, f64), after: (f64, f64, f64)) -> EvaluationReport {
        let b = SetMetrics::from_means(before.0, before.1, before.2);
        let a = SetMetrics::from_means(after.0, after.1, after.2);
        EvaluationReport {
            policy: policy.into(),
            setting: setting.into(),
            mode: EvalMode::Reuse,
            num_added_edges: 3,
            disadvantaged_group: "F".into(),
            advantaged_group: "M".into(),
            perturbation: SetComparison::new(b, a),
            test: SetComparison::new(b, a),
            runtime_secs: None,
        }
    }

    #[test]
    fn relative_differences_follow_the_examples() {
        let b = SetMetrics::from_means(0.3, 0.25, 0.30);
        let a = SetMetrics::from_means(0.3, 0.28, 0.30);
        let c = SetComparison::new(b, a);
        assert!((c.rel_delta.unwrap() - -60.0).abs() < 1e-9);

        let a = SetMetrics::from_means(0.3, 0.30, 0.30);
        assert_eq!(SetComparison::new(b, a).rel_delta, Some(-100.0));

        let z = SetMetrics::from_means(0.3, 0.3, 0.3);
        assert_eq!(SetComparison::new(z, z).rel_delta, None);
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let reports = vec![
            report("zn", "synthetic", (0.1234567891234, 0.1, 0.2), (0.13, 0.15, 0.1700000001)),
            report("ld+ip", "other", (0.3, 0.3, 0.3), (0.3, 0.3, 0.3)),
        ];
        let text = reports_to_tsv(&reports);
        let back = reports_from_tsv(&text).unwrap();
        assert_eq!(back, reports);
        for r in &back {
            for s in [&r.perturbation, &r.test] {
                for m in [s.before, s.after] {
                    assert_eq!(m.delta, m.disadvantaged_ndcg - m.advantaged_ndcg);
                }
            }
        }
        assert!(reports_from_tsv("bad header\n").is_err());
    }

    #[test]
    fn policy_table_cells() {
        let r = report("zn", "s1", (0.3, 0.25, 0.30), (0.3, 0.28, 0.30));
        let t = policy_table(std::slice::from_ref(&r)).unwrap();
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("-60.0%*"));

        let worse = report("ld", "s2", (0.3, 0.25, 0.30), (0.3, 0.2, 0.30));
        let t = policy_table(&[r, worse]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("n/a"));
        assert!(lines[2].contains("+100.0%") && !lines[2].contains('*'));

        assert!(matches!(policy_table(&[]), Err(ReportError::NoReports)));
    }

    #[test]
    fn rank_flags_mark_best_and_ties() {
        assert_eq!(rank_flags(&[0.3, 0.2], true), vec![Rank::Best, Rank::Second]);
        assert_eq!(rank_flags(&[0.3], true), vec![Rank::Best]);
        assert_eq!(
            rank_flags(&[0.2, 0.2, 0.1], true),
            vec![Rank::Best, Rank::Best, Rank::Second]
        );
        assert_eq!(
            rank_flags(&[0.05, 0.01, 0.02], false),
            vec![Rank::Other, Rank::Best, Rank::Second]
        );
    }

    #[test]
    fn tradeoff_table_flags() {
        let a = report("a", "s", (0.3, 0.2, 0.3), (0.3, 0.2, 0.3));
        let b = report("b", "s", (0.2, 0.2, 0.3), (0.2, 0.2, 0.3));
        let t = tradeoff_table(&[a, b]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].contains("0.3000 (1)"));
        assert!(lines[2].contains("0.2000 (2)"));
        // equal |ΔNDCG| in both rows
        assert_eq!(t.matches("0.1000 (1)").count(), 2);
    }

    #[test]
    fn scatter_has_one_row_per_report() {
        let r = report("zn", "s", (0.3, 0.25, 0.30), (0.33, 0.28, 0.30));
        let s = scatter_tsv(&[r]);
        assert_eq!(s.lines().count(), 2);
        assert!(s.contains("10.000000\t-60.000000"));
    }
}
