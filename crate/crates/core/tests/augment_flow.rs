use fairaug::augment::{finalize, optimize, AugmentConfig, AugmentProblem};
use fairaug::dataset::{group_partition, items_by_user, temporal_split, SplitDataset};
use fairaug::graph::build_graph;
use fairaug::lightgcn::{train_bpr, ModelParams, TrainConfig};
use fairaug::pipeline::{run_policy, Baseline, PolicyRun};
use fairaug::policies::PolicySpec;
use fairaug::report::{
    baseline_report, evaluate, read_reports, reports_from_tsv, reports_to_tsv, write_report_files,
    EvalMode, EvaluationInput,
};
use fairaug::synthetic::{generate, thin_group_activity, SyntheticConfig};

struct Fixture {
    model: ModelParams,
    splits: SplitDataset,
    baseline: Baseline,
}

fn fixture() -> Fixture {
    let synth = SyntheticConfig {
        num_users: 100,
        num_items: 150,
        ..SyntheticConfig::default()
    };
    let ds = thin_group_activity(&generate(&synth).unwrap(), "b", 0.5, synth.seed).unwrap();
    let part = group_partition(&ds).unwrap();
    let splits = temporal_split(&ds);
    let graph = build_graph(&splits.train, splits.num_users, splits.num_items).unwrap();
    let val = items_by_user(&splits.validation, splits.num_users);
    let cfg = TrainConfig {
        dim: 16,
        epochs: 30,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    };
    let model = train_bpr(&graph, &cfg, Some(&val)).unwrap().params;
    let baseline = Baseline::compute(&model, &splits, &part, 10).unwrap();
    Fixture {
        model,
        splits,
        baseline,
    }
}

/// Settings under which edges do get added at this scale.
fn active_config() -> AugmentConfig {
    AugmentConfig {
        beta: 0.0,
        temperature: 0.05,
        max_epochs: 60,
        ..AugmentConfig::default()
    }
}

fn run(f: &Fixture, policy: &str, cfg: &AugmentConfig) -> PolicyRun {
    let spec: PolicySpec = policy.parse().unwrap();
    run_policy(&f.model, &f.baseline, &spec, cfg).unwrap()
}

#[test]
fn optimization_bookkeeping() {
    let f = fixture();
    let cfg = active_config();
    let r = run(&f, "ip", &cfg);
    let res = &r.result;

    // row 0 is the unaugmented graph
    let first = &res.trace[0];
    assert_eq!(first.epoch, 0);
    assert_eq!(first.num_edges, 0);
    assert_eq!(first.abs_delta, res.before.delta.abs());
    assert_eq!(res.trace.len(), cfg.max_epochs + 1);

    // best = smallest |Δ|, ties to fewer edges, then earlier epoch
    let best = &res.trace[res.best_epoch];
    for row in &res.trace {
        assert!(
            (best.abs_delta, best.num_edges, best.epoch) <= (row.abs_delta, row.num_edges, row.epoch)
        );
    }
    assert_eq!(best.num_edges, res.added_edges.len());
    assert_eq!(res.after.delta.abs(), best.abs_delta);
    assert!(res.after.delta.abs() <= res.before.delta.abs());
    assert!(!res.added_edges.is_empty());

    let dis = f.baseline.groups.disadvantaged_users();
    for &(u, i) in &res.added_edges {
        assert!(dis.binary_search(&u).is_ok());
        assert!(!f.baseline.graph.has_edge(u, i));
        r.space.index_of(u, i).unwrap();
    }
}

#[test]
fn runs_are_deterministic() {
    let f = fixture();
    let a = run(&f, "ip", &active_config());
    let b = run(&f, "ip", &active_config());
    assert_eq!(a.result, b.result);
}

#[test]
fn fairness_target_stops_early() {
    let f = fixture();
    let full = run(&f, "ip", &active_config()).result;
    let target = full.after.delta.abs();
    let cfg = AugmentConfig {
        fairness_target: Some(target),
        ..active_config()
    };
    let stopped = run(&f, "ip", &cfg).result;
    assert!(stopped.after.delta.abs() <= target);
    assert_eq!(stopped.trace.len(), full.best_epoch + 1);
}

#[test]
fn optimize_rejects_invalid_config() {
    let f = fixture();
    let spec: PolicySpec = "bm".parse().unwrap();
    let r = run_policy(&f.model, &f.baseline, &spec, &AugmentConfig { max_epochs: 1, ..AugmentConfig::default() }).unwrap();
    let problem = AugmentProblem {
        model: &f.model,
        graph: &f.baseline.graph,
        space: &r.space,
        groups: &f.baseline.groups,
        relevant: &f.baseline.relevant,
    };
    let bad = AugmentConfig { temperature: 0.0, ..AugmentConfig::default() };
    assert!(optimize(&problem, &bad).is_err());
}

#[test]
fn finalize_moves_edges_into_train() {
    let f = fixture();
    let r = run(&f, "ip", &active_config());
    let out = finalize(&r.result.added_edges, &f.splits);
    assert_eq!(out.train.len(), f.splits.train.len() + r.result.added_edges.len());
    for &(u, i) in &r.result.added_edges {
        let latest = f.splits.train.iter().filter(|x| x.user == u).map(|x| x.timestamp).max().unwrap();
        let row = out.train.iter().find(|x| x.user == u && x.item == i).unwrap();
        assert_eq!(row.timestamp, latest + 1);
        assert!(!out.validation.iter().chain(&out.test).any(|x| x.user == u && x.item == i));
    }
    assert!(out.train.windows(2).all(|w| (w[0].user, w[0].timestamp, w[0].item) <= (w[1].user, w[1].timestamp, w[1].item)));
}

#[test]
fn reports_round_trip_through_files() {
    let f = fixture();
    let r = run(&f, "ip", &active_config());
    let finalized = finalize(&r.result.added_edges, &f.splits);
    let base = baseline_report(&f.model, &f.splits, &f.baseline.groups, 10, "synthetic").unwrap();
    assert_eq!(base.test.rel_delta, Some(0.0));
    let input = EvaluationInput {
        model: &f.model,
        mode: EvalMode::Reuse,
        train_config: &TrainConfig::default(),
        groups: &f.baseline.groups,
        k: 10,
        policy: "ip",
        num_added_edges: r.result.added_edges.len(),
        runtime_secs: Some(1.5),
    };
    assert!(evaluate(&input, &finalized, None).is_err());
    let report = evaluate(&input, &finalized, Some(&base)).unwrap();
    assert_eq!(report.test.before, base.test.after);

    let reports = vec![base, report];
    let parsed = reports_from_tsv(&reports_to_tsv(&reports)).unwrap();
    let mut expected = reports.clone();
    for e in &mut expected {
        e.runtime_secs = None;
    }
    assert_eq!(parsed, expected);

    let dir = tempfile::tempdir().unwrap();
    write_report_files(dir.path(), &reports).unwrap();
    assert_eq!(read_reports(dir.path().join("report.tsv")).unwrap(), expected);
    for name in ["report.txt", "scatter.tsv"] {
        assert!(dir.path().join(name).exists());
    }
}
