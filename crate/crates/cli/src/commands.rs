//! The pipeline stages behind each subcommand.
//!
//! Everything lives under the configured output directory:
//!
//! ```text
//! <out>/split/        train.tsv validation.tsv test.tsv users.tsv items.tsv provenance.txt
//! <out>/model.txt     LightGCN checkpoint
//! <out>/train_log.tsv
//! <out>/baseline/     report.tsv report.txt scatter.tsv
//! <out>/runs/<policy>/ added_edges.tsv trace.tsv result.json provenance.txt report.*
//! <out>/sweep/        policy_table.txt tradeoff_table.txt report.tsv scatter.tsv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use fairaug::augment::{
    finalize, read_added_edges, write_added_edges, write_trace, RunSummary,
};
use fairaug::dataset::{
    group_partition, load_interactions, temporal_split, GroupPartition, InteractionDataset,
    SplitDataset,
};
use fairaug::graph::build_graph;
use fairaug::lightgcn::{load_checkpoint, save_checkpoint, train_bpr, ModelParams};
use fairaug::dataset::items_by_user;
use fairaug::pipeline::{run_policy, Baseline};
use fairaug::report::{
    baseline_report, evaluate, policy_table, tradeoff_table, write_report_files, EvaluationInput,
    EvaluationReport,
};
use fairaug::synthetic::{generate, thin_group_activity, SyntheticConfig};

use crate::config::RunConfig;

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join("split")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.txt")
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.root.join("baseline")
    }

    pub fn run_dir(&self, policy: &str) -> PathBuf {
        self.root.join("runs").join(policy)
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Resolved config plus content hashes of the stage inputs.
fn write_provenance(dir: &Path, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let mut text = String::from("# resolved configuration\n");
    text.push_str(&cfg.to_text());
    text.push_str("\n# input sha256\n");
    for p in inputs {
        writeln!(text, "{}  {}", sha256_file(p)?, p.display()).unwrap();
    }
    fs::write(dir.join("provenance.txt"), text)?;
    Ok(())
}

/// Writes `interactions.tsv` and `attributes.tsv` of a synthetic dataset
/// into `dir`. With `thin = Some((label, keep))` the users of `label` keep
/// only a `keep` share of their interactions.
pub fn cmd_generate(
    dir: &Path,
    synth: &SyntheticConfig,
    thin: Option<(&str, f64)>,
) -> Result<InteractionDataset> {
    let mut ds = generate(synth)?;
    if let Some((label, keep)) = thin {
        if !(keep > 0.0 && keep <= 1.0) {
            bail!("keep fraction must be in (0, 1], got {keep}");
        }
        ds = thin_group_activity(&ds, label, keep, synth.seed)?;
    }
    fs::create_dir_all(dir)?;
    let mut inter = String::from("#user\titem\ttimestamp\n");
    for x in &ds.interactions {
        writeln!(inter, "{}\t{}\t{}", ds.user_ids[x.user], ds.item_ids[x.item], x.timestamp).unwrap();
    }
    fs::write(dir.join("interactions.tsv"), inter)?;
    let mut attr = String::from("#user\tgroup\n");
    for (id, g) in ds.user_ids.iter().zip(&ds.group_of) {
        writeln!(attr, "{id}\t{g}").unwrap();
    }
    fs::write(dir.join("attributes.tsv"), attr)?;
    Ok(ds)
}

/// A split directory loaded back with its id tables and groups.
#[derive(Debug, Clone)]
pub struct SplitState {
    pub splits: SplitDataset,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub partition: GroupPartition,
}

pub fn cmd_split(cfg: &RunConfig) -> Result<SplitState> {
    let interactions = cfg
        .interactions
        .clone()
        .ok_or_else(|| anyhow!("no interactions file configured ([paths] interactions)"))?;
    let attributes = cfg
        .attributes
        .clone()
        .ok_or_else(|| anyhow!("no attributes file configured ([paths] attributes)"))?;
    let ds = load_interactions(&interactions, &attributes)?;
    let partition = group_partition(&ds)?;
    let splits = temporal_split(&ds);
    let layout = Layout::new(&cfg.out);
    let dir = layout.split_dir();
    splits.write_tsv(&dir)?;

    let mut users = String::from("#user\toriginal\tgroup\n");
    for (u, (id, g)) in ds.user_ids.iter().zip(&ds.group_of).enumerate() {
        writeln!(users, "{u}\t{id}\t{g}").unwrap();
    }
    fs::write(dir.join("users.tsv"), users)?;
    let mut items = String::from("#item\toriginal\n");
    for (i, id) in ds.item_ids.iter().enumerate() {
        writeln!(items, "{i}\t{id}").unwrap();
    }
    fs::write(dir.join("items.tsv"), items)?;
    write_provenance(&dir, cfg, &[interactions, attributes])?;
    log::info!(
        "split {} users / {} items: {} train, {} validation, {} test, {} users dropped",
        splits.num_users,
        splits.num_items,
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        splits.dropped_users.len()
    );
    Ok(SplitState {
        splits,
        user_ids: ds.user_ids,
        item_ids: ds.item_ids,
        partition,
    })
}

fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

pub fn load_split(layout: &Layout) -> Result<SplitState> {
    let dir = layout.split_dir();
    if !dir.join("users.tsv").exists() {
        bail!("no split found in {}; run split first", dir.display());
    }
    let users = read_table(&dir.join("users.tsv"))?;
    let items = read_table(&dir.join("items.tsv"))?;
    let mut user_ids = Vec::with_capacity(users.len());
    let mut records = Vec::new();
    for (u, row) in users.iter().enumerate() {
        if row.len() != 3 || row[0] != u.to_string() {
            bail!("malformed users.tsv row {u}");
        }
        user_ids.push(row[1].clone());
        records.push((row[1].clone(), row[2].clone()));
    }
    let item_ids: Vec<String> = items.iter().map(|r| r.get(1).cloned().unwrap_or_default()).collect();
    let splits = SplitDataset::read_tsv(&dir, user_ids.len(), item_ids.len())?;

    let mut labels: Vec<String> = records.iter().map(|(_, g)| g.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != 2 {
        bail!("users.tsv must carry exactly two group labels, found {labels:?}");
    }
    let members = [0, 1].map(|g| {
        records
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l == labels[g])
            .map(|(u, _)| u)
            .collect::<Vec<_>>()
    });
    Ok(SplitState {
        splits,
        user_ids,
        item_ids,
        partition: GroupPartition {
            labels: [labels[0].clone(), labels[1].clone()],
            members,
        },
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(ModelParams, Option<f64>)> {
    let layout = Layout::new(&cfg.out);
    let state = load_split(&layout)?;
    let s = &state.splits;
    let graph = build_graph(&s.train, s.num_users, s.num_items)?;
    let val = items_by_user(&s.validation, s.num_users);
    let outcome = train_bpr(&graph, &cfg.model, Some(&val))?;
    save_checkpoint(layout.model(), &outcome.params)?;
    let mut log_text = String::from("epoch\tbpr_loss\tvalidation_ndcg\n");
    for (e, loss) in outcome.losses.iter().enumerate() {
        let ndcg = outcome.validation_ndcg.get(e).copied().unwrap_or(f64::NAN);
        writeln!(log_text, "{}\t{loss:.8}\t{ndcg:.8}", e + 1).unwrap();
    }
    fs::write(layout.root.join("train_log.tsv"), log_text)?;
    log::info!(
        "kept epoch {} with validation NDCG@{} = {:.4}",
        outcome.best_epoch,
        cfg.k,
        outcome.best_ndcg.unwrap_or(0.0)
    );
    Ok((outcome.params, outcome.best_ndcg))
}

fn load_model(layout: &Layout) -> Result<ModelParams> {
    let path = layout.model();
    if !path.exists() {
        bail!("no model checkpoint at {}; run train first", path.display());
    }
    Ok(load_checkpoint(&path)?)
}

/// Outputs of one augmentation run.
#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub runtime_secs: f64,
}

fn augment_with(
    cfg: &RunConfig,
    layout: &Layout,
    state: &SplitState,
    model: &ModelParams,
    baseline: &Baseline,
    policy: &str,
) -> Result<AugmentOutput> {
    let spec = cfg.policy_spec(policy)?;
    let started = Instant::now();
    let run = run_policy(model, baseline, &spec, &cfg.augment)
        .with_context(|| format!("policy {policy}"))?;
    let runtime_secs = started.elapsed().as_secs_f64();

    let dir = layout.run_dir(&spec.name());
    fs::create_dir_all(&dir)?;
    write_added_edges(dir.join("added_edges.tsv"), &run.result.added_edges, &state.user_ids, &state.item_ids)?;
    write_trace(dir.join("trace.tsv"), &run.result.trace)?;
    let summary = RunSummary::new(&spec.name(), &run.result, &baseline.groups, &cfg.augment);
    summary.write(dir.join("result.json"))?;
    fs::write(dir.join("runtime.txt"), format!("{runtime_secs:.3}\n"))?;
    let split_dir = layout.split_dir();
    write_provenance(
        &dir,
        cfg,
        &[
            split_dir.join("train.tsv"),
            split_dir.join("validation.tsv"),
            split_dir.join("test.tsv"),
            split_dir.join("users.tsv"),
            layout.model(),
        ],
    )?;
    log::info!(
        "{policy}: {} of {} candidate edges added (epoch {}); perturbation |ΔNDCG| {:.4} -> {:.4}",
        summary.num_added_edges,
        summary.num_candidates,
        summary.best_epoch,
        summary.before.delta.abs(),
        summary.after.delta.abs()
    );
    Ok(AugmentOutput {
        run_dir: dir,
        summary,
        runtime_secs,
    })
}

struct Loaded {
    layout: Layout,
    state: SplitState,
    model: ModelParams,
    baseline: Baseline,
}

fn load_all(cfg: &RunConfig) -> Result<Loaded> {
    let layout = Layout::new(&cfg.out);
    let state = load_split(&layout)?;
    let model = load_model(&layout)?;
    let baseline = Baseline::compute(&model, &state.splits, &state.partition, cfg.k)?;
    Ok(Loaded {
        layout,
        state,
        model,
        baseline,
    })
}

pub fn cmd_augment(cfg: &RunConfig) -> Result<AugmentOutput> {
    let l = load_all(cfg)?;
    augment_with(cfg, &l.layout, &l.state, &l.model, &l.baseline, &cfg.policy)
}

fn baseline_with(cfg: &RunConfig, l: &Loaded) -> Result<EvaluationReport> {
    let report = baseline_report(&l.model, &l.state.splits, &l.baseline.groups, cfg.k, &cfg.setting)?;
    write_report_files(l.layout.baseline_dir(), std::slice::from_ref(&report))?;
    Ok(report)
}

fn evaluate_with(
    cfg: &RunConfig,
    l: &Loaded,
    base: &EvaluationReport,
    policy: &str,
) -> Result<EvaluationReport> {
    let spec = cfg.policy_spec(policy)?;
    let dir = l.layout.run_dir(&spec.name());
    let edges_path = dir.join("added_edges.tsv");
    if !edges_path.exists() {
        bail!(
            "no augmentation run at {}; run augment --policy {} first",
            dir.display(),
            spec.name()
        );
    }
    let edges = read_added_edges(&edges_path)?;
    let runtime_secs = fs::read_to_string(dir.join("runtime.txt"))
        .ok()
        .and_then(|s| s.trim().parse().ok());
    let finalized = finalize(&edges, &l.state.splits);
    let input = EvaluationInput {
        model: &l.model,
        mode: cfg.mode,
        train_config: &cfg.model,
        groups: &l.baseline.groups,
        k: cfg.k,
        policy: &spec.name(),
        num_added_edges: edges.len(),
        runtime_secs,
    };
    let report = evaluate(&input, &finalized, Some(base))?;
    write_report_files(&dir, std::slice::from_ref(&report))?;
    Ok(report)
}

/// Scores the run of `cfg.policy` against the (re)computed baseline.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    let l = load_all(cfg)?;
    let base = baseline_with(cfg, &l)?;
    evaluate_with(cfg, &l, &base, &cfg.policy)
}

/// Result of a sweep: one report per successful policy, plus failures.
#[derive(Debug)]
pub struct SweepOutput {
    pub reports: Vec<EvaluationReport>,
    pub failures: Vec<(String, String)>,
    pub policy_table: String,
    pub tradeoff_table: String,
}

/// Augments and evaluates every configured policy, in parallel, and writes
/// the comparison tables. A failing policy becomes an `n/a` cell.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    let l = load_all(cfg)?;
    let base = baseline_with(cfg, &l)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("cannot start worker pool")?;
    let outcomes: Vec<(String, Result<EvaluationReport>)> = pool.install(|| {
        cfg.sweep_policies
            .par_iter()
            .map(|p| {
                let r = augment_with(cfg, &l.layout, &l.state, &l.model, &l.baseline, p)
                    .and_then(|_| evaluate_with(cfg, &l, &base, p));
                (p.clone(), r)
            })
            .collect()
    });

    let mut reports = vec![base];
    let mut failures = Vec::new();
    for (p, r) in outcomes {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                log::warn!("policy {p} failed: {e:#}");
                failures.push((p, format!("{e:#}")));
            }
        }
    }
    let policy_table = policy_table(&reports)?;
    let tradeoff_table = tradeoff_table(&reports)?;
    let dir = l.layout.sweep_dir();
    write_report_files(&dir, &reports)?;
    fs::write(dir.join("policy_table.txt"), &policy_table)?;
    fs::write(dir.join("tradeoff_table.txt"), &tradeoff_table)?;
    Ok(SweepOutput {
        reports,
        failures,
        policy_table,
        tradeoff_table,
    })
}
