use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use fairaug::report::{report_text, EvalMode};
use fairaug::synthetic::SyntheticConfig;
use fairaug_cli::{
    cmd_augment, cmd_evaluate, cmd_generate, cmd_split, cmd_sweep, cmd_train, Overrides, RunConfig,
};

/// Learn user-item edges that narrow the recommendation-quality gap between
/// two user groups of a LightGCN recommender.
#[derive(Parser, Debug)]
#[command(name = "fairaug", version)]
struct Cli {
    /// Configuration file (key = value with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ranking cutoff for NDCG@k and policy sampling.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct AugmentFlags {
    /// One of bm, zn, ld, sp, fr, ip, zn+ip, ld+ip, sp+ip, fr+ip.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Stop once the perturbation-set |ΔNDCG| is at or below this value.
    #[arg(long)]
    fairness_target: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset (interactions.tsv, attributes.tsv).
    Generate {
        #[arg(long, default_value = "data")]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        /// Group label whose activity is thinned.
        #[arg(long)]
        thin_group: Option<String>,
        /// Share of interactions kept for the thinned group.
        #[arg(long, default_value_t = 0.4)]
        keep: f64,
    },
    /// Temporal 7:1:2 split of the configured dataset.
    Split {
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        attributes: Option<PathBuf>,
    },
    /// Train LightGCN with BPR; prints the kept validation NDCG@k.
    Train,
    /// Learn the added edges for one policy.
    Augment(AugmentFlags),
    /// Score an augmentation run on the test set against the baseline.
    Evaluate {
        #[arg(long)]
        policy: Option<String>,
        /// reuse (frozen model, augmented graph) or retrain.
        #[arg(long)]
        mode: Option<EvalMode>,
    },
    /// Augment and evaluate several policies and tabulate them.
    Sweep {
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        augment: AugmentFlags,
    },
}

fn resolve(cli: &Cli, flags: Option<&AugmentFlags>, mode: Option<EvalMode>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let empty = AugmentFlags::default();
    let f = flags.unwrap_or(&empty);
    cfg.apply(&Overrides {
        out: cli.out.clone(),
        k: cli.k,
        seed: cli.seed,
        policy: f.policy.clone(),
        max_epochs: f.max_epochs,
        beta: f.beta,
        lr: f.lr,
        temperature: f.temperature,
        fairness_target: f.fairness_target,
        mode,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate {
            dir,
            users,
            items,
            thin_group,
            keep,
        } => {
            let synth = SyntheticConfig {
                num_users: *users,
                num_items: *items,
                seed: cli.seed.unwrap_or(SyntheticConfig::default().seed),
                ..SyntheticConfig::default()
            };
            let ds = cmd_generate(dir, &synth, thin_group.as_deref().map(|g| (g, *keep)))?;
            println!(
                "wrote {} interactions of {} users / {} items to {}",
                ds.interactions.len(),
                ds.num_users,
                ds.num_items,
                dir.display()
            );
        }
        Command::Split {
            interactions,
            attributes,
        } => {
            let mut cfg = resolve(&cli, None, None)?;
            if interactions.is_some() {
                cfg.interactions = interactions.clone();
            }
            if attributes.is_some() {
                cfg.attributes = attributes.clone();
            }
            cfg.validate()?;
            let s = cmd_split(&cfg)?;
            println!(
                "train {} / validation {} / test {} interactions; {} users dropped",
                s.splits.train.len(),
                s.splits.validation.len(),
                s.splits.test.len(),
                s.splits.dropped_users.len()
            );
        }
        Command::Train => {
            let cfg = resolve(&cli, None, None)?;
            cfg.validate()?;
            let (_, ndcg) = cmd_train(&cfg)?;
            match ndcg {
                Some(v) => println!("validation NDCG@{}: {v:.4}", cfg.k),
                None => println!("validation NDCG@{}: n/a", cfg.k),
            }
        }
        Command::Augment(flags) => {
            let cfg = resolve(&cli, Some(flags), None)?;
            cfg.validate()?;
            let out = cmd_augment(&cfg)?;
            let s = &out.summary;
            println!(
                "{}: {} edges added ({} candidates), perturbation ΔNDCG {:+.4} -> {:+.4}; run dir {}",
                s.policy,
                s.num_added_edges,
                s.num_candidates,
                s.before.delta,
                s.after.delta,
                out.run_dir.display()
            );
        }
        Command::Evaluate { policy, mode } => {
            let flags = AugmentFlags {
                policy: policy.clone(),
                ..Default::default()
            };
            let cfg = resolve(&cli, Some(&flags), *mode)?;
            cfg.validate()?;
            print!("{}", report_text(&cmd_evaluate(&cfg)?));
        }
        Command::Sweep {
            policies,
            workers,
            augment,
        } => {
            let mut cfg = resolve(&cli, Some(augment), None)?;
            if let Some(p) = policies {
                cfg.sweep_policies = p.clone();
            }
            if let Some(w) = workers {
                cfg.workers = *w;
            }
            cfg.validate()?;
            let out = cmd_sweep(&cfg)?;
            println!("{}", out.policy_table);
            println!("{}", out.tradeoff_table);
            for (p, e) in &out.failures {
                eprintln!("policy {p} failed: {e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
