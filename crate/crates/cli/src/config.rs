//! Run configuration: a line-oriented `key = value` file with `[sections]`.
//!
//! ```text
//! k = 10
//! seed = 42
//!
//! [paths]
//! interactions = data/interactions.tsv
//! attributes = data/attributes.tsv
//! out = runs/demo
//!
//! [model]
//! dim = 64
//!
//! [augment]
//! policy = zn
//! ```
//!
//! Keys before the first section header are top-level. `#` starts a comment
//! line. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fairaug::augment::AugmentConfig;
use fairaug::lightgcn::TrainConfig;
use fairaug::policies::{PolicySpec, ALL_POLICIES};
use fairaug::report::EvalMode;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub out: PathBuf,
    pub k: usize,
    pub seed: u64,
    pub model: TrainConfig,
    pub augment: AugmentConfig,
    pub policy: String,
    pub psi_u: f64,
    pub psi_i: f64,
    pub mode: EvalMode,
    pub setting: String,
    pub sweep_policies: Vec<String>,
    /// Worker threads for `sweep`; 0 lets the pool decide.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            interactions: None,
            attributes: None,
            out: PathBuf::from("out"),
            k: 10,
            seed: 42,
            model: TrainConfig::default(),
            augment: AugmentConfig::default(),
            policy: "zn".into(),
            psi_u: 0.35,
            psi_i: 0.20,
            mode: EvalMode::Reuse,
            setting: "default".into(),
            sweep_policies: ALL_POLICIES.iter().map(|s| s.to_string()).collect(),
            workers: 0,
        };
        cfg.sync();
        cfg
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub policy: Option<String>,
    pub max_epochs: Option<usize>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub temperature: Option<f64>,
    pub fairness_target: Option<f64>,
    pub mode: Option<EvalMode>,
}

fn parse_value<T: FromStr>(section: &str, key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow!("line {line}: [{section}] {key} = {value:?}: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {line_no}: malformed section header {line:?}"))?
                    .trim();
                if !["paths", "model", "augment", "evaluate", "sweep"].contains(&name) {
                    bail!("line {line_no}: unknown section [{name}]");
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected key = value, got {line:?}"))?;
            cfg.set(&section, key.trim(), value.trim(), line_no)?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let s = if section.is_empty() { "top" } else { section };
        macro_rules! v {
            () => {
                parse_value(s, key, value, line)?
            };
        }
        match (section, key) {
            ("", "k") => self.k = v!(),
            ("", "seed") => self.seed = v!(),
            ("paths", "interactions") => self.interactions = Some(PathBuf::from(value)),
            ("paths", "attributes") => self.attributes = Some(PathBuf::from(value)),
            ("paths", "out") => self.out = PathBuf::from(value),
            ("model", "dim") => self.model.dim = v!(),
            ("model", "layers") => self.model.layers = v!(),
            ("model", "learning_rate") => self.model.learning_rate = v!(),
            ("model", "epochs") => self.model.epochs = v!(),
            ("model", "reg") => self.model.reg = v!(),
            ("model", "batch_size") => self.model.batch_size = v!(),
            ("augment", "policy") => self.policy = value.to_string(),
            ("augment", "learning_rate") => self.augment.learning_rate = v!(),
            ("augment", "max_epochs") => self.augment.max_epochs = v!(),
            ("augment", "beta") => self.augment.beta = v!(),
            ("augment", "temperature") => self.augment.temperature = v!(),
            ("augment", "fairness_target") => {
                self.augment.fairness_target = if value == "none" { None } else { Some(v!()) }
            }
            ("augment", "psi_u") => self.psi_u = v!(),
            ("augment", "psi_i") => self.psi_i = v!(),
            ("evaluate", "mode") => self.mode = value.parse().map_err(|e| anyhow!("line {line}: {e}"))?,
            ("evaluate", "setting") => self.setting = value.to_string(),
            ("sweep", "policies") => {
                self.sweep_policies = value
                    .split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect()
            }
            ("sweep", "workers") => self.workers = v!(),
            _ => bail!("line {line}: unknown key {key:?} in [{s}]"),
        }
        Ok(())
    }

    /// Copies the shared `k` and `seed` into the stage configs.
    fn sync(&mut self) {
        self.model.k = self.k;
        self.model.seed = self.seed;
        self.augment.k = self.k;
        self.augment.seed = self.seed;
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.policy {
            self.policy = v.clone();
        }
        if let Some(v) = o.max_epochs {
            self.augment.max_epochs = v;
        }
        if let Some(v) = o.beta {
            self.augment.beta = v;
        }
        if let Some(v) = o.lr {
            self.augment.learning_rate = v;
        }
        if let Some(v) = o.temperature {
            self.augment.temperature = v;
        }
        if o.fairness_target.is_some() {
            self.augment.fairness_target = o.fairness_target;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        self.sync();
    }

    pub fn policy_spec(&self, name: &str) -> Result<PolicySpec> {
        let spec: PolicySpec = name.parse().map_err(|e| anyhow!("{e}"))?;
        spec.with_fractions(self.psi_u, self.psi_i)
            .map_err(|e| anyhow!("{e}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow!("{e}"))?;
        self.augment.validate().map_err(|e| anyhow!("{e}"))?;
        self.policy_spec(&self.policy)?;
        for p in &self.sweep_policies {
            self.policy_spec(p)?;
        }
        if self.setting.contains(['\t', '\n']) {
            bail!("setting label must not contain tabs or newlines");
        }
        Ok(())
    }

    /// The resolved configuration in the file format; parsing it back
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        writeln!(s, "k = {}", self.k).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "\n[paths]").unwrap();
        if let Some(p) = path(&self.interactions) {
            writeln!(s, "interactions = {p}").unwrap();
        }
        if let Some(p) = path(&self.attributes) {
            writeln!(s, "attributes = {p}").unwrap();
        }
        writeln!(s, "out = {}", self.out.display()).unwrap();
        let m = &self.model;
        writeln!(s, "\n[model]").unwrap();
        writeln!(s, "dim = {}", m.dim).unwrap();
        writeln!(s, "layers = {}", m.layers).unwrap();
        writeln!(s, "learning_rate = {:?}", m.learning_rate).unwrap();
        writeln!(s, "epochs = {}", m.epochs).unwrap();
        writeln!(s, "reg = {:?}", m.reg).unwrap();
        writeln!(s, "batch_size = {}", m.batch_size).unwrap();
        let a = &self.augment;
        writeln!(s, "\n[augment]").unwrap();
        writeln!(s, "policy = {}", self.policy).unwrap();
        writeln!(s, "learning_rate = {:?}", a.learning_rate).unwrap();
        writeln!(s, "max_epochs = {}", a.max_epochs).unwrap();
        writeln!(s, "beta = {:?}", a.beta).unwrap();
        writeln!(s, "temperature = {:?}", a.temperature).unwrap();
        match a.fairness_target {
            Some(t) => writeln!(s, "fairness_target = {t:?}").unwrap(),
            None => writeln!(s, "fairness_target = none").unwrap(),
        }
        writeln!(s, "psi_u = {:?}", self.psi_u).unwrap();
        writeln!(s, "psi_i = {:?}", self.psi_i).unwrap();
        writeln!(s, "\n[evaluate]").unwrap();
        writeln!(s, "mode = {}", self.mode.as_str()).unwrap();
        writeln!(s, "setting = {}", self.setting).unwrap();
        writeln!(s, "\n[sweep]").unwrap();
        writeln!(s, "policies = {}", self.sweep_policies.join(",")).unwrap();
        writeln!(s, "workers = {}", self.workers).unwrap();
        s
    }
}
