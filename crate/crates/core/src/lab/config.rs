//! Experiment configuration: a single TOML file, strictly validated.
//!
//! Every section has explicit defaults, and the resolved config written
//! next to the outputs spells all of them out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::Attack;
use crate::datasets::DatasetSpec;
use crate::diffusion::{SamplerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::DataKind;
use crate::personalize::{DbConfig, TiConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::unlearn::{scaled_budget, MinmaxConfig, NormKind, UnlearnConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FeasibleRegion,
    BudgetAblation,
    StepsAblation,
    PurifySweep,
    Main,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::FeasibleRegion,
        ExperimentKind::BudgetAblation,
        ExperimentKind::StepsAblation,
        ExperimentKind::PurifySweep,
        ExperimentKind::Main,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FeasibleRegion => "feasible-region",
            ExperimentKind::BudgetAblation => "budget-ablation",
            ExperimentKind::StepsAblation => "steps-ablation",
            ExperimentKind::PurifySweep => "purify-sweep",
            ExperimentKind::Main => "main",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config("experiment", format!("unknown experiment `{name}`")))
    }

    /// Column name of the swept quantity.
    pub fn sweep_key(self) -> &'static str {
        match self {
            ExperimentKind::FeasibleRegion | ExperimentKind::StepsAblation => "k",
            ExperimentKind::BudgetAblation | ExperimentKind::Main => "budget_255",
            ExperimentKind::PurifySweep => "t_star",
        }
    }

    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            ExperimentKind::FeasibleRegion => vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            ExperimentKind::StepsAblation => vec![1.0, 2.0, 4.0, 8.0],
            ExperimentKind::BudgetAblation => vec![4.0, 8.0, 12.0, 32.0],
            ExperimentKind::PurifySweep => vec![0.0, 10.0, 30.0, 100.0, 150.0, 200.0],
            ExperimentKind::Main => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 200,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind, self.beta_min, self.beta_max)
    }
}

/// Crafting knobs. The budget is given in units of 1/255 and scaled to the
/// data range of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    pub budget_255: f64,
    pub lambda0: f64,
    pub eta_lambda: f64,
    pub tolerance: f64,
    pub steps: usize,
    pub lr: f64,
    pub k: usize,
    pub n_mc: usize,
    pub norm: NormKind,
    pub shuffle: bool,
    pub per_identity: bool,
    /// Alternate token refreshes with ρ updates.
    pub minmax: bool,
    pub rho_width: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let base = UnlearnConfig::default();
        Self {
            budget_255: 10.0,
            lambda0: base.lambda0,
            eta_lambda: base.eta_lambda,
            tolerance: base.tolerance,
            steps: base.steps,
            lr: base.lr,
            k: base.k,
            n_mc: base.n_mc,
            norm: base.norm,
            shuffle: false,
            per_identity: true,
            minmax: false,
            rho_width: 64,
        }
    }
}

impl UnlearnSection {
    pub fn to_config(&self, data: DataKind, seed: u64) -> UnlearnConfig {
        UnlearnConfig {
            budget: scaled_budget(data, self.budget_255),
            lambda0: self.lambda0,
            eta_lambda: self.eta_lambda,
            tolerance: self.tolerance,
            steps: self.steps,
            lr: self.lr,
            k: self.k,
            n_mc: self.n_mc,
            norm: self.norm,
            shuffle: self.shuffle,
            per_identity: self.per_identity,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ti,
    Db,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Personalization method attacked by the protection score.
    pub method: Method,
    /// Gaussian kernel bandwidth of the distance.
    pub bandwidth: f64,
    /// Generations drawn from each personalized model.
    pub generations: usize,
    /// Sampler used for those generations (its seed is per run).
    pub sampler: SamplerConfig,
    /// Latents used by the feasible-region sweep.
    pub carry_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            method: Method::Ti,
            bandwidth: 0.1,
            generations: 256,
            sampler: SamplerConfig {
                k: 50,
                ..SamplerConfig::default()
            },
            carry_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: ExperimentKind,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub dm: TrainConfig,
    pub personalize: TiConfig,
    pub dreambooth: DbConfig,
    pub unlearn: UnlearnSection,
    pub minmax: MinmaxConfig,
    pub attack: Attack,
    /// Swept values; empty means the experiment's default sweep.
    pub sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval: EvalSection,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            experiment: ExperimentKind::Main,
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            dm: TrainConfig::default(),
            personalize: TiConfig::default(),
            dreambooth: DbConfig::default(),
            unlearn: UnlearnSection::default(),
            minmax: MinmaxConfig::default(),
            attack: Attack::None,
            sweep: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            eval: EvalSection::default(),
            output: PathBuf::from("runs/main"),
        }
    }
}

fn parse_error(e: toml::de::Error) -> Error {
    Error::config("", e.message().to_string())
}

/// Parse a config, applying `key.path=value` overrides first. Values are
/// read as TOML literals, falling back to plain strings.
pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(parse_error)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.into_inner().message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, overrides)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Defaults for `kind`, writing under `runs/<name>`.
    pub fn for_experiment(kind: ExperimentKind) -> Self {
        Self {
            experiment: kind,
            output: PathBuf::from("runs").join(kind.name()),
            ..Self::default()
        }
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        if self.experiment == ExperimentKind::Main {
            return vec![self.unlearn.budget_255];
        }
        if self.sweep.is_empty() {
            self.experiment.default_sweep()
        } else {
            self.sweep.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::config(
                "schema",
                format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        self.dataset.validate()?;
        let schedule = self.schedule.build().map_err(|e| relabel(e, "schedule"))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("output", "an output directory is required"));
        }
        if self.experiment == ExperimentKind::Main && !self.sweep.is_empty() {
            return Err(Error::config("sweep", "`main` does not sweep; set unlearn.budget_255"));
        }
        let t = self.schedule.steps;
        let k_ok = |k: usize| k >= 1 && k <= t;
        for (i, &v) in self.sweep_values().iter().enumerate() {
            let path = format!("sweep[{i}]");
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(path, "sweep values must be finite and non-negative"));
            }
            let integral = v.fract() == 0.0;
            match self.experiment {
                ExperimentKind::FeasibleRegion | ExperimentKind::StepsAblation => {
                    if !integral || !k_ok(v as usize) {
                        return Err(Error::config(path, format!("k must be an integer in [1, {t}]")));
                    }
                    schedule.step_grid(v as usize).map_err(|e| relabel(e, &path))?;
                }
                ExperimentKind::PurifySweep => {
                    if !integral || v as usize > t {
                        return Err(Error::config(path, format!("t_star must be an integer in [0, {t}]")));
                    }
                }
                ExperimentKind::BudgetAblation | ExperimentKind::Main => {
                    if v <= 0.0 {
                        let p = if self.experiment == ExperimentKind::Main { "unlearn.budget_255".into() } else { path };
                        return Err(Error::config(p, "budget must be positive"));
                    }
                }
            }
        }
        if !k_ok(self.unlearn.k) {
            return Err(Error::config("unlearn.k", format!("must be in [1, {t}]")));
        }
        if !k_ok(self.eval.sampler.k) {
            return Err(Error::config("eval.sampler.k", format!("must be in [1, {t}]")));
        }
        if let Attack::Diffpure { t_star } = self.attack {
            if t_star > t {
                return Err(Error::config("attack.t_star", format!("{t_star} exceeds T = {t}")));
            }
        }
        if !(self.eval.bandwidth > 0.0) {
            return Err(Error::config("eval.bandwidth", "must be positive"));
        }
        if self.eval.generations == 0 {
            return Err(Error::config("eval.generations", "must be positive"));
        }
        if self.unlearn.rho_width == 0 {
            return Err(Error::config("unlearn.rho_width", "must be positive"));
        }
        Ok(())
    }

    /// Fully explicit TOML form of the config.
    pub fn resolved(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("", e.to_string()))
    }
}

fn relabel(e: Error, path: &str) -> Error {
    match e {
        Error::Config { path: p, message } if p.is_empty() => Error::config(path, message),
        Error::Config { path: p, message } => Error::config(format!("{path}.{p}"), message),
        other => other,
    }
}
