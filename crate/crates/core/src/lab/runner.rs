//! The experiment runner.
//!
//! A [`Session`] owns the dataset, schedule and trained denoiser for one
//! output directory. Work is split into units, one per (sweep point, seed).
//! Each finished unit writes its row under `units/`, and expensive shared
//! artifacts (clean tokens, crafted samples, the denoiser) are checkpointed,
//! so an interrupted run resumes where it stopped and produces the same
//! CSV as an uninterrupted one.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::attacks::Attack;
use crate::datasets::{generate, write_pgm, write_points_csv, Dataset};
use crate::diffusion::{
    class_train_set, denoise, gaussian_rows, invert, prepare_dm_training, train_dm, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::lab::checkpoint;
use crate::lab::config::{ExperimentConfig, ExperimentKind, Method};
use crate::lab::plot::emit_plot;
use crate::lab::report::{from_csv, to_csv, write_csv};
use crate::metrics::{
    carry, config_hash, curve_fit_error, mmd, psnr, reconstruction_error, ssim_batch, MetricsRecord,
    ProtectionScorer,
};
use crate::nets::{DataKind, Denoiser, DenoiserSpec, Rho, RhoSpec, TokenTable};
use crate::personalize::{
    db_train, generate_personalized, initial_token, ti_train, PriorSet, TiArtifact, TiConfig,
};
use crate::rng::{label, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tensor};
use crate::unlearn::{craft_unlearnable, joint_minmax_train, linf_distance, CraftOutput, CraftTarget, MinmaxOutput};

/// Limits for a run; `stop_after` interrupts once that many new units have
/// been computed.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    pub stop_after: Option<usize>,
}

pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub csv: PathBuf,
}

/// Crafted samples for every identity, plus the crafting diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Crafted {
    pub unlearnable: Vec<Tensor>,
    pub feasible: bool,
    pub violation: f64,
    pub lambda: f64,
    /// Minmax runs only: whether a round was flagged unstable.
    pub unstable: Option<bool>,
}

/// Clean-personalization baseline of one seed.
pub struct Baseline {
    pub tokens: Vec<TiArtifact>,
    pub scorer: ProtectionScorer,
}

pub struct Session {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub schedule: NoiseSchedule,
    pub model: Denoiser,
    pub rho: Rho,
    pub dm: ParamStore,
    pub config_hash: String,
}

fn denoiser_spec(shape: crate::nets::SampleShape) -> DenoiserSpec {
    match shape.kind {
        DataKind::Points => DenoiserSpec {
            shape,
            ..DenoiserSpec::points()
        },
        DataKind::Images => DenoiserSpec {
            shape,
            ..DenoiserSpec::images()
        },
    }
}

/// Hash of everything that determines the trained denoiser.
pub fn dm_key(cfg: &ExperimentConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Key<'a> {
        dataset: &'a crate::datasets::DatasetSpec,
        schedule: &'a crate::lab::config::ScheduleSpec,
        dm: &'a crate::diffusion::TrainConfig,
        model: DenoiserSpec,
    }
    config_hash(&Key {
        dataset: &cfg.dataset,
        schedule: &cfg.schedule,
        dm: &cfg.dm,
        model: denoiser_spec(cfg.dataset.shape()),
    })
}

/// Train the denoiser described by `cfg`, returning parameters and the
/// loss trace.
pub fn train_denoiser(cfg: &ExperimentConfig, dataset: &Dataset, schedule: &NoiseSchedule) -> Result<(ParamStore, Vec<f64>)> {
    let model = Denoiser::new(denoiser_spec(dataset.shape));
    let mut p = ParamStore::new();
    model.init(&mut p, cfg.dm.seed);
    TokenTable::init(&mut p, model.spec().cond_dim, &dataset.classes, cfg.dm.seed);
    prepare_dm_training(&mut p);
    let trace = train_dm(&model, &mut p, &class_train_set(dataset), &cfg.dm, schedule)?;
    Ok((p, trace))
}

fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|s| s.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / v.len() as f64).exp()
}

fn store_scalar(store: &mut ParamStore, name: &str, v: f64) {
    store.insert(name, Tensor::scalar(v));
}

fn read_scalar(store: &ParamStore, name: &str) -> Result<f64> {
    store
        .value(name)
        .map(|t| t.data()[0])
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{name}`")))
}

impl Session {
    /// Validate `cfg`, prepare the output directory, and load the denoiser
    /// from `dm.ckpt` when it matches the config, training it otherwise.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output.clone();
        for sub in ["units", "checkpoints", "samples", "traces"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        std::fs::write(dir.join("resolved.toml"), cfg.resolved()?)?;
        let dataset = generate(&cfg.dataset)?;
        let schedule = cfg.schedule.build()?;
        let model = Denoiser::new(denoiser_spec(dataset.shape));
        let rho = Rho::new(RhoSpec {
            shape: dataset.shape,
            width: cfg.unlearn.rho_width,
        });
        let key = dm_key(&cfg)?;
        let (ckpt, key_file) = (dir.join("dm.ckpt"), dir.join("dm.key"));
        let cached = match std::fs::read_to_string(&key_file) {
            Ok(k) if k.trim() == key => Some(checkpoint::load(&ckpt)?),
            _ => None,
        };
        let dm = match cached {
            Some((p, s)) if s == schedule => p,
            _ => {
                let (p, trace) = train_denoiser(&cfg, &dataset, &schedule)?;
                write_trace(&dir.join("traces/dm.csv"), "step,loss", trace.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
                Self::install_dm(&dir, &cfg, &p, &schedule)?;
                p
            }
        };
        let mut hashed = cfg.clone();
        hashed.output = PathBuf::new();
        let config_hash = config_hash(&hashed)?;
        Ok(Self {
            cfg,
            dir,
            dataset,
            schedule,
            model,
            rho,
            dm,
            config_hash,
        })
    }

    /// Place an already trained denoiser in `dir` so [`Session::open`]
    /// reuses it. The caller vouches that `dm` was trained for `cfg`, i.e.
    /// under the same [`dm_key`].
    pub fn install_dm(dir: &Path, cfg: &ExperimentConfig, dm: &ParamStore, schedule: &NoiseSchedule) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join("dm.ckpt"), dm, schedule)?;
        std::fs::write(dir.join("dm.key"), dm_key(cfg)?)?;
        Ok(())
    }

    fn data_kind(&self) -> DataKind {
        self.dataset.shape.kind
    }

    fn identity_seed(seed: u64, i: usize) -> u64 {
        Stream::derive(seed, label("identity") ^ i as u64).seed()
    }

    fn generation_sampler(&self, seed: u64, i: usize) -> SamplerConfig {
        SamplerConfig {
            seed: Stream::derive(seed, label("generate") ^ i as u64).seed(),
            ..self.cfg.eval.sampler.clone()
        }
    }

    /// Personalize identity `i` on `samples` and draw the evaluation
    /// generations. Clean and protected runs share every seed.
    pub fn personalize_and_generate(&self, i: usize, samples: &Tensor, seed: u64) -> Result<(TiArtifact, Tensor)> {
        let id = &self.dataset.identities[i];
        let s = Self::identity_seed(seed, i);
        let init = initial_token(&self.dm, &self.dataset.classes, s)?;
        let sampler = self.generation_sampler(seed, i);
        let n = self.cfg.eval.generations;
        match self.cfg.eval.method {
            Method::Ti => {
                let ti = TiConfig {
                    seed: s,
                    ..self.cfg.personalize.clone()
                };
                let art = ti_train(&self.model, &self.dm, samples, &id.pseudo_token, init, &ti, &self.schedule)?;
                let gens = generate_personalized(&self.model, &art.apply(&self.dm), &id.pseudo_token, n, &sampler, &self.schedule)?;
                Ok((art, gens))
            }
            Method::Db => {
                let rows: Vec<usize> = (0..self.dataset.class_labels.len())
                    .filter(|&r| self.dataset.class_labels[r] == id.class_token)
                    .collect();
                let prior_samples = self.dataset.class_pool.select_rows(&rows);
                let prior_labels = vec![id.class_token.clone(); rows.len()];
                let db = crate::personalize::DbConfig {
                    seed: s,
                    ..self.cfg.dreambooth.clone()
                };
                let prior = PriorSet {
                    samples: &prior_samples,
                    labels: &prior_labels,
                };
                let (tuned, _) = db_train(&self.model, &self.dm, samples, &id.pseudo_token, init, prior, &db, &self.schedule)?;
                let gens = generate_personalized(&self.model, &tuned, &id.pseudo_token, n, &sampler, &self.schedule)?;
                let art = TiArtifact {
                    token: id.pseudo_token.clone(),
                    embedding: TokenTable::get(&tuned, &id.pseudo_token)?.clone(),
                    trace: Vec::new(),
                };
                Ok((art, gens))
            }
        }
    }

    /// Clean personalization of every identity, with the scorer baselines
    /// set from its generations. Tokens are checkpointed per seed.
    pub fn baseline(&self, seed: u64) -> Result<Baseline> {
        let path = self.dir.join(format!("checkpoints/clean-s{seed}.ckpt"));
        let mut scorer = ProtectionScorer::new(self.cfg.eval.bandwidth);
        let cached = if path.exists() { Some(checkpoint::load(&path)?.0) } else { None };
        let mut tokens = Vec::new();
        let mut store = ParamStore::new();
        for (i, id) in self.dataset.identities.iter().enumerate() {
            let (art, gens) = match &cached {
                Some(c) => {
                    let art = TiArtifact {
                        token: id.pseudo_token.clone(),
                        embedding: c
                            .value(&format!("{}/token", id.id))
                            .cloned()
                            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing token of {}", id.id)))?,
                        trace: Vec::new(),
                    };
                    let gens = c
                        .value(&format!("{}/generations", id.id))
                        .cloned()
                        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing generations of {}", id.id)))?;
                    (art, gens)
                }
                None => self.personalize_and_generate(i, &id.samples, seed)?,
            };
            scorer.set_baseline(&id.id, seed, &gens, &id.reference)?;
            store.insert(format!("{}/token", id.id), art.embedding.clone());
            store.insert(format!("{}/generations", id.id), gens);
            tokens.push(art);
        }
        if cached.is_none() {
            checkpoint::save(&path, &store, &self.schedule)?;
        }
        Ok(Baseline { tokens, scorer })
    }

    fn targets(&self) -> Vec<CraftTarget> {
        self.dataset
            .identities
            .iter()
            .map(|i| CraftTarget {
                id: i.id.clone(),
                samples: i.samples.clone(),
                token: i.pseudo_token.clone(),
            })
            .collect()
    }

    /// Craft unlearnable copies of every identity at `budget_255` with `k`
    /// denoising steps. The personalization loss sees the clean tokens of
    /// `baseline`. An infeasible run keeps its least-violating iterate and
    /// is flagged rather than aborted.
    pub fn craft(&self, seed: u64, budget_255: f64, k: usize, baseline: &Baseline, tag: &str) -> Result<Crafted> {
        let path = self.dir.join(format!("checkpoints/craft-{tag}-s{seed}.ckpt"));
        if path.exists() {
            let (store, _) = checkpoint::load(&path)?;
            let unlearnable = self
                .dataset
                .identities
                .iter()
                .map(|id| {
                    store
                        .value(&format!("{}/unlearnable", id.id))
                        .cloned()
                        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing samples of {}", id.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let unstable = store.value("meta/unstable").map(|t| t.data()[0] != 0.0);
            return Ok(Crafted {
                unlearnable,
                feasible: read_scalar(&store, "meta/feasible")? != 0.0,
                violation: read_scalar(&store, "meta/violation")?,
                lambda: read_scalar(&store, "meta/lambda")?,
                unstable,
            });
        }
        let mut cfg = self.cfg.unlearn.clone();
        cfg.budget_255 = budget_255;
        cfg.k = k;
        let ucfg = cfg.to_config(self.data_kind(), Stream::derive(seed, label("craft")).seed());
        let mut frozen = self.dm.clone();
        for t in &baseline.tokens {
            t.install(&mut frozen);
        }
        let targets = self.targets();
        let (out, feasible, unstable): (CraftOutput, bool, Option<bool>) = if cfg.minmax {
            match joint_minmax_train(&self.model, &self.dm, &self.rho, &targets, &baseline.tokens, &ucfg, &self.cfg.minmax, &self.schedule) {
                Ok(MinmaxOutput { craft, unstable, .. }) => (craft, true, Some(unstable)),
                Err(Error::ConstraintNotMet { best, .. }) => (*best, false, None),
                Err(e) => return Err(e),
            }
        } else {
            match craft_unlearnable(&self.model, &frozen, &self.rho, &targets, &ucfg, &self.schedule) {
                Ok(o) => (o, true, None),
                Err(Error::ConstraintNotMet { best, .. }) => (*best, false, None),
                Err(e) => return Err(e),
            }
        };
        let mut store = ParamStore::new();
        for o in &out.outputs {
            store.insert(format!("{}/unlearnable", o.id), o.unlearnable.clone());
        }
        for (j, r) in out.rho.iter().enumerate() {
            let owner = if out.rho.len() == 1 { "shared" } else { out.outputs[j].id.as_str() };
            for (name, v) in r.iter() {
                store.insert(format!("rho/{owner}/{name}"), v.clone());
            }
        }
        store_scalar(&mut store, "meta/feasible", if feasible { 1.0 } else { 0.0 });
        store_scalar(&mut store, "meta/violation", out.violation);
        store_scalar(&mut store, "meta/lambda", out.lambda);
        if let Some(u) = unstable {
            store_scalar(&mut store, "meta/unstable", if u { 1.0 } else { 0.0 });
        }
        self.export_samples(&out, &format!("{tag}-s{seed}"))?;
        write_trace(
            &self.dir.join(format!("traces/craft-{tag}-s{seed}.csv")),
            "step,lambda,violation,pers_loss,total",
            out.trace
                .iter()
                .map(|r| format!("{},{},{},{},{}", r.step, r.lambda, r.violation, r.pers_loss, r.total)),
        )?;
        checkpoint::save(&path, &store, &self.schedule)?;
        Ok(Crafted {
            unlearnable: out.outputs.into_iter().map(|o| o.unlearnable).collect(),
            feasible,
            violation: out.violation,
            lambda: out.lambda,
            unstable,
        })
    }

    fn export_samples(&self, out: &CraftOutput, stem: &str) -> Result<()> {
        for o in &out.outputs {
            match self.data_kind() {
                DataKind::Points => {
                    write_points_csv(&self.dir.join(format!("samples/{stem}-{}.csv", o.id)), &o.unlearnable, None)?;
                }
                DataKind::Images => {
                    let e = self.dataset.shape.extent;
                    for r in 0..o.unlearnable.rows() {
                        let img = o.unlearnable.row(r);
                        write_pgm(&self.dir.join(format!("samples/{stem}-{}-{r}.pgm", o.id)), img, e)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Protection scores of personalizing on `sets`, one per identity.
    pub fn protection(&self, seed: u64, baseline: &Baseline, sets: &[Tensor]) -> Result<Vec<f64>> {
        self.dataset
            .identities
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let (_, gens) = self.personalize_and_generate(i, &sets[i], seed)?;
                baseline.scorer.score(&id.id, seed, &gens, &id.reference)
            })
            .collect()
    }

    /// Protection scores against a baseline personalized on clean samples
    /// passed through the same `attack` with the same noise, so damage the
    /// attack does to the identity itself cancels in the ratio. Also returns
    /// the scores against the unattacked baseline.
    fn matched_protection(&self, seed: u64, baseline: &Baseline, attack: &Attack, protected: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
        let unmatched = self.protection(seed, baseline, protected)?;
        if *attack == Attack::None || *attack == (Attack::Diffpure { t_star: 0 }) {
            return Ok((unmatched.clone(), unmatched));
        }
        let clean: Vec<Tensor> = self.dataset.identities.iter().map(|i| i.samples.clone()).collect();
        let attacked_clean = self.apply_attack(attack, &clean, seed)?;
        let mut matched = Vec::with_capacity(clean.len());
        for (i, id) in self.dataset.identities.iter().enumerate() {
            let (_, gens) = self.personalize_and_generate(i, &attacked_clean[i], seed)?;
            let floor = baseline.scorer.distance(&gens, &id.reference)?;
            let base = baseline
                .scorer
                .baseline(&id.id, seed)
                .ok_or_else(|| Error::BaselineMissing(id.id.clone()))?;
            // unmatched = d / base, so d / floor = unmatched · base / floor.
            matched.push(unmatched[i] * base / floor.max(f64::MIN_POSITIVE));
        }
        Ok((matched, unmatched))
    }

    fn record(&self, seed: u64, sweep_value: f64) -> MetricsRecord {
        let mut r = MetricsRecord::new(self.cfg.experiment.name(), seed, self.cfg.experiment.sweep_key(), sweep_value);
        r.config_hash = self.config_hash.clone();
        r.attack = self.cfg.attack.describe();
        r
    }

    /// Metrics shared by every experiment that emits protected samples.
    fn protection_metrics(&self, rec: &mut MetricsRecord, crafted: &Crafted, protected: &[Tensor], scores: &[f64]) -> Result<()> {
        for (id, s) in self.dataset.identities.iter().zip(scores) {
            rec.insert(&format!("protection_score_{}", id.id), *s)?;
        }
        rec.insert("protection_score", geometric_mean(scores))?;
        rec.insert("feasible", if crafted.feasible { 1.0 } else { 0.0 })?;
        rec.insert("violation", crafted.violation)?;
        rec.insert("lambda", crafted.lambda)?;
        if let Some(u) = crafted.unstable {
            rec.insert("unstable", if u { 1.0 } else { 0.0 })?;
        }
        let clean: Vec<Tensor> = self.dataset.identities.iter().map(|i| i.samples.clone()).collect();
        let linf = protected
            .iter()
            .zip(&clean)
            .map(|(p, c)| linf_distance(p, c))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        rec.insert("linf", linf)?;
        let all_p = Tensor::cat_rows(protected)?;
        let all_c = Tensor::cat_rows(&clean)?;
        rec.insert("e_r", reconstruction_error(&all_p, &all_c)?)?;
        rec.insert("mmd", mmd(&all_p, &all_c, self.cfg.eval.bandwidth)?)?;
        match self.data_kind() {
            DataKind::Images => {
                let p = psnr(&all_p, &all_c, 1.0)?;
                rec.insert("psnr_db", if p.is_finite() { p } else { f64::MAX })?;
                rec.insert("ssim", ssim_batch(&all_p, &all_c, 1.0)?)?;
            }
            DataKind::Points => {
                if let Some(curve) = &self.dataset.curve {
                    rec.insert("e_l", curve_fit_error(&all_p, curve)?)?;
                }
            }
        }
        Ok(())
    }

    fn attack_seed(seed: u64) -> u64 {
        Stream::derive(seed, label("attack")).seed()
    }

    fn apply_attack(&self, attack: &Attack, sets: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
        sets.iter()
            .enumerate()
            .map(|(i, x)| {
                let s = Stream::derive(Self::attack_seed(seed), i as u64).seed();
                attack.apply(x, &self.model, &self.dm, &self.schedule, s)
            })
            .collect()
    }

    /// Rows of one seed, in sweep order.
    fn run_seed(&self, seed: u64, done: &AtomicUsize, ctl: &RunControl) -> Result<Vec<MetricsRecord>> {
        let sweep = self.cfg.sweep_values();
        let mut rows = Vec::with_capacity(sweep.len());
        let mut baseline: Option<Baseline> = None;
        let mut shared: Option<Crafted> = None;
        for (p, &value) in sweep.iter().enumerate() {
            let unit = self.dir.join(format!("units/p{p}-s{seed}.csv"));
            if unit.exists() {
                let mut back = from_csv(&std::fs::read(&unit)?)?;
                if back.len() == 1 && back[0].config_hash == self.config_hash {
                    rows.push(back.remove(0));
                    continue;
                }
            }
            if let Some(limit) = ctl.stop_after {
                if done.fetch_add(1, Ordering::SeqCst) >= limit {
                    return Err(Error::Interrupted(limit));
                }
            }
            let mut rec = self.record(seed, value);
            match self.cfg.experiment {
                ExperimentKind::FeasibleRegion => self.feasible_unit(&mut rec, seed, value as usize)?,
                kind => {
                    if baseline.is_none() {
                        baseline = Some(self.baseline(seed)?);
                    }
                    let base = baseline.as_ref().expect("set above");
                    let u = &self.cfg.unlearn;
                    let (crafted, attack) = match kind {
                        ExperimentKind::BudgetAblation => (self.craft(seed, value, u.k, base, &format!("p{p}"))?, self.cfg.attack.clone()),
                        ExperimentKind::StepsAblation => (self.craft(seed, u.budget_255, value as usize, base, &format!("p{p}"))?, self.cfg.attack.clone()),
                        ExperimentKind::Main => (self.craft(seed, value, u.k, base, "main")?, self.cfg.attack.clone()),
                        _ => {
                            if shared.is_none() {
                                shared = Some(self.craft(seed, u.budget_255, u.k, base, "shared")?);
                            }
                            let c = shared.clone().expect("set above");
                            (c, Attack::Diffpure { t_star: value as usize })
                        }
                    };
                    let protected = self.apply_attack(&attack, &crafted.unlearnable, seed)?;
                    let scores = if kind == ExperimentKind::PurifySweep {
                        let (matched, unmatched) = self.matched_protection(seed, base, &attack, &protected)?;
                        rec.insert("protection_score_unmatched", geometric_mean(&unmatched))?;
                        matched
                    } else {
                        self.protection(seed, base, &protected)?
                    };
                    rec.attack = attack.describe();
                    self.protection_metrics(&mut rec, &crafted, &protected, &scores)?;
                }
            }
            std::fs::write(&unit, to_csv(std::slice::from_ref(&rec))?)?;
            rows.push(rec);
        }
        Ok(rows)
    }

    /// Latent perturbation survival and distribution integrity at `k`.
    fn feasible_unit(&self, rec: &mut MetricsRecord, seed: u64, k: usize) -> Result<()> {
        let shape = self.dataset.shape;
        let n = self.cfg.eval.carry_samples;
        let z = gaussian_rows(shape, n, Stream::derive(seed, label("carry_z")).seed());
        let raw = gaussian_rows(shape, n, Stream::derive(seed, label("carry_delta")).seed());
        let mut delta = raw.clone();
        for i in 0..n {
            let norm = raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for v in delta.row_mut(i) {
                *v /= norm;
            }
        }
        let c = carry(&self.model, &self.dm, &z, &delta, &[k], None, &self.schedule)?;
        rec.insert("carry", c[0].1)?;
        let sampler = SamplerConfig::with_k(k);
        let perturbed = denoise(&self.model, &self.dm, &z.add(&delta)?, None, &sampler, &self.schedule)?;
        let clean = denoise(&self.model, &self.dm, &z, None, &sampler, &self.schedule)?;
        if let Some(curve) = &self.dataset.curve {
            rec.insert("e_l", curve_fit_error(&perturbed, curve)?)?;
            rec.insert("e_l_clean", curve_fit_error(&clean, curve)?)?;
        }
        let data = Tensor::cat_rows(&self.dataset.identities.iter().map(|i| i.samples.clone()).collect::<Vec<_>>())?;
        let latent = invert(&self.model, &self.dm, &data, &self.schedule)?;
        let recon = denoise(&self.model, &self.dm, &latent, None, &sampler, &self.schedule)?;
        rec.insert("e_r", reconstruction_error(&recon, &data)?)?;
        Ok(())
    }

    /// Run every unit, resuming finished ones, then write `metrics.csv` and
    /// the plots. Rows are ordered by (sweep point, seed).
    pub fn run(&self, ctl: &RunControl) -> Result<RunOutput> {
        let done = AtomicUsize::new(0);
        let per_seed = crate::par::try_map(&self.cfg.seeds, |_, &s| self.run_seed(s, &done, ctl))?;
        let points = self.cfg.sweep_values().len();
        let mut records = Vec::with_capacity(points * per_seed.len());
        for p in 0..points {
            for rows in &per_seed {
                records.push(rows[p].clone());
            }
        }
        let csv = self.dir.join("metrics.csv");
        write_csv(&csv, &records)?;
        self.plots(&records)?;
        Ok(RunOutput { records, csv })
    }

    fn plots(&self, records: &[MetricsRecord]) -> Result<()> {
        let plots: Vec<(&str, Vec<&str>)> = match self.cfg.experiment {
            ExperimentKind::FeasibleRegion => {
                let mut v = vec![("carry", vec!["carry"]), ("e_r", vec!["e_r"])];
                if self.dataset.curve.is_some() {
                    v.push(("e_l", vec!["e_l", "e_l_clean"]));
                }
                v
            }
            _ => vec![("protection", vec!["protection_score"])],
        };
        let x = if self.cfg.experiment == ExperimentKind::Main { "seed" } else { "sweep_value" };
        for (name, ys) in plots {
            emit_plot(records, x, &ys, &self.dir.join(format!("{name}.svg")))?;
        }
        Ok(())
    }
}

fn write_trace(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Open a session for `cfg` and run it to completion.
pub fn run(cfg: ExperimentConfig) -> Result<RunOutput> {
    Session::open(cfg)?.run(&RunControl::default())
}
