//! Forward noising, deterministic DDIM inversion and denoising, denoiser
//! training, and sampling.
//!
//! One update serves both directions. Moving a state from timestep `from` to
//! `to` with noise estimate `ε̂`:
//!
//! ```text
//! x_to = √(ᾱ_to/ᾱ_from)·x + (√(1−ᾱ_to) − √ᾱ_to·√(1−ᾱ_from)/√ᾱ_from)·ε̂
//! ```
//!
//! Denoising evaluates `ε̂` at the noisier timestep `from`; inversion runs
//! the same map upward and evaluates `ε̂` at the current (cleaner) state with
//! the target timestep label. For a model that ignores its input the map is
//! affine with an exact inverse, so inversion followed by denoising returns
//! the start point on any grid.

use serde::{Deserialize, Serialize};

use crate::datasets::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::nets::{guided_noise, Cond, NoiseModel, SampleShape, TokenTable};
use crate::par;
use crate::rng::{label, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{eval, AdamConfig, NodeId, ParamStore, Tape, Tensor};

/// Rows per work item in batched value-only evaluation. Fixed so results do
/// not depend on the thread count.
const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Denoising step count.
    pub k: usize,
    /// Classifier-free guidance scale.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 4,
            guidance: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    /// Step size `d = T/k`.
    pub fn stride(&self, schedule: &NoiseSchedule) -> f64 {
        schedule.steps() as f64 / self.k as f64
    }
}

fn check_t(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::config("t", format!("timestep {t} outside [1, {}]", schedule.steps())));
    }
    Ok(())
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε` with a single timestep for the whole batch.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_t(t, schedule)?;
    let ab = schedule.alpha_bar(t);
    x0.zip_map(eps, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
}

/// Per-row timesteps, recorded on `tape`.
pub fn forward_noise_rows(
    tape: &mut Tape,
    x0: NodeId,
    ts: &[usize],
    eps: NodeId,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    for &t in ts {
        check_t(t, schedule)?;
    }
    let signal = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
    let noise = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt()).collect();
    let a = tape.scale_rows(x0, signal)?;
    let b = tape.scale_rows(eps, noise)?;
    tape.add(a, b)
}

/// `(state, noise)` coefficients of the update from `from` to `to`.
pub fn update_coefficients(schedule: &NoiseSchedule, from: usize, to: usize) -> (f64, f64) {
    let (af, at) = (schedule.alpha_bar(from), schedule.alpha_bar(to));
    let a = (at / af).sqrt();
    let b = (1.0 - at).sqrt() - at.sqrt() * (1.0 - af).sqrt() / af.sqrt();
    (a, b)
}

/// One denoising update `from → to` (`from > to ≥ 0`) with guided noise.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    x: NodeId,
    from: usize,
    to: usize,
    cond: &[Cond],
    guidance: f64,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    if from <= to {
        return Err(Error::config("denoise_step", format!("need t_from > t_to, got {from} -> {to}")));
    }
    check_t(from, schedule)?;
    let n = tape.shape(x)[0];
    let eps = guided_noise(model, tape, params, x, &vec![from; n], cond, guidance)?;
    let (a, b) = update_coefficients(schedule, from, to);
    tape.axpby(x, a, eps, b)
}

/// One unconditional inversion update `from → to` (`to > from ≥ 0`).
pub fn invert_step<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    z: NodeId,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    if to <= from {
        return Err(Error::config("invert_step", format!("need t_to > t_from, got {from} -> {to}")));
    }
    check_t(to, schedule)?;
    let n = tape.shape(z)[0];
    let eps = model.predict(tape, params, z, &vec![to; n], &vec![None; n])?;
    let (a, b) = update_coefficients(schedule, from, to);
    tape.axpby(z, a, eps, b)
}

/// Composition of [`denoise_step`] over the `k`-step grid ending at 0,
/// recorded on `tape` so gradients reach `z` and anything upstream.
pub fn few_step_denoise<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    z: NodeId,
    cond: &[Cond],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let mut x = z;
    for (from, to) in schedule.transitions(sampler.k)? {
        x = denoise_step(model, tape, params, x, from, to, cond, sampler.guidance, schedule)?;
    }
    Ok(x)
}

/// Apply `f` to fixed-size row chunks of `x` (in parallel when enabled) and
/// reassemble in order.
fn by_chunks<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(usize, &Tensor) -> Result<Tensor> + Sync + Send,
{
    let n = x.rows();
    if n == 0 {
        return Ok(x.clone());
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = par::try_map(&starts, |_, &s| {
        let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
        f(s, &x.select_rows(&idx))
    })?;
    Tensor::cat_rows(&parts)
}

/// Full-grid unconditional inversion of clean data `x0` to timestep `t_end`.
pub fn invert_to<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    x0: &Tensor,
    t_end: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    by_chunks(x0, |_, chunk| {
        let mut z = chunk.clone();
        for t in 0..t_end {
            z = eval(|tape| {
                let zi = tape.constant(z.clone())?;
                invert_step(model, tape, params, zi, t, t + 1, schedule)
            })?
            .0;
        }
        Ok(z)
    })
}

/// Full-grid unconditional inversion to the terminal latent `z_T`.
pub fn invert<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    x0: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    invert_to(model, params, x0, schedule.steps(), schedule)
}

/// Value-only denoising of `z` along `transitions`; `cond` is per row.
pub fn denoise_along<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    z: &Tensor,
    transitions: &[(usize, usize)],
    cond: &[Cond],
    guidance: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if cond.len() != z.rows() {
        return Err(Error::shape("denoise", &[z.rows()], &[cond.len()]));
    }
    by_chunks(z, |start, chunk| {
        let c = &cond[start..start + chunk.rows()];
        let mut x = chunk.clone();
        for &(from, to) in transitions {
            x = eval(|tape| {
                let xi = tape.constant(x.clone())?;
                denoise_step(model, tape, params, xi, from, to, c, guidance, schedule)
            })?
            .0;
        }
        Ok(x)
    })
}

/// Value-only few-step denoising of `z` with one condition for every row.
pub fn denoise<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    z: &Tensor,
    cond: Cond,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let transitions = schedule.transitions(sampler.k)?;
    let conds = vec![cond; z.rows()];
    denoise_along(model, params, z, &transitions, &conds, sampler.guidance, schedule)
}

/// Draw `n` terminal latents from `N(0, I)` and denoise them. Row `i` uses
/// its own stream, so results do not depend on batching.
pub fn sample<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    n: usize,
    cond: Cond,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z = gaussian_rows(model.shape(), n, sampler.seed);
    denoise(model, params, &z, cond, sampler, schedule)
}

/// `n` standard-normal samples; row `i` comes from stream `(seed, i)`.
pub fn gaussian_rows(shape: SampleShape, n: usize, seed: u64) -> Tensor {
    let d = shape.len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        data.extend(Stream::derive(seed, i as u64).normals(d));
    }
    Tensor::new(shape.batch(n), data).expect("n rows of d")
}

/// Labeled training data for the denoiser.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub samples: Tensor,
    /// Condition token per row; `None` rows only train the null branch.
    pub labels: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing a label by the null token.
    pub p_uncond: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            batch: 128,
            p_uncond: 0.2,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Mean over the batch of `‖ε − ε_θ(x_t, t, c)‖²`, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn noise_prediction_loss<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    x0: NodeId,
    ts: &[usize],
    eps: &Tensor,
    cond: &[Cond],
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let e = tape.constant(eps.clone())?;
    let xt = forward_noise_rows(tape, x0, ts, e, schedule)?;
    let pred = model.predict(tape, params, xt, ts, cond)?;
    let diff = tape.sub(pred, e)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, 1.0 / ts.len() as f64)
}

/// Train `params` (whatever is trainable) on noise prediction; returns the
/// per-step loss trace.
pub fn train_dm<M: NoiseModel + ?Sized>(
    model: &M,
    params: &mut ParamStore,
    data: &TrainSet,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let n = data.samples.rows();
    if n == 0 {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let shape = model.shape();
    let mut rng = Stream::derive(cfg.seed, label("train_dm"));
    let adam = AdamConfig::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    params.zero_grad();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.index(n)).collect();
        let x0 = augment(&data.samples.select_rows(&idx), shape, &cfg.augment, &mut rng)?;
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.int_inclusive(1, schedule.steps())).collect();
        let eps = Tensor::new(x0.shape().to_vec(), rng.normals(x0.len()))?;
        let conds: Vec<Cond> = idx
            .iter()
            .map(|&i| {
                let drop = rng.bernoulli(cfg.p_uncond);
                if drop {
                    None
                } else {
                    data.labels[i].as_deref()
                }
            })
            .collect();
        let mut tape = Tape::new();
        let xi = tape.constant(x0)?;
        let loss = noise_prediction_loss(model, &mut tape, params, xi, &ts, &eps, &conds, schedule)?;
        let value = tape.value(loss).data()[0];
        if !(value <= DIVERGENCE_LOSS) {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        tape.backward_into(loss, params)?;
        params.adam_step(&adam, cfg.lr)?;
        trace.push(value);
    }
    Ok(trace)
}

/// Class-pool training set with the identity samples left out.
pub fn class_train_set(ds: &crate::datasets::Dataset) -> TrainSet {
    TrainSet {
        samples: ds.class_pool.clone(),
        labels: ds.class_labels.iter().cloned().map(Some).collect(),
    }
}

/// Trainable mask for denoiser training: network and class tokens train,
/// the null token stays frozen.
pub fn prepare_dm_training(params: &mut ParamStore) {
    params.set_trainable("", false);
    params.set_trainable(crate::nets::Denoiser::PREFIX, true);
    params.set_trainable("net/tokens/", true);
    params.set_trainable(&TokenTable::param_name(TokenTable::NULL), false);
}
