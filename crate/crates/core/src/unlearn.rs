//! Crafting unlearnable samples by shifting the denoising trajectory.
//!
//! Clean data is inverted to its terminal latent (held fixed), the latent is
//! passed through the perturbation network ρ, and the result is denoised in
//! a few steps. ρ is trained to maximize the frozen personalization loss on
//! the output while a linearly growing multiplier pushes the output back
//! inside an ℓ∞ ball around the clean sample.

use serde::{Deserialize, Serialize};

use crate::diffusion::{few_step_denoise, invert, SamplerConfig};
use crate::error::{Error, Result};
use crate::nets::{Cond, DataKind, NoiseModel, Rho};
use crate::personalize::{personalization_loss, ti_train, TiArtifact, TiConfig, DEFAULT_MC_DRAWS};
use crate::rng::{label, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamConfig, NodeId, ParamStore, Tape, Tensor};

/// Temperature of the smooth ℓ∞ surrogate, in units of the budget.
pub const SMOOTH_TEMPERATURE: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// `(δ/50)·log Σ exp(50|d|/δ)`, an upper bound on the true max.
    LinfSmooth,
    L2,
}

/// Budget of `n/255` in the data units of `kind`: images live in `[0, 1]`,
/// points in `[−1, 1]`.
pub fn scaled_budget(kind: DataKind, n_over_255: f64) -> f64 {
    match kind {
        DataKind::Images => n_over_255 / 255.0,
        DataKind::Points => 2.0 * n_over_255 / 255.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    /// ℓ∞ budget δ in data units.
    pub budget: f64,
    pub lambda0: f64,
    pub eta_lambda: f64,
    /// Relative violation `(max ℓ∞ − δ)/δ` tolerated without raising λ.
    pub tolerance: f64,
    pub steps: usize,
    pub lr: f64,
    pub k: usize,
    pub n_mc: usize,
    pub norm: NormKind,
    /// Pair each identity with another identity's token.
    pub shuffle: bool,
    /// Train one ρ per identity instead of one shared ρ.
    pub per_identity: bool,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            budget: scaled_budget(DataKind::Points, 10.0),
            lambda0: 0.0,
            eta_lambda: 0.1,
            tolerance: 1e-3,
            steps: 2000,
            lr: 1e-3,
            k: 4,
            n_mc: DEFAULT_MC_DRAWS,
            norm: NormKind::LinfSmooth,
            shuffle: false,
            per_identity: false,
            seed: 0,
        }
    }
}

/// Multiplier schedule: λ only ever grows, by `eta` per violating step.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnState {
    pub lambda: f64,
    pub budget: f64,
    pub eta: f64,
    pub tolerance: f64,
    pub history: Vec<f64>,
    pub step: usize,
}

impl UnlearnState {
    pub fn new(cfg: &UnlearnConfig) -> Result<Self> {
        if !(cfg.budget > 0.0) {
            return Err(Error::config("unlearn.budget", "budget must be positive"));
        }
        if !(cfg.eta_lambda > 0.0) {
            return Err(Error::config("unlearn.eta_lambda", "must be positive"));
        }
        if !(cfg.lambda0 >= 0.0) {
            return Err(Error::config("unlearn.lambda0", "must be non-negative"));
        }
        Ok(Self {
            lambda: cfg.lambda0,
            budget: cfg.budget,
            eta: cfg.eta_lambda,
            tolerance: cfg.tolerance,
            history: Vec::new(),
            step: 0,
        })
    }

    pub fn update_lambda(&mut self, violation: f64) {
        if violation > self.tolerance {
            self.lambda += self.eta;
        }
        self.history.push(violation);
    }
}

/// Largest per-sample true ℓ∞ distance.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.max_abs())
}

/// Relative budget excess `max(0, max ℓ∞ − δ)/δ`.
pub fn violation(a: &Tensor, b: &Tensor, budget: f64) -> Result<f64> {
    Ok((linf_distance(a, b)? - budget).max(0.0) / budget)
}

/// `λ · Σ_i max(0, ‖x̄_i − x_i‖ − δ) − L_pers`, to be minimized. Every
/// sample carries its own budget constraint, all sharing one multiplier.
pub fn lagrangian_loss(
    tape: &mut Tape,
    unlearnable: NodeId,
    clean: &Tensor,
    pers_loss: NodeId,
    lambda: f64,
    budget: f64,
    norm: NormKind,
) -> Result<NodeId> {
    let x0 = tape.constant(clean.clone())?;
    let diff = tape.sub(unlearnable, x0)?;
    let norms = match norm {
        NormKind::LinfSmooth => tape.row_smooth_max_abs(diff, SMOOTH_TEMPERATURE / budget)?,
        NormKind::L2 => {
            let sq = tape.row_sum_squares(diff)?;
            tape.sqrt(sq)?
        }
    };
    let excess = tape.add_scalar(norms, -budget)?;
    let hinge = tape.relu(excess)?;
    let penalty = tape.sum(hinge)?;
    tape.axpby(penalty, lambda, pers_loss, -1.0)
}

/// Nodes of one recorded pipeline pass.
pub struct PipelineNodes {
    pub latent: NodeId,
    pub shifted: NodeId,
    pub output: NodeId,
}

/// Record `z → ρ(z) → few-step denoise` on `tape`. The latent enters as a
/// constant, so gradients reach ρ but not the inversion.
#[allow(clippy::too_many_arguments)]
pub fn record_pipeline<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    dm: &ParamStore,
    rho: &Rho,
    rho_params: &ParamStore,
    latent: &Tensor,
    k: usize,
    schedule: &NoiseSchedule,
) -> Result<PipelineNodes> {
    let z = tape.constant(latent.clone())?;
    let shifted = rho.forward(tape, rho_params, z)?;
    let cond: Vec<Cond> = vec![None; latent.rows()];
    let output = few_step_denoise(model, tape, dm, shifted, &cond, &SamplerConfig::with_k(k), schedule)?;
    Ok(PipelineNodes {
        latent: z,
        shifted,
        output,
    })
}

/// Values of one pipeline pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnBatchResult {
    pub latent: Tensor,
    pub shifted_latent: Tensor,
    /// Denoised output; data space equals latent space here.
    pub output: Tensor,
    /// True-max ℓ∞ distance from the clean batch.
    pub constraint: f64,
    pub pers_loss: Option<f64>,
    pub total: Option<f64>,
}

/// Invert `x0`, shift with ρ, denoise in `k` steps.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_forward<M: NoiseModel + ?Sized>(
    model: &M,
    dm: &ParamStore,
    rho: &Rho,
    rho_params: &ParamStore,
    x0: &Tensor,
    k: usize,
    schedule: &NoiseSchedule,
) -> Result<UnlearnBatchResult> {
    let latent = invert(model, dm, x0, schedule)?;
    pipeline_from_latent(model, dm, rho, rho_params, x0, &latent, k, schedule)
}

#[allow(clippy::too_many_arguments)]
fn pipeline_from_latent<M: NoiseModel + ?Sized>(
    model: &M,
    dm: &ParamStore,
    rho: &Rho,
    rho_params: &ParamStore,
    x0: &Tensor,
    latent: &Tensor,
    k: usize,
    schedule: &NoiseSchedule,
) -> Result<UnlearnBatchResult> {
    let mut tape = Tape::new();
    let nodes = record_pipeline(model, &mut tape, dm, rho, rho_params, latent, k, schedule)?;
    let output = tape.value(nodes.output).clone();
    Ok(UnlearnBatchResult {
        latent: latent.clone(),
        shifted_latent: tape.value(nodes.shifted).clone(),
        constraint: linf_distance(&output, x0)?,
        output,
        pers_loss: None,
        total: None,
    })
}

/// One identity to protect: its clean samples and the token of the frozen
/// personalization artifact trained on it.
#[derive(Clone, Debug)]
pub struct CraftTarget {
    pub id: String,
    pub samples: Tensor,
    pub token: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lambda: f64,
    pub violation: f64,
    pub pers_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityOutput {
    pub id: String,
    pub unlearnable: Tensor,
    /// Output of the same pipeline with ρ at its initialization.
    pub reconstruction: Tensor,
}

#[derive(Clone, Debug)]
pub struct CraftOutput {
    /// One store when ρ is shared, one per identity otherwise.
    pub rho: Vec<ParamStore>,
    pub outputs: Vec<IdentityOutput>,
    pub trace: Vec<TraceRow>,
    pub lambda: f64,
    /// Relative violation of the emitted samples.
    pub violation: f64,
    /// Token each identity was paired with during training.
    pub assignment: Vec<String>,
    /// Gradient norm left on the frozen denoiser and tokens; always zero.
    pub frozen_grad_norm: f64,
}

impl CraftOutput {
    pub fn output(&self, id: &str) -> Option<&IdentityOutput> {
        self.outputs.iter().find(|o| o.id == id)
    }
}

/// Token pairing: identity, or a rotation by a seeded non-zero offset so no
/// identity keeps its own token.
pub fn token_assignment(targets: &[CraftTarget], shuffle: bool, seed: u64) -> Vec<String> {
    let n = targets.len();
    let offset = if shuffle && n > 1 {
        1 + Stream::derive(seed, label("shuffle")).index(n - 1)
    } else {
        0
    };
    (0..n).map(|i| targets[(i + offset) % n].token.clone()).collect()
}

/// Resumable training loop for one shared ρ over a group of identities.
pub struct Crafter<'a, M: NoiseModel + ?Sized> {
    model: &'a M,
    schedule: &'a NoiseSchedule,
    rho: &'a Rho,
    cfg: UnlearnConfig,
    dm: ParamStore,
    ids: Vec<String>,
    offsets: Vec<usize>,
    clean: Tensor,
    latent: Tensor,
    tokens: Vec<String>,
    reconstruction: Tensor,
    rho_params: ParamStore,
    state: UnlearnState,
    trace: Vec<TraceRow>,
    last_feasible: Option<ParamStore>,
    least_violating: (f64, ParamStore),
    adam: AdamConfig,
}

impl<'a, M: NoiseModel + ?Sized> Crafter<'a, M> {
    pub fn new(
        model: &'a M,
        dm: &ParamStore,
        rho: &'a Rho,
        targets: &[CraftTarget],
        cfg: &UnlearnConfig,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        let state = UnlearnState::new(cfg)?;
        let mut dm = dm.clone();
        dm.set_trainable("", false);
        dm.zero_grad();
        let assignment = token_assignment(targets, cfg.shuffle, cfg.seed);
        let mut offsets = vec![0];
        let mut tokens = Vec::new();
        for (t, token) in targets.iter().zip(&assignment) {
            offsets.push(offsets.last().unwrap() + t.samples.rows());
            tokens.extend(std::iter::repeat_n(token.clone(), t.samples.rows()));
        }
        let parts: Vec<Tensor> = targets.iter().map(|t| t.samples.clone()).collect();
        let clean = Tensor::cat_rows(&parts)?;
        let latent = invert(model, &dm, &clean, schedule)?;
        let mut rho_params = ParamStore::new();
        rho.init(&mut rho_params, Stream::derive(cfg.seed, label("rho_init")).seed());
        let reconstruction = pipeline_from_latent(model, &dm, rho, &rho_params, &clean, &latent, cfg.k, schedule)?.output;
        let v0 = violation(&reconstruction, &clean, cfg.budget)?;
        Ok(Self {
            model,
            schedule,
            rho,
            cfg: cfg.clone(),
            dm,
            ids: targets.iter().map(|t| t.id.clone()).collect(),
            offsets,
            clean,
            latent,
            tokens,
            reconstruction,
            least_violating: (v0, rho_params.clone()),
            last_feasible: (v0 <= cfg.tolerance).then(|| rho_params.clone()),
            rho_params,
            state,
            trace: Vec::new(),
            adam: AdamConfig::default(),
        })
    }

    pub fn state(&self) -> &UnlearnState {
        &self.state
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn rho_params(&self) -> &ParamStore {
        &self.rho_params
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Replace the frozen personalization store (used when tokens are
    /// refreshed between min-max rounds).
    pub fn set_frozen(&mut self, dm: &ParamStore) {
        let mut dm = dm.clone();
        dm.set_trainable("", false);
        dm.zero_grad();
        self.dm = dm;
    }

    pub fn frozen(&self) -> &ParamStore {
        &self.dm
    }

    /// Current pipeline output split per identity.
    pub fn current_outputs(&self) -> Result<Vec<Tensor>> {
        let out = self.evaluate(&self.rho_params)?;
        Ok(self.split(&out))
    }

    fn split(&self, t: &Tensor) -> Vec<Tensor> {
        self.offsets
            .windows(2)
            .map(|w| t.select_rows(&(w[0]..w[1]).collect::<Vec<_>>()))
            .collect()
    }

    fn evaluate(&self, rho_params: &ParamStore) -> Result<Tensor> {
        let out = pipeline_from_latent(
            self.model,
            &self.dm,
            self.rho,
            rho_params,
            &self.clean,
            &self.latent,
            self.cfg.k,
            self.schedule,
        )?
        .output;
        Ok(self.emit(out))
    }

    /// Images are clipped to the valid range, which never increases the
    /// distance to an in-range clean sample.
    fn emit(&self, x: Tensor) -> Tensor {
        match self.model.shape().kind {
            DataKind::Images => x.map(|v| v.clamp(0.0, 1.0)),
            DataKind::Points => x,
        }
    }

    pub fn step(&mut self) -> Result<TraceRow> {
        let step = self.state.step;
        let mut tape = Tape::new();
        let nodes = record_pipeline(
            self.model,
            &mut tape,
            &self.dm,
            self.rho,
            &self.rho_params,
            &self.latent,
            self.cfg.k,
            self.schedule,
        )?;
        let cond: Vec<Cond> = self.tokens.iter().map(|t| Some(t.as_str())).collect();
        let pers_seed = Stream::derive(self.cfg.seed, label("craft_mc") ^ step as u64).seed();
        let pers = personalization_loss(
            self.model,
            &mut tape,
            &self.dm,
            nodes.output,
            &cond,
            self.cfg.n_mc,
            self.schedule,
            pers_seed,
        )?;
        let total = lagrangian_loss(
            &mut tape,
            nodes.output,
            &self.clean,
            pers,
            self.state.lambda,
            self.cfg.budget,
            self.cfg.norm,
        )?;
        let emitted = self.emit(tape.value(nodes.output).clone());
        let v = violation(&emitted, &self.clean, self.cfg.budget)?;
        if v <= self.cfg.tolerance {
            self.last_feasible = Some(self.rho_params.clone());
        }
        if v < self.least_violating.0 {
            self.least_violating = (v, self.rho_params.clone());
        }
        let row = TraceRow {
            step,
            lambda: self.state.lambda,
            violation: v,
            pers_loss: tape.value(pers).data()[0],
            total: tape.value(total).data()[0],
        };
        tape.backward_into(total, &mut self.rho_params)?;
        self.rho_params.adam_step(&self.adam, self.cfg.lr)?;
        self.state.update_lambda(v);
        self.state.step += 1;
        self.trace.push(row.clone());
        Ok(row)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    /// Emit the final iterate if it meets the budget, else the most recent
    /// feasible one; with none, fail carrying the least-violating iterate.
    pub fn finish(self) -> Result<CraftOutput> {
        let current = self.evaluate(&self.rho_params)?;
        let v = violation(&current, &self.clean, self.cfg.budget)?;
        let (params, out, v, ok) = if v <= self.cfg.tolerance {
            (self.rho_params.clone(), current, v, true)
        } else if let Some(p) = &self.last_feasible {
            let out = self.evaluate(p)?;
            let v = violation(&out, &self.clean, self.cfg.budget)?;
            (p.clone(), out, v, true)
        } else {
            let p = self.least_violating.1.clone();
            let out = self.evaluate(&p)?;
            let v = violation(&out, &self.clean, self.cfg.budget)?;
            (p, out, v, false)
        };
        let recon = self.split(&self.emit(self.reconstruction.clone()));
        let outputs = self
            .ids
            .iter()
            .zip(self.split(&out))
            .zip(recon)
            .map(|((id, unlearnable), reconstruction)| IdentityOutput {
                id: id.clone(),
                unlearnable,
                reconstruction,
            })
            .collect();
        let mut assignment = Vec::new();
        for w in self.offsets.windows(2) {
            assignment.push(self.tokens[w[0]].clone());
        }
        let result = CraftOutput {
            rho: vec![params],
            outputs,
            trace: self.trace,
            lambda: self.state.lambda,
            violation: v,
            assignment,
            frozen_grad_norm: self.dm.grad_norm(),
        };
        if ok {
            Ok(result)
        } else {
            Err(Error::ConstraintNotMet {
                violation: v,
                best: Box::new(result),
            })
        }
    }
}

fn merge_outputs(parts: Vec<CraftOutput>) -> CraftOutput {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one part");
    for p in it {
        acc.rho.extend(p.rho);
        acc.outputs.extend(p.outputs);
        acc.trace.extend(p.trace);
        acc.lambda = acc.lambda.max(p.lambda);
        acc.violation = acc.violation.max(p.violation);
        acc.assignment.extend(p.assignment);
        acc.frozen_grad_norm += p.frozen_grad_norm;
    }
    acc
}

/// Train ρ against the frozen personalization store `dm` (denoiser plus
/// every target's token) and emit unlearnable versions of each target.
pub fn craft_unlearnable<M: NoiseModel + ?Sized>(
    model: &M,
    dm: &ParamStore,
    rho: &Rho,
    targets: &[CraftTarget],
    cfg: &UnlearnConfig,
    schedule: &NoiseSchedule,
) -> Result<CraftOutput> {
    if !cfg.per_identity {
        let mut c = Crafter::new(model, dm, rho, targets, cfg, schedule)?;
        c.run(cfg.steps)?;
        return c.finish();
    }
    let assignment = token_assignment(targets, cfg.shuffle, cfg.seed);
    let mut parts = Vec::new();
    let mut worst: Option<f64> = None;
    for (i, (t, token)) in targets.iter().zip(assignment).enumerate() {
        let single = CraftTarget {
            token,
            ..t.clone()
        };
        let sub = UnlearnConfig {
            shuffle: false,
            seed: Stream::derive(cfg.seed, i as u64).seed(),
            ..cfg.clone()
        };
        let mut c = Crafter::new(model, dm, rho, std::slice::from_ref(&single), &sub, schedule)?;
        c.run(cfg.steps)?;
        match c.finish() {
            Ok(out) => parts.push(out),
            Err(Error::ConstraintNotMet { violation, best }) => {
                worst = Some(worst.unwrap_or(0.0).max(violation));
                parts.push(*best);
            }
            Err(e) => return Err(e),
        }
    }
    let merged = merge_outputs(parts);
    match worst {
        None => Ok(merged),
        Some(violation) => Err(Error::ConstraintNotMet {
            violation,
            best: Box::new(merged),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinmaxConfig {
    pub outer_rounds: usize,
    /// Token-refresh steps per identity per round.
    pub tau_steps: usize,
    /// ρ steps per round.
    pub rho_steps: usize,
    pub tau_lr: f64,
    pub tau_batch: usize,
}

impl Default for MinmaxConfig {
    fn default() -> Self {
        Self {
            outer_rounds: 10,
            tau_steps: 100,
            rho_steps: 200,
            tau_lr: 5e-3,
            tau_batch: 32,
        }
    }
}

/// Consecutive rounds with both losses rising that flag instability.
pub const UNSTABLE_ROUNDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    /// Mean TI loss during the token refresh (NaN when skipped).
    pub ti_loss: f64,
    /// Mean objective during the ρ epoch.
    pub unlearn_loss: f64,
    pub unstable: bool,
}

#[derive(Clone, Debug)]
pub struct MinmaxOutput {
    pub craft: CraftOutput,
    pub tokens: Vec<TiArtifact>,
    pub rounds: Vec<RoundRow>,
    pub unstable: bool,
}

/// Alternate token refreshes on the current unlearnable samples (the
/// personalizer adapting) with ρ epochs against the refreshed tokens. The λ
/// schedule carries across rounds. In per-identity mode every identity runs
/// its own game with its own ρ and token.
#[allow(clippy::too_many_arguments)]
pub fn joint_minmax_train<M: NoiseModel + ?Sized>(
    model: &M,
    dm: &ParamStore,
    rho: &Rho,
    targets: &[CraftTarget],
    tokens: &[TiArtifact],
    cfg: &UnlearnConfig,
    mm: &MinmaxConfig,
    schedule: &NoiseSchedule,
) -> Result<MinmaxOutput> {
    if tokens.len() != targets.len() {
        return Err(Error::shape("minmax tokens", &[targets.len()], &[tokens.len()]));
    }
    if !cfg.per_identity || targets.len() == 1 {
        return minmax_game(model, dm, rho, targets, tokens, cfg, mm, schedule);
    }
    if cfg.shuffle {
        return Err(Error::config(
            "unlearn.shuffle",
            "per-identity min-max refreshes each identity's own token; use a shared rho to shuffle",
        ));
    }
    let mut parts = Vec::new();
    let mut refreshed = Vec::new();
    let mut rounds = Vec::new();
    let mut unstable = false;
    let mut worst: Option<f64> = None;
    for (i, (t, art)) in targets.iter().zip(tokens).enumerate() {
        let sub = UnlearnConfig {
            seed: Stream::derive(cfg.seed, i as u64).seed(),
            ..cfg.clone()
        };
        match minmax_game(model, dm, rho, std::slice::from_ref(t), std::slice::from_ref(art), &sub, mm, schedule) {
            Ok(out) => {
                parts.push(out.craft);
                refreshed.extend(out.tokens);
                rounds.extend(out.rounds);
                unstable |= out.unstable;
            }
            Err(Error::ConstraintNotMet { violation, best }) => {
                worst = Some(worst.unwrap_or(0.0).max(violation));
                parts.push(*best);
            }
            Err(e) => return Err(e),
        }
    }
    let craft = merge_outputs(parts);
    match worst {
        None => Ok(MinmaxOutput {
            craft,
            tokens: refreshed,
            rounds,
            unstable,
        }),
        Some(violation) => Err(Error::ConstraintNotMet {
            violation,
            best: Box::new(craft),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn minmax_game<M: NoiseModel + ?Sized>(
    model: &M,
    dm: &ParamStore,
    rho: &Rho,
    targets: &[CraftTarget],
    tokens: &[TiArtifact],
    cfg: &UnlearnConfig,
    mm: &MinmaxConfig,
    schedule: &NoiseSchedule,
) -> Result<MinmaxOutput> {
    let mut frozen = dm.clone();
    for t in tokens {
        t.install(&mut frozen);
    }
    let mut tokens = tokens.to_vec();
    let mut crafter = Crafter::new(model, &frozen, rho, targets, cfg, schedule)?;
    let mut rounds = Vec::with_capacity(mm.outer_rounds);
    let mut rising = 0usize;
    let mut unstable = false;
    for round in 0..mm.outer_rounds {
        let mut ti_loss = f64::NAN;
        if mm.tau_steps > 0 {
            let current = crafter.current_outputs()?;
            let mut sum = 0.0;
            let mut count = 0usize;
            for (i, (art, samples)) in tokens.iter_mut().zip(&current).enumerate() {
                let ti = TiConfig {
                    steps: mm.tau_steps,
                    lr: mm.tau_lr,
                    batch: mm.tau_batch,
                    seed: Stream::derive(cfg.seed, label("minmax_tau") ^ ((round * 1000 + i) as u64)).seed(),
                };
                *art = ti_train(model, crafter.frozen(), samples, &art.token, art.embedding.clone(), &ti, schedule)?;
                sum += art.trace.iter().sum::<f64>();
                count += art.trace.len();
            }
            ti_loss = sum / count as f64;
            let mut refreshed = crafter.frozen().clone();
            for t in &tokens {
                t.install(&mut refreshed);
            }
            crafter.set_frozen(&refreshed);
        }
        let start = crafter.trace().len();
        crafter.run(mm.rho_steps)?;
        let epoch = &crafter.trace()[start..];
        let unlearn_loss = if epoch.is_empty() {
            f64::NAN
        } else {
            epoch.iter().map(|r| r.total).sum::<f64>() / epoch.len() as f64
        };
        if let Some(prev) = rounds.last() {
            let prev: &RoundRow = prev;
            if ti_loss > prev.ti_loss && unlearn_loss > prev.unlearn_loss {
                rising += 1;
            } else {
                rising = 0;
            }
        }
        let flag = rising >= UNSTABLE_ROUNDS;
        unstable |= flag;
        rounds.push(RoundRow {
            round,
            ti_loss,
            unlearn_loss,
            unstable: flag,
        });
    }
    let craft = crafter.finish()?;
    Ok(MinmaxOutput {
        craft,
        tokens,
        rounds,
        unstable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ConstantNoise, Denoiser, DenoiserSpec, RhoSpec, SampleShape, TokenTable};
    use proptest::prelude::*;

    fn tiny() -> (Denoiser, ParamStore, NoiseSchedule) {
        let mut spec = DenoiserSpec::points();
        spec.hidden = vec![16];
        spec.cond_dim = 4;
        spec.time_dim = 8;
        let model = Denoiser::new(spec);
        let mut params = ParamStore::new();
        model.init(&mut params, 3);
        TokenTable::init(&mut params, 4, &["sstar0".into(), "sstar1".into()], 4);
        (model, params, NoiseSchedule::linear(20).unwrap())
    }

    fn targets() -> Vec<CraftTarget> {
        (0..2)
            .map(|i| CraftTarget {
                id: format!("id{i}"),
                samples: Tensor::from_rows(&[
                    vec![0.3 * i as f64, 0.2],
                    vec![0.1, -0.4 + 0.2 * i as f64],
                    vec![-0.2, 0.5],
                ])
                .unwrap(),
                token: format!("sstar{i}"),
            })
            .collect()
    }

    #[test]
    fn lambda_schedule() {
        let mut s = UnlearnState::new(&UnlearnConfig {
            eta_lambda: 0.5,
            ..UnlearnConfig::default()
        })
        .unwrap();
        s.update_lambda(0.0);
        assert_eq!(s.lambda, 0.0);
        s.update_lambda(0.2);
        assert_eq!(s.lambda, 0.5);
        for _ in 0..4 {
            s.update_lambda(1.0);
        }
        assert_eq!(s.lambda, 2.5);
        assert_eq!(s.history.len(), 6);
        assert!(UnlearnState::new(&UnlearnConfig {
            budget: 0.0,
            ..UnlearnConfig::default()
        })
        .is_err());
    }

    fn loss_value(diff: f64, pers: f64, lambda: f64, budget: f64, norm: NormKind) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![diff]).unwrap()).unwrap();
        let p = tape.constant(Tensor::scalar(pers)).unwrap();
        let l = lagrangian_loss(&mut tape, x, &Tensor::zeros(&[1, 1]), p, lambda, budget, norm).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn lagrangian_examples() {
        let d = 10.0 / 255.0;
        for norm in [NormKind::LinfSmooth, NormKind::L2] {
            assert_eq!(loss_value(0.3, 1.7, 0.0, d, norm), -1.7);
            assert!((loss_value(d, 1.0, 5.0, d, norm) + 1.0).abs() < 1e-12);
            let v = loss_value(0.05, 1.0, 2.0, d, norm);
            assert!((v - (2.0 * (0.05 - d) - 1.0)).abs() < 1e-12);
            assert!((v + 0.978_43).abs() < 1e-5);
        }
    }

    #[test]
    fn l2_hinge_gradient() {
        // d/dx of ‖x‖ at x = (0.3, 0.4) is x/‖x‖.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap()).unwrap();
        let p = tape.constant(Tensor::scalar(0.0)).unwrap();
        let l = lagrangian_loss(&mut tape, x, &Tensor::zeros(&[1, 2]), p, 1.0, 0.1, NormKind::L2).unwrap();
        assert!((tape.value(l).data()[0] - 0.4).abs() < 1e-15);
        let g = tape.backward(l, Tensor::scalar(1.0)).unwrap();
        let gx = g.get(x).unwrap();
        assert!((gx.data()[0] - 0.6).abs() < 1e-12 && (gx.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_rho_reproduces_reconstruction() {
        let (m, p, s) = tiny();
        let rho = Rho::new(RhoSpec::points());
        let mut rp = ParamStore::new();
        rho.init(&mut rp, 0);
        let x0 = targets()[0].samples.clone();
        let r = pipeline_forward(&m, &p, &rho, &rp, &x0, 4, &s).unwrap();
        assert_eq!(r.shifted_latent, r.latent);
        let direct = crate::diffusion::denoise(&m, &p, &r.latent, None, &SamplerConfig::with_k(4), &s).unwrap();
        assert!(r.output.sub(&direct).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn constant_model_identity_rho_is_exact() {
        let s = NoiseSchedule::linear(30).unwrap();
        let m = ConstantNoise::new(SampleShape::points(2), vec![0.3, -0.7]).unwrap();
        let rho = Rho::new(RhoSpec::points());
        let mut rp = ParamStore::new();
        rho.init(&mut rp, 0);
        let x0 = targets()[1].samples.clone();
        let r = pipeline_forward(&m, &ParamStore::new(), &rho, &rp, &x0, 4, &s).unwrap();
        assert!(r.output.sub(&x0).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn zero_steps_emits_reconstruction() {
        let (m, p, s) = tiny();
        let rho = Rho::new(RhoSpec::points());
        let cfg = UnlearnConfig {
            steps: 0,
            budget: 10.0,
            ..UnlearnConfig::default()
        };
        let out = craft_unlearnable(&m, &p, &rho, &targets(), &cfg, &s).unwrap();
        assert_eq!(out.lambda, 0.0);
        for o in &out.outputs {
            assert_eq!(o.unlearnable, o.reconstruction);
        }
    }

    #[test]
    fn training_respects_budget_and_freezes_model() {
        let (m, p, s) = tiny();
        let before = p.clone();
        let rho = Rho::new(RhoSpec::points());
        let ts = targets();
        let mut cfg = UnlearnConfig {
            steps: 60,
            lr: 1e-2,
            eta_lambda: 5.0,
            ..UnlearnConfig::default()
        };
        // Budget well above the reconstruction error so the start is feasible.
        let probe = Crafter::new(&m, &p, &rho, &ts, &cfg, &s).unwrap();
        let recon_err = (0..2)
            .map(|i| linf_distance(&probe.current_outputs().unwrap()[i], &ts[i].samples).unwrap())
            .fold(0.0, f64::max);
        cfg.budget = recon_err + 0.05;
        let out = craft_unlearnable(&m, &p, &rho, &ts, &cfg, &s).unwrap();
        assert_eq!(p, before);
        assert_eq!(out.frozen_grad_norm, 0.0);
        for (o, t) in out.outputs.iter().zip(&ts) {
            assert!(linf_distance(&o.unlearnable, &t.samples).unwrap() <= 1.01 * cfg.budget);
        }
        let lambdas: Vec<f64> = out.trace.iter().map(|r| r.lambda).collect();
        assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
        let again = craft_unlearnable(&m, &p, &rho, &ts, &cfg, &s).unwrap();
        assert_eq!(again.outputs, out.outputs);
    }

    #[test]
    fn tiny_budget_cannot_be_met() {
        let (m, p, s) = tiny();
        let rho = Rho::new(RhoSpec::points());
        let cfg = UnlearnConfig {
            steps: 3,
            budget: 1e-9,
            ..UnlearnConfig::default()
        };
        match craft_unlearnable(&m, &p, &rho, &targets(), &cfg, &s) {
            Err(Error::ConstraintNotMet { violation, best }) => {
                assert!(violation > 0.0);
                assert_eq!(best.outputs.len(), 2);
            }
            other => panic!("expected ConstraintNotMet, got {other:?}"),
        }
    }

    #[test]
    fn shuffle_is_a_derangement() {
        let ts: Vec<CraftTarget> = (0..5)
            .map(|i| CraftTarget {
                id: format!("id{i}"),
                samples: Tensor::zeros(&[3, 2]),
                token: format!("sstar{i}"),
            })
            .collect();
        for seed in 0..20 {
            let a = token_assignment(&ts, true, seed);
            for (i, t) in a.iter().enumerate() {
                assert_ne!(t, &ts[i].token);
            }
            let mut sorted = a.clone();
            sorted.sort();
            assert_eq!(sorted, (0..5).map(|i| format!("sstar{i}")).collect::<Vec<_>>());
        }
        assert_eq!(token_assignment(&ts, false, 0)[3], "sstar3");
    }

    #[test]
    fn minmax_without_token_steps_matches_craft() {
        let (m, p, s) = tiny();
        let rho = Rho::new(RhoSpec::points());
        let ts = targets();
        let arts: Vec<TiArtifact> = ts
            .iter()
            .map(|t| TiArtifact {
                token: t.token.clone(),
                embedding: TokenTable::get(&p, &t.token).unwrap().clone(),
                trace: vec![],
            })
            .collect();
        let mm = MinmaxConfig {
            outer_rounds: 3,
            tau_steps: 0,
            rho_steps: 4,
            ..MinmaxConfig::default()
        };
        for per_identity in [false, true] {
            let cfg = UnlearnConfig {
                steps: 12,
                budget: 10.0,
                per_identity,
                ..UnlearnConfig::default()
            };
            let joint = joint_minmax_train(&m, &p, &rho, &ts, &arts, &cfg, &mm, &s).unwrap();
            let plain = craft_unlearnable(&m, &p, &rho, &ts, &cfg, &s).unwrap();
            assert_eq!(joint.craft.outputs, plain.outputs);
            assert_eq!(joint.craft.trace, plain.trace);
            assert_eq!(joint.craft.rho.len(), if per_identity { 2 } else { 1 });

            let none = MinmaxConfig { outer_rounds: 0, ..mm.clone() };
            let idle = joint_minmax_train(&m, &p, &rho, &ts, &arts, &cfg, &none, &s).unwrap();
            assert_eq!(idle.tokens, arts);
            for o in &idle.craft.outputs {
                assert_eq!(o.unlearnable, o.reconstruction);
            }

            let shuffled = UnlearnConfig { shuffle: true, ..cfg };
            let res = joint_minmax_train(&m, &p, &rho, &ts, &arts, &shuffled, &mm, &s);
            assert_eq!(matches!(res, Err(Error::Config { .. })), per_identity);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn emitted_samples_meet_the_budget_or_the_run_fails(
            budget in 0.005f64..0.5,
            steps in 0usize..25,
            seed in any::<u64>(),
            per_identity in any::<bool>(),
        ) {
            let (m, p, s) = tiny();
            let rho = Rho::new(RhoSpec::points());
            let ts = targets();
            let cfg = UnlearnConfig {
                budget,
                steps,
                seed,
                per_identity,
                lr: 1e-2,
                eta_lambda: 5.0,
                n_mc: 2,
                ..UnlearnConfig::default()
            };
            match craft_unlearnable(&m, &p, &rho, &ts, &cfg, &s) {
                Ok(out) => {
                    for (o, t) in out.outputs.iter().zip(&ts) {
                        prop_assert!(linf_distance(&o.unlearnable, &t.samples).unwrap() <= 1.01 * budget);
                    }
                    prop_assert!(out.trace.windows(2).all(|w| w[1].lambda >= w[0].lambda || w[1].step < w[0].step));
                }
                Err(Error::ConstraintNotMet { violation, .. }) => prop_assert!(violation > 0.0),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
