//! Small-scale textual inversion (a single learned condition token over a
//! frozen denoiser) and DreamBooth-style fine-tuning with a class prior.

use serde::{Deserialize, Serialize};

use crate::diffusion::{noise_prediction_loss, sample, SamplerConfig, DIVERGENCE_LOSS};
use crate::error::{Error, Result};
use crate::nets::{Cond, Denoiser, NoiseModel, TokenTable};
use crate::rng::{label, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamConfig, NodeId, ParamStore, Tape, Tensor};

/// Monte-Carlo `(t, ε)` draws per personalization-loss evaluation.
pub const DEFAULT_MC_DRAWS: usize = 8;
/// Standard deviation of the noise added to the token initialization.
pub const TOKEN_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rows per step, drawn with replacement from the subject samples.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TiConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 5e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// A learned token embedding and the loss trace that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TiArtifact {
    pub token: String,
    pub embedding: Tensor,
    pub trace: Vec<f64>,
}

impl TiArtifact {
    /// Copy of `params` with this token installed (frozen).
    pub fn apply(&self, params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        self.install(&mut out);
        out
    }

    pub fn install(&self, params: &mut ParamStore) {
        TokenTable::insert(params, &self.token, self.embedding.clone(), false);
    }
}

/// Mean of the given token embeddings plus `N(0, 0.01²)` noise.
pub fn initial_token(params: &ParamStore, class_tokens: &[String], seed: u64) -> Result<Tensor> {
    if class_tokens.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let mut sum = TokenTable::get(params, &class_tokens[0])?.clone();
    for t in &class_tokens[1..] {
        sum = sum.add(TokenTable::get(params, t)?)?;
    }
    let mean = sum.scale(1.0 / class_tokens.len() as f64);
    let noise = Stream::derive(seed, label("token_init")).normals(mean.len());
    Tensor::new(mean.shape().to_vec(), mean.data().iter().zip(noise).map(|(m, z)| m + TOKEN_INIT_NOISE * z).collect())
}

/// Random `(t, ε)` draws for `rows` samples of `dim` values each.
fn draws(rng: &mut Stream, rows: usize, dim: usize, schedule: &NoiseSchedule) -> (Vec<usize>, Vec<f64>) {
    let ts = (0..rows).map(|_| rng.int_inclusive(1, schedule.steps())).collect();
    let eps = rng.normals(rows * dim);
    (ts, eps)
}

/// `E_{t,ε} ‖ε − ε_θ(x_t, t, c)‖²` estimated with `n_mc` draws per row of
/// `x`, recorded on `tape` (differentiable in `x`). `cond` is per row.
#[allow(clippy::too_many_arguments)]
pub fn personalization_loss<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    x: NodeId,
    cond: &[Cond],
    n_mc: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    let n = shape[0];
    if cond.len() != n {
        return Err(Error::shape("personalization_loss", &[n], &[cond.len()]));
    }
    if n_mc == 0 || n == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let dim: usize = shape[1..].iter().product();
    let mut rng = Stream::derive(seed, label("personalization_loss"));
    let (ts, eps) = draws(&mut rng, n * n_mc, dim, schedule);
    let mut eps_shape = shape.clone();
    eps_shape[0] = n * n_mc;
    let eps = Tensor::new(eps_shape, eps)?;
    let reps = tape.concat(&vec![x; n_mc], 0)?;
    let conds: Vec<Cond> = (0..n_mc).flat_map(|_| cond.iter().copied()).collect();
    noise_prediction_loss(model, tape, params, reps, &ts, &eps, &conds, schedule)
}

/// Value of [`personalization_loss`] on plain data.
#[allow(clippy::too_many_arguments)]
pub fn personalization_loss_value<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    x: &Tensor,
    cond: &[Cond],
    n_mc: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone())?;
    let loss = personalization_loss(model, &mut tape, params, xi, cond, n_mc, schedule, seed)?;
    Ok(tape.value(loss).data()[0])
}

/// Learn an embedding for `token` from `samples` with every other
/// parameter frozen. `params` is not modified.
#[allow(clippy::too_many_arguments)]
pub fn ti_train<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    samples: &Tensor,
    token: &str,
    init: Tensor,
    cfg: &TiConfig,
    schedule: &NoiseSchedule,
) -> Result<TiArtifact> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let mut store = params.clone();
    store.reset_optimizer();
    store.set_trainable("", false);
    TokenTable::insert(&mut store, token, init, true);
    store.zero_grad();
    let adam = AdamConfig::default();
    let mut rng = Stream::derive(cfg.seed, label("ti_train"));
    let dim = model.shape().len();
    let conds = vec![Some(token); cfg.batch];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.index(n)).collect();
        let x0 = samples.select_rows(&idx);
        let (ts, eps) = draws(&mut rng, cfg.batch, dim, schedule);
        let eps = Tensor::new(x0.shape().to_vec(), eps)?;
        let mut tape = Tape::new();
        let xi = tape.constant(x0)?;
        let loss = noise_prediction_loss(model, &mut tape, &store, xi, &ts, &eps, &conds, schedule)?;
        let value = tape.value(loss).data()[0];
        if !(value <= DIVERGENCE_LOSS) {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        tape.backward_into(loss, &mut store)?;
        store.adam_step(&adam, cfg.lr)?;
        trace.push(value);
    }
    Ok(TiArtifact {
        token: token.to_string(),
        embedding: TokenTable::get(&store, token)?.clone(),
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbConfig {
    pub steps: usize,
    pub lr: f64,
    /// Subject rows and class rows per step (each).
    pub batch: usize,
    pub prior_weight: f64,
    pub seed: u64,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-4,
            batch: 16,
            prior_weight: 1.0,
            seed: 0,
        }
    }
}

/// Labeled class-prior samples.
#[derive(Clone, Copy, Debug)]
pub struct PriorSet<'a> {
    pub samples: &'a Tensor,
    pub labels: &'a [String],
}

/// Both loss terms recorded on one tape; the total is
/// `subject + prior_weight · class`.
pub struct DbTerms {
    pub subject: NodeId,
    pub class: NodeId,
    pub total: NodeId,
}

/// One fine-tuning minibatch.
pub struct DbBatch {
    pub subject: Tensor,
    pub subject_t: Vec<usize>,
    pub subject_eps: Tensor,
    pub class: Tensor,
    pub class_t: Vec<usize>,
    pub class_eps: Tensor,
    pub class_labels: Vec<String>,
}

impl DbBatch {
    pub fn draw(
        subject: &Tensor,
        prior: PriorSet<'_>,
        batch: usize,
        schedule: &NoiseSchedule,
        rng: &mut Stream,
    ) -> Result<Self> {
        let si: Vec<usize> = (0..batch).map(|_| rng.index(subject.rows())).collect();
        let ci: Vec<usize> = (0..batch).map(|_| rng.index(prior.samples.rows())).collect();
        let s = subject.select_rows(&si);
        let c = prior.samples.select_rows(&ci);
        let dim = s.row_len();
        let (subject_t, se) = draws(rng, batch, dim, schedule);
        let (class_t, ce) = draws(rng, batch, dim, schedule);
        Ok(Self {
            subject_eps: Tensor::new(s.shape().to_vec(), se)?,
            class_eps: Tensor::new(c.shape().to_vec(), ce)?,
            subject: s,
            subject_t,
            class: c,
            class_t,
            class_labels: ci.iter().map(|&i| prior.labels[i].clone()).collect(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn db_loss<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    token: &str,
    batch: &DbBatch,
    prior_weight: f64,
    schedule: &NoiseSchedule,
) -> Result<DbTerms> {
    let sc = vec![Some(token); batch.subject.rows()];
    let cc: Vec<Cond> = batch.class_labels.iter().map(|l| Some(l.as_str())).collect();
    let xs = tape.constant(batch.subject.clone())?;
    let xc = tape.constant(batch.class.clone())?;
    let subject = noise_prediction_loss(model, tape, params, xs, &batch.subject_t, &batch.subject_eps, &sc, schedule)?;
    let class = noise_prediction_loss(model, tape, params, xc, &batch.class_t, &batch.class_eps, &cc, schedule)?;
    let total = tape.axpby(subject, 1.0, class, prior_weight)?;
    Ok(DbTerms { subject, class, total })
}

/// Fine-tune the denoiser (and the subject token) on `subject` with a class
/// prior. Returns the tuned store and the loss trace; `params` is not
/// modified.
#[allow(clippy::too_many_arguments)]
pub fn db_train<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    subject: &Tensor,
    token: &str,
    init: Tensor,
    prior: PriorSet<'_>,
    cfg: &DbConfig,
    schedule: &NoiseSchedule,
) -> Result<(ParamStore, Vec<f64>)> {
    if subject.rows() == 0 || prior.samples.rows() == 0 {
        return Err(Error::InsufficientData {
            need: 1,
            got: subject.rows().min(prior.samples.rows()),
        });
    }
    let mut store = params.clone();
    store.reset_optimizer();
    store.set_trainable("", false);
    store.set_trainable(Denoiser::PREFIX, true);
    TokenTable::insert(&mut store, token, init, true);
    store.zero_grad();
    let adam = AdamConfig::default();
    let mut rng = Stream::derive(cfg.seed, label("db_train"));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = DbBatch::draw(subject, prior, cfg.batch, schedule, &mut rng)?;
        let mut tape = Tape::new();
        let terms = db_loss(model, &mut tape, &store, token, &batch, cfg.prior_weight, schedule)?;
        let value = tape.value(terms.total).data()[0];
        if !(value <= DIVERGENCE_LOSS) {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        tape.backward_into(terms.total, &mut store)?;
        store.adam_step(&adam, cfg.lr)?;
        trace.push(value);
    }
    store.set_trainable("", false);
    Ok((store, trace))
}

/// `n` samples conditioned on `token`, which must exist in `params`.
pub fn generate_personalized<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    token: &str,
    n: usize,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    TokenTable::get(params, token)?;
    sample(model, params, n, Some(token), sampler, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ConstantNoise, DenoiserSpec, SampleShape};

    fn setup() -> (Denoiser, ParamStore, NoiseSchedule, Vec<String>) {
        let mut spec = DenoiserSpec::points();
        spec.hidden = vec![16, 16];
        spec.cond_dim = 4;
        spec.time_dim = 8;
        let model = Denoiser::new(spec);
        let mut params = ParamStore::new();
        model.init(&mut params, 1);
        let classes: Vec<String> = (0..3).map(|i| format!("class{i}")).collect();
        TokenTable::init(&mut params, 4, &classes, 2);
        params.set_trainable("", false);
        (model, params, NoiseSchedule::linear(50).unwrap(), classes)
    }

    fn subject() -> Tensor {
        Tensor::from_rows(&[vec![0.5, 0.1], vec![0.4, 0.2], vec![0.6, 0.0]]).unwrap()
    }

    #[test]
    fn zero_steps_keeps_init() {
        let (m, p, s, classes) = setup();
        let init = initial_token(&p, &classes, 3).unwrap();
        let cfg = TiConfig { steps: 0, ..TiConfig::default() };
        let art = ti_train(&m, &p, &subject(), "sstar0", init.clone(), &cfg, &s).unwrap();
        assert_eq!(art.embedding, init);
        assert!(art.trace.is_empty());
    }

    #[test]
    fn token_init_is_class_mean_plus_small_noise() {
        let (_, p, _, classes) = setup();
        let init = initial_token(&p, &classes, 3).unwrap();
        let mut mean = vec![0.0; 4];
        for c in &classes {
            for (m, v) in mean.iter_mut().zip(TokenTable::get(&p, c).unwrap().data()) {
                *m += v / 3.0;
            }
        }
        for (a, b) in init.data().iter().zip(&mean) {
            assert!((a - b).abs() < 0.05);
        }
        assert_ne!(init.data(), mean.as_slice());
    }

    #[test]
    fn ti_leaves_denoiser_untouched_and_is_deterministic() {
        let (m, p, s, classes) = setup();
        let before = p.clone();
        let init = initial_token(&p, &classes, 3).unwrap();
        let cfg = TiConfig {
            steps: 20,
            batch: 8,
            ..TiConfig::default()
        };
        let a = ti_train(&m, &p, &subject(), "sstar0", init.clone(), &cfg, &s).unwrap();
        let b = ti_train(&m, &p, &subject(), "sstar0", init.clone(), &cfg, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, before);
        assert_ne!(a.embedding, init);
        let tuned = a.apply(&p);
        for (name, v) in p.iter() {
            assert_eq!(tuned.value(name).unwrap(), v);
        }
        assert!(!tuned.is_trainable(&TokenTable::param_name("sstar0")));
    }

    #[test]
    fn inherited_optimizer_state_is_ignored() {
        let (m, p, s, classes) = setup();
        let mut dirty = p.clone();
        dirty.set_trainable("", true);
        let names: Vec<String> = dirty.names().map(String::from).collect();
        for n in &names {
            let ones = dirty.value(n).unwrap().map(|_| 1.0);
            dirty.add_grad(n, &ones).unwrap();
        }
        dirty.adam_step(&crate::tensor::AdamConfig::default(), 0.1).unwrap();
        for n in &names {
            dirty.set_value(n, p.value(n).unwrap().clone()).unwrap();
        }
        dirty.set_trainable("", false);
        assert_eq!(dirty.step(), 1);
        let init = initial_token(&p, &classes, 3).unwrap();
        let cfg = TiConfig { steps: 5, ..TiConfig::default() };
        let a = ti_train(&m, &p, &subject(), "sstar0", init.clone(), &cfg, &s).unwrap();
        let b = ti_train(&m, &dirty, &subject(), "sstar0", init, &cfg, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn personalization_loss_oracles() {
        let s = NoiseSchedule::linear(50).unwrap();
        let shape = SampleShape::points(3);
        let zero = ConstantNoise::zero(shape);
        let p = ParamStore::new();
        let x = Tensor::zeros(&[400, 3]);
        let cond = vec![None; 400];
        let v = personalization_loss_value(&zero, &p, &x, &cond, 8, &s, 1).unwrap();
        // Mean of 3200 chi-square(3) draws.
        assert!((v - 3.0).abs() < 0.15, "{v}");
        assert_eq!(v, personalization_loss_value(&zero, &p, &x, &cond, 8, &s, 1).unwrap());
    }

    /// Returns exactly the noise that was used to build `x_t` when the
    /// clean sample is zero.
    struct Oracle(NoiseSchedule);

    impl NoiseModel for Oracle {
        fn shape(&self) -> SampleShape {
            SampleShape::points(2)
        }
        fn predict(&self, tape: &mut Tape, _: &ParamStore, x: NodeId, t: &[usize], _: &[Cond]) -> Result<NodeId> {
            let inv: Vec<f64> = t.iter().map(|&ti| 1.0 / (1.0 - self.0.alpha_bar(ti)).sqrt()).collect();
            tape.scale_rows(x, inv)
        }
    }

    #[test]
    fn true_noise_oracle_gives_zero_loss() {
        let s = NoiseSchedule::linear(50).unwrap();
        let m = Oracle(s.clone());
        let x = Tensor::zeros(&[5, 2]);
        let v = personalization_loss_value(&m, &ParamStore::new(), &x, &[None; 5], 8, &s, 4).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn db_terms_add_up_and_prior_dominates() {
        let (m, p, s, classes) = setup();
        let mut p = p;
        p.set_trainable(Denoiser::PREFIX, true);
        let init = initial_token(&p, &classes, 0).unwrap();
        TokenTable::insert(&mut p, "sstar0", init, true);
        let pool = Tensor::from_rows(&[vec![-0.5, 0.3], vec![0.1, -0.6]]).unwrap();
        let labels = vec!["class0".to_string(), "class2".to_string()];
        let prior = PriorSet {
            samples: &pool,
            labels: &labels,
        };
        let batch = DbBatch::draw(&subject(), prior, 6, &s, &mut Stream::new(0)).unwrap();
        for weight in [0.0, 0.7, 1e4] {
            let mut tape = Tape::new();
            let t = db_loss(&m, &mut tape, &p, "sstar0", &batch, weight, &s).unwrap();
            let (sv, cv, tv) = (
                tape.value(t.subject).data()[0],
                tape.value(t.class).data()[0],
                tape.value(t.total).data()[0],
            );
            assert!((tv - (sv + weight * cv)).abs() <= 1e-12 * tv.abs().max(1.0));
        }
        let grads = |weight_s: f64, weight_c: f64| {
            let mut store = p.clone();
            store.zero_grad();
            let mut tape = Tape::new();
            let t = db_loss(&m, &mut tape, &store, "sstar0", &batch, 1.0, &s).unwrap();
            let out = tape.axpby(t.subject, weight_s, t.class, weight_c).unwrap();
            tape.backward_into(out, &mut store).unwrap();
            store.grad_norm()
        };
        let subject_only = grads(1.0, 0.0);
        let total = grads(1.0, 1e4);
        assert!(subject_only < 0.01 * total, "{subject_only} vs {total}");
    }

    #[test]
    fn db_train_is_deterministic_and_zero_prior_reduces() {
        let (m, p, s, classes) = setup();
        let init = initial_token(&p, &classes, 0).unwrap();
        let pool = Tensor::from_rows(&[vec![-0.5, 0.3], vec![0.1, -0.6]]).unwrap();
        let labels = vec!["class0".to_string(), "class2".to_string()];
        let prior = PriorSet {
            samples: &pool,
            labels: &labels,
        };
        let cfg = DbConfig {
            steps: 5,
            batch: 4,
            ..DbConfig::default()
        };
        let (a, ta) = db_train(&m, &p, &subject(), "sstar0", init.clone(), prior, &cfg, &s).unwrap();
        let (b, tb) = db_train(&m, &p, &subject(), "sstar0", init.clone(), prior, &cfg, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_ne!(a.value("net/eps/out/w"), p.value("net/eps/out/w"));

        // With zero prior weight the class term has no influence on the
        // update: changing the class samples leaves the result unchanged.
        let zero = DbConfig { prior_weight: 0.0, ..cfg };
        let other = pool.scale(-3.0);
        let other_prior = PriorSet {
            samples: &other,
            labels: &labels,
        };
        let (c, _) = db_train(&m, &p, &subject(), "sstar0", init.clone(), prior, &zero, &s).unwrap();
        let (d, _) = db_train(&m, &p, &subject(), "sstar0", init, other_prior, &zero, &s).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn generation_cases() {
        let (m, p, s, _) = setup();
        let sampler = SamplerConfig::default();
        assert_eq!(generate_personalized(&m, &p, "class1", 0, &sampler, &s).unwrap().rows(), 0);
        let a = generate_personalized(&m, &p, "class1", 7, &sampler, &s).unwrap();
        assert_eq!(a, generate_personalized(&m, &p, "class1", 7, &sampler, &s).unwrap());
        assert!(matches!(
            generate_personalized(&m, &p, "sstar9", 3, &sampler, &s),
            Err(Error::Token(_))
        ));
    }
}
