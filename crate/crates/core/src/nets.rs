//! Conditional noise predictor, perturbation network, and token table.
//!
//! Parameters live in a [`ParamStore`] under `net/<which>/<layer>/<w|b>`:
//! `eps` for the denoiser, `rho` for the perturbation network, and
//! `net/tokens/<name>/w` for condition embeddings. The reserved `null`
//! token is a frozen zero vector and is what an absent condition means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{NodeId, ParamStore, Tape, Tensor};

/// Optional condition token per batch row.
pub type Cond<'a> = Option<&'a str>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Points,
    Images,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Points => "points",
            DataKind::Images => "images",
        }
    }
}

/// Shape of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleShape {
    pub kind: DataKind,
    /// Point dimension; ignored for images.
    pub dim: usize,
    pub channels: usize,
    /// Square image side; ignored for points.
    pub extent: usize,
}

impl SampleShape {
    pub fn points(dim: usize) -> Self {
        Self {
            kind: DataKind::Points,
            dim,
            channels: 1,
            extent: 0,
        }
    }

    pub fn images(channels: usize, extent: usize) -> Self {
        Self {
            kind: DataKind::Images,
            dim: 0,
            channels,
            extent,
        }
    }

    /// Scalars per sample.
    pub fn len(&self) -> usize {
        match self.kind {
            DataKind::Points => self.dim,
            DataKind::Images => self.channels * self.extent * self.extent,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch tensor shape for `n` samples.
    pub fn batch(&self, n: usize) -> Vec<usize> {
        match self.kind {
            DataKind::Points => vec![n, self.dim],
            DataKind::Images => vec![n, self.channels, self.extent, self.extent],
        }
    }

    pub fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.batch(0)[1..] {
            return Err(Error::shape("sample shape", x.shape(), &self.batch(x.rows())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub shape: SampleShape,
    /// Dense widths (points).
    pub hidden: Vec<usize>,
    /// Base channel count (images).
    pub width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl DenoiserSpec {
    pub fn points() -> Self {
        Self {
            shape: SampleShape::points(2),
            hidden: vec![128, 128, 128],
            width: 0,
            time_dim: 32,
            cond_dim: 16,
        }
    }

    pub fn images() -> Self {
        Self {
            shape: SampleShape::images(1, 16),
            hidden: Vec::new(),
            width: 16,
            time_dim: 32,
            cond_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoSpec {
    pub shape: SampleShape,
    /// Hidden width (points) or base channel count (images).
    pub width: usize,
}

impl RhoSpec {
    pub fn points() -> Self {
        Self {
            shape: SampleShape::points(2),
            width: 64,
        }
    }

    pub fn images() -> Self {
        Self {
            shape: SampleShape::images(1, 16),
            width: 32,
        }
    }
}

fn pname(which: &str, layer: &str, wb: char) -> String {
    format!("net/{which}/{layer}/{wb}")
}

fn gaussian(rng: &mut Stream, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|v| v * std).collect())
        .expect("length matches shape")
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Stream,
    which: &'static str,
}

impl Init<'_> {
    fn dense(&mut self, layer: &str, fan_in: usize, fan_out: usize, zero: bool) {
        let std = if zero { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
        let w = gaussian(&mut self.rng, &[fan_in, fan_out], std);
        self.store.insert(pname(self.which, layer, 'w'), w);
        self.store.insert(pname(self.which, layer, 'b'), Tensor::zeros(&[fan_out]));
    }

    fn conv(&mut self, layer: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f64).sqrt() };
        let w = gaussian(&mut self.rng, &[cout, cin, k, k], std);
        self.store.insert(pname(self.which, layer, 'w'), w);
        self.store.insert(pname(self.which, layer, 'b'), Tensor::zeros(&[cout]));
    }

    /// Transposed conv with stride 2; weight layout `[cin, cout, k, k]`.
    fn conv_t(&mut self, layer: &str, cin: usize, cout: usize, k: usize) {
        let std = (4.0 / (cin * k * k) as f64).sqrt();
        let w = gaussian(&mut self.rng, &[cin, cout, k, k], std);
        self.store.insert(pname(self.which, layer, 'w'), w);
        self.store.insert(pname(self.which, layer, 'b'), Tensor::zeros(&[cout]));
    }
}

struct Layers<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    which: &'static str,
}

impl Layers<'_> {
    fn w(&mut self, layer: &str) -> Result<NodeId> {
        self.tape.param(self.params, &pname(self.which, layer, 'w'))
    }

    fn b(&mut self, layer: &str) -> Result<NodeId> {
        self.tape.param(self.params, &pname(self.which, layer, 'b'))
    }

    fn dense(&mut self, layer: &str, x: NodeId) -> Result<NodeId> {
        let w = self.w(layer)?;
        let b = self.b(layer)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row_bias(y, b)
    }

    /// Dense without bias.
    fn project(&mut self, layer: &str, x: NodeId) -> Result<NodeId> {
        let w = self.w(layer)?;
        self.tape.matmul(x, w)
    }

    fn conv(&mut self, layer: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.w(layer)?;
        let b = self.b(layer)?;
        let y = self.tape.conv2d(x, w, stride, 1)?;
        self.tape.add_channel_bias(y, b)
    }

    fn conv_t(&mut self, layer: &str, x: NodeId) -> Result<NodeId> {
        let w = self.w(layer)?;
        let b = self.b(layer)?;
        let y = self.tape.conv_transpose2d(x, w, 2, 1)?;
        self.tape.add_channel_bias(y, b)
    }
}

/// Condition embeddings stored in a [`ParamStore`].
pub struct TokenTable;

impl TokenTable {
    pub const NULL: &'static str = "null";

    pub fn param_name(token: &str) -> String {
        format!("net/tokens/{token}/w")
    }

    /// Insert (or replace) a token embedding.
    pub fn insert(store: &mut ParamStore, token: &str, embedding: Tensor, trainable: bool) {
        let name = Self::param_name(token);
        store.insert(name.clone(), embedding);
        store.set_trainable(&name, trainable);
    }

    /// Frozen zero `null` token plus `N(0, 1)` embeddings for `classes`.
    pub fn init(store: &mut ParamStore, dim: usize, classes: &[String], seed: u64) {
        Self::insert(store, Self::NULL, Tensor::zeros(&[dim]), false);
        let mut rng = Stream::derive(seed, crate::rng::label("tokens"));
        for c in classes {
            Self::insert(store, c, Tensor::vector(rng.normals(dim)), true);
        }
    }

    pub fn get<'a>(store: &'a ParamStore, token: &str) -> Result<&'a Tensor> {
        store
            .value(&Self::param_name(token))
            .ok_or_else(|| Error::Token(token.to_string()))
    }

    /// Token names, lexicographic.
    pub fn names(store: &ParamStore) -> Vec<String> {
        store
            .names()
            .filter_map(|n| n.strip_prefix("net/tokens/")?.strip_suffix("/w").map(str::to_string))
            .collect()
    }

    /// `[n, dim]` embeddings of `conds`, absent conditions mapped to `null`.
    pub fn lookup(tape: &mut Tape, store: &ParamStore, conds: &[Cond]) -> Result<NodeId> {
        let mut distinct: Vec<&str> = Vec::new();
        let mut picks = Vec::with_capacity(conds.len());
        for c in conds {
            let tok = c.unwrap_or(Self::NULL);
            let idx = match distinct.iter().position(|d| *d == tok) {
                Some(i) => i,
                None => {
                    distinct.push(tok);
                    distinct.len() - 1
                }
            };
            picks.push(idx);
        }
        let mut nodes = Vec::with_capacity(distinct.len());
        for tok in &distinct {
            Self::get(store, tok)?;
            nodes.push(tape.param(store, &Self::param_name(tok))?);
        }
        if nodes.is_empty() {
            return Err(Error::shape("token lookup", &[0], &[0]));
        }
        tape.stack(&nodes, &picks)
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait NoiseModel: Send + Sync {
    fn shape(&self) -> SampleShape;

    /// `x` is a batch of noisy samples; `t` and `cond` have one entry per row.
    fn predict(&self, tape: &mut Tape, params: &ParamStore, x: NodeId, t: &[usize], cond: &[Cond]) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    spec: DenoiserSpec,
}

impl Denoiser {
    pub const PREFIX: &'static str = "net/eps/";

    pub fn new(spec: DenoiserSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    /// Insert freshly initialized weights into `store`.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let s = &self.spec;
        let mut init = Init {
            store,
            rng: Stream::derive(seed, crate::rng::label("eps")),
            which: "eps",
        };
        match s.shape.kind {
            DataKind::Points => {
                let first = s.hidden[0];
                init.dense("in", s.shape.dim, first, false);
                init.dense("time", s.time_dim, first, false);
                init.dense("cond", s.cond_dim, first, false);
                for (i, w) in s.hidden.windows(2).enumerate() {
                    init.dense(&format!("h{i}"), w[0], w[1], false);
                }
                init.dense("out", *s.hidden.last().expect("non-empty"), s.shape.dim, false);
            }
            DataKind::Images => {
                let (c, ch) = (s.width, s.shape.channels);
                init.conv("in", ch + s.cond_dim, c, 3, false);
                init.dense("time", s.time_dim, c, false);
                init.conv("down", c, 2 * c, 3, false);
                init.conv("mid", 2 * c, 2 * c, 3, false);
                init.conv_t("up", 2 * c, c, 4);
                init.conv("merge", 2 * c, c, 3, false);
                init.conv("out", c, ch, 3, false);
            }
        }
    }
}

impl NoiseModel for Denoiser {
    fn shape(&self) -> SampleShape {
        self.spec.shape
    }

    fn predict(&self, tape: &mut Tape, params: &ParamStore, x: NodeId, t: &[usize], cond: &[Cond]) -> Result<NodeId> {
        let s = &self.spec;
        let n = tape.shape(x)[0];
        if t.len() != n || cond.len() != n {
            return Err(Error::shape("denoiser", &[n], &[t.len(), cond.len()]));
        }
        let emb = TokenTable::lookup(tape, params, cond)?;
        let temb = tape.sinusoidal(t, s.time_dim)?;
        let mut l = Layers {
            tape,
            params,
            which: "eps",
        };
        match s.shape.kind {
            DataKind::Points => {
                let h = l.dense("in", x)?;
                let ht = l.project("time", temb)?;
                let hc = l.project("cond", emb)?;
                let h = l.tape.add(h, ht)?;
                let h = l.tape.add(h, hc)?;
                let mut h = l.tape.silu(h)?;
                for i in 0..s.hidden.len() - 1 {
                    let z = l.dense(&format!("h{i}"), h)?;
                    h = l.tape.silu(z)?;
                }
                l.dense("out", h)
            }
            DataKind::Images => {
                let e = s.shape.extent;
                let cmap = l.tape.broadcast_spatial(emb, e, e)?;
                let xin = l.tape.concat(&[x, cmap], 1)?;
                let h = l.conv("in", xin, 1)?;
                let ht = l.dense("time", temb)?;
                let h = l.tape.add_channels(h, ht)?;
                let h1 = l.tape.silu(h)?;
                let d = l.conv("down", h1, 2)?;
                let d = l.tape.silu(d)?;
                let m = l.conv("mid", d, 1)?;
                let m = l.tape.silu(m)?;
                let u = l.conv_t("up", m)?;
                let u = l.tape.silu(u)?;
                let cat = l.tape.concat(&[u, h1], 1)?;
                let h = l.conv("merge", cat, 1)?;
                let h = l.tape.silu(h)?;
                l.conv("out", h, 1)
            }
        }
    }
}

/// Model returning the same noise vector for every input.
#[derive(Clone, Debug)]
pub struct ConstantNoise {
    shape: SampleShape,
    value: Vec<f64>,
}

impl ConstantNoise {
    pub fn new(shape: SampleShape, value: Vec<f64>) -> Result<Self> {
        if value.len() != shape.len() {
            return Err(Error::shape("constant noise", &[shape.len()], &[value.len()]));
        }
        Ok(Self { shape, value })
    }

    pub fn zero(shape: SampleShape) -> Self {
        Self {
            value: vec![0.0; shape.len()],
            shape,
        }
    }
}

impl NoiseModel for ConstantNoise {
    fn shape(&self) -> SampleShape {
        self.shape
    }

    fn predict(&self, tape: &mut Tape, _: &ParamStore, x: NodeId, _: &[usize], _: &[Cond]) -> Result<NodeId> {
        let n = tape.shape(x)[0];
        let data = self.value.iter().copied().cycle().take(n * self.value.len()).collect();
        tape.constant(Tensor::new(self.shape.batch(n), data)?)
    }
}

/// Classifier-free guidance `ε_u + γ(ε_c − ε_u)`; `γ = 1` and `γ = 0` skip
/// the unused branch.
pub fn guided_noise<M: NoiseModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &ParamStore,
    x: NodeId,
    t: &[usize],
    cond: &[Cond],
    guidance: f64,
) -> Result<NodeId> {
    if guidance == 1.0 || cond.iter().all(Option::is_none) {
        return model.predict(tape, params, x, t, cond);
    }
    let uncond = vec![None; cond.len()];
    if guidance == 0.0 {
        return model.predict(tape, params, x, t, &uncond);
    }
    let n = cond.len();
    let both = tape.concat(&[x, x], 0)?;
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let cc: Vec<Cond> = cond.iter().chain(&uncond).copied().collect();
    let eps = model.predict(tape, params, both, &tt, &cc)?;
    let ec = tape.slice(eps, 0, 0, n)?;
    let eu = tape.slice(eps, 0, n, n)?;
    let diff = tape.sub(ec, eu)?;
    let scaled = tape.scale(diff, guidance)?;
    tape.add(eu, scaled)
}

/// Skip-connected perturbation network `z + g(z)` whose last layer starts at
/// zero, so a fresh network is the identity.
#[derive(Clone, Debug)]
pub struct Rho {
    spec: RhoSpec,
}

impl Rho {
    pub const PREFIX: &'static str = "net/rho/";

    pub fn new(spec: RhoSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &RhoSpec {
        &self.spec
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let s = &self.spec;
        let mut init = Init {
            store,
            rng: Stream::derive(seed, crate::rng::label("rho")),
            which: "rho",
        };
        match s.shape.kind {
            DataKind::Points => {
                init.dense("hidden", s.shape.dim, s.width, false);
                init.dense("out", s.width, s.shape.dim, true);
            }
            DataKind::Images => {
                let (c, ch) = (s.width, s.shape.channels);
                init.conv("in", ch, c, 3, false);
                init.conv("down", c, 2 * c, 3, false);
                init.conv("mid", 2 * c, 2 * c, 3, false);
                init.conv_t("up", 2 * c, c, 4);
                init.conv("merge", 2 * c, c, 3, false);
                init.conv("out", c, ch, 3, true);
            }
        }
    }

    /// Names of the final (zero-initialized) layer.
    pub fn output_layer() -> [String; 2] {
        [pname("rho", "out", 'w'), pname("rho", "out", 'b')]
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, z: NodeId) -> Result<NodeId> {
        let expect = self.spec.shape.batch(tape.shape(z)[0]);
        if tape.shape(z) != expect.as_slice() {
            return Err(Error::shape("rho", tape.shape(z), &expect));
        }
        let mut l = Layers {
            tape,
            params,
            which: "rho",
        };
        let g = match self.spec.shape.kind {
            DataKind::Points => {
                let h = l.dense("hidden", z)?;
                let h = l.tape.silu(h)?;
                l.dense("out", h)?
            }
            DataKind::Images => {
                let h = l.conv("in", z, 1)?;
                let h1 = l.tape.silu(h)?;
                let d = l.conv("down", h1, 2)?;
                let d = l.tape.silu(d)?;
                let m = l.conv("mid", d, 1)?;
                let m = l.tape.silu(m)?;
                let u = l.conv_t("up", m)?;
                let u = l.tape.silu(u)?;
                let cat = l.tape.concat(&[u, h1], 1)?;
                let h = l.conv("merge", cat, 1)?;
                let h = l.tape.silu(h)?;
                l.conv("out", h, 1)?
            }
        };
        tape.add(z, g)
    }
}
