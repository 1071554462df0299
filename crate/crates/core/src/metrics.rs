//! Evaluation metrics and the per-run metrics record.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datasets::SpiralCurve;
use crate::diffusion::{denoise, SamplerConfig};
use crate::error::{Error, Result};
use crate::nets::{Cond, NoiseModel};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tensor};

fn same_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn row_distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean per-sample Euclidean distance between paired sets.
pub fn reconstruction_error(reconstructions: &Tensor, originals: &Tensor) -> Result<f64> {
    same_rows("e_R", reconstructions, originals)?;
    let n = originals.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| row_distance2(reconstructions.row(i), originals.row(i)).sqrt())
        .sum();
    Ok(total / n as f64)
}

pub const CURVE_FIT_DEGREE: usize = 3;
const CURVE_FIT_MIN_POINTS: usize = 10;

/// Angle of `p` unwrapped onto the spiral branch whose radius is nearest.
fn unwrap_angle(p: &[f64], curve: &SpiralCurve) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let base = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
    let branches = (curve.phi_max / (2.0 * PI)).ceil() as i64 + 1;
    (-1..=branches)
        .map(|k| base + 2.0 * PI * k as f64)
        .min_by(|a, b| {
            let da = (curve.radius(*a) - r).abs();
            let db = (curve.radius(*b) - r).abs();
            da.total_cmp(&db)
        })
        .expect("non-empty branch range")
}

/// Curve-fit error: least-squares cubic `r(φ)` fitted to the points, then
/// the mean squared gap between the fit and the true radius at each
/// point's unwrapped angle.
pub fn curve_fit_error(points: &Tensor, curve: &SpiralCurve) -> Result<f64> {
    let n = points.rows();
    if n < CURVE_FIT_MIN_POINTS {
        return Err(Error::InsufficientData {
            need: CURVE_FIT_MIN_POINTS,
            got: n,
        });
    }
    if points.row_len() != 2 {
        return Err(Error::Mode {
            expected: "points",
            got: "images",
        });
    }
    let phis: Vec<f64> = (0..n).map(|i| unwrap_angle(points.row(i), curve)).collect();
    let radii: Vec<f64> = (0..n)
        .map(|i| {
            let p = points.row(i);
            (p[0] * p[0] + p[1] * p[1]).sqrt()
        })
        .collect();
    // Basis in the normalized angle u = φ/φ_max for conditioning.
    let cols = CURVE_FIT_DEGREE + 1;
    let design = DMatrix::from_fn(n, cols, |i, j| (phis[i] / curve.phi_max).powi(j as i32));
    let target = DVector::from_vec(radii);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&target, 1e-12)
        .map_err(|e| Error::config("e_L", e.to_string()))?;
    let fit = &design * coef;
    let mse = phis
        .iter()
        .zip(fit.iter())
        .map(|(phi, f)| (f - curve.radius(*phi)).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(mse)
}

/// `10·log10(peak²/MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_rows("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all `window×window` positions (stride 1) of two
/// single-channel `extent×extent` images.
pub fn ssim(a: &[f64], b: &[f64], extent: usize, peak: f64, window: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != extent * extent {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    if window == 0 || extent < window {
        return Err(Error::config(
            "ssim.window",
            format!("image extent {extent} smaller than window {window}"),
        ));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let npx = (window * window) as f64;
    let positions = extent - window + 1;
    let mut total = 0.0;
    for y0 in 0..positions {
        for x0 in 0..positions {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let (va, vb) = (a[y * extent + x], b[y * extent + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / npx, sb / npx);
            let va = saa / npx - ma * ma;
            let vb = sbb / npx - mb * mb;
            let cov = sab / npx - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

/// Mean SSIM over paired image batches `[n, C, E, E]`, averaged over
/// samples and channels.
pub fn ssim_batch(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_rows("ssim", a, b)?;
    if a.rank() != 4 {
        return Err(Error::Mode {
            expected: "images",
            got: "points",
        });
    }
    let e = a.shape()[2];
    let planes: Vec<(&[f64], &[f64])> = a.data().chunks(e * e).zip(b.data().chunks(e * e)).collect();
    let mut total = 0.0;
    for (pa, pb) in &planes {
        total += ssim(pa, pb, e, peak, SSIM_WINDOW)?;
    }
    Ok(total / planes.len().max(1) as f64)
}

fn kernel_mean(a: &Tensor, b: &Tensor, bandwidth: f64, skip_diagonal: bool) -> f64 {
    let g = -1.0 / (2.0 * bandwidth * bandwidth);
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if skip_diagonal && i == j {
                continue;
            }
            s += (g * row_distance2(a.row(i), b.row(j))).exp();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        s / count as f64
    }
}

/// Cross-set kernel mean with the arguments in a canonical order, so the
/// estimators are bitwise symmetric.
fn cross_mean(a: &Tensor, b: &Tensor, bandwidth: f64) -> f64 {
    let swap = match a.rows().cmp(&b.rows()) {
        std::cmp::Ordering::Equal => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .is_some_and(|o| o.is_gt()),
        o => o.is_gt(),
    };
    if swap {
        kernel_mean(b, a, bandwidth, false)
    } else {
        kernel_mean(a, b, bandwidth, false)
    }
}

fn check_sets(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InsufficientData {
            need: 1,
            got: a.rows().min(b.rows()),
        });
    }
    if a.row_len() != b.row_len() {
        return Err(Error::shape("mmd", a.shape(), b.shape()));
    }
    Ok(())
}

/// Unbiased squared MMD with a Gaussian kernel, clamped at zero. Sets of a
/// single sample fall back to the biased within-set term.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_sets(a, b)?;
    let kaa = kernel_mean(a, a, bandwidth, a.rows() > 1);
    let kbb = kernel_mean(b, b, bandwidth, b.rows() > 1);
    let kab = cross_mean(a, b, bandwidth);
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Biased (V-statistic) squared MMD; exactly zero for identical multisets.
pub fn mmd_biased(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    check_sets(a, b)?;
    let kaa = kernel_mean(a, a, bandwidth, false);
    let kbb = kernel_mean(b, b, bandwidth, false);
    let kab = cross_mean(a, b, bandwidth);
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Distance from generations to an identity's held-out reference set,
/// relative to the clean-personalization baseline for the same identity
/// and seed. Uses the biased estimator, which stays positive so the ratio
/// is always defined.
#[derive(Clone, Debug, Default)]
pub struct ProtectionScorer {
    pub bandwidth: f64,
    baselines: BTreeMap<(String, u64), f64>,
}

impl ProtectionScorer {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            baselines: BTreeMap::new(),
        }
    }

    pub fn distance(&self, generated: &Tensor, reference: &Tensor) -> Result<f64> {
        mmd_biased(generated, reference, self.bandwidth)
    }

    /// Record the clean baseline; returns its distance.
    pub fn set_baseline(&mut self, identity: &str, seed: u64, generated: &Tensor, reference: &Tensor) -> Result<f64> {
        let d = self.distance(generated, reference)?;
        self.baselines.insert((identity.to_string(), seed), d);
        Ok(d)
    }

    pub fn baseline(&self, identity: &str, seed: u64) -> Option<f64> {
        self.baselines.get(&(identity.to_string(), seed)).copied()
    }

    pub fn score(&self, identity: &str, seed: u64, generated: &Tensor, reference: &Tensor) -> Result<f64> {
        let base = self
            .baseline(identity, seed)
            .ok_or_else(|| Error::BaselineMissing(format!("{identity} (seed {seed})")))?;
        let d = self.distance(generated, reference)?;
        Ok(d / base.max(f64::MIN_POSITIVE))
    }
}

/// `carry(k) = mean_i ‖Φ_k(z_i + Δ_i) − Φ_k(z_i)‖₂` for each `k`.
pub fn carry<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    z: &Tensor,
    delta: &Tensor,
    ks: &[usize],
    cond: Cond,
    schedule: &NoiseSchedule,
) -> Result<Vec<(usize, f64)>> {
    same_rows("carry", z, delta)?;
    let shifted = z.add(delta)?;
    ks.iter()
        .map(|&k| {
            let sampler = SamplerConfig::with_k(k);
            let a = denoise(model, params, &shifted, cond, &sampler, schedule)?;
            let b = denoise(model, params, z, cond, &sampler, schedule)?;
            Ok((k, reconstruction_error(&a, &b)?))
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Count of adjacent pairs where the sequence decreases.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

/// SHA-256 of the canonical (key-sorted) TOML form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = toml::Value::try_from(config).map_err(|e| Error::config("", e.to_string()))?;
    let text = toml::to_string(&value).map_err(|e| Error::config("", e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One CSV row of results.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub experiment: String,
    pub seed: u64,
    pub sweep_key: String,
    pub sweep_value: f64,
    pub metrics: BTreeMap<String, f64>,
    pub attack: String,
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn new(experiment: &str, seed: u64, sweep_key: &str, sweep_value: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            sweep_key: sweep_key.to_string(),
            sweep_value,
            metrics: BTreeMap::new(),
            attack: "none".into(),
            config_hash: String::new(),
        }
    }

    /// Add a metric; non-finite values are rejected.
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical { op: "metric", node: 0 });
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}
