//! Purification and transformation attacks applied to protected samples.

use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_along, forward_noise, gaussian_rows};
use crate::error::{Error, Result};
use crate::nets::{DataKind, NoiseModel, SampleShape};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tensor};

/// Attack descriptor as it appears in configs and metric records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Attack {
    None,
    Diffpure { t_star: usize },
    GaussianFilter { kernel: usize, sigma: f64 },
    Quantize { levels: usize },
}

impl Attack {
    pub fn describe(&self) -> String {
        match self {
            Attack::None => "none".into(),
            Attack::Diffpure { t_star } => format!("diffpure(t*={t_star})"),
            Attack::GaussianFilter { kernel, sigma } => format!("gaussian(k={kernel},s={sigma})"),
            Attack::Quantize { levels } => format!("quantize({levels})"),
        }
    }

    pub fn apply<M: NoiseModel + ?Sized>(
        &self,
        x: &Tensor,
        model: &M,
        params: &ParamStore,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<Tensor> {
        match *self {
            Attack::None => Ok(x.clone()),
            Attack::Diffpure { t_star } => diffpure(model, params, x, t_star, schedule, seed),
            Attack::GaussianFilter { kernel, sigma } => gaussian_filter(x, model.shape(), kernel, sigma),
            Attack::Quantize { levels } => quantize(x, levels),
        }
    }
}

/// Noise `x` forward to `t_star` with fresh noise, then denoise back to 0
/// one unconditional step at a time. Row `i` draws its noise from stream
/// `(seed, i)`.
pub fn diffpure<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    x: &Tensor,
    t_star: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    if t_star > schedule.steps() {
        return Err(Error::config(
            "attack.t_star",
            format!("{t_star} exceeds T = {}", schedule.steps()),
        ));
    }
    if t_star == 0 {
        return Ok(x.clone());
    }
    let eps = gaussian_rows(model.shape(), x.rows(), seed);
    let xt = forward_noise(x, t_star, &eps, schedule)?;
    let transitions: Vec<(usize, usize)> = (1..=t_star).rev().map(|t| (t, t - 1)).collect();
    denoise_along(model, params, &xt, &transitions, &vec![None; x.rows()], 1.0, schedule)
}

/// Normalized 1-D Gaussian weights over `[-r, r]`, `r = size/2`. A
/// non-positive sigma gives the delta kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    if sigma <= 0.0 {
        return (-r..=r).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    }
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the
/// edge sample (`-1 → 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur of every image in the batch, reflect padding.
pub fn gaussian_filter(x: &Tensor, shape: SampleShape, kernel: usize, sigma: f64) -> Result<Tensor> {
    if shape.kind != DataKind::Images {
        return Err(Error::Mode {
            expected: "images",
            got: "points",
        });
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::config("attack.kernel", format!("kernel size {kernel} must be odd")));
    }
    shape.check(x)?;
    let w = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as isize;
    let e = shape.extent;
    let mut out = x.clone();
    let mut tmp = vec![0.0; e * e];
    for plane in out.data_mut().chunks_mut(e * e) {
        for y in 0..e {
            for xx in 0..e {
                tmp[y * e + xx] = w
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| wj * plane[y * e + reflect(xx as isize + j as isize - r, e)])
                    .sum();
            }
        }
        for y in 0..e {
            for xx in 0..e {
                plane[y * e + xx] = w
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| wj * tmp[reflect(y as isize + j as isize - r, e) * e + xx])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Round every value to the nearest of `levels` uniform levels in `[0, 1]`.
pub fn quantize(x: &Tensor, levels: usize) -> Result<Tensor> {
    if levels < 2 {
        return Err(Error::config("attack.levels", "need at least 2 levels"));
    }
    let q = (levels - 1) as f64;
    Ok(x.map(|v| (v.clamp(0.0, 1.0) * q).round() / q))
}
