//! Diffusion noise schedules.
//!
//! Timesteps are 1-based: `t ∈ [1, T]` indexes `β_t`, and `t = 0` is clean
//! data with `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(
                "schedule.beta_min",
                format!("need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"),
            ));
        }
        let betas = match kind {
            ScheduleKind::Linear => (1..=steps)
                .map(|t| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * (t - 1) as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(beta_min.min(MAX_BETA), MAX_BETA))
                    .collect()
            }
        };
        let mut s = Self::from_betas(betas)?;
        s.kind = kind;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        Ok(s)
    }

    /// Default linear schedule `1e-4 → 0.02`.
    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(steps, ScheduleKind::Linear, 1e-4, 0.02)
    }

    /// Schedule from explicit per-step betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule.steps", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("schedule.betas", format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let lo = betas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = betas.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            kind: ScheduleKind::Linear,
            beta_min: lo,
            beta_max: hi,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Reassemble a schedule that was serialized with its construction
    /// parameters and betas; the betas are authoritative.
    pub fn from_parts(kind: ScheduleKind, beta_min: f64, beta_max: f64, betas: Vec<f64>) -> Result<Self> {
        let mut s = Self::from_betas(betas)?;
        s.kind = kind;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        Ok(s)
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_t` for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `α_t = 1 − β_t` for `t ∈ [1, T]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ [0, T]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `k` decreasing timesteps `round(T·(k−i)/k)`, `i = 0..k`; the sampler
    /// appends a final transition to `t = 0`.
    pub fn step_grid(&self, k: usize) -> Result<Vec<usize>> {
        let steps = self.steps();
        if k == 0 || k > steps {
            return Err(Error::config(
                "sampler.k",
                format!("step count {k} must lie in [1, {steps}]"),
            ));
        }
        Ok((0..k)
            .map(|i| ((steps * (k - i)) as f64 / k as f64).round() as usize)
            .collect())
    }

    /// Consecutive `(from, to)` pairs of the `k`-step grid, ending at 0.
    pub fn transitions(&self, k: usize) -> Result<Vec<(usize, usize)>> {
        let mut grid = self.step_grid(k)?;
        grid.push(0);
        Ok(grid.windows(2).map(|w| (w[0], w[1])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn zero_noise_limit() {
        let s = NoiseSchedule::new(4, ScheduleKind::Linear, 1e-12, 1e-12).unwrap();
        for t in 1..=4 {
            assert!((s.alpha_bar(t) - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn long_linear_terminal_alpha_bar() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut oracle = 1.0;
        for t in 0..1000 {
            oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - oracle).abs() < 1e-15);
        assert!((s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 0.05);
    }

    #[test]
    fn cosine_is_valid_and_clipped() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine, 1e-4, 0.02).unwrap();
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        assert!((1..=100).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
    }

    #[test]
    fn grids() {
        let s = NoiseSchedule::linear(8).unwrap();
        assert_eq!(s.step_grid(4).unwrap(), vec![8, 6, 4, 2]);
        assert_eq!(s.step_grid(8).unwrap(), vec![8, 7, 6, 5, 4, 3, 2, 1]);
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.step_grid(4).unwrap(), vec![1000, 750, 500, 250]);
        assert!(matches!(s.step_grid(1001), Err(Error::Config { .. })));
        assert_eq!(s.transitions(1).unwrap(), vec![(1000, 0)]);
    }

    #[test]
    fn invalid_bounds_rejected() {
        for (lo, hi) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            assert!(NoiseSchedule::new(10, ScheduleKind::Linear, lo, hi).is_err());
        }
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3) {
            let s = NoiseSchedule::new(steps, ScheduleKind::Linear, lo, lo + span).unwrap();
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            }
        }

        #[test]
        fn recompute_from_betas_is_exact(steps in 1usize..300) {
            let s = NoiseSchedule::linear(steps).unwrap();
            let r = NoiseSchedule::from_betas(s.betas().to_vec()).unwrap();
            for t in 0..=steps {
                prop_assert_eq!(s.alpha_bar(t).to_bits(), r.alpha_bar(t).to_bits());
            }
        }

        #[test]
        fn grid_strictly_decreasing(steps in 1usize..500, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::linear(steps).unwrap();
            let k = 1 + ((steps - 1) as f64 * frac) as usize;
            let g = s.step_grid(k).unwrap();
            prop_assert_eq!(g.len(), k);
            prop_assert_eq!(g[0], steps);
            prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(*g.last().unwrap() >= 1);
            if k == steps {
                prop_assert_eq!(g, (1..=steps).rev().collect::<Vec<_>>());
            }
        }
    }
}
