use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::Result;

/// Central-difference estimate `(f(p+h) − f(p−h)) / 2h` for every scalar of
/// every trainable parameter.
pub fn finite_difference_gradient<F>(mut f: F, params: &ParamStore, h: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    for name in params.trainable_names() {
        let base = params.value(&name).expect("name from store");
        let mut g = Tensor::zeros(base.shape());
        for (i, &orig) in base.data().iter().enumerate() {
            work.set_scalar(&name, i, orig + h);
            let plus = f(&work)?;
            work.set_scalar(&name, i, orig - h);
            let minus = f(&work)?;
            work.set_scalar(&name, i, orig);
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Central difference of `f` along `direction` (a map over trainable names).
pub fn directional_difference<F>(
    mut f: F,
    params: &ParamStore,
    direction: &BTreeMap<String, Tensor>,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let shifted = |sign: f64| -> Result<ParamStore> {
        let mut p = params.clone();
        for (name, d) in direction {
            if let Some(v) = params.value(name) {
                let moved = v.zip_map(d, |a, b| a + sign * h * b)?;
                p.set_value(name, moved)?;
            }
        }
        Ok(p)
    };
    let plus = f(&shifted(1.0)?)?;
    let minus = f(&shifted(-1.0)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are
/// below `1e-8`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![3.0]));
        let g = finite_difference_gradient(
            |p| Ok(p.value("x").unwrap().data()[0].powi(2)),
            &p,
            1e-6,
        )
        .unwrap();
        assert!((g["x"].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_gives_zero() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = finite_difference_gradient(|_| Ok(4.2), &p, 1e-6).unwrap();
        assert!(g["x"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restores_exact_values() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.1, 0.7]));
        let mut seen = Vec::new();
        finite_difference_gradient(
            |q| {
                seen.push(q.value("x").unwrap().clone());
                Ok(0.0)
            },
            &p,
            1e-3,
        )
        .unwrap();
        // Second coordinate is perturbed after the first is restored.
        assert_eq!(seen[2].data()[0], 0.1);
    }
}
