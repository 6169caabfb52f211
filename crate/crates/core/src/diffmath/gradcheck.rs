//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Coordinate with the largest tolerance violation (or largest error when passing).
    pub worst: usize,
    pub pass: bool,
}

/// Per-coordinate comparison: passes iff `|a - n| <= abs_tol + rel_tol * |n|` everywhere.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        checked: analytic.len(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: 0,
        pass: true,
    };
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        report.max_abs_err = report.max_abs_err.max(err);
        report.max_rel_err = report.max_rel_err.max(rel);
        let excess = err - (abs_tol + rel_tol * n.abs());
        if excess > worst_excess {
            worst_excess = excess;
            report.worst = i;
        }
        if excess.is_nan() || excess > 0.0 {
            report.pass = false;
        }
    }
    report
}

/// Central differences of a scalar function at the listed coordinates
/// (all coordinates when `coords` is `None`).
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    point: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Check the gradient of `f` with respect to its single tensor input.
pub fn finite_difference_check<F>(f: F, point: &Tensor, rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = match grads.wrt(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };
    let numeric = numeric_gradient(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(p.clone());
            let y = f(&mut g, x)?;
            g.value(y).item()
        },
        point,
        DEFAULT_STEP,
        None,
    )?;
    Ok(compare_gradients(&analytic, &numeric, rel_tol, abs_tol))
}

/// Evenly spaced sample of at most `max` coordinates out of `n`.
pub fn sample_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max + (n / max) / 2).collect()
}

/// Check `∂f/∂p` for the listed parameters, probing at most
/// `max_coords_per_param` coordinates of each tensor.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    rel_tol: f64,
    abs_tol: f64,
    max_coords_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut acc = store.clone();
    acc.zero_grad();
    acc.accumulate(&grads);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for &id in ids {
        let coords = sample_coords(store.value(id).len(), max_coords_per_param);
        for &c in &coords {
            analytic.push(acc.grad(id).data()[c]);
        }
        let base = store.value(id).clone();
        let num = numeric_gradient(
            |p| {
                probe.set(id, p.clone())?;
                let mut g = Graph::new();
                let loss = f(&mut g, &probe)?;
                g.value(loss).item()
            },
            &base,
            DEFAULT_STEP,
            Some(&coords),
        )?;
        probe.set(id, base)?;
        numeric.extend(num);
    }
    Ok(compare_gradients(&analytic, &numeric, rel_tol, abs_tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let p = Tensor::from_vec(vec![0.3, -2.0, 7.5]);
        let r = finite_difference_check(|g, x| Ok(g.sum_all(x)), &p, 1e-3, 1e-5).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
    }

    #[test]
    fn exp_at_zero() {
        let p = Tensor::from_vec(vec![0.0]);
        let r = finite_difference_check(
            |g, x| {
                let e = g.exp(x);
                Ok(g.sum_all(e))
            },
            &p,
            1e-3,
            1e-5,
        )
        .unwrap();
        assert!(r.pass);
        let n = numeric_gradient(|t| Ok(t.data()[0].exp()), &p, DEFAULT_STEP, None).unwrap();
        assert!((n[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let numeric = [1.0, -2.0, 0.5];
        let corrupted: Vec<f64> = numeric.iter().map(|v| v * 1.1).collect();
        assert!(!compare_gradients(&corrupted, &numeric, 1e-3, 1e-5).pass);
        assert!(compare_gradients(&numeric, &numeric, 1e-3, 1e-5).pass);
    }
}
