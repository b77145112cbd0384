//! Weighted Levenberg-Marquardt for small curve models.

use crate::error::{Error, Result};
use crate::linalg::{inverse, solve, Mat};
use crate::scalar::Real;

pub(crate) trait CurveModel<T: Real> {
    fn n_params(&self) -> usize;
    fn value(&self, p: &[T], x: T) -> T;
    fn gradient(&self, p: &[T], x: T, g: &mut [T]);
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome<T> {
    pub params: Vec<T>,
    pub chi2: T,
    /// `(JᵀWJ)⁻¹` at the optimum, when it is invertible.
    pub covariance: Option<Mat<T>>,
}

pub(crate) struct LmOptions {
    pub max_iter: usize,
    pub xtol: f64,
    pub ftol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            xtol: 1e-13,
            ftol: 1e-15,
        }
    }
}

pub(crate) fn chi2<T: Real, M: CurveModel<T>>(m: &M, p: &[T], x: &[T], y: &[T], w: &[T]) -> T {
    x.iter()
        .zip(y)
        .zip(w)
        .fold(T::zero(), |acc, ((&xi, &yi), &wi)| {
            let r = yi - m.value(p, xi);
            acc + wi * r * r
        })
}

/// Minimizes `Σ wᵢ (yᵢ − f(xᵢ; p))²` from `p0`.
pub(crate) fn levenberg_marquardt<T: Real, M: CurveModel<T>>(
    model: &M,
    x: &[T],
    y: &[T],
    w: &[T],
    p0: &[T],
    opts: &LmOptions,
) -> Result<LmOutcome<T>> {
    let n = model.n_params();
    debug_assert_eq!(p0.len(), n);
    let mut p = p0.to_vec();
    let mut cur = chi2(model, &p, x, y, w);
    if !cur.is_finite() {
        return Err(Error::FitFailed {
            reason: "non-finite residual at the starting point".into(),
            residual: f64::INFINITY,
        });
    }
    let mut lambda = T::lit(1e-3);
    let xtol = T::lit(opts.xtol).max(T::eps_times(4.0));
    let ftol = T::lit(opts.ftol).max(T::eps_times(4.0));
    let mut g = vec![T::zero(); n];
    let mut iterations = 0;

    let normal_equations = |p: &[T], g: &mut [T]| {
        let mut jtj = Mat::zeros(n, n);
        let mut jtr = vec![T::zero(); n];
        for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
            model.gradient(p, xi, g);
            let r = yi - model.value(p, xi);
            for a in 0..n {
                jtr[a] += wi * g[a] * r;
                for b in a..n {
                    jtj[(a, b)] += wi * g[a] * g[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        (jtj, jtr)
    };

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&p, &mut g);
        let diag_floor = (0..n).fold(T::zero(), |acc, i| acc.max(jtj[(i, i)])) * T::eps_times(1.0)
            + T::min_positive_value();
        // unit-diagonal scaling: parameters differ by orders of magnitude
        let d: Vec<T> = (0..n).map(|i| jtj[(i, i)].max(diag_floor).sqrt()).collect();
        let rhs: Vec<T> = jtr.iter().zip(&d).map(|(g, di)| *g / *di).collect();
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] /= d[i] * d[j];
                }
                a[(i, i)] += lambda * (jtj[(i, i)].max(diag_floor) / (d[i] * d[i]));
            }
            let step = match solve(&a, &rhs) {
                Ok(s) => s.iter().zip(&d).map(|(x, di)| *x / *di).collect::<Vec<T>>(),
                Err(_) => {
                    lambda *= T::lit(10.0);
                    if lambda > T::lit(1e16) {
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial: Vec<T> = p.iter().zip(&step).map(|(pi, si)| *pi + *si).collect();
            let next = chi2(model, &trial, x, y, w);
            if next.is_finite() && next < cur {
                let small_step = p
                    .iter()
                    .zip(&step)
                    .all(|(pi, si)| si.abs() <= xtol * (pi.abs() + xtol));
                let small_gain = cur - next <= ftol * cur;
                p = trial;
                cur = next;
                lambda = (lambda / T::lit(10.0)).max(T::lit(1e-15));
                if small_step || small_gain {
                    break 'outer;
                }
                break;
            }
            lambda *= T::lit(10.0);
            if lambda > T::lit(1e16) {
                // no downhill step left: at a minimum to working precision
                break 'outer;
            }
        }
    }

    let (jtj, _) = normal_equations(&p, &mut g);
    let covariance = scaled_inverse(&jtj);
    Ok(LmOutcome {
        params: p,
        chi2: cur,
        covariance,
    })
}

/// Inverse of a symmetric positive matrix after unit-diagonal scaling, which
/// keeps badly scaled parameters from tripping the singularity check.
fn scaled_inverse<T: Real>(a: &Mat<T>) -> Option<Mat<T>> {
    let n = a.rows;
    let d: Vec<T> = (0..n).map(|i| a[(i, i)].sqrt()).collect();
    if d.iter().any(|v| !(*v > T::zero())) {
        return None;
    }
    let mut s = a.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] /= d[i] * d[j];
        }
    }
    let mut inv = inverse(&s).ok()?;
    for i in 0..n {
        for j in 0..n {
            inv[(i, j)] /= d[i] * d[j];
        }
    }
    Some(inv)
}

/// Square roots of a covariance diagonal (NaN where unavailable).
pub(crate) fn std_errors<T: Real>(cov: Option<&Mat<T>>, n: usize, scale: T) -> Vec<T> {
    match cov {
        Some(c) => (0..n).map(|i| (c[(i, i)].abs() * scale).sqrt()).collect(),
        None => vec![T::nan(); n],
    }
}
