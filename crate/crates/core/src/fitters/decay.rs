use serde::{Deserialize, Serialize};

use super::lm::{chi2, levenberg_marquardt, std_errors, CurveModel, LmOptions};
use super::{check_finite, distinct_count};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `y = amplitude · p^m`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit<T> {
    pub amplitude: T,
    /// In `(0, 1]`.
    pub p: T,
    pub amplitude_se: T,
    pub p_se: T,
    pub chi2_red: T,
    /// Set when the unconstrained estimate exceeded 1 and `p` was pinned.
    pub clamped: bool,
}

impl<T: Real> DecayFit<T> {
    pub fn eval(&self, m: T) -> T {
        self.amplitude * self.p.powf(m)
    }
}

struct Decay;

impl<T: Real> CurveModel<T> for Decay {
    fn n_params(&self) -> usize {
        2
    }
    fn value(&self, p: &[T], m: T) -> T {
        p[0] * p[1].powf(m)
    }
    fn gradient(&self, p: &[T], m: T, g: &mut [T]) {
        let pm = p[1].powf(m);
        g[0] = pm;
        g[1] = if m == T::zero() {
            T::zero()
        } else {
            p[0] * m * pm / p[1]
        };
    }
}

/// Weighted exponential-decay fit. Standard errors come from the Jacobian
/// covariance, inflated by the reduced χ² when it exceeds 1. `sigma` is
/// taken as a lower bound on the noise, so a small χ² never shrinks them.
pub fn fit_decay<T: Real>(m: &[T], y: &[T], sigma: &[T]) -> Result<DecayFit<T>> {
    let n = m.len();
    if y.len() != n || sigma.len() != n {
        return Err(Error::invalid("fit_decay: m, y and sigma lengths differ"));
    }
    check_finite("m", m)?;
    check_finite("y", y)?;
    if sigma.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
        return Err(Error::invalid(
            "fit_decay: sigma must be positive and finite",
        ));
    }
    if distinct_count(m) < 3 {
        return Err(Error::invalid(
            "fit_decay needs at least 3 distinct lengths",
        ));
    }
    let w: Vec<T> = sigma.iter().map(|s| T::one() / (*s * *s)).collect();

    // log-linear start on the positive points
    let (mut s0, mut s1, mut s2, mut t0, mut t1) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..n {
        if y[i] > T::zero() {
            let wi = w[i] * y[i] * y[i];
            let ly = y[i].ln();
            s0 += wi;
            s1 += wi * m[i];
            s2 += wi * m[i] * m[i];
            t0 += wi * ly;
            t1 += wi * m[i] * ly;
        }
    }
    let det = s0 * s2 - s1 * s1;
    let (a0, p0) = if det > T::zero() {
        let slope = (s0 * t1 - s1 * t0) / det;
        let icpt = (t0 - slope * s1) / s0;
        (icpt.exp(), slope.exp().min(T::one()))
    } else {
        (T::lit(0.5), T::lit(0.98))
    };
    let p0 = if p0 > T::zero() { p0 } else { T::lit(0.5) };

    let out = levenberg_marquardt(&Decay, m, y, &w, &[a0, p0], &LmOptions::default())?;
    let (mut a, mut p) = (out.params[0], out.params[1]);
    if !(a.is_finite() && p.is_finite()) || p <= T::zero() {
        return Err(Error::FitFailed {
            reason: format!("decay base {p} is not positive"),
            residual: out.chi2.to_f64_lossy(),
        });
    }
    let dof = T::from_usize_lossy(n.saturating_sub(2).max(1));
    let mut clamped = false;
    let (cov_scale, cov);
    if p > T::one() {
        clamped = true;
        log::warn!("decay base {p} exceeds 1, clamping");
        p = T::one();
        // with p pinned the model is constant: weighted mean
        let sw = w.iter().fold(T::zero(), |acc, v| acc + *v);
        a = w
            .iter()
            .zip(y)
            .fold(T::zero(), |acc, (wi, yi)| acc + *wi * *yi)
            / sw;
        let c2 = chi2(&Decay, &[a, p], m, y, &w);
        cov_scale = c2 / dof;
        cov = out.covariance;
    } else {
        cov_scale = out.chi2 / dof;
        cov = out.covariance;
    }
    let se = std_errors(cov.as_ref(), 2, cov_scale.max(T::one()));
    Ok(DecayFit {
        amplitude: a,
        p,
        amplitude_se: se[0],
        p_se: se[1],
        chi2_red: cov_scale,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_recovery() {
        let m: Vec<f64> = [1, 2, 4, 8, 16, 32, 64, 128]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = m.iter().map(|k| 0.5 * 0.99f64.powf(*k)).collect();
        let f = fit_decay(&m, &y, &vec![0.01; m.len()]).unwrap();
        assert!(
            (f.amplitude - 0.5).abs() < 1e-9 && (f.p - 0.99).abs() < 1e-9,
            "{f:?}"
        );
        assert!(!f.clamped);
    }

    #[test]
    fn no_decay() {
        let m: Vec<f64> = (1..=6).map(|k| (k * 10) as f64).collect();
        let f = fit_decay(&m, &[1.0; 6], &[0.01; 6]).unwrap();
        assert!(f.p >= 0.9999);
    }

    #[test]
    fn growth_is_clamped() {
        let m = [1.0, 5.0, 10.0, 20.0];
        let y: Vec<f64> = m.iter().map(|k: &f64| 0.5 * 1.001f64.powf(*k)).collect();
        let f = fit_decay(&m, &y, &[0.01; 4]).unwrap();
        assert!(f.clamped && f.p == 1.0);
    }
}
