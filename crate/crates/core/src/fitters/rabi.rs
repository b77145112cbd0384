use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, std_errors, CurveModel, LmOptions};
use super::spectrum::spectral_peaks;
use super::{check_finite, distinct_count};
use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// Damped Rabi oscillation `C + A·exp(−τt)·sin(2πft + φ₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiFit<T> {
    pub c_offset: T,
    /// Non-negative after canonicalization.
    pub amplitude: T,
    /// 1/ns
    pub decay: T,
    /// 1/ns, positive
    pub frequency: T,
    /// rad, in (−π, π]
    pub phase: T,
    pub chi2_ndf: T,
    /// ns, `1/(4f)`
    pub t_x90: T,
    pub amplitude_se: T,
    pub frequency_se: T,
}

impl<T: Real> RabiFit<T> {
    pub fn eval(&self, t: T) -> T {
        rabi_model(
            [
                self.c_offset,
                self.amplitude,
                self.decay,
                self.frequency,
                self.phase,
            ],
            t,
        )
    }
}

/// `p = [C, A, τ, f, φ₀]`
pub fn rabi_model<T: Real>(p: [T; 5], t: T) -> T {
    p[0] + p[1] * (-p[2] * t).exp() * (T::TAU() * p[3] * t + p[4]).sin()
}

struct Rabi;

impl<T: Real> CurveModel<T> for Rabi {
    fn n_params(&self) -> usize {
        5
    }
    fn value(&self, p: &[T], t: T) -> T {
        rabi_model([p[0], p[1], p[2], p[3], p[4]], t)
    }
    fn gradient(&self, p: &[T], t: T, g: &mut [T]) {
        let env = (-p[2] * t).exp();
        let arg = T::TAU() * p[3] * t + p[4];
        let (s, c) = arg.sin_cos();
        g[0] = T::one();
        g[1] = env * s;
        g[2] = -t * p[1] * env * s;
        g[3] = p[1] * env * c * T::TAU() * t;
        g[4] = p[1] * env * c;
    }
}

/// Quarter of the fitted Rabi period.
pub fn x90_length<T: Real>(fit: &RabiFit<T>) -> Result<T> {
    if fit.frequency > T::zero() && fit.frequency.is_finite() {
        Ok(T::one() / (T::lit(4.0) * fit.frequency))
    } else {
        Err(Error::invalid(format!(
            "x90_length needs a positive frequency, got {}",
            fit.frequency
        )))
    }
}

/// Weighted fit of a damped Rabi oscillation.
///
/// Restarts from the strongest spectral peaks with and without an initial
/// decay and keeps the lowest χ². The result is canonicalized to `A ≥ 0`,
/// `f > 0`, `φ₀ ∈ (−π, π]`.
pub fn fit_rabi<T: Real>(t: &[T], p1: &[T], sigma: &[T]) -> Result<RabiFit<T>> {
    let n = t.len();
    if p1.len() != n || sigma.len() != n {
        return Err(Error::invalid("fit_rabi: t, p1 and sigma lengths differ"));
    }
    if n < 8 {
        return Err(Error::invalid(format!(
            "fit_rabi needs at least 8 points, got {n}"
        )));
    }
    check_finite("t", t)?;
    check_finite("p1", p1)?;
    if sigma.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
        return Err(Error::invalid(
            "fit_rabi: sigma must be positive and finite",
        ));
    }
    if distinct_count(t) < 6 {
        return Err(Error::invalid("fit_rabi: fewer than 6 distinct times"));
    }
    let (lo, hi) = p1
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
    if hi - lo <= T::eps_times(64.0) * (T::one() + hi.abs()) {
        return Err(Error::DegenerateFit("constant data, no oscillation".into()));
    }

    let w: Vec<T> = sigma.iter().map(|s| T::one() / (*s * *s)).collect();
    let peaks = spectral_peaks(t, p1, T::lit(0.25), 600);
    if peaks.is_empty() {
        return Err(Error::DegenerateFit("no spectral peak in data".into()));
    }
    let span = t.iter().fold(T::neg_infinity(), |a, v| a.max(*v))
        - t.iter().fold(T::infinity(), |a, v| a.min(*v));
    let mean = p1.iter().fold(T::zero(), |a, v| a + *v) / T::from_usize_lossy(n);

    let opts = LmOptions::default();
    let mut best: Option<super::lm::LmOutcome<T>> = None;
    for pk in peaks.iter().take(3) {
        let amp = (pk.sin_coef * pk.sin_coef + pk.cos_coef * pk.cos_coef).sqrt();
        let phase = pk.cos_coef.atan2(pk.sin_coef);
        for tau0 in [T::zero(), T::one() / span] {
            let p0 = [mean, amp, tau0, pk.frequency, phase];
            if let Ok(out) = levenberg_marquardt(&Rabi, t, p1, &w, &p0, &opts) {
                if out.params.iter().all(|v| v.is_finite())
                    && best.as_ref().is_none_or(|b| out.chi2 < b.chi2)
                {
                    best = Some(out);
                }
            }
        }
    }
    let best = best.ok_or_else(|| Error::FitFailed {
        reason: "no restart converged".into(),
        residual: f64::INFINITY,
    })?;

    let mut p = best.params.clone();
    if p[3] < T::zero() {
        p[3] = -p[3];
        p[4] = -p[4];
        p[1] = -p[1];
    }
    if p[1] < T::zero() {
        p[1] = -p[1];
        p[4] += T::PI();
    }
    p[4] = wrap_angle(p[4]);
    if !(p[3] > T::eps_times(1.0) / span) {
        return Err(Error::DegenerateFit(format!(
            "fitted frequency {} is not positive",
            p[3]
        )));
    }
    let se = std_errors(best.covariance.as_ref(), 5, T::one());
    if !(p[1] > T::lit(2.0) * se[1]) {
        return Err(Error::DegenerateFit(format!(
            "amplitude {} not distinguishable from 0 (se {})",
            p[1], se[1]
        )));
    }
    Ok(RabiFit {
        c_offset: p[0],
        amplitude: p[1],
        decay: p[2],
        frequency: p[3],
        phase: p[4],
        chi2_ndf: best.chi2 / T::from_usize_lossy(n - 5),
        t_x90: T::one() / (T::lit(4.0) * p[3]),
        amplitude_se: se[1],
        frequency_se: se[3],
    })
}
