use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, CurveModel, LmOptions};
use super::spectrum::spectral_peaks;
use super::{check_finite, distinct_count};
use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Real};

/// `offset + amplitude·sin(2π·frequency·x + phase)` fitted over `[x_lo, x_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineFit<T> {
    pub offset: T,
    /// Non-negative.
    pub amplitude: T,
    /// Positive.
    pub frequency: T,
    pub phase: T,
    pub x_lo: T,
    pub x_hi: T,
    /// Residual sum of squares.
    pub rss: T,
}

impl<T: Real> SineFit<T> {
    pub fn eval(&self, x: T) -> T {
        self.offset + self.amplitude * (T::TAU() * self.frequency * x + self.phase).sin()
    }

    /// Minimum of the fitted curve inside the scanned range, the one nearest
    /// the range center when several exist. Falls back to the lower endpoint.
    pub fn argmin(&self) -> T {
        self.extremum(-T::FRAC_PI_2(), true)
    }

    /// Maximum of the fitted curve inside the scanned range.
    pub fn argmax(&self) -> T {
        self.extremum(T::FRAC_PI_2(), false)
    }

    fn extremum(&self, target: T, low: bool) -> T {
        let center = T::lit(0.5) * (self.x_lo + self.x_hi);
        let w = T::TAU() * self.frequency;
        // x_k = (target − φ + 2πk)/w, choose k nearest the center
        let k0 = ((w * center + self.phase - target) / T::TAU()).round();
        let mut best: Option<T> = None;
        for dk in [-1.0, 0.0, 1.0] {
            let x = (target - self.phase + T::TAU() * (k0 + T::lit(dk))) / w;
            if x >= self.x_lo && x <= self.x_hi {
                let closer = best.is_none_or(|b| (x - center).abs() < (b - center).abs());
                if closer {
                    best = Some(x);
                }
            }
        }
        best.unwrap_or_else(|| {
            let (a, b) = (self.eval(self.x_lo), self.eval(self.x_hi));
            if (a <= b) == low {
                self.x_lo
            } else {
                self.x_hi
            }
        })
    }
}

struct Sine;

impl<T: Real> CurveModel<T> for Sine {
    fn n_params(&self) -> usize {
        4
    }
    fn value(&self, p: &[T], x: T) -> T {
        p[0] + p[1] * (T::TAU() * p[2] * x + p[3]).sin()
    }
    fn gradient(&self, p: &[T], x: T, g: &mut [T]) {
        let (s, c) = (T::TAU() * p[2] * x + p[3]).sin_cos();
        g[0] = T::one();
        g[1] = s;
        g[2] = p[1] * c * T::TAU() * x;
        g[3] = p[1] * c;
    }
}

/// Least-squares sine fit with a spectral frequency initializer.
pub fn fit_sine<T: Real>(x: &[T], y: &[T]) -> Result<SineFit<T>> {
    fit_sine_with_hint(x, y, None)
}

/// As [`fit_sine`], additionally restarting from `frequency_hint` when the
/// expected period is known.
pub fn fit_sine_with_hint<T: Real>(
    x: &[T],
    y: &[T],
    frequency_hint: Option<T>,
) -> Result<SineFit<T>> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::invalid("fit_sine: x and y lengths differ"));
    }
    if n < 6 || distinct_count(x) < 5 {
        return Err(Error::invalid("fit_sine needs at least 6 points"));
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    let (ylo, yhi) = y
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
    if yhi - ylo <= T::eps_times(64.0) * (T::one() + yhi.abs()) {
        return Err(Error::FitFailed {
            reason: "flat data".into(),
            residual: 0.0,
        });
    }
    let (x_lo, x_hi) = x
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
    let mean = y.iter().fold(T::zero(), |a, v| a + *v) / T::from_usize_lossy(n);
    let half_range = T::lit(0.5) * (yhi - ylo);

    let mut starts: Vec<[T; 4]> = spectral_peaks(x, y, T::lit(0.2), 600)
        .iter()
        .take(3)
        .map(|pk| {
            let a = (pk.sin_coef * pk.sin_coef + pk.cos_coef * pk.cos_coef).sqrt();
            [mean, a, pk.frequency, pk.cos_coef.atan2(pk.sin_coef)]
        })
        .collect();
    if let Some(f) = frequency_hint.filter(|f| *f > T::zero() && f.is_finite()) {
        for k in 0..4 {
            let phase = T::FRAC_PI_2() * T::from_usize_lossy(k);
            starts.push([mean, half_range, f, phase]);
        }
    }
    if starts.is_empty() {
        return Err(Error::FitFailed {
            reason: "no frequency candidate".into(),
            residual: f64::INFINITY,
        });
    }

    let w = vec![T::one(); n];
    let opts = LmOptions::default();
    let mut best: Option<(Vec<T>, T)> = None;
    for p0 in &starts {
        if let Ok(out) = levenberg_marquardt(&Sine, x, y, &w, p0, &opts) {
            if out.params.iter().all(|v| v.is_finite())
                && best.as_ref().is_none_or(|b| out.chi2 < b.1)
            {
                best = Some((out.params, out.chi2));
            }
        }
    }
    let (mut p, rss) = best.ok_or_else(|| Error::FitFailed {
        reason: "no restart converged".into(),
        residual: f64::INFINITY,
    })?;
    if p[2] < T::zero() {
        p[2] = -p[2];
        p[3] = -p[3];
        p[1] = -p[1];
    }
    if p[1] < T::zero() {
        p[1] = -p[1];
        p[3] += T::PI();
    }
    if !(p[2] > T::zero()) {
        return Err(Error::FitFailed {
            reason: "zero fitted frequency".into(),
            residual: rss.to_f64_lossy(),
        });
    }
    Ok(SineFit {
        offset: p[0],
        amplitude: p[1],
        frequency: p[2],
        phase: wrap_angle(p[3]),
        x_lo,
        x_hi,
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_minimum() {
        let x: Vec<f64> = (0..41).map(|i| 0.2 + 0.005 * i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.5 + 0.4 * (std::f64::consts::TAU * (v - 0.42) / 0.3).sin())
            .collect();
        let fit = fit_sine(&x, &y).unwrap();
        assert!((fit.argmin() - (0.42 - 0.075)).abs() < 1e-4, "{fit:?}");
        assert!((fit.amplitude - 0.4).abs() < 1e-8);
    }

    #[test]
    fn flat_fails() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(matches!(
            fit_sine(&x, &[0.3; 10]),
            Err(Error::FitFailed { .. })
        ));
    }

    #[test]
    fn negative_amplitude_canonicalized() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 1.0 - 0.3 * (std::f64::consts::TAU * 0.7 * v).sin())
            .collect();
        let fit = fit_sine(&x, &y).unwrap();
        assert!(fit.amplitude > 0.0 && (fit.amplitude - 0.3).abs() < 1e-8);
        assert!((fit.phase.abs() - std::f64::consts::PI).abs() < 1e-6);
    }

    #[test]
    fn endpoint_when_no_interior_extremum() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (std::f64::consts::TAU * 0.5 * v).sin())
            .collect();
        let fit = fit_sine_with_hint(&x, &y, Some(0.5)).unwrap();
        assert_eq!(fit.argmin(), 0.0);
        assert_eq!(fit.argmax(), 0.07);
    }
}
