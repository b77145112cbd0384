//! Discrete-spectrum frequency initializer for sinusoidal fits.
//!
//! Samples may be unevenly spaced and cover less than a period, so instead of
//! an FFT each trial frequency is scored by a two-term least-squares
//! projection onto `sin` and `cos`.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct SpectralPeak<T> {
    pub frequency: T,
    /// Explained sum of squares at this frequency.
    pub power: T,
    /// `a·sin + b·cos` coefficients of the best projection.
    pub sin_coef: T,
    pub cos_coef: T,
}

fn project<T: Real>(x: &[T], r: &[T], f: T) -> SpectralPeak<T> {
    let two_pi = T::TAU();
    let (mut ss, mut cc, mut sc, mut sy, mut cy) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for (&xi, &ri) in x.iter().zip(r) {
        let (s, c) = (two_pi * f * xi).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        sy += s * ri;
        cy += c * ri;
    }
    let det = ss * cc - sc * sc;
    if det.abs() <= T::eps_times(1e3) * (ss * cc).max(T::min_positive_value()) {
        return SpectralPeak {
            frequency: f,
            power: T::zero(),
            sin_coef: T::zero(),
            cos_coef: T::zero(),
        };
    }
    let a = (cc * sy - sc * cy) / det;
    let b = (ss * cy - sc * sy) / det;
    SpectralPeak {
        frequency: f,
        power: a * sy + b * cy,
        sin_coef: a,
        cos_coef: b,
    }
}

/// Local maxima of the projection spectrum of mean-subtracted `y`, strongest
/// first. Frequencies span from `min_cycles` periods over the sample range up
/// to the Nyquist rate of the smallest spacing.
pub(crate) fn spectral_peaks<T: Real>(
    x: &[T],
    y: &[T],
    min_cycles: T,
    grid: usize,
) -> Vec<SpectralPeak<T>> {
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let mean = y.iter().fold(T::zero(), |a, v| a + *v) / T::from_usize_lossy(n);
    let r: Vec<T> = y.iter().map(|v| *v - mean).collect();
    let (lo, hi) = x
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
    let span = hi - lo;
    if !(span > T::zero()) {
        return Vec::new();
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite abscissae"));
    let min_dx = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > T::zero())
        .fold(T::infinity(), T::min);
    let f_lo = min_cycles / span;
    let f_hi = T::lit(0.5) / min_dx;
    if !(f_hi > f_lo) {
        return Vec::new();
    }
    let grid = grid.max(16);
    let spec: Vec<SpectralPeak<T>> = (0..grid)
        .map(|i| {
            let f = f_lo + (f_hi - f_lo) * T::from_usize_lossy(i) / T::from_usize_lossy(grid - 1);
            project(x, &r, f)
        })
        .collect();
    let mut peaks: Vec<SpectralPeak<T>> = (0..grid)
        .filter(|&i| {
            let p = spec[i].power;
            let left = i == 0 || spec[i - 1].power <= p;
            let right = i + 1 == grid || spec[i + 1].power < p;
            left && right && p > T::zero()
        })
        .map(|i| spec[i])
        .collect();
    peaks.sort_by(|a, b| b.power.partial_cmp(&a.power).expect("finite power"));
    peaks
}
