//! Curve fits shared by the calibration protocols.
//!
//! All fits are deterministic: restarts come from a fixed list of spectral
//! initial guesses, never from random draws.

mod decay;
mod lm;
mod parabola;
mod rabi;
mod sine;
mod spectrum;

pub use decay::{fit_decay, DecayFit};
pub(crate) use lm::{levenberg_marquardt, std_errors, CurveModel, LmOptions};
pub use parabola::{fit_parabola, ParabolaFit};
pub use rabi::{fit_rabi, rabi_model, x90_length, RabiFit};
pub use sine::{fit_sine, fit_sine_with_hint, SineFit};

use crate::scalar::Real;

/// Binomial standard deviation of an estimated probability, floored at
/// `1/(2·shots)` so that saturated points keep a finite weight.
pub fn binomial_sigma<T: Real>(p_hat: T, shots: usize) -> T {
    let n = T::from_usize_lossy(shots.max(1));
    let p = p_hat.max(T::zero()).min(T::one());
    (p * (T::one() - p) / n).sqrt().max(T::lit(0.5) / n)
}

fn check_finite<T: Real>(what: &str, v: &[T]) -> crate::Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::invalid(format!(
            "{what} contains non-finite values"
        )))
    }
}

fn distinct_count<T: Real>(x: &[T]) -> usize {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v.dedup();
    v.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_sigma_floor() {
        assert_eq!(binomial_sigma(0.0_f64, 400), 1.0 / 800.0);
        assert_eq!(binomial_sigma(1.0_f64, 400), 1.0 / 800.0);
        assert!((binomial_sigma(0.5_f64, 400) - 0.025).abs() < 1e-15);
    }
}
