use serde::{Deserialize, Serialize};

use super::{check_finite, distinct_count};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, Mat};
use crate::scalar::Real;

/// `y = curvature·x² + linear·x + constant`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolaFit<T> {
    pub curvature: T,
    pub linear: T,
    pub constant: T,
    pub vertex_x: T,
    pub vertex_y: T,
}

impl<T: Real> ParabolaFit<T> {
    pub fn eval(&self, x: T) -> T {
        (self.curvature * x + self.linear) * x + self.constant
    }
}

/// Exact quadratic least squares. The abscissae are centered and scaled
/// before solving so the design matrix stays well conditioned.
pub fn fit_parabola<T: Real>(x: &[T], y: &[T]) -> Result<ParabolaFit<T>> {
    if x.len() != y.len() {
        return Err(Error::invalid("fit_parabola: x and y lengths differ"));
    }
    check_finite("x", x)?;
    check_finite("y", y)?;
    if distinct_count(x) < 3 {
        return Err(Error::invalid("fit_parabola needs at least 3 distinct x"));
    }
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().fold(T::zero(), |a, v| a + *v) / n;
    let sx = x.iter().fold(T::zero(), |a, v| a.max((*v - mx).abs()));
    let rows: Vec<Vec<T>> = x
        .iter()
        .map(|v| {
            let u = (*v - mx) / sx;
            vec![T::one(), u, u * u]
        })
        .collect();
    let c = lstsq(&Mat::from_rows(&rows), y)?;
    let (alpha, beta, gamma) = (c[0], c[1], c[2]);
    if gamma == T::zero() {
        return Err(Error::invalid(
            "fit_parabola: zero curvature, vertex undefined",
        ));
    }
    let a = gamma / (sx * sx);
    let b = beta / sx - T::lit(2.0) * gamma * mx / (sx * sx);
    let c0 = alpha - beta * mx / sx + gamma * mx * mx / (sx * sx);
    let u_star = -beta / (T::lit(2.0) * gamma);
    Ok(ParabolaFit {
        curvature: a,
        linear: b,
        constant: c0,
        vertex_x: mx + sx * u_star,
        vertex_y: alpha - beta * beta / (T::lit(4.0) * gamma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_examples() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| -(v - 2.0).powi(2) + 3.0).collect();
        let f = fit_parabola(&x, &y).unwrap();
        assert!((f.vertex_x - 2.0).abs() < 1e-12 && (f.vertex_y - 3.0).abs() < 1e-12);

        let f = fit_parabola(&[-1.0f64, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((f.curvature - 1.0).abs() < 1e-12 && f.vertex_x.abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points() {
        assert!(matches!(
            fit_parabola(&[1.0, 1.0, 2.0], &[0.0, 0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn noisy_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let x: Vec<f64> = (0..25).map(|i| 0.4 + 0.01 * i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 1.0 - 40.0 * (v - 0.52).powi(2) + noise.sample(&mut rng))
            .collect();
        let f = fit_parabola(&x, &y).unwrap();
        assert!((f.vertex_x - 0.52).abs() < 0.01, "{f:?}");
    }

    fn sse(x: &[f64], y: &[f64], a: f64, b: f64, c: f64) -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| (yi - (a * xi * xi + b * xi + c)).powi(2))
            .sum()
    }

    proptest! {
        #[test]
        fn no_grid_neighbor_beats_the_fit(
            ys in proptest::collection::vec(-2.0f64..2.0, 7),
            x0 in -3.0f64..3.0,
        ) {
            let x: Vec<f64> = (0..7).map(|i| x0 + 0.5 * i as f64).collect();
            let f = fit_parabola(&x, &ys).unwrap();
            let best = sse(&x, &ys, f.curvature, f.linear, f.constant);
            let h = 1e-3;
            for da in [-h, 0.0, h] {
                for db in [-h, 0.0, h] {
                    for dc in [-h, 0.0, h] {
                        let s = sse(&x, &ys, f.curvature + da, f.linear + db, f.constant + dc);
                        prop_assert!(s >= best - 1e-9);
                    }
                }
            }
        }
    }
}
