//! Bound-constrained derivative-free minimization.
//!
//! A model-based trust-region method: every iteration fits a quadratic
//! regression model to the evaluated points nearest the incumbent, minimizes
//! it inside the trust ball intersected with the box, and updates the radius
//! from the ratio of actual to predicted decrease. Regression instead of
//! interpolation keeps the model usable on noisy objectives.
//!
//! Work happens in coordinates scaled by the per-dimension initial step, and
//! every evaluated point is clamped into the box in the original coordinates,
//! so points on a bound sit exactly on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, Mat};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptProblem<T> {
    pub x0: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    /// Initial trust radius per dimension.
    pub initial_step: Vec<T>,
    /// Stop once the trust radius shrinks below this fraction of the initial
    /// step.
    pub tolerance: T,
    pub max_evals: usize,
    /// Loss substituted for failed or non-finite evaluations.
    pub failure_value: T,
}

impl<T: Real> OptProblem<T> {
    /// Problem with an initial step of a quarter of each bound width.
    pub fn new(x0: Vec<T>, lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        let initial_step = lower
            .iter()
            .zip(&upper)
            .map(|(l, u)| (*u - *l) * T::lit(0.25))
            .collect();
        let p = Self {
            x0,
            lower,
            upper,
            initial_step,
            tolerance: T::lit(1e-4),
            max_evals: 200,
            failure_value: T::lit(1e4),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dimension(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x0.len();
        if n == 0 {
            return Err(Error::invalid("optimizer: zero-dimensional problem"));
        }
        if self.lower.len() != n || self.upper.len() != n || self.initial_step.len() != n {
            return Err(Error::invalid("optimizer: dimension mismatch"));
        }
        for i in 0..n {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::invalid(format!(
                    "optimizer: lower >= upper in dimension {i}"
                )));
            }
            if !(self.x0[i] >= self.lower[i] && self.x0[i] <= self.upper[i]) {
                return Err(Error::invalid(format!(
                    "optimizer: x0 outside bounds in dimension {i}"
                )));
            }
            if !(self.initial_step[i] > T::zero()) {
                return Err(Error::invalid(format!(
                    "optimizer: non-positive step in dimension {i}"
                )));
            }
        }
        if self.max_evals == 0 {
            return Err(Error::invalid("optimizer: max_evals must be at least 1"));
        }
        if !(self.tolerance > T::zero()) {
            return Err(Error::invalid("optimizer: tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StepTolerance,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace<T> {
    /// Every evaluation in order.
    pub evaluations: Vec<(Vec<T>, T)>,
    pub best_point: Vec<T>,
    pub best_loss: T,
    pub termination: Termination,
}

impl<T: Real> OptTrace<T> {
    /// Running minimum of the loss, one entry per evaluation.
    pub fn best_so_far(&self) -> Vec<T> {
        let mut cur = T::infinity();
        self.evaluations
            .iter()
            .map(|(_, l)| {
                cur = cur.min(*l);
                cur
            })
            .collect()
    }
}

struct State<'a, T, F> {
    prob: &'a OptProblem<T>,
    f: F,
    /// Scaled coordinates of each evaluation.
    z: Vec<Vec<T>>,
    evals: Vec<(Vec<T>, T)>,
    best: usize,
}

impl<'a, T: Real, F: FnMut(&[T]) -> Result<T>> State<'a, T, F> {
    fn to_x(&self, z: &[T]) -> Vec<T> {
        let p = self.prob;
        (0..z.len())
            .map(|i| {
                (p.x0[i] + p.initial_step[i] * z[i])
                    .max(p.lower[i])
                    .min(p.upper[i])
            })
            .collect()
    }

    fn to_z(&self, x: &[T]) -> Vec<T> {
        let p = self.prob;
        (0..x.len())
            .map(|i| (x[i] - p.x0[i]) / p.initial_step[i])
            .collect()
    }

    fn budget_left(&self) -> bool {
        self.evals.len() < self.prob.max_evals
    }

    fn eval_z(&mut self, z: &[T]) -> T {
        let x = self.to_x(z);
        self.eval_x(x)
    }

    fn eval_x(&mut self, x: Vec<T>) -> T {
        let p = self.prob;
        for i in 0..x.len() {
            assert!(
                x[i] >= p.lower[i] && x[i] <= p.upper[i],
                "optimizer proposed a point outside the bounds"
            );
        }
        let loss = match (self.f)(&x) {
            Ok(v) if v.is_finite() => v.min(p.failure_value),
            Ok(_) | Err(_) => p.failure_value,
        };
        self.z.push(self.to_z(&x));
        self.evals.push((x, loss));
        if loss < self.evals[self.best].1 {
            self.best = self.evals.len() - 1;
        }
        loss
    }

    fn best_z(&self) -> Vec<T> {
        self.z[self.best].clone()
    }

    /// Scaled box bounds relative to the origin of scaled space.
    fn z_bounds(&self) -> (Vec<T>, Vec<T>) {
        let p = self.prob;
        let n = p.dimension();
        let lo = (0..n)
            .map(|i| (p.lower[i] - p.x0[i]) / p.initial_step[i])
            .collect();
        let hi = (0..n)
            .map(|i| (p.upper[i] - p.x0[i]) / p.initial_step[i])
            .collect();
        (lo, hi)
    }
}

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y))
        .sqrt()
}

fn norm<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
}

/// Quadratic model `c + gᵀs + ½ sᵀHs` around the incumbent.
struct Model<T> {
    c: T,
    g: Vec<T>,
    h: Mat<T>,
}

impl<T: Real> Model<T> {
    fn value(&self, s: &[T]) -> T {
        let hs = self.h.matvec(s);
        let mut v = self.c;
        for i in 0..s.len() {
            v += self.g[i] * s[i] + T::lit(0.5) * s[i] * hs[i];
        }
        v
    }

    fn grad(&self, s: &[T]) -> Vec<T> {
        let hs = self.h.matvec(s);
        self.g.iter().zip(hs).map(|(g, h)| *g + h).collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Linear,
    Diagonal,
    Full,
}

fn n_params(kind: Kind, n: usize) -> usize {
    match kind {
        Kind::Linear => n + 1,
        Kind::Diagonal => 2 * n + 1,
        Kind::Full => (n + 1) * (n + 2) / 2,
    }
}

fn features<T: Real>(kind: Kind, s: &[T]) -> Vec<T> {
    let n = s.len();
    let mut f = Vec::with_capacity(n_params(kind, n));
    f.push(T::one());
    f.extend_from_slice(s);
    match kind {
        Kind::Linear => {}
        Kind::Diagonal => f.extend(s.iter().map(|v| T::lit(0.5) * *v * *v)),
        Kind::Full => {
            for i in 0..n {
                for j in i..n {
                    let w = if i == j { T::lit(0.5) } else { T::one() };
                    f.push(w * s[i] * s[j]);
                }
            }
        }
    }
    f
}

fn unpack<T: Real>(kind: Kind, n: usize, c: &[T]) -> Model<T> {
    let mut h = Mat::zeros(n, n);
    match kind {
        Kind::Linear => {}
        Kind::Diagonal => {
            for i in 0..n {
                h[(i, i)] = c[1 + n + i];
            }
        }
        Kind::Full => {
            let mut k = 1 + n;
            for i in 0..n {
                for j in i..n {
                    h[(i, j)] = c[k];
                    h[(j, i)] = c[k];
                    k += 1;
                }
            }
        }
    }
    Model {
        c: c[0],
        g: c[1..=n].to_vec(),
        h,
    }
}

/// Fits the richest model the nearby points support.
fn fit_model<T: Real>(zs: &[Vec<T>], fs: &[T], center: &[T], radius: T) -> Option<Model<T>> {
    let n = center.len();
    let mut order: Vec<usize> = (0..zs.len()).collect();
    let d: Vec<T> = zs.iter().map(|z| dist(z, center)).collect();
    order.sort_by(|a, b| d[*a].partial_cmp(&d[*b]).expect("finite distances"));
    for kind in [Kind::Full, Kind::Diagonal, Kind::Linear] {
        let p = n_params(kind, n);
        let near = order
            .iter()
            .filter(|i| d[**i] <= T::lit(3.0) * radius)
            .count();
        let take = near.max(p).min(3 * p).min(order.len());
        if take < p {
            continue;
        }
        let rows: Vec<Vec<T>> = order[..take]
            .iter()
            .map(|&i| {
                let s: Vec<T> = zs[i]
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (*a - *b) / radius)
                    .collect();
                features(kind, &s)
            })
            .collect();
        let rhs: Vec<T> = order[..take].iter().map(|&i| fs[i]).collect();
        if let Ok(c) = lstsq(&Mat::from_rows(&rows), &rhs) {
            if c.iter().all(|v| v.is_finite()) {
                // undo the radius normalization of s
                let m = unpack(kind, n, &c);
                let g = m.g.iter().map(|v| *v / radius).collect();
                let mut h = m.h;
                for v in h.data.iter_mut() {
                    *v /= radius * radius;
                }
                return Some(Model { c: m.c, g, h });
            }
        }
    }
    None
}

/// Approximate minimizer of the model over `{‖s‖ ≤ Δ} ∩ [lo − c, hi − c]`
/// by projected gradient descent from a few starts.
fn solve_subproblem<T: Real>(m: &Model<T>, delta: T, lo: &[T], hi: &[T]) -> Vec<T> {
    let n = m.g.len();
    let project = |s: &mut Vec<T>| {
        for i in 0..n {
            s[i] = s[i].max(lo[i]).min(hi[i]);
        }
        // the box contains the origin, so shrinking toward it stays feasible
        let r = norm(s);
        if r > delta {
            let k = delta / r;
            for v in s.iter_mut() {
                *v *= k;
            }
        }
    };
    let lip = m.h.data.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt() + T::eps_times(1.0);
    let gnorm = norm(&m.g);
    let mut starts = vec![vec![T::zero(); n]];
    if gnorm > T::zero() {
        let mut s: Vec<T> = m.g.iter().map(|g| -*g * delta / gnorm).collect();
        project(&mut s);
        starts.push(s);
    }
    if let Ok(newton) = crate::linalg::solve(&m.h, &m.g) {
        let mut s: Vec<T> = newton.iter().map(|v| -*v).collect();
        project(&mut s);
        starts.push(s);
    }
    let mut best = vec![T::zero(); n];
    let mut best_v = m.value(&best);
    for mut s in starts {
        let step = if lip > T::zero() {
            T::one() / lip
        } else {
            delta
        };
        let step = step.min(delta / gnorm.max(T::eps_times(1.0)));
        for _ in 0..200 {
            let g = m.grad(&s);
            let mut next: Vec<T> = s.iter().zip(&g).map(|(a, b)| *a - step * *b).collect();
            project(&mut next);
            let moved = dist(&next, &s);
            s = next;
            if moved <= T::eps_times(16.0) * (T::one() + delta) {
                break;
            }
        }
        let v = m.value(&s);
        if v < best_v {
            best_v = v;
            best = s;
        }
    }
    best
}

/// Minimizes `objective` inside the box. Objective errors and non-finite
/// values count as `failure_value`, except at the starting point where they
/// abort with [`Error::InitFailed`].
pub fn minimize<T, F>(problem: &OptProblem<T>, objective: F) -> Result<OptTrace<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    problem.validate()?;
    let n = problem.dimension();
    let mut st = State {
        prob: problem,
        f: objective,
        z: Vec::new(),
        evals: Vec::new(),
        best: 0,
    };
    let f0 = st.eval_x(problem.x0.clone());
    if !(f0 < problem.failure_value) {
        return Err(Error::InitFailed(format!(
            "objective failed at the initial point (loss {f0})"
        )));
    }
    let (zlo, zhi) = st.z_bounds();

    // initial stencil along each axis; mirrored when the axis is at a bound
    let mut delta = T::one();
    'stencil: for i in 0..n {
        for sign in [T::one(), -T::one()] {
            if !st.budget_left() {
                break 'stencil;
            }
            let mut z = vec![T::zero(); n];
            z[i] = sign * delta;
            if z[i] > zhi[i] || z[i] < zlo[i] {
                z[i] = -sign * T::lit(2.0) * delta;
            }
            z[i] = z[i].max(zlo[i]).min(zhi[i]);
            if z[i] != T::zero() {
                st.eval_z(&z);
            }
        }
    }

    let delta_max = T::lit(4.0);
    let mut termination = Termination::Budget;
    let mut geometry_axis = 0usize;
    while st.budget_left() {
        if delta < problem.tolerance {
            termination = Termination::StepTolerance;
            break;
        }
        let center = st.best_z();
        let fs: Vec<T> = st.evals.iter().map(|e| e.1).collect();
        let model = fit_model(&st.z, &fs, &center, delta);
        let lo: Vec<T> = (0..n).map(|i| zlo[i] - center[i]).collect();
        let hi: Vec<T> = (0..n).map(|i| zhi[i] - center[i]).collect();

        let step = model.as_ref().map(|m| solve_subproblem(m, delta, &lo, &hi));
        let predicted = match (&model, &step) {
            (Some(m), Some(s)) => m.value(&vec![T::zero(); n]) - m.value(s),
            _ => T::zero(),
        };
        let step_len = step.as_ref().map_or(T::zero(), |s| norm(s));

        if predicted > T::zero() && step_len > T::lit(0.01) * delta {
            let s = step.expect("checked");
            let target: Vec<T> = center.iter().zip(&s).map(|(c, d)| *c + *d).collect();
            let f_best = st.evals[st.best].1;
            let f_new = st.eval_z(&target);
            let ratio = (f_best - f_new) / predicted;
            if ratio >= T::lit(0.7) && step_len >= T::lit(0.9) * delta {
                delta = (delta * T::lit(2.0)).min(delta_max);
            } else if ratio < T::lit(0.1) {
                let nearby =
                    st.z.iter()
                        .filter(|z| dist(z, &center) <= T::lit(2.0) * delta)
                        .count();
                if nearby >= n_params(Kind::Diagonal, n) {
                    delta *= T::lit(0.5);
                } else {
                    geometry_step(&mut st, &center, delta, &zlo, &zhi, &mut geometry_axis);
                }
            }
        } else {
            // no predicted progress: either the model is stale or we are at
            // its minimum; refresh geometry once, then contract
            let nearby =
                st.z.iter()
                    .filter(|z| dist(z, &center) <= T::lit(1.5) * delta)
                    .count();
            if nearby < n_params(Kind::Diagonal, n) {
                geometry_step(&mut st, &center, delta, &zlo, &zhi, &mut geometry_axis);
            }
            delta *= T::lit(0.5);
        }
    }

    let (best_point, best_loss) = st.evals[st.best].clone();
    Ok(OptTrace {
        evaluations: st.evals,
        best_point,
        best_loss,
        termination,
    })
}

fn geometry_step<T: Real, F: FnMut(&[T]) -> Result<T>>(
    st: &mut State<'_, T, F>,
    center: &[T],
    delta: T,
    zlo: &[T],
    zhi: &[T],
    axis: &mut usize,
) {
    let n = center.len();
    for _ in 0..n {
        let i = *axis % n;
        *axis += 1;
        let sign = if (*axis / n).is_multiple_of(2) {
            T::one()
        } else {
            -T::one()
        };
        let mut z = center.to_vec();
        z[i] = (z[i] + sign * delta).max(zlo[i]).min(zhi[i]);
        if z[i] == center[i] {
            z[i] = (center[i] - sign * delta).max(zlo[i]).min(zhi[i]);
        }
        if z[i] != center[i] && st.budget_left() {
            st.eval_z(&z);
            return;
        }
    }
}
