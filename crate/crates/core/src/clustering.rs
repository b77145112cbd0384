//! Gaussian mixtures on IQ clouds, BIC model selection and digitization.
//!
//! Components carry full 2×2 covariances, so a `k`-component model has
//! `6k − 1` free parameters. EM restarts are seeded per `k` from a single
//! seed; a fit is a pure function of `(points, k, seed)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// δ_BIC attenuation divisor.
pub const DELTA_BIC_DIVISOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IqPoint<T> {
    pub i: T,
    pub q: T,
}

impl<T: Real> IqPoint<T> {
    pub fn new(i: T, q: T) -> Self {
        Self { i, q }
    }

    pub fn dist2(&self, o: &Self) -> T {
        let (a, b) = (self.i - o.i, self.q - o.q);
        a * a + b * b
    }

    pub fn centroid(points: &[Self]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let n = T::from_usize_lossy(points.len());
        let (si, sq) = points
            .iter()
            .fold((T::zero(), T::zero()), |(a, b), p| (a + p.i, b + p.q));
        Some(Self::new(si / n, sq / n))
    }
}

/// Symmetric 2×2 covariance `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Real> Cov2<T> {
    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_spd(&self) -> bool {
        self.xx > T::zero() && self.det() > T::zero()
    }

    /// `(−½·log det − log 2π, inverse)`; `None` if not SPD.
    fn log_norm_and_inverse(&self) -> Option<(T, [T; 3])> {
        let d = self.det();
        if !(self.xx > T::zero() && d > T::zero()) {
            return None;
        }
        let inv = [self.yy / d, -self.xy / d, self.xx / d];
        Some((-T::lit(0.5) * d.ln() - T::TAU().ln(), inv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel<T> {
    pub k: usize,
    pub weights: Vec<T>,
    pub means: Vec<IqPoint<T>>,
    pub covariances: Vec<Cov2<T>>,
    pub log_likelihood: T,
    pub n: usize,
    /// Component identified with the ground state; set by
    /// [`GmmModel::label_by_reference`].
    pub ground_component: Option<usize>,
}

impl<T: Real> GmmModel<T> {
    /// Labels the component whose mean is nearest `reference` as state 0.
    /// Ties resolve to the lower component index.
    pub fn label_by_reference(&mut self, reference: IqPoint<T>) {
        let mut best = 0;
        for c in 1..self.k {
            if self.means[c].dist2(&reference) < self.means[best].dist2(&reference) {
                best = c;
            }
        }
        self.ground_component = Some(best);
    }

    /// Per-component `log(w_c · N(x | μ_c, Σ_c))`.
    fn component_log_densities(&self, p: &IqPoint<T>, out: &mut [T]) {
        for c in 0..self.k {
            let (ln, inv) = self.covariances[c]
                .log_norm_and_inverse()
                .expect("fitted covariances are SPD");
            let (dx, dy) = (p.i - self.means[c].i, p.q - self.means[c].q);
            let m = inv[0] * dx * dx + T::lit(2.0) * inv[1] * dx * dy + inv[2] * dy * dy;
            out[c] = self.weights[c].ln() + ln - T::lit(0.5) * m;
        }
    }

    /// Posterior probability of the excited-state component of a labeled
    /// two-component model.
    pub fn responsibility_one(&self, p: &IqPoint<T>) -> Result<T> {
        let g = self.labeled_ground()?;
        let mut l = [T::zero(); 2];
        self.component_log_densities(p, &mut l);
        let (l0, l1) = (l[g], l[1 - g]);
        // logistic of the log-odds, stable for large |d|
        Ok(T::one() / (T::one() + (l0 - l1).exp()))
    }

    fn labeled_ground(&self) -> Result<usize> {
        if self.k != 2 {
            return Err(Error::InvalidState(format!(
                "digitize needs a 2-component model, got k={}",
                self.k
            )));
        }
        self.ground_component
            .ok_or_else(|| Error::InvalidState("mixture has no cluster-to-state labeling".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub n_init: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Diagonal regularization as a fraction of the data variance.
    pub reg: f64,
    /// Iterations each restart runs before only the most likely one is
    /// carried on to convergence.
    pub burn_in: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            n_init: 5,
            max_iter: 300,
            rel_tol: 1e-7,
            reg: 1e-6,
            burn_in: 20,
        }
    }
}

/// EM working state for one restart. Points are centered on the data mean.
struct Em<'a, T> {
    pts: &'a [IqPoint<T>],
    k: usize,
    w: Vec<T>,
    mu: Vec<IqPoint<T>>,
    cov: Vec<Cov2<T>>,
    reg: T,
    /// Log-likelihood of the current parameters, once evaluated.
    ll: T,
    iters: usize,
}

/// Responsibility-weighted sufficient statistics of one E-step.
struct Stats<T> {
    n: Vec<T>,
    s: Vec<[T; 2]>,
    ss: Vec<[T; 3]>,
}

impl<T: Real> Stats<T> {
    fn new(k: usize) -> Self {
        Self {
            n: vec![T::zero(); k],
            s: vec![[T::zero(); 2]; k],
            ss: vec![[T::zero(); 3]; k],
        }
    }

    fn add(&mut self, c: usize, r: T, p: &IqPoint<T>) {
        self.n[c] += r;
        self.s[c][0] += r * p.i;
        self.s[c][1] += r * p.q;
        self.ss[c][0] += r * p.i * p.i;
        self.ss[c][1] += r * p.i * p.q;
        self.ss[c][2] += r * p.q * p.q;
    }
}

impl<'a, T: Real> Em<'a, T> {
    /// E-step: log-likelihood of the current parameters and the statistics
    /// for the next M-step, in a single pass.
    fn e_step(&self) -> Option<(T, Stats<T>)> {
        let k = self.k;
        let mut pre = Vec::with_capacity(k);
        for c in 0..k {
            let (ln, inv) = self.cov[c].log_norm_and_inverse()?;
            pre.push((self.w[c].ln() + ln, inv));
        }
        let mut st = Stats::new(k);
        let mut ll = T::zero();
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let mut row = [T::zero(); 4];
        for p in self.pts {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                let (base, inv) = pre[c];
                let (dx, dy) = (p.i - self.mu[c].i, p.q - self.mu[c].q);
                let v =
                    base - half * (inv[0] * dx * dx + two * inv[1] * dx * dy + inv[2] * dy * dy);
                row[c] = v;
                mx = mx.max(v);
            }
            let mut sum = T::zero();
            for v in row.iter_mut().take(k) {
                *v = (*v - mx).exp();
                sum += *v;
            }
            ll += mx + sum.ln();
            for (c, v) in row.iter().enumerate().take(k) {
                st.add(c, *v / sum, p);
            }
        }
        ll.is_finite().then_some((ll, st))
    }

    /// M-step; `None` if a component collapsed.
    fn m_step(&mut self, st: &Stats<T>) -> Option<()> {
        let n = T::from_usize_lossy(self.pts.len());
        let tiny = T::eps_times(1e3) * n;
        for c in 0..self.k {
            let nk = st.n[c];
            if !(nk > tiny) {
                return None;
            }
            let m = IqPoint::new(st.s[c][0] / nk, st.s[c][1] / nk);
            self.w[c] = nk / n;
            self.mu[c] = m;
            self.cov[c] = Cov2 {
                xx: (st.ss[c][0] / nk - m.i * m.i).max(T::zero()) + self.reg,
                xy: st.ss[c][1] / nk - m.i * m.q,
                yy: (st.ss[c][2] / nk - m.q * m.q).max(T::zero()) + self.reg,
            };
            if !self.cov[c].is_spd() {
                return None;
            }
        }
        Some(())
    }

    /// Iterates until converged or `until` iterations in total. Leaves the
    /// parameters whose likelihood is `self.ll`.
    fn run(&mut self, until: usize, rel_tol: T) -> Option<bool> {
        while self.iters < until {
            let (ll, st) = self.e_step()?;
            debug_assert!(
                ll >= self.ll
                    - (T::lit(1e-7) + T::eps_times(self.pts.len() as f64))
                        * self.ll.abs().max(T::one()),
                "EM decreased the log-likelihood: {} -> {}",
                self.ll,
                ll
            );
            let done = (ll - self.ll).abs() <= rel_tol * ll.abs();
            self.ll = ll;
            if done {
                return Some(true);
            }
            self.m_step(&st)?;
            self.iters += 1;
        }
        // the last M-step moved the parameters past `self.ll`
        self.ll = self.e_step()?.0;
        Some(false)
    }
}

fn data_moments<T: Real>(pts: &[IqPoint<T>]) -> (IqPoint<T>, Cov2<T>) {
    let m = IqPoint::centroid(pts).expect("non-empty");
    let n = T::from_usize_lossy(pts.len());
    let (mut xx, mut xy, mut yy) = (T::zero(), T::zero(), T::zero());
    for p in pts {
        let (dx, dy) = (p.i - m.i, p.q - m.q);
        xx += dx * dx;
        xy += dx * dy;
        yy += dy * dy;
    }
    (
        m,
        Cov2 {
            xx: xx / n,
            xy: xy / n,
            yy: yy / n,
        },
    )
}

fn kmeans_pp<T: Real>(pts: &[IqPoint<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<IqPoint<T>> {
    let mut centers = vec![pts[rng.gen_range(0..pts.len())]];
    let mut d2: Vec<T> = pts.iter().map(|p| p.dist2(&centers[0])).collect();
    while centers.len() < k {
        let total = d2.iter().fold(T::zero(), |a, v| a + *v);
        let pick = if total > T::zero() {
            let u = T::lit(rng.gen::<f64>()) * total;
            let mut acc = T::zero();
            let mut idx = pts.len() - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += *v;
                if acc >= u {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.gen_range(0..pts.len())
        };
        let c = pts[pick];
        for (v, p) in d2.iter_mut().zip(pts) {
            *v = v.min(p.dist2(&c));
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component full-covariance mixture with default options.
pub fn gmm_fit<T: Real>(points: &[IqPoint<T>], k: usize, seed: u64) -> Result<GmmModel<T>> {
    gmm_fit_with(points, k, seed, &GmmOptions::default())
}

pub fn gmm_fit_with<T: Real>(
    points: &[IqPoint<T>],
    k: usize,
    seed: u64,
    opts: &GmmOptions,
) -> Result<GmmModel<T>> {
    if !(1..=4).contains(&k) {
        return Err(Error::invalid(format!(
            "gmm_fit: k must be in 1..=4, got {k}"
        )));
    }
    if points.len() < 10 * k {
        return Err(Error::invalid(format!(
            "gmm_fit: need at least {} points for k={k}, got {}",
            10 * k,
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.i.is_finite() && p.q.is_finite())) {
        return Err(Error::invalid("gmm_fit: non-finite IQ point"));
    }
    let n = points.len();
    let (mean, dcov) = data_moments(points);
    let var = T::lit(0.5) * (dcov.xx + dcov.yy);
    let identical = points.iter().all(|p| p == &points[0]);

    if k == 1 {
        // closed-form MLE; regularized only when singular
        let mut cov = dcov;
        if !cov.is_spd() {
            let floor = (T::lit(opts.reg) * var)
                .max(T::eps_times(1.0) * (T::one() + mean.i.abs() + mean.q.abs()));
            cov.xx += floor;
            cov.yy += floor;
        }
        let mut model = GmmModel {
            k: 1,
            weights: vec![T::one()],
            means: vec![mean],
            covariances: vec![cov],
            log_likelihood: T::zero(),
            n,
            ground_component: None,
        };
        let mut buf = [T::zero()];
        model.log_likelihood = points.iter().fold(T::zero(), |acc, p| {
            model.component_log_densities(p, &mut buf);
            acc + buf[0]
        });
        return Ok(model);
    }
    if identical || !(var > T::zero()) {
        return Err(Error::DegenerateData(format!(
            "all {n} points identical, cannot fit k={k}"
        )));
    }

    let reg = T::lit(opts.reg) * var;
    let rel_tol = T::lit(opts.rel_tol);
    let centered: Vec<IqPoint<T>> = points
        .iter()
        .map(|p| IqPoint::new(p.i - mean.i, p.q - mean.q))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut runs: Vec<Em<T>> = Vec::new();
    for _ in 0..opts.n_init.max(1) {
        let centers = kmeans_pp(&centered, k, &mut rng);
        let mut em = Em {
            pts: &centered,
            k,
            w: vec![T::one() / T::from_usize_lossy(k); k],
            mu: centers.clone(),
            cov: vec![dcov; k],
            reg,
            ll: T::neg_infinity(),
            iters: 0,
        };
        // hard nearest-center assignment seeds the first M-step
        let mut st = Stats::new(k);
        for p in &centered {
            let mut best = 0;
            for c in 1..k {
                if p.dist2(&centers[c]) < p.dist2(&centers[best]) {
                    best = c;
                }
            }
            st.add(best, T::one(), p);
        }
        if em.m_step(&st).is_some() && em.run(opts.burn_in.min(opts.max_iter), rel_tol).is_some() {
            runs.push(em);
        }
    }
    let mut best = runs
        .into_iter()
        .max_by(|a, b| a.ll.partial_cmp(&b.ll).expect("finite"))
        .ok_or_else(|| Error::DegenerateData(format!("every EM restart collapsed for k={k}")))?;
    if best.run(opts.max_iter, rel_tol).is_none() {
        return Err(Error::DegenerateData(format!(
            "EM collapsed a component for k={k}"
        )));
    }
    log::debug!("gmm k={k}: {} EM iterations", best.iters);
    Ok(GmmModel {
        k,
        weights: best.w,
        means: best
            .mu
            .iter()
            .map(|m| IqPoint::new(m.i + mean.i, m.q + mean.q))
            .collect(),
        covariances: best.cov,
        log_likelihood: best.ll,
        n,
        ground_component: None,
    })
}

/// `BIC = (6k − 1)·ln n − 2·log L`.
pub fn bic<T: Real>(model: &GmmModel<T>) -> Result<T> {
    if model.n < 2 {
        return Err(Error::invalid("bic: sample size below 2"));
    }
    let p = T::from_usize_lossy(6 * model.k - 1);
    Ok(p * T::from_usize_lossy(model.n).ln() - T::lit(2.0) * model.log_likelihood)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport<T> {
    pub bic: BTreeMap<usize, T>,
    /// `(BIC_k − BIC_2)/10` for `k ∈ {1, 3, 4}`.
    pub delta_bic: BTreeMap<usize, T>,
    pub gmm2: GmmModel<T>,
}

impl<T: Real> ClusterReport<T> {
    pub fn bic_of(&self, k: usize) -> Option<T> {
        self.bic.get(&k).copied()
    }

    pub fn delta_bic_of(&self, k: usize) -> Option<T> {
        self.delta_bic.get(&k).copied()
    }

    /// The `k` with the smallest BIC.
    pub fn best_k(&self) -> usize {
        self.bic
            .iter()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(k, _)| *k)
            .expect("non-empty report")
    }
}

/// Fits `k = 1..=4` and tabulates BIC and δ_BIC.
pub fn cluster_report<T: Real>(points: &[IqPoint<T>], seed: u64) -> Result<ClusterReport<T>> {
    if points.len() < 40 {
        return Err(Error::invalid(format!(
            "cluster_report needs at least 40 points, got {}",
            points.len()
        )));
    }
    let mut bics = BTreeMap::new();
    let mut gmm2 = None;
    for k in 1..=4 {
        let m = gmm_fit(points, k, seed)?;
        bics.insert(k, bic(&m)?);
        if k == 2 {
            gmm2 = Some(m);
        }
    }
    let b2 = bics[&2];
    let delta_bic = [1, 3, 4]
        .into_iter()
        .map(|k| (k, (bics[&k] - b2) / T::lit(DELTA_BIC_DIVISOR)))
        .collect();
    Ok(ClusterReport {
        bic: bics,
        delta_bic,
        gmm2: gmm2.expect("k=2 fitted"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digitized<T> {
    pub bits: Vec<u8>,
    pub p1: T,
}

/// Assigns each point to the more responsible state; exact ties go to 0.
pub fn digitize<T: Real>(points: &[IqPoint<T>], gmm2: &GmmModel<T>) -> Result<Digitized<T>> {
    gmm2.labeled_ground()?;
    let mut bits = Vec::with_capacity(points.len());
    let mut ones = 0usize;
    for p in points {
        let bit = u8::from(gmm2.responsibility_one(p)? > T::lit(0.5));
        ones += bit as usize;
        bits.push(bit);
    }
    let p1 = if points.is_empty() {
        T::zero()
    } else {
        T::from_usize_lossy(ones) / T::from_usize_lossy(points.len())
    };
    Ok(Digitized { bits, p1 })
}
