//! The autoRabi loss and the loop that tunes `(f_q, f_r, a_r)` jointly.
//!
//! ```text
//! Δ = [ √χ²_NDF,
//!       (|A| − 0.5)/0.03,  (C − 0.5)/0.05,
//!       (T_X90 − 32 ns)/4 ns,
//!       σ(−δ_BIC(1))/0.5,  σ(−δ_BIC(3))/0.5,  σ(−δ_BIC(4))/0.5 ]
//! L_tot = Σ Δᵢ²
//! ```
//!
//! with `δ_BIC(k) = (BIC_k − BIC_2)/10`. The BIC terms use `σ(−δ)` so that
//! they vanish when the two-cluster hypothesis wins.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_report, digitize, ClusterReport, IqPoint, DELTA_BIC_DIVISOR};
use crate::error::{Error, Result};
use crate::fitters::{binomial_sigma, fit_rabi, RabiFit};
use crate::optimizer::{minimize, OptProblem, OptTrace};
use crate::scalar::Real;
use crate::simdev::{derive_seed, Backend, QubitBias, ShotBatch};

/// Target `|A|` and `C` of a full-contrast Rabi oscillation.
pub const CONTRAST_TARGET: f64 = 0.5;
/// Tolerated deviation of `|A|` from its target.
pub const AMPLITUDE_NORM: f64 = 0.03;
/// Tolerated deviation of `C` from its target.
pub const OFFSET_NORM: f64 = 0.05;
pub const T_X90_TARGET_NS: f64 = 32.0;
pub const T_X90_NORM_NS: f64 = 4.0;
/// Scale of each BIC sigmoid term, capping it at 4 loss units.
pub const BIC_NORM: f64 = 0.5;

/// Normalizations of the loss vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig<T> {
    pub amplitude_target: T,
    pub amplitude_norm: T,
    pub offset_target: T,
    pub offset_norm: T,
    /// ns
    pub t_x90_target: T,
    /// ns
    pub t_x90_norm: T,
    pub bic_norm: T,
    pub bic_divisor: T,
    /// Total loss reported when the scan cannot be fitted.
    pub sentinel: T,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            amplitude_target: T::lit(CONTRAST_TARGET),
            amplitude_norm: T::lit(AMPLITUDE_NORM),
            offset_target: T::lit(CONTRAST_TARGET),
            offset_norm: T::lit(OFFSET_NORM),
            t_x90_target: T::lit(T_X90_TARGET_NS),
            t_x90_norm: T::lit(T_X90_NORM_NS),
            bic_norm: T::lit(BIC_NORM),
            bic_divisor: T::lit(DELTA_BIC_DIVISOR),
            sentinel: T::lit(1e4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub delta: [T; 7],
    pub l_f: T,
    pub l_ac: T,
    pub l_t: T,
    pub l_bic: T,
    pub l_tot: T,
}

impl<T: Real> LossBreakdown<T> {
    fn from_delta(delta: [T; 7]) -> Self {
        let sq: Vec<T> = delta.iter().map(|d| *d * *d).collect();
        Self {
            delta,
            l_f: sq[0],
            l_ac: sq[1] + sq[2],
            l_t: sq[3],
            l_bic: sq[4] + sq[5] + sq[6],
            l_tot: sq.iter().fold(T::zero(), |a, v| a + *v),
        }
    }

    /// Breakdown standing in for a failed fit: the whole loss sits in the
    /// goodness-of-fit slot.
    pub fn sentinel(value: T) -> Self {
        let mut d = [T::zero(); 7];
        d[0] = value.sqrt();
        let mut b = Self::from_delta(d);
        b.l_f = value;
        b.l_tot = value;
        b
    }

    pub fn is_sentinel(&self, cfg: &LossConfig<T>) -> bool {
        self.l_tot >= cfg.sentinel
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Evaluates the loss vector for one fitted scan.
pub fn loss_total<T: Real>(
    fit: &RabiFit<T>,
    clusters: &ClusterReport<T>,
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    let b2 = clusters
        .bic_of(2)
        .ok_or_else(|| Error::invalid("cluster report lacks k=2"))?;
    let mut bic_terms = [T::zero(); 3];
    for (slot, k) in [1usize, 3, 4].into_iter().enumerate() {
        let bk = clusters
            .bic_of(k)
            .ok_or_else(|| Error::invalid(format!("cluster report lacks k={k}")))?;
        let delta_bic = (bk - b2) / cfg.bic_divisor;
        bic_terms[slot] = sigmoid(-delta_bic) / cfg.bic_norm;
    }
    let delta = [
        fit.chi2_ndf.max(T::zero()).sqrt(),
        (fit.amplitude.abs() - cfg.amplitude_target) / cfg.amplitude_norm,
        (fit.c_offset - cfg.offset_target) / cfg.offset_norm,
        (fit.t_x90 - cfg.t_x90_target) / cfg.t_x90_norm,
        bic_terms[0],
        bic_terms[1],
        bic_terms[2],
    ];
    Ok(LossBreakdown::from_delta(delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// ns, multiples of 4
    pub widths: Vec<f64>,
    pub shots: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            widths: (1..=50).map(|i| 4.0 * i as f64).collect(),
            shots: 400,
        }
    }
}

/// One scored bias point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bias: QubitBias,
    pub seed: u64,
    pub p1: Vec<f64>,
    pub fit: Option<RabiFit<f64>>,
    pub clusters: Option<ClusterReport<f64>>,
    pub loss: LossBreakdown<f64>,
    /// Why the sentinel was used, if it was.
    pub failure: Option<String>,
}

/// Centroid of the shortest-width shots, where the qubit is nearly in |0⟩.
pub fn ground_reference(batch: &ShotBatch) -> Option<IqPoint<f64>> {
    let (idx, _) = batch
        .widths
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    IqPoint::centroid(&batch.iq[idx])
}

/// Scans, clusters, digitizes, fits and scores one bias point.
///
/// Fit and clustering failures become the sentinel loss so an optimizer can
/// keep going; invalid arguments are still errors.
pub fn evaluate_bias(
    backend: &Backend,
    qubit: usize,
    bias: &QubitBias,
    scan: &ScanConfig,
    loss_cfg: &LossConfig<f64>,
    seed: u64,
    reference: Option<IqPoint<f64>>,
) -> Result<(Evaluation, ShotBatch)> {
    let batch = backend.rabi_scan(qubit, bias, &scan.widths, scan.shots, seed)?;
    let reference = match reference.or_else(|| ground_reference(&batch)) {
        Some(r) => r,
        None => return Err(Error::invalid("empty scan")),
    };
    let fail = |why: String, clusters: Option<ClusterReport<f64>>, p1: Vec<f64>| Evaluation {
        bias: *bias,
        seed,
        p1,
        fit: None,
        clusters,
        loss: LossBreakdown::sentinel(loss_cfg.sentinel),
        failure: Some(why),
    };
    let mut report = match cluster_report(&batch.all_points(), seed) {
        Ok(r) => r,
        Err(e @ (Error::DegenerateData(_) | Error::DegenerateFit(_))) => {
            return Ok((fail(e.to_string(), None, Vec::new()), batch));
        }
        Err(e) => return Err(e),
    };
    report.gmm2.label_by_reference(reference);
    let p1: Vec<f64> = batch
        .iq
        .iter()
        .map(|pts| digitize(pts, &report.gmm2).map(|d| d.p1))
        .collect::<Result<_>>()?;
    let sigma: Vec<f64> = p1.iter().map(|p| binomial_sigma(*p, scan.shots)).collect();
    let fit = match fit_rabi(&scan.widths, &p1, &sigma) {
        Ok(f) => f,
        Err(e @ (Error::DegenerateFit(_) | Error::FitFailed { .. })) => {
            return Ok((fail(e.to_string(), Some(report), p1), batch));
        }
        Err(e) => return Err(e),
    };
    let loss = loss_total(&fit, &report, loss_cfg)?;
    Ok((
        Evaluation {
            bias: *bias,
            seed,
            p1,
            fit: Some(fit),
            clusters: Some(report),
            loss,
            failure: None,
        },
        batch,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoRabiConfig {
    /// Half-widths of the search box around the initial bias: f_q (GHz),
    /// f_r (GHz), a_r.
    pub brackets: [f64; 3],
    /// Number of bias evaluations.
    pub budget: usize,
    pub scan: ScanConfig,
    pub loss: LossConfig<f64>,
    /// Keep every raw IQ batch in the result.
    pub archive_raw_iq: bool,
}

impl Default for AutoRabiConfig {
    fn default() -> Self {
        Self {
            brackets: [0.002, 0.002, 0.3],
            budget: 40,
            scan: ScanConfig::default(),
            loss: LossConfig::default(),
            archive_raw_iq: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoRabiResult {
    pub qubit: usize,
    pub final_bias: QubitBias,
    pub final_loss: LossBreakdown<f64>,
    pub initial_loss: LossBreakdown<f64>,
    pub trace: OptTrace<f64>,
    pub evaluations: Vec<Evaluation>,
    /// Present when `archive_raw_iq` is set.
    pub raw_iq: Vec<ShotBatch>,
    pub ground_reference: IqPoint<f64>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

impl AutoRabiResult {
    pub fn best_evaluation(&self) -> &Evaluation {
        self.evaluations
            .iter()
            .min_by(|a, b| a.loss.l_tot.total_cmp(&b.loss.l_tot))
            .expect("at least one evaluation")
    }
}

/// Minimizes the loss over `(f_q, f_r, a_r)` inside the brackets.
pub fn autorabi(
    backend: &Backend,
    qubit: usize,
    initial: &QubitBias,
    cfg: &AutoRabiConfig,
    seed: u64,
) -> Result<AutoRabiResult> {
    initial.validate()?;
    if cfg.budget == 0 {
        return Err(Error::invalid("autorabi budget must be at least 1"));
    }
    if cfg.brackets.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::invalid("autorabi brackets must be positive"));
    }
    let started = Utc::now();
    let x0 = vec![initial.f_q, initial.f_r, initial.a_r];
    let lower = vec![
        initial.f_q - cfg.brackets[0],
        initial.f_r - cfg.brackets[1],
        (initial.a_r - cfg.brackets[2]).max(0.0),
    ];
    let upper = vec![
        initial.f_q + cfg.brackets[0],
        initial.f_r + cfg.brackets[1],
        (initial.a_r + cfg.brackets[2]).min(1.0),
    ];
    let mut problem = OptProblem::new(x0, lower, upper)?;
    problem.initial_step = cfg.brackets.iter().map(|b| 0.5 * b).collect();
    problem.max_evals = cfg.budget;
    problem.tolerance = 1e-3;
    problem.failure_value = cfg.loss.sentinel;

    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut raw_iq = Vec::new();
    let mut reference: Option<IqPoint<f64>> = None;
    let trace = minimize(&problem, |x| {
        let bias = QubitBias {
            f_q: x[0],
            f_r: x[1],
            a_r: x[2],
            readout_amp: initial.readout_amp,
        };
        let s = derive_seed(seed, evaluations.len() as u64);
        let (ev, batch) = evaluate_bias(backend, qubit, &bias, &cfg.scan, &cfg.loss, s, reference)?;
        if reference.is_none() {
            reference = ground_reference(&batch);
        }
        log::debug!(
            "autorabi q{qubit} eval {}: {:?} -> {:.4}",
            evaluations.len(),
            x,
            ev.loss.l_tot
        );
        let l = ev.loss.l_tot;
        evaluations.push(ev);
        if cfg.archive_raw_iq {
            raw_iq.push(batch);
        }
        Ok(l)
    })?;
    let best = &evaluations[trace
        .evaluations
        .iter()
        .position(|e| e.1 == trace.best_loss)
        .expect("best is in the trace")];
    Ok(AutoRabiResult {
        qubit,
        final_bias: best.bias,
        final_loss: best.loss,
        initial_loss: evaluations[0].loss,
        trace,
        evaluations,
        raw_iq,
        ground_reference: reference.expect("at least one evaluation"),
        started,
        finished: Utc::now(),
    })
}

/// One line of the per-evaluation archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub iteration: usize,
    pub bias: QubitBias,
    pub seed: u64,
    pub fit: Option<RabiFit<f64>>,
    pub bic: BTreeMap<usize, f64>,
    pub delta_bic: BTreeMap<usize, f64>,
    pub loss: LossBreakdown<f64>,
    pub failure: Option<String>,
}

/// Writes `autorabi_q{n}.jsonl` (one record per evaluation),
/// `autorabi_q{n}_loss.csv` and, when archived, the raw IQ batches.
pub fn write_archive(result: &AutoRabiResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let q = result.qubit;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(
        dir.join(format!("autorabi_q{q}.jsonl")),
    )?);
    let mut csv = std::io::BufWriter::new(std::fs::File::create(
        dir.join(format!("autorabi_q{q}_loss.csv")),
    )?);
    writeln!(
        csv,
        "iteration,f_q,f_r,a_r,l_f,l_ac,l_t,l_bic,l_tot,best_l_tot"
    )?;
    let mut best = f64::INFINITY;
    for (i, ev) in result.evaluations.iter().enumerate() {
        let rec = ArchiveRecord {
            iteration: i,
            bias: ev.bias,
            seed: ev.seed,
            fit: ev.fit,
            bic: ev
                .clusters
                .as_ref()
                .map(|c| c.bic.clone())
                .unwrap_or_default(),
            delta_bic: ev
                .clusters
                .as_ref()
                .map(|c| c.delta_bic.clone())
                .unwrap_or_default(),
            loss: ev.loss,
            failure: ev.failure.clone(),
        };
        serde_json::to_writer(&mut jsonl, &rec)?;
        writeln!(jsonl)?;
        best = best.min(ev.loss.l_tot);
        let l = &ev.loss;
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{}",
            ev.bias.f_q, ev.bias.f_r, ev.bias.a_r, l.l_f, l.l_ac, l.l_t, l.l_bic, l.l_tot, best
        )?;
    }
    jsonl.flush()?;
    csv.flush()?;
    if !result.raw_iq.is_empty() {
        let iq_dir = dir.join(format!("iq_q{q}"));
        std::fs::create_dir_all(&iq_dir)?;
        for (i, b) in result.raw_iq.iter().enumerate() {
            let f = std::fs::File::create(iq_dir.join(format!("eval_{i:03}.json")))?;
            serde_json::to_writer(std::io::BufWriter::new(f), b)?;
        }
    }
    Ok(())
}
