//! Gate-level calibration protocols run on top of single-qubit Rabi tuning:
//! amplitude fine-tuning by gate stacking, cross-resonance (CR) amplitude
//! search and extraction of the CNOT correction angles from one full
//! XY-plane measurement.
//!
//! Two-qubit circuits use qubit 0 as control and qubit 1 as target.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitters::{
    binomial_sigma, fit_parabola, fit_sine_with_hint, levenberg_marquardt, std_errors, CurveModel,
    LmOptions, ParabolaFit, SineFit,
};
use crate::qmatrix::{
    bloch_r_length, cr_from_cnot, rot_x, rot_z, tensor, BlochExpectations, Branch, CnotAngles,
    PureState, Unitary,
};
use crate::scalar::wrap_angle;
use crate::simdev::{derive_seed, Backend, Circuit, Gate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackGate {
    X90,
    X180,
}

impl StackGate {
    /// Nominal rotation per gate.
    pub fn angle(self) -> f64 {
        match self {
            StackGate::X90 => FRAC_PI_2,
            StackGate::X180 => PI,
        }
    }

    fn check_count(self, n_stack: usize) -> Result<()> {
        let ok = match self {
            StackGate::X90 => n_stack > 0 && n_stack.is_multiple_of(4),
            StackGate::X180 => n_stack > 0 && n_stack.is_multiple_of(2),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{self:?} stack of {n_stack} is not a nominal identity"
            )))
        }
    }

    fn gate(self, qubit: usize, amp: f64) -> Gate {
        match self {
            StackGate::X90 => Gate::X90 {
                qubit,
                amp: Some(amp),
            },
            StackGate::X180 => Gate::X180 {
                qubit,
                amp: Some(amp),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackScan {
    pub qubit: usize,
    pub gate: StackGate,
    pub n_stack: usize,
    pub shots: u64,
    pub amplitudes: Vec<f64>,
    pub p1: Vec<f64>,
    pub fit: SineFit<f64>,
    /// Amplitude at the fitted minimum of P1.
    pub optimum: f64,
}

impl StackScan {
    /// Distance in amplitude between adjacent P1 minima.
    pub fn fringe_spacing(&self) -> f64 {
        1.0 / self.fit.frequency
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("amplitude,p1\n");
        for (a, p) in self.amplitudes.iter().zip(&self.p1) {
            writeln!(s, "{a},{p}").expect("write to String");
        }
        s
    }
}

/// `n_stack` copies of `gate` at each trial amplitude, measured from |0⟩.
/// A correctly calibrated stack is an identity, so the optimum is the
/// minimum of a sine fitted to P1.
pub fn stack_scan(
    backend: &Backend,
    qubit: usize,
    gate: StackGate,
    n_stack: usize,
    amplitudes: &[f64],
    shots: u64,
    seed: u64,
) -> Result<StackScan> {
    gate.check_count(n_stack)?;
    if amplitudes.is_empty() {
        return Err(Error::invalid("stack_scan needs amplitudes"));
    }
    let p1 = amplitudes
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut gates = vec![gate.gate(qubit, a); n_stack];
            gates.push(Gate::Measure);
            let counts = backend.run_circuit(
                &Circuit::new(1 + qubit, gates),
                shots,
                derive_seed(seed, i as u64),
            )?;
            Ok(counts.p1(qubit))
        })
        .collect::<Result<Vec<f64>>>()?;
    let center = amplitudes.iter().sum::<f64>() / amplitudes.len() as f64;
    // rotation n·angle·a/a*, with a* taken as the scan center
    let hint = n_stack as f64 * gate.angle() / (TAU * center.abs().max(f64::MIN_POSITIVE));
    let fit = fit_sine_with_hint(amplitudes, &p1, Some(hint))?;
    Ok(StackScan {
        qubit,
        gate,
        n_stack,
        shots,
        amplitudes: amplitudes.to_vec(),
        optimum: fit.argmin(),
        p1,
        fit,
    })
}

/// Symmetric assignment error of `qubit`: the mean of P(1 | |0⟩) and
/// P(0 | |1⟩).
pub fn readout_assignment_error(
    backend: &Backend,
    qubit: usize,
    shots: u64,
    seed: u64,
) -> Result<f64> {
    let n = qubit + 1;
    let ground = backend.run_circuit(
        &Circuit::new(n, vec![Gate::Measure]),
        shots,
        derive_seed(seed, 0),
    )?;
    let excited = backend.run_circuit(
        &Circuit::new(n, vec![Gate::X180 { qubit, amp: None }, Gate::Measure]),
        shots,
        derive_seed(seed, 1),
    )?;
    Ok(0.5 * (ground.p1(qubit) + 1.0 - excited.p1(qubit)))
}

/// Drive-frequency scan of an echoed X90 stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoScan {
    pub qubit: usize,
    pub n_pairs: usize,
    pub shots: u64,
    /// Drive frequencies, GHz.
    pub frequencies: Vec<f64>,
    pub p1: Vec<f64>,
    /// Parabola through the points around the minimum.
    pub fit: Option<ParabolaFit<f64>>,
    pub optimum: f64,
}

impl EchoScan {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("f_q,p1\n");
        for (f, p) in self.frequencies.iter().zip(&self.p1) {
            writeln!(s, "{f},{p}").expect("write to String");
        }
        s
    }
}

/// `X90 · [X90 Z X90 Z]^n · Z X90` at each drive frequency. Each bracket is
/// `X(−90)·X(90)`, an identity for any amplitude when the drive is resonant,
/// while a detuning tilts both axes so the residual rotation accumulates.
/// P1 is therefore quadratic around the qubit frequency with a minimum
/// there.
pub fn echo_detuning_scan(
    backend: &Backend,
    qubit: usize,
    n_pairs: usize,
    frequencies: &[f64],
    shots: u64,
    seed: u64,
) -> Result<EchoScan> {
    if n_pairs == 0 || frequencies.len() < 5 {
        return Err(Error::invalid(
            "echo scan needs pairs and at least 5 frequencies",
        ));
    }
    let x90 = Gate::X90 { qubit, amp: None };
    let z = Gate::Vz { qubit, phi: PI };
    let mut gates = vec![x90];
    for _ in 0..n_pairs {
        gates.extend([x90, z, x90, z]);
    }
    gates.extend([z, x90, Gate::Measure]);
    let circuit = Circuit::new(1 + qubit, gates);
    let mut dev = backend.clone();
    let p1 = frequencies
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut cal = backend.calibration(qubit);
            cal.f_q = f;
            dev.set_calibration(qubit, cal)?;
            Ok(dev
                .run_circuit(&circuit, shots, derive_seed(seed, i as u64))?
                .p1(qubit))
        })
        .collect::<Result<Vec<f64>>>()?;
    let imin = (0..p1.len())
        .min_by(|a, b| p1[*a].total_cmp(&p1[*b]))
        .expect("non-empty");
    let k = (frequencies.len() / 4).max(2);
    let lo = imin.saturating_sub(k);
    let hi = (imin + k + 1).min(frequencies.len());
    let fit = fit_parabola(&frequencies[lo..hi], &p1[lo..hi]).ok();
    let inside = |x: f64| {
        x >= frequencies[lo].min(frequencies[hi - 1])
            && x <= frequencies[lo].max(frequencies[hi - 1])
    };
    let optimum = match fit {
        Some(f) if f.curvature > 0.0 && inside(f.vertex_x) => f.vertex_x,
        _ => frequencies[imin],
    };
    Ok(EchoScan {
        qubit,
        n_pairs,
        shots,
        frequencies: frequencies.to_vec(),
        p1,
        fit,
        optimum,
    })
}

/// Target Bloch vectors for control |0⟩ and |1⟩ after a CR block, and the
/// resulting `|R|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrTomography {
    pub amp: f64,
    pub n_pulses: u32,
    pub control0: BlochExpectations<f64>,
    pub control1: BlochExpectations<f64>,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    X,
    Y,
    Z,
}

/// Target pre-rotation mapping `axis` onto the measured Z axis.
fn basis_change(axis: Axis) -> Vec<Gate> {
    match axis {
        // R_Y(−π/2) = R_Z(3π/2)·R_X(π/2)·R_Z(−3π/2); the last frame change
        // commutes with the measurement
        Axis::X => vec![
            Gate::Vz {
                qubit: 1,
                phi: -1.5 * PI,
            },
            Gate::X90 {
                qubit: 1,
                amp: None,
            },
        ],
        Axis::Y => vec![Gate::X90 {
            qubit: 1,
            amp: None,
        }],
        Axis::Z => vec![],
    }
}

fn tomography_circuit(amp: f64, n_pulses: u32, control: u8, axis: Axis) -> Circuit {
    let mut gates = Vec::new();
    if control == 1 {
        gates.push(Gate::X180 {
            qubit: 0,
            amp: None,
        });
    }
    gates.push(Gate::Cr { amp, n_pulses });
    gates.extend(basis_change(axis));
    gates.push(Gate::Measure);
    Circuit::new(2, gates)
}

/// `shots = None` uses exact outcome probabilities instead of sampling.
fn cr_tomography_impl(
    backend: &Backend,
    amp: f64,
    n_pulses: u32,
    shots: Option<u64>,
    seed: u64,
) -> Result<CrTomography> {
    let mut e = [[0.0; 3]; 2];
    let mut idx = 0u64;
    for control in 0..2u8 {
        for (k, axis) in [Axis::X, Axis::Y, Axis::Z].into_iter().enumerate() {
            let c = tomography_circuit(amp, n_pulses, control, axis);
            let p1 = match shots {
                Some(s) => backend.run_circuit(&c, s, derive_seed(seed, idx))?.p1(1),
                None => {
                    let p = backend.outcome_probabilities(&c)?;
                    p[1] + p[3]
                }
            };
            e[control as usize][k] = 1.0 - 2.0 * p1;
            idx += 1;
        }
    }
    let b0 = BlochExpectations::from_estimates(e[0][0], e[0][1], e[0][2]);
    let b1 = BlochExpectations::from_estimates(e[1][0], e[1][1], e[1][2]);
    Ok(CrTomography {
        amp,
        n_pulses,
        control0: b0,
        control1: b1,
        r: bloch_r_length(&b0, &b1),
    })
}

/// Six-setting target tomography (X/Y/Z for control |0⟩ and |1⟩) after
/// `n_pulses` CR pulses at `amp`.
pub fn cr_tomography(
    backend: &Backend,
    amp: f64,
    n_pulses: u32,
    shots: u64,
    seed: u64,
) -> Result<CrTomography> {
    if shots == 0 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    cr_tomography_impl(backend, amp, n_pulses, Some(shots), seed)
}

/// `|R|` from exact outcome probabilities; the shot-noise-free reference.
pub fn cr_r_exact(backend: &Backend, amp: f64, n_pulses: u32) -> Result<f64> {
    Ok(cr_tomography_impl(backend, amp, n_pulses, None, 0)?.r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrSweepConfig {
    pub coarse_lo: f64,
    pub coarse_hi: f64,
    pub coarse_points: usize,
    /// Half-width of the fine window around the coarse peak.
    pub fine_half_width: f64,
    pub fine_points: usize,
    pub fine_pulses: u32,
    pub shots: u64,
}

impl Default for CrSweepConfig {
    fn default() -> Self {
        Self {
            coarse_lo: 0.0,
            coarse_hi: 1.0,
            coarse_points: 21,
            fine_half_width: 0.07,
            fine_points: 13,
            fine_pulses: 3,
            shots: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrCurve {
    pub n_pulses: u32,
    pub amplitudes: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrSweep {
    pub coarse: CrCurve,
    pub fine: CrCurve,
    pub parabola: ParabolaFit<f64>,
    /// Amplitude at which one pulse is a π/2 ZX rotation.
    pub optimal_amp: f64,
}

impl CrSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,n_pulses,amplitude,r\n");
        for (stage, c) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for (a, r) in c.amplitudes.iter().zip(&c.r) {
                writeln!(s, "{stage},{},{a},{r}", c.n_pulses).expect("write to String");
            }
        }
        s
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn r_curve(
    backend: &Backend,
    amps: Vec<f64>,
    n_pulses: u32,
    shots: u64,
    seed: u64,
) -> Result<CrCurve> {
    let r = amps
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            Ok(cr_tomography(backend, a, n_pulses, shots, derive_seed(seed, i as u64))?.r)
        })
        .collect::<Result<_>>()?;
    Ok(CrCurve {
        n_pulses,
        amplitudes: amps,
        r,
    })
}

/// Coarse single-pulse sweep to find the first `|R|` peak, then a sharper
/// multi-pulse sweep around it whose parabola vertex is the optimum.
pub fn cr_amplitude_sweep(backend: &Backend, cfg: &CrSweepConfig, seed: u64) -> Result<CrSweep> {
    if cfg.coarse_points < 3 || cfg.fine_points < 3 {
        return Err(Error::invalid("CR sweeps need at least 3 points"));
    }
    if !(cfg.coarse_hi > cfg.coarse_lo) || !(cfg.fine_half_width > 0.0) {
        return Err(Error::invalid("CR sweep ranges must be non-empty"));
    }
    if cfg.fine_pulses == 0 || cfg.fine_pulses.is_multiple_of(2) {
        return Err(Error::invalid("fine stage needs an odd pulse count"));
    }
    let coarse = r_curve(
        backend,
        linspace(cfg.coarse_lo, cfg.coarse_hi, cfg.coarse_points),
        1,
        cfg.shots,
        derive_seed(seed, 0),
    )?;
    let (peak, _) = coarse
        .r
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty sweep");
    if peak == 0 || peak + 1 == coarse.r.len() {
        return Err(Error::BracketFailed(format!(
            "coarse |R| peaks at the range edge (amp {})",
            coarse.amplitudes[peak]
        )));
    }
    // refine the coarse peak with a parabola through its neighbourhood
    let lo_i = peak.saturating_sub(2);
    let hi_i = (peak + 3).min(coarse.r.len());
    let mut center = coarse.amplitudes[peak];
    if let Ok(p) = fit_parabola(&coarse.amplitudes[lo_i..hi_i], &coarse.r[lo_i..hi_i]) {
        if p.curvature < 0.0 {
            center = p
                .vertex_x
                .clamp(coarse.amplitudes[lo_i], coarse.amplitudes[hi_i - 1]);
        }
    }
    let fine = r_curve(
        backend,
        linspace(
            center - cfg.fine_half_width,
            center + cfg.fine_half_width,
            cfg.fine_points,
        ),
        cfg.fine_pulses,
        cfg.shots,
        derive_seed(seed, 1),
    )?;
    let parabola = fit_parabola(&fine.amplitudes, &fine.r)?;
    let lo = center - cfg.fine_half_width;
    let hi = center + cfg.fine_half_width;
    if !(parabola.curvature < 0.0) || parabola.vertex_x < lo || parabola.vertex_x > hi {
        return Err(Error::FitFailed {
            reason: format!(
                "fine |R| parabola has no interior maximum (curvature {}, vertex {})",
                parabola.curvature, parabola.vertex_x
            ),
            residual: f64::NAN,
        });
    }
    Ok(CrSweep {
        coarse,
        fine,
        optimal_amp: parabola.vertex_x,
        parabola,
    })
}

/// Joint outcome probabilities of both qubits versus the common analysis
/// phase φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XyCurve {
    pub phi: Vec<f64>,
    pub p00: Vec<f64>,
    pub p01: Vec<f64>,
    pub p10: Vec<f64>,
    pub p11: Vec<f64>,
    pub shots: u64,
}

impl XyCurve {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    fn row(&self, i: usize) -> [f64; 4] {
        [self.p00[i], self.p01[i], self.p10[i], self.p11[i]]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phi,p00,p01,p10,p11\n");
        for i in 0..self.len() {
            let [a, b, c, d] = self.row(i);
            writeln!(s, "{},{a},{b},{c},{d}", self.phi[i]).expect("write to String");
        }
        s
    }
}

/// The candidate CNOT: `IZ(θ3)`, one CR pulse, `ZZ(θ1, θ2)`, `IX(θ4)`.
pub fn cnot_gates(cr_amp: f64, angles: &CnotAngles<f64>) -> Vec<Gate> {
    vec![
        Gate::Vz {
            qubit: 1,
            phi: angles.theta3,
        },
        Gate::Cr {
            amp: cr_amp,
            n_pulses: 1,
        },
        Gate::Vz {
            qubit: 0,
            phi: angles.theta1,
        },
        Gate::Vz {
            qubit: 1,
            phi: angles.theta2,
        },
        Gate::Rx {
            qubit: 1,
            theta: angles.theta4,
        },
    ]
}

fn xy_circuit(cr_amp: f64, angles: &CnotAngles<f64>, phi: f64) -> Circuit {
    let mut gates = vec![
        Gate::X90 {
            qubit: 0,
            amp: None,
        },
        Gate::X90 {
            qubit: 1,
            amp: None,
        },
    ];
    gates.extend(cnot_gates(cr_amp, angles));
    gates.extend([
        Gate::Vz { qubit: 0, phi },
        Gate::Vz { qubit: 1, phi },
        Gate::X90 {
            qubit: 0,
            amp: None,
        },
        Gate::X90 {
            qubit: 1,
            amp: None,
        },
        Gate::Measure,
    ]);
    Circuit::new(2, gates)
}

/// Uniform grid of `n` phases over `[0, 2π)`.
pub fn phi_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| TAU * i as f64 / n as f64).collect()
}

/// Both qubits on the equator, the candidate CNOT, a common frame rotation
/// φ and a final X90 on both before the joint readout.
pub fn full_xy_measure(
    backend: &Backend,
    cr_amp: f64,
    current: &CnotAngles<f64>,
    phis: &[f64],
    shots: u64,
    seed: u64,
) -> Result<XyCurve> {
    if phis.is_empty() {
        return Err(Error::invalid("full_xy_measure needs at least one phase"));
    }
    let mut curve = XyCurve {
        phi: phis.to_vec(),
        p00: Vec::with_capacity(phis.len()),
        p01: Vec::with_capacity(phis.len()),
        p10: Vec::with_capacity(phis.len()),
        p11: Vec::with_capacity(phis.len()),
        shots,
    };
    for (i, &phi) in phis.iter().enumerate() {
        let counts = backend.run_circuit(
            &xy_circuit(cr_amp, current, phi),
            shots,
            derive_seed(seed, i as u64),
        )?;
        let f = |k: usize| counts.counts[k] as f64 / shots as f64;
        curve.p00.push(f(0));
        curve.p01.push(f(1));
        curve.p10.push(f(2));
        curve.p11.push(f(3));
    }
    Ok(curve)
}

/// Ideal-gate prediction of the four joint probabilities at phase `phi`
/// when the measured block is `cr_from_cnot(fit)`.
pub fn xy_model(fit: &CnotAngles<f64>, phi: f64) -> Result<[f64; 4]> {
    let x90 = rot_x(FRAC_PI_2)?;
    let x90x90 = tensor(&x90, &x90)?;
    let frame = rot_z(phi)?;
    let u: Unitary<f64> = x90x90 * tensor(&frame, &frame)? * cr_from_cnot(fit)? * x90x90;
    let p = u.apply(&PureState::basis(4, 0)?).probabilities();
    Ok([p[0], p[1], p[2], p[3]])
}

/// Mixes joint outcome probabilities (q0 most significant) with independent
/// symmetric bit flips of probability `eps[q]`.
pub fn apply_readout_error(p: [f64; 4], eps: [f64; 2]) -> [f64; 4] {
    let mut out = p;
    for (q, e) in eps.iter().enumerate() {
        let bit = if q == 0 { 2 } else { 1 };
        let mut next = [0.0; 4];
        for (i, v) in out.iter().enumerate() {
            next[i] += (1.0 - e) * v;
            next[i ^ bit] += e * v;
        }
        out = next;
    }
    out
}

struct XyModel<'a> {
    phis: &'a [f64],
    readout_error: [f64; 2],
}

impl XyModel<'_> {
    fn probs(&self, p: &[f64], x: f64) -> f64 {
        let idx = x as usize;
        let fit = CnotAngles::new(p[0], p[1], p[2], Branch::Primary);
        xy_model(&fit, self.phis[idx / 4]).map_or(f64::NAN, |v| {
            apply_readout_error(v, self.readout_error)[idx % 4]
        })
    }
}

impl CurveModel<f64> for XyModel<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn value(&self, p: &[f64], x: f64) -> f64 {
        self.probs(p, x)
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) {
        const H: f64 = 1e-6;
        let mut q = [p[0], p[1], p[2]];
        for k in 0..3 {
            q[k] = p[k] + H;
            let hi = self.probs(&q, x);
            q[k] = p[k] - H;
            let lo = self.probs(&q, x);
            q[k] = p[k];
            g[k] = (hi - lo) / (2.0 * H);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XyFitOptions {
    /// Number of lattice points kept as LM starting points.
    pub starts: usize,
    /// Lattice points per angle for choosing the starts.
    pub lattice: usize,
    /// Largest acceptable reduced χ².
    pub max_chi2_ndf: f64,
    /// Known per-qubit assignment error folded into the model.
    pub readout_error: [f64; 2],
}

impl Default for XyFitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            lattice: 6,
            max_chi2_ndf: 10.0,
            readout_error: [0.0; 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XyFit {
    /// Fitted block angles θᶠ (θ1 in (−π/2, π/2], others wrapped).
    pub fitted: CnotAngles<f64>,
    /// Standard errors of θ1ᶠ, θ2ᶠ, θ4ᶠ.
    pub fitted_se: [f64; 3],
    pub chi2_ndf: f64,
    /// Updated correction `θ_init − θᶠ` on the primary branch.
    pub primary: CnotAngles<f64>,
    /// The same correction up to a global phase of π/2.
    pub secondary: CnotAngles<f64>,
}

impl XyFit {
    /// Largest wrapped fitted angle; zero for a perfect CNOT.
    pub fn max_abs_fitted(&self) -> f64 {
        [self.fitted.theta1, self.fitted.theta2, self.fitted.theta4]
            .iter()
            .map(|a| wrap_angle(*a).abs())
            .fold(0.0, f64::max)
    }
}

fn in_half_open_quarter(a: f64) -> bool {
    let w = wrap_angle(a);
    w > -FRAC_PI_2 && w <= FRAC_PI_2
}

/// Of a set and its π/2-phase partner, the one whose θ1 lies in
/// (−π/2, π/2], with every angle wrapped.
fn canonical_pair(a: CnotAngles<f64>) -> (CnotAngles<f64>, CnotAngles<f64>) {
    let wrap = |c: CnotAngles<f64>, branch| {
        CnotAngles::new(
            wrap_angle(c.theta1),
            wrap_angle(c.theta2),
            wrap_angle(c.theta4),
            branch,
        )
    };
    let other = a.other_branch();
    let (p, s) = if in_half_open_quarter(a.theta1) {
        (a, other)
    } else {
        (other, a)
    };
    (wrap(p, Branch::Primary), wrap(s, Branch::HalfPiPhase))
}

/// Least squares over (θ1ᶠ, θ2ᶠ, θ4ᶠ) with θ3ᶠ = 2π − θ2ᶠ, from the best
/// points of a coarse angle lattice.
pub fn full_xy_fit(
    curve: &XyCurve,
    current: &CnotAngles<f64>,
    opts: &XyFitOptions,
) -> Result<XyFit> {
    let n = curve.len();
    for v in [&curve.p00, &curve.p01, &curve.p10, &curve.p11] {
        if v.len() != n {
            return Err(Error::invalid("XY curve arrays differ in length"));
        }
    }
    let mut distinct: Vec<f64> = curve.phi.iter().map(|p| p.rem_euclid(TAU)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 12 {
        return Err(Error::invalid(
            "full XY fit needs at least 12 distinct phases",
        ));
    }
    if curve.shots == 0 || opts.starts == 0 || opts.lattice == 0 {
        return Err(Error::invalid("shots, starts and lattice must be positive"));
    }
    if opts.readout_error.iter().any(|e| !(0.0..0.5).contains(e)) {
        return Err(Error::invalid("readout error must be in [0, 0.5)"));
    }
    let x: Vec<f64> = (0..4 * n).map(|i| i as f64).collect();
    let y: Vec<f64> = (0..n).flat_map(|i| curve.row(i)).collect();
    let w: Vec<f64> = y
        .iter()
        .map(|p| {
            let s = binomial_sigma(*p, curve.shots as usize);
            1.0 / (s * s)
        })
        .collect();
    let model = XyModel {
        phis: &curve.phi,
        readout_error: opts.readout_error,
    };
    let chi2 = |p: &[f64]| -> f64 {
        x.iter()
            .zip(&y)
            .zip(&w)
            .map(|((xi, yi), wi)| {
                let r = yi - model.value(p, *xi);
                wi * r * r
            })
            .sum()
    };

    let m = opts.lattice;
    let grid: Vec<f64> = (0..m)
        .map(|i| -PI + TAU * (i as f64 + 0.5) / m as f64)
        .collect();
    let mut lattice: Vec<([f64; 3], f64)> = Vec::with_capacity(m * m * m);
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let p = [a, b, c];
                lattice.push((p, chi2(&p)));
            }
        }
    }
    lattice.sort_by(|a, b| a.1.total_cmp(&b.1));

    let lm_opts = LmOptions {
        max_iter: 200,
        ..LmOptions::default()
    };
    let run = |p0: &[f64]| {
        levenberg_marquardt(&model, &x, &y, &w, p0, &lm_opts)
            .ok()
            .map(|out| (out.params, out.chi2, out.covariance))
    };
    let mut solutions: Vec<_> = lattice
        .iter()
        .take(opts.starts)
        .filter_map(|(p0, _)| run(p0))
        .collect();
    // The curves see θ4 only through sin θ4; refine the mirror partner
    // π − θ4 of every solution so both representatives compete.
    let shifted: Vec<_> = solutions
        .iter()
        .filter_map(|(q, _, _)| run(&[q[0], q[1], PI - q[2]]))
        .collect();
    solutions.extend(shifted);
    let chi2_min = solutions.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    if !chi2_min.is_finite() {
        return Err(Error::FitFailed {
            reason: "no full-XY start converged".into(),
            residual: f64::INFINITY,
        });
    }
    // Among statistically indistinguishable solutions (Δχ² ≤ 1) keep the
    // smallest correction.
    let size = |p: &[f64]| {
        let (c, _) = canonical_pair(CnotAngles::new(p[0], p[1], p[2], Branch::Primary));
        [c.theta1, c.theta2, c.theta4]
            .iter()
            .map(|a| wrap_angle(*a).abs())
            .fold(0.0, f64::max)
    };
    let (p, _, cov) = solutions
        .into_iter()
        .filter(|s| s.1 <= chi2_min + 1.0)
        .min_by(|a, b| size(&a.0).total_cmp(&size(&b.0)))
        .expect("the minimum is in the set");
    // every outcome term is a marginal binomial residual of unit variance
    let ndf = (4 * n).saturating_sub(3).max(1);
    let chi2_ndf = chi2_min / ndf as f64;
    if !(chi2_ndf <= opts.max_chi2_ndf) {
        return Err(Error::FitFailed {
            reason: format!(
                "full-XY reduced chi-square {chi2_ndf:.3} above {}",
                opts.max_chi2_ndf
            ),
            residual: chi2_ndf,
        });
    }
    let se = std_errors(cov.as_ref(), 3, chi2_ndf.max(1.0));
    let (fitted, _) = canonical_pair(CnotAngles::new(p[0], p[1], p[2], Branch::Primary));
    let update = CnotAngles::new(
        current.theta1 - fitted.theta1,
        current.theta2 - fitted.theta2,
        current.theta4 - fitted.theta4,
        Branch::Primary,
    );
    let (primary, secondary) = canonical_pair(update);
    Ok(XyFit {
        fitted,
        fitted_se: [se[0], se[1], se[2]],
        chi2_ndf,
        primary,
        secondary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnotConfig {
    pub sweep: CrSweepConfig,
    pub phi_points: usize,
    pub shots: u64,
    pub fit: XyFitOptions,
    /// Largest wrapped verification angle accepted, rad.
    pub verify_tolerance: f64,
    /// Corrections applied before giving up. The zero-correction curve
    /// cannot resolve the sign of θ4 − (−π/2), which a second round fixes.
    pub max_rounds: usize,
}

impl Default for CnotConfig {
    fn default() -> Self {
        Self {
            sweep: CrSweepConfig::default(),
            phi_points: 24,
            shots: 2000,
            fit: XyFitOptions::default(),
            verify_tolerance: 0.03,
            max_rounds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XyMeasurement {
    pub applied: CnotAngles<f64>,
    pub curve: XyCurve,
    pub fit: XyFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnotCalibration {
    pub cr_amp: f64,
    /// Present when the amplitude search ran as part of the calibration.
    pub sweep: Option<CrSweep>,
    /// Every full-XY measurement in order; the first applies no correction
    /// and the last is the accepted verification.
    pub measurements: Vec<XyMeasurement>,
    /// The correction in use, primary branch.
    pub angles: CnotAngles<f64>,
    pub secondary: CnotAngles<f64>,
    /// Largest wrapped angle of the verification refit.
    pub residual: f64,
}

impl CnotCalibration {
    pub fn verification(&self) -> &XyMeasurement {
        self.measurements.last().expect("at least two measurements")
    }
}

/// CR amplitude search, a full-XY measurement and fit from zero correction,
/// then verification measurements with the correction applied, each
/// feeding its refit back until the refit is within tolerance.
pub fn calibrate_cnot(backend: &Backend, cfg: &CnotConfig, seed: u64) -> Result<CnotCalibration> {
    let sweep = cr_amplitude_sweep(backend, &cfg.sweep, derive_seed(seed, 0))?;
    let mut cal = correct_cnot(backend, sweep.optimal_amp, cfg, seed)?;
    cal.sweep = Some(sweep);
    Ok(cal)
}

/// [`calibrate_cnot`] at a CR amplitude found earlier.
pub fn correct_cnot(
    backend: &Backend,
    amp: f64,
    cfg: &CnotConfig,
    seed: u64,
) -> Result<CnotCalibration> {
    if cfg.max_rounds == 0 {
        return Err(Error::invalid("max_rounds must be at least 1"));
    }
    if !(amp.is_finite() && amp.abs() <= 1.0) {
        return Err(Error::invalid(format!(
            "CR amplitude {amp} outside [-1, 1]"
        )));
    }
    let phis = phi_grid(cfg.phi_points);
    let measure = |applied: CnotAngles<f64>, k: u64| -> Result<XyMeasurement> {
        let curve = full_xy_measure(
            backend,
            amp,
            &applied,
            &phis,
            cfg.shots,
            derive_seed(seed, 1 + k),
        )?;
        let fit = full_xy_fit(&curve, &applied, &cfg.fit)?;
        Ok(XyMeasurement {
            applied,
            curve,
            fit,
        })
    };
    let mut measurements = vec![measure(CnotAngles::zero(), 0)?];
    let mut residual = f64::INFINITY;
    for round in 1..=cfg.max_rounds {
        let applied = measurements.last().expect("non-empty").fit.primary;
        let m = measure(applied, round as u64)?;
        residual = m.fit.max_abs_fitted();
        log::debug!("cnot round {round}: residual {residual:.4} rad");
        measurements.push(m);
        if residual <= cfg.verify_tolerance {
            break;
        }
    }
    if residual > cfg.verify_tolerance {
        return Err(Error::CalibrationFailed(format!(
            "verification refit leaves {residual:.4} rad after {} rounds (tolerance {})",
            cfg.max_rounds, cfg.verify_tolerance
        )));
    }
    let last = measurements.last().expect("non-empty");
    let angles = last.applied;
    let (_, secondary) = canonical_pair(angles);
    Ok(CnotCalibration {
        cr_amp: amp,
        sweep: None,
        angles,
        secondary,
        residual,
        measurements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmatrix::{cnot, cnot_from_cr};
    use crate::simdev::{DeviceTruth, GateCalibration};

    /// Backend whose single-qubit gates are calibrated to the truth.
    fn calibrated(mut truth: DeviceTruth) -> Backend {
        for q in &mut truth.qubits {
            q.readout_floor = q.readout_floor.min(1.0);
        }
        let mut b = Backend::new(truth).unwrap();
        for q in 0..2 {
            let t = b.get_truth_for_test().qubits[q].clone();
            let a = t.x90_amplitude(b.pulse_ns());
            b.set_calibration(
                q,
                GateCalibration {
                    f_q: t.f_q_true,
                    x90_amp: a,
                    x180_amp: 2.0 * a,
                },
            )
            .unwrap();
        }
        b
    }

    fn noiseless_readout() -> DeviceTruth {
        let mut t = DeviceTruth::default();
        for q in &mut t.qubits {
            q.readout_floor = 0.0;
        }
        t
    }

    #[test]
    fn echo_scan_finds_qubit_frequency() {
        let truth = DeviceTruth::default();
        let f0 = truth.qubits[0].f_q_true;
        let mut b = calibrated(truth);
        // amplitude error must not move the minimum
        let mut cal = b.calibration(0);
        cal.x90_amp *= 1.03;
        b.set_calibration(0, cal).unwrap();
        let coarse: Vec<f64> = (0..21)
            .map(|i| f0 + 0.0006 + 1e-4 * (i as f64 - 10.0))
            .collect();
        let c = echo_detuning_scan(&b, 0, 4, &coarse, 1000, 3).unwrap();
        assert!(
            (c.optimum - f0).abs() < 1.5e-4,
            "{}",
            (c.optimum - f0) * 1e3
        );
        let fine: Vec<f64> = (0..21)
            .map(|i| c.optimum + 2e-5 * (i as f64 - 10.0))
            .collect();
        let f = echo_detuning_scan(&b, 0, 16, &fine, 1000, 4).unwrap();
        assert!(
            (f.optimum - f0).abs() < 3e-5,
            "{} MHz",
            (f.optimum - f0) * 1e3
        );
        assert_eq!(f.to_csv().lines().count(), 22);
    }

    #[test]
    fn stack_counts_are_checked() {
        let b = calibrated(DeviceTruth::default());
        assert!(stack_scan(&b, 0, StackGate::X90, 6, &[0.4, 0.42], 10, 0).is_err());
        assert!(stack_scan(&b, 0, StackGate::X180, 3, &[0.8], 10, 0).is_err());
        assert!(stack_scan(&b, 0, StackGate::X90, 0, &[0.4], 10, 0).is_err());
    }

    #[test]
    fn assignment_error_matches_the_floor() {
        let b = calibrated(DeviceTruth::default());
        let e = readout_assignment_error(&b, 1, 100_000, 2).unwrap();
        let floor = b.get_truth_for_test().qubits[1].readout_floor;
        // 3σ of the mean of two binomial estimates
        assert!(
            (e - floor).abs() < 3.0 * (floor * (1.0 - floor) / 200_000.0).sqrt(),
            "{e}"
        );
    }

    #[test]
    fn readout_error_model_preserves_normalization() {
        let p = apply_readout_error([0.1, 0.2, 0.3, 0.4], [0.02, 0.05]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(
            apply_readout_error([1.0, 0.0, 0.0, 0.0], [0.0, 0.0]),
            [1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn stacking_finds_the_truth_amplitude() {
        let b = calibrated(DeviceTruth::default());
        let target = b.get_truth_for_test().qubits[0].x90_amplitude(b.pulse_ns());
        let amps = linspace(0.38, 0.46, 41);
        let s = stack_scan(&b, 0, StackGate::X90, 16, &amps, 400, 3).unwrap();
        assert!(
            (s.optimum - target).abs() < 0.002,
            "{} vs {target}",
            s.optimum
        );
        let s2 = stack_scan(&b, 0, StackGate::X90, 16, &amps, 800, 3).unwrap();
        assert!((s2.optimum - s.optimum).abs() < 0.002);
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), amps.len() + 1);
    }

    #[test]
    fn doubling_the_stack_halves_the_fringe() {
        let b = calibrated(DeviceTruth::default());
        let amps = linspace(0.30, 0.54, 61);
        let s8 = stack_scan(&b, 0, StackGate::X90, 8, &amps, 400, 1).unwrap();
        let s16 = stack_scan(&b, 0, StackGate::X90, 16, &amps, 400, 1).unwrap();
        let ratio = s8.fringe_spacing() / s16.fringe_spacing();
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn calibrated_stack_returns_to_ground() {
        let b = calibrated(DeviceTruth::default());
        let a = b.calibration(0).x90_amp;
        let p = b
            .outcome_probabilities(&Circuit::new(
                1,
                vec![
                    Gate::X90 {
                        qubit: 0,
                        amp: Some(a)
                    };
                    16
                ],
            ))
            .unwrap();
        assert!((p[1] - b.get_truth_for_test().qubits[0].readout_floor).abs() < 1e-9);
    }

    #[test]
    fn basis_changes_measure_the_right_axis() {
        let b = calibrated(noiseless_readout());
        // rotate the target to a generic state, then compare with the exact Bloch vector
        let prep = [
            Gate::Rx {
                qubit: 1,
                theta: 1.1,
            },
            Gate::Vz { qubit: 1, phi: 0.7 },
        ];
        let psi = b.circuit_state(&Circuit::new(2, prep.to_vec())).unwrap();
        let exact = psi.bloch(1);
        for (axis, want) in [(Axis::X, exact.x), (Axis::Y, exact.y), (Axis::Z, exact.z)] {
            let mut g = prep.to_vec();
            g.extend(basis_change(axis));
            let p = b.outcome_probabilities(&Circuit::new(2, g)).unwrap();
            let e = 1.0 - 2.0 * (p[1] + p[3]);
            assert!((e - want).abs() < 1e-9, "{axis:?}: {e} vs {want}");
        }
    }

    #[test]
    fn r_length_matches_analytic_cr() {
        let b = calibrated(noiseless_readout());
        let rate = b.get_truth_for_test().cr_zx_rate;
        for amp in [0.0, 0.1, 0.3, 0.52, 0.8] {
            let r = cr_r_exact(&b, amp, 1).unwrap();
            assert!(
                (r - (rate * amp).sin().abs()).abs() < 1e-9,
                "amp {amp}: {r}"
            );
            let r3 = cr_r_exact(&b, amp, 3).unwrap();
            assert!((r3 - (3.0 * rate * amp).sin().abs()).abs() < 1e-9);
        }
        let peak = FRAC_PI_2 / rate;
        let t = cr_tomography(&b, peak, 1, 2000, 5).unwrap();
        assert!((t.r - 1.0).abs() < 0.05);
        assert!(cr_tomography(&b, 0.0, 1, 2000, 5).unwrap().r < 0.1);
    }

    #[test]
    fn three_pulses_sharpen_the_peak() {
        let b = calibrated(noiseless_readout());
        let peak = FRAC_PI_2 / b.get_truth_for_test().cr_zx_rate;
        let d = 0.05;
        let one = cr_r_exact(&b, peak + d, 1).unwrap();
        let three = cr_r_exact(&b, peak + d, 3).unwrap();
        assert!(three < one);
    }

    #[test]
    fn sweep_recovers_the_per_pulse_quarter_turn() {
        let mut truth = DeviceTruth::default();
        // three pulses at rate 1.2 reach π/2 where one pulse at 3.6 does
        truth.cr_zx_rate = 3.6;
        let b = calibrated(truth);
        let target = FRAC_PI_2 / (3.0 * 1.2);
        let cfg = CrSweepConfig::default();
        let s = cr_amplitude_sweep(&b, &cfg, 4).unwrap();
        assert!(
            (s.optimal_amp / target - 1.0).abs() < 0.01,
            "{} vs {target}",
            s.optimal_amp
        );
        assert_eq!(
            s.to_csv().lines().count(),
            1 + cfg.coarse_points + cfg.fine_points
        );
    }

    #[test]
    fn monotone_coarse_sweep_is_a_bracket_failure() {
        let b = calibrated(DeviceTruth::default());
        let cfg = CrSweepConfig {
            coarse_lo: 0.0,
            coarse_hi: 0.3,
            ..CrSweepConfig::default()
        };
        assert!(matches!(
            cr_amplitude_sweep(&b, &cfg, 0),
            Err(Error::BracketFailed(_))
        ));
    }

    #[test]
    fn symmetric_data_puts_vertex_at_center() {
        let x = linspace(0.4, 0.6, 11);
        let y: Vec<f64> = x
            .iter()
            .map(|a| 1.0 - (a - 0.5f64).powi(2) * 30.0)
            .collect();
        assert!((fit_parabola(&x, &y).unwrap().vertex_x - 0.5).abs() < 1e-12);
    }

    fn synthesize(fit: &CnotAngles<f64>, n: usize) -> XyCurve {
        let phi = phi_grid(n);
        let rows: Vec<[f64; 4]> = phi.iter().map(|p| xy_model(fit, *p).unwrap()).collect();
        XyCurve {
            p00: rows.iter().map(|r| r[0]).collect(),
            p01: rows.iter().map(|r| r[1]).collect(),
            p10: rows.iter().map(|r| r[2]).collect(),
            p11: rows.iter().map(|r| r[3]).collect(),
            phi,
            shots: 100_000,
        }
    }

    fn angle_close(a: f64, b: f64, tol: f64) -> bool {
        wrap_angle(a - b).abs() < tol
    }

    #[test]
    fn self_synthesis_recovers_angles() {
        let truth = CnotAngles::new(0.4, 5.9, 0.25, Branch::Primary);
        let fit = full_xy_fit(
            &synthesize(&truth, 24),
            &CnotAngles::zero(),
            &XyFitOptions::default(),
        )
        .unwrap();
        let (want, _) = canonical_pair(truth);
        assert!(angle_close(fit.fitted.theta1, want.theta1, 1e-3), "{fit:?}");
        assert!(angle_close(fit.fitted.theta2, want.theta2, 1e-3), "{fit:?}");
        assert!(angle_close(fit.fitted.theta4, want.theta4, 1e-3), "{fit:?}");
        assert!(fit.chi2_ndf < 1e-6);
    }

    #[test]
    fn ideal_cnot_fits_to_zero() {
        let fit = full_xy_fit(
            &synthesize(&CnotAngles::zero(), 16),
            &CnotAngles::zero(),
            &XyFitOptions::default(),
        )
        .unwrap();
        assert!(fit.max_abs_fitted() < 1e-6, "{fit:?}");
    }

    #[test]
    fn branches_differ_by_quarter_turn_phase() {
        let truth = CnotAngles::new(0.4, 5.9, 0.25, Branch::Primary);
        let fit = full_xy_fit(
            &synthesize(&truth, 24),
            &CnotAngles::zero(),
            &XyFitOptions::default(),
        )
        .unwrap();
        for a in [fit.primary, fit.secondary] {
            assert!(a.constraint_residual() < 1e-9);
        }
        let cr = cr_from_cnot(&truth).unwrap();
        let u1 = cnot_from_cr(&cr, &fit.primary).unwrap();
        let u2 = cnot_from_cr(&cr, &fit.secondary).unwrap();
        assert!(u1.phase_overlap(&cnot()) > 1.0 - 1e-6);
        assert!(u2.phase_overlap(&cnot()) > 1.0 - 1e-6);
        let rel = wrap_angle(u1.relative_phase(&u2));
        assert!((rel.abs() - FRAC_PI_2).abs() < 1e-6, "{rel}");
        assert!(in_half_open_quarter(fit.primary.theta1));
    }

    #[test]
    fn too_few_phases_is_invalid() {
        let c = synthesize(&CnotAngles::zero(), 8);
        assert!(matches!(
            full_xy_fit(&c, &CnotAngles::zero(), &XyFitOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_phase_measurement_has_length_one() {
        let b = calibrated(DeviceTruth::default());
        let c = full_xy_measure(&b, 0.5, &CnotAngles::zero(), &[0.3], 100, 0).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.p00[0] + c.p01[0] + c.p10[0] + c.p11[0] - 1.0).abs() < 1e-9);
        assert_eq!(c.to_csv().lines().count(), 2);
    }

    #[test]
    fn device_curve_matches_matrix_oracle() {
        let b = calibrated(noiseless_readout());
        let t = b.get_truth_for_test();
        let amp = FRAC_PI_2 / t.cr_zx_rate;
        let [a1, a2, _, a4] = t.cr_spurious;
        // the device block equals the correction-wrapped CR form at these angles
        let implied = CnotAngles::new(a1 + FRAC_PI_2, a2, a4 + FRAC_PI_2, Branch::Primary);
        let phis = phi_grid(16);
        let c = full_xy_measure(&b, amp, &CnotAngles::zero(), &phis, 2000, 9).unwrap();
        for (i, phi) in phis.iter().enumerate() {
            let m = xy_model(&implied, *phi).unwrap();
            for (k, p) in c.row(i).iter().enumerate() {
                let s = (m[k] * (1.0 - m[k]) / 2000.0).sqrt().max(1.0 / 4000.0);
                assert!(
                    (p - m[k]).abs() <= 4.0 * s,
                    "phi {phi} k {k}: {p} vs {}",
                    m[k]
                );
            }
        }
    }

    #[test]
    fn calibration_leaves_small_residual() {
        let b = calibrated(DeviceTruth::default());
        let mut cfg = CnotConfig::default();
        for q in 0..2 {
            cfg.fit.readout_error[q] = readout_assignment_error(&b, q, 20_000, 3).unwrap();
        }
        let cal = calibrate_cnot(&b, &cfg, 21).unwrap();
        assert!(cal.residual < 0.03, "{cal:?}");
        assert!(cal.angles.constraint_residual() < 1e-9);
        let t = b.get_truth_for_test();
        assert!((cal.cr_amp * t.cr_zx_rate / FRAC_PI_2 - 1.0).abs() < 0.01);
    }

    #[test]
    fn no_spurious_rotation_needs_no_correction_beyond_the_cr_frame() {
        let mut truth = noiseless_readout();
        truth.cr_spurious = [0.0, 0.0, TAU, 0.0];
        let b = calibrated(truth);
        let amp = FRAC_PI_2 / b.get_truth_for_test().cr_zx_rate;
        let c = full_xy_measure(&b, amp, &CnotAngles::zero(), &phi_grid(24), 20_000, 2).unwrap();
        let fit = full_xy_fit(&c, &CnotAngles::zero(), &XyFitOptions::default()).unwrap();
        // only the intrinsic ZX(π/2) frame remains: (−π/2, 0, −π/2) up to branch
        let want = CnotAngles::new(-FRAC_PI_2, 0.0, -FRAC_PI_2, Branch::Primary);
        let (p, s) = canonical_pair(want);
        let close = |a: &CnotAngles<f64>| {
            angle_close(a.theta1, fit.primary.theta1, 0.03)
                && angle_close(a.theta2, fit.primary.theta2, 0.03)
                && angle_close(a.theta4, fit.primary.theta4, 0.03)
        };
        assert!(close(&p) || close(&s), "{fit:?}");
    }
}
