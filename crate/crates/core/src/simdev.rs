//! Simulated two-transmon device with dispersive readout.
//!
//! The backend owns hidden [`DeviceTruth`]. Calibration code drives it only
//! through [`Backend::rabi_scan`] and [`Backend::run_circuit`]; the truth is
//! reachable from outside solely via [`Backend::get_truth_for_test`].
//!
//! Units: frequencies in GHz, drive rates and linewidths in MHz, times in ns.
//!
//! Drive model. With `Ω = rabi_rate·a_r` and `Δ = f_q − f_q_true` (both as
//! 1/ns), `Ω' = √(Ω² + Δ²)` and the excited population after a square pulse
//! of width `t` is
//!
//! ```text
//! P₁(t) = (Ω²/Ω'²) · ½ · (1 − e^{−τt} · cos 2πΩ't)
//! ```
//!
//! which is exactly `C + A·e^{−τt}·sin(2πft + φ₀)` with `C = A = Ω²/2Ω'²`,
//! `f = Ω'`, `φ₀ = −π/2`. In circuits the same drive is a rotation by
//! `2πΩ'T` about the Bloch axis `(Ω, 0, Δ)/Ω'`.
//!
//! Readout. The prepared state is flipped with probability `readout_floor`,
//! a shot leaks to `|2⟩` with probability `leak_rate·max(0, a_r − thr)²`, and
//! the IQ point is Gaussian around the state's center. Centers are scaled
//! about the `|0⟩`/`|1⟩` midpoint by `readout_amp` times the Lorentzian
//! resonator response `1/(1 + ((f_r − f_r_true)/linewidth)²)`.
//!
//! Every width (or circuit) draws from its own ChaCha stream keyed by the
//! seed and its index, so results do not depend on evaluation order.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::IqPoint;
use crate::error::{Error, Result};
use crate::qmatrix::{
    self, build_correction, tensor, zx_rotation, CorrectionKind, PureState, Unitary,
};

/// Per-qubit hidden parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitTruth {
    pub f_q_true: f64,
    pub f_r_true: f64,
    /// MHz per unit drive amplitude.
    pub rabi_rate: f64,
    /// 1/ns
    pub tau_decay: f64,
    /// MHz
    pub resonator_linewidth: f64,
    pub iq_center_0: IqPoint<f64>,
    pub iq_center_1: IqPoint<f64>,
    pub iq_center_2: IqPoint<f64>,
    pub iq_sigma: f64,
    pub leak_amp_threshold: f64,
    pub leak_rate: f64,
    pub readout_floor: f64,
}

impl QubitTruth {
    fn validate(&self, label: &str) -> Result<()> {
        let positive = [
            ("f_q_true", self.f_q_true),
            ("f_r_true", self.f_r_true),
            ("rabi_rate", self.rabi_rate),
            ("tau_decay", self.tau_decay),
            ("resonator_linewidth", self.resonator_linewidth),
            ("iq_sigma", self.iq_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{label}.{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.leak_rate >= 0.0 && self.leak_rate.is_finite()) {
            return Err(Error::Config(format!(
                "{label}.leak_rate must be non-negative"
            )));
        }
        if !(self.leak_amp_threshold > 0.0 && self.leak_amp_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "{label}.leak_amp_threshold must be in (0, 1]"
            )));
        }
        if !(0.0..=0.2).contains(&self.readout_floor) {
            return Err(Error::Config(format!(
                "{label}.readout_floor must be in [0, 0.2]"
            )));
        }
        for p in [self.iq_center_0, self.iq_center_1, self.iq_center_2] {
            if !(p.i.is_finite() && p.q.is_finite()) {
                return Err(Error::Config(format!("{label}: IQ centers must be finite")));
            }
        }
        Ok(())
    }

    /// Drive amplitude that rotates by π/2 in `pulse_ns` on resonance.
    pub fn x90_amplitude(&self, pulse_ns: f64) -> f64 {
        1.0 / (4.0 * pulse_ns * self.rabi_rate * 1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTruth {
    /// Control (index 0) and target (index 1).
    pub qubits: [QubitTruth; 2],
    /// Width of the X90 and X180 pulses, ns.
    pub pulse_ns: f64,
    /// ZX rotation per unit CR amplitude per pulse, rad.
    pub cr_zx_rate: f64,
    /// Hidden `(θ₁*, θ₂*, θ₃*, θ₄*)` of one CR pulse:
    /// `ZZ(θ₁*, θ₂*)·IX(θ₄*)·exp(−iθ/2·ZX)·IZ(θ₃*)`, with `θ₂* + θ₃* = 2π`.
    pub cr_spurious: [f64; 4],
}

impl Default for DeviceTruth {
    fn default() -> Self {
        let q = |f_q: f64, f_r: f64, rate: f64| QubitTruth {
            f_q_true: f_q,
            f_r_true: f_r,
            rabi_rate: rate,
            tau_decay: 0.002,
            resonator_linewidth: 1.0,
            iq_center_0: IqPoint::new(-1.0, 0.0),
            iq_center_1: IqPoint::new(1.0, 0.0),
            iq_center_2: IqPoint::new(0.2, 1.4),
            iq_sigma: 0.3,
            leak_amp_threshold: 0.6,
            leak_rate: 1.0,
            readout_floor: 0.01,
        };
        Self {
            qubits: [q(5.1, 7.2, 18.6), q(4.9, 7.05, 20.0)],
            pulse_ns: 32.0,
            cr_zx_rate: 3.0,
            cr_spurious: [0.3, 0.5, TAU - 0.5, 0.2],
        }
    }
}

impl DeviceTruth {
    pub fn validate(&self) -> Result<()> {
        self.qubits[0].validate("qubits[0]")?;
        self.qubits[1].validate("qubits[1]")?;
        if !(self.pulse_ns > 0.0) || (self.pulse_ns / 4.0).fract() != 0.0 {
            return Err(Error::Config(
                "pulse_ns must be a positive multiple of 4".into(),
            ));
        }
        if !(self.cr_zx_rate > 0.0 && self.cr_zx_rate.is_finite()) {
            return Err(Error::Config("cr_zx_rate must be positive".into()));
        }
        if self.cr_spurious.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("cr_spurious must be finite".into()));
        }
        let [_, t2, t3, _] = self.cr_spurious;
        if (t2 + t3 - TAU).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "cr_spurious must satisfy θ2 + θ3 = 2π (got {})",
                t2 + t3
            )));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let t: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// Control settings for one qubit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitBias {
    pub f_q: f64,
    pub f_r: f64,
    pub a_r: f64,
    pub readout_amp: f64,
}

impl QubitBias {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_q > 0.0 && self.f_q.is_finite() && self.f_r > 0.0 && self.f_r.is_finite()) {
            return Err(Error::invalid("bias frequencies must be positive"));
        }
        if !(0.0..=1.0).contains(&self.a_r) {
            return Err(Error::invalid(format!(
                "a_r must be in [0, 1], got {}",
                self.a_r
            )));
        }
        if !(self.readout_amp >= 0.0 && self.readout_amp.is_finite()) {
            return Err(Error::invalid("readout_amp must be non-negative"));
        }
        Ok(())
    }
}

/// IQ shots of one Rabi scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotBatch {
    pub qubit: usize,
    pub bias: QubitBias,
    pub seed: u64,
    pub shots: usize,
    pub widths: Vec<f64>,
    /// `iq[w]` holds the `shots` points of `widths[w]`.
    pub iq: Vec<Vec<IqPoint<f64>>>,
}

impl ShotBatch {
    pub fn all_points(&self) -> Vec<IqPoint<f64>> {
        self.iq.iter().flatten().copied().collect()
    }
}

/// Per-qubit gate settings used by circuits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateCalibration {
    pub f_q: f64,
    pub x90_amp: f64,
    pub x180_amp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum Gate {
    /// `amp: None` uses the calibrated amplitude.
    X90 {
        qubit: usize,
        amp: Option<f64>,
    },
    X180 {
        qubit: usize,
        amp: Option<f64>,
    },
    /// Physical X rotation built from two X90 pulses and virtual Z frames.
    Rx {
        qubit: usize,
        theta: f64,
    },
    /// Virtual Z: an exact frame change, `R_Z(φ)`.
    Vz {
        qubit: usize,
        phi: f64,
    },
    /// `n_pulses` back-to-back CR pulses, control 0 → target 1.
    Cr {
        amp: f64,
        n_pulses: u32,
    },
    /// Terminal measurement of every qubit.
    Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub n_qubits: usize,
    pub gates: Vec<Gate>,
}

impl Circuit {
    pub fn new(n_qubits: usize, gates: Vec<Gate>) -> Self {
        Self { n_qubits, gates }
    }
}

/// Outcome histogram; index bits are `(q0 q1)` with q0 most significant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_qubits: usize,
    pub shots: u64,
    pub counts: Vec<u64>,
}

impl Counts {
    /// Fraction of shots with outcome string `s`, e.g. `"10"`.
    pub fn probability(&self, s: &str) -> Result<f64> {
        if s.len() != self.n_qubits || !s.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::invalid(format!("bad outcome string {s:?}")));
        }
        let idx = usize::from_str_radix(s, 2).expect("validated binary");
        Ok(self.counts[idx] as f64 / self.shots as f64)
    }

    /// Fraction of shots in which `qubit` read 1.
    pub fn p1(&self, qubit: usize) -> f64 {
        let shift = self.n_qubits - 1 - qubit;
        let ones: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(i, _)| (i >> shift) & 1 == 1)
            .map(|(_, c)| *c)
            .sum();
        ones as f64 / self.shots as f64
    }
}

#[derive(Debug, Clone)]
pub struct Backend {
    truth: DeviceTruth,
    calibration: [GateCalibration; 2],
}

fn lorentzian(x: f64) -> f64 {
    1.0 / (1.0 + x * x)
}

fn embed(u: &Unitary<f64>, qubit: usize, n_qubits: usize) -> Result<Unitary<f64>> {
    match (n_qubits, qubit) {
        (1, 0) => Ok(*u),
        (2, 0) => tensor(u, &Unitary::identity(2)),
        (2, 1) => tensor(&Unitary::identity(2), u),
        _ => Err(Error::invalid(format!(
            "qubit {qubit} not in a {n_qubits}-qubit circuit"
        ))),
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Backend {
    /// Backend with gates initially calibrated to the nominal frequencies and
    /// a naive π/2 amplitude of 0.5.
    pub fn new(truth: DeviceTruth) -> Result<Self> {
        truth.validate()?;
        let nominal = |q: &QubitTruth| GateCalibration {
            f_q: q.f_q_true,
            x90_amp: 0.5,
            x180_amp: 1.0,
        };
        let calibration = [nominal(&truth.qubits[0]), nominal(&truth.qubits[1])];
        Ok(Self { truth, calibration })
    }

    pub fn get_truth_for_test(&self) -> &DeviceTruth {
        &self.truth
    }

    pub fn set_truth(&mut self, truth: DeviceTruth) -> Result<()> {
        truth.validate()?;
        self.truth = truth;
        Ok(())
    }

    pub fn pulse_ns(&self) -> f64 {
        self.truth.pulse_ns
    }

    pub fn calibration(&self, qubit: usize) -> GateCalibration {
        self.calibration[qubit]
    }

    pub fn set_calibration(&mut self, qubit: usize, cal: GateCalibration) -> Result<()> {
        if qubit > 1 {
            return Err(Error::invalid(format!("no qubit {qubit}")));
        }
        if !(cal.f_q > 0.0) || cal.x90_amp.abs() > 1.0 || cal.x180_amp.abs() > 1.0 {
            return Err(Error::invalid("calibration out of range"));
        }
        self.calibration[qubit] = cal;
        Ok(())
    }

    fn qubit(&self, q: usize) -> Result<&QubitTruth> {
        self.truth
            .qubits
            .get(q)
            .ok_or_else(|| Error::invalid(format!("no qubit {q}")))
    }

    /// `(Ω, Δ)` in 1/ns for a drive at `f_q` with amplitude `amp`.
    fn drive(&self, q: usize, f_q: f64, amp: f64) -> Result<(f64, f64)> {
        let t = self.qubit(q)?;
        Ok((t.rabi_rate * 1e-3 * amp, f_q - t.f_q_true))
    }

    /// Analytic excited population before readout errors.
    pub fn excited_population(&self, q: usize, bias: &QubitBias, width: f64) -> Result<f64> {
        let (om, de) = self.drive(q, bias.f_q, bias.a_r)?;
        let om2 = om * om + de * de;
        if om2 == 0.0 {
            return Ok(0.0);
        }
        let omp = om2.sqrt();
        let tau = self.qubit(q)?.tau_decay;
        Ok(om * om / om2 * 0.5 * (1.0 - (-tau * width).exp() * (TAU * omp * width).cos()))
    }

    /// Per-shot leakage probability at drive amplitude `a_r`.
    pub fn leak_probability(&self, q: usize, a_r: f64) -> Result<f64> {
        let t = self.qubit(q)?;
        let x = (a_r - t.leak_amp_threshold).max(0.0);
        Ok((t.leak_rate * x * x).min(1.0))
    }

    /// Effective IQ centers for `|0⟩, |1⟩, |2⟩` under a readout setting.
    pub fn iq_centers(&self, q: usize, bias: &QubitBias) -> Result<[IqPoint<f64>; 3]> {
        let t = self.qubit(q)?;
        let s =
            bias.readout_amp * lorentzian((bias.f_r - t.f_r_true) * 1e3 / t.resonator_linewidth);
        let mid = IqPoint::new(
            0.5 * (t.iq_center_0.i + t.iq_center_1.i),
            0.5 * (t.iq_center_0.q + t.iq_center_1.q),
        );
        let scale =
            |c: IqPoint<f64>| IqPoint::new(mid.i + s * (c.i - mid.i), mid.q + s * (c.q - mid.q));
        Ok([
            scale(t.iq_center_0),
            scale(t.iq_center_1),
            scale(t.iq_center_2),
        ])
    }

    /// IQ shots of a Rabi scan on `qubit`.
    pub fn rabi_scan(
        &self,
        qubit: usize,
        bias: &QubitBias,
        widths: &[f64],
        shots: usize,
        seed: u64,
    ) -> Result<ShotBatch> {
        bias.validate()?;
        let t = self.qubit(qubit)?;
        if shots == 0 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        for &w in widths {
            if !(w >= 0.0) || (w / 4.0).fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "width {w} ns is not a multiple of 4 ns"
                )));
            }
        }
        let centers = self.iq_centers(qubit, bias)?;
        let p_leak = self.leak_probability(qubit, bias.a_r)?;
        let sigma = t.iq_sigma;
        let mut iq = Vec::with_capacity(widths.len());
        for (wi, &w) in widths.iter().enumerate() {
            let p1 = self.excited_population(qubit, bias, w)?;
            let mut rng = stream_rng(seed, ((qubit as u64) << 32) | wi as u64);
            let pts = (0..shots)
                .map(|_| {
                    let leaked = rng.gen::<f64>() < p_leak;
                    let excited = rng.gen::<f64>() < p1;
                    let flip = rng.gen::<f64>() < t.readout_floor;
                    let state = if leaked {
                        2
                    } else {
                        usize::from(excited != flip)
                    };
                    let ni: f64 = rng.sample(StandardNormal);
                    let nq: f64 = rng.sample(StandardNormal);
                    IqPoint::new(centers[state].i + sigma * ni, centers[state].q + sigma * nq)
                })
                .collect();
            iq.push(pts);
        }
        Ok(ShotBatch {
            qubit,
            bias: *bias,
            seed,
            shots,
            widths: widths.to_vec(),
            iq,
        })
    }

    /// Physical single-qubit drive of width `pulse_ns` at amplitude `amp`.
    fn drive_unitary(&self, q: usize, amp: f64) -> Result<Unitary<f64>> {
        let (om, de) = self.drive(q, self.calibration[q].f_q, amp)?;
        let omp = (om * om + de * de).sqrt();
        if omp == 0.0 {
            return Ok(Unitary::identity(2));
        }
        qmatrix::rot_axis(om, 0.0, de, TAU * omp * self.truth.pulse_ns)
    }

    /// One CR pulse as the device realizes it.
    fn cr_pulse(&self, amp: f64) -> Result<Unitary<f64>> {
        let [t1, t2, t3, t4] = self.truth.cr_spurious;
        let zz = build_correction(CorrectionKind::ZZ, &[t1, t2])?;
        let ix = build_correction(CorrectionKind::IX, &[t4])?;
        let iz = build_correction(CorrectionKind::IZ, &[t3])?;
        Ok(zz * ix * zx_rotation(self.truth.cr_zx_rate * amp)? * iz)
    }

    /// The unitary the device applies for `gate` in an `n_qubits` register.
    pub fn gate_unitary(&self, gate: &Gate, n_qubits: usize) -> Result<Unitary<f64>> {
        let check_amp = |a: f64| {
            if a.is_finite() && a.abs() <= 1.0 {
                Ok(a)
            } else {
                Err(Error::invalid(format!(
                    "drive amplitude {a} outside [-1, 1]"
                )))
            }
        };
        match *gate {
            Gate::X90 { qubit, amp } => {
                let q = *self
                    .calibration
                    .get(qubit)
                    .ok_or_else(|| Error::invalid("no such qubit"))?;
                let a = check_amp(amp.unwrap_or(q.x90_amp))?;
                embed(&self.drive_unitary(qubit, a)?, qubit, n_qubits)
            }
            Gate::X180 { qubit, amp } => {
                let q = *self
                    .calibration
                    .get(qubit)
                    .ok_or_else(|| Error::invalid("no such qubit"))?;
                let a = check_amp(amp.unwrap_or(q.x180_amp))?;
                embed(&self.drive_unitary(qubit, a)?, qubit, n_qubits)
            }
            Gate::Rx { qubit, theta } => {
                if !theta.is_finite() {
                    return Err(Error::invalid("Rx angle must be finite"));
                }
                let mut u = Unitary::identity(if n_qubits == 2 { 4 } else { 2 });
                for g in rx_decomposition(qubit, theta) {
                    u = self.gate_unitary(&g, n_qubits)? * u;
                }
                Ok(u)
            }
            Gate::Vz { qubit, phi } => embed(&qmatrix::rot_z(phi)?, qubit, n_qubits),
            Gate::Cr { amp, n_pulses } => {
                if n_qubits != 2 {
                    return Err(Error::invalid("CR needs a two-qubit circuit"));
                }
                if !amp.is_finite() {
                    return Err(Error::invalid("CR amplitude must be finite"));
                }
                let p = self.cr_pulse(amp)?;
                let mut u = Unitary::identity(4);
                for _ in 0..n_pulses {
                    u = p * u;
                }
                Ok(u)
            }
            Gate::Measure => Err(Error::invalid("measure has no unitary")),
        }
    }

    /// Final state of `circuit` from `|0…0⟩`. `Measure` may only close the
    /// circuit.
    pub fn circuit_state(&self, circuit: &Circuit) -> Result<PureState<f64>> {
        let n = circuit.n_qubits;
        if n != 1 && n != 2 {
            return Err(Error::invalid("circuits act on 1 or 2 qubits"));
        }
        let mut psi = PureState::basis(1 << n, 0)?;
        let mut measured = false;
        for g in &circuit.gates {
            if measured {
                return Err(Error::invalid("gate after measurement"));
            }
            if let Gate::Measure = g {
                measured = true;
                continue;
            }
            psi = self.gate_unitary(g, n)?.apply(&psi);
        }
        Ok(psi)
    }

    /// Outcome probabilities including assignment error.
    pub fn outcome_probabilities(&self, circuit: &Circuit) -> Result<Vec<f64>> {
        let ideal = self.circuit_state(circuit)?.probabilities();
        Ok(self.apply_assignment_error(&ideal, circuit.n_qubits))
    }

    fn apply_assignment_error(&self, p: &[f64], n: usize) -> Vec<f64> {
        let mut out = p.to_vec();
        for q in 0..n {
            let eps = self.truth.qubits[q].readout_floor;
            let bit = 1 << (n - 1 - q);
            let mut next = vec![0.0; out.len()];
            for (i, v) in out.iter().enumerate() {
                next[i] += (1.0 - eps) * v;
                next[i ^ bit] += eps * v;
            }
            out = next;
        }
        out
    }

    /// Samples `shots` joint outcomes of `circuit`.
    pub fn run_circuit(&self, circuit: &Circuit, shots: u64, seed: u64) -> Result<Counts> {
        if shots == 0 {
            return Err(Error::invalid("shots must be at least 1"));
        }
        let p = self.outcome_probabilities(circuit)?;
        let mut rng = stream_rng(seed, 1 << 40);
        let mut counts = vec![0u64; p.len()];
        for _ in 0..shots {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = p.len() - 1;
            for (i, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            counts[idx] += 1;
        }
        Ok(Counts {
            n_qubits: circuit.n_qubits,
            shots,
            counts,
        })
    }
}

/// Independent seed for the `index`-th measurement of a seeded run.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// `R_X(θ) ∝ Z(−π/2)·X90·Z(π−θ)·X90·Z(−π/2)`, in circuit order.
pub fn rx_decomposition(qubit: usize, theta: f64) -> [Gate; 5] {
    [
        Gate::Vz {
            qubit,
            phi: -FRAC_PI_2,
        },
        Gate::X90 { qubit, amp: None },
        Gate::Vz {
            qubit,
            phi: PI - theta,
        },
        Gate::X90 { qubit, amp: None },
        Gate::Vz {
            qubit,
            phi: -FRAC_PI_2,
        },
    ]
}
