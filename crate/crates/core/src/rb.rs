//! Randomized benchmarking: Clifford tables, sequence construction,
//! density-matrix execution with injectable noise, and the standard (SRB),
//! interleaved (IRB) and purity (XRB) analyses.
//!
//! Survival probabilities are mapped to `y = (d·P − 1)/(d − 1)`, which decays
//! as `A·p^m` towards zero for unital noise, so the offset-free decay fit
//! applies directly.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitters::{fit_decay, DecayFit};
use crate::protocols::cnot_gates;
use crate::qmatrix::{cnot, rot_axis, rot_x, rot_z, tensor, CMat, CnotAngles, Unitary};
use crate::simdev::{Backend, Gate};

/// Primitive operations Clifford decompositions are written in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RbOp {
    X90 {
        qubit: usize,
    },
    Vz {
        qubit: usize,
        phi: f64,
    },
    /// Control 0, target 1.
    Cnot,
}

impl RbOp {
    fn shifted(self, qubit: usize) -> Self {
        match self {
            RbOp::X90 { .. } => RbOp::X90 { qubit },
            RbOp::Vz { phi, .. } => RbOp::Vz { qubit, phi },
            RbOp::Cnot => RbOp::Cnot,
        }
    }

    /// Ideal unitary in an `n_qubits` register.
    pub fn unitary(&self, n_qubits: usize) -> Result<Unitary<f64>> {
        let one = |u: Unitary<f64>, q: usize| -> Result<Unitary<f64>> {
            match (n_qubits, q) {
                (1, 0) => Ok(u),
                (2, 0) => tensor(&u, &Unitary::identity(2)),
                (2, 1) => tensor(&Unitary::identity(2), &u),
                _ => Err(Error::invalid(format!(
                    "qubit {q} outside a {n_qubits}-qubit register"
                ))),
            }
        };
        match *self {
            RbOp::X90 { qubit } => one(rot_x(FRAC_PI_2)?, qubit),
            RbOp::Vz { qubit, phi } => one(rot_z(phi)?, qubit),
            RbOp::Cnot if n_qubits == 2 => Ok(cnot()),
            RbOp::Cnot => Err(Error::invalid("CNOT needs two qubits")),
        }
    }
}

/// Ideal unitary of a gate list in circuit order.
pub fn compose(ops: &[RbOp], n_qubits: usize) -> Result<Unitary<f64>> {
    let mut u = Unitary::identity(1 << n_qubits);
    for op in ops {
        u = op.unitary(n_qubits)? * u;
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffordElement {
    pub index: usize,
    pub n_qubits: usize,
    pub unitary: Unitary<f64>,
    /// Circuit order.
    pub decomposition: Vec<RbOp>,
}

/// Global-phase-free fingerprint of a Clifford unitary: the matrix divided by
/// the phase of its first non-negligible entry, rounded to 1e-6.
fn phase_key(u: &Unitary<f64>) -> Vec<i64> {
    let d = u.dim();
    let mut phase = Complex::new(1.0, 0.0);
    'find: for i in 0..d {
        for j in 0..d {
            let v = u.get(i, j);
            if v.norm() > 1e-3 {
                phase = v.conj() / v.norm();
                break 'find;
            }
        }
    }
    let mut key = Vec::with_capacity(2 * d * d);
    for i in 0..d {
        for j in 0..d {
            let v = u.get(i, j) * phase;
            key.push((v.re * 1e6).round() as i64);
            key.push((v.im * 1e6).round() as i64);
        }
    }
    key
}

pub struct CliffordTable {
    pub n_qubits: usize,
    pub elements: Vec<CliffordElement>,
    lookup: HashMap<Vec<i64>, usize>,
}

impl CliffordTable {
    fn new(n_qubits: usize, elements: Vec<CliffordElement>) -> Self {
        let lookup = elements
            .iter()
            .map(|e| (phase_key(&e.unitary), e.index))
            .collect();
        Self {
            n_qubits,
            elements,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Index of the element equal to `u` up to global phase.
    pub fn find(&self, u: &Unitary<f64>) -> Option<usize> {
        self.lookup.get(&phase_key(u)).copied()
    }

    pub fn inverse_of(&self, u: &Unitary<f64>) -> Result<&CliffordElement> {
        self.find(&u.dagger())
            .map(|i| &self.elements[i])
            .ok_or_else(|| Error::InvalidState("sequence left the Clifford group".into()))
    }
}

fn merge_z(word: &[bool]) -> Vec<RbOp> {
    // true = X90, false = Z90
    let mut ops = Vec::new();
    let mut z = 0u32;
    for &is_x in word {
        if is_x {
            if !z.is_multiple_of(4) {
                ops.push(RbOp::Vz {
                    qubit: 0,
                    phi: FRAC_PI_2 * (z % 4) as f64,
                });
            }
            z = 0;
            ops.push(RbOp::X90 { qubit: 0 });
        } else {
            z += 1;
        }
    }
    if !z.is_multiple_of(4) {
        ops.push(RbOp::Vz {
            qubit: 0,
            phi: FRAC_PI_2 * (z % 4) as f64,
        });
    }
    ops
}

fn build_1q() -> CliffordTable {
    let gens = [
        (true, rot_x(FRAC_PI_2).expect("unitary")),
        (false, rot_z(FRAC_PI_2).expect("unitary")),
    ];
    // 0-1 breadth-first search: virtual Z is free, so every element keeps a
    // word with the fewest X90 pulses
    let mut best: HashMap<Vec<i64>, usize> = HashMap::new();
    let mut words: Vec<(Vec<bool>, Unitary<f64>)> = Vec::new();
    let mut queue = std::collections::VecDeque::from([(Vec::<bool>::new(), Unitary::identity(2))]);
    while let Some((w, u)) = queue.pop_front() {
        let k = phase_key(&u);
        if best.contains_key(&k) {
            continue;
        }
        best.insert(k, words.len());
        words.push((w.clone(), u));
        for (is_x, g) in &gens {
            let mut w2 = w.clone();
            w2.push(*is_x);
            if *is_x {
                queue.push_back((w2, *g * u));
            } else {
                queue.push_front((w2, *g * u));
            }
        }
    }
    let elements = words
        .into_iter()
        .enumerate()
        .map(|(index, (w, unitary))| CliffordElement {
            index,
            n_qubits: 1,
            unitary,
            decomposition: merge_z(&w),
        })
        .collect();
    CliffordTable::new(1, elements)
}

/// The 24 single-qubit Cliffords; index 0 is the identity.
pub fn clifford_group_1q() -> &'static CliffordTable {
    static T: OnceLock<CliffordTable> = OnceLock::new();
    T.get_or_init(build_1q)
}

pub const CLIFFORD_2Q_CLASS_SIZES: [usize; 4] = [576, 5184, 5184, 576];

/// Class of a two-qubit Clifford index: 0 single-qubit, 1 CNOT-like,
/// 2 iSWAP-like, 3 SWAP-like.
pub fn clifford_2q_class(index: usize) -> usize {
    let mut acc = 0;
    for (k, n) in CLIFFORD_2Q_CLASS_SIZES.iter().enumerate() {
        acc += n;
        if index < acc {
            return k;
        }
    }
    panic!("two-qubit Clifford index {index} out of range");
}

fn build_2q() -> CliffordTable {
    let c1 = clifford_group_1q();
    let idx = |u: Unitary<f64>| c1.find(&u).expect("single-qubit Clifford");
    let s1 = [
        0,
        idx(rot_axis(1.0, 1.0, 1.0, TAU / 3.0).expect("unitary")),
        idx(rot_axis(1.0, 1.0, 1.0, 2.0 * TAU / 3.0).expect("unitary")),
    ];
    let h = idx(rot_axis(1.0, 0.0, 1.0, PI).expect("unitary"));
    let on = |k: usize, q: usize| -> Vec<RbOp> {
        c1.elements[k]
            .decomposition
            .iter()
            .map(|o| o.shifted(q))
            .collect()
    };
    let pair = |a: usize, b: usize| -> Vec<RbOp> {
        let mut v = on(a, 0);
        v.extend(on(b, 1));
        v
    };
    let cnot_rev: Vec<RbOp> = {
        let mut v = pair(h, h);
        v.push(RbOp::Cnot);
        v.extend(pair(h, h));
        v
    };
    let mut elements = Vec::with_capacity(11520);
    let mut push = |ops: Vec<RbOp>| {
        let unitary = compose(&ops, 2).expect("valid ops");
        elements.push(CliffordElement {
            index: elements.len(),
            n_qubits: 2,
            unitary,
            decomposition: ops,
        });
    };
    for class in 0..4 {
        for a in 0..24 {
            for b in 0..24 {
                let base = pair(a, b);
                match class {
                    0 => push(base),
                    3 => {
                        let mut v = base;
                        v.push(RbOp::Cnot);
                        v.extend(cnot_rev.iter().copied());
                        v.push(RbOp::Cnot);
                        push(v);
                    }
                    _ => {
                        for &sa in &s1 {
                            for &sb in &s1 {
                                let mut v = base.clone();
                                v.push(RbOp::Cnot);
                                if class == 2 {
                                    v.extend(cnot_rev.iter().copied());
                                }
                                v.extend(pair(sa, sb));
                                push(v);
                            }
                        }
                    }
                }
            }
        }
    }
    CliffordTable::new(2, elements)
}

/// The 11520 two-qubit Cliffords, grouped by class in the order of
/// [`CLIFFORD_2Q_CLASS_SIZES`]; index 0 is the identity.
pub fn clifford_group_2q() -> &'static CliffordTable {
    static T: OnceLock<CliffordTable> = OnceLock::new();
    T.get_or_init(build_2q)
}

pub fn clifford_table(n_qubits: usize) -> Result<&'static CliffordTable> {
    match n_qubits {
        1 => Ok(clifford_group_1q()),
        2 => Ok(clifford_group_2q()),
        _ => Err(Error::invalid("RB supports one or two qubits")),
    }
}

pub fn sample_clifford_2q<R: Rng>(rng: &mut R) -> &'static CliffordElement {
    let t = clifford_group_2q();
    &t.elements[rng.gen_range(0..t.len())]
}

/// Density matrix on one or two qubits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix {
    m: CMat<f64>,
}

impl DensityMatrix {
    pub fn ground(n_qubits: usize) -> Self {
        let mut m = CMat::zeros(1 << n_qubits);
        m.set(0, 0, Complex::new(1.0, 0.0));
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &CMat<f64> {
        &self.m
    }

    pub fn apply_unitary(&mut self, u: &Unitary<f64>) {
        self.m = u.matrix().matmul(&self.m).matmul(&u.matrix().dagger());
    }

    /// `ρ → Σ K ρ K†`.
    pub fn apply_kraus(&mut self, ks: &[CMat<f64>]) {
        let mut out = CMat::zeros(self.dim());
        for k in ks {
            out = out.add(&k.matmul(&self.m).matmul(&k.dagger()));
        }
        self.m = out;
    }

    /// Probability of the all-zero outcome.
    pub fn ground_population(&self) -> f64 {
        self.m.get(0, 0).re.clamp(0.0, 1.0)
    }

    pub fn purity(&self) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += self.m.get(i, j).norm_sqr();
            }
        }
        s
    }
}

/// Noise channels that can be attached to Cliffords or to the interleaved
/// gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "snake_case")]
pub enum Channel {
    /// `ρ → (1−ε)ρ + ε·I/d`.
    Depolarizing { epsilon: f64 },
    /// Coherent `R_X(δ)` on every qubit.
    OverRotation { delta: f64 },
    /// Independent T1-like decay of every qubit.
    AmplitudeDamping { gamma: f64 },
}

impl Channel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Channel::Depolarizing { epsilon } => (0.0..=1.0).contains(&epsilon),
            Channel::OverRotation { delta } => delta.is_finite(),
            Channel::AmplitudeDamping { gamma } => (0.0..=1.0).contains(&gamma),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "channel parameter out of range: {self:?}"
            )))
        }
    }

    pub fn apply(&self, rho: &mut DensityMatrix) -> Result<()> {
        let d = rho.dim();
        let n = if d == 2 { 1 } else { 2 };
        match *self {
            Channel::Depolarizing { epsilon } => {
                let tr = rho.m.trace();
                let mixed = CMat::identity(d).scale(tr * (epsilon / d as f64));
                rho.m = rho.m.scale(Complex::new(1.0 - epsilon, 0.0)).add(&mixed);
            }
            Channel::OverRotation { delta } => {
                let r = rot_x(delta)?;
                let u = if n == 1 { r } else { tensor(&r, &r)? };
                rho.apply_unitary(&u);
            }
            Channel::AmplitudeDamping { gamma } => {
                let c = |re: f64| Complex::new(re, 0.0);
                let k0 = CMat::from_rows(&[
                    vec![c(1.0), c(0.0)],
                    vec![c(0.0), c((1.0 - gamma).sqrt())],
                ])?;
                let k1 = CMat::from_rows(&[vec![c(0.0), c(gamma.sqrt())], vec![c(0.0), c(0.0)]])?;
                if n == 1 {
                    rho.apply_kraus(&[k0, k1]);
                } else {
                    let id = CMat::identity(2);
                    rho.apply_kraus(&[k0.kron(&id)?, k1.kron(&id)?]);
                    rho.apply_kraus(&[id.kron(&k0)?, id.kron(&k1)?]);
                }
            }
        }
        Ok(())
    }
}

/// Where an injected channel acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attach {
    /// After the interleaved target gate only.
    Target,
    /// After every random Clifford.
    Clifford,
}

/// A channel with its attachment point, parsed from `name=value` or
/// `clifford:name=value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub attach: Attach,
    pub channel: Channel,
}

impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (attach, rest) = match s.split_once(':') {
            Some(("clifford", r)) => (Attach::Clifford, r),
            Some(("target", r)) => (Attach::Target, r),
            Some((a, _)) => return Err(Error::invalid(format!("unknown attachment {a:?}"))),
            None => (Attach::Target, s),
        };
        let (name, value) = rest
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("noise spec {s:?} is not name=value")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad noise strength {value:?}")))?;
        let channel = match name.trim() {
            "depolarizing" => Channel::Depolarizing { epsilon: v },
            "over_rotation" => Channel::OverRotation { delta: v },
            "amplitude_damping" => Channel::AmplitudeDamping { gamma: v },
            other => return Err(Error::invalid(format!("unknown channel {other:?}"))),
        };
        channel.validate()?;
        Ok(Self { attach, channel })
    }
}

/// Gate interleaved by IRB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Identity,
    X90,
    Cnot,
}

impl Target {
    pub fn ops(self) -> Vec<RbOp> {
        match self {
            Target::Identity => vec![],
            Target::X90 => vec![RbOp::X90 { qubit: 0 }],
            Target::Cnot => vec![RbOp::Cnot],
        }
    }
}

/// How random Cliffords and the interleaved target act on a density matrix.
pub trait GateSet {
    fn n_qubits(&self) -> usize;
    fn apply_clifford(&self, c: &CliffordElement, rho: &mut DensityMatrix) -> Result<()>;
    fn apply_target(&self, target: Target, rho: &mut DensityMatrix) -> Result<()>;
}

fn apply_all(channels: &[Channel], rho: &mut DensityMatrix) -> Result<()> {
    for ch in channels {
        ch.apply(rho)?;
    }
    Ok(())
}

/// Ideal gates followed by attached channels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelGateSet {
    pub n_qubits: usize,
    pub clifford_noise: Vec<Channel>,
    pub target_noise: Vec<Channel>,
}

impl ChannelGateSet {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            ..Default::default()
        }
    }

    pub fn inject(&mut self, inj: Injection) {
        match inj.attach {
            Attach::Clifford => self.clifford_noise.push(inj.channel),
            Attach::Target => self.target_noise.push(inj.channel),
        }
    }
}

impl GateSet for ChannelGateSet {
    fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    fn apply_clifford(&self, c: &CliffordElement, rho: &mut DensityMatrix) -> Result<()> {
        rho.apply_unitary(&c.unitary);
        apply_all(&self.clifford_noise, rho)
    }

    fn apply_target(&self, target: Target, rho: &mut DensityMatrix) -> Result<()> {
        rho.apply_unitary(&compose(&target.ops(), self.n_qubits)?);
        apply_all(&self.target_noise, rho)
    }
}

/// Gates as the simulated device realizes them with its current
/// calibration, on qubit 0 (one qubit) or the 0→1 pair (two qubits).
pub struct DeviceGateSet<'a> {
    pub backend: &'a Backend,
    pub n_qubits: usize,
    /// CR amplitude and correction angles realizing the CNOT.
    pub cnot: Option<(f64, CnotAngles<f64>)>,
    pub clifford_noise: Vec<Channel>,
    pub target_noise: Vec<Channel>,
}

impl DeviceGateSet<'_> {
    fn op_unitary(&self, op: &RbOp) -> Result<Unitary<f64>> {
        let gates: Vec<Gate> = match *op {
            RbOp::X90 { qubit } => vec![Gate::X90 { qubit, amp: None }],
            RbOp::Vz { qubit, phi } => vec![Gate::Vz { qubit, phi }],
            RbOp::Cnot => {
                let (amp, angles) = self.cnot.ok_or_else(|| {
                    Error::Dependency("device CNOT used before CR calibration".into())
                })?;
                cnot_gates(amp, &angles)
            }
        };
        // one-qubit registers run on qubit 0 of a two-qubit device
        let mut u = Unitary::identity(4);
        for g in &gates {
            u = self.backend.gate_unitary(g, 2)? * u;
        }
        if self.n_qubits == 2 {
            return Ok(u);
        }
        let mut m = CMat::zeros(2);
        for i in 0..2 {
            for j in 0..2 {
                m.set(i, j, u.get(2 * i, 2 * j));
            }
        }
        Unitary::new(m)
    }

    fn ops_unitary(&self, ops: &[RbOp]) -> Result<Unitary<f64>> {
        let mut u = Unitary::identity(1 << self.n_qubits);
        for op in ops {
            u = self.op_unitary(op)? * u;
        }
        Ok(u)
    }
}

impl GateSet for DeviceGateSet<'_> {
    fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    fn apply_clifford(&self, c: &CliffordElement, rho: &mut DensityMatrix) -> Result<()> {
        rho.apply_unitary(&self.ops_unitary(&c.decomposition)?);
        apply_all(&self.clifford_noise, rho)
    }

    fn apply_target(&self, target: Target, rho: &mut DensityMatrix) -> Result<()> {
        rho.apply_unitary(&self.ops_unitary(&target.ops())?);
        apply_all(&self.target_noise, rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbConfig {
    pub lengths: Vec<usize>,
    pub circuits_per_length: usize,
    /// `None` uses exact survival probabilities.
    pub shots: Option<u64>,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1, 2, 4, 8, 16, 32, 64],
            circuits_per_length: 20,
            shots: Some(1000),
        }
    }
}

impl RbConfig {
    fn validate(&self) -> Result<()> {
        let mut l = self.lengths.clone();
        l.sort_unstable();
        l.dedup();
        if l.len() < 3 {
            return Err(Error::invalid("RB needs at least 3 distinct lengths"));
        }
        if self.circuits_per_length == 0 || self.shots == Some(0) {
            return Err(Error::invalid("circuits and shots must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbProtocol {
    Srb,
    Irb,
    Xrb,
}

/// One random circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbPoint {
    pub length: usize,
    pub circuit: usize,
    /// Ground-state survival (SRB/IRB) or purity (XRB).
    pub raw: f64,
    /// `(d·raw − 1)/(d − 1)`.
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbResult {
    pub protocol: RbProtocol,
    pub n_qubits: usize,
    pub target: Option<Target>,
    pub points: Vec<RbPoint>,
    pub fit: DecayFit<f64>,
    /// `p` for SRB/IRB, `u` for XRB.
    pub decay: f64,
    pub decay_se: f64,
    /// `(d²−1)/d²·(1−p)`; for XRB the SRB value it was combined with.
    pub process_infidelity: Option<f64>,
    /// IRB estimate of the target gate's infidelity.
    pub gate_infidelity: Option<f64>,
    pub gate_infidelity_se: Option<f64>,
    /// XRB split of the process infidelity.
    pub unitary_error: Option<f64>,
    pub stochastic_error: Option<f64>,
    /// `p_IRB` exceeds `p_SRB` beyond the combined error.
    pub nonphysical: bool,
}

impl RbResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,circuit,raw,y\n");
        for p in &self.points {
            writeln!(s, "{},{},{},{}", p.length, p.circuit, p.raw, p.y).expect("write to String");
        }
        s
    }
}

fn dim(n_qubits: usize) -> f64 {
    (1usize << n_qubits) as f64
}

/// `(d²−1)/d²·(1−p)`.
pub fn process_infidelity(n_qubits: usize, p: f64) -> f64 {
    let d = dim(n_qubits);
    (d * d - 1.0) / (d * d) * (1.0 - p)
}

/// Interleaved gate infidelity `(d−1)/d·(1 − p_IRB/p_SRB)`.
pub fn irb_infidelity(n_qubits: usize, p_irb: f64, p_srb: f64) -> f64 {
    let d = dim(n_qubits);
    (d - 1.0) / d * (1.0 - p_irb / p_srb)
}

/// Incoherent part of the process infidelity, `(d²−1)/d²·(1 − √u)`.
pub fn stochastic_infidelity(n_qubits: usize, u: f64) -> f64 {
    process_infidelity(n_qubits, u.max(0.0).sqrt())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs every random sequence and returns the final state of each.
fn run_sequences(
    gs: &dyn GateSet,
    cfg: &RbConfig,
    seed: u64,
    interleave: Option<Target>,
) -> Result<Vec<(usize, usize, DensityMatrix)>> {
    cfg.validate()?;
    let n = gs.n_qubits();
    let table = clifford_table(n)?;
    let mut rng = rng_for(seed, 0);
    let target_u = match interleave {
        Some(t) => Some(compose(&t.ops(), n)?),
        None => None,
    };
    let mut out = Vec::new();
    for &m in &cfg.lengths {
        for circuit in 0..cfg.circuits_per_length {
            let mut rho = DensityMatrix::ground(n);
            let mut ideal = Unitary::identity(1 << n);
            for _ in 0..m {
                let c = &table.elements[rng.gen_range(0..table.len())];
                gs.apply_clifford(c, &mut rho)?;
                ideal = c.unitary * ideal;
                if let (Some(t), Some(tu)) = (interleave, target_u.as_ref()) {
                    gs.apply_target(t, &mut rho)?;
                    ideal = *tu * ideal;
                }
            }
            let inv = table.inverse_of(&ideal)?;
            gs.apply_clifford(inv, &mut rho)?;
            let total = inv.unitary * ideal;
            if total.phase_overlap(&Unitary::identity(1 << n)) < 1.0 - 1e-9 {
                return Err(Error::InvalidState(
                    "inversion does not close the sequence".into(),
                ));
            }
            out.push((m, circuit, rho));
        }
    }
    Ok(out)
}

/// Fits `A·decay^m` to per-length means of `y`, weighting by the spread
/// across circuits (floored by the shot noise).
fn fit_points(points: &[RbPoint], n_qubits: usize, shots: Option<u64>) -> Result<DecayFit<f64>> {
    let d = dim(n_qubits);
    let mut lengths: Vec<usize> = points.iter().map(|p| p.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let (mut m, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for &l in &lengths {
        let ys: Vec<f64> = points
            .iter()
            .filter(|p| p.length == l)
            .map(|p| p.y)
            .collect();
        let k = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / k;
        let var = if ys.len() > 1 {
            ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        let shot_floor = match shots {
            Some(n) => {
                let p = ((mean * (d - 1.0) + 1.0) / d).clamp(0.0, 1.0);
                let q = p.max(0.5 / n as f64).min(1.0 - 0.5 / n as f64);
                d / (d - 1.0) * (q * (1.0 - q) / n as f64).sqrt()
            }
            None => 0.0,
        };
        m.push(l as f64);
        y.push(mean);
        s.push(((var / k).sqrt().max(shot_floor / k.sqrt())).max(1e-9));
    }
    fit_decay(&m, &y, &s)
}

fn sample_survival(p: f64, shots: Option<u64>, rng: &mut ChaCha8Rng) -> Result<f64> {
    match shots {
        None => Ok(p),
        Some(n) => {
            let b =
                Binomial::new(n, p.clamp(0.0, 1.0)).map_err(|e| Error::invalid(e.to_string()))?;
            Ok(b.sample(rng) as f64 / n as f64)
        }
    }
}

fn survival_result(
    gs: &dyn GateSet,
    cfg: &RbConfig,
    seed: u64,
    protocol: RbProtocol,
    target: Option<Target>,
) -> Result<RbResult> {
    let n = gs.n_qubits();
    let d = dim(n);
    let states = run_sequences(gs, cfg, seed, target)?;
    let mut rng = rng_for(seed, 1);
    let points = states
        .iter()
        .map(|(m, c, rho)| {
            let raw = sample_survival(rho.ground_population(), cfg.shots, &mut rng)?;
            Ok(RbPoint {
                length: *m,
                circuit: *c,
                raw,
                y: (d * raw - 1.0) / (d - 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_points(&points, n, cfg.shots)?;
    Ok(RbResult {
        protocol,
        n_qubits: n,
        target,
        points,
        decay: fit.p,
        decay_se: fit.p_se,
        process_infidelity: Some(process_infidelity(n, fit.p)),
        gate_infidelity: None,
        gate_infidelity_se: None,
        unitary_error: None,
        stochastic_error: None,
        nonphysical: false,
        fit,
    })
}

/// Standard RB.
pub fn srb(gs: &dyn GateSet, cfg: &RbConfig, seed: u64) -> Result<RbResult> {
    survival_result(gs, cfg, seed, RbProtocol::Srb, None)
}

/// Interleaved RB of `target` against a matching SRB run.
pub fn irb(
    gs: &dyn GateSet,
    target: Target,
    cfg: &RbConfig,
    seed: u64,
    reference: &RbResult,
) -> Result<RbResult> {
    if reference.protocol != RbProtocol::Srb || reference.n_qubits != gs.n_qubits() {
        return Err(Error::invalid(
            "IRB needs an SRB reference on the same register",
        ));
    }
    if target == Target::Cnot && gs.n_qubits() != 2 {
        return Err(Error::invalid("CNOT interleaving needs two qubits"));
    }
    let mut r = survival_result(gs, cfg, seed, RbProtocol::Irb, Some(target))?;
    let (pi, ps) = (r.decay, reference.decay);
    let (si, ss) = (r.decay_se, reference.decay_se);
    let d = dim(gs.n_qubits());
    r.gate_infidelity = Some(irb_infidelity(gs.n_qubits(), pi, ps));
    r.gate_infidelity_se =
        Some((d - 1.0) / d * (pi / ps) * ((si / pi).powi(2) + (ss / ps).powi(2)).sqrt());
    r.nonphysical = pi - ps > (si * si + ss * ss).sqrt();
    if r.nonphysical {
        log::warn!("IRB decay {pi} exceeds SRB decay {ps} beyond error bars");
    }
    Ok(r)
}

/// Purity RB. Purity is read exactly from the simulated density matrix; the
/// SRB reference splits its process infidelity into stochastic and unitary
/// parts.
pub fn xrb(gs: &dyn GateSet, cfg: &RbConfig, seed: u64, reference: &RbResult) -> Result<RbResult> {
    if reference.protocol != RbProtocol::Srb || reference.n_qubits != gs.n_qubits() {
        return Err(Error::invalid(
            "XRB needs an SRB reference on the same register",
        ));
    }
    let n = gs.n_qubits();
    let d = dim(n);
    let exact = RbConfig {
        shots: None,
        ..cfg.clone()
    };
    let states = run_sequences(gs, &exact, seed, None)?;
    let points: Vec<RbPoint> = states
        .iter()
        .map(|(m, c, rho)| {
            let raw = rho.purity();
            RbPoint {
                length: *m,
                circuit: *c,
                raw,
                y: (d * raw - 1.0) / (d - 1.0),
            }
        })
        .collect();
    let fit = fit_points(&points, n, None)?;
    let total = process_infidelity(n, reference.decay);
    let stochastic = stochastic_infidelity(n, fit.p).min(total.max(0.0));
    Ok(RbResult {
        protocol: RbProtocol::Xrb,
        n_qubits: n,
        target: None,
        points,
        decay: fit.p,
        decay_se: fit.p_se,
        process_infidelity: Some(total),
        gate_infidelity: None,
        gate_infidelity_se: None,
        unitary_error: Some((total - stochastic).max(0.0)),
        stochastic_error: Some(stochastic),
        nonphysical: false,
        fit,
    })
}
