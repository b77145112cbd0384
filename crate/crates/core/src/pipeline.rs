//! Stage orchestration, run configuration and the calibration record store.
//!
//! Stages run in the order autorabi → finetune → crsweep → xyfit → rb. Each
//! one rebuilds the simulated device from its truth file, applies the gate
//! settings of the latest stored record, runs its protocol, writes JSON and
//! CSV artifacts and appends an updated record. Records carry no wall-clock
//! data, so identical configurations produce identical records; the store
//! keeps timestamps in a separate envelope field.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::autorabi::{autorabi, write_archive, AutoRabiConfig};
use crate::error::{Error, Result};
use crate::protocols::{
    correct_cnot, cr_amplitude_sweep, echo_detuning_scan, readout_assignment_error, stack_scan,
    CnotConfig, EchoScan, StackGate, StackScan,
};
use crate::qmatrix::CnotAngles;
use crate::rb::{
    irb, srb, xrb, Attach, Channel, ChannelGateSet, DeviceGateSet, GateSet, Injection, RbConfig,
    RbResult, Target,
};
use crate::simdev::{derive_seed, Backend, DeviceTruth, QubitBias};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Autorabi,
    Finetune,
    Crsweep,
    Xyfit,
    Rb,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Autorabi,
        Stage::Finetune,
        Stage::Crsweep,
        Stage::Xyfit,
        Stage::Rb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Autorabi => "autorabi",
            Stage::Finetune => "finetune",
            Stage::Crsweep => "crsweep",
            Stage::Xyfit => "xyfit",
            Stage::Rb => "rb",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// X90 pulses per stack; a multiple of 4.
    pub x90_stack: usize,
    /// X180 pulses per stack; even.
    pub x180_stack: usize,
    /// Relative half-width of the amplitude window.
    pub span: f64,
    pub points: usize,
    pub shots: u64,
    /// Re-centerings allowed when the optimum sits near the window edge.
    pub max_recenter: usize,
    pub readout_shots: u64,
    /// Echo pairs and half-width (GHz) of the coarse and fine drive
    /// frequency scans run before the amplitude stacks.
    pub echo_pairs: [usize; 2],
    pub echo_half_width: [f64; 2],
    pub echo_points: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            x90_stack: 16,
            x180_stack: 8,
            span: 0.04,
            points: 41,
            shots: 1000,
            max_recenter: 3,
            readout_shots: 20_000,
            echo_pairs: [4, 16],
            echo_half_width: [0.001, 0.0002],
            echo_points: 21,
        }
    }
}

/// Which gates RB runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbGates {
    /// Device gates when a CNOT calibration exists, ideal gates otherwise.
    #[default]
    Auto,
    Ideal,
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbStageConfig {
    pub n_qubits: usize,
    pub gates: RbGates,
    pub sequences: RbConfig,
    /// Run IRB of this gate after SRB.
    pub interleave: Option<Target>,
    pub xrb: bool,
    /// Extra noise; also settable from the command line.
    pub inject: Vec<String>,
    /// Depolarizing strength after every Clifford for one and two qubits,
    /// standing in for the decoherence the unitary gate model lacks.
    /// Sized so SRB lands near hardware-typical Clifford infidelities.
    pub background: [f64; 2],
}

impl Default for RbStageConfig {
    fn default() -> Self {
        Self {
            n_qubits: 2,
            gates: RbGates::Auto,
            sequences: RbConfig {
                lengths: vec![1, 2, 4, 8, 16, 32],
                circuits_per_length: 10,
                shots: Some(1000),
            },
            interleave: Some(Target::Cnot),
            xrb: true,
            inject: Vec::new(),
            background: [6.5e-4, 1.5e-2],
        }
    }
}

/// Everything a run needs. Only `seed` is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Device truth TOML; the built-in device when absent. Relative paths
    /// resolve against the config file.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `records.jsonl` inside the output directory.
    #[serde(default)]
    pub store: Option<PathBuf>,
    /// Starting control settings; truth offset by +1 MHz on f_q, −1 MHz on
    /// f_r, at drive amplitude 0.4, when absent.
    #[serde(default)]
    pub initial_bias: Option<[QubitBias; 2]>,
    #[serde(default)]
    pub autorabi: AutoRabiConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub cnot: CnotConfig,
    #[serde(default)]
    pub rb: RbStageConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("autocal-out")
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            truth: None,
            output_dir: default_output_dir(),
            store: None,
            initial_bias: None,
            autorabi: AutoRabiConfig::default(),
            finetune: FinetuneConfig::default(),
            cnot: CnotConfig::default(),
            rb: RbStageConfig::default(),
        }
    }

    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        if let (Some(t), Some(dir)) = (cfg.truth.as_mut(), path.parent()) {
            if t.is_relative() {
                *t = dir.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn store_path(&self) -> PathBuf {
        self.store
            .clone()
            .unwrap_or_else(|| self.output_dir.join("records.jsonl"))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.truth {
            if !t.is_file() {
                return Err(Error::Config(format!(
                    "truth file {} does not exist",
                    t.display()
                )));
            }
        }
        if let Some(b) = &self.initial_bias {
            b.iter().try_for_each(QubitBias::validate)?;
        }
        let f = &self.finetune;
        if f.x90_stack == 0
            || !f.x90_stack.is_multiple_of(4)
            || f.x180_stack == 0
            || !f.x180_stack.is_multiple_of(2)
        {
            return Err(Error::Config(
                "finetune stacks must be nominal identities".into(),
            ));
        }
        if !(f.span > 0.0 && f.span <= 0.5) || f.points < 6 || f.shots == 0 || f.readout_shots == 0
        {
            return Err(Error::Config(
                "finetune span must be in (0, 0.5] with at least 6 points".into(),
            ));
        }
        if f.echo_pairs.contains(&0)
            || f.echo_half_width.iter().any(|w| !(*w > 0.0))
            || f.echo_points < 5
        {
            return Err(Error::Config(
                "finetune echo scans need pairs, widths and at least 5 points".into(),
            ));
        }
        if !(1..=2).contains(&self.rb.n_qubits) {
            return Err(Error::Config("rb.n_qubits must be 1 or 2".into()));
        }
        if self.rb.background.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("rb.background must be in [0, 1]".into()));
        }
        for s in &self.rb.inject {
            s.parse::<Injection>()?;
        }
        Ok(())
    }

    pub fn device_truth(&self) -> Result<DeviceTruth> {
        match &self.truth {
            Some(p) => DeviceTruth::from_toml(&fs::read_to_string(p)?),
            None => Ok(DeviceTruth::default()),
        }
    }
}

/// Per-qubit calibration state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QubitRecord {
    pub bias: Option<QubitBias>,
    /// π/2 amplitude implied by the Rabi fit at the final bias.
    pub rabi_x90_amp: Option<f64>,
    pub autorabi_loss: Option<f64>,
    /// Drive frequency from the echo scans, GHz.
    pub f_q: Option<f64>,
    pub x90_amp: Option<f64>,
    pub x180_amp: Option<f64>,
    pub readout_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnotRecord {
    pub angles: CnotAngles<f64>,
    pub secondary: CnotAngles<f64>,
    pub residual: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbRecord {
    pub n_qubits: usize,
    pub gates: RbGates,
    pub injected: Vec<Injection>,
    pub background: f64,
    pub srb_p: f64,
    pub srb_p_se: f64,
    pub process_infidelity: f64,
    pub interleaved: Option<Target>,
    pub gate_infidelity: Option<f64>,
    pub gate_infidelity_se: Option<f64>,
    pub nonphysical: bool,
    pub xrb_u: Option<f64>,
    pub unitary_error: Option<f64>,
    pub stochastic_error: Option<f64>,
}

/// Who produced which part of a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub run_id: String,
    pub seed: u64,
    pub software_version: String,
}

/// Calibration state of the control/target pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub pair: [usize; 2],
    /// Incremented by one on every store write for the pair.
    pub version: u64,
    pub qubits: [QubitRecord; 2],
    pub cr_amp: Option<f64>,
    pub cnot: Option<CnotRecord>,
    pub rb: Option<RbRecord>,
    /// Latest run of every stage that contributed, in stage order.
    pub provenance: Vec<Provenance>,
}

impl CalibrationRecord {
    pub fn new() -> Self {
        Self {
            pair: [0, 1],
            ..Default::default()
        }
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.provenance.iter().any(|p| p.stage == stage)
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.provenance.iter().map(|p| p.stage).collect()
    }

    /// Drops everything derived from `stage` onwards, since it rests on
    /// settings that are about to change.
    fn invalidate_from(&mut self, stage: Stage) {
        for q in &mut self.qubits {
            if stage <= Stage::Autorabi {
                q.bias = None;
                q.rabi_x90_amp = None;
                q.autorabi_loss = None;
            }
            if stage <= Stage::Finetune {
                q.f_q = None;
                q.x90_amp = None;
                q.x180_amp = None;
                q.readout_error = None;
            }
        }
        if stage <= Stage::Crsweep {
            self.cr_amp = None;
        }
        if stage <= Stage::Xyfit {
            self.cnot = None;
        }
        self.rb = None;
        self.provenance.retain(|p| p.stage < stage);
    }

    fn stamp(&mut self, stage: Stage, seed: u64) {
        self.provenance.retain(|p| p.stage != stage);
        self.provenance.push(Provenance {
            stage,
            run_id: format!("{stage}-{seed:016x}"),
            seed,
            software_version: SOFTWARE_VERSION.to_string(),
        });
        self.provenance.sort_by_key(|p| p.stage);
    }
}

/// One line of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub timestamp: DateTime<Utc>,
    pub record: CalibrationRecord,
}

/// Append-only JSON-lines store. Writers take an exclusive lock file and
/// replace the store atomically, so a concurrent writer fails instead of
/// interleaving.
#[derive(Debug, Clone)]
pub struct RecordStore {
    path: PathBuf,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl RecordStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn sidecar(&self, suffix: &str) -> PathBuf {
        let mut name = self
            .path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(suffix);
        self.path.with_file_name(name)
    }

    /// Every readable envelope in file order; unparsable lines are skipped
    /// with a warning.
    pub fn read_all(&self) -> Result<Vec<Envelope>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Envelope>(line) {
                Ok(env) => out.push(env),
                Err(e) => log::warn!(
                    "{}:{}: skipping corrupt record ({e})",
                    self.path.display(),
                    i + 1
                ),
            }
        }
        Ok(out)
    }

    pub fn latest(&self, pair: [usize; 2]) -> Result<Option<Envelope>> {
        Ok(self
            .read_all()?
            .into_iter()
            .filter(|e| e.record.pair == pair)
            .max_by_key(|e| e.record.version))
    }

    /// Appends `record` with its version set one past the latest stored
    /// version of the pair.
    pub fn append(&self, mut record: CalibrationRecord) -> Result<Envelope> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let lock = self.sidecar(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!(
                        "store {} is locked by another writer ({e})",
                        self.path.display()
                    ),
                ))
            })?;
        let _guard = LockGuard(lock);

        record.version = self
            .latest(record.pair)?
            .map_or(1, |e| e.record.version + 1);
        let env = Envelope {
            timestamp: Utc::now(),
            record,
        };
        let mut bytes = match fs::read(&self.path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        if bytes.last().is_some_and(|b| *b != b'\n') {
            bytes.push(b'\n');
        }
        serde_json::to_writer(&mut bytes, &env)?;
        bytes.push(b'\n');
        let tmp = self.sidecar(".tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(env)
    }
}

/// Result of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub envelope: Envelope,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

pub struct Pipeline {
    cfg: RunConfig,
    truth: DeviceTruth,
    store: RecordStore,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<PathBuf> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn missing(stage: Stage, needs: Stage) -> Error {
    Error::Dependency(format!(
        "{stage} needs a stored {needs} calibration; run `{needs}` first"
    ))
}

/// Fails on the earliest stage before `upto` that `rec` lacks.
fn require(rec: &CalibrationRecord, stage: Stage, upto: Stage) -> Result<()> {
    match Stage::ALL
        .into_iter()
        .take_while(|s| *s <= upto)
        .find(|s| !rec.has(*s))
    {
        Some(needs) => Err(missing(stage, needs)),
        None => Ok(()),
    }
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let truth = cfg.device_truth()?;
        truth.validate()?;
        let store = RecordStore::new(cfg.store_path());
        Ok(Self { cfg, truth, store })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.index())
    }

    fn stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.cfg.output_dir.join(stage.name());
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn current(&self) -> Result<CalibrationRecord> {
        Ok(self
            .store
            .latest([0, 1])?
            .map_or_else(CalibrationRecord::new, |e| e.record))
    }

    /// The device with the gate settings of `rec` applied.
    fn backend(&self, rec: &CalibrationRecord) -> Result<Backend> {
        let mut b = Backend::new(self.truth.clone())?;
        for (q, qr) in rec.qubits.iter().enumerate() {
            let mut cal = b.calibration(q);
            if let Some(f) = qr.f_q.or(qr.bias.map(|b| b.f_q)) {
                cal.f_q = f;
            }
            if let Some(a) = qr.x90_amp.or(qr.rabi_x90_amp) {
                cal.x90_amp = a;
                cal.x180_amp = qr.x180_amp.unwrap_or((2.0 * a).min(1.0));
            }
            b.set_calibration(q, cal)?;
        }
        Ok(b)
    }

    fn initial_bias(&self) -> [QubitBias; 2] {
        self.cfg.initial_bias.unwrap_or_else(|| {
            let q = |t: &crate::simdev::QubitTruth| QubitBias {
                f_q: t.f_q_true + 0.001,
                f_r: t.f_r_true - 0.001,
                a_r: 0.4,
                readout_amp: 1.0,
            };
            [q(&self.truth.qubits[0]), q(&self.truth.qubits[1])]
        })
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let mut rec = self.current()?;
        let seed = self.stage_seed(stage);
        let dir = self.stage_dir(stage)?;
        log::info!(
            "{stage}: seed {seed}, store {}",
            self.store.path().display()
        );
        let (artifacts, summary) = match stage {
            Stage::Autorabi => self.autorabi(&mut rec, seed, &dir)?,
            Stage::Finetune => self.finetune(&mut rec, seed, &dir)?,
            Stage::Crsweep => self.crsweep(&mut rec, seed, &dir)?,
            Stage::Xyfit => self.xyfit(&mut rec, seed, &dir)?,
            Stage::Rb => self.rb(&mut rec, seed, &dir)?,
        };
        rec.stamp(stage, seed);
        let envelope = self.store.append(rec)?;
        Ok(StageOutcome {
            stage,
            envelope,
            artifacts,
            summary,
        })
    }

    fn autorabi(
        &self,
        rec: &mut CalibrationRecord,
        seed: u64,
        dir: &Path,
    ) -> Result<(Vec<PathBuf>, String)> {
        rec.invalidate_from(Stage::Autorabi);
        let backend = self.backend(rec)?;
        let mut artifacts = Vec::new();
        let mut summary = Vec::new();
        for (q, init) in self.initial_bias().iter().enumerate() {
            let r = autorabi(
                &backend,
                q,
                init,
                &self.cfg.autorabi,
                derive_seed(seed, q as u64),
            )?;
            let best = r.best_evaluation();
            let fit = best.fit.ok_or_else(|| {
                Error::CalibrationFailed(format!("autorabi q{q}: no usable Rabi fit"))
            })?;
            let x90 = best.bias.a_r * fit.t_x90 / backend.pulse_ns();
            if !(x90 > 0.0 && x90 <= 1.0) {
                return Err(Error::CalibrationFailed(format!(
                    "autorabi q{q}: implied π/2 amplitude {x90} outside (0, 1]"
                )));
            }
            rec.qubits[q].bias = Some(r.final_bias);
            rec.qubits[q].rabi_x90_amp = Some(x90);
            rec.qubits[q].autorabi_loss = Some(r.final_loss.l_tot);
            write_archive(&r, dir)?;
            artifacts.push(write_json(&dir.join(format!("autorabi_q{q}.json")), &r)?);
            artifacts.push(dir.join(format!("autorabi_q{q}.jsonl")));
            artifacts.push(dir.join(format!("autorabi_q{q}_loss.csv")));
            summary.push(format!(
                "q{q}: f_q {:.6} GHz, f_r {:.6} GHz, a_r {:.4}, loss {:.3} -> {:.3}",
                r.final_bias.f_q,
                r.final_bias.f_r,
                r.final_bias.a_r,
                r.initial_loss.l_tot,
                r.final_loss.l_tot
            ));
        }
        Ok((artifacts, summary.join("\n")))
    }

    fn stack(
        &self,
        backend: &Backend,
        q: usize,
        gate: StackGate,
        guess: f64,
        seed: u64,
    ) -> Result<StackScan> {
        let f = &self.cfg.finetune;
        let n = if gate == StackGate::X90 {
            f.x90_stack
        } else {
            f.x180_stack
        };
        let mut center = guess;
        let mut k = 0;
        loop {
            let amps: Vec<f64> = (0..f.points)
                .map(|i| center * (1.0 + f.span * (2.0 * i as f64 / (f.points - 1) as f64 - 1.0)))
                .collect();
            let scan = stack_scan(
                backend,
                q,
                gate,
                n,
                &amps,
                f.shots,
                derive_seed(seed, k as u64),
            )?;
            let off = (scan.optimum - center).abs() / (f.span * center);
            if off < 0.8 || k >= f.max_recenter {
                if off >= 0.8 {
                    return Err(Error::CalibrationFailed(format!(
                        "finetune q{q} {gate:?}: optimum stays at the window edge"
                    )));
                }
                return Ok(scan);
            }
            center = scan.optimum;
            k += 1;
        }
    }

    /// Coarse then fine echo scans around the current drive frequency.
    fn echo(&self, backend: &Backend, q: usize, seed: u64) -> Result<[EchoScan; 2]> {
        let f = &self.cfg.finetune;
        let grid = |c: f64, w: f64| -> Vec<f64> {
            (0..f.echo_points)
                .map(|i| c + w * (2.0 * i as f64 / (f.echo_points - 1) as f64 - 1.0))
                .collect()
        };
        let start = backend.calibration(q).f_q;
        let coarse = echo_detuning_scan(
            backend,
            q,
            f.echo_pairs[0],
            &grid(start, f.echo_half_width[0]),
            f.shots,
            derive_seed(seed, 0),
        )?;
        let fine = echo_detuning_scan(
            backend,
            q,
            f.echo_pairs[1],
            &grid(coarse.optimum, f.echo_half_width[1]),
            f.shots,
            derive_seed(seed, 1),
        )?;
        Ok([coarse, fine])
    }

    fn finetune(
        &self,
        rec: &mut CalibrationRecord,
        seed: u64,
        dir: &Path,
    ) -> Result<(Vec<PathBuf>, String)> {
        require(rec, Stage::Finetune, Stage::Autorabi)?;
        rec.invalidate_from(Stage::Finetune);
        let mut backend = self.backend(rec)?;
        let mut artifacts = Vec::new();
        let mut summary = Vec::new();
        for q in 0..2 {
            let guess = rec.qubits[q]
                .rabi_x90_amp
                .ok_or_else(|| missing(Stage::Finetune, Stage::Autorabi))?;
            let echoes = self.echo(&backend, q, derive_seed(seed, 4 * q as u64 + 3))?;
            let f_q = echoes[1].optimum;
            let mut cal = backend.calibration(q);
            cal.f_q = f_q;
            backend.set_calibration(q, cal)?;
            rec.qubits[q].f_q = Some(f_q);
            for (name, s) in [("coarse", &echoes[0]), ("fine", &echoes[1])] {
                artifacts.push(write_json(
                    &dir.join(format!("finetune_q{q}_echo_{name}.json")),
                    s,
                )?);
                artifacts.push(write_text(
                    &dir.join(format!("finetune_q{q}_echo_{name}.csv")),
                    &s.to_csv(),
                )?);
            }
            let s90 = self.stack(
                &backend,
                q,
                StackGate::X90,
                guess,
                derive_seed(seed, 4 * q as u64),
            )?;
            let s180 = self.stack(
                &backend,
                q,
                StackGate::X180,
                (2.0 * s90.optimum).min(1.0 / (1.0 + self.cfg.finetune.span)),
                derive_seed(seed, 4 * q as u64 + 1),
            )?;
            let mut cal = backend.calibration(q);
            cal.x90_amp = s90.optimum;
            cal.x180_amp = s180.optimum;
            backend.set_calibration(q, cal)?;
            let eps = readout_assignment_error(
                &backend,
                q,
                self.cfg.finetune.readout_shots,
                derive_seed(seed, 4 * q as u64 + 2),
            )?;
            let qr = &mut rec.qubits[q];
            qr.x90_amp = Some(s90.optimum);
            qr.x180_amp = Some(s180.optimum);
            qr.readout_error = Some(eps);
            for (name, s) in [("x90", &s90), ("x180", &s180)] {
                artifacts.push(write_json(
                    &dir.join(format!("finetune_q{q}_{name}.json")),
                    s,
                )?);
                artifacts.push(write_text(
                    &dir.join(format!("finetune_q{q}_{name}.csv")),
                    &s.to_csv(),
                )?);
            }
            summary.push(format!(
                "q{q}: f_q {f_q:.6} GHz, x90 {:.5}, x180 {:.5}, readout error {:.4}",
                s90.optimum, s180.optimum, eps
            ));
        }
        Ok((artifacts, summary.join("\n")))
    }

    fn crsweep(
        &self,
        rec: &mut CalibrationRecord,
        seed: u64,
        dir: &Path,
    ) -> Result<(Vec<PathBuf>, String)> {
        require(rec, Stage::Crsweep, Stage::Finetune)?;
        rec.invalidate_from(Stage::Crsweep);
        let backend = self.backend(rec)?;
        let sweep = cr_amplitude_sweep(&backend, &self.cfg.cnot.sweep, seed)?;
        rec.cr_amp = Some(sweep.optimal_amp);
        let artifacts = vec![
            write_json(&dir.join("crsweep.json"), &sweep)?,
            write_text(&dir.join("crsweep.csv"), &sweep.to_csv())?,
        ];
        Ok((
            artifacts,
            format!("optimal CR amplitude {:.5}", sweep.optimal_amp),
        ))
    }

    fn xyfit(
        &self,
        rec: &mut CalibrationRecord,
        seed: u64,
        dir: &Path,
    ) -> Result<(Vec<PathBuf>, String)> {
        require(rec, Stage::Xyfit, Stage::Crsweep)?;
        let amp = rec
            .cr_amp
            .ok_or_else(|| missing(Stage::Xyfit, Stage::Crsweep))?;
        rec.invalidate_from(Stage::Xyfit);
        let backend = self.backend(rec)?;
        let mut cfg = self.cfg.cnot.clone();
        cfg.fit.readout_error = [
            rec.qubits[0].readout_error.unwrap_or(0.0),
            rec.qubits[1].readout_error.unwrap_or(0.0),
        ];
        let cal = correct_cnot(&backend, amp, &cfg, seed)?;
        rec.cnot = Some(CnotRecord {
            angles: cal.angles,
            secondary: cal.secondary,
            residual: cal.residual,
            rounds: cal.measurements.len() - 1,
        });
        let mut artifacts = vec![write_json(&dir.join("xyfit.json"), &cal)?];
        for (k, m) in cal.measurements.iter().enumerate() {
            artifacts.push(write_text(
                &dir.join(format!("xyfit_round{k}.csv")),
                &m.curve.to_csv(),
            )?);
        }
        let a = cal.angles;
        Ok((
            artifacts,
            format!(
                "θ = ({:.4}, {:.4}, {:.4}, {:.4}) rad, verification residual {:.4} rad",
                a.theta1, a.theta2, a.theta3, a.theta4, cal.residual
            ),
        ))
    }

    fn rb(
        &self,
        rec: &mut CalibrationRecord,
        seed: u64,
        dir: &Path,
    ) -> Result<(Vec<PathBuf>, String)> {
        let rc = &self.cfg.rb;
        let injected: Vec<Injection> =
            rc.inject.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        let background = rc.background[rc.n_qubits - 1];
        let mut noise = injected.clone();
        if background > 0.0 {
            noise.push(Injection {
                attach: Attach::Clifford,
                channel: Channel::Depolarizing {
                    epsilon: background,
                },
            });
        }
        let gates = match rc.gates {
            RbGates::Auto if rec.cnot.is_some() => RbGates::Device,
            RbGates::Auto => RbGates::Ideal,
            g => g,
        };
        let backend = self.backend(rec)?;
        let device;
        let mut ideal;
        let gs: &dyn GateSet = match gates {
            RbGates::Device => {
                let cnot = if rc.n_qubits == 1 {
                    require(rec, Stage::Rb, Stage::Finetune)?;
                    None
                } else {
                    require(rec, Stage::Rb, Stage::Xyfit)?;
                    match (rec.cnot, rec.cr_amp) {
                        (Some(c), Some(a)) => Some((a, c.angles)),
                        _ => return Err(missing(Stage::Rb, Stage::Xyfit)),
                    }
                };
                let mut d = DeviceGateSet {
                    backend: &backend,
                    n_qubits: rc.n_qubits,
                    cnot,
                    clifford_noise: Vec::new(),
                    target_noise: Vec::new(),
                };
                for i in &noise {
                    match i.attach {
                        Attach::Clifford => d.clifford_noise.push(i.channel),
                        Attach::Target => d.target_noise.push(i.channel),
                    }
                }
                device = d;
                &device
            }
            _ => {
                ideal = ChannelGateSet::new(rc.n_qubits);
                for i in &noise {
                    ideal.inject(*i);
                }
                &ideal
            }
        };
        rec.rb = None;
        let s = srb(gs, &rc.sequences, derive_seed(seed, 0))?;
        let target = match rc.interleave {
            Some(Target::Cnot) if rc.n_qubits == 1 => Some(Target::X90),
            t => t,
        };
        let i = match target {
            Some(t) => Some(irb(gs, t, &rc.sequences, derive_seed(seed, 1), &s)?),
            None => None,
        };
        let x = if rc.xrb {
            Some(xrb(gs, &rc.sequences, derive_seed(seed, 2), &s)?)
        } else {
            None
        };
        let mut artifacts = Vec::new();
        let mut emit = |name: &str, r: &RbResult| -> Result<()> {
            artifacts.push(write_json(&dir.join(format!("rb_{name}.json")), r)?);
            artifacts.push(write_text(
                &dir.join(format!("rb_{name}.csv")),
                &r.to_csv(),
            )?);
            Ok(())
        };
        emit("srb", &s)?;
        if let Some(r) = &i {
            emit("irb", r)?;
        }
        if let Some(r) = &x {
            emit("xrb", r)?;
        }
        let record = RbRecord {
            n_qubits: rc.n_qubits,
            gates,
            injected,
            background,
            srb_p: s.decay,
            srb_p_se: s.decay_se,
            process_infidelity: s.process_infidelity.unwrap_or(f64::NAN),
            interleaved: target,
            gate_infidelity: i.as_ref().and_then(|r| r.gate_infidelity),
            gate_infidelity_se: i.as_ref().and_then(|r| r.gate_infidelity_se),
            nonphysical: i.as_ref().is_some_and(|r| r.nonphysical),
            xrb_u: x.as_ref().map(|r| r.decay),
            unitary_error: x.as_ref().and_then(|r| r.unitary_error),
            stochastic_error: x.as_ref().and_then(|r| r.stochastic_error),
        };
        let mut summary = format!(
            "{}-qubit SRB p = {:.5} ± {:.5}, process infidelity {:.3e}",
            rc.n_qubits, record.srb_p, record.srb_p_se, record.process_infidelity
        );
        if let (Some(t), Some(r), Some(se)) =
            (target, record.gate_infidelity, record.gate_infidelity_se)
        {
            summary.push_str(&format!("\nIRB {t:?}: infidelity {r:.3e} ± {se:.1e}"));
        }
        if let (Some(u), Some(ue), Some(se)) =
            (record.xrb_u, record.unitary_error, record.stochastic_error)
        {
            summary.push_str(&format!(
                "\nXRB u = {u:.5}: unitary {ue:.3e}, stochastic {se:.3e}"
            ));
        }
        rec.rb = Some(record);
        Ok((artifacts, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(tag: f64) -> CalibrationRecord {
        let mut r = CalibrationRecord::new();
        r.cr_amp = Some(tag);
        r.stamp(Stage::Crsweep, 3);
        r
    }

    #[test]
    fn store_round_trip_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path().join("s.jsonl"));
        assert!(store.latest([0, 1]).unwrap().is_none());
        let a = store.append(record(0.1)).unwrap();
        assert_eq!(a.record.version, 1);
        assert_eq!(store.latest([0, 1]).unwrap().unwrap(), a);
        let b = store.append(record(0.2)).unwrap();
        assert_eq!(b.record.version, 2);
        assert_eq!(
            store.latest([0, 1]).unwrap().unwrap().record.cr_amp,
            Some(0.2)
        );
        assert!(!dir.path().join("s.jsonl.lock").exists());
    }

    #[test]
    fn truncated_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let store = RecordStore::new(&path);
        store.append(record(0.1)).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        let line = serde_json::to_string(&Envelope {
            timestamp: Utc::now(),
            record: record(0.9),
        })
        .unwrap();
        text.push_str(&line[..line.len() / 2]);
        fs::write(&path, text).unwrap();
        let all = store.read_all().unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].record.cr_amp, Some(0.1));
        // appending after the damage keeps both intact records readable
        let c = store.append(record(0.3)).unwrap();
        assert_eq!(c.record.version, 2);
        assert_eq!(store.read_all().unwrap().len(), 2);
    }

    #[test]
    fn locked_store_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::new(dir.path().join("s.jsonl"));
        fs::write(dir.path().join("s.jsonl.lock"), "").unwrap();
        assert!(matches!(store.append(record(0.1)), Err(Error::Io(_))));
        assert!(store.read_all().unwrap().is_empty());
    }

    #[test]
    fn config_requires_seed() {
        assert!(toml::from_str::<RunConfig>("output_dir = 'x'").is_err());
        let c: RunConfig = toml::from_str("seed = 7\n[finetune]\npoints = 21").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.finetune.points, 21);
        assert_eq!(c.rb, RbStageConfig::default());
        assert!(toml::from_str::<RunConfig>("seed = 7\nbogus = 1").is_err());
        let j: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "finetune": {"points": 21}}"#).unwrap();
        assert_eq!(j, c);
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::with_seed(1);
        c.truth = Some(PathBuf::from("/definitely/not/here.toml"));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::with_seed(1);
        c.finetune.x90_stack = 6;
        assert!(c.validate().is_err());
        let mut c = RunConfig::with_seed(1);
        c.rb.inject = vec!["depolarizing=3".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn invalidation_drops_downstream_state() {
        let mut r = CalibrationRecord::new();
        r.qubits[0].x90_amp = Some(0.4);
        r.cr_amp = Some(0.5);
        for s in Stage::ALL {
            r.stamp(s, 0);
        }
        r.invalidate_from(Stage::Crsweep);
        assert_eq!(r.stages(), vec![Stage::Autorabi, Stage::Finetune]);
        assert_eq!(r.qubits[0].x90_amp, Some(0.4));
        assert_eq!(r.cr_amp, None);
    }

    fn quick_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::with_seed(42);
        c.output_dir = dir.to_path_buf();
        c.autorabi.budget = 6;
        c
    }

    #[test]
    fn stages_enforce_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(quick_config(dir.path())).unwrap();
        for s in [Stage::Finetune, Stage::Crsweep, Stage::Xyfit] {
            match p.run(s) {
                Err(Error::Dependency(m)) => assert!(m.contains("run `"), "{m}"),
                other => panic!("{s}: {other:?}"),
            }
        }
        let mut c = quick_config(dir.path());
        c.rb.gates = RbGates::Device;
        match Pipeline::new(c).unwrap().run(Stage::Rb) {
            Err(Error::Dependency(m)) => assert!(m.contains("run `autorabi` first"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(p.store().read_all().unwrap().is_empty());
    }

    #[test]
    fn ideal_rb_without_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick_config(dir.path());
        c.rb.n_qubits = 1;
        c.rb.inject = vec!["depolarizing=0.02".into()];
        c.rb.interleave = Some(Target::X90);
        let out = Pipeline::new(c).unwrap().run(Stage::Rb).unwrap();
        let rb = out.envelope.record.rb.unwrap();
        assert_eq!(rb.gates, RbGates::Ideal);
        let (r, se) = (rb.gate_infidelity.unwrap(), rb.gate_infidelity_se.unwrap());
        assert!((r - 0.01).abs() <= 3.0 * se + 1e-9, "{r} ± {se}");
        for a in &out.artifacts {
            assert!(a.is_file(), "{}", a.display());
        }
    }
}
