//! Trial-by-trial simulation of a Bell session.
//!
//! Each trial consumes one setting bit per party, samples outcomes from the
//! noisy quantum state and then erases each outcome independently with the
//! arm's detection inefficiency. Trials only happen on clock pulses where
//! both parties have a bit waiting; idle pulses leave no record.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::{
    apply_noise, calibrated_noise, conditional_tables, make_state, BasisSettings, MeasurementBasis,
    NoiseModel, StateKind,
};

pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;
pub const LOG_HEADER: &str = "#mdlbell-log v1";
/// Margins at or below this are treated as no margin at all.
pub const TIMING_RESOLUTION_NS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("negative distance {0} m")]
    NegativeDistance(f64),
    #[error("bitstream contains {found:?} at position {position}; only '0' and '1' are allowed")]
    InvalidBit { position: usize, found: char },
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Source-to-station distances and the setting-to-detection response time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub source_to_alice_m: f64,
    pub source_to_bob_m: f64,
    pub setting_response_ns: f64,
    /// Survey uncertainty applied to both distances in the worst-case margin.
    pub distance_uncertainty_m: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            source_to_alice_m: 87.0,
            source_to_bob_m: 88.0,
            setting_response_ns: 150.0,
            distance_uncertainty_m: 2.0,
        }
    }
}

/// Light time over the shorter arm minus the response time, in ns.
/// Positive means the setting choice completes before light from the
/// source could reach the other station.
pub fn timing_margin(geometry: &Geometry) -> Result<f64, SessionError> {
    let Geometry {
        source_to_alice_m: da,
        source_to_bob_m: db,
        setting_response_ns,
        ..
    } = *geometry;
    if let Some(d) = [da, db].into_iter().find(|d| *d < 0.0) {
        return Err(SessionError::NegativeDistance(d));
    }
    Ok(da.min(db) / SPEED_OF_LIGHT_M_PER_S * 1e9 - setting_response_ns)
}

/// [`timing_margin`] with both distances shortened by their uncertainty.
pub fn timing_margin_worst_case(geometry: &Geometry) -> Result<f64, SessionError> {
    let u = geometry.distance_uncertainty_m;
    timing_margin(&Geometry {
        source_to_alice_m: (geometry.source_to_alice_m - u).max(0.0),
        source_to_bob_m: (geometry.source_to_bob_m - u).max(0.0),
        ..*geometry
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingCheck {
    pub margin_ns: f64,
    pub worst_case_margin_ns: f64,
    /// Margin exceeds [`TIMING_RESOLUTION_NS`].
    pub space_like: bool,
}

pub fn timing_check(geometry: &Geometry) -> Result<TimingCheck, SessionError> {
    let margin_ns = timing_margin(geometry)?;
    Ok(TimingCheck {
        margin_ns,
        worst_case_margin_ns: timing_margin_worst_case(geometry)?,
        space_like: margin_ns > TIMING_RESOLUTION_NS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub pulse_rate_hz: f64,
    pub pulse_width_ns: f64,
    pub state: StateKind,
    /// White noise, dephasing and per-arm efficiencies.
    pub noise: NoiseModel,
    pub bases: BasisSettings,
    pub geometry: Geometry,
    pub rng_seed: u64,
    pub max_trials: Option<u64>,
}

impl SessionConfig {
    /// Noise-free source for `kind` with its standard bases.
    pub fn ideal(kind: StateKind) -> Self {
        SessionConfig {
            pulse_rate_hz: 1e5,
            pulse_width_ns: 10.0,
            state: kind,
            noise: NoiseModel::NONE,
            bases: BasisSettings::for_kind(kind),
            geometry: Geometry::default(),
            rng_seed: 0,
            max_trials: None,
        }
    }

    /// Source with noise calibrated to the reported visibilities (CHSH) or
    /// fidelity (MDL), perfect detectors.
    pub fn calibrated(kind: StateKind) -> Self {
        SessionConfig {
            noise: calibrated_noise(kind),
            ..SessionConfig::ideal(kind)
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::InvalidConfig(m));
        if !(self.pulse_rate_hz > 0.0 && self.pulse_rate_hz.is_finite()) {
            return bad(format!("pulse_rate_hz must be positive, got {}", self.pulse_rate_hz));
        }
        if !(self.pulse_width_ns > 0.0) {
            return bad(format!("pulse_width_ns must be positive, got {}", self.pulse_width_ns));
        }
        let g = &self.geometry;
        for (name, v) in [
            ("distance_alice_m", g.source_to_alice_m),
            ("distance_bob_m", g.source_to_bob_m),
            ("response_ns", g.setting_response_ns),
            ("distance_uncertainty_m", g.distance_uncertainty_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        self.noise
            .validated()
            .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn pulse_period_ns(&self) -> f64 {
        1e9 / self.pulse_rate_hz
    }

    /// Parses the flat `key = value` config format. Unknown keys are errors;
    /// `preset` must come first if present since it resets everything else.
    pub fn from_kv_text(text: &str) -> Result<Self, SessionError> {
        let mut cfg = SessionConfig::calibrated(StateKind::ChshMaximal);
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SessionError::ConfigSyntax {
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("{key}: {value:?} is not a number")))
            };
            match key {
                "preset" => {
                    cfg = match value {
                        "chsh" => SessionConfig::calibrated(StateKind::ChshMaximal),
                        "mdl" => SessionConfig::calibrated(StateKind::MdlNonmaximal),
                        "chsh-ideal" => SessionConfig::ideal(StateKind::ChshMaximal),
                        "mdl-ideal" => SessionConfig::ideal(StateKind::MdlNonmaximal),
                        other => return Err(err(format!("unknown preset {other:?}"))),
                    }
                }
                "noise" => {
                    cfg.noise = match value {
                        "none" => NoiseModel {
                            white: 0.0,
                            dephasing: 0.0,
                            ..cfg.noise
                        },
                        "calibrated" => NoiseModel {
                            eta_a: cfg.noise.eta_a,
                            eta_b: cfg.noise.eta_b,
                            ..calibrated_noise(cfg.state)
                        },
                        other => return Err(err(format!("unknown noise mode {other:?}"))),
                    }
                }
                "pulse_rate_hz" => cfg.pulse_rate_hz = num()?,
                "pulse_width_ns" => cfg.pulse_width_ns = num()?,
                "white_noise" => cfg.noise.white = num()?,
                "dephasing" => cfg.noise.dephasing = num()?,
                "eta_a" => cfg.noise.eta_a = num()?,
                "eta_b" => cfg.noise.eta_b = num()?,
                "angle_a0" => cfg.bases.alice[0] = MeasurementBasis::new(num()?),
                "angle_a1" => cfg.bases.alice[1] = MeasurementBasis::new(num()?),
                "angle_b0" => cfg.bases.bob[0] = MeasurementBasis::new(num()?),
                "angle_b1" => cfg.bases.bob[1] = MeasurementBasis::new(num()?),
                "distance_alice_m" => cfg.geometry.source_to_alice_m = num()?,
                "distance_bob_m" => cfg.geometry.source_to_bob_m = num()?,
                "response_ns" => cfg.geometry.setting_response_ns = num()?,
                "distance_uncertainty_m" => cfg.geometry.distance_uncertainty_m = num()?,
                "seed" => {
                    cfg.rng_seed = value
                        .parse()
                        .map_err(|_| err(format!("seed: {value:?} is not an integer")))?
                }
                "max_trials" => {
                    cfg.max_trials = Some(
                        value
                            .parse()
                            .map_err(|_| err(format!("max_trials: {value:?} is not an integer")))?,
                    )
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of one trial; `None` is a missed detection.
pub type Detection = Option<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub time_ns: u64,
    pub x: u8,
    pub y: u8,
    pub a: Detection,
    pub b: Detection,
}

impl TrialRecord {
    pub fn is_coincidence(&self) -> bool {
        self.a.is_some() && self.b.is_some()
    }
}

fn detection_char(d: Detection) -> char {
    match d {
        Some(0) => '0',
        Some(_) => '1',
        None => '-',
    }
}

impl fmt::Display for TrialRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.trial,
            self.time_ns,
            self.x,
            self.y,
            detection_char(self.a),
            detection_char(self.b)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLog {
    pub records: Vec<TrialRecord>,
}

impl SessionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn coincidences(&self) -> usize {
        self.records.iter().filter(|r| r.is_coincidence()).count()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{r}")?;
        }
        out.flush()
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(parse_record(line).map_err(|message| LogError::Parse {
                line: idx + 1,
                message,
            })?);
        }
        Ok(SessionLog { records })
    }
}

fn parse_record(line: &str) -> Result<TrialRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let int = |i: usize, name: &str| {
        fields[i]
            .parse::<u64>()
            .map_err(|_| format!("{name}: {:?} is not an integer", fields[i]))
    };
    let bit = |i: usize, name: &str| match fields[i] {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        other => Err(format!("{name}: {other:?} is not 0 or 1")),
    };
    let detection = |i: usize, name: &str| match fields[i] {
        "0" => Ok(Some(0u8)),
        "1" => Ok(Some(1u8)),
        "-" => Ok(None),
        other => Err(format!("{name}: {other:?} is not 0, 1 or -")),
    };
    Ok(TrialRecord {
        trial: int(0, "trial")?,
        time_ns: int(1, "time_ns")?,
        x: bit(2, "x")?,
        y: bit(3, "y")?,
        a: detection(4, "a")?,
        b: detection(5, "b")?,
    })
}

pub fn write_log(path: impl AsRef<Path>, log: &SessionLog) -> Result<(), LogError> {
    let file = fs::File::create(path)?;
    log.write_to(BufWriter::new(file))?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<SessionLog, LogError> {
    SessionLog::parse(&fs::read_to_string(path)?)
}

/// Appends records to a log file as they are produced.
pub struct LogWriter {
    out: BufWriter<fs::File>,
}

impl LogWriter {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{LOG_HEADER}")?;
        Ok(LogWriter { out })
    }

    pub fn append(&mut self, record: &TrialRecord) -> io::Result<()> {
        writeln!(self.out, "{record}")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// A stream of setting bits. `None` means exhausted.
pub trait BitSource {
    fn next_bit(&mut self) -> Option<u8>;
}

/// Bits parsed from ASCII `0`/`1` text, whitespace ignored.
#[derive(Debug, Clone, Default)]
pub struct BitStreamSource {
    bits: VecDeque<u8>,
}

impl BitStreamSource {
    pub fn from_bits(bits: impl IntoIterator<Item = u8>) -> Self {
        BitStreamSource {
            bits: bits.into_iter().collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, SessionError> {
        Ok(Self::from_bits(parse_bits(text)?))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn remaining(&self) -> usize {
        self.bits.len()
    }
}

impl BitSource for BitStreamSource {
    fn next_bit(&mut self) -> Option<u8> {
        self.bits.pop_front()
    }
}

/// ASCII `0`/`1` characters to bits; whitespace is skipped.
pub fn parse_bits(text: &str) -> Result<Vec<u8>, SessionError> {
    let mut bits = Vec::with_capacity(text.len());
    for (position, c) in text.chars().enumerate() {
        match c {
            '0' => bits.push(0),
            '1' => bits.push(1),
            c if c.is_whitespace() => {}
            found => return Err(SessionError::InvalidBit { position, found }),
        }
    }
    Ok(bits)
}

/// Uniform bits from a seeded ChaCha stream, optionally length-limited.
#[derive(Debug, Clone)]
pub struct PrngSource {
    rng: ChaCha8Rng,
    remaining: Option<u64>,
}

impl PrngSource {
    pub fn new(seed: u64) -> Self {
        PrngSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: None,
        }
    }

    pub fn with_limit(seed: u64, limit: u64) -> Self {
        PrngSource {
            remaining: Some(limit),
            ..Self::new(seed)
        }
    }

    pub fn take_bits(&mut self, n: usize) -> Vec<u8> {
        (0..n).map_while(|_| self.next_bit()).collect()
    }
}

impl BitSource for PrngSource {
    fn next_bit(&mut self) -> Option<u8> {
        if let Some(r) = &mut self.remaining {
            if *r == 0 {
                return None;
            }
            *r -= 1;
        }
        Some(self.rng.random::<bool>() as u8)
    }
}

#[derive(Debug, Default)]
struct QueueState {
    bits: VecDeque<u8>,
    closed: bool,
}

/// Blocking bit queue fed from another thread.
#[derive(Debug, Clone, Default)]
pub struct LiveQueue {
    shared: Arc<(Mutex<QueueState>, Condvar)>,
}

impl LiveQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, bits: &[u8]) {
        let (lock, cv) = &*self.shared;
        lock.lock().expect("queue poisoned").bits.extend(bits);
        cv.notify_all();
    }

    /// Wakes blocked readers; they drain what is left and then see exhaustion.
    pub fn close(&self) {
        let (lock, cv) = &*self.shared;
        lock.lock().expect("queue poisoned").closed = true;
        cv.notify_all();
    }

    pub fn queued(&self) -> usize {
        self.shared.0.lock().expect("queue poisoned").bits.len()
    }
}

impl BitSource for LiveQueue {
    fn next_bit(&mut self) -> Option<u8> {
        let (lock, cv) = &*self.shared;
        let mut state = lock.lock().expect("queue poisoned");
        loop {
            if let Some(bit) = state.bits.pop_front() {
                return Some(bit);
            }
            if state.closed {
                return None;
            }
            state = cv.wait(state).expect("queue poisoned");
        }
    }
}

impl<S: BitSource + ?Sized> BitSource for &mut S {
    fn next_bit(&mut self) -> Option<u8> {
        (**self).next_bit()
    }
}

impl<S: BitSource + ?Sized> BitSource for Box<S> {
    fn next_bit(&mut self) -> Option<u8> {
        (**self).next_bit()
    }
}

/// Setting pairs in arrival order. Waits on A first, then B, so a stalled
/// side blocks the pair; ends when either side is exhausted.
pub struct PairBits<A, B> {
    a: A,
    b: B,
}

pub fn pair_bits<A: BitSource, B: BitSource>(a: A, b: B) -> PairBits<A, B> {
    PairBits { a, b }
}

impl<A: BitSource, B: BitSource> Iterator for PairBits<A, B> {
    type Item = (u8, u8);

    fn next(&mut self) -> Option<(u8, u8)> {
        let x = self.a.next_bit()?;
        let y = self.b.next_bit()?;
        Some((x, y))
    }
}

/// One stream split alternately: even positions to A, odd to B.
pub struct InterleavedPairs<S> {
    source: S,
}

pub fn pair_interleaved<S: BitSource>(source: S) -> InterleavedPairs<S> {
    InterleavedPairs { source }
}

impl<S: BitSource> Iterator for InterleavedPairs<S> {
    type Item = (u8, u8);

    fn next(&mut self) -> Option<(u8, u8)> {
        let x = self.source.next_bit()?;
        let y = self.source.next_bit()?;
        Some((x, y))
    }
}

/// Samples trials for a fixed configuration.
#[derive(Debug, Clone)]
pub struct Simulator {
    /// `P(ab|xy)` per setting pair, indexed `[2x + y][2a + b]`.
    tables: [[f64; 4]; 4],
    eta_a: f64,
    eta_b: f64,
    period_ns: f64,
    rng: ChaCha8Rng,
    next_trial: u64,
}

impl Simulator {
    pub fn new(config: &SessionConfig) -> Result<Self, SessionError> {
        config.validate()?;
        let state = apply_noise(&make_state(config.state), &config.noise);
        let tables = conditional_tables(&state, &config.bases).map(|t| t.0);
        Ok(Simulator {
            tables,
            eta_a: config.noise.eta_a,
            eta_b: config.noise.eta_b,
            period_ns: config.pulse_period_ns(),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            next_trial: 0,
        })
    }

    pub fn trials_run(&self) -> u64 {
        self.next_trial
    }

    pub fn outcome_probabilities(&self, x: u8, y: u8) -> [f64; 4] {
        self.tables[(2 * x + y) as usize]
    }

    /// Runs one trial on clock pulse `pulse`.
    pub fn trial(&mut self, x: u8, y: u8, pulse: u64) -> TrialRecord {
        let table = &self.tables[(2 * x + y) as usize];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut ab = 3;
        for (k, p) in table.iter().enumerate() {
            acc += p;
            if u < acc {
                ab = k;
                break;
            }
        }
        let (a, b) = ((ab >> 1) as u8, (ab & 1) as u8);
        let a = (self.eta_a >= 1.0 || self.rng.random::<f64>() < self.eta_a).then_some(a);
        let b = (self.eta_b >= 1.0 || self.rng.random::<f64>() < self.eta_b).then_some(b);
        let record = TrialRecord {
            trial: self.next_trial,
            time_ns: (pulse as f64 * self.period_ns).round() as u64,
            x,
            y,
            a,
            b,
        };
        self.next_trial += 1;
        record
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxTrials,
    SourceExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRun {
    pub log: SessionLog,
    pub stop: StopReason,
}

/// Runs trials until `max_trials` or until a bit source runs dry.
/// Offline sources never idle, so trial `k` sits on pulse `k`.
pub fn run_session<A: BitSource, B: BitSource>(
    config: &SessionConfig,
    source_a: A,
    source_b: B,
) -> Result<SessionRun, SessionError> {
    run_pairs(config, pair_bits(source_a, source_b))
}

/// [`run_session`] over an already paired stream.
pub fn run_pairs(
    config: &SessionConfig,
    pairs: impl Iterator<Item = (u8, u8)>,
) -> Result<SessionRun, SessionError> {
    let mut sim = Simulator::new(config)?;
    let limit = config.max_trials.unwrap_or(u64::MAX);
    let mut records = Vec::new();
    let mut pairs = pairs;
    let stop = loop {
        if sim.trials_run() >= limit {
            break StopReason::MaxTrials;
        }
        let Some((x, y)) = pairs.next() else {
            break StopReason::SourceExhausted;
        };
        let pulse = sim.trials_run();
        records.push(sim.trial(x, y, pulse));
    };
    Ok(SessionRun {
        log: SessionLog { records },
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn reference_geometry_margin() {
        let m = timing_margin(&Geometry::default()).unwrap();
        assert_abs_diff_eq!(m, 87.0 / SPEED_OF_LIGHT_M_PER_S * 1e9 - 150.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m, 140.2, epsilon = 0.1);
        let check = timing_check(&Geometry::default()).unwrap();
        assert!(check.space_like);
        assert!(check.worst_case_margin_ns < check.margin_ns);
        assert_abs_diff_eq!(check.worst_case_margin_ns, 85.0 / SPEED_OF_LIGHT_M_PER_S * 1e9 - 150.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_distance_and_boundary_flag_violation() {
        let g = Geometry {
            source_to_alice_m: 0.0,
            source_to_bob_m: 0.0,
            ..Geometry::default()
        };
        assert_eq!(timing_margin(&g).unwrap(), -150.0);
        assert!(!timing_check(&g).unwrap().space_like);

        let g = Geometry {
            setting_response_ns: 290.2,
            ..Geometry::default()
        };
        let check = timing_check(&g).unwrap();
        assert_abs_diff_eq!(check.margin_ns, 0.0, epsilon = 1e-3);
        assert!(!check.space_like);
    }

    #[test]
    fn negative_distance_rejected() {
        let g = Geometry {
            source_to_bob_m: -1.0,
            ..Geometry::default()
        };
        assert!(matches!(timing_margin(&g), Err(SessionError::NegativeDistance(_))));
    }

    #[test]
    fn margin_monotonicity() {
        let mut prev = f64::NEG_INFINITY;
        for d in [0.0, 10.0, 50.0, 87.0, 200.0] {
            let m = timing_margin(&Geometry {
                source_to_alice_m: d,
                source_to_bob_m: d,
                ..Geometry::default()
            })
            .unwrap();
            assert!(m > prev);
            prev = m;
        }
        let mut prev = f64::INFINITY;
        for r in [0.0, 100.0, 150.0, 300.0] {
            let m = timing_margin(&Geometry {
                setting_response_ns: r,
                ..Geometry::default()
            })
            .unwrap();
            assert!(m < prev);
            prev = m;
        }
    }

    #[test]
    fn pairing_examples() {
        let a = BitStreamSource::parse("0101").unwrap();
        let b = BitStreamSource::parse("0011").unwrap();
        let pairs: Vec<_> = pair_bits(a, b).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);

        let a = BitStreamSource::parse("01011").unwrap();
        let b = BitStreamSource::parse("110").unwrap();
        assert_eq!(pair_bits(a, b).count(), 3);

        let s = BitStreamSource::parse("0101").unwrap();
        let pairs: Vec<_> = pair_interleaved(s).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 1)]);
    }

    #[test]
    fn live_pairing_blocks_on_stalled_side() {
        let a = LiveQueue::new();
        let b = LiveQueue::new();
        a.push(&[1, 0, 1]);
        let (feed_a, feed_b) = (a.clone(), b.clone());
        let handle = thread::spawn(move || pair_bits(feed_a, feed_b).collect::<Vec<_>>());
        thread::sleep(Duration::from_millis(50));
        assert!(!handle.is_finished(), "pairs emitted while B stalled");
        assert_eq!(a.queued(), 2, "A's first bit is held, rest queued");
        b.push(&[0, 0]);
        thread::sleep(Duration::from_millis(20));
        b.close();
        assert_eq!(handle.join().unwrap(), vec![(1, 0), (0, 0)]);
    }

    #[test]
    fn bitstream_parsing() {
        let s = BitStreamSource::parse("01 1\n0\t1").unwrap();
        assert_eq!(s.remaining(), 5);
        assert!(matches!(
            BitStreamSource::parse("0120"),
            Err(SessionError::InvalidBit { position: 2, found: '2' })
        ));
    }

    #[test]
    fn prng_source_limit() {
        let mut s = PrngSource::with_limit(3, 10);
        assert_eq!(s.take_bits(20).len(), 10);
        assert_eq!(s.next_bit(), None);
    }

    #[test]
    fn empty_sources_and_zero_trials() {
        let cfg = SessionConfig::ideal(StateKind::ChshMaximal);
        let run = run_session(&cfg, BitStreamSource::default(), PrngSource::new(1)).unwrap();
        assert!(run.log.is_empty());
        assert_eq!(run.stop, StopReason::SourceExhausted);

        let cfg = SessionConfig {
            max_trials: Some(0),
            ..cfg
        };
        let run = run_session(&cfg, PrngSource::new(1), PrngSource::new(2)).unwrap();
        assert!(run.log.is_empty());
        assert_eq!(run.stop, StopReason::MaxTrials);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SessionConfig {
            max_trials: Some(5000),
            noise: NoiseModel {
                eta_a: 0.7,
                ..NoiseModel::NONE
            },
            ..SessionConfig::calibrated(StateKind::MdlNonmaximal)
        };
        let one = run_session(&cfg, PrngSource::new(1), PrngSource::new(2)).unwrap();
        let two = run_session(&cfg, PrngSource::new(1), PrngSource::new(2)).unwrap();
        assert_eq!(one, two);
        let other = SessionConfig { rng_seed: 9, ..cfg };
        let three = run_session(&other, PrngSource::new(1), PrngSource::new(2)).unwrap();
        assert_ne!(one.log, three.log);
    }

    #[test]
    fn time_tags_follow_the_clock() {
        let cfg = SessionConfig {
            max_trials: Some(3),
            ..SessionConfig::ideal(StateKind::ChshMaximal)
        };
        let run = run_session(&cfg, PrngSource::new(1), PrngSource::new(2)).unwrap();
        let tags: Vec<u64> = run.log.records.iter().map(|r| r.time_ns).collect();
        assert_eq!(tags, vec![0, 10_000, 20_000]);
    }

    #[test]
    fn log_round_trip_and_errors() {
        let cfg = SessionConfig {
            max_trials: Some(1000),
            noise: NoiseModel {
                eta_a: 0.8,
                eta_b: 0.6,
                ..NoiseModel::NONE
            },
            ..SessionConfig::ideal(StateKind::ChshMaximal)
        };
        let log = run_session(&cfg, PrngSource::new(5), PrngSource::new(6)).unwrap().log;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.log");
        write_log(&path, &log).unwrap();
        assert_eq!(read_log(&path).unwrap(), log);

        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#mdlbell-log v1\n"));
        let truncated = &text[..text.len() - 3];
        match SessionLog::parse(truncated) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 1001),
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = dir.path().join("empty.log");
        fs::write(&empty, "").unwrap();
        assert!(read_log(&empty).unwrap().is_empty());
        assert!(SessionLog::parse("#mdlbell-log v1\n0,0,2,0,1,1\n").is_err());
        assert!(SessionLog::parse("0,0,1,0,x,1").is_err());
    }

    #[test]
    fn config_file_parsing() {
        let cfg = SessionConfig::from_kv_text(
            "# comment\npreset = mdl\nseed = 42\nmax_trials = 100\neta_a = 0.5 # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.state, StateKind::MdlNonmaximal);
        assert_eq!(cfg.rng_seed, 42);
        assert_eq!(cfg.max_trials, Some(100));
        assert_eq!(cfg.noise.eta_a, 0.5);
        assert!(cfg.noise.white > 0.0);

        let cfg = SessionConfig::from_kv_text("preset = chsh\nnoise = none\n").unwrap();
        assert_eq!(cfg.noise, NoiseModel::NONE);

        assert!(matches!(
            SessionConfig::from_kv_text("preset = chsh\nbogus = 1\n"),
            Err(SessionError::ConfigSyntax { line: 2, .. })
        ));
        assert!(matches!(
            SessionConfig::from_kv_text("pulse_rate_hz = 0\n"),
            Err(SessionError::InvalidConfig(_))
        ));
        assert!(SessionConfig::from_kv_text("eta_b = 1.5\n").is_err());
    }
}
