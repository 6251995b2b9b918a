//! Statistical checks on setting bitstreams: four frequency-style tests in
//! the SP 800-22 formulation, overlapping pattern counts and a block
//! min-entropy estimate.
//!
//! The `*_p_values` functions are the bare statistics with no length checks;
//! the `*_test` wrappers enforce the recommended minimum lengths.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::{erf::erfc, gamma::checked_gamma_ur};
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_BLOCK_LEN: usize = 128;
pub const DEFAULT_PATTERN_LEN: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RngStatError {
    #[error("{test}: needs at least {needed} bits, got {got}")]
    InsufficientData {
        test: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown test {0:?}")]
    UnknownTest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitStream {
    pub bits: Vec<u8>,
    pub origin: String,
}

impl BitStream {
    pub fn new(bits: Vec<u8>, origin: impl Into<String>) -> Self {
        BitStream {
            bits,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: String,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    /// Every p-value is at least `alpha`.
    pub pass: bool,
}

impl TestReport {
    fn new(test: &str, p_values: Vec<f64>, alpha: f64) -> Self {
        let pass = p_values.iter().all(|&p| p >= alpha);
        TestReport {
            test: test.to_string(),
            p_values,
            alpha,
            pass,
        }
    }

    pub fn min_p(&self) -> f64 {
        self.p_values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Regularized upper incomplete gamma, with the boundary cases statrs rejects.
fn igamc(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    checked_gamma_ur(a, x).map_or(0.0, |p| p.clamp(0.0, 1.0))
}

fn require(test: &'static str, bits: &[u8], needed: usize) -> Result<(), RngStatError> {
    if bits.len() < needed {
        Err(RngStatError::InsufficientData {
            test,
            needed,
            got: bits.len(),
        })
    } else {
        Ok(())
    }
}

fn ones(bits: &[u8]) -> usize {
    bits.iter().filter(|&&b| b != 0).count()
}

pub fn monobit_p_value(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let s = 2.0 * ones(bits) as f64 - n;
    erfc(s.abs() / n.sqrt() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn block_frequency_p_value(bits: &[u8], block_len: usize) -> f64 {
    let blocks = bits.len() / block_len;
    let m = block_len as f64;
    let chi2: f64 = bits
        .chunks_exact(block_len)
        .map(|blk| {
            let pi = ones(blk) as f64 / m;
            (pi - 0.5).powi(2)
        })
        .sum::<f64>()
        * 4.0
        * m;
    igamc(blocks as f64 / 2.0, chi2 / 2.0)
}

/// Returns 0 when the frequency prerequisite fails, as the suite prescribes.
pub fn runs_p_value(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let pi = ones(bits) as f64 / n;
    if (pi - 0.5).abs() >= 2.0 / n.sqrt() {
        return 0.0;
    }
    let v_obs = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let spread = pi * (1.0 - pi);
    erfc((v_obs as f64 - 2.0 * n * spread).abs() / (2.0 * (2.0 * n).sqrt() * spread)).clamp(0.0, 1.0)
}

/// ψ²_m over cyclically extended overlapping m-bit windows.
fn psi_squared(bits: &[u8], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let n = bits.len();
    let mut counts = vec![0u64; 1 << m];
    let mask = (1usize << m) - 1;
    let mut window = 0usize;
    for i in 0..m - 1 {
        window = (window << 1) | bits[i % n] as usize;
    }
    for i in 0..n {
        window = ((window << 1) | bits[(i + m - 1) % n] as usize) & mask;
        counts[window] += 1;
    }
    let sum_sq: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum();
    (1u64 << m) as f64 / n as f64 * sum_sq - n as f64
}

/// The two serial p-values (first and second differences).
pub fn serial_p_values(bits: &[u8], pattern_len: usize) -> [f64; 2] {
    let m = pattern_len;
    let psi_m = psi_squared(bits, m);
    let psi_m1 = psi_squared(bits, m - 1);
    let psi_m2 = if m >= 2 { psi_squared(bits, m - 2) } else { 0.0 };
    let del1 = psi_m - psi_m1;
    let del2 = psi_m - 2.0 * psi_m1 + psi_m2;
    let dof = |k: i32| 2f64.powi(m as i32 - k);
    [igamc(dof(2), del1 / 2.0), igamc(dof(3), del2 / 2.0)]
}

pub fn monobit_test(bits: &[u8], alpha: f64) -> Result<TestReport, RngStatError> {
    require("monobit", bits, 100)?;
    Ok(TestReport::new("monobit", vec![monobit_p_value(bits)], alpha))
}

pub fn block_frequency_test(
    bits: &[u8],
    block_len: usize,
    alpha: f64,
) -> Result<TestReport, RngStatError> {
    if block_len == 0 {
        return Err(RngStatError::InvalidParameter("block length must be positive".into()));
    }
    require("block-frequency", bits, 20 * block_len)?;
    Ok(TestReport::new(
        "block-frequency",
        vec![block_frequency_p_value(bits, block_len)],
        alpha,
    ))
}

pub fn runs_test(bits: &[u8], alpha: f64) -> Result<TestReport, RngStatError> {
    require("runs", bits, 100)?;
    Ok(TestReport::new("runs", vec![runs_p_value(bits)], alpha))
}

pub fn serial_test(bits: &[u8], pattern_len: usize, alpha: f64) -> Result<TestReport, RngStatError> {
    if !(2..=24).contains(&pattern_len) {
        return Err(RngStatError::InvalidParameter(format!(
            "serial pattern length must be in 2..=24, got {pattern_len}"
        )));
    }
    require("serial", bits, 10 << pattern_len)?;
    Ok(TestReport::new(
        "serial",
        serial_p_values(bits, pattern_len).to_vec(),
        alpha,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "test")]
pub enum RngTest {
    Monobit,
    BlockFrequency { block_len: usize },
    Runs,
    Serial { pattern_len: usize },
}

impl RngTest {
    pub fn all() -> Vec<RngTest> {
        vec![
            RngTest::Monobit,
            RngTest::BlockFrequency {
                block_len: DEFAULT_BLOCK_LEN,
            },
            RngTest::Runs,
            RngTest::Serial {
                pattern_len: DEFAULT_PATTERN_LEN,
            },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            RngTest::Monobit => "monobit",
            RngTest::BlockFrequency { .. } => "block-frequency",
            RngTest::Runs => "runs",
            RngTest::Serial { .. } => "serial",
        }
    }

    /// Parses `all` or a comma list of test names, with default parameters.
    pub fn parse_list(spec: &str) -> Result<Vec<RngTest>, RngStatError> {
        if spec.trim() == "all" {
            return Ok(RngTest::all());
        }
        spec.split(',')
            .map(|name| {
                RngTest::all()
                    .into_iter()
                    .find(|t| t.name() == name.trim())
                    .ok_or_else(|| RngStatError::UnknownTest(name.trim().to_string()))
            })
            .collect()
    }

    pub fn run(&self, bits: &[u8], alpha: f64) -> Result<TestReport, RngStatError> {
        match *self {
            RngTest::Monobit => monobit_test(bits, alpha),
            RngTest::BlockFrequency { block_len } => block_frequency_test(bits, block_len, alpha),
            RngTest::Runs => runs_test(bits, alpha),
            RngTest::Serial { pattern_len } => serial_test(bits, pattern_len, alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub test: String,
    pub report: Option<TestReport>,
    /// Why the test did not run, e.g. too few bits.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub bits: usize,
    pub alpha: f64,
    pub entries: Vec<BatteryEntry>,
}

impl BatteryReport {
    pub fn passed(&self) -> usize {
        self.reports().filter(|r| r.pass).count()
    }

    pub fn failed(&self) -> usize {
        self.reports().filter(|r| !r.pass).count()
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().filter(|e| e.report.is_none()).count()
    }

    pub fn all_pass(&self) -> bool {
        self.skipped() == 0 && self.failed() == 0
    }

    pub fn reports(&self) -> impl Iterator<Item = &TestReport> {
        self.entries.iter().filter_map(|e| e.report.as_ref())
    }

    pub fn report(&self, test: &str) -> Option<&TestReport> {
        self.reports().find(|r| r.test == test)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("test,p_value,alpha,pass\n");
        for e in &self.entries {
            match &e.report {
                Some(r) => {
                    for p in &r.p_values {
                        out.push_str(&format!("{},{:.6},{},{}\n", r.test, p, r.alpha, r.pass));
                    }
                }
                None => out.push_str(&format!("{},,{},skipped\n", e.test, self.alpha)),
            }
        }
        out
    }
}

impl fmt::Display for BatteryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bits: {}  alpha: {}", self.bits, self.alpha)?;
        for e in &self.entries {
            match &e.report {
                Some(r) => {
                    let ps: Vec<String> = r.p_values.iter().map(|p| format!("{p:.6}")).collect();
                    writeln!(
                        f,
                        "{:<16} {:<22} {}",
                        r.test,
                        ps.join(" "),
                        if r.pass { "PASS" } else { "FAIL" }
                    )?;
                }
                None => writeln!(
                    f,
                    "{:<16} {:<22} SKIP ({})",
                    e.test,
                    "-",
                    e.skipped.as_deref().unwrap_or("")
                )?,
            }
        }
        write!(
            f,
            "passed {} / failed {} / skipped {}",
            self.passed(),
            self.failed(),
            self.skipped()
        )
    }
}

/// Runs every test; tests that cannot run are recorded as skipped.
pub fn run_battery(bits: &[u8], tests: &[RngTest], alpha: f64) -> BatteryReport {
    let entries = tests
        .iter()
        .map(|t| match t.run(bits, alpha) {
            Ok(report) => BatteryEntry {
                test: t.name().to_string(),
                report: Some(report),
                skipped: None,
            },
            Err(e) => BatteryEntry {
                test: t.name().to_string(),
                report: None,
                skipped: Some(e.to_string()),
            },
        })
        .collect();
    BatteryReport {
        bits: bits.len(),
        alpha,
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternHits {
    pub pattern: String,
    pub count: usize,
    pub positions: Vec<usize>,
}

/// Overlapping occurrences of each pattern. Patterns are `0`/`1` strings;
/// an empty pattern never matches.
pub fn pattern_scan(bits: &[u8], patterns: &[&str]) -> Result<Vec<PatternHits>, RngStatError> {
    patterns
        .iter()
        .map(|&pattern| {
            let pat: Vec<u8> = pattern
                .chars()
                .map(|c| match c {
                    '0' => Ok(0u8),
                    '1' => Ok(1u8),
                    _ => Err(RngStatError::InvalidParameter(format!(
                        "pattern {pattern:?} is not a bit string"
                    ))),
                })
                .collect::<Result<_, _>>()?;
            let positions = find_overlapping(bits, &pat);
            Ok(PatternHits {
                pattern: pattern.to_string(),
                count: positions.len(),
                positions,
            })
        })
        .collect()
}

fn find_overlapping(bits: &[u8], pat: &[u8]) -> Vec<usize> {
    let k = pat.len();
    if k == 0 || k > bits.len() {
        return Vec::new();
    }
    if k > 64 {
        return bits
            .windows(k)
            .enumerate()
            .filter(|(_, w)| *w == pat)
            .map(|(i, _)| i)
            .collect();
    }
    // Rolling k-bit register compared against the packed pattern.
    let mask = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
    let target = pat.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64);
    let mut reg = 0u64;
    let mut out = Vec::new();
    for (i, &b) in bits.iter().enumerate() {
        reg = ((reg << 1) | (b & 1) as u64) & mask;
        if i + 1 >= k && reg == target {
            out.push(i + 1 - k);
        }
    }
    out
}

/// −log2 of the most frequent overlapping block's frequency, per bit.
pub fn min_entropy(bits: &[u8], block_len: usize) -> Result<f64, RngStatError> {
    if !(1..=24).contains(&block_len) {
        return Err(RngStatError::InvalidParameter(format!(
            "block length must be in 1..=24, got {block_len}"
        )));
    }
    require("min-entropy", bits, 10 << block_len)?;
    let mut counts = vec![0u64; 1 << block_len];
    for w in bits.windows(block_len) {
        let idx = w.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        counts[idx] += 1;
    }
    let windows = (bits.len() - block_len + 1) as f64;
    let max = *counts.iter().max().expect("nonempty") as f64;
    Ok((-(max / windows).log2() / block_len as f64).max(0.0))
}

/// Online order-2 Markov guesser: predicts each bit from the two before
/// it and scores how often the guess is right. Ties guess 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovPredictor {
    counts: [[u64; 2]; 4],
    history: u8,
    seen: u64,
    predictions: u64,
    correct: u64,
}

impl MarkovPredictor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, bit: u8) {
        let bit = bit & 1;
        if self.seen >= 2 {
            let ctx = self.counts[self.history as usize];
            let guess = u8::from(ctx[1] > ctx[0]);
            self.predictions += 1;
            self.correct += u64::from(guess == bit);
            self.counts[self.history as usize][bit as usize] += 1;
        }
        self.history = ((self.history << 1) | bit) & 3;
        self.seen += 1;
    }

    pub fn observe_all(&mut self, bits: &[u8]) {
        for &b in bits {
            self.observe(b);
        }
    }

    /// Fraction of bits guessed correctly so far; `None` before any guess.
    pub fn score(&self) -> Option<f64> {
        (self.predictions > 0).then(|| self.correct as f64 / self.predictions as f64)
    }

    pub fn predictions(&self) -> u64 {
        self.predictions
    }
}
