//! From trial logs to coincidence counts, estimates and reports.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ineq::{
    cell, chsh_value, critical_l_chsh, critical_l_mdl_counts, ChshConvention, IneqError, MdlBound,
    ProbTable, Provenance,
};
use crate::rngstat::{run_battery, BatteryReport, RngTest, DEFAULT_ALPHA};
use crate::session::{timing_check, Geometry, SessionLog, TimingCheck, TrialRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no coincidences recorded")]
    NoData,
    #[error("basis pair A{x}B{y} has no coincidences")]
    EmptyBasis { x: u8, y: u8 },
    #[error("basis pair A{x}B{y} is only partially resolved")]
    IncompleteBasis { x: u8, y: u8 },
    #[error("invalid count table: {0}")]
    InvalidCounts(String),
    #[error("every section was dropped ({0} sections had undefined estimates)")]
    AllSectionsDropped(usize),
    #[error("invalid section spec {0:?}; expected e.g. 1h, 5m, 30s or 10000-trials")]
    InvalidSection(String),
    #[error(transparent)]
    Ineq(#[from] IneqError),
}

const ALL_KNOWN: u16 = u16::MAX;

/// Coincidence counts `N(abxy)`. Tables transcribed from publications may
/// resolve only some cells, with per-basis totals supplied separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    counts: [u64; 16],
    known: u16,
    basis_totals: [u64; 4],
}

impl Default for CountTable {
    fn default() -> Self {
        CountTable {
            counts: [0; 16],
            known: ALL_KNOWN,
            basis_totals: [0; 4],
        }
    }
}

impl CountTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [u64; 16]) -> Self {
        let mut totals = [0; 4];
        for (i, c) in counts.iter().enumerate() {
            totals[i & 3] += c;
        }
        CountTable {
            counts,
            known: ALL_KNOWN,
            basis_totals: totals,
        }
    }

    /// Only cells in `known` are resolved; `basis_totals` are the `N(xy)`.
    pub fn partial(counts: [u64; 16], known: u16, basis_totals: [u64; 4]) -> Result<Self, PipelineError> {
        for (i, c) in counts.iter().enumerate() {
            if known & (1 << i) == 0 && *c != 0 {
                return Err(PipelineError::InvalidCounts(format!("unresolved cell {i} has count {c}")));
            }
        }
        for xy in 0..4 {
            let resolved: u64 = (0..4).map(|ab| counts[(ab << 2) | xy]).sum();
            let complete = (0..4).all(|ab| known & (1 << ((ab << 2) | xy)) != 0);
            if resolved > basis_totals[xy] || (complete && resolved != basis_totals[xy]) {
                return Err(PipelineError::InvalidCounts(format!(
                    "basis xy={xy:02b}: cells sum to {resolved}, total is {}",
                    basis_totals[xy]
                )));
            }
        }
        Ok(CountTable {
            counts,
            known,
            basis_totals,
        })
    }

    /// Adds one coincidence. Only valid on fully resolved tables.
    pub fn record(&mut self, a: u8, b: u8, x: u8, y: u8) {
        debug_assert!(self.is_complete());
        self.counts[cell(a, b, x, y)] += 1;
        self.basis_totals[(2 * x + y) as usize] += 1;
    }

    pub fn count(&self, a: u8, b: u8, x: u8, y: u8) -> u64 {
        self.counts[cell(a, b, x, y)]
    }

    pub fn counts(&self) -> &[u64; 16] {
        &self.counts
    }

    pub fn is_known(&self, a: u8, b: u8, x: u8, y: u8) -> bool {
        self.known & (1 << cell(a, b, x, y)) != 0
    }

    pub fn is_complete(&self) -> bool {
        self.known == ALL_KNOWN
    }

    pub fn basis_total(&self, x: u8, y: u8) -> u64 {
        self.basis_totals[(2 * x + y) as usize]
    }

    pub fn grand_total(&self) -> u64 {
        self.basis_totals.iter().sum()
    }

    /// Every count multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        CountTable {
            counts: self.counts.map(|c| c * k),
            known: self.known,
            basis_totals: self.basis_totals.map(|c| c * k),
        }
    }
}

/// Coincidence counts published for the two Hardy-point runs.
pub mod fixtures {
    use super::CountTable;
    use crate::ineq::cell;

    fn hardy_cells(n0000: u64, n0101: u64, n1010: u64, n0011: u64, totals: [u64; 4]) -> CountTable {
        let mut counts = [0; 16];
        let mut known = 0u16;
        for ((a, b, x, y), n) in [
            ((0, 0, 0, 0), n0000),
            ((0, 1, 0, 1), n0101),
            ((1, 0, 1, 0), n1010),
            ((0, 0, 1, 1), n0011),
        ] {
            counts[cell(a, b, x, y)] = n;
            known |= 1 << cell(a, b, x, y);
        }
        CountTable::partial(counts, known, totals).expect("fixture is consistent")
    }

    /// Human-chosen settings, 1 h sections.
    pub fn human_run() -> CountTable {
        hardy_cells(2833, 100, 193, 86, [34408, 40085, 41009, 19853])
    }

    /// QRNG-chosen settings, 5 min sections.
    pub fn qrng_run() -> CountTable {
        hardy_cells(38911, 1214, 3246, 1577, [463901, 453939, 471152, 462591])
    }

    /// Published correlators `E(A_x, B_y)` in order xy = 00, 01, 10, 11.
    pub const CHSH_CORRELATORS: [f64; 4] = [-0.751, 0.651, 0.657, 0.745];
}

/// Counts coincidence trials; trials with a missed detection are skipped.
pub fn ingest(log: &SessionLog) -> CountTable {
    ingest_records(&log.records)
}

pub fn ingest_records(records: &[TrialRecord]) -> CountTable {
    let mut table = CountTable::new();
    for r in records {
        if let (Some(a), Some(b)) = (r.a, r.b) {
            table.record(a, b, r.x, r.y);
        }
    }
    table
}

/// `P(abxy) = N(abxy)/N`, `P(xy) = N(xy)/N`.
pub fn probabilities(counts: &CountTable) -> Result<ProbTable, PipelineError> {
    let total = counts.grand_total();
    if total == 0 {
        return Err(PipelineError::NoData);
    }
    let n = total as f64;
    let joint = counts.counts.map(|c| c as f64 / n);
    let dist = counts.basis_totals.map(|c| c as f64 / n);
    Ok(ProbTable::partial(joint, dist, counts.known, Provenance::Ingested)?)
}

/// Critical `l` of the MDL inequality computed on counts, as a reduced
/// fraction when it lies below 1/4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountBound {
    pub l: f64,
    pub clamped: bool,
    pub fraction: Option<(u64, u64)>,
}

pub fn critical_l_from_counts(counts: &CountTable) -> Result<CountBound, PipelineError> {
    for (a, b, x, y) in [(0, 0, 0, 0), (0, 1, 0, 1), (1, 0, 1, 0), (0, 0, 1, 1)] {
        if !counts.is_known(a, b, x, y) {
            return Err(IneqError::UnknownCell {
                spec: "mdl".into(),
                a,
                b,
                x,
                y,
            }
            .into());
        }
    }
    let ratio = critical_l_mdl_counts(
        counts.count(0, 0, 0, 0),
        [counts.count(0, 1, 0, 1), counts.count(1, 0, 1, 0), counts.count(0, 0, 1, 1)],
    )?;
    // l ≥ 1/4 ⇔ 4·num ≥ den
    if 4 * ratio.numerator >= ratio.denominator {
        return Ok(CountBound {
            l: 0.25,
            clamped: true,
            fraction: None,
        });
    }
    Ok(CountBound {
        l: ratio.value(),
        clamped: false,
        fraction: Some((ratio.numerator, ratio.denominator)),
    })
}

/// `E_xy = Σ (−1)^(a+b) N(abxy) / N(xy)` for each basis pair.
pub fn correlators(counts: &CountTable) -> Result<[f64; 4], PipelineError> {
    let mut out = [0.0; 4];
    for xy in 0..4u8 {
        let (x, y) = (xy >> 1, xy & 1);
        if (0..4u8).any(|ab| !counts.is_known(ab >> 1, ab & 1, x, y)) {
            return Err(PipelineError::IncompleteBasis { x, y });
        }
        let total = counts.basis_total(x, y);
        if total == 0 {
            return Err(PipelineError::EmptyBasis { x, y });
        }
        let signed: i64 = (0..4u8)
            .map(|ab| {
                let n = counts.count(ab >> 1, ab & 1, x, y) as i64;
                if (ab >> 1) ^ (ab & 1) == 0 { n } else { -n }
            })
            .sum();
        out[xy as usize] = signed as f64 / total as f64;
    }
    Ok(out)
}

/// Best-of-8 CHSH value of a count table.
pub fn chsh_from_counts(counts: &CountTable) -> Result<f64, PipelineError> {
    Ok(chsh_value(correlators(counts)?, ChshConvention::BestOf8)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionSpec {
    /// Consecutive windows of this many nanoseconds of time tag.
    Duration { ns: u64 },
    /// Consecutive runs of this many trials.
    Trials { count: u64 },
}

impl FromStr for SectionSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, PipelineError> {
        let bad = || PipelineError::InvalidSection(s.to_string());
        let s = s.trim();
        if let Some(n) = s.strip_suffix("-trials") {
            let count: u64 = n.parse().map_err(|_| bad())?;
            return if count == 0 { Err(bad()) } else { Ok(SectionSpec::Trials { count }) };
        }
        let split = s.find(|c: char| !c.is_ascii_digit()).ok_or_else(bad)?;
        let (num, unit) = s.split_at(split);
        let num: u64 = num.parse().map_err(|_| bad())?;
        let scale: u64 = match unit {
            "ms" => 1_000_000,
            "s" => 1_000_000_000,
            "m" | "min" => 60_000_000_000,
            "h" => 3_600_000_000_000,
            _ => return Err(bad()),
        };
        match num.checked_mul(scale) {
            Some(ns) if ns > 0 => Ok(SectionSpec::Duration { ns }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SectionSpec::Trials { count } => write!(f, "{count}-trials"),
            SectionSpec::Duration { ns } => {
                for (unit, scale) in [("h", 3_600_000_000_000u64), ("m", 60_000_000_000), ("s", 1_000_000_000), ("ms", 1_000_000)] {
                    if ns % scale == 0 {
                        return write!(f, "{}{unit}", ns / scale);
                    }
                }
                write!(f, "{ns}ns")
            }
        }
    }
}

/// Splits records into consecutive sections. Duration sections are keyed on
/// the time tag, so gaps in the clock leave no empty sections behind.
pub fn sections<'a>(records: &'a [TrialRecord], spec: &SectionSpec) -> Vec<&'a [TrialRecord]> {
    match *spec {
        SectionSpec::Trials { count } => records.chunks(count as usize).collect(),
        SectionSpec::Duration { ns } => {
            let mut out = Vec::new();
            let mut start = 0;
            for i in 1..=records.len() {
                if i == records.len() || records[i].time_ns / ns != records[start].time_ns / ns {
                    out.push(&records[start..i]);
                    start = i;
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    /// Computed on all data at once; sections only supply the spread.
    Pooled,
    /// Mean of per-section values.
    Sectioned,
}

impl FromStr for EstimateMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooled" => Ok(EstimateMethod::Pooled),
            "sectioned" => Ok(EstimateMethod::Sectioned),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionedEstimate {
    pub value: f64,
    pub method: EstimateMethod,
    /// Sample standard deviation of the section values.
    pub uncertainty: f64,
    /// `uncertainty / √sections`.
    pub std_error: f64,
    pub section: Option<SectionSpec>,
    pub section_values: Vec<f64>,
    /// Sections whose value was undefined (too few counts).
    pub dropped: usize,
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn sectioned_estimate<F>(
    records: &[TrialRecord],
    method: EstimateMethod,
    section: Option<SectionSpec>,
    what: &str,
    f: F,
) -> Result<SectionedEstimate, PipelineError>
where
    F: Fn(&CountTable) -> Result<f64, PipelineError>,
{
    let mut values = Vec::new();
    let mut dropped = 0;
    if let Some(spec) = &section {
        for (i, sec) in sections(records, spec).into_iter().enumerate() {
            match f(&ingest_records(sec)) {
                Ok(v) => values.push(v),
                Err(e) => {
                    log::warn!("{what}: dropping section {i}: {e}");
                    dropped += 1;
                }
            }
        }
        if values.is_empty() {
            return Err(PipelineError::AllSectionsDropped(dropped));
        }
    }
    let value = match method {
        EstimateMethod::Pooled => f(&ingest_records(records))?,
        EstimateMethod::Sectioned if values.is_empty() => f(&ingest_records(records))?,
        EstimateMethod::Sectioned => values.iter().sum::<f64>() / values.len() as f64,
    };
    let uncertainty = sample_std(&values);
    Ok(SectionedEstimate {
        value,
        method,
        uncertainty,
        std_error: if values.is_empty() { 0.0 } else { uncertainty / (values.len() as f64).sqrt() },
        section,
        section_values: values,
        dropped,
    })
}

/// Critical `l` of the MDL inequality.
pub fn estimate_l(
    log: &SessionLog,
    method: EstimateMethod,
    section: Option<SectionSpec>,
) -> Result<SectionedEstimate, PipelineError> {
    sectioned_estimate(&log.records, method, section, "l", |c| Ok(critical_l_from_counts(c)?.l))
}

/// Best-of-8 CHSH value.
pub fn estimate_chsh(
    log: &SessionLog,
    method: EstimateMethod,
    section: Option<SectionSpec>,
) -> Result<SectionedEstimate, PipelineError> {
    sectioned_estimate(&log.records, method, section, "chsh", chsh_from_counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InequalityChoice {
    Mdl,
    Chsh,
    #[default]
    Both,
}

impl FromStr for InequalityChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mdl" => Ok(InequalityChoice::Mdl),
            "chsh" => Ok(InequalityChoice::Chsh),
            "both" => Ok(InequalityChoice::Both),
            other => Err(format!("unknown inequality {other:?}; expected mdl, chsh or both")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub inequality: InequalityChoice,
    pub method: EstimateMethod,
    pub section: Option<SectionSpec>,
    pub geometry: Option<Geometry>,
    pub rng_alpha: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            inequality: InequalityChoice::Both,
            method: EstimateMethod::Pooled,
            section: None,
            geometry: None,
            rng_alpha: DEFAULT_ALPHA,
        }
    }
}

/// An estimate, or the reason it could not be formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimate<T> {
    Available(T),
    Unavailable(String),
}

impl<T> Estimate<T> {
    fn from_result<E: fmt::Display>(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Estimate::Available(v),
            Err(e) => Estimate::Unavailable(e.to_string()),
        }
    }

    pub fn available(&self) -> Option<&T> {
        match self {
            Estimate::Available(v) => Some(v),
            Estimate::Unavailable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LEstimate {
    pub estimate: SectionedEstimate,
    /// Exact `S₃/(N(0000)+3·S₃)` on the pooled counts, when below 1/4.
    pub pooled_fraction: Option<(u64, u64)>,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshEstimate {
    pub correlators: [f64; 4],
    pub s: SectionedEstimate,
    pub critical_l: MdlBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSummary {
    pub alice: BatteryReport,
    pub bob: BatteryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub trials: u64,
    pub coincidences: u64,
    pub counts: CountTable,
    pub l: Option<Estimate<LEstimate>>,
    pub chsh: Option<Estimate<ChshEstimate>>,
    pub timing: Option<TimingCheck>,
    pub rng: Option<RngSummary>,
}

/// Full analysis of a trial log.
pub fn analyze(log: &SessionLog, opts: &AnalysisOptions) -> Analysis {
    let counts = ingest(log);
    let want_l = opts.inequality != InequalityChoice::Chsh;
    let want_chsh = opts.inequality != InequalityChoice::Mdl;
    let l = want_l.then(|| {
        Estimate::from_result((|| {
            let estimate = estimate_l(log, opts.method, opts.section)?;
            let pooled = critical_l_from_counts(&counts)?;
            Ok::<_, PipelineError>(LEstimate {
                estimate,
                pooled_fraction: pooled.fraction,
                clamped: pooled.clamped,
            })
        })())
    });
    let chsh = want_chsh.then(|| {
        Estimate::from_result((|| {
            let correlators = correlators(&counts)?;
            let s = estimate_chsh(log, opts.method, opts.section)?;
            let critical_l = critical_l_chsh(s.value.clamp(0.0, 4.0))?;
            Ok::<_, PipelineError>(ChshEstimate {
                correlators,
                s,
                critical_l,
            })
        })())
    });
    let rng = (!log.is_empty()).then(|| {
        let xs: Vec<u8> = log.records.iter().map(|r| r.x).collect();
        let ys: Vec<u8> = log.records.iter().map(|r| r.y).collect();
        RngSummary {
            alice: run_battery(&xs, &RngTest::all(), opts.rng_alpha),
            bob: run_battery(&ys, &RngTest::all(), opts.rng_alpha),
        }
    });
    Analysis {
        trials: log.len() as u64,
        coincidences: counts.grand_total(),
        counts,
        l,
        chsh,
        timing: opts.geometry.and_then(|g| timing_check(&g).ok()),
        rng,
    }
}

/// Analysis of a bare count table, e.g. a transcribed publication table.
pub fn analyze_counts(counts: &CountTable, inequality: InequalityChoice) -> Analysis {
    let plain = |v: f64| SectionedEstimate {
        value: v,
        method: EstimateMethod::Pooled,
        uncertainty: 0.0,
        std_error: 0.0,
        section: None,
        section_values: Vec::new(),
        dropped: 0,
    };
    let l = (inequality != InequalityChoice::Chsh).then(|| {
        Estimate::from_result(critical_l_from_counts(counts).map(|b| LEstimate {
            estimate: plain(b.l),
            pooled_fraction: b.fraction,
            clamped: b.clamped,
        }))
    });
    let chsh = (inequality != InequalityChoice::Mdl).then(|| {
        Estimate::from_result((|| {
            let correlators = correlators(counts)?;
            let s = chsh_value(correlators, ChshConvention::BestOf8)?;
            Ok::<_, PipelineError>(ChshEstimate {
                correlators,
                s: plain(s),
                critical_l: critical_l_chsh(s)?,
            })
        })())
    });
    Analysis {
        trials: counts.grand_total(),
        coincidences: counts.grand_total(),
        counts: counts.clone(),
        l,
        chsh,
        timing: None,
        rng: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

/// The four cells the MDL inequality reads, one per basis pair.
const HARDY_CELLS: [(u8, u8, u8, u8); 4] = [(0, 0, 0, 0), (0, 1, 0, 1), (1, 0, 1, 0), (0, 0, 1, 1)];

fn cell_label(a: u8, b: u8, x: u8, y: u8) -> String {
    format!("P({a}{b}{x}{y})")
}

pub fn render(analysis: &Analysis, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(analysis),
        ReportFormat::Csv => render_csv(analysis),
        ReportFormat::Json => render_json(analysis),
    }
}

pub fn render_json(analysis: &Analysis) -> String {
    let mut s = serde_json::to_string_pretty(analysis).expect("analysis serializes");
    s.push('\n');
    s
}

fn render_text(an: &Analysis) -> String {
    let mut out = String::new();
    if an.coincidences == 0 {
        let _ = writeln!(out, "no data: {} trials, 0 coincidences", an.trials);
        return out;
    }
    let n = an.counts.grand_total() as f64;
    let _ = writeln!(out, "{:<6} {:>10} {:>10}  P(abxy)", "Basis", "Measured", "Total");
    for (a, b, x, y) in HARDY_CELLS {
        let measured = an.counts.count(a, b, x, y);
        let _ = writeln!(
            out,
            "A{x}B{y}   {:>10} {:>10}  {}={:.5}",
            measured,
            an.counts.basis_total(x, y),
            cell_label(a, b, x, y),
            measured as f64 / n
        );
    }
    let _ = writeln!(out, "coincidences: {}  trials: {}", an.coincidences, an.trials);
    match &an.l {
        Some(Estimate::Available(l)) => {
            let e = &l.estimate;
            let _ = write!(out, "l: {:.4}", e.value);
            if let Some((p, q)) = l.pooled_fraction {
                let _ = write!(out, " (pooled {p}/{q})");
            }
            if l.clamped {
                let _ = write!(out, " (clamped: no measurement dependence needed)");
            }
            if let Some(spec) = e.section {
                let _ = write!(
                    out,
                    "  ± {:.4} sd, ± {:.4} se over {} sections of {spec}",
                    e.uncertainty,
                    e.std_error,
                    e.section_values.len()
                );
                if e.dropped > 0 {
                    let _ = write!(out, ", {} dropped", e.dropped);
                }
            }
            let _ = writeln!(out);
        }
        Some(Estimate::Unavailable(why)) => {
            let _ = writeln!(out, "l: unavailable ({why})");
        }
        None => {}
    }
    match &an.chsh {
        Some(Estimate::Available(c)) => {
            let [e00, e01, e10, e11] = c.correlators;
            let _ = write!(out, "S: {:.4}", c.s.value);
            if c.s.section.is_some() {
                let _ = write!(out, " ± {:.4} sd", c.s.uncertainty);
            }
            let _ = writeln!(
                out,
                "  E = [{e00:.4}, {e01:.4}, {e10:.4}, {e11:.4}]  critical l: {:.4}{}",
                c.critical_l.l,
                if c.critical_l.clamped { " (no violation)" } else { "" }
            );
        }
        Some(Estimate::Unavailable(why)) => {
            let _ = writeln!(out, "S: unavailable ({why})");
        }
        None => {}
    }
    if let Some(t) = &an.timing {
        let _ = writeln!(
            out,
            "timing margin: {:+.1} ns (worst case {:+.1} ns) {}",
            t.margin_ns,
            t.worst_case_margin_ns,
            if t.space_like { "space-like" } else { "VIOLATION" }
        );
    }
    if let Some(rng) = &an.rng {
        for (who, rep) in [("alice", &rng.alice), ("bob", &rng.bob)] {
            let _ = writeln!(
                out,
                "rng {who}: passed {} failed {} skipped {} (alpha {})",
                rep.passed(),
                rep.failed(),
                rep.skipped(),
                rep.alpha
            );
        }
    }
    out
}

fn render_csv(an: &Analysis) -> String {
    let mut out = String::from("quantity,value,uncertainty\n");
    let mut row = |k: &str, v: String, u: String| {
        let _ = writeln!(out, "{k},{v},{u}");
    };
    row("trials", an.trials.to_string(), String::new());
    row("coincidences", an.coincidences.to_string(), String::new());
    for x in 0..2u8 {
        for y in 0..2u8 {
            row(&format!("N(A{x}B{y})"), an.counts.basis_total(x, y).to_string(), String::new());
        }
    }
    let n = an.counts.grand_total();
    for i in 0..16u8 {
        let (a, b, x, y) = (i >> 3, (i >> 2) & 1, (i >> 1) & 1, i & 1);
        if an.counts.is_known(a, b, x, y) {
            let c = an.counts.count(a, b, x, y);
            row(&format!("N({a}{b}{x}{y})"), c.to_string(), String::new());
            if n > 0 {
                row(&cell_label(a, b, x, y), format!("{:.6}", c as f64 / n as f64), String::new());
            }
        }
    }
    match &an.l {
        Some(Estimate::Available(l)) => {
            row("l", format!("{}", l.estimate.value), format!("{}", l.estimate.uncertainty));
            row("l_std_error", format!("{}", l.estimate.std_error), String::new());
        }
        Some(Estimate::Unavailable(_)) => row("l", "NA".into(), String::new()),
        None => {}
    }
    match &an.chsh {
        Some(Estimate::Available(c)) => {
            for (k, e) in c.correlators.iter().enumerate() {
                row(&format!("E(A{}B{})", k >> 1, k & 1), format!("{e}"), String::new());
            }
            row("S", format!("{}", c.s.value), format!("{}", c.s.uncertainty));
            row("critical_l_chsh", format!("{}", c.critical_l.l), String::new());
        }
        Some(Estimate::Unavailable(_)) => row("S", "NA".into(), String::new()),
        None => {}
    }
    if let Some(t) = &an.timing {
        row("timing_margin_ns", format!("{}", t.margin_ns), String::new());
        row("timing_margin_worst_ns", format!("{}", t.worst_case_margin_ns), String::new());
    }
    if let Some(rng) = &an.rng {
        for (who, rep) in [("alice", &rng.alice), ("bob", &rng.bob)] {
            for r in rep.reports() {
                row(&format!("rng_{who}_{}", r.test), format!("{}", r.min_p()), String::new());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ineq::critical_l_mdl;
    use crate::qstate::{NoiseModel, StateKind};
    use crate::session::{run_session, PrngSource, SessionConfig};
    use approx::assert_abs_diff_eq;

    fn rec(trial: u64, x: u8, y: u8, a: Option<u8>, b: Option<u8>) -> TrialRecord {
        TrialRecord {
            trial,
            time_ns: trial * 10_000,
            x,
            y,
            a,
            b,
        }
    }

    #[test]
    fn ingest_counts_coincidences_only() {
        let log = SessionLog {
            records: vec![
                rec(0, 0, 0, Some(0), Some(0)),
                rec(1, 0, 1, Some(1), Some(0)),
                rec(2, 1, 0, Some(0), Some(1)),
                rec(3, 1, 1, Some(1), Some(1)),
                rec(4, 1, 1, None, Some(1)),
            ],
        };
        let t = ingest(&log);
        assert_eq!(t.grand_total(), 4);
        assert_eq!(t.basis_total(1, 1), 1);
        assert_eq!(t.count(1, 1, 1, 1), 1);
    }

    #[test]
    fn published_probabilities() {
        let p = probabilities(&fixtures::human_run()).unwrap();
        let round5 = |v: f64| (v * 1e5).round() / 1e5;
        assert_eq!(round5(p.joint(0, 0, 0, 0)), 0.02093);
        assert_eq!(round5(p.joint(0, 1, 0, 1)), 0.00074);
        assert_eq!(round5(p.joint(1, 0, 1, 0)), 0.00143);
        assert_eq!(round5(p.joint(0, 0, 1, 1)), 0.00064);
        assert_eq!(fixtures::human_run().grand_total(), 135355);

        let p2 = probabilities(&fixtures::qrng_run()).unwrap();
        assert_eq!(round5(p2.joint(0, 0, 0, 0)), 0.02101);
    }

    #[test]
    fn published_critical_l() {
        let b = critical_l_from_counts(&fixtures::human_run()).unwrap();
        assert_eq!(b.fraction, Some((379, 3970)));
        assert_abs_diff_eq!(b.l, 0.0955, epsilon = 5e-5);
        let b = critical_l_from_counts(&fixtures::qrng_run()).unwrap();
        assert!((b.l - 0.106).abs() < 1e-3);
        let via_probs = critical_l_mdl(&probabilities(&fixtures::qrng_run()).unwrap()).unwrap();
        assert_abs_diff_eq!(via_probs.l, b.l, epsilon = 1e-15);
    }

    #[test]
    fn published_table_renders() {
        let text = render(&analyze_counts(&fixtures::human_run(), InequalityChoice::Mdl), ReportFormat::Text);
        for needle in [
            "A0B0         2833      34408  P(0000)=0.02093",
            "A0B1          100      40085  P(0101)=0.00074",
            "A1B0          193      41009  P(1010)=0.00143",
            "A1B1           86      19853  P(0011)=0.00064",
            "(pooled 379/3970)",
        ] {
            assert!(text.contains(needle), "missing {needle:?} in\n{text}");
        }
    }

    #[test]
    fn single_count_and_zero_total() {
        let mut t = CountTable::new();
        assert_eq!(probabilities(&t), Err(PipelineError::NoData));
        t.record(1, 0, 0, 1);
        let p = probabilities(&t).unwrap();
        assert_eq!(p.joint(1, 0, 0, 1), 1.0);
        assert_eq!(p.joint_cells().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn partial_counts_validated() {
        let mut counts = [0; 16];
        counts[0] = 10;
        assert!(CountTable::partial(counts, 1, [5, 0, 0, 0]).is_err());
        assert!(CountTable::partial(counts, 0, [10, 0, 0, 0]).is_err());
        assert!(CountTable::partial(counts, 1, [10, 1, 1, 1]).is_ok());
    }

    #[test]
    fn chsh_needs_every_basis() {
        let mut t = CountTable::new();
        t.record(0, 0, 0, 0);
        t.record(0, 0, 0, 1);
        t.record(0, 0, 1, 0);
        assert_eq!(chsh_from_counts(&t), Err(PipelineError::EmptyBasis { x: 1, y: 1 }));
        assert!(PipelineError::EmptyBasis { x: 1, y: 1 }.to_string().contains("A1B1"));
        assert!(matches!(
            chsh_from_counts(&fixtures::human_run()),
            Err(PipelineError::IncompleteBasis { .. })
        ));
    }

    #[test]
    fn perfectly_correlated_log_gives_two() {
        let mut t = CountTable::new();
        for x in 0..2 {
            for y in 0..2 {
                t.record(0, 0, x, y);
                t.record(1, 1, x, y);
            }
        }
        assert_eq!(chsh_from_counts(&t).unwrap(), 2.0);
        assert_eq!(correlators(&t).unwrap(), [1.0; 4]);
    }

    #[test]
    fn published_correlators_give_reported_s() {
        let s = chsh_value(fixtures::CHSH_CORRELATORS, ChshConvention::BestOf8).unwrap();
        assert_abs_diff_eq!(s, 2.804, epsilon = 1e-12);
    }

    #[test]
    fn section_spec_parsing() {
        assert_eq!("1h".parse::<SectionSpec>().unwrap(), SectionSpec::Duration { ns: 3_600_000_000_000 });
        assert_eq!("5m".parse::<SectionSpec>().unwrap(), SectionSpec::Duration { ns: 300_000_000_000 });
        assert_eq!("250-trials".parse::<SectionSpec>().unwrap(), SectionSpec::Trials { count: 250 });
        for bad in ["", "h", "0s", "5x", "0-trials", "-trials"] {
            assert!(bad.parse::<SectionSpec>().is_err(), "{bad}");
        }
        for s in ["1h", "5m", "30s", "250ms", "10-trials"] {
            assert_eq!(s.parse::<SectionSpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn sections_by_time_and_count() {
        let records: Vec<_> = (0..10).map(|i| rec(i, 0, 0, Some(0), Some(0))).collect();
        let by_count = sections(&records, &SectionSpec::Trials { count: 4 });
        assert_eq!(by_count.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        // time tags are 10 µs apart
        let by_time = sections(&records, &SectionSpec::Duration { ns: 30_000 });
        assert_eq!(by_time.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert!(sections(&[], &SectionSpec::Trials { count: 3 }).is_empty());
    }

    #[test]
    fn sample_std_basics() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert_abs_diff_eq!(sample_std(&[1.0, 3.0]), std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    fn simulated(kind: StateKind, noise: NoiseModel, trials: u64, seed: u64) -> SessionLog {
        let cfg = SessionConfig {
            noise,
            max_trials: Some(trials),
            rng_seed: seed,
            ..SessionConfig::ideal(kind)
        };
        run_session(&cfg, PrngSource::new(seed + 1), PrngSource::new(seed + 2)).unwrap().log
    }

    #[test]
    fn ideal_hardy_gives_zero_l_everywhere() {
        let log = simulated(StateKind::MdlNonmaximal, NoiseModel::NONE, 20_000, 3);
        let e = estimate_l(&log, EstimateMethod::Sectioned, Some(SectionSpec::Trials { count: 5000 })).unwrap();
        assert_eq!(e.section_values, vec![0.0; 4]);
        assert_eq!(e.value, 0.0);
        assert_eq!(e.uncertainty, 0.0);
    }

    #[test]
    fn ingest_matches_session_coincidences() {
        let noise = NoiseModel {
            eta_a: 0.7,
            eta_b: 0.8,
            ..NoiseModel::NONE
        };
        let log = simulated(StateKind::ChshMaximal, noise, 100_000, 11);
        assert_eq!(ingest(&log).grand_total() as usize, log.coincidences());
        assert!(log.coincidences() < log.len());
    }

    #[test]
    fn undefined_sections_dropped() {
        // a section with only A0B0 outcomes 11 has an undefined l
        let mut records: Vec<_> = (0..4).map(|i| rec(i, 0, 0, Some(1), Some(1))).collect();
        records.extend((4..8).map(|i| rec(i, 0, 0, Some(0), Some(0))));
        let log = SessionLog { records };
        let e = estimate_l(&log, EstimateMethod::Sectioned, Some(SectionSpec::Trials { count: 4 })).unwrap();
        assert_eq!(e.dropped, 1);
        assert_eq!(e.section_values, vec![0.0]);
        let bad = SessionLog {
            records: (0..4).map(|i| rec(i, 0, 0, Some(1), Some(1))).collect(),
        };
        assert_eq!(
            estimate_l(&bad, EstimateMethod::Pooled, Some(SectionSpec::Trials { count: 2 })),
            Err(PipelineError::AllSectionsDropped(2))
        );
    }

    #[test]
    fn empty_analysis_reports_no_data() {
        let an = analyze(&SessionLog::default(), &AnalysisOptions::default());
        assert!(render(&an, ReportFormat::Text).starts_with("no data"));
        assert!(matches!(an.l, Some(Estimate::Unavailable(_))));
        assert!(matches!(an.chsh, Some(Estimate::Unavailable(_))));
    }

    #[test]
    fn reports_are_stable_and_json_round_trips() {
        let log = simulated(StateKind::ChshMaximal, NoiseModel::NONE, 20_000, 5);
        let opts = AnalysisOptions {
            section: Some(SectionSpec::Trials { count: 2000 }),
            geometry: Some(Geometry::default()),
            ..AnalysisOptions::default()
        };
        let an = analyze(&log, &opts);
        for f in [ReportFormat::Text, ReportFormat::Csv, ReportFormat::Json] {
            assert_eq!(render(&an, f), render(&analyze(&log, &opts), f));
        }
        let back: Analysis = serde_json::from_str(&render_json(&an)).unwrap();
        assert_eq!(back, an);
        let s = an.chsh.as_ref().unwrap().available().unwrap().s.value;
        assert!((s - 2.0 * std::f64::consts::SQRT_2).abs() < 0.05, "S = {s}");
        assert!(render(&an, ReportFormat::Text).contains("space-like"));
    }
}
