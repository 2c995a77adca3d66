//! Reading recorded CI histories, synthesizing histories, and dataset
//! statistics.
//!
//! Two input routes exist: the canonical CSV (`cycle_id,test_id,verdict,duration_s`)
//! and external CSV dumps described by a [`ColumnMapping`]. Both end in
//! [`validate_history`](crate::domain::validate_history) semantics.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_interned, DomainError, InternedCycle, Interner, TestHistory, Verdict,
};

pub const CANONICAL_HEADER: [&str; 4] = ["cycle_id", "test_id", "verdict", "duration_s"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown verdict token {token:?}")]
    UnknownVerdictToken { line: u64, token: String },
    #[error("column mapping does not match input: {0}")]
    MappingMismatch(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => IngestError::Io(io),
            _ => unreachable!(),
        },
        _ => IngestError::MalformedRow {
            line,
            reason: e.to_string(),
        },
    }
}

/// Accumulates rows into cycles keyed by cycle id.
#[derive(Default)]
struct CycleAccumulator {
    interner: Interner,
    cycles: BTreeMap<u64, Vec<(u32, Verdict, f64)>>,
}

impl CycleAccumulator {
    fn push(&mut self, cycle: u64, test: &str, verdict: Verdict, duration: f64) {
        let t = self.interner.intern(test);
        self.cycles
            .entry(cycle)
            .or_default()
            .push((t, verdict, duration));
    }

    /// Keeps only the last row of every (cycle, test) pair; returns how many
    /// rows were discarded.
    fn dedup_keep_last(&mut self) -> usize {
        let n_names = self.interner.len();
        let mut last = vec![usize::MAX; n_names];
        let mut removed = 0;
        for execs in self.cycles.values_mut() {
            for (i, &(t, _, _)) in execs.iter().enumerate() {
                last[t as usize] = i;
            }
            let before = execs.len();
            let mut i = 0;
            execs.retain(|&(t, _, _)| {
                let keep = last[t as usize] == i;
                i += 1;
                keep
            });
            removed += before - execs.len();
            for &(t, _, _) in execs.iter() {
                last[t as usize] = usize::MAX;
            }
        }
        removed
    }

    fn finish(self) -> Result<TestHistory, IngestError> {
        let cycles = self
            .cycles
            .into_iter()
            .map(|(id, executions)| InternedCycle { id, executions })
            .collect();
        Ok(validate_interned(self.interner.into_names(), cycles)?)
    }
}

fn parse_f64(field: &[u8], line: u64, what: &str) -> Result<f64, IngestError> {
    std::str::from_utf8(field)
        .ok()
        .map(str::trim)
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!(
                "{what} {:?} is not a number",
                String::from_utf8_lossy(field)
            ),
        })
}

fn parse_u64(field: &[u8], line: u64, what: &str) -> Result<u64, IngestError> {
    std::str::from_utf8(field)
        .ok()
        .map(str::trim)
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!(
                "{what} {:?} is not a non-negative integer",
                String::from_utf8_lossy(field)
            ),
        })
}

fn utf8<'a>(field: &'a [u8], line: u64, what: &str) -> Result<&'a str, IngestError> {
    std::str::from_utf8(field).map_err(|_| IngestError::MalformedRow {
        line,
        reason: format!("{what} is not valid UTF-8"),
    })
}

/// Parses the canonical history CSV.
pub fn parse_canonical<R: Read>(input: R) -> Result<TestHistory, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);
    let header = reader.byte_headers().map_err(csv_error)?.clone();
    let names: Vec<&[u8]> = header.iter().collect();
    let expected: Vec<&[u8]> = CANONICAL_HEADER.iter().map(|s| s.as_bytes()).collect();
    if names != expected {
        return Err(IngestError::MalformedRow {
            line: 1,
            reason: format!(
                "header must be `{}`, found `{}`",
                CANONICAL_HEADER.join(","),
                String::from_utf8_lossy(header.as_slice())
            ),
        });
    }

    let mut acc = CycleAccumulator::default();
    let mut record = csv::ByteRecord::new();
    while reader.read_byte_record(&mut record).map_err(csv_error)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cycle = parse_u64(&record[0], line, "cycle_id")?;
        let test = utf8(&record[1], line, "test_id")?;
        if test.is_empty() {
            return Err(IngestError::MalformedRow {
                line,
                reason: "empty test_id".into(),
            });
        }
        let token = utf8(&record[2], line, "verdict")?;
        let verdict = if token.eq_ignore_ascii_case("pass") {
            Verdict::Pass
        } else if token.eq_ignore_ascii_case("fail") {
            Verdict::Fail
        } else {
            return Err(IngestError::UnknownVerdictToken {
                line,
                token: token.to_owned(),
            });
        };
        let duration = parse_f64(&record[3], line, "duration_s")?;
        acc.push(cycle, test, verdict, duration);
    }
    acc.finish()
}

/// Column selected by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    fn resolve(&self, header: &csv::StringRecord, role: &str) -> Result<usize, IngestError> {
        match self {
            ColumnRef::Index(i) if *i < header.len() => Ok(*i),
            ColumnRef::Index(i) => Err(IngestError::MappingMismatch(format!(
                "{role} column index {i} but header has {} columns",
                header.len()
            ))),
            ColumnRef::Name(name) => {
                header.iter().position(|h| h.trim() == name).ok_or_else(|| {
                    IngestError::MappingMismatch(format!("{role} column {name:?} not in header"))
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictClass {
    Pass,
    Fail,
    Drop,
}

/// How cycle identifiers are derived from the cycle column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKey {
    /// The column holds non-negative integers.
    #[default]
    Integer,
    /// Arbitrary tokens, numbered in order of first appearance.
    FirstSeen,
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_unit() -> f64 {
    1.0
}

/// Declarative description of an external CSV history dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub cycle_col: ColumnRef,
    pub test_col: ColumnRef,
    pub verdict_col: ColumnRef,
    pub duration_col: ColumnRef,
    /// Multiplier converting the duration column to seconds.
    #[serde(default = "default_unit")]
    pub duration_unit_s: f64,
    #[serde(default)]
    pub cycle_key: CycleKey,
    /// Replacement duration (seconds) for rows recording a zero or negative
    /// duration. Without it such rows are rejected.
    #[serde(default)]
    pub nonpositive_duration_s: Option<f64>,
    /// Source token -> class. Tokens are matched after trimming,
    /// case-insensitively.
    pub verdict_map: BTreeMap<String, VerdictClass>,
}

impl ColumnMapping {
    pub fn from_toml(text: &str) -> Result<Self, crate::config::ConfigError> {
        let m: Self = crate::config::from_str(text)?;
        m.check()
            .map_err(|message| crate::config::ConfigError::Parse {
                path: None,
                message,
            })?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.delimiter.len() != 1 {
            return Err(format!(
                "delimiter must be a single byte, got {:?}",
                self.delimiter
            ));
        }
        if !(self.duration_unit_s.is_finite() && self.duration_unit_s > 0.0) {
            return Err("duration_unit_s must be positive".into());
        }
        if let Some(d) = self.nonpositive_duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err("nonpositive_duration_s must be positive".into());
            }
        }
        if self.verdict_map.is_empty() {
            return Err("verdict_map is empty".into());
        }
        let mut seen = HashMap::new();
        for (token, class) in &self.verdict_map {
            let key = token.trim().to_ascii_lowercase();
            if let Some(prev) = seen.insert(key, *class) {
                if prev != *class {
                    return Err(format!("verdict token {token:?} mapped twice"));
                }
            }
        }
        Ok(())
    }

    /// Preset for the ABB robotics histories (`atcs-data`), semicolon-separated
    /// with `Cycle`, `Name`, `Verdict` and `Duration` columns.
    pub fn abb() -> Self {
        Self::from_toml(ABB_PRESET).expect("built-in preset parses")
    }

    /// Preset for the Google shared dataset of test suite results.
    pub fn google() -> Self {
        Self::from_toml(GOOGLE_PRESET).expect("built-in preset parses")
    }
}

pub const ABB_PRESET: &str = include_str!("../presets/abb.toml");
pub const GOOGLE_PRESET: &str = include_str!("../presets/google.toml");

/// Counters collected while reading an external dump.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows: u64,
    pub dropped_rows: u64,
    pub duplicate_rows: u64,
    pub substituted_durations: u64,
}

pub fn parse_external<R: Read>(
    input: R,
    mapping: &ColumnMapping,
) -> Result<TestHistory, IngestError> {
    parse_external_with_report(input, mapping).map(|(h, _)| h)
}

pub fn parse_external_with_report<R: Read>(
    input: R,
    mapping: &ColumnMapping,
) -> Result<(TestHistory, IngestReport), IngestError> {
    mapping.check().map_err(IngestError::MappingMismatch)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .delimiter(mapping.delimiter.as_bytes()[0])
        .from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    let cycle_col = mapping.cycle_col.resolve(&header, "cycle")?;
    let test_col = mapping.test_col.resolve(&header, "test")?;
    let verdict_col = mapping.verdict_col.resolve(&header, "verdict")?;
    let duration_col = mapping.duration_col.resolve(&header, "duration")?;
    let width = [cycle_col, test_col, verdict_col, duration_col]
        .into_iter()
        .max()
        .unwrap_or(0);

    let vocab: HashMap<String, VerdictClass> = mapping
        .verdict_map
        .iter()
        .map(|(k, v)| (k.trim().to_ascii_lowercase(), *v))
        .collect();
    let mut cycle_tokens: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut report = IngestReport::default();
    let mut acc = CycleAccumulator::default();
    let mut record = csv::ByteRecord::new();
    let mut lowered = String::new();
    while reader.read_byte_record(&mut record).map_err(csv_error)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        report.rows += 1;
        if record.len() <= width {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!(
                    "expected at least {} fields, found {}",
                    width + 1,
                    record.len()
                ),
            });
        }
        let token = utf8(&record[verdict_col], line, "verdict")?.trim();
        lowered.clear();
        lowered.push_str(token);
        lowered.make_ascii_lowercase();
        let verdict = match vocab.get(lowered.as_str()) {
            Some(VerdictClass::Pass) => Verdict::Pass,
            Some(VerdictClass::Fail) => Verdict::Fail,
            Some(VerdictClass::Drop) => {
                report.dropped_rows += 1;
                continue;
            }
            None => {
                return Err(IngestError::UnknownVerdictToken {
                    line,
                    token: token.to_owned(),
                })
            }
        };
        let cycle = match mapping.cycle_key {
            CycleKey::Integer => parse_u64(&record[cycle_col], line, "cycle")?,
            CycleKey::FirstSeen => {
                let key = record[cycle_col].to_vec();
                let next = cycle_tokens.len() as u64;
                *cycle_tokens.entry(key).or_insert(next)
            }
        };
        let test = utf8(&record[test_col], line, "test")?.trim();
        if test.is_empty() {
            return Err(IngestError::MalformedRow {
                line,
                reason: "empty test identifier".into(),
            });
        }
        let mut duration =
            parse_f64(&record[duration_col], line, "duration")? * mapping.duration_unit_s;
        if duration <= 0.0 {
            if let Some(fallback) = mapping.nonpositive_duration_s {
                duration = fallback;
                report.substituted_durations += 1;
            }
        }
        acc.push(cycle, test, verdict, duration);
    }
    report.duplicate_rows = acc.dedup_keep_last() as u64;
    if report.duplicate_rows > 0 {
        log::warn!(
            "{} duplicate (cycle, test) rows replaced by their last occurrence",
            report.duplicate_rows
        );
    }
    if report.dropped_rows > 0 {
        log::info!(
            "{} rows with dropped verdicts excluded",
            report.dropped_rows
        );
    }
    Ok((acc.finish()?, report))
}

/// Parameters of the synthetic per-test two-state (pass/fail) Markov
/// failure process.
///
/// Each test is flip-prone with probability `flip_prob`. A flip-prone test
/// that passed in the previous cycle fails with probability
/// `base_fail_prob`; other passing tests never start failing. A failing
/// test keeps failing with probability `persistence`. After
/// `regime_shift_cycle` the flip-prone roles are randomly permuted among
/// the tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_tests: usize,
    pub n_cycles: usize,
    pub base_fail_prob: f64,
    pub persistence: f64,
    pub flip_prob: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    #[serde(default)]
    pub regime_shift_cycle: Option<usize>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidSpec(m));
        if self.n_tests == 0 {
            return bad("n_tests must be positive".into());
        }
        if self.n_cycles == 0 {
            return bad("n_cycles must be positive".into());
        }
        for (name, p) in [
            ("base_fail_prob", self.base_fail_prob),
            ("persistence", self.persistence),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if !(self.duration_min_s.is_finite() && self.duration_min_s > 0.0) {
            return bad("duration_min_s must be positive".into());
        }
        if !(self.duration_max_s.is_finite() && self.duration_max_s >= self.duration_min_s) {
            return bad("duration_max_s must be >= duration_min_s".into());
        }
        Ok(())
    }
}

/// Generates a history that is a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TestHistory, IngestError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_tests;
    let width = (n - 1).to_string().len().max(3);
    let names: Vec<String> = (0..n).map(|i| format!("T{i:0width$}")).collect();
    let durations: Vec<f64> = (0..n)
        .map(|_| {
            if spec.duration_max_s > spec.duration_min_s {
                rng.gen_range(spec.duration_min_s..=spec.duration_max_s)
            } else {
                spec.duration_min_s
            }
        })
        .collect();
    let mut flip_prone: Vec<bool> = (0..n).map(|_| rng.gen_bool(spec.flip_prob)).collect();
    let onset = |prone: bool| if prone { spec.base_fail_prob } else { 0.0 };
    let mut failing: Vec<bool> = flip_prone.iter().map(|&p| rng.gen_bool(onset(p))).collect();

    let mut cycles = Vec::with_capacity(spec.n_cycles);
    for c in 0..spec.n_cycles {
        if c > 0 {
            if spec.regime_shift_cycle == Some(c) {
                flip_prone.shuffle(&mut rng);
            }
            for (state, &prone) in failing.iter_mut().zip(&flip_prone) {
                let p = if *state {
                    spec.persistence
                } else {
                    onset(prone)
                };
                *state = rng.gen_bool(p);
            }
        }
        cycles.push(InternedCycle {
            id: c as u64,
            executions: (0..n)
                .map(|i| {
                    let v = if failing[i] {
                        Verdict::Fail
                    } else {
                        Verdict::Pass
                    };
                    (i as u32, v, durations[i])
                })
                .collect(),
        });
    }
    Ok(validate_interned(names, cycles)?)
}

/// Dataset summary in the shape of the evaluation-dataset table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_tests: usize,
    pub n_executions: usize,
    pub n_cycles: usize,
    /// Fail executions / all executions, as a fraction in [0, 1].
    pub failed_execution_fraction: f64,
}

pub fn dataset_stats(h: &TestHistory) -> DatasetStats {
    let n_executions = h.n_executions();
    let fails: usize = h.cycles().iter().map(|c| c.failing().count()).sum();
    DatasetStats {
        n_tests: h.n_tests(),
        n_executions,
        n_cycles: h.len(),
        failed_execution_fraction: fails as f64 / n_executions as f64,
    }
}
