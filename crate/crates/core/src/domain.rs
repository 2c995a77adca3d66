//! CI test history model: verdicts, executions, cycles, history windows and
//! time-budget schedules.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("history contains no cycles")]
    EmptyHistory,
    #[error("cycle {cycle_id} is empty")]
    EmptyCycle { cycle_id: u64 },
    #[error("cycle id {cycle_id} appears more than once")]
    DuplicateCycleId { cycle_id: u64 },
    #[error("cycle id {cycle_id} follows {previous}; cycle ids must be strictly increasing")]
    CycleOrder { previous: u64, cycle_id: u64 },
    #[error("test {test_id:?} appears more than once in cycle {cycle_id}")]
    DuplicateTestInCycle { cycle_id: u64, test_id: String },
    #[error(
        "test {test_id:?} in cycle {cycle_id} has non-positive or non-finite duration {duration}"
    )]
    NonPositiveDuration {
        cycle_id: u64,
        test_id: String,
        duration: f64,
    },
    #[error("history fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("window range {lo}..{hi} is invalid for a history of {len} cycles")]
    InvalidWindow { lo: usize, hi: usize, len: usize },
    #[error("budget {0} must be positive and finite")]
    NonPositiveBudget(f64),
}

/// Recorded outcome of one test execution. `Fail` corresponds to R = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn is_fail(self) -> bool {
        matches!(self, Verdict::Fail)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a test inside a [`TestHistory`] registry.
///
/// Indices are assigned in lexicographic order of the test names, so
/// comparing two indices of the same history compares their names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestIdx(pub u32);

impl TestIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Execution {
    pub test: TestIdx,
    pub verdict: Verdict,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub id: u64,
    pub executions: Vec<Execution>,
}

impl Cycle {
    pub fn total_duration(&self) -> f64 {
        self.executions.iter().map(|e| e.duration).sum()
    }

    pub fn find(&self, test: TestIdx) -> Option<&Execution> {
        self.executions.iter().find(|e| e.test == test)
    }

    pub fn failing(&self) -> impl Iterator<Item = &Execution> {
        self.executions.iter().filter(|e| e.verdict.is_fail())
    }
}

/// Unvalidated execution record carrying a test name.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExecution {
    pub test_id: String,
    pub verdict: Verdict,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCycle {
    pub id: u64,
    pub executions: Vec<RawExecution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    /// Mean of the observed per-run durations, in seconds.
    pub mean_duration: f64,
}

/// Chronologically ordered CI cycles plus the test registry.
///
/// Only constructible through [`validate_history`], so every value
/// satisfies the history invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct TestHistory {
    cycles: Vec<Cycle>,
    registry: Vec<RegistryEntry>,
}

impl TestHistory {
    pub fn cycles(&self) -> &[Cycle] {
        &self.cycles
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn registry(&self) -> &[RegistryEntry] {
        &self.registry
    }

    pub fn n_tests(&self) -> usize {
        self.registry.len()
    }

    pub fn test_name(&self, test: TestIdx) -> &str {
        &self.registry[test.index()].name
    }

    pub fn mean_duration(&self, test: TestIdx) -> f64 {
        self.registry[test.index()].mean_duration
    }

    pub fn lookup(&self, name: &str) -> Option<TestIdx> {
        self.registry
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| TestIdx(i as u32))
    }

    /// Largest registry mean duration.
    pub fn max_mean_duration(&self) -> f64 {
        self.registry
            .iter()
            .map(|e| e.mean_duration)
            .fold(0.0, f64::max)
    }

    pub fn n_executions(&self) -> usize {
        self.cycles.iter().map(|c| c.executions.len()).sum()
    }

    /// Converts back to the name-keyed raw form accepted by [`validate_history`].
    pub fn to_raw(&self) -> Vec<RawCycle> {
        self.cycles
            .iter()
            .map(|c| RawCycle {
                id: c.id,
                executions: c
                    .executions
                    .iter()
                    .map(|e| RawExecution {
                        test_id: self.test_name(e.test).to_owned(),
                        verdict: e.verdict,
                        duration: e.duration,
                    })
                    .collect(),
            })
            .collect()
    }

    /// Window over all cycles.
    pub fn full_window(&self) -> HistoryWindow<'_> {
        HistoryWindow {
            history: self,
            lo: 0,
            hi: self.cycles.len(),
        }
    }

    pub fn window(&self, range: Range<usize>) -> Result<HistoryWindow<'_>, DomainError> {
        HistoryWindow::new(self, range.start, range.end)
    }

    /// Returns a copy whose cycles at index `from` and later have every
    /// verdict replaced by `f(verdict)`. Registry durations are unchanged.
    pub fn with_rewritten_verdicts(&self, from: usize, f: impl Fn(Verdict) -> Verdict) -> Self {
        let mut out = self.clone();
        for cycle in out.cycles.iter_mut().skip(from) {
            for e in &mut cycle.executions {
                e.verdict = f(e.verdict);
            }
        }
        out
    }
}

/// Checks every history invariant and builds the registry.
pub fn validate_history(raw: Vec<RawCycle>) -> Result<TestHistory, DomainError> {
    let mut interner = Interner::default();
    let cycles = raw
        .into_iter()
        .map(|c| InternedCycle {
            id: c.id,
            executions: c
                .executions
                .into_iter()
                .map(|e| (interner.intern(&e.test_id), e.verdict, e.duration))
                .collect(),
        })
        .collect();
    validate_interned(interner.into_names(), cycles)
}

/// Maps test names to dense provisional indices while parsing.
#[derive(Debug, Default)]
pub(crate) struct Interner {
    index: std::collections::HashMap<String, u32>,
    names: Vec<String>,
}

impl Interner {
    pub(crate) fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.index.insert(name.to_owned(), i);
        self.names.push(name.to_owned());
        i
    }

    pub(crate) fn len(&self) -> usize {
        self.names.len()
    }

    pub(crate) fn into_names(self) -> Vec<String> {
        self.names
    }
}

/// Cycle whose executions reference provisional interner indices.
#[derive(Debug, Clone)]
pub(crate) struct InternedCycle {
    pub id: u64,
    pub executions: Vec<(u32, Verdict, f64)>,
}

pub(crate) fn validate_interned(
    names: Vec<String>,
    cycles: Vec<InternedCycle>,
) -> Result<TestHistory, DomainError> {
    if cycles.is_empty() {
        return Err(DomainError::EmptyHistory);
    }
    let mut sums = vec![0.0f64; names.len()];
    let mut counts = vec![0u64; names.len()];
    // Last cycle position (+1) in which each test was seen.
    let mut seen_in = vec![0usize; names.len()];
    let mut previous: Option<u64> = None;
    for (pos, cycle) in cycles.iter().enumerate() {
        if let Some(prev) = previous {
            if cycle.id == prev {
                return Err(DomainError::DuplicateCycleId { cycle_id: cycle.id });
            }
            if cycle.id < prev {
                let duplicate = cycles[..pos].iter().any(|c| c.id == cycle.id);
                return Err(if duplicate {
                    DomainError::DuplicateCycleId { cycle_id: cycle.id }
                } else {
                    DomainError::CycleOrder {
                        previous: prev,
                        cycle_id: cycle.id,
                    }
                });
            }
        }
        previous = Some(cycle.id);
        if cycle.executions.is_empty() {
            return Err(DomainError::EmptyCycle { cycle_id: cycle.id });
        }
        for &(t, _, duration) in &cycle.executions {
            let t = t as usize;
            if seen_in[t] == pos + 1 {
                return Err(DomainError::DuplicateTestInCycle {
                    cycle_id: cycle.id,
                    test_id: names[t].clone(),
                });
            }
            seen_in[t] = pos + 1;
            if !(duration.is_finite() && duration > 0.0) {
                return Err(DomainError::NonPositiveDuration {
                    cycle_id: cycle.id,
                    test_id: names[t].clone(),
                    duration,
                });
            }
            sums[t] += duration;
            counts[t] += 1;
        }
    }

    let mut order: Vec<usize> = (0..names.len()).filter(|&i| counts[i] > 0).collect();
    order.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut remap = vec![u32::MAX; names.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let registry = order
        .iter()
        .map(|&i| RegistryEntry {
            name: names[i].clone(),
            mean_duration: sums[i] / counts[i] as f64,
        })
        .collect();
    let cycles = cycles
        .into_iter()
        .map(|c| Cycle {
            id: c.id,
            executions: c
                .executions
                .into_iter()
                .map(|(t, verdict, duration)| Execution {
                    test: TestIdx(remap[t as usize]),
                    verdict,
                    duration,
                })
                .collect(),
        })
        .collect();
    Ok(TestHistory { cycles, registry })
}

/// Contiguous range `[lo, hi)` of cycle indices of a history.
#[derive(Debug, Clone, Copy)]
pub struct HistoryWindow<'a> {
    history: &'a TestHistory,
    lo: usize,
    hi: usize,
}

impl<'a> HistoryWindow<'a> {
    pub fn new(history: &'a TestHistory, lo: usize, hi: usize) -> Result<Self, DomainError> {
        if lo >= hi || hi > history.len() {
            return Err(DomainError::InvalidWindow {
                lo,
                hi,
                len: history.len(),
            });
        }
        Ok(Self { history, lo, hi })
    }

    pub fn history(&self) -> &'a TestHistory {
        self.history
    }

    pub fn range(&self) -> Range<usize> {
        self.lo..self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn cycles(&self) -> &'a [Cycle] {
        &self.history.cycles[self.lo..self.hi]
    }

    /// Same window truncated to cycles strictly before history index `end`.
    pub fn truncated(&self, end: usize) -> Result<Self, DomainError> {
        Self::new(self.history, self.lo, end.min(self.hi))
    }
}

/// Number of cycles kept when taking `fraction` of `n` cycles: round half
/// up, at least one.
pub fn recent_len(n: usize, fraction: f64) -> Result<usize, DomainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DomainError::FractionOutOfRange(fraction));
    }
    // The epsilon absorbs representation error such as 0.3 * 5 = 1.4999...
    let k = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(k.clamp(1, n.max(1)))
}

/// Window over the most recent `fraction` of the whole history.
pub fn slice_recent(h: &TestHistory, fraction: f64) -> Result<HistoryWindow<'_>, DomainError> {
    slice_recent_before(h, h.len(), fraction)
}

/// Window over the most recent `fraction` of the cycles strictly before
/// history index `end`.
pub fn slice_recent_before(
    h: &TestHistory,
    end: usize,
    fraction: f64,
) -> Result<HistoryWindow<'_>, DomainError> {
    let k = recent_len(end, fraction)?;
    HistoryWindow::new(h, end.saturating_sub(k), end)
}

/// Mean over cycles of the summed execution durations in each cycle.
pub fn average_suite_duration(h: &TestHistory) -> Result<f64, DomainError> {
    mean_cycle_total(h.cycles())
}

pub(crate) fn mean_cycle_total(cycles: &[Cycle]) -> Result<f64, DomainError> {
    if cycles.is_empty() {
        return Err(DomainError::EmptyHistory);
    }
    let total: f64 = cycles.iter().map(Cycle::total_duration).sum();
    Ok(total / cycles.len() as f64)
}

pub const BUDGET_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// B1..B5 as fractions 0.2..1.0 of the full-suite budget B5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub b5: f64,
    pub budgets: [f64; 5],
}

pub fn budget_schedule(b5: f64) -> Result<BudgetSchedule, DomainError> {
    if !(b5.is_finite() && b5 > 0.0) {
        return Err(DomainError::NonPositiveBudget(b5));
    }
    Ok(BudgetSchedule {
        b5,
        budgets: BUDGET_FRACTIONS.map(|f| f * b5),
    })
}
