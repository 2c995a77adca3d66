//! Per-test feature vectors and cycle-grouped training sets.
//!
//! A vector for test `t` as of history index `c` only reads window cycles
//! strictly before `c`. Layout (dimension `F + 4`):
//!
//! | slots      | meaning                                                     |
//! |------------|-------------------------------------------------------------|
//! | `0..F`     | verdicts of the `F` most recent window cycles (Fail = 1, Pass or absent = 0) |
//! | `F`        | fraction of prior window cycles in which `t` executed       |
//! | `F + 1`    | failures / executions over prior window cycles              |
//! | `F + 2`    | recency-weighted failure score                              |
//! | `F + 3`    | mean duration of `t` divided by the largest mean duration    |

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HistoryWindow, TestIdx, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("decay {0} is outside (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("verdict window must be positive")]
    EmptyVerdictWindow,
    #[error("unknown test {0:?}")]
    UnknownTest(String),
    #[error("as-of cycle index {as_of} is outside window {lo}..={hi}")]
    AsOfOutOfRange { as_of: usize, lo: usize, hi: usize },
    #[error("training needs a window of at least 2 cycles, got {0}")]
    WindowTooSmall(usize),
    #[error("expected dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

fn default_verdict_window() -> usize {
    4
}

fn default_decay() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default = "default_verdict_window")]
    pub verdict_window: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            verdict_window: default_verdict_window(),
            decay: default_decay(),
            standardize: true,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        self.verdict_window + 4
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.verdict_window == 0 {
            return Err(FeatureError::EmptyVerdictWindow);
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(FeatureError::AlphaOutOfRange(self.decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub test: TestIdx,
    pub values: Vec<f64>,
}

/// `Σ_j decay^j · [verdict_j = Fail]`, with `j = 0` the most recent verdict.
pub fn recency_failure_score(
    most_recent_first: &[Verdict],
    decay: f64,
) -> Result<f64, FeatureError> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(FeatureError::AlphaOutOfRange(decay));
    }
    Ok(most_recent_first
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_fail())
        .map(|(j, _)| decay.powi(j as i32))
        .sum())
}

/// Streams window cycles in order and keeps per-test counters, so that a
/// vector as of cycle `c` is available after absorbing every cycle before `c`.
pub(crate) struct FeatureTracker<'a> {
    window: HistoryWindow<'a>,
    cfg: FeatureConfig,
    max_duration: f64,
    next: usize,
    present: Vec<u32>,
    fails: Vec<u32>,
    score: Vec<f64>,
    // Scratch: verdict slots of every test for the current position.
    slots: Vec<f64>,
    slots_at: usize,
}

impl<'a> FeatureTracker<'a> {
    pub(crate) fn new(window: HistoryWindow<'a>, cfg: FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let n = window.history().n_tests();
        Ok(Self {
            window,
            cfg,
            max_duration: window.history().max_mean_duration(),
            next: window.range().start,
            present: vec![0; n],
            fails: vec![0; n],
            score: vec![0.0; n],
            slots: vec![0.0; n * cfg.verdict_window],
            slots_at: usize::MAX,
        })
    }

    /// Absorbs window cycles up to (excluding) history index `as_of`.
    pub(crate) fn advance_to(&mut self, as_of: usize) -> Result<(), FeatureError> {
        let Range { start: lo, end: hi } = self.window.range();
        if as_of < self.next.max(lo) || as_of > hi {
            return Err(FeatureError::AsOfOutOfRange { as_of, lo, hi });
        }
        let cycles = self.window.history().cycles();
        let decay = self.cfg.decay;
        while self.next < as_of {
            for e in &cycles[self.next].executions {
                let t = e.test.index();
                let fail = e.verdict.is_fail();
                self.present[t] += 1;
                self.fails[t] += fail as u32;
                self.score[t] = fail as u8 as f64 + decay * self.score[t];
            }
            self.next += 1;
        }
        Ok(())
    }

    fn refresh_slots(&mut self) {
        if self.slots_at == self.next {
            return;
        }
        let f = self.cfg.verdict_window;
        self.slots.iter_mut().for_each(|s| *s = 0.0);
        let lo = self.window.range().start;
        let cycles = self.window.history().cycles();
        for j in 0..f {
            let Some(c) = self.next.checked_sub(j + 1) else {
                break;
            };
            if c < lo {
                break;
            }
            for e in &cycles[c].executions {
                if e.verdict.is_fail() {
                    self.slots[e.test.index() * f + j] = 1.0;
                }
            }
        }
        self.slots_at = self.next;
    }

    /// Writes the raw vector of `test` at the current position into `out`.
    pub(crate) fn write(&mut self, test: TestIdx, out: &mut Vec<f64>) {
        self.refresh_slots();
        let f = self.cfg.verdict_window;
        let t = test.index();
        out.extend_from_slice(&self.slots[t * f..(t + 1) * f]);
        let prior_cycles = self.next - self.window.range().start;
        let present = self.present[t];
        out.push(if prior_cycles == 0 {
            0.0
        } else {
            present as f64 / prior_cycles as f64
        });
        out.push(if present == 0 {
            0.0
        } else {
            self.fails[t] as f64 / present as f64
        });
        out.push(self.score[t]);
        let h = self.window.history();
        out.push(if self.max_duration > 0.0 {
            h.mean_duration(test) / self.max_duration
        } else {
            0.0
        });
    }

    pub(crate) fn vector(&mut self, test: TestIdx) -> FeatureVector {
        let mut values = Vec::with_capacity(self.cfg.dim());
        self.write(test, &mut values);
        FeatureVector { test, values }
    }
}

/// Raw (unstandardized) features of `test_id` from window cycles strictly
/// before history index `as_of`.
pub fn build_feature_vector(
    window: HistoryWindow<'_>,
    test_id: &str,
    cfg: &FeatureConfig,
    as_of: usize,
) -> Result<FeatureVector, FeatureError> {
    let test = window
        .history()
        .lookup(test_id)
        .ok_or_else(|| FeatureError::UnknownTest(test_id.to_owned()))?;
    let mut tracker = FeatureTracker::new(window, *cfg)?;
    tracker.advance_to(as_of)?;
    Ok(tracker.vector(test))
}

/// Per-dimension shift and scale applied before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population mean and standard deviation of row-major `rows`;
    /// zero-variance dimensions get standard deviation 1.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = rows.len() / dim;
        if n == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply_in_place(&self, values: &mut [f64]) {
        for ((x, m), s) in values.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn check_dim(&self, actual: usize) -> Result<(), FeatureError> {
        if actual != self.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                actual,
            });
        }
        Ok(())
    }
}

pub fn standardize(
    v: &FeatureVector,
    stats: &Standardization,
) -> Result<FeatureVector, FeatureError> {
    stats.check_dim(v.values.len())?;
    let mut values = v.values.clone();
    stats.apply_in_place(&mut values);
    Ok(FeatureVector {
        test: v.test,
        values,
    })
}

/// Labeled examples grouped by the cycle whose verdict is the label.
///
/// Features are stored raw, row-major; `stats` describes them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub dim: usize,
    pub config: FeatureConfig,
    pub rows: Vec<f64>,
    pub labels: Vec<bool>,
    pub tests: Vec<TestIdx>,
    /// `(cycle_id, example range)`, in chronological order.
    pub groups: Vec<(u64, Range<usize>)>,
    pub stats: Standardization,
    pub single_class: bool,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Rows with `stats` applied.
    pub fn standardized_rows(&self) -> Vec<f64> {
        let mut rows = self.rows.clone();
        for row in rows.chunks_exact_mut(self.dim) {
            self.stats.apply_in_place(row);
        }
        rows
    }

    /// Builds a set directly from rows; used for hand-made training data.
    pub fn from_rows(
        dim: usize,
        rows: Vec<f64>,
        labels: Vec<bool>,
        groups: Vec<(u64, Range<usize>)>,
        standardize: bool,
    ) -> Self {
        assert_eq!(rows.len(), dim * labels.len());
        let stats = if standardize {
            Standardization::fit(&rows, dim)
        } else {
            Standardization::identity(dim)
        };
        let single_class = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
        let n = labels.len();
        Self {
            dim,
            config: FeatureConfig {
                verdict_window: dim.saturating_sub(4).max(1),
                ..FeatureConfig::default()
            },
            rows,
            tests: (0..n as u32).map(TestIdx).collect(),
            labels,
            groups,
            stats,
            single_class,
        }
    }
}

/// One example per test executed in each window cycle after the first,
/// labeled with that cycle's verdict and featurized from earlier cycles.
pub fn build_training_set(
    window: HistoryWindow<'_>,
    cfg: &FeatureConfig,
) -> Result<TrainingSet, FeatureError> {
    cfg.validate()?;
    if window.len() < 2 {
        return Err(FeatureError::WindowTooSmall(window.len()));
    }
    let dim = cfg.dim();
    let range = window.range();
    let cycles = window.history().cycles();
    let capacity: usize = cycles[range.start + 1..range.end]
        .iter()
        .map(|c| c.executions.len())
        .sum();
    let mut rows = Vec::with_capacity(capacity * dim);
    let mut labels = Vec::with_capacity(capacity);
    let mut tests = Vec::with_capacity(capacity);
    let mut groups = Vec::with_capacity(window.len() - 1);
    let mut tracker = FeatureTracker::new(window, *cfg)?;
    for c in range.start + 1..range.end {
        tracker.advance_to(c)?;
        let begin = labels.len();
        for e in &cycles[c].executions {
            tracker.write(e.test, &mut rows);
            labels.push(e.verdict.is_fail());
            tests.push(e.test);
        }
        groups.push((cycles[c].id, begin..labels.len()));
    }
    let stats = if cfg.standardize {
        Standardization::fit(&rows, dim)
    } else {
        Standardization::identity(dim)
    };
    let single_class = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
    Ok(TrainingSet {
        dim,
        config: *cfg,
        rows,
        labels,
        tests,
        groups,
        stats,
        single_class,
    })
}
