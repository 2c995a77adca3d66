//! Recency-weighted failure-count heuristic.

use serde::{Deserialize, Serialize};

use super::{rank_entries, RankError, RankedEntry, RankedSuite};
use crate::domain::{HistoryWindow, TestIdx};

/// Weight of a failure `j` cycles back: `recent[j - 1]` while defined,
/// `older` afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RocketParams {
    pub recent: Vec<f64>,
    pub older: f64,
}

impl Default for RocketParams {
    fn default() -> Self {
        Self {
            recent: vec![0.7, 0.2],
            older: 0.1,
        }
    }
}

impl RocketParams {
    pub fn weight(&self, cycles_back: usize) -> f64 {
        self.recent
            .get(cycles_back - 1)
            .copied()
            .unwrap_or(self.older)
    }

    pub fn validate(&self) -> Result<(), RankError> {
        if self
            .recent
            .iter()
            .chain([&self.older])
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(RankError::InvalidHyperparameter(
                "rocket weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Priority of every registry test from failures in the window; the window
/// ends right before the cycle being ranked.
pub fn rocket_priorities(
    window: HistoryWindow<'_>,
    params: &RocketParams,
) -> Result<Vec<f64>, RankError> {
    if window.is_empty() {
        return Err(RankError::EmptyWindow);
    }
    let mut p = vec![0.0; window.history().n_tests()];
    let cycles = window.cycles();
    for (back, cycle) in cycles.iter().rev().enumerate() {
        let w = params.weight(back + 1);
        for e in cycle.failing() {
            p[e.test.index()] += w;
        }
    }
    Ok(p)
}

pub fn rocket_rank(
    window: HistoryWindow<'_>,
    tests: &[TestIdx],
    durations: &[f64],
    params: &RocketParams,
) -> Result<RankedSuite, RankError> {
    if tests.len() != durations.len() {
        return Err(RankError::KeyMismatch);
    }
    let p = rocket_priorities(window, params)?;
    Ok(rank_entries(
        tests
            .iter()
            .zip(durations)
            .map(|(&t, &duration)| RankedEntry {
                test: t,
                score: p[t.index()],
                duration,
            })
            .collect(),
    ))
}
