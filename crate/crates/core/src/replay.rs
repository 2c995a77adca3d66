//! Walk-forward replay: for each evaluation cycle, train on the window of
//! earlier cycles, rank the cycle's tests, cut the order by the time budget
//! and replay the recorded verdicts.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{slice_recent_before, DomainError, TestHistory, TestIdx};
use crate::features::{build_training_set, FeatureConfig};
use crate::metrics::{cycle_metrics, CycleMetrics, MetricError};
use crate::rankers::{rank_cycle, Model, RankError, RankerSpec};
use crate::seed;

/// Histories shorter than this cannot be replayed.
pub const MIN_CYCLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("cycle index {0} has no earlier cycle to learn from")]
    NoPriorHistory(usize),
    #[error("history has {len} cycles; replay needs at least {min}", min = MIN_CYCLES)]
    HistoryTooShort { len: usize },
    #[error("evaluation fraction {0} is outside (0, 1)")]
    EvalFractionOutOfRange(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub history_fraction: f64,
    pub budget_s: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub ranker: RankerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureConfig,
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(ReplayError::EvalFractionOutOfRange(self.eval_fraction));
        }
        if !(self.history_fraction > 0.0 && self.history_fraction <= 1.0) {
            return Err(DomainError::FractionOutOfRange(self.history_fraction).into());
        }
        if !(self.budget_s.is_finite() && self.budget_s > 0.0) {
            return Err(DomainError::NonPositiveBudget(self.budget_s).into());
        }
        self.ranker.validate()?;
        self.features.validate().map_err(RankError::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub cycle_id: u64,
    pub budget_s: f64,
    pub order: Vec<TestIdx>,
    /// Length of the executed prefix of `order`.
    pub executed: usize,
    pub elapsed_s: f64,
    /// 1-based positions of the failing tests inside the executed prefix.
    pub detected_positions: Vec<usize>,
    pub faults_present: usize,
    pub metrics: CycleMetrics,
    pub train_seconds: f64,
    pub rank_seconds: f64,
    pub degenerate: bool,
}

/// Longest prefix whose cumulative duration stays within `budget`; a test
/// that would overflow the budget is not started. Returns the prefix
/// length and its elapsed time.
pub fn cut_by_budget(durations: &[f64], budget: f64) -> Result<(usize, f64), DomainError> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(DomainError::NonPositiveBudget(budget));
    }
    let mut elapsed = 0.0;
    for (i, &d) in durations.iter().enumerate() {
        if elapsed + d > budget {
            return Ok((i, elapsed));
        }
        elapsed += d;
    }
    Ok((durations.len(), elapsed))
}

/// History indices of the evaluated cycles: the last `ceil(f · n)`, never
/// the first cycle.
pub fn evaluation_cycles(
    n: usize,
    eval_fraction: f64,
) -> Result<std::ops::Range<usize>, ReplayError> {
    if n < MIN_CYCLES {
        return Err(ReplayError::HistoryTooShort { len: n });
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(ReplayError::EvalFractionOutOfRange(eval_fraction));
    }
    let k = ((eval_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(n - k.min(n - 1)..n)
}

/// A cycle's ranking before any budget is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRanking {
    pub cycle: usize,
    pub order: Vec<TestIdx>,
    pub train_seconds: f64,
    pub rank_seconds: f64,
    pub degenerate: bool,
}

/// Seed used to fit the model for history index `cycle`.
pub fn fit_seed(base: u64, cycle_id: u64) -> u64 {
    seed::mix(base, cycle_id)
}

/// Trains on the window before cycle index `c` and ranks its tests.
///
/// Fit failures and windows too small to learn from fall back to a
/// degenerate constant model (duration order) instead of aborting.
pub fn rank_for_cycle(
    h: &TestHistory,
    c: usize,
    cfg: &ReplayConfig,
) -> Result<CycleRanking, ReplayError> {
    if c == 0 || c >= h.len() {
        return Err(ReplayError::NoPriorHistory(c));
    }
    let window = slice_recent_before(h, c, cfg.history_fraction)?;
    let cycle = &h.cycles()[c];
    let kind = cfg.ranker.kind();

    let mut train_seconds = 0.0;
    // Random and Rocket only carry parameters; nothing is trained.
    let model = match cfg.ranker.untrained(cfg.seed, cfg.features) {
        Some(m) => m,
        None => {
            let start = Instant::now();
            let fitted = build_training_set(window, &cfg.features)
                .map_err(RankError::from)
                .and_then(|ts| cfg.ranker.fit(&ts, fit_seed(cfg.seed, cycle.id)));
            let model = fitted.unwrap_or_else(|e| {
                log::debug!(
                    "cycle {}: {kind} falls back to a constant model: {e}",
                    cycle.id
                );
                Model::degenerate(kind, cfg.features)
            });
            train_seconds = start.elapsed().as_secs_f64();
            model
        }
    };

    let tests: Vec<TestIdx> = cycle.executions.iter().map(|e| e.test).collect();
    let start = Instant::now();
    let ranked = rank_cycle(&model, window, &tests, cycle.id)?;
    let rank_seconds = start.elapsed().as_secs_f64();
    Ok(CycleRanking {
        cycle: c,
        order: ranked.order().copied().collect(),
        train_seconds,
        rank_seconds,
        degenerate: model.degenerate,
    })
}

/// Applies `budget` to a ranking and scores it against the recorded verdicts.
pub fn outcome_for_budget(
    h: &TestHistory,
    ranking: &CycleRanking,
    budget: f64,
) -> Result<CycleOutcome, ReplayError> {
    let cycle = &h.cycles()[ranking.cycle];
    let (durations, fails): (Vec<f64>, Vec<bool>) = ranking
        .order
        .iter()
        .map(|&t| {
            let e = cycle.find(t).expect("ranked test belongs to the cycle");
            (e.duration, e.verdict.is_fail())
        })
        .unzip();
    let (executed, elapsed_s) = cut_by_budget(&durations, budget)?;
    let metrics = cycle_metrics(&durations, &fails, executed, budget)?;
    Ok(CycleOutcome {
        cycle_id: cycle.id,
        budget_s: budget,
        order: ranking.order.clone(),
        executed,
        elapsed_s,
        detected_positions: (1..=executed).filter(|&p| fails[p - 1]).collect(),
        faults_present: metrics.faults_present,
        metrics,
        train_seconds: ranking.train_seconds,
        rank_seconds: ranking.rank_seconds,
        degenerate: ranking.degenerate,
    })
}

pub fn replay_cycle(
    h: &TestHistory,
    c: usize,
    cfg: &ReplayConfig,
) -> Result<CycleOutcome, ReplayError> {
    cfg.validate()?;
    outcome_for_budget(h, &rank_for_cycle(h, c, cfg)?, cfg.budget_s)
}

/// One outcome per evaluation cycle, in chronological order.
pub fn walk_forward(h: &TestHistory, cfg: &ReplayConfig) -> Result<Vec<CycleOutcome>, ReplayError> {
    Ok(walk_forward_budgets(h, cfg, &[cfg.budget_s])?
        .pop()
        .unwrap_or_default())
}

/// Like [`walk_forward`] for several budgets sharing one ranking per cycle.
/// The result is indexed by budget, then by evaluation cycle.
pub fn walk_forward_budgets(
    h: &TestHistory,
    cfg: &ReplayConfig,
    budgets: &[f64],
) -> Result<Vec<Vec<CycleOutcome>>, ReplayError> {
    cfg.validate()?;
    let mut out = vec![Vec::new(); budgets.len()];
    for c in evaluation_cycles(h.len(), cfg.eval_fraction)? {
        let ranking = rank_for_cycle(h, c, cfg)?;
        for (slot, &b) in out.iter_mut().zip(budgets) {
            slot.push(outcome_for_budget(h, &ranking, b)?);
        }
    }
    Ok(out)
}
