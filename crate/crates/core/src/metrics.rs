//! Fault-detection metrics per cycle and their aggregation.
//!
//! Every failing test counts as one fault. Positions are 1-based.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::replay::CycleOutcome;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric is undefined without faults")]
    NoFaults,
    #[error("position {position} is outside 1..={n}")]
    PositionOutOfRange { position: usize, n: usize },
    #[error("position {0} listed more than once")]
    DuplicatePosition(usize),
    #[error("{detected} detected faults exceed the {total} present")]
    TooManyDetected { detected: usize, total: usize },
    #[error("budget {0} must be positive and finite")]
    NonPositiveBudget(f64),
    #[error("durations and verdict flags differ in length")]
    LengthMismatch,
    #[error("no outcomes to aggregate")]
    EmptyOutcomeList,
}

fn check_positions(positions: &[usize], n: usize) -> Result<usize, MetricError> {
    let mut seen = vec![false; n + 1];
    let mut sum = 0usize;
    for &p in positions {
        if p == 0 || p > n {
            return Err(MetricError::PositionOutOfRange { position: p, n });
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(MetricError::DuplicatePosition(p));
        }
        sum += p;
    }
    Ok(sum)
}

/// `1 − ΣTF/(n·m) + 1/(2n)` for the positions of the `m` failing tests in
/// an ordering of `n` tests.
pub fn apfd(fail_positions: &[usize], n: usize) -> Result<f64, MetricError> {
    let m = fail_positions.len();
    if m == 0 {
        return Err(MetricError::NoFaults);
    }
    let sum = check_positions(fail_positions, n)? as f64;
    let n = n as f64;
    Ok(1.0 - sum / (n * m as f64) + 1.0 / (2.0 * n))
}

/// Budget-aware APFD: `p − ΣTF/(n_exec·m) + p/(2·n_exec)` with
/// `p = detected/m`; 0 when nothing was executed.
pub fn napfd(
    detected_positions: &[usize],
    n_executed: usize,
    total_faults: usize,
) -> Result<f64, MetricError> {
    if total_faults == 0 {
        return Err(MetricError::NoFaults);
    }
    if detected_positions.len() > total_faults {
        return Err(MetricError::TooManyDetected {
            detected: detected_positions.len(),
            total: total_faults,
        });
    }
    if n_executed == 0 {
        return Ok(0.0);
    }
    let sum = check_positions(detected_positions, n_executed)? as f64;
    let m = total_faults as f64;
    let n = n_executed as f64;
    let p = detected_positions.len() as f64 / m;
    Ok(p - sum / (n * m) + p / (2.0 * n))
}

fn time_to_fault(
    durations: &[f64],
    fails: &[bool],
    budget: f64,
    last: bool,
) -> Result<Option<f64>, MetricError> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(MetricError::NonPositiveBudget(budget));
    }
    if durations.len() != fails.len() {
        return Err(MetricError::LengthMismatch);
    }
    let mut elapsed = 0.0;
    let mut hit = None;
    for (&d, &f) in durations.iter().zip(fails) {
        elapsed += d;
        if f {
            hit = Some(elapsed);
            if !last {
                break;
            }
        }
    }
    Ok(hit.map(|t| 100.0 * t / budget))
}

/// Time to the first executed failure, as a percentage of `budget`.
/// Also known as TDFT.
pub fn tdff(durations: &[f64], fails: &[bool], budget: f64) -> Result<Option<f64>, MetricError> {
    time_to_fault(durations, fails, budget, false)
}

/// Time to the last executed failure, as a percentage of `budget`.
pub fn tdlf(durations: &[f64], fails: &[bool], budget: f64) -> Result<Option<f64>, MetricError> {
    time_to_fault(durations, fails, budget, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    /// Over the full ranked order; `None` without faults.
    pub apfd: Option<f64>,
    /// Over the executed prefix; `None` without faults.
    pub napfd: Option<f64>,
    pub tdff_pct: Option<f64>,
    pub tdlf_pct: Option<f64>,
    pub faults_present: usize,
    pub faults_detected: usize,
}

/// Metrics of one cycle given its ranked order as (duration, failed)
/// flags, the executed prefix length and the applied budget.
pub fn cycle_metrics(
    durations: &[f64],
    fails: &[bool],
    executed: usize,
    budget: f64,
) -> Result<CycleMetrics, MetricError> {
    if durations.len() != fails.len() || executed > fails.len() {
        return Err(MetricError::LengthMismatch);
    }
    let positions: Vec<usize> = (1..=fails.len()).filter(|&p| fails[p - 1]).collect();
    let detected: Vec<usize> = positions
        .iter()
        .copied()
        .take_while(|&p| p <= executed)
        .collect();
    let m = positions.len();
    let (apfd_v, napfd_v) = if m == 0 {
        (None, None)
    } else {
        (
            Some(apfd(&positions, fails.len())?),
            Some(napfd(&detected, executed, m)?),
        )
    };
    Ok(CycleMetrics {
        apfd: apfd_v,
        napfd: napfd_v,
        tdff_pct: tdff(&durations[..executed], &fails[..executed], budget)?,
        tdlf_pct: tdlf(&durations[..executed], &fails[..executed], budget)?,
        faults_present: m,
        faults_detected: detected.len(),
    })
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Stat {
                mean: None,
                std: None,
                defined: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Stat {
            mean: Some(mean),
            std,
            defined: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub apfd: Stat,
    pub napfd: Stat,
    pub tdff_pct: Stat,
    pub tdlf_pct: Stat,
    pub mean_train_s: f64,
    pub mean_rank_s: f64,
    pub cycles: usize,
    /// Evaluation cycles ranked by a degenerate (constant) model.
    pub degenerate: usize,
}

pub fn aggregate(outcomes: &[CycleOutcome]) -> Result<Summary, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::EmptyOutcomeList);
    }
    let n = outcomes.len() as f64;
    Ok(Summary {
        apfd: Stat::of(outcomes.iter().map(|o| o.metrics.apfd)),
        napfd: Stat::of(outcomes.iter().map(|o| o.metrics.napfd)),
        tdff_pct: Stat::of(outcomes.iter().map(|o| o.metrics.tdff_pct)),
        tdlf_pct: Stat::of(outcomes.iter().map(|o| o.metrics.tdlf_pct)),
        mean_train_s: outcomes.iter().map(|o| o.train_seconds).sum::<f64>() / n,
        mean_rank_s: outcomes.iter().map(|o| o.rank_seconds).sum::<f64>() / n,
        cycles: outcomes.len(),
        degenerate: outcomes.iter().filter(|o| o.degenerate).count(),
    })
}
