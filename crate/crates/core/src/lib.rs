//! History-based regression test prioritization for continuous integration.
//!
//! The crate covers the whole pipeline: reading CI test histories
//! ([`ingest`]), turning them into features ([`features`]), six
//! prioritization strategies ([`rankers`]), walk-forward replay under a
//! time budget ([`replay`]), fault-detection metrics ([`metrics`]) and the
//! history-size × budget experiment grid ([`bench`]).

pub mod bench;
pub mod config;
pub mod domain;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod rankers;
pub mod replay;
pub mod seed;

pub use domain::{
    average_suite_duration, budget_schedule, slice_recent, validate_history, BudgetSchedule, Cycle,
    Execution, HistoryWindow, TestHistory, TestIdx, Verdict,
};
