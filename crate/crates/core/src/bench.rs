//! Experiment grid: rankers × history fractions × budgets, best-history
//! selection and report files.
//!
//! Each evaluation cycle of each (ranker, history fraction) pair is ranked
//! once; the budgets only cut that shared ranking, so detected faults nest
//! across budgets. Random is history-independent and computed once, then
//! copied to every history fraction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{average_suite_duration, DomainError, TestHistory, BUDGET_FRACTIONS};
use crate::features::FeatureConfig;
use crate::ingest::{dataset_stats, DatasetStats};
use crate::metrics::{aggregate, Stat, Summary};
use crate::rankers::{RankerKind, RankerSpec};
use crate::replay::{
    evaluation_cycles, outcome_for_budget, rank_for_cycle, CycleOutcome, CycleRanking,
    ReplayConfig, ReplayError,
};
use crate::seed::{label_hash, mix};

pub const DEFAULT_SEED: u64 = 20_220_401;
pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "ranker,h_index,h_fraction,b_index,b_seconds,mean_apfd,std_apfd,apfd_defined,mean_napfd,mean_tdff_pct,tdff_defined,mean_tdlf_pct,tdlf_defined,mean_train_s,mean_rank_s,cycles_evaluated,degenerate_cells";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid has no complete row for ranker {0}")]
    IncompleteGrid(RankerKind),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn default_rankers() -> Vec<RankerSpec> {
    RankerKind::ALL
        .into_iter()
        .map(RankerSpec::default_for)
        .collect()
}

fn default_history_fractions() -> Vec<f64> {
    BUDGET_FRACTIONS.to_vec()
}

fn default_budget_fractions() -> Vec<f64> {
    BUDGET_FRACTIONS.to_vec()
}

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Free-form dataset label recorded in the provenance block.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_rankers")]
    pub rankers: Vec<RankerSpec>,
    #[serde(default = "default_history_fractions")]
    pub history_fractions: Vec<f64>,
    /// Budgets as fractions of B5.
    #[serde(default = "default_budget_fractions")]
    pub budget_fractions: Vec<f64>,
    /// Full-suite budget in seconds; defaults to the average suite duration.
    #[serde(default)]
    pub b5_s: Option<f64>,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dataset: None,
            rankers: default_rankers(),
            history_fractions: default_history_fractions(),
            budget_fractions: default_budget_fractions(),
            b5_s: None,
            eval_fraction: default_eval_fraction(),
            seed: DEFAULT_SEED,
            features: FeatureConfig::default(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.rankers.is_empty()
            || self.history_fractions.is_empty()
            || self.budget_fractions.is_empty()
        {
            return bad("rankers, history_fractions and budget_fractions must be non-empty".into());
        }
        for (i, r) in self.rankers.iter().enumerate() {
            r.validate()
                .map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
            if self.rankers[..i].iter().any(|o| o.kind() == r.kind()) {
                return bad(format!("ranker {} listed twice", r.kind()));
            }
        }
        for &f in self.history_fractions.iter().chain(&self.budget_fractions) {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("fraction {f} is outside (0, 1]"));
            }
        }
        if let Some(b) = self.b5_s {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("b5_s {b} must be positive"));
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!(
                "eval_fraction {} is outside (0, 1)",
                self.eval_fraction
            ));
        }
        self.features
            .validate()
            .map_err(|e| BenchError::InvalidSpec(e.to_string()))
    }

    /// SHA-256 of the spec's JSON serialization, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Seed of a (ranker, history index) row. Random ignores the history index.
pub fn cell_seed(base: u64, kind: RankerKind, h_index: usize) -> u64 {
    let s = mix(base, label_hash(kind.name()));
    if kind.history_dependent() {
        mix(s, h_index as u64)
    } else {
        s
    }
}

/// 1-based coordinates of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub ranker: RankerKind,
    pub h_index: usize,
    pub b_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub h_fraction: f64,
    pub b_seconds: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: Option<String>,
    pub stats: DatasetStats,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub b5_s: f64,
    pub eval_fraction: f64,
    /// Budget index at which history-size comparisons are made.
    pub history_budget_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rankers: Vec<RankerKind>,
    pub history_fractions: Vec<f64>,
    pub budgets_s: Vec<f64>,
    pub cells: BTreeMap<CellKey, CellResult>,
    /// Per-cycle outcomes when requested through [`RunOptions::keep_outcomes`].
    pub outcomes: BTreeMap<CellKey, Vec<CycleOutcome>>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub keep_outcomes: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            keep_outcomes: false,
        }
    }
}

struct Unit {
    ranker: usize,
    /// `None` for history-independent rankers.
    h_index: Option<usize>,
    cycle: usize,
}

pub fn run_grid(
    h: &TestHistory,
    spec: &GridSpec,
    opts: RunOptions,
) -> Result<GridResult, BenchError> {
    spec.validate()?;
    let b5 = match spec.b5_s {
        Some(b) => b,
        None => average_suite_duration(h)?,
    };
    let budgets: Vec<f64> = spec.budget_fractions.iter().map(|f| f * b5).collect();
    let eval = evaluation_cycles(h.len(), spec.eval_fraction)?;

    let config_for = |ranker: usize, h_index: Option<usize>| {
        let r = &spec.rankers[ranker];
        let hi = h_index.unwrap_or(0);
        ReplayConfig {
            history_fraction: h_index.map_or(1.0, |i| spec.history_fractions[i - 1]),
            budget_s: b5,
            eval_fraction: spec.eval_fraction,
            ranker: r.clone(),
            seed: cell_seed(spec.seed, r.kind(), hi),
            features: spec.features,
        }
    };

    let mut units = Vec::new();
    for (ri, r) in spec.rankers.iter().enumerate() {
        let rows: Vec<Option<usize>> = if r.kind().history_dependent() {
            (1..=spec.history_fractions.len()).map(Some).collect()
        } else {
            vec![None]
        };
        for h_index in rows {
            config_for(ri, h_index).validate()?;
            units.extend(eval.clone().map(|cycle| Unit {
                ranker: ri,
                h_index,
                cycle,
            }));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let rankings: Vec<Result<CycleRanking, ReplayError>> = pool.install(|| {
        units
            .par_iter()
            .map(|u| {
                let r = rank_for_cycle(h, u.cycle, &config_for(u.ranker, u.h_index));
                log::debug!(
                    "ranked cycle {} for {}",
                    u.cycle,
                    spec.rankers[u.ranker].kind()
                );
                r
            })
            .collect()
    });

    // Group rankings by (ranker, row) in cycle order.
    let mut rows: BTreeMap<(usize, Option<usize>), Vec<CycleRanking>> = BTreeMap::new();
    for (u, r) in units.iter().zip(rankings) {
        rows.entry((u.ranker, u.h_index)).or_default().push(r?);
    }

    let mut cells = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    for ((ri, h_index), row) in rows {
        let kind = spec.rankers[ri].kind();
        let targets: Vec<usize> = match h_index {
            Some(i) => vec![i],
            None => (1..=spec.history_fractions.len()).collect(),
        };
        for (bi, &budget) in budgets.iter().enumerate() {
            let per_cycle = row
                .iter()
                .map(|r| outcome_for_budget(h, r, budget))
                .collect::<Result<Vec<_>, _>>()?;
            let summary = aggregate(&per_cycle).map_err(ReplayError::from)?;
            for &hi in &targets {
                let key = CellKey {
                    ranker: kind,
                    h_index: hi,
                    b_index: bi + 1,
                };
                cells.insert(
                    key,
                    CellResult {
                        h_fraction: spec.history_fractions[hi - 1],
                        b_seconds: budget,
                        summary: summary.clone(),
                    },
                );
                if opts.keep_outcomes {
                    outcomes.insert(key, per_cycle.clone());
                }
            }
        }
    }

    Ok(GridResult {
        rankers: spec.rankers.iter().map(RankerSpec::kind).collect(),
        history_fractions: spec.history_fractions.clone(),
        budgets_s: budgets,
        cells,
        outcomes,
        provenance: Provenance {
            dataset: spec.dataset.clone(),
            stats: dataset_stats(h),
            config_hash: spec.config_hash(),
            seed: spec.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            b5_s: b5,
            eval_fraction: spec.eval_fraction,
            history_budget_index: spec.budget_fractions.len(),
        },
    })
}

/// 1-based index of the first maximum; undefined values never win.
pub fn argmax_first(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i + 1, v));
            }
        }
    }
    best.map(|(i, _)| i).or((!values.is_empty()).then_some(1))
}

/// History index with the highest mean APFD at the largest budget; ties go
/// to the smaller history.
pub fn select_best_history(g: &GridResult, ranker: RankerKind) -> Result<usize, BenchError> {
    let b = g.budgets_s.len();
    let row = (1..=g.history_fractions.len())
        .map(|hi| {
            g.cells
                .get(&CellKey {
                    ranker,
                    h_index: hi,
                    b_index: b,
                })
                .map(|c| c.summary.apfd.mean)
        })
        .collect::<Option<Vec<_>>>()
        .ok_or(BenchError::IncompleteGrid(ranker))?;
    argmax_first(&row).ok_or(BenchError::IncompleteGrid(ranker))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReportOptions {
    /// Write measured timings into the main CSV/JSON instead of only the
    /// sidecar; makes those files run-dependent.
    pub inline_timings: bool,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn report_csv(g: &GridResult, opts: ReportOptions) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (key, cell) in ordered_cells(g) {
        let s = &cell.summary;
        let (train, rank) = if opts.inline_timings {
            (num(s.mean_train_s), num(s.mean_rank_s))
        } else {
            (String::new(), String::new())
        };
        let fields = [
            key.ranker.name().to_owned(),
            key.h_index.to_string(),
            num(cell.h_fraction),
            key.b_index.to_string(),
            num(cell.b_seconds),
            opt(s.apfd.mean),
            opt(s.apfd.std),
            s.apfd.defined.to_string(),
            opt(s.napfd.mean),
            opt(s.tdff_pct.mean),
            s.tdff_pct.defined.to_string(),
            opt(s.tdlf_pct.mean),
            s.tdlf_pct.defined.to_string(),
            train,
            rank,
            s.cycles.to_string(),
            s.degenerate.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Cells in report order: rankers as declared, then H, then B.
pub fn ordered_cells(g: &GridResult) -> impl Iterator<Item = (&CellKey, &CellResult)> {
    g.rankers.iter().flat_map(move |&r| {
        g.cells
            .range(
                CellKey {
                    ranker: r,
                    h_index: 0,
                    b_index: 0,
                }..,
            )
            .take_while(move |(k, _)| k.ranker == r)
    })
}

pub fn timings_csv(g: &GridResult) -> String {
    let mut out = String::from("ranker,h_index,b_index,mean_train_s,mean_rank_s\n");
    for (k, c) in ordered_cells(g) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            k.ranker.name(),
            k.h_index,
            k.b_index,
            num(c.summary.mean_train_s),
            num(c.summary.mean_rank_s)
        );
    }
    out
}

#[derive(Serialize)]
struct JsonCell {
    h_fraction: f64,
    b_seconds: f64,
    apfd: Stat,
    napfd: Stat,
    tdff_pct: Stat,
    tdlf_pct: Stat,
    mean_train_s: Option<f64>,
    mean_rank_s: Option<f64>,
    cycles_evaluated: usize,
    degenerate_cells: usize,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    schema_version: u32,
    provenance: &'a Provenance,
    history_fractions: &'a [f64],
    budgets_s: &'a [f64],
    best_history: BTreeMap<&'static str, usize>,
    rankers: BTreeMap<&'static str, BTreeMap<String, BTreeMap<String, JsonCell>>>,
}

pub fn report_json(g: &GridResult, opts: ReportOptions) -> String {
    let mut rankers: BTreeMap<&'static str, BTreeMap<String, BTreeMap<String, JsonCell>>> =
        BTreeMap::new();
    for (k, c) in &g.cells {
        let s = &c.summary;
        rankers
            .entry(k.ranker.name())
            .or_default()
            .entry(format!("H{}", k.h_index))
            .or_default()
            .insert(
                format!("B{}", k.b_index),
                JsonCell {
                    h_fraction: c.h_fraction,
                    b_seconds: c.b_seconds,
                    apfd: s.apfd,
                    napfd: s.napfd,
                    tdff_pct: s.tdff_pct,
                    tdlf_pct: s.tdlf_pct,
                    mean_train_s: opts.inline_timings.then_some(s.mean_train_s),
                    mean_rank_s: opts.inline_timings.then_some(s.mean_rank_s),
                    cycles_evaluated: s.cycles,
                    degenerate_cells: s.degenerate,
                },
            );
    }
    let best_history = g
        .rankers
        .iter()
        .filter_map(|&r| select_best_history(g, r).ok().map(|h| (r.name(), h)))
        .collect();
    let mut text = serde_json::to_string_pretty(&JsonReport {
        schema_version: SCHEMA_VERSION,
        provenance: &g.provenance,
        history_fractions: &g.history_fractions,
        budgets_s: &g.budgets_s,
        best_history,
        rankers,
    })
    .expect("report serializes");
    text.push('\n');
    text
}

/// Mean APFD per history fraction at the comparison budget.
pub fn plot_history_csv(g: &GridResult) -> String {
    let b = g.provenance.history_budget_index;
    let mut out = String::from("ranker,h_index,h_fraction,mean_apfd,std_apfd\n");
    for (k, c) in ordered_cells(g).filter(|(k, _)| k.b_index == b) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            k.ranker.name(),
            k.h_index,
            num(c.h_fraction),
            opt(c.summary.apfd.mean),
            opt(c.summary.apfd.std)
        );
    }
    out
}

/// Budget-aware metrics per budget at each ranker's best history fraction.
pub fn plot_budget_csv(g: &GridResult) -> String {
    let mut out = String::from(
        "ranker,best_h_index,b_index,b_seconds,mean_napfd,mean_tdff_pct,mean_tdlf_pct\n",
    );
    for &r in &g.rankers {
        let Ok(best) = select_best_history(g, r) else {
            continue;
        };
        for (k, c) in ordered_cells(g).filter(|(k, _)| k.ranker == r && k.h_index == best) {
            let s = &c.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.name(),
                best,
                k.b_index,
                num(c.b_seconds),
                opt(s.napfd.mean),
                opt(s.tdff_pct.mean),
                opt(s.tdlf_pct.mean)
            );
        }
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub const REPORT_FILES: [&str; 5] = [
    "grid.csv",
    "grid.json",
    "plot_history.csv",
    "plot_budget.csv",
    "timings.csv",
];

/// Writes every report file into `dir` and returns their paths.
pub fn emit_report(
    g: &GridResult,
    dir: &Path,
    opts: ReportOptions,
) -> Result<Vec<PathBuf>, BenchError> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let contents = [
        report_csv(g, opts),
        report_json(g, opts),
        plot_history_csv(g),
        plot_budget_csv(g),
        timings_csv(g),
    ];
    let mut paths = Vec::new();
    for (name, text) in REPORT_FILES.iter().zip(contents) {
        let p = dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

/// Canonical CSV of a history; parses back to an equal history.
pub fn emit_canonical(h: &TestHistory) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(crate::ingest::CANONICAL_HEADER)
        .expect("in-memory write");
    for c in h.cycles() {
        let id = c.id.to_string();
        for e in &c.executions {
            let dur = num(e.duration);
            w.write_record([
                id.as_str(),
                h.test_name(e.test),
                e.verdict.as_str(),
                dur.as_str(),
            ])
            .expect("in-memory write");
        }
    }
    w.into_inner().expect("in-memory flush")
}
