//! `tcprio`: dataset statistics, synthetic histories, single replays and
//! full experiment grids.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage/config/parse error,
//! 3 dataset-shape error.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tcprio_core::bench::{self, BenchError, GridSpec, ReportOptions, RunOptions, DEFAULT_SEED};
use tcprio_core::config::{self, ConfigError};
use tcprio_core::domain::{average_suite_duration, DomainError, TestHistory};
use tcprio_core::features::FeatureConfig;
use tcprio_core::ingest::{self, ColumnMapping, IngestError, SyntheticSpec};
use tcprio_core::metrics::{aggregate, Stat};
use tcprio_core::rankers::{RankError, RankerKind, RankerSpec};
use tcprio_core::replay::{walk_forward, CycleOutcome, ReplayConfig, ReplayError};

#[derive(Parser)]
#[command(
    name = "tcprio",
    version,
    about = "History-based test prioritization replay and benchmark tool"
)]
struct Cli {
    /// Base seed for every random choice [default: 20220401]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of text
    #[arg(long, global = true)]
    json: bool,
    /// Column mapping for external CSV dumps: a TOML file, or `abb` / `google`
    #[arg(long, global = true, value_name = "PATH|PRESET")]
    mapping: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics
    Stats { input: PathBuf },
    /// Generate a synthetic history in canonical CSV
    Synth {
        /// Synthetic spec (TOML)
        spec: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Walk-forward replay of one (ranker, history, budget) configuration
    Replay(ReplayArgs),
    /// Run the rankers × history × budget grid and write reports
    Grid(GridArgs),
}

#[derive(Args)]
struct ReplayArgs {
    input: PathBuf,
    #[arg(long)]
    ranker: String,
    #[arg(long, default_value_t = 1.0)]
    history_frac: f64,
    /// Budget as a fraction of the average suite duration
    #[arg(long, default_value_t = 1.0)]
    budget_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    eval_frac: f64,
    /// Directory for the per-cycle CSV and summary JSON
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include measured timings in the written files
    #[arg(long)]
    inline_timings: bool,
}

#[derive(Args)]
struct GridArgs {
    input: PathBuf,
    /// Grid spec (TOML); defaults cover all rankers and the 5 × 5 grid
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
    /// Include measured timings in grid.csv / grid.json
    #[arg(long)]
    inline_timings: bool,
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

fn ingest_failure(path: &Path, e: IngestError) -> Failure {
    let code = match e {
        IngestError::Domain(_) => 3,
        _ => 2,
    };
    Failure {
        code,
        message: format!("{}: {e}", path.display()),
    }
}

fn config_failure(e: ConfigError) -> Failure {
    Failure::usage(e.to_string())
}

fn replay_failure(e: ReplayError) -> Failure {
    let code = match &e {
        ReplayError::HistoryTooShort { .. } | ReplayError::NoPriorHistory(_) => 3,
        ReplayError::Domain(DomainError::EmptyHistory) => 3,
        ReplayError::Domain(_) | ReplayError::EvalFractionOutOfRange(_) => 2,
        ReplayError::Rank(RankError::InvalidHyperparameter(_) | RankError::UnknownKind(_)) => 2,
        ReplayError::Rank(RankError::Feature(_)) => 2,
        ReplayError::Rank(_) | ReplayError::Metric(_) => 1,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn bench_failure(e: BenchError) -> Failure {
    match e {
        BenchError::InvalidSpec(_) => Failure::usage(e.to_string()),
        BenchError::Replay(r) => replay_failure(r),
        BenchError::Domain(_) => Failure {
            code: 3,
            message: e.to_string(),
        },
        BenchError::IncompleteGrid(_) | BenchError::Io { .. } | BenchError::Pool(_) => Failure {
            code: 1,
            message: e.to_string(),
        },
    }
}

fn load_mapping(spec: &str) -> Result<ColumnMapping, Failure> {
    match spec {
        "abb" => Ok(ColumnMapping::abb()),
        "google" => Ok(ColumnMapping::google()),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{path}: {e}")))?;
            ColumnMapping::from_toml(&text).map_err(|e| Failure::usage(format!("{path}: {e}")))
        }
    }
}

fn load_history(path: &Path, mapping: Option<&str>) -> Result<TestHistory, Failure> {
    let file = File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let reader = BufReader::with_capacity(1 << 20, file);
    let parsed = match mapping {
        Some(m) => {
            let mapping = load_mapping(m)?;
            ingest::parse_external_with_report(reader, &mapping).map(|(h, report)| {
                log::info!(
                    "{} rows read, {} dropped, {} duplicates, {} durations substituted",
                    report.rows,
                    report.dropped_rows,
                    report.duplicate_rows,
                    report.substituted_durations
                );
                h
            })
        }
        None => ingest::parse_canonical(reader),
    };
    parsed.map_err(|e| ingest_failure(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("value serializes")
    );
}

fn cmd_stats(cli: &Cli, input: &Path) -> Result<(), Failure> {
    let h = load_history(input, cli.mapping.as_deref())?;
    let s = ingest::dataset_stats(&h);
    if cli.json {
        print_json(&s);
    } else {
        println!("tests              {:>12}", s.n_tests);
        println!("executions         {:>12}", s.n_executions);
        println!("cycles             {:>12}", s.n_cycles);
        println!("failed executions  {:>12.6}", s.failed_execution_fraction);
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let spec: SyntheticSpec = config::from_path(spec_path).map_err(config_failure)?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let h = ingest::generate_synthetic(&spec, seed).map_err(|e| ingest_failure(spec_path, e))?;
    let bytes = bench::emit_canonical(&h);
    bench::write_atomic(out, &bytes).map_err(bench_failure)?;
    if !cli.json {
        println!(
            "wrote {} executions over {} cycles to {}",
            h.n_executions(),
            h.len(),
            out.display()
        );
    } else {
        print_json(&ingest::dataset_stats(&h));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct ReplaySummary {
    schema_version: u32,
    ranker: RankerKind,
    history_fraction: f64,
    budget_fraction: f64,
    budget_s: f64,
    b5_s: f64,
    eval_fraction: f64,
    seed: u64,
    mean_apfd: Option<f64>,
    apfd: Stat,
    napfd: Stat,
    tdff_pct: Stat,
    tdlf_pct: Stat,
    cycles_evaluated: usize,
    degenerate_cycles: usize,
    mean_train_s: Option<f64>,
    mean_rank_s: Option<f64>,
}

fn cycles_csv(outcomes: &[CycleOutcome], inline_timings: bool) -> String {
    let mut out = String::from(
        "cycle_id,executed,elapsed_s,faults_present,faults_detected,apfd,napfd,tdff_pct,tdlf_pct,degenerate,train_s,rank_s\n",
    );
    for o in outcomes {
        let m = &o.metrics;
        let (train, rank) = if inline_timings {
            (o.train_seconds.to_string(), o.rank_seconds.to_string())
        } else {
            (String::new(), String::new())
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            o.cycle_id,
            o.executed,
            o.elapsed_s,
            m.faults_present,
            m.faults_detected,
            opt(m.apfd),
            opt(m.napfd),
            opt(m.tdff_pct),
            opt(m.tdlf_pct),
            o.degenerate,
            train,
            rank
        );
    }
    out
}

fn cmd_replay(cli: &Cli, args: &ReplayArgs) -> Result<(), Failure> {
    let kind: RankerKind = args
        .ranker
        .parse()
        .map_err(|e: RankError| Failure::usage(e.to_string()))?;
    if !(args.budget_frac > 0.0 && args.budget_frac <= 1.0) {
        return Err(Failure::usage(format!(
            "budget fraction {} is outside (0, 1]",
            args.budget_frac
        )));
    }
    let h = load_history(&args.input, cli.mapping.as_deref())?;
    let b5 = average_suite_duration(&h).map_err(|e| Failure {
        code: 3,
        message: e.to_string(),
    })?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let cfg = ReplayConfig {
        history_fraction: args.history_frac,
        budget_s: args.budget_frac * b5,
        eval_fraction: args.eval_frac,
        ranker: RankerSpec::default_for(kind),
        seed: bench::cell_seed(seed, kind, 0),
        features: FeatureConfig::default(),
    };
    let outcomes = walk_forward(&h, &cfg).map_err(replay_failure)?;
    let s = aggregate(&outcomes).map_err(|e| replay_failure(e.into()))?;
    let timings = |v: f64| args.inline_timings.then_some(v);
    let summary = ReplaySummary {
        schema_version: bench::SCHEMA_VERSION,
        ranker: kind,
        history_fraction: args.history_frac,
        budget_fraction: args.budget_frac,
        budget_s: cfg.budget_s,
        b5_s: b5,
        eval_fraction: args.eval_frac,
        seed,
        mean_apfd: s.apfd.mean,
        apfd: s.apfd,
        napfd: s.napfd,
        tdff_pct: s.tdff_pct,
        tdlf_pct: s.tdlf_pct,
        cycles_evaluated: s.cycles,
        degenerate_cycles: s.degenerate,
        mean_train_s: timings(s.mean_train_s),
        mean_rank_s: timings(s.mean_rank_s),
    };
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", dir.display()),
        })?;
        let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        json.push('\n');
        bench::write_atomic(
            &dir.join("replay_cycles.csv"),
            cycles_csv(&outcomes, args.inline_timings).as_bytes(),
        )
        .map_err(bench_failure)?;
        bench::write_atomic(&dir.join("replay_summary.json"), json.as_bytes())
            .map_err(bench_failure)?;
    }
    if cli.json {
        print_json(&summary);
    } else {
        println!("ranker             {kind}");
        println!("cycles evaluated   {}", s.cycles);
        println!("mean_apfd          {}", opt(s.apfd.mean));
        println!("mean_napfd         {}", opt(s.napfd.mean));
        println!("mean_tdff_pct      {}", opt(s.tdff_pct.mean));
        println!("mean_tdlf_pct      {}", opt(s.tdlf_pct.mean));
        println!("mean_train_s       {:.6}", s.mean_train_s);
        println!("mean_rank_s        {:.6}", s.mean_rank_s);
    }
    Ok(())
}

fn cmd_grid(cli: &Cli, args: &GridArgs) -> Result<(), Failure> {
    if args.workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    let mut spec: GridSpec = match &args.config {
        Some(p) => config::from_path(p).map_err(config_failure)?,
        None => GridSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if spec.dataset.is_none() {
        spec.dataset = args
            .input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned());
    }
    spec.validate().map_err(bench_failure)?;
    let h = load_history(&args.input, cli.mapping.as_deref())?;
    let g = bench::run_grid(
        &h,
        &spec,
        RunOptions {
            workers: args.workers,
            keep_outcomes: false,
        },
    )
    .map_err(bench_failure)?;
    let opts = ReportOptions {
        inline_timings: args.inline_timings,
    };
    let paths = bench::emit_report(&g, &args.out_dir, opts).map_err(bench_failure)?;
    if cli.json {
        let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        print_json(&names);
    } else {
        println!("{} cells", g.cells.len());
        for &r in &g.rankers {
            if let Ok(best) = bench::select_best_history(&g, r) {
                println!("best history for {:<7} H{best}", r.name());
            }
        }
        for p in paths {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Stats { input } => cmd_stats(&cli, input),
        Command::Synth { spec, out } => cmd_synth(&cli, spec, out),
        Command::Replay(args) => cmd_replay(&cli, args),
        Command::Grid(args) => cmd_grid(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
