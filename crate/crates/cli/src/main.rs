//! `sea-alloc`: run the search-audit-allocate loop, replay traces, check the
//! theoretical bounds and benchmark the allocator.
//!
//! Exit codes: 0 success, 1 runtime error or violated bound, 2 usage or config error.

use clap::{Args, Parser, Subcommand};
use sea_alloc::bounds::{self, BoundCheck};
use sea_alloc::driver::{
    build_oracle, build_space, compute_diagnostics, run_full_with, run_random_baseline, run_with_oracle,
    DriverError, EventLog, ExecOptions, RunConfig, RunOutput,
};
use sea_alloc::oracle::{RecordingOracle, ReplayOracle};
use sea_alloc::stats;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sea-alloc", version, about = "Budgeted online adapter selection from noisy audits")]
struct Cli {
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full protocol; writes report.json, events.jsonl and diagnostics.csv.
    Run {
        #[command(flatten)]
        io: Io,
        /// Also record every evaluation to trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Final values of random configurations at the configured budget.
    Baseline {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Check the estimator, stabilizer and coverage bounds.
    VerifyBounds,
    /// Compare the final re-solve against exhaustive search on random instances.
    BenchAlloc {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 15)]
        n_max: usize,
    },
    /// Drive a run from a recorded evaluation trace instead of the synthetic oracle.
    Replay {
        #[command(flatten)]
        io: Io,
        /// Trace of `{gates, score, noise_seed}` records.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Recompute diagnostics from an event log.
    Report {
        /// events.jsonl written by `run` or `replay`.
        #[arg(long)]
        events: PathBuf,
        /// Directory for diagnostics.csv; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Config(_) | DriverError::Space(_) | DriverError::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn load_config(&self, path: &Path) -> Result<RunConfig, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::from_json(&text)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_outputs(ctx: &Ctx, out: &mut RunOutput, dir: &Path) -> Result<(), Failure> {
    create_dir(dir)?;
    let events = dir.join("events.jsonl");
    fs::write(&events, out.log.to_jsonl())?;
    out.report.event_log = Some("events.jsonl".into());
    fs::write(dir.join("report.json"), out.report.to_json() + "\n")?;
    fs::write(dir.join("diagnostics.csv"), compute_diagnostics(&out.log)?.to_csv())?;
    let r = &out.report;
    ctx.say(format!(
        "selected {} units, final score {:.4}, budget {:.3e} of {:.3e}, T_c {} (bound {}), {} evaluations",
        r.selected.len(),
        r.final_score,
        r.budget_used,
        r.budget,
        r.change_cycles,
        r.chatter_bound,
        r.evaluations
    ));
    ctx.say(format!("wrote {}", dir.display()));
    Ok(())
}

fn cmd_run(ctx: &Ctx, io: &Io, trace: bool) -> Result<(), Failure> {
    let config = ctx.load_config(&io.config)?;
    let exec = ExecOptions::from_env();
    if !trace {
        let mut out = run_full_with(&config, exec)?;
        return write_outputs(ctx, &mut out, &io.out);
    }
    let space = build_space(&config)?;
    let recorder = RecordingOracle::new(build_oracle(&config, &space)?);
    let mut out = run_with_oracle(&config, space, &recorder, exec)?;
    write_outputs(ctx, &mut out, &io.out)?;
    let file = fs::File::create(io.out.join("trace.jsonl"))?;
    recorder.write_jsonl(std::io::BufWriter::new(file))?;
    Ok(())
}

fn cmd_baseline(ctx: &Ctx, io: &Io, samples: usize) -> Result<(), Failure> {
    if samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let config = ctx.load_config(&io.config)?;
    let values = run_random_baseline(&config, samples)?;
    create_dir(&io.out)?;
    let json = serde_json::to_string_pretty(&values).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(io.out.join("baseline.json"), json + "\n")?;
    let q = |p| stats::quantile(&values, p).unwrap_or(f64::NAN);
    ctx.say(format!(
        "{samples} random configurations: min {:.4}, median {:.4}, max {:.4}",
        q(0.0),
        q(0.5),
        q(1.0)
    ));
    Ok(())
}

fn print_checks(ctx: &Ctx, checks: &[BoundCheck]) {
    ctx.say(format!("{:<52} {:>12} {:>12} {:>12}  result", "check", "measured", "bound", "limit"));
    for c in checks {
        ctx.say(format!(
            "{:<52} {:>12.6} {:>12.4} {:>12.6}  {}",
            c.name,
            c.measured,
            c.bound,
            c.limit,
            if c.pass { "pass" } else { "FAIL" }
        ));
    }
}

fn cmd_verify_bounds(ctx: &Ctx) -> Result<(), Failure> {
    let checks = bounds::default_checks();
    print_checks(ctx, &checks);
    match checks.iter().filter(|c| !c.pass).count() {
        0 => Ok(()),
        k => Err(Failure::Runtime(format!("{k} bound checks failed"))),
    }
}

fn cmd_bench_alloc(ctx: &Ctx, instances: usize, n_max: usize) -> Result<(), Failure> {
    if n_max == 0 || n_max > sea_alloc::allocator::BRUTE_FORCE_CAP {
        return Err(Failure::Usage(format!(
            "--n-max must be between 1 and {}",
            sea_alloc::allocator::BRUTE_FORCE_CAP
        )));
    }
    if instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let ratios = bounds::allocator_ratios(instances, n_max, ctx.seed.unwrap_or(0))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let q = |p| stats::quantile(&ratios, p).unwrap_or(f64::NAN);
    let (min, p10, median) = (q(0.0), q(0.1), q(0.5));
    ctx.say(format!("{:<10} {:>6} {:>10} {:>10} {:>10}", "instances", "n_max", "min", "p10", "median"));
    ctx.say(format!("{instances:<10} {n_max:>6} {min:>10.4} {p10:>10.4} {median:>10.4}"));
    if min >= 0.5 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("minimum ratio {min:.4} is below 0.5")))
    }
}

fn cmd_replay(ctx: &Ctx, io: &Io, trace: &Path) -> Result<(), Failure> {
    let config = ctx.load_config(&io.config)?;
    if !trace.exists() {
        return Err(Failure::Usage(format!("trace {} not found", trace.display())));
    }
    let oracle = ReplayOracle::from_path(trace).map_err(|e| Failure::Runtime(e.to_string()))?;
    let space = build_space(&config)?;
    let mut out = run_with_oracle(&config, space, oracle, ExecOptions::from_env())?;
    write_outputs(ctx, &mut out, &io.out)
}

fn cmd_report(ctx: &Ctx, events: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(events)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", events.display())))?;
    let log = EventLog::from_jsonl(&text).map_err(|e| Failure::Runtime(e.to_string()))?;
    let diag = compute_diagnostics(&log)?;
    let csv = diag.to_csv();
    match out {
        Some(dir) => {
            create_dir(dir)?;
            fs::write(dir.join("diagnostics.csv"), &csv)?;
            let coverage = diag.probe_counts.iter().min().copied().unwrap_or(0);
            ctx.say(format!(
                "{} cycles, T_c {}, {} evaluations, least-probed unit audited {coverage} times",
                diag.cycles.len(),
                diag.t_c,
                diag.evaluations
            ));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    let result = match &cli.command {
        Command::Run { io, trace } => cmd_run(&ctx, io, *trace),
        Command::Baseline { io, samples } => cmd_baseline(&ctx, io, *samples),
        Command::VerifyBounds => cmd_verify_bounds(&ctx),
        Command::BenchAlloc { instances, n_max } => cmd_bench_alloc(&ctx, *instances, *n_max),
        Command::Replay { io, trace } => cmd_replay(&ctx, io, trace),
        Command::Report { events, out } => cmd_report(&ctx, events, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
