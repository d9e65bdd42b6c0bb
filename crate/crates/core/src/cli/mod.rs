//! Command-line front end: `run`, `baseline`, `report` and `enumerate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or problem-file error,
//! 3 refusal (enumeration cap exceeded).

pub mod problem;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::optimizer::{run_search, Search, SearchBudget, StopReason};
use crate::store::{improvement_pct, overhead, LogMeta, TrialLog};

pub use problem::{Diagnostic, Problem, ProblemError, ProblemFile};

pub const TRIALS_LOG: &str = "trials.log";
pub const RESULTS_CSV: &str = "results.csv";
pub const PLOT_TSV: &str = "plot.tsv";
pub const BASELINE_FILE: &str = "baseline.txt";
pub const SUMMARY_JSON: &str = "summary.json";

/// Largest configuration count `enumerate` will evaluate with a live
/// pipeline.
pub const LIVE_ENUMERATE_CAP: u128 = 64;

#[derive(Debug, Parser)]
#[command(name = "rftune", version, about = "Random-forest Bayesian autotuner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the search and write trials.log, results.csv and plot.tsv.
    Run(RunArgs),
    /// Evaluate the default configuration and record the best of N repeats.
    Baseline(BaselineArgs),
    /// Summarize a finished run.
    Report(ReportArgs),
    /// Evaluate every configuration of a small space, sorted by objective.
    Enumerate(EnumerateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Evaluation budget; defaults to the problem's max_evals.
    #[arg(long)]
    pub max_evals: Option<usize>,
    /// Wall-clock limit in seconds; defaults to the problem's wall_clock_s.
    #[arg(long)]
    pub wall_clock: Option<f64>,
    /// Overrides the space seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "rf")]
    pub learner: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a previous `run`.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Baseline value; defaults to the one saved by `baseline`.
    #[arg(long)]
    pub baseline: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EnumerateArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub cap: u128,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Refusal(pub String);

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e)
            if e
                .downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ProblemError>().is_some() {
                ExitCode::from(2)
            } else if e.downcast_ref::<Refusal>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Baseline(a) => cmd_baseline(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::Enumerate(a) => cmd_enumerate(&a, out),
    }
}

fn load_problem(path: &Path) -> anyhow::Result<Problem> {
    Ok(Problem::load(path)?)
}

pub fn check_learner(name: &str) -> anyhow::Result<()> {
    if name.eq_ignore_ascii_case("rf") {
        Ok(())
    } else {
        bail!("unsupported learner `{name}` (only `rf` is available)")
    }
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    check_learner(&args.learner)?;
    let mut problem = load_problem(&args.problem)?;
    let seed = args.seed.unwrap_or(problem.space.seed());
    problem.space = problem.space.with_seed(seed);
    let max_evals = args.max_evals.or(problem.file.max_evals);
    let wall = args.wall_clock.or(problem.file.wall_clock_s);
    if let Some(w) = wall {
        if !(w > 0.0 && w.is_finite()) {
            bail!("wall-clock limit must be positive, got {w}");
        }
    }
    let budget = SearchBudget {
        max_evals,
        wall_clock_limit: wall.map(Duration::from_secs_f64),
    };
    budget.validate().map_err(anyhow::Error::msg)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    match fs::remove_file(args.out.join(SUMMARY_JSON)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let meta = LogMeta {
        problem: problem.name().to_string(),
        seed,
        space_fingerprint: problem.space.fingerprint(),
        parameters: problem
            .space
            .parameters()
            .iter()
            .map(|p| p.name().to_string())
            .collect(),
        max_evals,
        wall_clock_limit_s: wall,
        metric: problem.metric(),
        launcher: problem.file.launch.kind,
    };
    let mut log = TrialLog::create(&args.out.join(TRIALS_LOG), meta)?;
    let mut forest = problem.file.forest.clone();
    forest.seed = forest.seed.wrapping_add(seed);
    let mut search = Search::new(
        problem.space.clone(),
        problem.file.acquisition.clone(),
        forest,
        seed,
    );
    let mut evaluator = problem.evaluator(&args.out.join("trials"));
    let result = run_search(&mut search, &budget, evaluator.as_mut(), |r| {
        log.append(r.clone())?;
        Ok(())
    });
    write_exports(&log, &args.out)?;
    let stop = result?;
    fs::write(
        args.out.join(SUMMARY_JSON),
        serde_json::to_string_pretty(&serde_json::json!({
            "stop_reason": stop,
            "evaluations": log.len(),
        }))?,
    )?;

    writeln!(out, "problem: {}", problem.name())?;
    writeln!(out, "evaluations: {}", log.len())?;
    writeln!(out, "stopped: {}", stop.describe())?;
    match log.best() {
        Ok((c, v)) => {
            writeln!(out, "best {}: {}", problem.metric().as_str(), v)?;
            writeln!(out, "best configuration: {c}")?;
        }
        Err(_) => {
            writeln!(out, "warning: every trial failed, no best configuration")?;
            eprintln!("warning: every trial failed");
        }
    }
    if stop == StopReason::SpaceExhausted {
        writeln!(out, "note: every configuration was evaluated")?;
    }
    Ok(())
}

fn write_exports(log: &TrialLog, dir: &Path) -> anyhow::Result<()> {
    let csv = dir.join(RESULTS_CSV);
    log.write_csv(BufWriter::new(File::create(&csv)?))
        .with_context(|| format!("writing {}", csv.display()))?;
    let tsv = dir.join(PLOT_TSV);
    let mut w = BufWriter::new(File::create(&tsv)?);
    log.write_plot_data(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Minimum over the successful repeats.
pub fn baseline_value(values: &[Option<f64>]) -> Option<f64> {
    values.iter().flatten().copied().reduce(f64::min)
}

pub fn cmd_baseline(args: &BaselineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be >= 1");
    }
    let problem = load_problem(&args.problem)?;
    fs::create_dir_all(&args.out)?;
    let default = problem.space.default_configuration();
    let mut evaluator = problem.evaluator(&args.out.join("baseline_trials"));
    let mut values = Vec::with_capacity(args.repeats);
    for i in 0..args.repeats {
        let r = evaluator.evaluate(i, &default)?;
        match r.ok_value() {
            Some(v) => writeln!(out, "repeat {i}: {v}")?,
            None => writeln!(
                out,
                "repeat {i}: {:?} {}",
                r.status,
                r.message.as_deref().unwrap_or("")
            )?,
        }
        values.push(r.ok_value());
    }
    let Some(best) = baseline_value(&values) else {
        bail!("all {} baseline repeats failed", args.repeats);
    };
    fs::write(args.out.join(BASELINE_FILE), format!("{best}\n"))?;
    writeln!(out, "baseline: {best}")?;
    Ok(())
}

/// Why the run in `dir` stopped, if it finished cleanly.
pub fn read_stop_reason(dir: &Path) -> anyhow::Result<Option<StopReason>> {
    let path = dir.join(SUMMARY_JSON);
    match fs::read_to_string(&path) {
        Ok(s) => {
            let v: serde_json::Value = serde_json::from_str(&s)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(Some(serde_json::from_value(v["stop_reason"].clone())?))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn read_baseline(dir: &Path) -> anyhow::Result<Option<f64>> {
    let path = dir.join(BASELINE_FILE);
    match fs::read_to_string(&path) {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .with_context(|| format!("reading {}", path.display()))?,
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Text summary of a trial log.
pub fn format_report(log: &TrialLog, baseline: Option<f64>) -> anyhow::Result<String> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let meta = log.meta();
    let ok = log.records().iter().filter(|r| r.ok_value().is_some()).count();
    writeln!(s, "problem: {}", meta.problem)?;
    writeln!(
        s,
        "trials: {} ({} ok, {} failed)",
        log.len(),
        ok,
        log.len() - ok
    )?;
    let best = log.best().ok();
    match best {
        Some((c, v)) => {
            writeln!(s, "best {}: {}", meta.metric.as_str(), v)?;
            writeln!(s, "best configuration: {c}")?;
        }
        None => writeln!(s, "best: none (no successful trial)")?,
    }
    match (baseline, best) {
        (Some(b), Some((_, v))) => {
            writeln!(s, "baseline: {b}")?;
            writeln!(s, "improvement: {:.2}%", improvement_pct(b, v)?)?;
        }
        (Some(b), None) => writeln!(s, "baseline: {b}")?,
        (None, _) => writeln!(s, "baseline: not available (run `rftune baseline`)")?,
    }
    let overheads = log
        .records()
        .iter()
        .filter(|r| r.app_runtime_s.is_some())
        .map(overhead)
        .collect::<Result<Vec<_>, _>>()?;
    if overheads.is_empty() {
        writeln!(s, "overhead: n/a")?;
    } else {
        let mean = overheads.iter().sum::<f64>() / overheads.len() as f64;
        let max = overheads.iter().copied().fold(0.0, f64::max);
        writeln!(s, "overhead: mean {mean:.3} s, max {max:.3} s")?;
    }
    Ok(s)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (log, report) = TrialLog::load(&args.out.join(TRIALS_LOG))?;
    if report.discarded_bytes > 0 {
        eprintln!(
            "warning: ignored {} bytes of an incomplete trailing record",
            report.discarded_bytes
        );
    }
    let baseline = match args.baseline {
        Some(b) => Some(b),
        None => read_baseline(&args.out)?,
    };
    out.write_all(format_report(&log, baseline)?.as_bytes())?;
    match read_stop_reason(&args.out)? {
        Some(stop) => writeln!(out, "stopped: {}", stop.describe())?,
        None => writeln!(out, "stopped: unknown (run interrupted or still going)")?,
    }
    Ok(())
}

pub fn cmd_enumerate(args: &EnumerateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let problem = load_problem(&args.problem)?;
    let n = problem.space.cardinality();
    if n > args.cap {
        return Err(Refusal(format!(
            "space has {n} configurations, more than --cap {}",
            args.cap
        ))
        .into());
    }
    if problem.is_live() && n > LIVE_ENUMERATE_CAP {
        return Err(Refusal(format!(
            "space has {n} configurations; enumerating a live pipeline is limited to {LIVE_ENUMERATE_CAP}"
        ))
        .into());
    }
    let scratch = std::env::temp_dir().join(format!("rftune-enumerate-{}", std::process::id()));
    let mut evaluator = problem.evaluator(&scratch);
    let mut rows = Vec::new();
    for (i, c) in problem.space.enumerate(args.cap)?.enumerate() {
        let r = evaluator.evaluate(i, &c)?;
        rows.push((r.ok_value(), c));
    }
    rows.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let names: Vec<&str> = problem.space.parameters().iter().map(|p| p.name()).collect();
    writeln!(out, "rank\t{}\t{}", names.join("\t"), problem.metric().as_str())?;
    for (rank, (v, c)) in rows.iter().enumerate() {
        let vals: Vec<&str> = c.iter().map(|(_, v)| v).collect();
        let v = v.map_or_else(|| "failed".to_string(), |v| v.to_string());
        writeln!(out, "{}\t{}\t{}", rank + 1, vals.join("\t"), v)?;
    }
    Ok(())
}
