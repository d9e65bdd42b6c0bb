//! Trial execution, metric parsing and the simulated objective.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::launch::{build_plan, LaunchPlan, LaunchSpec};
use crate::mold::{bind_env, EnvBinding, MoldFile};
use crate::space::{Configuration, ParamKind, ParamSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(rename = "runtime_s", alias = "runtime")]
    RuntimeS,
    #[serde(rename = "node_energy_J", alias = "energy")]
    NodeEnergyJ,
    #[serde(rename = "edp_Js", alias = "edp")]
    EdpJs,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::RuntimeS => "runtime_s",
            MetricKind::NodeEnergyJ => "node_energy_J",
            MetricKind::EdpJs => "edp_Js",
        }
    }

    pub fn needs_energy(self) -> bool {
        !matches!(self, MetricKind::RuntimeS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    CompileFailed,
    RunFailed,
    Timeout,
    ParseFailed,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::CompileFailed => "compile_failed",
            TrialStatus::RunFailed => "run_failed",
            TrialStatus::Timeout => "timeout",
            TrialStatus::ParseFailed => "parse_failed",
        }
    }
}

/// Clock tolerance for timing consistency checks, in seconds.
pub const CLOCK_TOLERANCE_S: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub configuration: Configuration,
    pub metric: MetricKind,
    pub value: Option<f64>,
    pub status: TrialStatus,
    pub compile_time_s: f64,
    /// Measured wall time of the launched application.
    pub app_runtime_s: Option<f64>,
    pub elapsed_total_s: f64,
    pub started_at: DateTime<Utc>,
    /// Seconds from the start of the search to the completion of this trial.
    pub finished_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl TrialRecord {
    pub fn ok(configuration: Configuration, metric: MetricKind, value: f64) -> Self {
        Self {
            trial_index: 0,
            configuration,
            metric,
            value: Some(value),
            status: TrialStatus::Ok,
            compile_time_s: 0.0,
            app_runtime_s: Some(0.0),
            elapsed_total_s: 0.0,
            started_at: Utc::now(),
            finished_s: 0.0,
            message: None,
        }
    }

    pub fn failed(
        configuration: Configuration,
        metric: MetricKind,
        status: TrialStatus,
        message: impl Into<String>,
    ) -> Self {
        Self {
            value: None,
            status,
            app_runtime_s: None,
            message: Some(message.into()),
            ..Self::ok(configuration, metric, 0.0)
        }
    }

    /// The metric value when the trial succeeded with a finite value.
    pub fn ok_value(&self) -> Option<f64> {
        match (self.status, self.value) {
            (TrialStatus::Ok, Some(v)) if v.is_finite() => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse failed: {0}")]
pub struct ParseError(pub String);

/// Longest prefix of `s` that is a decimal real literal.
fn leading_real(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        let frac_start = i + 1;
        let mut j = frac_start;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        digits += j - frac_start;
        if digits > 0 {
            i = j;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_start {
            i = j;
        }
    }
    s[..i].parse().ok().filter(|v: &f64| v.is_finite())
}

/// Runtime in seconds from application output: the first line containing
/// `Runtime`, split at the first `": "`, leading real literal of the rest.
pub fn parse_runtime(output: &str) -> Result<f64, ParseError> {
    let line = output
        .lines()
        .find(|l| l.contains("Runtime"))
        .ok_or_else(|| ParseError("no line contains `Runtime`".into()))?;
    let (_, rest) = line
        .split_once(": ")
        .ok_or_else(|| ParseError(format!("no `: ` separator in {line:?}")))?;
    leading_real(rest.trim_start()).ok_or_else(|| ParseError(format!("no number in {line:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub package_energy_j: f64,
    pub dram_energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub nodes: Vec<NodeEnergy>,
    /// Number of `Application Totals` lines seen.
    pub node_count: usize,
}

fn field_value(line: &str) -> Result<f64, ParseError> {
    let (_, rest) = line
        .split_once(": ")
        .ok_or_else(|| ParseError(format!("no `: ` separator in {line:?}")))?;
    let v = leading_real(rest.trim())
        .ok_or_else(|| ParseError(format!("malformed energy value in {line:?}")))?;
    if v < 0.0 {
        return Err(ParseError(format!("negative energy in {line:?}")));
    }
    Ok(v)
}

/// Parses a GEOPM report. Each `Application Totals` line toggles the
/// in-section flag and counts one node. Inside a section the first
/// `package-energy` line and the `dram-energy` line supply that node's
/// values; the `dram-energy` line also clears the flag.
pub fn parse_geopm_report(report: &str) -> Result<EnergyReport, ParseError> {
    let mut inside = false;
    let mut count = 0usize;
    let mut nodes: Vec<NodeEnergy> = Vec::new();
    let mut seen_package = false;
    for line in report.lines() {
        if line.contains("Application Totals") {
            inside = !inside;
            count += 1;
            if inside {
                nodes.push(NodeEnergy::default());
                seen_package = false;
            }
        }
        if !inside {
            continue;
        }
        let node = nodes.last_mut().expect("section open implies a node");
        if line.contains("package-energy") && !seen_package {
            node.package_energy_j = field_value(line)?;
            seen_package = true;
        }
        if line.contains("dram-energy") {
            node.dram_energy_j = field_value(line)?;
            inside = false;
        }
    }
    if count == 0 {
        return Err(ParseError("Wrong input file! (no `Application Totals`)".into()));
    }
    Ok(EnergyReport {
        nodes,
        node_count: count,
    })
}

/// Total package plus DRAM energy divided by the node count.
pub fn average_node_energy(r: &EnergyReport) -> f64 {
    let total: f64 = r
        .nodes
        .iter()
        .map(|n| n.package_energy_j + n.dram_energy_j)
        .sum();
    total / r.node_count as f64
}

pub fn edp(energy_j: f64, runtime_s: f64) -> f64 {
    energy_j * runtime_s
}

/// Something that runs one configuration and reports the outcome.
///
/// Returning `Err` is a hard fault that aborts the search; ordinary
/// failures are reported as a [`TrialRecord`] with a failure status.
pub trait Evaluator {
    fn metric(&self) -> MetricKind;

    fn evaluate(
        &mut self,
        trial_index: usize,
        c: &Configuration,
    ) -> Result<TrialRecord, anyhow::Error>;
}

/// Quadratic bowl over ordinal indices plus a fixed penalty for each
/// categorical parameter not at its target value.
///
/// Parameter `i` with `n` values has target index `(2(n-1))/3` (integer
/// division) if ordinal and `n-1` if categorical, and weight
/// `w_i = 1 + i/4`. The objective is
/// `1 + sum_ord w_i ((k_i - t_i)/max(n-1,1))^2 + sum_cat 0.5 w_i [k_i != t_i]`,
/// whose unique minimizer is the all-targets configuration with value 1.
pub fn simulated_objective(space: &ParamSpace, c: &Configuration) -> f64 {
    let idx = space
        .indices(c)
        .expect("simulated objective needs a valid configuration");
    let mut value = 1.0;
    for (i, (p, &k)) in space.parameters().iter().zip(&idx).enumerate() {
        let w = 1.0 + i as f64 / 4.0;
        let t = simulated_target(p.kind(), p.len());
        match p.kind() {
            ParamKind::Ordinal => {
                let span = (p.len() - 1).max(1) as f64;
                let d = (k as f64 - t as f64) / span;
                value += w * d * d;
            }
            ParamKind::Categorical => {
                if k != t {
                    value += 0.5 * w;
                }
            }
        }
    }
    value
}

fn simulated_target(kind: ParamKind, n: usize) -> usize {
    match kind {
        ParamKind::Ordinal => 2 * (n - 1) / 3,
        ParamKind::Categorical => n - 1,
    }
}

/// The unique minimizer of [`simulated_objective`].
pub fn simulated_minimizer(space: &ParamSpace) -> Configuration {
    let idx: Vec<usize> = space
        .parameters()
        .iter()
        .map(|p| simulated_target(p.kind(), p.len()))
        .collect();
    space.from_indices(&idx)
}

pub const SIMULATED_MINIMUM: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SimulatedEvaluator {
    space: ParamSpace,
    metric: MetricKind,
}

impl SimulatedEvaluator {
    pub fn new(space: ParamSpace, metric: MetricKind) -> Self {
        Self { space, metric }
    }
}

impl Evaluator for SimulatedEvaluator {
    fn metric(&self) -> MetricKind {
        self.metric
    }

    fn evaluate(
        &mut self,
        trial_index: usize,
        c: &Configuration,
    ) -> Result<TrialRecord, anyhow::Error> {
        let started = Instant::now();
        let value = simulated_objective(&self.space, c);
        let mut rec = TrialRecord::ok(c.clone(), self.metric, value);
        rec.trial_index = trial_index;
        rec.elapsed_total_s = started.elapsed().as_secs_f64();
        Ok(rec)
    }
}

/// Everything needed to run one live trial.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub space: ParamSpace,
    pub molds: Vec<MoldFile>,
    pub env: EnvBinding,
    /// Shell command run in the trial directory; empty means no build step.
    pub build_command: String,
    /// Optional shell command run after a successful launch; nonzero exit
    /// marks the trial `run_failed`.
    pub validate_command: Option<String>,
    pub launch: LaunchSpec,
    /// Executable path, relative to the trial directory.
    pub executable: String,
    /// Parameter holding the OpenMP thread count, and its multiplier.
    pub threads_param: Option<String>,
    pub threads_scale: u32,
    pub metric: MetricKind,
    /// Report file to parse for energy metrics. Relative paths resolve
    /// against the trial directory; `{trial}` expands to the trial index.
    pub energy_report: Option<String>,
    pub timeout: Option<Duration>,
    pub scratch: PathBuf,
}

enum Outcome {
    Exited(ExitStatus),
    TimedOut,
}

/// Runs `cmd` in its own process group with stdout and stderr sent to
/// `log`, killing the whole group on timeout.
fn run_with_timeout(
    mut cmd: Command,
    log: &Path,
    timeout: Option<Duration>,
) -> std::io::Result<(Outcome, Duration)> {
    use std::os::unix::process::CommandExt;
    let out = File::create(log)?;
    let err = out.try_clone()?;
    cmd.stdin(Stdio::null())
        .stdout(Stdio::from(out))
        .stderr(Stdio::from(err))
        .process_group(0);
    let started = Instant::now();
    let mut child = cmd.spawn()?;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((Outcome::Exited(status), started.elapsed()));
        }
        if timeout.is_some_and(|t| started.elapsed() >= t) {
            // SAFETY: kill(2) with a negative pid targets the child's own
            // process group, created by process_group(0) above.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            return Ok((Outcome::TimedOut, started.elapsed()));
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn shell(script: &str, dir: &Path) -> Command {
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(script).current_dir(dir);
    cmd
}

impl Pipeline {
    pub fn trial_dir(&self, trial_index: usize) -> PathBuf {
        self.scratch.join(format!("trial_{trial_index:05}"))
    }

    pub fn thread_count(&self, c: &Configuration) -> Result<Option<u32>, String> {
        let Some(param) = &self.threads_param else {
            return Ok(None);
        };
        let raw = c
            .get(param)
            .ok_or_else(|| format!("thread parameter `{param}` missing"))?;
        let n: u32 = raw
            .trim()
            .parse()
            .map_err(|_| format!("thread parameter `{param}` value {raw:?} is not an integer"))?;
        Ok(Some(n * self.threads_scale))
    }

    /// Launch plan for trial `trial_index`, without running anything.
    pub fn plan(&self, trial_index: usize, c: &Configuration) -> Result<LaunchPlan, String> {
        let env = bind_env(&self.env, c).map_err(|e| e.to_string())?;
        let threads = self.thread_count(c)?;
        let exe = self.trial_dir(trial_index).join(&self.executable);
        let report = format!("gm.{trial_index}.report");
        build_plan(
            &self.launch,
            threads,
            &env,
            &exe.display().to_string(),
            Some(&report),
        )
        .map_err(|e| e.to_string())
    }

    /// Runs render, build, launch and metric parsing for one configuration.
    /// Every outcome, including internal errors, becomes a record.
    pub fn evaluate_trial(&self, trial_index: usize, c: &Configuration) -> TrialRecord {
        let started_at = Utc::now();
        let t0 = Instant::now();
        let mut rec = match self.run_stages(trial_index, c) {
            Ok(rec) => rec,
            Err((status, msg)) => TrialRecord::failed(c.clone(), self.metric, status, msg),
        };
        if rec.status != TrialStatus::Ok {
            rec.app_runtime_s = None;
        }
        rec.trial_index = trial_index;
        rec.started_at = started_at;
        rec.elapsed_total_s = t0.elapsed().as_secs_f64();
        if rec.status == TrialStatus::Ok {
            // Trial directories are kept only for failures.
            let _ = fs::remove_dir_all(self.trial_dir(trial_index));
        }
        rec
    }

    fn run_stages(
        &self,
        trial_index: usize,
        c: &Configuration,
    ) -> Result<TrialRecord, (TrialStatus, String)> {
        let run_failed = |m: String| (TrialStatus::RunFailed, m);
        let dir = self.trial_dir(trial_index);
        fs::create_dir_all(&dir).map_err(|e| run_failed(format!("{}: {e}", dir.display())))?;
        for mold in &self.molds {
            mold.write_into(&dir, c)
                .map_err(|e| (TrialStatus::CompileFailed, e.to_string()))?;
        }

        let mut compile_time_s = 0.0;
        if !self.build_command.trim().is_empty() {
            let (outcome, took) =
                run_with_timeout(shell(&self.build_command, &dir), &dir.join("build.log"), self.timeout)
                    .map_err(|e| (TrialStatus::CompileFailed, e.to_string()))?;
            compile_time_s = took.as_secs_f64();
            match outcome {
                Outcome::TimedOut => return Err((TrialStatus::Timeout, "build timed out".into())),
                Outcome::Exited(s) if !s.success() => {
                    return Err((TrialStatus::CompileFailed, format!("build exited with {s}")))
                }
                Outcome::Exited(_) => {}
            }
        }

        let plan = self.plan(trial_index, c).map_err(run_failed)?;
        let mut cmd = Command::new(&plan.argv[0]);
        cmd.args(&plan.argv[1..]).envs(&plan.env).current_dir(&dir);
        let out_path = dir.join("out.txt");
        let (outcome, took) = run_with_timeout(cmd, &out_path, self.timeout)
            .map_err(|e| run_failed(format!("{}: {e}", plan.argv[0])))?;
        match outcome {
            Outcome::TimedOut => return Err((TrialStatus::Timeout, "run timed out".into())),
            Outcome::Exited(s) if !s.success() => {
                return Err(run_failed(format!("application exited with {s}")))
            }
            Outcome::Exited(_) => {}
        }
        let app_runtime_s = took.as_secs_f64();

        if let Some(check) = &self.validate_command {
            let (outcome, _) = run_with_timeout(shell(check, &dir), &dir.join("validate.log"), self.timeout)
                .map_err(|e| run_failed(e.to_string()))?;
            if !matches!(outcome, Outcome::Exited(s) if s.success()) {
                return Err(run_failed("validation command failed".into()));
            }
        }

        let parse_failed = |e: ParseError| (TrialStatus::ParseFailed, e.0);
        let output = fs::read_to_string(&out_path).unwrap_or_default();
        let value = match self.metric {
            MetricKind::RuntimeS => parse_runtime(&output).map_err(parse_failed)?,
            MetricKind::NodeEnergyJ => self.read_energy(&dir, trial_index, &plan)?,
            MetricKind::EdpJs => {
                let energy = self.read_energy(&dir, trial_index, &plan)?;
                edp(energy, parse_runtime(&output).map_err(parse_failed)?)
            }
        };
        let mut rec = TrialRecord::ok(c.clone(), self.metric, value);
        rec.compile_time_s = compile_time_s;
        rec.app_runtime_s = Some(app_runtime_s);
        Ok(rec)
    }

    fn read_energy(
        &self,
        dir: &Path,
        trial_index: usize,
        plan: &LaunchPlan,
    ) -> Result<f64, (TrialStatus, String)> {
        let name = self
            .energy_report
            .as_ref()
            .map(|r| r.replace("{trial}", &trial_index.to_string()))
            .or_else(|| plan.report.clone())
            .ok_or_else(|| (TrialStatus::ParseFailed, "no energy report configured".into()))?;
        let path = dir.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| (TrialStatus::ParseFailed, format!("{}: {e}", path.display())))?;
        let report = parse_geopm_report(&text).map_err(|e| (TrialStatus::ParseFailed, e.0))?;
        Ok(average_node_energy(&report))
    }
}

impl Evaluator for Pipeline {
    fn metric(&self) -> MetricKind {
        self.metric
    }

    fn evaluate(
        &mut self,
        trial_index: usize,
        c: &Configuration,
    ) -> Result<TrialRecord, anyhow::Error> {
        Ok(self.evaluate_trial(trial_index, c))
    }
}
