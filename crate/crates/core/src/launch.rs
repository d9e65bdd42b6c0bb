//! Launcher command synthesis for aprun, jsrun, geopmlaunch and a plain
//! local shell.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LaunchError {
    #[error("invalid thread count {n}: {reason}")]
    InvalidThreadCount { n: u32, reason: &'static str },
    #[error("{kind} needs a thread count")]
    MissingThreadCount { kind: LauncherKind },
    #[error("nodes and ranks_per_node must both be >= 1")]
    InvalidShape,
    #[error("command template {0:?} produces no tokens")]
    EmptyCommand(String),
    #[error("environment variable {0} has an empty value")]
    EmptyEnvValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LauncherKind {
    ThetaAprun,
    SummitJsrunGpu,
    SummitJsrunCpu,
    GeopmAprun,
    LocalShell,
}

impl LauncherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LauncherKind::ThetaAprun => "theta_aprun",
            LauncherKind::SummitJsrunGpu => "summit_jsrun_gpu",
            LauncherKind::SummitJsrunCpu => "summit_jsrun_cpu",
            LauncherKind::GeopmAprun => "geopm_aprun",
            LauncherKind::LocalShell => "local_shell",
        }
    }

    pub fn needs_threads(self) -> bool {
        !matches!(self, LauncherKind::LocalShell | LauncherKind::GeopmAprun)
    }
}

impl fmt::Display for LauncherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LauncherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "theta_aprun" => LauncherKind::ThetaAprun,
            "summit_jsrun_gpu" => LauncherKind::SummitJsrunGpu,
            "summit_jsrun_cpu" => LauncherKind::SummitJsrunCpu,
            "geopm_aprun" => LauncherKind::GeopmAprun,
            "local_shell" => LauncherKind::LocalShell,
            other => return Err(format!("unknown launcher kind {other:?}")),
        })
    }
}

fn default_cores() -> u32 {
    42
}

fn default_command() -> String {
    "{exe}".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSpec {
    pub kind: LauncherKind,
    #[serde(default = "one")]
    pub nodes: u32,
    #[serde(default = "one")]
    pub ranks_per_node: u32,
    /// Cores per resource set for jsrun (`-c`).
    #[serde(default = "default_cores")]
    pub cores_per_rank: u32,
    /// Whitespace-separated command; `{exe}` is replaced by the executable
    /// path. No shell quoting is applied.
    #[serde(default = "default_command")]
    pub command: String,
}

fn one() -> u32 {
    1
}

impl LaunchSpec {
    pub fn new(kind: LauncherKind, nodes: u32, ranks_per_node: u32) -> Self {
        Self {
            kind,
            nodes,
            ranks_per_node,
            cores_per_rank: default_cores(),
            command: default_command(),
        }
    }

    pub fn with_command(mut self, command: impl Into<String>) -> Self {
        self.command = command.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchPlan {
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    /// Report file geopmlaunch is told to write, if any.
    pub report: Option<String>,
}

impl LaunchPlan {
    pub fn command_line(&self) -> String {
        self.argv.join(" ")
    }
}

impl fmt::Display for LaunchPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.env {
            write!(f, "{k}={v} ")?;
        }
        f.write_str(&self.command_line())
    }
}

/// Depth and hardware threads per core for `n` OpenMP threads on a 64-core,
/// 4-way SMT node: `(n, 1)` up to 64, then `(n/2, 2)`, `(n/3, 3)`, `(n/4, 4)`.
pub fn theta_depth_map(n: u32) -> Result<(u32, u32), LaunchError> {
    let bad = |reason| Err(LaunchError::InvalidThreadCount { n, reason });
    match n {
        0 => bad("must be positive"),
        1..=64 => Ok((n, 1)),
        65..=128 if n.is_multiple_of(2) => Ok((n / 2, 2)),
        65..=128 => bad("must be even above 64"),
        129..=192 if n.is_multiple_of(3) => Ok((n / 3, 3)),
        129..=192 => bad("must be divisible by 3 above 128"),
        193..=256 if n.is_multiple_of(4) => Ok((n / 4, 4)),
        193..=256 => bad("must be divisible by 4 above 192"),
        _ => bad("must be at most 256"),
    }
}

fn summit_packed(n: u32) -> Result<u32, LaunchError> {
    if n == 0 || !n.is_multiple_of(4) {
        return Err(LaunchError::InvalidThreadCount {
            n,
            reason: "must be a positive multiple of 4",
        });
    }
    Ok(n / 4)
}

/// Renders the launcher argv for one evaluation.
///
/// `report` names the geopm report file (`gm.report` when absent) and is
/// ignored by the other kinds. For every kind except `local_shell`,
/// `OMP_NUM_THREADS` is set to `n_threads` unless `env` already binds it.
pub fn build_plan(
    spec: &LaunchSpec,
    n_threads: Option<u32>,
    env: &BTreeMap<String, String>,
    exe: &str,
    report: Option<&str>,
) -> Result<LaunchPlan, LaunchError> {
    if spec.nodes == 0 || spec.ranks_per_node == 0 {
        return Err(LaunchError::InvalidShape);
    }
    let app: Vec<String> = spec
        .command
        .split_whitespace()
        .map(|t| t.replace("{exe}", exe))
        .collect();
    if app.is_empty() {
        return Err(LaunchError::EmptyCommand(spec.command.clone()));
    }
    let threads = || n_threads.ok_or(LaunchError::MissingThreadCount { kind: spec.kind });
    let ranks = (spec.nodes as u64 * spec.ranks_per_node as u64).to_string();
    let s = |v: &str| v.to_string();

    let mut report_file = None;
    let mut argv: Vec<String> = match spec.kind {
        LauncherKind::ThetaAprun => {
            let (d, j) = theta_depth_map(threads()?)?;
            vec![
                s("aprun"),
                s("-n"),
                ranks,
                s("-N"),
                spec.ranks_per_node.to_string(),
                s("-cc"),
                s("depth"),
                s("-d"),
                d.to_string(),
                s("-j"),
                j.to_string(),
            ]
        }
        LauncherKind::GeopmAprun => {
            if let Some(n) = n_threads {
                theta_depth_map(n)?;
            }
            let name = report.unwrap_or("gm.report").to_string();
            report_file = Some(name.clone());
            vec![
                s("geopmlaunch"),
                s("aprun"),
                s("-n"),
                ranks,
                s("-N"),
                spec.ranks_per_node.to_string(),
                s("--geopm-ctl=pthread"),
                s("--geopm-report"),
                name,
                s("--"),
            ]
        }
        LauncherKind::SummitJsrunGpu | LauncherKind::SummitJsrunCpu => {
            let packed = summit_packed(threads()?)?;
            let (a, g) = if spec.kind == LauncherKind::SummitJsrunGpu {
                ("6", "6")
            } else {
                ("1", "0")
            };
            vec![
                s("jsrun"),
                s("-n"),
                spec.nodes.to_string(),
                s("-a"),
                s(a),
                s("-g"),
                s(g),
                s("-c"),
                spec.cores_per_rank.to_string(),
                format!("-bpacked:{packed}"),
                s("-dpacked"),
            ]
        }
        LauncherKind::LocalShell => Vec::new(),
    };
    argv.extend(app);

    let mut env = env.clone();
    if spec.kind != LauncherKind::LocalShell {
        if let Some(n) = n_threads {
            env.entry("OMP_NUM_THREADS".into())
                .or_insert_with(|| n.to_string());
        }
    }
    if let Some((k, _)) = env.iter().find(|(_, v)| v.is_empty()) {
        return Err(LaunchError::EmptyEnvValue(k.clone()));
    }
    Ok(LaunchPlan {
        argv,
        env,
        report: report_file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    #[test]
    fn depth_map_examples() {
        assert_eq!(theta_depth_map(64), Ok((64, 1)));
        assert_eq!(theta_depth_map(96), Ok((48, 2)));
        assert_eq!(theta_depth_map(192), Ok((64, 3)));
        assert_eq!(theta_depth_map(256), Ok((64, 4)));
        for n in [0, 65, 130, 194, 260] {
            assert!(theta_depth_map(n).is_err(), "{n}");
        }
    }

    #[test]
    fn theta_plan_for_96_threads() {
        let spec = LaunchSpec::new(LauncherKind::ThetaAprun, 4096, 1).with_command("{exe} -m event");
        let plan = build_plan(&spec, Some(96), &no_env(), "./XSBench", None).unwrap();
        assert_eq!(
            plan.command_line(),
            "aprun -n 4096 -N 1 -cc depth -d 48 -j 2 ./XSBench -m event"
        );
        assert_eq!(plan.env["OMP_NUM_THREADS"], "96");
    }

    #[test]
    fn ranks_multiply_nodes() {
        let spec = LaunchSpec::new(LauncherKind::ThetaAprun, 8, 4);
        let plan = build_plan(&spec, Some(16), &no_env(), "a.out", None).unwrap();
        assert!(plan.command_line().starts_with("aprun -n 32 -N 4 "));
    }

    #[test]
    fn jsrun_needs_multiple_of_four() {
        let spec = LaunchSpec::new(LauncherKind::SummitJsrunGpu, 4096, 1);
        assert!(build_plan(&spec, Some(42), &no_env(), "x", None).is_err());
        assert!(matches!(
            build_plan(&spec, None, &no_env(), "x", None),
            Err(LaunchError::MissingThreadCount { .. })
        ));
    }

    #[test]
    fn geopm_default_report_name() {
        let spec = LaunchSpec::new(LauncherKind::GeopmAprun, 2, 1);
        let plan = build_plan(&spec, Some(64), &no_env(), "app", None).unwrap();
        assert_eq!(plan.report.as_deref(), Some("gm.report"));
        assert_eq!(
            plan.command_line(),
            "geopmlaunch aprun -n 2 -N 1 --geopm-ctl=pthread --geopm-report gm.report -- app"
        );
    }

    #[test]
    fn explicit_env_binding_wins() {
        let spec = LaunchSpec::new(LauncherKind::ThetaAprun, 1, 1);
        let env = BTreeMap::from([("OMP_NUM_THREADS".to_string(), "8".to_string())]);
        let plan = build_plan(&spec, Some(16), &env, "app", None).unwrap();
        assert_eq!(plan.env["OMP_NUM_THREADS"], "8");
    }

    #[test]
    fn local_shell_is_just_the_command() {
        let spec = LaunchSpec::new(LauncherKind::LocalShell, 1, 1).with_command("sh {exe} 2 4096");
        let env = BTreeMap::from([("OMP_PLACES".to_string(), "cores".to_string())]);
        let plan = build_plan(&spec, None, &env, "/tmp/t0/app.sh", None).unwrap();
        assert_eq!(plan.argv, ["sh", "/tmp/t0/app.sh", "2", "4096"]);
        assert_eq!(plan.env, env);
    }

    #[test]
    fn rejects_bad_shapes_and_empty_values() {
        let spec = LaunchSpec::new(LauncherKind::LocalShell, 0, 1);
        assert_eq!(
            build_plan(&spec, None, &no_env(), "x", None),
            Err(LaunchError::InvalidShape)
        );
        let spec = LaunchSpec::new(LauncherKind::LocalShell, 1, 1).with_command("  ");
        assert!(matches!(
            build_plan(&spec, None, &no_env(), "x", None),
            Err(LaunchError::EmptyCommand(_))
        ));
        let spec = LaunchSpec::new(LauncherKind::LocalShell, 1, 1);
        let env = BTreeMap::from([("OMP_SCHEDULE".to_string(), String::new())]);
        assert!(matches!(
            build_plan(&spec, None, &env, "x", None),
            Err(LaunchError::EmptyEnvValue(_))
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            LauncherKind::ThetaAprun,
            LauncherKind::SummitJsrunGpu,
            LauncherKind::SummitJsrunCpu,
            LauncherKind::GeopmAprun,
            LauncherKind::LocalShell,
        ] {
            assert_eq!(k.as_str().parse::<LauncherKind>(), Ok(k));
        }
        assert!("slurm".parse::<LauncherKind>().is_err());
    }
}
