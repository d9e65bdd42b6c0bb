//! Declarative problem files.
//!
//! A problem file is TOML. Relative paths inside it resolve against the
//! directory containing the file. See `problems/` at the repository root for
//! complete examples; the grammar is:
//!
//! ```toml
//! name = "xsbench-mixed"
//! evaluator = "simulated"        # or "pipeline"
//! metric = "runtime"             # runtime | energy | edp
//! build_command = "make"         # pipeline only, run in the trial dir
//! validate_command = "..."       # optional
//! energy_report = "gm.report"    # energy/edp: report file in the trial dir
//! timeout_s = 600.0              # optional per-stage timeout
//! wall_clock_s = 1800.0          # optional search wall-clock limit
//! max_evals = 200                # optional default for --max-evals
//!
//! [space]
//! seed = 1234
//! [[space.params]]
//! name = "p0"
//! kind = "ordinal"               # or "categorical"
//! values = ["4", "8"]
//! default = "8"
//!
//! [[molds]]
//! source = "src/kernel.c"
//! destination = "kernel.c"
//!
//! [env]
//! OMP_NUM_THREADS = "p0"         # environment variable = parameter
//!
//! [launch]
//! kind = "theta_aprun"
//! nodes = 4096
//! ranks_per_node = 1
//! cores_per_rank = 42
//! command = "{exe} -m event"
//! executable = "XSBench"
//! threads_param = "p0"
//! threads_scale = 1
//!
//! [forest]                       # optional overrides
//! n_trees = 50
//!
//! [acquisition]                  # optional overrides
//! kappa = 1.96
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::evaluate::{Evaluator, MetricKind, Pipeline, SimulatedEvaluator};
use crate::launch::{build_plan, LaunchSpec, LauncherKind};
use crate::mold::{check_env, MoldFile, MoldSpec};
use crate::optimizer::AcquisitionSettings;
use crate::space::{ParamKind, ParamSpace, Parameter};
use crate::surrogate::ForestParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Simulated,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDef {
    pub name: String,
    pub kind: ParamKind,
    pub values: Vec<String>,
    pub default: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: Vec<ParamDef>,
}

fn one() -> u32 {
    1
}

fn cores() -> u32 {
    42
}

fn exe_only() -> String {
    "{exe}".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSection {
    pub kind: LauncherKind,
    #[serde(default = "one")]
    pub nodes: u32,
    #[serde(default = "one")]
    pub ranks_per_node: u32,
    #[serde(default = "cores")]
    pub cores_per_rank: u32,
    #[serde(default = "exe_only")]
    pub command: String,
    #[serde(default)]
    pub executable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads_param: Option<String>,
    #[serde(default = "one")]
    pub threads_scale: u32,
}

impl Default for LaunchSection {
    fn default() -> Self {
        Self {
            kind: LauncherKind::LocalShell,
            nodes: 1,
            ranks_per_node: 1,
            cores_per_rank: cores(),
            command: exe_only(),
            executable: String::new(),
            threads_param: None,
            threads_scale: 1,
        }
    }
}

impl LaunchSection {
    pub fn spec(&self) -> LaunchSpec {
        LaunchSpec {
            kind: self.kind,
            nodes: self.nodes,
            ranks_per_node: self.ranks_per_node,
            cores_per_rank: self.cores_per_rank,
            command: self.command.clone(),
        }
    }
}

/// Raw contents of a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub name: String,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub build_command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate_command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    pub space: SpaceSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub molds: Vec<MoldSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub launch: LaunchSection,
    #[serde(default)]
    pub forest: ForestParams,
    #[serde(default)]
    pub acquisition: AcquisitionSettings,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("problem file serializes")
    }
}

/// One problem-file error, anchored to a 1-based line when it can be found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemError {
    pub path: PathBuf,
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match d.line {
                Some(line) => write!(f, "{}:{}: {}", self.path.display(), line, d.message)?,
                None => write!(f, "{}: {}", self.path.display(), d.message)?,
            }
        }
        Ok(())
    }
}

impl std::error::Error for ProblemError {}

/// Line of the first occurrence of `needle` in `source`.
fn locate(source: &str, needle: &str) -> Option<usize> {
    source
        .lines()
        .position(|l| l.contains(needle))
        .map(|i| i + 1)
}

/// A validated problem, ready to run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub file: ProblemFile,
    pub base_dir: PathBuf,
    pub space: ParamSpace,
    pub molds: Vec<MoldFile>,
}

impl Problem {
    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let fail = |line, message: String| ProblemError {
            path: path.to_path_buf(),
            diagnostics: vec![Diagnostic { line, message }],
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(None, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_source(&text, &base).map_err(|diagnostics| ProblemError {
            path: path.to_path_buf(),
            diagnostics,
        })
    }

    pub fn from_source(text: &str, base_dir: &Path) -> Result<Self, Vec<Diagnostic>> {
        let file = ProblemFile::parse(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            vec![Diagnostic {
                line,
                message: e.message().trim().to_string(),
            }]
        })?;
        Self::from_file(file, base_dir, text)
    }

    /// Validates `file`; `source` is only used to anchor diagnostics.
    pub fn from_file(
        file: ProblemFile,
        base_dir: &Path,
        source: &str,
    ) -> Result<Self, Vec<Diagnostic>> {
        let mut diags = Vec::new();
        let mut err = |needle: &str, message: String| {
            diags.push(Diagnostic {
                line: locate(source, needle),
                message,
            })
        };

        let mut params = Vec::new();
        for p in &file.space.params {
            match Parameter::new(p.name.clone(), p.kind, p.values.clone(), p.default.clone()) {
                Ok(param) => params.push(param),
                Err(e) => err(&format!("\"{}\"", p.name), e.to_string()),
            }
        }
        let space = match ParamSpace::new(params, file.space.seed) {
            Ok(s) => Some(s),
            Err(e) => {
                err("[[space.params]]", e.to_string());
                None
            }
        };

        let mut molds = Vec::new();
        if let Some(space) = &space {
            if let Err(e) = check_env(&file.env, space) {
                let var = file
                    .env
                    .iter()
                    .find(|(_, p)| space.parameter(p).is_none())
                    .map(|(k, _)| k.clone())
                    .unwrap_or_default();
                err(&var, e.to_string());
            }
            for m in &file.molds {
                let src = base_dir.join(&m.source);
                match MoldFile::load(&src, &m.destination) {
                    Ok(mold) => match mold.check(space) {
                        Ok(()) => molds.push(mold),
                        Err(e) => err(&m.source.display().to_string(), e.to_string()),
                    },
                    Err(e) => err(&m.source.display().to_string(), e.to_string()),
                }
            }
            Self::check_launch(&file, space, &mut err);
        }

        if file.metric.needs_energy() {
            let ok = match file.launch.kind {
                LauncherKind::GeopmAprun => true,
                LauncherKind::LocalShell => file.energy_report.is_some(),
                _ => false,
            };
            if !ok {
                err(
                    "metric",
                    "energy and edp metrics need the geopm_aprun launcher, or local_shell with an energy_report file".into(),
                );
            }
        }
        if file.evaluator == EvaluatorKind::Pipeline && file.launch.executable.trim().is_empty() {
            err("[launch]", "pipeline evaluator needs launch.executable".into());
        }
        if let Some(t) = file.timeout_s {
            if !(t > 0.0 && t.is_finite()) {
                err("timeout_s", format!("timeout_s must be positive, got {t}"));
            }
        }
        if let Some(t) = file.wall_clock_s {
            if !(t > 0.0 && t.is_finite()) {
                err("wall_clock_s", format!("wall_clock_s must be positive, got {t}"));
            }
        }
        if file.max_evals == Some(0) {
            err("max_evals", "max_evals must be >= 1".into());
        }
        if let Err(e) = file.acquisition.validate() {
            err("[acquisition]", e);
        }
        if let Err(e) = file.forest.validate(file.space.params.len()) {
            err("[forest]", e.to_string());
        }

        match (space, diags.is_empty()) {
            (Some(space), true) => Ok(Self {
                file,
                base_dir: base_dir.to_path_buf(),
                space,
                molds,
            }),
            _ => Err(diags),
        }
    }

    /// Every value of the thread parameter must be launchable.
    fn check_launch(file: &ProblemFile, space: &ParamSpace, err: &mut impl FnMut(&str, String)) {
        let launch = &file.launch;
        if launch.nodes == 0 || launch.ranks_per_node == 0 {
            err("[launch]", "nodes and ranks_per_node must be >= 1".into());
            return;
        }
        if launch.threads_scale == 0 {
            err("threads_scale", "threads_scale must be >= 1".into());
            return;
        }
        let Some(tp) = &launch.threads_param else {
            if launch.kind.needs_threads() {
                err(
                    "[launch]",
                    format!("launcher {} needs launch.threads_param", launch.kind),
                );
            }
            return;
        };
        let Some(param) = space.parameter(tp) else {
            err("threads_param", format!("threads_param `{tp}` is not a parameter"));
            return;
        };
        let spec = launch.spec();
        let env = BTreeMap::new();
        for v in param.values() {
            let n = match v.trim().parse::<u32>() {
                Ok(n) => n * launch.threads_scale,
                Err(_) => {
                    err(
                        &format!("\"{tp}\""),
                        format!("thread count {v:?} of `{tp}` is not an integer"),
                    );
                    continue;
                }
            };
            if let Err(e) = build_plan(&spec, Some(n), &env, "exe", None) {
                err(&format!("\"{tp}\""), format!("value {v:?} of `{tp}`: {e}"));
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn metric(&self) -> MetricKind {
        self.file.metric
    }

    pub fn is_live(&self) -> bool {
        self.file.evaluator == EvaluatorKind::Pipeline
    }

    pub fn pipeline(&self, scratch: &Path) -> Pipeline {
        Pipeline {
            space: self.space.clone(),
            molds: self.molds.clone(),
            env: self.file.env.clone(),
            build_command: self.file.build_command.clone(),
            validate_command: self.file.validate_command.clone(),
            launch: self.file.launch.spec(),
            executable: self.file.launch.executable.clone(),
            threads_param: self.file.launch.threads_param.clone(),
            threads_scale: self.file.launch.threads_scale,
            metric: self.file.metric,
            energy_report: self.file.energy_report.clone(),
            timeout: self.file.timeout_s.map(Duration::from_secs_f64),
            scratch: scratch.to_path_buf(),
        }
    }

    /// The evaluator this problem asks for; `scratch` holds trial
    /// directories for live runs.
    pub fn evaluator(&self, scratch: &Path) -> Box<dyn Evaluator> {
        match self.file.evaluator {
            EvaluatorKind::Simulated => Box::new(SimulatedEvaluator::new(
                self.space.clone(),
                self.file.metric,
            )),
            EvaluatorKind::Pipeline => Box::new(self.pipeline(scratch)),
        }
    }
}
