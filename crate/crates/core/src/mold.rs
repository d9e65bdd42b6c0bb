//! Code molds: source files whose tunable sites are written as `#P<name>`
//! markers, plus environment variables bound to parameters.
//!
//! A marker is `#P` followed by the longest run of name characters
//! (`[A-Za-z0-9_]`). `#P` followed by anything else is ordinary text.
//! Substitution is purely textual.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{is_name_char, Configuration, ParamSpace};

pub const MARKER_PREFIX: &str = "#P";

#[derive(Debug, Error)]
pub enum MoldError {
    #[error("{file}: marker `#P{marker}` does not name a parameter")]
    Unresolved { file: String, marker: String },
    #[error(
        "{file}: marker `#P{marker}` is ambiguous: `{prefix}` is a parameter but the marker runs on"
    )]
    Ambiguous {
        file: String,
        marker: String,
        prefix: String,
    },
    #[error("{file}: value {value:?} of `{param}` would leave a marker in the output")]
    MarkerInValue {
        file: String,
        param: String,
        value: String,
    },
    #[error("environment binding {var} refers to unknown parameter `{param}`")]
    UnknownEnvParam { var: String, param: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A marker occurrence: byte range in the text and the parameter name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marker {
    pub start: usize,
    pub end: usize,
    pub name: String,
}

/// All markers in `text`, left to right, using longest-match scanning.
pub fn scan_markers(text: &str) -> Vec<Marker> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = text[from..].find(MARKER_PREFIX) {
        let start = from + off;
        let name_start = start + MARKER_PREFIX.len();
        let name_len = text[name_start..]
            .find(|c: char| !is_name_char(c))
            .unwrap_or(text.len() - name_start);
        if name_len == 0 {
            from = name_start;
            continue;
        }
        let end = name_start + name_len;
        out.push(Marker {
            start,
            end,
            name: text[name_start..end].to_string(),
        });
        from = end;
    }
    out
}

fn contains_marker(text: &str) -> bool {
    !scan_markers(text).is_empty()
}

/// Checks that every marker names a parameter of `space`.
pub fn check_markers(file: &str, text: &str, space: &ParamSpace) -> Result<(), MoldError> {
    for m in scan_markers(text) {
        resolve(file, &m.name, space)?;
    }
    Ok(())
}

fn resolve(file: &str, name: &str, space: &ParamSpace) -> Result<(), MoldError> {
    if space.parameter(name).is_some() {
        return Ok(());
    }
    let prefix = space
        .parameters()
        .iter()
        .map(|p| p.name())
        .filter(|p| name.starts_with(p))
        .max_by_key(|p| p.len());
    Err(match prefix {
        Some(prefix) => MoldError::Ambiguous {
            file: file.to_string(),
            marker: name.to_string(),
            prefix: prefix.to_string(),
        },
        None => MoldError::Unresolved {
            file: file.to_string(),
            marker: name.to_string(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub substitutions: usize,
}

/// Replaces every marker in `text` with its value from `c`. `file` is only
/// used in error messages.
pub fn render_text(file: &str, text: &str, c: &Configuration) -> Result<Rendered, MoldError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    let mut substitutions = 0;
    for m in scan_markers(text) {
        let value = match c.get(&m.name) {
            Some(v) => v,
            None => {
                let prefix = c
                    .iter()
                    .map(|(k, _)| k)
                    .filter(|k| m.name.starts_with(k))
                    .max_by_key(|k| k.len());
                return Err(match prefix {
                    Some(prefix) => MoldError::Ambiguous {
                        file: file.to_string(),
                        marker: m.name,
                        prefix: prefix.to_string(),
                    },
                    None => MoldError::Unresolved {
                        file: file.to_string(),
                        marker: m.name,
                    },
                });
            }
        };
        if contains_marker(value) {
            return Err(MoldError::MarkerInValue {
                file: file.to_string(),
                param: m.name,
                value: value.to_string(),
            });
        }
        out.push_str(&text[last..m.start]);
        out.push_str(value);
        last = m.end;
        substitutions += 1;
    }
    out.push_str(&text[last..]);
    // A value ending in `#` followed by `P...` in the source could splice a
    // new marker together.
    if substitutions > 0 && contains_marker(&out) {
        return Err(MoldError::MarkerInValue {
            file: file.to_string(),
            param: String::from("<adjacent>"),
            value: String::from("#"),
        });
    }
    Ok(Rendered {
        text: out,
        substitutions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoldSpec {
    pub source: PathBuf,
    /// Relative path inside the trial directory.
    pub destination: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoldFile {
    pub source: PathBuf,
    pub destination: PathBuf,
    pub markers: Vec<String>,
    text: String,
}

impl MoldFile {
    pub fn from_text(source: PathBuf, destination: PathBuf, text: String) -> Self {
        let mut markers: Vec<String> = scan_markers(&text).into_iter().map(|m| m.name).collect();
        markers.sort();
        markers.dedup();
        Self {
            source,
            destination,
            markers,
            text,
        }
    }

    pub fn load(source: &Path, destination: &Path) -> Result<Self, MoldError> {
        let text = fs::read_to_string(source).map_err(|e| MoldError::Io {
            path: source.display().to_string(),
            source: e,
        })?;
        Ok(Self::from_text(
            source.to_path_buf(),
            destination.to_path_buf(),
            text,
        ))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn check(&self, space: &ParamSpace) -> Result<(), MoldError> {
        check_markers(&self.source.display().to_string(), &self.text, space)
    }

    pub fn render(&self, c: &Configuration) -> Result<Rendered, MoldError> {
        render_text(&self.source.display().to_string(), &self.text, c)
    }

    /// Renders into `trial_dir/destination`, creating parent directories.
    pub fn write_into(&self, trial_dir: &Path, c: &Configuration) -> Result<PathBuf, MoldError> {
        let rendered = self.render(c)?;
        let dest = trial_dir.join(&self.destination);
        let io = |e| MoldError::Io {
            path: dest.display().to_string(),
            source: e,
        };
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&dest, rendered.text).map_err(io)?;
        Ok(dest)
    }
}

/// Environment variable name to parameter name.
pub type EnvBinding = BTreeMap<String, String>;

pub fn check_env(bindings: &EnvBinding, space: &ParamSpace) -> Result<(), MoldError> {
    for (var, param) in bindings {
        if space.parameter(param).is_none() {
            return Err(MoldError::UnknownEnvParam {
                var: var.clone(),
                param: param.clone(),
            });
        }
    }
    Ok(())
}

pub fn bind_env(
    bindings: &EnvBinding,
    c: &Configuration,
) -> Result<BTreeMap<String, String>, MoldError> {
    bindings
        .iter()
        .map(|(var, param)| {
            c.get(param)
                .map(|v| (var.clone(), v.to_string()))
                .ok_or_else(|| MoldError::UnknownEnvParam {
                    var: var.clone(),
                    param: param.clone(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Parameter;

    fn cfg(pairs: &[(&str, &str)]) -> Configuration {
        Configuration::from_pairs(pairs.iter().copied())
    }

    #[test]
    fn substitutes_block_size() {
        let r = render_text("f.c", "schedule(dynamic,#Pp1)", &cfg(&[("p1", "100")])).unwrap();
        assert_eq!(r.text, "schedule(dynamic,100)");
        assert_eq!(r.substitutions, 1);
    }

    #[test]
    fn no_markers_is_identity() {
        let src = "#pragma omp parallel for\nfor (i = 0; i < n; i++) {}\n#P-1 # P";
        let r = render_text("f.c", src, &cfg(&[])).unwrap();
        assert_eq!(r.text, src);
        assert_eq!(r.substitutions, 0);
    }

    #[test]
    fn pragma_choice_values() {
        let c = cfg(&[("p3", "#pragma omp parallel for")]);
        assert_eq!(
            render_text("f.c", "#Pp3 for(...)", &c).unwrap().text,
            "#pragma omp parallel for for(...)"
        );
        let c = cfg(&[("p3", " ")]);
        assert_eq!(render_text("f.c", "#Pp3 for(...)", &c).unwrap().text, "  for(...)");
    }

    #[test]
    fn longest_match_and_errors() {
        let c = cfg(&[("p1", "a"), ("p10", "b")]);
        assert_eq!(render_text("f", "#Pp10,#Pp1.", &c).unwrap().text, "b,a.");
        assert!(matches!(
            render_text("f", "#Pp1x", &c),
            Err(MoldError::Ambiguous { .. })
        ));
        let err = render_text("kernel.c", "#Pq", &c).unwrap_err();
        assert!(matches!(err, MoldError::Unresolved { .. }));
        assert!(err.to_string().contains("kernel.c"));
        assert!(err.to_string().contains("#Pq"));
    }

    #[test]
    fn marker_like_values_rejected() {
        let c = cfg(&[("p0", "#Pp0")]);
        assert!(matches!(
            render_text("f", "x=#Pp0", &c),
            Err(MoldError::MarkerInValue { .. })
        ));
        let c = cfg(&[("p0", "#")]);
        assert!(render_text("f", "#Pp0P", &c).is_err());
    }

    #[test]
    fn check_against_space() {
        let space = ParamSpace::new(
            vec![Parameter::ordinal("p1", ["1", "2"], "1").unwrap()],
            0,
        )
        .unwrap();
        assert!(check_markers("f", "a #Pp1 b", &space).is_ok());
        assert!(check_markers("f", "a #Pp2 b", &space).is_err());
    }

    #[test]
    fn env_bindings() {
        let c = cfg(&[("p0", "64"), ("p6", "cores"), ("p7", "close"), ("p8", "static")]);
        assert!(bind_env(&EnvBinding::new(), &c).unwrap().is_empty());
        let one = EnvBinding::from([("OMP_NUM_THREADS".into(), "p0".into())]);
        assert_eq!(bind_env(&one, &c).unwrap()["OMP_NUM_THREADS"], "64");
        let four = EnvBinding::from([
            ("OMP_NUM_THREADS".into(), "p0".into()),
            ("OMP_PLACES".into(), "p6".into()),
            ("OMP_PROC_BIND".into(), "p7".into()),
            ("OMP_SCHEDULE".into(), "p8".into()),
        ]);
        let env = bind_env(&four, &c).unwrap();
        assert_eq!(
            env.into_iter().collect::<Vec<_>>(),
            [
                ("OMP_NUM_THREADS".to_string(), "64".to_string()),
                ("OMP_PLACES".into(), "cores".into()),
                ("OMP_PROC_BIND".into(), "close".into()),
                ("OMP_SCHEDULE".into(), "static".into()),
            ]
        );
        let missing = EnvBinding::from([("X".into(), "p9".into())]);
        assert!(bind_env(&missing, &c).is_err());
    }

    #[test]
    fn write_into_trial_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mold = MoldFile::from_text("src/k.c".into(), "src/k.c".into(), "n=#Pp0;".into());
        assert_eq!(mold.markers, ["p0"]);
        let path = mold.write_into(dir.path(), &cfg(&[("p0", "8")])).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "n=8;");
    }
}
