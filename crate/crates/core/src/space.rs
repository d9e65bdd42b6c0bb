//! Mixed ordinal/categorical parameter spaces.
//!
//! A [`ParamSpace`] is an ordered list of [`Parameter`]s, each with a finite
//! list of opaque value strings. Configurations are sampled uniformly per
//! parameter, index-encoded for the surrogate, and can be enumerated in
//! lexicographic order of their encoded coordinates for brute-force checks.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("parameter `{0}` has no values")]
    EmptyValues(String),
    #[error("parameter `{name}` lists value {value:?} more than once")]
    DuplicateValue { name: String, value: String },
    #[error("default {default:?} of parameter `{name}` is not one of its values")]
    DefaultNotInValues { name: String, default: String },
    #[error("parameter name {0:?} is not a valid identifier")]
    InvalidName(String),
    #[error("parameter `{0}` is defined more than once")]
    DuplicateName(String),
    #[error("value {value:?} is not legal for parameter `{name}`")]
    InvalidValue { name: String, value: String },
    #[error("configuration does not assign parameter `{0}`")]
    MissingParameter(String),
    #[error("configuration assigns unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("encoded point has {got} coordinates, space has {expected} parameters")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coordinate {coord} is not a valid index for parameter `{name}`")]
    InvalidCoordinate { name: String, coord: f64 },
    #[error("space has {cardinality} configurations, above the cap of {cap}")]
    CapExceeded { cardinality: u128, cap: u128 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Ordinal,
    Categorical,
}

/// Characters legal in a parameter name. Mold markers end at the first
/// character outside this set.
pub fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    name: String,
    kind: ParamKind,
    values: Vec<String>,
    default: String,
}

impl Parameter {
    pub fn new(
        name: impl Into<String>,
        kind: ParamKind,
        values: Vec<String>,
        default: impl Into<String>,
    ) -> Result<Self, SpaceError> {
        let name = name.into();
        let default = default.into();
        if name.is_empty() || !name.chars().all(is_name_char) {
            return Err(SpaceError::InvalidName(name));
        }
        if values.is_empty() {
            return Err(SpaceError::EmptyValues(name));
        }
        let mut seen = HashSet::new();
        for v in &values {
            if !seen.insert(v.as_str()) {
                return Err(SpaceError::DuplicateValue {
                    name,
                    value: v.clone(),
                });
            }
        }
        if !values.contains(&default) {
            return Err(SpaceError::DefaultNotInValues { name, default });
        }
        Ok(Self {
            name,
            kind,
            values,
            default,
        })
    }

    pub fn ordinal<S: Into<String>>(
        name: &str,
        values: impl IntoIterator<Item = S>,
        default: &str,
    ) -> Result<Self, SpaceError> {
        Self::new(
            name,
            ParamKind::Ordinal,
            values.into_iter().map(Into::into).collect(),
            default,
        )
    }

    pub fn categorical<S: Into<String>>(
        name: &str,
        values: impl IntoIterator<Item = S>,
        default: &str,
    ) -> Result<Self, SpaceError> {
        Self::new(
            name,
            ParamKind::Categorical,
            values.into_iter().map(Into::into).collect(),
            default,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn default_value(&self) -> &str {
        &self.default
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// One value per parameter, kept in the owning space's parameter order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Configuration {
    entries: Vec<(String, String)>,
}

impl Configuration {
    /// Builds a configuration from raw pairs without checking them against a
    /// space. Use [`ParamSpace::configuration`] for a validated one.
    pub fn from_pairs<K: Into<String>, V: Into<String>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v:?}")?;
        }
        f.write_str("}")
    }
}

/// Numeric form of a configuration: one value index per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedPoint(pub Vec<f64>);

impl EncodedPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    parameters: Vec<Parameter>,
    seed: u64,
}

impl ParamSpace {
    pub fn new(parameters: Vec<Parameter>, seed: u64) -> Result<Self, SpaceError> {
        let mut names = HashSet::new();
        for p in &parameters {
            if !names.insert(p.name.as_str()) {
                return Err(SpaceError::DuplicateName(p.name.clone()));
            }
        }
        Ok(Self { parameters, seed })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    /// Number of distinct configurations (empty product is 1). Saturates at
    /// `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        self.parameters
            .iter()
            .fold(1u128, |acc, p| acc.saturating_mul(p.len() as u128))
    }

    /// Validates and reorders `pairs` into a configuration of this space.
    pub fn configuration<K: AsRef<str>, V: AsRef<str>>(
        &self,
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Configuration, SpaceError> {
        let pairs: Vec<(String, String)> = pairs
            .into_iter()
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        for (k, _) in &pairs {
            if self.parameter(k).is_none() {
                return Err(SpaceError::UnknownParameter(k.clone()));
            }
        }
        let mut entries = Vec::with_capacity(self.dim());
        for p in &self.parameters {
            let value = pairs
                .iter()
                .find(|(k, _)| *k == p.name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| SpaceError::MissingParameter(p.name.clone()))?;
            if p.index_of(&value).is_none() {
                return Err(SpaceError::InvalidValue {
                    name: p.name.clone(),
                    value,
                });
            }
            entries.push((p.name.clone(), value));
        }
        Ok(Configuration { entries })
    }

    pub fn default_configuration(&self) -> Configuration {
        Configuration {
            entries: self
                .parameters
                .iter()
                .map(|p| (p.name.clone(), p.default.clone()))
                .collect(),
        }
    }

    /// Checks every invariant of `c` against this space.
    pub fn validate(&self, c: &Configuration) -> Result<(), SpaceError> {
        self.indices(c).map(|_| ())
    }

    /// Value index of every parameter, in parameter order.
    pub fn indices(&self, c: &Configuration) -> Result<Vec<usize>, SpaceError> {
        if c.entries.len() != self.dim() {
            for p in &self.parameters {
                if c.get(&p.name).is_none() {
                    return Err(SpaceError::MissingParameter(p.name.clone()));
                }
            }
            for (k, _) in &c.entries {
                if self.parameter(k).is_none() {
                    return Err(SpaceError::UnknownParameter(k.clone()));
                }
            }
        }
        self.parameters
            .iter()
            .zip(&c.entries)
            .map(|(p, (k, v))| {
                if *k != p.name {
                    return Err(if self.parameter(k).is_none() {
                        SpaceError::UnknownParameter(k.clone())
                    } else {
                        SpaceError::MissingParameter(p.name.clone())
                    });
                }
                p.index_of(v).ok_or_else(|| SpaceError::InvalidValue {
                    name: p.name.clone(),
                    value: v.clone(),
                })
            })
            .collect()
    }

    /// Configuration for a vector of value indices. Panics if an index is
    /// out of range; callers produce indices from this space.
    pub fn from_indices(&self, indices: &[usize]) -> Configuration {
        assert_eq!(indices.len(), self.dim(), "index vector length");
        Configuration {
            entries: self
                .parameters
                .iter()
                .zip(indices)
                .map(|(p, &i)| (p.name.clone(), p.values[i].clone()))
                .collect(),
        }
    }

    /// Draws one configuration, each parameter uniform over its values.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let idx = self.sample_indices(rng);
        self.from_indices(&idx)
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.parameters
            .iter()
            .map(|p| rng.random_range(0..p.len()))
            .collect()
    }

    pub fn encode(&self, c: &Configuration) -> Result<EncodedPoint, SpaceError> {
        Ok(encode_indices(&self.indices(c)?))
    }

    pub fn decode(&self, x: &EncodedPoint) -> Result<Configuration, SpaceError> {
        if x.dim() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        let mut idx = Vec::with_capacity(self.dim());
        for (p, &coord) in self.parameters.iter().zip(x.coords()) {
            let valid = coord.fract() == 0.0 && coord >= 0.0 && coord < p.len() as f64;
            if !valid {
                return Err(SpaceError::InvalidCoordinate {
                    name: p.name.clone(),
                    coord,
                });
            }
            idx.push(coord as usize);
        }
        Ok(self.from_indices(&idx))
    }

    /// Every configuration exactly once, in lexicographic order of encoded
    /// coordinates (last parameter varies fastest). Refuses spaces larger
    /// than `cap`.
    pub fn enumerate(&self, cap: u128) -> Result<Enumerate<'_>, SpaceError> {
        let cardinality = self.cardinality();
        if cardinality > cap {
            return Err(SpaceError::CapExceeded { cardinality, cap });
        }
        Ok(Enumerate {
            space: self,
            next: Some(vec![0; self.dim()]),
        })
    }

    /// Stable digest of parameter names, kinds, values and defaults.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.parameters {
            h.update(p.name.as_bytes());
            h.update([0u8, p.kind as u8]);
            for v in &p.values {
                h.update((v.len() as u64).to_le_bytes());
                h.update(v.as_bytes());
            }
            h.update((p.default.len() as u64).to_le_bytes());
            h.update(p.default.as_bytes());
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn encode_indices(indices: &[usize]) -> EncodedPoint {
    EncodedPoint(indices.iter().map(|&i| i as f64).collect())
}

/// Odometer over value indices. See [`ParamSpace::enumerate`].
pub struct Enumerate<'a> {
    space: &'a ParamSpace,
    next: Option<Vec<usize>>,
}

impl Iterator for Enumerate<'_> {
    type Item = Configuration;

    fn next(&mut self) -> Option<Configuration> {
        let current = self.next.take()?;
        let params = self.space.parameters();
        let mut succ = current.clone();
        let mut carried = true;
        for i in (0..succ.len()).rev() {
            succ[i] += 1;
            if succ[i] < params[i].len() {
                carried = false;
                break;
            }
            succ[i] = 0;
        }
        if !carried {
            self.next = Some(succ);
        }
        Some(self.space.from_indices(&current))
    }
}
