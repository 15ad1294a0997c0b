//! Run configuration: JSON files plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compressors::Compressor;
use crate::error::{ElfError, Result};
use crate::potentials::PotentialSpec;
use crate::samplers::{Algorithm, ChainConfig, CompressorPair, InitSpec};

pub const DEFAULT_SAFETY: f64 = 0.9;
pub const DEFAULT_PLATEAU_FRACTION: f64 = 0.5;
/// Logged rounds aimed for by the default cadence.
pub const DEFAULT_LOG_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

/// A fixed step size or `"auto"` (theory `γ_max` times `gamma_safety`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Fixed(f64),
    Auto(AutoTag),
}

/// Parameter swept by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    /// `k` of every top-k / rand-k compressor in the config.
    K,
    /// `omega` of every scaled unbiased wrapper in the config.
    Omega,
    Algorithm,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::K => "k",
            SweepAxis::Omega => "omega",
            SweepAxis::Algorithm => "algorithm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<Value>,
    /// KL-proxy level for the cost-to-reach columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub potential: PotentialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink: Option<Compressor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downlink: Option<Compressor>,
    pub gamma: GammaSpec,
    #[serde(default = "default_safety")]
    pub gamma_safety: f64,
    pub rounds: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Log every this many rounds; default keeps about 10³ rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    /// Log-Sobolev constant overriding the potential's own value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Tail share of the run pooled into plateau moments.
    #[serde(default = "default_plateau_fraction")]
    pub plateau_fraction: f64,
    /// Stride between pooled plateau samples; defaults to the log cadence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn default_safety() -> f64 {
    DEFAULT_SAFETY
}

fn default_chains() -> usize {
    1
}

fn default_plateau_fraction() -> f64 {
    DEFAULT_PLATEAU_FRACTION
}

impl RunConfig {
    pub fn compressors(&self) -> CompressorPair {
        CompressorPair {
            uplink: self.uplink,
            downlink: self.downlink,
        }
    }

    /// Default cadence: every round up to 10³ rounds, then every `⌈K/10³⌉`.
    pub fn log_cadence(&self) -> usize {
        self.log_every
            .unwrap_or_else(|| self.rounds.div_ceil(DEFAULT_LOG_POINTS).max(1))
    }

    pub fn plateau_cadence(&self) -> usize {
        self.plateau_stride.unwrap_or_else(|| self.log_cadence())
    }

    pub fn chain_config(&self, gamma: f64) -> ChainConfig {
        ChainConfig {
            algorithm: self.algorithm,
            compressors: self.compressors(),
            gamma,
            rounds: self.rounds,
            init: self.init.clone(),
        }
    }

    /// Checks everything that does not need the potential built.
    pub fn validate(&self) -> Result<()> {
        if self.algorithm.needs_uplink() && self.uplink.is_none() {
            return Err(ElfError::config("uplink", format!("{} needs an uplink compressor", self.algorithm)));
        }
        if self.algorithm.needs_downlink() && self.downlink.is_none() {
            return Err(ElfError::config(
                "downlink",
                format!("{} needs a downlink compressor", self.algorithm),
            ));
        }
        if let GammaSpec::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(ElfError::config("gamma", format!("{g} must be positive and finite")));
            }
        }
        if !(self.gamma_safety > 0.0 && self.gamma_safety <= 1.0) {
            return Err(ElfError::config("gamma_safety", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(ElfError::config("rounds", "must be >= 1"));
        }
        if self.chains == 0 {
            return Err(ElfError::config("chains", "must be >= 1"));
        }
        if self.log_every == Some(0) {
            return Err(ElfError::config("log_every", "must be >= 1"));
        }
        if self.plateau_stride == Some(0) {
            return Err(ElfError::config("plateau_stride", "must be >= 1"));
        }
        if !(self.plateau_fraction > 0.0 && self.plateau_fraction <= 1.0) {
            return Err(ElfError::config("plateau_fraction", "must lie in (0, 1]"));
        }
        if let Some(m) = self.mu {
            if !(m > 0.0 && m.is_finite()) {
                return Err(ElfError::config("mu", "must be positive and finite"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(ElfError::config("sweep.values", "axis is empty"));
            }
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: RunConfig = serde_path_to_error::deserialize(value).map_err(
            |e: serde_path_to_error::Error<serde_json::Error>| {
                let path = e.path().to_string();
                let field = if path == "." { "<root>".to_string() } else { path };
                ElfError::config(field, e.into_inner().to_string())
            },
        )?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_overrides::<&str>(text, &[])
    }

    /// Parses `text`, applies `key.path=value` overrides in order, then
    /// validates.
    pub fn from_json_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        Self::from_value(value)
    }

    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Applies `a.b.0.c=value`. The value is read as JSON when it parses and as
/// a plain string otherwise. Missing object keys are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ElfError::config(assignment, "override must look like key.path=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ElfError::config(assignment, "empty key"));
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, key, parsed)
}

/// Sets the value at a dotted path, creating missing object keys.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| ElfError::config(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| ElfError::config(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(ElfError::config(
                    key,
                    format!("`{}` is not an object or array", parts[..depth].join(".")),
                ))
            }
        };
    }
    Ok(())
}
