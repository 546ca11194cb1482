//! Declarative run configuration read from a TOML document.
//!
//! ```toml
//! schema_version = 1
//!
//! [paths]
//! data = "data"   # dataset directory holding manifest.json
//! runs = "runs"   # checkpoints and training logs
//! out = "out"     # evaluation and inference products
//!
//! [scene]         # synthetic generator, see SceneParams
//! seed = 7
//!
//! [train]         # see TrainConfig
//! lr_schedule = [{ epochs = 20, lr = 1e-3 }, { epochs = 5, lr = 1e-4 }, { epochs = 5, lr = 1e-5 }]
//!
//! [metrics]
//! monsoon = { start = [6, 1], end = [10, 31] }
//! min_visits = 5
//!
//! [infer]
//! batch_size = 16
//! exclude = [{ start = "2002-03-01", end = "2002-05-31" }]
//! ```
//!
//! Every section and key is optional. Unknown keys are rejected and the
//! error names the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MonsoonWindow, DEFAULT_MIN_VISITS};
use crate::synth::SceneParams;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub scene: SceneParams,
    pub train: TrainConfig,
    pub metrics: MetricOptions,
    pub infer: InferOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            paths: Paths::default(),
            scene: SceneParams::default(),
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
            infer: InferOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub runs: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: "data".into(), runs: "runs".into(), out: "out".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub monsoon: MonsoonWindow,
    /// Error-map cells visited fewer times are excluded.
    pub min_visits: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { monsoon: MonsoonWindow::default(), min_visits: DEFAULT_MIN_VISITS }
    }
}

/// Inclusive date range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    /// True when `[a, b]` and this range share a day.
    pub fn overlaps(&self, a: NaiveDate, b: NaiveDate) -> bool {
        a <= self.end && self.start <= b
    }
}

impl std::str::FromStr for DateRange {
    type Err = Error;

    /// Parses `YYYY-MM-DD..YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected START..END dates, got `{s}`"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let parse = |t: &str| NaiveDate::parse_from_str(t.trim(), "%Y-%m-%d").map_err(|_| bad());
        let r = DateRange { start: parse(a)?, end: parse(b)? };
        if r.start > r.end {
            return Err(bad());
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferOptions {
    pub batch_size: usize,
    /// Samples whose input window touches one of these ranges are skipped.
    pub exclude: Vec<DateRange>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { batch_size: 16, exclude: Vec::new() }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error("<document>", e.message()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_error("<document>", e.to_string()))
    }

    /// Section-level checks; failures are reported against the section key.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(config_error(
                "schema_version",
                format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| config_error(section, e.to_string()));
        wrap("scene", self.scene.validate())?;
        wrap("train", self.train.validate())?;
        wrap("metrics.monsoon", self.metrics.monsoon.validate())?;
        if self.infer.batch_size == 0 {
            return Err(config_error("infer.batch_size", "must be positive"));
        }
        if let Some(r) = self.infer.exclude.iter().find(|r| r.start > r.end) {
            return Err(config_error("infer.exclude", format!("range {}..{} is reversed", r.start, r.end)));
        }
        Ok(())
    }
}
