//! Versioned JSON model archives.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use gplsiam::FittedModel;
use serde::{Deserialize, Serialize};

use crate::config::Categorical;

pub const FORMAT: &str = "gplsiam-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub format: String,
    pub version: u32,
    /// Seconds since the Unix epoch when the archive was written.
    pub created: u64,
    pub seed: u64,
    /// Raw data columns the model reads, response first.
    pub columns: Vec<String>,
    pub categorical: Vec<Categorical>,
    pub model: FittedModel,
}

impl Archive {
    pub fn new(seed: u64, columns: Vec<String>, categorical: Vec<Categorical>, model: FittedModel) -> Self {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            format: FORMAT.into(),
            version: VERSION,
            created,
            seed,
            columns,
            categorical,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).context("archive is not valid JSON")?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(FORMAT) => {}
            other => bail!("not a model archive (format {other:?})"),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            Some(v) => bail!("archive version {v} is not supported (expected {VERSION})"),
            None => bail!("archive has no version"),
        }
        serde_json::from_value(value).context("archive does not match the schema")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }

    /// Predictor columns; the response is optional at prediction time.
    pub fn predictors(&self) -> &[String] {
        &self.columns[1..]
    }
}
