//! TOML model configuration.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gplsiam::family::{Distribution, Link};
use gplsiam::{Family, FitConfig, ModelSpec, TermSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelSection,
    /// Categorical columns and their levels; the first level is the
    /// reference. An empty list means the sorted observed levels.
    #[serde(default)]
    pub categorical: BTreeMap<String, Vec<String>>,
    #[serde(default, rename = "term")]
    pub terms: Vec<TermSection>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: String,
    #[serde(default)]
    pub link: Option<String>,
    pub response: String,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub linear: Vec<String>,
    #[serde(default)]
    pub offset: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSection {
    pub name: String,
    pub covariates: Vec<String>,
    pub q: usize,
    #[serde(default = "order")]
    pub order: usize,
    #[serde(default = "dif")]
    pub dif: usize,
    #[serde(default)]
    pub by: Option<String>,
}

fn order() -> usize {
    4
}

fn dif() -> usize {
    2
}

/// A categorical column's levels in contrast order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub column: String,
    pub levels: Vec<String>,
}

impl Categorical {
    pub fn dummy_name(&self, level: &str) -> String {
        format!("{}={}", self.column, level)
    }

    pub fn dummies(&self) -> Vec<String> {
        self.levels.iter().skip(1).map(|l| self.dummy_name(l)).collect()
    }
}

/// A parsed configuration before the data fixes categorical levels.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    pub family: Family,
    pub response: String,
    pub intercept: bool,
    pub linear: Vec<String>,
    pub offset: Option<String>,
    pub categorical: BTreeMap<String, Vec<String>>,
    pub terms: Vec<TermSpec>,
    pub fit: FitConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        let dist: Distribution = file.model.family.parse()?;
        let family = match &file.model.link {
            Some(l) => Family::new(dist, l.parse::<Link>()?)?,
            None => Family::canonical(dist),
        };
        let terms = file
            .terms
            .iter()
            .map(|t| TermSpec {
                name: t.name.clone(),
                covariates: t.covariates.clone(),
                q: t.q,
                order: t.order,
                dif: t.dif,
                by: t.by.clone(),
            })
            .collect();
        let mut fit = file.fit.unwrap_or_default();
        let seed = file.seed.unwrap_or(fit.seed);
        fit.seed = seed;
        fit.validate()?;
        Ok(Self {
            seed,
            family,
            response: file.model.response,
            intercept: file.model.intercept,
            linear: file.model.linear,
            offset: file.model.offset,
            categorical: file.categorical,
            terms,
            fit,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Columns read from the data file.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec![self.response.clone()];
        cols.extend(self.linear.iter().cloned());
        cols.extend(self.offset.iter().cloned());
        for t in &self.terms {
            cols.extend(t.covariates.iter().cloned());
            cols.extend(t.by.iter().cloned());
        }
        let mut seen = std::collections::HashSet::new();
        cols.retain(|c| seen.insert(c.clone()));
        cols
    }

    /// Model specification once categorical levels are known.
    pub fn spec(&self, categorical: &[Categorical]) -> Result<ModelSpec> {
        let mut linear = Vec::new();
        for c in &self.linear {
            match categorical.iter().find(|k| &k.column == c) {
                Some(k) => linear.extend(k.dummies()),
                None => linear.push(c.clone()),
            }
        }
        if categorical.iter().any(|k| k.column == self.response) {
            bail!("response `{}` cannot be categorical", self.response);
        }
        let spec = ModelSpec {
            family: self.family,
            response: self.response.clone(),
            intercept: self.intercept,
            linear,
            terms: self.terms.clone(),
            offset: self.offset.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}
