//! CSV ingestion into numeric frames.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use gplsiam::Frame;
use ndarray::Array1;

use crate::config::Categorical;

/// Raw string columns from a CSV file with a header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn missing(v: &str) -> bool {
    let v = v.trim();
    v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan")
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.with_context(|| format!("{} record {}", path.display(), i + 1))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("missing column `{name}`"))
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// Fails when any used column has missing entries.
    pub fn check_complete(&self, columns: &[String]) -> Result<()> {
        let idx = columns.iter().map(|c| self.column(c)).collect::<Result<Vec<_>>>()?;
        let bad = self.rows.iter().filter(|r| idx.iter().any(|&i| missing(&r[i]))).count();
        if bad > 0 {
            bail!("{bad} rows have missing values in the model columns");
        }
        Ok(())
    }

    /// Levels for each categorical column, in configured order or sorted
    /// (numerically when every level is a number).
    pub fn categorical(&self, config: &BTreeMap<String, Vec<String>>) -> Result<Vec<Categorical>> {
        let mut out = Vec::new();
        for (col, levels) in config {
            let i = self.column(col)?;
            let mut seen: Vec<String> = Vec::new();
            for r in &self.rows {
                let v = r[i].trim();
                if !seen.iter().any(|s| s == v) {
                    seen.push(v.to_string());
                }
            }
            let levels = if levels.is_empty() {
                let numeric: Option<Vec<f64>> = seen.iter().map(|s| s.parse().ok()).collect();
                match numeric {
                    Some(nums) => {
                        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(seen).collect();
                        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                        pairs.into_iter().map(|p| p.1).collect()
                    }
                    None => {
                        seen.sort();
                        seen
                    }
                }
            } else {
                if let Some(v) = seen.iter().find(|v| !levels.contains(v)) {
                    bail!("column `{col}` has level `{v}` not listed in the configuration");
                }
                levels.clone()
            };
            out.push(Categorical {
                column: col.clone(),
                levels,
            });
        }
        Ok(out)
    }

    /// Numeric frame of `columns`. Categorical columns become their level
    /// value (or level position when not numeric) plus one dummy per
    /// non-reference level.
    pub fn frame(&self, columns: &[String], categorical: &[Categorical]) -> Result<Frame> {
        let mut frame = Frame::new();
        for name in columns {
            let i = self.column(name)?;
            if let Some(cat) = categorical.iter().find(|c| &c.column == name) {
                let numeric = cat.levels.iter().all(|l| l.parse::<f64>().is_ok());
                let mut code = Vec::with_capacity(self.nrows());
                for (r, row) in self.rows.iter().enumerate() {
                    let v = row[i].trim();
                    let k = cat
                        .levels
                        .iter()
                        .position(|l| l == v)
                        .ok_or_else(|| anyhow!("row {}: `{name}` has unknown level `{v}`", r + 1))?;
                    code.push(k);
                }
                let values: Array1<f64> = code
                    .iter()
                    .map(|&k| if numeric { cat.levels[k].parse().unwrap() } else { k as f64 })
                    .collect();
                frame.insert(name, values);
                for (k, level) in cat.levels.iter().enumerate().skip(1) {
                    let d: Array1<f64> = code.iter().map(|&c| f64::from(u8::from(c == k))).collect();
                    frame.insert(&cat.dummy_name(level), d);
                }
            } else {
                let mut values = Vec::with_capacity(self.nrows());
                for (r, row) in self.rows.iter().enumerate() {
                    let v = row[i].trim();
                    values.push(
                        v.parse::<f64>()
                            .map_err(|_| anyhow!("row {}: `{name}` value `{v}` is not a number", r + 1))?,
                    );
                }
                frame.insert(name, Array1::from(values));
            }
        }
        Ok(frame)
    }
}
