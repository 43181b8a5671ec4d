//! Model specification, in-memory data frames and the numeric design
//! derived from them.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::layout::CoefficientLayout;

/// Named numeric columns of equal length.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    names: Vec<String>,
    columns: Vec<Array1<f64>>,
}

impl Frame {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_column(mut self, name: &str, values: Array1<f64>) -> Self {
        self.insert(name, values);
        self
    }

    /// Adds or replaces a column.
    pub fn insert(&mut self, name: &str, values: Array1<f64>) {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            self.columns[i] = values;
        } else {
            self.names.push(name.to_string());
            self.columns.push(values);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array1<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }
}

/// One smooth term. A single covariate gives a plain smooth; two or more
/// give a single-index term whose direction is estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub covariates: Vec<String>,
    pub q: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_dif")]
    pub dif: usize,
    /// Column whose levels each get their own copy of the term.
    #[serde(default)]
    pub by: Option<String>,
}

fn default_order() -> usize {
    4
}

fn default_dif() -> usize {
    2
}

impl TermSpec {
    pub fn new(name: &str, covariates: &[&str], q: usize) -> Self {
        Self {
            name: name.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            q,
            order: default_order(),
            dif: default_dif(),
            by: None,
        }
    }

    pub fn by(mut self, column: &str) -> Self {
        self.by = Some(column.to_string());
        self
    }

    pub fn s(&self) -> usize {
        self.covariates.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub response: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub linear: Vec<String>,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub offset: Option<String>,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(family: Family, response: &str) -> Self {
        Self {
            family,
            response: response.to_string(),
            intercept: true,
            linear: Vec::new(),
            terms: Vec::new(),
            offset: None,
        }
    }

    pub fn linear(mut self, columns: &[&str]) -> Self {
        self.linear.extend(columns.iter().map(|s| s.to_string()));
        self
    }

    pub fn term(mut self, term: TermSpec) -> Self {
        self.terms.push(term);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.intercept && self.linear.is_empty() && self.terms.is_empty() {
            return Err(Error::Spec("the model has no terms".into()));
        }
        for t in &self.terms {
            if t.covariates.is_empty() {
                return Err(Error::Spec(format!("term `{}` has no covariates", t.name)));
            }
            if t.order == 0 || t.q < t.order {
                return Err(Error::Spec(format!(
                    "term `{}`: q = {} must be at least the spline order {}",
                    t.name, t.q, t.order
                )));
            }
            if t.dif == 0 || t.dif >= t.q {
                return Err(Error::InvalidDifference { q: t.q, dif: t.dif });
            }
        }
        let mut names: Vec<&str> = self.terms.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("smooth term names must be unique".into()));
        }
        Ok(())
    }

    pub fn linear_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.linear.len() + 1);
        if self.intercept {
            names.push("(Intercept)".to_string());
        }
        names.extend(self.linear.iter().cloned());
        names
    }
}

/// A group restriction: the term is active where `column == level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub column: String,
    pub level: f64,
}

/// Numeric data of one (possibly group-restricted) smooth term.
#[derive(Debug, Clone)]
pub struct TermDesign {
    pub name: String,
    /// Index covariates on the active rows.
    pub z: Array2<f64>,
    /// Active rows; `None` means every row.
    pub rows: Option<Vec<usize>>,
    pub group: Option<Group>,
    pub q: usize,
    pub order: usize,
    pub dif: usize,
}

impl TermDesign {
    pub fn s(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn n_active(&self) -> usize {
        self.z.nrows()
    }

    /// Full-length 0/1 incidence vector.
    pub fn mask(&self, n: usize) -> Array1<f64> {
        match &self.rows {
            None => Array1::ones(n),
            Some(rows) => {
                let mut m = Array1::zeros(n);
                for &r in rows {
                    m[r] = 1.0;
                }
                m
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub family: Family,
    pub n: usize,
    pub y: Array1<f64>,
    pub x: Array2<f64>,
    pub offset: Array1<f64>,
    pub linear_names: Vec<String>,
    pub terms: Vec<TermDesign>,
}

impl Design {
    /// Builds the design for fitting; `by` terms are split into one term per
    /// sorted level.
    pub fn from_frame(spec: &ModelSpec, frame: &Frame) -> Result<Self> {
        spec.validate()?;
        let y = frame.get(&spec.response)?.clone();
        for (i, &v) in y.iter().enumerate() {
            if !spec.family.distribution.response_is_valid(v) {
                return Err(Error::Spec(format!(
                    "response value {v} at row {i} is invalid for the {} family",
                    spec.family.distribution.name()
                )));
            }
        }
        let groups = spec
            .terms
            .iter()
            .map(|t| match &t.by {
                None => Ok(vec![None]),
                Some(col) => Ok(levels(frame.get(col)?)
                    .into_iter()
                    .map(|level| {
                        Some(Group {
                            column: col.clone(),
                            level,
                        })
                    })
                    .collect()),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d = Self::covariates(spec, frame, &groups.concat())?;
        d.y = y;
        Ok(d)
    }

    /// Builds the covariate part of a design for the given expanded term
    /// groups (in term order). The response is left empty.
    pub fn covariates(spec: &ModelSpec, frame: &Frame, groups: &[Option<Group>]) -> Result<Self> {
        let n = frame.nrows();
        let names = spec.linear_names();
        let mut x = Array2::<f64>::zeros((n, names.len()));
        let mut col = 0;
        if spec.intercept {
            x.column_mut(0).fill(1.0);
            col = 1;
        }
        for name in &spec.linear {
            x.column_mut(col).assign(frame.get(name)?);
            col += 1;
        }
        let offset = match &spec.offset {
            Some(name) => frame.get(name)?.clone(),
            None => Array1::zeros(n),
        };
        let mut terms = Vec::new();
        let mut g = groups.iter().peekable();
        for t in &spec.terms {
            let cols = t
                .covariates
                .iter()
                .map(|c| frame.get(c))
                .collect::<Result<Vec<_>>>()?;
            let mut mine = Vec::new();
            match &t.by {
                None => match g.next() {
                    Some(None) => mine.push(None),
                    _ => return Err(Error::Spec(format!("term `{}` has no matching group entry", t.name))),
                },
                Some(col) => {
                    while let Some(Some(gr)) = g.peek() {
                        if &gr.column != col {
                            break;
                        }
                        mine.push(Some(gr.clone()));
                        g.next();
                    }
                }
            }
            for group in mine {
                let rows: Option<Vec<usize>> = match &group {
                    None => None,
                    Some(gr) => {
                        let by = frame.get(&gr.column)?;
                        Some((0..n).filter(|&i| by[i] == gr.level).collect())
                    }
                };
                let active: Vec<usize> = rows.clone().unwrap_or_else(|| (0..n).collect());
                let z = Array2::from_shape_fn((active.len(), cols.len()), |(i, k)| cols[k][active[i]]);
                let name = match &group {
                    None => t.name.clone(),
                    Some(gr) => format!("{}[{}={}]", t.name, gr.column, gr.level),
                };
                terms.push(TermDesign {
                    name,
                    z,
                    rows,
                    group,
                    q: t.q,
                    order: t.order,
                    dif: t.dif,
                });
            }
        }
        if g.next().is_some() {
            return Err(Error::Spec("more term groups than smooth terms".into()));
        }
        Ok(Self {
            family: spec.family,
            n,
            y: Array1::zeros(0),
            x,
            offset,
            linear_names: names,
            terms,
        })
    }

    pub fn layout(&self) -> CoefficientLayout {
        let dims: Vec<(usize, usize)> = self.terms.iter().map(|t| (t.q, t.s())).collect();
        CoefficientLayout::new(self.x.ncols(), &dims)
    }

    pub fn groups(&self) -> Vec<Option<Group>> {
        self.terms.iter().map(|t| t.group.clone()).collect()
    }

    /// Names of every coefficient in `ψ`.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = self.linear_names.clone();
        for t in &self.terms {
            names.extend((1..=t.q).map(|k| format!("{}.gamma{k}", t.name)));
            names.extend((1..=t.s()).map(|k| format!("{}.alpha{k}", t.name)));
        }
        names
    }
}

fn levels(values: &Array1<f64>) -> Vec<f64> {
    let mut l: Vec<f64> = values.to_vec();
    l.sort_by(f64::total_cmp);
    l.dedup();
    l
}
