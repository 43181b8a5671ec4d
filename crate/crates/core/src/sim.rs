//! Simulation scenarios with known single-index directions and the
//! replication study built on them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::fit::{fit_design, FitConfig, FittedModel};
use crate::inference::confidence_band;
use crate::model::{Design, Frame, ModelSpec, TermSpec};

pub const UNSTABLE_THRESHOLD: f64 = 0.5;
pub const GAMMA_SHAPE: f64 = 9.0;
const GRID_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Poisson1,
    Gamma1,
    Poisson2,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::Poisson1, Self::Gamma1, Self::Poisson2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Poisson1 => "poisson1",
            Self::Gamma1 => "gamma1",
            Self::Poisson2 => "poisson2",
        }
    }

    fn id(self) -> u64 {
        match self {
            Self::Poisson1 => 1,
            Self::Gamma1 => 2,
            Self::Poisson2 => 3,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Self::Gamma1 => Family::gamma_log(),
            _ => Family::poisson(),
        }
    }

    pub fn beta(self) -> [f64; 2] {
        match self {
            Self::Gamma1 => [2.0, -1.8],
            _ => [2.0, 0.7],
        }
    }

    /// Unnormalized direction weights of each index.
    pub fn weights(self) -> Vec<Vec<f64>> {
        match self {
            Self::Poisson1 => vec![vec![1.0, -1.4], vec![1.0, 1.7, -0.8]],
            Self::Gamma1 => vec![vec![1.0, -1.4], vec![1.0, 1.7, -0.8], vec![1.0, 3.4, -0.5, -1.6]],
            Self::Poisson2 => vec![vec![1.0, -1.4], vec![1.0, -1.0, -0.5]],
        }
    }

    /// Divisors applied to the weighted sums.
    pub fn normalizers(self) -> Vec<f64> {
        match self {
            Self::Poisson1 => vec![1.72, 2.13],
            Self::Gamma1 => vec![1.72, 2.13, 3.92],
            Self::Poisson2 => vec![1.72, 1.5],
        }
    }

    /// Unit-norm true directions.
    pub fn alphas(self) -> Vec<Array1<f64>> {
        self.weights()
            .into_iter()
            .map(|w| {
                let a = Array1::from(w);
                let norm = a.dot(&a).sqrt();
                a / norm
            })
            .collect()
    }

    /// Whether the index covariates are standardized before use.
    pub fn standardized(self) -> bool {
        !matches!(self, Self::Gamma1)
    }

    /// Uncentered true curve of term `j`.
    pub fn f(self, j: usize, u: f64) -> f64 {
        let r12 = 12f64.sqrt();
        match (self, j) {
            (Self::Poisson1, 0) => (4.0 * (u / r12 - 0.11)).sin(),
            (Self::Poisson1, 1) => {
                let t = u / r12 + 0.45;
                (4.0 * t).sin() - (4.0 * t).cos()
            }
            (Self::Gamma1, 0) => (1.8 * u).powi(3) - u.sin(),
            (Self::Gamma1, 1) => u.exp() - 3.0 * u.powi(3),
            (Self::Gamma1, 2) => u * u / 6.0 - (PI * u).cos(),
            (Self::Poisson2, 0) => {
                let t = u / r12 - 0.11;
                (1.8 * t).powi(3) - t.sin()
            }
            (Self::Poisson2, 1) => {
                let t = (u / r12 + 0.57) / 1.4;
                (0.2 * t.powi(11) * (10.0 * (1.0 - t)).powi(6) + 10.0 * (10.0 * t).powi(3) * (1.0 - t).powi(10)) / 8.0
            }
            _ => panic!("scenario {} has no term {j}", self.name()),
        }
    }

    pub fn spec(self, q: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family(), "y").linear(&["x"]);
        for (j, w) in self.weights().iter().enumerate() {
            let cols: Vec<String> = (0..w.len()).map(|k| format!("z{}_{}", j + 1, k + 1)).collect();
            let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
            spec = spec.term(TermSpec::new(&format!("f{}", j + 1), &refs, q));
        }
        spec
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown scenario `{s}`; expected one of poisson1, gamma1, poisson2")))
    }
}

/// Seeded RNG for one (scenario, n, replicate, purpose) cell.
fn stream(seed: u64, kind: ScenarioKind, n: usize, replicate: Option<usize>, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep = replicate.map_or(0xFF_FFFF, |r| r as u64 & 0xFF_FFFF);
    rng.set_stream((purpose << 60) | (kind.id() << 56) | ((n as u64 & 0xFFFF_FFFF) << 24) | rep);
    rng
}

fn standardize(col: &mut Array1<f64>) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    col.mapv_inplace(|v| (v - mean) / sd);
}

/// Fixed covariates, true index values and centered truths for one
/// (scenario, n) cell.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub q: usize,
    pub x: Array1<f64>,
    /// Index covariates as used in the model, per term.
    pub z: Vec<Array2<f64>>,
    pub alphas: Vec<Array1<f64>>,
    /// True index values `Σ wₖzₖ / normalizer`.
    pub u: Vec<Array1<f64>>,
    /// Sample means of the uncentered true curves.
    pub f_means: Vec<f64>,
    /// Linear predictor without noise.
    pub eta: Array1<f64>,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, n: usize, seed: u64) -> Self {
        let mut rng = stream(seed, kind, n, None, 1);
        let x: Array1<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let weights = kind.weights();
        let norms = kind.normalizers();
        let mut z = Vec::new();
        let mut u = Vec::new();
        let mut f_means = Vec::new();
        let beta = kind.beta();
        let mut eta = x.mapv(|v| beta[0] + beta[1] * v);
        for (j, w) in weights.iter().enumerate() {
            let mut zj = Array2::from_shape_fn((n, w.len()), |_| rng.random::<f64>());
            if kind.standardized() {
                for mut c in zj.columns_mut() {
                    let mut owned = c.to_owned();
                    standardize(&mut owned);
                    c.assign(&owned);
                }
            }
            let uj = zj.dot(&Array1::from(w.clone())) / norms[j];
            let fj = uj.mapv(|v| kind.f(j, v));
            let mean = fj.mean().unwrap_or(0.0);
            eta += &(fj - mean);
            z.push(zj);
            u.push(uj);
            f_means.push(mean);
        }
        Self {
            kind,
            n,
            q: 9,
            x,
            z,
            alphas: kind.alphas(),
            u,
            f_means,
            eta,
        }
    }

    /// Centered true curve of term `j`.
    pub fn f_tilde(&self, j: usize, u: f64) -> f64 {
        self.kind.f(j, u) - self.f_means[j]
    }

    pub fn spec(&self) -> ModelSpec {
        self.kind.spec(self.q)
    }

    pub fn mean(&self) -> Array1<f64> {
        self.eta.mapv(f64::exp)
    }

    /// Response draw for one replicate.
    pub fn sample_response(&self, seed: u64, replicate: usize) -> Array1<f64> {
        let mut rng = stream(seed, self.kind, self.n, Some(replicate), 2);
        self.mean()
            .iter()
            .map(|&mu| match self.kind {
                ScenarioKind::Gamma1 => Gamma::new(GAMMA_SHAPE, mu / GAMMA_SHAPE).unwrap().sample(&mut rng),
                _ => Poisson::new(mu).unwrap().sample(&mut rng),
            })
            .collect()
    }

    pub fn frame(&self, y: Array1<f64>) -> Frame {
        let mut frame = Frame::new().with_column("y", y).with_column("x", self.x.clone());
        for (j, zj) in self.z.iter().enumerate() {
            for (k, c) in zj.columns().into_iter().enumerate() {
                frame.insert(&format!("z{}_{}", j + 1, k + 1), c.to_owned());
            }
        }
        frame
    }

    pub fn generate(&self, seed: u64, replicate: usize) -> Frame {
        self.frame(self.sample_response(seed, replicate))
    }

    /// Evaluation grid of term `j`: evenly spaced between the 5% and 95%
    /// sample quantiles of the true index.
    pub fn grid(&self, j: usize) -> Vec<f64> {
        let mut u = self.u[j].to_vec();
        u.sort_by(f64::total_cmp);
        let at = |p: f64| u[((u.len() - 1) as f64 * p).round() as usize];
        let (lo, hi) = (at(0.05), at(0.95));
        (0..GRID_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
            .collect()
    }

    pub fn fit_seed(&self, seed: u64, replicate: usize) -> u64 {
        stream(seed, self.kind, self.n, Some(replicate), 3).random()
    }
}

/// `‖α̂ − α‖ / ‖α‖`.
pub fn relative_error(estimate: &Array1<f64>, truth: &Array1<f64>) -> f64 {
    let d = estimate - truth;
    d.dot(&d).sqrt() / truth.dot(truth).sqrt()
}

/// Per-term relative errors and the instability flag.
pub fn classify(estimates: &[Array1<f64>], truth: &[Array1<f64>]) -> (Vec<f64>, bool) {
    let errors: Vec<f64> = estimates.iter().zip(truth).map(|(e, t)| relative_error(e, t)).collect();
    let unstable = errors.iter().any(|&e| !(e <= UNSTABLE_THRESHOLD));
    (errors, unstable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub term: usize,
    pub u: f64,
    pub fhat: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario: ScenarioKind,
    pub n: usize,
    pub replicate: usize,
    pub rel_errors: Vec<f64>,
    pub unstable: bool,
    /// Fit returned an error; counted as unstable.
    pub failed: bool,
    pub error: Option<String>,
    pub converged: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub fs_violations: usize,
    pub phi: f64,
    pub alpha1_edf: Vec<f64>,
    pub seconds: f64,
    pub grid: Vec<GridRow>,
}

impl ReplicateResult {
    pub fn max_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(f64::NAN, f64::max)
    }

    /// Interior grid points whose band covers the truth, out of those
    /// evaluated.
    pub fn coverage(&self) -> (usize, usize) {
        let hits = self.grid.iter().filter(|g| g.lower <= g.truth && g.truth <= g.upper).count();
        (hits, self.grid.len())
    }
}

fn grid_rows(model: &FittedModel, design: &Design, scenario: &Scenario) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for j in 0..model.terms.len() {
        let Ok(band) = confidence_band(model, design, j) else { continue };
        let grid: Vec<f64> = scenario
            .grid(j)
            .into_iter()
            .filter(|g| *g >= band.u[0] && *g <= band.u[band.u.len() - 1])
            .collect();
        let Ok(b) = band.interpolate(&grid) else { continue };
        for (k, &g) in grid.iter().enumerate() {
            rows.push(GridRow {
                term: j,
                u: g,
                fhat: b.fhat[k],
                lower: b.fhat[k] - b.half_width[k],
                upper: b.fhat[k] + b.half_width[k],
                truth: scenario.f_tilde(j, g),
            });
        }
    }
    rows
}

pub fn run_replicate(scenario: &Scenario, seed: u64, replicate: usize, base: &FitConfig) -> ReplicateResult {
    let frame = scenario.generate(seed, replicate);
    let spec = scenario.spec();
    let config = FitConfig {
        seed: scenario.fit_seed(seed, replicate),
        ..base.clone()
    };
    let start = Instant::now();
    let outcome = Design::from_frame(&spec, &frame).and_then(|d| fit_design(&spec, &d, &config).map(|m| (d, m)));
    let seconds = start.elapsed().as_secs_f64();
    let terms = scenario.alphas.len();
    let mut out = ReplicateResult {
        scenario: scenario.kind,
        n: scenario.n,
        replicate,
        rel_errors: vec![f64::NAN; terms],
        unstable: true,
        failed: true,
        error: None,
        converged: false,
        restarts: 0,
        iterations: 0,
        fs_violations: 0,
        phi: f64::NAN,
        alpha1_edf: vec![],
        seconds,
        grid: vec![],
    };
    match outcome {
        Ok((design, model)) => {
            let est: Vec<Array1<f64>> = model.terms.iter().map(|t| t.alpha.clone()).collect();
            let (errors, unstable) = classify(&est, &scenario.alphas);
            out.rel_errors = errors;
            out.unstable = unstable;
            out.failed = false;
            out.converged = model.converged;
            out.restarts = model.restarts;
            out.iterations = model.iterations;
            out.fs_violations = model.fs_violations;
            out.phi = model.phi;
            out.alpha1_edf = model.edf.terms.iter().map(|t| t.alpha).collect();
            out.grid = grid_rows(&model, &design, scenario);
        }
        Err(e) => {
            log::warn!("{} n={} replicate {replicate}: {e}", scenario.kind, scenario.n);
            out.error = Some(e.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: ScenarioKind,
    pub n: usize,
    pub replicates: usize,
    pub unstable: usize,
    pub failed: usize,
    pub instability_rate: f64,
    /// Mean of the per-replicate mean relative error over stable fits.
    pub mean_rel_error: f64,
    pub median_rel_error: f64,
    pub mean_phi: f64,
    pub converged: usize,
    pub fs_violations: usize,
    pub coverage: f64,
    pub p90_seconds: f64,
    pub total_seconds: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(kind: ScenarioKind, n: usize, results: &[ReplicateResult]) -> StudySummary {
    let stable: Vec<&ReplicateResult> = results.iter().filter(|r| !r.unstable).collect();
    let mut errs: Vec<f64> = stable
        .iter()
        .map(|r| r.rel_errors.iter().sum::<f64>() / r.rel_errors.len() as f64)
        .collect();
    let mean_rel_error = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    let mut secs: Vec<f64> = results.iter().map(|r| r.seconds).collect();
    secs.sort_by(f64::total_cmp);
    let (hits, total) = results
        .iter()
        .filter(|r| !r.unstable)
        .map(ReplicateResult::coverage)
        .fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    let unstable = results.len() - stable.len();
    StudySummary {
        scenario: kind,
        n,
        replicates: results.len(),
        unstable,
        failed: results.iter().filter(|r| r.failed).count(),
        instability_rate: unstable as f64 / results.len() as f64,
        mean_rel_error,
        median_rel_error: quantile(&errs, 0.5),
        mean_phi: stable.iter().map(|r| r.phi).sum::<f64>() / stable.len() as f64,
        converged: results.iter().filter(|r| r.converged).count(),
        fs_violations: results.iter().map(|r| r.fs_violations).sum(),
        coverage: hits as f64 / total as f64,
        p90_seconds: quantile(&secs, 0.9),
        total_seconds: secs.iter().sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub replicates: Vec<ReplicateResult>,
    pub summaries: Vec<StudySummary>,
}

/// Runs `replicates` fits for each sample size on a pool of `jobs` threads.
/// Results do not depend on `jobs` apart from timings.
pub fn run_study(
    kind: ScenarioKind,
    sizes: &[usize],
    replicates: usize,
    jobs: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<Study> {
    if replicates == 0 {
        return Err(Error::Spec("at least one replicate is required".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Spec(format!("thread pool: {e}")))?;
    let mut study = Study {
        replicates: Vec::new(),
        summaries: Vec::new(),
    };
    for &n in sizes {
        let scenario = Scenario::new(kind, n, seed);
        let results: Vec<ReplicateResult> = pool.install(|| {
            (0..replicates)
                .into_par_iter()
                .map(|r| run_replicate(&scenario, seed, r, config))
                .collect()
        });
        study.summaries.push(summarize(kind, n, &results));
        study.replicates.extend(results);
    }
    Ok(study)
}

/// Column means of a matrix, for checking fixed-covariate draws.
pub fn column_means(z: &Array2<f64>) -> Array1<f64> {
    z.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(z.ncols()))
}
