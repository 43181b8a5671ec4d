//! Direct penalized Fisher scoring for all coefficients, with
//! Fellner-Schall smoothing updates, Pearson precision updates, re-knotting
//! of every index term after each step, and restarts from fresh random
//! directions when the iteration degenerates.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{apply_centering, eval_basis_clamped, BasisBlock, KnotVector};
use crate::error::{Error, Result};
use crate::family::{self, Family};
use crate::index::{centered_index_matrix, expand_alpha, jacobian};
use crate::inference::{edf_from_crossprod, Edf};
use crate::layout::CoefficientLayout;
use crate::model::{Design, Frame, Group, ModelSpec};
use crate::numkernel::{cholesky, inverse_factor, weighted_crossprod, CholFactor};
use crate::penalty::{assemble_penalty, difference_penalty, BlockPenalty, TermPenalty};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub eps_knot: f64,
    pub ridge: f64,
    pub tol_met: f64,
    pub max_model_iter: usize,
    pub max_total_iter: usize,
    pub met_explosion: f64,
    pub alpha1_floor: f64,
    /// Apply the first-component floor to every index term rather than to
    /// the largest one.
    pub alpha1_every_term: bool,
    /// Starting directions need every component below this.
    pub init_alpha_max: f64,
    /// Starting directions need a first component above this.
    pub init_alpha1_min: f64,
    pub init_draws: usize,
    pub lambda_init: (f64, f64),
    pub phi_init: (f64, f64),
    /// Starting smoothing parameter for the initial spline fits.
    pub init_gamma_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub update_lambda: bool,
    pub update_phi: bool,
    /// Overrides the random starting smoothing parameters.
    pub lambda_start: Option<Vec<f64>>,
    /// Overrides the random starting precision.
    pub phi_start: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            eps_knot: 0.001,
            ridge: 1e-7,
            tol_met: 1e-6,
            max_model_iter: 80,
            max_total_iter: 500,
            met_explosion: 1e6,
            alpha1_floor: 0.05,
            alpha1_every_term: true,
            init_alpha_max: 0.8,
            init_alpha1_min: 0.2,
            init_draws: 100,
            lambda_init: (1.0, 1000.0),
            phi_init: (1.0, 100.0),
            init_gamma_lambda: 10.0,
            lambda_min: 1e-10,
            lambda_max: 1e7,
            update_lambda: true,
            update_phi: true,
            lambda_start: None,
            phi_start: None,
            seed: 1,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps_knot", self.eps_knot),
            ("tol_met", self.tol_met),
            ("met_explosion", self.met_explosion),
            ("alpha1_floor", self.alpha1_floor),
            ("init_alpha_max", self.init_alpha_max),
            ("init_alpha1_min", self.init_alpha1_min),
            ("init_gamma_lambda", self.init_gamma_lambda),
            ("lambda_min", self.lambda_min),
            ("lambda_max", self.lambda_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Spec(format!("fit setting {name} must be positive, got {v}")));
            }
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Spec(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if self.max_model_iter == 0 || self.max_total_iter == 0 || self.init_draws == 0 {
            return Err(Error::Spec("iteration limits must be positive".into()));
        }
        for (name, (lo, hi)) in [("lambda_init", self.lambda_init), ("phi_init", self.phi_init)] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Spec(format!("{name} must be a positive range, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// How knots are placed when evaluating a coefficient vector.
#[derive(Debug, Clone, Copy)]
pub enum Knots<'a> {
    /// Re-derived from the current index values with this boundary tolerance.
    Dynamic(f64),
    /// Held fixed; index values outside the span are an error.
    Fixed(&'a [KnotVector]),
}

/// Per-term quantities at one coefficient vector, on the term's active rows.
#[derive(Debug, Clone)]
pub struct TermState {
    pub alpha_tilde: Array1<f64>,
    pub alpha: Array1<f64>,
    pub jac: Array2<f64>,
    pub u: Array1<f64>,
    pub block: BasisBlock,
    /// Centered curve values.
    pub f: Array1<f64>,
    /// Slope of the uncentered curve.
    pub fprime: Array1<f64>,
    /// Index model matrix.
    pub t: Array2<f64>,
}

/// Everything the scoring step needs at one coefficient vector.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub psi: Array1<f64>,
    pub terms: Vec<TermState>,
    /// Unweighted model matrix `[X, Ñ¹, T̃¹, …]`.
    pub m: Array2<f64>,
    /// Linear predictor including the offset.
    pub eta: Array1<f64>,
    pub mu: Array1<f64>,
    pub w: Array1<f64>,
    pub v: Array1<f64>,
    /// Number of means moved by the domain guard.
    pub guarded: usize,
}

impl ModelState {
    /// Largest first direction component over the index terms.
    pub fn alpha1_max(&self) -> Option<f64> {
        self.alpha1().reduce(f64::max)
    }

    /// Smallest first direction component over the index terms.
    pub fn alpha1_min(&self) -> Option<f64> {
        self.alpha1().reduce(f64::min)
    }

    fn alpha1(&self) -> impl Iterator<Item = f64> + '_ {
        self.terms.iter().filter(|t| !t.alpha_tilde.is_empty()).map(|t| t.alpha[0])
    }
}

fn add_term(eta: &mut Array1<f64>, rows: Option<&[usize]>, f: &Array1<f64>) {
    match rows {
        None => *eta += f,
        Some(rows) => {
            for (&r, &v) in rows.iter().zip(f.iter()) {
                eta[r] += v;
            }
        }
    }
}

/// `offset + Xβ + Σ f̃ⱼ`, shared by fitting and prediction.
fn compose_eta(design: &Design, beta: ArrayView1<f64>, contributions: &[Array1<f64>]) -> Array1<f64> {
    let mut eta = &design.offset + &design.x.dot(&beta);
    for (t, f) in design.terms.iter().zip(contributions) {
        add_term(&mut eta, t.rows.as_deref(), f);
    }
    eta
}

/// Builds bases, index matrices, the model matrix, means and weights at `psi`.
pub fn evaluate(design: &Design, layout: &CoefficientLayout, psi: Array1<f64>, knots: Knots) -> Result<ModelState> {
    if psi.len() != layout.dim {
        return Err(Error::DimensionMismatch(format!(
            "coefficient vector has length {} but the layout needs {}",
            psi.len(),
            layout.dim
        )));
    }
    let n = design.n;
    let mut m = Array2::<f64>::zeros((n, layout.dim));
    m.slice_mut(s![.., layout.beta.clone()]).assign(&design.x);
    let mut terms = Vec::with_capacity(design.terms.len());
    for (j, (td, tl)) in design.terms.iter().zip(&layout.terms).enumerate() {
        let alpha_tilde = psi.slice(s![tl.alpha.clone()]).to_owned();
        let alpha = expand_alpha(alpha_tilde.view());
        let jac = jacobian(alpha_tilde.view());
        let u = td.z.dot(&alpha);
        let block = match knots {
            Knots::Dynamic(eps) => BasisBlock::build(u.view(), td.q, td.order, eps),
            Knots::Fixed(k) => BasisBlock::with_knots(k[j].clone(), u.view()),
        }
        .map_err(|e| match e {
            Error::OutOfSpan { index, value, lower, upper } => Error::OutOfSpan {
                index: td.rows.as_ref().map_or(index, |r| r[index]),
                value,
                lower,
                upper,
            },
            other => other,
        })?;
        if block.centered_dim != tl.gamma.len() {
            return Err(Error::DimensionMismatch(format!(
                "term `{}` has {} basis columns but {} coefficients",
                td.name,
                block.centered_dim,
                tl.gamma.len()
            )));
        }
        let gamma = psi.slice(s![tl.gamma.clone()]);
        let f = block.basis.dot(&gamma);
        let fprime = block.raw_derivative(gamma);
        let t = centered_index_matrix(fprime.view(), td.z.view(), jac.view());
        match &td.rows {
            None => {
                m.slice_mut(s![.., tl.gamma.clone()]).assign(&block.basis);
                m.slice_mut(s![.., tl.alpha.clone()]).assign(&t);
            }
            Some(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    m.slice_mut(s![r, tl.gamma.clone()]).assign(&block.basis.row(i));
                    m.slice_mut(s![r, tl.alpha.clone()]).assign(&t.row(i));
                }
            }
        }
        terms.push(TermState {
            alpha_tilde,
            alpha,
            jac,
            u,
            block,
            f,
            fprime,
            t,
        });
    }
    let contributions: Vec<Array1<f64>> = terms.iter().map(|t| t.f.clone()).collect();
    let eta = compose_eta(design, psi.slice(s![layout.beta.clone()]), &contributions);
    let (mu, guarded) = design.family.means(eta.view());
    let (w, v) = family::weights_and_variance(mu.view(), &design.family)?;
    Ok(ModelState {
        psi,
        terms,
        m,
        eta,
        mu,
        w,
        v,
        guarded,
    })
}

/// `U = φ Mᵀ W^{1/2} V^{-1/2} (y − μ) − P_λ ψ`.
pub fn penalized_score(design: &Design, state: &ModelState, penalty: &BlockPenalty, phi: f64) -> Array1<f64> {
    let link = design.family.link;
    let r: Array1<f64> = (0..design.n)
        .map(|i| {
            let mu = state.mu[i];
            phi * (design.y[i] - mu) / (link.deriv(mu) * state.v[i])
        })
        .collect();
    state.m.t().dot(&r) - penalty.apply(state.psi.view())
}

/// `L(ψ, φ) − ½ ψᵀ P_λ ψ`.
pub fn penalized_loglik_at(design: &Design, state: &ModelState, penalty: &BlockPenalty, phi: f64) -> f64 {
    family::penalized_loglik(
        design.y.view(),
        state.mu.view(),
        phi,
        penalty.quadratic_form(state.psi.view()),
        &design.family,
    )
}

/// Result of one scoring step.
#[derive(Debug, Clone)]
pub struct Step {
    pub psi: Array1<f64>,
    pub factor: CholFactor,
    /// Solution of `Lᵀ B = I`.
    pub b: Array2<f64>,
    /// `cp(M̃) = Mᵀ W M`.
    pub cp_m: Array2<f64>,
    pub ytilde: Array1<f64>,
}

/// Factors `MᵀWM + φ⁻¹P_λ + ridge·I` and solves for the next `ψ` against
/// the working response.
pub fn psi_update(state: &ModelState, y: ArrayView1<f64>, penalty: &BlockPenalty, phi: f64, ridge: f64) -> Result<Step> {
    let cp_m = weighted_crossprod(state.m.view(), state.w.view());
    let mut a = &cp_m + &penalty.dense_scaled(1.0 / phi);
    if ridge > 0.0 {
        a.diag_mut().mapv_inplace(|v| v + ridge);
    }
    let factor = cholesky(&a)?;
    let mpsi = state.m.dot(&state.psi);
    let ytilde = family::working_response(mpsi.view(), y, state.mu.view(), state.w.view(), state.v.view());
    let rhs = state.m.t().dot(&(&state.w * &ytilde));
    let psi = factor.solve(rhs.view());
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("scoring step produced non-finite coefficients".into()));
    }
    let b = inverse_factor(&factor);
    Ok(Step {
        psi,
        factor,
        b,
        cp_m,
        ytilde,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaUpdate {
    pub lambdas: Vec<f64>,
    /// `tr{P_λ⁻Pʲ} − φ⁻¹ tr{cp(B) Pʲ}` per term.
    pub numerators: Vec<f64>,
    pub denominators: Vec<f64>,
    /// Terms whose numerator was not positive.
    pub violations: usize,
    /// Updates pushed onto the floor or ceiling.
    pub clamped: usize,
}

/// Fellner-Schall update `λⱼ ← λⱼ tr{Q Pʲ} / γ̃ʲᵀP̃ʲγ̃ʲ` with
/// `Q = P_λ⁻ − φ⁻¹ cp(B)`.
pub fn lambda_update(
    penalty: &BlockPenalty,
    cov: &Array2<f64>,
    phi: f64,
    new_psi: ArrayView1<f64>,
    lambda_min: f64,
    lambda_max: f64,
) -> LambdaUpdate {
    let m = penalty.blocks.len();
    let mut out = LambdaUpdate {
        lambdas: Vec::with_capacity(m),
        numerators: Vec::with_capacity(m),
        denominators: Vec::with_capacity(m),
        violations: 0,
        clamped: 0,
    };
    for j in 0..m {
        let num = penalty.pinv_trace(j) - penalty.trace_with(cov, j) / phi;
        let den = penalty.term_quadratic(j, new_psi);
        let lam = penalty.lambdas[j];
        if !(num > 0.0) {
            out.violations += 1;
        }
        let raw = if den > 0.0 { lam * num / den } else { f64::INFINITY };
        let next = if raw.is_nan() { lam } else { raw.clamp(lambda_min, lambda_max) };
        if next != raw {
            out.clamped += 1;
            if den <= 0.0 || raw > lambda_max {
                log::debug!("smoothing parameter {j} capped at {lambda_max}");
            }
        }
        out.lambdas.push(next);
        out.numerators.push(num);
        out.denominators.push(den);
    }
    out
}

/// Iteratively reweighted least squares for the linear part alone.
pub fn glm_irls(x: &Array2<f64>, y: ArrayView1<f64>, offset: ArrayView1<f64>, family: &Family) -> Result<Array1<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Ok(Array1::zeros(0));
    }
    let start = |y: f64| match family.distribution {
        family::Distribution::Gaussian | family::Distribution::Gamma => y,
        family::Distribution::Poisson => y + 0.1,
        family::Distribution::Bernoulli => (y + 0.5) / 2.0,
    };
    let mut mu = y.mapv(start);
    let mut eta = mu.mapv(|m| family.link.link(m));
    let mut beta = Array1::zeros(p);
    let mut ll_old = f64::NEG_INFINITY;
    for _ in 0..100 {
        let (w, v) = family::weights_and_variance(mu.view(), family)?;
        let z = family::working_response((&eta - &offset).view(), y, mu.view(), w.view(), v.view());
        let mut a = weighted_crossprod(x.view(), w.view());
        a.diag_mut().mapv_inplace(|d| d * (1.0 + 1e-12) + 1e-12);
        beta = cholesky(&a)?.solve(x.t().dot(&(&w * &z)).view());
        eta = &offset + &x.dot(&beta);
        mu = family.means(eta.view()).0;
        let ll = family::loglik(y, mu.view(), 1.0, family);
        if (ll - ll_old).abs() <= 1e-11 * (ll.abs() + 1e-4) {
            break;
        }
        ll_old = ll;
    }
    Ok(beta)
}

/// Draws a starting direction with every component below `max` and a
/// first component above `min1`.
fn draw_alpha_tilde<R: Rng + ?Sized>(s: usize, config: &FitConfig, rng: &mut R) -> Result<Array1<f64>> {
    for _ in 0..config.init_draws {
        let at: Array1<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = expand_alpha(at.view());
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max < config.init_alpha_max && a[0] > config.init_alpha1_min {
            return Ok(at);
        }
    }
    Err(Error::InitFailed(config.init_draws))
}

/// Iteration state between scoring steps.
#[derive(Debug, Clone)]
pub struct FitState {
    pub model: ModelState,
    pub penalty: BlockPenalty,
    pub phi: f64,
    pub lp: f64,
}

/// Penalized IRLS for one spline term against a fixed offset, with
/// Fellner-Schall smoothing and Pearson precision updates.
fn smooth_start(
    basis: &Array2<f64>,
    y: ArrayView1<f64>,
    offset: ArrayView1<f64>,
    fam: &Family,
    penalty: &TermPenalty,
    config: &FitConfig,
) -> Result<Array1<f64>> {
    let q = basis.ncols();
    let mut gamma = Array1::<f64>::zeros(q);
    let mut lambda = config.init_gamma_lambda;
    let mut phi = 1.0;
    let mut old = f64::NEG_INFINITY;
    for _ in 0..100 {
        let eta = &offset + &basis.dot(&gamma);
        let (mu, _) = fam.means(eta.view());
        let (w, v) = family::weights_and_variance(mu.view(), fam)?;
        let z = family::working_response(basis.dot(&gamma).view(), y, mu.view(), w.view(), v.view());
        let cp = weighted_crossprod(basis.view(), w.view());
        let mut a = &cp + &(&penalty.p_tilde * (lambda / phi));
        a.diag_mut().mapv_inplace(|d| d + config.ridge);
        let factor = cholesky(&a)?;
        let next = factor.solve(basis.t().dot(&(&w * &z)).view());
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        gamma = next;
        let b = inverse_factor(&factor);
        let cov = b.t().dot(&b);
        let num = penalty.rank() as f64 / lambda - (&cov * &penalty.p_tilde).sum() / phi;
        let den = penalty.quadratic(gamma.view());
        if num > 0.0 && den > 0.0 {
            lambda = (lambda * num / den).clamp(config.lambda_min, config.lambda_max);
        }
        let (mu, _) = fam.means((&offset + &basis.dot(&gamma)).view());
        if fam.distribution.has_dispersion() {
            let (_, v) = family::weights_and_variance(mu.view(), fam)?;
            let edf = (&cov * &cp).sum();
            phi = family::update_phi(y, mu.view(), v.view(), edf, fam).unwrap_or(phi);
        }
        let lp = family::loglik(y, mu.view(), phi, fam) - 0.5 * lambda * penalty.quadratic(gamma.view());
        if (lp - old).abs() <= 1e-8 * (lp.abs() + 1e-4) {
            break;
        }
        old = lp;
    }
    Ok(gamma)
}

/// Starting values: random directions, knots, penalized spline
/// coefficients against the linear fit, random smoothing parameters and
/// precision.
pub fn initialize<R: Rng + ?Sized>(
    design: &Design,
    penalties: &[TermPenalty],
    beta: ArrayView1<f64>,
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitState> {
    let layout = design.layout();
    let mut psi = Array1::<f64>::zeros(layout.dim);
    psi.slice_mut(s![layout.beta.clone()]).assign(&beta);
    for (td, tl) in design.terms.iter().zip(&layout.terms) {
        if td.s() > 0 {
            let at = draw_alpha_tilde(td.s(), config, rng)?;
            psi.slice_mut(s![tl.alpha.clone()]).assign(&at);
        }
    }
    let lin = &design.offset + &design.x.dot(&beta);
    for (j, (td, tl)) in design.terms.iter().zip(&layout.terms).enumerate() {
        let alpha = expand_alpha(psi.slice(s![tl.alpha.clone()]));
        let u = td.z.dot(&alpha);
        let block = BasisBlock::build(u.view(), td.q, td.order, config.eps_knot)?;
        let rows: Vec<usize> = td.rows.clone().unwrap_or_else(|| (0..design.n).collect());
        let off: Array1<f64> = rows.iter().map(|&r| lin[r]).collect();
        let y: Array1<f64> = rows.iter().map(|&r| design.y[r]).collect();
        let gamma = smooth_start(&block.basis, y.view(), off.view(), &design.family, &penalties[j], config)?;
        psi.slice_mut(s![tl.gamma.clone()]).assign(&gamma);
    }
    let m = design.terms.len();
    let lambdas: Vec<f64> = match &config.lambda_start {
        Some(l) => l.clone(),
        None => (0..m).map(|_| rng.random_range(config.lambda_init.0..=config.lambda_init.1)).collect(),
    };
    let phi = if !design.family.distribution.has_dispersion() {
        1.0
    } else {
        match config.phi_start {
            Some(p) => p,
            None => rng.random_range(config.phi_init.0..=config.phi_init.1),
        }
    };
    let penalty = assemble_penalty(&layout, penalties, &lambdas)?;
    let model = evaluate(design, &layout, psi, Knots::Dynamic(config.eps_knot))?;
    let lp = penalized_loglik_at(design, &model, &penalty, phi);
    Ok(FitState { model, penalty, phi, lp })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub restart: usize,
    pub lp: f64,
    pub met: f64,
    pub phi: f64,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub name: String,
    pub group: Option<Group>,
    pub q: usize,
    pub order: usize,
    pub dif: usize,
    pub knots: KnotVector,
    pub col_means: Array1<f64>,
    pub alpha: Array1<f64>,
}

impl FittedTerm {
    pub fn s(&self) -> usize {
        self.alpha.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub config: FitConfig,
    pub layout: CoefficientLayout,
    pub coefficient_names: Vec<String>,
    pub n: usize,
    pub psi: Array1<f64>,
    pub terms: Vec<FittedTerm>,
    pub lambdas: Vec<f64>,
    pub phi: f64,
    /// Inverse Cholesky factor of the penalized information at the saved
    /// iterate; `BᵀB/φ` is the coefficient covariance.
    pub b: Array2<f64>,
    pub ridge_in_factor: bool,
    pub edf: Edf,
    pub loglik: f64,
    pub lp: f64,
    pub met: f64,
    pub converged: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub saved_iteration: usize,
    pub fs_violations: usize,
    pub mean_guards: usize,
    pub trace: Vec<TraceEntry>,
    pub fitted_eta: Array1<f64>,
    pub fitted_mu: Array1<f64>,
}

impl FittedModel {
    pub fn beta(&self) -> ArrayView1<'_, f64> {
        self.psi.slice(s![self.layout.beta.clone()])
    }

    pub fn gamma(&self, j: usize) -> ArrayView1<'_, f64> {
        self.psi.slice(s![self.layout.terms[j].gamma.clone()])
    }

    pub fn alpha_tilde(&self, j: usize) -> ArrayView1<'_, f64> {
        self.psi.slice(s![self.layout.terms[j].alpha.clone()])
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.b.t().dot(&self.b) / self.phi
    }
}

#[derive(Debug, Clone)]
struct Saved {
    psi: Array1<f64>,
    lambdas: Vec<f64>,
    phi: f64,
    lp: f64,
    met: f64,
    iteration: usize,
}

enum Restart {
    Failed(Error),
    FsViolation,
    Alpha1(f64),
    Explosion(f64),
    ModelIterations,
}

impl fmt::Display for Restart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Failed(e) => write!(f, "{e}"),
            Self::FsViolation => write!(f, "non-positive smoothing update numerator"),
            Self::Alpha1(a) => write!(f, "largest first direction component {a:.4}"),
            Self::Explosion(m) => write!(f, "iteration metric {m:.3e}"),
            Self::ModelIterations => write!(f, "iteration limit since last restart"),
        }
    }
}

pub fn fit(spec: &ModelSpec, frame: &Frame, config: &FitConfig) -> Result<FittedModel> {
    let design = Design::from_frame(spec, frame)?;
    fit_design(spec, &design, config)
}

pub fn fit_design(spec: &ModelSpec, design: &Design, config: &FitConfig) -> Result<FittedModel> {
    config.validate()?;
    let layout = design.layout();
    if design.n <= layout.dim {
        return Err(Error::Spec(format!(
            "{} observations for {} coefficients",
            design.n, layout.dim
        )));
    }
    if let Some(l) = &config.lambda_start {
        if l.len() != design.terms.len() {
            return Err(Error::Spec(format!(
                "{} starting smoothing parameters for {} terms",
                l.len(),
                design.terms.len()
            )));
        }
    }
    let penalties = design
        .terms
        .iter()
        .map(|t| difference_penalty(t.q, t.dif))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let beta = glm_irls(&design.x, design.y.view(), design.offset.view(), &design.family)?;

    let y = design.y.view();
    let fam = design.family;
    let mut best: Option<Saved> = None;
    let mut trace = Vec::new();
    let (mut total, mut restarts, mut fs_violations, mut guards) = (0usize, 0usize, 0usize, 0usize);
    let mut converged = false;

    'outer: while total < config.max_total_iter {
        let mut st = match initialize(design, &penalties, beta.view(), config, &mut rng) {
            Ok(s) => s,
            Err(e @ Error::InitFailed(_)) => return Err(e),
            Err(e) => {
                log::debug!("initialization failed: {e}");
                total += 1;
                restarts += 1;
                continue;
            }
        };
        let mut model_iter = 0;
        let reason = loop {
            if total >= config.max_total_iter {
                break 'outer;
            }
            total += 1;
            model_iter += 1;
            let step = match psi_update(&st.model, y, &st.penalty, st.phi, config.ridge) {
                Ok(s) => s,
                Err(e) => break Restart::Failed(e),
            };
            let next = match evaluate(design, &layout, step.psi.clone(), Knots::Dynamic(config.eps_knot)) {
                Ok(m) => m,
                Err(e) => break Restart::Failed(e),
            };
            guards += next.guarded;
            let cov = step.b.t().dot(&step.b);
            let mut penalty = st.penalty.clone();
            if config.update_lambda && !penalty.blocks.is_empty() {
                let up = lambda_update(&penalty, &cov, st.phi, next.psi.view(), config.lambda_min, config.lambda_max);
                if up.violations > 0 {
                    fs_violations += up.violations;
                    break Restart::FsViolation;
                }
                if let Err(e) = penalty.set_lambdas(&up.lambdas) {
                    break Restart::Failed(e);
                }
            }
            let phi = if config.update_phi {
                let edf: f64 = (&cov * &step.cp_m).sum();
                match family::update_phi(y, next.mu.view(), next.v.view(), edf, &fam) {
                    Ok(p) => p,
                    Err(e) => break Restart::Failed(e),
                }
            } else {
                st.phi
            };
            let lp = penalized_loglik_at(design, &next, &penalty, phi);
            let met = (lp - st.lp).abs() / (st.lp.abs() + 1e-4);
            trace.push(TraceEntry {
                iteration: total,
                restart: restarts,
                lp,
                met,
                phi,
                lambdas: penalty.lambdas.clone(),
            });
            if !lp.is_finite() || !met.is_finite() {
                break Restart::Failed(Error::DegenerateFit("non-finite penalized log-likelihood".into()));
            }
            let a1 = if config.alpha1_every_term { next.alpha1_min() } else { next.alpha1_max() };
            if let Some(a1) = a1 {
                if a1 < config.alpha1_floor {
                    break Restart::Alpha1(a1);
                }
            }
            if met > config.met_explosion {
                break Restart::Explosion(met);
            }
            if best.as_ref().is_none_or(|b| met < b.met) {
                best = Some(Saved {
                    psi: next.psi.clone(),
                    lambdas: penalty.lambdas.clone(),
                    phi,
                    lp,
                    met,
                    iteration: total,
                });
            }
            if met < config.tol_met {
                converged = true;
                break 'outer;
            }
            if model_iter >= config.max_model_iter {
                break Restart::ModelIterations;
            }
            st = FitState {
                model: next,
                penalty,
                phi,
                lp,
            };
        };
        restarts += 1;
        log::debug!("restart {restarts} after {total} iterations: {reason}");
    }

    let saved = best.ok_or(Error::NonConvergence {
        iterations: total,
        restarts,
    })?;
    finish(
        spec,
        design,
        &layout,
        &penalties,
        saved,
        config,
        Progress {
            converged,
            restarts,
            iterations: total,
            fs_violations,
            guards,
            trace,
        },
    )
}

struct Progress {
    converged: bool,
    restarts: usize,
    iterations: usize,
    fs_violations: usize,
    guards: usize,
    trace: Vec<TraceEntry>,
}

fn finish(
    spec: &ModelSpec,
    design: &Design,
    layout: &CoefficientLayout,
    penalties: &[TermPenalty],
    saved: Saved,
    config: &FitConfig,
    progress: Progress,
) -> Result<FittedModel> {
    let state = evaluate(design, layout, saved.psi.clone(), Knots::Dynamic(config.eps_knot))?;
    let penalty = assemble_penalty(layout, penalties, &saved.lambdas)?;
    let cp_m = weighted_crossprod(state.m.view(), state.w.view());
    let a = &cp_m + &penalty.dense_scaled(1.0 / saved.phi);
    let (factor, ridge_in_factor) = match cholesky(&a) {
        Ok(f) => (f, false),
        Err(_) => {
            let mut ar = a.clone();
            ar.diag_mut().mapv_inplace(|v| v + config.ridge);
            (cholesky(&ar)?, true)
        }
    };
    let b = inverse_factor(&factor);
    let edf = edf_from_crossprod(&b.t().dot(&b), &cp_m, layout);
    let terms = design
        .terms
        .iter()
        .zip(&state.terms)
        .map(|(td, ts)| FittedTerm {
            name: td.name.clone(),
            group: td.group.clone(),
            q: td.q,
            order: td.order,
            dif: td.dif,
            knots: ts.block.knots.clone(),
            col_means: ts.block.col_means.clone(),
            alpha: ts.alpha.clone(),
        })
        .collect();
    let loglik = family::loglik(design.y.view(), state.mu.view(), saved.phi, &design.family);
    Ok(FittedModel {
        spec: spec.clone(),
        config: config.clone(),
        layout: layout.clone(),
        coefficient_names: design.coefficient_names(),
        n: design.n,
        psi: saved.psi,
        terms,
        lambdas: saved.lambdas,
        phi: saved.phi,
        b,
        ridge_in_factor,
        edf,
        loglik,
        lp: saved.lp,
        met: saved.met,
        converged: progress.converged,
        restarts: progress.restarts,
        iterations: progress.iterations,
        saved_iteration: saved.iteration,
        fs_violations: progress.fs_violations,
        mean_guards: progress.guards,
        trace: progress.trace,
        fitted_eta: state.eta,
        fitted_mu: state.mu,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub eta: Array1<f64>,
    pub mu: Array1<f64>,
    /// Centered term contributions, zero outside a term's group.
    pub terms: Array2<f64>,
    pub clamped: usize,
}

/// Evaluates a fitted model on new data using the stored knots and
/// centering constants. Index values outside a term's knot span are
/// clamped onto it.
pub fn predict(model: &FittedModel, frame: &Frame) -> Result<Prediction> {
    let groups: Vec<Option<Group>> = model.terms.iter().map(|t| t.group.clone()).collect();
    let design = Design::covariates(&model.spec, frame, &groups)?;
    if design.terms.len() != model.terms.len() {
        return Err(Error::Spec("data does not match the fitted terms".into()));
    }
    let n = design.n;
    let mut clamped = 0;
    let mut contributions = Vec::with_capacity(model.terms.len());
    let mut per_term = Array2::zeros((n, model.terms.len()));
    for (j, (td, ft)) in design.terms.iter().zip(&model.terms).enumerate() {
        if td.z.ncols() != ft.alpha.len() {
            return Err(Error::DimensionMismatch(format!(
                "term `{}` expects {} covariates",
                ft.name,
                ft.alpha.len()
            )));
        }
        let u = td.z.dot(&ft.alpha);
        let (raw, c) = eval_basis_clamped(&ft.knots, u.view());
        clamped += c;
        let basis = apply_centering(raw.view(), ft.col_means.view());
        let f = basis.dot(&model.gamma(j));
        let mut col = Array1::zeros(n);
        add_term(&mut col, td.rows.as_deref(), &f);
        per_term.column_mut(j).assign(&col);
        contributions.push(f);
    }
    let eta = compose_eta(&design, model.beta(), &contributions);
    let mu = design.family.means(eta.view()).0;
    Ok(Prediction {
        eta,
        mu,
        terms: per_term,
        clamped,
    })
}

/// Mean of each fitted centered curve over its construction sample.
pub fn term_means(model: &FittedModel, design: &Design) -> Result<Vec<f64>> {
    let knots: Vec<KnotVector> = model.terms.iter().map(|t| t.knots.clone()).collect();
    let st = evaluate(design, &model.layout, model.psi.clone(), Knots::Fixed(&knots))?;
    Ok(st.terms.iter().map(|t| t.f.mean_axis(Axis(0)).map_or(0.0, |m| m.into_scalar())).collect())
}
