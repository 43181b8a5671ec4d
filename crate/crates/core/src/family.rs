//! Exponential-family response distributions and link functions.
//!
//! `phi` is a precision throughout: the gaussian variance is `1/phi` and
//! the gamma shape is `phi`. Poisson and bernoulli have `phi = 1`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Gamma as GammaDist, Normal, Poisson as PoissonDist};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower guard for means under a log link and for bernoulli means.
pub const MEAN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Gaussian,
    Poisson,
    Gamma,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
    Inverse,
    Probit,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Poisson => "poisson",
            Self::Gamma => "gamma",
            Self::Bernoulli => "bernoulli",
        }
    }

    pub fn canonical_link(self) -> Link {
        match self {
            Self::Gaussian => Link::Identity,
            Self::Poisson => Link::Log,
            Self::Gamma => Link::Inverse,
            Self::Bernoulli => Link::Logit,
        }
    }

    /// Whether `phi` is estimated rather than fixed at one.
    pub fn has_dispersion(self) -> bool {
        matches!(self, Self::Gaussian | Self::Gamma)
    }

    fn allows(self, link: Link) -> bool {
        use Link::*;
        match self {
            Self::Gaussian => matches!(link, Identity | Log | Inverse),
            Self::Poisson => matches!(link, Log | Identity),
            Self::Gamma => matches!(link, Inverse | Log | Identity),
            Self::Bernoulli => matches!(link, Logit | Probit),
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Self::Gaussian => 1.0,
            Self::Poisson => mu,
            Self::Gamma => mu * mu,
            Self::Bernoulli => mu * (1.0 - mu),
        }
    }

    fn mean_is_valid(self, mu: f64) -> bool {
        if !mu.is_finite() {
            return false;
        }
        match self {
            Self::Gaussian => true,
            Self::Poisson | Self::Gamma => mu > 0.0,
            Self::Bernoulli => mu > 0.0 && mu < 1.0,
        }
    }

    pub fn response_is_valid(self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            Self::Gaussian => true,
            Self::Poisson => y >= 0.0 && y.fract() == 0.0,
            Self::Gamma => y > 0.0,
            Self::Bernoulli => y == 0.0 || y == 1.0,
        }
    }
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Log => "log",
            Self::Logit => "logit",
            Self::Inverse => "inverse",
            Self::Probit => "probit",
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Self::Identity => mu,
            Self::Log => mu.ln(),
            Self::Logit => (mu / (1.0 - mu)).ln(),
            Self::Inverse => 1.0 / mu,
            Self::Probit => std_normal().inverse_cdf(mu),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Self::Identity => eta,
            Self::Log => eta.exp(),
            Self::Logit => 1.0 / (1.0 + (-eta).exp()),
            Self::Inverse => 1.0 / eta,
            Self::Probit => std_normal().cdf(eta),
        }
    }

    /// `g′(μ)`.
    pub fn deriv(self, mu: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Log => 1.0 / mu,
            Self::Logit => 1.0 / (mu * (1.0 - mu)),
            Self::Inverse => -1.0 / (mu * mu),
            Self::Probit => {
                let z = std_normal().inverse_cdf(mu);
                1.0 / normal_pdf(z)
            }
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub distribution: Distribution,
    pub link: Link,
}

impl Family {
    pub fn new(distribution: Distribution, link: Link) -> Result<Self> {
        if !distribution.allows(link) {
            return Err(Error::Spec(format!(
                "the {} link is not supported for the {} family",
                link.name(),
                distribution.name()
            )));
        }
        Ok(Self { distribution, link })
    }

    pub fn canonical(distribution: Distribution) -> Self {
        Self {
            distribution,
            link: distribution.canonical_link(),
        }
    }

    pub fn gaussian() -> Self {
        Self::canonical(Distribution::Gaussian)
    }

    pub fn poisson() -> Self {
        Self::canonical(Distribution::Poisson)
    }

    pub fn bernoulli() -> Self {
        Self::canonical(Distribution::Bernoulli)
    }

    pub fn gamma_log() -> Self {
        Self {
            distribution: Distribution::Gamma,
            link: Link::Log,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.link == self.distribution.canonical_link()
    }

    /// Mean for a linear predictor, pushed away from the edges of the mean
    /// domain. The flag reports whether the guard was applied.
    pub fn mean(&self, eta: f64) -> (f64, bool) {
        let mu = self.link.inverse(eta);
        match (self.distribution, self.link) {
            (Distribution::Bernoulli, _) => {
                let c = mu.clamp(MEAN_FLOOR, 1.0 - MEAN_FLOOR);
                (c, c != mu)
            }
            (_, Link::Log) if mu < MEAN_FLOOR => (MEAN_FLOOR, true),
            _ => (mu, false),
        }
    }

    pub fn means(&self, eta: ArrayView1<f64>) -> (Array1<f64>, usize) {
        let mut guarded = 0;
        let mu = eta.mapv(|e| {
            let (m, g) = self.mean(e);
            guarded += g as usize;
            m
        });
        (mu, guarded)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.distribution.name(), self.link.name())
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "poisson" => Ok(Self::Poisson),
            "gamma" => Ok(Self::Gamma),
            "bernoulli" | "binomial" => Ok(Self::Bernoulli),
            other => Err(Error::Spec(format!(
                "unknown family `{other}` (expected gaussian, poisson, gamma or bernoulli)"
            ))),
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "log" => Ok(Self::Log),
            "logit" => Ok(Self::Logit),
            "inverse" => Ok(Self::Inverse),
            "probit" => Ok(Self::Probit),
            other => Err(Error::Spec(format!(
                "unknown link `{other}` (expected identity, log, logit, inverse or probit)"
            ))),
        }
    }
}

/// Working weights `ω = 1/(g′(μ)² V)` and variances `V(μ)`.
pub fn weights_and_variance(mu: ArrayView1<f64>, family: &Family) -> Result<(Array1<f64>, Array1<f64>)> {
    let dist = family.distribution;
    let mut w = Array1::zeros(mu.len());
    let mut v = Array1::zeros(mu.len());
    for (i, &m) in mu.iter().enumerate() {
        if !dist.mean_is_valid(m) {
            return Err(Error::InvalidMean {
                index: i,
                value: m,
                family: dist.name(),
            });
        }
        let vi = dist.variance(m);
        let g = family.link.deriv(m);
        let wi = 1.0 / (g * g * vi);
        if !(vi > 0.0) || !wi.is_finite() || !(wi > 0.0) {
            return Err(Error::InvalidMean {
                index: i,
                value: m,
                family: dist.name(),
            });
        }
        w[i] = wi;
        v[i] = vi;
    }
    Ok((w, v))
}

/// `ỹ = Mψ + W^{-1/2} V^{-1/2} (y − μ)`.
pub fn working_response(
    m_psi: ArrayView1<f64>,
    y: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    w: ArrayView1<f64>,
    v: ArrayView1<f64>,
) -> Array1<f64> {
    let mut out = m_psi.to_owned();
    Zip::from(&mut out)
        .and(y)
        .and(mu)
        .and(w)
        .and(v)
        .for_each(|o, &y, &m, &w, &v| *o += (y - m) / (w * v).sqrt());
    out
}

/// Log-likelihood including the normalizing terms.
pub fn loglik(y: ArrayView1<f64>, mu: ArrayView1<f64>, phi: f64, family: &Family) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let lg_phi = ln_gamma(phi);
    let mut total = 0.0;
    for (&y, &m) in y.iter().zip(mu.iter()) {
        total += match family.distribution {
            Distribution::Gaussian => -0.5 * phi * (y - m) * (y - m) + 0.5 * (phi.ln() - ln2pi),
            Distribution::Poisson => {
                let ly = if y > 0.0 { y * m.ln() } else { 0.0 };
                ly - m - ln_factorial(y)
            }
            Distribution::Gamma => {
                phi * (phi * y / m).ln() - phi * y / m - y.ln() - lg_phi
            }
            Distribution::Bernoulli => {
                if y > 0.5 {
                    m.ln()
                } else {
                    (1.0 - m).ln()
                }
            }
        };
    }
    total
}

fn ln_factorial(y: f64) -> f64 {
    if y < 30.0 {
        (2..=y as u64).map(|k| (k as f64).ln()).sum()
    } else {
        ln_gamma(y + 1.0)
    }
}

/// `L − ½ψᵀP_λψ`, with the quadratic form supplied by the caller.
pub fn penalized_loglik(
    y: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    phi: f64,
    penalty_quadratic: f64,
    family: &Family,
) -> f64 {
    loglik(y, mu, phi, family) - 0.5 * penalty_quadratic
}

/// Pearson-type precision `(n − edf) / Σ (y−μ)²/V`; one for families
/// without dispersion.
pub fn update_phi(
    y: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    v: ArrayView1<f64>,
    edf: f64,
    family: &Family,
) -> Result<f64> {
    if !family.distribution.has_dispersion() {
        return Ok(1.0);
    }
    let n = y.len() as f64;
    if !(edf < n) {
        return Err(Error::DegenerateFit(format!(
            "effective degrees of freedom {edf:.3} reach the sample size {n}"
        )));
    }
    let mut pearson = 0.0;
    Zip::from(y).and(mu).and(v).for_each(|&y, &m, &v| pearson += (y - m) * (y - m) / v);
    if !(pearson > 0.0) || !pearson.is_finite() {
        return Err(Error::DegenerateFit(format!("Pearson statistic is {pearson}")));
    }
    Ok((n - edf) / pearson)
}

/// Response distribution function `F(y; μ, φ)`.
pub fn cdf(y: f64, mu: f64, phi: f64, family: &Family) -> f64 {
    match family.distribution {
        Distribution::Gaussian => std_normal().cdf((y - mu) * phi.sqrt()),
        Distribution::Poisson => {
            if y < 0.0 {
                0.0
            } else {
                PoissonDist::new(mu).map(|d| d.cdf(y as u64)).unwrap_or(f64::NAN)
            }
        }
        Distribution::Gamma => GammaDist::new(phi, phi / mu).map(|d| d.cdf(y)).unwrap_or(f64::NAN),
        Distribution::Bernoulli => {
            if y < 0.0 {
                0.0
            } else if y < 1.0 {
                1.0 - mu
            } else {
                1.0
            }
        }
    }
}

/// Randomized quantile residuals, `replicates` columns. Continuous
/// families give the same column every time.
pub fn quantile_residuals<R: Rng + ?Sized>(
    y: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    phi: f64,
    family: &Family,
    rng: &mut R,
    replicates: usize,
) -> Array2<f64> {
    let n = y.len();
    let normal = std_normal();
    let mut out = Array2::zeros((n, replicates));
    let discrete = matches!(family.distribution, Distribution::Poisson | Distribution::Bernoulli);
    let bounds: Vec<(f64, f64)> = y
        .iter()
        .zip(mu.iter())
        .map(|(&y, &m)| {
            if discrete {
                (cdf(y - 1.0, m, phi, family), cdf(y, m, phi, family))
            } else {
                let f = cdf(y, m, phi, family);
                (f, f)
            }
        })
        .collect();
    for r in 0..replicates {
        for (i, &(a, b)) in bounds.iter().enumerate() {
            let u = if discrete {
                a + (b - a) * rng.random::<f64>()
            } else {
                a
            };
            let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            out[[i, r]] = if family.distribution == Distribution::Gaussian {
                (y[i] - mu[i]) * phi.sqrt()
            } else {
                normal.inverse_cdf(u)
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution as _, Poisson as PoissonSampler};

    fn all() -> Vec<Family> {
        use Distribution::*;
        use Link::*;
        vec![
            Family::new(Gaussian, Identity).unwrap(),
            Family::new(Poisson, Log).unwrap(),
            Family::new(Gamma, Inverse).unwrap(),
            Family::new(Gamma, Log).unwrap(),
            Family::new(Bernoulli, Logit).unwrap(),
            Family::new(Bernoulli, Probit).unwrap(),
        ]
    }

    #[test]
    fn hand_weights() {
        let (w, v) = weights_and_variance(array![2.0].view(), &Family::poisson()).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-15 && v[0] == 2.0);
        let (w, v) = weights_and_variance(array![0.5].view(), &Family::bernoulli()).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && v[0] == 0.25);
        let (w, v) = weights_and_variance(array![3.0].view(), &Family::gamma_log()).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15 && v[0] == 9.0);
        let err = weights_and_variance(array![1.0, 0.0].view(), &Family::poisson()).unwrap_err();
        assert!(matches!(err, Error::InvalidMean { index: 1, .. }));
    }

    #[test]
    fn canonical_links_collapse_weights_to_variance() {
        for fam in all().into_iter().filter(|f| f.is_canonical()) {
            let mu = match fam.distribution {
                Distribution::Bernoulli => array![0.1, 0.5, 0.93],
                _ => array![0.2, 1.0, 7.5],
            };
            let (w, v) = weights_and_variance(mu.view(), &fam).unwrap();
            let max = v.iter().fold(0.0f64, |a, b| a.max(*b));
            for (a, b) in w.iter().zip(v.iter()) {
                assert!((a - b).abs() <= 1e-12 * max, "{fam}");
            }
        }
    }

    #[test]
    fn link_derivatives_match_finite_differences() {
        for fam in all() {
            let mu = if fam.distribution == Distribution::Bernoulli { 0.3 } else { 1.7 };
            let h = 1e-6;
            let fd = (fam.link.link(mu + h) - fam.link.link(mu - h)) / (2.0 * h);
            assert!((fd - fam.link.deriv(mu)).abs() < 1e-6 * fd.abs(), "{fam}");
            assert!((fam.link.inverse(fam.link.link(mu)) - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn working_response_cases() {
        let mpsi = array![1.5, -2.0];
        let y = array![3.0, 4.0];
        let (w, v) = weights_and_variance(y.view(), &Family::poisson()).unwrap();
        assert_eq!(working_response(mpsi.view(), y.view(), y.view(), w.view(), v.view()), mpsi);
        let mu = array![4.0];
        let (w, v) = weights_and_variance(mu.view(), &Family::poisson()).unwrap();
        let z = working_response(array![0.0].view(), array![6.0].view(), mu.view(), w.view(), v.view());
        assert!((z[0] - 0.5).abs() < 1e-15);
        let mu = array![0.3, -1.2];
        let (w, v) = weights_and_variance(mu.view(), &Family::gaussian()).unwrap();
        let y = array![2.0, 5.0];
        assert_eq!(working_response(mu.view(), y.view(), mu.view(), w.view(), v.view()), y);
    }

    #[test]
    fn loglik_against_densities() {
        let fam = Family::poisson();
        assert_eq!(loglik(array![0.0].view(), array![1.0].view(), 1.0, &fam), -1.0);
        assert_eq!(penalized_loglik(array![0.0].view(), array![1.0].view(), 1.0, 3.0, &fam), -2.5);
        let l = loglik(array![3.0].view(), array![2.0].view(), 1.0, &fam);
        assert!((l - (8.0f64 * (-2.0f64).exp() / 6.0).ln()).abs() < 1e-12);
        // gaussian with variance 1/phi
        let l = loglik(array![1.0].view(), array![0.2].view(), 4.0, &Family::gaussian());
        let sd = 0.5f64;
        let dens = (-(0.8f64 * 0.8) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        assert!((l - dens.ln()).abs() < 1e-12);
        // gamma with shape phi and mean mu
        let (y, mu, k) = (2.5f64, 1.5f64, 9.0f64);
        let theta = mu / k;
        let dens = y.powf(k - 1.0) * (-y / theta).exp() / (statrs::function::gamma::gamma(k) * theta.powf(k));
        let l = loglik(array![y].view(), array![mu].view(), k, &Family::gamma_log());
        assert!((l - dens.ln()).abs() < 1e-10);
        let l = loglik(array![1.0, 0.0].view(), array![0.8, 0.3].view(), 1.0, &Family::bernoulli());
        assert!((l - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn phi_update_cases() {
        let y = Array1::from_iter((0..12).map(|i| i as f64));
        let mu = y.clone();
        let v = Array1::ones(12);
        assert_eq!(update_phi(y.view(), mu.view(), v.view(), 3.0, &Family::poisson()).unwrap(), 1.0);
        let mut y2 = mu.clone();
        y2[0] += 10f64.sqrt();
        let phi = update_phi(y2.view(), mu.view(), v.view(), 2.0, &Family::gaussian()).unwrap();
        assert!((phi - 1.0).abs() < 1e-12);
        assert!(update_phi(y.view(), mu.view(), v.view(), 2.0, &Family::gaussian()).is_err());
    }

    #[test]
    fn mean_guards() {
        let (m, g) = Family::bernoulli().mean(50.0);
        assert!(g && m == 1.0 - MEAN_FLOOR);
        let (m, g) = Family::poisson().mean(-800.0);
        assert!(g && m == MEAN_FLOOR);
        let (m, g) = Family::gaussian().mean(-800.0);
        assert!(!g && m == -800.0);
    }

    #[test]
    fn residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = quantile_residuals(array![0.0].view(), array![0.5].view(), 1.0, &Family::bernoulli(), &mut rng, 200);
        assert!(r.iter().all(|v| *v <= 0.0 && v.is_finite()));
        let r = quantile_residuals(array![1.0, 3.0].view(), array![0.5, 1.0].view(), 4.0, &Family::gaussian(), &mut rng, 3);
        assert_eq!(r.row(0).to_vec(), vec![1.0; 3]);
        assert_eq!(r.row(1).to_vec(), vec![4.0; 3]);
        let r = quantile_residuals(array![1.0].view(), array![1.0 - MEAN_FLOOR].view(), 1.0, &Family::bernoulli(), &mut rng, 50);
        assert!(r.iter().all(|v| v.is_finite()));
    }

    fn ks_pvalue(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let normal = std_normal();
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        let lam = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let p: f64 = (1..100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lam * lam).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn residuals_are_normal_under_the_true_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 2000;
        let mu = Array1::from_iter((0..n).map(|i| 0.5 + 6.0 * (i as f64 / n as f64)));
        let y = mu.mapv(|m| PoissonSampler::new(m).unwrap().sample(&mut rng));
        let r = quantile_residuals(y.view(), mu.view(), 1.0, &Family::poisson(), &mut rng, 1);
        assert!(ks_pvalue(r.column(0).to_vec()) > 0.01);

        let mu = Array1::from_iter((0..n).map(|i| 0.1 + 0.8 * (i as f64 / n as f64)));
        let y = mu.mapv(|m| (rng.random::<f64>() < m) as u8 as f64);
        let r = quantile_residuals(y.view(), mu.view(), 1.0, &Family::bernoulli(), &mut rng, 1);
        assert!(ks_pvalue(r.column(0).to_vec()) > 0.01);

        let mu = Array1::from_iter((0..n).map(|i| 1.0 + (i as f64 / n as f64)));
        let y = mu.mapv(|m| rand_distr::Gamma::new(9.0, m / 9.0).unwrap().sample(&mut rng));
        let r = quantile_residuals(y.view(), mu.view(), 9.0, &Family::gamma_log(), &mut rng, 1);
        assert!(ks_pvalue(r.column(0).to_vec()) > 0.01);
    }
}
