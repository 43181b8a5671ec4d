//! Effective degrees of freedom, coefficient tests and pointwise bands.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::fit::{evaluate, FittedModel, Knots};
use crate::layout::CoefficientLayout;
use crate::model::Design;
use crate::numkernel::weighted_crossprod;

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub gamma: f64,
    pub alpha: f64,
}

impl TermEdf {
    pub fn total(&self) -> f64 {
        self.gamma + self.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edf {
    pub total: f64,
    pub per_coefficient: Array1<f64>,
    pub beta: f64,
    pub terms: Vec<TermEdf>,
}

/// `tr{cp(B) cp(M̃)}` with `M̃ = W^{1/2} M`, split by layout block.
pub fn edf(b: &Array2<f64>, m: ArrayView2<f64>, w: ArrayView1<f64>, layout: &CoefficientLayout) -> Edf {
    let cov = b.t().dot(b);
    edf_from_crossprod(&cov, &weighted_crossprod(m, w), layout)
}

/// Same as [`edf`] from `cp(B)` and `cp(M̃)` directly.
pub fn edf_from_crossprod(cov: &Array2<f64>, cp: &Array2<f64>, layout: &CoefficientLayout) -> Edf {
    let d = cov.nrows();
    let per: Array1<f64> = (0..d).map(|k| cov.row(k).dot(&cp.column(k))).collect();
    let sum = |r: &Range<usize>| per.slice(s![r.clone()]).sum();
    Edf {
        total: per.sum(),
        beta: sum(&layout.beta),
        terms: layout
            .terms
            .iter()
            .map(|t| TermEdf {
                gamma: sum(&t.gamma),
                alpha: sum(&t.alpha),
            })
            .collect(),
        per_coefficient: per,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Standard errors `√(φ⁻¹ diag cp(B))` for the linear and index
/// coefficients.
pub fn coef_table(model: &FittedModel) -> Vec<CoefRow> {
    let mut idx: Vec<usize> = model.layout.beta.clone().collect();
    for t in &model.layout.terms {
        idx.extend(t.alpha.clone());
    }
    idx.into_iter()
        .map(|k| {
            let col = model.b.column(k);
            let se = (col.dot(&col) / model.phi).sqrt();
            let est = model.psi[k];
            let z = est / se;
            CoefRow {
                name: model.coefficient_names[k].clone(),
                estimate: est,
                se,
                z,
                p: normal_p_value(z),
            }
        })
        .collect()
}

/// Area under the ROC curve of `score` for binary `y`, ties counted half.
pub fn auc(y: ArrayView1<f64>, score: ArrayView1<f64>) -> f64 {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| y[idx[k]] > 0.5).count() as f64 * mid;
        i = j + 1;
    }
    let pos = y.iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = y.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// `1.96 √(φ⁻¹ rowSums((X Bᵀ_block)∘²))` for rows `X = [Ñ, T̃]`.
pub fn band_half_width(x: ArrayView2<f64>, b: &Array2<f64>, block: Range<usize>, phi: f64) -> Array1<f64> {
    let bb = b.slice(s![.., block]);
    let g = x.dot(&bb.t());
    g.rows()
        .into_iter()
        .map(|r| Z95 * (r.dot(&r) / phi).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub u: Array1<f64>,
    pub fhat: Array1<f64>,
    pub half_width: Array1<f64>,
}

impl Band {
    pub fn lower(&self) -> Array1<f64> {
        &self.fhat - &self.half_width
    }

    pub fn upper(&self) -> Array1<f64> {
        &self.fhat + &self.half_width
    }

    /// Linear interpolation onto `grid`, which must lie inside the
    /// observed index range.
    pub fn interpolate(&self, grid: &[f64]) -> Result<Band> {
        let n = self.u.len();
        let (lo, hi) = (self.u[0], self.u[n - 1]);
        let mut fhat = Array1::zeros(grid.len());
        let mut half = Array1::zeros(grid.len());
        for (g, &x) in grid.iter().enumerate() {
            if !(x >= lo && x <= hi) {
                return Err(Error::OutOfSpan {
                    index: g,
                    value: x,
                    lower: lo,
                    upper: hi,
                });
            }
            let k = self.u.as_slice().unwrap().partition_point(|&v| v < x).clamp(1, n - 1);
            let (u0, u1) = (self.u[k - 1], self.u[k]);
            let t = if u1 > u0 { (x - u0) / (u1 - u0) } else { 0.0 };
            fhat[g] = self.fhat[k - 1] + t * (self.fhat[k] - self.fhat[k - 1]);
            half[g] = self.half_width[k - 1] + t * (self.half_width[k] - self.half_width[k - 1]);
        }
        Ok(Band {
            u: Array1::from(grid.to_vec()),
            fhat,
            half_width: half,
        })
    }
}

/// Pointwise band of term `j` at the observed index values of the
/// training design, sorted by index value.
pub fn confidence_band(model: &FittedModel, design: &Design, j: usize) -> Result<Band> {
    if j >= model.terms.len() {
        return Err(Error::Spec(format!("no smooth term {j}")));
    }
    let knots: Vec<_> = model.terms.iter().map(|t| t.knots.clone()).collect();
    let state = evaluate(design, &model.layout, model.psi.clone(), Knots::Fixed(&knots))?;
    let ts = &state.terms[j];
    let q = ts.block.centered_dim;
    let s = ts.t.ncols();
    let mut x = Array2::zeros((ts.u.len(), q + s));
    x.slice_mut(s![.., ..q]).assign(&ts.block.basis);
    x.slice_mut(s![.., q..]).assign(&ts.t);
    let half = band_half_width(x.view(), &model.b, model.layout.terms[j].block(), model.phi);
    let mut order: Vec<usize> = (0..ts.u.len()).collect();
    order.sort_by(|&a, &b| ts.u[a].total_cmp(&ts.u[b]));
    Ok(Band {
        u: order.iter().map(|&i| ts.u[i]).collect(),
        fhat: order.iter().map(|&i| ts.f[i]).collect(),
        half_width: order.iter().map(|&i| half[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{cholesky, inverse_factor};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn hadamard_path_equals_sandwich_diagonal() {
        let mut seed = 9;
        let d = 12;
        let r = Array2::from_shape_fn((d + 4, d), |_| lcg(&mut seed));
        let a = r.t().dot(&r) + Array2::<f64>::eye(d) * 0.1;
        let b = inverse_factor(&cholesky(&a).unwrap());
        let x = Array2::from_shape_fn((30, 5), |_| lcg(&mut seed));
        let phi = 2.5;
        let got = band_half_width(x.view(), &b, 3..8, phi);
        let cov = b.t().dot(&b);
        let blk = cov.slice(s![3..8, 3..8]);
        let sandwich = x.dot(&blk).dot(&x.t());
        for i in 0..30 {
            let want = Z95 * (sandwich[[i, i]] / phi).sqrt();
            assert!((got[i] - want).abs() <= 1e-10 * want);
        }
        let zero = Array2::<f64>::zeros((d, d));
        assert!(band_half_width(x.view(), &zero, 3..8, phi).iter().all(|v| *v == 0.0));
        let wider = band_half_width(x.view(), &b, 3..8, phi / 4.0);
        for (a, b) in wider.iter().zip(got.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn edf_matches_explicit_inverse() {
        let mut seed = 4;
        let (n, d) = (40, 6);
        let m = Array2::from_shape_fn((n, d), |_| lcg(&mut seed));
        let w = Array1::from_iter((0..n).map(|i| 0.5 + (i % 3) as f64));
        let c = weighted_crossprod(m.view(), w.view());
        let mut p = Array2::<f64>::zeros((d, d));
        for i in 2..6 {
            p[[i, i]] = 2.0;
        }
        let a = &c + &p;
        let b = inverse_factor(&cholesky(&a).unwrap());
        let layout = CoefficientLayout::new(2, &[(3, 1)]);
        let e = edf(&b, m.view(), w.view(), &layout);
        let na = nalgebra::DMatrix::from_fn(d, d, |i, j| a[[i, j]]).try_inverse().unwrap();
        let nc = nalgebra::DMatrix::from_fn(d, d, |i, j| c[[i, j]]);
        let want = (na * nc).trace();
        assert!((e.total - want).abs() < 1e-8);
        let parts = e.beta + e.terms.iter().map(TermEdf::total).sum::<f64>();
        assert!((parts - e.total).abs() < 1e-10);
        // unpenalized coefficient at position 5 has edf one
        let mut p2 = p.clone();
        p2[[5, 5]] = 0.0;
        let b2 = inverse_factor(&cholesky(&(&c + &p2)).unwrap());
        let e2 = edf(&b2, m.view(), w.view(), &layout);
        assert!((e2.terms[0].alpha - 1.0).abs() < 1e-10);
    }

    #[test]
    fn auc_against_pair_count() {
        let y = Array1::from(vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let sc = Array1::from(vec![0.1, 0.8, 0.4, 0.4, 0.9, 0.2]);
        let mut num = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if y[i] == 1.0 && y[j] == 0.0 {
                    num += if sc[i] > sc[j] { 1.0 } else if sc[i] == sc[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert_eq!(auc(y.view(), sc.view()), num / 9.0);
        assert_eq!(auc(y.view(), y.view()), 1.0);
    }

    #[test]
    fn p_values() {
        let p = normal_p_value(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-10, "{p}");
        assert_eq!(normal_p_value(0.0), 1.0);
        assert!(normal_p_value(40.0) >= 0.0);
    }

    #[test]
    fn interpolation_hits_nodes_and_rejects_outside() {
        let band = Band {
            u: Array1::from(vec![0.0, 1.0, 3.0]),
            fhat: Array1::from(vec![1.0, 2.0, 0.0]),
            half_width: Array1::from(vec![0.5, 0.5, 1.5]),
        };
        let g = band.interpolate(&[0.0, 0.5, 2.0, 3.0]).unwrap();
        assert_eq!(g.fhat.to_vec(), vec![1.0, 1.5, 1.0, 0.0]);
        assert_eq!(g.half_width.to_vec(), vec![0.5, 0.5, 1.0, 1.5]);
        assert!(band.interpolate(&[3.5]).is_err());
        assert!(g.lower().iter().zip(g.upper().iter()).all(|(l, u)| l < u));
    }
}
