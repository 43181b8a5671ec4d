//! Difference penalties on the reparameterized spline coefficients and the
//! block penalty over the full coefficient vector.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::CoefficientLayout;

/// Eigenvalues below this fraction of the largest are treated as null.
pub const PINV_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermPenalty {
    pub dif_order: usize,
    /// Difference matrix with the last column dropped.
    pub d_tilde: Array2<f64>,
    /// `D̃ᵀD̃`.
    pub p_tilde: Array2<f64>,
    p_pinv: Array2<f64>,
    rank: usize,
}

impl TermPenalty {
    pub fn q(&self) -> usize {
        self.p_tilde.nrows()
    }

    /// Moore–Penrose pseudo-inverse of `P̃`.
    pub fn pseudo_inverse(&self) -> &Array2<f64> {
        &self.p_pinv
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn quadratic(&self, gamma: ArrayView1<f64>) -> f64 {
        gamma.dot(&self.p_tilde.dot(&gamma))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Order-`dif` difference penalty for `q` centered coefficients: the
/// `(q+1-dif) × (q+1)` difference matrix with its last column removed.
pub fn difference_penalty(q: usize, dif: usize) -> Result<TermPenalty> {
    if dif == 0 || dif >= q {
        return Err(Error::InvalidDifference { q, dif });
    }
    let rows = q + 1 - dif;
    let mut d = Array2::<f64>::zeros((rows, q));
    for r in 0..rows {
        for k in 0..=dif {
            let col = r + k;
            if col < q {
                let sign = if (dif - k).is_multiple_of(2) { 1.0 } else { -1.0 };
                d[[r, col]] = sign * binomial(dif, k);
            }
        }
    }
    let p = d.t().dot(&d);
    let (p_pinv, rank) = symmetric_pinv(&p);
    Ok(TermPenalty {
        dif_order: dif,
        d_tilde: d,
        p_tilde: p,
        p_pinv,
        rank,
    })
}

/// Pseudo-inverse and numerical rank of a symmetric PSD matrix via its
/// eigendecomposition.
pub fn symmetric_pinv(a: &Array2<f64>) -> (Array2<f64>, usize) {
    let n = a.nrows();
    if n == 0 {
        return (Array2::zeros((0, 0)), 0);
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut out = Array2::<f64>::zeros((n, n));
    if max == 0.0 {
        return (out, 0);
    }
    let mut rank = 0;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= PINV_REL_TOL * max {
            continue;
        }
        rank += 1;
        let v = eig.eigenvectors.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += v[i] * v[j] / ev;
            }
        }
    }
    (out, rank)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyBlock {
    pub term: usize,
    pub offset: usize,
    pub penalty: TermPenalty,
}

/// `P_λ = Σ λ_j P^j`, stored as one block per smooth term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPenalty {
    pub dim: usize,
    pub blocks: Vec<PenaltyBlock>,
    pub lambdas: Vec<f64>,
}

/// Places each term penalty at its `γ̃` offset in the layout.
pub fn assemble_penalty(
    layout: &CoefficientLayout,
    terms: &[TermPenalty],
    lambdas: &[f64],
) -> Result<BlockPenalty> {
    if terms.len() != layout.terms.len() || lambdas.len() != terms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} layout terms, {} penalties, {} smoothing parameters",
            layout.terms.len(),
            terms.len(),
            lambdas.len()
        )));
    }
    let blocks = terms
        .iter()
        .zip(&layout.terms)
        .enumerate()
        .map(|(j, (pen, tl))| {
            if pen.q() != tl.gamma.len() {
                return Err(Error::DimensionMismatch(format!(
                    "term {j}: penalty is {q}x{q} but the layout reserves {} coefficients",
                    tl.gamma.len(),
                    q = pen.q()
                )));
            }
            Ok(PenaltyBlock {
                term: j,
                offset: tl.gamma.start,
                penalty: pen.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bp = BlockPenalty {
        dim: layout.dim,
        blocks,
        lambdas: Vec::new(),
    };
    bp.set_lambdas(lambdas)?;
    Ok(bp)
}

impl BlockPenalty {
    pub fn set_lambdas(&mut self, lambdas: &[f64]) -> Result<()> {
        if lambdas.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} smoothing parameters for {} penalty blocks",
                lambdas.len(),
                self.blocks.len()
            )));
        }
        for (index, &value) in lambdas.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveLambda { index, value });
            }
        }
        self.lambdas = lambdas.to_vec();
        Ok(())
    }

    /// Dense `P_λ` scaled by `scale`.
    pub fn dense_scaled(&self, scale: f64) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.dim, self.dim));
        for (b, &lam) in self.blocks.iter().zip(&self.lambdas) {
            let p = &b.penalty.p_tilde;
            let q = p.nrows();
            for i in 0..q {
                for j in 0..q {
                    out[[b.offset + i, b.offset + j]] += scale * lam * p[[i, j]];
                }
            }
        }
        out
    }

    pub fn dense(&self) -> Array2<f64> {
        self.dense_scaled(1.0)
    }

    /// Unscaled `P^j` as a dense `dim × dim` matrix.
    pub fn dense_term(&self, j: usize) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.dim, self.dim));
        let b = &self.blocks[j];
        let q = b.penalty.q();
        for i in 0..q {
            for k in 0..q {
                out[[b.offset + i, b.offset + k]] = b.penalty.p_tilde[[i, k]];
            }
        }
        out
    }

    pub fn gamma<'a>(&self, j: usize, psi: ArrayView1<'a, f64>) -> ArrayView1<'a, f64> {
        let b = &self.blocks[j];
        psi.slice_move(ndarray::s![b.offset..b.offset + b.penalty.q()])
    }

    /// `γ̃ʲᵀ P̃ʲ γ̃ʲ` (unscaled).
    pub fn term_quadratic(&self, j: usize, psi: ArrayView1<f64>) -> f64 {
        self.blocks[j].penalty.quadratic(self.gamma(j, psi))
    }

    /// `ψᵀ P_λ ψ`.
    pub fn quadratic_form(&self, psi: ArrayView1<f64>) -> f64 {
        (0..self.blocks.len())
            .map(|j| self.lambdas[j] * self.term_quadratic(j, psi))
            .sum()
    }

    /// `P_λ ψ`.
    pub fn apply(&self, psi: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(self.dim);
        for (j, b) in self.blocks.iter().enumerate() {
            let g = self.gamma(j, psi);
            let pg = b.penalty.p_tilde.dot(&g) * self.lambdas[j];
            for (i, v) in pg.iter().enumerate() {
                out[b.offset + i] += v;
            }
        }
        out
    }

    /// `tr{P_λ⁻ P^j}` using the block pseudo-inverse.
    pub fn pinv_trace(&self, j: usize) -> f64 {
        let b = &self.blocks[j];
        let pinv = b.penalty.pseudo_inverse();
        let p = &b.penalty.p_tilde;
        let tr: f64 = (pinv * &p.t()).sum();
        tr / self.lambdas[j]
    }

    /// `tr{A P^j}` for a dense symmetric `dim × dim` matrix `A`.
    pub fn trace_with(&self, a: &Array2<f64>, j: usize) -> f64 {
        let b = &self.blocks[j];
        let q = b.penalty.q();
        let mut tr = 0.0;
        for i in 0..q {
            for k in 0..q {
                tr += a[[b.offset + i, b.offset + k]] * b.penalty.p_tilde[[k, i]];
            }
        }
        tr
    }
}

/// Blockwise Moore–Penrose pseudo-inverse of `P_λ`.
pub fn penalty_pseudo_inverse(p: &BlockPenalty) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((p.dim, p.dim));
    for (b, &lam) in p.blocks.iter().zip(&p.lambdas) {
        let pinv = b.penalty.pseudo_inverse();
        let q = pinv.nrows();
        for i in 0..q {
            for k in 0..q {
                out[[b.offset + i, b.offset + k]] = pinv[[i, k]] / lam;
            }
        }
    }
    out
}
