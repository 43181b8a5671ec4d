//! Dense symmetric kernels: weighted cross-products, an upper Cholesky
//! factor `LᵀL = A`, the two triangular solves and the inverse factor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// `Mᵀ diag(w) M`, accumulated over rows in a fixed order into the upper
/// triangle and mirrored.
pub fn weighted_crossprod(m: ArrayView2<f64>, w: ArrayView1<f64>) -> Array2<f64> {
    let d = m.ncols();
    let mut out = Array2::<f64>::zeros((d, d));
    let mut row = vec![0.0; d];
    for (r, &wi) in m.rows().into_iter().zip(w.iter()) {
        if wi == 0.0 {
            continue;
        }
        let sw = wi.sqrt();
        for (dst, &v) in row.iter_mut().zip(r.iter()) {
            *dst = v * sw;
        }
        accumulate_upper(&mut out, &row);
    }
    mirror_upper(&mut out);
    out
}

/// `MᵀM` for an already weighted matrix.
pub fn crossprod(m: ArrayView2<f64>) -> Array2<f64> {
    let d = m.ncols();
    let mut out = Array2::<f64>::zeros((d, d));
    let mut row = vec![0.0; d];
    for r in m.rows() {
        for (dst, &v) in row.iter_mut().zip(r.iter()) {
            *dst = v;
        }
        accumulate_upper(&mut out, &row);
    }
    mirror_upper(&mut out);
    out
}

fn accumulate_upper(out: &mut Array2<f64>, row: &[f64]) {
    let d = row.len();
    for a in 0..d {
        let ra = row[a];
        if ra == 0.0 {
            continue;
        }
        let mut dst = out.row_mut(a);
        let dst = dst.as_slice_mut().expect("standard layout");
        for b in a..d {
            dst[b] += ra * row[b];
        }
    }
}

fn mirror_upper(out: &mut Array2<f64>) {
    let d = out.nrows();
    for a in 0..d {
        for b in 0..a {
            out[[a, b]] = out[[b, a]];
        }
    }
}

/// Upper-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct CholFactor {
    upper: Array2<f64>,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.upper.nrows()
    }

    pub fn upper(&self) -> &Array2<f64> {
        &self.upper
    }

    /// Solves `(LᵀL) x = rhs`.
    pub fn solve(&self, rhs: ArrayView1<f64>) -> Array1<f64> {
        solve_two_triangular(self, rhs)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.upper.diag().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Factors a symmetric positive definite matrix as `LᵀL` with `L` upper
/// triangular. Only the upper triangle of `a` is read.
pub fn cholesky(a: &Array2<f64>) -> Result<CholFactor> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "Cholesky needs a square matrix, got {:?}",
            a.dim()
        )));
    }
    let mut u = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= u[[k, j]] * u[[k, j]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ujj = diag.sqrt();
        u[[j, j]] = ujj;
        for i in (j + 1)..d {
            let mut v = a[[j, i]];
            for k in 0..j {
                v -= u[[k, j]] * u[[k, i]];
            }
            u[[j, i]] = v / ujj;
        }
    }
    Ok(CholFactor { upper: u })
}

/// Forward substitution `Lᵀ b = rhs` followed by back substitution `L x = b`.
pub fn solve_two_triangular(l: &CholFactor, rhs: ArrayView1<f64>) -> Array1<f64> {
    let u = &l.upper;
    let d = u.nrows();
    assert_eq!(rhs.len(), d, "right-hand side has the wrong length");
    let mut b = rhs.to_owned();
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= u[[k, i]] * b[k];
        }
        b[i] = v / u[[i, i]];
    }
    for i in (0..d).rev() {
        let mut v = b[i];
        for k in (i + 1)..d {
            v -= u[[i, k]] * b[k];
        }
        b[i] = v / u[[i, i]];
    }
    b
}

/// `B` solving `Lᵀ B = I`; lower triangular, with `BᵀB = (LᵀL)⁻¹`.
pub fn inverse_factor(l: &CholFactor) -> Array2<f64> {
    let u = &l.upper;
    let d = u.nrows();
    let mut b = Array2::<f64>::zeros((d, d));
    for c in 0..d {
        b[[c, c]] = 1.0 / u[[c, c]];
        for i in (c + 1)..d {
            let mut v = 0.0;
            for k in c..i {
                v -= u[[k, i]] * b[[k, c]];
            }
            b[[i, c]] = v / u[[i, i]];
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut s = seed;
        Array2::from_shape_fn((r, c), |_| lcg(&mut s))
    }

    fn random_pd(d: usize, seed: u64) -> Array2<f64> {
        let b = random_matrix(d + 3, d, seed);
        b.t().dot(&b) + Array2::<f64>::eye(d)
    }

    fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
    }

    #[test]
    fn crossprod_cases() {
        let m = random_matrix(10, 4, 3);
        let w = Array1::from_iter((0..10).map(|i| 0.1 + i as f64));
        let got = weighted_crossprod(m.view(), w.view());
        for a in 0..4 {
            for b in 0..4 {
                let naive: f64 = (0..10).map(|i| m[[i, a]] * w[i] * m[[i, b]]).sum();
                assert!((got[[a, b]] - naive).abs() < 1e-12);
            }
        }
        let ones = Array1::ones(10);
        let plain = weighted_crossprod(m.view(), ones.view());
        assert!((&plain - &m.t().dot(&m)).iter().all(|v| v.abs() < 1e-12));
        let eye = Array2::<f64>::eye(3);
        let w3 = array![2.0, 0.5, 7.0];
        let d = weighted_crossprod(eye.view(), w3.view()) - Array2::from_diag(&w3);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(crossprod(m.view()), plain);
    }

    #[test]
    fn hand_factorization() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let l = cholesky(&a).unwrap();
        assert_eq!(l.upper(), &array![[2.0, 1.0], [0.0, 2.0]]);
        let x = solve_two_triangular(&l, array![6.0, 9.0].view());
        assert!((x[0] - 0.75).abs() < 1e-15 && (x[1] - 1.5).abs() < 1e-15);
        let b = inverse_factor(&l);
        let inv = b.t().dot(&b);
        let want = array![[5.0, -2.0], [-2.0, 4.0]] / 16.0;
        assert!((&inv - &want).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identity_cases() {
        let i = Array2::<f64>::eye(4);
        let l = cholesky(&i).unwrap();
        assert_eq!(l.upper(), &i);
        assert_eq!(inverse_factor(&l), i);
        let r = array![1.0, -2.0, 3.0, 0.5];
        assert_eq!(solve_two_triangular(&l, r.view()), r);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn random_systems_against_reference_solver() {
        for (d, seed) in [(1, 1), (5, 2), (20, 3), (50, 4), (100, 5)] {
            let a = random_pd(d, seed);
            let l = cholesky(&a).unwrap();
            let rec = l.upper().t().dot(l.upper());
            let rel = (&rec - &a).mapv(|v| v * v).sum().sqrt() / a.mapv(|v| v * v).sum().sqrt();
            assert!(rel < 1e-12, "reconstruction {rel}");

            let rhs = random_matrix(d, 1, seed + 100).column(0).to_owned();
            let x = l.solve(rhs.view());
            let refx = to_na(&a).lu().solve(&nalgebra::DVector::from_vec(rhs.to_vec())).unwrap();
            for i in 0..d {
                assert!((x[i] - refx[i]).abs() <= 1e-10 * refx.amax().max(1.0));
            }
            let resid = a.dot(&x) - &rhs;
            assert!(resid.dot(&resid).sqrt() / rhs.dot(&rhs).sqrt() < 1e-10);

            let b = inverse_factor(&l);
            let err = b.t().dot(&b).dot(&a) - Array2::<f64>::eye(d);
            assert!(err.mapv(|v| v * v).sum().sqrt() < 1e-8);
            // deterministic
            assert_eq!(cholesky(&a).unwrap().upper(), l.upper());
        }
    }
}
