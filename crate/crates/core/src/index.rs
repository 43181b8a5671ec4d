//! Unit-norm single-index directions `α = (1, α̃)/√(1+‖α̃‖²)` and the
//! index model matrix.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub fn expand_alpha(alpha_tilde: ArrayView1<f64>) -> Array1<f64> {
    let norm = (1.0 + alpha_tilde.dot(&alpha_tilde)).sqrt();
    let mut a = Array1::<f64>::zeros(alpha_tilde.len() + 1);
    a[0] = 1.0 / norm;
    for (dst, v) in a.iter_mut().skip(1).zip(alpha_tilde.iter()) {
        *dst = v / norm;
    }
    a
}

/// `∂α/∂α̃`, an `(s+1) × s` matrix.
pub fn jacobian(alpha_tilde: ArrayView1<f64>) -> Array2<f64> {
    let s = alpha_tilde.len();
    let alpha = expand_alpha(alpha_tilde);
    let c = -1.0 / (1.0 + alpha_tilde.dot(&alpha_tilde));
    let mut j = Array2::<f64>::zeros((s + 1, s));
    for col in 0..s {
        let a = alpha[col + 1];
        j[[0, col]] = c * a;
        for row in 1..=s {
            j[[row, col]] = c * alpha_tilde[row - 1] * a;
        }
        j[[col + 1, col]] += alpha[0];
    }
    j
}

/// `u = Zα`.
pub fn index_covariate(z: ArrayView2<f64>, alpha: ArrayView1<f64>) -> Result<Array1<f64>> {
    if z.ncols() != alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "index matrix has {} columns but the direction has {} components",
            z.ncols(),
            alpha.len()
        )));
    }
    Ok(z.dot(&alpha))
}

/// `T̃ = diag(f̃′(u)) Z J`, with masked rows set to zero. `deriv_basis · γ̃`
/// gives `f̃′`.
pub fn term_model_matrix(
    deriv_basis: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    z: ArrayView2<f64>,
    jac: ArrayView2<f64>,
    mask: Option<ArrayView1<f64>>,
) -> Array2<f64> {
    let fprime = deriv_basis.dot(&gamma);
    scaled_index_matrix(fprime.view(), z, jac, mask)
}

/// `diag(fprime) Z J` with optional row mask.
pub fn scaled_index_matrix(
    fprime: ArrayView1<f64>,
    z: ArrayView2<f64>,
    jac: ArrayView2<f64>,
    mask: Option<ArrayView1<f64>>,
) -> Array2<f64> {
    let mut t = z.dot(&jac);
    for (i, mut row) in t.axis_iter_mut(Axis(0)).enumerate() {
        let w = fprime[i] * mask.map_or(1.0, |m| m[i]);
        row.mapv_inplace(|v| v * w);
    }
    t
}

/// Index model matrix that is the exact derivative of the centered curve:
/// the raw-curve slope times `ZJ`, column-centered over the sample.
pub fn centered_index_matrix(
    fprime_raw: ArrayView1<f64>,
    z: ArrayView2<f64>,
    jac: ArrayView2<f64>,
) -> Array2<f64> {
    let mut t = scaled_index_matrix(fprime_raw, z, jac, None);
    if t.nrows() > 0 {
        let means = t.mean_axis(Axis(0)).expect("non-empty");
        t -= &means;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{eval_basis, make_knots, BasisBlock};
    use ndarray::{array, s};
    use proptest::prelude::*;

    fn fd_jacobian(at: &Array1<f64>, h: f64) -> Array2<f64> {
        let s = at.len();
        let mut out = Array2::zeros((s + 1, s));
        for k in 0..s {
            let mut p = at.clone();
            let mut m = at.clone();
            p[k] += h;
            m[k] -= h;
            let d = (expand_alpha(p.view()) - expand_alpha(m.view())) / (2.0 * h);
            out.column_mut(k).assign(&d);
        }
        out
    }

    #[test]
    fn expand_alpha_cases() {
        assert_eq!(expand_alpha(array![0.0, 0.0].view()), array![1.0, 0.0, 0.0]);
        let a = expand_alpha(array![-1.4].view());
        assert!((a[0] - 0.58).abs() < 5e-3 && (a[1] + 0.81).abs() < 5e-3);
        let a = expand_alpha(array![1.7, -0.8].view());
        for (got, want) in a.iter().zip([0.47, 0.80, -0.38]) {
            assert!((got - want).abs() < 5e-3);
        }
    }

    #[test]
    fn jacobian_cases() {
        let j = jacobian(array![0.0, 0.0].view());
        assert_eq!(j, array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let j = jacobian(array![1.0].view());
        let r = 0.5f64.sqrt();
        assert!((j[[0, 0]] + 0.5 * r).abs() < 1e-15);
        assert!((j[[1, 0]] - 0.5 * r).abs() < 1e-15);
        let fd = fd_jacobian(&array![1.0], 1e-6);
        assert!((&fd - &j).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn index_covariate_cases() {
        let z = array![[1.0, 2.0], [0.0, 0.0], [-3.0, 4.0]];
        assert_eq!(index_covariate(z.view(), array![1.0, 0.0].view()).unwrap(), z.column(0));
        let u = index_covariate(z.view(), array![0.6, 0.8].view()).unwrap();
        assert_eq!(u[1], 0.0);
        assert!(index_covariate(z.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn constant_curve_gives_zero_index_matrix() {
        let u = Array1::linspace(0.0, 1.0, 30);
        let b = BasisBlock::build(u.view(), 6, 4, 0.001).unwrap();
        let z = Array2::from_shape_fn((30, 2), |(i, k)| (i * (k + 2)) as f64 / 30.0);
        // centered coefficients of a constant raw curve with the last one at zero
        let gamma = Array1::zeros(6);
        let t = term_model_matrix(b.deriv_basis.view(), gamma.view(), z.view(), jacobian(array![0.3].view()).view(), None);
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_direction_uses_trailing_columns() {
        let u = Array1::linspace(-1.0, 1.0, 25);
        let b = BasisBlock::build(u.view(), 7, 4, 0.001).unwrap();
        let z = Array2::from_shape_fn((25, 3), |(i, k)| ((i * 7 + k * 3) % 11) as f64 - 5.0);
        let gamma = Array1::from_iter((0..7).map(|k| (k as f64).sin()));
        let fp = b.deriv_basis.dot(&gamma);
        let t = term_model_matrix(b.deriv_basis.view(), gamma.view(), z.view(), jacobian(array![0.0, 0.0].view()).view(), None);
        for k in 0..2 {
            for i in 0..25 {
                assert_eq!(t[[i, k]], fp[i] * z[[i, k + 1]]);
            }
        }
        let mask = Array1::from_iter((0..25).map(|i| (i % 2) as f64));
        let tm = term_model_matrix(b.deriv_basis.view(), gamma.view(), z.view(), jacobian(array![0.0, 0.0].view()).view(), Some(mask.view()));
        assert!(tm.row(4).iter().all(|v| *v == 0.0));
        assert_eq!(tm.row(5), t.row(5));
    }

    #[test]
    fn index_matrix_matches_fixed_knot_finite_differences() {
        let n = 40;
        let z = Array2::from_shape_fn((n, 3), |(i, k)| (((i * 13 + k * 29) % 37) as f64 / 37.0) - 0.4);
        let at = array![0.4, -0.7];
        let alpha = expand_alpha(at.view());
        let u = z.dot(&alpha);
        let knots = make_knots(u.view(), 8, 4, 0.05).unwrap();
        let gamma = Array1::from_iter((0..8).map(|k| ((k * 3 % 5) as f64) - 2.0));
        let f_of = |a: &Array1<f64>| -> Array1<f64> {
            let u = z.dot(&expand_alpha(a.view()));
            let raw = eval_basis(&knots, u.view()).unwrap();
            let means = raw.mean_axis(Axis(0)).unwrap();
            let c = (&raw - &means).slice(s![.., ..8]).to_owned();
            c.dot(&gamma)
        };
        let block = BasisBlock::with_knots(knots.clone(), u.view()).unwrap();
        let fp = block.raw_derivative(gamma.view());
        let t = centered_index_matrix(fp.view(), z.view(), jacobian(at.view()).view());
        let h = 1e-6;
        for k in 0..2 {
            let mut p = at.clone();
            let mut m = at.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (f_of(&p) - f_of(&m)) / (2.0 * h);
            let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..n {
                assert!((fd[i] - t[[i, k]]).abs() <= 1e-5 * scale, "row {i} col {k}");
            }
        }
    }

    proptest! {
        #[test]
        fn expanded_alpha_is_unit(at in proptest::collection::vec(-1e3f64..1e3, 1..6)) {
            let a = expand_alpha(Array1::from(at).view());
            prop_assert!((a.dot(&a) - 1.0).abs() < 1e-14);
            prop_assert!(a[0] > 0.0);
        }

        #[test]
        fn jacobian_matches_finite_differences(at in proptest::collection::vec(-3f64..3.0, 1..5)) {
            let at = Array1::from(at);
            let j = jacobian(at.view());
            let fd = fd_jacobian(&at, 1e-6);
            let scale = j.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (x, y) in j.iter().zip(fd.iter()) {
                prop_assert!((x - y).abs() <= 1e-6 * scale.max(1e-3));
            }
        }

        #[test]
        fn index_is_bounded_by_row_norm(
            rows in proptest::collection::vec(proptest::collection::vec(-10f64..10.0, 3), 1..30),
            at in proptest::collection::vec(-5f64..5.0, 2),
        ) {
            let n = rows.len();
            let z = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            let u = index_covariate(z.view(), expand_alpha(Array1::from(at).view()).view()).unwrap();
            for i in 0..n {
                let norm = z.row(i).dot(&z.row(i)).sqrt();
                prop_assert!(u[i].abs() <= norm * (1.0 + 1e-12));
            }
        }
    }
}
