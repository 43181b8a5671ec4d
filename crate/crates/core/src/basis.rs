//! Equally spaced B-spline bases on knots that follow the data.
//!
//! Every knot vector is rebuilt from the current index values: the inner
//! boundaries sit a fraction `eps` of the data range outside the extreme
//! values, and `order - 1` outer knots continue the same spacing on each side.
//! Evaluation uses the Cox–de Boor triangle restricted to the active span.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    /// Wraps an explicit knot sequence. The sequence must be strictly
    /// increasing and equally spaced, with more than `2 * (degree + 1)` knots.
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        let order = degree + 1;
        if knots.len() <= 2 * order {
            return Err(Error::InvalidBasis(format!(
                "{} knots cannot support order {order} (need more than {})",
                knots.len(),
                2 * order
            )));
        }
        let h = knots[1] - knots[0];
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidBasis("knots must be strictly increasing".into()));
        }
        let scale = knots[0].abs().max(knots[knots.len() - 1].abs()).max(h);
        for w in knots.windows(2) {
            if ((w[1] - w[0]) - h).abs() > 1e-12 * scale {
                return Err(Error::InvalidBasis("knots must be equally spaced".into()));
            }
        }
        Ok(Self { knots, degree })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn order(&self) -> usize {
        self.degree + 1
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Number of B-splines spanned by the knots (`m - d`).
    pub fn raw_dim(&self) -> usize {
        self.knots.len() - self.order()
    }

    pub fn spacing(&self) -> f64 {
        self.knots[1] - self.knots[0]
    }

    pub fn inner_lower(&self) -> f64 {
        self.knots[self.order() - 1]
    }

    pub fn inner_upper(&self) -> f64 {
        self.knots[self.knots.len() - self.order()]
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.inner_lower() && u <= self.inner_upper()
    }

    /// Index `s` of the interval `[t_s, t_{s+1})` holding `u`; the right
    /// inner boundary belongs to the last inner interval.
    fn span(&self, u: f64) -> usize {
        let lo = self.order() - 1;
        let hi = self.knots.len() - self.order() - 1;
        let guess = ((u - self.knots[0]) / self.spacing()).floor();
        let mut s = if guess.is_finite() && guess > 0.0 {
            (guess as usize).clamp(lo, hi)
        } else {
            lo
        };
        while s > lo && u < self.knots[s] {
            s -= 1;
        }
        while s < hi && u >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Values of the `degree + 1` B-splines of degree `degree` that are
    /// nonzero on `span`, i.e. `N_{span-degree} .. N_span`.
    fn active_values(&self, span: usize, u: f64, degree: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    fn check(&self, u: ArrayView1<f64>) -> Result<()> {
        for (i, &v) in u.iter().enumerate() {
            if !self.contains(v) {
                return Err(Error::OutOfSpan {
                    index: i,
                    value: v,
                    lower: self.inner_lower(),
                    upper: self.inner_upper(),
                });
            }
        }
        Ok(())
    }

    fn fill_basis(&self, u: ArrayView1<f64>) -> Array2<f64> {
        let k = self.degree;
        let mut out = Array2::zeros((u.len(), self.raw_dim()));
        for (i, &v) in u.iter().enumerate() {
            let span = self.span(v);
            let vals = self.active_values(span, v, k);
            for (r, val) in vals.into_iter().enumerate() {
                out[[i, span - k + r]] = val;
            }
        }
        out
    }

    fn fill_deriv(&self, u: ArrayView1<f64>) -> Array2<f64> {
        let k = self.degree;
        let mut out = Array2::zeros((u.len(), self.raw_dim()));
        if k == 0 {
            return out;
        }
        let t = &self.knots;
        let kf = k as f64;
        for (i, &v) in u.iter().enumerate() {
            let span = self.span(v);
            // lower[r] = N_{span-k+1+r}^{k-1}(v)
            let lower = self.active_values(span, v, k - 1);
            for b in (span - k)..=span {
                let mut d = 0.0;
                if b > span - k {
                    d += lower[b - (span - k + 1)] / (t[b + k] - t[b]);
                }
                if b < span {
                    d -= lower[b + 1 - (span - k + 1)] / (t[b + k + 1] - t[b + 1]);
                }
                out[[i, b]] = kf * d;
            }
        }
        out
    }
}

/// Builds the knot vector for index values `u` with `q + 1` B-splines of
/// order `order`. The inner span is `[min u - range*eps, max u + range*eps]`.
pub fn make_knots(u: ArrayView1<f64>, q: usize, order: usize, eps: f64) -> Result<KnotVector> {
    if order == 0 {
        return Err(Error::InvalidBasis("spline order must be at least 1".into()));
    }
    if q < order {
        return Err(Error::InvalidBasis(format!(
            "basis dimension q = {q} must be at least the order {order}"
        )));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidBasis(format!("boundary tolerance {eps} must be non-negative")));
    }
    if u.is_empty() {
        return Err(Error::InvalidBasis("no index values to place knots on".into()));
    }
    let (min, max) = u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::DegenerateIndex { range });
    }
    let lower = min - range * eps;
    let upper = max + range * eps;
    let m = q + 1 + order;
    let intervals = (q + 2 - order) as f64;
    let h = (upper - lower) / intervals;
    let first = (order - 1) as f64;
    let knots = (0..m).map(|i| lower + (i as f64 - first) * h).collect();
    Ok(KnotVector {
        knots,
        degree: order - 1,
    })
}

/// Raw B-spline basis, one row per value, `q + 1` columns.
pub fn eval_basis(knots: &KnotVector, u: ArrayView1<f64>) -> Result<Array2<f64>> {
    knots.check(u)?;
    Ok(knots.fill_basis(u))
}

/// First derivative of every raw B-spline, same layout as [`eval_basis`].
/// A curve `N·γ` has derivative `N'·γ` with the same coefficients.
pub fn eval_deriv_basis(knots: &KnotVector, u: ArrayView1<f64>) -> Result<Array2<f64>> {
    knots.check(u)?;
    Ok(knots.fill_deriv(u))
}

/// Prediction-time evaluation: values outside the inner span are clamped
/// onto its boundary. Returns the basis and the number of clamped values.
pub fn eval_basis_clamped(knots: &KnotVector, u: ArrayView1<f64>) -> (Array2<f64>, usize) {
    let (lo, hi) = (knots.inner_lower(), knots.inner_upper());
    let mut clamped = 0;
    let uc: Array1<f64> = u
        .iter()
        .map(|&v| {
            if v < lo || v > hi {
                clamped += 1;
            }
            v.clamp(lo, hi)
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} index values fall outside the fitted knot span and were clamped");
    }
    (knots.fill_basis(uc.view()), clamped)
}

/// Output of [`center_and_drop`].
#[derive(Debug, Clone)]
pub struct Centered {
    /// `n × q` column-centered basis with the last column dropped.
    pub basis: Array2<f64>,
    /// `n × q` column-centered derivative basis with the last column dropped.
    pub deriv_basis: Array2<f64>,
    /// Column means of the raw basis (length `q + 1`).
    pub col_means: Array1<f64>,
    /// Column means of the raw derivative basis (length `q + 1`).
    pub deriv_col_means: Array1<f64>,
}

fn column_means(m: ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows() as f64;
    m.sum_axis(Axis(0)) / n
}

/// Centers the columns of the raw basis and its derivative and drops the
/// last column of each (the dropped coefficient is fixed at zero).
pub fn center_and_drop(raw_basis: ArrayView2<f64>, raw_deriv: ArrayView2<f64>) -> Result<Centered> {
    let (n, k) = raw_basis.dim();
    if raw_deriv.dim() != (n, k) {
        return Err(Error::DimensionMismatch(format!(
            "basis is {n}x{k} but derivative basis is {:?}",
            raw_deriv.dim()
        )));
    }
    if n == 0 || k < 2 {
        return Err(Error::InvalidBasis(format!("cannot center a {n}x{k} basis")));
    }
    let col_means = column_means(raw_basis);
    let deriv_col_means = column_means(raw_deriv);
    let basis = apply_centering(raw_basis, col_means.view());
    let deriv_basis = apply_centering(raw_deriv, deriv_col_means.view());
    Ok(Centered {
        basis,
        deriv_basis,
        col_means,
        deriv_col_means,
    })
}

/// Subtracts stored column means and drops the last column.
pub fn apply_centering(raw: ArrayView2<f64>, col_means: ArrayView1<f64>) -> Array2<f64> {
    let q = raw.ncols() - 1;
    let mut out = raw.slice(s![.., ..q]).to_owned();
    for mut row in out.rows_mut() {
        for (v, m) in row.iter_mut().zip(col_means.iter()) {
            *v -= m;
        }
    }
    out
}

/// A centered basis for one smooth term on its construction sample.
#[derive(Debug, Clone)]
pub struct BasisBlock {
    pub knots: KnotVector,
    pub raw_dim: usize,
    pub centered_dim: usize,
    pub col_means: Array1<f64>,
    pub deriv_col_means: Array1<f64>,
    pub basis: Array2<f64>,
    pub deriv_basis: Array2<f64>,
}

impl BasisBlock {
    /// Places knots on `u` and builds the centered bases.
    pub fn build(u: ArrayView1<f64>, q: usize, order: usize, eps: f64) -> Result<Self> {
        let knots = make_knots(u, q, order, eps)?;
        Self::with_knots(knots, u)
    }

    /// Builds the centered bases on fixed knots; the centering is taken
    /// over `u` itself.
    pub fn with_knots(knots: KnotVector, u: ArrayView1<f64>) -> Result<Self> {
        if u.len() < knots.raw_dim() {
            return Err(Error::InvalidBasis(format!(
                "{} observations cannot identify {} basis functions",
                u.len(),
                knots.raw_dim()
            )));
        }
        let raw = eval_basis(&knots, u)?;
        let raw_d = knots.fill_deriv(u);
        let c = center_and_drop(raw.view(), raw_d.view())?;
        let raw_dim = knots.raw_dim();
        Ok(Self {
            knots,
            raw_dim,
            centered_dim: raw_dim - 1,
            col_means: c.col_means,
            deriv_col_means: c.deriv_col_means,
            basis: c.basis,
            deriv_basis: c.deriv_basis,
        })
    }

    /// Derivative of the uncentered curve with coefficients `gamma`
    /// (last raw coefficient zero) at every construction point.
    pub fn raw_derivative(&self, gamma: ArrayView1<f64>) -> Array1<f64> {
        let shift: f64 = self
            .deriv_col_means
            .iter()
            .zip(gamma.iter())
            .map(|(m, g)| m * g)
            .sum();
        self.deriv_basis.dot(&gamma) + shift
    }
}
