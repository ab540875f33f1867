//! Cubic regression spline basis parameterized by function values at knots.
//!
//! A coefficient vector `beta` holds the spline's values at the `k` knots. The
//! second derivatives at the knots follow as `F beta`, with natural end
//! conditions (zero curvature at the outer knots), and the wiggliness penalty
//! `beta' S beta` equals the integral of the squared second derivative over the
//! knot range. Outside the knot range the spline is extended linearly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineRepr", into = "SplineRepr")]
pub struct CubicSplineBasis {
    knots: Vec<f64>,
    /// k x k map from knot values to knot second derivatives.
    second_deriv: DMatrix<f64>,
    /// k x (k-1) identifiability transform; `None` for the raw basis.
    constraint: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SplineRepr {
    knots: Vec<f64>,
    /// Row-major k x (k-1) constraint matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraint: Option<Vec<Vec<f64>>>,
}

impl TryFrom<SplineRepr> for CubicSplineBasis {
    type Error = Error;

    fn try_from(r: SplineRepr) -> Result<Self> {
        let mut basis = CubicSplineBasis::with_knots(r.knots)?;
        if let Some(rows) = r.constraint {
            let k = basis.knots.len();
            if rows.len() != k || rows.iter().any(|row| row.len() != k - 1) {
                return Err(Error::Spec("constraint matrix has wrong shape".into()));
            }
            basis.constraint = Some(DMatrix::from_fn(k, k - 1, |i, j| rows[i][j]));
        }
        Ok(basis)
    }
}

impl From<CubicSplineBasis> for SplineRepr {
    fn from(b: CubicSplineBasis) -> Self {
        let constraint = b.constraint.map(|z| {
            (0..z.nrows())
                .map(|i| z.row(i).iter().copied().collect())
                .collect()
        });
        SplineRepr {
            knots: b.knots,
            constraint,
        }
    }
}

/// Knots at evenly spaced quantiles of the distinct values of `x`.
pub fn quantile_knots(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut u: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    if k < 4 {
        return Err(Error::Spec(format!("basis dimension k={k} must be >= 4")));
    }
    if u.len() < k {
        return Err(Error::Spec(format!(
            "need at least {k} distinct covariate values, found {}",
            u.len()
        )));
    }
    let m = u.len() - 1;
    Ok((0..k)
        .map(|i| {
            let pos = i as f64 * m as f64 / (k - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m);
            let frac = pos - lo as f64;
            u[lo] + frac * (u[hi] - u[lo])
        })
        .collect())
}

impl CubicSplineBasis {
    /// Raw (unconstrained) basis on the given strictly increasing knots.
    pub fn with_knots(knots: Vec<f64>) -> Result<Self> {
        let k = knots.len();
        if k < 4 {
            return Err(Error::Spec(format!("basis dimension k={k} must be >= 4")));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) || knots.iter().any(|v| !v.is_finite()) {
            return Err(Error::Spec("knots must be finite and strictly increasing".into()));
        }
        let (b, d) = band_matrices(&knots);
        let inner = b
            .cholesky()
            .ok_or_else(|| Error::Numerical("spline band matrix not positive definite".into()))?
            .solve(&d);
        let mut second_deriv = DMatrix::zeros(k, k);
        second_deriv.rows_mut(1, k - 2).copy_from(&inner);
        Ok(Self {
            knots,
            second_deriv,
            constraint: None,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn constraint(&self) -> Option<&DMatrix<f64>> {
        self.constraint.as_ref()
    }

    /// Number of coefficients after any constraint.
    pub fn dim(&self) -> usize {
        match &self.constraint {
            Some(z) => z.ncols(),
            None => self.knots.len(),
        }
    }

    /// Absorbs a single linear constraint `c' beta = 0` into the basis.
    pub fn absorb_constraint(&mut self, c: &DVector<f64>) -> Result<()> {
        if self.constraint.is_some() {
            return Err(Error::Spec("constraint already absorbed".into()));
        }
        self.constraint = Some(null_space_of_vector(c)?);
        Ok(())
    }

    /// Integrated squared second derivative penalty in the raw basis.
    pub fn raw_penalty(&self) -> DMatrix<f64> {
        let (b, d) = band_matrices(&self.knots);
        let binv_d = b.cholesky().expect("checked at construction").solve(&d);
        d.transpose() * binv_d
    }

    /// Penalty expressed in the (possibly constrained) coefficient space.
    pub fn penalty(&self) -> DMatrix<f64> {
        let s = self.raw_penalty();
        match &self.constraint {
            Some(z) => z.transpose() * s * z,
            None => s,
        }
    }

    /// Raw basis row at `x`, written into `out` (length k).
    pub fn raw_row_into(&self, x: f64, out: &mut [f64]) {
        let kn = &self.knots;
        let k = kn.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let f = &self.second_deriv;
        if x < kn[0] || x > kn[k - 1] {
            // linear extension from the nearest end
            let (j, at, left) = if x < kn[0] {
                (0, kn[0], true)
            } else {
                (k - 2, kn[k - 1], false)
            };
            let h = kn[j + 1] - kn[j];
            let (c_lo, c_hi) = if left {
                (-h / 3.0, -h / 6.0)
            } else {
                (h / 6.0, h / 3.0)
            };
            let dx = x - at;
            let edge = if left { j } else { j + 1 };
            out[edge] += 1.0;
            out[j] -= dx / h;
            out[j + 1] += dx / h;
            for c in 0..k {
                out[c] += dx * (c_lo * f[(j, c)] + c_hi * f[(j + 1, c)]);
            }
            return;
        }
        let j = match kn.partition_point(|&t| t <= x) {
            0 => 0,
            p => (p - 1).min(k - 2),
        };
        let h = kn[j + 1] - kn[j];
        let am = (kn[j + 1] - x) / h;
        let ap = (x - kn[j]) / h;
        let cm = ((kn[j + 1] - x).powi(3) / h - h * (kn[j + 1] - x)) / 6.0;
        let cp = ((x - kn[j]).powi(3) / h - h * (x - kn[j])) / 6.0;
        out[j] += am;
        out[j + 1] += ap;
        for c in 0..k {
            out[c] += cm * f[(j, c)] + cp * f[(j + 1, c)];
        }
    }

    /// Raw design matrix (n x k).
    pub fn raw_design(&self, xs: &[f64]) -> DMatrix<f64> {
        let k = self.knots.len();
        let mut m = DMatrix::zeros(xs.len(), k);
        let mut row = vec![0.0; k];
        for (i, &x) in xs.iter().enumerate() {
            self.raw_row_into(x, &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        m
    }

    /// Design matrix in the constrained coefficient space (n x dim).
    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        let raw = self.raw_design(xs);
        match &self.constraint {
            Some(z) => raw * z,
            None => raw,
        }
    }

    /// Exact second derivative of the raw-basis spline at `x`.
    pub fn raw_second_derivative(&self, beta_raw: &DVector<f64>, x: f64) -> f64 {
        let kn = &self.knots;
        let k = kn.len();
        if x <= kn[0] || x >= kn[k - 1] {
            return 0.0;
        }
        let gamma = &self.second_deriv * beta_raw;
        let j = (kn.partition_point(|&t| t <= x) - 1).min(k - 2);
        let h = kn[j + 1] - kn[j];
        (gamma[j] * (kn[j + 1] - x) + gamma[j + 1] * (x - kn[j])) / h
    }
}

/// (k-2)x(k-2) tridiagonal B and (k-2)x k second-difference D.
fn band_matrices(knots: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut b = DMatrix::zeros(k - 2, k - 2);
    let mut d = DMatrix::zeros(k - 2, k);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    (b, d)
}

/// Orthonormal basis (k x (k-1)) for the complement of `c`, via a Householder reflection.
pub(crate) fn null_space_of_vector(c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if !(norm > 0.0) {
        return Err(Error::Numerical("zero constraint vector".into()));
    }
    let mut u = c / norm;
    let s = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += s;
    let uu = u.dot(&u);
    // H = I - 2 u u' / u'u maps e1 to -s c/|c|; columns 2..k span the complement
    let mut h = DMatrix::<f64>::identity(k, k);
    h -= (&u * u.transpose()) * (2.0 / uu);
    Ok(h.columns(1, k - 1).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> CubicSplineBasis {
        CubicSplineBasis::with_knots(vec![0.0, 0.7, 1.5, 2.0, 3.1, 4.0]).unwrap()
    }

    #[test]
    fn interpolates_knot_values() {
        let b = basis();
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let x = b.raw_design(b.knots());
        let f = x * &beta;
        for (fi, bi) in f.iter().zip(beta.iter()) {
            assert!((fi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_linear_functions() {
        let b = basis();
        let beta = DVector::from_iterator(6, b.knots().iter().map(|t| 2.0 * t - 1.0));
        let xs: Vec<f64> = (0..50).map(|i| -1.0 + i as f64 * 0.12).collect();
        let f = b.raw_design(&xs) * &beta;
        for (x, fx) in xs.iter().zip(f.iter()) {
            assert!((fx - (2.0 * x - 1.0)).abs() < 1e-10, "{x}: {fx}");
        }
        assert!((beta.transpose() * b.raw_penalty() * &beta)[0].abs() < 1e-10);
    }

    #[test]
    fn continuous_first_derivative_at_knots() {
        let b = basis();
        let beta = DVector::from_vec(vec![0.3, 1.0, -0.4, 0.2, 2.0, -1.0]);
        let f = |x: f64| (b.raw_design(&[x]) * &beta)[0];
        for &t in &b.knots()[1..5] {
            let e = 1e-6;
            let left = (f(t) - f(t - e)) / e;
            let right = (f(t + e) - f(t)) / e;
            assert!((left - right).abs() < 1e-4, "knot {t}: {left} vs {right}");
        }
    }

    #[test]
    fn quantile_knots_need_enough_values() {
        assert!(quantile_knots(&[1.0, 2.0, 3.0], 4).is_err());
        let k = quantile_knots(&[0.0, 1.0, 2.0, 3.0, 3.0, 4.0], 5).unwrap();
        assert_eq!(k, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn null_space_is_orthonormal_complement() {
        let c = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        let z = null_space_of_vector(&c).unwrap();
        assert!((z.transpose() * &c).amax() < 1e-12);
        let ztz = z.transpose() * &z;
        assert!((ztz - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn serde_round_trip_preserves_evaluation() {
        let mut b = basis();
        b.absorb_constraint(&DVector::from_element(6, 1.0)).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let back: CubicSplineBasis = serde_json::from_str(&json).unwrap();
        let xs = [0.1, 1.9, 3.7, 4.5];
        assert!((b.design(&xs) - back.design(&xs)).amax() < 1e-14);
    }
}
