//! Threshold estimation as the location of the largest second derivative of a
//! fitted smooth, with a credible interval from posterior draws.
//!
//! The fitted cubic regression spline has a piecewise linear second
//! derivative that vanishes at the boundary knots, so maxima sit at interior
//! knots. Draws whose argmax is spread over every interior knot carry no
//! information on the threshold; the `no_evidence` flag encodes that the
//! credible interval spans the full range where a maximum can occur.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pirls::{sample_mvn, FitResult};
use crate::smooths::TermBasis;

pub const DEFAULT_GRID_POINTS: usize = 201;
pub const DEFAULT_B: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct BreakpointOptions {
    pub b_samples: usize,
    pub seed: u64,
    pub grid_points: usize,
    /// Restrict the argmax to grid points where the fitted slope is positive.
    pub positive_slope: bool,
}

impl Default for BreakpointOptions {
    fn default() -> Self {
        Self {
            b_samples: DEFAULT_B,
            seed: 0,
            grid_points: DEFAULT_GRID_POINTS,
            positive_slope: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointResult {
    pub term: String,
    pub covariate: String,
    pub psi_hat: f64,
    pub grid: Vec<f64>,
    pub f_hat: Vec<f64>,
    /// Pointwise 95% band for `f_hat`.
    pub f_lower: Vec<f64>,
    pub f_upper: Vec<f64>,
    pub f1_hat: Vec<f64>,
    pub f2_hat: Vec<f64>,
    /// One entry per draw; `None` when a draw has no positive-slope grid point.
    pub psi_samples: Vec<Option<f64>>,
    pub n_valid_draws: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Range of grid values at which the second derivative can peak.
    pub attainable_low: f64,
    pub attainable_high: f64,
    pub no_evidence: bool,
    /// The point estimate's maximum was attained at several grid points.
    pub tie: bool,
    /// No positive-slope grid point in the fit; `psi_hat` is the unrestricted argmax.
    pub no_positive_slope: bool,
    pub positive_slope: bool,
    pub h: f64,
    pub b_samples: usize,
    pub seed: u64,
}

fn range_of(basis: &TermBasis) -> Result<(f64, f64, Vec<f64>)> {
    match basis {
        TermBasis::Spline { basis } => {
            let k = basis.knots();
            Ok((k[0], k[k.len() - 1], k.to_vec()))
        }
        _ => Err(Error::Spec("breakpoint estimation needs a spline term".into())),
    }
}

/// `(X(g + h) - 2 X(g) + X(g - h)) / h^2` in the term's constrained basis.
pub fn second_derivative_matrix(basis: &TermBasis, grid: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let (lo, hi, _) = range_of(basis)?;
    check_grid(grid, h, lo, hi)?;
    let (xm, x0, xp) = shifted_designs(basis, grid, h)?;
    Ok((xp - x0 * 2.0 + xm) / (h * h))
}

/// Central first difference `(X(g + h) - X(g - h)) / 2h`.
pub fn first_derivative_matrix(basis: &TermBasis, grid: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let (lo, hi, _) = range_of(basis)?;
    check_grid(grid, h, lo, hi)?;
    let (xm, _, xp) = shifted_designs(basis, grid, h)?;
    Ok((xp - xm) / (2.0 * h))
}

fn check_grid(grid: &[f64], h: f64, lo: f64, hi: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Spec("finite-difference interval must be positive".into()));
    }
    // relative slack absorbs the rounding of grid construction
    let slack = 1e-9 * (hi - lo);
    if let Some(g) = grid.iter().find(|&&g| g - h < lo - slack || g + h > hi + slack) {
        return Err(Error::Spec(format!(
            "grid point {g} lies within h = {h} of the covariate range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn shifted_designs(
    basis: &TermBasis,
    grid: &[f64],
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let minus: Vec<f64> = grid.iter().map(|g| g - h).collect();
    let plus: Vec<f64> = grid.iter().map(|g| g + h).collect();
    Ok((basis.design(&minus)?, basis.design(grid)?, basis.design(&plus)?))
}

/// Equally spaced grid over `[lo + h, hi - h]` with `h = (hi - lo) / 100`.
pub fn default_grid(lo: f64, hi: f64, points: usize) -> (Vec<f64>, f64) {
    let h = (hi - lo) / 100.0;
    let (a, b) = (lo + h, hi - h);
    let n = points.max(2);
    let grid = (0..n)
        .map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect();
    (grid, h)
}

/// Argmax of `f2` over admissible points; ties go to the smallest index.
/// Returns `(index, tied)` or `None` when no point is admissible.
fn argmax(f2: &[f64], admissible: &[bool], tol: f64) -> Option<(usize, bool)> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in f2.iter().zip(admissible).enumerate() {
        if ok && best.is_none_or(|b| v > f2[b] + tol) {
            best = Some(i);
        }
    }
    let b = best?;
    let tied = f2
        .iter()
        .zip(admissible)
        .enumerate()
        .any(|(i, (&v, &ok))| ok && i != b && (v - f2[b]).abs() <= tol);
    Some((b, tied))
}

/// Rounding level of a second difference of values of size `scale`.
fn tie_tolerance(scale: f64, h: f64) -> f64 {
    64.0 * f64::EPSILON * scale / (h * h)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // type 7 (linear interpolation between order statistics)
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Breakpoint of spline term `term` of a fit.
pub fn estimate_breakpoint(fit: &FitResult, term: &str, opts: &BreakpointOptions) -> Result<BreakpointResult> {
    let t = fit
        .term(term)
        .ok_or_else(|| Error::Spec(format!("term `{term}` not in the fit")))?;
    let beta = fit.term_coefficients(term).expect("term exists");
    let cov = fit.term_covariance(term).expect("term exists");
    estimate_breakpoint_from(&t.name, &t.covariate, &t.basis, &beta, &cov, opts)
}

/// Breakpoint from a term basis, coefficient estimate and posterior covariance.
pub fn estimate_breakpoint_from(
    term: &str,
    covariate: &str,
    basis: &TermBasis,
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    opts: &BreakpointOptions,
) -> Result<BreakpointResult> {
    let (lo, hi, knots) = range_of(basis)?;
    let (grid, h) = default_grid(lo, hi, opts.grid_points);
    let x = basis.design(&grid)?;
    let d2 = second_derivative_matrix(basis, &grid, h)?;
    let d1 = first_derivative_matrix(basis, &grid, h)?;
    let f_hat = &x * beta;
    let f1 = &d1 * beta;
    let f2 = &d2 * beta;
    let se: Vec<f64> = (0..grid.len())
        .map(|i| {
            let r = x.row(i);
            (r * cov * r.transpose())[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    let z = 1.959963984540054;

    let admissible = |f1: &[f64]| -> Vec<bool> {
        f1.iter().map(|&s| !opts.positive_slope || s > 0.0).collect()
    };
    let tol_for = |f: &DVector<f64>| tie_tolerance(f.amax().max(f64::MIN_POSITIVE), h);

    let adm = admissible(f1.as_slice());
    let (psi_idx, tie, no_positive_slope) = match argmax(f2.as_slice(), &adm, tol_for(&f_hat)) {
        Some((i, tie)) => (i, tie, false),
        None => {
            let all = vec![true; grid.len()];
            let (i, tie) = argmax(f2.as_slice(), &all, tol_for(&f_hat)).expect("non-empty grid");
            (i, tie, true)
        }
    };

    let draws = sample_mvn(beta, cov, opts.b_samples, opts.seed)?;
    let psi_samples: Vec<Option<f64>> = (0..draws.nrows())
        .map(|b| {
            let bt = draws.row(b).transpose();
            let fb = &x * &bt;
            let f1b = &d1 * &bt;
            let f2b = &d2 * &bt;
            argmax(f2b.as_slice(), &admissible(f1b.as_slice()), tol_for(&fb)).map(|(i, _)| grid[i])
        })
        .collect();
    let mut valid: Vec<f64> = psi_samples.iter().flatten().copied().collect();
    valid.sort_by(f64::total_cmp);
    let n_valid = valid.len();
    let (ci_low, ci_high) = if valid.is_empty() {
        (grid[0], grid[grid.len() - 1])
    } else {
        (quantile(&valid, 0.025), quantile(&valid, 0.975))
    };

    // maxima of a piecewise linear f'' sit at interior knots
    let step = grid[1] - grid[0];
    let interior = &knots[1..knots.len() - 1];
    let attainable_low = interior.first().copied().unwrap_or(grid[0]).max(grid[0]);
    let attainable_high = interior
        .last()
        .copied()
        .unwrap_or(grid[grid.len() - 1])
        .min(grid[grid.len() - 1]);
    let covers = ci_low <= attainable_low + step && ci_high >= attainable_high - step;
    let too_few_valid = 2 * n_valid < opts.b_samples;
    Ok(BreakpointResult {
        term: term.to_string(),
        covariate: covariate.to_string(),
        psi_hat: grid[psi_idx],
        f_lower: f_hat.iter().zip(&se).map(|(f, s)| f - z * s).collect(),
        f_upper: f_hat.iter().zip(&se).map(|(f, s)| f + z * s).collect(),
        f_hat: f_hat.iter().copied().collect(),
        f1_hat: f1.iter().copied().collect(),
        f2_hat: f2.iter().copied().collect(),
        grid,
        psi_samples,
        n_valid_draws: n_valid,
        ci_low,
        ci_high,
        attainable_low,
        attainable_high,
        no_evidence: covers || too_few_valid || no_positive_slope,
        tie,
        no_positive_slope,
        positive_slope: opts.positive_slope,
        h,
        b_samples: opts.b_samples,
        seed: opts.seed,
    })
}

impl BreakpointResult {
    /// Curve CSV: `x,f_hat,f_lower,f_upper,f2_hat,in_ci`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "f_hat", "f_lower", "f_upper", "f2_hat", "in_ci"])?;
        for i in 0..self.grid.len() {
            let g = self.grid[i];
            let in_ci = g >= self.ci_low && g <= self.ci_high;
            w.write_record([
                g.to_string(),
                self.f_hat[i].to_string(),
                self.f_lower[i].to_string(),
                self.f_upper[i].to_string(),
                self.f2_hat[i].to_string(),
                (in_ci as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooths::cubic_spline_block;

    fn basis_on(lo: f64, hi: f64, k: usize) -> (TermBasis, Vec<f64>) {
        let x: Vec<f64> = (0..400).map(|i| lo + (hi - lo) * i as f64 / 399.0).collect();
        (cubic_spline_block(&x, k).unwrap().basis, x)
    }

    fn project(basis: &TermBasis, x: &[f64], f: impl Fn(f64) -> f64) -> DVector<f64> {
        let xm = basis.design(x).unwrap();
        let y = DVector::from_iterator(x.len(), x.iter().map(|&v| f(v)));
        let mean = y.mean();
        let yc = y.add_scalar(-mean);
        (xm.transpose() * &xm).cholesky().unwrap().solve(&(xm.transpose() * yc))
    }

    #[test]
    fn linear_function_has_zero_curvature() {
        let (basis, x) = basis_on(0.0, 100.0, 10);
        let beta = project(&basis, &x, |v| 0.03 * v);
        let (grid, h) = default_grid(0.0, 100.0, 201);
        let d = second_derivative_matrix(&basis, &grid, h).unwrap();
        assert!((d * beta).amax() < 1e-8);
    }

    #[test]
    fn grid_too_close_to_boundary_rejected() {
        let (basis, _) = basis_on(0.0, 1.0, 10);
        assert!(second_derivative_matrix(&basis, &[0.005], 0.01).is_err());
        assert!(second_derivative_matrix(&basis, &[0.5], 0.01).is_ok());
    }

    #[test]
    fn linear_fit_is_a_tie_at_the_smallest_grid_value() {
        let (basis, x) = basis_on(0.0, 100.0, 10);
        let beta = project(&basis, &x, |v| 0.03 * v);
        let p = beta.len();
        let opts = BreakpointOptions {
            b_samples: 10,
            ..Default::default()
        };
        let r = estimate_breakpoint_from("s", "x", &basis, &beta, &DMatrix::zeros(p, p), &opts).unwrap();
        assert!(r.tie);
        assert_eq!(r.psi_hat, r.grid[0]);
    }

    #[test]
    fn zero_covariance_draws_reproduce_point_estimate() {
        let (basis, x) = basis_on(0.0, 100.0, 10);
        let beta = project(&basis, &x, |v| 0.05 * (v - 60.0).max(0.0));
        let p = beta.len();
        let opts = BreakpointOptions {
            b_samples: 20,
            ..Default::default()
        };
        let r = estimate_breakpoint_from("s", "x", &basis, &beta, &DMatrix::zeros(p, p), &opts).unwrap();
        assert!(r.psi_samples.iter().all(|s| *s == Some(r.psi_hat)));
        assert_eq!(r.ci_low, r.psi_hat);
        assert!((r.psi_hat - 60.0).abs() < 12.0, "psi {}", r.psi_hat);
        assert!(!r.no_evidence);
    }

    #[test]
    fn decreasing_function_has_no_positive_slope() {
        let (basis, x) = basis_on(0.0, 10.0, 8);
        let beta = project(&basis, &x, |v| -v * v);
        let p = beta.len();
        let opts = BreakpointOptions {
            b_samples: 5,
            ..Default::default()
        };
        let r = estimate_breakpoint_from("s", "x", &basis, &beta, &DMatrix::zeros(p, p), &opts).unwrap();
        assert!(r.no_positive_slope);
        assert!(r.no_evidence);
        assert_eq!(r.n_valid_draws, 0);
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.025) - 1.1).abs() < 1e-12);
    }
}
