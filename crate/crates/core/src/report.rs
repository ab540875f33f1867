//! Serializable summaries of fits: the fit report, smooth-effect curves and
//! model comparison tables.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pirls::FitResult;
use crate::smooths::{TermBasis, TermKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub name: String,
    pub kind: TermKind,
    pub covariate: String,
    pub fixed_in_model: bool,
    pub edf: f64,
    pub basis: TermBasis,
    pub coefficients: Vec<f64>,
    /// Posterior covariance sub-block, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub rho: Vec<NamedValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_effect_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub time: f64,
    /// Log baseline hazard increment.
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub terms: Vec<TermReport>,
    pub rho: Vec<NamedValue>,
    pub edf_total: f64,
    pub edf_strata: f64,
    pub aic: f64,
    pub laml: f64,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub deviance_explained: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
    pub strata: Vec<StratumReport>,
}

impl FitReport {
    pub fn from_fit(fit: &FitResult) -> Self {
        let rho: Vec<NamedValue> = fit
            .penalty_labels
            .iter()
            .zip(&fit.rho)
            .map(|(l, r)| NamedValue {
                name: l.clone(),
                value: *r,
            })
            .collect();
        let terms = fit
            .terms
            .iter()
            .map(|t| {
                let cov = fit.term_covariance(&t.name).expect("term exists");
                TermReport {
                    name: t.name.clone(),
                    kind: t.kind,
                    covariate: t.covariate.clone(),
                    fixed_in_model: t.fixed_in_model,
                    edf: t.edf,
                    basis: t.basis.clone(),
                    coefficients: fit.term_coefficients(&t.name).expect("term exists").iter().copied().collect(),
                    covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    rho: t.penalties.iter().map(|&j| rho[j].clone()).collect(),
                    random_effect_sd: fit.random_effect_sd(&t.name),
                }
            })
            .collect();
        let strata = fit
            .strata_times
            .iter()
            .zip(fit.stratum_coefficients().iter())
            .map(|(&time, &coefficient)| StratumReport { time, coefficient })
            .collect();
        Self {
            terms,
            rho,
            edf_total: fit.edf_total,
            edf_strata: fit.edf_strata,
            aic: fit.aic,
            laml: fit.laml,
            loglik: fit.loglik,
            penalized_loglik: fit.penalized_loglik,
            deviance: fit.deviance,
            null_deviance: fit.null_deviance,
            deviance_explained: fit.deviance_explained(),
            converged: fit.converged,
            outer_iterations: fit.outer_iterations,
            gradient_norm: fit.gradient_norm,
            warnings: fit.warnings.clone(),
            strata,
        }
    }

    pub fn term(&self, name: &str) -> Option<&TermReport> {
        self.terms.iter().find(|t| t.name == name)
    }
}

impl TermReport {
    pub fn coefficient_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.coefficients.clone())
    }

    pub fn covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let p = self.coefficients.len();
        if self.covariance.len() != p || self.covariance.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension {
                expected: p,
                got: self.covariance.len(),
            });
        }
        Ok(DMatrix::from_fn(p, p, |i, j| self.covariance[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub term: String,
    pub x: f64,
    pub f_hat: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Fitted curve of a spline or linear term with a pointwise 95% band.
///
/// Splines span their knot range; linear terms span mean +/- 2 sd.
pub fn term_curve(term: &TermReport, points: usize) -> Result<Vec<CurvePoint>> {
    let (lo, hi) = match &term.basis {
        TermBasis::Spline { basis } => {
            let k = basis.knots();
            (k[0], k[k.len() - 1])
        }
        TermBasis::Linear { mean, sd } => (mean - 2.0 * sd, mean + 2.0 * sd),
        TermBasis::RandomEffect { .. } => {
            return Err(Error::Spec(format!("term `{}` has no curve", term.name)))
        }
    };
    let n = points.max(2);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let x = term.basis.design(&grid)?;
    let beta = term.coefficient_vector();
    let cov = term.covariance_matrix()?;
    let f = &x * &beta;
    let xv = &x * &cov;
    let z = 1.959963984540054;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let se = xv.row(i).dot(&x.row(i)).max(0.0).sqrt();
            CurvePoint {
                term: term.name.clone(),
                x: g,
                f_hat: f[i],
                se,
                lower: f[i] - z * se,
                upper: f[i] + z * se,
            }
        })
        .collect())
}

/// Curves of every non-random-effect term as CSV.
pub fn write_curves_csv<W: Write>(report: &FitReport, points: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in report.terms.iter().filter(|t| t.kind != TermKind::RandomEffect) {
        for p in term_curve(t, points)? {
            w.serialize(p)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub n_events: usize,
    pub edf: f64,
    pub deviance_explained: f64,
    pub aic: f64,
    pub laml: f64,
    pub best_aic: bool,
}

/// One row per fitted model; the lowest AIC is flagged.
pub fn compare_table(models: &[(String, &FitResult)], n_events: usize) -> Vec<CompareRow> {
    let best = models
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.aic.total_cmp(&b.1 .1.aic))
        .map(|(i, _)| i);
    models
        .iter()
        .enumerate()
        .map(|(i, (name, fit))| CompareRow {
            model: name.clone(),
            n_events,
            edf: fit.edf_total,
            deviance_explained: fit.deviance_explained(),
            aic: fit.aic,
            laml: fit.laml,
            best_aic: Some(i) == best,
        })
        .collect()
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
