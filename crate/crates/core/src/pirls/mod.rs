//! Penalized fitting of the pseudo-data model and smoothing parameter estimation.
//!
//! The inner loop ([`pirls_fit`]) maximizes the penalized Poisson
//! log-likelihood for fixed smoothing parameters. The outer loop
//! ([`optimize_rho`]) maximizes the Laplace-approximate marginal likelihood
//! over `rho = log(lambda)` with a box-constrained BFGS iteration.

mod inner;
mod laml;
mod posterior;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use inner::{initial_beta, pirls_fit, PirlsConfig, PirlsFit};
pub use laml::{laml_value, LamlEval, LamlProblem, PenaltyStructure};
pub use posterior::{posterior_sample, sample_mvn};

use crate::coxpois::PseudoData;
use crate::error::{Error, Result};
use crate::smooths::{DesignOptions, PenalizedDesign, TermBasis, TermKind, TermSpec};

pub const RHO_BOUND: f64 = 15.0;

#[derive(Debug, Clone, Copy)]
pub struct OuterConfig {
    pub max_iter: usize,
    /// Sup-norm of the projected LAML gradient declaring convergence.
    pub grad_tol: f64,
    pub rho_bound: f64,
    pub pirls: PirlsConfig,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-4,
            rho_bound: RHO_BOUND,
            pirls: PirlsConfig::default(),
        }
    }
}

/// Per-term slice of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermFit {
    pub name: String,
    pub kind: TermKind,
    pub covariate: String,
    pub fixed_in_model: bool,
    pub range: Range<usize>,
    pub basis: TermBasis,
    pub edf: f64,
    /// Indices into [`FitResult::rho`] of this term's penalties.
    pub penalties: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// All coefficients: term blocks then stratum (log baseline increments).
    pub beta_hat: DVector<f64>,
    pub rho: Vec<f64>,
    pub penalty_labels: Vec<String>,
    /// `(X'WX + S_lambda)^-1`.
    pub v_post: DMatrix<f64>,
    pub edf_total: f64,
    /// One entry per term, in term order.
    pub edf_per_term: Vec<f64>,
    pub edf_strata: f64,
    pub aic: f64,
    pub laml: f64,
    pub converged: bool,
    pub penalized_loglik: f64,
    /// Partial log-likelihood implied by the fit.
    pub loglik: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub outer_iterations: usize,
    pub gradient_norm: f64,
    pub terms: Vec<TermFit>,
    pub stratum_range: Range<usize>,
    pub strata_times: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn term(&self, name: &str) -> Option<&TermFit> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn term_coefficients(&self, name: &str) -> Option<DVector<f64>> {
        self.term(name)
            .map(|t| self.beta_hat.rows(t.range.start, t.range.len()).into_owned())
    }

    /// Posterior covariance of one term's coefficients.
    pub fn term_covariance(&self, name: &str) -> Option<DMatrix<f64>> {
        self.term(name).map(|t| {
            self.v_post
                .view((t.range.start, t.range.start), (t.range.len(), t.range.len()))
                .into_owned()
        })
    }

    pub fn stratum_coefficients(&self) -> DVector<f64> {
        self.beta_hat
            .rows(self.stratum_range.start, self.stratum_range.len())
            .into_owned()
    }

    pub fn deviance_explained(&self) -> f64 {
        1.0 - self.deviance / self.null_deviance
    }

    /// Frailty standard deviation `lambda^-1/2` of a random-effect term.
    pub fn random_effect_sd(&self, name: &str) -> Option<f64> {
        let t = self.term(name)?;
        (t.kind == TermKind::RandomEffect).then(|| (-0.5 * self.rho[t.penalties[0]]).exp())
    }

    /// Recomputes AIC from the stored log-likelihood and edf.
    pub fn aic_from_parts(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.edf_total
    }
}

/// Effective degrees of freedom per coefficient, `diag((X'WX + S)^-1 X'WX)`.
pub fn edf_diagonal(design: &PenalizedDesign, fit: &PirlsFit) -> DVector<f64> {
    let p = design.total_p;
    let mut diag = DVector::from_element(p, 1.0);
    // (H^-1 S)_ii with S block diagonal over the penalized ranges
    let v = &fit.v_post;
    let s = &fit.s_lambda;
    for r in &design.block_ranges {
        for i in r.clone() {
            let mut acc = 0.0;
            for k in r.clone() {
                acc += v[(i, k)] * s[(k, i)];
            }
            diag[i] -= acc;
        }
    }
    diag
}

/// Builds the full result record from a LAML evaluation.
pub fn assemble_fit(
    design: &PenalizedDesign,
    pseudo: &PseudoData,
    rho: &[f64],
    eval: LamlEval,
    converged: bool,
    outer_iterations: usize,
    gradient_norm: f64,
    warnings: Vec<String>,
) -> FitResult {
    let fit = eval.fit;
    let diag = edf_diagonal(design, &fit);
    let range_sum = |r: &Range<usize>| r.clone().map(|i| diag[i]).sum::<f64>();
    let edf_per_term: Vec<f64> = design.block_ranges.iter().map(range_sum).collect();
    let edf_strata = range_sum(&design.stratum_range);
    let edf_total = edf_per_term.iter().sum::<f64>() + edf_strata;
    let loglik = fit.loglik - pseudo.breslow_constant();
    let terms = design
        .blocks
        .iter()
        .zip(&design.block_ranges)
        .enumerate()
        .map(|(bi, (b, r))| TermFit {
            name: b.term.name.clone(),
            kind: b.term.kind,
            covariate: b.term.covariate.clone(),
            fixed_in_model: b.term.fixed_in_model,
            range: r.clone(),
            basis: b.basis.clone(),
            edf: edf_per_term[bi],
            penalties: design
                .penalties
                .iter()
                .enumerate()
                .filter(|(_, p)| p.block == bi)
                .map(|(j, _)| j)
                .collect(),
        })
        .collect();
    let (deviance, null_deviance) = deviances(pseudo, &fit.mu);
    FitResult {
        beta_hat: fit.beta.clone(),
        rho: rho.to_vec(),
        penalty_labels: design.penalties.iter().map(|p| p.label.clone()).collect(),
        v_post: fit.v_post.clone(),
        edf_total,
        edf_per_term,
        edf_strata,
        aic: -2.0 * loglik + 2.0 * edf_total,
        laml: eval.value,
        converged: converged && fit.converged,
        penalized_loglik: fit.penalized_loglik,
        loglik,
        deviance,
        null_deviance,
        outer_iterations,
        gradient_norm,
        terms,
        stratum_range: design.stratum_range.clone(),
        strata_times: pseudo.strata_times.clone(),
        warnings,
    }
}

/// Poisson deviance of the fit and of the stratum-only model.
fn deviances(pseudo: &PseudoData, mu: &DVector<f64>) -> (f64, f64) {
    let dev = |y: f64, m: f64| {
        let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
        2.0 * (t - (y - m))
    };
    let k = pseudo.n_strata();
    let mut rows = vec![0.0; k];
    for &s in &pseudo.stratum {
        rows[s] += 1.0;
    }
    let mut d = 0.0;
    let mut d0 = 0.0;
    for i in 0..pseudo.n_pseudo() {
        let s = pseudo.stratum[i];
        let m0 = pseudo.events_per_stratum[s] as f64 / rows[s];
        d += dev(pseudo.y[i], mu[i]);
        d0 += dev(pseudo.y[i], m0);
    }
    (d, d0)
}

/// Nested optimization: BFGS on `rho` maximizing LAML, PIRLS inside.
pub fn optimize_rho(
    pseudo: &PseudoData,
    design: &PenalizedDesign,
    rho0: &[f64],
    config: &OuterConfig,
) -> Result<FitResult> {
    let m = design.penalties.len();
    if rho0.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: rho0.len(),
        });
    }
    if rho0.iter().any(|r| !r.is_finite()) {
        return Err(Error::Spec("initial log smoothing parameters must be finite".into()));
    }
    let mut problem = LamlProblem::new(design, pseudo.y_vector());
    problem.pirls = config.pirls;
    let bound = config.rho_bound;
    let mut warnings = Vec::new();
    let clamp = |r: f64| r.clamp(-bound, bound);
    let mut rho: Vec<f64> = rho0.iter().map(|&r| clamp(r)).collect();
    if rho.iter().zip(rho0).any(|(a, b)| a != b) {
        warnings.push(format!("initial rho clamped to [-{bound}, {bound}]"));
    }

    if m == 0 {
        let eval = problem.evaluate(&rho, None)?;
        let conv = eval.fit.converged;
        return Ok(assemble_fit(design, pseudo, &rho, eval, conv, 0, 0.0, warnings));
    }

    // minimize f = -LAML
    let mut cur = problem.evaluate(&rho, None)?;
    let mut f = -cur.value;
    let mut g = -cur.gradient.clone();
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    let mut iterations = 0;
    let projected = |rho: &[f64], g: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(
            m,
            (0..m).map(|i| {
                let at_lo = rho[i] <= -bound && g[i] > 0.0;
                let at_hi = rho[i] >= bound && g[i] < 0.0;
                if at_lo || at_hi {
                    0.0
                } else {
                    g[i]
                }
            }),
        )
    };
    let mut pg = projected(&rho, &g);
    for it in 0..config.max_iter {
        iterations = it;
        if pg.amax() < config.grad_tol {
            converged = true;
            break;
        }
        iterations = it + 1;
        let free: Vec<bool> = pg.iter().map(|v| *v != 0.0).collect();
        let mut dir = -(&hinv * &pg);
        for i in 0..m {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&pg) >= 0.0 {
            hinv = DMatrix::identity(m, m);
            dir = -pg.clone();
        }
        let longest = dir.amax();
        if longest > 5.0 {
            dir *= 5.0 / longest;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..m).map(|i| clamp(rho[i] + t * dir[i])).collect();
            let moved = DVector::from_iterator(m, (0..m).map(|i| cand[i] - rho[i]));
            if moved.amax() == 0.0 {
                break;
            }
            if let Ok(e) = problem.evaluate(&cand, Some(&cur.fit.beta)) {
                let fc = -e.value;
                if fc <= f + 1e-4 * g.dot(&moved) {
                    next = Some((cand, e, moved));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, e, s)) = next else {
            if hinv != DMatrix::identity(m, m) {
                hinv = DMatrix::identity(m, m);
                continue;
            }
            warnings.push("LAML line search stalled".into());
            break;
        };
        let g_new = -e.gradient.clone();
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            if it == 0 {
                // scale the initial inverse Hessian
                hinv *= sy / yv.dot(&yv);
            }
            let rho_k = 1.0 / sy;
            let i_m = DMatrix::<f64>::identity(m, m);
            let a = &i_m - &s * yv.transpose() * rho_k;
            let b = &i_m - &yv * s.transpose() * rho_k;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho_k;
        }
        rho = cand;
        f = -e.value;
        g = g_new;
        cur = e;
        pg = projected(&rho, &g);
    }
    if !converged && pg.amax() < config.grad_tol {
        converged = true;
    }
    if !converged {
        warnings.push(format!(
            "LAML optimization stopped after {iterations} iterations, |grad| = {:.3e}",
            pg.amax()
        ));
    }
    if rho.iter().any(|r| r.abs() >= bound) {
        warnings.push(format!("some log smoothing parameters at the bound +/-{bound}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let gn = pg.amax();
    Ok(assemble_fit(design, pseudo, &rho, cur, converged, iterations, gn, warnings))
}

/// Fits a model specified by term list: builds the design and optimizes LAML from `rho = 0`.
pub fn fit_terms(
    pseudo: &PseudoData,
    terms: &[TermSpec],
    opts: DesignOptions,
    config: &OuterConfig,
) -> Result<(PenalizedDesign, FitResult)> {
    let design = PenalizedDesign::build(pseudo, terms, opts)?;
    let rho0 = vec![0.0; design.penalties.len()];
    let fit = optimize_rho(pseudo, &design, &rho0, config)?;
    Ok((design, fit))
}

/// Fit at fixed log smoothing parameters, without outer optimization.
pub fn fit_at_rho(pseudo: &PseudoData, design: &PenalizedDesign, rho: &[f64]) -> Result<FitResult> {
    let eval = LamlProblem::new(design, pseudo.y_vector()).evaluate(rho, None)?;
    let converged = eval.fit.converged;
    Ok(assemble_fit(design, pseudo, rho, eval, converged, 0, 0.0, Vec::new()))
}
