//! Penalized Newton iterations for the Poisson pseudo-data model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::smooths::PenalizedDesign;

#[derive(Debug, Clone, Copy)]
pub struct PirlsConfig {
    pub max_iter: usize,
    /// Relative change in the penalized log-likelihood declaring convergence.
    pub tol: f64,
}

impl Default for PirlsConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// `l(beta) - 1/2 beta' S_lambda beta` with `l` the Poisson log-likelihood.
    pub penalized_loglik: f64,
    pub loglik: f64,
    /// `X' W X + S_lambda` at the final iterate.
    pub hessian: DMatrix<f64>,
    pub s_lambda: DMatrix<f64>,
    pub v_post: DMatrix<f64>,
    pub log_det_hessian: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted iteration.
    pub trace: Vec<f64>,
}

/// Starting coefficients: zero terms, stratum intercepts at log event rates.
pub fn initial_beta(design: &PenalizedDesign, y: &DVector<f64>) -> DVector<f64> {
    let mut beta = DVector::zeros(design.total_p);
    let k = design.n_strata();
    let mut events = vec![0.0; k];
    let mut rows = vec![0.0; k];
    for (&s, &yi) in design.stratum.iter().zip(y.iter()) {
        events[s] += yi;
        rows[s] += 1.0;
    }
    for s in 0..k {
        // strata always contain an event; guard against hand-built designs
        let rate = (events[s] / rows[s]).max(1e-8);
        beta[design.stratum_range.start + s] = rate.ln();
    }
    beta
}

fn penalized(y: &DVector<f64>, eta: &DVector<f64>, beta: &DVector<f64>, s: &DMatrix<f64>) -> (f64, f64) {
    let ll: f64 = y.iter().zip(eta.iter()).map(|(y, e)| y * e - e.exp()).sum();
    let pen = beta.dot(&(s * beta));
    (ll - 0.5 * pen, ll)
}

/// Maximizes `l(beta) - 1/2 sum_j lambda_j beta' S_j beta` by Newton steps with step halving.
pub fn pirls_fit(
    y: &DVector<f64>,
    design: &PenalizedDesign,
    lambda: &[f64],
    beta0: Option<&DVector<f64>>,
    config: &PirlsConfig,
) -> Result<PirlsFit> {
    if lambda.len() != design.penalties.len() {
        return Err(Error::Dimension {
            expected: design.penalties.len(),
            got: lambda.len(),
        });
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Spec("smoothing parameters must be finite and non-negative".into()));
    }
    let s_lambda = design.s_lambda(lambda);
    let mut beta = match beta0 {
        Some(b) if b.len() == design.total_p => b.clone(),
        _ => initial_beta(design, y),
    };
    let mut eta = design.eta(&beta);
    let (mut pl, _) = penalized(y, &eta, &beta, &s_lambda);
    if !pl.is_finite() {
        beta = initial_beta(design, y);
        eta = design.eta(&beta);
        pl = penalized(y, &eta, &beta, &s_lambda).0;
    }
    let mut trace = vec![pl];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        iterations = it + 1;
        let mu = eta.map(f64::exp);
        let h = design.xtwx(&mu) + &s_lambda;
        let grad = design.xt_v(&(y - &mu)) - &s_lambda * &beta;
        let factor = SpdFactor::new(&h).ok_or_else(|| rank_deficiency(design, &h))?;
        let step = factor.solve(&grad);
        let decrement = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_eta = design.eta(&cand);
            let (cand_pl, _) = penalized(y, &cand_eta, &cand, &s_lambda);
            if cand_pl.is_finite() && cand_pl >= pl {
                accepted = Some((cand, cand_eta, cand_pl));
                break;
            }
            t *= 0.5;
        }
        let Some((b, e, new_pl)) = accepted else {
            // no ascent possible: at the optimum to machine precision
            converged = decrement.abs() <= 1e-6 * (pl.abs() + 1.0);
            break;
        };
        let change = new_pl - pl;
        beta = b;
        eta = e;
        pl = new_pl;
        trace.push(pl);
        if change.abs() < config.tol * pl.abs().max(1.0) && decrement < 1e-6 * pl.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let mu = eta.map(f64::exp);
    let hessian = design.xtwx(&mu) + &s_lambda;
    let factor = SpdFactor::new(&hessian).ok_or_else(|| rank_deficiency(design, &hessian))?;
    let (penalized_loglik, loglik) = penalized(y, &eta, &beta, &s_lambda);
    Ok(PirlsFit {
        v_post: factor.inverse(),
        log_det_hessian: factor.log_det(),
        beta,
        eta,
        mu,
        penalized_loglik,
        loglik,
        hessian,
        s_lambda,
        iterations,
        converged,
        trace,
    })
}

/// Names the first block whose own diagonal sub-matrix is singular.
fn rank_deficiency(design: &PenalizedDesign, h: &DMatrix<f64>) -> Error {
    let ranges = design
        .block_ranges
        .iter()
        .zip(design.blocks.iter().map(|b| b.term.name.clone()))
        .chain(std::iter::once((&design.stratum_range, "strata".to_string())));
    for (r, name) in ranges {
        if r.is_empty() {
            continue;
        }
        let sub = h.view((r.start, r.start), (r.len(), r.len())).into_owned();
        if SpdFactor::new(&sub).is_none() {
            return Error::RankDeficient { block: name };
        }
    }
    Error::RankDeficient {
        block: "joint (confounded blocks)".into(),
    }
}
