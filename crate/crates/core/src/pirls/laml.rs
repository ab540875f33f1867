//! Laplace-approximate marginal likelihood of the smoothing parameters.
//!
//! With `H = X'WX + S_lambda` evaluated at the penalized estimate,
//!
//! ```text
//! LAML(rho) = l(b) - b'S_lambda b / 2 + log|S_lambda|_+ / 2 - log|H| / 2 + (M0 / 2) log(2 pi)
//! ```
//!
//! where `|.|_+` is the product of positive eigenvalues over the joint range
//! space of the penalties and `M0` the dimension of the unpenalized space.
//! The gradient is exact for the Poisson log link: it accounts for the
//! dependence of `W = diag(mu)` on the estimate through `db/drho`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::inner::{pirls_fit, PirlsConfig, PirlsFit};
use crate::error::{Error, Result};
use crate::linalg::{range_space, SpdFactor};
use crate::smooths::PenalizedDesign;

const RANGE_TOL: f64 = 1e-10;

/// Range-space projections of the penalties, grouped by the block they act on.
#[derive(Debug, Clone)]
pub struct PenaltyStructure {
    groups: Vec<PenaltyGroup>,
    /// Rank of the total penalty.
    pub rank: usize,
}

#[derive(Debug, Clone)]
struct PenaltyGroup {
    members: Vec<usize>,
    /// `U' S_j U` for each member, in the group's range space.
    projected: Vec<DMatrix<f64>>,
}

impl PenaltyStructure {
    pub fn new(design: &PenalizedDesign) -> Self {
        let mut by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, p) in design.penalties.iter().enumerate() {
            by_block.entry(p.block).or_default().push(j);
        }
        let mut rank = 0;
        let groups = by_block
            .into_values()
            .map(|members| {
                let total = members
                    .iter()
                    .map(|&j| design.penalties[j].matrix.clone())
                    .reduce(|a, b| a + b)
                    .expect("non-empty group");
                let (u, _) = range_space(&total, RANGE_TOL);
                rank += u.ncols();
                let projected = members
                    .iter()
                    .map(|&j| u.transpose() * &design.penalties[j].matrix * &u)
                    .collect();
                PenaltyGroup { members, projected }
            })
            .collect();
        Self { groups, rank }
    }

    /// `log|S_lambda|_+` and its derivatives with respect to `rho`.
    pub fn log_pdet(&self, lambda: &[f64]) -> Result<(f64, DVector<f64>)> {
        let mut value = 0.0;
        let mut grad = DVector::zeros(lambda.len());
        for g in &self.groups {
            let r = g.projected[0].nrows();
            if r == 0 {
                continue;
            }
            let mut a = DMatrix::zeros(r, r);
            for (m, &j) in g.projected.iter().zip(&g.members) {
                a += m * lambda[j];
            }
            let f = SpdFactor::new(&a)
                .ok_or_else(|| Error::Numerical("penalty not positive definite on its range".into()))?;
            value += f.log_det();
            for (m, &j) in g.projected.iter().zip(&g.members) {
                grad[j] = lambda[j] * f.solve_matrix(m).trace();
            }
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone)]
pub struct LamlEval {
    pub value: f64,
    /// Derivative of LAML with respect to `rho`.
    pub gradient: DVector<f64>,
    pub fit: PirlsFit,
}

/// LAML evaluator bound to one design and response.
pub struct LamlProblem<'a> {
    pub design: &'a PenalizedDesign,
    pub y: DVector<f64>,
    pub penalties: PenaltyStructure,
    pub pirls: PirlsConfig,
}

impl<'a> LamlProblem<'a> {
    pub fn new(design: &'a PenalizedDesign, y: DVector<f64>) -> Self {
        Self {
            penalties: PenaltyStructure::new(design),
            design,
            y,
            pirls: PirlsConfig::default(),
        }
    }

    pub fn evaluate(&self, rho: &[f64], warm: Option<&DVector<f64>>) -> Result<LamlEval> {
        self.evaluate_with(rho, warm, true)
    }

    pub fn evaluate_with(
        &self,
        rho: &[f64],
        warm: Option<&DVector<f64>>,
        with_gradient: bool,
    ) -> Result<LamlEval> {
        let lambda: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        let fit = pirls_fit(&self.y, self.design, &lambda, warm, &self.pirls)?;
        let (log_pdet, pdet_grad) = self.penalties.log_pdet(&lambda)?;
        let p = self.design.total_p;
        let null_dim = (p - self.penalties.rank) as f64;
        let beta = &fit.beta;
        let value = fit.penalized_loglik + 0.5 * log_pdet - 0.5 * fit.log_det_hessian
            + 0.5 * null_dim * (2.0 * std::f64::consts::PI).ln();
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite LAML".into()));
        }
        let mut gradient = DVector::zeros(rho.len());
        if with_gradient {
            let hinv = &fit.v_post;
            let lev = self.design.leverages(hinv);
            for (j, pen) in self.design.penalties.iter().enumerate() {
                let r = pen.range.clone();
                let bj = beta.rows(r.start, r.len());
                let sb = &pen.matrix * bj;
                let quad = bj.dot(&sb) * lambda[j];
                // tr(H^-1 S_j) over the block
                let hsub = hinv.view((r.start, r.start), (r.len(), r.len()));
                let tr_hs = hsub.component_mul(&pen.matrix).sum() * lambda[j];
                // db/drho_j = -H^-1 lambda_j S_j b
                let mut full_sb = DVector::zeros(p);
                full_sb.rows_mut(r.start, r.len()).copy_from(&(sb * lambda[j]));
                let db = -(hinv * full_sb);
                let deta = self.design.eta(&db);
                let tr_w: f64 = fit
                    .mu
                    .iter()
                    .zip(deta.iter())
                    .zip(lev.iter())
                    .map(|((m, d), l)| m * d * l)
                    .sum();
                gradient[j] = -0.5 * quad + 0.5 * pdet_grad[j] - 0.5 * (tr_hs + tr_w);
            }
        }
        Ok(LamlEval {
            value,
            gradient,
            fit,
        })
    }
}

/// LAML at `rho` for the given pseudo-data response and design.
pub fn laml_value(y: &DVector<f64>, design: &PenalizedDesign, rho: &[f64]) -> Result<f64> {
    let problem = LamlProblem::new(design, y.clone());
    let eval = problem.evaluate_with(rho, None, false)?;
    if !eval.fit.converged {
        return Err(Error::Numerical(
            "inner fit did not converge; Hessian may be indefinite".into(),
        ));
    }
    Ok(eval.value)
}
