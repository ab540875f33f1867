//! Model selection: a few component-wise boosting steps add candidate terms,
//! then a refit with null-space shrinkage penalties removes the ones the data
//! do not support. The two phases alternate until the model stops changing.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxpois::{expand_pseudo, poisson_loglik, PseudoData};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::pirls::{optimize_rho, FitResult, OuterConfig};
use crate::smooths::design::build_block;
use crate::smooths::{DesignOptions, ModelSpec, PenalizedBlock, PenalizedDesign, TermSpec};
use crate::survdata::CohortTable;

const TRACE_TOL: f64 = 0.2;
const LOG_LAMBDA_RANGE: (f64, f64) = (-25.0, 25.0);
const GOLDEN_TOL: f64 = 1e-6;
const MIN_IMPROVEMENT: f64 = 1e-10;

/// Fixed heavy smoother `A = X (X'X + lambda_big S)^-1 X'` for one candidate.
#[derive(Debug, Clone)]
pub struct BaseSmoother {
    pub term: TermSpec,
    pub lambda_big: f64,
    pub target_edf: f64,
    /// `trace(A)` at `lambda_big`.
    pub trace: f64,
    x: DMatrix<f64>,
    /// `(X'X + lambda_big S)^-1`.
    inner_inv: DMatrix<f64>,
}

impl BaseSmoother {
    /// `A e` without forming `A`.
    pub fn apply(&self, e: &DVector<f64>) -> DVector<f64> {
        &self.x * (&self.inner_inv * self.x.tr_mul(e))
    }
}

fn smoother_trace(gram: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> Option<(f64, DMatrix<f64>)> {
    let m = gram + s * lambda;
    let inv = SpdFactor::new(&m)?.inverse();
    Some(((&inv * gram).trace(), inv))
}

/// Finds `lambda_big` with `trace(A) = target_edf` by bisection on `log lambda`.
///
/// Blocks whose unpenalized trace is already below the target get `lambda_big = 0`.
pub fn make_base_smoother(block: &PenalizedBlock, target_edf: f64) -> Result<BaseSmoother> {
    let x = block.columns.to_dense();
    let gram = x.tr_mul(&x);
    let p = gram.nrows();
    // a tiny ridge keeps rank-deficient blocks invertible
    let ridge = 1e-10 * gram.diagonal().amax().max(1e-300);
    let gram_r = &gram + DMatrix::identity(p, p) * ridge;
    // lambda_big is reported relative to the Frobenius-norm balanced penalty
    let s_norm = block.s_wiggle.norm();
    let s = &(&block.s_wiggle * if s_norm > 0.0 { gram.norm() / s_norm } else { 1.0 });
    let numerical = |m: &str| Error::Numerical(format!("base smoother for `{}`: {m}", block.term.name));
    let at = |lambda: f64| smoother_trace(&gram_r, s, lambda).ok_or_else(|| numerical("singular system"));
    let (t0, inv0) = at(0.0)?;
    let done = |lambda_big: f64, trace: f64, inner_inv: DMatrix<f64>| BaseSmoother {
        term: block.term.clone(),
        lambda_big,
        target_edf,
        trace,
        x: x.clone(),
        inner_inv,
    };
    if t0 <= target_edf + TRACE_TOL || !block.has_wiggle_penalty() {
        return Ok(done(0.0, t0, inv0));
    }
    let (mut lo, mut hi) = LOG_LAMBDA_RANGE;
    let (t_hi, _) = at(hi.exp())?;
    if t_hi > target_edf {
        log::warn!(
            "term `{}`: trace {t_hi:.3} at the largest lambda exceeds target {target_edf}; using lambda_big = 0",
            block.term.name
        );
        return Ok(done(0.0, t0, inv0));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (t, inv) = at(mid.exp())?;
        if (t - target_edf).abs() <= 0.01 * TRACE_TOL {
            return Ok(done(mid.exp(), t, inv));
        }
        if t > target_edf {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let (t, inv) = at(mid.exp())?;
    if (t - target_edf).abs() > TRACE_TOL {
        return Err(numerical("bisection did not reach the target trace"));
    }
    Ok(done(mid.exp(), t, inv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStep {
    pub step: usize,
    pub term: String,
    /// Multiple of the one-dimensional Newton step along `A e`.
    pub alpha: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BoostState {
    #[serde(skip)]
    pub eta: DVector<f64>,
    pub selected_terms: Vec<String>,
    pub history: Vec<BoostStep>,
    /// `mu - y` at the last evaluated step.
    #[serde(skip)]
    pub gradient: DVector<f64>,
    /// Set to `"no_improvement"` when boosting stopped early.
    pub stopped: Option<String>,
}

impl BoostState {
    pub fn new(eta: DVector<f64>) -> Self {
        Self {
            gradient: DVector::zeros(eta.len()),
            eta,
            ..Default::default()
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Best step along one candidate: `(alpha, loglik, direction)`.
fn line_search(
    smoother: &BaseSmoother,
    y: &DVector<f64>,
    eta: &DVector<f64>,
    mu: &DVector<f64>,
    e: &DVector<f64>,
) -> Option<(f64, f64, DVector<f64>)> {
    let f = smoother.apply(e);
    // rescale so that alpha = 1 is the Newton step of l(eta + alpha f)
    let g1: f64 = f.iter().zip(y.iter().zip(mu.iter())).map(|(f, (y, m))| f * (y - m)).sum();
    let h1: f64 = f.iter().zip(mu.iter()).map(|(f, m)| f * f * m).sum();
    if !(h1 > 0.0) || g1 == 0.0 || !g1.is_finite() {
        return None;
    }
    let dir = f * (g1 / h1);
    let ll = |alpha: f64| {
        y.iter()
            .zip(eta.iter().zip(dir.iter()))
            .map(|(y, (e, d))| {
                let v = e + alpha * d;
                y * v - v.exp()
            })
            .sum::<f64>()
    };
    let (alpha, value) = golden_max(ll, -2.0, 2.0, GOLDEN_TOL);
    Some((alpha, value, dir))
}

/// Runs up to `m` boosting steps from `state.eta` for the Poisson response `y`.
pub fn boost_steps(
    mut state: BoostState,
    candidates: &[BaseSmoother],
    m: usize,
    y: &DVector<f64>,
) -> Result<BoostState> {
    if m == 0 {
        return Err(Error::Spec("number of boosting steps must be >= 1".into()));
    }
    if state.eta.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: state.eta.len(),
        });
    }
    let mut current = poisson_loglik(y.as_slice(), state.eta.as_slice());
    for _ in 0..m {
        let mu = state.eta.map(f64::exp);
        let e = &mu - y;
        state.gradient = e.clone();
        let results: Vec<Option<(f64, f64, DVector<f64>)>> = candidates
            .par_iter()
            .map(|c| line_search(c, y, &state.eta, &mu, &e))
            .collect();
        let mut best: Option<(usize, f64, f64)> = None;
        for (j, r) in results.iter().enumerate() {
            if let Some((alpha, ll, _)) = r {
                if best.is_none_or(|(_, _, b)| *ll > b) {
                    best = Some((j, *alpha, *ll));
                }
            }
        }
        let Some((j, alpha, ll)) = best.filter(|(_, _, ll)| ll - current >= MIN_IMPROVEMENT) else {
            state.stopped = Some("no_improvement".into());
            break;
        };
        let dir = &results[j].as_ref().expect("chosen").2;
        state.eta += dir * alpha;
        current = ll;
        let name = candidates[j].term.name.clone();
        if !state.selected_terms.contains(&name) {
            state.selected_terms.push(name.clone());
        }
        state.history.push(BoostStep {
            step: state.history.len() + 1,
            term: name,
            alpha,
            loglik: ll,
        });
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy)]
pub struct SelectConfig {
    pub m_forward: usize,
    pub target_edf: f64,
    /// Terms with edf below this are dropped after a refit.
    pub drop_edf: f64,
    pub aic_tol: f64,
    pub max_outer: usize,
    pub outer: OuterConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            m_forward: 5,
            target_edf: 4.0,
            drop_edf: 0.1,
            aic_tol: 0.1,
            max_outer: 20,
            outer: OuterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub term: String,
    pub edf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitSummary {
    pub terms: Vec<String>,
    pub aic: f64,
    pub laml: f64,
    pub converged: bool,
    pub edf: Vec<TermEdf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub iteration: usize,
    pub boost: Vec<BoostStep>,
    pub boost_stopped: Option<String>,
    pub added: Vec<String>,
    pub refit: Option<RefitSummary>,
    pub dropped: Vec<String>,
    /// Refit without the dropped terms.
    pub after_drop: Option<RefitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub minimal: RefitSummary,
    pub base_smoothers: Vec<(String, f64, f64)>,
    pub iterations: Vec<OuterIteration>,
    pub stop_reason: String,
    /// 0 is the minimal model, otherwise an outer iteration.
    pub best_iteration: usize,
    pub final_terms: Vec<String>,
    pub final_aic: f64,
    /// Refits start from the previous log smoothing parameters.
    pub warm_start: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

fn summarize(fit: &FitResult) -> RefitSummary {
    RefitSummary {
        terms: fit.terms.iter().map(|t| t.name.clone()).collect(),
        aic: fit.aic,
        laml: fit.laml,
        converged: fit.converged,
        edf: fit
            .terms
            .iter()
            .map(|t| TermEdf {
                term: t.name.clone(),
                edf: t.edf,
            })
            .collect(),
    }
}

struct Refitter<'a> {
    pseudo: &'a PseudoData,
    spec: &'a ModelSpec,
    config: &'a SelectConfig,
    blocks: BTreeMap<String, PenalizedBlock>,
    rho_by_label: BTreeMap<String, f64>,
}

impl Refitter<'_> {
    fn block(&mut self, term: &TermSpec) -> Result<PenalizedBlock> {
        if let Some(b) = self.blocks.get(&term.name) {
            return Ok(b.clone());
        }
        let b = build_block(self.pseudo, term, DesignOptions { null_penalties: true })?;
        self.blocks.insert(term.name.clone(), b.clone());
        Ok(b)
    }

    /// Fits the terms named in `names`, in model-spec order.
    fn fit(&mut self, names: &[String]) -> Result<(PenalizedDesign, FitResult)> {
        let terms: Vec<TermSpec> = self
            .spec
            .terms
            .iter()
            .filter(|t| names.contains(&t.name))
            .cloned()
            .collect();
        let blocks = terms.iter().map(|t| self.block(t)).collect::<Result<Vec<_>>>()?;
        let design = PenalizedDesign::from_blocks(blocks, self.pseudo)?;
        let rho0: Vec<f64> = design
            .penalties
            .iter()
            .map(|p| self.rho_by_label.get(&p.label).copied().unwrap_or(0.0))
            .collect();
        let fit = optimize_rho(self.pseudo, &design, &rho0, &self.config.outer)?;
        if !fit.converged {
            log::warn!("refit with terms {names:?} did not fully converge");
        }
        for (label, r) in fit.penalty_labels.iter().zip(&fit.rho) {
            self.rho_by_label.insert(label.clone(), *r);
        }
        Ok((design, fit))
    }
}

/// Selection on a cohort; see [`select_model_pseudo`].
pub fn select_model(
    cohort: &CohortTable,
    spec: &ModelSpec,
    config: &SelectConfig,
) -> Result<(PenalizedDesign, FitResult, SelectionTrace)> {
    let pseudo = expand_pseudo(cohort)?;
    select_model_pseudo(&pseudo, spec, config)
}

/// Alternates boosting over candidate terms with penalized refits.
///
/// Terms dropped in a backward phase are not offered to boosting again.
/// The returned model is the iterate with the lowest AIC, the minimal model
/// included.
pub fn select_model_pseudo(
    pseudo: &PseudoData,
    spec: &ModelSpec,
    config: &SelectConfig,
) -> Result<(PenalizedDesign, FitResult, SelectionTrace)> {
    let mut spec = spec.clone();
    spec.normalize()?;
    let minimal: Vec<String> = spec.minimal_terms().iter().map(|t| t.name.clone()).collect();
    if minimal.is_empty() {
        return Err(Error::Spec("model spec needs a non-empty minimal model".into()));
    }
    let y = pseudo.y_vector();
    let mut refitter = Refitter {
        pseudo,
        spec: &spec,
        config,
        blocks: BTreeMap::new(),
        rho_by_label: BTreeMap::new(),
    };
    let (design0, fit0) = refitter.fit(&minimal)?;

    let candidates = spec.candidate_terms();
    let smoothers: Vec<BaseSmoother> = candidates
        .iter()
        .map(|t| {
            let block = build_block(pseudo, t, DesignOptions::default())?;
            make_base_smoother(&block, config.target_edf)
        })
        .collect::<Result<_>>()?;

    let mut trace = SelectionTrace {
        minimal: summarize(&fit0),
        base_smoothers: smoothers
            .iter()
            .map(|s| (s.term.name.clone(), s.lambda_big, s.trace))
            .collect(),
        iterations: Vec::new(),
        stop_reason: String::new(),
        best_iteration: 0,
        final_terms: minimal.clone(),
        final_aic: fit0.aic,
        warm_start: true,
        aborted: None,
    };
    let mut model: Vec<String> = minimal.clone();
    let mut excluded: Vec<String> = Vec::new();
    let mut eta = design0.eta(&fit0.beta_hat);
    let mut prev_aic = fit0.aic;
    let mut best = (design0, fit0);
    let mut stop_reason = format!("reached {} outer iterations", config.max_outer);

    for iteration in 1..=config.max_outer {
        let available: Vec<BaseSmoother> = smoothers
            .iter()
            .filter(|s| !model.contains(&s.term.name) && !excluded.contains(&s.term.name))
            .cloned()
            .collect();
        let mut record = OuterIteration {
            iteration,
            boost: vec![],
            boost_stopped: None,
            added: vec![],
            refit: None,
            dropped: vec![],
            after_drop: None,
        };
        let previous_model = model.clone();
        if !available.is_empty() {
            let state = boost_steps(BoostState::new(eta.clone()), &available, config.m_forward, &y)?;
            record.boost = state.history;
            record.boost_stopped = state.stopped;
            record.added = state.selected_terms;
            model.extend(record.added.iter().cloned());
        }
        if record.added.is_empty() {
            trace.iterations.push(record);
            stop_reason = if available.is_empty() {
                "no candidates left".into()
            } else {
                "boosting found no improvement".into()
            };
            break;
        }

        let refit = match refitter.fit(&model) {
            Ok(r) => r,
            Err(e) => {
                trace.aborted = Some(format!("refit failed: {e}"));
                trace.iterations.push(record);
                stop_reason = "aborted".into();
                break;
            }
        };
        record.refit = Some(summarize(&refit.1));
        let dropped: Vec<String> = refit
            .1
            .terms
            .iter()
            .filter(|t| !t.fixed_in_model && t.edf < config.drop_edf)
            .map(|t| t.name.clone())
            .collect();
        let (design, fit) = if dropped.is_empty() {
            refit
        } else {
            model.retain(|n| !dropped.contains(n));
            excluded.extend(dropped.iter().cloned());
            record.dropped = dropped;
            match refitter.fit(&model) {
                Ok(r) => {
                    record.after_drop = Some(summarize(&r.1));
                    r
                }
                Err(e) => {
                    trace.aborted = Some(format!("refit after drop failed: {e}"));
                    trace.iterations.push(record);
                    stop_reason = "aborted".into();
                    break;
                }
            }
        };
        let aic = fit.aic;
        eta = design.eta(&fit.beta_hat);
        trace.iterations.push(record);
        if aic < best.1.aic {
            best = (design, fit);
            trace.best_iteration = iteration;
        }
        let stable = same_set(&model, &previous_model) && (aic - prev_aic).abs() < config.aic_tol;
        prev_aic = aic;
        if stable {
            stop_reason = "model unchanged".into();
            break;
        }
    }
    trace.stop_reason = stop_reason;
    trace.final_terms = best.1.terms.iter().map(|t| t.name.clone()).collect();
    trace.final_aic = best.1.aic;
    Ok((best.0, best.1, trace))
}

fn same_set(a: &[String], b: &[String]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    a == b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooths::{cubic_spline_block, linear_block};

    fn xs(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37) % n) as f64 / n as f64).collect()
    }

    #[test]
    fn spline_smoother_hits_target_trace() {
        let block = cubic_spline_block(&xs(500), 10).unwrap();
        let s = make_base_smoother(&block, 4.0).unwrap();
        assert!((s.trace - 4.0).abs() <= 0.2, "trace {}", s.trace);
        assert!(s.lambda_big > 0.0);
    }

    #[test]
    fn linear_smoother_has_unit_trace() {
        let block = linear_block(TermSpec::linear("l", "x"), &xs(100)).unwrap();
        let s = make_base_smoother(&block, 4.0).unwrap();
        assert_eq!(s.lambda_big, 0.0);
        assert!((s.trace - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_stops_immediately() {
        let block = cubic_spline_block(&xs(200), 8).unwrap();
        let s = make_base_smoother(&block, 4.0).unwrap();
        let eta = DVector::from_element(200, (0.5f64).ln());
        let y = eta.map(f64::exp);
        let state = boost_steps(BoostState::new(eta), &[s], 3, &y).unwrap();
        assert!(state.history.is_empty());
        assert_eq!(state.stopped.as_deref(), Some("no_improvement"));
    }

    #[test]
    fn golden_section_finds_concave_max() {
        let (x, v) = golden_max(|a| -(a - 0.3) * (a - 0.3), -2.0, 2.0, 1e-8);
        assert!((x - 0.3).abs() < 1e-6);
        assert!(v <= 0.0);
    }
}
