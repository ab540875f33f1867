//! Poisson pseudo-data representation of the Cox partial likelihood.
//!
//! At each distinct event time every interval at risk contributes one row with
//! its covariates and a 0/1 indicator of whether its event happens then. With a
//! free intercept per event time, the Poisson likelihood of these rows equals
//! the Breslow partial likelihood up to a factor that does not depend on the
//! covariate coefficients.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::smooths::PenalizedDesign;
use crate::survdata::{build_risk_sets, CohortTable, LOCATION_COL, SUBJECT_COL};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoData {
    pub y: Vec<f64>,
    /// Event-time level of each row.
    pub stratum: Vec<usize>,
    /// Source interval (row index into the cohort).
    pub interval: Vec<usize>,
    /// Event time of each stratum level.
    pub strata_times: Vec<f64>,
    pub events_per_stratum: Vec<usize>,
    pub covariate_names: Vec<String>,
    /// Column-major covariate values, aligned with `covariate_names`.
    pub covariates: Vec<Vec<f64>>,
    pub subject_id: Vec<String>,
    pub location_id: Vec<String>,
}

impl PseudoData {
    pub fn n_pseudo(&self) -> usize {
        self.y.len()
    }

    pub fn n_strata(&self) -> usize {
        self.strata_times.len()
    }

    pub fn n_events(&self) -> usize {
        self.events_per_stratum.iter().sum()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .map(|j| self.covariates[j].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Categorical labels for a grouping column (`location_id`, `subject_id`
    /// or a numeric covariate treated as a factor).
    pub fn group_labels(&self, name: &str) -> Result<Vec<String>> {
        match name {
            LOCATION_COL => Ok(self.location_id.clone()),
            SUBJECT_COL => Ok(self.subject_id.clone()),
            other => Ok(self.column(other)?.iter().map(|v| v.to_string()).collect()),
        }
    }

    /// Poisson means `d_k / n_k` of the stratum-only model, per row.
    pub fn null_weights(&self) -> Vec<f64> {
        let mut rows = vec![0usize; self.n_strata()];
        for &s in &self.stratum {
            rows[s] += 1;
        }
        self.stratum
            .iter()
            .map(|&s| self.events_per_stratum[s] as f64 / rows[s] as f64)
            .collect()
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// `sum_k (d_k log d_k - d_k)`: Poisson minus partial log-likelihood at the
    /// profiled stratum intercepts.
    pub fn breslow_constant(&self) -> f64 {
        self.events_per_stratum
            .iter()
            .map(|&d| {
                let d = d as f64;
                d * d.ln() - d
            })
            .sum()
    }

    /// Writes `y, stratum, subject_id, location_id, covariates...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y", "stratum", SUBJECT_COL, LOCATION_COL];
        header.extend(self.covariate_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for i in 0..self.n_pseudo() {
            let mut rec = vec![
                self.y[i].to_string(),
                self.strata_times[self.stratum[i]].to_string(),
                self.subject_id[i].clone(),
                self.location_id[i].clone(),
            ];
            rec.extend(self.covariates.iter().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expands a cohort into pseudo-data rows, ordered by event time then subject.
pub fn expand_pseudo(cohort: &CohortTable) -> Result<PseudoData> {
    let risk_sets = build_risk_sets(cohort)?;
    let ivs = cohort.intervals();
    let n_cov = cohort.covariate_names().len();
    let total: usize = risk_sets.iter().map(|r| r.at_risk.len()).sum();
    let mut out = PseudoData {
        y: Vec::with_capacity(total),
        stratum: Vec::with_capacity(total),
        interval: Vec::with_capacity(total),
        strata_times: risk_sets.iter().map(|r| r.event_time).collect(),
        events_per_stratum: risk_sets.iter().map(|r| r.events_at_time).collect(),
        covariate_names: cohort.covariate_names().to_vec(),
        covariates: vec![Vec::with_capacity(total); n_cov],
        subject_id: Vec::with_capacity(total),
        location_id: Vec::with_capacity(total),
    };
    for (k, rs) in risk_sets.iter().enumerate() {
        let mut members = rs.at_risk.clone();
        members.sort_by(|&a, &b| ivs[a].subject_id.cmp(&ivs[b].subject_id).then(a.cmp(&b)));
        for i in members {
            let iv = &ivs[i];
            let hit = iv.event && iv.t_stop == rs.event_time;
            out.y.push(if hit { 1.0 } else { 0.0 });
            out.stratum.push(k);
            out.interval.push(i);
            for (col, v) in out.covariates.iter_mut().zip(&iv.covariates) {
                col.push(*v);
            }
            out.subject_id.push(iv.subject_id.clone());
            out.location_id.push(iv.location_id.clone());
        }
    }
    Ok(out)
}

/// Poisson log-likelihood `sum y eta - exp(eta)` for 0/1 responses.
pub fn poisson_loglik(y: &[f64], eta: &[f64]) -> f64 {
    y.iter().zip(eta).map(|(y, e)| y * e - e.exp()).sum()
}

/// Poisson log-likelihood of pseudo-data with the stratum intercepts set to
/// their maximizers given the remaining linear predictor `eta`.
pub fn profile_poisson_loglik(pseudo: &PseudoData, eta: &[f64]) -> f64 {
    let k = pseudo.n_strata();
    let mut shift = vec![f64::NEG_INFINITY; k];
    for (&s, &e) in pseudo.stratum.iter().zip(eta) {
        shift[s] = shift[s].max(e);
    }
    let mut sums = vec![0.0; k];
    for (&s, &e) in pseudo.stratum.iter().zip(eta) {
        sums[s] += (e - shift[s]).exp();
    }
    let alpha: Vec<f64> = (0..k)
        .map(|j| (pseudo.events_per_stratum[j] as f64).ln() - sums[j].ln() - shift[j])
        .collect();
    let full: Vec<f64> = pseudo
        .stratum
        .iter()
        .zip(eta)
        .map(|(&s, &e)| e + alpha[s])
        .collect();
    poisson_loglik(&pseudo.y, &full)
}

/// Term coefficients of `beta`, accepting either the term part alone or the
/// full vector including stratum coefficients.
fn term_coefficients(design: &PenalizedDesign, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let pt = design.stratum_range.start;
    if beta.len() == pt || beta.len() == design.total_p {
        Ok(beta.rows(0, pt).into_owned())
    } else {
        Err(Error::Dimension {
            expected: pt,
            got: beta.len(),
        })
    }
}

/// Breslow partial log-likelihood evaluated directly from risk sets.
///
/// Each at-risk interval uses its own covariate values, so time-varying
/// covariates are resolved per risk set. Stratum coefficients, if present in
/// `beta`, are ignored.
pub fn partial_loglik(cohort: &CohortTable, beta: &DVector<f64>, design: &PenalizedDesign) -> Result<f64> {
    Ok(partial_loglik_grad(cohort, beta, design)?.0)
}

/// Partial log-likelihood and its gradient with respect to the term coefficients.
pub fn partial_loglik_grad(
    cohort: &CohortTable,
    beta: &DVector<f64>,
    design: &PenalizedDesign,
) -> Result<(f64, DVector<f64>)> {
    let b = term_coefficients(design, beta)?;
    let x = design.term_matrix_on_cohort(cohort)?;
    partial_loglik_matrix(cohort, &x, &b)
}

/// Partial log-likelihood for an explicit interval-level model matrix.
pub fn partial_loglik_matrix(
    cohort: &CohortTable,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    if x.ncols() != beta.len() {
        return Err(Error::Dimension {
            expected: x.ncols(),
            got: beta.len(),
        });
    }
    let eta = x * beta;
    let ivs = cohort.intervals();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(beta.len());
    for rs in build_risk_sets(cohort)? {
        let m = rs.at_risk.iter().map(|&i| eta[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let mut wx = DVector::zeros(beta.len());
        for &i in &rs.at_risk {
            let w = (eta[i] - m).exp();
            denom += w;
            wx.axpy(w, &x.row(i).transpose(), 1.0);
        }
        let d = rs.events_at_time as f64;
        ll -= d * (m + denom.ln());
        grad.axpy(-d / denom, &wx, 1.0);
        for &i in &rs.at_risk {
            if ivs[i].event && ivs[i].t_stop == rs.event_time {
                ll += eta[i];
                grad += x.row(i).transpose();
            }
        }
    }
    Ok((ll, grad))
}
