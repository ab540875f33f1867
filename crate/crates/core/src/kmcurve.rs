//! Product-limit survival curves with delayed entry.
//!
//! A subject is at risk at `t` iff one of its intervals satisfies
//! `t_start < t <= t_stop`, so late entrants join the risk set only after
//! they are observed.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survdata::CohortTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMCurve {
    /// Distinct event times.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub n_risk: Vec<usize>,
    pub n_event: Vec<usize>,
    /// Final censoring times that are not also event times.
    pub censor_marks: Vec<f64>,
}

impl KMCurve {
    /// Survival just after `t` (step function, 1 before the first event).
    pub fn survival_at(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&s| s <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    entry: f64,
    exit: f64,
    event: bool,
    /// Last interval of its subject.
    last: bool,
}

/// One span per interval, plus the index of each subject's last interval.
fn interval_spans(cohort: &CohortTable) -> (Vec<Span>, BTreeMap<&str, usize>) {
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    let ivs = cohort.intervals();
    for (i, iv) in ivs.iter().enumerate() {
        let e = last.entry(iv.subject_id.as_str()).or_insert(i);
        if iv.t_stop > ivs[*e].t_stop {
            *e = i;
        }
    }
    let spans = ivs
        .iter()
        .enumerate()
        .map(|(i, iv)| Span {
            entry: iv.t_start,
            exit: iv.t_stop,
            event: iv.event,
            last: last[iv.subject_id.as_str()] == i,
        })
        .collect();
    (spans, last)
}

fn product_limit(spans: &[Span]) -> KMCurve {
    let mut times: Vec<f64> = spans.iter().filter(|s| s.event).map(|s| s.exit).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut entries: Vec<f64> = spans.iter().map(|s| s.entry).collect();
    let mut exits: Vec<f64> = spans.iter().map(|s| s.exit).collect();
    entries.sort_by(f64::total_cmp);
    exits.sort_by(f64::total_cmp);
    let mut survival = Vec::with_capacity(times.len());
    let mut n_risk = Vec::with_capacity(times.len());
    let mut n_event = Vec::with_capacity(times.len());
    let mut s = 1.0;
    for &t in &times {
        // entry < t minus exit < t
        let entered = entries.partition_point(|&e| e < t);
        let left = exits.partition_point(|&e| e < t);
        let r = entered - left;
        let d = spans.iter().filter(|sp| sp.event && sp.exit == t).count();
        s *= 1.0 - d as f64 / r as f64;
        survival.push(s);
        n_risk.push(r);
        n_event.push(d);
    }
    let mut censor_marks: Vec<f64> = spans
        .iter()
        .filter(|sp| sp.last && !sp.event && times.binary_search_by(|t| t.total_cmp(&sp.exit)).is_err())
        .map(|sp| sp.exit)
        .collect();
    censor_marks.sort_by(f64::total_cmp);
    censor_marks.dedup();
    KMCurve {
        times,
        survival,
        n_risk,
        n_event,
        censor_marks,
    }
}

/// Kaplan-Meier curves, one per level of `group` (sorted), or a single curve
/// labelled `"all"`. `group` may name a covariate, `location_id` or `subject_id`;
/// a subject's level is taken from its last interval.
///
/// Risk sets count intervals, so a subject with a gap in follow-up leaves the
/// risk set during the gap.
pub fn km_fit(cohort: &CohortTable, group: Option<&str>) -> Result<Vec<(String, KMCurve)>> {
    let (spans, last) = interval_spans(cohort);
    let mut groups: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    match group {
        None => {
            groups.insert("all".into(), spans);
        }
        Some(g) => {
            let labels = crate::smooths::design::cohort_group_labels(cohort, g)
                .map_err(|_| Error::MissingColumn(g.to_string()))?;
            for (i, span) in spans.into_iter().enumerate() {
                let sid = cohort.intervals()[i].subject_id.as_str();
                groups.entry(labels[last[sid]].clone()).or_default().push(span);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(label, sp)| (label, product_limit(&sp)))
        .collect())
}

/// Long CSV: `group,time,survival,n_risk,n_event,is_censor_mark`.
///
/// Censor marks are emitted as rows carrying the survival level in force.
pub fn write_km_csv<W: Write>(curves: &[(String, KMCurve)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "time", "survival", "n_risk", "n_event", "is_censor_mark"])?;
    for (label, c) in curves {
        let mut rows: Vec<(f64, f64, usize, usize, bool)> = c
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, c.survival[i], c.n_risk[i], c.n_event[i], false))
            .collect();
        rows.extend(
            c.censor_marks
                .iter()
                .map(|&t| (t, c.survival_at(t), 0, 0, true)),
        );
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, s, r, d, m) in rows {
            w.write_record([
                label.clone(),
                t.to_string(),
                s.to_string(),
                r.to_string(),
                d.to_string(),
                (m as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
