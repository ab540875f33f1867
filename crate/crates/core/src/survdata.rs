//! Counting-process survival records and risk sets.
//!
//! Each row of a cohort is one interval `(t_start, t_stop]` of a subject on
//! calendar time, carrying the covariate values in force over that interval
//! and a flag for whether the subject's event happened at `t_stop`. A subject
//! that enters observation late simply has its first `t_start` after the time
//! origin, which is how left truncation is represented.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT_COL: &str = "subject_id";
pub const LOCATION_COL: &str = "location_id";
pub const START_COL: &str = "t_start";
pub const STOP_COL: &str = "t_stop";
pub const EVENT_COL: &str = "event";

const RESERVED: [&str; 5] = [SUBJECT_COL, LOCATION_COL, START_COL, STOP_COL, EVENT_COL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectInterval {
    pub subject_id: String,
    pub location_id: String,
    pub t_start: f64,
    pub t_stop: f64,
    pub event: bool,
    /// Values aligned with [`CohortTable::covariate_names`].
    pub covariates: Vec<f64>,
}

impl SubjectInterval {
    /// True when the interval is under observation at `t`.
    #[inline]
    pub fn at_risk(&self, t: f64) -> bool {
        self.t_start < t && t <= self.t_stop
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fill empty covariate cells from the same subject's preceding interval.
    /// Empty cells without a preceding value remain an error.
    pub carry_forward: bool,
}

/// A validated collection of subject intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    intervals: Vec<SubjectInterval>,
    covariate_names: Vec<String>,
    distinct_event_times: Vec<f64>,
}

/// Intervals at risk at one distinct event time.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSet {
    pub event_time: f64,
    /// Indices into [`CohortTable::intervals`], in row order.
    pub at_risk: Vec<usize>,
    pub events_at_time: usize,
}

impl CohortTable {
    /// Validates and indexes a set of intervals.
    pub fn new(intervals: Vec<SubjectInterval>, covariate_names: Vec<String>) -> Result<Self> {
        for (row, iv) in intervals.iter().enumerate() {
            if iv.covariates.len() != covariate_names.len() {
                return Err(Error::Dimension {
                    expected: covariate_names.len(),
                    got: iv.covariates.len(),
                });
            }
            if !iv.t_start.is_finite() || !iv.t_stop.is_finite() {
                return Err(Error::Cell {
                    row: row + 1,
                    column: START_COL.into(),
                    message: "non-finite time".into(),
                });
            }
            if iv.t_start >= iv.t_stop {
                return Err(Error::EmptyInterval {
                    subject: iv.subject_id.clone(),
                    row: row + 1,
                });
            }
        }
        validate_subject_histories(&intervals)?;
        let distinct_event_times = distinct_event_times(&intervals);
        Ok(Self {
            intervals,
            covariate_names,
            distinct_event_times,
        })
    }

    pub fn intervals(&self) -> &[SubjectInterval] {
        &self.intervals
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn distinct_event_times(&self) -> &[f64] {
        &self.distinct_event_times
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn n_events(&self) -> usize {
        self.intervals.iter().filter(|iv| iv.event).count()
    }

    pub fn n_subjects(&self) -> usize {
        self.intervals
            .iter()
            .map(|iv| iv.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Column of a covariate over all intervals.
    pub fn covariate_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .covariate_index(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok(self.intervals.iter().map(|iv| iv.covariates[j]).collect())
    }
}

fn distinct_event_times(intervals: &[SubjectInterval]) -> Vec<f64> {
    let mut times: Vec<f64> = intervals
        .iter()
        .filter(|iv| iv.event)
        .map(|iv| iv.t_stop)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

fn validate_subject_histories(intervals: &[SubjectInterval]) -> Result<()> {
    let mut by_subject: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, iv) in intervals.iter().enumerate() {
        by_subject.entry(iv.subject_id.as_str()).or_default().push(i);
    }
    let mut subjects: Vec<_> = by_subject.into_iter().collect();
    subjects.sort_by_key(|(s, _)| *s);
    for (subject, mut rows) in subjects {
        rows.sort_by(|&a, &b| intervals[a].t_start.total_cmp(&intervals[b].t_start));
        for w in rows.windows(2) {
            let (prev, next) = (&intervals[w[0]], &intervals[w[1]]);
            if prev.t_stop > next.t_start {
                return Err(Error::OverlappingIntervals {
                    subject: subject.to_string(),
                    row: w[0].max(w[1]) + 1,
                });
            }
            if prev.event {
                return Err(Error::EventNotLast {
                    subject: subject.to_string(),
                    row: w[0] + 1,
                });
            }
        }
    }
    Ok(())
}

/// Reads a long-format cohort CSV.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<CohortTable> {
    load_cohort_with(path, &LoadOptions::default())
}

pub fn load_cohort_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<CohortTable> {
    let file = std::fs::File::open(path)?;
    read_cohort(file, opts)
}

pub fn read_cohort<R: Read>(reader: R, opts: &LoadOptions) -> Result<CohortTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyFile);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (i_subj, i_loc, i_start, i_stop, i_event) = (
        col(SUBJECT_COL)?,
        col(LOCATION_COL)?,
        col(START_COL)?,
        col(STOP_COL)?,
        col(EVENT_COL)?,
    );
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !RESERVED.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut intervals = Vec::new();
    // last seen covariate values per subject, for carry-forward
    let mut last_values: HashMap<String, Vec<f64>> = HashMap::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = r + 2;
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse = |i: usize| -> Result<f64> {
            let s = field(i);
            s.parse::<f64>().map_err(|_| Error::Cell {
                row,
                column: headers[i].to_string(),
                message: format!("malformed number `{s}`"),
            })
        };
        let subject_id = field(i_subj).to_string();
        let event = match field(i_event) {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Cell {
                    row,
                    column: EVENT_COL.into(),
                    message: format!("event must be 0 or 1, got `{other}`"),
                })
            }
        };
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (k, (i, name)) in cov_cols.iter().enumerate() {
            let s = field(*i);
            if s.is_empty() {
                let carried = opts
                    .carry_forward
                    .then(|| last_values.get(&subject_id).map(|v| v[k]))
                    .flatten();
                match carried {
                    Some(v) => covariates.push(v),
                    None => {
                        return Err(Error::Cell {
                            row,
                            column: name.clone(),
                            message: "missing value".into(),
                        })
                    }
                }
            } else {
                covariates.push(parse(*i)?);
            }
        }
        if opts.carry_forward {
            last_values.insert(subject_id.clone(), covariates.clone());
        }
        intervals.push(SubjectInterval {
            subject_id,
            location_id: field(i_loc).to_string(),
            t_start: parse(i_start)?,
            t_stop: parse(i_stop)?,
            event,
            covariates,
        });
    }
    if intervals.is_empty() {
        return Err(Error::EmptyFile);
    }
    let names = cov_cols.into_iter().map(|(_, n)| n).collect();
    CohortTable::new(intervals, names)
}

/// Writes the cohort in the same long format accepted by [`load_cohort`].
pub fn write_cohort<W: Write>(cohort: &CohortTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = RESERVED.to_vec();
    header.extend(cohort.covariate_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for iv in &cohort.intervals {
        let mut rec = vec![
            iv.subject_id.clone(),
            iv.location_id.clone(),
            iv.t_start.to_string(),
            iv.t_stop.to_string(),
            if iv.event { "1" } else { "0" }.to_string(),
        ];
        rec.extend(iv.covariates.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_cohort(cohort: &CohortTable, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_cohort(cohort, std::io::BufWriter::new(f))
}

/// One risk set per distinct event time, ordered by time (Breslow grouping of ties).
pub fn build_risk_sets(cohort: &CohortTable) -> Result<Vec<RiskSet>> {
    let times = cohort.distinct_event_times();
    if times.is_empty() {
        return Err(Error::NoEvents);
    }
    // intervals sorted by entry so each risk set scans only started intervals
    let mut order: Vec<usize> = (0..cohort.intervals.len()).collect();
    order.sort_by(|&a, &b| cohort.intervals[a].t_start.total_cmp(&cohort.intervals[b].t_start));
    let sets = times
        .iter()
        .map(|&t| {
            let started = order.partition_point(|&i| cohort.intervals[i].t_start < t);
            let mut at_risk: Vec<usize> = order[..started]
                .iter()
                .copied()
                .filter(|&i| t <= cohort.intervals[i].t_stop)
                .collect();
            at_risk.sort_unstable();
            let events_at_time = at_risk
                .iter()
                .filter(|&&i| cohort.intervals[i].event && cohort.intervals[i].t_stop == t)
                .count();
            RiskSet {
                event_time: t,
                at_risk,
                events_at_time,
            }
        })
        .collect();
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: &str, a: f64, b: f64, e: bool) -> SubjectInterval {
        SubjectInterval {
            subject_id: s.into(),
            location_id: "L1".into(),
            t_start: a,
            t_stop: b,
            event: e,
            covariates: vec![],
        }
    }

    fn read(text: &str) -> Result<CohortTable> {
        read_cohort(text.as_bytes(), &LoadOptions::default())
    }

    #[test]
    fn two_row_file() {
        let c = read(
            "subject_id,location_id,t_start,t_stop,event\nA,L,1985,1986,1\nB,L,1985,1986,0\n",
        )
        .unwrap();
        assert_eq!(c.distinct_event_times(), &[1986.0]);
        assert_eq!(c.intervals().len(), 2);
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let err = read(
            "subject_id,location_id,t_start,t_stop,event\nA,L,1985,1987,0\nA,L,1986,1988,0\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::OverlappingIntervals { .. }), "{err}");
        assert!(err.to_string().contains("overlapping intervals"));
    }

    #[test]
    fn event_before_later_interval_rejected() {
        let err = read(
            "subject_id,location_id,t_start,t_stop,event\nA,L,1985,1986,1\nA,L,1986,1987,0\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::EventNotLast { .. }));
    }

    #[test]
    fn malformed_cell_reports_row_and_column() {
        let err = read("subject_id,location_id,t_start,t_stop,event,x\nA,L,1985,1986,1,abc\n")
            .unwrap_err();
        match err {
            Error::Cell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(read(""), Err(Error::EmptyFile)));
        assert!(matches!(
            read("subject_id,location_id,t_start,t_stop,event\n"),
            Err(Error::EmptyFile)
        ));
    }

    #[test]
    fn missing_value_is_error_unless_carried_forward() {
        let text = "subject_id,location_id,t_start,t_stop,event,x\nA,L,0,1,0,3.5\nA,L,1,2,1,\n";
        assert!(matches!(read(text), Err(Error::Cell { .. })));
        let c = read_cohort(
            text.as_bytes(),
            &LoadOptions {
                carry_forward: true,
            },
        )
        .unwrap();
        assert_eq!(c.intervals()[1].covariates, vec![3.5]);
    }

    #[test]
    fn risk_set_simple() {
        let c = CohortTable::new(vec![iv("A", 0., 2., true), iv("B", 0., 3., false)], vec![])
            .unwrap();
        let rs = build_risk_sets(&c).unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].event_time, 2.0);
        assert_eq!(rs[0].at_risk, vec![0, 1]);
        assert_eq!(rs[0].events_at_time, 1);
    }

    #[test]
    fn late_entrant_excluded() {
        let c = CohortTable::new(
            vec![
                iv("A", 0., 2., true),
                iv("B", 0., 3., false),
                iv("C", 2.5, 4., false),
            ],
            vec![],
        )
        .unwrap();
        let rs = build_risk_sets(&c).unwrap();
        assert!(!rs[0].at_risk.contains(&2));
    }

    #[test]
    fn tied_events_grouped() {
        let c = CohortTable::new(
            vec![
                iv("A", 0., 5., true),
                iv("B", 0., 5., true),
                iv("C", 0., 6., false),
            ],
            vec![],
        )
        .unwrap();
        let rs = build_risk_sets(&c).unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].events_at_time, 2);
        assert_eq!(rs[0].at_risk.len(), 3);
    }

    #[test]
    fn no_events_is_error() {
        let c = CohortTable::new(vec![iv("A", 0., 2., false)], vec![]).unwrap();
        assert!(matches!(build_risk_sets(&c), Err(Error::NoEvents)));
    }

    #[test]
    fn inverted_interval_rejected() {
        assert!(matches!(
            CohortTable::new(vec![iv("A", 2., 2., false)], vec![]),
            Err(Error::EmptyInterval { .. })
        ));
    }
}
