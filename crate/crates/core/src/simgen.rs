//! Synthetic cohorts with a known discrete-time hazard.
//!
//! Each subject is followed on yearly intervals from its entry year. Within a
//! year the event probability is `1 - exp(-h0(year) * exp(sum_j f_j(x_j) + b))`
//! where `b` is the frailty of the subject's location. Alive subjects drop out
//! at each year end with probability `censoring_rate`; everyone still alive at
//! `end_year` is censored.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survdata::{CohortTable, SubjectInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EffectShape {
    Zero,
    Linear { slope: f64 },
    /// `amplitude * sin(2 pi cycles (x - lo) / (hi - lo) + phase)` over the covariate range.
    Sine {
        amplitude: f64,
        #[serde(default = "one")]
        cycles: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Hinge with slope `slope_before` below `breakpoint` and `slope_after` above.
    PiecewiseLinear {
        breakpoint: f64,
        slope_before: f64,
        slope_after: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateDist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateDist {
    fn range(&self) -> (f64, f64) {
        match *self {
            CovariateDist::Uniform { lo, hi } => (lo, hi),
            CovariateDist::Normal { mean, sd } => (mean - 3.0 * sd, mean + 3.0 * sd),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CovariateDist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub dist: CovariateDist,
    #[serde(default = "zero_effect")]
    pub effect: EffectShape,
    /// Yearly random-walk step sd; absent for time-invariant covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yearly_step_sd: Option<f64>,
}

fn zero_effect() -> EffectShape {
    EffectShape::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EntryDist {
    AtStart,
    /// Entry year uniform on `start_year..=latest`.
    Uniform { latest: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_subjects: usize,
    pub n_locations: usize,
    pub frailty_sd: f64,
    pub start_year: i32,
    pub end_year: i32,
    /// Yearly baseline hazard: one value, or one per year in `start_year..end_year`.
    pub baseline_hazard: Vec<f64>,
    pub entry: EntryDist,
    /// Yearly probability of dropping out after surviving a year.
    pub censoring_rate: f64,
    pub covariates: Vec<SimCovariate>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTruth {
    pub covariate: String,
    pub shape: EffectShape,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub effects: Vec<EffectTruth>,
    /// Log-frailty per location, in location order.
    pub frailty: Vec<f64>,
    /// `(covariate, breakpoint)` for hinge effects.
    pub breakpoints: Vec<(String, f64)>,
    pub n_events: usize,
    pub n_intervals: usize,
}

impl EffectShape {
    pub fn eval(&self, x: f64, range: (f64, f64)) -> f64 {
        match *self {
            EffectShape::Zero => 0.0,
            EffectShape::Linear { slope } => slope * x,
            EffectShape::Sine {
                amplitude,
                cycles,
                phase,
            } => {
                let u = (x - range.0) / (range.1 - range.0);
                amplitude * (2.0 * std::f64::consts::PI * cycles * u + phase).sin()
            }
            EffectShape::PiecewiseLinear {
                breakpoint,
                slope_before,
                slope_after,
            } => {
                let d = x - breakpoint;
                slope_before * d.min(0.0) + slope_after * d.max(0.0)
            }
        }
    }
}

impl SimSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn n_years(&self) -> usize {
        (self.end_year - self.start_year).max(0) as usize
    }

    fn baseline(&self, year: i32) -> f64 {
        if self.baseline_hazard.len() == 1 {
            self.baseline_hazard[0]
        } else {
            self.baseline_hazard[(year - self.start_year) as usize]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Simulation(m.to_string()));
        if self.n_subjects == 0 {
            return bad("spec yields zero expected events: no subjects");
        }
        if self.n_locations == 0 {
            return bad("n_locations must be >= 1");
        }
        if self.n_years() == 0 {
            return bad("end_year must be after start_year");
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad("censoring_rate must be in [0, 1)");
        }
        if !(self.frailty_sd >= 0.0 && self.frailty_sd.is_finite()) {
            return bad("frailty_sd must be finite and non-negative");
        }
        let n = self.baseline_hazard.len();
        if n != 1 && n != self.n_years() {
            return bad("baseline_hazard needs 1 or (end_year - start_year) values");
        }
        if self.baseline_hazard.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return bad("baseline hazard must be finite and non-negative");
        }
        if self.baseline_hazard.iter().all(|h| *h == 0.0) {
            return bad("spec yields zero expected events: baseline hazard is zero");
        }
        if let EntryDist::Uniform { latest } = self.entry {
            if latest < self.start_year || latest >= self.end_year {
                return bad("entry.latest must lie in [start_year, end_year)");
            }
        }
        for c in &self.covariates {
            if let CovariateDist::Uniform { lo, hi } = c.dist {
                if !(hi > lo) {
                    return bad("uniform covariate needs hi > lo");
                }
            }
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates a cohort and returns it with the generating truth.
pub fn simulate_cohort(spec: &SimSpec) -> Result<(CohortTable, TruthRecord)> {
    spec.validate()?;
    let frailty: Vec<f64> = {
        let mut rng = subject_rng(spec.seed, 0);
        let normal = Normal::new(0.0, spec.frailty_sd.max(0.0))
            .map_err(|e| Error::Simulation(e.to_string()))?;
        (0..spec.n_locations).map(|_| normal.sample(&mut rng)).collect()
    };
    let width = spec.n_locations.to_string().len();
    let sid_width = spec.n_subjects.to_string().len();
    let per_subject: Vec<Vec<SubjectInterval>> = (0..spec.n_subjects)
        .into_par_iter()
        .map(|s| simulate_subject(spec, s, &frailty, width, sid_width))
        .collect();
    let intervals: Vec<SubjectInterval> = per_subject.into_iter().flatten().collect();
    let names = spec.covariates.iter().map(|c| c.name.clone()).collect();
    let n_events = intervals.iter().filter(|iv| iv.event).count();
    let n_intervals = intervals.len();
    if n_events == 0 {
        return Err(Error::Simulation("simulation produced no events".into()));
    }
    let cohort = CohortTable::new(intervals, names)?;
    let effects = spec
        .covariates
        .iter()
        .map(|c| {
            let (lo, hi) = c.dist.range();
            let grid: Vec<f64> = (0..=100).map(|i| lo + (hi - lo) * i as f64 / 100.0).collect();
            let values = grid.iter().map(|&x| c.effect.eval(x, (lo, hi))).collect();
            EffectTruth {
                covariate: c.name.clone(),
                shape: c.effect.clone(),
                grid,
                values,
            }
        })
        .collect();
    let breakpoints = spec
        .covariates
        .iter()
        .filter_map(|c| match c.effect {
            EffectShape::PiecewiseLinear { breakpoint, .. } => Some((c.name.clone(), breakpoint)),
            _ => None,
        })
        .collect();
    Ok((
        cohort,
        TruthRecord {
            effects,
            frailty,
            breakpoints,
            n_events,
            n_intervals,
        },
    ))
}

fn simulate_subject(
    spec: &SimSpec,
    s: usize,
    frailty: &[f64],
    loc_width: usize,
    sid_width: usize,
) -> Vec<SubjectInterval> {
    let mut rng = subject_rng(spec.seed, s as u64 + 1);
    let loc = rng.random_range(0..spec.n_locations);
    let entry = match spec.entry {
        EntryDist::AtStart => spec.start_year,
        EntryDist::Uniform { latest } => rng.random_range(spec.start_year..=latest),
    };
    let mut x: Vec<f64> = spec.covariates.iter().map(|c| c.dist.draw(&mut rng)).collect();
    let ranges: Vec<(f64, f64)> = spec.covariates.iter().map(|c| c.dist.range()).collect();
    let subject_id = format!("S{:0w$}", s + 1, w = sid_width);
    let location_id = format!("L{:0w$}", loc + 1, w = loc_width);
    let mut rows = Vec::new();
    for year in entry..spec.end_year {
        if year > entry {
            for (j, c) in spec.covariates.iter().enumerate() {
                if let Some(step) = c.yearly_step_sd {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[j] = reflect(x[j] + step * z, &c.dist);
                }
            }
        }
        let lin: f64 = spec
            .covariates
            .iter()
            .enumerate()
            .map(|(j, c)| c.effect.eval(x[j], ranges[j]))
            .sum::<f64>()
            + frailty[loc];
        let p_event = 1.0 - (-spec.baseline(year) * lin.exp()).exp();
        let event = rng.random::<f64>() < p_event;
        rows.push(SubjectInterval {
            subject_id: subject_id.clone(),
            location_id: location_id.clone(),
            t_start: year as f64,
            t_stop: (year + 1) as f64,
            event,
            covariates: x.clone(),
        });
        if event {
            break;
        }
        if year + 1 < spec.end_year && rng.random::<f64>() < spec.censoring_rate {
            break;
        }
    }
    rows
}

fn reflect(v: f64, dist: &CovariateDist) -> f64 {
    match *dist {
        CovariateDist::Uniform { lo, hi } => {
            let w = hi - lo;
            let mut u = (v - lo).rem_euclid(2.0 * w);
            if u > w {
                u = 2.0 * w - u;
            }
            lo + u
        }
        CovariateDist::Normal { .. } => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base_spec() -> SimSpec {
        SimSpec {
            n_subjects: 200,
            n_locations: 10,
            frailty_sd: 0.0,
            start_year: 1990,
            end_year: 2000,
            baseline_hazard: vec![0.05],
            entry: EntryDist::Uniform { latest: 1995 },
            censoring_rate: 0.05,
            covariates: vec![SimCovariate {
                name: "x".into(),
                dist: CovariateDist::Uniform { lo: 0.0, hi: 1.0 },
                effect: EffectShape::Linear { slope: 1.0 },
                yearly_step_sd: Some(0.1),
            }],
            seed: 7,
        }
    }

    #[test]
    fn deterministic() {
        let a = simulate_cohort(&base_spec()).unwrap();
        let b = simulate_cohort(&base_spec()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_hazard_rejected() {
        let mut s = base_spec();
        s.baseline_hazard = vec![0.0];
        assert!(matches!(simulate_cohort(&s), Err(Error::Simulation(_))));
        let mut s = base_spec();
        s.n_subjects = 0;
        assert!(simulate_cohort(&s).is_err());
    }

    #[test]
    fn reflection_stays_in_range() {
        let d = CovariateDist::Uniform { lo: 0.0, hi: 1.0 };
        for v in [-2.3, -0.1, 0.5, 1.7, 3.2] {
            let r = reflect(v, &d);
            assert!((0.0..=1.0).contains(&r), "{v} -> {r}");
        }
    }

    #[test]
    fn hinge_shape() {
        let e = EffectShape::PiecewiseLinear {
            breakpoint: 60.0,
            slope_before: 0.0,
            slope_after: 0.05,
        };
        assert_eq!(e.eval(30.0, (0., 100.)), 0.0);
        assert!((e.eval(80.0, (0., 100.)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = base_spec();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SimSpec>(&json).unwrap(), s);
    }
}
