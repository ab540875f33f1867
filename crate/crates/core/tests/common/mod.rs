#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survsmooth::simgen::{CovariateDist, EffectShape, EntryDist, SimCovariate, SimSpec};
use survsmooth::survdata::{CohortTable, SubjectInterval};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random integer-time cohort with ties, optional delayed entry and
/// optional yearly time-varying covariates.
pub fn random_cohort(seed: u64, n: usize, p: usize, delayed: bool, varying: bool) -> CohortTable {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    for s in 0..n {
        let entry = if delayed { r.random_range(0..4) as f64 } else { 0.0 };
        let exit = entry + r.random_range(1..6) as f64;
        let event = s == 0 || r.random_bool(0.5);
        let base: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        let loc = format!("L{}", s % 3);
        if varying {
            let mut t = entry;
            while t < exit {
                let cov = base.iter().map(|b| b + r.random_range(-0.5..0.5)).collect();
                rows.push(SubjectInterval {
                    subject_id: format!("S{s:03}"),
                    location_id: loc.clone(),
                    t_start: t,
                    t_stop: t + 1.0,
                    event: event && t + 1.0 == exit,
                    covariates: cov,
                });
                t += 1.0;
            }
        } else {
            rows.push(SubjectInterval {
                subject_id: format!("S{s:03}"),
                location_id: loc,
                t_start: entry,
                t_stop: exit,
                event,
                covariates: base,
            });
        }
    }
    let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
    CohortTable::new(rows, names).unwrap()
}

pub fn interval(id: &str, a: f64, b: f64, event: bool, x: f64) -> SubjectInterval {
    SubjectInterval {
        subject_id: id.into(),
        location_id: "L".into(),
        t_start: a,
        t_stop: b,
        event,
        covariates: vec![x],
    }
}

pub fn uniform(name: &str, lo: f64, hi: f64, effect: EffectShape) -> SimCovariate {
    SimCovariate {
        name: name.into(),
        dist: CovariateDist::Uniform { lo, hi },
        effect,
        yearly_step_sd: None,
    }
}

/// Thirty yearly steps with staggered entry.
pub fn yearly_spec(seed: u64, n: usize, locations: usize, sigma: f64, hazard: f64, covariates: Vec<SimCovariate>) -> SimSpec {
    SimSpec {
        n_subjects: n,
        n_locations: locations,
        frailty_sd: sigma,
        start_year: 1985,
        end_year: 2015,
        baseline_hazard: vec![hazard],
        entry: EntryDist::Uniform { latest: 2004 },
        censoring_rate: 0.02,
        covariates,
        seed,
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}
