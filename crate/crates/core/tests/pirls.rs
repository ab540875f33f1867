mod common;

use nalgebra::{DMatrix, DVector};
use survsmooth::breakpoint::{default_grid, second_derivative_matrix};
use survsmooth::coxpois::{expand_pseudo, partial_loglik_grad, PseudoData};
use survsmooth::pirls::{fit_at_rho, fit_terms, pirls_fit, posterior_sample, LamlProblem, OuterConfig, PirlsConfig};
use survsmooth::simgen::{simulate_cohort, EffectShape};
use survsmooth::smooths::{DesignOptions, PenalizedDesign, TermKind, TermSpec};
use survsmooth::survdata::CohortTable;

fn sine_cohort(seed: u64, n: usize, locations: usize, sigma: f64) -> CohortTable {
    let spec = common::yearly_spec(
        seed,
        n,
        locations,
        sigma,
        0.05,
        vec![
            common::uniform(
                "x1",
                0.0,
                1.0,
                EffectShape::Sine {
                    amplitude: 1.0,
                    cycles: 1.0,
                    phase: 0.0,
                },
            ),
            common::uniform("x2", -1.0, 1.0, EffectShape::Linear { slope: 0.5 }),
        ],
    );
    simulate_cohort(&spec).unwrap().0
}

/// Penalized Poisson maximizer by plain Newton iterations with step halving.
fn newton_poisson(x: &DMatrix<f64>, y: &DVector<f64>, s: &DMatrix<f64>) -> DVector<f64> {
    let p = x.ncols();
    let obj = |b: &DVector<f64>| {
        let eta = x * b;
        y.dot(&eta) - eta.map(f64::exp).sum() - 0.5 * b.dot(&(s * b))
    };
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let mu = (x * &beta).map(f64::exp);
        let g = x.tr_mul(&(y - &mu)) - s * &beta;
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= mu[i];
        }
        let h = x.tr_mul(&xw) + s;
        let step = h.cholesky().unwrap().solve(&g);
        let mut t = 1.0;
        let f0 = obj(&beta);
        while obj(&(&beta + &step * t)) < f0 && t > 1e-10 {
            t *= 0.5;
        }
        beta += &step * t;
        if step.amax() * t < 1e-13 {
            break;
        }
    }
    beta
}

#[test]
fn unpenalized_fit_matches_independent_newton() {
    let c = common::random_cohort(5, 40, 2, true, false);
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = vec![TermSpec::linear("a", "x1"), TermSpec::linear("b", "x2")];
    let d = PenalizedDesign::build(&pseudo, &terms, DesignOptions::default()).unwrap();
    assert!(d.penalties.is_empty());
    let y = pseudo.y_vector();
    let fit = pirls_fit(&y, &d, &[], None, &PirlsConfig::default()).unwrap();
    let oracle = newton_poisson(&d.to_dense(), &y, &DMatrix::zeros(d.total_p, d.total_p));
    assert!((&fit.beta - &oracle).amax() < 1e-6, "{}", (&fit.beta - &oracle).amax());
}

#[test]
fn stratum_only_model_gives_log_event_rates() {
    let c = common::random_cohort(6, 30, 1, true, false);
    let pseudo = expand_pseudo(&c).unwrap();
    let d = PenalizedDesign::build(&pseudo, &[], DesignOptions::default()).unwrap();
    let fit = pirls_fit(&pseudo.y_vector(), &d, &[], None, &PirlsConfig::default()).unwrap();
    let mut rows = vec![0.0; pseudo.n_strata()];
    for &s in &pseudo.stratum {
        rows[s] += 1.0;
    }
    for (k, n) in rows.iter().enumerate() {
        let rate = pseudo.events_per_stratum[k] as f64 / n;
        assert!((fit.beta[d.stratum_range.start + k] - rate.ln()).abs() < 1e-12);
    }
}

#[test]
fn penalized_loglik_never_decreases() {
    let c = sine_cohort(3, 400, 10, 0.3);
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = vec![TermSpec::spline("s", "x1", 10), TermSpec::random_effect("re", "location_id")];
    let d = PenalizedDesign::build(&pseudo, &terms, DesignOptions::default()).unwrap();
    for lambda in [[0.0, 1e-3], [1.0, 1.0], [1e4, 1e2]] {
        let fit = pirls_fit(&pseudo.y_vector(), &d, &lambda, None, &PirlsConfig::default()).unwrap();
        assert!(fit.converged);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn huge_wiggle_penalty_gives_a_linear_smooth() {
    let c = sine_cohort(4, 400, 10, 0.0);
    let pseudo = expand_pseudo(&c).unwrap();
    let d = PenalizedDesign::build(&pseudo, &[TermSpec::spline("s", "x1", 10)], DesignOptions::default()).unwrap();
    let fit = pirls_fit(&pseudo.y_vector(), &d, &[1e10], None, &PirlsConfig::default()).unwrap();
    let basis = &d.blocks[0].basis;
    let (lo, hi) = (d.blocks[0].knots[0], *d.blocks[0].knots.last().unwrap());
    let (grid, h) = default_grid(lo, hi, 201);
    let dm = second_derivative_matrix(basis, &grid, h).unwrap();
    let curv = dm * fit.beta.rows(d.block_ranges[0].start, d.block_ranges[0].len());
    assert!(curv.amax() < 1e-5, "{}", curv.amax());
}

/// LAML for a ridge-penalized random effect, written out from its definition.
#[test]
fn ridge_laml_matches_closed_form() {
    let c = common::random_cohort(8, 30, 1, false, false);
    let pseudo = expand_pseudo(&c).unwrap();
    let d = PenalizedDesign::build(
        &pseudo,
        &[TermSpec::random_effect("re", "location_id")],
        DesignOptions::default(),
    )
    .unwrap();
    let x = d.to_dense();
    let y = pseudo.y_vector();
    let q = d.block_ranges[0].len();
    let p = d.total_p;
    for rho in [-2.0, 0.0, 1.5, 4.0] {
        let lambda: f64 = f64::exp(rho);
        let mut s = DMatrix::zeros(p, p);
        for i in d.block_ranges[0].clone() {
            s[(i, i)] = lambda;
        }
        let b = newton_poisson(&x, &y, &s);
        let eta = &x * &b;
        let ll = y.dot(&eta) - eta.map(f64::exp).sum();
        let mu = eta.map(f64::exp);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= mu[i];
        }
        let h = x.tr_mul(&xw) + &s;
        let logdet_h = h.determinant().ln();
        let pen = b.dot(&(&s * &b));
        // flat prior on the unpenalized stratum coefficients contributes (p - q)/2 log 2 pi
        let oracle = ll - 0.5 * pen + 0.5 * q as f64 * rho - 0.5 * logdet_h
            + 0.5 * (p - q) as f64 * (2.0 * std::f64::consts::PI).ln();
        let got = LamlProblem::new(&d, y.clone()).evaluate(&[rho], None).unwrap().value;
        assert!(common::rel_close(got, oracle, 1e-8, 0.0), "rho {rho}: {got} vs {oracle}");
    }
}

fn spline_re_design(seed: u64) -> (PseudoData, PenalizedDesign) {
    let c = sine_cohort(seed, 400, 12, 0.4);
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = vec![
        TermSpec::spline("s", "x1", 8),
        TermSpec::linear("l", "x2"),
        TermSpec::random_effect("re", "location_id"),
    ];
    let d = PenalizedDesign::build(&pseudo, &terms, DesignOptions { null_penalties: true }).unwrap();
    (pseudo, d)
}

#[test]
fn splitting_a_penalty_in_halves_leaves_laml_unchanged() {
    let (pseudo, d) = spline_re_design(21);
    let rho: Vec<f64> = (0..d.penalties.len()).map(|j| 0.5 * j as f64 - 0.3).collect();
    let base = LamlProblem::new(&d, pseudo.y_vector()).evaluate(&rho, None).unwrap().value;
    let mut split = d.clone();
    let mut half = split.penalties[0].clone();
    half.matrix *= 0.5;
    let mut other = half.clone();
    other.label = format!("{}_copy", half.label);
    split.penalties[0] = half;
    split.penalties.push(other);
    let mut rho2 = rho.clone();
    rho2.push(rho[0]);
    let got = LamlProblem::new(&split, pseudo.y_vector()).evaluate(&rho2, None).unwrap().value;
    assert!((got - base).abs() < 1e-10 * base.abs().max(1.0), "{got} vs {base}");
}

#[test]
fn laml_gradient_matches_central_differences() {
    for seed in 0..10u64 {
        let (pseudo, d) = spline_re_design(100 + seed);
        let mut problem = LamlProblem::new(&d, pseudo.y_vector());
        problem.pirls = PirlsConfig {
            max_iter: 400,
            tol: 1e-15,
        };
        let mut r = common::rng(seed);
        let rho: Vec<f64> = (0..d.penalties.len())
            .map(|_| rand::Rng::random_range(&mut r, -2.0..3.0))
            .collect();
        let center = problem.evaluate(&rho, None).unwrap();
        let h = 1e-4;
        for j in 0..rho.len() {
            let mut rp = rho.clone();
            let mut rm = rho.clone();
            rp[j] += h;
            rm[j] -= h;
            let fp = problem.evaluate_with(&rp, Some(&center.fit.beta), false).unwrap().value;
            let fm = problem.evaluate_with(&rm, Some(&center.fit.beta), false).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                common::rel_close(center.gradient[j], fd, 1e-3, 1e-6),
                "seed {seed} penalty {j}: {} vs {fd}",
                center.gradient[j]
            );
        }
    }
}

#[test]
fn edf_limits_at_the_rho_bounds() {
    let (pseudo, d) = spline_re_design(31);
    let k = pseudo.n_strata() as f64;
    let m = d.penalties.len();
    // every smooth and the linear term shrink away; strata stay free
    let hi = fit_at_rho(&pseudo, &d, &vec![15.0; m]).unwrap();
    assert!((hi.edf_total - k).abs() < 0.1, "{} vs {k}", hi.edf_total);
    // near-zero penalties: full rank of the model matrix, which loses one
    // direction to the random-effect / stratum intercept confounding
    let lo = fit_at_rho(&pseudo, &d, &vec![-15.0; m]).unwrap();
    let rank = (d.total_p - 1) as f64;
    assert!((lo.edf_total - rank).abs() < 0.1, "{} vs {rank}", lo.edf_total);

    let plain = PenalizedDesign::build(
        &pseudo,
        &[TermSpec::spline("s", "x1", 8), TermSpec::linear("l", "x2")],
        DesignOptions::default(),
    )
    .unwrap();
    let hi = fit_at_rho(&pseudo, &plain, &[15.0]).unwrap();
    assert!((hi.edf_total - (k + 2.0)).abs() < 0.1, "{}", hi.edf_total);
    let lo = fit_at_rho(&pseudo, &plain, &[-15.0]).unwrap();
    assert!((lo.edf_total - plain.total_p as f64).abs() < 0.1, "{}", lo.edf_total);
}

#[test]
fn aic_identity_and_edf_additivity() {
    let (pseudo, d) = spline_re_design(41);
    let fit = survsmooth::pirls::optimize_rho(&pseudo, &d, &vec![0.0; d.penalties.len()], &OuterConfig::default()).unwrap();
    assert_eq!(fit.aic, fit.aic_from_parts());
    let sum: f64 = fit.edf_per_term.iter().sum::<f64>() + pseudo.n_strata() as f64;
    assert!((sum - fit.edf_total).abs() < 1e-8);
}

#[test]
fn poisson_path_maximizes_penalized_partial_likelihood() {
    let c = common::random_cohort(9, 60, 2, false, false);
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = vec![TermSpec::linear("a", "x1"), TermSpec::spline("s", "x2", 5)];
    let d = PenalizedDesign::build(&pseudo, &terms, DesignOptions::default()).unwrap();
    let lambda = [2.0];
    let fit = pirls_fit(&pseudo.y_vector(), &d, &lambda, None, &PirlsConfig::default()).unwrap();
    let pt = d.stratum_range.start;
    let s = d.s_lambda(&lambda).view((0, 0), (pt, pt)).into_owned();
    let grad = |b: &DVector<f64>| partial_loglik_grad(&c, b, &d).unwrap().1 - &s * b;
    let mut b = DVector::zeros(pt);
    for _ in 0..50 {
        let g = grad(&b);
        let eps = 1e-6;
        let mut hess = DMatrix::zeros(pt, pt);
        for j in 0..pt {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[j] += eps;
            bm[j] -= eps;
            hess.set_column(j, &((grad(&bp) - grad(&bm)) / (2.0 * eps)));
        }
        let hess = (&hess + hess.transpose()) * -0.5;
        let step = hess.cholesky().unwrap().solve(&g);
        b += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    let got = fit.beta.rows(0, pt);
    assert!((got - &b).amax() < 1e-5, "{}", (got - &b).amax());
}

fn centered_mse(fit: &survsmooth::pirls::FitResult, name: &str) -> f64 {
    let t = fit.term(name).unwrap();
    let grid: Vec<f64> = (0..101).map(|i| 0.05 + 0.9 * i as f64 / 100.0).collect();
    let f = t.basis.design(&grid).unwrap() * fit.term_coefficients(name).unwrap();
    let diff: Vec<f64> = grid
        .iter()
        .zip(f.iter())
        .map(|(x, fx)| fx - (2.0 * std::f64::consts::PI * x).sin())
        .collect();
    let mean = diff.iter().sum::<f64>() / diff.len() as f64;
    diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64
}

#[test]
fn sine_smooth_is_recovered_and_beats_the_linear_limit() {
    let c = sine_cohort(51, 500, 10, 0.0);
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = [TermSpec::spline("s", "x1", 10)];
    let (d, fit) = fit_terms(&pseudo, &terms, DesignOptions::default(), &OuterConfig::default()).unwrap();
    let linear = fit_at_rho(&pseudo, &d, &[10f64.powi(10).ln()]).unwrap();
    let mse = centered_mse(&fit, "s");
    let mse_lin = centered_mse(&linear, "s");
    assert!(mse < 0.05, "{mse}");
    assert!(mse < 0.5 * mse_lin, "{mse} vs {mse_lin}");
}

#[test]
fn frailty_sd_recovered_over_seeds() {
    for seed in 0..10 {
        let spec = common::yearly_spec(seed, 6000, 200, 0.5, 0.03, vec![]);
        let c = simulate_cohort(&spec).unwrap().0;
        let pseudo = expand_pseudo(&c).unwrap();
        let (_, fit) = fit_terms(
            &pseudo,
            &[TermSpec::random_effect("re", "location_id")],
            DesignOptions::default(),
            &OuterConfig::default(),
        )
        .unwrap();
        let sd = fit.random_effect_sd("re").unwrap();
        assert!((sd - 0.5).abs() <= 0.15, "seed {seed}: {sd}");
    }
}

#[test]
fn posterior_draws_match_the_stated_normal() {
    let (pseudo, d) = spline_re_design(61);
    let fit = fit_at_rho(&pseudo, &d, &vec![1.0; d.penalties.len()]).unwrap();
    let b = 10_000;
    let draws = posterior_sample(&fit, b, 99).unwrap();
    assert_eq!(draws, posterior_sample(&fit, b, 99).unwrap());
    let p = fit.beta_hat.len();
    let mean = DVector::from_iterator(p, draws.column_iter().map(|c| c.sum() / b as f64));
    for j in 0..p {
        let se = (fit.v_post[(j, j)] / b as f64).sqrt();
        assert!((mean[j] - fit.beta_hat[j]).abs() < 3.0 * se + 1e-12, "coef {j}");
    }
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (b as f64 - 1.0);
    let rel = (&cov - &fit.v_post).norm() / fit.v_post.norm();
    assert!(rel < 0.1, "{rel}");
    assert!(fit.terms.iter().any(|t| t.kind == TermKind::RandomEffect));
}
