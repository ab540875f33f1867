mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use survsmooth::breakpoint::{default_grid, estimate_breakpoint, estimate_breakpoint_from, second_derivative_matrix, BreakpointOptions};
use survsmooth::coxpois::expand_pseudo;
use survsmooth::pirls::{fit_terms, OuterConfig};
use survsmooth::simgen::{simulate_cohort, EffectShape};
use survsmooth::smooths::{cubic_spline_block, DesignOptions, PenalizedBlock, TermBasis, TermSpec};

fn ls(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    x.clone().svd(true, true).solve(y, 1e-12).unwrap()
}

fn knot_range(b: &PenalizedBlock) -> (f64, f64) {
    (b.knots[0], *b.knots.last().unwrap())
}

#[test]
fn difference_matrix_matches_the_exact_spline_curvature() {
    let xs: Vec<f64> = (0..800).map(|i| (i as f64 / 799.0).powf(1.3) * 4.0).collect();
    let block = cubic_spline_block(&xs, 12).unwrap();
    let TermBasis::Spline { basis } = &block.basis else { unreachable!() };
    let beta = DVector::from_iterator(basis.dim(), (0..basis.dim()).map(|j| ((j * 7 % 5) as f64 - 2.0) * 0.3));
    let raw = basis.constraint().unwrap() * &beta;
    let (lo, hi) = knot_range(&block);
    let (grid, h) = default_grid(lo, hi, 201);
    let d2 = second_derivative_matrix(&block.basis, &grid, h).unwrap() * &beta;
    // a cubic piece has an exact central second difference; skip points with a knot inside (g - h, g + h)
    let mut checked = 0;
    for (g, v) in grid.iter().zip(d2.iter()) {
        if block.knots.iter().any(|t| (t - g).abs() < h) {
            continue;
        }
        let exact = basis.raw_second_derivative(&raw, *g);
        assert!((v - exact).abs() < 1e-7 * (1.0 + exact.abs()), "{g}: {v} vs {exact}");
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn projected_square_has_second_derivative_two() {
    let xs: Vec<f64> = (0..2000).map(|i| i as f64 / 1999.0).collect();
    let block = cubic_spline_block(&xs, 20).unwrap();
    let x = block.columns.to_dense();
    let mean = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
    let y = DVector::from_iterator(xs.len(), xs.iter().map(|v| v * v - mean));
    let beta = ls(&x, &y);
    let (lo, hi) = knot_range(&block);
    let (grid, h) = default_grid(lo, hi, 201);
    let d2 = second_derivative_matrix(&block.basis, &grid, h).unwrap() * beta;
    // f'' = 0 at the end knots pulls the projection away from x^2 in a
    // boundary layer a few knot spacings wide; compare on the central half
    let err = grid
        .iter()
        .zip(d2.iter())
        .filter(|(g, _)| (0.25..=0.75).contains(*g))
        .map(|(_, v)| (v - 2.0).abs())
        .fold(0.0, f64::max);
    assert!(err < 0.05, "{err}");
}

#[test]
fn halving_the_step_barely_moves_the_second_derivative() {
    // sin(pi x / 3) has zero curvature at both ends of [0, 3], as a natural spline does
    let xs: Vec<f64> = (0..500).map(|i| 3.0 * i as f64 / 499.0).collect();
    let block = cubic_spline_block(&xs, 12).unwrap();
    let y = DVector::from_iterator(xs.len(), xs.iter().map(|v| (std::f64::consts::PI * v / 3.0).sin()));
    let beta = ls(&block.columns.to_dense(), &y);
    let (lo, hi) = knot_range(&block);
    let (grid, h) = default_grid(lo, hi, 201);
    let full = second_derivative_matrix(&block.basis, &grid, h).unwrap() * &beta;
    let half = second_derivative_matrix(&block.basis, &grid, h / 2.0).unwrap() * &beta;
    let diff = (full - half).amax();
    assert!(diff < 1e-3, "{diff}");
}

#[test]
fn affine_rescaling_maps_the_breakpoint() {
    let xs: Vec<f64> = (0..400).map(|i| 100.0 * i as f64 / 399.0).collect();
    let hinge = |v: f64| 0.04 * (v - 60.0).max(0.0);
    let (a, b) = (0.01, -0.3);
    let scaled: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
    let opts = BreakpointOptions {
        b_samples: 200,
        seed: 5,
        ..Default::default()
    };
    let fit_on = |x: &[f64]| {
        let block = cubic_spline_block(x, 10).unwrap();
        let y = DVector::from_iterator(xs.len(), xs.iter().map(|&v| hinge(v)));
        let beta = ls(&block.columns.to_dense(), &y);
        let p = beta.len();
        let cov = DMatrix::identity(p, p) * 1e-4;
        estimate_breakpoint_from("s", "x", &block.basis, &beta, &cov, &opts).unwrap()
    };
    let r1 = fit_on(&xs);
    let r2 = fit_on(&scaled);
    let psi1 = r1.psi_hat;
    let psi2 = r2.psi_hat;
    assert!((a * psi1 + b - psi2).abs() < 1e-9, "{psi1} -> {psi2}");
    assert!((a * r1.ci_low + b - r2.ci_low).abs() < 1e-9);
    assert!((a * r1.ci_high + b - r2.ci_high).abs() < 1e-9);
}

fn hinge_fit_ci_width(seed: u64, n: usize) -> f64 {
    let spec = common::yearly_spec(
        seed,
        n,
        50,
        0.3,
        0.07,
        vec![survsmooth::simgen::SimCovariate {
            yearly_step_sd: Some(5.0),
            ..common::uniform(
                "defol",
                0.0,
                100.0,
                EffectShape::PiecewiseLinear {
                    breakpoint: 60.0,
                    slope_before: 0.0,
                    slope_after: 0.04,
                },
            )
        }],
    );
    let c = simulate_cohort(&spec).unwrap().0;
    let pseudo = expand_pseudo(&c).unwrap();
    let terms = [
        TermSpec::spline("s_defol", "defol", 15),
        TermSpec::random_effect("re", "location_id"),
    ];
    let (_, fit) = fit_terms(&pseudo, &terms, DesignOptions::default(), &OuterConfig::default()).unwrap();
    let r = estimate_breakpoint(
        &fit,
        "s_defol",
        &BreakpointOptions {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    if r.ci_high.is_finite() && r.ci_low.is_finite() {
        r.ci_high - r.ci_low
    } else {
        f64::INFINITY
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn doubling_the_sample_does_not_widen_the_median_interval() {
    let small = median((0..6).map(|s| hinge_fit_ci_width(s, 1500)).collect());
    let large = median((0..6).map(|s| hinge_fit_ci_width(100 + s, 3000)).collect());
    assert!(large <= small, "{large} vs {small}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_covariance_draws_reproduce_the_point_estimate(
        coefs in prop::collection::vec(-1.0f64..1.0, 9),
        seed in 0u64..1000,
    ) {
        let xs: Vec<f64> = (0..300).map(|i| i as f64 / 299.0).collect();
        let block = cubic_spline_block(&xs, 10).unwrap();
        let beta = DVector::from_vec(coefs);
        let cov = DMatrix::zeros(9, 9);
        let opts = BreakpointOptions { b_samples: 20, seed, ..Default::default() };
        let r = estimate_breakpoint_from("s", "x", &block.basis, &beta, &cov, &opts).unwrap();
        for d in &r.psi_samples {
            prop_assert_eq!(*d, Some(r.psi_hat));
        }
    }
}
