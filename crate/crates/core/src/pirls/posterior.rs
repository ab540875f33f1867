use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FitResult;
use crate::error::{Error, Result};

/// `B x p` draws from `N(beta_hat, V_post)`.
pub fn posterior_sample(fit: &FitResult, b: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_mvn(&fit.beta_hat, &fit.v_post, b, seed)
}

/// `B x p` draws from `N(mean, cov)`, one row per draw, deterministic in `seed`.
///
/// A covariance that fails to factor gets a growing diagonal jitter starting at 1e-10.
pub fn sample_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, b: usize, seed: u64) -> Result<DMatrix<f64>> {
    if b == 0 {
        return Err(Error::Spec("number of posterior draws must be >= 1".into()));
    }
    let p = mean.len();
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::Dimension {
            expected: p,
            got: cov.nrows(),
        });
    }
    let l = cholesky_lower(cov)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(b, p);
    let mut z = DVector::zeros(p);
    for r in 0..b {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let draw = mean + &l * &z;
        out.set_row(r, &draw.transpose());
    }
    Ok(out)
}

fn cholesky_lower(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = cov.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if cov.iter().all(|v| *v == 0.0) {
        // degenerate posterior: every draw is the mean
        return Ok(DMatrix::zeros(p, p));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.l());
    }
    let mut jitter = 1e-10;
    while jitter < 1e-2 {
        log::warn!("posterior covariance not positive definite; adding jitter {jitter:e}");
        let j = &sym + DMatrix::identity(p, p) * jitter;
        if let Some(c) = j.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical("posterior covariance is not positive definite".into()))
}
