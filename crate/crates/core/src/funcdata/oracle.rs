//! Closed-form Gaussian-process posterior under the generating kernel.

use nalgebra::{DMatrix, DVector};

use super::kernel::{cross_gram, gram_matrix, jittered_cholesky, KernelParams};
use super::task::PointSet;
use crate::error::{Error, Result};

/// Predictive distribution of the latent function at the queries.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: DVector<f64>,
    /// Covariance of the latent function values (observation noise excluded).
    pub cov: DMatrix<f64>,
    /// Joint log density of the supplied query values under `N(mean, cov + obs_noise_var I)`.
    pub log_likelihood: Option<f64>,
}

/// Conditions the GP on `ctx` observed with variance `obs_noise_var` and predicts at
/// `query_x`. An empty context gives the prior.
pub fn gp_posterior_oracle(
    params: &KernelParams,
    ctx: &PointSet,
    obs_noise_var: f64,
    query_x: &[f64],
    query_y: Option<&[f64]>,
) -> Result<GpPosterior> {
    if ctx.dim_y != 1 {
        return Err(Error::Shape(
            "the oracle handles scalar outputs only".into(),
        ));
    }
    if !(obs_noise_var.is_finite() && obs_noise_var >= 0.0) {
        return Err(Error::Config(format!(
            "observation noise variance {obs_noise_var} must be >= 0"
        )));
    }
    let d = ctx.dim_x;
    let m = query_x.len() / d;
    let kqq = gram_matrix(params, query_x, d);
    let (mean, cov) = if ctx.is_empty() {
        (DVector::zeros(m), kqq)
    } else {
        let mut kcc = gram_matrix(params, &ctx.x, d);
        for i in 0..kcc.nrows() {
            kcc[(i, i)] += obs_noise_var;
        }
        // exact when well conditioned, jitter only as a fallback
        let l = match kcc.clone().cholesky() {
            Some(ch) => ch.l(),
            None => jittered_cholesky(&kcc, params.variance(), 1e-10)?.0,
        };
        let ch = nalgebra::Cholesky::pack_dirty(l);
        let kcq = cross_gram(params, &ctx.x, query_x, d);
        let y = DVector::from_column_slice(&ctx.y);
        let alpha = ch.solve(&y);
        let v = ch.solve(&kcq);
        let mean = kcq.transpose() * alpha;
        let mut cov = kqq - kcq.transpose() * v;
        cov = (&cov + cov.transpose()) * 0.5;
        (mean, cov)
    };
    let log_likelihood = match query_y {
        None => None,
        Some(y) => {
            if y.len() != m {
                return Err(Error::Shape(format!(
                    "{} query values for {m} queries",
                    y.len()
                )));
            }
            Some(mvn_log_pdf(
                &DVector::from_column_slice(y),
                &mean,
                &cov,
                obs_noise_var,
            )?)
        }
    };
    Ok(GpPosterior {
        mean,
        cov,
        log_likelihood,
    })
}

/// `log N(y; mean, cov + noise I)`.
pub fn mvn_log_pdf(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    noise: f64,
) -> Result<f64> {
    let n = y.len();
    let mut s = cov.clone();
    for i in 0..n {
        s[(i, i)] += noise;
    }
    let scale = (0..n).map(|i| s[(i, i)]).fold(0.0, f64::max).max(1e-12);
    let l = match s.clone().cholesky() {
        Some(ch) => ch.l(),
        None => jittered_cholesky(&s, scale, 1e-10)?.0,
    };
    let r = y - mean;
    let w = l
        .solve_lower_triangular(&r)
        .ok_or_else(|| Error::Numerical("singular covariance in log density".into()))?;
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (w.norm_squared() + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::kernel::KernelFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(family: KernelFamily) -> KernelParams {
        KernelParams {
            family,
            length_scale: 0.7,
            output_scale: 0.9,
            period: 1.1,
        }
    }

    /// Schur complement on the joint Gram matrix using an explicit inverse.
    fn brute(
        p: &KernelParams,
        xc: &[f64],
        yc: &[f64],
        noise: f64,
        xq: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let all: Vec<f64> = xc.iter().chain(xq).copied().collect();
        let mut joint = gram_matrix(p, &all, 1);
        let n = xc.len();
        for i in 0..n {
            joint[(i, i)] += noise;
        }
        let a = joint.view((0, 0), (n, n)).into_owned();
        let b = joint.view((0, n), (n, xq.len())).into_owned();
        let c = joint.view((n, n), (xq.len(), xq.len())).into_owned();
        let inv = a.try_inverse().unwrap();
        let mean = b.transpose() * &inv * DVector::from_column_slice(yc);
        let cov = c - b.transpose() * inv * b;
        (mean, cov)
    }

    #[test]
    fn empty_context_is_prior() {
        let p = params(KernelFamily::Rbf);
        let post =
            gp_posterior_oracle(&p, &PointSet::empty(1, 1), 0.0, &[-1.0, 0.3], None).unwrap();
        assert_eq!(post.mean.as_slice(), &[0.0, 0.0]);
        assert!((post.cov[(0, 0)] - 0.81).abs() < 1e-15);
        assert!((post.cov[(1, 1)] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn noiseless_interpolation() {
        let p = params(KernelFamily::Matern);
        let ctx = PointSet::new(1, 1, vec![-1.0, 0.2, 1.5], vec![0.3, -0.4, 1.1]).unwrap();
        let post = gp_posterior_oracle(&p, &ctx, 0.0, &[0.2], None).unwrap();
        assert!((post.mean[0] + 0.4).abs() < 1e-8);
        assert!(post.cov[(0, 0)] <= 1e-6);
    }

    #[test]
    fn matches_brute_force_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let family = [
                KernelFamily::Rbf,
                KernelFamily::Matern,
                KernelFamily::Periodic,
            ][trial % 3];
            let p = params(family);
            let nc = rng.random_range(1..=6);
            let nq = rng.random_range(1..=8 - nc);
            let xc: Vec<f64> = (0..nc).map(|_| rng.random_range(-2.0..2.0)).collect();
            let yc: Vec<f64> = (0..nc).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xq: Vec<f64> = (0..nq).map(|_| rng.random_range(-2.0..2.0)).collect();
            let noise = if trial % 2 == 0 { 0.05 } else { 0.3 };
            let ctx = PointSet::new(1, 1, xc.clone(), yc.clone()).unwrap();
            let post = gp_posterior_oracle(&p, &ctx, noise, &xq, None).unwrap();
            let (mean, cov) = brute(&p, &xc, &yc, noise, &xq);
            assert!((post.mean - mean).amax() < 1e-8);
            assert!((post.cov - cov).amax() < 1e-8);
        }
    }

    #[test]
    fn log_likelihood_of_single_query() {
        let p = params(KernelFamily::Rbf);
        let ctx = PointSet::new(1, 1, vec![0.0], vec![0.5]).unwrap();
        let post = gp_posterior_oracle(&p, &ctx, 0.1, &[0.4], Some(&[0.2])).unwrap();
        let var = post.cov[(0, 0)] + 0.1;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * var).ln()
            - (0.2 - post.mean[0]).powi(2) / (2.0 * var);
        assert!((post.log_likelihood.unwrap() - expect).abs() < 1e-12);
    }
}
