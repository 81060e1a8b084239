//! Covariance kernels, hyperparameter draws and prior function samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    /// Matern with smoothness 5/2.
    #[serde(alias = "matern52")]
    Matern,
    Periodic,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern => "matern",
            KernelFamily::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern" | "matern52" => Ok(KernelFamily::Matern),
            "periodic" => Ok(KernelFamily::Periodic),
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Half-open interval `[low, high)`; a degenerate interval `low == high` always yields `low`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange(pub f64, pub f64);

impl UniformRange {
    pub fn low(self) -> f64 {
        self.0
    }

    pub fn high(self) -> f64 {
        self.1
    }

    fn validate(self, what: &str) -> Result<()> {
        let UniformRange(lo, hi) = self;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "{what} range [{lo}, {hi}) must satisfy 0 < low <= high"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..self.1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "default_length_scale")]
    pub length_scale: UniformRange,
    #[serde(default = "default_output_scale")]
    pub output_scale: UniformRange,
    #[serde(default = "default_period")]
    pub period: UniformRange,
}

fn default_length_scale() -> UniformRange {
    UniformRange(0.6, 1.0)
}
fn default_output_scale() -> UniformRange {
    UniformRange(0.1, 1.0)
}
fn default_period() -> UniformRange {
    UniformRange(0.8, 1.2)
}

impl KernelSpec {
    /// Default hyperparameter ranges for a family.
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec {
            family,
            length_scale: default_length_scale(),
            output_scale: default_output_scale(),
            period: default_period(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.length_scale.validate("length_scale")?;
        self.output_scale.validate("output_scale")?;
        if self.family == KernelFamily::Periodic {
            self.period.validate("period")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub length_scale: f64,
    pub output_scale: f64,
    /// Only meaningful for the periodic family.
    pub period: f64,
}

impl KernelParams {
    pub fn variance(&self) -> f64 {
        self.output_scale * self.output_scale
    }

    /// Kernel value between two points of dimension `a.len()`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let l = self.length_scale;
        match self.family {
            KernelFamily::Rbf => self.variance() * (-0.5 * sq / (l * l)).exp(),
            KernelFamily::Matern => {
                let r = 5f64.sqrt() * sq.sqrt() / l;
                self.variance() * (1.0 + r + r * r / 3.0) * (-r).exp()
            }
            KernelFamily::Periodic => {
                let s = (std::f64::consts::PI * sq.sqrt() / self.period).sin();
                self.variance() * (-2.0 * s * s / (l * l)).exp()
            }
        }
    }
}

/// Draws one hyperparameter set, each coordinate uniform in its range.
pub fn sample_kernel_params<R: Rng + ?Sized>(
    spec: &KernelSpec,
    rng: &mut R,
) -> Result<KernelParams> {
    spec.validate()?;
    let length_scale = spec.length_scale.sample(rng);
    let output_scale = spec.output_scale.sample(rng);
    let period = match spec.family {
        KernelFamily::Periodic => spec.period.sample(rng),
        _ => spec.period.low(),
    };
    Ok(KernelParams {
        family: spec.family,
        length_scale,
        output_scale,
        period,
    })
}

/// Gram matrix over `xs`, a flat row-major buffer of points with `dim_x` coordinates.
pub fn gram_matrix(params: &KernelParams, xs: &[f64], dim_x: usize) -> DMatrix<f64> {
    let n = xs.len() / dim_x;
    let pt = |i: usize| &xs[i * dim_x..(i + 1) * dim_x];
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.variance();
        for j in 0..i {
            let v = params.eval(pt(i), pt(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-covariance between two point sets.
pub fn cross_gram(params: &KernelParams, a: &[f64], b: &[f64], dim_x: usize) -> DMatrix<f64> {
    let (na, nb) = (a.len() / dim_x, b.len() / dim_x);
    DMatrix::from_fn(na, nb, |i, j| {
        params.eval(
            &a[i * dim_x..(i + 1) * dim_x],
            &b[j * dim_x..(j + 1) * dim_x],
        )
    })
}

pub const JITTER_START: f64 = 1e-5;
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factor of `k + jitter * scale * I`, escalating the jitter tenfold from
/// `start` to [`JITTER_MAX`] until the factorization succeeds. Returns the factor and the
/// absolute jitter that was added.
pub fn jittered_cholesky(k: &DMatrix<f64>, scale: f64, start: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let mut rel = start;
    loop {
        let jitter = rel * scale;
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch.l(), jitter));
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::Numerical(format!(
                "cholesky failed on a {n}x{n} matrix even with jitter {jitter:e}"
            )));
        }
        rel = (rel * 10.0).min(JITTER_MAX);
    }
}

/// A function sample at `xs`: a draw from `N(0, K + jitter I)`. Also returns the jitter
/// variance actually used.
pub fn sample_function_with_jitter<R: Rng + ?Sized>(
    params: &KernelParams,
    xs: &[f64],
    dim_x: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let n = xs.len() / dim_x;
    if n == 0 {
        return Err(Error::Config(
            "cannot sample a function at zero points".into(),
        ));
    }
    let k = gram_matrix(params, xs, dim_x);
    let (l, jitter) = jittered_cholesky(&k, params.variance(), JITTER_START)?;
    let eps = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(((l * eps).iter().copied().collect(), jitter))
}

pub fn sample_function<R: Rng + ?Sized>(
    params: &KernelParams,
    xs: &[f64],
    dim_x: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_function_with_jitter(params, xs, dim_x, rng).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rbf(l: f64, s: f64) -> KernelParams {
        KernelParams {
            family: KernelFamily::Rbf,
            length_scale: l,
            output_scale: s,
            period: 1.0,
        }
    }

    #[test]
    fn degenerate_ranges_are_exact() {
        let spec = KernelSpec {
            family: KernelFamily::Rbf,
            length_scale: UniformRange(0.6, 0.6),
            output_scale: UniformRange(1.0, 1.0),
            period: UniformRange(1.0, 1.0),
        };
        let p = sample_kernel_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.length_scale, 0.6);
        assert_eq!(p.output_scale, 1.0);
    }

    #[test]
    fn params_lie_in_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in [
            KernelFamily::Rbf,
            KernelFamily::Matern,
            KernelFamily::Periodic,
        ] {
            let spec = KernelSpec::new(family);
            for _ in 0..1000 {
                let p = sample_kernel_params(&spec, &mut rng).unwrap();
                assert!((0.6..1.0).contains(&p.length_scale));
                assert!((0.1..1.0).contains(&p.output_scale));
                if family == KernelFamily::Periodic {
                    assert!((0.8..1.2).contains(&p.period));
                }
            }
        }
    }

    #[test]
    fn invalid_range_is_config_error() {
        let mut spec = KernelSpec::new(KernelFamily::Rbf);
        spec.length_scale = UniformRange(1.0, 0.5);
        assert!(matches!(
            sample_kernel_params(&spec, &mut rand::rng()),
            Err(Error::Config(_))
        ));
        spec.length_scale = UniformRange(-1.0, 0.5);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn length_scale_mean_monte_carlo() {
        let spec = KernelSpec::new(KernelFamily::Rbf);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_kernel_params(&spec, &mut rng).unwrap().length_scale)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // uniform on [0.6, 1.0): sd = 0.4 / sqrt(12)
        let se = 0.4 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.8).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn gram_closed_form_and_diagonal() {
        let k = gram_matrix(&rbf(0.6, 1.0), &[0.0, 0.6], 1);
        assert_eq!(k[(0, 0)], 1.0);
        assert!((k[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.60653).abs() < 1e-5);
        let p = KernelParams {
            family: KernelFamily::Periodic,
            length_scale: 0.7,
            output_scale: 0.3,
            period: 1.0,
        };
        let k = gram_matrix(&p, &[0.1, 0.4, -1.3], 1);
        for i in 0..3 {
            assert_eq!(k[(i, i)], 0.09);
        }
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [
            KernelFamily::Rbf,
            KernelFamily::Matern,
            KernelFamily::Periodic,
        ] {
            let p = KernelParams {
                family,
                length_scale: 0.7,
                output_scale: 0.8,
                period: 1.0,
            };
            let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k = gram_matrix(&p, &xs, 1);
            assert_eq!(k, k.transpose());
            let eig = k.symmetric_eigenvalues();
            assert!(
                eig.min() >= -1e-8 * p.variance(),
                "{family:?}: {}",
                eig.min()
            );
        }
    }

    #[test]
    fn duplicated_inputs_still_sample() {
        let y = sample_function(
            &rbf(0.8, 1.0),
            &[0.3, 0.3, 0.3, 1.0],
            1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_point_std_monte_carlo() {
        let p = rbf(0.8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| sample_function(&p, &[0.1], 1, &mut rng).unwrap()[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let target = (1.0 + JITTER_START).sqrt();
        assert!(sd >= 0.99 * target && sd <= 1.01 * target, "sd {sd}");
    }

    #[test]
    fn covariance_monte_carlo() {
        let p = rbf(0.7, 1.0);
        let xs = [-1.5, -0.4, 0.0, 0.9, 1.7];
        let k = gram_matrix(&p, &xs, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sums = DMatrix::<f64>::zeros(5, 5);
        let mut sq = DMatrix::<f64>::zeros(5, 5);
        for _ in 0..n {
            let y = sample_function(&p, &xs, 1, &mut rng).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let v = y[i] * y[j];
                    sums[(i, j)] += v;
                    sq[(i, j)] += v * v;
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let mean = sums[(i, j)] / n as f64;
                let var = sq[(i, j)] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                let expect = k[(i, j)] + if i == j { JITTER_START } else { 0.0 };
                assert!(
                    (mean - expect).abs() < 3.0 * se + 1e-12,
                    "({i},{j}) {mean} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn normalized_scale_monte_carlo() {
        let p = rbf(0.8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ys = Vec::new();
        while ys.len() < 100_000 {
            let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
            ys.extend(sample_function(&p, &xs, 1, &mut rng).unwrap());
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.97..=1.03).contains(&sd), "sd {sd}");
    }
}
