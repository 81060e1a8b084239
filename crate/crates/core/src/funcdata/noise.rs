//! The sparse Gaussian observation noise: a fixed fraction of points receives i.i.d.
//! `N(0, s^2)` noise, all other points stay untouched.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation `s`, in units of the normalized output.
    pub std: f64,
    /// Fraction `r` of points that receive noise. Ignored when `coupled`.
    #[serde(default)]
    pub rate: f64,
    /// Single noise level: `r = s`.
    #[serde(default)]
    pub coupled: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::clean()
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            std: 0.0,
            rate: 0.0,
            coupled: true,
        }
    }

    /// The coupled "noise level" parameterization.
    pub fn level(s: f64) -> Self {
        NoiseSpec {
            std: s,
            rate: s,
            coupled: true,
        }
    }

    pub fn decoupled(std: f64, rate: f64) -> Self {
        NoiseSpec {
            std,
            rate,
            coupled: false,
        }
    }

    pub fn effective_rate(&self) -> f64 {
        if self.coupled {
            self.std
        } else {
            self.rate
        }
    }

    pub fn is_clean(&self) -> bool {
        self.std == 0.0 || self.effective_rate() == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::Config(format!(
                "noise std {} must be >= 0",
                self.std
            )));
        }
        let r = self.effective_rate();
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("noise rate {r} must lie in [0, 1]")));
        }
        Ok(())
    }
}

/// `round(x)` with ties going to the even neighbour.
pub fn round_half_even(x: f64) -> f64 {
    let f = x.floor();
    let diff = x - f;
    if diff > 0.5 {
        f + 1.0
    } else if diff < 0.5 {
        f
    } else if f % 2.0 == 0.0 {
        f
    } else {
        f + 1.0
    }
}

/// Number of noised points in a set of `n`.
pub fn noise_count(rate: f64, n: usize) -> usize {
    (round_half_even(rate * n as f64) as usize).min(n)
}

/// Adds noise to `y`, a flat buffer of points with `dim_y` channels each. Exactly
/// `round(r n)` points are chosen uniformly without replacement; each channel of a chosen
/// point gets independent `N(0, s^2)` noise. Returns the noisy copy and the point mask.
pub fn inject_noise<R: Rng + ?Sized>(
    y: &[f64],
    dim_y: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<bool>)> {
    noise.validate()?;
    if dim_y == 0 || y.len() % dim_y != 0 {
        return Err(Error::Shape(format!(
            "{} values do not split into points of width {dim_y}",
            y.len()
        )));
    }
    let n = y.len() / dim_y;
    let count = noise_count(noise.effective_rate(), n);
    let mut out = y.to_vec();
    let mut mask = vec![false; n];
    if count == 0 {
        return Ok((out, mask));
    }
    let mut chosen = index::sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        mask[i] = true;
        for c in 0..dim_y {
            let e: f64 = rng.sample(StandardNormal);
            out[i * dim_y + c] += noise.std * e;
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(2.4999), 2.0);
        assert_eq!(round_half_even(0.5), 0.0);
        assert_eq!(noise_count(0.25, 10), 2);
        assert_eq!(noise_count(0.3, 10), 3);
    }

    #[test]
    fn zero_level_is_identity() {
        let y: Vec<f64> = (0..17).map(|i| (i as f64).sin()).collect();
        let (out, mask) = inject_noise(
            &y,
            1,
            &NoiseSpec::level(0.0),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out, y);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn full_rate_masks_all() {
        let y = vec![0.0; 10];
        let (_, mask) = inject_noise(
            &y,
            1,
            &NoiseSpec::decoupled(0.3, 1.0),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn mask_cardinality_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=100 {
            for r in [0.0, 0.25, 0.5, 1.0] {
                let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
                let (out, mask) =
                    inject_noise(&y, 1, &NoiseSpec::decoupled(0.5, r), &mut rng).unwrap();
                assert_eq!(mask.iter().filter(|&&m| m).count(), noise_count(r, n));
                for i in 0..n {
                    if !mask[i] {
                        assert_eq!(out[i].to_bits(), y[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn masked_deviation_statistics() {
        let n = 10_000;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).cos()).collect();
        let (out, mask) = inject_noise(
            &y,
            1,
            &NoiseSpec::level(0.5),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5000);
        let devs: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| out[i] - y[i]).collect();
        let m = devs.iter().sum::<f64>() / devs.len() as f64;
        let sd =
            (devs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (devs.len() - 1) as f64).sqrt();
        assert!((0.49..=0.51).contains(&sd), "sd {sd}");
    }

    #[test]
    fn multichannel_points_are_noised_per_channel() {
        let y = vec![0.0; 30];
        let (out, mask) = inject_noise(
            &y,
            3,
            &NoiseSpec::decoupled(1.0, 0.5),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(mask.len(), 10);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5);
        for i in 0..10 {
            let touched = out[i * 3..i * 3 + 3].iter().any(|&v| v != 0.0);
            assert_eq!(touched, mask[i]);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NoiseSpec::decoupled(-0.1, 0.5).validate().is_err());
        assert!(NoiseSpec::decoupled(0.1, 1.5).validate().is_err());
        assert!(NoiseSpec::level(1.2).validate().is_err());
        assert!(inject_noise(&[0.0; 5], 2, &NoiseSpec::clean(), &mut rand::rng()).is_err());
    }
}
