//! With-replacement context resampling for the bootstrapped variants.
//!
//! Points are put in a canonical order before resampling, so a permuted context yields
//! the same resampled multisets for the same seed.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::funcdata::PointSet;

/// Indices of `n` points sorted by `(x, y)` lexicographically.
pub(crate) fn canonical_order(
    x: &[f64],
    y: &[f64],
    n: usize,
    dim_x: usize,
    dim_y: usize,
) -> Vec<usize> {
    let key = |i: usize| {
        x[i * dim_x..(i + 1) * dim_x]
            .iter()
            .chain(&y[i * dim_y..(i + 1) * dim_y])
            .copied()
            .collect::<Vec<f64>>()
    };
    let keys: Vec<Vec<f64>> = (0..n).map(key).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// `members` resamples of `order`, each the same length as `order`.
pub(crate) fn resample<R: Rng + ?Sized>(
    order: &[usize],
    members: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = order.len();
    (0..members)
        .map(|_| (0..n).map(|_| order[rng.random_range(0..n)]).collect())
        .collect()
}

/// `b` with-replacement resamples of `ctx`, each with the same cardinality.
pub fn bootstrap_contexts<R: Rng + ?Sized>(
    ctx: &PointSet,
    b: usize,
    rng: &mut R,
) -> Result<Vec<PointSet>> {
    if ctx.is_empty() {
        return Err(Error::Config("cannot bootstrap an empty context".into()));
    }
    if b == 0 {
        return Err(Error::Config(
            "bootstrap member count must be at least 1".into(),
        ));
    }
    let order = canonical_order(&ctx.x, &ctx.y, ctx.len(), ctx.dim_x, ctx.dim_y);
    Ok(resample(&order, b, rng)
        .iter()
        .map(|idx| ctx.select(idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(n: usize) -> PointSet {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        PointSet::new(1, 1, x, y).unwrap()
    }

    #[test]
    fn singleton_members_are_identical() {
        let c = ctx(1);
        for m in bootstrap_contexts(&c, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap() {
            assert_eq!(m, c);
        }
    }

    #[test]
    fn reproducible_and_same_size() {
        let c = ctx(9);
        let a = bootstrap_contexts(&c, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = bootstrap_contexts(&c, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 9);
    }

    #[test]
    fn permutation_gives_same_members() {
        let c = ctx(12);
        let mut idx: Vec<usize> = (0..12).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let shuffled = c.select(&idx);
        let a = bootstrap_contexts(&c, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = bootstrap_contexts(&shuffled, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unique_fraction_approaches_one_minus_inv_e() {
        let c = ctx(50);
        let members = bootstrap_contexts(&c, 10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mean = members
            .iter()
            .map(|m| {
                let mut xs: Vec<u64> = m.x.iter().map(|v| v.to_bits()).collect();
                xs.sort_unstable();
                xs.dedup();
                xs.len() as f64 / 50.0
            })
            .sum::<f64>()
            / members.len() as f64;
        // exact expectation for n = 50 is 1 - (49/50)^50 = 0.6358
        assert!((0.62..=0.645).contains(&mean), "{mean}");
    }

    #[test]
    fn empty_context_rejected() {
        assert!(bootstrap_contexts(&PointSet::empty(1, 1), 2, &mut rand::rng()).is_err());
    }
}
