use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding;

/// Draws `count` distinct items uniformly from `1..=vocab_size` minus
/// `exclude`, which must be sorted. Deterministic per `rng_seed`.
pub fn sample_negatives(vocab_size: usize, count: usize, exclude: &[u32], rng_seed: u64) -> Result<Vec<u32>> {
    debug_assert!(exclude.windows(2).all(|w| w[0] <= w[1]), "exclusions must be sorted");
    let excluded = exclude
        .iter()
        .filter(|&&i| i >= 1 && i as usize <= vocab_size)
        .fold((0usize, None), |(n, prev), &i| if prev == Some(i) { (n, prev) } else { (n + 1, Some(i)) })
        .0;
    let available = vocab_size - excluded;
    if available < count {
        return Err(Error::VocabularyTooSmall {
            available,
            requested: count,
        });
    }
    let mut rng = seeding::rng(rng_seed, &[0x6e65_67]);
    if count * 4 <= available {
        // Rejection sampling; few collisions at this density.
        let mut out: Vec<u32> = Vec::with_capacity(count);
        while out.len() < count {
            let item = rng.gen_range(1..=vocab_size as u32);
            if exclude.binary_search(&item).is_err() && !out.contains(&item) {
                out.push(item);
            }
        }
        Ok(out)
    } else {
        let pool: Vec<u32> = (1..=vocab_size as u32)
            .filter(|i| exclude.binary_search(i).is_err())
            .collect();
        Ok(index::sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_disjoint() {
        let exclude = [2, 4, 6, 8];
        let s = sample_negatives(10, 5, &exclude, 1).unwrap();
        assert_eq!(s.len(), 5);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert!(s.iter().all(|i| !exclude.contains(i) && (1..=10).contains(i)));
        assert_eq!(s, sample_negatives(10, 5, &exclude, 1).unwrap());
    }

    #[test]
    fn too_small_vocabulary() {
        assert!(matches!(
            sample_negatives(10, 7, &[1, 2, 3, 4], 0),
            Err(Error::VocabularyTooSmall {
                available: 6,
                requested: 7
            })
        ));
        assert_eq!(sample_negatives(10, 6, &[1, 2, 3, 4], 0).unwrap().len(), 6);
    }

    /// Each item's frequency over many draws stays within three binomial
    /// standard deviations, and the chi-square statistic is plausible.
    fn check_uniform(vocab: usize, count: usize, exclude: &[u32], draws: usize) {
        let mut freq = vec![0usize; vocab + 1];
        for seed in 0..draws as u64 {
            for i in sample_negatives(vocab, count, exclude, seed).unwrap() {
                freq[i as usize] += 1;
            }
        }
        let allowed = vocab - exclude.len();
        let p = count as f64 / allowed as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, &f) in freq.iter().enumerate().skip(1) {
            if exclude.contains(&(i as u32)) {
                assert_eq!(f, 0);
                continue;
            }
            assert!((f as f64 - expected).abs() <= 3.0 * sigma + 1.0, "item {i}: {f} vs {expected}");
            chi2 += (f as f64 - expected).powi(2) / expected;
        }
        // Mean allowed - 1, sd sqrt(2 (allowed - 1)); generous bound.
        let dof = (allowed - 1) as f64;
        assert!(chi2 < dof + 5.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
        assert_eq!(freq[0], 0);
    }

    #[test]
    fn uniform_sparse_regime() {
        check_uniform(20, 1, &[3, 7], 100_000);
    }

    #[test]
    fn uniform_dense_regime() {
        check_uniform(12, 8, &[1, 12], 20_000);
    }
}
