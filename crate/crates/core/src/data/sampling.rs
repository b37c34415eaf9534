use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MultiLabelDataset;
use crate::error::{Error, Result};

/// Keeps one positive of `y`, chosen uniformly.
pub fn sample_single_positive(y: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let positives: Vec<usize> = (0..y.len()).filter(|&l| y[l] == 1.0).collect();
    if positives.is_empty() {
        return Err(Error::Labels("no positive to sample from".into()));
    }
    let pick = positives[rng.random_range(0..positives.len())];
    let mut z = vec![0.0; y.len()];
    z[pick] = 1.0;
    Ok(z)
}

/// One observed positive per item, drawn in item order from a stream seeded
/// by `seed`. The result is fixed for the lifetime of a training run.
pub fn freeze_single_positives(ds: &MultiLabelDataset, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.items()
        .iter()
        .map(|it| sample_single_positive(&it.y, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_is_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(
                sample_single_positive(&[0.0, 1.0, 0.0], &mut rng).unwrap(),
                vec![0.0, 1.0, 0.0]
            );
        }
    }

    #[test]
    fn draws_are_uniform_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut first = 0;
        for _ in 0..10_000 {
            let z = sample_single_positive(&[1.0, 1.0, 0.0], &mut rng).unwrap();
            assert_eq!(z[2], 0.0);
            first += z[0] as usize;
        }
        assert!((4850..=5150).contains(&first), "{first}");
    }

    #[test]
    fn empty_support_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_single_positive(&[0.0, 0.0], &mut rng).is_err());
    }
}
