//! Missing-modality simulation at an exact rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Instance, MissingPattern, Modality};
use crate::error::{Error, Result};

use super::config::MissingType;

/// `round(percent% · total)` with halves rounded up, in exact integers.
pub fn percent_of(total: usize, percent: u32) -> usize {
    (total * percent as usize + 50) / 100
}

/// Number of (text-missing, image-missing) instances for a split of `total`.
pub fn missing_counts(total: usize, missing_type: MissingType, rate: u32) -> Result<(usize, usize)> {
    if rate > 100 {
        return Err(Error::Config(format!("missing rate {rate} exceeds 100")));
    }
    Ok(match missing_type {
        MissingType::Text => (percent_of(total, rate), 0),
        MissingType::Image => (0, percent_of(total, rate)),
        MissingType::Both => {
            if !rate.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "missing rate {rate} must be even for missing_type=both"
                )));
            }
            // Two rounded halves can exceed an odd total at 100%.
            let half = percent_of(total, rate / 2);
            (half, half.min(total - half))
        }
    })
}

/// Removes modalities so that exactly the protocol's counts are text-only,
/// image-only and complete; which instances are chosen comes from a seeded
/// shuffle. Input instances must be complete.
pub fn apply_missing_pattern(
    instances: &[Instance],
    missing_type: MissingType,
    rate: u32,
    seed: u64,
) -> Result<Vec<Instance>> {
    if let Some(bad) = instances.iter().find(|i| i.mask() != MissingPattern::Full) {
        return Err(Error::Precondition(format!(
            "instance {} is already incomplete",
            bad.id
        )));
    }
    let (drop_text, drop_image) = missing_counts(instances.len(), missing_type, rate)?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b));
    let mut out = instances.to_vec();
    for (rank, &idx) in order.iter().enumerate() {
        if rank < drop_text {
            out[idx].drop_modality(Modality::Text)?;
        } else if rank < drop_text + drop_image {
            out[idx].drop_modality(Modality::Image)?;
        }
    }
    Ok(out)
}

/// Counts of (complete, text-missing, image-missing) instances.
pub fn pattern_counts(instances: &[Instance]) -> (usize, usize, usize) {
    instances.iter().fold((0, 0, 0), |(f, t, i), x| match x.mask() {
        MissingPattern::Full => (f + 1, t, i),
        MissingPattern::TextMissing => (f, t + 1, i),
        MissingPattern::ImageMissing => (f, t, i + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn full(n: usize) -> Vec<Instance> {
        (0..n as u64)
            .map(|id| Instance::new(id, Some(vec![1, 2]), Some(Tensor::zeros(&[1, 2])), 0).unwrap())
            .collect()
    }

    #[test]
    fn both_at_seventy_percent() {
        let out = apply_missing_pattern(&full(1000), MissingType::Both, 70, 1).unwrap();
        assert_eq!(pattern_counts(&out), (300, 350, 350));
        assert!(out
            .iter()
            .filter(|i| !i.has(Modality::Text))
            .all(|i| i.text().is_none()));
    }

    #[test]
    fn boundaries() {
        assert_eq!(
            pattern_counts(&apply_missing_pattern(&full(10), MissingType::Text, 0, 0).unwrap()),
            (10, 0, 0)
        );
        let out = apply_missing_pattern(&full(10), MissingType::Text, 100, 0).unwrap();
        assert!(out.iter().all(|i| !i.has(Modality::Text)));
        assert!(apply_missing_pattern(&full(10), MissingType::Both, 35, 0).is_err());
        assert!(apply_missing_pattern(&full(10), MissingType::Image, 101, 0).is_err());
    }

    #[test]
    fn seeded_assignment() {
        let a = apply_missing_pattern(&full(50), MissingType::Image, 30, 5).unwrap();
        assert_eq!(a, apply_missing_pattern(&full(50), MissingType::Image, 30, 5).unwrap());
        assert_ne!(a, apply_missing_pattern(&full(50), MissingType::Image, 30, 6).unwrap());
    }
}
