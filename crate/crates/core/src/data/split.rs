use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{indices_by_class, SpectralCurve};
use crate::error::{Error, Result};

/// Disjoint train/valid/test partition of a labeled curve set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SpectralCurve>,
    pub valid: Vec<SpectralCurve>,
    pub test: Vec<SpectralCurve>,
    pub test_rate: f64,
    pub seed: u64,
}

/// `(train, valid, test)` counts for a class of `n` samples: test takes
/// `round(n·r)`, valid `round(n·r·(1−r))`, train the remainder.
pub fn split_counts(n: usize, test_rate: f64) -> (usize, usize, usize) {
    let test = ((n as f64) * test_rate).round() as usize;
    let valid = ((n as f64) * test_rate * (1.0 - test_rate)).round() as usize;
    let test = test.min(n);
    let valid = valid.min(n - test);
    (n - test - valid, valid, test)
}

/// Stratified split in the ratio `(1−r)² : r(1−r) : r`.
///
/// Every curve must be labeled. Within each class the order is a seeded
/// shuffle; classes are visited in ascending label order.
pub fn split_dataset(curves: &[SpectralCurve], test_rate: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_rate > 0.0 && test_rate < 1.0) {
        return Err(Error::Config(format!("test_rate {test_rate} outside (0, 1)")));
    }
    if let Some(c) = curves.iter().find(|c| c.label.is_none()) {
        return Err(Error::Data(format!("curve `{}` has no label", c.source_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        test_rate,
        seed,
    };
    for (class, mut idx) in indices_by_class(curves) {
        if idx.len() < 3 {
            return Err(Error::Split {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let (_, n_valid, n_test) = split_counts(idx.len(), test_rate);
        let (test, rest) = idx.split_at(n_test);
        let (valid, train) = rest.split_at(n_valid);
        split.test.extend(test.iter().map(|&i| curves[i].clone()));
        split.valid.extend(valid.iter().map(|&i| curves[i].clone()));
        split.train.extend(train.iter().map(|&i| curves[i].clone()));
    }
    Ok(split)
}

/// Keeps `per_class_counts[c]` randomly chosen curves of each class `c`,
/// preserving the input order of the survivors.
pub fn make_imbalanced(train: &[SpectralCurve], per_class_counts: &[usize], seed: u64) -> Result<Vec<SpectralCurve>> {
    let groups = indices_by_class(train);
    let mut keep = vec![false; train.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, &requested) in per_class_counts.iter().enumerate() {
        let mut idx = groups.get(&class).cloned().unwrap_or_default();
        if requested > idx.len() {
            return Err(Error::Imbalance {
                class,
                requested,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..requested] {
            keep[i] = true;
        }
    }
    Ok(train
        .iter()
        .zip(keep)
        .filter(|&(_c, k)| k)
        .map(|(c, _k)| c.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_histogram;
    use std::collections::HashSet;

    fn labeled(classes: usize, per_class: usize) -> Vec<SpectralCurve> {
        (0..classes * per_class)
            .map(|i| SpectralCurve::new(vec![i as f64], Some(i % classes), format!("s{i}")))
            .collect()
    }

    #[test]
    fn ratio_counts() {
        assert_eq!(split_counts(100, 0.2), (64, 16, 20));
        assert_eq!(split_counts(100, 0.5), (25, 25, 50));
        assert_eq!(split_counts(100, 0.6), (16, 24, 60));
    }

    #[test]
    fn stratified_split_counts_per_class() {
        let curves = labeled(12, 100);
        let s = split_dataset(&curves, 0.2, 3).unwrap();
        assert_eq!(class_histogram(&s.train, 12), vec![64; 12]);
        assert_eq!(class_histogram(&s.valid, 12), vec![16; 12]);
        assert_eq!(class_histogram(&s.test, 12), vec![20; 12]);
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let curves = labeled(4, 25);
        for seed in 0..20 {
            let a = split_dataset(&curves, 0.3, seed).unwrap();
            assert_eq!(a, split_dataset(&curves, 0.3, seed).unwrap());
            let ids = |v: &[SpectralCurve]| v.iter().map(|c| c.source_id.clone()).collect::<HashSet<_>>();
            let (tr, va, te) = (ids(&a.train), ids(&a.valid), ids(&a.test));
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(tr.len() + va.len() + te.len(), curves.len());
        }
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let mut curves = labeled(2, 10);
        curves.push(SpectralCurve::new(vec![0.0], Some(2), "lonely"));
        assert!(matches!(
            split_dataset(&curves, 0.2, 0),
            Err(Error::Split { class: 2, count: 1 })
        ));
        assert!(split_dataset(&curves, 1.0, 0).is_err());
    }

    #[test]
    fn imbalance() {
        let curves = labeled(12, 64);
        assert_eq!(make_imbalanced(&curves, &[64; 12], 1).unwrap(), curves);
        let counts: Vec<usize> = (1..=12).map(|k| 5 * k).collect();
        let reduced = make_imbalanced(&curves, &counts, 1).unwrap();
        assert_eq!(class_histogram(&reduced, 12), counts);
        assert_eq!(reduced, make_imbalanced(&curves, &counts, 1).unwrap());
        assert!(matches!(
            make_imbalanced(&curves, &[65], 1),
            Err(Error::Imbalance {
                class: 0,
                requested: 65,
                available: 64
            })
        ));
    }
}
