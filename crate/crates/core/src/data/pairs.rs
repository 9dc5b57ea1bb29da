use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{indices_by_class, SpectralCurve};
use crate::error::{Error, Result};

/// Two curves and whether they share a class (`true` ⇔ label 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePair {
    pub curve_a: SpectralCurve,
    pub curve_b: SpectralCurve,
    pub same_class: bool,
}

/// Draws `n_pairs` index pairs `(a, b, same_class)`. Each pair is same-class
/// with probability 1/2; `a` is uniform over all labeled curves and `b` is
/// uniform over the other members of the matching (or non-matching) classes.
pub fn sample_pair_indices<R: Rng + ?Sized>(
    curves: &[SpectralCurve],
    n_pairs: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize, bool)>> {
    let groups = indices_by_class(curves);
    if groups.len() < 2 {
        return Err(Error::Pairing(groups.len()));
    }
    let labeled: Vec<usize> = groups.values().flatten().copied().collect();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = labeled[rng.random_range(0..labeled.len())];
        let class = curves[a].label.expect("grouped curves are labeled");
        let same = rng.random_bool(0.5);
        let b = if same {
            let members = &groups[&class];
            if members.len() == 1 {
                a
            } else {
                // Uniform over the class excluding `a`.
                let pos = members.iter().position(|&i| i == a).expect("a is a member");
                let k = rng.random_range(0..members.len() - 1);
                members[if k >= pos { k + 1 } else { k }]
            }
        } else {
            let others = labeled.len() - groups[&class].len();
            let mut k = rng.random_range(0..others);
            let mut chosen = None;
            for (&c, members) in &groups {
                if c == class {
                    continue;
                }
                if k < members.len() {
                    chosen = Some(members[k]);
                    break;
                }
                k -= members.len();
            }
            chosen.expect("index falls inside another class")
        };
        pairs.push((a, b, same));
    }
    Ok(pairs)
}

/// Seeded curve-pair sampler; see [`sample_pair_indices`].
pub fn sample_pairs(curves: &[SpectralCurve], n_pairs: usize, seed: u64) -> Result<Vec<CurvePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_pair_indices(curves, n_pairs, &mut rng)?
        .into_iter()
        .map(|(a, b, same_class)| CurvePair {
            curve_a: curves[a].clone(),
            curve_b: curves[b].clone(),
            same_class,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(classes: usize, per_class: usize) -> Vec<SpectralCurve> {
        (0..classes * per_class)
            .map(|i| SpectralCurve::new(vec![i as f64], Some(i % classes), format!("s{i}")))
            .collect()
    }

    #[test]
    fn same_class_fraction_concentrates() {
        let curves = labeled(12, 10);
        let pairs = sample_pairs(&curves, 10_000, 42).unwrap();
        let same = pairs.iter().filter(|p| p.same_class).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&same), "{same}");
        for p in &pairs {
            assert_eq!(p.same_class, p.curve_a.label == p.curve_b.label);
            if p.same_class {
                assert_ne!(p.curve_a.source_id, p.curve_b.source_id);
            }
        }
    }

    #[test]
    fn seeded_reproduction() {
        let curves = labeled(3, 5);
        assert_eq!(
            sample_pairs(&curves, 50, 7).unwrap(),
            sample_pairs(&curves, 50, 7).unwrap()
        );
        assert_ne!(
            sample_pairs(&curves, 50, 7).unwrap(),
            sample_pairs(&curves, 50, 8).unwrap()
        );
    }

    #[test]
    fn single_class_is_rejected() {
        let curves = labeled(1, 5);
        assert!(matches!(sample_pairs(&curves, 3, 0), Err(Error::Pairing(1))));
    }
}
