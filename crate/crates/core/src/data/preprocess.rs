use crate::error::{Error, Result};

/// Pointwise mean of `k` repeated acquisitions.
pub fn average_shots(shots: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if shots.is_empty() || k == 0 {
        return Err(Error::Data("no shots to average".into()));
    }
    if shots.len() != k {
        return Err(Error::Data(format!("expected {k} shots, got {}", shots.len())));
    }
    let len = shots[0].len();
    if let Some(bad) = shots.iter().find(|s| s.len() != len) {
        return Err(Error::Data(format!("shot length mismatch: {} vs {}", len, bad.len())));
    }
    let mut mean = vec![0.0; len];
    for shot in shots {
        mean.iter_mut().zip(shot).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    Ok(mean)
}

/// Laser-on minus laser-off acquisition.
pub fn background_subtract(on: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    if on.len() != off.len() {
        return Err(Error::Data(format!(
            "background length mismatch: {} vs {}",
            on.len(),
            off.len()
        )));
    }
    Ok(on.iter().zip(off).map(|(a, b)| a - b).collect())
}

/// Maps a curve onto `[0, 1]` by `(x - min) / (max - min)`. A constant curve
/// maps to all zeros.
pub fn min_max_normalize(curve: &[f64]) -> Vec<f64> {
    let min = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; curve.len()];
    }
    curve.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

/// Outcome of [`ingest`] over a batch of raw acquisitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub curves: usize,
    /// Indices of inputs whose background-subtracted curve was constant.
    pub constant: Vec<usize>,
}

/// Runs the acquisition pipeline on each `(on_shots, off_shots)` sample:
/// average `k` shots of each, subtract background, min-max normalize.
pub fn ingest(samples: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)], k: usize) -> Result<(Vec<Vec<f64>>, IngestReport)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut report = IngestReport {
        curves: samples.len(),
        constant: Vec::new(),
    };
    for (i, (on, off)) in samples.iter().enumerate() {
        let raw = background_subtract(&average_shots(on, k)?, &average_shots(off, k)?)?;
        let norm = min_max_normalize(&raw);
        if norm.iter().all(|&v| v == 0.0) {
            log::warn!("sample {i}: constant curve normalized to zeros");
            report.constant.push(i);
        }
        out.push(norm);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn averaging() {
        let c = vec![1.0, 5.0, -2.0];
        assert_eq!(average_shots(&vec![c.clone(); 5], 5).unwrap(), c);
        assert_eq!(
            average_shots(&[vec![0.0, 2.0], vec![2.0, 0.0]], 2).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(average_shots(&[], 5).is_err());
        assert!(average_shots(&[vec![0.0], vec![0.0, 1.0]], 2).is_err());
    }

    #[test]
    fn averaging_shrinks_noise_by_sqrt_k() {
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, sigma).unwrap();
        let shots: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..1000).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mean = average_shots(&shots, 5).unwrap();
        let m = mean.iter().sum::<f64>() / 1000.0;
        let sd = (mean.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        let expected = sigma / 5f64.sqrt();
        assert!((sd - expected).abs() < 0.2 * expected, "sd {sd} vs {expected}");
    }

    #[test]
    fn subtraction() {
        assert_eq!(background_subtract(&[5.0, 7.0], &[1.0, 2.0]).unwrap(), vec![4.0, 5.0]);
        assert_eq!(background_subtract(&[3.0, 3.0], &[3.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(background_subtract(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[7.0, 7.0, 7.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ingest_flags_constant_curves() {
        let flat = vec![vec![1.0, 1.0]; 5];
        let bumpy = vec![vec![1.0, 3.0]; 5];
        let (curves, report) = ingest(&[(flat.clone(), flat.clone()), (bumpy, flat)], 5).unwrap();
        assert_eq!(report.constant, vec![0]);
        assert_eq!(curves[1], vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn normalized_range_and_idempotence(v in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let n = min_max_normalize(&v);
            let min = n.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let constant = v.iter().all(|&x| x == v[0]);
            if !constant {
                prop_assert!(min.abs() < 1e-12 && (max - 1.0).abs() < 1e-12);
            }
            let twice = min_max_normalize(&n);
            for (a, b) in n.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn subtraction_then_normalization_ignores_common_offset(
            on in prop::collection::vec(0.0f64..100.0, 8),
            off in prop::collection::vec(0.0f64..10.0, 8),
            c in -50.0f64..50.0,
        ) {
            let base = min_max_normalize(&background_subtract(&on, &off).unwrap());
            let on2: Vec<f64> = on.iter().map(|v| v + c).collect();
            let off2: Vec<f64> = off.iter().map(|v| v + c).collect();
            let shifted = min_max_normalize(&background_subtract(&on2, &off2).unwrap());
            for (a, b) in base.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
