use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{min_max_normalize, SpectralCurve};
use crate::error::{Error, Result};

/// A Gaussian emission peak, in sample units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

/// Generative recipe for one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClassSpec {
    pub peaks: Vec<Peak>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub baseline_drift_amplitude: f64,
}

impl SyntheticClassSpec {
    fn validate(&self, class: usize, curve_length: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("class {class}: {m}")));
        if self.peaks.is_empty() {
            return fail("needs at least one peak".into());
        }
        for p in &self.peaks {
            if !(0.0..curve_length as f64).contains(&p.center) {
                return fail(format!("peak center {} outside [0, {curve_length})", p.center));
            }
            if !(p.width > 0.0) || !(p.amplitude > 0.0) {
                return fail("peak width and amplitude must be positive".into());
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.baseline_drift_amplitude >= 0.0) {
            return fail("noise_sigma and baseline_drift_amplitude must be non-negative".into());
        }
        Ok(())
    }

    /// Noise-free, drift-free peak profile before normalization.
    pub fn profile(&self, curve_length: usize) -> Vec<f64> {
        (0..curve_length)
            .map(|x| {
                let x = x as f64;
                self.peaks
                    .iter()
                    .map(|p| p.amplitude * (-(x - p.center).powi(2) / (2.0 * p.width * p.width)).exp())
                    .sum()
            })
            .collect()
    }
}

/// Draws `n_per_class` curves per class: Gaussian peaks plus a smooth random
/// baseline plus white noise, min-max normalized. Output is class-major.
pub fn generate_synthetic(
    specs: &[SyntheticClassSpec],
    n_per_class: usize,
    curve_length: usize,
    seed: u64,
) -> Result<Vec<SpectralCurve>> {
    if specs.len() < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {}", specs.len())));
    }
    if curve_length < 2 {
        return Err(Error::Data("curve_length must be at least 2".into()));
    }
    for (c, s) in specs.iter().enumerate() {
        s.validate(c, curve_length)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (curve_length - 1) as f64;
    let mut curves = Vec::with_capacity(specs.len() * n_per_class);
    for (class, spec) in specs.iter().enumerate() {
        let profile = spec.profile(curve_length);
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for i in 0..n_per_class {
            let drift = spec.baseline_drift_amplitude;
            let (offset, slope, wiggle, freq, phase): (f64, f64, f64, f64, f64) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let raw: Vec<f64> = profile
                .iter()
                .enumerate()
                .map(|(x, &p)| {
                    let t = x as f64 / span;
                    let base = drift * (offset + slope * t + wiggle * (std::f64::consts::PI * freq * t + phase).sin());
                    p + base + noise.sample(&mut rng)
                })
                .collect();
            curves.push(SpectralCurve::new(
                min_max_normalize(&raw),
                Some(class),
                format!("synthetic-c{class:02}-{i:04}"),
            ));
        }
    }
    Ok(curves)
}

/// Twelve classes with 3–5 peaks each at class-specific positions, noise
/// σ = 0.02 and mild baseline drift. Fixed, independent of any run seed.
pub fn default_class_specs(curve_length: usize) -> Vec<SyntheticClassSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let len = curve_length as f64;
    (0..12)
        .map(|_| {
            let n = rng.random_range(3..=5);
            let peaks = (0..n)
                .map(|_| Peak {
                    center: (rng.random_range(0.05..0.95) * len).round(),
                    width: rng.random_range(0.004..0.02) * len,
                    amplitude: rng.random_range(0.3..1.0),
                })
                .collect();
            SyntheticClassSpec {
                peaks,
                noise_sigma: 0.02,
                baseline_drift_amplitude: 0.05,
            }
        })
        .collect()
}

/// Two classes with one identical peak that differs only in position.
pub fn position_only_specs(centers: (f64, f64), width: f64, noise_sigma: f64) -> Vec<SyntheticClassSpec> {
    [centers.0, centers.1]
        .into_iter()
        .map(|center| SyntheticClassSpec {
            peaks: vec![Peak {
                center,
                width,
                amplitude: 1.0,
            }],
            noise_sigma,
            baseline_drift_amplitude: 0.0,
        })
        .collect()
}

/// The `generate` command's input: dataset-wide settings plus one `[[class]]`
/// table per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpecFile {
    #[serde(default = "default_curve_length")]
    pub curve_length: usize,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(rename = "class", default)]
    pub classes: Vec<SyntheticClassSpec>,
}

fn default_curve_length() -> usize {
    1000
}

fn default_n_per_class() -> usize {
    100
}

impl Default for SyntheticSpecFile {
    fn default() -> Self {
        Self {
            curve_length: 1000,
            n_per_class: 100,
            classes: default_class_specs(1000),
        }
    }
}

impl SyntheticSpecFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        if spec.classes.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "spec declares zero classes".into(),
            });
        }
        for (c, s) in spec.classes.iter().enumerate() {
            s.validate(c, spec.curve_length)?;
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<SpectralCurve>> {
        generate_synthetic(&self.classes, self.n_per_class, self.curve_length, seed)
    }
}

/// 1-based line containing byte `offset`.
pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }

    #[test]
    fn noiseless_curve_is_normalized_peak_sum() {
        let specs = position_only_specs((50.0, 140.0), 6.0, 0.0);
        let curves = generate_synthetic(&specs, 2, 200, 9).unwrap();
        assert_eq!(curves[0].intensities, min_max_normalize(&specs[0].profile(200)));
        assert!(argmax(&curves[0].intensities).abs_diff(50) <= 1);
        assert!(argmax(&curves[2].intensities).abs_diff(140) <= 1);
        // Expected curve does not depend on the seed.
        let other = generate_synthetic(&specs, 2, 200, 10).unwrap();
        assert_eq!(curves, other);
    }

    #[test]
    fn default_dataset_shape() {
        let spec = SyntheticSpecFile::default();
        let curves = spec.generate(1).unwrap();
        assert_eq!(curves.len(), 1200);
        assert_eq!(crate::data::class_histogram(&curves, 12), vec![100; 12]);
        for c in &curves {
            assert_eq!(c.len(), 1000);
            assert!(c.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for s in &spec.classes {
            assert!((3..=5).contains(&s.peaks.len()));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let specs = default_class_specs(100);
        assert_eq!(
            generate_synthetic(&specs, 3, 100, 5).unwrap(),
            generate_synthetic(&specs, 3, 100, 5).unwrap()
        );
        assert_ne!(
            generate_synthetic(&specs, 3, 100, 5).unwrap(),
            generate_synthetic(&specs, 3, 100, 6).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let specs = default_class_specs(100);
        assert!(generate_synthetic(&specs[..1], 3, 100, 0).is_err());
        let mut bad = specs.clone();
        bad[1].peaks[0].center = 150.0;
        assert!(generate_synthetic(&bad, 3, 100, 0).is_err());
    }

    #[test]
    fn spec_file_round_trip_and_errors() {
        let spec = SyntheticSpecFile {
            curve_length: 100,
            n_per_class: 4,
            classes: default_class_specs(100),
        };
        let text = spec.to_toml();
        assert_eq!(SyntheticSpecFile::parse(&text, Path::new("s.toml")).unwrap(), spec);

        let err =
            SyntheticSpecFile::parse("curve_length = 10\n\n[[class]]\nnoise = 1\n", Path::new("s.toml")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line >= 3, "line {line}"),
            other => panic!("unexpected {other}"),
        }
        assert!(SyntheticSpecFile::parse("curve_length = 10\n", Path::new("s.toml")).is_err());
    }
}
