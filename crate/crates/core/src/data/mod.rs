//! Spectral curves: preprocessing, splitting, pair sampling, imbalance
//! construction, a synthetic generator, and the dataset CSV format.

mod csv_io;
mod pairs;
mod preprocess;
mod split;
mod synthetic;

use std::collections::BTreeMap;

pub use csv_io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to};
pub use pairs::{sample_pair_indices, sample_pairs, CurvePair};
pub use preprocess::{average_shots, background_subtract, ingest, min_max_normalize, IngestReport};
pub use split::{make_imbalanced, split_counts, split_dataset, DatasetSplit};
pub use synthetic::{
    default_class_specs, generate_synthetic, position_only_specs, Peak, SyntheticClassSpec, SyntheticSpecFile,
};

/// One normalized intensity curve with its class and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCurve {
    pub intensities: Vec<f64>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl SpectralCurve {
    pub fn new(intensities: Vec<f64>, label: Option<usize>, source_id: impl Into<String>) -> Self {
        Self {
            intensities,
            label,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }
}

/// Curve indices grouped by label, in ascending label order. Unlabeled curves
/// are skipped.
pub fn indices_by_class(curves: &[SpectralCurve]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in curves.iter().enumerate() {
        if let Some(l) = c.label {
            map.entry(l).or_default().push(i);
        }
    }
    map
}

/// `1 + max label`, or 0 when nothing is labeled.
pub fn num_classes(curves: &[SpectralCurve]) -> usize {
    curves.iter().filter_map(|c| c.label).max().map_or(0, |m| m + 1)
}

pub fn class_histogram(curves: &[SpectralCurve], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for l in curves.iter().filter_map(|c| c.label) {
        if l < classes {
            h[l] += 1;
        }
    }
    h
}
