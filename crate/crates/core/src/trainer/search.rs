use std::fmt;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{finetune, pretrain, MetricsReport, TrainSpec};
use crate::config::ModelConfig;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};

/// Candidate values per architecture dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub hidden: Vec<usize>,
    pub token_size: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            layers: vec![4, 8, 12],
            heads: vec![4, 8, 16],
            hidden: vec![256, 768, 1024],
            token_size: vec![50, 100, 200],
        }
    }
}

impl GridSpec {
    /// Every combination, `layers` outermost and `token_size` innermost.
    pub fn combinations(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &layers in &self.layers {
            for &heads in &self.heads {
                for &hidden in &self.hidden {
                    for &token_size in &self.token_size {
                        let mut cfg = ModelConfig {
                            layers,
                            heads,
                            hidden,
                            ffn_inner: hidden,
                            token_size,
                            ..base.clone()
                        };
                        cfg.max_seq_length = if cfg.task_variant.uses_pairs() {
                            cfg.pair_seq_len()
                        } else {
                            cfg.single_seq_len()
                        };
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// Position in [`GridSpec::combinations`] order.
    pub index: usize,
    pub config: ModelConfig,
    pub valid_weighted_f1: f64,
    pub test: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Descending by validation weighted F1, ties in combination order.
    pub results: Vec<GridResult>,
    pub skipped: Vec<(ModelConfig, String)>,
}

/// Trains every valid combination and ranks them by validation weighted F1.
///
/// Combination `i` runs with seed `spec.seed + i`, so results do not depend
/// on `jobs`. With `pretrain_spec`, each combination is pre-trained first
/// (using `base.task_variant`). Combinations whose shape is invalid, such as
/// a token size that does not divide the curve length, are skipped and
/// listed with the reason.
pub fn grid_search(
    base: &ModelConfig,
    grid: &GridSpec,
    split: &DatasetSplit,
    pretrain_spec: Option<&TrainSpec>,
    finetune_spec: &TrainSpec,
    jobs: usize,
) -> Result<GridOutcome> {
    if grid.layers.is_empty() || grid.heads.is_empty() || grid.hidden.is_empty() || grid.token_size.is_empty() {
        return Err(Error::Config("every grid dimension needs at least one value".into()));
    }
    let mut runnable = Vec::new();
    let mut skipped = Vec::new();
    for (index, cfg) in grid.combinations(base).into_iter().enumerate() {
        match cfg.validate() {
            Ok(()) => runnable.push((index, cfg)),
            Err(e) => {
                warn!(
                    "skipping L={} A={} H={} token_size={}: {e}",
                    cfg.layers, cfg.heads, cfg.hidden, cfg.token_size
                );
                skipped.push((cfg, e.to_string()));
            }
        }
    }
    let run = |(index, cfg): &(usize, ModelConfig)| -> Result<GridResult> {
        let seed = finetune_spec.seed.wrapping_add(*index as u64);
        info!(
            "grid combination {index}: L={} A={} H={} token_size={}",
            cfg.layers, cfg.heads, cfg.hidden, cfg.token_size
        );
        let pre = pretrain_spec
            .map(|p| pretrain(cfg, &split.train, &split.valid, &p.with_seed(seed)))
            .transpose()?;
        let out = finetune(
            pre.as_ref().map(|p| &p.checkpoint),
            cfg,
            split,
            &finetune_spec.with_seed(seed),
        )?;
        Ok(GridResult {
            index: *index,
            config: cfg.clone(),
            valid_weighted_f1: out.validation.weighted_f1,
            test: out.report,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut results = pool.install(|| runnable.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    results.sort_by(|a, b| {
        b.valid_weighted_f1
            .total_cmp(&a.valid_weighted_f1)
            .then(a.index.cmp(&b.index))
    });
    Ok(GridOutcome { results, skipped })
}

/// Mean and population variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanVariance {
    pub mean: f64,
    pub variance: f64,
}

impl MeanVariance {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

impl fmt::Display for MeanVariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.variance)
    }
}

#[derive(Debug, Clone)]
pub struct RepeatSummary {
    pub runs: Vec<MetricsReport>,
    pub precision: MeanVariance,
    pub recall: MeanVariance,
    pub weighted_f1: MeanVariance,
    pub accuracy: MeanVariance,
}

/// Runs `op` with seeds `base_seed .. base_seed + n` and summarizes each
/// metric by mean and population variance.
pub fn repeat_runs<F>(n: usize, base_seed: u64, mut op: F) -> Result<RepeatSummary>
where
    F: FnMut(u64) -> Result<MetricsReport>,
{
    if n < 2 {
        return Err(Error::Config(format!("repeat needs at least 2 runs, got {n}")));
    }
    let runs = (0..n as u64)
        .map(|i| op(base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let stat = |f: fn(&MetricsReport) -> f64| MeanVariance::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RepeatSummary {
        precision: stat(|r| r.precision),
        recall: stat(|r| r.recall),
        weighted_f1: stat(|r| r.weighted_f1),
        accuracy: stat(|r| r.accuracy),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, position_only_specs, split_dataset};
    use crate::trainer::weighted_metrics;

    #[test]
    fn mean_variance_closed_form() {
        let mv = MeanVariance::of(&[0.9, 1.0]);
        assert!((mv.mean - 0.95).abs() < 1e-15);
        assert!((mv.variance - 0.0025).abs() < 1e-15);
        assert_eq!(MeanVariance::of(&[0.7; 4]).variance, 0.0);
    }

    #[test]
    fn repeat_seeds_and_bounds() {
        let mut seen = Vec::new();
        let s = repeat_runs(3, 10, |seed| {
            seen.push(seed);
            weighted_metrics(&[0, 1], &[0, 1], 2)
        })
        .unwrap();
        assert_eq!(seen, vec![10, 11, 12]);
        assert_eq!(s.weighted_f1.variance, 0.0);
        assert_eq!(s.runs.len(), 3);
        assert!(repeat_runs(1, 0, |_| weighted_metrics(&[0], &[0], 1)).is_err());
    }

    #[test]
    fn combination_order_and_count() {
        let base = ModelConfig::default();
        let combos = GridSpec::default().combinations(&base);
        assert_eq!(combos.len(), 81);
        assert_eq!((combos[0].layers, combos[0].token_size), (4, 50));
        assert_eq!((combos[1].layers, combos[1].token_size), (4, 100));
        assert!(combos.iter().all(|c| c.ffn_inner == c.hidden));
        // Every default combination divides a 1000-sample curve.
        assert!(combos.iter().all(|c| c.validate().is_ok()));
    }

    fn small_split() -> (ModelConfig, DatasetSplit) {
        let curves = generate_synthetic(&position_only_specs((4.0, 11.0), 1.5, 0.02), 10, 16, 1).unwrap();
        let cfg = ModelConfig {
            num_classes: 2,
            ..ModelConfig::sized(1, 2, 8, 4, 16)
        };
        (cfg, split_dataset(&curves, 0.2, 0).unwrap())
    }

    fn quick() -> TrainSpec {
        TrainSpec {
            max_epoch: 3,
            patience: 1,
            seed: 5,
            ..TrainSpec::finetuning()
        }
    }

    #[test]
    fn singleton_grid_matches_direct_run() {
        let (cfg, split) = small_split();
        let grid = GridSpec {
            layers: vec![1],
            heads: vec![2],
            hidden: vec![8],
            token_size: vec![4],
        };
        let out = grid_search(&cfg, &grid, &split, None, &quick(), 1).unwrap();
        assert_eq!(out.results.len(), 1);
        let direct = finetune(None, &out.results[0].config, &split, &quick()).unwrap();
        assert_eq!(out.results[0].test, direct.report);
        assert_eq!(out.results[0].valid_weighted_f1, direct.validation.weighted_f1);
    }

    #[test]
    fn skips_and_ranks_deterministically() {
        let (cfg, split) = small_split();
        let grid = GridSpec {
            layers: vec![1],
            heads: vec![1, 2],
            hidden: vec![8],
            token_size: vec![4, 5],
        };
        let serial = grid_search(&cfg, &grid, &split, None, &quick(), 1).unwrap();
        let parallel = grid_search(&cfg, &grid, &split, None, &quick(), 3).unwrap();
        assert_eq!(serial.results.len(), 2);
        assert_eq!(serial.skipped.len(), 2);
        for w in serial.results.windows(2) {
            assert!(
                w[0].valid_weighted_f1 > w[1].valid_weighted_f1
                    || (w[0].valid_weighted_f1 == w[1].valid_weighted_f1 && w[0].index < w[1].index)
            );
        }
        let idx = |o: &GridOutcome| o.results.iter().map(|r| (r.index, r.test.clone())).collect::<Vec<_>>();
        assert_eq!(idx(&serial), idx(&parallel));

        let empty = GridSpec { layers: vec![], ..grid };
        assert!(grid_search(&cfg, &empty, &split, None, &quick(), 1).is_err());
    }
}
