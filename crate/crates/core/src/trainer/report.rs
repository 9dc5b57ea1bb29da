//! CSV and text renderings of training histories and metrics.

use std::fmt::Write as _;

use super::{FinetuneEpoch, GridOutcome, MetricsReport, PretrainEpoch, RepeatSummary};
use crate::config::ModelConfig;

fn to_csv<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("CSV fields are UTF-8")
}

/// One-line `key=value;…` rendering for CSV cells.
fn config_cell(config: Option<&ModelConfig>) -> String {
    config.map_or_else(String::new, |c| {
        c.to_key_values()
            .lines()
            .map(|l| l.replace(" = ", "=").replace('"', ""))
            .collect::<Vec<_>>()
            .join(";")
    })
}

pub fn pretrain_history_csv(history: &[PretrainEpoch]) -> String {
    to_csv(
        &["epoch", "mcm", "ncp", "total", "validation"],
        history.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.mcm.to_string(),
                e.ncp.map(|v| v.to_string()).unwrap_or_default(),
                e.total.to_string(),
                e.validation.to_string(),
            ]
        }),
    )
}

pub fn finetune_history_csv(history: &[FinetuneEpoch]) -> String {
    to_csv(
        &["epoch", "train_loss", "valid_weighted_f1", "valid_accuracy"],
        history.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.valid_weighted_f1.to_string(),
                e.valid_accuracy.to_string(),
            ]
        }),
    )
}

/// One row per labeled run.
pub fn reports_csv(rows: &[(String, MetricsReport)]) -> String {
    to_csv(
        &[
            "run",
            "seed",
            "precision",
            "recall",
            "weighted_f1",
            "accuracy",
            "samples",
            "config",
        ],
        rows.iter().map(|(label, r)| {
            [
                label.clone(),
                r.run_seed.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
                r.weighted_f1.to_string(),
                r.accuracy.to_string(),
                r.per_class_support.iter().sum::<usize>().to_string(),
                config_cell(r.config.as_ref()),
            ]
        }),
    )
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(report: &MetricsReport) -> String {
    let k = report.confusion_matrix.len();
    let mut header = vec!["true\\predicted".to_string()];
    header.extend((0..k).map(|c| c.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    to_csv(
        &header,
        report.confusion_matrix.iter().enumerate().map(|(t, row)| {
            std::iter::once(t.to_string())
                .chain(row.iter().map(usize::to_string))
                .collect::<Vec<_>>()
        }),
    )
}

/// Mean and population variance of each metric over repeated runs.
pub fn repeat_csv(label: &str, summary: &RepeatSummary) -> String {
    let mut header = vec!["run", "runs"];
    let mut row = vec![label.to_string(), summary.runs.len().to_string()];
    for (mean, variance, mv) in [
        ("precision_mean", "precision_variance", summary.precision),
        ("recall_mean", "recall_variance", summary.recall),
        ("weighted_f1_mean", "weighted_f1_variance", summary.weighted_f1),
        ("accuracy_mean", "accuracy_variance", summary.accuracy),
    ] {
        header.extend([mean, variance]);
        row.push(mv.mean.to_string());
        row.push(mv.variance.to_string());
    }
    to_csv(&header, [row])
}

/// Ranked grid results followed by skipped combinations.
pub fn grid_csv(outcome: &GridOutcome) -> String {
    let ranked = outcome.results.iter().enumerate().map(|(rank, r)| {
        [
            (rank + 1).to_string(),
            r.config.layers.to_string(),
            r.config.heads.to_string(),
            r.config.hidden.to_string(),
            r.config.token_size.to_string(),
            r.valid_weighted_f1.to_string(),
            r.test.weighted_f1.to_string(),
            String::new(),
        ]
    });
    let skipped = outcome.skipped.iter().map(|(c, why)| {
        [
            String::new(),
            c.layers.to_string(),
            c.heads.to_string(),
            c.hidden.to_string(),
            c.token_size.to_string(),
            String::new(),
            String::new(),
            why.clone(),
        ]
    });
    to_csv(
        &[
            "rank",
            "layers",
            "heads",
            "hidden",
            "token_size",
            "valid_weighted_f1",
            "test_weighted_f1",
            "skipped",
        ],
        ranked.chain(skipped),
    )
}

/// Human-readable report with the config snapshot it came from.
pub fn summary_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed: {}", report.run_seed);
    let _ = writeln!(s, "samples: {}", report.per_class_support.iter().sum::<usize>());
    let _ = writeln!(s, "precision (weighted): {:.4}", report.precision);
    let _ = writeln!(s, "recall (weighted): {:.4}", report.recall);
    let _ = writeln!(s, "F1 (weighted): {:.4}", report.weighted_f1);
    let _ = writeln!(s, "accuracy: {:.4}", report.accuracy);
    let _ = writeln!(s, "support per class: {:?}", report.per_class_support);
    if let Some(c) = &report.config {
        let _ = writeln!(s, "\n[model]\n{}", c.to_key_values().trim_end());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{repeat_runs, weighted_metrics};

    #[test]
    fn confusion_layout() {
        let r = weighted_metrics(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(confusion_csv(&r), "true\\predicted,0,1\n0,1,1\n1,0,1\n");
    }

    #[test]
    fn repeat_schema() {
        let s = repeat_runs(2, 0, |seed| weighted_metrics(&[0, seed as usize % 2], &[0, 1], 2)).unwrap();
        let text = repeat_csv("omcm", &s);
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run,runs,precision_mean,precision_variance,recall_mean,recall_variance,\
             weighted_f1_mean,weighted_f1_variance,accuracy_mean,accuracy_variance"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[..2], ["omcm", "2"]);
        assert_eq!(row[6].parse::<f64>().unwrap(), s.weighted_f1.mean);
    }

    #[test]
    fn report_rows_embed_config() {
        let mut r = weighted_metrics(&[0, 1], &[0, 1], 2).unwrap();
        r.config = Some(ModelConfig::default());
        let text = reports_csv(&[("a".into(), r)]);
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains("layers=8;"));
        assert!(row.contains("task_variant=NCP-OMCM"));
    }
}
