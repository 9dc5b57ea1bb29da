use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use curvebert::data::{class_histogram, read_dataset, split_dataset, write_dataset, DatasetSplit, SyntheticSpecFile};
use curvebert::trainer::{
    self, confusion_csv, finetune_history_csv, grid_csv, grid_search, pretrain_history_csv, repeat_csv, repeat_runs,
    reports_csv, summary_text, MetricsReport,
};
use curvebert::{count_parameters, forward_flops, Checkpoint, ModelConfig, TaskHeadParams};
use log::info;

use crate::config::RunConfigFile;
use crate::{EvaluateArgs, FinetuneArgs, GenerateArgs, GridArgs, Invalid, RunArgs};

const OUT_ENV: &str = "CURVEBERT_OUT";

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => SyntheticSpecFile::load(path)?,
        None => SyntheticSpecFile::default(),
    };
    if args.out.exists() && !args.force {
        return Err(Invalid(format!("{} exists; pass --force to overwrite", args.out.display())).into());
    }
    let curves = spec.generate(args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&args.out, &curves)?;
    println!("wrote {} curves to {}", curves.len(), args.out.display());
    for (class, count) in class_histogram(&curves, spec.classes.len()).iter().enumerate() {
        println!("class {class}: {count}");
    }
    Ok(())
}

/// Loads the config, applies overrides and prints the resolved result.
fn load_config(args: &RunArgs) -> Result<RunConfigFile> {
    let mut cfg = RunConfigFile::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    println!("# resolved configuration\n{}", cfg.resolved().to_toml());
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &RunConfigFile) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.report.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// forced, and stores the resolved config beside the results.
fn prepare_out(args: &RunArgs, cfg: &RunConfigFile) -> Result<PathBuf> {
    let dir = out_dir(args, cfg);
    let occupied = dir.is_dir() && fs::read_dir(&dir)?.next().is_some();
    if occupied && !args.force {
        return Err(Invalid(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.resolved().to_toml())?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Reads the dataset and checks it against the model before splitting.
fn load_split(cfg: &RunConfigFile, model: &ModelConfig) -> Result<DatasetSplit> {
    let path = cfg
        .data
        .dataset
        .as_ref()
        .ok_or_else(|| Invalid("[data] dataset is not set".into()))?;
    let curves = read_dataset(path)?;
    let first = curves
        .first()
        .ok_or_else(|| Invalid(format!("{} has no curves", path.display())))?;
    if first.len() != model.curve_length {
        return Err(Invalid(format!(
            "{} holds curves of length {} but model.curve_length is {}; set model.curve_length = {}",
            path.display(),
            first.len(),
            model.curve_length,
            first.len()
        ))
        .into());
    }
    if let Some(label) = curves.iter().filter_map(|c| c.label).max() {
        if label >= model.num_classes {
            return Err(Invalid(format!(
                "{} has label {label} but model.num_classes is {}; set model.num_classes = {}",
                path.display(),
                model.num_classes,
                label + 1
            ))
            .into());
        }
    }
    let split = split_dataset(&curves, cfg.data.test_rate, cfg.data.seed)?;
    info!(
        "split {}: train {}, valid {}, test {}",
        path.display(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(split)
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg.pretrain_spec();
    cfg.model.validate()?;
    spec.validate()?;
    if args.dry_run {
        println!("parameters: {}", count_parameters(&cfg.model).pretraining_total());
        println!("forward FLOPs per curve: {}", forward_flops(&cfg.model));
        return Ok(());
    }
    let split = load_split(&cfg, &cfg.model)?;
    let dir = prepare_out(args, &cfg)?;
    let out = trainer::pretrain(&cfg.model, &split.train, &split.valid, &spec)?;
    out.checkpoint.save(&dir.join("pretrain.ckpt"))?;
    println!("wrote {}", dir.join("pretrain.ckpt").display());
    write(&dir, "pretrain_history.csv", &pretrain_history_csv(&out.history))?;
    println!(
        "best epoch {} with validation masked-curve loss {:.6}",
        out.checkpoint.epoch, out.checkpoint.best_score
    );
    Ok(())
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let spec = cfg.finetune_spec();
    cfg.model.validate()?;
    spec.validate()?;
    if let Some(n) = args.repeat.filter(|&n| n < 2) {
        return Err(Invalid(format!("--repeat needs at least 2 runs, got {n}")).into());
    }
    let pretrained = args
        .checkpoint
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    if let Some(ck) = &pretrained {
        curvebert::model::check_compatible(&ck.config, &cfg.model)?;
    }
    if args.run.dry_run {
        println!("parameters: {}", count_parameters(&cfg.model).finetuning_total());
        println!("forward FLOPs per curve: {}", forward_flops(&cfg.model));
        return Ok(());
    }
    let split = load_split(&cfg, &cfg.model)?;
    let dir = prepare_out(&args.run, &cfg)?;
    let origin = if pretrained.is_some() { "pretrained" } else { "scratch" };

    let Some(n) = args.repeat else {
        let out = trainer::finetune(pretrained.as_ref(), &cfg.model, &split, &spec)?;
        out.checkpoint.save(&dir.join("finetune.ckpt"))?;
        println!("wrote {}", dir.join("finetune.ckpt").display());
        write(&dir, "finetune_history.csv", &finetune_history_csv(&out.history))?;
        write(
            &dir,
            "report.csv",
            &reports_csv(&[
                (format!("{origin}/validation"), out.validation.clone()),
                (format!("{origin}/test"), out.report.clone()),
            ]),
        )?;
        write(&dir, "confusion.csv", &confusion_csv(&out.report))?;
        write(&dir, "summary.txt", &summary_text(&out.report))?;
        print!("{}", summary_text(&out.report));
        return Ok(());
    };

    let mut rows = Vec::new();
    let summary = repeat_runs(n, spec.seed, |seed| {
        let out = trainer::finetune(pretrained.as_ref(), &cfg.model, &split, &spec.with_seed(seed))?;
        rows.push((format!("{origin}/seed{seed}/validation"), out.validation));
        rows.push((format!("{origin}/seed{seed}/test"), out.report.clone()));
        Ok(out.report)
    })?;
    write(&dir, "report.csv", &reports_csv(&rows))?;
    write(&dir, "repeat.csv", &repeat_csv(origin, &summary))?;
    println!("precision {}", summary.precision);
    println!("recall {}", summary.recall);
    println!("weighted F1 {}", summary.weighted_f1);
    println!("accuracy {}", summary.accuracy);
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if ck
        .params
        .by_name(&format!("{}.weight", TaskHeadParams::CLASSIFIER))
        .is_none()
    {
        return Err(Invalid(format!(
            "{} has no classification head; evaluate needs a fine-tuned checkpoint",
            args.checkpoint.display()
        ))
        .into());
    }
    let model = ck.model()?;
    if args.run.dry_run {
        println!("parameters: {}", count_parameters(&model.config).finetuning_total());
        return Ok(());
    }
    let split = load_split(&cfg, &model.config)?;
    let dir = prepare_out(&args.run, &cfg)?;
    let report: MetricsReport = trainer::evaluate(&model, &split.test)?;
    write(
        &dir,
        "report.csv",
        &reports_csv(&[("checkpoint/test".into(), report.clone())]),
    )?;
    write(&dir, "confusion.csv", &confusion_csv(&report))?;
    write(&dir, "summary.txt", &summary_text(&report))?;
    print!("{}", summary_text(&report));
    Ok(())
}

pub fn gridsearch(args: &GridArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let grid = cfg.grid.spec();
    let finetune_spec = cfg.finetune_spec();
    let pretrain_spec = cfg.grid.pretrain.then(|| cfg.pretrain_spec());
    finetune_spec.validate()?;
    if let Some(p) = &pretrain_spec {
        p.validate()?;
    }
    let combos = grid.combinations(&cfg.model);
    if combos.is_empty() {
        return Err(Invalid("every grid dimension needs at least one value".into()).into());
    }
    if args.run.dry_run {
        for c in &combos {
            match c.validate() {
                Ok(()) => println!(
                    "L={} A={} H={} token_size={}: parameters {}",
                    c.layers,
                    c.heads,
                    c.hidden,
                    c.token_size,
                    count_parameters(c).finetuning_total()
                ),
                Err(e) => println!(
                    "L={} A={} H={} token_size={}: skipped, {e}",
                    c.layers, c.heads, c.hidden, c.token_size
                ),
            }
        }
        return Ok(());
    }
    let split = load_split(&cfg, &cfg.model)?;
    let dir = prepare_out(&args.run, &cfg)?;
    let outcome = grid_search(
        &cfg.model,
        &grid,
        &split,
        pretrain_spec.as_ref(),
        &finetune_spec,
        args.jobs,
    )?;
    write(&dir, "grid.csv", &grid_csv(&outcome))?;
    let best = outcome
        .results
        .first()
        .ok_or_else(|| Invalid("no grid combination is valid for this dataset".into()))?;

    // A singleton grid at the combination's own seed reproduces the run.
    let seed = finetune_spec.seed.wrapping_add(best.index as u64);
    let mut best_cfg = cfg.resolved();
    best_cfg.model = best.config.clone();
    best_cfg.override_seed(seed);
    best_cfg.grid.layers = vec![best.config.layers];
    best_cfg.grid.heads = vec![best.config.heads];
    best_cfg.grid.hidden = vec![best.config.hidden];
    best_cfg.grid.token_size = vec![best.config.token_size];
    write(&dir, "best_config.toml", &best_cfg.to_toml())?;
    println!(
        "best: L={} A={} H={} token_size={} validation weighted F1 {:.4}, test weighted F1 {:.4}",
        best.config.layers,
        best.config.heads,
        best.config.hidden,
        best.config.token_size,
        best.valid_weighted_f1,
        best.test.weighted_f1
    );
    Ok(())
}
