//! `train`, `eval` and `infer`.

use std::path::{Path, PathBuf};

use brau_net::checkpoint;
use brau_net::data::{make_splits, read_image, read_mask, Split};
use brau_net::metrics::MetricsReport;
use brau_net::pnm::{self, Image};
use brau_net::train::{load_samples, predict_labels, prepare, Trainer};
use brau_net::{Config, LabelMap, Model};
use brau_tensor::Tensor;
use clap::Args;
use log::info;
use serde_json::{json, Value};

use crate::{create_dir, echo_config, overrides, write_file, CliError, JsonLines, Result};

pub const TRAIN_LOG: &str = "train.jsonl";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const SPLITS: &str = "splits.txt";

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config key, e.g. `--set lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Stop after this many more epochs.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn resumed(path: &Path, sets: &[String]) -> Result<Trainer> {
    let mut t = Trainer::resume(path)?;
    if !sets.is_empty() {
        let cfg = Config::parse(&(t.cfg.to_text() + &overrides(sets)?))?;
        if cfg.model != t.cfg.model {
            return Err(CliError::Usage("model keys cannot change on resume".into()));
        }
        t.cfg = cfg;
    }
    Ok(t)
}

/// Runs training and returns the final summary record.
pub fn train(args: &TrainArgs) -> Result<Value> {
    let mut trainer = match &args.resume {
        Some(p) => resumed(p, &args.sets)?,
        None => Trainer::new(&crate::load_config(args.config.as_deref(), &args.sets)?)?,
    };
    let out = &args.out;
    create_dir(out)?;
    echo_config(out, &trainer.cfg)?;
    let (data, assignment) = prepare(&trainer.cfg)?;
    write_file(&out.join(SPLITS), assignment.to_text())?;
    info!(
        "{} parameters, {} train / {} valid samples",
        trainer.model.num_params(),
        data.train.len(),
        data.valid.len()
    );

    let append = args.resume.is_some();
    let mut steps = JsonLines::open(&out.join(TRAIN_LOG), append)?;
    let mut metrics = JsonLines::open(&out.join(METRICS_LOG), append)?;
    let mut failed = None;
    trainer.out = Some(out.clone());
    let run = trainer.run(&data, args.epochs, &mut |v| {
        let mut res = steps.write(v);
        if res.is_ok() && v["event"] == "epoch" && v.get("eval").is_some() {
            res = metrics.write(v);
        }
        if let Err(e) = res {
            failed.get_or_insert(e);
        }
    });
    steps.flush()?;
    metrics.flush()?;
    if let Some(e) = failed {
        return Err(e);
    }
    run?;
    let m = &trainer.meta;
    let summary = json!({
        "event": "final",
        "epochs": m.epoch,
        "steps": m.step,
        "best_dsc": m.best_dsc,
        "best_epoch": m.best_epoch,
        "params": trainer.model.num_params(),
    });
    metrics.write(&summary)?;
    metrics.flush()?;
    Ok(summary)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model to evaluate; its config names the data.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config used when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Dataset directory with images/ and masks/.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// train, valid, test or all.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Score `<id>.pgm` masks from this directory instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Scores predictions against ground truth and returns the metrics record.
pub fn eval(args: &EvalArgs) -> Result<Value> {
    let (mut cfg, model) = match (&args.checkpoint, &args.config) {
        (Some(p), _) => {
            let ck = checkpoint::load::<f32>(p)?;
            let cfg = Config::parse(&(ck.config.to_text() + &overrides(&args.sets)?))?;
            (cfg, Some(ck.model()?))
        }
        (None, Some(p)) => (crate::load_config(Some(p), &args.sets)?, None),
        (None, None) => {
            return Err(CliError::Usage(
                "eval needs --checkpoint or --config".into(),
            ))
        }
    };
    if let Some(d) = &args.dataset {
        cfg.data.dataset = d.to_string_lossy().into_owned();
        cfg.data.synthetic = false;
    }
    let split = match args.split.as_str() {
        "all" => None,
        s => Some(Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split `{s}`")))?),
    };
    let samples = load_samples(&cfg)?;
    let samples = match split {
        None => samples,
        Some(want) => {
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let a = make_splits(&ids, &cfg.data)?;
            samples
                .into_iter()
                .zip(&a.splits)
                .filter(|(_, &s)| s == want)
                .map(|(s, _)| s)
                .collect()
        }
    };
    if samples.is_empty() {
        return Err(CliError::Usage(format!(
            "split `{}` holds no samples",
            args.split
        )));
    }
    let k = cfg.model.num_classes;
    let preds = match (&args.predictions, &model) {
        (Some(dir), _) => samples
            .iter()
            .map(|s| {
                let m = read_mask(&dir.join(format!("{}.pgm", s.id)), k)?;
                if m.dims() != s.mask.dims() {
                    return Err(CliError::Usage(format!(
                        "prediction for `{}` has the wrong size",
                        s.id
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?,
        (None, Some(m)) => predict_labels(m, &samples)?,
        (None, None) => return Err(CliError::Usage("--config alone needs --predictions".into())),
    };
    let truths: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = MetricsReport::evaluate(&preds, &truths, k, cfg.data.hd_points);
    let mut rec = json!({"event": "eval", "split": args.split});
    if let (Value::Object(dst), Value::Object(src)) = (&mut rec, report.to_json()) {
        dst.extend(src);
    }
    create_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let mut log = JsonLines::open(&args.out.join(METRICS_LOG), false)?;
    log.write(&rec)?;
    log.flush()?;
    Ok(rec)
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM or PPM input.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write prob_<k>.pgm per class.
    #[arg(long)]
    pub probs: bool,
}

/// Per-pixel softmax over the class axis of `[1,H,W,K]` logits.
fn softmax(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn load_model(path: &Path) -> Result<(Config, Model<f32>)> {
    let ck = checkpoint::load::<f32>(path)?;
    let model = ck.model()?;
    Ok((ck.config, model))
}

/// `[1,H,W,C]` input for `model` from an image file.
pub fn load_input(path: &Path, model: &Model<f32>) -> Result<Tensor<f32>> {
    let img = read_image(path, model.cfg().in_channels)?;
    let (h, w, c) = (img.dim(0), img.dim(1), img.dim(2));
    Ok(img.reshape(&[1, h, w, c])?)
}

/// Writes mask.pgm and, with `probs`, one probability map per class.
pub fn infer(args: &InferArgs) -> Result<()> {
    let (cfg, model) = load_model(&args.checkpoint)?;
    let x = load_input(&args.image, &model)?;
    let (h, w) = (x.dim(1), x.dim(2));
    let logits = model.predict(&x)?;
    logits.check_finite("logits")?;
    let mask = LabelMap::argmax(&logits);
    create_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    pnm::write(
        &args.out.join("mask.pgm"),
        &Image::gray(w, h, mask.data().to_vec()),
    )?;
    if args.probs {
        let p = softmax(&logits);
        for k in 0..logits.last_dim() {
            let data = p.iter().map(|row| (row[k] * 255.0).round() as u8).collect();
            pnm::write(
                &args.out.join(format!("prob_{k}.pgm")),
                &Image::gray(w, h, data),
            )?;
        }
    }
    Ok(())
}
