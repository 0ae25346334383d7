//! Training loop, evaluation and resumable state.

use std::path::{Path, PathBuf};

use brau_tensor::{SplitMix64, Tape, Tensor};
use log::info;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checkpoint::{self, TrainMeta};
use crate::config::Config;
use crate::data::{self, augment, collate, make_splits, Assignment, SegSample, Split};
use crate::error::{BrauError, Result};
use crate::labels::LabelMap;
use crate::loss::hybrid_loss;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::nn::Ctx;
use crate::optim::{scheduled_lr, Optimizer};

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";

/// Samples used for fitting and for validation.
pub struct TrainData {
    pub train: Vec<SegSample>,
    pub valid: Vec<SegSample>,
}

impl TrainData {
    /// Validation falls back to the training samples when no split holds any.
    pub fn eval_set(&self) -> &[SegSample] {
        if self.valid.is_empty() {
            &self.train
        } else {
            &self.valid
        }
    }
}

/// All samples named by `cfg.data`: synthetic or loaded from disk.
pub fn load_samples(cfg: &Config) -> Result<Vec<SegSample>> {
    let m = &cfg.model;
    let samples = if cfg.data.synthetic {
        data::synth_dataset(
            cfg.data.synth_samples,
            m.input_hw,
            m.in_channels,
            m.num_classes,
            cfg.data.seed,
        )?
    } else {
        if cfg.data.dataset.is_empty() {
            return Err(BrauError::data(
                "",
                "no dataset given and synthetic = false",
            ));
        }
        let root = Path::new(&cfg.data.dataset);
        if !root.is_dir() {
            return Err(BrauError::data(root, "dataset directory not found"));
        }
        data::load_dataset(root, m.in_channels, m.num_classes)?
    };
    for s in &samples {
        m.check_input(s.height(), s.width())
            .map_err(|e| BrauError::data(&s.id, format!("unusable extents: {e}")))?;
    }
    Ok(samples)
}

pub fn split_samples(samples: Vec<SegSample>, assignment: &Assignment) -> TrainData {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (s, split) in samples.into_iter().zip(&assignment.splits) {
        match split {
            Split::Train => train.push(s),
            Split::Valid => valid.push(s),
            Split::Test => {}
        }
    }
    TrainData { train, valid }
}

/// Loads the samples and splits them per the config.
pub fn prepare(cfg: &Config) -> Result<(TrainData, Assignment)> {
    let samples = load_samples(cfg)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let assignment = make_splits(&ids, &cfg.data)?;
    Ok((split_samples(samples, &assignment), assignment))
}

/// Eval-mode argmax masks; samples run in parallel, results keep input order.
pub fn predict_labels(model: &Model<f32>, samples: &[SegSample]) -> Result<Vec<LabelMap>> {
    samples
        .par_iter()
        .map(|s| {
            let x = s.image.reshape(&[1, s.height(), s.width(), s.channels()])?;
            let logits = model.predict(&x)?;
            let lm = LabelMap::argmax(&logits);
            Ok(lm.sample(0))
        })
        .collect()
}

pub fn evaluate(model: &Model<f32>, samples: &[SegSample], cfg: &Config) -> Result<MetricsReport> {
    let preds = predict_labels(model, samples)?;
    let truths: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(MetricsReport::evaluate(
        &preds,
        &truths,
        cfg.model.num_classes,
        cfg.data.hd_points,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub dice: f32,
    pub ce: f32,
}

impl StepLog {
    pub fn to_json(&self) -> Value {
        json!({
            "event": "step",
            "epoch": self.epoch,
            "step": self.step,
            "lr": self.lr,
            "loss": self.loss,
            "dice": self.dice,
            "ce": self.ce,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_loss: f64,
    pub eval: Option<MetricsReport>,
}

/// Model, optimizer and progress of one run.
pub struct Trainer {
    pub cfg: Config,
    pub model: Model<f32>,
    pub optim: Optimizer<f32>,
    pub meta: TrainMeta,
    /// Checkpoints go here when set.
    pub out: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model)?;
        let optim = Optimizer::new(&cfg.optim, model.params.len());
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optim,
            meta: TrainMeta::default(),
            out: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<f32>(path)?;
        let model = ck.model()?;
        let optim = ck.optimizer(&model)?;
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            optim,
            meta: ck.meta.clone(),
            out: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.cfg, &self.meta, &self.model, Some(&self.optim))
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.cfg.optim.batch_size) as u64
    }

    /// One update on `batch` (indices into `train`). The indices are sorted
    /// first, so the update does not depend on their order.
    pub fn step(
        &mut self,
        train: &[SegSample],
        batch: &[usize],
        epoch: u64,
        total_steps: u64,
    ) -> Result<StepLog> {
        let mut idx = batch.to_vec();
        idx.sort_unstable();
        let augmented: Vec<SegSample> = idx
            .iter()
            .map(|&i| {
                let mut rng = SplitMix64::derived(self.cfg.data.seed, 1000 + epoch, i as u64);
                augment(&train[i], &self.cfg.augment, &mut rng)
            })
            .collect();
        let (images, masks) = collate(&augmented.iter().collect::<Vec<_>>())?;
        let lr = scheduled_lr(&self.cfg.optim, self.meta.step, total_steps);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.params, true);
        let x = tape.constant(images);
        let logits = self.model.net.forward(&ctx, &x)?;
        let parts = hybrid_loss(&logits, &masks, &self.cfg.loss)?;
        let loss = parts.total.value().item();
        if !loss.is_finite() {
            return Err(BrauError::NonFiniteLoss {
                step: self.meta.step,
            });
        }
        let grads = tape.backward(&parts.total)?;
        let grads = ctx.grads(&grads);
        ctx.apply_bn_updates(&mut self.model.params);
        self.optim.step(&mut self.model.params, &grads, lr)?;
        let log = StepLog {
            epoch,
            step: self.meta.step,
            lr,
            loss,
            dice: parts.dice.value().item(),
            ce: parts.ce.value().item(),
        };
        self.meta.step += 1;
        Ok(log)
    }

    /// Runs the next epoch: seeded shuffle, batches, then validation when the
    /// cadence or the final epoch calls for it.
    pub fn epoch(&mut self, data: &TrainData, log: &mut dyn FnMut(&Value)) -> Result<EpochLog> {
        if data.train.is_empty() {
            return Err(BrauError::Invalid("no training samples".into()));
        }
        let epoch = self.meta.epoch;
        let total_steps = self.steps_per_epoch(data.train.len()) * self.cfg.optim.epochs as u64;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        SplitMix64::derived(self.cfg.data.seed, 7, epoch).shuffle(&mut order);
        let mut sum = 0.0;
        let mut n = 0;
        for batch in order.chunks(self.cfg.optim.batch_size) {
            let s = self.step(&data.train, batch, epoch, total_steps)?;
            log(&s.to_json());
            sum += s.loss as f64;
            n += 1;
        }
        self.meta.epoch += 1;
        let done = self.meta.epoch;
        let eval = if done.is_multiple_of(self.cfg.data.eval_every as u64)
            || done == self.cfg.optim.epochs as u64
        {
            Some(evaluate(&self.model, data.eval_set(), &self.cfg)?)
        } else {
            None
        };
        let out = EpochLog {
            epoch,
            mean_loss: sum / n as f64,
            eval,
        };
        let mut rec = json!({"event": "epoch", "epoch": epoch, "mean_loss": out.mean_loss});
        if let Some(r) = &out.eval {
            rec["eval"] = r.to_json();
            let dsc = r.mean_dsc.unwrap_or(f64::NEG_INFINITY);
            if self.meta.best_dsc.is_none_or(|b| dsc > b) {
                self.meta.best_dsc = Some(dsc);
                self.meta.best_epoch = Some(epoch);
                if let Some(dir) = &self.out {
                    self.save(&dir.join(BEST))?;
                }
            }
        }
        log(&rec);
        if let Some(dir) = &self.out {
            self.save(&dir.join(LAST))?;
        }
        info!("epoch {epoch} loss {:.5}", out.mean_loss);
        Ok(out)
    }

    /// Trains until `cfg.optim.epochs` or `limit` more epochs, whichever is first.
    pub fn run(
        &mut self,
        data: &TrainData,
        limit: Option<u64>,
        log: &mut dyn FnMut(&Value),
    ) -> Result<Vec<EpochLog>> {
        let end = self.cfg.optim.epochs as u64;
        let end = limit.map_or(end, |l| end.min(self.meta.epoch + l));
        let mut logs = Vec::new();
        while self.meta.epoch < end {
            logs.push(self.epoch(data, log)?);
        }
        Ok(logs)
    }
}

/// Trainable parameters as one flat vector, for equality checks.
pub fn trainable_snapshot(model: &Model<f32>) -> Vec<Tensor<f32>> {
    model
        .params
        .ids()
        .filter(|&i| model.params.kind(i).trainable())
        .map(|i| model.params.value(i).clone())
        .collect()
}
