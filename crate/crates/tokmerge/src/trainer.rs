//! Optimization loop for the adapter-tuning regime: frozen backbone,
//! trainable adapters and head, AdamW with linear warmup into cosine decay,
//! cross-entropy loss, deterministic per-seed shuffling, CSV metrics, and
//! best/final checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_from, streams, substream};
use crate::tensor::Tensor;
use crate::vit::{ForwardOpts, Vit};
use crate::Elem;
use rand::Rng as _;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: Elem,
    pub weight_decay: Elem,
    pub beta1: Elem,
    pub beta2: Elem,
    pub eps: Elem,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive and finite"));
        }
        Ok(())
    }
}

/// Linear ramp to `base` over the warmup steps, then cosine decay to 0 at
/// the final step. Continuous at the boundary: the ramp ends at exactly
/// `base` and the cosine starts there.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base: Elem) -> Elem {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as Elem / warmup_steps as Elem;
    }
    let denom = total_steps.saturating_sub(1).saturating_sub(warmup_steps).max(1);
    let t = (step - warmup_steps) as Elem / denom as Elem;
    base * 0.5 * (1.0 + (std::f64::consts::PI as Elem * t).cos())
}

#[derive(Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One AdamW update with bias correction. Decoupled decay applies to
/// matrices (ndim >= 2) only, leaving bias vectors unregularized.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: Elem,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {}", name)))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                name,
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::autodiff(format!("non-finite gradient at {}", name)));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * pd[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: Elem,
    pub acc: Elem,
    pub lr: Elem,
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,acc,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.8}\n",
            r.epoch, r.split, r.loss, r.acc, r.lr
        ));
    }
    s
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_val_acc: Elem,
    pub best_epoch: usize,
    pub steps: usize,
    /// Wall-clock throughput over training forward passes; not part of
    /// the deterministic record.
    pub tokens_per_sec: f64,
    pub final_token_counts: Vec<usize>,
}

/// Mean loss and top-1 accuracy over a dataset.
pub fn evaluate(model: &Vit, ds: &Dataset, batch_size: usize) -> Result<(Elem, Elem)> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let opts = ForwardOpts::default();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = ds.image_batch(chunk)?;
        let labels = ds.label_batch(chunk);
        let tape = Tape::new();
        let out = model.forward(&tape, &images, &opts)?;
        let loss = tape.cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).item()? * chunk.len() as Elem;
        let pred = tape.value(out.logits).argmax_last()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        seen += chunk.len();
    }
    Ok((loss_sum / seen as Elem, correct as Elem / seen as Elem))
}

pub fn train(
    model: &mut Vit,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    for (ds, which) in [(train_ds, "training"), (val_ds, "validation")] {
        if ds.num_classes != model.cfg.num_classes {
            return Err(Error::config(format!(
                "{} dataset has {} classes, the model head has {}",
                which, ds.num_classes, model.cfg.num_classes
            )));
        }
    }
    let frozen_before = model.frozen_checksum();
    let (trainable, _) = model.partition();
    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    let mut shuffle_rng = rng_from(substream(cfg.seed, streams::SHUFFLE));
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(Elem, usize, BTreeMap<String, Tensor>)> = None;
    let mut step = 0usize;
    let mut tokens_done = 0usize;
    let mut final_token_counts = Vec::new();
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut epoch_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images = train_ds.image_batch(chunk)?;
            let labels = train_ds.label_batch(chunk);
            let tape = Tape::new();
            let out = model.forward(&tape, &images, &ForwardOpts::default())?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_val = tape.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::autodiff(format!("non-finite loss at step {}", step)));
            }
            loss_sum += loss_val * chunk.len() as Elem;
            let pred = tape.value(out.logits).argmax_last()?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            tokens_done += out.token_counts[0] * chunk.len();
            final_token_counts = out.token_counts.clone();

            let grads = tape.backward(loss)?;
            let mut gmap = BTreeMap::new();
            let mut pmap = BTreeMap::new();
            for name in &trainable {
                gmap.insert(name.clone(), grads.grad(out.vars[name]));
                pmap.insert(name.clone(), model.params()[name].clone());
            }
            epoch_lr = lr_at(step, total_steps, warmup_steps, cfg.lr);
            adamw_step(&mut pmap, &gmap, &mut state, epoch_lr, cfg)?;
            for (name, p) in pmap {
                model.set_param(&name, p)?;
            }
            step += 1;
        }
        history.push(EpochMetrics {
            epoch,
            split: "train",
            loss: loss_sum / train_ds.len() as Elem,
            acc: correct as Elem / train_ds.len() as Elem,
            lr: epoch_lr,
        });
        on_epoch(history.last().unwrap());
        let (vloss, vacc) = evaluate(model, val_ds, cfg.batch_size)?;
        history.push(EpochMetrics { epoch, split: "val", loss: vloss, acc: vacc, lr: epoch_lr });
        on_epoch(history.last().unwrap());
        if best.as_ref().map_or(true, |(b, _, _)| vacc > *b) {
            best = Some((vacc, epoch, checkpoint::model_checkpoint(model)));
        }
    }

    if model.frozen_checksum() != frozen_before {
        return Err(Error::invalid("frozen backbone changed during training"));
    }
    let (best_val_acc, best_epoch, best_entries) = best.unwrap();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
        checkpoint::save(&dir.join("ckpt_best.fpet"), &best_entries)?;
        checkpoint::save(&dir.join("ckpt_final.fpet"), &checkpoint::model_checkpoint(model))?;
    }
    let elapsed = started.elapsed().as_secs_f64().max(1e-9);
    Ok(TrainOutcome {
        history,
        best_val_acc,
        best_epoch,
        steps: step,
        tokens_per_sec: tokens_done as f64 / elapsed,
        final_token_counts,
    })
}
