//! Losses, the SGD-with-momentum optimizer, and the frozen-backbone
//! training loop over auxiliary data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{make_captions, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pgm::load_pgm;
use crate::rng::SeededRng;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Clamp bound keeping log-probabilities finite; part of the loss
/// definition, so gradient checks agree with it.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub w_focal_map: f64,
    pub w_dice_map: f64,
    pub w_focal_score: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.01,
            momentum: 0.9,
            w_focal_map: 1.0,
            w_dice_map: 1.0,
            w_focal_score: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::usage("epochs must be at least 1".to_string()));
        }
        // learning_rate 0 is allowed: it makes training a documented no-op.
        if self.learning_rate < 0.0 {
            return Err(Error::usage("learning rate must be non-negative".to_string()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::usage("focal gamma must be non-negative".to_string()));
        }
        if !(0.0 < self.focal_alpha && self.focal_alpha < 1.0) {
            return Err(Error::usage("focal alpha must lie in (0, 1)".to_string()));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::usage("dice smoothing must be positive".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::usage("batch size must be at least 1".to_string()));
        }
        Ok(())
    }
}

fn check_binary(target: &Tensor, what: &str) -> Result<()> {
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::input(format!("{what} must contain only 0 and 1")));
    }
    Ok(())
}

/// Focal loss on the tape: mean of `-alpha_t (1 - p_t)^gamma ln(p_t)`
/// with predictions clamped to `(PROB_CLAMP, 1 - PROB_CLAMP)`.
pub fn focal_loss_value(
    tape: &mut Tape,
    pred: Value,
    target: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Value> {
    if tape.data(pred).len() != target.len() {
        return Err(Error::usage(format!(
            "focal loss on {} predictions vs {} targets",
            tape.data(pred).len(),
            target.len()
        )));
    }
    check_binary(target, "focal target")?;
    let shape = tape.shape(pred).to_vec();
    let coef =
        Tensor::new(shape.clone(), target.data().iter().map(|t| 2.0 * t - 1.0).collect())?;
    let base = Tensor::new(shape.clone(), target.data().iter().map(|t| 1.0 - t).collect())?;
    let alpha_t = Tensor::new(
        shape,
        target.data().iter().map(|t| t * alpha + (1.0 - t) * (1.0 - alpha)).collect(),
    )?;

    let p = tape.clamp_const(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let coef = tape.constant(&coef);
    let base = tape.constant(&base);
    let affine = tape.mul(p, coef);
    let p_t = tape.add(affine, base);
    let neg_pt = tape.scale(p_t, -1.0);
    let one_minus = tape.add_scalar(neg_pt, 1.0);
    let weight = tape.pow_const(one_minus, gamma);
    let log_pt = tape.ln(p_t);
    let alpha_t = tape.constant(&alpha_t);
    let weighted = tape.mul(alpha_t, weight);
    let contrib = tape.mul(weighted, log_pt);
    let mean = tape.mean_all(contrib);
    Ok(tape.scale(mean, -1.0))
}

/// Dice loss on the tape: `1 - (2 * sum(p*t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss_value(tape: &mut Tape, pred: Value, target: &Tensor, eps: f64) -> Result<Value> {
    if tape.data(pred).len() != target.len() {
        return Err(Error::usage(format!(
            "dice loss on {} predictions vs {} targets",
            tape.data(pred).len(),
            target.len()
        )));
    }
    check_binary(target, "dice target")?;
    if tape.data(pred).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::usage("dice predictions must lie in [0, 1]".to_string()));
    }
    let t = tape.constant(target);
    let t = tape.reshape(t, tape.shape(pred).to_vec());
    let inter = tape.mul(pred, t);
    let inter = tape.sum_all(inter);
    let sum_p = tape.sum_all(pred);
    let sum_t = tape.sum_all(t);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let den = tape.add(sum_p, sum_t);
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den);
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Plain-tensor focal loss for direct evaluation.
pub fn focal_loss(pred: &Tensor, target: &Tensor, alpha: f64, gamma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let loss = focal_loss_value(&mut tape, p, target, alpha, gamma)?;
    Ok(tape.data(loss)[0])
}

/// Plain-tensor dice loss for direct evaluation.
pub fn dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let loss = dice_loss_value(&mut tape, p, target, eps)?;
    Ok(tape.data(loss)[0])
}

/// Weighted sum of the map losses (focal + dice against the mask) and the
/// score focal loss against the image label.
pub fn total_loss_value(
    tape: &mut Tape,
    aggregated_map: Value,
    score: Value,
    mask: &Tensor,
    label: u8,
    cfg: &TrainConfig,
) -> Result<Value> {
    if tape.shape(aggregated_map) != mask.shape() {
        return Err(Error::input(format!(
            "mask extents {:?} do not match map {:?}",
            mask.shape(),
            tape.shape(aggregated_map)
        )));
    }
    check_binary(mask, "mask")?;
    let has_positive = mask.data().iter().any(|&v| v > 0.0);
    if (label == 1) != has_positive {
        return Err(Error::input(format!(
            "label {label} inconsistent with mask (positive pixels: {has_positive})"
        )));
    }
    let focal_map =
        focal_loss_value(tape, aggregated_map, mask, cfg.focal_alpha, cfg.focal_gamma)?;
    let dice_map = dice_loss_value(tape, aggregated_map, mask, cfg.dice_eps)?;
    let label_t = Tensor::new(vec![1], vec![label as f64])?;
    let focal_score = focal_loss_value(tape, score, &label_t, cfg.focal_alpha, cfg.focal_gamma)?;

    let a = tape.scale(focal_map, cfg.w_focal_map);
    let b = tape.scale(dice_map, cfg.w_dice_map);
    let c = tape.scale(focal_score, cfg.w_focal_score);
    let partial = tape.add(a, b);
    let c = tape.reshape(c, tape.shape(partial).to_vec());
    Ok(tape.add(partial, c))
}

/// SGD with momentum over the trainable parameters, velocities keyed by
/// parameter name.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub velocities: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new() -> Self {
        Optimizer { velocities: BTreeMap::new() }
    }

    /// `v <- momentum * v + g; value <- value - lr * v`; gradients are
    /// zeroed afterwards. Frozen parameters are untouched.
    pub fn step(&mut self, model: &mut Model, lr: f64, momentum: f64) {
        model.visit_trainable_mut(&mut |p| {
            let v = self
                .velocities
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((vi, gi), xi) in
                v.data_mut().iter_mut().zip(p.gradient.data()).zip(p.value.data_mut())
            {
                *vi = momentum * *vi + gi;
                *xi -= lr * *vi;
            }
            p.zero_grad();
        });
    }
}

/// One loss-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
    pub epoch_means: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.12}\n", r.epoch, r.step, r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(format!("writing loss log {}", path.display()), e))
    }
}

/// A training sample already loaded into memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub label: u8,
    pub category: String,
}

/// Load every record of a manifest.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|rec| {
            let image = load_pgm(Path::new(&rec.image_path))?;
            let mask = load_pgm(Path::new(&rec.mask_path))?;
            // Mask files store {0, 255}; in memory masks are {0, 1}.
            let mask = Tensor::new(
                mask.shape().to_vec(),
                mask.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
            )?;
            let has_positive = mask.data().iter().any(|&v| v > 0.0);
            if (rec.label == 1) != has_positive {
                return Err(Error::input(format!(
                    "{}: label {} inconsistent with mask (positive pixels: {has_positive})",
                    rec.mask_path, rec.label
                )));
            }
            Ok(Sample { image, mask, label: rec.label, category: rec.category.clone() })
        })
        .collect()
}

/// Train the prompt and projection parameters on a manifest; the frozen
/// backbone digest is checked before and after.
pub fn train(
    model: &mut Model,
    optimizer: &mut Optimizer,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with_limit(model, optimizer, manifest, cfg, None)
}

/// [`train`] with a hard cap on the number of per-sample steps; epochs
/// keep cycling (reshuffled) until the cap is reached.
pub fn train_for_steps(
    model: &mut Model,
    optimizer: &mut Optimizer,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<TrainLog> {
    let mut cfg = cfg.clone();
    cfg.epochs = steps.div_ceil(manifest.records.len().max(1)).max(1);
    train_with_limit(model, optimizer, manifest, &cfg, Some(steps))
}

fn train_with_limit(
    model: &mut Model,
    optimizer: &mut Optimizer,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    step_limit: Option<usize>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::input("training manifest has no records".to_string()));
    }
    let samples = load_samples(manifest)?;
    let frozen_before = model.frozen_digest();

    let mut log = TrainLog::default();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = SeededRng::new(cfg.seed).derive(0xE70C ^ epoch as u64);
        rng.shuffle(&mut order);

        let mut epoch_losses = Vec::with_capacity(order.len());
        model.zero_gradients();
        let mut batched = 0usize;
        for &idx in &order {
            if step_limit.is_some_and(|limit| step >= limit) {
                if batched > 0 {
                    optimizer.step(model, cfg.learning_rate, cfg.momentum);
                    model.zero_gradients();
                }
                if !epoch_losses.is_empty() {
                    let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
                    log.epoch_means.push(mean);
                }
                break 'outer;
            }
            let sample = &samples[idx];
            let captions = make_captions(&sample.category, manifest)?;
            let mut fp = model.forward(&sample.image, &captions)?;
            let loss = total_loss_value(
                &mut fp.tape,
                fp.aggregated_map,
                fp.score,
                &sample.mask,
                sample.label,
                cfg,
            )?;
            fp.tape.backward(loss)?;
            let grads = fp.binder.collect_gradients(&fp.tape);
            model.accumulate_gradients(&grads);
            batched += 1;
            if batched == cfg.batch_size {
                optimizer.step(model, cfg.learning_rate, cfg.momentum);
                model.zero_gradients();
                batched = 0;
            }
            let loss_value = fp.tape.data(loss)[0];
            epoch_losses.push(loss_value);
            log.rows.push(LossRow { epoch, step, loss: loss_value });
            step += 1;
        }
        if batched > 0 {
            optimizer.step(model, cfg.learning_rate, cfg.momentum);
            model.zero_gradients();
        }
        if !epoch_losses.is_empty() {
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            log.epoch_means.push(mean);
        }
    }

    if model.frozen_digest() != frozen_before {
        return Err(Error::usage(
            "frozen backbone changed during training; this is a bug".to_string(),
        ));
    }
    Ok(log)
}
