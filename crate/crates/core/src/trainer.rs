//! Training loop: cross-entropy plus the `θ` and weight regularizers, SGD with
//! separate learning rates for weights and quantizer parameters, and cosine
//! annealing of the weight learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{CodeqError, Result};
use crate::models::{ForwardMode, ForwardTrace, Model};
use crate::quantizers::{LayerQuantState, DEFAULT_EPSILON, DEFAULT_QUANTILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Unquantized baseline.
    Fp32,
    FixedBit(u32),
    MixedPrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_dz: f64,
    pub lambda_bit: f64,
    pub lambda_w: f64,
    pub lr_weights: f64,
    pub lr_theta: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub init_theta: f64,
    pub quantile: f64,
    pub b_min: u32,
    pub b_max: u32,
    pub epsilon: f64,
    pub cosine: bool,
    pub detach_scale_from_d: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_dz: 0.01,
            lambda_bit: 0.0,
            lambda_w: 0.0,
            lr_weights: 0.05,
            lr_theta: 1e-3,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            mode: TrainMode::FixedBit(4),
            init_theta: 3.0,
            quantile: DEFAULT_QUANTILE,
            b_min: 2,
            b_max: 8,
            epsilon: DEFAULT_EPSILON,
            cosine: true,
            detach_scale_from_d: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CodeqError::Config(m));
        for (name, v) in [
            ("lambda_dz", self.lambda_dz),
            ("lambda_bit", self.lambda_bit),
            ("lambda_w", self.lambda_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        if !(self.lr_weights > 0.0 && self.lr_weights.is_finite()) {
            return bad(format!("lr_weights = {} must be > 0", self.lr_weights));
        }
        if !(self.lr_theta >= 0.0 && self.lr_theta.is_finite()) {
            return bad(format!("lr_theta = {} must be >= 0", self.lr_theta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !self.init_theta.is_finite() {
            return bad("init_theta must be finite".into());
        }
        self.quant_state().map_or(Ok(()), |s| s.validate())
    }

    /// Initial quantizer state for every layer; `None` in FP32 mode.
    pub fn quant_state(&self) -> Option<LayerQuantState> {
        let mut state = match self.mode {
            TrainMode::Fp32 => return None,
            TrainMode::FixedBit(b) => {
                let mut s = LayerQuantState::fixed(b, self.init_theta);
                s.b_min = self.b_min;
                s.b_max = self.b_max;
                s
            }
            TrainMode::MixedPrecision => {
                LayerQuantState::mixed(self.init_theta, self.init_theta, self.b_min, self.b_max)
            }
        };
        state.quantile = self.quantile;
        state.epsilon = self.epsilon;
        state.detach_scale_from_d = self.detach_scale_from_d;
        Some(state)
    }

    /// Weight learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            0.5 * self.lr_weights * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.lr_weights
        }
    }
}

/// `task + λ_dz Σ θ_dz² + λ_bit Σ θ_bit² + λ_w Σ ‖W‖²`. The bit term is only
/// present for layers with a learnable bit-width.
pub fn codeq_loss(tape: &mut Tape, task_loss: NodeId, trace: &ForwardTrace, cfg: &TrainConfig) -> Result<NodeId> {
    let mut loss = task_loss;
    for layer in &trace.layers {
        if let Some(q) = &layer.quant {
            if let (Some(th), true) = (q.theta_dz, cfg.lambda_dz != 0.0) {
                let r = tape.square(th);
                let r = tape.scale(r, cfg.lambda_dz);
                loss = tape.add(loss, r)?;
            }
            if let (Some(th), true) = (q.theta_bit, cfg.lambda_bit != 0.0) {
                let r = tape.square(th);
                let r = tape.scale(r, cfg.lambda_bit);
                loss = tape.add(loss, r)?;
            }
        }
        if cfg.lambda_w != 0.0 {
            let sq = tape.square(layer.weight);
            let s = tape.sum(sq);
            let r = tape.scale(s, cfg.lambda_w);
            loss = tape.add(loss, r)?;
        }
    }
    Ok(loss)
}

/// SGD with optional momentum, `v ← μv + g`, `p ← p − lr·v`. Each parameter
/// tensor owns a velocity slot.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: Option<&[f64]>, lr: f64, momentum: f64) -> Result<()> {
        let grad = grad.ok_or(CodeqError::MissingGrad(slot))?;
        if grad.len() != param.len() {
            return Err(CodeqError::Shape(format!(
                "gradient of length {} for parameter of length {}",
                grad.len(),
                param.len()
            )));
        }
        if momentum == 0.0 {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * g;
            }
            return Ok(());
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.extend_from_slice(grad);
        } else {
            for (vi, g) in v.iter_mut().zip(grad) {
                *vi = momentum * *vi + g;
            }
        }
        for (p, vi) in param.iter_mut().zip(v.iter()) {
            *p -= lr * vi;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub epoch: usize,
    pub layer: usize,
    pub sparsity: f64,
    pub bits: u32,
    pub deadzone: Option<f64>,
    pub scale: Option<f64>,
    pub theta_dz: Option<f64>,
    pub theta_bit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_weights: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the batches as they were trained.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub overall_sparsity: f64,
    pub mean_bits: f64,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == y
        })
        .count()
}

/// Copy of `model` whose weights are the reconstructions the compressed
/// forward pass uses, with quantization switched off.
pub fn materialize(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for (layer, (w_hat, _)) in out.layers.iter_mut().zip(model.quantized_weights()?) {
        layer.weight = w_hat;
        layer.quant = None;
    }
    Ok(out)
}

/// Classification accuracy of the model as deployed (quantized layers use
/// their reconstructions).
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(CodeqError::Empty("evaluation dataset"));
    }
    let deployed = materialize(model)?;
    let mut hits = 0;
    for batch in data.batches(batch_size, None)? {
        let logits = deployed.forward(&batch.features, batch.len(), ForwardMode::Fp32)?;
        hits += correct(&logits, &batch.labels);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Per-layer statistics of the current model state.
pub fn layer_records(model: &Model, epoch: usize) -> Result<Vec<LayerRecord>> {
    model
        .quantized_weights()?
        .into_iter()
        .zip(&model.layers)
        .enumerate()
        .map(|(layer, ((w_hat, outcome), params))| {
            Ok(LayerRecord {
                epoch,
                layer,
                sparsity: crate::pruning::sparsity(&w_hat)?,
                bits: outcome.as_ref().map_or(32, |o| o.bits),
                deadzone: outcome.as_ref().map(|o| o.deadzone),
                scale: outcome.as_ref().map(|o| o.scale),
                theta_dz: params.quant.as_ref().map(|q| q.theta_dz),
                theta_bit: params.quant.as_ref().and_then(|q| q.theta_bit()),
            })
        })
        .collect()
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Train `model` in place. Quantizer state is (re)initialized from `cfg`.
pub fn train(model: &mut Model, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CodeqError::Empty("training dataset"));
    }
    if train_set.sample_len() != model.spec.input_len() {
        return Err(CodeqError::Shape(format!(
            "dataset samples of shape {:?} do not fit model input {:?}",
            train_set.sample_shape, model.spec.input_shape
        )));
    }
    let init = cfg.quant_state();
    model.set_quant(|_| init.clone());
    let mode = match cfg.mode {
        TrainMode::Fp32 => ForwardMode::Fp32,
        _ => ForwardMode::Codeq,
    };
    let mut input_shape = vec![0];
    input_shape.extend(&model.spec.input_shape);

    let mut sgd = Sgd::new();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut hits = 0usize;
        for (step, batch) in train_set.batches(cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)))?.enumerate() {
            let mut tape = Tape::new();
            input_shape[0] = batch.len();
            let x = tape.constant(batch.features, &input_shape)?;
            let trace = model.forward_on_tape(&mut tape, x, mode)?;
            hits += correct(tape.value(trace.logits), &batch.labels);
            let task = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
            let loss = codeq_loss(&mut tape, task, &trace, cfg)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(CodeqError::Divergence { epoch, step, loss: value });
            }
            tape.backward(loss)?;
            loss_sum += value;
            batches += 1;

            for (i, (layer, lt)) in model.layers.iter_mut().zip(&trace.layers).enumerate() {
                let slot = 2 * i;
                sgd.step(slot, &mut layer.weight, tape.grad(lt.weight), lr, cfg.momentum)?;
                if let Some(b) = lt.bias {
                    sgd.step(slot + 1, &mut layer.bias, tape.grad(b), lr, cfg.momentum)?;
                }
                if let (Some(state), Some(q)) = (layer.quant.as_mut(), &lt.quant) {
                    if let Some(th) = q.theta_dz {
                        let g = tape.grad(th).ok_or(CodeqError::MissingGrad(th.index()))?[0];
                        state.theta_dz -= cfg.lr_theta * g;
                    }
                    if let (Some(th), crate::quantizers::BitMode::Learned { theta_bit }) = (q.theta_bit, &mut state.bits) {
                        let g = tape.grad(th).ok_or(CodeqError::MissingGrad(th.index()))?[0];
                        *theta_bit -= cfg.lr_theta * g;
                    }
                }
            }
        }
        let layers = layer_records(model, epoch)?;
        let total: usize = model.layers.iter().map(|l| l.weight.len()).sum();
        let zeros: f64 = layers
            .iter()
            .zip(&model.layers)
            .map(|(r, l)| r.sparsity * l.weight.len() as f64)
            .sum();
        let record = EpochRecord {
            epoch,
            lr_weights: lr,
            loss: loss_sum / batches as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc: val_set.map(|v| evaluate(model, v, 256)).transpose()?,
            overall_sparsity: zeros / total as f64,
            mean_bits: layers.iter().map(|r| f64::from(r.bits)).sum::<f64>() / layers.len() as f64,
            layers,
        };
        if !record.loss.is_finite() || model.layers.iter().any(|l| l.weight.iter().any(|w| !w.is_finite())) {
            return Err(CodeqError::Divergence {
                epoch,
                step: batches,
                loss: record.loss,
            });
        }
        history.epochs.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::models::build_mlp;
    use approx::assert_relative_eq;

    fn trace_with_theta(tape: &mut Tape, theta: f64) -> (ForwardTrace, NodeId) {
        let model = {
            let mut m = build_mlp(2, &[], 2, 0).unwrap();
            m.set_quant(|_| Some(LayerQuantState::fixed(4, theta)));
            m
        };
        let x = tape.constant(vec![0.5, -0.5], &[1, 2]).unwrap();
        let trace = model.forward_on_tape(tape, x, ForwardMode::Codeq).unwrap();
        let task = tape.scalar(1.0, false);
        (trace, task)
    }

    #[test]
    fn loss_assembly_example() {
        let mut tape = Tape::new();
        let (trace, task) = trace_with_theta(&mut tape, 3.0);
        let cfg = TrainConfig {
            lambda_dz: 0.01,
            lambda_w: 0.0,
            ..TrainConfig::default()
        };
        let loss = codeq_loss(&mut tape, task, &trace, &cfg).unwrap();
        assert_relative_eq!(tape.item(loss), 1.09, max_relative = 1e-14);
        tape.backward(loss).unwrap();
        let th = trace.layers[0].quant.as_ref().unwrap().theta_dz.unwrap();
        assert_relative_eq!(tape.grad(th).unwrap()[0], 2.0 * 0.01 * 3.0, max_relative = 1e-14);

        let mut tape = Tape::new();
        let (trace, task) = trace_with_theta(&mut tape, 3.0);
        let zero = TrainConfig {
            lambda_dz: 0.0,
            lambda_bit: 0.0,
            lambda_w: 0.0,
            ..TrainConfig::default()
        };
        let loss = codeq_loss(&mut tape, task, &trace, &zero).unwrap();
        assert_eq!(loss, task);
    }

    #[test]
    fn sgd_examples() {
        let mut sgd = Sgd::new();
        let mut w = [1.0];
        sgd.step(0, &mut w, Some(&[2.0]), 0.1, 0.0).unwrap();
        assert_relative_eq!(w[0], 0.8, max_relative = 1e-15);

        let mut sgd = Sgd::new();
        let mut w = [0.0];
        sgd.step(0, &mut w, Some(&[1.0]), 0.1, 0.9).unwrap();
        let before = w[0];
        sgd.step(0, &mut w, Some(&[1.0]), 0.1, 0.9).unwrap();
        assert_relative_eq!(before - w[0], 0.19, max_relative = 1e-14);

        assert!(matches!(sgd.step(3, &mut w, None, 0.1, 0.9), Err(CodeqError::MissingGrad(3))));
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig {
            lr_weights: 0.1,
            epochs: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_relative_eq!(cfg.lr_at(2), 0.05, max_relative = 1e-14);
        assert!(cfg.lr_at(3) < cfg.lr_at(2));
    }

    #[test]
    fn training_is_deterministic_and_logged_sparsity_matches() {
        let data = synthetic_blobs(120, 4, 3, 0.2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr_theta: 0.05,
            ..TrainConfig::default()
        };
        let mut a = build_mlp(4, &[8], 3, 2).unwrap();
        let mut b = a.clone();
        let ha = train(&mut a, &data, Some(&data), &cfg).unwrap();
        let hb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let post = layer_records(&a, 1).unwrap();
        assert_eq!(post, ha.last().unwrap().layers);
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic_blobs(40, 4, 2, 0.2, 1).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Fp32,
            lr_weights: 1e200,
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut m = build_mlp(4, &[8], 2, 0).unwrap();
        assert!(matches!(train(&mut m, &data, None, &cfg), Err(CodeqError::Divergence { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lambda_dz: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
