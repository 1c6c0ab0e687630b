//! Momentum-SGD training of binarized networks with spatial dropout.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit};
use crate::dropout::{spatial_dropout_objective, stream_rng};
use crate::error::{Error, Result};
use crate::net::{argmax, logits_to_probs, BinaryConvNet, NoDropout, ParamKind, SeededMasks};
use crate::tensor::cross_entropy;

/// Stream tag separating training masks from inference masks.
const TRAIN_MASK_TAG: u64 = 0x7472_6169_6e00;
const SHUFFLE_TAG: u64 = 0x7368_7566;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base * (1 + cos(pi * step / total_steps)) / 2`
    Cosine { base: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { base } => {
                let t = if total_steps == 0 { 0.0 } else { step as f64 / total_steps as f64 };
                base * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Conventional defaults: momentum 0.9, cosine decay from 0.01.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            schedule: LrSchedule::Cosine { base: 0.01 },
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        let lr = match self.schedule {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { base } => base,
        };
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v = momentum * v + g; p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    /// Updates parameter slot `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            *v = vec![0.0; param.len()];
        }
        for ((p, g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = self.momentum * *vi + g;
            *p -= lr * *vi;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    /// Objective (cross-entropy + L2) before the update.
    pub objective: f64,
    pub task_loss: f64,
    pub correct: usize,
    pub batch: usize,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,objective,train_acc,val_acc\n");
    for m in log {
        writeln!(s, "{},{},{},{}", m.epoch, m.objective, m.train_acc, m.val_acc).unwrap();
    }
    s
}

/// Owns a network and its optimizer state across steps.
pub struct Trainer {
    pub net: BinaryConvNet,
    pub cfg: TrainConfig,
    opt: Sgd,
    step: u64,
    epoch: usize,
    batch_index: usize,
}

impl Trainer {
    pub fn new(net: BinaryConvNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        net.validate()?;
        let opt = Sgd::new(cfg.momentum);
        Ok(Self { net, cfg, opt, step: 0, epoch: 0, batch_index: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forward with fresh spatial masks, cross-entropy + L2 on proxies,
    /// straight-through backward and a momentum-SGD update.
    pub fn sgd_step(&mut self, batch: &Dataset, lr: f64) -> Result<StepOutput> {
        if batch.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let lambda = self.net.hyper.lambda;
        let mut masks = SeededMasks::new(self.cfg.seed ^ TRAIN_MASK_TAG, self.step, 0);
        let (logits, tape) = self.net.forward_train(&batch.images, &mut masks)?;
        let (task_loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
        let objective = spatial_dropout_objective(task_loss, self.net.proxy_weights(), lambda)?;
        if !objective.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch, batch: self.batch_index, value: objective });
        }
        let correct = logits_to_probs(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
        let grads = self.net.backward(&tape, &dlogits)?;
        for (slot, ((kind, param), grad)) in self.net.params_mut().into_iter().zip(&grads.0).enumerate() {
            if kind == ParamKind::ProxyWeight && lambda > 0.0 {
                let g: Vec<f64> = grad.iter().zip(param.iter()).map(|(g, w)| g + 2.0 * lambda * w).collect();
                self.opt.update(slot, param, &g, lr);
            } else {
                self.opt.update(slot, param, grad, lr);
            }
        }
        self.net.update_running_stats(&tape);
        self.step += 1;
        Ok(StepOutput { objective, task_loss, correct, batch: batch.len() })
    }

    fn run_epoch(&mut self, train: &Dataset, total_steps: usize) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, &[SHUFFLE_TAG, self.epoch as u64]));
        let mut obj_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            self.batch_index = bi;
            let lr = self.cfg.schedule.at(self.step as usize, total_steps);
            let out = self.sgd_step(&train.select(chunk), lr)?;
            obj_sum += out.objective;
            correct += out.correct;
            batches += 1;
        }
        let n = train.len().max(1) as f64;
        Ok((obj_sum / batches.max(1) as f64, correct as f64 / n))
    }
}

/// Result of [`train`]: the best-by-cross-validation network, the network
/// after the final epoch, and the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: BinaryConvNet,
    pub last: BinaryConvNet,
    pub log: Vec<EpochMetrics>,
}

pub fn train(net: BinaryConvNet, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, BinaryConvNet)> = None;
    for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let (objective, train_acc) = trainer.run_epoch(&data.train, total)?;
        let val_acc = if data.cross_val.is_empty() { 0.0 } else { accuracy(&trainer.net, &data.cross_val)? };
        log::info!("epoch {epoch}: objective {objective:.5} train {train_acc:.4} val {val_acc:.4}");
        log.push(EpochMetrics { epoch, objective, train_acc, val_acc });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, trainer.net.clone()));
        }
    }
    let last = trainer.net;
    let best = best.map(|(_, n)| n).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, log })
}

/// Deterministic (dropout-off) predictions for every sample.
pub fn predict_labels(net: &BinaryConvNet, data: &Dataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Vec<usize>> = idx
        .par_chunks(CHUNK)
        .map(|c| {
            let logits = net.forward_eval(&data.images.select(c), &mut NoDropout)?;
            Ok(logits_to_probs(&logits).iter().map(|p| argmax(p)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

pub fn accuracy(net: &BinaryConvNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("accuracy of an empty dataset"));
    }
    let pred = predict_labels(net, data)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{DropoutPlacement, HyperParams, PlacementMode};
    use crate::net::{BatchNormLayer, Layer, LinearLayer};
    use crate::tensor::Tensor4;

    #[test]
    fn quadratic_gradient_descent_matches_closed_form() {
        // loss (w - 3)^2, w0 = 0, lr = 0.1: w_k = 3 - 3 * 0.8^k
        let mut opt = Sgd::new(0.0);
        let mut w = [0.0];
        for k in 1..=5 {
            let g = [2.0 * (w[0] - 3.0)];
            opt.update(0, &mut w, &g, 0.1);
            let want = 3.0 - 3.0 * 0.8f64.powi(k);
            assert!((w[0] - want).abs() < 1e-9, "step {k}: {} vs {want}", w[0]);
        }
    }

    #[test]
    fn momentum_recurrence_by_hand() {
        // loss w^2/2 (grad = w), w0 = 1, lr = 0.5, momentum 0.5
        // v1 = 1, w1 = 0.5; v2 = 0.5*1 + 0.5 = 1, w2 = 0; v3 = 0.5 + 0 = 0.5, w3 = -0.25
        let mut opt = Sgd::new(0.5);
        let mut w = [1.0];
        for want in [0.5, 0.0, -0.25] {
            let g = [w[0]];
            opt.update(0, &mut w, &g, 0.5);
            assert!((w[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { base: 0.01 };
        assert_eq!(s.at(0, 100), 0.01);
        assert!((s.at(50, 100) - 0.005).abs() < 1e-15);
        assert!(s.at(100, 100).abs() < 1e-15);
    }

    fn blob_net() -> BinaryConvNet {
        BinaryConvNet::from_layers(
            [2, 1, 1],
            vec![
                Layer::Linear(LinearLayer { in_shape: [2, 1, 1], out: 2, proxy: vec![0.1, -0.2, 0.05, 0.3], binary: false }),
                Layer::BatchNorm(BatchNormLayer::new(2)),
            ],
            DropoutPlacement { mode: PlacementMode::TopologyWise, targets: vec![] },
            HyperParams { rho: 0.0, lambda: 0.0, mc_samples: 1 },
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_and_reports_cross_entropy() {
        let net = blob_net();
        let before: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.to_vec()).collect();
        let data = Dataset::new(
            Tensor4::new([4, 2, 1, 1], vec![1.0, 2.0, -1.0, 0.5, 0.3, -2.0, 2.0, 2.0]).unwrap(),
            vec![0, 1, 1, 0],
        )
        .unwrap();
        let logits = net.forward_train(&data.images, &mut NoDropout).unwrap().0;
        let (ce, _) = cross_entropy(&logits, &data.labels).unwrap();
        let mut tr = Trainer::new(net, TrainConfig { schedule: LrSchedule::Constant { lr: 0.0 }, ..TrainConfig::with_seed(1) }).unwrap();
        let out = tr.sgd_step(&data, 0.0).unwrap();
        assert_eq!(out.objective, ce);
        let after: Vec<Vec<f64>> = tr.net.params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn diverged_loss_is_reported() {
        let mut net = blob_net();
        if let Layer::Linear(l) = &mut net.layers[0] {
            l.proxy[0] = f64::NAN;
        }
        let data = Dataset::new(Tensor4::filled([2, 2, 1, 1], 1.0), vec![0, 1]).unwrap();
        let mut tr = Trainer::new(net, TrainConfig::with_seed(1)).unwrap();
        assert!(matches!(tr.sgd_step(&data, 0.01), Err(Error::Diverged { epoch: 0, batch: 0, .. })));
    }

    #[test]
    fn metrics_csv_layout() {
        let csv = metrics_csv(&[EpochMetrics { epoch: 0, objective: 1.5, train_acc: 0.25, val_acc: 0.5 }]);
        assert_eq!(csv, "epoch,objective,train_acc,val_acc\n0,1.5,0.25,0.5\n");
    }
}
