//! Monte-Carlo Bayesian inference with spatial dropout kept on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{argmax, logits_to_probs, BinaryConvNet, NoDropout, SeededMasks};
use crate::tensor::Tensor4;

/// Per-run softmax outputs of one input and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub mean: Vec<f64>,
    pub runs: Vec<Vec<f64>>,
}

impl McPrediction {
    pub fn from_runs(runs: Vec<Vec<f64>>) -> Self {
        let mean = mean_of_runs(&runs);
        Self { mean, runs }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean)
    }
}

/// Column means of `runs`. Each column is summed in sorted order, so the
/// result does not depend on the order of the runs.
pub fn mean_of_runs(runs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = runs.first() else { return Vec::new() };
    let t = runs.len() as f64;
    (0..first.len())
        .map(|c| {
            let mut col: Vec<f64> = runs.iter().map(|r| r[c]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / t
        })
        .collect()
}

/// `T` stochastic passes over a single input (batch of one).
pub fn mc_predict(net: &BinaryConvNet, x: &Tensor4, t: usize, seed: u64) -> Result<McPrediction> {
    if x.batch() != 1 {
        return Err(Error::dims("mc_predict expects a single input", &x.dims(), &[1]));
    }
    Ok(mc_predict_batch(net, x, t, seed, 0)?.remove(0))
}

/// `T` stochastic passes over every sample of `x`. Sample `b` uses mask
/// streams keyed by `sample_offset + b`, so results do not depend on how a
/// dataset is chunked.
pub fn mc_predict_batch(
    net: &BinaryConvNet,
    x: &Tensor4,
    t: usize,
    seed: u64,
    sample_offset: u64,
) -> Result<Vec<McPrediction>> {
    if t < 1 {
        return Err(Error::param("MC sample count T must be >= 1"));
    }
    let split = net.first_dropout_layer().unwrap_or(net.layers.len());
    let prefix = net.forward_eval_layers(x, 0..split, &mut NoDropout)?;
    let per_run: Vec<Vec<Vec<f64>>> = (0..t)
        .into_par_iter()
        .map(|run| {
            let mut masks = SeededMasks::new(seed, run as u64, sample_offset);
            let logits = net.forward_eval_layers(&prefix, split..net.layers.len(), &mut masks)?;
            Ok(logits_to_probs(&logits))
        })
        .collect::<Result<_>>()?;
    Ok((0..x.batch())
        .map(|b| McPrediction::from_runs(per_run.iter().map(|r| r[b].clone()).collect()))
        .collect())
}

/// MC predictions for a whole dataset, chunked for memory.
pub fn mc_predict_dataset(net: &BinaryConvNet, images: &Tensor4, t: usize, seed: u64) -> Result<Vec<McPrediction>> {
    const CHUNK: usize = 128;
    let n = images.batch();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Vec<McPrediction>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            mc_predict_batch(net, &images.select(&idx), t, seed, s as u64)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}
