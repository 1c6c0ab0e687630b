//! Out-of-distribution datasets, the percentile confidence rule and
//! detection metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::load_cifar10_batch;
use crate::dropout::stream_rng;
use crate::error::{Error, Result};
use crate::inference::{mc_predict_dataset, mean_of_runs, McPrediction};
use crate::net::BinaryConvNet;
use crate::tensor::Tensor4;

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_PERCENTILE: f64 = 10.0;
/// Two-sided 95 % normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthesized,
    Loaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodDataset {
    pub id: String,
    pub images: Tensor4,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl NoiseKind {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Gaussian => StandardNormal.sample(rng),
            NoiseKind::Uniform => rng.random::<f64>(),
        }
    }
}

/// `n` images of shape `dims`, image `i` drawn from `stream_rng(seed, [tag, i])`.
fn synthesize(n: usize, dims: [usize; 3], seed: u64, kind: NoiseKind) -> Result<Tensor4> {
    if n == 0 || dims.contains(&0) {
        return Err(Error::param("noise dataset needs n >= 1 and non-empty dims"));
    }
    let len: usize = dims.iter().product();
    let tag = kind as u64 + 0xD0;
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = stream_rng(seed, &[tag, i as u64]);
            (0..len).map(move |_| kind.draw(&mut rng))
        })
        .collect();
    Tensor4::new([n, dims[0], dims[1], dims[2]], data)
}

/// Pixels from a unit Gaussian.
pub fn gen_gaussian_noise(n: usize, dims: [usize; 3], seed: u64) -> Result<OodDataset> {
    Ok(OodDataset {
        id: "D1".into(),
        images: synthesize(n, dims, seed, NoiseKind::Gaussian)?,
        provenance: Provenance::Synthesized,
    })
}

/// Pixels from U(0, 1).
pub fn gen_uniform_noise(n: usize, dims: [usize; 3], seed: u64) -> Result<OodDataset> {
    Ok(OodDataset {
        id: "D2".into(),
        images: synthesize(n, dims, seed, NoiseKind::Uniform)?,
        provenance: Provenance::Synthesized,
    })
}

/// `clip(x + amplitude · noise, 0, 1)`, noise drawn as in the pure-noise
/// generators.
pub fn corrupt_with_noise(images: &Tensor4, kind: NoiseKind, amplitude: f64, seed: u64) -> Result<OodDataset> {
    if images.batch() == 0 {
        return Err(Error::param("cannot corrupt an empty image set"));
    }
    let noise = synthesize(images.batch(), [images.channels(), images.height(), images.width()], seed ^ 0xC0, kind)?;
    let data = images.data().iter().zip(noise.data()).map(|(x, z)| (x + amplitude * z).clamp(0.0, 1.0)).collect();
    let id = match kind {
        NoiseKind::Gaussian => "D3",
        NoiseKind::Uniform => "D4",
    };
    Ok(OodDataset { id: id.into(), images: Tensor4::new(images.dims(), data)?, provenance: Provenance::Synthesized })
}

/// Images from a CIFAR-layout binary file (labels ignored).
pub fn load_external_ood(path: &Path, id: &str) -> Result<OodDataset> {
    let d = load_cifar10_batch(path)?;
    Ok(OodDataset { id: id.into(), images: d.images, provenance: Provenance::Loaded })
}

/// Percentile `p ∈ [0, 100]` with linear interpolation between the closest
/// order statistics (inclusive method).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return Err(Error::param(format!("percentile {p} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Which reading of the confidence rule to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleReading {
    /// Percentile of each class over the runs, then the max over classes.
    Prose,
    /// Percentile over the classes of the run-averaged vector.
    Formula,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Ood,
    Id,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodDecision {
    pub score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRule {
    pub threshold: f64,
    pub percentile: f64,
    pub reading: RuleReading,
}

impl Default for OodRule {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, percentile: DEFAULT_PERCENTILE, reading: RuleReading::Prose }
    }
}

/// Confidence score of a T × C matrix of per-run class probabilities.
pub fn ood_score(runs: &[Vec<f64>], pct: f64, reading: RuleReading) -> Result<f64> {
    if runs.len() < 2 {
        return Err(Error::param(format!("the percentile rule needs T >= 2 runs, got {}", runs.len())));
    }
    let c = runs[0].len();
    if c == 0 || runs.iter().any(|r| r.len() != c) {
        return Err(Error::dims("per-run probabilities", &[runs.len(), c], &[runs.len()]));
    }
    if let Some(r) = runs.iter().find(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
        return Err(Error::param(format!("run probabilities sum to {}, not 1", r.iter().sum::<f64>())));
    }
    match reading {
        RuleReading::Prose => (0..c)
            .map(|k| percentile(&runs.iter().map(|r| r[k]).collect::<Vec<_>>(), pct))
            .try_fold(f64::NEG_INFINITY, |m, q| q.map(|q| m.max(q))),
        RuleReading::Formula => percentile(&mean_of_runs(runs), pct),
    }
}

pub fn ood_decide(runs: &[Vec<f64>], rule: &OodRule) -> Result<OodDecision> {
    let score = ood_score(runs, rule.percentile, rule.reading)?;
    let verdict = if score < rule.threshold { Verdict::Ood } else { Verdict::Id };
    Ok(OodDecision { score, threshold: rule.threshold, verdict })
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub dataset_id: String,
    pub n: usize,
    pub t: usize,
    pub threshold: f64,
    pub percentile: f64,
    pub flagged: usize,
    /// Fraction flagged OOD (the false-OOD rate for in-distribution data).
    pub detection_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Applies the rule to precomputed MC predictions.
pub fn detection_from_predictions(id: &str, preds: &[McPrediction], rule: &OodRule) -> Result<DetectionResult> {
    if preds.is_empty() {
        return Err(Error::param("detection rate of an empty dataset"));
    }
    let t = preds[0].runs.len();
    let flagged = preds
        .iter()
        .map(|p| ood_decide(&p.runs, rule).map(|d| d.verdict == Verdict::Ood))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&f| f)
        .count();
    let n = preds.len();
    let (ci_low, ci_high) = wilson_interval(flagged, n, Z_95);
    Ok(DetectionResult {
        dataset_id: id.into(),
        n,
        t,
        threshold: rule.threshold,
        percentile: rule.percentile,
        flagged,
        detection_rate: flagged as f64 / n as f64,
        ci_low,
        ci_high,
    })
}

/// Runs `T` MC passes over every image and applies the rule.
pub fn detection_rate(
    net: &BinaryConvNet,
    id: &str,
    images: &Tensor4,
    t: usize,
    seed: u64,
    rule: &OodRule,
) -> Result<DetectionResult> {
    if images.batch() == 0 {
        return Err(Error::param("detection rate of an empty dataset"));
    }
    let preds = mc_predict_dataset(net, images, t, seed)?;
    detection_from_predictions(id, &preds, rule)
}

pub fn results_csv(rows: &[DetectionResult]) -> String {
    let mut s = String::from("dataset_id,n,T,threshold,percentile,detection_rate,ci_low,ci_high\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.dataset_id, r.n, r.t, r.threshold, r.percentile, r.detection_rate, r.ci_low, r.ci_high
        );
    }
    s
}

/// Fraction of matrices on which the two readings give different verdicts.
pub fn reading_disagreement(matrices: &[Vec<Vec<f64>>], threshold: f64, pct: f64) -> Result<f64> {
    if matrices.is_empty() {
        return Ok(0.0);
    }
    let mut differ = 0;
    for m in matrices {
        let a = ood_score(m, pct, RuleReading::Prose)? < threshold;
        let b = ood_score(m, pct, RuleReading::Formula)? < threshold;
        differ += (a != b) as usize;
    }
    Ok(differ as f64 / matrices.len() as f64)
}

/// A random T × C matrix whose rows are probability vectors, for exercising
/// the rule.
pub fn random_probability_matrix<R: Rng + ?Sized>(t: usize, c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let sharp = rng.random_range(0.0..12.0);
    let favoured = rng.random_range(0..c);
    (0..t)
        .map(|_| {
            let logits: Vec<f64> =
                (0..c).map(|k| rng.random::<f64>() * 2.0 + if k == favoured { sharp } else { 0.0 }).collect();
            crate::tensor::softmax(&logits)
        })
        .collect()
}
