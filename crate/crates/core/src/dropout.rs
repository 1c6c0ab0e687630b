//! Spatial (channel-wise) and element-wise dropout masks, the regularized
//! training objective, and the counter-based RNG streams that make every mask
//! reproducible in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Default dropout probability.
pub const DEFAULT_RHO: f64 = 0.15;

/// Default L2 coefficient on proxy weights.
pub const DEFAULT_LAMBDA: f64 = 1e-6;

/// RNG used for every stochastic decision in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from a master seed and a tuple of counters.
///
/// Masks for (run, layer slot, sample) always come from
/// `stream_rng(seed, &[run, slot, sample])`, whichever engine draws them.
pub fn stream_rng(seed: u64, counters: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA5A5_A5A5)));
    }
    StreamRng::seed_from_u64(h)
}

/// One Bernoulli draw: `true` with probability `p`.
///
/// Both the reference mask sampler and the MTJ module model use this so they
/// consume identical randomness.
#[inline]
pub fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::param(format!("dropout probability must be in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Inverted-dropout scale `1 / (1 - rho)`.
#[inline]
pub fn keep_scale(rho: f64) -> f64 {
    1.0 / (1.0 - rho)
}

/// Keep/drop decision per channel for one sample of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMask {
    pub keep: Vec<bool>,
    pub rho: f64,
}

impl SpatialMask {
    pub fn keep_all(channels: usize, rho: f64) -> Self {
        Self { keep: vec![true; channels], rho }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }
}

/// Keep/drop decision per activation element.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementMask {
    pub dims: [usize; 4],
    pub keep: Vec<bool>,
    pub rho: f64,
}

/// Drops each of `channels` channels independently with probability `rho`.
/// Exactly one draw per channel, in channel order.
pub fn sample_spatial_mask<R: Rng + ?Sized>(channels: usize, rho: f64, rng: &mut R) -> Result<SpatialMask> {
    check_rho(rho)?;
    let keep = (0..channels).map(|_| !bernoulli(rng, rho)).collect();
    Ok(SpatialMask { keep, rho })
}

pub fn sample_element_mask<R: Rng + ?Sized>(dims: [usize; 4], rho: f64, rng: &mut R) -> Result<ElementMask> {
    check_rho(rho)?;
    let len = dims.iter().product();
    let keep = (0..len).map(|_| !bernoulli(rng, rho)).collect();
    Ok(ElementMask { dims, keep, rho })
}

/// Zeroes every dropped channel of every sample. With `scale` the kept
/// channels are multiplied by `1 / (1 - rho)`.
///
/// A mask of length C applies the same mask to every sample of the batch;
/// pass one mask per sample through [`apply_spatial_dropout_per_sample`]
/// otherwise.
pub fn apply_spatial_dropout(x: &Tensor4, mask: &SpatialMask, scale: bool) -> Result<Tensor4> {
    let masks = vec![mask.clone(); x.batch()];
    apply_spatial_dropout_per_sample(x, &masks, scale)
}

pub fn apply_spatial_dropout_per_sample(x: &Tensor4, masks: &[SpatialMask], scale: bool) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if masks.len() != n {
        return Err(Error::dims("spatial masks vs batch", &x.dims(), &[masks.len()]));
    }
    let mut out = x.clone();
    let hw = h * w;
    for (b, m) in masks.iter().enumerate() {
        if m.len() != c {
            return Err(Error::dims("spatial mask length vs channels", &x.dims(), &[m.len()]));
        }
        let factor = if scale { keep_scale(m.rho) } else { 1.0 };
        for (ch, &keep) in m.keep.iter().enumerate() {
            let base = x.index(b, ch, 0, 0);
            let slice = &mut out.data_mut()[base..base + hw];
            if keep {
                if factor != 1.0 {
                    slice.iter_mut().for_each(|v| *v *= factor);
                }
            } else {
                slice.fill(0.0);
            }
        }
    }
    Ok(out)
}

pub fn apply_element_dropout(x: &Tensor4, mask: &ElementMask, scale: bool) -> Result<Tensor4> {
    if mask.dims != x.dims() || mask.keep.len() != x.data().len() {
        return Err(Error::dims("element mask vs activation", &x.dims(), &mask.dims));
    }
    let factor = if scale { keep_scale(mask.rho) } else { 1.0 };
    let mut out = x.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&mask.keep) {
        *v = if k { *v * factor } else { 0.0 };
    }
    Ok(out)
}

/// `task_loss + lambda * Σ_l ‖W_l‖²` over real-valued proxy weights.
pub fn spatial_dropout_objective<'a>(
    task_loss: f64,
    proxy_weights: impl IntoIterator<Item = &'a [f64]>,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda}")));
    }
    let sq: f64 = proxy_weights
        .into_iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(task_loss + lambda * sq)
}

/// Where spatial dropout sits in a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementMode {
    /// Before the convolutional layers of the final block.
    LayerWise,
    /// On the extracted feature maps, before the classifier.
    TopologyWise,
}

/// Dropout placement: the MVM layer indices whose input is spatially dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutPlacement {
    pub mode: PlacementMode,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub rho: f64,
    pub lambda: f64,
    pub mc_samples: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            lambda: DEFAULT_LAMBDA,
            mc_samples: 20,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if !(self.lambda >= 0.0) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.mc_samples < 1 {
            return Err(Error::param("MC sample count must be >= 1"));
        }
        Ok(())
    }
}
