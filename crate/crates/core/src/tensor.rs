//! Deterministic tensor math for the reference engine.
//!
//! Everything here is a plain nested-loop implementation over `f64`. The
//! accumulation order of every reduction is fixed, so results are
//! bit-reproducible and the crossbar simulator can be checked against these
//! functions with exact equality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Clip range of the straight-through estimator.
pub const STE_CLIP: f64 = 1.0;

/// Dense 4D tensor laid out as (batch, channels, height, width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::param(format!("tensor dims must be >= 1, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::dims("tensor data length", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be >= 1");
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut i = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(a, b, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of values in one sample (C·H·W).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Copy of sample `n` as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let len = self.sample_len();
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        Tensor4 {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    /// Concatenates batches with identical per-sample shape.
    pub fn concat(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or_else(|| Error::param("concat of zero tensors"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(Error::dims("concat sample shape", &first.dims, &p.dims));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Tensor4::new([n, first.dims[1], first.dims[2], first.dims[3]], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Reinterprets the tensor with new dims of equal volume.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Tensor4> {
        Tensor4::new(dims, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    /// Output spatial size for an input of `h × w`, or `None` if the kernel
    /// does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.k == 0 || self.stride == 0 || ph < self.k || pw < self.k {
            return None;
        }
        Some(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }

    #[inline]
    pub fn weight_index(&self, co: usize, ci: usize, kh: usize, kw: usize) -> usize {
        ((co * self.c_in + ci) * self.k + kh) * self.k + kw
    }
}

/// Real-valued proxy weights of a convolution, shape (C_out, C_in, K, K).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvWeight {
    pub geometry: ConvGeometry,
    pub proxy: Vec<f64>,
}

impl ConvWeight {
    pub fn new(geometry: ConvGeometry, proxy: Vec<f64>) -> Result<Self> {
        if geometry.k == 0 || geometry.stride == 0 || geometry.c_in == 0 || geometry.c_out == 0 {
            return Err(Error::param(format!("invalid conv geometry {geometry:?}")));
        }
        if proxy.len() != geometry.weight_len() {
            return Err(Error::dims(
                "conv weight length",
                &[geometry.c_out, geometry.c_in, geometry.k, geometry.k],
                &[proxy.len()],
            ));
        }
        if proxy.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("conv proxy weights must be finite"));
        }
        Ok(Self { geometry, proxy })
    }

    pub fn shape(&self) -> [usize; 4] {
        let g = &self.geometry;
        [g.c_out, g.c_in, g.k, g.k]
    }

    /// Sign view of the layer-normalized proxy.
    pub fn binary_view(&self) -> BinaryView {
        binarize(&normalize_weights(&self.proxy))
    }
}

/// ±1 weights derived from a proxy tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryView {
    pub signs: Vec<i8>,
}

impl BinaryView {
    pub fn to_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| f64::from(s)).collect()
    }
}

/// Layer-wise weight normalization `(w - mean) / std` with population
/// statistics. A constant layer (std = 0) yields all zeros and logs a warning.
pub fn normalize_weights(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        log::warn!("degenerate layer: all {} weights equal, normalizing to zero", values.len());
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Elementwise sign with `sign(0) = +1`.
pub fn binarize(values: &[f64]) -> BinaryView {
    BinaryView {
        signs: values.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect(),
    }
}

#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Straight-through estimator: pass `upstream` where `|proxy| <= clip`.
pub fn ste_backward(upstream: &[f64], proxy: &[f64], clip: f64) -> Result<Vec<f64>> {
    if upstream.len() != proxy.len() {
        return Err(Error::dims("ste shapes", &[upstream.len()], &[proxy.len()]));
    }
    Ok(upstream
        .iter()
        .zip(proxy)
        .map(|(&g, &p)| if p.abs() <= clip { g } else { 0.0 })
        .collect())
}

/// Direct convolution. With `weights_binary` the normalized sign view of the
/// proxy is used instead of the proxy itself.
pub fn conv2d(x: &Tensor4, w: &ConvWeight, weights_binary: bool) -> Result<Tensor4> {
    if weights_binary {
        conv2d_raw(x, &w.binary_view().to_f64(), &w.geometry)
    } else {
        conv2d_raw(x, &w.proxy, &w.geometry)
    }
}

/// Convolution with an explicit flat weight buffer in (C_out, C_in, K, K)
/// order. Each output element accumulates its terms in (c_in, kh, kw) order.
pub fn conv2d_raw(x: &Tensor4, weights: &[f64], g: &ConvGeometry) -> Result<Tensor4> {
    if x.channels() != g.c_in {
        return Err(Error::dims(
            "conv2d input channels vs weight C_in",
            &x.dims(),
            &[g.c_out, g.c_in, g.k, g.k],
        ));
    }
    if weights.len() != g.weight_len() {
        return Err(Error::dims("conv2d weight length", &[g.weight_len()], &[weights.len()]));
    }
    let (ho, wo) = g
        .output_hw(x.height(), x.width())
        .ok_or_else(|| Error::dims("conv2d output would be empty", &x.dims(), &[g.k, g.k]))?;
    let [n, _, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, g.c_out, ho, wo]);
    let xd = x.data();
    let (s, pad) = (g.stride, g.padding);
    for b in 0..n {
        for co in 0..g.c_out {
            let obase = out.index(b, co, 0, 0);
            let od = &mut out.data_mut()[obase..obase + ho * wo];
            for ci in 0..g.c_in {
                let ibase = x.index(b, ci, 0, 0);
                for kh in 0..g.k {
                    let ys = valid_outputs(kh, s, pad, h, ho);
                    for kw in 0..g.k {
                        let xs = valid_outputs(kw, s, pad, w, wo);
                        let wv = weights[g.weight_index(co, ci, kh, kw)];
                        for oy in ys.clone() {
                            let row = ibase + (oy * s + kh - pad) * w;
                            let dst = &mut od[oy * wo + xs.start..oy * wo + xs.end];
                            if s == 1 {
                                let src = &xd[row + xs.start + kw - pad..row + xs.end + kw - pad];
                                for (d, v) in dst.iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            } else {
                                for (d, ox) in dst.iter_mut().zip(xs.clone()) {
                                    *d += wv * xd[row + ox * s + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output indices `o < n_out` whose tap `offset` lands inside `0..n_in`.
fn valid_outputs(offset: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > offset { ((n_in + pad - offset - 1) / stride + 1).min(n_out) } else { 0 };
    lo.min(hi)..hi
}

/// Gradients of a convolution with respect to its input and weights.
pub fn conv2d_backward(
    x: &Tensor4,
    weights: &[f64],
    g: &ConvGeometry,
    dy: &Tensor4,
) -> (Tensor4, Vec<f64>) {
    let [n, _, h, w] = x.dims();
    let [_, _, ho, wo] = dy.dims();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dw = vec![0.0; g.weight_len()];
    let (s, pad) = (g.stride, g.padding);
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for b in 0..n {
        for co in 0..g.c_out {
            let obase = (b * g.c_out + co) * ho * wo;
            for ci in 0..g.c_in {
                let ibase = (b * g.c_in + ci) * h * w;
                for kh in 0..g.k {
                    let ys = valid_outputs(kh, s, pad, h, ho);
                    for kw in 0..g.k {
                        let xs = valid_outputs(kw, s, pad, w, wo);
                        let wi = g.weight_index(co, ci, kh, kw);
                        let wv = weights[wi];
                        let mut acc = 0.0;
                        for oy in ys.clone() {
                            let row = ibase + (oy * s + kh - pad) * w;
                            let gys = &dyd[obase + oy * wo + xs.start..obase + oy * wo + xs.end];
                            for (&gy, ox) in gys.iter().zip(xs.clone()) {
                                let ix = row + ox * s + kw - pad;
                                acc += gy * xd[ix];
                                dxd[ix] += gy * wv;
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Affine map `W·x + b` with `W` stored row-major as (out, in).
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let out = b.len();
    if out == 0 || w.len() != out * x.len() {
        return Err(Error::dims("linear W vs (out, in)", &[w.len()], &[out, x.len()]));
    }
    Ok((0..out)
        .map(|o| {
            let row = &w[o * x.len()..(o + 1) * x.len()];
            row.iter().zip(x).fold(b[o], |acc, (wv, xv)| acc + wv * xv)
        })
        .collect())
}

/// Cached statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub x_hat: Tensor4,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_bn(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != x.channels() || beta.len() != x.channels() {
        return Err(Error::dims("batchnorm channels", &x.dims(), &[gamma.len(), beta.len()]));
    }
    Ok(())
}

/// Per-channel batch normalization with batch statistics (biased variance).
pub fn batchnorm_train(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> Result<(Tensor4, BatchNormCache)> {
    check_bn(x, gamma, beta)?;
    let [n, c, h, w] = x.dims();
    let count = (n * h * w) as f64;
    let hw = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = x.index(b, ch, 0, 0);
            s += x.data()[base..base + hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let base = x.index(b, ch, 0, 0);
            v += x.data()[base..base + hw].iter().map(|&u| (u - m) * (u - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(x.dims());
    let mut y = Tensor4::zeros(x.dims());
    for b in 0..n {
        for ch in 0..c {
            let base = x.index(b, ch, 0, 0);
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                x_hat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((y, BatchNormCache { x_hat, inv_std, mean, var }))
}

/// Per-channel batch normalization with fixed (running) statistics.
pub fn batchnorm_eval(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<Tensor4> {
    check_bn(x, gamma, beta)?;
    if mean.len() != x.channels() || var.len() != x.channels() {
        return Err(Error::dims("batchnorm statistics", &x.dims(), &[mean.len(), var.len()]));
    }
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut y = Tensor4::zeros(x.dims());
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        for b in 0..n {
            let base = x.index(b, ch, 0, 0);
            for i in base..base + hw {
                y.data_mut()[i] = gamma[ch] * ((x.data()[i] - mean[ch]) * inv) + beta[ch];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode batch normalization.
pub fn batchnorm_backward(dy: &Tensor4, cache: &BatchNormCache, gamma: &[f64]) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dy.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            let base = dy.index(b, ch, 0, 0);
            for i in base..base + hw {
                dbeta[ch] += dy.data()[i];
                dgamma[ch] += dy.data()[i] * cache.x_hat.data()[i];
            }
        }
    }
    let mut dx = Tensor4::zeros(dy.dims());
    for ch in 0..c {
        let k = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = dy.index(b, ch, 0, 0);
            for i in base..base + hw {
                dx.data_mut()[i] =
                    k * (count * dy.data()[i] - dbeta[ch] - cache.x_hat.data()[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping average pooling with window and stride `k` (floor mode).
pub fn avgpool2d(x: &Tensor4, k: usize) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if k == 0 || h < k || w < k {
        return Err(Error::dims("avgpool window larger than input", &x.dims(), &[k, k]));
    }
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x.at(b, ch, oy * k + dy, ox * k + dx);
                        }
                    }
                    let i = out.index(b, ch, oy, ox);
                    out.data_mut()[i] = s * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward(dy: &Tensor4, input_dims: [usize; 4], k: usize) -> Tensor4 {
    let mut dx = Tensor4::zeros(input_dims);
    let [n, c, ho, wo] = dy.dims();
    let norm = 1.0 / (k * k) as f64;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy.at(b, ch, oy, ox) * norm;
                    for ddy in 0..k {
                        for ddx in 0..k {
                            let i = dx.index(b, ch, oy * k + ddy, ox * k + ddx);
                            dx.data_mut()[i] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Averages each feature map to a single value: (N, C, H, W) → (N, C, 1, 1).
pub fn adaptive_avgpool_to_1x1(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let base = x.index(b, ch, 0, 0);
            out.data_mut()[b * c + ch] = x.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    out
}

pub fn adaptive_avgpool_backward(dy: &Tensor4, input_dims: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = input_dims;
    let hw = h * w;
    let mut dx = Tensor4::zeros(input_dims);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.data()[b * c + ch] / hw as f64;
            let base = dx.index(b, ch, 0, 0);
            dx.data_mut()[base..base + hw].fill(g);
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sign_activation(x: &Tensor4) -> Tensor4 {
    x.map(sign)
}

/// Straight-through gradient of the sign activation.
pub fn sign_backward(dy: &Tensor4, x: &Tensor4, clip: f64) -> Tensor4 {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v.abs() <= clip { g } else { 0.0 })
        .collect();
    Tensor4 { dims: dy.dims, data }
}

/// Mean softmax cross-entropy over a batch of logits shaped (N, classes, 1, 1).
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let n = logits.batch();
    let classes = logits.sample_len();
    if labels.len() != n {
        return Err(Error::dims("cross-entropy labels vs batch", &logits.dims(), &[labels.len()]));
    }
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::param(format!("label {label} out of range for {classes} classes")));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let p = softmax(row);
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (p[j] - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn geom(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry { c_out, c_in, k, stride, padding }
    }

    /// Scalar triple-loop oracle, written independently of `conv2d_raw`.
    fn conv_oracle(x: &Tensor4, w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (h, wd) = (x.height() as isize, x.width() as isize);
        let ho = (x.height() + 2 * g.padding - g.k) / g.stride + 1;
        let wo = (x.width() + 2 * g.padding - g.k) / g.stride + 1;
        let mut out = Vec::new();
        for b in 0..x.batch() {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..g.c_in {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                                    if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                        s += w[((co * g.c_in + ci) * g.k + kh) * g.k + kw]
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_gives_nines() {
        let x = Tensor4::filled([1, 1, 4, 4], 1.0);
        let w = ConvWeight::new(geom(1, 1, 3, 1, 0), vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, false).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[9.0; 4]);
    }

    #[test]
    fn conv_zero_weights_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_fn([2, 3, 6, 5], |_, _, _, _| rng.random_range(-5.0..5.0));
        let w = ConvWeight::new(geom(4, 3, 3, 2, 1), vec![0.0; 4 * 3 * 9]).unwrap();
        let y = conv2d(&x, &w, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = Tensor4::from_fn([1, 2, 5, 5], |_, _, _, _| rng.random_range(-3..=3) as f64);
        let g = geom(3, 2, 3, 1, 0);
        let w: Vec<f64> = (0..g.weight_len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let y = conv2d_raw(&x, &w, &g).unwrap();
        assert_eq!(y.dims(), [1, 3, 3, 3]);
        assert_eq!(y.data(), conv_oracle(&x, &w, &g).as_slice());
    }

    #[test]
    fn conv_shape_mismatch_names_shapes() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let w = ConvWeight::new(geom(1, 3, 3, 1, 0), vec![1.0; 27]).unwrap();
        let err = conv2d(&x, &w, false).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_binary_equals_real_for_sign_proxies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = geom(3, 2, 3, 1, 1);
        // Balanced ±1 proxies keep the sign of the normalized value.
        let proxy: Vec<f64> = (0..g.weight_len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mean = proxy.iter().sum::<f64>() / proxy.len() as f64;
        assert!(mean.abs() < 1.0);
        let w = ConvWeight::new(g, proxy).unwrap();
        let x = Tensor4::from_fn([2, 2, 5, 4], |_, _, _, _| rng.random_range(-4..=4) as f64);
        assert_eq!(conv2d(&x, &w, true).unwrap(), conv2d(&x, &w, false).unwrap());
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = geom(2, 2, 3, 2, 1);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor4::from_fn([1, 2, 7, 7], |_, _, _, _| rng.random_range(-1.0..1.0));
        let a = -2.75;
        let lhs = conv2d_raw(&x.map(|v| a * v), &w, &g).unwrap();
        let rhs = conv2d_raw(&x, &w, &g).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            let r = a * r;
            assert!((l - r).abs() <= 1e-9 * r.abs().max(1e-12), "{l} vs {r}");
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(normalize_weights(&[4.2, 4.2, 4.2]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_gaussian_against_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w: Vec<f64> = (0..256).map(|_| 3.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let out = normalize_weights(&w);
        let n = out.len() as f64;
        let m = out.iter().sum::<f64>() / n;
        let s = (out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn binarize_tie_and_sign() {
        assert_eq!(binarize(&[0.3, -0.7, 0.0]).signs, vec![1, -1, 1]);
        assert!(binarize(&[-1.0, -0.5, -1e-300]).signs.iter().all(|&s| s == -1));
    }

    #[test]
    fn binarize_balanced_on_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b = binarize(&normalize_weights(&w));
        let pos = b.signs.iter().filter(|&&s| s == 1).count() as f64 / 1000.0;
        assert!((0.46..=0.54).contains(&pos), "{pos}");
    }

    #[test]
    fn ste_examples() {
        assert_eq!(ste_backward(&[1.0; 3], &[0.0; 3], 1.0).unwrap(), vec![1.0; 3]);
        assert_eq!(ste_backward(&[1.0; 3], &[10.0; 3], 1.0).unwrap(), vec![0.0; 3]);
        assert_eq!(
            ste_backward(&[3.0; 3], &[-2.0, 0.5, 2.0], 1.0).unwrap(),
            vec![0.0, 3.0, 0.0]
        );
    }

    #[test]
    fn linear_examples() {
        let x = [1.5, -2.0, 0.25];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(linear(&x, &eye, &[0.0; 3]).unwrap(), x.to_vec());
        assert_eq!(linear(&x, &[0.0; 6], &[7.0, -1.0]).unwrap(), vec![7.0, -1.0]);
        assert!(linear(&x, &[0.0; 5], &[0.0; 2]).is_err());
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = linear(&x, &w, &b).unwrap();
        for o in 0..4 {
            let mut s = b[o];
            for i in 0..8 {
                s += w[o * 8 + i] * x[i];
            }
            assert_eq!(y[o], s);
        }
    }

    #[test]
    fn pooling_and_softmax_examples() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[2.5]);
        let c = Tensor4::filled([1, 5, 3, 4], 0.75);
        let p = adaptive_avgpool_to_1x1(&c);
        assert_eq!(p.dims(), [1, 5, 1, 1]);
        assert!(p.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        let s = softmax(&[0.0; 10]);
        assert!(s.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let s = softmax(&[1000.0, -3.0, 2.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_zero_variance_is_stable() {
        let x = Tensor4::filled([4, 2, 3, 3], 5.0);
        let (y, cache) = batchnorm_train(&x, &[1.0, 2.0], &[0.5, -0.5]).unwrap();
        assert!(y.is_finite());
        assert!(cache.inv_std.iter().all(|&v| (v - 1.0 / BN_EPS.sqrt()).abs() < 1e-6));
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sign_activation_tie() {
        let x = Tensor4::new([1, 3, 1, 1], vec![-0.1, 0.0, 2.0]).unwrap();
        assert_eq!(sign_activation(&x).data(), &[-1.0, 1.0, 1.0]);
    }
}
