//! Checkpoint files.
//!
//! Binary part (little-endian):
//!
//! ```text
//! magic   8 bytes  "SPDRCKPT"
//! version u32      = 1
//! input   3 × u32  (C, H, W)
//! classes u32
//! layers  u32
//! per layer: tag u8, then
//!   0 input-quant  f64 levels
//!   1 conv         u32 c_out, c_in, k, stride, padding; u8 binary; f64 × len proxy
//!   2 linear       u32 C, H, W, out; u8 binary; f64 × len proxy
//!   3 batchnorm    u32 channels; f64 momentum; f64 × C gamma, beta, running mean, running var
//!   4 sign
//!   5 avgpool      u32 k
//!   6 adaptive-avgpool
//! ```
//!
//! The JSON sidecar at `<path>.json` carries hyperparameters and placement.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutPlacement, HyperParams};
use crate::error::{Error, Result};
use crate::net::{BatchNormLayer, BinaryConvNet, ConvLayer, Layer, LinearLayer};
use crate::tensor::{ConvGeometry, ConvWeight};

const MAGIC: &[u8; 8] = b"SPDRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub hyper: HyperParams,
    pub placement: DropoutPlacement,
    pub layers: Vec<String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit a u32 header field")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.pos as u64, format!("truncated checkpoint: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.buf.len() {
            return Err(Error::format(self.pos as u64, format!("implausible array length {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(net: &BinaryConvNet) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize)?;
    for d in net.input_dims {
        w.u32(d)?;
    }
    w.u32(net.classes)?;
    w.u32(net.layers.len())?;
    for layer in &net.layers {
        match layer {
            Layer::InputQuant { levels } => {
                w.u8(0);
                w.f64(*levels);
            }
            Layer::Conv(c) => {
                w.u8(1);
                let g = c.weight.geometry;
                for v in [g.c_out, g.c_in, g.k, g.stride, g.padding] {
                    w.u32(v)?;
                }
                w.u8(c.binary as u8);
                w.f64s(&c.weight.proxy);
            }
            Layer::Linear(l) => {
                w.u8(2);
                for v in [l.in_shape[0], l.in_shape[1], l.in_shape[2], l.out] {
                    w.u32(v)?;
                }
                w.u8(l.binary as u8);
                w.f64s(&l.proxy);
            }
            Layer::BatchNorm(bn) => {
                w.u8(3);
                w.u32(bn.gamma.len())?;
                w.f64(bn.momentum);
                w.f64s(&bn.gamma);
                w.f64s(&bn.beta);
                w.f64s(&bn.running_mean);
                w.f64s(&bn.running_var);
            }
            Layer::Sign => w.u8(4),
            Layer::AvgPool { k } => {
                w.u8(5);
                w.u32(*k)?;
            }
            Layer::AdaptiveAvgPool => w.u8(6),
        }
    }
    Ok(w.0)
}

/// Decodes the binary part; placement and hyperparameters come from `sidecar`.
pub fn decode(bytes: &[u8], sidecar: &Sidecar) -> Result<BinaryConvNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let input_dims = [r.u32()?, r.u32()?, r.u32()?];
    let classes = r.u32()?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos as u64;
        let layer = match r.u8()? {
            0 => Layer::InputQuant { levels: r.f64()? },
            1 => {
                let (c_out, c_in, k, stride, padding) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let binary = r.u8()? != 0;
                let g = ConvGeometry { c_out, c_in, k, stride, padding };
                let proxy = r.f64s(g.weight_len())?;
                let weight = ConvWeight::new(g, proxy).map_err(|e| Error::format(at, e.to_string()))?;
                Layer::Conv(ConvLayer { weight, binary })
            }
            2 => {
                let in_shape = [r.u32()?, r.u32()?, r.u32()?];
                let out = r.u32()?;
                let binary = r.u8()? != 0;
                let proxy = r.f64s(out * in_shape.iter().product::<usize>())?;
                Layer::Linear(LinearLayer { in_shape, out, proxy, binary })
            }
            3 => {
                let c = r.u32()?;
                let momentum = r.f64()?;
                Layer::BatchNorm(BatchNormLayer {
                    momentum,
                    gamma: r.f64s(c)?,
                    beta: r.f64s(c)?,
                    running_mean: r.f64s(c)?,
                    running_var: r.f64s(c)?,
                })
            }
            4 => Layer::Sign,
            5 => Layer::AvgPool { k: r.u32()? },
            6 => Layer::AdaptiveAvgPool,
            tag => return Err(Error::format(at, format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    let net = BinaryConvNet {
        input_dims,
        classes,
        layers,
        placement: sidecar.placement.clone(),
        hyper: sidecar.hyper,
    };
    net.validate()?;
    Ok(net)
}

pub fn sidecar(net: &BinaryConvNet) -> Sidecar {
    Sidecar {
        format_version: VERSION,
        hyper: net.hyper,
        placement: net.placement.clone(),
        layers: net.layers.iter().map(|l| l.name().to_string()).collect(),
    }
}

pub fn save(net: &BinaryConvNet, path: &Path) -> Result<()> {
    let bytes = encode(net)?;
    fs::File::create(path)?.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(&sidecar(net))?;
    fs::write(BinaryConvNet::sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BinaryConvNet> {
    let bytes = fs::read(path)?;
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(BinaryConvNet::sidecar_path(path))?)?;
    decode(&bytes, &side)
}
