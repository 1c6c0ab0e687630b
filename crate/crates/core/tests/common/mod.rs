//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use spindrop_core::dropout::{stream_rng, DropoutPlacement, HyperParams, PlacementMode, SpatialMask};
use spindrop_core::net::{BatchNormLayer, BinaryConvNet, ConvLayer, FixedMasks, Layer, LinearLayer};
use spindrop_core::tensor::{cross_entropy, ConvGeometry, ConvWeight, Tensor4};

/// Real-weight conv → BN → avgpool → dropped linear → BN, small enough for
/// finite differences.
pub fn toy_net() -> BinaryConvNet {
    let mut rng = stream_rng(21, &[]);
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
    let g = ConvGeometry { c_out: 3, c_in: 2, k: 3, stride: 1, padding: 0 };
    let mut bn1 = BatchNormLayer::new(3);
    bn1.gamma = vec![1.2, 0.7, 0.9];
    bn1.beta = vec![0.1, -0.2, 0.05];
    let layers = vec![
        Layer::Conv(ConvLayer { weight: ConvWeight::new(g, draw(g.weight_len())).unwrap(), binary: false }),
        Layer::BatchNorm(bn1),
        Layer::AvgPool { k: 2 },
        Layer::Linear(LinearLayer { in_shape: [3, 2, 2], out: 4, proxy: draw(48), binary: false }),
        Layer::BatchNorm(BatchNormLayer::new(4)),
    ];
    BinaryConvNet::from_layers(
        [2, 6, 6],
        layers,
        DropoutPlacement { mode: PlacementMode::TopologyWise, targets: vec![3] },
        HyperParams { rho: 0.25, lambda: 0.0, mc_samples: 2 },
    )
    .unwrap()
}

fn toy_masks() -> FixedMasks {
    FixedMasks(BTreeMap::from([(3, SpatialMask { keep: vec![true, false, true], rho: 0.25 })]))
}

fn toy_loss(net: &BinaryConvNet, x: &Tensor4, y: &[usize]) -> f64 {
    let (logits, _) = net.forward_train(x, &mut toy_masks()).unwrap();
    cross_entropy(&logits, y).unwrap().0
}

/// One checked coordinate: (slot, index, analytic, numeric, relative error).
pub type GradSample = (usize, usize, f64, f64, f64);

/// Compares backprop with central differences (h = 1e-4) on `coords`
/// seeded random parameter coordinates of [`toy_net`]. Relative error uses
/// `max(|a|, |n|, 1e-6)` as denominator.
pub fn gradient_check(coords: usize) -> Vec<GradSample> {
    let net = toy_net();
    let mut rng = stream_rng(5, &[]);
    let x = Tensor4::from_fn([5, 2, 6, 6], |_, _, _, _| rng.random_range(-1.0..1.0));
    let y = [0, 3, 1, 2, 1];

    let (logits, tape) = net.forward_train(&x, &mut toy_masks()).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &y).unwrap();
    let grads = net.backward(&tape, &dlogits).unwrap();

    let slots: Vec<usize> = net.params().iter().map(|(_, p)| p.len()).collect();
    let total: usize = slots.iter().sum();
    let h = 1e-4;
    (0..coords)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut slot = 0;
            while flat >= slots[slot] {
                flat -= slots[slot];
                slot += 1;
            }
            let mut plus = net.clone();
            plus.params_mut()[slot].1[flat] += h;
            let mut minus = net.clone();
            minus.params_mut()[slot].1[flat] -= h;
            let numeric = (toy_loss(&plus, &x, &y) - toy_loss(&minus, &x, &y)) / (2.0 * h);
            let analytic = grads.0[slot][flat];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            (slot, flat, analytic, numeric, rel)
        })
        .collect()
}

pub fn mnist_subset() -> (PathBuf, PathBuf) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    (root.join("images-idx3-ubyte.gz"), root.join("labels-idx1-ubyte.gz"))
}
