use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use spindrop_core::crossbar::{map_layer, module_bank, simulate_layer, stream_moving_windows, Sampling, SimOptions};
use spindrop_core::dropout::{stream_rng, HyperParams, PlacementMode};
use spindrop_core::inference::mc_predict_batch;
use spindrop_core::net::{BinaryConvNet, LenetSpec};
use spindrop_core::tensor::{conv2d_raw, BinaryView, ConvGeometry, Tensor4};
use spindrop_core::{DropoutConfigMode, Strategy};

fn signs(n: usize, seed: u64) -> BinaryView {
    let mut rng = stream_rng(seed, &[]);
    BinaryView { signs: (0..n).map(|_| if rng.random() { 1 } else { -1 }).collect() }
}

fn conv(c: &mut Criterion) {
    let g = ConvGeometry { c_out: 32, c_in: 16, k: 3, stride: 1, padding: 0 };
    let w = signs(g.weight_len(), 1).to_f64();
    let x = Tensor4::from_fn([16, 16, 14, 14], |n, ch, y, x| ((n + ch * 3 + y * 5 + x) % 7) as f64 - 3.0);
    c.bench_function("conv2d 16x16x14x14 k3", |b| b.iter(|| conv2d_raw(black_box(&x), &w, &g).unwrap()));
}

fn crossbar(c: &mut Criterion) {
    let g = ConvGeometry { c_out: 16, c_in: 8, k: 3, stride: 1, padding: 0 };
    let view = signs(g.weight_len(), 2);
    let x = Tensor4::from_fn([1, 8, 12, 12], |_, ch, y, x| ((ch + y * 3 + x) % 9) as f64 - 4.0);
    let mut group = c.benchmark_group("simulate_layer");
    for s in [Strategy::S1, Strategy::S2] {
        let layout = map_layer(&g, &view, s).unwrap();
        let stream = stream_moving_windows(&x, g.k, g.stride, 0, s).unwrap();
        let mode = DropoutConfigMode::for_layer(s, false, (12, 12));
        let mut bank = module_bank(g.c_in, 0.15).unwrap();
        let mut rng = stream_rng(3, &[]);
        group.bench_function(format!("{s:?}"), |b| {
            b.iter(|| {
                simulate_layer(&layout, &stream, &mut bank, Some(mode), Sampling::Stochastic(&mut rng), &SimOptions::default())
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn mc(c: &mut Criterion) {
    let hyper = HyperParams { rho: 0.15, lambda: 0.0, mc_samples: 20 };
    let net = BinaryConvNet::lenet(&LenetSpec::default(), PlacementMode::TopologyWise, hyper, 1).unwrap();
    let x = Tensor4::from_fn([32, 1, 28, 28], |n, _, y, x| ((n + y * x) % 11) as f64 / 10.0);
    c.bench_function("mc_predict 32 images T=20", |b| b.iter(|| mc_predict_batch(&net, black_box(&x), 20, 7, 0).unwrap()));
}

criterion_group!(benches, conv, crossbar, mc);
criterion_main!(benches);
