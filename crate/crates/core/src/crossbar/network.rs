//! End-to-end MC inference through simulated crossbars.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dropout::stream_rng;
use crate::error::{Error, Result};
use crate::inference::McPrediction;
use crate::net::{logits_to_probs, BinaryConvNet, Layer};
use crate::tensor::{ConvGeometry, ConvWeight, Tensor4};

use super::layout::{map_weight, CrossbarLayout, Strategy};
use super::mtj::{module_bank, MtjDropoutModule, MtjState};
use super::sim::{simulate_layer, DropoutConfigMode, LayerSimulation, Sampling, SimOptions};
use super::stream::stream_moving_windows;

/// Crossbar layouts for every MVM layer of a network, keyed by layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkLayouts {
    pub strategy: Strategy,
    pub layers: BTreeMap<usize, CrossbarLayout>,
}

/// The conv view of an MVM layer. Linear layers become a convolution whose
/// kernel covers the whole input map.
pub fn mvm_as_conv(layer: &Layer) -> Result<(ConvWeight, bool)> {
    match layer {
        Layer::Conv(c) => Ok((c.weight.clone(), c.binary)),
        Layer::Linear(l) => Ok((l.as_conv()?, l.binary)),
        other => Err(Error::Internal(format!("{} is not an MVM layer", other.name()))),
    }
}

pub fn build_layouts(net: &BinaryConvNet, strategy: Strategy) -> Result<NetworkLayouts> {
    let mut layers = BTreeMap::new();
    for (i, layer) in net.layers.iter().enumerate().filter(|(_, l)| l.is_mvm()) {
        let (w, binary) = mvm_as_conv(layer)?;
        if !binary {
            return Err(Error::Config(format!("layer {i} has real-valued weights and cannot be mapped to a crossbar")));
        }
        layers.insert(i, map_weight(&w, strategy)?);
    }
    Ok(NetworkLayouts { strategy, layers })
}

/// Dropout module states for one pass.
#[derive(Clone, Debug)]
pub enum PassMasks {
    /// Modules sample from `stream_rng(seed, [run, layer, sample])`, the same
    /// streams the reference engine draws its masks from.
    Seeded { seed: u64, run: u64, sample: u64 },
    /// Modules preset to explicit keep bits for the listed layers; other
    /// layers run without dropout.
    Fixed(BTreeMap<usize, Vec<bool>>),
    /// No dropout anywhere.
    Disabled,
}

/// Per-layer outcome of one simulated pass.
#[derive(Clone, Debug)]
pub struct PassReport {
    pub logits: Vec<f64>,
    pub layers: BTreeMap<usize, LayerSimulation>,
}

fn check_layouts(net: &BinaryConvNet, layouts: &NetworkLayouts) -> Result<()> {
    for (i, layer) in net.layers.iter().enumerate().filter(|(_, l)| l.is_mvm()) {
        let want: ConvGeometry = mvm_as_conv(layer)?.0.geometry;
        match layouts.layers.get(&i) {
            Some(l) if l.geometry == want => {}
            Some(l) => {
                return Err(Error::Config(format!("layout for layer {i} has geometry {:?}, expected {want:?}", l.geometry)))
            }
            None => return Err(Error::Config(format!("no crossbar layout for MVM layer {i}"))),
        }
    }
    Ok(())
}

/// One end-to-end pass of a single input through the simulated hardware.
pub fn simulate_pass(
    net: &BinaryConvNet,
    layouts: &NetworkLayouts,
    x: &Tensor4,
    masks: &PassMasks,
    opts: &SimOptions<'_>,
) -> Result<PassReport> {
    if x.batch() != 1 || x.dims()[1..] != net.input_dims {
        return Err(Error::dims("simulated input", &x.dims(), &[1, net.input_dims[0], net.input_dims[1], net.input_dims[2]]));
    }
    check_layouts(net, layouts)?;
    let mut cur = x.clone();
    let mut reports = BTreeMap::new();
    for (i, layer) in net.layers.iter().enumerate() {
        if !layer.is_mvm() {
            cur = net.apply_layer_eval(i, &cur)?;
            continue;
        }
        let layout = &layouts.layers[&i];
        let g = layout.geometry;
        let stream = stream_moving_windows(&cur, g.k, g.stride, g.padding, layout.strategy)?;
        let linear = matches!(layer, Layer::Linear(_));
        let mode = DropoutConfigMode::for_layer(layout.strategy, linear, (cur.height(), cur.width()));
        let rho = net.hyper.rho;
        let mut bank: Vec<MtjDropoutModule>;
        let sim = match masks {
            PassMasks::Seeded { seed, run, sample } if net.has_dropout(i) => {
                bank = module_bank(g.c_in, rho)?;
                let mut rng = stream_rng(*seed, &[*run, i as u64, *sample]);
                simulate_layer(layout, &stream, &mut bank, Some(mode), Sampling::Stochastic(&mut rng), opts)?
            }
            PassMasks::Fixed(map) if map.contains_key(&i) => {
                let keep = &map[&i];
                if keep.len() != g.c_in {
                    return Err(Error::dims("fixed mask length", &[g.c_in], &[keep.len()]));
                }
                bank = module_bank(g.c_in, rho)?;
                for (m, &k) in bank.iter_mut().zip(keep) {
                    m.preset(if k { MtjState::Parallel } else { MtjState::AntiParallel })?;
                }
                simulate_layer(layout, &stream, &mut bank, Some(mode), Sampling::Preset, opts)?
            }
            _ => simulate_layer(layout, &stream, &mut [], None, Sampling::Preset, opts)?,
        };
        cur = sim.ofm.clone();
        reports.insert(i, sim);
    }
    Ok(PassReport { logits: cur.into_data(), layers: reports })
}

/// `T` stochastic passes over each sample of `x`. Sample `b` draws from the
/// streams keyed by `sample_offset + b`, matching `mc_predict_batch`.
pub fn simulate_network_batch(
    net: &BinaryConvNet,
    layouts: &NetworkLayouts,
    x: &Tensor4,
    t: usize,
    seed: u64,
    sample_offset: u64,
) -> Result<Vec<McPrediction>> {
    if t < 1 {
        return Err(Error::param("MC sample count T must be >= 1"));
    }
    let opts = SimOptions::default();
    (0..x.batch())
        .into_par_iter()
        .map(|b| {
            let xb = x.sample(b);
            let runs = (0..t)
                .map(|run| {
                    let masks = PassMasks::Seeded { seed, run: run as u64, sample: sample_offset + b as u64 };
                    let logits = simulate_pass(net, layouts, &xb, &masks, &opts)?.logits;
                    let n = logits.len();
                    Ok(logits_to_probs(&Tensor4::new([1, n, 1, 1], logits)?).remove(0))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(McPrediction::from_runs(runs))
        })
        .collect()
}

/// Hardware counterpart of `mc_predict` for a single input.
pub fn simulate_network(
    net: &BinaryConvNet,
    layouts: &NetworkLayouts,
    x: &Tensor4,
    t: usize,
    seed: u64,
) -> Result<McPrediction> {
    if x.batch() != 1 {
        return Err(Error::dims("simulate_network expects a single input", &x.dims(), &[1]));
    }
    Ok(simulate_network_batch(net, layouts, x, t, seed, 0)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{HyperParams, PlacementMode, SpatialMask};
    use crate::inference::{mc_predict, mc_predict_batch};
    use crate::net::{FixedMasks, LenetSpec, NoDropout};

    fn net(mode: PlacementMode, rho: f64) -> BinaryConvNet {
        BinaryConvNet::lenet(
            &LenetSpec { in_channels: 1, in_size: 14, classes: 3, conv1: 3, conv2: 4, hidden: 6 },
            mode,
            HyperParams { rho, lambda: 0.0, mc_samples: 4 },
            8,
        )
        .unwrap()
    }

    fn input(k: usize) -> Tensor4 {
        Tensor4::from_fn([1, 1, 14, 14], |_, _, h, w| ((h * 7 + w * 3 + k) % 13) as f64 / 12.0)
    }

    #[test]
    fn disabled_masks_equal_deterministic_forward() {
        for s in [Strategy::S1, Strategy::S2] {
            let n = net(PlacementMode::LayerWise, 0.3);
            let layouts = build_layouts(&n, s).unwrap();
            let hw = simulate_pass(&n, &layouts, &input(0), &PassMasks::Disabled, &SimOptions::default()).unwrap();
            let sw = n.forward_eval(&input(0), &mut NoDropout).unwrap();
            assert_eq!(hw.logits, sw.data());
        }
    }

    #[test]
    fn forced_keep_all_matches_reference_with_same_masks() {
        let n = net(PlacementMode::TopologyWise, 0.2);
        let layouts = build_layouts(&n, Strategy::S1).unwrap();
        let keep = vec![true; 4];
        let hw = simulate_pass(
            &n,
            &layouts,
            &input(1),
            &PassMasks::Fixed(BTreeMap::from([(9, keep.clone())])),
            &SimOptions::default(),
        )
        .unwrap();
        let mut fixed = FixedMasks(BTreeMap::from([(9, SpatialMask { keep, rho: 0.2 })]));
        assert_eq!(hw.logits, n.forward_eval(&input(1), &mut fixed).unwrap().data());
    }

    #[test]
    fn lockstep_with_reference_engine() {
        for mode in [PlacementMode::LayerWise, PlacementMode::TopologyWise] {
            for s in [Strategy::S1, Strategy::S2] {
                let n = net(mode, 0.3);
                let layouts = build_layouts(&n, s).unwrap();
                let hw = simulate_network(&n, &layouts, &input(2), 6, 99).unwrap();
                let sw = mc_predict(&n, &input(2), 6, 99).unwrap();
                assert_eq!(hw, sw, "{mode:?} {s:?}");
            }
        }
    }

    #[test]
    fn batch_offsets_match_reference() {
        let n = net(PlacementMode::LayerWise, 0.15);
        let layouts = build_layouts(&n, Strategy::S2).unwrap();
        let x = Tensor4::concat(&[input(3), input(4), input(5)]).unwrap();
        let hw = simulate_network_batch(&n, &layouts, &x, 3, 5, 10).unwrap();
        let sw = mc_predict_batch(&n, &x, 3, 5, 10).unwrap();
        assert_eq!(hw, sw);
    }

    #[test]
    fn missing_layout_is_config_error() {
        let n = net(PlacementMode::LayerWise, 0.15);
        let mut layouts = build_layouts(&n, Strategy::S1).unwrap();
        layouts.layers.remove(&5);
        let r = simulate_pass(&n, &layouts, &input(0), &PassMasks::Disabled, &SimOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
