//! Cycle-level simulation of one layer pass on mapped crossbars.

use serde::{Deserialize, Serialize};

use crate::dropout::{keep_scale, StreamRng};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::layout::{CrossbarLayout, Strategy};
use super::mtj::MtjDropoutModule;
use super::stream::InputStream;

/// How the dropout modules are wired to a layer and when they sample.
///
/// | mode                | module drives                 | sampling                        |
/// |---------------------|-------------------------------|---------------------------------|
/// | `S1Conv`            | `K·K` contiguous rows         | cycle 1, held for `N − 1` cycles |
/// | `S2Conv`            | row `m` of each of `K·K` bars | cycle 1, held for `N − 1` cycles |
/// | `FlattenNoAvgPool`  | the `H·W` rows of a channel   | once, for the single FC cycle   |
/// | `WithAvgPool`       | one row per pooled channel    | every read, no hold             |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutConfigMode {
    S1Conv,
    S2Conv,
    FlattenNoAvgPool,
    WithAvgPool,
}

impl DropoutConfigMode {
    /// Mode for an MVM layer: convolutions follow the strategy, linear layers
    /// depend on whether their input was pooled to 1×1.
    pub fn for_layer(strategy: Strategy, linear: bool, input_hw: (usize, usize)) -> Self {
        match (linear, input_hw) {
            (true, (1, 1)) => DropoutConfigMode::WithAvgPool,
            (true, _) => DropoutConfigMode::FlattenNoAvgPool,
            (false, _) => match strategy {
                Strategy::S1 => DropoutConfigMode::S1Conv,
                Strategy::S2 => DropoutConfigMode::S2Conv,
            },
        }
    }

    pub fn holds(self) -> bool {
        matches!(self, DropoutConfigMode::S1Conv | DropoutConfigMode::S2Conv | DropoutConfigMode::FlattenNoAvgPool)
    }

    /// Word-lines switched by one module, across all crossbars of `layout`.
    pub fn group_size(self, layout: &CrossbarLayout) -> usize {
        layout.geometry.k * layout.geometry.k
    }

    fn check(self, layout: &CrossbarLayout, stream: &InputStream) -> Result<()> {
        let ok = match self {
            DropoutConfigMode::S1Conv => layout.strategy == Strategy::S1,
            DropoutConfigMode::S2Conv => layout.strategy == Strategy::S2,
            DropoutConfigMode::FlattenNoAvgPool => stream.n_cycles() == 1,
            DropoutConfigMode::WithAvgPool => stream.n_cycles() == 1 && layout.geometry.k == 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "dropout mode {self:?} does not fit a {:?} layout with K={} over {} cycles",
                layout.strategy,
                layout.geometry.k,
                stream.n_cycles()
            )));
        }
        Ok(())
    }
}

/// Where module states come from at sampling time.
pub enum Sampling<'a> {
    /// RESET + stochastic SET on every module.
    Stochastic(&'a mut StreamRng),
    /// Use the states already present in the modules (injected masks).
    Preset,
}

/// Conversion applied to every group-wise partial sum before accumulation.
pub trait PartialSumReadout: Send + Sync {
    fn read(&self, partial: f64) -> f64;
}

/// Lossless ADC.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdealReadout;

impl PartialSumReadout for IdealReadout {
    fn read(&self, partial: f64) -> f64 {
        partial
    }
}

pub struct SimOptions<'a> {
    /// Multiply outputs by `1/(1 − rho)` when dropout is active.
    pub scale: bool,
    /// Row groups activated together; `None` activates all groups at once.
    pub groups_per_cycle: Option<usize>,
    pub readout: &'a dyn PartialSumReadout,
    /// Record the per-cycle keep bits of every module.
    pub record_trace: bool,
}

impl Default for SimOptions<'static> {
    fn default() -> Self {
        Self { scale: true, groups_per_cycle: None, readout: &IdealReadout, record_trace: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: usize,
    /// Word-line group activations, summed over crossbars and cycles.
    pub group_activations: usize,
    pub module_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSimulation {
    /// Output map, scaled when dropout is active and scaling is on.
    pub ofm: Tensor4,
    /// Accumulator contents before scaling.
    pub raw: Tensor4,
    /// Keep bit of every module at cycle 1 (empty without dropout).
    pub mask: Vec<bool>,
    /// Keep bits per cycle, when recorded.
    pub trace: Vec<Vec<bool>>,
    pub stats: SimStats,
}

fn check_stream(layout: &CrossbarLayout, stream: &InputStream) -> Result<()> {
    let g = &layout.geometry;
    if layout.strategy != stream.strategy
        || g.k != stream.k
        || g.stride != stream.stride
        || g.padding != stream.padding
        || g.c_in != stream.c_in
    {
        return Err(Error::Config(format!(
            "stream ({:?}, K={}, S={}, pad={}, C_in={}) does not match layout ({:?}, K={}, S={}, pad={}, C_in={})",
            stream.strategy,
            stream.k,
            stream.stride,
            stream.padding,
            stream.c_in,
            layout.strategy,
            g.k,
            g.stride,
            g.padding,
            g.c_in
        )));
    }
    Ok(())
}

/// Runs one layer pass. `modules` must be empty when `mode` is `None` and
/// hold exactly `C_in` modules otherwise.
pub fn simulate_layer(
    layout: &CrossbarLayout,
    stream: &InputStream,
    modules: &mut [MtjDropoutModule],
    mode: Option<DropoutConfigMode>,
    mut sampling: Sampling<'_>,
    opts: &SimOptions<'_>,
) -> Result<LayerSimulation> {
    check_stream(layout, stream)?;
    let g = layout.geometry;
    let rho = match mode {
        None if !modules.is_empty() => {
            return Err(Error::Config(format!("{} dropout modules given without a dropout mode", modules.len())))
        }
        None => 0.0,
        Some(m) => {
            m.check(layout, stream)?;
            if modules.len() != layout.module_count() {
                return Err(Error::Config(format!(
                    "layout needs {} dropout modules, got {}",
                    layout.module_count(),
                    modules.len()
                )));
            }
            let p = modules[0].set_probability();
            if modules.iter().any(|m| m.set_probability() != p) {
                return Err(Error::Config("dropout modules of one layer disagree on set probability".into()));
            }
            p
        }
    };
    let gpc = opts.groups_per_cycle.unwrap_or(g.c_in).max(1);
    let mut stats = SimStats::default();
    let mut trace = Vec::new();
    let mut first_mask = Vec::new();
    let mut raw = Tensor4::zeros([1, g.c_out, stream.h_out, stream.w_out]);
    let plane = stream.h_out * stream.w_out;
    let mut partial = vec![0.0; g.c_out];
    let mut acc = vec![0.0; g.c_out];
    let mut keep = vec![true; g.c_in];

    for (t, cycle) in stream.cycles.iter().enumerate() {
        if let Some(m) = mode {
            if t == 0 || !m.holds() {
                if let Sampling::Stochastic(rng) = &mut sampling {
                    for module in modules.iter_mut() {
                        module.sample(&mut **rng)?;
                        stats.module_samples += 1;
                    }
                }
                if m.holds() {
                    modules.iter_mut().for_each(MtjDropoutModule::assert_hold);
                }
            }
            for (k, module) in keep.iter_mut().zip(modules.iter()) {
                *k = module.keeps();
            }
            if t == 0 {
                first_mask = keep.clone();
            }
            if opts.record_trace {
                trace.push(keep.clone());
            }
        }

        acc.iter_mut().for_each(|a| *a = 0.0);
        for (b, bar) in layout.crossbars.iter().enumerate() {
            let input = match layout.strategy {
                Strategy::S1 => &cycle[..],
                Strategy::S2 => &cycle[b * g.c_in..(b + 1) * g.c_in],
            };
            stats.group_activations += g.c_in.div_ceil(gpc);
            for grp in 0..g.c_in {
                if !keep[grp] {
                    continue;
                }
                partial.iter_mut().for_each(|p| *p = 0.0);
                for r in layout.group_rows(grp) {
                    let v = input[r];
                    if v == 0.0 {
                        continue;
                    }
                    let row = &bar.cells[r * bar.cols..(r + 1) * bar.cols];
                    for (p, &s) in partial.iter_mut().zip(row) {
                        *p += f64::from(s) * v;
                    }
                }
                for (a, &p) in acc.iter_mut().zip(&partial) {
                    *a += opts.readout.read(p);
                }
            }
        }
        for (co, &a) in acc.iter().enumerate() {
            raw.data_mut()[co * plane + t] = a;
        }
        stats.cycles += 1;
    }
    modules.iter_mut().for_each(MtjDropoutModule::release_hold);

    let mut ofm = raw.clone();
    if mode.is_some() && opts.scale {
        ofm.scale(keep_scale(rho));
    }
    Ok(LayerSimulation { ofm, raw, mask: first_mask, trace, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::layout::map_layer;
    use crate::crossbar::mtj::{module_bank, MtjState};
    use crate::crossbar::stream::stream_moving_windows;
    use crate::dropout::{apply_spatial_dropout, stream_rng, SpatialMask};
    use crate::tensor::{conv2d_raw, BinaryView, ConvGeometry};
    use rand::Rng;

    struct Case {
        g: ConvGeometry,
        view: BinaryView,
        x: Tensor4,
    }

    fn case(seed: u64) -> Case {
        let mut rng = stream_rng(seed, &[77]);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=8);
        let c_out = rng.random_range(1..=8);
        let h = rng.random_range(k..=9);
        let w = rng.random_range(k..=9);
        let g = ConvGeometry { c_out, c_in, k, stride, padding: 0 };
        let view = BinaryView { signs: (0..g.weight_len()).map(|_| if rng.random() { 1 } else { -1 }).collect() };
        let x = Tensor4::from_fn([1, c_in, h, w], |_, _, _, _| rng.random_range(-4i32..=4) as f64);
        Case { g, view, x }
    }

    fn injected(mask: &[bool], rho: f64) -> Vec<MtjDropoutModule> {
        let mut bank = module_bank(mask.len(), rho).unwrap();
        for (m, &k) in bank.iter_mut().zip(mask) {
            m.preset(if k { MtjState::Parallel } else { MtjState::AntiParallel }).unwrap();
        }
        bank
    }

    fn run(c: &Case, s: Strategy, mask: &[bool], rho: f64) -> LayerSimulation {
        let layout = map_layer(&c.g, &c.view, s).unwrap();
        let stream = stream_moving_windows(&c.x, c.g.k, c.g.stride, c.g.padding, s).unwrap();
        let mode = DropoutConfigMode::for_layer(s, false, (c.x.height(), c.x.width()));
        let mut bank = injected(mask, rho);
        simulate_layer(&layout, &stream, &mut bank, Some(mode), Sampling::Preset, &SimOptions::default()).unwrap()
    }

    fn oracle(c: &Case, mask: &[bool]) -> Tensor4 {
        let m = SpatialMask { keep: mask.to_vec(), rho: 0.0 };
        let xm = apply_spatial_dropout(&c.x, &m, false).unwrap();
        conv2d_raw(&xm, &c.view.to_f64(), &c.g).unwrap()
    }

    #[test]
    fn keep_all_rho_zero_equals_conv() {
        let c = case(1);
        let keep = vec![true; c.g.c_in];
        for s in [Strategy::S1, Strategy::S2] {
            let sim = run(&c, s, &keep, 0.0);
            assert_eq!(sim.ofm, oracle(&c, &keep));
        }
    }

    #[test]
    fn forced_drop_zeroes_one_channel() {
        let c = Case { g: ConvGeometry { c_out: 4, c_in: 3, k: 3, stride: 1, padding: 0 }, ..case(2) };
        let c = Case { view: BinaryView { signs: vec![1; c.g.weight_len()] }, x: Tensor4::filled([1, 3, 5, 5], 2.0), ..c };
        let mask = [true, false, true];
        let sim = run(&c, Strategy::S1, &mask, 0.25);
        assert_eq!(sim.raw, oracle(&c, &mask));
        assert_eq!(sim.raw.at(0, 0, 0, 0), 36.0);
        assert!((sim.ofm.at(0, 0, 0, 0) - 48.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_s2_matches_s1_and_oracle() {
        let mut c = case(3);
        c.g = ConvGeometry { c_out: 4, c_in: 2, k: 3, stride: 1, padding: 0 };
        c.view = BinaryView { signs: (0..72).map(|i| if (i * 7) % 5 < 2 { 1 } else { -1 }).collect() };
        c.x = Tensor4::from_fn([1, 2, 5, 5], |_, ch, y, x| ((ch * 31 + y * 7 + x * 3) % 9) as f64 - 4.0);
        let layout = map_layer(&c.g, &c.view, Strategy::S2).unwrap();
        let stream = stream_moving_windows(&c.x, 3, 1, 0, Strategy::S2).unwrap();
        let mut bank = module_bank(2, 0.3).unwrap();
        let mut rng = stream_rng(9, &[1]);
        let s2 = simulate_layer(
            &layout,
            &stream,
            &mut bank,
            Some(DropoutConfigMode::S2Conv),
            Sampling::Stochastic(&mut rng),
            &SimOptions::default(),
        )
        .unwrap();
        let s1 = run(&c, Strategy::S1, &s2.mask, 0.3);
        assert_eq!(s1.ofm, s2.ofm);
        assert_eq!(s2.raw, oracle(&c, &s2.mask));
    }

    #[test]
    fn oracle_equivalence_fifty_layers_per_strategy() {
        for s in [Strategy::S1, Strategy::S2] {
            for seed in 0..50 {
                let c = case(1000 + seed);
                let mut rng = stream_rng(seed, &[2]);
                let mask: Vec<bool> = (0..c.g.c_in).map(|_| rng.random_bool(0.7)).collect();
                let sim = run(&c, s, &mask, 0.3);
                assert_eq!(sim.raw, oracle(&c, &mask), "strategy {s:?}, seed {seed}");
            }
        }
    }

    #[test]
    fn hold_keeps_mask_for_whole_pass() {
        let c = case(5);
        let layout = map_layer(&c.g, &c.view, Strategy::S1).unwrap();
        let stream = stream_moving_windows(&c.x, c.g.k, c.g.stride, 0, Strategy::S1).unwrap();
        let opts = SimOptions { record_trace: true, ..SimOptions::default() };
        let mut bank = module_bank(c.g.c_in, 0.5).unwrap();
        for pass in 0..1000 {
            let mut rng = stream_rng(pass, &[]);
            let sim = simulate_layer(
                &layout,
                &stream,
                &mut bank,
                Some(DropoutConfigMode::S1Conv),
                Sampling::Stochastic(&mut rng),
                &opts,
            )
            .unwrap();
            assert_eq!(sim.trace.len(), stream.n_cycles());
            assert!(sim.trace.iter().all(|t| *t == sim.mask));
            assert_eq!(sim.stats.module_samples, c.g.c_in);
            assert!(bank.iter().all(|m| !m.is_held()));
        }
    }

    #[test]
    fn masks_are_fresh_across_runs() {
        let g = ConvGeometry { c_out: 2, c_in: 8, k: 1, stride: 1, padding: 0 };
        let view = BinaryView { signs: vec![1; g.weight_len()] };
        let layout = map_layer(&g, &view, Strategy::S2).unwrap();
        let x = Tensor4::filled([1, 8, 3, 3], 1.0);
        let stream = stream_moving_windows(&x, 1, 1, 0, Strategy::S2).unwrap();
        let mut bank = module_bank(8, 0.3).unwrap();
        let masks: Vec<Vec<bool>> = (0..20)
            .map(|run| {
                let mut rng = stream_rng(4, &[run]);
                simulate_layer(
                    &layout,
                    &stream,
                    &mut bank,
                    Some(DropoutConfigMode::S2Conv),
                    Sampling::Stochastic(&mut rng),
                    &SimOptions::default(),
                )
                .unwrap()
                .mask
            })
            .collect();
        assert!(masks.iter().any(|m| *m != masks[0]));
    }

    #[test]
    fn configuration_errors() {
        let c = case(6);
        let layout = map_layer(&c.g, &c.view, Strategy::S1).unwrap();
        let stream = stream_moving_windows(&c.x, c.g.k, c.g.stride, 0, Strategy::S1).unwrap();
        let opts = SimOptions::default();
        let mut short = module_bank(c.g.c_in + 1, 0.2).unwrap();
        let r = simulate_layer(&layout, &stream, &mut short, Some(DropoutConfigMode::S1Conv), Sampling::Preset, &opts);
        assert!(matches!(r, Err(Error::Config(_))));
        let mut bank = module_bank(c.g.c_in, 0.2).unwrap();
        let r = simulate_layer(&layout, &stream, &mut bank, Some(DropoutConfigMode::S2Conv), Sampling::Preset, &opts);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = simulate_layer(&layout, &stream, &mut bank, None, Sampling::Preset, &opts);
        assert!(matches!(r, Err(Error::Config(_))));
        bank[0].assert_hold();
        let mut rng = stream_rng(0, &[]);
        let r = simulate_layer(
            &layout,
            &stream,
            &mut bank,
            Some(DropoutConfigMode::S1Conv),
            Sampling::Stochastic(&mut rng),
            &opts,
        );
        assert!(matches!(r, Err(Error::IllegalTransition { module: 0, .. })));
    }

    #[test]
    fn group_schedule_does_not_change_arithmetic() {
        let c = case(7);
        let layout = map_layer(&c.g, &c.view, Strategy::S1).unwrap();
        let stream = stream_moving_windows(&c.x, c.g.k, c.g.stride, 0, Strategy::S1).unwrap();
        let full = simulate_layer(&layout, &stream, &mut [], None, Sampling::Preset, &SimOptions::default()).unwrap();
        let one = SimOptions { groups_per_cycle: Some(1), ..SimOptions::default() };
        let seq = simulate_layer(&layout, &stream, &mut [], None, Sampling::Preset, &one).unwrap();
        assert_eq!(full.ofm, seq.ofm);
        assert_eq!(seq.stats.group_activations, c.g.c_in * stream.n_cycles());
        assert_eq!(full.stats.group_activations, stream.n_cycles());
    }

    #[test]
    fn readout_hook_sees_partial_sums() {
        struct Clip;
        impl PartialSumReadout for Clip {
            fn read(&self, p: f64) -> f64 {
                p.clamp(-1.0, 1.0)
            }
        }
        let g = ConvGeometry { c_out: 1, c_in: 2, k: 2, stride: 1, padding: 0 };
        let view = BinaryView { signs: vec![1; 8] };
        let layout = map_layer(&g, &view, Strategy::S1).unwrap();
        let x = Tensor4::filled([1, 2, 2, 2], 1.0);
        let stream = stream_moving_windows(&x, 2, 1, 0, Strategy::S1).unwrap();
        let opts = SimOptions { readout: &Clip, ..SimOptions::default() };
        let sim = simulate_layer(&layout, &stream, &mut [], None, Sampling::Preset, &opts).unwrap();
        assert_eq!(sim.ofm.data(), &[2.0]);
    }
}
