//! Dropout-module counting and area / power / latency arithmetic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crossbar::Strategy;
use crate::error::{Error, Result};
use crate::net::{BinaryConvNet, Layer};

/// Element-wise dropout modules versus one module per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SpinDrop,
    SpatialDrop,
}

/// Where the modules sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Layer-wise, on the input of a convolution mapped with a strategy.
    Conv(Strategy),
    /// Topology-wise, on extracted features reduced by average pooling.
    TopologyWithAvgPool,
    /// Topology-wise, on flattened features.
    TopologyNoAvgPool,
}

impl CostMode {
    pub fn label(self) -> String {
        match self {
            CostMode::Conv(Strategy::S1) => "conv-s1".into(),
            CostMode::Conv(Strategy::S2) => "conv-s2".into(),
            CostMode::TopologyWithAvgPool => "topology-avgpool".into(),
            CostMode::TopologyNoAvgPool => "topology-flatten".into(),
        }
    }
}

/// `num / den`, kept exact until the final division.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub fn times(self, count: u64) -> f64 {
        (count * self.num) as f64 / self.den as f64
    }

    pub fn value(self) -> f64 {
        self.times(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCostConstants {
    /// µm² per module.
    pub area_um2: Rational,
    /// mW per module.
    pub power_mw: Rational,
    pub sampling_latency_ns: f64,
}

impl Default for ModuleCostConstants {
    /// 8870.4 µm² and 5.76 mW per 256 modules, 15 ns per sample.
    fn default() -> Self {
        Self {
            area_um2: Rational { num: 88_704, den: 2_560 },
            power_mw: Rational { num: 576, den: 25_600 },
            sampling_latency_ns: crate::crossbar::SAMPLING_LATENCY_NS,
        }
    }
}

impl ModuleCostConstants {
    pub fn validate(&self) -> Result<()> {
        if self.area_um2.num == 0
            || self.area_um2.den == 0
            || self.power_mw.num == 0
            || self.power_mw.den == 0
            || !(self.sampling_latency_ns > 0.0)
        {
            return Err(Error::param("module cost constants must be positive"));
        }
        Ok(())
    }
}

pub fn dropout_module_count(method: Method, mode: CostMode, k: u64, c_in: u64, c_out: u64) -> u64 {
    match (method, mode) {
        (Method::SpinDrop, CostMode::Conv(_)) => k * k * c_in,
        (Method::SpatialDrop, CostMode::Conv(_)) => c_in,
        (_, CostMode::TopologyWithAvgPool) => c_out,
        (Method::SpinDrop, CostMode::TopologyNoAvgPool) => k * k * c_out,
        (Method::SpatialDrop, CostMode::TopologyNoAvgPool) => c_out,
    }
}

/// (area µm², power mW, latency ns). Latency does not depend on the count:
/// all modules sample in parallel.
pub fn layer_cost(count: u64, c: &ModuleCostConstants) -> (f64, f64, f64) {
    (c.area_um2.times(count), c.power_mw.times(count), c.sampling_latency_ns)
}

/// A layer that carries dropout modules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub mode: CostMode,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub method: Method,
    pub mode: String,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub modules: u64,
    pub area_um2: f64,
    pub power_mw: f64,
    pub latency_ns: f64,
    /// Module count of the element-wise baseline for the same layer.
    pub baseline_modules: u64,
    /// `baseline_modules / modules`.
    pub reduction_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub method: Method,
    pub modules: u64,
    pub area_um2: f64,
    pub power_mw: f64,
    pub latency_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub totals: Vec<CostTotals>,
    /// Baseline over proposed: module count, area and power.
    pub reduction_factor: f64,
    pub constants: ModuleCostConstants,
}

impl CostReport {
    pub fn build(layers: &[LayerSpec], constants: &ModuleCostConstants) -> Result<Self> {
        constants.validate()?;
        let mut rows = Vec::new();
        for l in layers {
            if l.k == 0 || l.c_in == 0 || l.c_out == 0 {
                return Err(Error::param(format!("layer {} has a zero dimension", l.name)));
            }
            let baseline_modules = dropout_module_count(Method::SpinDrop, l.mode, l.k, l.c_in, l.c_out);
            for method in [Method::SpinDrop, Method::SpatialDrop] {
                let modules = dropout_module_count(method, l.mode, l.k, l.c_in, l.c_out);
                let (area_um2, power_mw, latency_ns) = layer_cost(modules, constants);
                rows.push(CostRow {
                    layer: l.name.clone(),
                    method,
                    mode: l.mode.label(),
                    k: l.k,
                    c_in: l.c_in,
                    c_out: l.c_out,
                    modules,
                    area_um2,
                    power_mw,
                    latency_ns,
                    baseline_modules,
                    reduction_factor: baseline_modules as f64 / modules as f64,
                });
            }
        }
        let totals: Vec<CostTotals> = [Method::SpinDrop, Method::SpatialDrop]
            .into_iter()
            .map(|method| {
                let modules = rows.iter().filter(|r| r.method == method).map(|r| r.modules).sum();
                let (area_um2, power_mw, _) = layer_cost(modules, constants);
                let latency_ns = if modules == 0 { 0.0 } else { constants.sampling_latency_ns };
                CostTotals { method, modules, area_um2, power_mw, latency_ns }
            })
            .collect();
        let reduction_factor = if totals[1].modules == 0 {
            1.0
        } else {
            totals[0].modules as f64 / totals[1].modules as f64
        };
        Ok(Self { rows, totals, reduction_factor, constants: *constants })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,method,mode,k,c_in,c_out,modules,area_um2,power_mw,latency_ns,baseline_modules,reduction_factor\n");
        let method = |m: Method| match m {
            Method::SpinDrop => "spindrop",
            Method::SpatialDrop => "spatial",
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.layer,
                method(r.method),
                r.mode,
                r.k,
                r.c_in,
                r.c_out,
                r.modules,
                r.area_um2,
                r.power_mw,
                r.latency_ns,
                r.baseline_modules,
                r.reduction_factor
            );
        }
        for t in &self.totals {
            let _ = writeln!(
                s,
                "total,{},,,,,{},{},{},{},{},{}",
                method(t.method),
                t.modules,
                t.area_um2,
                t.power_mw,
                t.latency_ns,
                self.totals[0].modules,
                if t.modules == 0 { 1.0 } else { self.totals[0].modules as f64 / t.modules as f64 }
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The four settings of a single layer with kernel `k`, `c_in` inputs and
/// `c_out` outputs.
pub fn table_layers(k: u64, c_in: u64, c_out: u64) -> Vec<LayerSpec> {
    [
        CostMode::Conv(Strategy::S1),
        CostMode::Conv(Strategy::S2),
        CostMode::TopologyWithAvgPool,
        CostMode::TopologyNoAvgPool,
    ]
    .into_iter()
    .map(|mode| LayerSpec { name: mode.label(), mode, k, c_in, c_out })
    .collect()
}

/// Dropout-carrying layers of a network. Convolutions count per strategy; a
/// linear layer takes the kernel and channel count of the last convolution
/// feeding it.
pub fn network_layers(net: &BinaryConvNet, strategy: Strategy) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    let mut last_k = 1u64;
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                let g = c.weight.geometry;
                if net.has_dropout(i) {
                    out.push(LayerSpec {
                        name: format!("layer{i}"),
                        mode: CostMode::Conv(strategy),
                        k: g.k as u64,
                        c_in: g.c_in as u64,
                        c_out: g.c_out as u64,
                    });
                }
                last_k = g.k as u64;
            }
            Layer::Linear(l) if net.has_dropout(i) => {
                let [c, h, w] = l.in_shape;
                let mode = if h * w == 1 { CostMode::TopologyWithAvgPool } else { CostMode::TopologyNoAvgPool };
                out.push(LayerSpec { name: format!("layer{i}"), mode, k: last_k, c_in: c as u64, c_out: c as u64 });
            }
            _ => {}
        }
    }
    Ok(out)
}

/// A published energy-per-image figure, in hundredths of a µJ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub label: String,
    pub technology: String,
    pub bits: u8,
    pub centi_uj: u64,
}

impl EnergyRow {
    pub fn uj(&self) -> f64 {
        self.centi_uj as f64 / 100.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    pub baseline: String,
    pub ratio: f64,
    /// Ratio truncated to two decimals.
    pub quoted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub rows: Vec<EnergyRow>,
    pub ratios: Vec<EnergyRatio>,
    pub headline_factor: String,
    pub note: String,
}

/// `a / b` truncated to two decimals, from exact integer arithmetic.
pub fn truncated_ratio(a: u64, b: u64) -> String {
    let hundredths = a * 100 / b;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Published energy figures and the ratios of each against the spatial
/// dropout design. Nothing here is simulated.
pub fn energy_reference_table() -> EnergyComparison {
    let row = |label: &str, technology: &str, bits: u8, centi_uj: u64| EnergyRow {
        label: label.into(),
        technology: technology.into(),
        bits,
        centi_uj,
    };
    let rows = vec![
        row("fpga-8bit-a", "FPGA", 8, 1897),
        row("fpga-8bit-b", "FPGA", 8, 4600),
        row("fpga-7bit", "FPGA", 7, 2109),
        row("rram-4bit", "RRAM", 4, 930),
        row("spindrop", "STT-MRAM", 1, 200),
        row("spatial-spindrop", "STT-MRAM", 1, 68),
    ];
    let proposed = rows.last().unwrap().centi_uj;
    let ratios = rows[..rows.len() - 1]
        .iter()
        .map(|r| EnergyRatio {
            baseline: r.label.clone(),
            ratio: r.centi_uj as f64 / proposed as f64,
            quoted: truncated_ratio(r.centi_uj, proposed),
        })
        .collect();
    EnergyComparison {
        rows,
        ratios,
        headline_factor: "94.11".into(),
        note: "the headline 94.11x energy factor does not follow from any row of this table \
               (largest FPGA ratio is 67.64x); it is reported verbatim and not reconciled"
            .into(),
    }
}
