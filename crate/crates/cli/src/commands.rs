use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spindrop_core::cost::{energy_reference_table, network_layers, table_layers, CostReport, ModuleCostConstants};
use spindrop_core::crossbar::{build_layouts, simulate_network_batch, simulate_pass, LayoutDump, PassMasks, SimOptions};
use spindrop_core::data::{load_cifar10_batch, load_idx_dataset, load_idx_images, split_dataset};
use spindrop_core::inference::{mc_predict_batch, McPrediction};
use spindrop_core::net::{BinaryConvNet, SeededMasks};
use spindrop_core::ood::{
    corrupt_with_noise, detection_rate, gen_gaussian_noise, gen_uniform_noise, load_external_ood, results_csv,
    NoiseKind, OodRule, RuleReading,
};
use spindrop_core::train::{accuracy, metrics_csv, train};
use spindrop_core::{CrossbarLayout, Dataset, Strategy, Tensor4};

use crate::config::{DataFormat, ExperimentConfig};
use crate::failure::Failure;

type Outcome<T = ()> = Result<T, Failure>;

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> Outcome<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Failure::Config(e.to_string()))
}

fn load_checkpoint(path: &Path) -> Outcome<BinaryConvNet> {
    BinaryConvNet::load(path).map_err(Failure::data)
}

pub fn load_images(path: &Path, format: DataFormat) -> Outcome<Tensor4> {
    match format {
        DataFormat::Idx => load_idx_images(path),
        DataFormat::Cifar10 => load_cifar10_batch(path).map(|d| d.images),
    }
    .map_err(Failure::data)
}

fn load_dataset(cfg: &ExperimentConfig) -> Outcome<Dataset> {
    match cfg.data.format {
        DataFormat::Idx => load_idx_dataset(&cfg.data.images, &cfg.data.labels),
        DataFormat::Cifar10 => load_cifar10_batch(&cfg.data.images),
    }
    .map_err(Failure::data)
}

/// Images `start..start + count` of `images`, checked against the network
/// input shape.
fn slice_inputs(net: &BinaryConvNet, images: &Tensor4, start: usize, count: usize) -> Outcome<Tensor4> {
    if images.dims()[1..] != net.input_dims {
        return Err(Failure::Data(format!(
            "input images are {:?}, the network expects {:?}",
            &images.dims()[1..],
            net.input_dims
        )));
    }
    if count == 0 || start + count > images.batch() {
        return Err(Failure::Config(format!(
            "images {start}..{} requested, the file holds {}",
            start + count,
            images.batch()
        )));
    }
    Ok(images.select(&(start..start + count).collect::<Vec<_>>()))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: Option<usize>,
    best_val_acc: Option<f64>,
    eval_acc: f64,
    train_images: usize,
    eval_images: usize,
    cross_val_images: usize,
}

pub fn train_cmd(config: &Path, out: Option<PathBuf>) -> Outcome {
    let (mut cfg, verbatim) = ExperimentConfig::read(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let data = load_dataset(&cfg)?;
    let split = split_dataset(&data, cfg.train.train_fraction, cfg.seeds.split)?;
    let net = BinaryConvNet::lenet(&cfg.model, cfg.placement, cfg.hyper, cfg.seeds.init)?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.toml"), &verbatim)?;
    write(&cfg.out_dir.join("effective-config.toml"), cfg.emit()?)?;
    log::info!("training on {} images for {} epochs", split.train.len(), cfg.train.epochs);
    let outcome = train(net, &split, &cfg.train_config())?;
    let ckpt = cfg.out_dir.join("model.spdr");
    outcome.best.save(&ckpt)?;
    write(&cfg.out_dir.join("metrics.csv"), metrics_csv(&outcome.log))?;
    let best = outcome.log.iter().max_by(|a, b| a.val_acc.total_cmp(&b.val_acc).then(b.epoch.cmp(&a.epoch)));
    let summary = TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: best.map(|m| m.epoch),
        best_val_acc: best.map(|m| m.val_acc),
        eval_acc: if split.eval.is_empty() { f64::NAN } else { accuracy(&outcome.best, &split.eval)? },
        train_images: split.train.len(),
        eval_images: split.eval.len(),
        cross_val_images: split.cross_val.len(),
    };
    write(&cfg.out_dir.join("summary.json"), json(&summary)?)?;
    print!("{}", metrics_csv(&outcome.log));
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    index: usize,
    predicted: usize,
    mean: &'a [f64],
    runs: &'a [Vec<f64>],
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    mc_samples: usize,
    seed: u64,
    predictions: Vec<PredictionRecord<'a>>,
}

pub enum Engine {
    Reference,
    Crossbar(Strategy),
}

pub struct InputSel {
    pub path: PathBuf,
    pub format: DataFormat,
    pub start: usize,
    pub count: usize,
}

fn predictions_json(preds: &[McPrediction], start: usize, t: usize, seed: u64) -> Outcome<String> {
    json(&PredictionFile {
        mc_samples: t,
        seed,
        predictions: preds
            .iter()
            .enumerate()
            .map(|(i, p)| PredictionRecord { index: start + i, predicted: p.predicted_class(), mean: &p.mean, runs: &p.runs })
            .collect(),
    })
}

pub fn predict_cmd(ckpt: &Path, input: &InputSel, t: Option<usize>, engine: Engine, seed: u64, out: Option<&Path>) -> Outcome {
    let net = load_checkpoint(ckpt)?;
    let x = slice_inputs(&net, &load_images(&input.path, input.format)?, input.start, input.count)?;
    let t = t.unwrap_or(net.hyper.mc_samples);
    let preds = match engine {
        Engine::Reference => mc_predict_batch(&net, &x, t, seed, input.start as u64)?,
        Engine::Crossbar(s) => {
            let layouts = build_layouts(&net, s)?;
            simulate_network_batch(&net, &layouts, &x, t, seed, input.start as u64)?
        }
    };
    let text = predictions_json(&preds, input.start, t, seed)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("predictions.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct OfmDump<'a> {
    sample: usize,
    layer: usize,
    dims: [usize; 4],
    data: &'a [f64],
}

pub fn simulate_cmd(ckpt: &Path, input: &InputSel, strategy: Strategy, seed: u64, t: usize, out: &Path) -> Outcome {
    if t == 0 {
        return Err(Failure::Config("--mc-samples must be >= 1".into()));
    }
    let net = load_checkpoint(ckpt)?;
    let x = slice_inputs(&net, &load_images(&input.path, input.format)?, input.start, input.count)?;
    let layouts = build_layouts(&net, strategy)?;
    create_dir(out)?;
    for (i, layout) in &layouts.layers {
        write(&out.join(format!("layout-layer{i}.json")), json(&layout.to_dump())?)?;
    }
    let offset = input.start as u64;
    let hw = simulate_network_batch(&net, &layouts, &x, t, seed, offset)?;
    let reference = mc_predict_batch(&net, &x, t, seed, offset)?;
    let opts = SimOptions::default();
    let mut mismatches = Vec::new();
    for b in 0..x.batch() {
        let sample = input.start + b;
        let xb = x.sample(b);
        let pass = simulate_pass(&net, &layouts, &xb, &PassMasks::Seeded { seed, run: 0, sample: sample as u64 }, &opts)?;
        for (layer, sim) in &pass.layers {
            let dump = OfmDump { sample, layer: *layer, dims: sim.ofm.dims(), data: sim.ofm.data() };
            write(&out.join(format!("ofm-sample{sample}-layer{layer}.json")), json(&dump)?)?;
        }
        let ref_logits = net.forward_eval(&xb, &mut SeededMasks::new(seed, 0, sample as u64))?;
        let same_logits = bits(ref_logits.data()) == bits(&pass.logits);
        let same_runs = hw[b].runs.iter().zip(&reference[b].runs).all(|(a, r)| bits(a) == bits(r));
        let verdict = if same_logits && same_runs { "EQUIVALENT" } else { "NOT EQUIVALENT" };
        println!("sample {sample}: {verdict}");
        if verdict != "EQUIVALENT" {
            mismatches.push(sample);
        }
    }
    let verdict = if mismatches.is_empty() { "EQUIVALENT".to_string() } else { format!("NOT EQUIVALENT: samples {mismatches:?}") };
    write(&out.join("verdict.txt"), format!("{verdict}\n"))?;
    println!("{verdict}");
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("crossbar and reference engines disagree on samples {mismatches:?}")))
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub struct OodOpts {
    pub datasets: Vec<String>,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub rule: OodRule,
    pub amplitude: f64,
    pub id_images: Option<InputSel>,
    pub external: Vec<(String, PathBuf)>,
}

pub fn ood_cmd(ckpt: &Path, o: &OodOpts, out: Option<&Path>) -> Outcome {
    let net = load_checkpoint(ckpt)?;
    let [c, h, w] = net.input_dims;
    let id = match &o.id_images {
        Some(sel) => Some(slice_inputs(&net, &load_images(&sel.path, sel.format)?, sel.start, sel.count)?),
        None => None,
    };
    let mut rows = Vec::new();
    if let Some(x) = &id {
        rows.push(detection_rate(&net, "ID", x, o.t, o.seed, &o.rule)?);
    }
    for (k, name) in o.datasets.iter().enumerate() {
        let data_seed = o.seed.wrapping_add(1 + k as u64);
        let set = match name.to_ascii_lowercase().as_str() {
            "d1" => gen_gaussian_noise(o.n, [c, h, w], data_seed)?,
            "d2" => gen_uniform_noise(o.n, [c, h, w], data_seed)?,
            "d3" | "d4" => {
                let x = id.as_ref().ok_or_else(|| {
                    Failure::Config(format!("{name} corrupts in-distribution images; pass --id-images"))
                })?;
                let kind = if name.eq_ignore_ascii_case("d3") { NoiseKind::Gaussian } else { NoiseKind::Uniform };
                corrupt_with_noise(x, kind, o.amplitude, data_seed)?
            }
            other => return Err(Failure::Config(format!("unknown dataset {other:?}; expected d1, d2, d3 or d4"))),
        };
        rows.push(detection_rate(&net, &set.id, &set.images, o.t, o.seed, &o.rule)?);
    }
    for (name, path) in &o.external {
        let set = load_external_ood(path, name).map_err(Failure::data)?;
        if set.images.dims()[1..] != net.input_dims {
            return Err(Failure::Data(format!("{name} images are {:?}, expected {:?}", &set.images.dims()[1..], net.input_dims)));
        }
        rows.push(detection_rate(&net, &set.id, &set.images, o.t, o.seed, &o.rule)?);
    }
    if rows.is_empty() {
        return Err(Failure::Config("nothing to evaluate: give --datasets, --id-images or --external".into()));
    }
    let csv = results_csv(&rows);
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("ood.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub enum CostSource {
    Layer { k: u64, c_in: u64, c_out: u64 },
    Network { checkpoint: PathBuf, strategy: Strategy },
}

pub fn cost_cmd(source: &CostSource, energy: bool, out: Option<&Path>) -> Outcome {
    let layers = match source {
        CostSource::Layer { k, c_in, c_out } => table_layers(*k, *c_in, *c_out),
        CostSource::Network { checkpoint, strategy } => network_layers(&load_checkpoint(checkpoint)?, *strategy)?,
    };
    let report = CostReport::build(&layers, &ModuleCostConstants::default())?;
    let csv = report.to_csv();
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("cost.csv"), &csv)?;
        write(&dir.join("cost.json"), report.to_json()? + "\n")?;
        if energy {
            write(&dir.join("energy.json"), json(&energy_reference_table())?)?;
        }
    }
    print!("{csv}");
    println!("reduction factor: {}", report.reduction_factor);
    if energy {
        let e = energy_reference_table();
        for r in &e.ratios {
            println!("energy ratio vs {}: {}x", r.baseline, r.quoted);
        }
        println!("headline factor {}x: {}", e.headline_factor, e.note);
    }
    Ok(())
}

pub fn inspect_cmd(path: &Path) -> Outcome {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(&path.display().to_string(), e))?;
    let dump: LayoutDump = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let layout = CrossbarLayout::from_dump(&dump).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    print!("{}", layout.summary());
    Ok(())
}

pub fn parse_reading(s: &str) -> Result<RuleReading, String> {
    match s {
        "prose" => Ok(RuleReading::Prose),
        "formula" => Ok(RuleReading::Formula),
        _ => Err(format!("expected prose or formula, got {s:?}")),
    }
}
