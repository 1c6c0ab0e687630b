use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spindrop_core::dropout::{HyperParams, PlacementMode};
use spindrop_core::net::{BinaryConvNet, LenetSpec};

fn spindrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spindrop"))
        .args(args)
        .env("SPINDROP_THREADS", "2")
        .output()
        .expect("spawn spindrop")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SIZE: usize = 12;

fn write_idx_images(path: &Path, n: usize) {
    let mut buf = vec![0, 0, 8, 3];
    for d in [n, SIZE, SIZE] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend((0..n * SIZE * SIZE).map(|i| ((i * 37 + i / 7) % 256) as u8));
    fs::write(path, buf).unwrap();
}

fn write_idx_labels(path: &Path, n: usize) {
    let mut buf = vec![0, 0, 8, 1];
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend((0..n).map(|i| (i % 3) as u8));
    fs::write(path, buf).unwrap();
}

fn toy_checkpoint(dir: &Path, rho: f64) -> PathBuf {
    let spec = LenetSpec { in_channels: 1, in_size: SIZE, classes: 3, conv1: 3, conv2: 4, hidden: 6 };
    let net = BinaryConvNet::lenet(&spec, PlacementMode::TopologyWise, HyperParams { rho, lambda: 0.0, mc_samples: 4 }, 5)
        .unwrap();
    let path = dir.join(format!("toy-{rho}.spdr"));
    net.save(&path).unwrap();
    path
}

fn toy_config(dir: &Path) -> String {
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    write_idx_images(&images, 40);
    write_idx_labels(&labels, 40);
    format!(
        r#"placement = "topology-wise"
strategy = 2
out_dir = "{out}"

[model]
in_channels = 1
in_size = {SIZE}
classes = 3
conv1 = 3
conv2 = 4
hidden = 6

[hyper]
rho = 0.15
lambda = 0.000001
mc_samples = 4

[train]
epochs = 2
batch_size = 8
learning_rate = 0.05
schedule = "cosine"
momentum = 0.9
train_fraction = 0.5

[seeds]
init = 1
split = 2
train = 3
mc = 4

[data]
format = "idx"
images = "{images}"
labels = "{labels}"
"#,
        out = p(&dir.join("run")),
        images = p(&images),
        labels = p(&labels),
    )
}

#[test]
fn cost_row_reports_counts_area_and_power() {
    let dir = tempfile::tempdir().unwrap();
    let o = spindrop(&["cost", "--k", "3", "--c-in", "256", "--c-out", "512", "--out", p(dir.path())]);
    assert!(o.status.success(), "{o:?}");
    let csv = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert!(csv.starts_with("layer,method,mode,k,c_in,c_out,modules,area_um2,power_mw,latency_ns,"));
    let row = csv
        .lines()
        .find(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ["2304", "256", "8870.4", "5.76"].iter().all(|v| f.contains(v))
        })
        .expect("a row with 2304, 256, 8870.4 and 5.76");
    assert!(row.starts_with("conv-s1,spatial,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("cost.json")).unwrap()).unwrap();
    let spatial = json["rows"].as_array().unwrap().iter().find(|r| r["layer"] == "conv-s1" && r["method"] == "spatial-drop").unwrap();
    assert_eq!(spatial["reduction_factor"], 9.0);
}

#[test]
fn cost_energy_flag_prints_ratios() {
    let o = spindrop(&["cost", "--energy"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("2.94"));
    assert!(out.contains("13.67"));
    assert!(out.contains("94.11"));
}

#[test]
fn predict_engines_agree_without_dropout() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.0);
    let images = dir.path().join("x.idx");
    write_idx_images(&images, 3);
    let run = |engine: &str| {
        let out = dir.path().join(engine);
        let o = spindrop(&[
            "predict", "--checkpoint", p(&ckpt), "--input", p(&images), "--count", "3", "--mc-samples", "1",
            "--engine", engine, "--seed", "9", "--out", p(&out),
        ]);
        assert!(o.status.success(), "{o:?}");
        fs::read(out.join("predictions.json")).unwrap()
    };
    let reference = run("reference");
    assert_eq!(reference, run("crossbar"));
    let v: serde_json::Value = serde_json::from_slice(&reference).unwrap();
    assert_eq!(v["predictions"].as_array().unwrap().len(), 3);
}

#[test]
fn predict_engines_agree_with_dropout() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.3);
    let images = dir.path().join("x.idx");
    write_idx_images(&images, 2);
    let run = |engine: &str| {
        let o = spindrop(&[
            "predict", "--checkpoint", p(&ckpt), "--input", p(&images), "--start", "1", "--mc-samples", "5",
            "--engine", engine, "--strategy", "2", "--seed", "4",
        ]);
        assert!(o.status.success(), "{o:?}");
        o.stdout
    };
    assert_eq!(run("reference"), run("crossbar"));
}

#[test]
fn simulate_reports_equivalence_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.2);
    let images = dir.path().join("x.idx");
    write_idx_images(&images, 2);
    let out = dir.path().join("sim");
    let o = spindrop(&[
        "simulate", "--checkpoint", p(&ckpt), "--input", p(&images), "--count", "2", "--strategy", "1",
        "--seed", "11", "--mc-samples", "3", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().last().unwrap() == "EQUIVALENT");
    assert_eq!(fs::read_to_string(out.join("verdict.txt")).unwrap(), "EQUIVALENT\n");
    assert!(out.join("ofm-sample1-layer9.json").exists());

    let layout = out.join("layout-layer5.json");
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(&layout).unwrap()).unwrap();
    assert_eq!(dump["strategy"], "S1");
    for key in ["dims", "row_groups", "crossbars"] {
        assert!(dump.get(key).is_some(), "missing {key}");
    }
    let o = spindrop(&["inspect", p(&layout)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("dropout modules: 3"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.2);
    let images = dir.path().join("x.idx");
    write_idx_images(&images, 4);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = spindrop(&[
            "ood", "--checkpoint", p(&ckpt), "--datasets", "d1,d2,d3,d4", "--n", "6", "--mc-samples", "4",
            "--seed", "3", "--id-images", p(&images), "--out", p(&out),
        ]);
        assert!(o.status.success(), "{o:?}");
        fs::read(out.join("ood.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("dataset_id,n,T,threshold,percentile,detection_rate,ci_low,ci_high\n"));
    let ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["ID", "D1", "D2", "D3", "D4"]);
}

#[test]
fn train_writes_checkpoint_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = toy_config(dir.path());
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, &text).unwrap();
    let o = spindrop(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("config.toml")).unwrap(), text);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,objective,train_acc,val_acc\n"));
    assert_eq!(metrics.lines().count(), 3);
    let model = run.join("model.spdr");
    assert!(model.exists());

    // the emitted effective config trains to the same bytes
    let first = fs::read(&model).unwrap();
    let o = spindrop(&["train", "--config", p(&run.join("effective-config.toml")), "--out", p(&dir.path().join("again"))]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read(dir.path().join("again/model.spdr")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("again/metrics.csv")).unwrap(), metrics.as_bytes());

    let o = spindrop(&["cost", "--checkpoint", p(&model), "--strategy", "2"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("layer9,spatial,topology-avgpool,"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    // unreadable / invalid config
    let o = spindrop(&["train", "--config", p(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, toml_with(&toy_config(dir.path()), "rho = 0.15", "rho = 1.5")).unwrap();
    assert_eq!(spindrop(&["train", "--config", p(&bad)]).status.code(), Some(1));
    assert_eq!(spindrop(&["cost", "--strategy", "7"]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_spindrop")).args(["cost"]).env("SPINDROP_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    // malformed data
    let garbage = dir.path().join("garbage.idx");
    fs::write(&garbage, b"not an idx file").unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.1);
    let o = spindrop(&["predict", "--checkpoint", p(&ckpt), "--input", p(&garbage)]);
    assert_eq!(o.status.code(), Some(2));
    let o = spindrop(&["inspect", p(&garbage)]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, toml_with(&toy_config(dir.path()), "images.idx", "garbage.idx")).unwrap();
    assert_eq!(spindrop(&["train", "--config", p(&cfg)]).status.code(), Some(2));

    // divergence
    let cfg = dir.path().join("diverge.toml");
    fs::write(&cfg, toml_with(&toy_config(dir.path()), "learning_rate = 0.05", "learning_rate = 1e308")).unwrap();
    assert_eq!(spindrop(&["train", "--config", p(&cfg)]).status.code(), Some(3));
}

#[test]
fn tampered_layout_fails_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path(), 0.2);
    let images = dir.path().join("x.idx");
    write_idx_images(&images, 1);
    let out = dir.path().join("sim");
    assert!(spindrop(&["simulate", "--checkpoint", p(&ckpt), "--input", p(&images), "--out", p(&out)]).status.success());
    let layout = out.join("layout-layer9.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&layout).unwrap()).unwrap();
    v["row_groups"].as_array_mut().unwrap().pop();
    fs::write(&layout, v.to_string()).unwrap();
    assert_eq!(spindrop(&["inspect", p(&layout)]).status.code(), Some(2));
}

fn toml_with(text: &str, from: &str, to: &str) -> String {
    assert!(text.contains(from));
    text.replace(from, to)
}
