//! `spindrop`: train, predict, simulate, ood, cost and inspect.
//!
//! Exit codes: 1 configuration error, 2 data-format error, 3 diverged
//! training or failed equivalence check. `SPINDROP_THREADS` caps the worker
//! thread count.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spindrop_core::ood::{OodRule, DEFAULT_PERCENTILE, DEFAULT_THRESHOLD};
use spindrop_core::Strategy;

use commands::{CostSource, Engine, InputSel, OodOpts};
use config::DataFormat;
use failure::Failure;

#[derive(Parser)]
#[command(name = "spindrop", version, about = "Binary Bayesian CNNs on simulated crossbars with spatial dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MC-dropout prediction on the reference or crossbar engine.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Defaults to the checkpoint's sample count.
        #[arg(long = "mc-samples")]
        mc_samples: Option<usize>,
        #[arg(long, value_enum, default_value_t = EngineArg::Reference)]
        engine: EngineArg,
        #[arg(long, default_value = "1", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inputs through the crossbar simulator and check it against the
    /// reference engine.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "1", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "mc-samples", default_value_t = 1)]
        mc_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Out-of-distribution detection rates.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthetic sets among d1, d2, d3, d4.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        /// Images per synthetic set.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long = "mc-samples", default_value_t = 20)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
        percentile: f64,
        #[arg(long, default_value = "prose", value_parser = commands::parse_reading)]
        reading: spindrop_core::RuleReading,
        /// Noise amplitude of the corrupted sets d3 and d4.
        #[arg(long, default_value_t = 0.5)]
        amplitude: f64,
        /// In-distribution images: reported as a row and corrupted for d3/d4.
        #[arg(long = "id-images")]
        id_images: Option<PathBuf>,
        #[arg(long = "id-format", value_enum, default_value_t = FormatArg::Idx)]
        id_format: FormatArg,
        #[arg(long = "id-start", default_value_t = 0)]
        id_start: usize,
        #[arg(long = "id-count")]
        id_count: Option<usize>,
        /// Extra sets in CIFAR-10 binary layout, as `ID=PATH`.
        #[arg(long, value_parser = parse_external)]
        external: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dropout-module area, power and latency.
    Cost {
        /// Cost every dropout layer of a trained network instead of a single
        /// layer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "1", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, default_value_t = 3)]
        k: u64,
        #[arg(long = "c-in", alias = "config-cin", default_value_t = 256)]
        c_in: u64,
        #[arg(long = "c-out", alias = "cout", default_value_t = 512)]
        c_out: u64,
        /// Also report the reference energy comparison.
        #[arg(long)]
        energy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a crossbar layout dump.
    Inspect { layout: PathBuf },
}

#[derive(Args)]
struct InputArgs {
    /// Image file (IDX, optionally gzipped, or a CIFAR-10 binary batch).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
    format: FormatArg,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

impl InputArgs {
    fn sel(self) -> InputSel {
        InputSel { path: self.input, format: self.format.into(), start: self.start, count: self.count }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Reference,
    Crossbar,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Idx,
    Cifar10,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Idx => DataFormat::Idx,
            FormatArg::Cifar10 => DataFormat::Cifar10,
        }
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn parse_external(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected ID=PATH, got {s:?}"))?;
    Ok((id.to_string(), path.into()))
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SPINDROP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("SPINDROP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out } => commands::train_cmd(&config, out),
        Command::Predict { checkpoint, input, mc_samples, engine, strategy, seed, out } => {
            let engine = match engine {
                EngineArg::Reference => Engine::Reference,
                EngineArg::Crossbar => Engine::Crossbar(strategy),
            };
            commands::predict_cmd(&checkpoint, &input.sel(), mc_samples, engine, seed, out.as_deref())
        }
        Command::Simulate { checkpoint, input, strategy, seed, mc_samples, out } => {
            commands::simulate_cmd(&checkpoint, &input.sel(), strategy, seed, mc_samples, &out)
        }
        Command::Ood {
            checkpoint,
            datasets,
            n,
            mc_samples,
            seed,
            threshold,
            percentile,
            reading,
            amplitude,
            id_images,
            id_format,
            id_start,
            id_count,
            external,
            out,
        } => {
            let id_images = match id_images {
                Some(path) => {
                    let format = id_format.into();
                    let count = match id_count {
                        Some(c) => c,
                        None => commands::load_images(&path, format)?.batch().saturating_sub(id_start),
                    };
                    Some(InputSel { path, format, start: id_start, count })
                }
                None => None,
            };
            let opts = OodOpts {
                datasets,
                n,
                t: mc_samples,
                seed,
                rule: OodRule { threshold, percentile, reading },
                amplitude,
                id_images,
                external,
            };
            commands::ood_cmd(&checkpoint, &opts, out.as_deref())
        }
        Command::Cost { checkpoint, strategy, k, c_in, c_out, energy, out } => {
            let source = match checkpoint {
                Some(checkpoint) => CostSource::Network { checkpoint, strategy },
                None => CostSource::Layer { k, c_in, c_out },
            };
            commands::cost_cmd(&source, energy, out.as_deref())
        }
        Command::Inspect { layout } => commands::inspect_cmd(&layout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
