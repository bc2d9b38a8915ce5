//! `cnn-dse`: train, quantize, evaluate, explore and emit small CNN
//! accelerators from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (bad flags,
//! unreadable files, invalid values), 3 when a computation fails at run
//! time (training divergence, overflow, deadlock, failed design points).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cnn_dse::codegen::{emit_dot, emit_netlist_json};
use cnn_dse::costmodel::{calibrate, estimate_throughput, CalibrationSet};
use cnn_dse::dataset::{load_idx, load_matrix_text, take, Dataset};
use cnn_dse::exec::with_workers;
use cnn_dse::explorer::{explore, write_outputs, Pipeline};
use cnn_dse::inference::{accuracy, build_actor_graph, predict_all, Backend, DatapathConfig};
use cnn_dse::model::check_bits;
use cnn_dse::quantizer::quantize;
use cnn_dse::trainer::{save_with_log, train_with_log, TrainConfig};
use cnn_dse::{Error, Execution, FloatNetwork, QuantizedNetwork, Topology};

#[derive(Parser)]
#[command(
    name = "cnn-dse",
    version,
    about = "Design-space exploration for small CNN dataflow accelerators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// IDX image and label files, or a single labelled text matrix.
    #[arg(long, num_args = 1..=2, value_names = ["IMAGES", "LABELS"], required = true)]
    data: Vec<PathBuf>,
    /// Side of the images in a text matrix (padded to 28x28).
    #[arg(long, default_value_t = 16)]
    matrix_side: usize,
    /// Use a deterministic random subset of this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    subset_seed: u64,
}

impl DataArgs {
    fn load(&self) -> cnn_dse::Result<Dataset> {
        let data = match self.data.as_slice() {
            [images, labels] => load_idx(images, labels)?,
            [matrix] => load_matrix_text(matrix, self.matrix_side)?,
            _ => unreachable!("clap enforces one or two paths"),
        };
        match self.limit {
            Some(n) if n < data.len() => take(&data, n, self.subset_seed),
            _ => Ok(data),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Reference,
    Stream,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Train a float network and write it with its training log.
    Train {
        #[arg(long)]
        topology: Topology,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; defaults to the network path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Quantize a float network to B-bit parameters.
    Quantize {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the top-1 accuracy of a quantized network.
    Eval {
        #[arg(long)]
        qnet: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = BackendArg::Reference)]
        backend: BackendArg,
        /// Per-image CSV: index, label, prediction.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        activation_bits: u32,
        #[arg(long, default_value_t = 32)]
        accumulator_bits: u32,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Sweep a design space described by a TOML file.
    Explore {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the file's worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the file's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the dataflow netlist of a quantized network.
    Emit {
        #[arg(long)]
        qnet: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit cost-model parameters to a calibration CSV (bundled data when
    /// no file is given).
    Calibrate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classifications per second of a one-pixel-per-clock pipeline.
    Throughput {
        #[arg(long)]
        clock_mhz: f64,
        /// Frame size as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
    },
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension {v:?}: {e}"))
    };
    Ok((dim(w)?, dim(h)?))
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            topology,
            data,
            out,
            log,
            seed,
            epochs,
            batch_size,
            learning_rate,
        } => {
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                seed: seed.unwrap_or(defaults.seed),
                epochs: epochs.unwrap_or(defaults.epochs),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
                ..defaults
            };
            let data = data.load()?;
            let (net, train_log) = train_with_log(topology, &data, &cfg, Execution::Sequential)?;
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            save_with_log(&net, &train_log, &out, &log)?;
            if let Some(last) = train_log.epochs.last() {
                println!(
                    "trained {topology} on {} images: epoch {} loss {:.4} train accuracy {:.4}",
                    data.len(),
                    last.epoch,
                    last.loss,
                    last.train_acc
                );
            }
        }
        Command::Quantize { net, bits, out } => {
            check_bits(bits)?;
            let q = quantize(&FloatNetwork::load(&net)?, bits)?;
            q.save(&out)?;
            println!("quantized {} to {bits} bits", q.topology);
        }
        Command::Eval {
            qnet,
            data,
            backend,
            report,
            activation_bits,
            accumulator_bits,
            workers,
        } => {
            let q = QuantizedNetwork::load(&qnet)?;
            let data = data.load()?;
            data.ensure_non_empty()?;
            let dp = DatapathConfig::for_network(&q, activation_bits, accumulator_bits)?;
            let backend = match backend {
                BackendArg::Reference => Backend::Reference,
                BackendArg::Stream => Backend::Stream,
            };
            let preds = with_workers(workers, |exec| predict_all(&q, &dp, &data, backend, exec))?;
            if let Some(path) = report {
                write_report(&path, &data, &preds)?;
            }
            println!("tpr {}", accuracy(&preds, &data));
        }
        Command::Explore {
            config,
            out,
            workers,
            seed,
        } => return run_explore(&config, &out, workers, seed),
        Command::Emit { qnet, format, out } => {
            let q = QuantizedNetwork::load(&qnet)?;
            let graph = build_actor_graph(&q, q.input_side);
            let text = match format {
                Format::Json => emit_netlist_json(&graph, &q)?,
                Format::Dot => emit_dot(&graph),
            };
            write_file(&out, &text)?;
            println!("{} actors, {} channels", graph.actors.len(), graph.channels.len());
        }
        Command::Calibrate { data, out } => {
            let set = match data {
                Some(p) => CalibrationSet::load(&p)?,
                None => CalibrationSet::published(),
            };
            let params = calibrate(&set)?;
            params.save(&out)?;
            if let Some(fit) = &params.fit {
                println!(
                    "overhead {} mean |relative error| {:.4} spearman {:.4}",
                    params.overhead, fit.mean_abs_relative_error, fit.spearman
                );
            }
        }
        Command::Throughput {
            clock_mhz,
            resolution: (w, h),
        } => {
            println!("{}", estimate_throughput(clock_mhz * 1e6, w, h)?);
        }
    }
    Ok(())
}

fn write_report(path: &Path, data: &Dataset, preds: &[usize]) -> Result<(), Failure> {
    let fail = |e: csv::Error| usage(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(["index", "label", "prediction"]).map_err(fail)?;
    for (i, (img, p)) in data.images.iter().zip(preds).enumerate() {
        w.write_record([i.to_string(), img.label.to_string(), p.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run_explore(config_path: &Path, out: &Path, workers: Option<usize>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = config::ExploreFile::load(config_path)?;
    if let Some(seed) = seed {
        cfg.pipeline.train.seed = seed;
    }
    let workers = workers.unwrap_or(cfg.workers).max(1);
    cfg.boundaries.validate()?;
    let cost = match &cfg.cost.calibration {
        Some(p) => calibrate(&CalibrationSet::load(p)?)?,
        None => calibrate(&CalibrationSet::published())?,
    };
    // Data is only needed when there is something to evaluate.
    let points = cnn_dse::explorer::design_points(&cfg.boundaries).len();
    let data = if points > 0 {
        cfg.data.load()?
    } else {
        config::empty_datasets()
    };
    let pipeline = Pipeline::new(cfg.pipeline.clone(), &data, cost.clone());
    let ex = with_workers(workers, |exec| explore(&pipeline, &cfg.boundaries, exec))?;
    write_outputs(out, &ex)?;
    cost.save(&out.join("cost_params.json"))?;

    let s = &ex.summary;
    println!("{} points evaluated, {} failed", s.points, s.failures);
    if let Some(b) = &s.best_tdr {
        println!(
            "best TDR {:.4} at ({},{},{}) B={}: TPR {:.4}, {} DSP",
            b.tdr, b.n1, b.n2, b.n3, b.bits, b.tpr_primary, b.dsp
        );
    }
    if s.failures > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{} design points failed; see summary.json", s.failures),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
