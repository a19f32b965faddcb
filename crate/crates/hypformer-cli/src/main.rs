//! `hypf`: train, evaluate, benchmark, and gradient-check the hyperbolic
//! transformer from the command line.
//!
//! Machine-readable payloads go to stdout (run manifest, eval JSON);
//! diagnostics go to stderr. Exit codes: 0 success, 1 failed gradient
//! check, 2 config error, 3 data error, 4 numerical failure, 5 timer
//! resolution too coarse for the smallest benchmark size.

mod bench;
mod checkgrad;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use hypformer::data::{gen_tree, load_dataset, save_dataset};
use hypformer::model::{
    evaluate, load_checkpoint, save_checkpoint, train, Hypformer, HypformerConfig,
};
use hypformer::Error;

#[derive(Parser)]
#[command(name = "hypf", version, about = "Hyperbolic transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BenchAttention {
    Linear,
    Softmax,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes JSON-lines metrics and the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split; prints a single JSON object.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Wall-clock and peak-memory scaling of one attention block
    /// (forward + backward), medians over repetitions.
    Bench {
        #[arg(long, value_enum, default_value = "both")]
        attention: BenchAttention,
        /// Comma-separated ascending token counts.
        #[arg(long = "n-list", default_value = "1024,2048,4096,8192")]
        n_list: String,
        /// Model width d'.
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Softmax rows with a predicted tensor peak above this are
        /// written as `skipped` instead of attempted.
        #[arg(long = "mem-cap-bytes", default_value_t = 4 * 1024 * 1024 * 1024)]
        mem_cap_bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference verification of every gradient path.
    Checkgrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "all")]
        cases: String,
    },
    /// Generate a balanced synthetic tree dataset directory.
    GenTree {
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        branching: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run manifest printed to stdout after training: everything needed to
/// reproduce and audit the run as one JSON object.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: String,
    seed: u64,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    thread_count: usize,
    best_epoch: usize,
    best_val: f64,
    best_test: f64,
    config: &'a HypformerConfig,
    epochs_run: usize,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// 2 for configuration problems, 3 for data problems, 4 for numerical
/// failures during training.
fn data_error(e: Error) -> ExitCode {
    fail(3, e)
}

fn cmd_train(
    config_path: PathBuf,
    data: PathBuf,
    out: PathBuf,
    checkpoint: PathBuf,
    seed: Option<u64>,
) -> ExitCode {
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => return fail(2, format!("cannot read config {}: {e}", config_path.display())),
    };
    let mut config: HypformerConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => return fail(2, format!("bad config {}: {e}", config_path.display())),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Err(e) = config.validate() {
        return fail(2, e);
    }

    let dataset = match load_dataset(&data) {
        Ok(d) => d,
        Err(e) => return data_error(e),
    };

    let started = now_ms();
    let mut model = match Hypformer::new(config.clone()) {
        Ok(m) => m,
        Err(e) => return fail(2, e),
    };
    let result = match train(&mut model, &dataset) {
        Ok(r) => r,
        Err(e @ Error::Numerical { .. }) => return fail(4, e),
        Err(e @ (Error::Config(_) | Error::InvalidCurvature(_))) => return fail(2, e),
        Err(e) => return data_error(e),
    };

    let mut lines = String::new();
    for rec in &result.history {
        lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
        lines.push('\n');
    }
    if let Err(e) = std::fs::write(&out, lines) {
        return fail(3, format!("cannot write metrics {}: {e}", out.display()));
    }
    if let Err(e) = save_checkpoint(&checkpoint, &model) {
        return fail(3, format!("cannot write checkpoint: {e}"));
    }

    let manifest = RunManifest {
        version: format!("hypf-v{}", env!("CARGO_PKG_VERSION")),
        seed: config.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        thread_count: 1,
        best_epoch: result.best_epoch,
        best_val: result.best_val,
        best_test: result.best_test,
        config: &config,
        epochs_run: result.history.len(),
    };
    println!("{}", serde_json::to_string(&manifest).expect("manifest serializes"));
    ExitCode::SUCCESS
}

fn cmd_eval(checkpoint: PathBuf, data: PathBuf, split: String) -> ExitCode {
    let model = match load_checkpoint(&checkpoint) {
        Ok(m) => m,
        Err(e) => return data_error(e),
    };
    let dataset = match load_dataset(&data) {
        Ok(d) => d,
        Err(e) => return data_error(e),
    };
    if dataset.feature_dim() != model.config().d_in {
        return fail(
            3,
            format!(
                "checkpoint expects d_in = {} but dataset has {} features",
                model.config().d_in,
                dataset.feature_dim()
            ),
        );
    }
    let value = match evaluate(&model, &dataset, &split) {
        Ok(v) => v,
        Err(e @ Error::Config(_)) => return fail(2, e),
        Err(e) => return data_error(e),
    };
    #[derive(Serialize)]
    struct EvalPayload<'a> {
        split: &'a str,
        metric_name: &'a str,
        value: f64,
    }
    let payload = EvalPayload {
        split: &split,
        metric_name: model.config().eval_metric.name(),
        value,
    };
    println!("{}", serde_json::to_string(&payload).expect("payload serializes"));
    ExitCode::SUCCESS
}

fn cmd_gen_tree(
    depth: usize,
    branching: usize,
    dim: usize,
    noise: f64,
    seed: u64,
    out: PathBuf,
) -> ExitCode {
    if dim < branching {
        eprintln!(
            "warning: feature dim {dim} < branching {branching}; class centroids may be hard to separate"
        );
    }
    let ds = match gen_tree(depth, branching, dim, noise, seed) {
        Ok(d) => d,
        Err(e) => return fail(2, e),
    };
    if let Err(e) = save_dataset(&out, &ds) {
        return fail(3, format!("cannot write dataset to {}: {e}", out.display()));
    }
    eprintln!(
        "wrote {} nodes, {} edges, {} classes to {}",
        ds.num_nodes(),
        ds.edges.len(),
        ds.num_classes,
        out.display()
    );
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            checkpoint,
            seed,
        } => cmd_train(config, data, out, checkpoint, seed),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(checkpoint, data, split),
        Command::Bench {
            attention,
            n_list,
            d,
            reps,
            out,
            mem_cap_bytes,
            seed,
        } => bench::cmd_bench(attention, &n_list, d, reps, out, mem_cap_bytes, seed),
        Command::Checkgrad { seed, cases } => checkgrad::cmd_checkgrad(seed, &cases),
        Command::GenTree {
            depth,
            branching,
            dim,
            noise,
            seed,
            out,
        } => cmd_gen_tree(depth, branching, dim, noise, seed, out),
    }
}
