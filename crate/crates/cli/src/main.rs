//! `cipherimg`: the end-to-end experiment workflow on the command line.
//!
//! Every subcommand stamps its resolved configuration into its output
//! directory as `run_config.json` and prints a one-line JSON summary on
//! stdout. Failures print one JSON line on stderr,
//! `{"error":"<kind>","message":"..."}`, and exit nonzero (see [`exit_code`]).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cipherimg::codec::EncodingMode;
use cipherimg::pipeline::CipherMode;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "cipherimg", version, about = "Learned decryption of block-cipher encrypted images")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single worker, ordered execution and deterministic training.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive a key file (AES-128 key and iv) from a seed.
    Keygen(KeygenArgs),
    /// Create a dataset manifest.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Encrypt both splits of a dataset into paired container files.
    Encrypt(EncryptArgs),
    /// Keyed decryption of an encrypted split, scored against ground truth.
    Decrypt(DecryptArgs),
    /// Fit the training-set mean and score it on the test split.
    BaselineMean(BaselineArgs),
    /// Train a U-Net on an encrypted training split.
    Train(TrainArgs),
    /// Score a trained checkpoint on an encrypted split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct KeygenArgs {
    #[arg(long)]
    seed: u64,
    /// Key file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Reference an STL-10 binary file (e.g. unlabeled_X.bin).
    ImportStl10(ImportArgs),
    /// Generate synthetic toy images.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Serialize)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 90_000)]
    n_train: usize,
    /// Use only the first N images of the file.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct EncryptArgs {
    /// Directory holding manifest.json.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// float32 or uint8.
    #[arg(long, default_value = "float32")]
    mode: EncodingMode,
    /// ctr or cbc.
    #[arg(long, default_value = "ctr")]
    cipher: CipherMode,
    /// Gaussian noise standard deviation on the [0, 1] cipher scale.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Noise seed; image i uses seed XOR i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DecryptArgs {
    /// Encrypted dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Round cipher values to the nearest byte first (needed when noisy).
    #[arg(long)]
    round: bool,
    /// Decrypt even if the key fingerprint differs from the manifest.
    #[arg(long)]
    force: bool,
    /// Write PNG panels for the first N samples.
    #[arg(long, default_value_t = 0)]
    panels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    /// Dataset directory (plain manifest or encrypted dataset).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    panels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Encrypted dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// U-Net config (TOML); defaults to depth 4, base width 64.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Training config (TOML); defaults to batch 32, lr 2e-3, 35 epochs.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Encrypted dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Score only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    panels: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Exit codes: 0 success, 2 usage, 3 invalid input, 4 I/O, 5 divergence.
fn exit_code(e: &cipherimg::Error) -> u8 {
    match e.kind() {
        "io" => 4,
        "diverged" => 5,
        _ => 3,
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
