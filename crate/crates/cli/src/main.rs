//! `nextpoi` command-line front end. Each subcommand reads one upstream
//! stage directory (`--input`) and writes its own (`--out`).
//!
//! Exit codes: 1 usage, config or missing artifact; 2 data error; 3 training
//! divergence or failed gradient check.

mod artifact;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nextpoi", version, about = "Semantic-ID next-POI prediction pipeline")]
pub struct Cli {
    /// Run configuration (JSON). Defaults to the input stage's resolved config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print reports as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Slice {
    Test,
    Val,
    /// Test contexts with an outdoor truth, re-situated in rain.
    Violation,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the planted-pattern world.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a Foursquare TSV or JSONL check-in file.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        /// Check-in file (overrides `ingest.path`).
        #[arg(long)]
        path: Option<PathBuf>,
        /// POI catalog JSONL (overrides `ingest.catalog`).
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Filter and split the data, build profiles and assign SIDs.
    BuildSids {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary and the pretraining and SFT corpora.
    BuildCorpus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked continued pretraining from random initialization.
    Pretrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sequence records only.
        #[arg(long)]
        no_alignment_corpus: bool,
    },
    /// Supervised fine-tuning. With a corpus directory as input, starts from random weights.
    Sft {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_profile: bool,
        #[arg(long)]
        no_situation: bool,
    },
    /// Rule-built preference pairs and DPO against the SFT model.
    Dpo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Slice::Test)]
        slice: Slice,
        /// Also evaluate the first-order Markov baseline and print the deltas.
        #[arg(long)]
        markov: bool,
    },
    /// Retrain and evaluate with components removed.
    Ablate {
        /// An SFT directory trained with the full pipeline.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of no_profile,no_situation,no_alignment_corpus,no_pretrain.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Answer JSON-lines requests on stdin, or on a TCP address.
    Serve {
        #[arg(long)]
        input: PathBuf,
        /// A bench-latency directory holding a draft head.
        #[arg(long)]
        draft: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        /// Stop after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Distil a draft head, then compare serial and pipelined decoding.
    BenchLatency {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        requests: Option<usize>,
    },
    /// Finite-difference checks of the model and DPO gradients.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        probes: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).target(env_logger::Target::Stderr).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
