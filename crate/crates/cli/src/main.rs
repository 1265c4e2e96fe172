//! Command-line driver: synthesis, training, inference, evaluation and
//! reports. Every command writes into a fresh numbered run directory
//! holding its resolved config and a checksum manifest.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "condatlas", version, about = "Attribute-conditioned deformable templates")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat `key = value` config file; `include = other.cfg` lines nest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Trains in double precision.
    #[arg(long, global = true)]
    pub float64: bool,
    /// Config override, repeatable: `--set key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generates a synthetic population.
    Synth,
    /// Trains a model on a dataset, or resumes an interrupted run.
    Train(TrainArgs),
    /// Writes templates across ages and a montage.
    Template(TemplateArgs),
    /// Registers the template to one subject.
    Register(RegisterArgs),
    /// Dice, surface distance and regularity over a split.
    Evaluate(EvaluateArgs),
    /// Template structure volumes against the population trend.
    Trend(TrendArgs),
    /// Finite-difference checks of every op and the full loss.
    Gradcheck,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory; falls back to the `data` key, then `AM_DATA_DIR`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory of an interrupted run to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TemplateArgs {
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,50,80")]
    pub ages: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "F,M")]
    pub sex: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Subject id within the dataset.
    #[arg(long, conflicts_with = "image")]
    pub subject: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Image file of a subject outside any dataset; needs `--age` and `--sex`.
    #[arg(long, requires_all = ["age", "sex"])]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub age: Option<f64>,
    #[arg(long)]
    pub sex: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// One of train, val, test, all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct TrendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second model overlaid on the report, trained with global centrality.
    #[arg(long)]
    pub lt2019: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Subjects forming the population curve.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Query ages; defaults to every 5 years across the dataset range.
    #[arg(long, value_delimiter = ',')]
    pub ages: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "F,M")]
    pub sex: Vec<String>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() {
                        cause
                    } else {
                        format!("{msg}: {cause}")
                    };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
