use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpseg::cli;
use cpseg::prompt::PromptMode;

#[derive(Parser)]
#[command(name = "cpseg", about = "Chain-of-thought language-prompted semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flood-scene dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long)]
        n: usize,
        /// Image height and width
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the merged (7-class) variant
        #[arg(long)]
        merge: bool,
    },
    /// Train a model on a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON or TOML config mirroring the TrainConfig fields
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Override the config's prompting mode
        #[arg(long, value_parser = parse_mode)]
        prompt_mode: Option<PromptMode>,
    },
    /// Evaluate a checkpoint and write a per-class CSV report
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Merge flooded/non-flooded classes before evaluating
        #[arg(long)]
        merge: bool,
        #[arg(long)]
        report: PathBuf,
        /// Print wall-clock timing
        #[arg(long)]
        time: bool,
    },
    /// Segment a single image
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output mask (.pgm or .png)
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-thought, per-class score-map images
        #[arg(long)]
        dump_thought_maps: Option<PathBuf>,
    },
    /// Run an ablation protocol
    Ablate {
        #[command(subcommand)]
        which: AblateCommand,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AblateArgs {
    /// Directory containing train/ and val/ datasets
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, at least three
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Compare the four prompting modes
    Prompts(AblateArgs),
    /// Compare original and combined class taxonomies
    Merge(AblateArgs),
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse().map_err(|e: cpseg::CpSegError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth {
            out,
            n,
            size,
            seed,
            merge,
        } => cli::cmd_synth(&out, n, size[0], size[1], seed, merge),
        Command::Train {
            data,
            config,
            out,
            prompt_mode,
        } => cli::cmd_train(&data, config.as_deref(), &out, prompt_mode),
        Command::Eval {
            data,
            ckpt,
            merge,
            report,
            time,
        } => cli::cmd_eval(&data, &ckpt, merge, &report, time).map(|_| ()),
        Command::Segment {
            ckpt,
            image,
            out,
            dump_thought_maps,
        } => cli::cmd_segment(&ckpt, &image, &out, dump_thought_maps.as_deref()),
        Command::Ablate { which } => match which {
            AblateCommand::Prompts(a) => {
                cli::cmd_ablate_prompts(&a.data, a.config.as_deref(), &a.seeds, &a.report).map(|_| ())
            }
            AblateCommand::Merge(a) => {
                cli::cmd_ablate_merge(&a.data, a.config.as_deref(), &a.seeds, &a.report).map(|_| ())
            }
        },
        Command::Gradcheck { config } => match cli::cmd_gradcheck(config.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
