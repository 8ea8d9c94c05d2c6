//! Command-line driver: data generation, training stages, sampling,
//! evaluation and action ranking.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dexworld", version, about = "Hand-scene world model toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set diffusion.finetune.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Codec,
    Probe,
    PretrainInpaint,
    PretrainI2v,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Probe => "probe",
            Stage::PretrainInpaint => "pretrain_inpaint",
            Stage::PretrainI2v => "pretrain_i2v",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build every dataset split and write records plus a manifest.
    GenData,
    /// Run one training stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Continue from the stage's saved training state.
        #[arg(long)]
        resume: bool,
        /// Fine-tune from random weights instead of a pretrained checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Stop after this many total steps; `--resume` continues later.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Generate one video.
    Sample {
        /// World-model checkpoint; defaults to the fine-tuned model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Condition on this record from the dataset.
        #[arg(long, conflicts_with_all = ["scene", "script"])]
        record: Option<String>,
        #[arg(long, requires = "script")]
        scene: Option<PathBuf>,
        #[arg(long, requires = "scene")]
        script: Option<PathBuf>,
        /// Output directory; defaults to `<output_dir>/samples/<id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sampling seed; defaults to the run seed.
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Score a model (or the copy-static baseline) on a dataset split.
    Eval {
        #[arg(long, conflicts_with = "copy_static")]
        checkpoint: Option<PathBuf>,
        /// Score the static-video baseline instead of a model.
        #[arg(long)]
        copy_static: bool,
        /// Manifest to evaluate; defaults to the generated dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Name used in the CSV and output file names.
        #[arg(long)]
        label: Option<String>,
    },
    /// Rank candidate action scripts against a goal.
    Rank {
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Roll candidates out in the simulator instead of the model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        scene: PathBuf,
        /// TOML file with one `[[candidate]]` table per action script.
        #[arg(long)]
        candidates: PathBuf,
        /// Goal image (PPM or PNG) the final frame should match.
        #[arg(long, conflicts_with = "goal_label", required_unless_present = "goal_label")]
        goal_image: Option<PathBuf>,
        /// Task name the generated video should show.
        #[arg(long)]
        goal_label: Option<String>,
    },
    /// Write a random image-goal ranking episode (scene, candidates, goal).
    MakeEpisode {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
}

/// Resolves the configuration and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.sets)?;
    if let Some(dir) = cli.global.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { stage, resume, from_scratch, until } => {
            commands::train(&cfg, stage, resume, from_scratch, until)
        }
        Command::Sample { checkpoint, record, scene, script, out, sample_seed } => {
            let target = match (record, scene, script) {
                (Some(id), _, _) => commands::SampleTarget::Record(id),
                (None, Some(scene), Some(script)) => commands::SampleTarget::Script { scene, script },
                _ => return Err(CliError::Config("sample needs --record or --scene with --script".into())),
            };
            commands::sample(&cfg, checkpoint, target, out, sample_seed).map(|_| ())
        }
        Command::Eval { checkpoint, copy_static, manifest, label } => {
            commands::eval(&cfg, checkpoint, copy_static, manifest, label)
        }
        Command::Rank { checkpoint, oracle, scene, candidates, goal_image, goal_label } => {
            let goal = match (goal_image, goal_label) {
                (Some(p), _) => commands::GoalArg::Image(p),
                (None, Some(l)) => commands::GoalArg::Label(l),
                (None, None) => return Err(CliError::Config("rank needs --goal-image or --goal-label".into())),
            };
            commands::rank(&cfg, checkpoint, oracle, &scene, &candidates, goal).map(|_| ())
        }
        Command::MakeEpisode { out, candidates, episode_seed } => {
            commands::make_episode(&cfg, &out, candidates, episode_seed)
        }
    }
}
