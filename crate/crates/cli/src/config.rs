//! Run configuration.
//!
//! A run is described by one TOML file with a few top-level keys and one
//! table per module. Values are resolved in this order, later sources
//! winning:
//!
//! 1. built-in defaults ([`RunConfig::default`]),
//! 2. the file passed with `--config`,
//! 3. `--set section.key=value` overrides, in command-line order,
//! 4. the dedicated `--seed` and `--output-dir` flags.
//!
//! Unknown keys are rejected at every level. Each command writes the fully
//! resolved configuration next to its outputs; passing that file back with
//! `--config` reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use dexworld::codec::{CodecConfig, CodecTrainConfig};
use dexworld::dataset::TaskMix;
use dexworld::diffusion::{DenoiserConfig, MaskSampler, SampleConfig, ScheduleConfig, TrainConfig};
use dexworld::evaluator::ProbeConfig;
use dexworld::worldsim::WorldConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and the default sampling seed.
    pub seed: u64,
    /// Root for every artifact of the run.
    pub output_dir: PathBuf,
    /// Record directory; relative paths are taken from `output_dir`.
    pub data_dir: PathBuf,
    pub worldsim: WorldConfig,
    pub codec: CodecSection,
    pub diffusion: DiffusionSection,
    pub dataset: DatasetSection,
    pub evaluator: EvaluatorSection,
}

/// The learned codec trained by `train codec`; it is also the perceptual
/// metric used by `eval` and `rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub model: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentCodec {
    /// Lossless space-to-depth reshaping with `patch` factors.
    Patchify,
    /// The trained codec from `train codec`.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStage {
    PretrainInpaint,
    PretrainI2v,
}

impl InitStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainInpaint => "pretrain_inpaint",
            Self::PretrainI2v => "pretrain_i2v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub latent_codec: LatentCodec,
    /// Spatial and temporal patch factors of the patchify codec.
    pub patch: (usize, usize),
    /// Checkpoint the fine-tune stage starts from.
    pub init: InitStage,
    /// Fine-tune on synthetic and fixed-camera records together.
    pub hybrid: bool,
    /// Probability of drawing a synthetic record when `hybrid` is set.
    pub weight: f64,
    /// Training state is saved every this many steps.
    pub checkpoint_every: u64,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub sample: SampleConfig,
    pub masks: MaskSampler,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

/// Record count and first seed of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub syn_train: SplitSpec,
    pub syn_val: SplitSpec,
    pub syn_test: SplitSpec,
    pub fix_train: SplitSpec,
    pub fix_test: SplitSpec,
    pub heldout_test: SplitSpec,
    pub syn_mix: TaskMix,
    pub fix_mix: TaskMix,
    pub heldout_mix: TaskMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSection {
    /// Sampling seeds; metrics are averaged over them.
    pub seeds: Vec<u64>,
    /// Split scored by `eval`: "train", "val" or "test".
    pub split: String,
    /// Number of comparison strips written per evaluation.
    pub strips: usize,
    /// Score image goals against every frame rather than the last one.
    pub whole_video_image_goal: bool,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data"),
            worldsim: WorldConfig::compact(),
            codec: CodecSection { model: CodecConfig::learned(2, 2, 8), train: CodecTrainConfig::default() },
            diffusion: DiffusionSection {
                latent_codec: LatentCodec::Patchify,
                patch: (2, 2),
                init: InitStage::PretrainInpaint,
                hybrid: true,
                weight: 0.5,
                checkpoint_every: 100,
                denoiser: DenoiserConfig::compact(),
                schedule: ScheduleConfig::default(),
                sample: SampleConfig::default(),
                masks: MaskSampler::default(),
                pretrain: TrainConfig { steps: 600, lr: 2e-3, seed: 1, ..TrainConfig::default() },
                finetune: TrainConfig { steps: 4_000, lr: 2e-3, seed: 2, ..TrainConfig::default() },
            },
            dataset: DatasetSection {
                syn_train: SplitSpec { n: 256, seed: 1_000 },
                syn_val: SplitSpec { n: 16, seed: 8_000 },
                syn_test: SplitSpec { n: 32, seed: 9_000 },
                fix_train: SplitSpec { n: 128, seed: 5_000 },
                fix_test: SplitSpec { n: 16, seed: 9_500 },
                heldout_test: SplitSpec { n: 16, seed: 9_800 },
                syn_mix: TaskMix::synthetic(),
                fix_mix: TaskMix::fixed_camera(),
                heldout_mix: TaskMix::held_out(),
            },
            evaluator: EvaluatorSection {
                seeds: vec![0, 1, 2],
                split: "test".into(),
                strips: 4,
                whole_video_image_goal: false,
                probe: ProbeConfig::default(),
            },
        }
    }
}

/// Overlays `top` onto `base`, merging tables key by key.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set`: any TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn apply_set(root: &mut Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad key path {path:?}")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{path:?}: {k:?} is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Resolves defaults, an optional file and `--set` overrides.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let mut root = Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let user: Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, user);
        }
        for s in sets {
            apply_set(&mut root, s)?;
        }
        let cfg: RunConfig =
            Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.worldsim.validate()?;
        self.codec.model.validate()?;
        self.diffusion.denoiser.validate()?;
        self.diffusion.masks.validate()?;
        self.diffusion.pretrain.validate()?;
        self.diffusion.finetune.validate()?;
        for mix in [&self.dataset.syn_mix, &self.dataset.fix_mix, &self.dataset.heldout_mix] {
            mix.validate()?;
        }
        if !(0.0..=1.0).contains(&self.diffusion.weight) {
            return Err(CliError::Config("diffusion.weight must lie in [0, 1]".into()));
        }
        if self.diffusion.checkpoint_every == 0 {
            return Err(CliError::Config("diffusion.checkpoint_every must be positive".into()));
        }
        if self.evaluator.seeds.is_empty() {
            return Err(CliError::Config("evaluator.seeds is empty".into()));
        }
        self.eval_split()?;
        Ok(())
    }

    pub fn eval_split(&self) -> CliResult<dexworld::dataset::Split> {
        self.evaluator.split.parse().map_err(|_| CliError::Config(format!("unknown split {:?}", self.evaluator.split)))
    }

    pub fn data_path(&self) -> PathBuf {
        self.output_dir.join(&self.data_dir)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Writes the resolved configuration as `dir/name`.
    pub fn write_resolved(&self, dir: &Path, name: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
