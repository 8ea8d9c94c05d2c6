//! Codec plus denoiser as one model, and the three training stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::ConditioningBundle;
use super::sample::{sample_batch, SampleConfig};
use super::train::{
    i2v_example, ExampleSource, FixedExamples, InpaintingSource, MaskSampler, TrainConfig, TrainExample, TrainState,
};
use super::{ConditioningMode, DenoiserConfig, Dit, NoiseSchedule, ScheduleConfig};
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig, CodecMode, LatentTensor};
use crate::dataset::{record_from_script, HybridSampler, Source, TripletRecord};
use crate::error::{Error, Result};
use crate::video::VideoTensor;
use crate::worldsim::{ActionScript, WorldConfig, WorldState};

/// Affine map from codec latents to diffusion space: `(x - shift) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentScaling {
    pub shift: f32,
    pub scale: f32,
}

impl LatentScaling {
    /// Maps pixel-valued latents from `[0, 1]` to `[-1, 1]`.
    pub fn unit_range() -> Self {
        Self { shift: 0.5, scale: 2.0 }
    }

    /// Standardizes with the mean and deviation of `latents`.
    pub fn fit(latents: &[LatentTensor]) -> Result<Self> {
        let n: usize = latents.iter().map(|l| l.data.len()).sum();
        if n == 0 {
            return Err(Error::Invalid("cannot fit latent scaling to no data".into()));
        }
        let mean = latents.iter().flat_map(|l| &l.data).map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = latents.iter().flat_map(|l| &l.data).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self { shift: mean as f32, scale: (1.0 / var.sqrt().max(1e-6)) as f32 })
    }

    pub fn for_codec(codec: &Codec, videos: &[VideoTensor]) -> Result<Self> {
        match codec.mode() {
            CodecMode::Patchify => Ok(Self::unit_range()),
            CodecMode::Learned => Self::fit(&videos.iter().map(|v| codec.encode(v)).collect::<Result<Vec<_>>>()?),
        }
    }

    pub fn to_diffusion(&self, lat: &LatentTensor) -> LatentTensor {
        let data = lat.data.iter().map(|&v| (v - self.shift) * self.scale).collect();
        LatentTensor { data, f: lat.f, c: lat.c, h: lat.h, w: lat.w }
    }

    pub fn from_diffusion(&self, lat: &LatentTensor) -> LatentTensor {
        let data = lat.data.iter().map(|&v| v / self.scale + self.shift).collect();
        LatentTensor { data, f: lat.f, c: lat.c, h: lat.h, w: lat.w }
    }
}

/// Everything needed to turn conditioning videos into a generated video.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub codec: Codec,
    pub scaling: LatentScaling,
    pub dit: Dit<f32>,
    pub schedule_cfg: ScheduleConfig,
    pub schedule: NoiseSchedule,
}

pub const MODEL_KIND: &str = "world-model";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    scaling: LatentScaling,
    codec: CodecConfig,
}

impl WorldModel {
    pub fn new(
        codec: Codec,
        scaling: LatentScaling,
        denoiser: DenoiserConfig,
        schedule_cfg: ScheduleConfig,
        seed: u64,
    ) -> Result<Self> {
        if denoiser.latent_channels != codec.config().latent_channels {
            return Err(Error::Config(format!(
                "denoiser expects {} latent channels, codec produces {}",
                denoiser.latent_channels,
                codec.config().latent_channels
            )));
        }
        let schedule = NoiseSchedule::from_config(&schedule_cfg)?;
        Ok(Self { codec, scaling, dit: Dit::new(denoiser, seed)?, schedule_cfg, schedule })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.dit.cfg.conditioning_mode
    }

    /// The same weights read under another conditioning mode. Every mode
    /// shares one parameter layout.
    pub fn set_mode(&mut self, mode: ConditioningMode) {
        self.dit.cfg.conditioning_mode = mode;
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<LatentTensor> {
        Ok(self.scaling.to_diffusion(&self.codec.encode(video)?))
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        let mut v = self.codec.decode(&self.scaling.from_diffusion(latent))?;
        v.clamp_unit();
        Ok(v)
    }

    /// Fine-tuning conditioning for a triplet under the current mode.
    pub fn bundle_for_record(&self, rec: &TripletRecord) -> Result<ConditioningBundle> {
        rec.check_alignment()?;
        let c_s = self.encode(&rec.static_scene)?;
        let (f, _, h, w) = c_s.shape();
        let (c_h, hand_params) = match self.mode() {
            ConditioningMode::MeshRender => (Some(self.encode(&rec.hand)?), None),
            ConditioningMode::Mask => (Some(self.encode(&rec.hand_mask)?), None),
            ConditioningMode::ModulateGlobal | ConditioningMode::ModulatePerframe => {
                (None, Some(rec.hand_params.clone()))
            }
        };
        Ok(ConditioningBundle {
            c_s,
            c_h,
            mask: ConditioningBundle::full_mask(f, h, w),
            hand_params,
            label: Some(rec.label),
        })
    }

    pub fn example_for_record(&self, rec: &TripletRecord) -> Result<TrainExample> {
        Ok(TrainExample { z0: self.encode(&rec.interaction)?, cond: self.bundle_for_record(rec)? })
    }

    /// Renders the conditioning videos for a candidate script and returns
    /// the bundle with the ground-truth record it came from.
    pub fn bundle_for_script(
        &self,
        scene: &WorldState,
        script: &ActionScript,
        source: Source,
        world: &WorldConfig,
    ) -> Result<(ConditioningBundle, TripletRecord)> {
        let rec = record_from_script("query".into(), scene, script, 0, source, world)?;
        Ok((self.bundle_for_record(&rec)?, rec))
    }

    /// One decoded video per bundle, item `i` seeded by `seeds[i]`.
    pub fn generate_batch(
        &self,
        bundles: &[ConditioningBundle],
        cfg: &SampleConfig,
        seeds: &[u64],
    ) -> Result<Vec<VideoTensor>> {
        if bundles.len() != seeds.len() {
            return Err(Error::Invalid(format!("{} bundles but {} seeds", bundles.len(), seeds.len())));
        }
        let mut out = Vec::with_capacity(bundles.len());
        for (bs, ss) in bundles.chunks(GENERATE_CHUNK).zip(seeds.chunks(GENERATE_CHUNK)) {
            for z in sample_batch(&self.dit, &self.schedule, bs, cfg, ss)? {
                out.push(self.decode(&z)?);
            }
        }
        Ok(out)
    }

    pub fn generate(&self, bundle: &ConditioningBundle, cfg: &SampleConfig, seed: u64) -> Result<VideoTensor> {
        Ok(self.generate_batch(std::slice::from_ref(bundle), cfg, &[seed])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            denoiser: self.dit.cfg,
            schedule: self.schedule_cfg,
            scaling: self.scaling,
            codec: *self.codec.config(),
        };
        let mut ck = Checkpoint::new(MODEL_KIND, toml::to_string(&meta).map_err(|e| Error::Malformed(e.to_string()))?);
        ck.push_params("param.", &self.dit.params);
        for t in self.codec.to_checkpoint()?.tensors {
            ck.push(format!("codec.{}", t.name), t.shape, t.data);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(MODEL_KIND)?;
        let meta: ModelMeta = toml::from_str(&ck.meta).map_err(|e| Error::Malformed(format!("model metadata: {e}")))?;
        let mut cc =
            Checkpoint::new("codec", toml::to_string(&meta.codec).map_err(|e| Error::Malformed(e.to_string()))?);
        for t in &ck.tensors {
            if let Some(name) = t.name.strip_prefix("codec.") {
                cc.push(name, t.shape.clone(), t.data.clone());
            }
        }
        let codec = Codec::from_checkpoint(&cc)?;
        let mut model = Self::new(codec, meta.scaling, meta.denoiser, meta.schedule, 0)?;
        ck.load_params("param.", &mut model.dit.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Masked-video pretraining examples.
    pub fn inpainting_source(&self, videos: Vec<VideoTensor>, masks: MaskSampler) -> Result<InpaintingSource<'_>> {
        InpaintingSource::new(&self.codec, self.scaling, videos, masks)
    }

    /// First-frame-conditioned pretraining examples.
    pub fn i2v_examples(&self, videos: &[VideoTensor]) -> Result<FixedExamples> {
        FixedExamples::new(videos.iter().map(|v| i2v_example(&self.codec, self.scaling, v)).collect::<Result<_>>()?)
    }

    /// Fine-tuning examples. With `weight`, dynamic-camera records are drawn
    /// with that probability and fixed-camera records otherwise.
    pub fn dwm_examples(&self, records: &[TripletRecord], weight: Option<f64>) -> Result<FixedExamples> {
        let ex = records.iter().map(|r| self.example_for_record(r)).collect::<Result<Vec<_>>>()?;
        let pool = FixedExamples::new(ex)?;
        Ok(match weight {
            Some(w) => {
                let sources: Vec<Source> = records.iter().map(|r| r.source).collect();
                pool.with_sampler(HybridSampler::new(&sources, w)?)
            }
            None => pool,
        })
    }

    /// Continues `state` until step `until` and copies its weights into the model.
    pub fn train_stage(
        &mut self,
        state: &mut TrainState,
        source: &dyn ExampleSource,
        until: u64,
        on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        if state.dit.cfg.latent_channels != self.dit.cfg.latent_channels {
            return Err(Error::Config("training state and model differ in latent channels".into()));
        }
        let schedule = self.schedule.clone();
        let result = state.run_until(until, source, &schedule, on_step);
        self.dit.params = state.dit.params.clone();
        result
    }

    /// Fresh training state over the model's current weights.
    pub fn start_training(&self, cfg: TrainConfig) -> Result<TrainState> {
        TrainState::new(self.dit.clone(), cfg)
    }
}

const GENERATE_CHUNK: usize = 8;

/// Trains the model as a video inpainter.
pub fn pretrain_inpainting(
    model: &mut WorldModel,
    videos: Vec<VideoTensor>,
    masks: MaskSampler,
    cfg: TrainConfig,
) -> Result<TrainState> {
    let mut state = model.start_training(cfg)?;
    let snapshot = model.clone();
    let source = snapshot.inpainting_source(videos, masks)?;
    model.train_stage(&mut state, &source, cfg.steps, |_| Ok(()))?;
    Ok(state)
}

/// Trains the model as a first-frame-to-video generator.
pub fn pretrain_i2v(model: &mut WorldModel, videos: &[VideoTensor], cfg: TrainConfig) -> Result<TrainState> {
    let mut state = model.start_training(cfg)?;
    let source = model.i2v_examples(videos)?;
    model.train_stage(&mut state, &source, cfg.steps, |_| Ok(()))?;
    Ok(state)
}

/// Continues training on triplets with the scene-action objective.
pub fn finetune_dwm(
    model: &mut WorldModel,
    records: &[TripletRecord],
    weight: Option<f64>,
    cfg: TrainConfig,
) -> Result<TrainState> {
    let mut state = model.start_training(cfg)?;
    let source = model.dwm_examples(records, weight)?;
    model.train_stage(&mut state, &source, cfg.steps, |_| Ok(()))?;
    Ok(state)
}
