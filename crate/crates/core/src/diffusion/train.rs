use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{make_batch, ConditioningBundle};
use super::{DenoiserConfig, Dit, DitBatch, NoiseSchedule};
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, LatentTensor};
use crate::dataset::HybridSampler;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Grads};
use crate::trainlog::LogLine;
use crate::video::VideoTensor;

use super::pipeline::LatentScaling;

/// Target latent plus its conditioning, both in diffusion space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z0: LatentTensor,
    pub cond: ConditioningBundle,
}

/// Anything that can hand the trainer a fresh example.
pub trait ExampleSource {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<TrainExample>;
}

/// A fixed pool, drawn uniformly or through a source-weighted sampler.
#[derive(Debug, Clone)]
pub struct FixedExamples {
    pub examples: Vec<TrainExample>,
    pub sampler: Option<HybridSampler>,
}

impl FixedExamples {
    pub fn new(examples: Vec<TrainExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("no training examples".into()));
        }
        Ok(Self { examples, sampler: None })
    }

    pub fn with_sampler(mut self, sampler: HybridSampler) -> Self {
        self.sampler = Some(sampler);
        self
    }
}

impl ExampleSource for FixedExamples {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
        let i = match &self.sampler {
            Some(s) => s.draw(rng),
            None => rng.gen_range(0..self.examples.len()),
        };
        self.examples
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("sampler drew index {i} of {}", self.examples.len())))
    }
}

/// Random spatiotemporal boxes on the latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSampler {
    pub max_boxes: usize,
    /// Largest box side as a fraction of the grid side. Zero disables boxes.
    pub box_fraction: f64,
    /// Probability of returning the all-known mask.
    pub full_prob: f64,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self { max_boxes: 3, box_fraction: 0.6, full_prob: 0.1 }
    }
}

impl MaskSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.box_fraction) || !(0.0..=1.0).contains(&self.full_prob) {
            return Err(Error::Config("mask sampler fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `f x 1 x h x w` mask, 1 where content is known.
    pub fn sample<R: Rng>(&self, f: usize, h: usize, w: usize, rng: &mut R) -> LatentTensor {
        let mut m = ConditioningBundle::full_mask(f, h, w);
        if rng.gen::<f64>() < self.full_prob || self.max_boxes == 0 {
            return m;
        }
        let boxes = rng.gen_range(1..=self.max_boxes);
        for _ in 0..boxes {
            let side = |dim: usize, rng: &mut R| -> usize {
                let max = (self.box_fraction * dim as f64).round() as usize;
                if max == 0 {
                    0
                } else {
                    rng.gen_range(1..=max.min(dim))
                }
            };
            let (bh, bw) = (side(h, rng), side(w, rng));
            if bh == 0 || bw == 0 {
                continue;
            }
            let bf = rng.gen_range(1..=f);
            let (f0, y0, x0) = (rng.gen_range(0..=f - bf), rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
            for fi in f0..f0 + bf {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        m.data[(fi * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
        m
    }
}

/// Masked-video inpainting examples built on the fly: the conditioning is
/// the encoding of the video with unknown latent cells painted mid-gray.
pub struct InpaintingSource<'a> {
    codec: &'a Codec,
    scaling: LatentScaling,
    videos: Vec<VideoTensor>,
    targets: Vec<LatentTensor>,
    masks: MaskSampler,
}

impl<'a> InpaintingSource<'a> {
    pub fn new(codec: &'a Codec, scaling: LatentScaling, videos: Vec<VideoTensor>, masks: MaskSampler) -> Result<Self> {
        masks.validate()?;
        if videos.is_empty() {
            return Err(Error::Invalid("no pretraining videos".into()));
        }
        let targets = videos.iter().map(|v| Ok(scaling.to_diffusion(&codec.encode(v)?))).collect::<Result<Vec<_>>>()?;
        Ok(Self { codec, scaling, videos, targets, masks })
    }

    /// Conditioning for a given video and mask.
    pub fn masked_example(&self, index: usize, mask: LatentTensor) -> Result<TrainExample> {
        let video = &self.videos[index];
        let z0 = self.targets[index].clone();
        let c_s = if mask.data.iter().all(|&m| m == 1.0) {
            z0.clone()
        } else {
            let masked = paint_unknown(video, &mask, self.codec)?;
            self.scaling.to_diffusion(&self.codec.encode(&masked)?)
        };
        Ok(TrainExample { z0, cond: ConditioningBundle { c_s, c_h: None, mask, hand_params: None, label: None } })
    }
}

impl ExampleSource for InpaintingSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
        let i = rng.gen_range(0..self.videos.len());
        let (f, _, h, w) = self.targets[i].shape();
        let mask = self.masks.sample(f, h, w, rng);
        self.masked_example(i, mask)
    }
}

/// Sets every pixel covered by an unknown latent cell to 0.5.
pub fn paint_unknown(video: &VideoTensor, mask: &LatentTensor, codec: &Codec) -> Result<VideoTensor> {
    let cfg = codec.config();
    let (r, s) = (cfg.temporal_ratio, cfg.spatial_ratio);
    let (nf, hh, ww) = video.shape();
    let (f, _, h, w) = mask.shape();
    if nf != f * r || hh != h * s || ww != w * s {
        return Err(Error::Shape(format!("mask grid {f}x{h}x{w} does not tile video {nf}x{hh}x{ww}")));
    }
    let mut out = video.clone();
    let data = out.data_mut();
    for t in 0..nf {
        for y in 0..hh {
            for x in 0..ww {
                if mask.data[((t / r) * h + y / s) * w + x / s] == 0.0 {
                    let i = ((t * hh + y) * ww + x) * 3;
                    data[i..i + 3].fill(0.5);
                }
            }
        }
    }
    Ok(out)
}

/// Image-to-video conditioning: the first frame repeated over the clip,
/// with only the first latent frame marked known.
pub fn i2v_example(codec: &Codec, scaling: LatentScaling, video: &VideoTensor) -> Result<TrainExample> {
    let first = video.frame(0);
    let held = VideoTensor::from_frames(&vec![first; video.num_frames()])?;
    let z0 = scaling.to_diffusion(&codec.encode(video)?);
    let c_s = scaling.to_diffusion(&codec.encode(&held)?);
    let (f, _, h, w) = z0.shape();
    let mut mask = LatentTensor::zeros(f, 1, h, w);
    mask.data[..h * w].fill(1.0);
    Ok(TrainExample { z0, cond: ConditioningBundle { c_s, c_h: None, mask, hand_params: None, label: None } })
}

/// Denoiser inputs for a list of examples with their drawn `t` and noise.
pub fn assemble(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    t: &[usize],
    eps: &[Vec<f32>],
    labels: &[usize],
) -> Result<(DitBatch<f32>, Vec<f32>)> {
    let mut zt = Vec::with_capacity(examples.len());
    for ((ex, &ti), e) in examples.iter().zip(t).zip(eps) {
        zt.push(schedule.q_sample(&ex.z0.data, ti, e)?);
    }
    let zrefs: Vec<&[f32]> = zt.iter().map(Vec::as_slice).collect();
    let conds: Vec<&ConditioningBundle> = examples.iter().map(|e| &e.cond).collect();
    let batch = make_batch(cfg, &zrefs, t, &conds, labels)?;
    Ok((batch, eps.concat()))
}

/// Draws `t`, noise and label dropout per example and returns the batch
/// with its regression target.
pub fn noisy_batch(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    rng: &mut ChaCha8Rng,
) -> Result<(DitBatch<f32>, Vec<f32>)> {
    let mut t = Vec::with_capacity(examples.len());
    let mut eps = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        t.push(rng.gen_range(1..=schedule.num_steps()));
        eps.push((0..ex.z0.data.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>());
        let dropped = rng.gen::<f64>() < cfg.label_dropout;
        labels.push(if dropped { cfg.null_label() } else { ex.cond.label_token(cfg) });
    }
    assemble(cfg, schedule, examples, &t, &eps, &labels)
}

/// Mean squared error between predicted and true noise.
pub fn noise_mse(pred: &[f32], eps: &[f32]) -> f64 {
    let s: f64 = pred.iter().zip(eps).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    s / eps.len().max(1) as f64
}

/// Standard denoising loss with gradients for one batch.
pub fn training_loss(
    dit: &Dit<f32>,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Grads<f32>)> {
    let (batch, target) = noisy_batch(&dit.cfg, schedule, examples, rng)?;
    dit.loss_and_grads(&batch, &target)
}

/// Which latent cells an evaluation loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossRegion {
    All,
    /// Cells the mask marks unknown.
    Unknown,
}

/// Deterministic evaluation loss over fixed examples: `t` and noise come
/// from `seed`, so losses from different checkpoints are comparable.
pub fn eval_loss(
    dit: &Dit<f32>,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    seed: u64,
    region: LossRegion,
) -> Result<f64> {
    let mut rng = crate::rng::stream(seed, "diffusion/eval-loss");
    let mut num = 0.0;
    let mut den = 0.0;
    for chunk in examples.chunks(8) {
        let mut t = Vec::new();
        let mut eps = Vec::new();
        let mut labels = Vec::new();
        for ex in chunk {
            t.push(rng.gen_range(1..=schedule.num_steps()));
            eps.push((0..ex.z0.data.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>());
            labels.push(ex.cond.label_token(&dit.cfg));
        }
        let (batch, target) = assemble(&dit.cfg, schedule, chunk, &t, &eps, &labels)?;
        let pred = dit.forward(&batch)?;
        let mut off = 0;
        for ex in chunk {
            let (f, c, h, w) = ex.z0.shape();
            for fi in 0..f {
                for ch in 0..c {
                    for cell in 0..h * w {
                        let i = off + (fi * c + ch) * h * w + cell;
                        let weight = match region {
                            LossRegion::All => 1.0,
                            LossRegion::Unknown => 1.0 - ex.cond.mask.data[fi * h * w + cell] as f64,
                        };
                        num += weight * ((pred[i] - target[i]) as f64).powi(2);
                        den += weight;
                    }
                }
            }
            off += ex.z0.data.len();
        }
    }
    if den == 0.0 {
        return Err(Error::Invalid("evaluation region is empty".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: u64,
    /// Cosine decay from `lr` down to `lr * final_lr_fraction` at `steps`.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 1e-3,
            warmup: 50,
            final_lr_fraction: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch must be positive and lr > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    denoiser: DenoiserConfig,
    train: TrainConfig,
    step: u64,
    adam_step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    history: Vec<[f64; 4]>,
}

/// Parameters, optimizer moments, step counter, RNG position and loss
/// history of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub dit: Dit<f32>,
    pub opt: Adam<f32>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub history: Vec<LogLine>,
    rng: ChaCha8Rng,
}

pub const STATE_KIND: &str = "train-state";

impl TrainState {
    pub fn new(dit: Dit<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(cfg.adam, &dit.params);
        let rng = crate::rng::stream(cfg.seed, "diffusion/train");
        Ok(Self { dit, opt, cfg, step: 0, history: Vec::new(), rng })
    }

    /// One optimizer step. Returns the batch loss.
    pub fn train_step(
        &mut self,
        source: &dyn ExampleSource,
        schedule: &NoiseSchedule,
        started: Instant,
    ) -> Result<f64> {
        let examples = (0..self.cfg.batch).map(|_| source.draw(&mut self.rng)).collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = training_loss(&self.dit, schedule, &examples, &mut self.rng)?;
        let step = self.step + 1;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step, batch: step, loss });
        }
        let lr = self.cfg.lr_at(self.step);
        self.opt.update(&mut self.dit.params, &mut grads, lr);
        self.step = step;
        self.history.push(LogLine { step, loss, lr, wall_time: started.elapsed().as_secs_f64() });
        Ok(loss)
    }

    /// Trains until `self.step == until`, calling `on_step` after every step.
    pub fn run_until(
        &mut self,
        until: u64,
        source: &dyn ExampleSource,
        schedule: &NoiseSchedule,
        mut on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        let started = Instant::now();
        while self.step < until {
            self.train_step(source, schedule, started)?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self, source: &dyn ExampleSource, schedule: &NoiseSchedule) -> Result<()> {
        self.run_until(self.cfg.steps, source, schedule, |_| Ok(()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            denoiser: self.dit.cfg,
            train: self.cfg,
            step: self.step,
            adam_step: self.opt.step,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            history: self.history.iter().map(|l| [l.step as f64, l.loss, l.lr, l.wall_time]).collect(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut ck = Checkpoint::new(STATE_KIND, text);
        ck.push_params("param.", &self.dit.params);
        ck.push_like("adam.m.", &self.dit.params, &self.opt.m);
        ck.push_like("adam.v.", &self.dit.params, &self.opt.v);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STATE_KIND)?;
        let meta: StateMeta =
            toml::from_str(&ck.meta).map_err(|e| Error::Malformed(format!("training state metadata: {e}")))?;
        let mut dit = Dit::new(meta.denoiser, 0)?;
        ck.load_params("param.", &mut dit.params)?;
        let mut opt = Adam::new(meta.train.adam, &dit.params);
        opt.m = ck.load_like("adam.m.", &dit.params)?;
        opt.v = ck.load_like("adam.v.", &dit.params)?;
        opt.step = meta.adam_step;
        let seed: [u8; 32] = hex::decode(&meta.rng_seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Malformed("rng seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos.parse().map_err(|_| Error::Malformed("rng position".into()))?);
        let history =
            meta.history.iter().map(|r| LogLine { step: r[0] as u64, loss: r[1], lr: r[2], wall_time: r[3] }).collect();
        Ok(Self { dit, opt, cfg: meta.train, step: meta.step, history, rng })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ConditioningMode};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            token_patch: 2,
            model_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            label_vocab: 3,
            conditioning_mode: ConditioningMode::MeshRender,
            label_dropout: 0.1,
        }
    }

    fn pool(n: usize) -> FixedExamples {
        let mut rng = crate::rng::stream(5, "pool");
        let ex = (0..n)
            .map(|i| {
                let g =
                    |rng: &mut ChaCha8Rng| (0..2 * 3 * 4 * 4).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                let z0 = LatentTensor::from_vec(2, 3, 4, 4, g(&mut rng)).unwrap();
                let c_s = LatentTensor::from_vec(2, 3, 4, 4, g(&mut rng)).unwrap();
                TrainExample {
                    z0,
                    cond: ConditioningBundle {
                        c_h: Some(c_s.clone()),
                        c_s,
                        mask: ConditioningBundle::full_mask(2, 4, 4),
                        hand_params: None,
                        label: Some(i % 3),
                    },
                }
            })
            .collect();
        FixedExamples::new(ex).unwrap()
    }

    #[test]
    fn exact_noise_gives_zero_loss() {
        let eps = vec![0.3f32, -1.2, 0.0, 2.5];
        assert_eq!(noise_mse(&eps, &eps), 0.0);
    }

    #[test]
    fn loss_near_one_at_init() {
        let sched = build_schedule(1000, 1e-4, 2e-2).unwrap();
        let dit = Dit::<f32>::new(tiny(), 3).unwrap();
        let src = pool(8);
        let mut rng = crate::rng::stream(0, "l");
        let mut total = 0.0;
        for _ in 0..100 {
            let ex: Vec<_> = (0..4).map(|_| src.draw(&mut rng).unwrap()).collect();
            total += training_loss(&dit, &sched, &ex, &mut rng).unwrap().0;
        }
        let mean = total / 100.0;
        assert!((0.9..1.5).contains(&mean), "mean loss {mean}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let sched = build_schedule(100, 1e-4, 2e-2).unwrap();
        let mut dit = Dit::<f32>::new(tiny(), 3).unwrap();
        dit.randomize(0.05, &mut crate::rng::stream(1, "r"));
        let ex = pool(3).examples;
        let mut rng = crate::rng::stream(2, "e");
        let t = vec![5, 50, 90];
        let eps: Vec<Vec<f32>> =
            (0..3).map(|_| (0..96).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).collect();
        let labels = vec![0, 1, 2];
        let (b, tg) = assemble(&dit.cfg, &sched, &ex, &t, &eps, &labels).unwrap();
        let a = dit.loss(&b, &tg).unwrap();
        let order = [2, 0, 1];
        let ex2: Vec<_> = order.iter().map(|&i| ex[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| t[i]).collect();
        let eps2: Vec<_> = order.iter().map(|&i| eps[i].clone()).collect();
        let l2: Vec<_> = order.iter().map(|&i| labels[i]).collect();
        let (b2, tg2) = assemble(&dit.cfg, &sched, &ex2, &t2, &eps2, &l2).unwrap();
        assert!((a - dit.loss(&b2, &tg2).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn mask_sampler_zero_fraction_is_identity() {
        let ms = MaskSampler { max_boxes: 3, box_fraction: 0.0, full_prob: 0.0 };
        let mut rng = crate::rng::stream(0, "m");
        for _ in 0..20 {
            assert!(ms.sample(4, 8, 8, &mut rng).data.iter().all(|&v| v == 1.0));
        }
        let ms = MaskSampler { full_prob: 0.0, ..MaskSampler::default() };
        let masked = (0..50).filter(|_| ms.sample(4, 8, 8, &mut rng).data.contains(&0.0)).count();
        assert!(masked > 40);
    }

    #[test]
    fn training_is_deterministic_and_resumes_exactly() {
        let sched = build_schedule(100, 1e-4, 2e-2).unwrap();
        let cfg = TrainConfig { steps: 20, batch: 2, lr: 3e-3, warmup: 3, seed: 9, ..Default::default() };
        let src = pool(4);
        let mut a = TrainState::new(Dit::new(tiny(), 1).unwrap(), cfg).unwrap();
        a.run(&src, &sched).unwrap();

        let mut b = TrainState::new(Dit::new(tiny(), 1).unwrap(), cfg).unwrap();
        b.run_until(10, &src, &sched, |_| Ok(())).unwrap();
        let bytes = b.to_checkpoint().unwrap().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(TrainState::from_checkpoint(&ck).unwrap().to_checkpoint().unwrap().to_bytes(), bytes);
        let mut c = TrainState::from_checkpoint(&ck).unwrap();
        c.run(&src, &sched).unwrap();

        let la: Vec<f64> = a.history.iter().map(|l| l.loss).collect();
        let lc: Vec<f64> = c.history.iter().map(|l| l.loss).collect();
        assert_eq!(la, lc);
        assert_eq!(a.dit.params.tensors(), c.dit.params.tensors());
    }
}
