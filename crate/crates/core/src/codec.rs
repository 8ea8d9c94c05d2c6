//! Video latent codecs.
//!
//! `Patchify` is an exact space/time-to-channel reshape. `Learned` applies a
//! strided patch convolution (kernel equal to stride) followed by pointwise
//! layers, and a mirrored decoder. Both share the same patch vector layout:
//! channel `((dt * s + dy) * s + dx) * 3 + rgb`.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{silu_backward, silu_forward, Adam, AdamConfig, Linear, ParamStore};
use crate::trainlog::LogLine;
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Patchify,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub temporal_ratio: usize,
    pub spatial_ratio: usize,
    pub latent_channels: usize,
    pub mode: CodecMode,
    /// Width of the pointwise layers in `Learned` mode.
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::patchify(2, 2)
    }
}

impl CodecConfig {
    pub fn patchify(r: usize, s: usize) -> Self {
        Self {
            temporal_ratio: r,
            spatial_ratio: s,
            latent_channels: 3 * r * s * s,
            mode: CodecMode::Patchify,
            hidden: 64,
        }
    }

    pub fn learned(r: usize, s: usize, c: usize) -> Self {
        Self { temporal_ratio: r, spatial_ratio: s, latent_channels: c, mode: CodecMode::Learned, hidden: 64 }
    }

    pub fn patch_len(&self) -> usize {
        3 * self.temporal_ratio * self.spatial_ratio * self.spatial_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_ratio == 0 || self.spatial_ratio == 0 || self.latent_channels == 0 {
            return Err(Error::Config("codec ratios and channels must be positive".into()));
        }
        if self.mode == CodecMode::Patchify && self.latent_channels != self.patch_len() {
            return Err(Error::Config(format!(
                "patchify codec needs latent_channels = 3*r*s^2 = {}, got {}",
                self.patch_len(),
                self.latent_channels
            )));
        }
        if self.mode == CodecMode::Learned && self.hidden == 0 {
            return Err(Error::Config("learned codec needs hidden > 0".into()));
        }
        Ok(())
    }

    /// Latent `(f, c, h, w)` for a video of shape `(F, H, W)`.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
        let (r, s) = (self.temporal_ratio, self.spatial_ratio);
        if !frames.is_multiple_of(r)
            || !height.is_multiple_of(s)
            || !width.is_multiple_of(s)
            || frames == 0
            || height == 0
            || width == 0
        {
            return Err(Error::Shape(format!(
                "video ({frames},{height},{width}) is not divisible by ratios r={r}, s={s}"
            )));
        }
        Ok((frames / r, self.latent_channels, height / s, width / s))
    }
}

/// `f x c x h x w` latent, channel-major within each latent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(f: usize, c: usize, h: usize, w: usize) -> Self {
        Self { f, c, h, w, data: vec![0.0; f * c * h * w] }
    }

    pub fn from_vec(f: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != f * c * h * w {
            return Err(Error::Shape(format!("latent buffer {} != {f}x{c}x{h}x{w}", data.len())));
        }
        Ok(Self { f, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.f, self.c, self.h, self.w)
    }

    pub fn at(&self, fi: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[((fi * self.c + ch) * self.h + y) * self.w + x]
    }

    /// Cell-major rows: `(f * h * w) x c`.
    pub fn to_rows(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        let mut rows = vec![0.0; self.data.len()];
        for fi in 0..self.f {
            for ch in 0..self.c {
                let src = &self.data[(fi * self.c + ch) * hw..][..hw];
                for (p, &v) in src.iter().enumerate() {
                    rows[(fi * hw + p) * self.c + ch] = v;
                }
            }
        }
        rows
    }

    pub fn from_rows(f: usize, c: usize, h: usize, w: usize, rows: &[f32]) -> Self {
        let hw = h * w;
        let mut data = vec![0.0; rows.len()];
        for fi in 0..f {
            for p in 0..hw {
                for ch in 0..c {
                    data[(fi * c + ch) * hw + p] = rows[(fi * hw + p) * c + ch];
                }
            }
        }
        Self { f, c, h, w, data }
    }

    pub fn mse(&self, other: &LatentTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("latent {:?} vs {:?}", self.shape(), other.shape())));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Exact space/time-to-channel reshape.
pub fn patchify(video: &VideoTensor, r: usize, s: usize) -> Result<LatentTensor> {
    let (frames, height, width) = video.shape();
    let cfg = CodecConfig::patchify(r, s);
    let (f, c, h, w) = cfg.latent_shape(frames, height, width)?;
    let src = video.data();
    let mut out = LatentTensor::zeros(f, c, h, w);
    for fi in 0..f {
        for dt in 0..r {
            let t = fi * r + dt;
            for y in 0..height {
                let (yi, dy) = (y / s, y % s);
                for x in 0..width {
                    let (xi, dx) = (x / s, x % s);
                    let base = ((t * height + y) * width + x) * 3;
                    for k in 0..3 {
                        let ch = ((dt * s + dy) * s + dx) * 3 + k;
                        out.data[((fi * c + ch) * h + yi) * w + xi] = src[base + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(lat: &LatentTensor, r: usize, s: usize) -> Result<VideoTensor> {
    if lat.c != 3 * r * s * s {
        return Err(Error::Shape(format!("latent has {} channels, patchify needs {}", lat.c, 3 * r * s * s)));
    }
    let (frames, height, width) = (lat.f * r, lat.h * s, lat.w * s);
    let mut v = VideoTensor::zeros(frames, height, width);
    let dst = v.data_mut();
    for fi in 0..lat.f {
        for dt in 0..r {
            let t = fi * r + dt;
            for y in 0..height {
                for x in 0..width {
                    let base = ((t * height + y) * width + x) * 3;
                    for k in 0..3 {
                        let ch = ((dt * s + y % s) * s + x % s) * 3 + k;
                        dst[base + k] = lat.at(fi, ch, y / s, x / s);
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Pointwise MLP autoencoder over patch vectors.
#[derive(Debug, Clone)]
struct PatchNet {
    ps: ParamStore<f32>,
    enc: [Linear; 3],
    dec: [Linear; 3],
}

struct MlpCache {
    inputs: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
}

impl PatchNet {
    fn new<R: Rng>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let (p, hid, c) = (cfg.patch_len(), cfg.hidden, cfg.latent_channels);
        let mut ps = ParamStore::new();
        let enc = [
            Linear::new(&mut ps, "enc.0", p, hid, rng),
            Linear::new(&mut ps, "enc.1", hid, hid, rng),
            Linear::new(&mut ps, "enc.2", hid, c, rng),
        ];
        let dec = [
            Linear::new(&mut ps, "dec.0", c, hid, rng),
            Linear::new(&mut ps, "dec.1", hid, hid, rng),
            Linear::zeroed(&mut ps, "dec.2", hid, p),
        ];
        Self { ps, enc, dec }
    }

    /// Runs a three-layer stack with SiLU between layers.
    fn stack(&self, layers: &[Linear; 3], x: &[f32], rows: usize, cache: Option<&mut MlpCache>) -> Vec<f32> {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let y = l.forward(&self.ps, &h, rows);
            inputs.push(h);
            if i + 1 < layers.len() {
                h = silu_forward(&y);
                pre.push(y);
            } else {
                h = y;
            }
        }
        if let Some(c) = cache {
            c.inputs.extend(inputs);
            c.pre.extend(pre);
        }
        h
    }

    fn stack_backward(
        &self,
        layers: &[Linear; 3],
        cache: &MlpCache,
        dy: Vec<f32>,
        rows: usize,
        grads: &mut crate::nn::Grads<f32>,
    ) -> Vec<f32> {
        let mut g = dy;
        for i in (0..layers.len()).rev() {
            if i + 1 < layers.len() {
                g = silu_backward(&cache.pre[i], &g);
            }
            g = layers[i].backward(&self.ps, &cache.inputs[i], &g, rows, grads, true).expect("dx requested");
        }
        g
    }

    fn encode_rows(&self, patches: &[f32], rows: usize) -> Vec<f32> {
        let centered: Vec<f32> = patches.iter().map(|v| v - 0.5).collect();
        self.stack(&self.enc, &centered, rows, None)
    }

    fn decode_rows(&self, z: &[f32], rows: usize) -> Vec<f32> {
        self.stack(&self.dec, z, rows, None).into_iter().map(|v| v + 0.5).collect()
    }

    /// Mean squared reconstruction error and its gradient.
    fn loss_and_grads(&self, patches: &[f32], rows: usize) -> (f64, crate::nn::Grads<f32>) {
        let centered: Vec<f32> = patches.iter().map(|v| v - 0.5).collect();
        let mut ec = MlpCache { inputs: Vec::new(), pre: Vec::new() };
        let z = self.stack(&self.enc, &centered, rows, Some(&mut ec));
        let mut dc = MlpCache { inputs: Vec::new(), pre: Vec::new() };
        let y = self.stack(&self.dec, &z, rows, Some(&mut dc));
        let n = y.len() as f32;
        let mut loss = 0.0f64;
        let dy: Vec<f32> = y
            .iter()
            .zip(&centered)
            .map(|(&a, &b)| {
                let d = a - b;
                loss += (d as f64) * (d as f64);
                2.0 * d / n
            })
            .collect();
        let mut grads = self.ps.zero_grads();
        let dz = self.stack_backward(&self.dec, &dc, dy, rows, &mut grads);
        self.stack_backward(&self.enc, &ec, dz, rows, &mut grads);
        (loss / n as f64, grads)
    }
}

/// A configured codec. Parameters are immutable once built.
#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    net: Option<PatchNet>,
}

impl Codec {
    pub fn patchify(r: usize, s: usize) -> Self {
        Self { cfg: CodecConfig::patchify(r, s), net: None }
    }

    /// Builds a codec; `Learned` mode starts from a seeded random init.
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = match cfg.mode {
            CodecMode::Patchify => None,
            CodecMode::Learned => Some(PatchNet::new(&cfg, &mut crate::rng::stream(seed, "codec/init"))),
        };
        Ok(Self { cfg, net })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn mode(&self) -> CodecMode {
        self.cfg.mode
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<LatentTensor> {
        let (r, s) = (self.cfg.temporal_ratio, self.cfg.spatial_ratio);
        let p = patchify(video, r, s)?;
        match &self.net {
            None => Ok(p),
            Some(net) => {
                let rows = p.f * p.h * p.w;
                let z = net.encode_rows(&p.to_rows(), rows);
                Ok(LatentTensor::from_rows(p.f, self.cfg.latent_channels, p.h, p.w, &z))
            }
        }
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        if latent.c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, codec expects {}",
                latent.c, self.cfg.latent_channels
            )));
        }
        let (r, s) = (self.cfg.temporal_ratio, self.cfg.spatial_ratio);
        match &self.net {
            None => unpatchify(latent, r, s),
            Some(net) => {
                let rows = latent.f * latent.h * latent.w;
                let y = net.decode_rows(&latent.to_rows(), rows);
                let p = LatentTensor::from_rows(latent.f, self.cfg.patch_len(), latent.h, latent.w, &y);
                let mut v = unpatchify(&p, r, s)?;
                v.clamp_unit();
                Ok(v)
            }
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut ck = Checkpoint::new("codec", meta);
        if let Some(net) = &self.net {
            ck.push_params("", &net.ps);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("codec")?;
        let cfg: CodecConfig = toml::from_str(&ck.meta).map_err(|e| Error::Malformed(format!("codec config: {e}")))?;
        let mut codec = Self::new(cfg, 0)?;
        if let Some(net) = &mut codec.net {
            ck.load_params("", &mut net.ps)?;
        }
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: u64,
    /// Patch vectors per step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 256, lr: 2e-3, seed: 0 }
    }
}

/// Trains a `Learned` codec on patch vectors drawn uniformly from `videos`.
pub fn train_codec(videos: &[VideoTensor], cfg: CodecConfig, hp: &CodecTrainConfig) -> Result<(Codec, Vec<LogLine>)> {
    if cfg.mode != CodecMode::Learned {
        return Err(Error::Config("train_codec requires a learned codec".into()));
    }
    if videos.is_empty() {
        return Err(Error::Invalid("no training videos".into()));
    }
    let mut codec = Codec::new(cfg, hp.seed)?;
    let p = cfg.patch_len();
    let mut pool = Vec::new();
    for v in videos {
        pool.extend(patchify(v, cfg.temporal_ratio, cfg.spatial_ratio)?.to_rows());
    }
    let n_rows = pool.len() / p;
    let mut rng = crate::rng::stream(hp.seed, "codec/batches");
    let net = codec.net.as_mut().expect("learned codec has a network");
    let mut opt = Adam::new(AdamConfig::default(), &net.ps);
    let start = Instant::now();
    let mut log = Vec::with_capacity(hp.steps as usize);
    let mut batch = vec![0.0f32; hp.batch * p];
    for step in 1..=hp.steps {
        for row in batch.chunks_exact_mut(p) {
            let i = rng.gen_range(0..n_rows);
            row.copy_from_slice(&pool[i * p..(i + 1) * p]);
        }
        let (loss, mut grads) = net.loss_and_grads(&batch, hp.batch);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step, batch: step, loss });
        }
        opt.update(&mut net.ps, &mut grads, hp.lr);
        log.push(LogLine { step, loss, lr: hp.lr, wall_time: start.elapsed().as_secs_f64() });
    }
    Ok((codec, log))
}

/// Reconstruction loss of the codec on a fixed patch batch (for diagnostics).
pub fn reconstruction_mse(codec: &Codec, video: &VideoTensor) -> Result<f64> {
    let rec = codec.decode(&codec.encode(video)?)?;
    let s: f64 = rec.data().iter().zip(video.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(s / rec.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_video(f: usize, h: usize, w: usize) -> VideoTensor {
        let data = (0..f * h * w * 3).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
        VideoTensor::from_vec(f, h, w, data).unwrap()
    }

    #[test]
    fn patchify_shape_and_round_trip() {
        let v = ramp_video(16, 64, 64);
        let lat = patchify(&v, 2, 2).unwrap();
        assert_eq!(lat.shape(), (8, 24, 32, 32));
        assert_eq!(unpatchify(&lat, 2, 2).unwrap(), v);
    }

    #[test]
    fn patchify_channel_layout() {
        let v = ramp_video(2, 4, 4);
        let lat = patchify(&v, 2, 2).unwrap();
        // Pixel (t=1, y=3, x=2, g) lands in cell (0, 1, 1), channel ((1*2+1)*2+0)*3+1.
        let src = v.data()[((4 + 3) * 4 + 2) * 3 + 1];
        assert_eq!(lat.at(0, 19, 1, 1), src);
    }

    #[test]
    fn zero_video_gives_zero_latent() {
        let lat = patchify(&VideoTensor::zeros(4, 8, 8), 2, 2).unwrap();
        assert!(lat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_shapes_rejected() {
        assert!(matches!(patchify(&VideoTensor::zeros(3, 8, 8), 2, 2), Err(Error::Shape(_))));
        assert!(matches!(patchify(&VideoTensor::zeros(4, 7, 8), 2, 2), Err(Error::Shape(_))));
        let codec = Codec::patchify(2, 2);
        assert!(codec.decode(&LatentTensor::zeros(1, 5, 2, 2)).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let lat = LatentTensor::from_vec(2, 3, 2, 2, (0..24).map(|i| i as f32).collect()).unwrap();
        let rows = lat.to_rows();
        assert_eq!(rows[..3], [0.0, 4.0, 8.0]);
        assert_eq!(LatentTensor::from_rows(2, 3, 2, 2, &rows), lat);
    }

    #[test]
    fn patchify_config_enforces_channels() {
        let mut cfg = CodecConfig::patchify(2, 2);
        cfg.latent_channels = 12;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learned_decode_is_clamped_and_deterministic() {
        let mut codec = Codec::new(CodecConfig::learned(2, 2, 6), 3).unwrap();
        let net = codec.net.as_mut().unwrap();
        let id = net.dec[2].b.unwrap();
        net.ps.get_mut(id).iter_mut().enumerate().for_each(|(i, b)| *b = if i % 2 == 0 { 5.0 } else { -5.0 });
        let v = ramp_video(4, 8, 8);
        let z1 = codec.encode(&v).unwrap();
        assert_eq!(z1, codec.encode(&v).unwrap());
        assert_eq!(z1.shape(), (2, 6, 4, 4));
        let d = codec.decode(&z1).unwrap();
        assert_eq!(d.shape(), (4, 8, 8));
        assert!(d.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::new(CodecConfig::learned(2, 2, 6), 5).unwrap();
        let ck = codec.to_checkpoint().unwrap();
        let back = Codec::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let v = ramp_video(2, 4, 4);
        assert_eq!(back.encode(&v).unwrap(), codec.encode(&v).unwrap());
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn training_loss_decreases_on_fixed_data() {
        let v = ramp_video(2, 4, 4);
        let hp = CodecTrainConfig { steps: 100, batch: 8, lr: 1e-3, seed: 1 };
        let (_, log) = train_codec(&[v], CodecConfig::learned(2, 2, 6), &hp).unwrap();
        let first: f64 = log[..10].iter().map(|l| l.loss).sum();
        let last: f64 = log[90..].iter().map(|l| l.loss).sum();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn loss_strictly_decreases_on_fixed_batch() {
        let cfg = CodecConfig::learned(2, 2, 6);
        let mut codec = Codec::new(cfg, 2).unwrap();
        let batch = patchify(&ramp_video(2, 8, 8), 2, 2).unwrap().to_rows();
        let rows = batch.len() / cfg.patch_len();
        let net = codec.net.as_mut().unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &net.ps);
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let (loss, mut g) = net.loss_and_grads(&batch, rows);
            assert!(loss < prev, "step {step}: {loss} >= {prev}");
            prev = loss;
            opt.update(&mut net.ps, &mut g, 1e-4);
        }
    }
}
