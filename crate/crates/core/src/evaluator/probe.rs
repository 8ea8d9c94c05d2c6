use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{silu_backward, silu_forward, Adam, AdamConfig, Grads, Linear, ParamId, ParamStore};
use crate::video::VideoTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Logit scale applied to cosine similarities.
    pub temperature: f64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 128, embed: 32, temperature: 10.0, steps: 8000, batch: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeMeta {
    cfg: ProbeConfig,
    labels: usize,
    shape: (usize, usize, usize),
}

/// Small video classifier whose penultimate features are compared with a
/// learned per-label embedding by cosine similarity.
#[derive(Debug, Clone)]
pub struct Probe {
    cfg: ProbeConfig,
    labels: usize,
    shape: (usize, usize, usize),
    ps: ParamStore<f32>,
    l1: Linear,
    l2: Linear,
    table: ParamId,
}

const HIST_LEVELS: usize = 4;
const HIST_BINS: usize = HIST_LEVELS * HIST_LEVELS * HIST_LEVELS;
const FINE_LEVELS: usize = 8;
const FINE_BINS: usize = FINE_LEVELS * FINE_LEVELS * FINE_LEVELS;

/// Spatially pooled frames, pooled absolute frame differences, then one
/// coarse color histogram per frame, then a log-count fine histogram of the
/// whole clip.
fn features(v: &VideoTensor) -> Vec<f32> {
    let (f, h, w) = v.shape();
    let k = (h / 8).max(1);
    let (ph, pw) = (h / k, w / k);
    let pool = |t: usize, diff: bool| {
        let mut out = vec![0.0f32; ph * pw * 3];
        let cur = v.frame_slice(t);
        let prev = if diff { Some(v.frame_slice(t - 1)) } else { None };
        for y in 0..ph * k {
            for x in 0..pw * k {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    let val = match prev {
                        Some(p) => (cur[i] - p[i]).abs() * 4.0,
                        None => cur[i] - 0.5,
                    };
                    out[((y / k) * pw + x / k) * 3 + c] += val / (k * k) as f32;
                }
            }
        }
        out
    };
    let mut feat = Vec::new();
    for t in 0..f {
        feat.extend(pool(t, false));
    }
    for t in 1..f {
        feat.extend(pool(t, true));
    }
    let level = |c: f32| ((c.clamp(0.0, 1.0) * HIST_LEVELS as f32) as usize).min(HIST_LEVELS - 1);
    let scale = 4.0 / (h * w) as f32;
    for t in 0..f {
        let mut hist = [0.0f32; HIST_BINS];
        for px in v.frame_slice(t).chunks_exact(3) {
            hist[(level(px[0]) * HIST_LEVELS + level(px[1])) * HIST_LEVELS + level(px[2])] += scale;
        }
        feat.extend(hist);
    }
    let fine = |c: f32| ((c.clamp(0.0, 1.0) * FINE_LEVELS as f32) as usize).min(FINE_LEVELS - 1);
    let mut counts = [0.0f32; FINE_BINS];
    for px in v.data().chunks_exact(3) {
        counts[(fine(px[0]) * FINE_LEVELS + fine(px[1])) * FINE_LEVELS + fine(px[2])] += 1.0;
    }
    feat.extend(counts.iter().map(|c| c.ln_1p() * 0.25));
    feat
}

fn feature_len(shape: (usize, usize, usize)) -> usize {
    let (f, h, w) = shape;
    let k = (h / 8).max(1);
    (2 * f - 1) * (h / k) * (w / k) * 3 + f * HIST_BINS + FINE_BINS
}

fn normalize(v: &[f32]) -> (Vec<f32>, f32) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-8);
    (v.iter().map(|x| x / n).collect(), n)
}

/// `d/dv` of `v / |v|` applied to `g`, given the unit vector and norm.
fn normalize_backward(unit: &[f32], norm: f32, g: &[f32]) -> Vec<f32> {
    let dot: f32 = unit.iter().zip(g).map(|(u, gi)| u * gi).sum();
    unit.iter().zip(g).map(|(u, gi)| (gi - u * dot) / norm).collect()
}

impl Probe {
    fn build(cfg: ProbeConfig, labels: usize, shape: (usize, usize, usize)) -> Self {
        let mut rng = crate::rng::stream(cfg.seed, "probe/init");
        let mut ps = ParamStore::new();
        let l1 = Linear::new(&mut ps, "l1", feature_len(shape), cfg.hidden, &mut rng);
        let l2 = Linear::new(&mut ps, "l2", cfg.hidden, cfg.embed, &mut rng);
        let table = ps.normal("labels", &[labels, cfg.embed], 1.0, &mut rng);
        Self { cfg, labels, shape, ps, l1, l2, table }
    }

    pub fn num_labels(&self) -> usize {
        self.labels
    }

    fn check_video(&self, v: &VideoTensor) -> Result<()> {
        if v.shape() != self.shape {
            return Err(Error::Shape(format!("probe expects {:?} videos, got {:?}", self.shape, v.shape())));
        }
        Ok(())
    }

    /// Penultimate embedding of a video.
    pub fn embed(&self, v: &VideoTensor) -> Result<Vec<f32>> {
        self.check_video(v)?;
        let x = features(v);
        let a = silu_forward(&self.l1.forward(&self.ps, &x, 1));
        Ok(self.l2.forward(&self.ps, &a, 1))
    }

    pub fn label_embedding(&self, label: usize) -> Result<&[f32]> {
        if label >= self.labels {
            return Err(Error::Invalid(format!("label {label} outside probe vocabulary of {}", self.labels)));
        }
        let e = self.cfg.embed;
        Ok(&self.ps.get(self.table)[label * e..(label + 1) * e])
    }

    /// Cosine similarity between the video embedding and a label embedding.
    pub fn similarity(&self, v: &VideoTensor, label: usize) -> Result<f64> {
        let l = self.label_embedding(label)?.to_vec();
        let (e, _) = normalize(&self.embed(v)?);
        let (l, _) = normalize(&l);
        Ok(e.iter().zip(&l).map(|(a, b)| (a * b) as f64).sum::<f64>().clamp(-1.0, 1.0))
    }

    /// Most similar label.
    pub fn classify(&self, v: &VideoTensor) -> Result<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.labels {
            let s = self.similarity(v, k)?;
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok(best.0)
    }

    /// Cross-entropy over scaled cosine logits, with gradients.
    fn loss_and_grads(&self, feats: &[&[f32]], labels: &[usize]) -> (f64, Grads<f32>) {
        let n = feats.len();
        let (e_dim, nl) = (self.cfg.embed, self.labels);
        let s = self.cfg.temperature as f32;
        let x: Vec<f32> = feats.concat();
        let pre = self.l1.forward(&self.ps, &x, n);
        let act = silu_forward(&pre);
        let emb = self.l2.forward(&self.ps, &act, n);
        let table = self.ps.get(self.table);
        let units: Vec<(Vec<f32>, f32)> = (0..nl).map(|k| normalize(&table[k * e_dim..(k + 1) * e_dim])).collect();
        let mut grads = self.ps.zero_grads();
        let mut d_emb = vec![0.0f32; n * e_dim];
        let mut d_units = vec![vec![0.0f32; e_dim]; nl];
        let mut loss = 0.0;
        for i in 0..n {
            let (eu, en) = normalize(&emb[i * e_dim..(i + 1) * e_dim]);
            let logits: Vec<f32> =
                units.iter().map(|(u, _)| s * eu.iter().zip(u).map(|(a, b)| a * b).sum::<f32>()).collect();
            let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += (m + z.ln() - logits[labels[i]]) as f64;
            let mut d_eu = vec![0.0f32; e_dim];
            for k in 0..nl {
                let g = ((logits[k] - m).exp() / z - if k == labels[i] { 1.0 } else { 0.0 }) / n as f32;
                for j in 0..e_dim {
                    d_eu[j] += s * g * units[k].0[j];
                    d_units[k][j] += s * g * eu[j];
                }
            }
            d_emb[i * e_dim..(i + 1) * e_dim].copy_from_slice(&normalize_backward(&eu, en, &d_eu));
        }
        {
            let gt = grads.get_mut(self.table);
            for k in 0..nl {
                let d = normalize_backward(&units[k].0, units[k].1, &d_units[k]);
                gt[k * e_dim..(k + 1) * e_dim].copy_from_slice(&d);
            }
        }
        let d_act = self.l2.backward(&self.ps, &act, &d_emb, n, &mut grads, true).expect("dx requested");
        let d_pre = silu_backward(&pre, &d_act);
        self.l1.backward(&self.ps, &x, &d_pre, n, &mut grads, false);
        (loss / n as f64, grads)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ProbeMeta { cfg: self.cfg, labels: self.labels, shape: self.shape };
        let mut ck = Checkpoint::new("probe", toml::to_string(&meta).map_err(|e| Error::Malformed(e.to_string()))?);
        ck.push_params("", &self.ps);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("probe")?;
        let meta: ProbeMeta = toml::from_str(&ck.meta).map_err(|e| Error::Malformed(format!("probe metadata: {e}")))?;
        let mut p = Self::build(meta.cfg, meta.labels, meta.shape);
        ck.load_params("", &mut p.ps)?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains a label probe on `(video, label)` pairs.
pub fn train_probe(videos: &[&VideoTensor], labels: &[usize], num_labels: usize, cfg: ProbeConfig) -> Result<Probe> {
    if videos.is_empty() || videos.len() != labels.len() {
        return Err(Error::Invalid("probe needs one label per video and at least one video".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::Invalid(format!("label {l} outside vocabulary of {num_labels}")));
    }
    let shape = videos[0].shape();
    let mut probe = Probe::build(cfg, num_labels, shape);
    for v in videos {
        probe.check_video(v)?;
    }
    let feats: Vec<Vec<f32>> = videos.iter().map(|v| features(v)).collect();
    let mut opt = Adam::new(AdamConfig { clip_norm: Some(5.0), ..Default::default() }, &probe.ps);
    let mut rng = crate::rng::stream(cfg.seed, "probe/batches");
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..feats.len())).collect();
        let fs: Vec<&[f32]> = idx.iter().map(|&i| feats[i].as_slice()).collect();
        let ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, mut grads) = probe.loss_and_grads(&fs, &ls);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, batch: step, loss });
        }
        opt.update(&mut probe.ps, &mut grads, cfg.lr);
    }
    Ok(probe)
}
