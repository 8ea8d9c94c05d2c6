use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{make_batch, ConditioningBundle};
use super::{Dit, NoiseSchedule};
use crate::codec::LatentTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of strided timesteps.
    pub steps: usize,
    /// Label guidance scale; 1 disables the unconditional pass.
    pub guidance: f64,
    /// 0 is deterministic DDIM, 1 matches ancestral sampling noise.
    pub eta: f64,
    /// Clamp predicted clean latents to `[-clip, clip]`.
    pub clip: Option<f32>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 2.0, eta: 1.0, clip: Some(1.0) }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.num_steps() {
            return Err(Error::Config(format!("sampling steps {} outside 1..={}", self.steps, schedule.num_steps())));
        }
        if !self.guidance.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("guidance must be finite and eta in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draws one latent. Equivalent to [`sample_batch`] with a single item and
/// the same generator.
pub fn sample(
    dit: &Dit<f32>,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LatentTensor> {
    let mut out = sample_with(dit, schedule, &[cond], cfg, std::slice::from_mut(rng))?;
    Ok(out.remove(0))
}

/// Samples every bundle in one batched loop; item `i` uses the generator
/// of `seeds[i]`.
pub fn sample_batch(
    dit: &Dit<f32>,
    schedule: &NoiseSchedule,
    conds: &[ConditioningBundle],
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<Vec<LatentTensor>> {
    if conds.len() != seeds.len() {
        return Err(Error::Invalid(format!("{} bundles but {} seeds", conds.len(), seeds.len())));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| crate::rng::stream(s, "diffusion/sample")).collect();
    let refs: Vec<&ConditioningBundle> = conds.iter().collect();
    sample_with(dit, schedule, &refs, cfg, &mut rngs)
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn sample_with(
    dit: &Dit<f32>,
    schedule: &NoiseSchedule,
    conds: &[&ConditioningBundle],
    cfg: &SampleConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<LatentTensor>> {
    cfg.validate(schedule)?;
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let dcfg = &dit.cfg;
    let labels: Vec<usize> = conds.iter().map(|c| c.label_token(dcfg)).collect();
    let guided = cfg.guidance != 1.0 && labels.iter().any(|&l| l != dcfg.null_label());
    let n = conds.len();
    let mut z: Vec<Vec<f32>> = conds.iter().zip(rngs.iter_mut()).map(|(c, r)| gaussian(c.c_s.data.len(), r)).collect();
    let ts = schedule.ddim_timesteps(cfg.steps)?;

    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = if guided {
            let mut zs: Vec<&[f32]> = z.iter().map(Vec::as_slice).collect();
            zs.extend(z.iter().map(Vec::as_slice));
            let mut cs = conds.to_vec();
            cs.extend_from_slice(conds);
            let mut ls = labels.clone();
            ls.extend(std::iter::repeat_n(dcfg.null_label(), n));
            let out = dit.forward(&make_batch(dcfg, &zs, &vec![t; 2 * n], &cs, &ls)?)?;
            let (cond, uncond) = out.split_at(out.len() / 2);
            let g = cfg.guidance as f32;
            cond.iter().zip(uncond).map(|(c, u)| u + g * (c - u)).collect::<Vec<f32>>()
        } else {
            let zs: Vec<&[f32]> = z.iter().map(Vec::as_slice).collect();
            dit.forward(&make_batch(dcfg, &zs, &vec![t; n], conds, &labels)?)?
        };

        let ab = schedule.alpha_bar(t);
        let abp = schedule.alpha_bar(t_prev);
        let (sa, s1a) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let sigma = if cfg.eta > 0.0 && t_prev > 0 {
            cfg.eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).sqrt()
        } else {
            0.0
        };
        let dir = ((1.0 - abp - sigma * sigma).max(0.0)).sqrt() as f32;
        let sap = abp.sqrt() as f32;
        let mut off = 0;
        for (zi, rng) in z.iter_mut().zip(rngs.iter_mut()) {
            let e = &eps[off..off + zi.len()];
            off += zi.len();
            let noise = (sigma > 0.0).then(|| gaussian(zi.len(), rng));
            for (k, v) in zi.iter_mut().enumerate() {
                let mut x0 = (*v - s1a * e[k]) / sa;
                let mut ek = e[k];
                if let Some(c) = cfg.clip {
                    let clipped = x0.clamp(-c, c);
                    if clipped != x0 {
                        x0 = clipped;
                        ek = (*v - sa * x0) / s1a;
                    }
                }
                *v = sap * x0 + dir * ek + noise.as_ref().map_or(0.0, |nz| sigma as f32 * nz[k]);
            }
        }
    }
    z.into_iter()
        .zip(conds)
        .map(|(data, c)| {
            let (f, ch, h, w) = c.c_s.shape();
            LatentTensor::from_vec(f, ch, h, w, data)
        })
        .collect()
}
