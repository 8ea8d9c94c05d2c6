use super::{ConditioningMode, DenoiserConfig, Dit, DitBatch};
use crate::codec::LatentTensor;
use crate::error::{Error, Result};

/// Everything the denoiser is conditioned on besides `z_t` and `t`.
///
/// Latent members live in diffusion space (already scaled). The hand slot
/// holds a latent in the pixel-aligned modes and parameters in the
/// modulation modes; pretraining bundles leave both empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub c_s: LatentTensor,
    pub c_h: Option<LatentTensor>,
    /// `f x 1 x h x w`, 1 where content is known.
    pub mask: LatentTensor,
    /// `F x 4` per-frame hand parameters.
    pub hand_params: Option<Vec<[f32; 4]>>,
    /// `None` is the null label.
    pub label: Option<usize>,
}

impl ConditioningBundle {
    pub fn full_mask(f: usize, h: usize, w: usize) -> LatentTensor {
        LatentTensor { f, c: 1, h, w, data: vec![1.0; f * h * w] }
    }

    /// Checks the bundle against a denoiser configuration and returns the
    /// latent shape it conditions.
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<(usize, usize, usize, usize)> {
        let mode = cfg.conditioning_mode;
        let mismatch = |reason: &str| Error::ModeMismatch { mode: mode.name().into(), reason: reason.into() };
        let shape = self.c_s.shape();
        if shape.1 != cfg.latent_channels {
            return Err(Error::Shape(format!(
                "static latent has {} channels, denoiser expects {}",
                shape.1, cfg.latent_channels
            )));
        }
        if mode.uses_hand_latent() {
            if self.hand_params.is_some() {
                return Err(mismatch("pixel-aligned modes take a hand latent, not hand parameters"));
            }
        } else if self.c_h.is_some() {
            return Err(mismatch("modulation modes take hand parameters, not a hand latent"));
        }
        if let Some(ch) = &self.c_h {
            if ch.shape() != shape {
                return Err(Error::Shape(format!("hand latent {:?} vs static latent {:?}", ch.shape(), shape)));
            }
        }
        if self.mask.shape() != (shape.0, 1, shape.2, shape.3) {
            return Err(Error::Shape(format!("mask {:?} does not match latent grid {:?}", self.mask.shape(), shape)));
        }
        if self.mask.data.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        if let Some(hp) = &self.hand_params {
            if hp.is_empty() || (mode == ConditioningMode::ModulatePerframe && hp.len() % shape.0 != 0) {
                return Err(Error::Shape(format!("{} hand parameter frames for {} latent frames", hp.len(), shape.0)));
            }
        }
        if let Some(l) = self.label {
            if l >= cfg.label_vocab {
                return Err(Error::Invalid(format!("label {l} outside vocabulary of {}", cfg.label_vocab)));
            }
        }
        Ok(shape)
    }

    /// `f x (2c + 1) x h x w` channel stack: static, hand (or zeros), mask.
    pub fn cond_channels(&self) -> Vec<f32> {
        let (f, c, h, w) = self.c_s.shape();
        let hw = h * w;
        let mut out = Vec::with_capacity(f * (2 * c + 1) * hw);
        for fi in 0..f {
            out.extend_from_slice(&self.c_s.data[fi * c * hw..(fi + 1) * c * hw]);
            match &self.c_h {
                Some(ch) => out.extend_from_slice(&ch.data[fi * c * hw..(fi + 1) * c * hw]),
                None => out.extend(std::iter::repeat_n(0.0, c * hw)),
            }
            out.extend_from_slice(&self.mask.data[fi * hw..(fi + 1) * hw]);
        }
        out
    }

    pub fn label_token(&self, cfg: &DenoiserConfig) -> usize {
        self.label.unwrap_or(cfg.null_label())
    }
}

/// Stacks items into a denoiser batch. All items must share one shape and
/// agree on whether hand parameters are present.
pub fn make_batch(
    cfg: &DenoiserConfig,
    z_t: &[&[f32]],
    t: &[usize],
    bundles: &[&ConditioningBundle],
    labels: &[usize],
) -> Result<DitBatch<f32>> {
    let n = bundles.len();
    if n == 0 || z_t.len() != n || t.len() != n || labels.len() != n {
        return Err(Error::Invalid("batch components differ in length or are empty".into()));
    }
    let shape = bundles[0].validate(cfg)?;
    let (f, _, h, w) = shape;
    let mut zs = Vec::with_capacity(n * z_t[0].len());
    let mut cond = Vec::new();
    let with_hand = bundles[0].hand_params.is_some() && !cfg.conditioning_mode.uses_hand_latent();
    let frames = bundles[0].hand_params.as_ref().map_or(0, Vec::len);
    let mut hand = Vec::new();
    for (i, b) in bundles.iter().enumerate() {
        if b.validate(cfg)? != shape {
            return Err(Error::Shape("batch items differ in latent shape".into()));
        }
        if z_t[i].len() != b.c_s.data.len() {
            return Err(Error::Shape("noisy latent size differs from conditioning".into()));
        }
        zs.extend_from_slice(z_t[i]);
        cond.extend(b.cond_channels());
        match (&b.hand_params, with_hand) {
            (Some(hp), true) if hp.len() == frames => hand.extend(hp.iter().flatten().copied()),
            (None, false) => {}
            _ => return Err(Error::Invalid("batch items disagree on hand parameters".into())),
        }
    }
    Ok(DitBatch {
        n,
        f,
        h,
        w,
        z_t: zs,
        cond,
        t: t.to_vec(),
        labels: labels.to_vec(),
        hand: with_hand.then_some((hand, frames)),
    })
}

/// `eps_theta(z_t, t | bundle)` for a single latent.
pub fn predict_noise(dit: &Dit<f32>, z_t: &LatentTensor, t: usize, cond: &ConditioningBundle) -> Result<LatentTensor> {
    if z_t.shape() != cond.c_s.shape() {
        return Err(Error::Shape(format!("z_t {:?} vs conditioning {:?}", z_t.shape(), cond.c_s.shape())));
    }
    let b = make_batch(&dit.cfg, &[&z_t.data], &[t], &[cond], &[cond.label_token(&dit.cfg)])?;
    let out = dit.forward(&b)?;
    let (f, c, h, w) = z_t.shape();
    LatentTensor::from_vec(f, c, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: ConditioningMode) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            token_patch: 2,
            model_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            label_vocab: 3,
            conditioning_mode: mode,
            label_dropout: 0.0,
        }
    }

    fn bundle(hand_latent: bool, params: bool) -> ConditioningBundle {
        let lat = LatentTensor::from_vec(2, 2, 2, 2, (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        ConditioningBundle {
            c_s: lat.clone(),
            c_h: hand_latent.then(|| lat.clone()),
            mask: ConditioningBundle::full_mask(2, 2, 2),
            hand_params: params.then(|| vec![[0.0, 0.0, 1.0, 1.0]; 4]),
            label: Some(1),
        }
    }

    #[test]
    fn mode_mismatch_detected() {
        assert!(matches!(
            bundle(false, true).validate(&cfg(ConditioningMode::MeshRender)),
            Err(Error::ModeMismatch { .. })
        ));
        assert!(matches!(
            bundle(true, false).validate(&cfg(ConditioningMode::ModulateGlobal)),
            Err(Error::ModeMismatch { .. })
        ));
        assert!(bundle(true, false).validate(&cfg(ConditioningMode::Mask)).is_ok());
        assert!(bundle(false, true).validate(&cfg(ConditioningMode::ModulatePerframe)).is_ok());
        assert!(bundle(false, false).validate(&cfg(ConditioningMode::MeshRender)).is_ok());
    }

    #[test]
    fn channel_stack_layout() {
        let b = bundle(false, false);
        let stack = b.cond_channels();
        assert_eq!(stack.len(), 2 * 5 * 4);
        assert_eq!(&stack[..8], &b.c_s.data[..8]);
        assert!(stack[8..16].iter().all(|&v| v == 0.0));
        assert!(stack[16..20].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn null_label_gives_finite_output_of_latent_shape() {
        for mode in ConditioningMode::ALL {
            let c = cfg(mode);
            let mut dit = Dit::<f32>::new(c, 1).unwrap();
            dit.randomize(0.1, &mut crate::rng::stream(0, "t"));
            let mut b = bundle(mode.uses_hand_latent(), !mode.uses_hand_latent());
            b.label = None;
            let z = b.c_s.clone();
            let eps = predict_noise(&dit, &z, 10, &b).unwrap();
            assert_eq!(eps.shape(), z.shape());
            assert!(eps.data.iter().all(|v| v.is_finite()));
        }
    }
}
