//! Diffusion transformer noise predictor with adaptive layer-norm
//! modulation and a hand-written backward pass.
//!
//! Token layout: the noisy latent and the conditioning channels are
//! concatenated per latent cell, each latent frame is cut into `p x p`
//! patches, and tokens are ordered `(sample, frame, row, col)`. Every
//! modulation vector is per `(sample, latent frame)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_backward, attention_forward, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward,
    silu_backward, silu_forward, AttentionCache, Grads, LayerNormCache, Linear, ParamId, ParamStore, Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Latent of the rendered hand video, concatenated on channels.
    MeshRender,
    /// Latent of the binary hand silhouette video, concatenated on channels.
    Mask,
    /// Hand parameters pooled over the whole clip, injected by modulation.
    ModulateGlobal,
    /// Hand parameters pooled per latent frame, injected by modulation.
    ModulatePerframe,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [Self::MeshRender, Self::Mask, Self::ModulateGlobal, Self::ModulatePerframe];

    pub fn uses_hand_latent(self) -> bool {
        matches!(self, Self::MeshRender | Self::Mask)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MeshRender => "mesh_render",
            Self::Mask => "mask",
            Self::ModulateGlobal => "modulate_global",
            Self::ModulatePerframe => "modulate_perframe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels of the diffusion latent (and of each conditioning latent).
    pub latent_channels: usize,
    pub token_patch: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of real labels; index `label_vocab` is the null token.
    pub label_vocab: usize,
    pub conditioning_mode: ConditioningMode,
    pub label_dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 24,
            token_patch: 4,
            model_dim: 128,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            label_vocab: 5,
            conditioning_mode: ConditioningMode::MeshRender,
            label_dropout: 0.1,
        }
    }
}

impl DenoiserConfig {
    /// Denoiser sized for [`crate::worldsim::WorldConfig::compact`] worlds
    /// under a 2x2x2 patchify codec: one token per latent cell.
    pub fn compact() -> Self {
        Self { token_patch: 1, depth: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(8) {
            return bad(format!("model_dim {} must be a positive multiple of 8", self.model_dim));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.token_patch == 0 || self.latent_channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("token_patch, latent_channels, depth and mlp_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return bad(format!("label_dropout {} outside [0, 1]", self.label_dropout));
        }
        Ok(())
    }

    pub fn null_label(&self) -> usize {
        self.label_vocab
    }

    /// Conditioning channels per latent cell: static, hand, mask.
    pub fn cond_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    fn token_in(&self) -> usize {
        self.token_patch * self.token_patch * (self.latent_channels + self.cond_channels())
    }

    fn token_out(&self) -> usize {
        self.token_patch * self.token_patch * self.latent_channels
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Raw batch in denoiser layout.
#[derive(Debug, Clone)]
pub struct DitBatch<T> {
    pub n: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    /// `n x f x c x h x w`.
    pub z_t: Vec<T>,
    /// `n x f x (2c + 1) x h x w`: static latent, hand latent (or zeros), mask.
    pub cond: Vec<T>,
    pub t: Vec<usize>,
    /// Null token is `label_vocab`.
    pub labels: Vec<usize>,
    /// `n x frames x 4` hand parameters and the frame count.
    pub hand: Option<(Vec<T>, usize)>,
}

impl<T: Scalar> DitBatch<T> {
    pub fn latent_len(&self, c: usize) -> usize {
        self.f * c * self.h * self.w
    }
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    m: Vec<T>,
    am: Vec<T>,
    qkv: Vec<T>,
    attn: AttentionCache<T>,
    att: Vec<T>,
    o: Vec<T>,
    ln2: LayerNormCache<T>,
    mm: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    v: Vec<T>,
}

struct Cache<T> {
    tokens: Vec<T>,
    temb_in: Vec<T>,
    t_pre: Vec<T>,
    t_act: Vec<T>,
    hand: Option<HandCache<T>>,
    c: Vec<T>,
    sc: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LayerNormCache<T>,
    mf: Vec<T>,
    fm: Vec<T>,
}

struct HandCache<T> {
    frames: usize,
    input: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Geometry of one forward pass.
#[derive(Debug, Clone, Copy)]
struct Geo {
    n: usize,
    f: usize,
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
    /// Tokens per latent frame.
    tp: usize,
    /// Tokens per sample.
    seq: usize,
}

impl Geo {
    fn rows(&self) -> usize {
        self.n * self.seq
    }

    fn cond_rows(&self) -> usize {
        self.n * self.f
    }
}

#[derive(Debug, Clone)]
pub struct Dit<T> {
    pub cfg: DenoiserConfig,
    pub params: ParamStore<T>,
    embed: Linear,
    t1: Linear,
    t2: Linear,
    label: ParamId,
    h1: Linear,
    h2: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    final_out: Linear,
}

impl<T: Scalar> Dit<T> {
    /// Builds a freshly initialized denoiser. Modulation and output layers
    /// start at zero so every block begins as the identity.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "dit/init");
        let d = cfg.model_dim;
        let mut ps = ParamStore::new();
        let embed = Linear::new(&mut ps, "embed", cfg.token_in(), d, &mut rng);
        let t1 = Linear::new(&mut ps, "time.0", d, d, &mut rng);
        let t2 = Linear::new(&mut ps, "time.1", d, d, &mut rng);
        let label = ps.normal("label", &[cfg.label_vocab + 1, d], 0.02, &mut rng);
        let h1 = Linear::new(&mut ps, "hand.0", 4, d, &mut rng);
        let h2 = Linear::new(&mut ps, "hand.1", d, d, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                ada: Linear::zeroed(&mut ps, &format!("block{i}.ada"), d, 6 * d),
                qkv: Linear::new(&mut ps, &format!("block{i}.qkv"), d, 3 * d, &mut rng),
                proj: Linear::new(&mut ps, &format!("block{i}.proj"), d, d, &mut rng),
                fc1: Linear::new(&mut ps, &format!("block{i}.fc1"), d, cfg.mlp_ratio * d, &mut rng),
                fc2: Linear::new(&mut ps, &format!("block{i}.fc2"), cfg.mlp_ratio * d, d, &mut rng),
            })
            .collect();
        let final_ada = Linear::zeroed(&mut ps, "final.ada", d, 2 * d);
        let final_out = Linear::zeroed(&mut ps, "final.out", d, cfg.token_out());
        Ok(Self { cfg, params: ps, embed, t1, t2, label, h1, h2, blocks, final_ada, final_out })
    }

    /// Same architecture with a different parameter store (e.g. another
    /// precision). Names and shapes must match.
    pub fn with_params<U: Scalar>(&self, params: ParamStore<U>) -> Dit<U> {
        assert_eq!(params.len(), self.params.len(), "parameter count differs");
        Dit {
            cfg: self.cfg,
            params,
            embed: self.embed,
            t1: self.t1,
            t2: self.t2,
            label: self.label,
            h1: self.h1,
            h2: self.h2,
            blocks: self.blocks.clone(),
            final_ada: self.final_ada,
            final_out: self.final_out,
        }
    }

    /// Overwrites every parameter with Gaussian noise; used to exercise all
    /// gradient paths, which the zero init leaves partly inactive.
    pub fn randomize<R: Rng>(&mut self, std: f64, rng: &mut R) {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        for t in self.params.tensors_mut() {
            for v in &mut t.data {
                *v = T::from_f64(dist.sample(rng));
            }
        }
    }

    fn geometry(&self, b: &DitBatch<T>) -> Result<Geo> {
        let p = self.cfg.token_patch;
        let c = self.cfg.latent_channels;
        if !b.h.is_multiple_of(p) || !b.w.is_multiple_of(p) {
            return Err(Error::Shape(format!("latent grid {}x{} not divisible by patch {p}", b.h, b.w)));
        }
        let per = b.f * b.h * b.w;
        if b.z_t.len() != b.n * per * c {
            return Err(Error::Shape(format!("z_t has {} values, expected {}", b.z_t.len(), b.n * per * c)));
        }
        if b.cond.len() != b.n * per * self.cfg.cond_channels() {
            return Err(Error::Shape("conditioning buffer size".into()));
        }
        if b.t.len() != b.n || b.labels.len() != b.n {
            return Err(Error::Shape("timestep/label count differs from batch".into()));
        }
        if let Some(&l) = b.labels.iter().find(|&&l| l > self.cfg.label_vocab) {
            return Err(Error::Invalid(format!("label {l} outside vocabulary")));
        }
        if let Some((hp, frames)) = &b.hand {
            if hp.len() != b.n * frames * 4 || *frames == 0 {
                return Err(Error::Shape("hand parameter buffer size".into()));
            }
            if self.cfg.conditioning_mode == ConditioningMode::ModulatePerframe && frames % b.f != 0 {
                return Err(Error::Shape(format!("{frames} hand frames do not pool onto {} latent frames", b.f)));
            }
        }
        let (gh, gw) = (b.h / p, b.w / p);
        Ok(Geo { n: b.n, f: b.f, h: b.h, w: b.w, gh, gw, tp: gh * gw, seq: b.f * gh * gw })
    }

    fn tokenize(&self, b: &DitBatch<T>, g: &Geo) -> Vec<T> {
        let p = self.cfg.token_patch;
        let c = self.cfg.latent_channels;
        let cc = self.cfg.cond_channels();
        let din = self.cfg.token_in();
        let hw = g.h * g.w;
        let mut tokens = vec![T::zero(); g.rows() * din];
        for s in 0..g.n {
            for fi in 0..g.f {
                let zbase = (s * g.f + fi) * c * hw;
                let cbase = (s * g.f + fi) * cc * hw;
                for ty in 0..g.gh {
                    for tx in 0..g.gw {
                        let row = s * g.seq + fi * g.tp + ty * g.gw + tx;
                        let out = &mut tokens[row * din..(row + 1) * din];
                        for ch in 0..c + cc {
                            for dy in 0..p {
                                for dx in 0..p {
                                    let pix = (ty * p + dy) * g.w + tx * p + dx;
                                    let v = if ch < c {
                                        b.z_t[zbase + ch * hw + pix]
                                    } else {
                                        b.cond[cbase + (ch - c) * hw + pix]
                                    };
                                    out[(ch * p + dy) * p + dx] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        tokens
    }

    fn untokenize(&self, y: &[T], g: &Geo) -> Vec<T> {
        let p = self.cfg.token_patch;
        let c = self.cfg.latent_channels;
        let dout = self.cfg.token_out();
        let hw = g.h * g.w;
        let mut out = vec![T::zero(); g.n * g.f * c * hw];
        for s in 0..g.n {
            for fi in 0..g.f {
                let base = (s * g.f + fi) * c * hw;
                for ty in 0..g.gh {
                    for tx in 0..g.gw {
                        let row = s * g.seq + fi * g.tp + ty * g.gw + tx;
                        let tok = &y[row * dout..(row + 1) * dout];
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    let pix = (ty * p + dy) * g.w + tx * p + dx;
                                    out[base + ch * hw + pix] = tok[(ch * p + dy) * p + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Inverse of `untokenize` for gradients.
    fn tokenize_output_grad(&self, d: &[T], g: &Geo) -> Vec<T> {
        let p = self.cfg.token_patch;
        let c = self.cfg.latent_channels;
        let dout = self.cfg.token_out();
        let hw = g.h * g.w;
        let mut tok = vec![T::zero(); g.rows() * dout];
        for s in 0..g.n {
            for fi in 0..g.f {
                let base = (s * g.f + fi) * c * hw;
                for ty in 0..g.gh {
                    for tx in 0..g.gw {
                        let row = s * g.seq + fi * g.tp + ty * g.gw + tx;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    let pix = (ty * p + dy) * g.w + tx * p + dx;
                                    tok[row * dout + (ch * p + dy) * p + dx] = d[base + ch * hw + pix];
                                }
                            }
                        }
                    }
                }
            }
        }
        tok
    }

    fn conditioning(&self, b: &DitBatch<T>, g: &Geo) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Option<HandCache<T>>) {
        let d = self.cfg.model_dim;
        let ps = &self.params;
        let temb_in: Vec<T> = b.t.iter().flat_map(|&t| timestep_embedding::<T>(t, d)).collect();
        let t_pre = self.t1.forward(ps, &temb_in, g.n);
        let t_act = silu_forward(&t_pre);
        let temb = self.t2.forward(ps, &t_act, g.n);
        let table = ps.get(self.label);

        let use_hand = !self.cfg.conditioning_mode.uses_hand_latent();
        let hand = match (&b.hand, use_hand) {
            (Some((hp, frames)), true) => {
                let pre = self.h1.forward(ps, hp, g.n * frames);
                let act = silu_forward(&pre);
                Some(HandCache { frames: *frames, input: hp.clone(), pre, act })
            }
            _ => None,
        };
        let hand_emb = hand.as_ref().map(|hc| self.h2.forward(ps, &hc.act, g.n * hc.frames));

        let mut c = vec![T::zero(); g.cond_rows() * d];
        for s in 0..g.n {
            let lab = &table[b.labels[s] * d..(b.labels[s] + 1) * d];
            for fi in 0..g.f {
                let row = &mut c[(s * g.f + fi) * d..(s * g.f + fi + 1) * d];
                for j in 0..d {
                    row[j] = temb[s * d + j] + lab[j];
                }
                if let (Some(he), Some(hc)) = (&hand_emb, &hand) {
                    let (lo, hi) = self.hand_group(fi, hc.frames, g.f);
                    let inv = T::one() / T::from_f64((hi - lo) as f64);
                    for t in lo..hi {
                        let e = &he[(s * hc.frames + t) * d..(s * hc.frames + t + 1) * d];
                        for j in 0..d {
                            row[j] += e[j] * inv;
                        }
                    }
                }
            }
        }
        (c, temb_in, t_pre, t_act, hand)
    }

    /// Hand frames pooled into the modulation of latent frame `fi`.
    fn hand_group(&self, fi: usize, frames: usize, f: usize) -> (usize, usize) {
        match self.cfg.conditioning_mode {
            ConditioningMode::ModulatePerframe => {
                let r = frames / f;
                (fi * r, (fi + 1) * r)
            }
            _ => (0, frames),
        }
    }

    fn run(&self, b: &DitBatch<T>, keep: bool) -> Result<(Vec<T>, Option<Cache<T>>)> {
        let g = self.geometry(b)?;
        let d = self.cfg.model_dim;
        let ps = &self.params;
        let rows = g.rows();
        let tokens = self.tokenize(b, &g);
        let mut h = self.embed.forward(ps, &tokens, rows);
        let pos = position_embedding::<T>(g.f, g.gh, g.gw, d);
        for row in h.chunks_exact_mut(g.seq * d) {
            for (x, &p) in row.iter_mut().zip(&pos) {
                *x += p;
            }
        }
        let (c, temb_in, t_pre, t_act, hand) = self.conditioning(b, &g);
        let sc = silu_forward(&c);
        let cr = g.cond_rows();

        let mut bcaches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let m = blk.ada.forward(ps, &sc, cr);
            let ln1 = layer_norm_forward(&h, d);
            let am = modulate(&ln1.xhat, &m, 6 * d, 0, d, g.tp, d);
            let qkv = blk.qkv.forward(ps, &am, rows);
            let (att, attn) = attention_forward(&qkv, g.n, g.seq, d, self.cfg.heads);
            let o = blk.proj.forward(ps, &att, rows);
            gate_add(&mut h, &o, &m, 6 * d, 2 * d, g.tp, d);
            let ln2 = layer_norm_forward(&h, d);
            let mm = modulate(&ln2.xhat, &m, 6 * d, 3 * d, 4 * d, g.tp, d);
            let u = blk.fc1.forward(ps, &mm, rows);
            let gl = gelu_forward(&u);
            let v = blk.fc2.forward(ps, &gl, rows);
            gate_add(&mut h, &v, &m, 6 * d, 5 * d, g.tp, d);
            if keep {
                bcaches.push(BlockCache { ln1, m, am, qkv, attn, att, o, ln2, mm, u, g: gl, v });
            }
        }
        let mf = self.final_ada.forward(ps, &sc, cr);
        let lnf = layer_norm_forward(&h, d);
        let fm = modulate(&lnf.xhat, &mf, 2 * d, 0, d, g.tp, d);
        let y = self.final_out.forward(ps, &fm, rows);
        let out = self.untokenize(&y, &g);
        let cache = keep.then_some(Cache { tokens, temb_in, t_pre, t_act, hand, c, sc, blocks: bcaches, lnf, mf, fm });
        Ok((out, cache))
    }

    /// Predicted noise, `n x f x c x h x w`.
    pub fn forward(&self, b: &DitBatch<T>) -> Result<Vec<T>> {
        Ok(self.run(b, false)?.0)
    }

    /// Mean squared error against `target` and its parameter gradients.
    pub fn loss_and_grads(&self, b: &DitBatch<T>, target: &[T]) -> Result<(f64, Grads<T>)> {
        let (out, cache) = self.run(b, true)?;
        if target.len() != out.len() {
            return Err(Error::Shape("target size differs from prediction".into()));
        }
        let cache = cache.expect("cache kept");
        let n = out.len() as f64;
        let scale = T::from_f64(2.0 / n);
        let mut loss = 0.0;
        let dout: Vec<T> = out
            .iter()
            .zip(target)
            .map(|(&o, &t)| {
                let e = o - t;
                loss += e.to_f64() * e.to_f64();
                e * scale
            })
            .collect();
        let g = self.geometry(b)?;
        let grads = self.backward(b, &g, &cache, &dout);
        Ok((loss / n, grads))
    }

    /// Mean squared error only.
    pub fn loss(&self, b: &DitBatch<T>, target: &[T]) -> Result<f64> {
        let out = self.forward(b)?;
        let s: f64 = out.iter().zip(target).map(|(&o, &t)| (o - t).to_f64().powi(2)).sum();
        Ok(s / out.len() as f64)
    }

    fn backward(&self, b: &DitBatch<T>, g: &Geo, cache: &Cache<T>, dout: &[T]) -> Grads<T> {
        let d = self.cfg.model_dim;
        let ps = &self.params;
        let rows = g.rows();
        let cr = g.cond_rows();
        let mut grads = ps.zero_grads();
        let mut dsc = vec![T::zero(); cr * d];

        let dy = self.tokenize_output_grad(dout, g);
        let dfm = self.final_out.backward(ps, &cache.fm, &dy, rows, &mut grads, true).expect("dx");
        let mut dmf = vec![T::zero(); cr * 2 * d];
        let dxf = modulate_backward(&cache.lnf.xhat, &cache.mf, &dfm, 2 * d, 0, d, g.tp, d, &mut dmf);
        let mut dh = layer_norm_backward(&cache.lnf, &dxf, d);
        let ds = self.final_ada.backward(ps, &cache.sc, &dmf, cr, &mut grads, true).expect("dx");
        add_into(&mut dsc, &ds);

        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dm = vec![T::zero(); cr * 6 * d];
            // MLP branch.
            let dv = gate_backward(&dh, &bc.v, &bc.m, 6 * d, 5 * d, g.tp, d, &mut dm);
            let dgl = blk.fc2.backward(ps, &bc.g, &dv, rows, &mut grads, true).expect("dx");
            let du = gelu_backward(&bc.u, &dgl);
            let dmm = blk.fc1.backward(ps, &bc.mm, &du, rows, &mut grads, true).expect("dx");
            let dx2 = modulate_backward(&bc.ln2.xhat, &bc.m, &dmm, 6 * d, 3 * d, 4 * d, g.tp, d, &mut dm);
            add_into(&mut dh, &layer_norm_backward(&bc.ln2, &dx2, d));
            // Attention branch.
            let d_o = gate_backward(&dh, &bc.o, &bc.m, 6 * d, 2 * d, g.tp, d, &mut dm);
            let datt = blk.proj.backward(ps, &bc.att, &d_o, rows, &mut grads, true).expect("dx");
            let dqkv = attention_backward(&bc.qkv, &bc.attn, &datt, g.n, g.seq, d, self.cfg.heads);
            let dam = blk.qkv.backward(ps, &bc.am, &dqkv, rows, &mut grads, true).expect("dx");
            let dx1 = modulate_backward(&bc.ln1.xhat, &bc.m, &dam, 6 * d, 0, d, g.tp, d, &mut dm);
            add_into(&mut dh, &layer_norm_backward(&bc.ln1, &dx1, d));
            let ds = blk.ada.backward(ps, &cache.sc, &dm, cr, &mut grads, true).expect("dx");
            add_into(&mut dsc, &ds);
        }
        self.embed.backward(ps, &cache.tokens, &dh, rows, &mut grads, false);

        // Conditioning vector.
        let dc = silu_backward(&cache.c, &dsc);
        let mut dtemb = vec![T::zero(); g.n * d];
        {
            let gl = grads.get_mut(self.label);
            for s in 0..g.n {
                let l = b.labels[s];
                for fi in 0..g.f {
                    let src = &dc[(s * g.f + fi) * d..(s * g.f + fi + 1) * d];
                    for j in 0..d {
                        dtemb[s * d + j] += src[j];
                        gl[l * d + j] += src[j];
                    }
                }
            }
        }
        let dt_act = self.t2.backward(ps, &cache.t_act, &dtemb, g.n, &mut grads, true).expect("dx");
        let dt_pre = silu_backward(&cache.t_pre, &dt_act);
        self.t1.backward(ps, &cache.temb_in, &dt_pre, g.n, &mut grads, false);

        if let Some(hc) = &cache.hand {
            let mut de = vec![T::zero(); g.n * hc.frames * d];
            for s in 0..g.n {
                for fi in 0..g.f {
                    let (lo, hi) = self.hand_group(fi, hc.frames, g.f);
                    let inv = T::one() / T::from_f64((hi - lo) as f64);
                    let src = &dc[(s * g.f + fi) * d..(s * g.f + fi + 1) * d];
                    for t in lo..hi {
                        let dst = &mut de[(s * hc.frames + t) * d..(s * hc.frames + t + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j] * inv;
                        }
                    }
                }
            }
            let rows_h = g.n * hc.frames;
            let dact = self.h2.backward(ps, &hc.act, &de, rows_h, &mut grads, true).expect("dx");
            let dpre = silu_backward(&hc.pre, &dact);
            self.h1.backward(ps, &hc.input, &dpre, rows_h, &mut grads, false);
        }
        grads
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `y = x * (1 + scale) + shift`, with `scale`/`shift` taken from the
/// modulation row of each token's `(sample, frame)`.
fn modulate<T: Scalar>(x: &[T], m: &[T], ms: usize, shift: usize, scale: usize, tp: usize, d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (i, (yr, xr)) in y.chunks_exact_mut(d).zip(x.chunks_exact(d)).enumerate() {
        let mr = &m[(i / tp) * ms..];
        for j in 0..d {
            yr[j] = xr[j] * (T::one() + mr[scale + j]) + mr[shift + j];
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn modulate_backward<T: Scalar>(
    x: &[T],
    m: &[T],
    dy: &[T],
    ms: usize,
    shift: usize,
    scale: usize,
    tp: usize,
    d: usize,
    dm: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for (i, ((dxr, xr), dyr)) in dx.chunks_exact_mut(d).zip(x.chunks_exact(d)).zip(dy.chunks_exact(d)).enumerate() {
        let r = (i / tp) * ms;
        for j in 0..d {
            dxr[j] = dyr[j] * (T::one() + m[r + scale + j]);
            dm[r + scale + j] += dyr[j] * xr[j];
            dm[r + shift + j] += dyr[j];
        }
    }
    dx
}

/// `h += gate * o`.
fn gate_add<T: Scalar>(h: &mut [T], o: &[T], m: &[T], ms: usize, gate: usize, tp: usize, d: usize) {
    for (i, (hr, or)) in h.chunks_exact_mut(d).zip(o.chunks_exact(d)).enumerate() {
        let mr = &m[(i / tp) * ms + gate..];
        for j in 0..d {
            hr[j] += mr[j] * or[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gate_backward<T: Scalar>(
    dh: &[T],
    o: &[T],
    m: &[T],
    ms: usize,
    gate: usize,
    tp: usize,
    d: usize,
    dm: &mut [T],
) -> Vec<T> {
    let mut d_o = vec![T::zero(); o.len()];
    for (i, ((dor, dhr), or)) in d_o.chunks_exact_mut(d).zip(dh.chunks_exact(d)).zip(o.chunks_exact(d)).enumerate() {
        let r = (i / tp) * ms + gate;
        for j in 0..d {
            dor[j] = dhr[j] * m[r + j];
            dm[r + j] += dhr[j] * or[j];
        }
    }
    d_o
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = T::from_f64(a.cos());
        out[half + i] = T::from_f64(a.sin());
    }
    out
}

fn sincos_1d(pos: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let w = 1.0 / 10_000f64.powf(i as f64 / half as f64);
        out[i] = (pos as f64 * w).sin();
        out[half + i] = (pos as f64 * w).cos();
    }
}

/// Fixed 3D sin/cos position table, `(f * gh * gw) x dim`.
pub fn position_embedding<T: Scalar>(f: usize, gh: usize, gw: usize, dim: usize) -> Vec<T> {
    let dt = 2 * (dim / 8);
    let dy = 2 * ((dim - dt) / 4);
    let dx = dim - dt - dy;
    let mut out = Vec::with_capacity(f * gh * gw * dim);
    let mut row = vec![0.0f64; dim];
    for fi in 0..f {
        for y in 0..gh {
            for x in 0..gw {
                sincos_1d(fi, dt, &mut row[..dt]);
                sincos_1d(y, dy, &mut row[dt..dt + dy]);
                sincos_1d(x, dx, &mut row[dt + dy..]);
                out.extend(row.iter().map(|&v| T::from_f64(v)));
            }
        }
    }
    out
}
