//! The denoiser: a small diffusion transformer over latent frame tokens.
//!
//! Each block applies self-attention, text cross-attention and an MLP, all
//! modulated by a conditioning vector built from the diffusion step and the
//! requested duration (adaptive layer-norm style: per-sub-block shift, scale
//! and gate, with gates initialised to zero). Latents are padded on the
//! frame axis; the active prefix is `duration * frame_rate` frames, padded
//! positions get a learned pad embedding and self-attention only reads keys
//! from the active prefix.
//!
//! Every attention site exposes interception hooks (pre-query and
//! post-output) so inference-time controllers can rewrite queries and fuse
//! outputs across the batch without touching model code.

mod checkpoint;
mod hooks;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use hooks::{AttentionCtx, AttnSite, HookPhase, HookSet, HookSiteInfo};
pub use tape::{backward_one, forward_one_train, Tape};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::SeededRng;

/// Reserved token: unknown words.
pub const OOV_TOKEN: usize = 0;
/// Reserved token: the unconditional (dropped-caption) sequence.
pub const NULL_TOKEN: usize = 1;

/// Model geometry and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub max_frames: usize,
    pub frame_rate: f64,
    pub latent_channels: usize,
    pub vocab: Vec<String>,
}

/// The default event vocabulary: reserved tokens, twelve event words and the
/// connectives the recaption grammar produces.
pub fn default_vocab() -> Vec<String> {
    let mut v: Vec<String> = vec!["<oov>".into(), "<null>".into()];
    for w in [
        "beep", "hum", "whir", "buzz", "chime", "drone", "ring", "purr", "whistle", "rumble",
        "growl", "siren",
    ] {
        v.push(w.into());
    }
    for w in ["while", "and", "with", "then", "a", "the"] {
        v.push(w.into());
    }
    v
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            text_dim: 32,
            max_frames: 250,
            frame_rate: 25.0,
            latent_channels: 16,
            vocab: default_vocab(),
        }
    }
}

impl DitConfig {
    /// A small instance for gradient checking and fast tests.
    pub fn tiny() -> Self {
        DitConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            text_dim: 8,
            max_frames: 20,
            frame_rate: 25.0,
            latent_channels: 4,
            vocab: default_vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.max_frames == 0 || self.latent_channels == 0 {
            return Err(Error::config("layers, max_frames, latent_channels must be positive"));
        }
        if self.vocab.len() < 2 {
            return Err(Error::config("vocab must include reserved tokens"));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * 4
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn max_seconds(&self) -> f64 {
        self.max_frames as f64 / self.frame_rate
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_mod: Tensor2D,
    pub b_mod: Tensor2D,
    pub w_q: Tensor2D,
    pub b_q: Tensor2D,
    pub w_k: Tensor2D,
    pub b_k: Tensor2D,
    pub w_v: Tensor2D,
    pub b_v: Tensor2D,
    pub w_o: Tensor2D,
    pub b_o: Tensor2D,
    pub w_q2: Tensor2D,
    pub b_q2: Tensor2D,
    pub w_k2: Tensor2D,
    pub b_k2: Tensor2D,
    pub w_v2: Tensor2D,
    pub b_v2: Tensor2D,
    pub w_o2: Tensor2D,
    pub b_o2: Tensor2D,
    pub w_up: Tensor2D,
    pub b_up: Tensor2D,
    pub w_down: Tensor2D,
    pub b_down: Tensor2D,
}

/// All model parameters.
#[derive(Debug, Clone)]
pub struct Params {
    pub w_in: Tensor2D,
    pub b_in: Tensor2D,
    pub pad_embed: Tensor2D,
    pub w_step: Tensor2D,
    pub w_dur: Tensor2D,
    pub b_cond: Tensor2D,
    pub text_embed: Tensor2D,
    pub layers: Vec<LayerParams>,
    pub w_modf: Tensor2D,
    pub b_modf: Tensor2D,
    pub w_out: Tensor2D,
    pub b_out: Tensor2D,
}

impl Params {
    pub fn zeros(cfg: &DitConfig) -> Self {
        let d = cfg.dim;
        let td = cfg.text_dim;
        let layer = || LayerParams {
            w_mod: Tensor2D::zeros(d, 9 * d),
            b_mod: Tensor2D::zeros(1, 9 * d),
            w_q: Tensor2D::zeros(d, d),
            b_q: Tensor2D::zeros(1, d),
            w_k: Tensor2D::zeros(d, d),
            b_k: Tensor2D::zeros(1, d),
            w_v: Tensor2D::zeros(d, d),
            b_v: Tensor2D::zeros(1, d),
            w_o: Tensor2D::zeros(d, d),
            b_o: Tensor2D::zeros(1, d),
            w_q2: Tensor2D::zeros(d, d),
            b_q2: Tensor2D::zeros(1, d),
            w_k2: Tensor2D::zeros(td, d),
            b_k2: Tensor2D::zeros(1, d),
            w_v2: Tensor2D::zeros(td, d),
            b_v2: Tensor2D::zeros(1, d),
            w_o2: Tensor2D::zeros(d, d),
            b_o2: Tensor2D::zeros(1, d),
            w_up: Tensor2D::zeros(d, cfg.mlp_dim()),
            b_up: Tensor2D::zeros(1, cfg.mlp_dim()),
            w_down: Tensor2D::zeros(cfg.mlp_dim(), d),
            b_down: Tensor2D::zeros(1, d),
        };
        Params {
            w_in: Tensor2D::zeros(cfg.latent_channels, d),
            b_in: Tensor2D::zeros(1, d),
            pad_embed: Tensor2D::zeros(1, d),
            w_step: Tensor2D::zeros(d, d),
            w_dur: Tensor2D::zeros(d, d),
            b_cond: Tensor2D::zeros(1, d),
            text_embed: Tensor2D::zeros(cfg.vocab.len(), td),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            w_modf: Tensor2D::zeros(d, 2 * d),
            b_modf: Tensor2D::zeros(1, 2 * d),
            w_out: Tensor2D::zeros(d, cfg.latent_channels),
            b_out: Tensor2D::zeros(1, cfg.latent_channels),
        }
    }

    /// Visits every parameter block in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor2D)) {
        f("w_in", &self.w_in);
        f("b_in", &self.b_in);
        f("pad_embed", &self.pad_embed);
        f("w_step", &self.w_step);
        f("w_dur", &self.w_dur);
        f("b_cond", &self.b_cond);
        f("text_embed", &self.text_embed);
        for (i, l) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("layer{i}.{s}");
            f(&name("w_mod"), &l.w_mod);
            f(&name("b_mod"), &l.b_mod);
            f(&name("w_q"), &l.w_q);
            f(&name("b_q"), &l.b_q);
            f(&name("w_k"), &l.w_k);
            f(&name("b_k"), &l.b_k);
            f(&name("w_v"), &l.w_v);
            f(&name("b_v"), &l.b_v);
            f(&name("w_o"), &l.w_o);
            f(&name("b_o"), &l.b_o);
            f(&name("w_q2"), &l.w_q2);
            f(&name("b_q2"), &l.b_q2);
            f(&name("w_k2"), &l.w_k2);
            f(&name("b_k2"), &l.b_k2);
            f(&name("w_v2"), &l.w_v2);
            f(&name("b_v2"), &l.b_v2);
            f(&name("w_o2"), &l.w_o2);
            f(&name("b_o2"), &l.b_o2);
            f(&name("w_up"), &l.w_up);
            f(&name("b_up"), &l.b_up);
            f(&name("w_down"), &l.w_down);
            f(&name("b_down"), &l.b_down);
        }
        f("w_modf", &self.w_modf);
        f("b_modf", &self.b_modf);
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor2D)) {
        f("w_in", &mut self.w_in);
        f("b_in", &mut self.b_in);
        f("pad_embed", &mut self.pad_embed);
        f("w_step", &mut self.w_step);
        f("w_dur", &mut self.w_dur);
        f("b_cond", &mut self.b_cond);
        f("text_embed", &mut self.text_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = |s: &str| format!("layer{i}.{s}");
            f(&name("w_mod"), &mut l.w_mod);
            f(&name("b_mod"), &mut l.b_mod);
            f(&name("w_q"), &mut l.w_q);
            f(&name("b_q"), &mut l.b_q);
            f(&name("w_k"), &mut l.w_k);
            f(&name("b_k"), &mut l.b_k);
            f(&name("w_v"), &mut l.w_v);
            f(&name("b_v"), &mut l.b_v);
            f(&name("w_o"), &mut l.w_o);
            f(&name("b_o"), &mut l.b_o);
            f(&name("w_q2"), &mut l.w_q2);
            f(&name("b_q2"), &mut l.b_q2);
            f(&name("w_k2"), &mut l.w_k2);
            f(&name("b_k2"), &mut l.b_k2);
            f(&name("w_v2"), &mut l.w_v2);
            f(&name("b_v2"), &mut l.b_v2);
            f(&name("w_o2"), &mut l.w_o2);
            f(&name("b_o2"), &mut l.b_o2);
            f(&name("w_up"), &mut l.w_up);
            f(&name("b_up"), &mut l.b_up);
            f(&name("w_down"), &mut l.w_down);
            f(&name("b_down"), &mut l.b_down);
        }
        f("w_modf", &mut self.w_modf);
        f("b_modf", &mut self.b_modf);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    /// In-place `self = a*self + b*other`, blockwise.
    pub fn axpy(&mut self, a: f64, other: &Params, b: f64) {
        let mut blocks: Vec<(String, Tensor2D)> = Vec::new();
        other.for_each(|n, t| blocks.push((n.to_string(), t.clone())));
        let mut i = 0;
        self.for_each_mut(|n, t| {
            debug_assert_eq!(n, blocks[i].0);
            let o = &blocks[i].1;
            for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
                *x = a * *x + b * *y;
            }
            i += 1;
        });
    }
}

/// Tokenized caption with gathered embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub tokens: Vec<usize>,
    pub embeddings: Tensor2D,
}

/// The diffusion transformer.
#[derive(Debug, Clone)]
pub struct DitModel {
    config: DitConfig,
    pub params: Params,
}

impl DitModel {
    /// Seeded initialisation. Modulation projections start at zero
    /// (identity blocks, gates closed); other weights are scaled normal.
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = SeededRng::new(seed).derive("dit-init");
        params.for_each_mut(|name, t| {
            if name.contains("mod") || name.starts_with('b') || name.contains(".b_") {
                return; // biases and modulations stay zero
            }
            let fan_in = t.rows().max(1) as f64;
            let std = 1.0 / fan_in.sqrt();
            for v in t.data_mut() {
                *v = rng.normal() * std;
            }
        });
        // Pad embedding and text embeddings want small nonzero starts.
        for v in params.pad_embed.data_mut() {
            *v = rng.normal() * 0.02;
        }
        for v in params.text_embed.data_mut() {
            *v = rng.normal() * 0.5;
        }
        Ok(DitModel { config, params })
    }

    /// Fills every block, including modulations, with small random values.
    /// Used by gradient checks so no path is inert.
    pub fn randomize_all(&mut self, seed: u64) {
        let mut rng = SeededRng::new(seed).derive("dit-randomize");
        self.params.for_each_mut(|_, t| {
            let fan_in = t.rows().max(1) as f64;
            let std = 0.5 / fan_in.sqrt();
            for v in t.data_mut() {
                *v = rng.normal() * std;
            }
        });
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    /// Lowercased whitespace tokenization over the event vocabulary with
    /// OOV fallback; punctuation is stripped from token edges.
    pub fn embed_text(&self, caption: &str) -> Result<TextCondition> {
        if caption.trim().is_empty() {
            return Err(Error::parse("cannot embed an empty caption"));
        }
        let mut tokens = Vec::new();
        for word in caption.split_whitespace() {
            let bare: String = word
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if bare.is_empty() {
                continue;
            }
            let id = self
                .config
                .vocab
                .iter()
                .position(|v| v == &bare)
                .unwrap_or(OOV_TOKEN);
            tokens.push(id);
        }
        if tokens.is_empty() {
            tokens.push(OOV_TOKEN);
        }
        Ok(self.condition_from_tokens(tokens))
    }

    /// The unconditional (classifier-free) condition.
    pub fn null_condition(&self) -> TextCondition {
        self.condition_from_tokens(vec![NULL_TOKEN])
    }

    pub fn condition_from_tokens(&self, tokens: Vec<usize>) -> TextCondition {
        let td = self.config.text_dim;
        let embeddings = Tensor2D::from_fn(tokens.len(), td, |r, c| {
            self.params.text_embed.get(tokens[r], c)
        });
        TextCondition { tokens, embeddings }
    }

    /// Active prefix length for a duration, clamped to at least one frame.
    pub fn active_frames(&self, duration_s: f64) -> usize {
        ((duration_s * self.config.frame_rate + 0.5).floor() as usize).max(1)
    }

    /// Batched denoiser forward pass. `latents` are frames-by-channels
    /// token matrices sharing one frame count `<= max_frames`; hooks fire
    /// at every attention site in layer order.
    pub fn forward(
        &self,
        latents: &[Tensor2D],
        step: usize,
        conds: &[TextCondition],
        durations: &[f64],
        hooks: &mut HookSet,
    ) -> Result<Vec<Tensor2D>> {
        let n = latents.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if conds.len() != n || durations.len() != n {
            return Err(Error::shape(format!(
                "batch size mismatch: {} latents, {} conditions, {} durations",
                n,
                conds.len(),
                durations.len()
            )));
        }
        let frames = latents[0].rows();
        if frames > self.config.max_frames {
            return Err(Error::shape(format!(
                "{} frames exceeds max_frames {}",
                frames, self.config.max_frames
            )));
        }
        let mut actives = Vec::with_capacity(n);
        for (i, x) in latents.iter().enumerate() {
            if x.rows() != frames || x.cols() != self.config.latent_channels {
                return Err(Error::shape(format!(
                    "latent {i}: {}x{}, expected {}x{}",
                    x.rows(),
                    x.cols(),
                    frames,
                    self.config.latent_channels
                )));
            }
            if !(durations[i] > 0.0 && durations[i] <= self.config.max_seconds() + 1e-9) {
                return Err(Error::range(format!(
                    "duration {} outside (0, {}]",
                    durations[i],
                    self.config.max_seconds()
                )));
            }
            let active = self.active_frames(durations[i]);
            if active > frames {
                return Err(Error::shape(format!(
                    "duration {}s needs {} frames but batch has {}",
                    durations[i], active, frames
                )));
            }
            actives.push(active);
            for &t in &conds[i].tokens {
                if t >= self.config.vocab.len() {
                    return Err(Error::shape(format!("token id {t} outside vocabulary")));
                }
            }
        }

        // Token embedding + positional encoding + per-element condition.
        let mut states: Vec<Tensor2D> = (0..n)
            .into_par_iter()
            .map(|i| self.embed_tokens(&latents[i], actives[i]))
            .collect();
        let cond_vecs: Vec<Tensor2D> = (0..n)
            .map(|i| self.condition_vector(step, durations[i]).1)
            .collect();

        for layer in 0..self.config.layers {
            let lp = &self.params.layers[layer];

            // Self-attention sub-block.
            let mods: Vec<Tensor2D> = cond_vecs
                .iter()
                .map(|c| modulation(c, &lp.w_mod, &lp.b_mod))
                .collect::<Result<_>>()?;
            let prep: Vec<(Tensor2D, Tensor2D, Tensor2D, Tensor2D)> = states
                .par_iter()
                .zip(&mods)
                .map(|(h, m)| {
                    let hmod = modulate(&layer_norm(h), m, 0);
                    let q = affine(&hmod, &lp.w_q, &lp.b_q)?;
                    let k = affine(&hmod, &lp.w_k, &lp.b_k)?;
                    let v = affine(&hmod, &lp.w_v, &lp.b_v)?;
                    Ok((hmod, q, k, v))
                })
                .collect::<Result<_>>()?;
            let (mut qs, ks, vs): (Vec<_>, Vec<_>, Vec<_>) = {
                let mut qs = Vec::new();
                let mut ks = Vec::new();
                let mut vs = Vec::new();
                for (_, q, k, v) in &prep {
                    qs.push(q.clone());
                    ks.push(k.clone());
                    vs.push(v.clone());
                }
                (qs, ks, vs)
            };
            let info = HookSiteInfo {
                site: AttnSite::SelfAttn,
                layer,
            };
            hooks.run_pre_query(&info, &mut qs)?;
            let key_lens: Vec<usize> = actives.clone();
            let mut outs: Vec<Tensor2D> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let attn = multi_head_attention(
                        &qs[i],
                        &ks[i].slice_rows(0..key_lens[i]),
                        &vs[i].slice_rows(0..key_lens[i]),
                        self.config.heads,
                    )?;
                    affine(&attn, &lp.w_o, &lp.b_o)
                })
                .collect::<Result<_>>()?;
            {
                let attend = |q: &Tensor2D, k: &Tensor2D, v: &Tensor2D| -> Result<Tensor2D> {
                    let attn = multi_head_attention(q, k, v, self.config.heads)?;
                    affine(&attn, &lp.w_o, &lp.b_o)
                };
                let ctx = AttentionCtx {
                    q: &qs,
                    k: &ks,
                    v: &vs,
                    active: &actives,
                    key_len: &key_lens,
                    attend: &attend,
                };
                hooks.run_post_output(&info, &ctx, &mut outs)?;
            }
            for i in 0..n {
                apply_gated_residual(&mut states[i], &outs[i], &mods[i], 2);
            }

            // Cross-attention sub-block.
            let prep2: Vec<(Tensor2D, Tensor2D)> = states
                .par_iter()
                .zip(&mods)
                .map(|(h, m)| {
                    let hmod = modulate(&layer_norm(h), m, 3);
                    let q = affine(&hmod, &lp.w_q2, &lp.b_q2)?;
                    Ok((hmod, q))
                })
                .collect::<Result<_>>()?;
            let mut qs2: Vec<Tensor2D> = prep2.iter().map(|(_, q)| q.clone()).collect();
            let ks2: Vec<Tensor2D> = conds
                .iter()
                .map(|c| affine(&c.embeddings, &lp.w_k2, &lp.b_k2))
                .collect::<Result<_>>()?;
            let vs2: Vec<Tensor2D> = conds
                .iter()
                .map(|c| affine(&c.embeddings, &lp.w_v2, &lp.b_v2))
                .collect::<Result<_>>()?;
            let info2 = HookSiteInfo {
                site: AttnSite::CrossAttn,
                layer,
            };
            hooks.run_pre_query(&info2, &mut qs2)?;
            let key_lens2: Vec<usize> = conds.iter().map(|c| c.tokens.len()).collect();
            let mut outs2: Vec<Tensor2D> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let attn = multi_head_attention(&qs2[i], &ks2[i], &vs2[i], self.config.heads)?;
                    affine(&attn, &lp.w_o2, &lp.b_o2)
                })
                .collect::<Result<_>>()?;
            {
                let attend = |q: &Tensor2D, k: &Tensor2D, v: &Tensor2D| -> Result<Tensor2D> {
                    let attn = multi_head_attention(q, k, v, self.config.heads)?;
                    affine(&attn, &lp.w_o2, &lp.b_o2)
                };
                let ctx = AttentionCtx {
                    q: &qs2,
                    k: &ks2,
                    v: &vs2,
                    active: &actives,
                    key_len: &key_lens2,
                    attend: &attend,
                };
                hooks.run_post_output(&info2, &ctx, &mut outs2)?;
            }
            for i in 0..n {
                apply_gated_residual(&mut states[i], &outs2[i], &mods[i], 5);
            }

            // MLP sub-block.
            let mlp_outs: Vec<Tensor2D> = states
                .par_iter()
                .zip(&mods)
                .map(|(h, m)| {
                    let hmod = modulate(&layer_norm(h), m, 6);
                    let u = affine(&hmod, &lp.w_up, &lp.b_up)?;
                    let a = silu(&u);
                    affine(&a, &lp.w_down, &lp.b_down)
                })
                .collect::<Result<_>>()?;
            for i in 0..n {
                apply_gated_residual(&mut states[i], &mlp_outs[i], &mods[i], 8);
            }
        }

        // Final modulated norm + projection; padded rows are zeroed.
        let outputs: Vec<Tensor2D> = (0..n)
            .into_par_iter()
            .map(|i| {
                let modf = modulation(&cond_vecs[i], &self.params.w_modf, &self.params.b_modf)?;
                let normed = layer_norm(&states[i]);
                let modded = modulate_final(&normed, &modf);
                let mut y = affine(&modded, &self.params.w_out, &self.params.b_out)?;
                for r in actives[i]..y.rows() {
                    for v in y.row_mut(r) {
                        *v = 0.0;
                    }
                }
                Ok(y)
            })
            .collect::<Result<_>>()?;
        Ok(outputs)
    }

    /// Hook-free forward.
    pub fn forward_no_hooks(
        &self,
        latents: &[Tensor2D],
        step: usize,
        conds: &[TextCondition],
        durations: &[f64],
    ) -> Result<Vec<Tensor2D>> {
        self.forward(latents, step, conds, durations, &mut HookSet::new())
    }

    /// Token embedding: input projection on the active prefix, learned pad
    /// embedding beyond it, plus sinusoidal positions.
    fn embed_tokens(&self, latent: &Tensor2D, active: usize) -> Tensor2D {
        let d = self.config.dim;
        let frames = latent.rows();
        let mut h = Tensor2D::zeros(frames, d);
        for r in 0..frames {
            let row = h.row_mut(r);
            if r < active {
                for (c, x) in latent.row(r).iter().enumerate() {
                    if *x == 0.0 {
                        continue;
                    }
                    for (o, w) in row.iter_mut().zip(self.params.w_in.row(c)) {
                        *o += x * w;
                    }
                }
                for (o, b) in row.iter_mut().zip(self.params.b_in.row(0)) {
                    *o += b;
                }
            } else {
                row.copy_from_slice(self.params.pad_embed.row(0));
            }
            for (c, o) in row.iter_mut().enumerate() {
                *o += sinusoid(r as f64, c, d);
            }
        }
        h
    }

    /// Conditioning vector from step index and duration. Returns the
    /// pre-activation and the silu-activated vector.
    pub(crate) fn condition_vector(&self, step: usize, duration_s: f64) -> (Tensor2D, Tensor2D) {
        let d = self.config.dim;
        let sin_t = sin_embed(step as f64, d);
        let sin_dur = sin_embed(duration_s * self.config.frame_rate, d);
        let mut z = Tensor2D::zeros(1, d);
        for c in 0..d {
            let mut acc = self.params.b_cond.get(0, c);
            for j in 0..d {
                acc += sin_t.get(0, j) * self.params.w_step.get(j, c);
                acc += sin_dur.get(0, j) * self.params.w_dur.get(j, c);
            }
            z.set(0, c, acc);
        }
        let cond = silu(&z);
        (z, cond)
    }
}

/// Sinusoidal embedding of a scalar position.
pub(crate) fn sin_embed(pos: f64, dim: usize) -> Tensor2D {
    Tensor2D::from_fn(1, dim, |_, c| {
        let pair = (c / 2) as f64;
        let freq = (10_000f64).powf(-2.0 * pair / dim as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[inline]
pub(crate) fn sinusoid(pos: f64, c: usize, dim: usize) -> f64 {
    let pair = (c / 2) as f64;
    let freq = (10_000f64).powf(-2.0 * pair / dim as f64);
    if c % 2 == 0 {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Row layer norm without learned affine (modulation supplies it).
pub(crate) fn layer_norm(x: &Tensor2D) -> Tensor2D {
    layer_norm_with_stats(x).0
}

pub(crate) fn layer_norm_with_stats(x: &Tensor2D) -> (Tensor2D, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_sigmas = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean: f64 = row.iter().sum::<f64>() / d;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_sigmas.push(inv);
    }
    (out, inv_sigmas)
}

/// `x * w + b` with `b` broadcast over rows.
pub(crate) fn affine(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let mut y = crate::numerics::matmul(x, w)?;
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bv;
        }
    }
    Ok(y)
}

/// Computes the 9-chunk (or 2-chunk final) modulation row for a condition.
pub(crate) fn modulation(cond: &Tensor2D, w_mod: &Tensor2D, b_mod: &Tensor2D) -> Result<Tensor2D> {
    affine(cond, w_mod, b_mod)
}

/// Applies chunk `base` (shift) and `base+1` (scale) of a modulation row:
/// `x * (1 + scale) + shift`, broadcast over rows.
pub(crate) fn modulate(x: &Tensor2D, mods: &Tensor2D, base: usize) -> Tensor2D {
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for c in 0..d {
            let shift = mods.get(0, base * d + c);
            let scale = mods.get(0, (base + 1) * d + c);
            row[c] = row[c] * (1.0 + scale) + shift;
        }
    }
    out
}

/// Final-layer modulation: chunk 0 = shift, chunk 1 = scale.
pub(crate) fn modulate_final(x: &Tensor2D, mods: &Tensor2D) -> Tensor2D {
    modulate(x, mods, 0)
}

/// `h += gate ⊙ out` with the gate at chunk `gate_chunk` broadcast over rows.
pub(crate) fn apply_gated_residual(
    h: &mut Tensor2D,
    out: &Tensor2D,
    mods: &Tensor2D,
    gate_chunk: usize,
) {
    let d = h.cols();
    for r in 0..h.rows() {
        let hr = r * d;
        for c in 0..d {
            let gate = mods.get(0, gate_chunk * d + c);
            h.data_mut()[hr + c] += gate * out.get(r, c);
        }
    }
}

pub(crate) fn silu(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for v in out.data_mut() {
        let s = 1.0 / (1.0 + (-*v).exp());
        *v *= s;
    }
    out
}

/// Multi-head scaled dot-product attention over full-width q/k/v, heads
/// split on the channel axis; output is the concatenated heads (no output
/// projection).
pub(crate) fn multi_head_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
) -> Result<Tensor2D> {
    let d = q.cols();
    if d % heads != 0 || k.cols() != d || v.cols() != d {
        return Err(Error::shape(format!(
            "attention dims: q {} k {} v {} heads {}",
            d,
            k.cols(),
            v.cols(),
            heads
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention rows: k {} vs v {}",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::shape("attention with no keys"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2D::zeros(q.rows(), d);
    let mut scores = vec![0.0; k.rows()];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..q.rows() {
            let qrow = &q.row(i)[off..off + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &k.row(j)[off..off + dh];
                let mut acc = 0.0;
                for (a, b) in qrow.iter().zip(krow) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            crate::numerics::softmax_row_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (j, &p) in scores.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vrow = &v.row(j)[off..off + dh];
                for (o, val) in orow.iter_mut().zip(vrow) {
                    *o += p * val;
                }
            }
        }
    }
    Ok(out)
}
