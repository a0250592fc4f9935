//! The multi-panel diffusion transformer.
//!
//! Tokens live in one `[K * n, d]` matrix, row `k * n + pos`. Intra-panel
//! blocks attend within each panel (bubble-masked tokens excluded), then
//! cross-attend to that panel's caption. Inter-panel blocks attend across
//! panels at each spatial position (padded panels excluded). Both block
//! types are modulated by a shared timestep vector plus per-block offsets.

pub mod codec;
pub mod latent;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnGroup, AttnLayout, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};
use crate::tensor::Tensor;
use latent::{patchify, unpatchify, CaptionEmbedding, LatentStack, MaskSet, TokenGrid, TokenView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Number of (intra, inter) block pairs.
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub latent_channels: usize,
    pub k_max: usize,
    pub text_dim: usize,
    pub max_text_tokens: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub timesteps: usize,
    /// Also cross-attend to captions inside inter-panel blocks.
    pub caption_in_inter: bool,
    pub init_std: f64,
    /// Codec latents enter the diffusion process as `(z - latent_shift) * latent_scale`.
    pub latent_shift: f64,
    pub latent_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            depth: 2,
            heads: 4,
            patch_size: 2,
            latent_channels: 4,
            k_max: 4,
            text_dim: 32,
            max_text_tokens: 300,
            mlp_ratio: 4,
            freq_dim: 256,
            timesteps: 1000,
            caption_in_inter: false,
            init_std: 0.02,
            latent_shift: 0.5,
            latent_scale: 2.0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            hidden_dim: 8,
            depth: 1,
            heads: 2,
            k_max: 2,
            text_dim: 8,
            mlp_ratio: 2,
            freq_dim: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if !self.hidden_dim.is_multiple_of(4) {
            return bad("hidden_dim must be a multiple of 4".into());
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return bad("freq_dim must be even and positive".into());
        }
        if self.patch_size == 0 || self.latent_channels == 0 || self.k_max == 0 || self.text_dim == 0 {
            return bad("patch_size, latent_channels, k_max and text_dim must be positive".into());
        }
        if self.max_text_tokens == 0 || self.mlp_ratio == 0 || self.timesteps == 0 {
            return bad("max_text_tokens, mlp_ratio and timesteps must be positive".into());
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0 && self.latent_shift.is_finite()) {
            return bad("latent_scale must be positive and latent_shift finite".into());
        }
        Ok(())
    }

    pub fn to_diffusion_space(&self, z: &LatentStack) -> LatentStack {
        let mut out = z.clone();
        out.data_mut().iter_mut().for_each(|v| *v = (*v - self.latent_shift) * self.latent_scale);
        out
    }

    pub fn to_codec_space(&self, z: &LatentStack) -> LatentStack {
        let mut out = z.clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v / self.latent_scale + self.latent_shift);
        out
    }

    pub fn token_width(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    /// Modulation chunks per block: shift/scale/gate for attention, FFN, cross.
    fn intra_chunks(&self) -> usize {
        9
    }

    fn inter_chunks(&self) -> usize {
        if self.caption_in_inter {
            9
        } else {
            6
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
struct IntraBlock {
    table: usize,
    attn: Attn,
    cross: Attn,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct InterBlock {
    table: usize,
    panel_emb: usize,
    attn: Attn,
    cross: Option<Attn>,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: Linear,
    t1: Linear,
    t2: Linear,
    t_block: Linear,
    cap1: Linear,
    cap2: Linear,
    intra: Vec<IntraBlock>,
    inter: Vec<InterBlock>,
    final_table: usize,
    final_proj: Linear,
}

enum Init {
    Normal,
    Zeros,
}

struct Builder<'a, R: Rng> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: Option<&'a mut R>,
    std: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match (init, self.rng.as_deref_mut()) {
            (Init::Normal, Some(rng)) => round_f32(Tensor::trunc_normal(rows, cols, self.std, rng)),
            _ => Tensor::zeros(rows, cols),
        };
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, init: Init) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), i, o, init),
            b: self.add(format!("{name}.bias"), 1, o, Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize, kv_in: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, Init::Normal),
            k: self.linear(&format!("{name}.k"), kv_in, d, Init::Normal),
            v: self.linear(&format!("{name}.v"), kv_in, d, Init::Normal),
            o: self.linear(&format!("{name}.o"), d, d, Init::Normal),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, Init::Normal),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, Init::Normal),
        }
    }
}

fn round_f32(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    t
}

fn build_layout<R: Rng>(cfg: &ModelConfig, b: &mut Builder<'_, R>) -> Layout {
    let d = cfg.hidden_dim;
    let hidden = d * cfg.mlp_ratio;
    let patch = b.linear("patch_embed", cfg.token_width(), d, Init::Normal);
    let t1 = b.linear("t_embed.fc1", cfg.freq_dim, d, Init::Normal);
    let t2 = b.linear("t_embed.fc2", d, d, Init::Normal);
    let t_block = b.linear("t_block", d, cfg.intra_chunks() * d, Init::Zeros);
    let cap1 = b.linear("caption_proj.fc1", cfg.text_dim, d, Init::Normal);
    let cap2 = b.linear("caption_proj.fc2", d, d, Init::Normal);
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..cfg.depth {
        let n = format!("intra.{i}");
        intra.push(IntraBlock {
            table: b.add(format!("{n}.mod_table"), 1, cfg.intra_chunks() * d, Init::Zeros),
            attn: b.attn(&format!("{n}.attn"), d, d),
            cross: b.attn(&format!("{n}.cross"), d, d),
            ffn: b.ffn(&format!("{n}.ffn"), d, hidden),
        });
        let n = format!("inter.{i}");
        inter.push(InterBlock {
            table: b.add(format!("{n}.mod_table"), 1, cfg.inter_chunks() * d, Init::Zeros),
            panel_emb: b.add(format!("{n}.panel_embed"), cfg.k_max, d, Init::Normal),
            attn: b.attn(&format!("{n}.attn"), d, d),
            cross: cfg.caption_in_inter.then(|| b.attn(&format!("{n}.cross"), d, d)),
            ffn: b.ffn(&format!("{n}.ffn"), d, hidden),
        });
    }
    let final_table = b.add("final.mod_table".into(), 1, 2 * d, Init::Zeros);
    let final_proj = b.linear("final.proj", d, cfg.token_width(), Init::Normal);
    Layout {
        patch,
        t1,
        t2,
        t_block,
        cap1,
        cap2,
        intra,
        inter,
        final_table,
        final_proj,
    }
}

/// Everything the denoiser sees for one page.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub z_t: &'a LatentStack,
    pub t: usize,
    pub captions: &'a CaptionEmbedding,
    pub masks: &'a MaskSet,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// When false, inter-panel blocks are skipped (identity).
    pub inter_blocks: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { inter_blocks: true }
    }
}

/// Attention layouts and gating rows derived from the masks.
struct Scopes {
    intra_self: Rc<AttnLayout>,
    cross: Rc<AttnLayout>,
    inter_self: Rc<AttnLayout>,
    inter_cross: Rc<AttnLayout>,
    intra_active: Rc<Vec<bool>>,
    inter_active: Rc<Vec<bool>>,
    /// Rows that also have at least one valid caption token to attend to.
    cross_active: Rc<Vec<bool>>,
    inter_cross_active: Rc<Vec<bool>>,
    panel_of_row: Rc<Vec<usize>>,
}

impl Scopes {
    fn new(masks: &MaskSet, captions: &CaptionEmbedding, n: usize) -> Scopes {
        let k = masks.k();
        let l = captions.l;
        let mut intra_self = Vec::new();
        let mut cross = Vec::new();
        let mut inter_cross = Vec::new();
        for p in 0..k {
            let rows: Vec<usize> = (0..n).filter(|&i| !masks.intra[p][i]).map(|i| p * n + i).collect();
            let keys: Vec<usize> = (0..l).filter(|&j| captions.is_valid(p, j)).map(|j| p * l + j).collect();
            intra_self.push(AttnGroup {
                queries: rows.clone(),
                keys: rows.clone(),
            });
            cross.push(AttnGroup {
                queries: rows,
                keys: keys.clone(),
            });
            if !masks.inter[p] {
                inter_cross.push(AttnGroup {
                    queries: (0..n).map(|i| p * n + i).collect(),
                    keys,
                });
            }
        }
        let real: Vec<usize> = (0..k).filter(|&p| !masks.inter[p]).collect();
        let inter_self = (0..n)
            .map(|i| {
                let rows: Vec<usize> = real.iter().map(|&p| p * n + i).collect();
                AttnGroup {
                    queries: rows.clone(),
                    keys: rows,
                }
            })
            .collect();
        let mut intra_active = Vec::with_capacity(k * n);
        let mut inter_active = Vec::with_capacity(k * n);
        let mut cross_active = Vec::with_capacity(k * n);
        let mut inter_cross_active = Vec::with_capacity(k * n);
        let mut panel_of_row = Vec::with_capacity(k * n);
        for p in 0..k {
            let has_caption = (0..l).any(|j| captions.is_valid(p, j));
            for i in 0..n {
                intra_active.push(!masks.intra[p][i]);
                inter_active.push(!masks.inter[p]);
                cross_active.push(!masks.intra[p][i] && has_caption);
                inter_cross_active.push(!masks.inter[p] && has_caption);
                panel_of_row.push(p);
            }
        }
        Scopes {
            intra_self: Rc::new(AttnLayout { groups: intra_self }),
            cross: Rc::new(AttnLayout { groups: cross }),
            inter_self: Rc::new(AttnLayout { groups: inter_self }),
            inter_cross: Rc::new(AttnLayout { groups: inter_cross }),
            intra_active: Rc::new(intra_active),
            inter_active: Rc::new(inter_active),
            cross_active: Rc::new(cross_active),
            inter_cross_active: Rc::new(inter_cross_active),
            panel_of_row: Rc::new(panel_of_row),
        }
    }
}

/// The denoiser ε_θ with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl Denoiser {
    /// Fresh parameters: truncated normal (std `init_std`) for weights,
    /// zeros for biases, modulation tables and the timestep-to-modulation
    /// projection (so every gate starts at zero).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Init, 0);
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: Some(&mut rng),
            std: config.init_std,
        };
        let layout = build_layout(&config, &mut b);
        let (names, params) = (b.names, b.params);
        Ok(Denoiser {
            config,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named parameters; names and shapes must match
    /// the configuration exactly.
    pub fn from_params(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut b: Builder<'_, rand_chacha::ChaCha8Rng> = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: None,
            std: 0.0,
        };
        let layout = build_layout(&config, &mut b);
        if b.names != names {
            return Err(Error::Config("parameter names do not match the model configuration".into()));
        }
        for ((name, want), got) in names.iter().zip(&b.params).zip(&params) {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Denoiser {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, input: &DenoiserInput) -> Result<usize> {
        let cfg = &self.config;
        let z = input.z_t;
        if input.t >= cfg.timesteps {
            return Err(Error::InvalidArgument(format!(
                "timestep {} out of range 0..{}",
                input.t, cfg.timesteps
            )));
        }
        if z.k != cfg.k_max || z.c != cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent stack has {} panels x {} channels, model expects {} x {}",
                z.k, z.c, cfg.k_max, cfg.latent_channels
            )));
        }
        let p = cfg.patch_size;
        if !z.h.is_multiple_of(p) || !z.w.is_multiple_of(p) {
            return Err(Error::Shape(format!("latent {}x{} not divisible by patch {p}", z.h, z.w)));
        }
        let n = (z.h / p) * (z.w / p);
        input.masks.check(cfg.k_max, n)?;
        let c = input.captions;
        if c.k != cfg.k_max || c.dim != cfg.text_dim {
            return Err(Error::Shape(format!(
                "caption embedding is {}x{}, model expects {} captions of width {}",
                c.k, c.dim, cfg.k_max, cfg.text_dim
            )));
        }
        Ok(n)
    }

    /// Noise prediction with the same shape as `z_t`.
    pub fn forward(&self, input: &DenoiserInput) -> Result<LatentStack> {
        self.forward_with(input, ForwardOptions::default())
    }

    pub fn forward_with(&self, input: &DenoiserInput, opts: ForwardOptions) -> Result<LatentStack> {
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, input, opts)?;
        let cfg = &self.config;
        let z = input.z_t;
        let grid = TokenGrid::from_tensor(cfg.k_max, g.shape(out).0 / cfg.k_max, TokenView::PerPanel, g.value(out).clone())?;
        unpatchify(&grid, cfg.latent_channels, z.h, z.w, cfg.patch_size)
    }

    /// Masked denoising loss against `eps` and its parameter gradients.
    pub fn loss_and_grads(&self, input: &DenoiserInput, eps: &LatentStack) -> Result<(f64, Gradients)> {
        if !eps.same_shape(input.z_t) {
            return Err(Error::Shape("noise and latent shapes differ".into()));
        }
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, input, ForwardOptions::default())?;
        let target = patchify(eps, self.config.patch_size)?.to_tensor().into_vec();
        let include = input.masks.token_include(self.config.token_width());
        let loss = g.masked_mse(out, Rc::new(target), Rc::new(include));
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)))
    }

    /// Records the full forward pass; returns the `[K * n, p*p*C]` output.
    pub fn build<'g>(&'g self, g: &mut Graph<'g>, input: &DenoiserInput, opts: ForwardOptions) -> Result<Var> {
        let n = self.check_input(input)?;
        let cfg = &self.config;
        let p = cfg.patch_size;
        let z = input.z_t;
        let scopes = Scopes::new(input.masks, input.captions, n);

        let tokens = g.constant(patchify(z, p)?.to_tensor());
        let x = self.linear(g, tokens, self.layout.patch);
        let pos = g.constant(tiled_pos_embed(cfg.hidden_dim, z.h / p, z.w / p, cfg.k_max));
        let mut x = g.add(x, pos);

        let (t_emb, global) = self.timestep_vars(g, input.t);
        let caps = self.caption_vars(g, input.captions);

        for i in 0..cfg.depth {
            x = self.intra_var(g, i, x, caps, global, &scopes);
            if opts.inter_blocks {
                x = self.inter_var(g, i, x, caps, global, &scopes);
            }
        }
        Ok(self.final_var(g, x, t_emb))
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, w, b)
    }

    fn timestep_vars(&self, g: &mut Graph, t: usize) -> (Var, Var) {
        let freq = g.constant(timestep_features(t as f64, self.config.freq_dim));
        let h = self.linear(g, freq, self.layout.t1);
        let h = g.silu(h);
        let t_emb = self.linear(g, h, self.layout.t2);
        let s = g.silu(t_emb);
        let global = self.linear(g, s, self.layout.t_block);
        (t_emb, global)
    }

    fn caption_vars(&self, g: &mut Graph, c: &CaptionEmbedding) -> Var {
        let x = g.constant(c.to_tensor());
        let h = self.linear(g, x, self.layout.cap1);
        let h = g.gelu(h);
        self.linear(g, h, self.layout.cap2)
    }

    /// `chunk`-th `d`-wide slice of `global + table`.
    fn mod_chunks(&self, g: &mut Graph, global: Var, table: usize, chunks: usize) -> Vec<Var> {
        let d = self.config.hidden_dim;
        let table = g.param(table);
        let glob = g.col_slice(global, 0, chunks * d);
        let m = g.add(glob, table);
        (0..chunks).map(|c| g.col_slice(m, c * d, d)).collect()
    }

    fn attention(&self, g: &mut Graph, h: Var, kv: Var, a: Attn, layout: Rc<AttnLayout>) -> Var {
        let q = self.linear(g, h, a.q);
        let k = self.linear(g, kv, a.k);
        let v = self.linear(g, kv, a.v);
        let o = g.attention(q, k, v, self.config.heads, layout);
        self.linear(g, o, a.o)
    }

    fn ffn(&self, g: &mut Graph, h: Var, f: Ffn) -> Var {
        let h = self.linear(g, h, f.fc1);
        let h = g.gelu(h);
        self.linear(g, h, f.fc2)
    }

    /// `x + gate ⊙ sublayer(modulate(LN(x)))`, rows outside `active` unchanged.
    #[allow(clippy::too_many_arguments)]
    fn residual(
        &self,
        g: &mut Graph,
        x: Var,
        m: &[Var],
        active: Option<Rc<Vec<bool>>>,
        extra: Option<Var>,
        f: impl FnOnce(&Self, &mut Graph, Var) -> Var,
    ) -> Var {
        let h = g.layer_norm(x);
        let mut h = g.modulate(h, m[0], m[1]);
        if let Some(e) = extra {
            h = g.add(h, e);
        }
        let y = f(self, g, h);
        let y = g.gate(y, m[2], active);
        g.add(x, y)
    }

    fn intra_var(&self, g: &mut Graph, i: usize, x: Var, caps: Var, global: Var, s: &Scopes) -> Var {
        let blk = self.layout.intra[i];
        let m = self.mod_chunks(g, global, blk.table, self.config.intra_chunks());
        let act = Some(s.intra_active.clone());
        let x = self.residual(g, x, &m[0..3], act.clone(), None, |me, g, h| {
            me.attention(g, h, h, blk.attn, s.intra_self.clone())
        });
        let x = self.residual(g, x, &m[6..9], Some(s.cross_active.clone()), None, |me, g, h| {
            me.attention(g, h, caps, blk.cross, s.cross.clone())
        });
        self.residual(g, x, &m[3..6], None, None, |me, g, h| me.ffn(g, h, blk.ffn))
    }

    fn inter_var(&self, g: &mut Graph, i: usize, x: Var, caps: Var, global: Var, s: &Scopes) -> Var {
        let blk = self.layout.inter[i];
        let m = self.mod_chunks(g, global, blk.table, self.config.inter_chunks());
        let act = Some(s.inter_active.clone());
        let emb = g.param(blk.panel_emb);
        let emb = g.gather_rows(emb, s.panel_of_row.clone());
        let x = self.residual(g, x, &m[0..3], act.clone(), Some(emb), |me, g, h| {
            me.attention(g, h, h, blk.attn, s.inter_self.clone())
        });
        let x = match blk.cross {
            Some(cross) => self.residual(g, x, &m[6..9], Some(s.inter_cross_active.clone()), None, |me, g, h| {
                me.attention(g, h, caps, cross, s.inter_cross.clone())
            }),
            None => x,
        };
        self.residual(g, x, &m[3..6], None, None, |me, g, h| me.ffn(g, h, blk.ffn))
    }

    fn final_var(&self, g: &mut Graph, x: Var, t_emb: Var) -> Var {
        let d = self.config.hidden_dim;
        let table = g.param(self.layout.final_table);
        let shift = g.col_slice(table, 0, d);
        let scale = g.col_slice(table, d, d);
        let shift = g.add(shift, t_emb);
        let scale = g.add(scale, t_emb);
        let h = g.layer_norm(x);
        let h = g.modulate(h, shift, scale);
        self.linear(g, h, self.layout.final_proj)
    }

    /// Timestep embedding `[1, d]` and global modulation vector `[1, 9d]`.
    pub fn timestep_modulation(&self, t: usize) -> (Tensor, Tensor) {
        let mut g = Graph::new(&self.params);
        let (te, global) = self.timestep_vars(&mut g, t);
        (g.value(te).clone(), g.value(global).clone())
    }

    /// Projected caption tokens `[K * l, d]`.
    pub fn project_captions(&self, c: &CaptionEmbedding) -> Tensor {
        let mut g = Graph::new(&self.params);
        let v = self.caption_vars(&mut g, c);
        g.value(v).clone()
    }

    /// Runs intra-panel block `i` on `x` (`[K * n, d]`, per-panel rows).
    pub fn intra_panel_block(
        &self,
        i: usize,
        x: &Tensor,
        captions: &CaptionEmbedding,
        global: &Tensor,
        masks: &MaskSet,
    ) -> Result<Tensor> {
        let n = self.block_tokens(x, captions, masks)?;
        let s = Scopes::new(masks, captions, n);
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let caps = self.caption_vars(&mut g, captions);
        let gv = g.constant(global.clone());
        let out = self.intra_var(&mut g, i, xv, caps, gv, &s);
        Ok(g.value(out).clone())
    }

    /// Runs inter-panel block `i` on `x` (`[K * n, d]`, per-panel rows).
    pub fn inter_panel_block(
        &self,
        i: usize,
        x: &Tensor,
        captions: &CaptionEmbedding,
        global: &Tensor,
        masks: &MaskSet,
    ) -> Result<Tensor> {
        let n = self.block_tokens(x, captions, masks)?;
        let s = Scopes::new(masks, captions, n);
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let caps = self.caption_vars(&mut g, captions);
        let gv = g.constant(global.clone());
        let out = self.inter_var(&mut g, i, xv, caps, gv, &s);
        Ok(g.value(out).clone())
    }

    fn block_tokens(&self, x: &Tensor, captions: &CaptionEmbedding, masks: &MaskSet) -> Result<usize> {
        let k = self.config.k_max;
        if captions.k != k {
            return Err(Error::Shape(format!("{} captions for {k} panels", captions.k)));
        }
        if x.cols() != self.config.hidden_dim || !x.rows().is_multiple_of(k) {
            return Err(Error::Shape(format!("token matrix {:?} does not fit {k} panels", x.shape())));
        }
        let n = x.rows() / k;
        masks.check(k, n)?;
        Ok(n)
    }
}

/// `[cos(t f_i), sin(t f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * f).cos();
        out[half + i] = (t * f).sin();
    }
    Tensor::row_vector(out)
}

/// 2-D sinusoidal embedding of a `gh × gw` grid, `[gh * gw, d]`. The first
/// half of each row encodes the column, the second half the row.
pub fn pos_embed_2d(d: usize, gh: usize, gw: usize) -> Tensor {
    let quarter = d / 4;
    let mut out = Tensor::zeros(gh * gw, d);
    for y in 0..gh {
        for x in 0..gw {
            let row = out.row_mut(y * gw + x);
            for (axis, coord) in [(0, x), (1, y)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = coord as f64 * omega;
                    row[axis * 2 * quarter + i] = a.sin();
                    row[axis * 2 * quarter + quarter + i] = a.cos();
                }
            }
        }
    }
    out
}

fn tiled_pos_embed(d: usize, gh: usize, gw: usize, k: usize) -> Tensor {
    let one = pos_embed_2d(d, gh, gw);
    let mut data = Vec::with_capacity(k * one.len());
    for _ in 0..k {
        data.extend_from_slice(one.data());
    }
    Tensor::from_vec(k * gh * gw, d, data)
}

/// Reference attention for one head: softmax over valid keys only. A query
/// with no valid key returns its own row (requires `q` and `v` widths equal).
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_valid: &[bool]) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() || key_valid.len() != k.rows() {
        return Err(Error::Shape("masked_attention operand shapes disagree".into()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let valid: Vec<usize> = (0..k.rows()).filter(|&j| key_valid[j]).collect();
    if valid.is_empty() && q.cols() != v.cols() {
        return Err(Error::Shape("pass-through needs equal query and value widths".into()));
    }
    let mut out = Tensor::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        if valid.is_empty() {
            out.row_mut(i).copy_from_slice(q.row(i));
            continue;
        }
        let scores: Vec<f64> = valid
            .iter()
            .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (w, &j) in e.iter().zip(&valid) {
            for (o, x) in out.row_mut(i).iter_mut().zip(v.row(j)) {
                *o += w / z * x;
            }
        }
    }
    Ok(out)
}
