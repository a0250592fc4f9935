//! Latent stacks, token grids, masks and caption embeddings.

use crate::dataset::TrainingRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `K × C × h × w` latents, one `C × h × w` block per panel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl LatentStack {
    pub fn zeros(k: usize, c: usize, h: usize, w: usize) -> Self {
        LatentStack {
            k,
            c,
            h,
            w,
            data: vec![0.0; k * c * h * w],
        }
    }

    pub fn from_vec(k: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * c * h * w {
            return Err(Error::Shape(format!(
                "{} values for a {k}x{c}x{h}x{w} latent stack",
                data.len()
            )));
        }
        Ok(LatentStack { k, c, h, w, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn panel_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn panel(&self, k: usize) -> &[f64] {
        let n = self.panel_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn panel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.panel_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    fn index(&self, k: usize, c: usize, y: usize, x: usize) -> usize {
        ((k * self.c + c) * self.h + y) * self.w + x
    }

    pub fn get(&self, k: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(k, c, y, x)]
    }

    pub fn set(&mut self, k: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(k, c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &LatentStack) -> bool {
        (self.k, self.c, self.h, self.w) == (other.k, other.c, other.h, other.w)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenView {
    /// `K` sequences of `n` tokens (row `k * n + pos`).
    PerPanel,
    /// `n` sequences of `K` tokens (row `pos * K + k`).
    PerPosition,
}

/// `K × n × d` tokens in one of two layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub view: TokenView,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn from_tensor(k: usize, n: usize, view: TokenView, t: Tensor) -> Result<Self> {
        if t.rows() != k * n {
            return Err(Error::Shape(format!("{} rows for {k}x{n} tokens", t.rows())));
        }
        Ok(TokenGrid {
            k,
            n,
            d: t.cols(),
            view,
            data: t.into_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.k * self.n, self.d, self.data.clone())
    }

    pub fn token(&self, k: usize, pos: usize) -> &[f64] {
        let row = match self.view {
            TokenView::PerPanel => k * self.n + pos,
            TokenView::PerPosition => pos * self.k + k,
        };
        &self.data[row * self.d..(row + 1) * self.d]
    }

    /// Same tokens, other layout.
    pub fn transposed(&self) -> TokenGrid {
        let view = match self.view {
            TokenView::PerPanel => TokenView::PerPosition,
            TokenView::PerPosition => TokenView::PerPanel,
        };
        let mut out = TokenGrid {
            k: self.k,
            n: self.n,
            d: self.d,
            view,
            data: vec![0.0; self.data.len()],
        };
        for k in 0..self.k {
            for pos in 0..self.n {
                let row = match view {
                    TokenView::PerPanel => k * self.n + pos,
                    TokenView::PerPosition => pos * self.k + k,
                };
                out.data[row * self.d..(row + 1) * self.d].copy_from_slice(self.token(k, pos));
            }
        }
        out
    }

    pub fn to_view(&self, view: TokenView) -> TokenGrid {
        if self.view == view {
            self.clone()
        } else {
            self.transposed()
        }
    }
}

/// Splits each panel into `p × p` patches; token `(k, py * (w/p) + px)` holds
/// the patch values ordered `(dy, dx, c)`.
pub fn patchify(x: &LatentStack, p: usize) -> Result<TokenGrid> {
    if p == 0 || !x.h.is_multiple_of(p) || !x.w.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "latent {}x{} not divisible by patch size {p}",
            x.h, x.w
        )));
    }
    let (gh, gw) = (x.h / p, x.w / p);
    let n = gh * gw;
    let d = p * p * x.c;
    let mut data = vec![0.0; x.k * n * d];
    for k in 0..x.k {
        for py in 0..gh {
            for px in 0..gw {
                let row = k * n + py * gw + px;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..x.c {
                            data[row * d + (dy * p + dx) * x.c + c] = x.get(k, c, py * p + dy, px * p + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        k: x.k,
        n,
        d,
        view: TokenView::PerPanel,
        data,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(t: &TokenGrid, c: usize, h: usize, w: usize, p: usize) -> Result<LatentStack> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || t.n != (h / p) * (w / p) || t.d != p * p * c {
        return Err(Error::Shape(format!(
            "{}x{} tokens do not tile a {c}x{h}x{w} latent with patch {p}",
            t.n, t.d
        )));
    }
    let gw = w / p;
    let mut out = LatentStack::zeros(t.k, c, h, w);
    for k in 0..t.k {
        for pos in 0..t.n {
            let (py, px) = (pos / gw, pos % gw);
            let tok = t.token(k, pos);
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out.set(k, ch, py * p + dy, px * p + dx, tok[(dy * p + dx) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bubble and padding masks at token resolution; `true` = excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    /// `K` rows of `n` flags.
    pub intra: Vec<Vec<bool>>,
    /// `K` flags, true for padded panels.
    pub inter: Vec<bool>,
}

impl MaskSet {
    pub fn unmasked(k: usize, n: usize) -> Self {
        MaskSet {
            intra: vec![vec![false; n]; k],
            inter: vec![false; k],
        }
    }

    /// No bubble masks; panels from `real` on are padded.
    pub fn for_inference(k: usize, n: usize, real: usize) -> Self {
        MaskSet {
            intra: vec![vec![false; n]; k],
            inter: (0..k).map(|i| i >= real).collect(),
        }
    }

    pub fn from_record(rec: &TrainingRecord) -> Self {
        MaskSet {
            intra: rec.intra_mask.iter().map(|m| m.cells.clone()).collect(),
            inter: rec.inter_mask.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.inter.len()
    }

    pub fn check(&self, k: usize, n: usize) -> Result<()> {
        if self.inter.len() != k || self.intra.len() != k || self.intra.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("mask set does not match {k} panels x {n} tokens")));
        }
        if self.inter.iter().all(|&p| p) {
            return Err(Error::InvalidArgument("every panel is padded".into()));
        }
        for (row, &pad) in self.intra.iter().zip(&self.inter) {
            if pad && row.iter().any(|&m| m) {
                return Err(Error::InvalidArgument("padded panel carries a bubble mask".into()));
            }
        }
        Ok(())
    }

    /// Per-element inclusion flags for a patchified `[K*n, p*p*c]` tensor.
    pub fn token_include(&self, token_width: usize) -> Vec<bool> {
        let mut out = Vec::new();
        for row in &self.intra {
            for &m in row {
                out.extend(std::iter::repeat_n(!m, token_width));
            }
        }
        out
    }

    /// Per-element inclusion flags in latent layout.
    pub fn latent_include(&self, c: usize, h: usize, w: usize, p: usize) -> Vec<bool> {
        let gw = w / p;
        let mut out = Vec::with_capacity(self.intra.len() * c * h * w);
        for row in &self.intra {
            for _ in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.push(!row[(y / p) * gw + x / p]);
                    }
                }
            }
        }
        out
    }
}

/// `K × l × d_T` caption token embeddings with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub k: usize,
    pub l: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CaptionEmbedding {
    pub fn token(&self, k: usize, j: usize) -> &[f64] {
        let row = k * self.l + j;
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn is_valid(&self, k: usize, j: usize) -> bool {
        self.valid[k * self.l + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.k * self.l, self.dim, self.data.clone())
    }

    /// Replaces panel `k`'s tokens with those of panel `src_k` in `other`.
    pub fn with_panel_from(&self, k: usize, other: &CaptionEmbedding, src_k: usize) -> Result<Self> {
        if other.l != self.l || other.dim != self.dim {
            return Err(Error::Shape("caption embeddings differ in shape".into()));
        }
        let mut out = self.clone();
        let (a, b) = (k * self.l, src_k * self.l);
        out.data[a * self.dim..(a + self.l) * self.dim]
            .copy_from_slice(&other.data[b * self.dim..(b + self.l) * self.dim]);
        out.valid[a..a + self.l].copy_from_slice(&other.valid[b..b + self.l]);
        Ok(out)
    }
}
