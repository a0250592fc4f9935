//! Pluggable image codec and text embedder, with dependency-free stubs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::latent::{CaptionEmbedding, LatentStack};
use crate::error::{Error, Result};
use crate::panelize::PageImage;

/// Maps page-resolution images to `C`-channel latents at `1/factor` size and back.
pub trait ImageCodec {
    fn latent_channels(&self) -> usize;
    fn factor(&self) -> usize;
    /// Bounds of latents produced from valid images, if known.
    fn latent_range(&self) -> Option<(f64, f64)> {
        None
    }
    fn encode(&self, images: &[PageImage]) -> Result<LatentStack>;
    /// Decoded images are clamped to `[0, 1]`.
    fn decode(&self, z: &LatentStack) -> Result<Vec<PageImage>>;
}

/// Encoder: average over each `factor × factor` block and the RGB channels,
/// replicated to every latent channel. Decoder: channel mean, nearest-neighbor
/// upsampled, clamped.
#[derive(Debug, Clone, Copy)]
pub struct PoolCodec {
    pub factor: usize,
    pub channels: usize,
}

impl Default for PoolCodec {
    fn default() -> Self {
        PoolCodec { factor: 8, channels: 4 }
    }
}

impl ImageCodec for PoolCodec {
    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn encode(&self, images: &[PageImage]) -> Result<LatentStack> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images to encode".into()))?;
        let (hh, ww) = (first.height(), first.width());
        let f = self.factor;
        if hh % f != 0 || ww % f != 0 {
            return Err(Error::Shape(format!("image {hh}x{ww} not divisible by {f}")));
        }
        let (h, w) = (hh / f, ww / f);
        let mut z = LatentStack::zeros(images.len(), self.channels, h, w);
        for (k, img) in images.iter().enumerate() {
            if (img.height(), img.width()) != (hh, ww) {
                return Err(Error::Shape("images differ in size".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            sum += img.gray(yy, xx);
                        }
                    }
                    let v = sum / (f * f) as f64;
                    for c in 0..self.channels {
                        z.set(k, c, y, x, v);
                    }
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, z: &LatentStack) -> Result<Vec<PageImage>> {
        let f = self.factor;
        let mut out = Vec::with_capacity(z.k);
        for k in 0..z.k {
            let mut img = PageImage::white(z.h * f, z.w * f);
            for y in 0..z.h {
                for x in 0..z.w {
                    let mean = (0..z.c).map(|c| z.get(k, c, y, x)).sum::<f64>() / z.c as f64;
                    let v = mean.clamp(0.0, 1.0);
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            img.set_rgb(yy, xx, v);
                        }
                    }
                }
            }
            out.push(img);
        }
        Ok(out)
    }
}

/// Turns one caption per panel into token embeddings.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, captions: &[String]) -> CaptionEmbedding;
}

/// Whitespace tokens, each embedded as a standard-normal vector seeded by a
/// hash of the token text. Case-sensitive; at most `max_tokens` per caption.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, captions: &[String]) -> CaptionEmbedding {
        let tokens: Vec<Vec<&str>> = captions
            .iter()
            .map(|c| c.split_whitespace().take(self.max_tokens).collect())
            .collect();
        let l = tokens.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let k = captions.len();
        let mut data = vec![0.0; k * l * self.dim];
        let mut valid = vec![false; k * l];
        for (i, toks) in tokens.iter().enumerate() {
            for (j, tok) in toks.iter().enumerate() {
                let row = i * l + j;
                data[row * self.dim..(row + 1) * self.dim].copy_from_slice(&self.token_vector(tok));
                valid[row] = true;
            }
        }
        CaptionEmbedding {
            k,
            l,
            dim: self.dim,
            data,
            valid,
        }
    }
}
