//! 3D patch partition and linear token embedding.
//!
//! A video `[T × H × W × 3]` is cut into non-overlapping `2 × 4 × 4 × 3`
//! blocks. Each block is flattened in `(t, h, w, c)` row-major order into a
//! raw feature of length 96, then projected to the embedding width `C`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{affine, Linear};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub in_channels: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_t: 2,
            patch_h: 4,
            patch_w: 4,
            in_channels: 3,
        }
    }
}

impl PatchConfig {
    /// Length of a flattened patch: `patch_t·patch_h·patch_w·in_channels`.
    pub fn raw_dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * self.in_channels
    }

    /// Token grid dims for a video of the given size.
    pub fn grid_dims(&self, video: [usize; 4]) -> Result<[usize; 3]> {
        let [t, h, w, c] = video;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "video has {c} channels, patches expect {}",
                self.in_channels
            )));
        }
        if t % self.patch_t != 0 || h % self.patch_h != 0 || w % self.patch_w != 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "video {t}×{h}×{w} not divisible into {}×{}×{} patches",
                self.patch_t, self.patch_h, self.patch_w
            )));
        }
        Ok([t / self.patch_t, h / self.patch_h, w / self.patch_w])
    }
}

/// Cut a video into flattened 3D patches: `[T/pt × H/ph × W/pw × raw_dim]`.
pub fn partition_3d<S: Copy + Default>(video: &TokenGrid<S>, cfg: &PatchConfig) -> Result<TokenGrid<S>> {
    let [gt, gh, gw] = cfg.grid_dims(video.dims())?;
    let (pt, ph, pw, c) = (cfg.patch_t, cfg.patch_h, cfg.patch_w, cfg.in_channels);
    let mut data = Vec::with_capacity(video.data().len());
    for i in 0..gt {
        for j in 0..gh {
            for k in 0..gw {
                for dt in 0..pt {
                    for dh in 0..ph {
                        let o = video.offset(i * pt + dt, j * ph + dh, k * pw);
                        data.extend_from_slice(&video.data()[o..o + pw * c]);
                    }
                }
            }
        }
    }
    TokenGrid::from_vec([gt, gh, gw, cfg.raw_dim()], data)
}

/// Exact inverse of [`partition_3d`].
pub fn unpartition_3d<S: Copy + Default>(tokens: &TokenGrid<S>, cfg: &PatchConfig) -> Result<TokenGrid<S>> {
    let [gt, gh, gw, d] = tokens.dims();
    if d != cfg.raw_dim() {
        return Err(Error::Shape(format!(
            "token width {d} is not the raw patch width {}",
            cfg.raw_dim()
        )));
    }
    let (pt, ph, pw, c) = (cfg.patch_t, cfg.patch_h, cfg.patch_w, cfg.in_channels);
    let mut video = TokenGrid::zeros([gt * pt, gh * ph, gw * pw, c]);
    for i in 0..gt {
        for j in 0..gh {
            for k in 0..gw {
                let tok = tokens.token(i, j, k);
                for dt in 0..pt {
                    for dh in 0..ph {
                        let o = video.offset(i * pt + dt, j * ph + dh, k * pw);
                        let s = (dt * ph + dh) * pw * c;
                        video.data_mut()[o..o + pw * c].copy_from_slice(&tok[s..s + pw * c]);
                    }
                }
            }
        }
    }
    Ok(video)
}

/// Per-token affine map `x·W + b`, `W: [raw × C]`.
pub fn embed<S: Real>(tokens: &TokenGrid<S>, weight: &[S], bias: &[S]) -> Result<TokenGrid<S>> {
    let [t, h, w, d] = tokens.dims();
    let c = bias.len();
    if weight.len() != d * c {
        return Err(Error::Shape(format!(
            "embedding weight has {} entries, expected {d}×{c}",
            weight.len()
        )));
    }
    TokenGrid::from_vec([t, h, w, c], affine(tokens.data(), weight, Some(bias), d, c))
}

/// Learnable patch embedding layer.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchConfig,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut impl Rng, cfg: PatchConfig, embed_dim: usize) -> Self {
        let proj = Linear::new(store, rng, "patch_embed.proj", cfg.raw_dim(), embed_dim, true);
        Self { cfg, proj }
    }

    pub fn numel(&self) -> usize {
        self.proj.numel()
    }

    /// Returns the embedded tokens and the raw patches (kept for backward).
    pub fn forward<S: Real>(&self, store: &ParamStore<S>, video: &TokenGrid<S>) -> Result<(TokenGrid<S>, TokenGrid<S>)> {
        let raw = partition_3d(video, &self.cfg)?;
        let [t, h, w, _] = raw.dims();
        let out = self.proj.forward(store, raw.data());
        Ok((TokenGrid::from_vec([t, h, w, self.proj.out_dim], out)?, raw))
    }

    /// Accumulates parameter gradients. The input video is not differentiated.
    pub fn backward<S: Real>(&self, store: &ParamStore<S>, grads: &mut Gradients<S>, raw: &TokenGrid<S>, dy: &TokenGrid<S>) {
        self.proj.backward(store, grads, raw.data(), dy.data());
    }
}
