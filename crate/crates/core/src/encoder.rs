//! Hierarchical encoder: patch embedding followed by stages of alternating
//! regular / shifted window blocks, with 2×2 spatial patch merging between
//! stages and a final layer norm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_backward, gelu_forward, LayerNorm, Linear, LnStats};
use crate::params::{Gradients, ParamStore};
use crate::patch_embed::{PatchConfig, PatchEmbed};
use crate::tensor::{Real, TokenGrid};
use crate::window_attention::{AttnCache, WindowAttention, WindowConfig, WindowSize};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Label used in reports, e.g. `UltraSwin-base`.
    pub name: String,
    pub embed_dim: usize,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
    pub patch: PatchConfig,
    pub window: WindowSize,
    pub drop_path: f64,
    pub input_frames: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn base() -> Self {
        Self {
            name: "UltraSwin-base".into(),
            embed_dim: 128,
            heads: vec![4, 8, 16, 32],
            depths: vec![2, 2, 18, 2],
            mlp_ratio: 4,
            patch: PatchConfig::default(),
            window: WindowSize::default(),
            drop_path: 0.0,
            input_frames: 128,
            input_size: 128,
        }
    }

    pub fn small() -> Self {
        Self {
            name: "UltraSwin-small".into(),
            embed_dim: 96,
            heads: vec![3, 6, 12, 24],
            ..Self::base()
        }
    }

    /// Two-stage model on `8 × 16 × 16` clips for tests and smoke runs.
    pub fn toy() -> Self {
        Self {
            name: "UltraSwin-toy".into(),
            embed_dim: 8,
            heads: vec![2, 4],
            depths: vec![2, 2],
            mlp_ratio: 4,
            patch: PatchConfig::default(),
            window: WindowSize {
                temporal: 2,
                spatial: 2,
            },
            drop_path: 0.0,
            input_frames: 8,
            input_size: 16,
        }
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::base()),
            "small" => Ok(Self::small()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected base, small or toy)"
            ))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width of stage `i`: `2^i·C`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Channel width of the final feature map.
    pub fn feature_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.input_frames, self.input_size, self.input_size, self.patch.in_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "{} depths vs {} head counts",
                self.depths.len(),
                self.heads.len()
            ));
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim and mlp_ratio must be positive".into());
        }
        if self.depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.window.temporal == 0 || self.window.spatial == 0 {
            return bad("window extents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(i) % h != 0 {
                return bad(format!("stage {i} width {} not divisible by {h} heads", self.stage_dim(i)));
            }
        }
        let [gt, gh, gw] = self.patch.grid_dims(self.input_dims())?;
        let scale = 1 << (self.num_stages() - 1);
        if gh % scale != 0 || gw % scale != 0 || gt == 0 {
            return bad(format!(
                "token grid {gt}×{gh}×{gw} cannot be halved {} times",
                self.num_stages() - 1
            ));
        }
        Ok(())
    }

    /// Output dims of the patch embedding and of each stage (after its merge, if any).
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 4]>> {
        self.validate()?;
        let [t, mut h, mut w] = self.patch.grid_dims(self.input_dims())?;
        let mut shapes = vec![[t, h, w, self.embed_dim]];
        for i in 0..self.num_stages() {
            if i + 1 < self.num_stages() {
                h /= 2;
                w /= 2;
                shapes.push([t, h, w, self.stage_dim(i + 1)]);
            } else {
                shapes.push([t, h, w, self.stage_dim(i)]);
            }
        }
        Ok(shapes)
    }

    /// Encoder output dims without building any weights.
    pub fn feature_shape(&self) -> Result<[usize; 4]> {
        Ok(*self.stage_shapes()?.last().unwrap())
    }

    /// Learnable scalars in the encoder and regression head, computed from
    /// the configuration alone.
    pub fn count_parameters(&self) -> usize {
        let c = self.embed_dim;
        let table = self.window.bias_table_len();
        let mut total = self.patch.raw_dim() * c + c;
        for (i, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            let d = self.stage_dim(i);
            let hidden = self.mlp_ratio * d;
            let block = 2 * (2 * d) // two layer norms
                + (d * 3 * d + 3 * d) // qkv
                + (d * d + d) // proj
                + table * heads
                + (d * hidden + hidden)
                + (hidden * d + d);
            total += depth * block;
            if i + 1 < self.num_stages() {
                total += 2 * (4 * d) + 4 * d * 2 * d;
            }
        }
        let f = self.feature_dim();
        total += 2 * f;
        total += f * (f / 2) + f / 2 + 2 * (f / 2) + (f / 2) + 1;
        total
    }
}

/// One transformer block: `ẑ = MSA(LN(z)) + z`, `z′ = MLP(LN(ẑ)) + ẑ`, where
/// the MLP is `fc2(GELU(fc1(·)))`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub dim: usize,
    pub shifted: bool,
    pub window: WindowSize,
    pub drop_path: f64,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache<S> {
    x: TokenGrid<S>,
    ln1: LnStats<S>,
    attn: AttnCache<S>,
    zh: Vec<S>,
    ln2_out: Vec<S>,
    ln2: LnStats<S>,
    hidden: Vec<S>,
    act: Vec<S>,
    keep_attn: S,
    keep_mlp: S,
}

impl<S> BlockCache<S> {
    pub fn attention(&self) -> &AttnCache<S> {
        &self.attn
    }
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: WindowSize,
        shifted: bool,
        drop_path: f64,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(store, rng, &format!("{name}.attn"), dim, heads, window)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let hidden = mlp_ratio * dim;
        let fc1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, true);
        Ok(Self {
            dim,
            shifted,
            window,
            drop_path,
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
        })
    }

    pub fn numel(&self) -> usize {
        self.norm1.numel() + self.attn.numel() + self.norm2.numel() + self.fc1.numel() + self.fc2.numel()
    }

    pub fn window_config(&self, grid: [usize; 3]) -> WindowConfig {
        WindowConfig::for_grid(self.window, grid, self.shifted)
    }

    fn keep_scale<S: Real>(&self, rng: Option<&mut ChaCha8Rng>) -> S {
        match rng {
            Some(rng) if self.drop_path > 0.0 => {
                if rng.gen_bool(1.0 - self.drop_path) {
                    S::lit(1.0 / (1.0 - self.drop_path))
                } else {
                    S::zero()
                }
            }
            _ => S::one(),
        }
    }

    /// `rng` enables stochastic depth (training only).
    pub fn forward<S: Real>(
        &self,
        store: &ParamStore<S>,
        x: &TokenGrid<S>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TokenGrid<S>, BlockCache<S>)> {
        if x.channels() != self.dim {
            return Err(Error::Shape(format!("block expects width {}, got {}", self.dim, x.channels())));
        }
        let dims = x.dims();
        let grid = [dims[0], dims[1], dims[2]];
        let keep_attn: S = self.keep_scale(rng.as_deref_mut());
        let keep_mlp: S = self.keep_scale(rng.as_deref_mut());

        let (ln1_out, ln1) = self.norm1.forward(store, x.data());
        let (a, attn) = self
            .attn
            .forward(store, &TokenGrid::from_vec(dims, ln1_out)?, self.window_config(grid))?;
        let zh: Vec<S> = x.data().iter().zip(a.data()).map(|(z, a)| *z + keep_attn * *a).collect();
        let (ln2_out, ln2) = self.norm2.forward(store, &zh);
        let hidden = self.fc1.forward(store, &ln2_out);
        let act = gelu_forward(&hidden);
        let m = self.fc2.forward(store, &act);
        let out: Vec<S> = zh.iter().zip(&m).map(|(z, m)| *z + keep_mlp * *m).collect();
        let cache = BlockCache {
            x: x.clone(),
            ln1,
            attn,
            zh,
            ln2_out,
            ln2,
            hidden,
            act,
            keep_attn,
            keep_mlp,
        };
        Ok((TokenGrid::from_vec(dims, out)?, cache))
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        cache: &BlockCache<S>,
        dy: &TokenGrid<S>,
    ) -> Result<TokenGrid<S>> {
        let dims = dy.dims();
        let dm: Vec<S> = dy.data().iter().map(|d| *d * cache.keep_mlp).collect();
        let dact = self.fc2.backward(store, grads, &cache.act, &dm);
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dln2 = self.fc1.backward(store, grads, &cache.ln2_out, &dhidden);
        let dzh_mlp = self.norm2.backward(store, grads, &cache.zh, &cache.ln2, &dln2);
        let dzh: Vec<S> = dy.data().iter().zip(&dzh_mlp).map(|(a, b)| *a + *b).collect();

        let da: Vec<S> = dzh.iter().map(|d| *d * cache.keep_attn).collect();
        let dln1 = self
            .attn
            .backward(store, grads, &cache.attn, &TokenGrid::from_vec(dims, da)?)?;
        let dx_attn = self.norm1.backward(store, grads, cache.x.data(), &cache.ln1, dln1.data());
        let dx: Vec<S> = dzh.iter().zip(&dx_attn).map(|(a, b)| *a + *b).collect();
        TokenGrid::from_vec(dims, dx)
    }
}

/// Gather each 2×2 spatial neighbourhood into `4D` channels, in the order
/// `(0,0), (1,0), (0,1), (1,1)` as `(dh, dw)`.
pub fn merge_gather<S: Copy + Default>(x: &TokenGrid<S>) -> Result<TokenGrid<S>> {
    let [t, h, w, d] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("patch merging needs even H′, W′, got {h}×{w}")));
    }
    let mut out = Vec::with_capacity(x.data().len());
    for f in 0..t {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (dh, dw) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out.extend_from_slice(x.token(f, 2 * i + dh, 2 * j + dw));
                }
            }
        }
    }
    TokenGrid::from_vec([t, h / 2, w / 2, 4 * d], out)
}

fn merge_scatter<S: Copy + Default>(g: &TokenGrid<S>) -> TokenGrid<S> {
    let [t, h2, w2, d4] = g.dims();
    let d = d4 / 4;
    let mut out = TokenGrid::zeros([t, h2 * 2, w2 * 2, d]);
    for f in 0..t {
        for i in 0..h2 {
            for j in 0..w2 {
                let src = g.token(f, i, j);
                for (k, (dh, dw)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    let o = out.offset(f, 2 * i + dh, 2 * j + dw);
                    out.data_mut()[o..o + d].copy_from_slice(&src[k * d..(k + 1) * d]);
                }
            }
        }
    }
    out
}

/// Spatial 2× downsampling: gather 2×2 → LN(4D) → linear 4D → 2D (no bias).
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

#[derive(Clone, Debug)]
pub struct MergeCache<S> {
    gathered: TokenGrid<S>,
    normed: Vec<S>,
    stats: LnStats<S>,
}

impl PatchMerge {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), 4 * dim);
        let reduction = Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false);
        Self { dim, norm, reduction }
    }

    pub fn numel(&self) -> usize {
        self.norm.numel() + self.reduction.numel()
    }

    pub fn forward<S: Real>(&self, store: &ParamStore<S>, x: &TokenGrid<S>) -> Result<(TokenGrid<S>, MergeCache<S>)> {
        if x.channels() != self.dim {
            return Err(Error::Shape(format!("merge expects width {}, got {}", self.dim, x.channels())));
        }
        let gathered = merge_gather(x)?;
        let [t, h, w, _] = gathered.dims();
        let (normed, stats) = self.norm.forward(store, gathered.data());
        let y = self.reduction.forward(store, &normed);
        Ok((
            TokenGrid::from_vec([t, h, w, 2 * self.dim], y)?,
            MergeCache { gathered, normed, stats },
        ))
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        cache: &MergeCache<S>,
        dy: &TokenGrid<S>,
    ) -> Result<TokenGrid<S>> {
        let dnormed = self.reduction.backward(store, grads, &cache.normed, dy.data());
        let dg = self
            .norm
            .backward(store, grads, cache.gathered.data(), &cache.stats, &dnormed);
        Ok(merge_scatter(&TokenGrid::from_vec(cache.gathered.dims(), dg)?))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Clone, Debug)]
pub struct StageCache<S> {
    pub blocks: Vec<BlockCache<S>>,
    merge: Option<MergeCache<S>>,
}

/// Patch embedding, stages, and the closing layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace<S> {
    raw_patches: TokenGrid<S>,
    pub stages: Vec<StageCache<S>>,
    pre_norm: TokenGrid<S>,
    norm: LnStats<S>,
}

impl Encoder {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed::new(store, rng, config.patch, config.embed_dim);
        let total_blocks: usize = config.depths.iter().sum();
        let mut block_no = 0;
        let mut stages = Vec::with_capacity(config.num_stages());
        for (i, (&depth, &heads)) in config.depths.iter().zip(&config.heads).enumerate() {
            let dim = config.stage_dim(i);
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                // stochastic depth grows linearly from 0 to drop_path over all blocks
                let rate = if total_blocks > 1 {
                    config.drop_path * block_no as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                blocks.push(SwinBlock::new(
                    store,
                    rng,
                    &format!("layers.{i}.blocks.{b}"),
                    dim,
                    heads,
                    config.mlp_ratio,
                    config.window,
                    b % 2 == 1,
                    rate,
                )?);
                block_no += 1;
            }
            let merge = (i + 1 < config.num_stages())
                .then(|| PatchMerge::new(store, rng, &format!("layers.{i}.downsample"), dim));
            stages.push(Stage { blocks, merge });
        }
        let norm = LayerNorm::new(store, "norm", config.feature_dim());
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
            norm,
        })
    }

    pub fn numel(&self) -> usize {
        self.embed.numel()
            + self
                .stages
                .iter()
                .map(|s| s.blocks.iter().map(SwinBlock::numel).sum::<usize>() + s.merge.as_ref().map_or(0, PatchMerge::numel))
                .sum::<usize>()
            + self.norm.numel()
    }

    /// `video: [T × H × W × 3]` → features `[T/2 × H/2^(k+1) × W/2^(k+1) × 2^(k−1)·C]`
    /// for `k` stages.
    pub fn forward<S: Real>(
        &self,
        store: &ParamStore<S>,
        video: &TokenGrid<S>,
        mut rng: Option<&mut ChaCha8Rng>,
        keep_trace: bool,
    ) -> Result<(TokenGrid<S>, Option<EncoderTrace<S>>)> {
        if video.dims() != self.config.input_dims() {
            return Err(Error::Shape(format!(
                "{} expects input {:?}, got {:?}",
                self.config.name,
                self.config.input_dims(),
                video.dims()
            )));
        }
        let (mut x, raw_patches) = self.embed.forward(store, video)?;
        let mut stage_caches = Vec::new();
        for stage in &self.stages {
            let mut blocks = Vec::new();
            for block in &stage.blocks {
                let (y, cache) = block.forward(store, &x, rng.as_deref_mut())?;
                if keep_trace {
                    blocks.push(cache);
                }
                x = y;
            }
            let mut merge = None;
            if let Some(m) = &stage.merge {
                let (y, cache) = m.forward(store, &x)?;
                if keep_trace {
                    merge = Some(cache);
                }
                x = y;
            }
            stage_caches.push(StageCache { blocks, merge });
        }
        let (out, norm) = self.norm.forward(store, x.data());
        let out = TokenGrid::from_vec(x.dims(), out)?;
        let trace = keep_trace.then_some(EncoderTrace {
            raw_patches,
            stages: stage_caches,
            pre_norm: x,
            norm,
        });
        Ok((out, trace))
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        trace: &EncoderTrace<S>,
        dfeatures: &TokenGrid<S>,
    ) -> Result<()> {
        let d = self
            .norm
            .backward(store, grads, trace.pre_norm.data(), &trace.norm, dfeatures.data());
        let mut dx = TokenGrid::from_vec(trace.pre_norm.dims(), d)?;
        for (stage, cache) in self.stages.iter().zip(&trace.stages).rev() {
            if let (Some(m), Some(mc)) = (&stage.merge, &cache.merge) {
                dx = m.backward(store, grads, mc, &dx)?;
            }
            for (block, bc) in stage.blocks.iter().zip(&cache.blocks).rev() {
                dx = block.backward(store, grads, bc, &dx)?;
            }
        }
        self.embed.backward(store, grads, &trace.raw_patches, &dx);
        Ok(())
    }
}
