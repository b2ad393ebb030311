//! 3D (shifted-)window multi-head self-attention with relative position bias.
//!
//! Tokens `[T′ × H′ × W′ × D]` are grouped into non-overlapping `P × M × M`
//! windows and attention is computed inside each window only. Alternate
//! blocks roll the grid by half a window first, so neighbouring windows
//! exchange information; tokens that were not contiguous before the roll are
//! kept apart with an additive mask. Grids that do not divide evenly are
//! zero-padded and the padded slots are masked out.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, INIT_STD};
use crate::params::{trunc_normal, Gradients, ParamId, ParamStore};
use crate::tensor::{Real, TokenGrid};

/// Additive pre-softmax value for disallowed token pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Configured window extent: `temporal` is P, `spatial` is M.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSize {
    pub temporal: usize,
    pub spatial: usize,
}

impl Default for WindowSize {
    fn default() -> Self {
        Self {
            temporal: 8,
            spatial: 7,
        }
    }
}

impl WindowSize {
    pub fn as_array(&self) -> [usize; 3] {
        [self.temporal, self.spatial, self.spatial]
    }

    /// Entries in the relative position bias table per head: `(2P−1)(2M−1)²`.
    pub fn bias_table_len(&self) -> usize {
        (2 * self.temporal - 1) * (2 * self.spatial - 1) * (2 * self.spatial - 1)
    }
}

/// Window extent and roll offsets actually applied to one grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowConfig {
    /// Regular (`shifted = false`) or half-window-shifted layout.
    pub fn new(size: WindowSize, shifted: bool) -> Result<Self> {
        let window = size.as_array();
        if window.contains(&0) {
            return Err(Error::Config(format!("window {window:?} has a zero extent")));
        }
        let shift = if shifted {
            window.map(|w| w / 2)
        } else {
            [0; 3]
        };
        Ok(Self { window, shift })
    }

    /// Layout used by a block on a concrete grid. Along any axis the grid
    /// fits inside one window, the window shrinks to the grid and that axis
    /// is not shifted.
    pub fn for_grid(size: WindowSize, grid: [usize; 3], shifted: bool) -> Self {
        let conf = size.as_array();
        let mut window = [0; 3];
        let mut shift = [0; 3];
        for a in 0..3 {
            if grid[a] <= conf[a] {
                window[a] = grid[a].max(1);
            } else {
                window[a] = conf[a];
                if shifted {
                    shift[a] = conf[a] / 2;
                }
            }
        }
        Self { window, shift }
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != [0; 3]
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// `⌈T′/P⌉·⌈H′/M⌉·⌈W′/M⌉`
    pub fn num_windows(&self, grid: [usize; 3]) -> usize {
        (0..3).map(|a| grid[a].div_ceil(self.window[a])).product()
    }
}

/// Windows gathered from a token grid, `[nW × N × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<S> {
    pub windows: Vec<S>,
    pub window: [usize; 3],
    /// `(T′, H′, W′)` of the source grid.
    pub grid: [usize; 3],
    pub dim: usize,
    /// Source token index (into the grid, row-major) for each slot, `None` for padding.
    pub origin: Vec<Option<usize>>,
}

impl<S: Copy> WindowBatch<S> {
    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        self.origin.len() / self.tokens_per_window()
    }

    pub fn is_valid(&self, slot: usize) -> bool {
        self.origin[slot].is_some()
    }

    pub fn window_rows(&self, w: usize) -> &[S] {
        let len = self.tokens_per_window() * self.dim;
        &self.windows[w * len..(w + 1) * len]
    }
}

/// Slot → source token map for a window layout.
pub fn window_origins(grid: [usize; 3], window: [usize; 3]) -> Vec<Option<usize>> {
    let counts = [0, 1, 2].map(|a| grid[a].div_ceil(window[a]));
    let n = window.iter().product::<usize>();
    let mut origin = Vec::with_capacity(counts.iter().product::<usize>() * n);
    for wt in 0..counts[0] {
        for wh in 0..counts[1] {
            for ww in 0..counts[2] {
                for lt in 0..window[0] {
                    for lh in 0..window[1] {
                        for lw in 0..window[2] {
                            let (t, h, w) = (wt * window[0] + lt, wh * window[1] + lh, ww * window[2] + lw);
                            origin.push(
                                (t < grid[0] && h < grid[1] && w < grid[2])
                                    .then(|| (t * grid[1] + h) * grid[2] + w),
                            );
                        }
                    }
                }
            }
        }
    }
    origin
}

fn grid3<S: Copy + Default>(tokens: &TokenGrid<S>) -> [usize; 3] {
    let [t, h, w, _] = tokens.dims();
    [t, h, w]
}

/// Gather tokens into windows; non-divisible extents are zero-padded.
pub fn window_partition<S: Copy + Default>(tokens: &TokenGrid<S>, window: [usize; 3]) -> WindowBatch<S> {
    let grid = grid3(tokens);
    let dim = tokens.channels();
    let origin = window_origins(grid, window);
    let mut windows = vec![S::default(); origin.len() * dim];
    for (slot, src) in origin.iter().enumerate() {
        if let Some(src) = src {
            windows[slot * dim..(slot + 1) * dim].copy_from_slice(&tokens.data()[src * dim..(src + 1) * dim]);
        }
    }
    WindowBatch {
        windows,
        window,
        grid,
        dim,
        origin,
    }
}

/// Scatter windows back into a grid, dropping padded slots.
pub fn window_reverse<S: Copy + Default>(batch: &WindowBatch<S>) -> Result<TokenGrid<S>> {
    let [t, h, w] = batch.grid;
    let dim = batch.dim;
    let total = t * h * w;
    if batch.windows.len() != batch.origin.len() * dim {
        return Err(Error::Shape(format!(
            "{} window values for {} slots of width {dim}",
            batch.windows.len(),
            batch.origin.len()
        )));
    }
    let mut out = TokenGrid::zeros([t, h, w, dim]);
    let mut seen = vec![false; total];
    for (slot, src) in batch.origin.iter().enumerate() {
        let Some(src) = *src else { continue };
        if src >= total || seen[src] {
            return Err(Error::Shape(format!("origin map is not a bijection at slot {slot}")));
        }
        seen[src] = true;
        out.data_mut()[src * dim..(src + 1) * dim].copy_from_slice(&batch.windows[slot * dim..(slot + 1) * dim]);
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Shape("origin map does not cover every token".into()));
    }
    Ok(out)
}

/// `out[i,j,k] = in[(i+s_t) mod T′, (j+s_h) mod H′, (k+s_w) mod W′]`.
pub fn cyclic_shift<S: Copy + Default>(tokens: &TokenGrid<S>, offsets: [isize; 3]) -> TokenGrid<S> {
    let grid = grid3(tokens);
    if grid.contains(&0) {
        return tokens.clone();
    }
    let s = [0, 1, 2].map(|a| offsets[a].rem_euclid(grid[a] as isize) as usize);
    if s == [0; 3] {
        return tokens.clone();
    }
    let dim = tokens.channels();
    let mut out = TokenGrid::zeros(tokens.dims());
    for i in 0..grid[0] {
        let si = (i + s[0]) % grid[0];
        for j in 0..grid[1] {
            let sj = (j + s[1]) % grid[1];
            for k in 0..grid[2] {
                let sk = (k + s[2]) % grid[2];
                let dst = out.offset(i, j, k);
                let src = tokens.offset(si, sj, sk);
                out.data_mut()[dst..dst + dim].copy_from_slice(&tokens.data()[src..src + dim]);
            }
        }
    }
    out
}

/// Region label of every window slot in the rolled grid; `-1` marks padding.
///
/// Along a rolled axis of length `L` with offset `s`, positions `[0, L−s)`
/// hold original tokens `[s, L)` and positions `[L−s, L)` hold the wrapped
/// tokens `[0, s)`. Two tokens may attend to each other only if they carry
/// the same label on every axis.
pub fn region_labels(grid: [usize; 3], cfg: &WindowConfig) -> Vec<i32> {
    let origin = window_origins(grid, cfg.window);
    let seg = |pos: usize, axis: usize| -> i32 {
        let l = grid[axis];
        let s = cfg.shift[axis] % l.max(1);
        i32::from(s != 0 && pos >= l - s)
    };
    origin
        .iter()
        .map(|o| match o {
            None => -1,
            Some(idx) => {
                let w = idx % grid[2];
                let h = (idx / grid[2]) % grid[1];
                let t = idx / (grid[1] * grid[2]);
                seg(t, 0) * 4 + seg(h, 1) * 2 + seg(w, 2)
            }
        })
        .collect()
}

/// Materialised additive masks `[nW × N × N]`: 0 for allowed pairs,
/// [`MASK_VALUE`] otherwise. Padded slots are masked against everything.
pub fn attention_mask<S: Real>(grid: [usize; 3], cfg: &WindowConfig) -> Vec<S> {
    let labels = region_labels(grid, cfg);
    let n = cfg.tokens_per_window();
    let masked = S::lit(MASK_VALUE);
    let mut mask = Vec::with_capacity(labels.len() * n);
    for win in labels.chunks(n) {
        for &a in win {
            for &b in win {
                mask.push(if a >= 0 && a == b { S::zero() } else { masked });
            }
        }
    }
    mask
}

/// `idx[p·N + q]` into the bias table for tokens `p, q` of a window with
/// extent `window`, using the strides of the configured table extent.
pub fn relative_position_index(window: [usize; 3], table: WindowSize) -> Vec<usize> {
    let [pt, pm, _] = table.as_array();
    let (st, sh) = ((2 * pm - 1) * (2 * pm - 1), 2 * pm - 1);
    let coords: Vec<[usize; 3]> = (0..window[0])
        .flat_map(|t| (0..window[1]).flat_map(move |h| (0..window[2]).map(move |w| [t, h, w])))
        .collect();
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let dt = a[0] + pt - 1 - b[0];
            let dh = a[1] + pm - 1 - b[1];
            let dw = a[2] + pm - 1 - b[2];
            idx.push(dt * st + dh * sh + dw);
        }
    }
    idx
}

struct AttnGeometry {
    windows: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
}

impl AttnGeometry {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Softmax attention inside every window. Returns the concatenated head
/// outputs `[nW × N × D]`, the probabilities `[nW × heads × N × N]`, and the
/// number of score entries evaluated.
fn attention_core<S: Real, M>(
    qkv: &[S],
    geo: &AttnGeometry,
    bias: Option<(&[S], &[usize])>,
    mask: M,
) -> (Vec<S>, Vec<S>, u64)
where
    M: Fn(usize, usize, usize) -> S + Sync,
{
    let AttnGeometry { tokens: n, dim, heads, .. } = *geo;
    let hd = geo.head_dim();
    let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
    let mut ctx = vec![S::zero(); geo.windows * n * dim];
    let mut probs = vec![S::zero(); geo.windows * heads * n * n];
    let counts: Vec<u64> = ctx
        .par_chunks_mut(n * dim)
        .zip(probs.par_chunks_mut(heads * n * n))
        .enumerate()
        .map(|(w, (ctx_w, p_w))| {
            let x = &qkv[w * n * 3 * dim..(w + 1) * n * 3 * dim];
            let mut count = 0u64;
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                for i in 0..n {
                    let q = &x[i * 3 * dim + qo..i * 3 * dim + qo + hd];
                    let row = &mut p_w[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut max = S::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate() {
                        let k = &x[j * 3 * dim + ko..j * 3 * dim + ko + hd];
                        let mut s = q.iter().zip(k).map(|(a, b)| *a * *b).sum::<S>() * scale;
                        if let Some((table, idx)) = bias {
                            s += table[idx[i * n + j] * heads + h];
                        }
                        s += mask(w, i, j);
                        *r = s;
                        max = max.max(s);
                    }
                    count += n as u64;
                    let mut z = S::zero();
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / z;
                    }
                    let out = &mut ctx_w[i * dim + h * hd..i * dim + (h + 1) * hd];
                    for (j, &p) in row.iter().enumerate() {
                        let v = &x[j * 3 * dim + vo..j * 3 * dim + vo + hd];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += p * *vv;
                        }
                    }
                }
            }
            count
        })
        .collect();
    (ctx, probs, counts.iter().sum())
}

/// Gradients of [`attention_core`] w.r.t. the fused qkv input and the bias table.
fn attention_core_backward<S: Real>(
    qkv: &[S],
    probs: &[S],
    dctx: &[S],
    geo: &AttnGeometry,
    bias_index: Option<(&[usize], usize)>,
) -> (Vec<S>, Option<Vec<S>>) {
    let AttnGeometry { tokens: n, dim, heads, .. } = *geo;
    let hd = geo.head_dim();
    let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
    let mut dqkv = vec![S::zero(); qkv.len()];
    let partial_tables: Vec<Option<Vec<S>>> = dqkv
        .par_chunks_mut(n * 3 * dim)
        .enumerate()
        .map(|(w, dx)| {
            let x = &qkv[w * n * 3 * dim..(w + 1) * n * 3 * dim];
            let dc = &dctx[w * n * dim..(w + 1) * n * dim];
            let mut dtable = bias_index.map(|(_, len)| vec![S::zero(); len * heads]);
            let mut ds = vec![S::zero(); n];
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                for i in 0..n {
                    let p = &probs[((w * heads + h) * n + i) * n..((w * heads + h) * n + i + 1) * n];
                    let dout = &dc[i * dim + h * hd..i * dim + (h + 1) * hd];
                    let mut dot = S::zero();
                    for j in 0..n {
                        let v = &x[j * 3 * dim + vo..j * 3 * dim + vo + hd];
                        let dp = dout.iter().zip(v).map(|(a, b)| *a * *b).sum::<S>();
                        ds[j] = dp;
                        dot += p[j] * dp;
                        // dV_j += P_ij · dO_i
                        for (g, d) in dx[j * 3 * dim + vo..j * 3 * dim + vo + hd].iter_mut().zip(dout) {
                            *g += p[j] * *d;
                        }
                    }
                    for j in 0..n {
                        ds[j] = p[j] * (ds[j] - dot);
                    }
                    if let (Some(t), Some((idx, _))) = (dtable.as_mut(), bias_index) {
                        for j in 0..n {
                            t[idx[i * n + j] * heads + h] += ds[j];
                        }
                    }
                    for j in 0..n {
                        let g = ds[j] * scale;
                        if g == S::zero() {
                            continue;
                        }
                        for c in 0..hd {
                            let kj = x[j * 3 * dim + ko + c];
                            let qi = x[i * 3 * dim + qo + c];
                            dx[i * 3 * dim + qo + c] += g * kj;
                            dx[j * 3 * dim + ko + c] += g * qi;
                        }
                    }
                }
            }
            dtable
        })
        .collect();
    let dtable = bias_index.map(|(_, len)| {
        let mut acc = vec![S::zero(); len * heads];
        for part in partial_tables.iter().flatten() {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += *b;
            }
        }
        acc
    });
    (dqkv, dtable)
}

/// Multi-head window attention layer (MSA / SW-MSA).
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub table_window: WindowSize,
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2P−1)(2M−1)² × heads]`
    pub bias_table: ParamId,
}

/// Saved activations of one [`WindowAttention::forward`] call.
#[derive(Clone, Debug)]
pub struct AttnCache<S> {
    cfg: WindowConfig,
    grid: [usize; 3],
    windows: Vec<S>,
    origin: Vec<Option<usize>>,
    qkv: Vec<S>,
    probs: Vec<S>,
    ctx: Vec<S>,
    rel_index: Vec<usize>,
    score_entries: u64,
}

impl<S> AttnCache<S> {
    /// Score-matrix entries evaluated, summed over windows and heads.
    pub fn score_entries(&self) -> u64 {
        self.score_entries
    }

    pub fn config(&self) -> WindowConfig {
        self.cfg
    }

    /// Attention probabilities `[nW × heads × N × N]`.
    pub fn probs(&self) -> &[S] {
        &self.probs
    }
}

fn neg(s: [usize; 3]) -> [isize; 3] {
    s.map(|v| -(v as isize))
}

fn pos(s: [usize; 3]) -> [isize; 3] {
    s.map(|v| v as isize)
}

impl WindowAttention {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        table_window: WindowSize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let qkv = Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true);
        let len = table_window.bias_table_len();
        let bias_table = store.add(
            format!("{name}.relative_position_bias_table"),
            vec![len, heads],
            trunc_normal(rng, len * heads, INIT_STD),
        );
        Ok(Self {
            dim,
            heads,
            table_window,
            qkv,
            proj,
            bias_table,
        })
    }

    pub fn numel(&self) -> usize {
        self.qkv.numel() + self.proj.numel() + self.table_window.bias_table_len() * self.heads
    }

    fn check_window(&self, window: [usize; 3]) -> Result<()> {
        let conf = self.table_window.as_array();
        if (0..3).any(|a| window[a] == 0 || window[a] > conf[a]) {
            return Err(Error::Config(format!(
                "window {window:?} exceeds bias table extent {conf:?}"
            )));
        }
        Ok(())
    }

    /// Plain self-attention over the `N` tokens of one window, `x: [N × D]`.
    /// `mask`, when given, is an additive `[N × N]` matrix.
    pub fn attend_window<S: Real>(
        &self,
        store: &ParamStore<S>,
        x: &[S],
        window: [usize; 3],
        mask: Option<&[S]>,
    ) -> Result<Vec<S>> {
        self.check_window(window)?;
        let n = window.iter().product::<usize>();
        if x.len() != n * self.dim {
            return Err(Error::Shape(format!(
                "window of {n} tokens × {} needs {} values, got {}",
                self.dim,
                n * self.dim,
                x.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != n * n {
                return Err(Error::Shape(format!("mask has {} entries, need {}", m.len(), n * n)));
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite attention input".into()));
        }
        let geo = AttnGeometry {
            windows: 1,
            tokens: n,
            dim: self.dim,
            heads: self.heads,
        };
        let idx = relative_position_index(window, self.table_window);
        let qkv = self.qkv.forward(store, x);
        let (ctx, _, _) = attention_core(
            &qkv,
            &geo,
            Some((store.get(self.bias_table), &idx)),
            |_, i, j| mask.map_or(S::zero(), |m| m[i * n + j]),
        );
        Ok(self.proj.forward(store, &ctx))
    }

    /// Roll, partition, attend, reverse and unroll. Output has the input's shape.
    pub fn forward<S: Real>(
        &self,
        store: &ParamStore<S>,
        x: &TokenGrid<S>,
        cfg: WindowConfig,
    ) -> Result<(TokenGrid<S>, AttnCache<S>)> {
        if x.channels() != self.dim {
            return Err(Error::Shape(format!(
                "attention expects width {}, got {}",
                self.dim,
                x.channels()
            )));
        }
        self.check_window(cfg.window)?;
        let grid = grid3(x);
        let rolled;
        let src = if cfg.is_shifted() {
            rolled = cyclic_shift(x, pos(cfg.shift));
            &rolled
        } else {
            x
        };
        let batch = window_partition(src, cfg.window);
        let n = cfg.tokens_per_window();
        let geo = AttnGeometry {
            windows: batch.num_windows(),
            tokens: n,
            dim: self.dim,
            heads: self.heads,
        };
        let labels = region_labels(grid, &cfg);
        let rel_index = relative_position_index(cfg.window, self.table_window);
        let qkv = self.qkv.forward(store, &batch.windows);
        let masked = S::lit(MASK_VALUE);
        let (ctx, probs, score_entries) = attention_core(
            &qkv,
            &geo,
            Some((store.get(self.bias_table), &rel_index)),
            |w, i, j| {
                let (a, b) = (labels[w * n + i], labels[w * n + j]);
                if a >= 0 && a == b {
                    S::zero()
                } else {
                    masked
                }
            },
        );
        let y = self.proj.forward(store, &ctx);
        let out_batch = WindowBatch {
            windows: y,
            window: cfg.window,
            grid,
            dim: self.dim,
            origin: batch.origin,
        };
        let mut out = window_reverse(&out_batch)?;
        if cfg.is_shifted() {
            out = cyclic_shift(&out, neg(cfg.shift));
        }
        let cache = AttnCache {
            cfg,
            grid,
            windows: batch.windows,
            origin: out_batch.origin,
            qkv,
            probs,
            ctx,
            rel_index,
            score_entries,
        };
        Ok((out, cache))
    }

    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        cache: &AttnCache<S>,
        dy: &TokenGrid<S>,
    ) -> Result<TokenGrid<S>> {
        let cfg = cache.cfg;
        let rolled;
        let dsrc = if cfg.is_shifted() {
            rolled = cyclic_shift(dy, pos(cfg.shift));
            &rolled
        } else {
            dy
        };
        let dwin = window_partition(dsrc, cfg.window);
        debug_assert_eq!(dwin.origin, cache.origin);
        let dctx = self.proj.backward(store, grads, &cache.ctx, &dwin.windows);
        let geo = AttnGeometry {
            windows: dwin.num_windows(),
            tokens: cfg.tokens_per_window(),
            dim: self.dim,
            heads: self.heads,
        };
        let (dqkv, dtable) = attention_core_backward(
            &cache.qkv,
            &cache.probs,
            &dctx,
            &geo,
            Some((&cache.rel_index, self.table_window.bias_table_len())),
        );
        if let Some(dt) = dtable {
            for (a, b) in grads.get_mut(self.bias_table).iter_mut().zip(dt) {
                *a += b;
            }
        }
        let dx_windows = self.qkv.backward(store, grads, &cache.windows, &dqkv);
        let mut dx = window_reverse(&WindowBatch {
            windows: dx_windows,
            window: cfg.window,
            grid: cache.grid,
            dim: self.dim,
            origin: cache.origin.clone(),
        })?;
        if cfg.is_shifted() {
            dx = cyclic_shift(&dx, neg(cfg.shift));
        }
        Ok(dx)
    }
}
