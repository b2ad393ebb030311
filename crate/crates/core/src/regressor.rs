//! Regression head: temporal mean → fc1 (F → F/2) → LN → fc2 (F/2 → 1) → spatial mean.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, LnStats};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, TokenGrid};

#[derive(Clone, Debug)]
pub struct EfRegressor {
    pub dim: usize,
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct RegressorCache<S> {
    dims: [usize; 4],
    pooled: Vec<S>,
    hidden: Vec<S>,
    stats: LnStats<S>,
    normed: Vec<S>,
    per_position: Vec<S>,
}

impl<S> RegressorCache<S> {
    /// Scalar prediction at each of the `H′·W′` spatial positions.
    pub fn per_position(&self) -> &[S] {
        &self.per_position
    }
}

/// Mean over the temporal axis: `[T × H × W × F]` → `[H·W × F]`.
pub fn temporal_mean<S: Real>(x: &TokenGrid<S>) -> Vec<S> {
    let [t, h, w, f] = x.dims();
    let plane = h * w * f;
    let mut out = vec![S::zero(); plane];
    for frame in x.data().chunks(plane) {
        for (o, v) in out.iter_mut().zip(frame) {
            *o += *v;
        }
    }
    let inv = S::one() / S::from_usize(t).unwrap();
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

impl EfRegressor {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut impl Rng, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("regressor width {dim} too small")));
        }
        let half = dim / 2;
        Ok(Self {
            dim,
            fc1: Linear::new(store, rng, "head.fc1", dim, half, true),
            norm: LayerNorm::new(store, "head.norm", half),
            fc2: Linear::new(store, rng, "head.fc2", half, 1, true),
        })
    }

    pub fn numel(&self) -> usize {
        self.fc1.numel() + self.norm.numel() + self.fc2.numel()
    }

    pub fn forward<S: Real>(&self, store: &ParamStore<S>, features: &TokenGrid<S>) -> Result<(S, RegressorCache<S>)> {
        let dims = features.dims();
        if dims[3] != self.dim || features.tokens() == 0 {
            return Err(Error::Shape(format!(
                "regressor expects width {}, got features {dims:?}",
                self.dim
            )));
        }
        let pooled = temporal_mean(features);
        let hidden = self.fc1.forward(store, &pooled);
        let (normed, stats) = self.norm.forward(store, &hidden);
        let per_position = self.fc2.forward(store, &normed);
        let n = S::from_usize(per_position.len()).unwrap();
        let y = per_position.iter().copied().sum::<S>() / n;
        Ok((
            y,
            RegressorCache {
                dims,
                pooled,
                hidden,
                stats,
                normed,
                per_position,
            },
        ))
    }

    /// Returns the gradient with respect to the encoder features.
    pub fn backward<S: Real>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Gradients<S>,
        cache: &RegressorCache<S>,
        dy: S,
    ) -> Result<TokenGrid<S>> {
        let [t, h, w, f] = cache.dims;
        let positions = h * w;
        let dout = vec![dy / S::from_usize(positions).unwrap(); positions];
        let dnormed = self.fc2.backward(store, grads, &cache.normed, &dout);
        let dhidden = self.norm.backward(store, grads, &cache.hidden, &cache.stats, &dnormed);
        let dpooled = self.fc1.backward(store, grads, &cache.pooled, &dhidden);
        let inv_t = S::one() / S::from_usize(t).unwrap();
        let plane: Vec<S> = dpooled.iter().map(|v| *v * inv_t).collect();
        let mut data = Vec::with_capacity(t * plane.len());
        for _ in 0..t {
            data.extend_from_slice(&plane);
        }
        TokenGrid::from_vec([t, h, w, f], data)
    }
}
