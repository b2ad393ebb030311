//! Encoder plus regression head, owning its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderTrace, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::regressor::{EfRegressor, RegressorCache};
use crate::tensor::{Real, TokenGrid};

#[derive(Clone, Debug)]
pub struct UltraSwin<S> {
    pub encoder: Encoder,
    pub head: EfRegressor,
    params: ParamStore<S>,
}

/// Activations kept by [`UltraSwin::forward_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    pub encoder: EncoderTrace<S>,
    pub head: RegressorCache<S>,
}

impl<S: Real> UltraSwin<S> {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, config)?;
        let head = EfRegressor::new(&mut params, &mut rng, config.feature_dim())?;
        Ok(Self { encoder, head, params })
    }

    /// Build the layer structure for `config` and adopt `params`, which must
    /// carry exactly the expected names and shapes in order.
    pub fn from_params(config: &ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> UltraSwin<U> {
        UltraSwin {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    /// Encoder features `[T′ × H′ × W′ × F]`.
    pub fn features(&self, video: &TokenGrid<S>) -> Result<TokenGrid<S>> {
        Ok(self.encoder.forward(&self.params, video, None, false)?.0)
    }

    /// Predicted EF for one clip (inference: no stochastic depth, no caches kept).
    pub fn predict(&self, video: &TokenGrid<S>) -> Result<S> {
        let features = self.features(video)?;
        Ok(self.head.forward(&self.params, &features)?.0)
    }

    /// Forward pass keeping activations. `rng` enables stochastic depth.
    pub fn forward_train(&self, video: &TokenGrid<S>, rng: Option<&mut ChaCha8Rng>) -> Result<(S, Trace<S>)> {
        let (features, trace) = self.encoder.forward(&self.params, video, rng, true)?;
        let (y, head) = self.head.forward(&self.params, &features)?;
        Ok((
            y,
            Trace {
                encoder: trace.expect("trace requested"),
                head,
            },
        ))
    }

    /// Accumulate `∂L/∂θ` into `grads` given `dy = ∂L/∂ŷ`.
    pub fn backward(&self, grads: &mut Gradients<S>, trace: &Trace<S>, dy: S) -> Result<()> {
        let dfeatures = self.head.backward(&self.params, grads, &trace.head, dy)?;
        self.encoder.backward(&self.params, grads, &trace.encoder, &dfeatures)
    }
}
