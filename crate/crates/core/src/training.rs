//! MSE training with AdamW, gradient accumulation and a per-epoch learning
//! rate decay, plus MAE / RMSE / R² evaluation.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UltraSwin;
use crate::params::{Gradients, ParamStore};
use crate::preprocessing::ModelInput;
use crate::tensor::Real;

/// `(1/N)·Σ(yᵢ − ŷᵢ)²`.
pub fn mse_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Domain("mse of an empty batch".into()));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// `lr₀·(1 − d)^e`
    #[default]
    Multiplicative,
    /// `max(lr₀ − d·lr₀·e, 0)`
    Subtractive,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multiplicative" => Ok(Self::Multiplicative),
            "subtractive" => Ok(Self::Subtractive),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Per-epoch reduction `d`; see [`LrSchedule`].
    pub lr_decay: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            weight_decay: 1e-4,
            epochs: 20,
            lr_decay: 0.15,
            schedule: LrSchedule::Multiplicative,
            batch_size: 2,
            grad_accumulation: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Batch size 2 for base, 4 for small; everything else at the defaults.
    pub fn for_variant(variant: &str) -> Self {
        let batch_size = if variant.eq_ignore_ascii_case("small") { 4 } else { 2 };
        Self {
            batch_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return bad("epochs, batch_size and grad_accumulation must be at least 1");
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return bad("lr_decay must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        LrSchedule::Multiplicative => cfg.lr0 * (1.0 - cfg.lr_decay).powi(epoch as i32),
        LrSchedule::Subtractive => (cfg.lr0 - cfg.lr_decay * cfg.lr0 * epoch as f64).max(0.0),
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Optimizer steps applied so far.
    pub step: u64,
}

impl<S: Real> AdamW<S> {
    pub fn new(params: &ParamStore<S>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<S>> = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update. Returns `false`, leaving everything untouched, when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) -> Result<bool> {
        if self.m.len() != params.len() || grads.iter().count() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if !grads.all_finite() {
            warn!("non-finite gradient at step {}; update skipped", self.step + 1);
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64().unwrap();
                let mf = b1 * m.to_f64().unwrap() + (1.0 - b1) * g;
                let vf = b2 * v.to_f64().unwrap() + (1.0 - b2) * g * g;
                *m = S::lit(mf);
                *v = S::lit(vf);
                let th = theta.to_f64().unwrap();
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps) + self.weight_decay * th;
                *theta = S::lit(th - lr * update);
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub log: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(model: &UltraSwin<f32>, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(model.params(), cfg),
            epoch: 0,
            log: Vec::new(),
        }
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.log {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, val));
        }
        out
    }
}

/// Anything that maps a preprocessed clip to an EF estimate.
pub trait EfPredictor {
    fn predict(&self, input: &ModelInput) -> Result<f64>;
}

impl EfPredictor for UltraSwin<f32> {
    fn predict(&self, input: &ModelInput) -> Result<f64> {
        Ok(UltraSwin::predict(self, &input.frames)? as f64)
    }
}

/// Run one epoch over `data`. Returns the mean per-sample squared error seen
/// during the epoch and the number of optimizer steps taken.
pub fn train_epoch(
    model: &mut UltraSwin<f32>,
    state: &mut TrainState,
    data: &[ModelInput],
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let epoch = state.epoch;
    let lr = lr_at_epoch(epoch, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
    if cfg.shuffle {
        order.shuffle(&mut rng);
    }
    let stochastic = model.config().drop_path > 0.0;

    let mut acc = Gradients::zeros_like(model.params());
    let mut micro = Gradients::zeros_like(model.params());
    let mut pending = 0usize;
    let mut steps = 0usize;
    let mut loss_sum = 0.0;

    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    for (b, batch) in batches.iter().enumerate() {
        micro.zero();
        let n = batch.len() as f32;
        for &i in *batch {
            let sample = &data[i];
            let (y_hat, trace) = model.forward_train(&sample.frames, stochastic.then_some(&mut rng))?;
            let residual = y_hat as f64 - sample.ef_target;
            loss_sum += residual * residual;
            model.backward(&mut micro, &trace, 2.0 * residual as f32 / n)?;
        }
        acc.add_assign(&micro);
        pending += 1;
        if pending == cfg.grad_accumulation || b + 1 == batches.len() {
            acc.scale(1.0 / pending as f32);
            if state.optimizer.step(model.params_mut(), &acc, lr)? {
                steps += 1;
            }
            acc.zero();
            pending = 0;
        }
    }
    Ok((loss_sum / data.len() as f64, steps))
}

/// Plain mean squared error over a split, without dropout or updates.
pub fn mean_loss(model: &impl EfPredictor, data: &[ModelInput]) -> Result<f64> {
    let preds = predict_all(model, data)?;
    let targets: Vec<f64> = data.iter().map(|d| d.ef_target).collect();
    mse_loss(&targets, &preds)
}

pub fn predict_all(model: &impl EfPredictor, data: &[ModelInput]) -> Result<Vec<f64>> {
    data.iter().map(|d| model.predict(d)).collect()
}

/// Train from `state.epoch` up to `cfg.epochs`, calling `on_epoch` after each
/// epoch (for checkpointing and logging).
pub fn train(
    model: &mut UltraSwin<f32>,
    state: &mut TrainState,
    train_data: &[ModelInput],
    val_data: &[ModelInput],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&UltraSwin<f32>, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    while state.epoch < cfg.epochs {
        let lr = lr_at_epoch(state.epoch, cfg);
        let (train_loss, steps) = train_epoch(model, state, train_data, cfg)?;
        let val_loss = if val_data.is_empty() {
            None
        } else {
            Some(mean_loss(&*model, val_data)?)
        };
        info!(
            "epoch {} lr {lr:.3e} steps {steps} train_loss {train_loss:.4} val_loss {}",
            state.epoch,
            val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        state.log.push(EpochLoss {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr,
        });
        state.epoch += 1;
        on_epoch(model, state)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// NaN when the targets have zero variance.
    pub r2: f64,
}

impl MetricReport {
    pub fn from_predictions(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        let mse = mse_loss(y, y_hat)?;
        let n = y.len();
        let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        let mean = y.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let r2 = if ss_tot > 0.0 { 1.0 - mse * n as f64 / ss_tot } else { f64::NAN };
        Ok(Self {
            n,
            mae,
            rmse: mse.sqrt(),
            r2,
        })
    }

    pub fn r2_defined(&self) -> bool {
        !self.r2.is_nan()
    }

    /// `model,params,mae,rmse,r2` header and one row.
    pub fn to_csv(&self, model: &str, params: usize) -> String {
        let r2 = if self.r2_defined() { self.r2.to_string() } else { "NaN".into() };
        format!("model,params,mae,rmse,r2\n{model},{params},{},{},{r2}\n", self.mae, self.rmse)
    }
}

/// Predictions and metrics over a split.
pub fn evaluate(model: &impl EfPredictor, data: &[ModelInput]) -> Result<(MetricReport, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let preds = predict_all(model, data)?;
    let targets: Vec<f64> = data.iter().map(|d| d.ef_target).collect();
    Ok((MetricReport::from_predictions(&targets, &preds)?, preds))
}
