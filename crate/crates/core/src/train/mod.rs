//! Deterministic mini-batch training.
//!
//! A batch is a set of whole scenes. Each scene gets its own forward and
//! backward pass (object counts differ, so nothing is padded) and the
//! per-scene gradients are averaged in batch order before one optimizer
//! update.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_gradients, param_layout, Gradients, ModelConfig, ModelParams, ParamKind};
use crate::scenegen::generator::mix_seed;
use crate::scenegen::Scene;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use optim::{AdamHyper, OptimizerKind, OptimizerState};

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Scenes per optimizer step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gradient_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and means "initialize only".
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("gradient_clip_norm", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Uniform `(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))` for every
/// weight matrix, zero biases. Deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_layout(cfg)
        .into_iter()
        .map(|spec| {
            let t = match spec.kind {
                ParamKind::Bias => Tensor::zeros(&spec.shape),
                ParamKind::Weight => {
                    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-a..a))
                        .collect();
                    Tensor::new(spec.shape.clone(), data)?
                }
            };
            Ok((spec.name, t))
        })
        .collect::<Result<_>>()?;
    ModelParams::new(cfg.clone(), tensors)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub obj: f64,
    pub rel: f64,
    pub gce: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Averaged gradient of the total loss over `batch`, followed by one
/// optimizer update of `params`. Returns the batch-mean loss terms.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[Scene],
    cfg: &TrainConfig,
    optimizer: &mut OptimizerState,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Invalid("train_step on an empty batch".into()));
    }
    let mut sum: Option<Gradients> = None;
    let mut metrics = StepMetrics::default();
    for scene in batch {
        let (terms, grads) = loss_and_gradients(scene, params).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged(format!("non-finite {what}")),
            other => other,
        })?;
        metrics.obj += terms.obj;
        metrics.rel += terms.rel;
        metrics.gce += terms.gce;
        metrics.total += terms.total;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let a = acc.get_mut(&name).expect("same layout");
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = sum.expect("non-empty batch");
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    metrics.obj *= scale;
    metrics.rel *= scale;
    metrics.gce *= scale;
    metrics.total *= scale;
    metrics.grad_norm = optim::global_norm(&grads);
    if !metrics.grad_norm.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    if let Some(max) = cfg.gradient_clip_norm {
        optim::clip_global_norm(&mut grads, max);
    }
    optimizer.apply(params, &grads, cfg.learning_rate, cfg.adam());
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub obj: f64,
    pub rel: f64,
    pub gce: f64,
    pub total: f64,
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// the shuffling RNG, and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(model_cfg, cfg.seed)?;
        let optimizer = OptimizerState::new(cfg.optimizer, &params);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EA1));
        Ok(Self {
            params,
            optimizer,
            rng,
            epoch: 0,
            config: cfg,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.optimizer.kind() != cfg.optimizer {
            return Err(Error::Mismatch(format!(
                "checkpoint optimizer {:?} differs from configured {:?}",
                ckpt.optimizer.kind(),
                cfg.optimizer
            )));
        }
        Ok(Self {
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            config: cfg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
        }
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &[Scene]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Invalid("training on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut m = EpochMetrics {
            epoch: self.epoch + 1,
            ..EpochMetrics::default()
        };
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<Scene> = chunk.iter().map(|&i| data[i].clone()).collect();
            let s = train_step(&mut self.params, &batch, &self.config, &mut self.optimizer)
                .map_err(|e| match e {
                    Error::Diverged(what) => Error::Diverged(format!(
                        "epoch {} step {}: {what}",
                        self.epoch + 1,
                        step + 1
                    )),
                    other => other,
                })?;
            let w = chunk.len() as f64;
            m.obj += s.obj * w;
            m.rel += s.rel * w;
            m.gce += s.gce * w;
            m.total += s.total * w;
            steps += chunk.len();
        }
        let n = steps as f64;
        m.obj /= n;
        m.rel /= n;
        m.gce /= n;
        m.total /= n;
        self.epoch += 1;
        Ok(m)
    }

    /// Runs until `config.epochs` epochs have completed in total.
    pub fn run(&mut self, data: &[Scene]) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            history.push(self.run_epoch(data)?);
        }
        Ok(history)
    }
}

/// Initializes and trains for `cfg.epochs` epochs.
pub fn train(
    data: &[Scene],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model_cfg, cfg.clone())?;
    let history = trainer.run(data)?;
    Ok((trainer, history))
}
