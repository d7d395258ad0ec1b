//! Adam optimization and the epoch loop.
//!
//! Weight decay is coupled: it is added to the gradient before the moment
//! updates, the classic formulation. One tape is built per mini-batch and
//! the batch loss is the mean of the per-sample MSE losses.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics_flat, MetricsReport};
use crate::model::{bind_model, forward_bound, forward_values, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every named parameter. Every parameter must have a
    /// gradient.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let mut missing = None;
        params.visit(&mut |name, _| {
            if missing.is_none() && !grads.contains_key(name) {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        params.visit_mut(&mut |name, tensor| {
            let grad = grads[name].data();
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            adam_update(&cfg, t, tensor.data_mut(), grad, m, v);
        });
        Ok(())
    }
}

/// The update rule on raw slices: `g ← g + wd·θ`, moment updates, bias
/// correction, `θ ← θ − lr·m̂/(√v̂ + ε)`.
pub fn adam_update(
    cfg: &AdamConfig,
    t: u64,
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i] + cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub repeats: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            seed: 42,
            repeats: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::Validation(format!(
                "epochs, repeats and batch_size must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training MSE per epoch; length equals `epochs`.
    pub epoch_losses: Vec<f64>,
    /// Validation MSE per epoch when a validation set was supplied.
    pub val_mse: Vec<f64>,
    /// Epoch (0-based) with the lowest validation MSE, informational only.
    pub best_val_epoch: Option<usize>,
}

pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Full shuffled mini-batch passes for `epochs` epochs; deterministic given
/// the seed.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    initial: ModelParams,
    train_set: &[WindowSample],
    val_set: Option<&[WindowSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let mut params = initial;
    let mut optimizer = AdamState::new(tcfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let mut val_mse = Vec::new();

    for _epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let vars = bind_model(&mut tape, &params);
            let mut sample_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &train_set[idx];
                let x = tape.leaf(sample.x.clone());
                let y = tape.leaf(sample.y.clone());
                let trace = forward_bound(&mut tape, &vars, cfg, x)?;
                sample_losses.push(mse_loss(&mut tape, trace.pred, y)?);
            }
            let mut total = sample_losses[0];
            for &l in &sample_losses[1..] {
                total = tape.add(total, l)?;
            }
            let batch_loss = tape.scale(total, 1.0 / batch.len() as f64);
            loss_sum += tape.value(batch_loss).data()[0] * batch.len() as f64;

            let grads = tape.backward(batch_loss)?;
            let named: BTreeMap<String, Tensor> = vars
                .leaves()
                .iter()
                .map(|(name, var)| (name.clone(), grads.wrt(*var)))
                .collect();
            optimizer.step(&mut params, &named)?;
        }
        epoch_losses.push(loss_sum / train_set.len() as f64);

        if let Some(val) = val_set {
            if !val.is_empty() {
                val_mse.push(evaluate(&params, cfg, val)?.mse);
            }
        }
    }

    let best_val_epoch = val_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    Ok(TrainOutcome {
        params,
        epoch_losses,
        val_mse,
        best_val_epoch,
    })
}

/// Metrics of the model over a sample set, flattened across samples and
/// channels.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[WindowSample],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let mut y = Vec::new();
    let mut y_hat = Vec::new();
    for sample in samples {
        let pred = forward_values(params, cfg, &sample.x)?;
        y.extend_from_slice(sample.y.data());
        y_hat.extend_from_slice(pred.data());
    }
    compute_metrics_flat(&y, &y_hat)
}
