//! Client-side training: minibatch SGD from the broadcast model, returning the
//! accumulated model delta and an empirical Fisher diagonal.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::datasets::permutation;
use crate::error::{FedError, Result};
use crate::nn::{self, Batch, ModelSpec, ParamVector};
use crate::rng;

/// Diagonal empirical Fisher estimate; every entry is finite and `>= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FisherDiag(Vec<f64>);

impl FisherDiag {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FedError::NonFinite(format!(
                "fisher entry {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(FisherDiag(values))
    }

    pub fn ones(len: usize) -> Self {
        FisherDiag(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        FisherDiag::new(self.0.iter().map(|v| v * c).collect())
    }
}

impl Deref for FisherDiag {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// One extra pass over the data at the final parameters.
    ExtraPass,
    /// Squared gradients already computed during the last local epoch.
    LastEpoch,
    /// All-ones Fisher; makes Fisher-weighted aggregation reduce to plain averaging.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherNormalize {
    /// Sum of squared minibatch gradients.
    #[default]
    Sum,
    /// The same sum divided by the number of minibatches.
    MeanPerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_local: f64,
    pub fisher_mode: FisherMode,
    pub shuffle_each_epoch: bool,
    #[serde(default)]
    pub fisher_normalize: FisherNormalize,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FedError::InvalidConfig(
                "local epochs and batch_size must be >= 1".into(),
            ));
        }
        // lr 0 is accepted: it freezes the client, which the tests rely on.
        if !(self.lr_local >= 0.0 && self.lr_local.is_finite()) {
            return Err(FedError::InvalidConfig("lr_local must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `params_global - params_final`, accumulated as the sum of `lr * g` steps.
    pub delta: ParamVector,
    pub fisher: FisherDiag,
    /// Aggregation weight, the number of local training examples.
    pub weight: f64,
    pub examples_seen: usize,
    /// Extra data passes spent on the Fisher estimate (0 or 1).
    pub fisher_passes: usize,
    /// End-point client model. Stays on the client; not part of the upload.
    pub params: ParamVector,
    /// Mean minibatch loss over the last local epoch.
    pub last_epoch_loss: f64,
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

fn accumulate_squares(acc: &mut [f64], grad: &[f64]) {
    for (a, g) in acc.iter_mut().zip(grad) {
        *a += g * g;
    }
}

fn normalize(mut fisher: Vec<f64>, mode: FisherNormalize, num_batches: usize) -> Vec<f64> {
    if mode == FisherNormalize::MeanPerBatch && num_batches > 0 {
        let inv = 1.0 / num_batches as f64;
        fisher.iter_mut().for_each(|f| *f *= inv);
    }
    fisher
}

fn fisher_pass(spec: &ModelSpec, params: &[f64], data: &Batch, order: &[usize], batch_size: usize) -> Result<Vec<f64>> {
    let mut fisher = vec![0.0; spec.param_count()];
    for (b, idx) in batches(order, batch_size).enumerate() {
        let (_, g) = nn::loss_and_grad(spec, params, &data.select(idx)).map_err(|e| diverged(e, 0, b))?;
        accumulate_squares(&mut fisher, &g);
    }
    Ok(fisher)
}

fn diverged(err: FedError, epoch: usize, batch: usize) -> FedError {
    match err {
        FedError::NonFinite(_) => FedError::Diverged {
            epoch,
            batch,
            what: "loss or gradient",
        },
        other => other,
    }
}

/// Standalone Fisher pass: sum over minibatches (in data order) of the squared
/// minibatch gradient.
pub fn fisher_diag(spec: &ModelSpec, params: &[f64], data: &Batch, batch_size: usize) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(FedError::EmptyBatch("fisher_diag"));
    }
    if batch_size == 0 {
        return Err(FedError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    FisherDiag::new(fisher_pass(spec, params, data, &order, batch_size)?)
}

/// Runs `cfg.epochs` epochs of minibatch SGD from `params_global` on `data`.
///
/// Batches come from a permutation keyed by `(seed, epoch)`; the final partial
/// batch is kept. The extra Fisher pass, when requested, reuses the last
/// epoch's batch partition. Divergence reports 1-based epoch and 0-based batch
/// indices (epoch 0 denotes the Fisher pass).
pub fn fed_local_train(
    spec: &ModelSpec,
    params_global: &ParamVector,
    data: &Batch,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FedError::EmptyBatch("fed_local_train"));
    }
    if params_global.len() != spec.param_count() {
        return Err(FedError::DimensionMismatch {
            context: "global parameter length",
            expected: spec.param_count(),
            actual: params_global.len(),
        });
    }
    let n = data.len();
    let p = spec.param_count();
    let mut params = params_global.to_vec();
    let mut delta = vec![0.0; p];
    let mut fisher = vec![0.0; p];
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_epoch_loss = 0.0;
    let mut num_batches = 0;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            order = permutation(n, &mut rng::rng_from(seed, &[epoch as u64]));
        }
        let last = epoch + 1 == cfg.epochs;
        let mut loss_sum = 0.0;
        num_batches = 0;
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let (loss, g) = nn::loss_and_grad(spec, &params, &data.select(idx))
                .map_err(|e| diverged(e, epoch + 1, b))?;
            if last && cfg.fisher_mode == FisherMode::LastEpoch {
                accumulate_squares(&mut fisher, &g);
            }
            for ((w, d), gj) in params.iter_mut().zip(delta.iter_mut()).zip(&g) {
                *w -= cfg.lr_local * gj;
                *d += cfg.lr_local * gj;
            }
            if params.iter().any(|w| !w.is_finite()) {
                return Err(FedError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    what: "parameters",
                });
            }
            loss_sum += loss;
            num_batches += 1;
        }
        last_epoch_loss = loss_sum / num_batches as f64;
    }

    let (fisher, fisher_passes) = match cfg.fisher_mode {
        FisherMode::ExtraPass => {
            let f = fisher_pass(spec, &params, data, &order, cfg.batch_size)?;
            (FisherDiag::new(normalize(f, cfg.fisher_normalize, num_batches))?, 1)
        }
        FisherMode::LastEpoch => (FisherDiag::new(normalize(fisher, cfg.fisher_normalize, num_batches))?, 0),
        FisherMode::None => (FisherDiag::ones(p), 0),
    };

    Ok(ClientUpdate {
        client_id: 0,
        delta: ParamVector::new(delta)?,
        fisher,
        weight: n as f64,
        examples_seen: n * cfg.epochs,
        fisher_passes,
        params: ParamVector::new(params)?,
        last_epoch_loss,
    })
}
