//! Evaluation: global performance, personalization, the client-server
//! barrier, and function-space distances between networks.

use serde::{Deserialize, Serialize};

use crate::datasets::ClientDataset;
use crate::error::{FedError, Result};
use crate::local::{fed_local_train, FisherMode, FisherNormalize, LocalTrainConfig};
use crate::nn::{self, log_softmax, Batch, Head, Matrix, ModelSpec, ParamVector};

/// Quantity compared by the client-server barrier. Both are lower-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Training loss (MSE or cross-entropy).
    #[default]
    Loss,
    /// MSE for regression, `1 - accuracy` for classification.
    Error,
}

/// Per-client performance `L_i` on one split.
pub fn client_metric(spec: &ModelSpec, params: &[f64], data: &Batch, kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Loss => nn::loss(spec, params, data),
        MetricKind::Error => {
            let m = nn::predict_metric(spec, params, data)?;
            Ok(match spec.head {
                Head::RegressionMse => m,
                Head::ClassificationSoftmaxCe => 1.0 - m,
            })
        }
    }
}

/// Unweighted mean over clients of eval-split loss and task metric.
pub fn global_performance(spec: &ModelSpec, params: &[f64], clients: &[ClientDataset]) -> Result<(f64, f64)> {
    if clients.is_empty() {
        return Err(FedError::InvalidConfig("global_performance needs at least one client".into()));
    }
    let mut loss_sum = 0.0;
    let mut metric_sum = 0.0;
    for c in clients {
        if c.eval.is_empty() {
            return Err(FedError::EmptyBatch("global_performance eval split").for_client(c.client_id));
        }
        loss_sum += nn::loss(spec, params, &c.eval)?;
        metric_sum += nn::predict_metric(spec, params, &c.eval)?;
    }
    let n = clients.len() as f64;
    Ok((loss_sum / n, metric_sum / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersonalizeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Task metric on `client.eval` before and after fine-tuning on `client.personalize`.
///
/// `client` should come from [`crate::datasets::split_for_personalization`].
/// An empty personalize split (fraction 0) skips training, so `after == before`.
pub fn personalize_and_eval(
    spec: &ModelSpec,
    params: &ParamVector,
    client: &ClientDataset,
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let before = nn::predict_metric(spec, params, &client.eval)?;
    if client.personalize.is_empty() || cfg.epochs == 0 {
        return Ok((before, before));
    }
    let local = LocalTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_local: cfg.lr,
        fisher_mode: FisherMode::None,
        shuffle_each_epoch: true,
        fisher_normalize: FisherNormalize::Sum,
    };
    let tuned = fed_local_train(spec, params, &client.personalize, &local, seed)
        .map_err(|e| e.for_client(client.client_id))?;
    let after = nn::predict_metric(spec, &tuned.params, &client.eval)?;
    Ok((before, after))
}

fn barrier_pairs(
    spec: &ModelSpec,
    global: &[f64],
    client_models: &[ParamVector],
    clients: &[ClientDataset],
    kind: MetricKind,
) -> Result<Vec<(f64, f64)>> {
    if client_models.len() != clients.len() {
        return Err(FedError::DimensionMismatch {
            context: "client_server_barrier models vs clients",
            expected: clients.len(),
            actual: client_models.len(),
        });
    }
    if clients.is_empty() {
        return Err(FedError::InvalidConfig("client_server_barrier needs at least one client".into()));
    }
    clients
        .iter()
        .zip(client_models)
        .map(|(c, local)| {
            Ok((
                client_metric(spec, global, &c.train, kind)?,
                client_metric(spec, local, &c.train, kind)?,
            ))
        })
        .collect()
}

/// Mean over clients of `L_i(global) - L_i(theta_i)` on each client's train split.
pub fn client_server_barrier(
    spec: &ModelSpec,
    global: &[f64],
    client_models: &[ParamVector],
    clients: &[ClientDataset],
    kind: MetricKind,
) -> Result<f64> {
    let pairs = barrier_pairs(spec, global, client_models, clients, kind)?;
    Ok(pairs.iter().map(|(g, l)| g - l).sum::<f64>() / pairs.len() as f64)
}

/// The two terms of the barrier computed separately: mean `L_i(global)` and
/// mean `L_i(theta_i)`. Their difference equals [`client_server_barrier`].
pub fn barrier_terms(
    spec: &ModelSpec,
    global: &[f64],
    client_models: &[ParamVector],
    clients: &[ClientDataset],
    kind: MetricKind,
) -> Result<(f64, f64)> {
    let pairs = barrier_pairs(spec, global, client_models, clients, kind)?;
    let n = pairs.len() as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// Output-space distance between two networks on `inputs`.
///
/// Classification: mean over rows of `KL(softmax f(x; b) || softmax f(x; a))`,
/// where `b` is the reference model. Regression: mean over rows of
/// `||f(x; a) - f(x; b)||^2`.
pub fn function_space_distance(spec: &ModelSpec, a: &[f64], b: &[f64], inputs: &Matrix) -> Result<f64> {
    if inputs.rows() == 0 {
        return Err(FedError::EmptyBatch("function_space_distance"));
    }
    let out_a = nn::forward(spec, a, inputs)?;
    let out_b = nn::forward(spec, b, inputs)?;
    let total: f64 = match spec.head {
        Head::ClassificationSoftmaxCe => out_a
            .iter_rows()
            .zip(out_b.iter_rows())
            .map(|(za, zb)| {
                let (la, lb) = (log_softmax(za), log_softmax(zb));
                lb.iter().zip(&la).map(|(lb, la)| lb.exp() * (lb - la)).sum::<f64>()
            })
            .sum(),
        Head::RegressionMse => out_a
            .iter_rows()
            .zip(out_b.iter_rows())
            .map(|(ya, yb)| ya.iter().zip(yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum(),
    };
    Ok(total / inputs.rows() as f64)
}

/// Mean over clients of the function-space distance between `global` and each
/// client model on that client's training inputs.
pub fn function_space_objective(
    spec: &ModelSpec,
    global: &[f64],
    client_models: &[ParamVector],
    clients: &[ClientDataset],
) -> Result<f64> {
    if client_models.len() != clients.len() || clients.is_empty() {
        return Err(FedError::DimensionMismatch {
            context: "function_space_objective models vs clients",
            expected: clients.len(),
            actual: client_models.len(),
        });
    }
    let mut sum = 0.0;
    for (c, local) in clients.iter().zip(client_models) {
        sum += function_space_distance(spec, global, local, &c.train.inputs)?;
    }
    Ok(sum / clients.len() as f64)
}
