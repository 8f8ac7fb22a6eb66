//! Server-side aggregation of client updates and the server optimizer step.
//!
//! FedAvg averages model deltas weighted by client dataset size. FedFish
//! additionally weights every coordinate by each client's Fisher diagonal:
//!
//! ```text
//! pseudo_grad[j] = sum_i w_i F_i[j] delta_i[j] / (sum_i w_i F_i[j] + eps)
//! ```
//!
//! A coordinate whose Fisher mass is zero across the cohort (with `eps = 0`)
//! carries no information, so it falls back to the FedAvg value and is counted.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::local::{ClientUpdate, FisherDiag};
use crate::nn::ParamVector;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bits per transmitted real.
pub const BITS_PER_REAL: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Fedavg,
    Fedfish,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Fedavg => "fedavg",
            Algo::Fedfish => "fedfish",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algo::Fedavg),
            "fedfish" => Ok(Algo::Fedfish),
            other => Err(FedError::InvalidConfig(format!("unknown algo {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOpt {
    Sgd,
    /// Bias-corrected Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub algo: Algo,
    #[serde(default)]
    pub fisher_eps: f64,
    pub lr_global: f64,
    pub server_opt: ServerOpt,
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fisher_eps >= 0.0 && self.fisher_eps.is_finite()) {
            return Err(FedError::InvalidConfig("fisher_eps must be finite and >= 0".into()));
        }
        // lr_global 0 is accepted so a round can be run without moving the server.
        if !(self.lr_global >= 0.0 && self.lr_global.is_finite()) {
            return Err(FedError::InvalidConfig("lr_global must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub pseudo_grad: ParamVector,
    /// Coordinates where the Fisher mass was zero and FedAvg was used instead.
    pub fallback_coords: usize,
}

fn check_lengths(mut lens: impl Iterator<Item = usize>, context: &'static str) -> Result<usize> {
    let first = lens.next().ok_or(FedError::EmptyBatch(context))?;
    for len in lens {
        if len != first {
            return Err(FedError::DimensionMismatch {
                context,
                expected: first,
                actual: len,
            });
        }
    }
    Ok(first)
}

fn weighted_mean(updates: &[ClientUpdate], total_weight: f64, j: usize) -> f64 {
    updates.iter().map(|u| u.weight * u.delta[j]).sum::<f64>() / total_weight
}

/// Combines client updates into the server pseudo-gradient.
pub fn aggregate(updates: &[ClientUpdate], cfg: &AggregatorConfig) -> Result<Aggregate> {
    let len = check_lengths(
        updates.iter().flat_map(|u| [u.delta.len(), u.fisher.len()]),
        "aggregate",
    )?;
    if let Some(u) = updates.iter().find(|u| !(u.weight > 0.0 && u.weight.is_finite())) {
        return Err(FedError::InvalidConfig(format!(
            "client {} has non-positive weight {}",
            u.client_id, u.weight
        )));
    }
    let total_weight: f64 = updates.iter().map(|u| u.weight).sum();

    let mut fallback_coords = 0;
    let values: Vec<f64> = match cfg.algo {
        Algo::Fedavg => (0..len).map(|j| weighted_mean(updates, total_weight, j)).collect(),
        Algo::Fedfish => (0..len)
            .map(|j| {
                let (num, den) = updates.iter().fold((0.0, 0.0), |(num, den), u| {
                    let wf = u.weight * u.fisher[j];
                    (num + wf * u.delta[j], den + wf)
                });
                if den == 0.0 && cfg.fisher_eps == 0.0 {
                    fallback_coords += 1;
                    weighted_mean(updates, total_weight, j)
                } else {
                    num / (den + cfg.fisher_eps)
                }
            })
            .collect(),
    };
    Ok(Aggregate {
        pseudo_grad: ParamVector::new(values)?,
        fallback_coords,
    })
}

/// Fisher-weighted average of client models:
/// `out[j] = sum_i F_i[j] theta_i[j] / (sum_i F_i[j] + eps)`, with the plain
/// mean on zero-denominator coordinates.
pub fn closed_form_merge(params_list: &[ParamVector], fishers: &[FisherDiag], eps: f64) -> Result<ParamVector> {
    if params_list.len() != fishers.len() {
        return Err(FedError::DimensionMismatch {
            context: "closed_form_merge model/fisher count",
            expected: params_list.len(),
            actual: fishers.len(),
        });
    }
    let len = check_lengths(
        params_list
            .iter()
            .map(|p| p.len())
            .chain(fishers.iter().map(|f| f.len())),
        "closed_form_merge",
    )?;
    let n = params_list.len() as f64;
    let values = (0..len)
        .map(|j| {
            let (num, den) = params_list
                .iter()
                .zip(fishers)
                .fold((0.0, 0.0), |(num, den), (p, f)| (num + f[j] * p[j], den + f[j]));
            if den == 0.0 && eps == 0.0 {
                params_list.iter().map(|p| p[j]).sum::<f64>() / n
            } else {
                num / (den + eps)
            }
        })
        .collect();
    ParamVector::new(values)
}

/// Server model plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ParamVector,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ServerState {
    pub fn new(params: ParamVector) -> Self {
        let p = params.len();
        ServerState {
            params,
            first_moment: vec![0.0; p],
            second_moment: vec![0.0; p],
            step: 0,
        }
    }
}

/// One optimizer step treating `pseudo_grad` as the gradient.
pub fn server_step(state: ServerState, pseudo_grad: &[f64], cfg: &AggregatorConfig) -> Result<ServerState> {
    if pseudo_grad.len() != state.params.len() {
        return Err(FedError::DimensionMismatch {
            context: "server_step pseudo-gradient",
            expected: state.params.len(),
            actual: pseudo_grad.len(),
        });
    }
    let ServerState {
        params,
        mut first_moment,
        mut second_moment,
        step,
    } = state;
    let mut params = params.into_inner();
    let lr = cfg.lr_global;
    let step = match cfg.server_opt {
        ServerOpt::Sgd => {
            for (w, g) in params.iter_mut().zip(pseudo_grad) {
                *w -= lr * g;
            }
            step + 1
        }
        ServerOpt::Adam => {
            let t = step + 1;
            let bc1 = 1.0 - ADAM_BETA1.powf(t as f64);
            let bc2 = 1.0 - ADAM_BETA2.powf(t as f64);
            for (((w, g), m), v) in params
                .iter_mut()
                .zip(pseudo_grad)
                .zip(first_moment.iter_mut())
                .zip(second_moment.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            t
        }
    };
    Ok(ServerState {
        params: ParamVector::new(params).map_err(|_| FedError::NonFinite("server step result".into()))?,
        first_moment,
        second_moment,
        step,
    })
}

/// Bits moved in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommCost {
    pub up_bits: u64,
    pub down_bits: u64,
}

/// Per-round traffic: every cohort client uploads its delta (plus its Fisher
/// diagonal under FedFish); the model is broadcast once.
pub fn comm_cost(num_clients: usize, param_count: usize, algo: Algo) -> CommCost {
    let per_client = match algo {
        Algo::Fedavg => param_count as u64,
        Algo::Fedfish => 2 * param_count as u64,
    };
    CommCost {
        up_bits: num_clients as u64 * per_client * BITS_PER_REAL,
        down_bits: param_count as u64 * BITS_PER_REAL,
    }
}
