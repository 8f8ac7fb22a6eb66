//! Experiment configuration, read from and written to JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{Algo, AggregatorConfig, ServerOpt};
use crate::datasets::{self, FederatedDataset, Overlap, PERSONALIZE_FRACTIONS};
use crate::error::{FedError, Result};
use crate::evaluation::MetricKind;
use crate::local::{FisherMode, FisherNormalize, LocalTrainConfig};
use crate::nn::{Activation, Head, ModelSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    ToyRegression {
        overlap: Overlap,
        n_per_client: usize,
        noise_sd: f64,
    },
    DirichletClassification {
        num_clients: usize,
        num_classes: usize,
        alpha: f64,
        examples_per_client: usize,
        input_dim: usize,
    },
    /// A dataset previously written with [`crate::datasets::write_dataset_file`].
    File { path: PathBuf },
}

impl DatasetConfig {
    /// Builds the dataset. Generators are keyed by a stream derived from `seed`.
    pub fn build(&self, seed: u64) -> Result<FederatedDataset> {
        let data_seed = rng::derive_seed(seed, &[rng::STREAM_DATASET]);
        match self {
            DatasetConfig::ToyRegression {
                overlap,
                n_per_client,
                noise_sd,
            } => datasets::gen_toy_regression(*overlap, *n_per_client, *noise_sd, data_seed),
            DatasetConfig::DirichletClassification {
                num_clients,
                num_classes,
                alpha,
                examples_per_client,
                input_dim,
            } => datasets::gen_dirichlet_classification(
                *num_clients,
                *num_classes,
                *alpha,
                *examples_per_client,
                *input_dim,
                data_seed,
            ),
            DatasetConfig::File { path } => datasets::read_dataset_file(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local: LocalTrainConfig,
    pub agg: AggregatorConfig,
    pub eval_every: usize,
    pub personalize_fractions: Vec<f64>,
    pub personalize_epochs: usize,
    #[serde(default)]
    pub csb_metric: MetricKind,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Two-client toy regression, one round, `[1, 32, 32, 1]` ReLU MLP with a
    /// short burst of local training.
    pub fn toy_default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::ToyRegression {
                overlap: Overlap::Disjoint,
                n_per_client: 50,
                noise_sd: 0.3,
            },
            model: ModelSpec {
                layer_sizes: vec![1, 32, 32, 1],
                activation: Activation::Relu,
                head: Head::RegressionMse,
            },
            rounds: 1,
            clients_per_round: 2,
            local: LocalTrainConfig {
                epochs: 5,
                batch_size: 5,
                lr_local: 0.005,
                fisher_mode: FisherMode::ExtraPass,
                shuffle_each_epoch: true,
                fisher_normalize: FisherNormalize::Sum,
            },
            agg: AggregatorConfig {
                algo: Algo::Fedfish,
                fisher_eps: 0.0,
                lr_global: 1.0,
                server_opt: ServerOpt::Sgd,
            },
            eval_every: 1,
            personalize_fractions: vec![],
            personalize_epochs: 0,
            csb_metric: MetricKind::Loss,
            seed: 0,
        }
    }

    /// Dirichlet-partitioned synthetic classification with small-batch SGD
    /// clients and an Adam server.
    pub fn dirichlet_default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::DirichletClassification {
                num_clients: 20,
                num_classes: 10,
                alpha: 0.05,
                examples_per_client: 100,
                input_dim: 10,
            },
            model: ModelSpec {
                layer_sizes: vec![10, 32, 10],
                activation: Activation::Relu,
                head: Head::ClassificationSoftmaxCe,
            },
            rounds: 100,
            clients_per_round: 10,
            local: LocalTrainConfig {
                epochs: 1,
                batch_size: 10,
                lr_local: 1e-3,
                fisher_mode: FisherMode::ExtraPass,
                shuffle_each_epoch: true,
                fisher_normalize: FisherNormalize::Sum,
            },
            agg: AggregatorConfig {
                algo: Algo::Fedfish,
                fisher_eps: 0.0,
                lr_global: 1e-3,
                server_opt: ServerOpt::Adam,
            },
            eval_every: 10,
            personalize_fractions: vec![0.0, 0.25, 0.5],
            personalize_epochs: 1,
            csb_metric: MetricKind::Loss,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.local.validate()?;
        self.agg.validate()?;
        if self.rounds == 0 {
            return Err(FedError::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(FedError::InvalidConfig("clients_per_round must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(FedError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if let Some(f) = self
            .personalize_fractions
            .iter()
            .find(|f| !PERSONALIZE_FRACTIONS.contains(f))
        {
            return Err(FedError::InvalidConfig(format!(
                "personalization fraction {f} not in {{0, 0.25, 0.5}}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Rounds that spend a total budget of `total_epochs` local epochs at
/// `local_epochs` per round. The budget must divide evenly.
pub fn fixed_compute_rounds(total_epochs: usize, local_epochs: usize) -> Result<usize> {
    if local_epochs == 0 || total_epochs == 0 || !total_epochs.is_multiple_of(local_epochs) {
        return Err(FedError::InvalidConfig(format!(
            "epoch budget {total_epochs} is not a positive multiple of {local_epochs} local epochs"
        )));
    }
    let rounds = total_epochs / local_epochs;
    assert_eq!(rounds * local_epochs, total_epochs);
    Ok(rounds)
}
