//! Round driver.
//!
//! Every random stream is derived from `(seed, round, client)` alone, never
//! from the aggregation algorithm, so FedAvg and FedFish runs that share a
//! config see the same cohorts and the same local batch orders.

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::aggregation::{self, comm_cost, Algo, CommCost, ServerState};
use crate::config::ExperimentConfig;
use crate::datasets::{split_for_personalization, ClientDataset, FederatedDataset, Overlap};
use crate::error::{FedError, Result};
use crate::evaluation::{self, PersonalizeConfig};
use crate::local::{fed_local_train, ClientUpdate, FisherMode, LocalTrainConfig};
use crate::nn::{self, init_params, Matrix, ModelSpec, ParamVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonalizationResult {
    pub fraction: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_loss: f64,
    pub global_metric: f64,
    pub csb: f64,
    pub fallback_coords: usize,
    pub comm_bits_up: u64,
    pub comm_bits_down: u64,
    pub comm_bits_up_cum: u64,
    pub comm_bits_down_cum: u64,
    pub personalization: Vec<PersonalizationResult>,
    /// Mean function-space distance between the new global model and each
    /// cohort client's model on that client's training inputs.
    pub fsd_kl: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub algo: Algo,
    pub per_round: Vec<RoundMetrics>,
    /// Sorted cohort of every round, evaluated or not.
    pub cohorts: Vec<Vec<usize>>,
    pub fisher_extra_passes: u64,
    #[serde(skip)]
    pub final_params: ParamVector,
    pub final_params_digest: String,
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub cohort: Vec<usize>,
    pub updates: Vec<ClientUpdate>,
    pub fallback_coords: usize,
    pub comm: CommCost,
    pub metrics: Option<RoundMetrics>,
}

/// Sorted cohort for `round`, a pure function of `(seed, round, num_clients, k)`.
pub fn sample_cohort(seed: u64, round: usize, num_clients: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > num_clients {
        return Err(FedError::InvalidConfig(format!(
            "cannot sample {k} clients per round from {num_clients}"
        )));
    }
    let mut rng = rng::rng_from(seed, &[rng::STREAM_COHORT, round as u64]);
    let mut cohort = rand::seq::index::sample(&mut rng, num_clients, k).into_vec();
    cohort.sort_unstable();
    Ok(cohort)
}

pub fn params_digest(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// A federated run in progress.
pub struct Simulation {
    cfg: ExperimentConfig,
    data: FederatedDataset,
    state: ServerState,
    round: usize,
    comm_cum: CommCost,
    fisher_extra_passes: u64,
    cohorts: Vec<Vec<usize>>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.dataset.build(cfg.seed)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: ExperimentConfig, data: FederatedDataset) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if data.input_dim != cfg.model.input_dim() || data.output_dim != cfg.model.output_dim() {
            return Err(FedError::InvalidConfig(format!(
                "model maps {} -> {} but dataset is {} -> {}",
                cfg.model.input_dim(),
                cfg.model.output_dim(),
                data.input_dim,
                data.output_dim
            )));
        }
        if cfg.clients_per_round > data.train_clients.len() {
            return Err(FedError::InvalidConfig(format!(
                "clients_per_round {} exceeds {} train clients",
                cfg.clients_per_round,
                data.train_clients.len()
            )));
        }
        let init = init_params(&cfg.model, rng::derive_seed(cfg.seed, &[rng::STREAM_INIT]));
        Ok(Simulation {
            cfg,
            data,
            state: ServerState::new(init),
            round: 0,
            comm_cum: CommCost::default(),
            fisher_extra_passes: 0,
            cohorts: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &FederatedDataset {
        &self.data
    }

    pub fn params(&self) -> &ParamVector {
        &self.state.params
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Local config actually used by clients. FedAvg never needs a Fisher estimate.
    fn local_config(&self) -> LocalTrainConfig {
        let mut local = self.cfg.local.clone();
        if self.cfg.agg.algo == Algo::Fedavg {
            local.fisher_mode = FisherMode::None;
        }
        local
    }

    /// Runs one round and, when due, evaluates it.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.round + 1;
        self.run_round(round).map_err(|e| e.in_round(round))
    }

    fn run_round(&mut self, round: usize) -> Result<RoundOutcome> {
        let spec = &self.cfg.model;
        let cohort = sample_cohort(
            self.cfg.seed,
            round,
            self.data.train_clients.len(),
            self.cfg.clients_per_round,
        )?;
        let local = self.local_config();
        let global = &self.state.params;
        let seed = self.cfg.seed;
        let clients = &self.data.train_clients;

        // Collected in cohort (ascending id) order regardless of completion order.
        let updates = cohort
            .par_iter()
            .map(|&idx| {
                let client = &clients[idx];
                let client_seed = rng::derive_seed(
                    seed,
                    &[rng::STREAM_LOCAL, round as u64, client.client_id as u64],
                );
                fed_local_train(spec, global, &client.train, &local, client_seed)
                    .map(|mut u| {
                        u.client_id = client.client_id;
                        u
                    })
                    .map_err(|e| e.for_client(client.client_id))
            })
            .collect::<Result<Vec<_>>>()?;

        let agg = aggregation::aggregate(&updates, &self.cfg.agg)?;
        if agg.fallback_coords > 0 {
            log::debug!(
                "round {round}: {} coordinates had zero Fisher mass, used FedAvg value",
                agg.fallback_coords
            );
        }
        let state = std::mem::replace(&mut self.state, ServerState::new(ParamVector::zeros(0)));
        self.state = aggregation::server_step(state, &agg.pseudo_grad, &self.cfg.agg)?;

        let comm = comm_cost(cohort.len(), spec.param_count(), self.cfg.agg.algo);
        self.comm_cum.up_bits += comm.up_bits;
        self.comm_cum.down_bits += comm.down_bits;
        self.fisher_extra_passes += updates.iter().map(|u| u.fisher_passes as u64).sum::<u64>();
        self.cohorts.push(cohort.clone());
        self.round = round;

        let due = round.is_multiple_of(self.cfg.eval_every) || round == self.cfg.rounds;
        let metrics = if due {
            Some(self.evaluate(round, &cohort, &updates, agg.fallback_coords, comm)?)
        } else {
            None
        };
        Ok(RoundOutcome {
            round,
            cohort,
            updates,
            fallback_coords: agg.fallback_coords,
            comm,
            metrics,
        })
    }

    /// Clients whose held-out half measures global performance.
    fn evaluation_clients(&self) -> Result<Vec<ClientDataset>> {
        if self.data.heldout_clients.is_empty() {
            return Ok(self
                .data
                .train_clients
                .iter()
                .filter(|c| !c.eval.is_empty())
                .cloned()
                .collect());
        }
        self.data
            .heldout_clients
            .iter()
            .map(|c| split_for_personalization(c, 0.0))
            .collect()
    }

    fn evaluate(
        &self,
        round: usize,
        cohort: &[usize],
        updates: &[ClientUpdate],
        fallback_coords: usize,
        comm: CommCost,
    ) -> Result<RoundMetrics> {
        let spec = &self.cfg.model;
        let global = &self.state.params;
        let (global_loss, global_metric) =
            evaluation::global_performance(spec, global, &self.evaluation_clients()?)?;

        let cohort_clients: Vec<ClientDataset> =
            cohort.iter().map(|&i| self.data.train_clients[i].clone()).collect();
        let client_models: Vec<ParamVector> = updates.iter().map(|u| u.params.clone()).collect();
        let csb = evaluation::client_server_barrier(
            spec,
            global,
            &client_models,
            &cohort_clients,
            self.cfg.csb_metric,
        )?;
        let fsd = evaluation::function_space_objective(spec, global, &client_models, &cohort_clients)?;

        let personalization = self
            .cfg
            .personalize_fractions
            .iter()
            .enumerate()
            .map(|(fi, &fraction)| self.personalization(round, fi, fraction))
            .collect::<Result<Vec<_>>>()?;

        Ok(RoundMetrics {
            round,
            global_loss,
            global_metric,
            csb,
            fallback_coords,
            comm_bits_up: comm.up_bits,
            comm_bits_down: comm.down_bits,
            comm_bits_up_cum: self.comm_cum.up_bits,
            comm_bits_down_cum: self.comm_cum.down_bits,
            personalization,
            fsd_kl: Some(fsd),
        })
    }

    fn personalization(&self, round: usize, fraction_idx: usize, fraction: f64) -> Result<PersonalizationResult> {
        let pool = if self.data.heldout_clients.is_empty() {
            &self.data.train_clients
        } else {
            &self.data.heldout_clients
        };
        let cfg = PersonalizeConfig {
            epochs: self.cfg.personalize_epochs,
            lr: self.cfg.local.lr_local,
            batch_size: self.cfg.local.batch_size,
        };
        let results = pool
            .par_iter()
            .map(|c| {
                let split = split_for_personalization(c, fraction)?;
                let seed = rng::derive_seed(
                    self.cfg.seed,
                    &[rng::STREAM_PERSONALIZE, round as u64, c.client_id as u64, fraction_idx as u64],
                );
                evaluation::personalize_and_eval(&self.cfg.model, &self.state.params, &split, &cfg, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        Ok(PersonalizationResult {
            fraction,
            before: results.iter().map(|r| r.0).sum::<f64>() / n,
            after: results.iter().map(|r| r.1).sum::<f64>() / n,
        })
    }

    pub fn into_record(self, per_round: Vec<RoundMetrics>) -> RunRecord {
        let digest = params_digest(&self.state.params);
        RunRecord {
            algo: self.cfg.agg.algo,
            config: self.cfg,
            per_round,
            cohorts: self.cohorts,
            fisher_extra_passes: self.fisher_extra_passes,
            final_params: self.state.params,
            final_params_digest: digest,
        }
    }
}

/// Runs all configured rounds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let sim = Simulation::new(cfg.clone())?;
    drive(sim)
}

pub fn run_experiment_with_data(cfg: &ExperimentConfig, data: FederatedDataset) -> Result<RunRecord> {
    drive(Simulation::with_data(cfg.clone(), data)?)
}

fn drive(mut sim: Simulation) -> Result<RunRecord> {
    let mut per_round = Vec::new();
    while sim.rounds_done() < sim.config().rounds {
        if let Some(m) = sim.step()?.metrics {
            log::info!(
                "[{}] round {}: loss {:.5} metric {:.5} csb {:.5}",
                sim.config().agg.algo.name(),
                m.round,
                m.global_loss,
                m.global_metric,
                m.csb
            );
            per_round.push(m);
        }
    }
    Ok(sim.into_record(per_round))
}

/// FedAvg and FedFish under identical seeds.
pub fn run_ab(cfg: &ExperimentConfig) -> Result<(RunRecord, RunRecord)> {
    let with = |algo| {
        let mut c = cfg.clone();
        c.agg.algo = algo;
        c
    };
    let data = cfg.dataset.build(cfg.seed)?;
    let avg = run_experiment_with_data(&with(Algo::Fedavg), data.clone())?;
    let fish = run_experiment_with_data(&with(Algo::Fedfish), data)?;
    Ok((avg, fish))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y_true: f64,
    pub y_client0: f64,
    pub y_client1: f64,
    pub y_fedavg: f64,
    pub y_fedfish: f64,
}

#[derive(Debug, Clone)]
pub struct ToyFigure {
    pub overlap: Overlap,
    pub curve: Vec<CurvePoint>,
    pub csb_fedavg: f64,
    pub csb_fedfish: f64,
}

/// Runs both algorithms on the toy regression task for one overlap regime and
/// samples every model on a grid over `[-2, 2]`.
///
/// `base` must use the toy regression dataset; its overlap is replaced.
pub fn toy_figure(base: &ExperimentConfig, overlap: Overlap, grid_points: usize) -> Result<ToyFigure> {
    let mut cfg = base.clone();
    match &mut cfg.dataset {
        crate::config::DatasetConfig::ToyRegression { overlap: o, .. } => *o = overlap,
        _ => {
            return Err(FedError::InvalidConfig(
                "toy figure needs a toy_regression dataset".into(),
            ))
        }
    }
    if cfg.clients_per_round != 2 {
        return Err(FedError::InvalidConfig("toy figure needs clients_per_round = 2".into()));
    }
    let data = cfg.dataset.build(cfg.seed)?;
    let run = |algo: Algo| -> Result<(Vec<ParamVector>, ParamVector, f64)> {
        let mut c = cfg.clone();
        c.agg.algo = algo;
        let mut sim = Simulation::with_data(c, data.clone())?;
        let mut last = None;
        while sim.rounds_done() < sim.config().rounds {
            last = Some(sim.step()?);
        }
        let last = last.expect("rounds >= 1");
        let csb = last.metrics.as_ref().map(|m| m.csb).expect("final round is evaluated");
        let clients = last.updates.iter().map(|u| u.params.clone()).collect();
        Ok((clients, sim.params().clone(), csb))
    };
    let (clients, avg_params, csb_fedavg) = run(Algo::Fedavg)?;
    let (_, fish_params, csb_fedfish) = run(Algo::Fedfish)?;

    let n = grid_points.max(2);
    let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let grid = Matrix::from_vec(n, 1, xs.clone())?;
    let predict = |p: &ParamVector| -> Result<Vec<f64>> {
        Ok(nn::forward(&cfg.model, p, &grid)?.data().to_vec())
    };
    let (c0, c1) = (predict(&clients[0])?, predict(&clients[1])?);
    let (ya, yf) = (predict(&avg_params)?, predict(&fish_params)?);
    let curve = (0..n)
        .map(|i| CurvePoint {
            x: xs[i],
            y_true: crate::datasets::toy_target(xs[i]),
            y_client0: c0[i],
            y_client1: c1[i],
            y_fedavg: ya[i],
            y_fedfish: yf[i],
        })
        .collect();
    Ok(ToyFigure {
        overlap,
        curve,
        csb_fedavg,
        csb_fedfish,
    })
}

/// Model spec used by a config; convenience for callers holding only a record.
pub fn spec_of(record: &RunRecord) -> &ModelSpec {
    &record.config.model
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::ServerOpt;
    use crate::config::DatasetConfig;

    fn small_cls() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::dirichlet_default();
        cfg.dataset = DatasetConfig::DirichletClassification {
            num_clients: 6,
            num_classes: 3,
            alpha: 0.3,
            examples_per_client: 40,
            input_dim: 4,
        };
        cfg.model.layer_sizes = vec![4, 8, 3];
        cfg.rounds = 4;
        cfg.clients_per_round = 3;
        cfg.eval_every = 2;
        cfg.local.lr_local = 0.05;
        cfg.agg.lr_global = 0.01;
        cfg.personalize_epochs = 2;
        cfg
    }

    #[test]
    fn cohorts_are_deterministic_and_valid() {
        let a = sample_cohort(3, 5, 10, 4).unwrap();
        assert_eq!(a, sample_cohort(3, 5, 10, 4).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&c| c < 10));
        assert!(sample_cohort(3, 5, 3, 4).is_err());
        let rounds: Vec<_> = (1..20).map(|r| sample_cohort(3, r, 10, 4).unwrap()).collect();
        assert!(rounds.iter().any(|c| *c != rounds[0]));
    }

    #[test]
    fn single_client_round_reproduces_local_model() {
        let mut cfg = ExperimentConfig::toy_default();
        cfg.local.epochs = 5;
        cfg.clients_per_round = 1;
        let data = cfg.dataset.build(cfg.seed).unwrap();
        let mut sim = Simulation::with_data(cfg.clone(), data).unwrap();
        let init = sim.params().clone();
        let out = sim.step().unwrap();
        let u = &out.updates[0];
        assert!(sim.params().max_abs_diff(&u.params) < 1e-12);
        let replay: Vec<f64> = init.iter().zip(u.delta.iter()).map(|(g, d)| g - d).collect();
        assert!(sim.params().max_abs_diff(&replay) < 1e-12);
        let m = out.metrics.unwrap();
        assert!(m.csb.abs() < 1e-9, "csb {}", m.csb);
    }

    #[test]
    fn run_is_deterministic_and_ab_matches_cohorts() {
        let cfg = small_cls();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.final_params_digest, b.final_params_digest);
        assert_eq!(a.per_round, b.per_round);
        assert_eq!(a.per_round.len(), 2);

        let (avg, fish) = run_ab(&cfg).unwrap();
        assert_eq!(avg.cohorts, fish.cohorts);
        assert_eq!(avg.algo, Algo::Fedavg);
        assert_eq!(fish.algo, Algo::Fedfish);
        assert_eq!(avg.fisher_extra_passes, 0);
        assert_eq!(fish.fisher_extra_passes, 4 * 3);
        assert_ne!(avg.final_params_digest, fish.final_params_digest);
    }

    #[test]
    fn comm_accounting_is_cumulative() {
        let mut cfg = small_cls();
        cfg.eval_every = 1;
        let r = run_experiment(&cfg).unwrap();
        let p = cfg.model.param_count() as u64;
        for pair in r.per_round.windows(2) {
            assert!(pair[1].comm_bits_up_cum > pair[0].comm_bits_up_cum);
            assert!(pair[1].comm_bits_down_cum > pair[0].comm_bits_down_cum);
        }
        let last = r.per_round.last().unwrap();
        assert_eq!(last.comm_bits_up_cum, 4 * 3 * 2 * p * 64);
        assert_eq!(last.comm_bits_down_cum, 4 * p * 64);
        assert_eq!(last.personalization.len(), 3);
        assert_eq!(last.personalization[0].before, last.personalization[0].after);
        assert!(last.personalization.iter().all(|p| p.before == last.personalization[0].before));
    }

    #[test]
    fn errors_carry_round_context() {
        let mut cfg = small_cls();
        cfg.local.lr_local = 1e200;
        cfg.agg.server_opt = ServerOpt::Sgd;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(err.to_string().starts_with("round 1:"), "{err}");

        let mut cfg = small_cls();
        cfg.clients_per_round = 7;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn toy_figure_produces_curves() {
        let mut cfg = ExperimentConfig::toy_default();
        cfg.local.epochs = 20;
        let fig = toy_figure(&cfg, Overlap::Partial, 11).unwrap();
        assert_eq!(fig.curve.len(), 11);
        assert_eq!(fig.curve[0].x, -2.0);
        assert_eq!(fig.curve[10].x, 2.0);
        assert!(fig.csb_fedavg.is_finite() && fig.csb_fedfish.is_finite());
        assert!(toy_figure(&small_cls(), Overlap::Full, 5).is_err());
    }
}
