use fedsim_core::config::{DatasetConfig, ExperimentConfig};
use fedsim_core::datasets::{read_dataset_file, write_dataset_file};
use fedsim_core::report::metrics_csv;
use fedsim_core::runner::{run_experiment, run_experiment_with_data, Simulation};
use fedsim_core::{Algo, FisherMode};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::dirichlet_default();
    cfg.dataset = DatasetConfig::DirichletClassification {
        num_clients: 8,
        num_classes: 4,
        alpha: 0.1,
        examples_per_client: 40,
        input_dim: 5,
    };
    cfg.model.layer_sizes = vec![5, 12, 4];
    cfg.rounds = 6;
    cfg.clients_per_round = 4;
    cfg.eval_every = 3;
    cfg.local.lr_local = 0.05;
    cfg.agg.lr_global = 0.02;
    cfg
}

#[test]
fn file_backed_dataset_reproduces_generated_run() {
    let cfg = small();
    let data = cfg.dataset.build(cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    write_dataset_file(&data, &path).unwrap();
    assert_eq!(read_dataset_file(&path).unwrap(), data);

    let mut file_cfg = cfg.clone();
    file_cfg.dataset = DatasetConfig::File { path };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&file_cfg).unwrap();
    assert_eq!(a.final_params_digest, b.final_params_digest);
    assert_eq!(metrics_csv(&[a]), metrics_csv(&[b]));
}

#[test]
fn training_improves_global_accuracy() {
    let mut cfg = small();
    cfg.rounds = 30;
    cfg.eval_every = 30;
    cfg.personalize_fractions = vec![];
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let first = sim.step().unwrap();
    assert!(first.metrics.is_none());
    let rec = run_experiment(&cfg).unwrap();
    let last = rec.per_round.last().unwrap();
    assert_eq!(last.round, 30);
    // Four classes: chance accuracy is 0.25.
    assert!(last.global_metric > 0.5, "accuracy {}", last.global_metric);
}

#[test]
fn personalization_uses_fractions_in_order() {
    let rec = run_experiment(&small()).unwrap();
    for m in &rec.per_round {
        let fr: Vec<f64> = m.personalization.iter().map(|p| p.fraction).collect();
        assert_eq!(fr, vec![0.0, 0.25, 0.5]);
        // Fraction 0 means no fine-tuning.
        assert_eq!(m.personalization[0].before, m.personalization[0].after);
        assert!(m.fsd_kl.unwrap() >= 0.0);
    }
}

#[test]
fn algorithms_share_data_and_cohorts() {
    let cfg = small();
    let data = cfg.dataset.build(cfg.seed).unwrap();
    let mut avg_cfg = cfg.clone();
    avg_cfg.agg.algo = Algo::Fedavg;
    let mut last_cfg = cfg.clone();
    last_cfg.local.fisher_mode = FisherMode::LastEpoch;
    let avg = run_experiment_with_data(&avg_cfg, data.clone()).unwrap();
    let fish = run_experiment_with_data(&cfg, data.clone()).unwrap();
    let last = run_experiment_with_data(&last_cfg, data).unwrap();
    assert_eq!(avg.cohorts, fish.cohorts);
    assert_eq!(fish.cohorts, last.cohorts);
    assert_eq!(last.fisher_extra_passes, 0);
    assert_eq!(fish.fisher_extra_passes, (cfg.rounds * cfg.clients_per_round) as u64);
}
