//! Synthetic federated datasets.
//!
//! Two generators cover the heterogeneity axis: a two-client 1-D regression
//! problem with controllable support overlap, and a Gaussian-blob
//! classification task whose per-client label mix is drawn from a symmetric
//! Dirichlet distribution.

mod io;

pub use io::{read_dataset, read_dataset_file, write_dataset, write_dataset_file};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::{Batch, Matrix};
use crate::rng;

/// One client's examples, split into disjoint train / personalize / eval sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub personalize: Batch,
    pub eval: Batch,
}

impl ClientDataset {
    /// Training-set size, used as the aggregation weight `w_i = |D_i|`.
    pub fn num_train(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub train_clients: Vec<ClientDataset>,
    pub heldout_clients: Vec<ClientDataset>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl FederatedDataset {
    pub fn validate(&self) -> Result<()> {
        if self.train_clients.is_empty() {
            return Err(FedError::InvalidConfig("dataset has no train clients".into()));
        }
        let mut ids: Vec<usize> = self
            .train_clients
            .iter()
            .chain(&self.heldout_clients)
            .map(|c| c.client_id)
            .collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(FedError::InvalidConfig("duplicate client ids".into()));
        }
        for c in self.train_clients.iter().chain(&self.heldout_clients) {
            for b in [&c.train, &c.personalize, &c.eval] {
                if b.inputs.cols() != self.input_dim || b.targets.cols() != self.output_dim {
                    return Err(FedError::InvalidConfig(format!(
                        "client {} has splits inconsistent with dims {}x{}",
                        c.client_id, self.input_dim, self.output_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    Full,
    Partial,
    Disjoint,
}

impl Overlap {
    pub const ALL: [Overlap; 3] = [Overlap::Full, Overlap::Partial, Overlap::Disjoint];

    /// Input supports `[lo, hi]` of the two clients.
    pub fn supports(self) -> [(f64, f64); 2] {
        match self {
            Overlap::Full => [(-2.0, 2.0), (-2.0, 2.0)],
            Overlap::Partial => [(-2.0, 1.0), (-1.0, 2.0)],
            Overlap::Disjoint => [(-2.0, -0.2), (0.2, 2.0)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Overlap::Full => "full",
            Overlap::Partial => "partial",
            Overlap::Disjoint => "disjoint",
        }
    }
}

/// Target function of the toy regression task.
pub fn toy_target(x: f64) -> f64 {
    (2.0 * x).sin()
}

fn sample_toy(rng: &mut ChaCha8Rng, support: (f64, f64), n: usize, noise: Option<Normal<f64>>) -> Batch {
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(support.0..=support.1)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| toy_target(x) + noise.map_or(0.0, |d| d.sample(rng)))
        .collect();
    Batch {
        inputs: Matrix::from_vec(n, 1, xs).expect("n x 1"),
        targets: Matrix::from_vec(n, 1, ys).expect("n x 1"),
    }
}

/// Two-client regression of `y = sin(2x) + noise`.
///
/// Train clients 0 and 1 each get `n_per_client` training points and as many
/// fresh evaluation points from their own support. Held-out clients 2 and 3
/// mirror those supports with fresh samples, all placed in `eval`.
pub fn gen_toy_regression(
    overlap: Overlap,
    n_per_client: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    if n_per_client < 2 {
        return Err(FedError::InvalidConfig("n_per_client must be >= 2".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(FedError::InvalidConfig("noise_sd must be finite and >= 0".into()));
    }
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("valid sd"));
    let supports = overlap.supports();

    let mut train_clients = Vec::with_capacity(2);
    let mut heldout_clients = Vec::with_capacity(2);
    for (i, &support) in supports.iter().enumerate() {
        let mut rng = rng::rng_from(seed, &[rng::STREAM_DATASET, i as u64]);
        let train = sample_toy(&mut rng, support, n_per_client, noise);
        let eval = sample_toy(&mut rng, support, n_per_client, noise);
        train_clients.push(ClientDataset {
            client_id: i,
            train,
            personalize: Batch::empty(1, 1),
            eval,
        });

        let mut rng = rng::rng_from(seed, &[rng::STREAM_DATASET, 2 + i as u64]);
        heldout_clients.push(ClientDataset {
            client_id: 2 + i,
            train: Batch::empty(1, 1),
            personalize: Batch::empty(1, 1),
            eval: sample_toy(&mut rng, support, n_per_client, noise),
        });
    }
    Ok(FederatedDataset {
        train_clients,
        heldout_clients,
        input_dim: 1,
        output_dim: 1,
    })
}

/// Radius of the sphere carrying the class means.
const CLASS_MEAN_RADIUS: f64 = 2.0;
/// Standard deviation of each isotropic class blob.
const CLASS_SD: f64 = 0.5;

/// Number of held-out (never trained on) clients generated next to `num_clients` train clients.
pub fn dirichlet_heldout_count(num_clients: usize) -> usize {
    num_clients.div_ceil(2).max(2)
}

/// Class proportions drawn from a symmetric Dirichlet via normalized Gamma draws.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|g| *g /= total);
    } else {
        // Every draw underflowed; the limit of the distribution is a vertex.
        let hot = rng.random_range(0..k);
        draws.iter_mut().enumerate().for_each(|(i, g)| *g = if i == hot { 1.0 } else { 0.0 });
    }
    draws
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last class with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Class means on a sphere of radius 2, shared by every client.
pub fn class_means(num_classes: usize, input_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::rng_from(seed, &[rng::STREAM_DATASET, u64::MAX]);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * CLASS_MEAN_RADIUS / norm).collect()
        })
        .collect()
}

fn sample_client_examples(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    alpha: f64,
    n: usize,
) -> (Vec<usize>, Matrix, Matrix) {
    let k = means.len();
    let d = means[0].len();
    let blob = Normal::new(0.0, CLASS_SD).expect("valid sd");
    let probs = sample_dirichlet(rng, alpha, k);
    let mut labels = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = vec![0.0; n * k];
    for r in 0..n {
        let c = sample_categorical(rng, &probs);
        labels.push(c);
        inputs.extend(means[c].iter().map(|m| m + blob.sample(rng)));
        targets[r * k + c] = 1.0;
    }
    (
        labels,
        Matrix::from_vec(n, d, inputs).expect("n x d"),
        Matrix::from_vec(n, k, targets).expect("n x k"),
    )
}

/// Dirichlet-heterogeneous multi-class dataset.
///
/// Train clients `0..num_clients` are split 80/10/10 into train / personalize /
/// eval. Held-out clients (see [`dirichlet_heldout_count`]) follow with all
/// of their examples in `eval`.
pub fn gen_dirichlet_classification(
    num_clients: usize,
    num_classes: usize,
    alpha: f64,
    examples_per_client: usize,
    input_dim: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    if num_clients < 2 || num_classes < 2 {
        return Err(FedError::InvalidConfig(
            "need num_clients >= 2 and num_classes >= 2".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::InvalidConfig("alpha must be finite and > 0".into()));
    }
    if input_dim == 0 || examples_per_client < 10 {
        return Err(FedError::InvalidConfig(
            "need input_dim >= 1 and examples_per_client >= 10".into(),
        ));
    }
    let means = class_means(num_classes, input_dim, seed);
    let n = examples_per_client;
    let n_train = n * 8 / 10;
    let n_pers = n / 10;

    let train_clients = (0..num_clients)
        .map(|id| {
            let mut rng = rng::rng_from(seed, &[rng::STREAM_DATASET, id as u64]);
            let (_, x, y) = sample_client_examples(&mut rng, &means, alpha, n);
            let all = Batch::new(x, y).expect("rows agree");
            ClientDataset {
                client_id: id,
                train: all.range(0, n_train),
                personalize: all.range(n_train, n_train + n_pers),
                eval: all.range(n_train + n_pers, n),
            }
        })
        .collect();
    let heldout_clients = (0..dirichlet_heldout_count(num_clients))
        .map(|h| {
            let id = num_clients + h;
            let mut rng = rng::rng_from(seed, &[rng::STREAM_DATASET, id as u64]);
            let (_, x, y) = sample_client_examples(&mut rng, &means, alpha, n);
            ClientDataset {
                client_id: id,
                train: Batch::empty(input_dim, num_classes),
                personalize: Batch::empty(input_dim, num_classes),
                eval: Batch::new(x, y).expect("rows agree"),
            }
        })
        .collect();
    Ok(FederatedDataset {
        train_clients,
        heldout_clients,
        input_dim,
        output_dim: num_classes,
    })
}

/// Fractions of a held-out client's data that may be used for fine-tuning.
pub const PERSONALIZE_FRACTIONS: [f64; 3] = [0.0, 0.25, 0.5];

/// Re-splits a held-out client for personalization.
///
/// The client's non-train examples (`personalize` followed by `eval`, in order)
/// form a pool of `n`. The first `floor(fraction * n)` go to `personalize`, the
/// last `ceil(n / 2)` to `eval`. Since `fraction <= 0.5` the two never overlap,
/// and `eval` is the same for every fraction.
pub fn split_for_personalization(client: &ClientDataset, fraction: f64) -> Result<ClientDataset> {
    if !PERSONALIZE_FRACTIONS.contains(&fraction) {
        return Err(FedError::InvalidConfig(format!(
            "personalization fraction {fraction} not in {{0, 0.25, 0.5}}"
        )));
    }
    if client.eval.is_empty() {
        return Err(FedError::EmptyBatch("split_for_personalization"));
    }
    let pool = concat(&client.personalize, &client.eval);
    let n = pool.len();
    let n_pers = (fraction * n as f64).floor() as usize;
    let n_eval = n.div_ceil(2);
    Ok(ClientDataset {
        client_id: client.client_id,
        train: client.train.clone(),
        personalize: pool.range(0, n_pers),
        eval: pool.range(n - n_eval, n),
    })
}

fn concat(a: &Batch, b: &Batch) -> Batch {
    let mut x = a.inputs.data().to_vec();
    x.extend_from_slice(b.inputs.data());
    let mut y = a.targets.data().to_vec();
    y.extend_from_slice(b.targets.data());
    let rows = a.len() + b.len();
    Batch {
        inputs: Matrix::from_vec(rows, b.inputs.cols(), x).expect("same width"),
        targets: Matrix::from_vec(rows, b.targets.cols(), y).expect("same width"),
    }
}

/// Deterministic permutation of `0..n` for one shuffling stream.
pub(crate) fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn xs(b: &Batch) -> Vec<f64> {
        b.inputs.data().to_vec()
    }

    #[test]
    fn toy_full_overlap_supports() {
        let ds = gen_toy_regression(Overlap::Full, 200, 0.0, 1).unwrap();
        let (a, b) = (xs(&ds.train_clients[0].train), xs(&ds.train_clients[1].train));
        assert!(a.iter().chain(&b).all(|x| (-2.0..=2.0).contains(x)));
        let max_a = a.iter().cloned().fold(f64::MIN, f64::max);
        let min_b = b.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min_b < max_a);
        let y = ds.train_clients[0].train.targets.data();
        assert!(a.iter().zip(y).all(|(x, y)| (toy_target(*x) - y).abs() < 1e-15));
    }

    #[test]
    fn toy_disjoint_supports_are_separated() {
        let ds = gen_toy_regression(Overlap::Disjoint, 100, 0.1, 3).unwrap();
        let max0 = xs(&ds.train_clients[0].train).into_iter().fold(f64::MIN, f64::max);
        let min1 = xs(&ds.train_clients[1].train).into_iter().fold(f64::MAX, f64::min);
        assert!(max0 < min1);
        assert_eq!(ds.heldout_clients.len(), 2);
        assert!(ds.heldout_clients.iter().all(|c| c.eval.len() == 100));
    }

    #[test]
    fn toy_partial_overlap_fraction() {
        let ds = gen_toy_regression(Overlap::Partial, 1000, 0.0, 5).unwrap();
        let a = xs(&ds.train_clients[0].train);
        let inside = a.iter().filter(|x| (-1.0..=1.0).contains(*x)).count() as f64 / a.len() as f64;
        assert!((inside - 2.0 / 3.0).abs() < 0.05, "fraction {inside}");
    }

    #[test]
    fn toy_rejects_tiny_clients() {
        assert!(gen_toy_regression(Overlap::Full, 1, 0.0, 0).is_err());
    }

    fn class_shares(b: &Batch, k: usize) -> Vec<f64> {
        let mut counts = vec![0.0; k];
        for i in 0..b.len() {
            counts[b.target_class(i)] += 1.0;
        }
        counts.iter().map(|c| c / b.len() as f64).collect()
    }

    fn full_client(c: &ClientDataset) -> Batch {
        concat(&concat(&c.train, &c.personalize), &c.eval)
    }

    #[test]
    fn dirichlet_large_alpha_is_uniform() {
        let ds = gen_dirichlet_classification(5, 10, 1e6, 1000, 4, 2).unwrap();
        for c in &ds.train_clients {
            let shares = class_shares(&full_client(c), 10);
            assert!(shares.iter().all(|s| (s - 0.1).abs() < 0.05), "{shares:?}");
        }
    }

    /// Expected modal share under Dirichlet(0.05 * 1_10), estimated with rand_distr's
    /// fixed-size Dirichlet sampler (independent of the generator's Gamma route).
    fn modal_share_oracle() -> f64 {
        let dist = rand_distr::Dirichlet::new([0.05f64; 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let draws = 20_000;
        (0..draws)
            .map(|_| dist.sample(&mut rng).into_iter().fold(0.0, f64::max))
            .sum::<f64>()
            / draws as f64
    }

    #[test]
    fn dirichlet_small_alpha_is_skewed() {
        let oracle = modal_share_oracle();
        assert!(oracle > 0.5, "oracle {oracle}");
        let ds = gen_dirichlet_classification(100, 10, 0.05, 100, 4, 9).unwrap();
        let mean_modal: f64 = ds
            .train_clients
            .iter()
            .map(|c| class_shares(&full_client(c), 10).into_iter().fold(0.0, f64::max))
            .sum::<f64>()
            / 100.0;
        assert!(mean_modal > 0.5);
        assert!((mean_modal - oracle).abs() < 0.1, "{mean_modal} vs {oracle}");
    }

    #[test]
    fn dirichlet_pooled_labels_near_uniform() {
        let ds = gen_dirichlet_classification(200, 10, 0.5, 100, 3, 4).unwrap();
        let mut counts = vec![0.0f64; 10];
        let mut total = 0.0f64;
        for c in &ds.train_clients {
            let b = full_client(c);
            for i in 0..b.len() {
                counts[b.target_class(i)] += 1.0;
                total += 1.0;
            }
        }
        assert!(total >= 1e4);
        assert!(counts.iter().all(|c| (c / total - 0.1).abs() < 0.05), "{counts:?}");
    }

    #[test]
    fn dirichlet_split_sizes_and_determinism() {
        let a = gen_dirichlet_classification(4, 3, 0.3, 100, 5, 7).unwrap();
        let b = gen_dirichlet_classification(4, 3, 0.3, 100, 5, 7).unwrap();
        assert_eq!(a, b);
        let c = &a.train_clients[0];
        assert_eq!((c.train.len(), c.personalize.len(), c.eval.len()), (80, 10, 10));
        assert_eq!(a.heldout_clients.len(), 2);
        assert_eq!(a.heldout_clients[0].client_id, 4);
        a.validate().unwrap();
        for m in class_means(3, 5, 7) {
            let r = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-12);
        }
        assert_ne!(a, gen_dirichlet_classification(4, 3, 0.3, 100, 5, 8).unwrap());
    }

    #[test]
    fn personalization_split_is_disjoint() {
        let ds = gen_toy_regression(Overlap::Full, 11, 0.0, 0).unwrap();
        let client = &ds.heldout_clients[0];
        let pool = xs(&client.eval);
        for f in PERSONALIZE_FRACTIONS {
            let s = split_for_personalization(client, f).unwrap();
            assert_eq!(s.personalize.len(), (f * 11.0) as usize);
            assert_eq!(s.eval.len(), 6);
            assert_eq!(xs(&s.eval), pool[5..].to_vec());
            assert_eq!(xs(&s.personalize), pool[..s.personalize.len()].to_vec());
            assert!(s.personalize.len() <= 11 - s.eval.len());
        }
        assert!(split_for_personalization(client, 0.3).is_err());
        assert!(split_for_personalization(&ds.train_clients[0], 0.25).is_ok());
        let mut empty = client.clone();
        empty.eval = Batch::empty(1, 1);
        assert!(split_for_personalization(&empty, 0.0).is_err());
    }
}
