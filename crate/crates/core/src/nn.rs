//! Dense feed-forward networks over a flat parameter vector.
//!
//! Parameters for each layer are laid out as the row-major weight matrix
//! `(n_out, n_in)` followed by the `n_out` biases, layers in order. Hidden
//! layers apply the configured activation; the final layer is affine, so the
//! network returns raw outputs (logits for the classification head).

use std::ops::Deref;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    RegressionMse,
    ClassificationSoftmaxCe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            activation,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(FedError::InvalidConfig(format!(
                "layer_sizes needs at least 2 entries, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(FedError::InvalidConfig(
                "every entry of layer_sizes must be >= 1".into(),
            ));
        }
        if self.head == Head::ClassificationSoftmaxCe && self.output_dim() < 2 {
            return Err(FedError::InvalidConfig(
                "classification head needs at least 2 outputs".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight_offset, bias_offset, n_in, n_out)` for every layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let entry = (offset, offset + n_in * n_out, n_in, n_out);
                offset += n_in * n_out + n_out;
                entry
            })
            .collect()
    }
}

/// Flat model parameters. Entries are finite whenever a value crosses a public API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FedError::NonFinite(format!("parameter vector at index {i}")));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    /// Wraps values already known to be finite.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        ParamVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedError::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row vectors; `cols` is used when `rows` is empty.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(FedError::DimensionMismatch {
                    context: "matrix row width",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// A set of examples: inputs `[B x d_in]` and targets `[B x d_out]`.
///
/// Classification targets are one-hot (or, more generally, probability) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(FedError::DimensionMismatch {
                context: "batch targets rows",
                expected: inputs.rows(),
                actual: targets.rows(),
            });
        }
        Ok(Batch { inputs, targets })
    }

    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        Batch {
            inputs: Matrix::zeros(0, input_dim),
            targets: Matrix::zeros(0, output_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Batch {
        let idx: Vec<usize> = (start..end).collect();
        self.select(&idx)
    }

    /// Index of the target class of row `i` (lowest index on ties).
    pub fn target_class(&self, i: usize) -> usize {
        argmax(self.targets.row(i))
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.inputs.cols() != spec.input_dim() {
            return Err(FedError::DimensionMismatch {
                context: "batch input width",
                expected: spec.input_dim(),
                actual: self.inputs.cols(),
            });
        }
        if self.targets.cols() != spec.output_dim() {
            return Err(FedError::DimensionMismatch {
                context: "batch target width",
                expected: spec.output_dim(),
                actual: self.targets.cols(),
            });
        }
        Ok(())
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::rng_from(seed, &[rng::STREAM_INIT]);
    let mut values = vec![0.0; spec.param_count()];
    for (w_off, b_off, n_in, n_out) in spec.layout() {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound is positive");
        for w in &mut values[w_off..b_off] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector::from_finite(values)
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(FedError::DimensionMismatch {
            context: "parameter vector length",
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    Ok(())
}

/// Pre-activations and activations of every layer; `acts[0]` is the input.
struct Trace {
    pre: Vec<Matrix>,
    acts: Vec<Matrix>,
}

fn forward_trace(spec: &ModelSpec, params: &[f64], inputs: &Matrix) -> Trace {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut pre = Vec::with_capacity(layout.len());
    let mut acts = Vec::with_capacity(layout.len() + 1);
    acts.push(inputs.clone());
    for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
        let weights = &params[w_off..b_off];
        let biases = &params[b_off..b_off + n_out];
        let a_prev = &acts[l];
        let mut z = Matrix::zeros(a_prev.rows(), n_out);
        for r in 0..a_prev.rows() {
            let x = a_prev.row(r);
            let out = z.row_mut(r);
            for (o, out_o) in out.iter_mut().enumerate() {
                let w_row = &weights[o * n_in..(o + 1) * n_in];
                *out_o = biases[o] + w_row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            }
        }
        let a = if l == last {
            z.clone()
        } else {
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
            a
        };
        pre.push(z);
        acts.push(a);
    }
    Trace { pre, acts }
}

/// Network outputs for every input row. Classification heads return logits.
pub fn forward(spec: &ModelSpec, params: &[f64], inputs: &Matrix) -> Result<Matrix> {
    check_params(spec, params)?;
    if inputs.cols() != spec.input_dim() {
        return Err(FedError::DimensionMismatch {
            context: "forward input width",
            expected: spec.input_dim(),
            actual: inputs.cols(),
        });
    }
    let mut trace = forward_trace(spec, params, inputs);
    Ok(trace.acts.pop().expect("at least one layer"))
}

/// Mean loss over the batch and its gradient with respect to `params`.
///
/// MSE averages over every output coordinate of every row; cross-entropy
/// averages `-sum_k y_k log softmax_k` over rows.
pub fn loss_and_grad(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_params(spec, params)?;
    batch.check_against(spec)?;
    if batch.is_empty() {
        return Err(FedError::EmptyBatch("loss_and_grad"));
    }
    let trace = forward_trace(spec, params, &batch.inputs);
    let outputs = trace.acts.last().expect("at least one layer");
    let rows = batch.len();
    let d_out = spec.output_dim();

    let mut delta = Matrix::zeros(rows, d_out);
    let mut loss = 0.0;
    match spec.head {
        Head::RegressionMse => {
            let scale = 1.0 / (rows * d_out) as f64;
            for r in 0..rows {
                let (o, y) = (outputs.row(r), batch.targets.row(r));
                for (k, d) in delta.row_mut(r).iter_mut().enumerate() {
                    let e = o[k] - y[k];
                    loss += e * e * scale;
                    *d = 2.0 * e * scale;
                }
            }
        }
        Head::ClassificationSoftmaxCe => {
            let scale = 1.0 / rows as f64;
            for r in 0..rows {
                let log_p = log_softmax(outputs.row(r));
                let y = batch.targets.row(r);
                let mass: f64 = y.iter().sum();
                for (k, d) in delta.row_mut(r).iter_mut().enumerate() {
                    loss -= y[k] * log_p[k] * scale;
                    *d = (log_p[k].exp() * mass - y[k]) * scale;
                }
            }
        }
    }

    let mut grad = vec![0.0; spec.param_count()];
    let layout = spec.layout();
    for l in (0..layout.len()).rev() {
        let (w_off, b_off, n_in, n_out) = layout[l];
        let a_prev = &trace.acts[l];
        for r in 0..rows {
            let d = delta.row(r);
            let x = a_prev.row(r);
            for o in 0..n_out {
                let g_row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, xi) in g_row.iter_mut().zip(x) {
                    *g += d[o] * xi;
                }
                grad[b_off + o] += d[o];
            }
        }
        if l > 0 {
            let weights = &params[w_off..b_off];
            let (z_prev, act_prev) = (&trace.pre[l - 1], &trace.acts[l]);
            let mut next = Matrix::zeros(rows, n_in);
            for r in 0..rows {
                let d = delta.row(r);
                let out = next.row_mut(r);
                for (o, &d_o) in d.iter().enumerate() {
                    let w_row = &weights[o * n_in..(o + 1) * n_in];
                    for (acc, w) in out.iter_mut().zip(w_row) {
                        *acc += d_o * w;
                    }
                }
                for (i, acc) in out.iter_mut().enumerate() {
                    *acc *= spec
                        .activation
                        .derivative(z_prev.row(r)[i], act_prev.row(r)[i]);
                }
            }
            delta = next;
        }
    }

    if !loss.is_finite() {
        return Err(FedError::NonFinite("loss".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FedError::NonFinite("gradient".into()));
    }
    Ok((loss, grad))
}

/// Mean loss over the batch without the gradient.
pub fn loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    batch.check_against(spec)?;
    if batch.is_empty() {
        return Err(FedError::EmptyBatch("loss"));
    }
    let outputs = forward(spec, params, &batch.inputs)?;
    let value = match spec.head {
        Head::RegressionMse => mse(&outputs, &batch.targets),
        Head::ClassificationSoftmaxCe => {
            let total: f64 = outputs
                .iter_rows()
                .zip(batch.targets.iter_rows())
                .map(|(o, y)| {
                    let log_p = log_softmax(o);
                    -y.iter().zip(&log_p).map(|(t, lp)| t * lp).sum::<f64>()
                })
                .sum();
            total / batch.len() as f64
        }
    };
    if !value.is_finite() {
        return Err(FedError::NonFinite("loss".into()));
    }
    Ok(value)
}

fn mse(outputs: &Matrix, targets: &Matrix) -> f64 {
    let n = outputs.data().len() as f64;
    outputs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(o, y)| (o - y) * (o - y))
        .sum::<f64>()
        / n
}

/// Task metric: MSE for regression, accuracy in `[0, 1]` for classification.
pub fn predict_metric(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    batch.check_against(spec)?;
    if batch.is_empty() {
        return Err(FedError::EmptyBatch("predict_metric"));
    }
    let outputs = forward(spec, params, &batch.inputs)?;
    Ok(match spec.head {
        Head::RegressionMse => mse(&outputs, &batch.targets),
        Head::ClassificationSoftmaxCe => {
            let correct = outputs
                .iter_rows()
                .enumerate()
                .filter(|(i, o)| argmax(o) == batch.target_class(*i))
                .count();
            correct as f64 / batch.len() as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(sizes: &[usize], act: Activation, head: Head) -> ModelSpec {
        ModelSpec::new(sizes.to_vec(), act, head).unwrap()
    }

    fn random_batch(spec: &ModelSpec, rows: usize, seed: u64) -> Batch {
        let mut rng = rng::rng_from(seed, &[99]);
        let inputs: Vec<f64> = (0..rows * spec.input_dim())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let d_out = spec.output_dim();
        let targets: Vec<f64> = match spec.head {
            Head::RegressionMse => (0..rows * d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Head::ClassificationSoftmaxCe => (0..rows)
                .flat_map(|_| {
                    let c = rng.random_range(0..d_out);
                    (0..d_out).map(move |k| if k == c { 1.0 } else { 0.0 })
                })
                .collect(),
        };
        Batch::new(
            Matrix::from_vec(rows, spec.input_dim(), inputs).unwrap(),
            Matrix::from_vec(rows, d_out, targets).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn param_count_and_init() {
        let s = spec(&[2, 3, 1], Activation::Tanh, Head::RegressionMse);
        assert_eq!(s.param_count(), 13);
        assert_eq!(init_params(&s, 5).len(), 13);

        let tiny = spec(&[1, 1], Activation::Tanh, Head::RegressionMse);
        let p = init_params(&tiny, 0);
        assert_eq!(p.len(), 2);
        assert_eq!(p[1], 0.0);
        assert_eq!(p, init_params(&tiny, 0));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let s = spec(&[4, 8, 3], Activation::Relu, Head::ClassificationSoftmaxCe);
        let p = init_params(&s, 11);
        let b1 = (6.0f64 / 12.0).sqrt();
        assert!(p[..32].iter().all(|w| w.abs() <= b1));
        assert!(p[32..40].iter().all(|&b| b == 0.0));
        assert!(p[64..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(vec![3], Activation::Tanh, Head::RegressionMse).is_err());
        assert!(ModelSpec::new(vec![3, 0, 1], Activation::Tanh, Head::RegressionMse).is_err());
        assert!(ModelSpec::new(vec![3, 1], Activation::Tanh, Head::ClassificationSoftmaxCe).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let s = spec(&[3, 5, 2], Activation::Tanh, Head::RegressionMse);
        let x = random_batch(&s, 4, 1).inputs;
        let out = forward(&s, &vec![0.0; s.param_count()], &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_net() {
        let s = spec(&[1, 1], Activation::Tanh, Head::RegressionMse);
        let x = Matrix::from_vec(3, 1, vec![-0.7, 0.0, 2.5]).unwrap();
        let out = forward(&s, &[1.0, 0.0], &x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        // [1, 4, 1] tanh network evaluated with straight-line scalar code.
        let s = spec(&[1, 4, 1], Activation::Tanh, Head::RegressionMse);
        let p = init_params(&s, 3);
        let mut p = p.into_inner();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.01 * i as f64;
        }
        let xs = [-1.3, 0.2, 0.9];
        let out = forward(&s, &p, &Matrix::from_vec(3, 1, xs.to_vec()).unwrap()).unwrap();
        for (r, &x) in xs.iter().enumerate() {
            let h0 = (p[0] * x + p[4]).tanh();
            let h1 = (p[1] * x + p[5]).tanh();
            let h2 = (p[2] * x + p[6]).tanh();
            let h3 = (p[3] * x + p[7]).tanh();
            let y = p[8] * h0 + p[9] * h1 + p[10] * h2 + p[11] * h3 + p[12];
            assert!((out.row(r)[0] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolant_has_zero_loss_and_grad() {
        let s = spec(&[1, 1], Activation::Tanh, Head::RegressionMse);
        let x = Matrix::from_vec(3, 1, vec![-1.0, 0.5, 2.0]).unwrap();
        let y = Matrix::from_vec(3, 1, vec![-1.5, 1.5, 4.5]).unwrap();
        let batch = Batch::new(x, y).unwrap();
        let (l, g) = loss_and_grad(&s, &[2.0, 0.5], &batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let s = spec(&[3, 4, 7], Activation::Relu, Head::ClassificationSoftmaxCe);
        let batch = random_batch(&s, 5, 2);
        let (l, _) = loss_and_grad(&s, &vec![0.0; s.param_count()], &batch).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let s = spec(&[2, 3, 1], Activation::Tanh, Head::RegressionMse);
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            forward(&s, &[0.0; 13], &x),
            Err(FedError::DimensionMismatch { .. })
        ));
        assert!(forward(&s, &[0.0; 12], &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn non_finite_loss_is_error() {
        let s = spec(&[1, 1], Activation::Tanh, Head::RegressionMse);
        let batch = Batch::new(
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![f64::INFINITY]).unwrap(),
        )
        .unwrap();
        assert!(matches!(loss_and_grad(&s, &[1.0, 0.0], &batch), Err(FedError::NonFinite(_))));
    }

    #[test]
    fn accuracy_tie_break_prefers_lowest_index() {
        let s = spec(&[1, 3], Activation::Tanh, Head::ClassificationSoftmaxCe);
        // zero weights, equal biases: all logits tie -> predicts class 0.
        let p = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let batch = Batch::new(
            Matrix::from_vec(2, 1, vec![0.3, -0.3]).unwrap(),
            Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(predict_metric(&s, &p, &batch).unwrap(), 0.5);
        assert!(predict_metric(&s, &p, &Batch::empty(1, 3)).is_err());
    }

    fn finite_difference_error(s: &ModelSpec, seed: u64) -> f64 {
        let mut params = init_params(s, seed).into_inner();
        let mut rng = rng::rng_from(seed, &[7]);
        for p in params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let batch = random_batch(s, 4, seed);
        let (_, grad) = loss_and_grad(s, &params, &batch).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for j in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (loss(s, &plus, &batch).unwrap() - loss(s, &minus, &batch).unwrap()) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs());
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gradient_matches_finite_differences(
            hidden in 1usize..6,
            d_in in 1usize..4,
            d_out in 2usize..4,
            relu in any::<bool>(),
            classify in any::<bool>(),
            seed in 0u64..10_000,
        ) {
            let act = if relu { Activation::Relu } else { Activation::Tanh };
            let head = if classify { Head::ClassificationSoftmaxCe } else { Head::RegressionMse };
            let s = spec(&[d_in, hidden, d_out], act, head);
            prop_assert!(s.param_count() < 100);
            prop_assert!(finite_difference_error(&s, seed) < 1e-6);
        }

        #[test]
        fn losses_nonnegative_and_grad_sized(seed in 0u64..10_000, classify in any::<bool>()) {
            let head = if classify { Head::ClassificationSoftmaxCe } else { Head::RegressionMse };
            let s = spec(&[2, 4, 3], Activation::Tanh, head);
            let p = init_params(&s, seed);
            let batch = random_batch(&s, 6, seed);
            let (l, g) = loss_and_grad(&s, &p, &batch).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(g.len(), s.param_count());
            let a = forward(&s, &p, &batch.inputs).unwrap();
            let b = forward(&s, &p, &batch.inputs).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
