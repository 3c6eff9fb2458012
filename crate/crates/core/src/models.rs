//! Small differentiable classifiers exposed through flat parameter vectors.
//!
//! Both architectures are a chain of dense layers: logistic regression is a
//! single `input_dim -> num_classes` layer, the MLP inserts `tanh` hidden
//! layers. Parameters are laid out layer by layer, each layer as its weight
//! matrix (`out x in`, row-major) followed by its bias vector. The loss is the
//! mean softmax cross-entropy over the batch.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng;
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "logistic-regression")]
    LogisticRegression,
    #[serde(rename = "mlp")]
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::LogisticRegression,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        match self.architecture {
            Architecture::LogisticRegression if !self.hidden_dims.is_empty() => Err(
                Error::InvalidArgument("logistic regression takes no hidden layers".into()),
            ),
            Architecture::Mlp if self.hidden_dims.is_empty() => Err(Error::InvalidArgument(
                "an mlp needs at least one hidden layer".into(),
            )),
            _ if self.hidden_dims.contains(&0) => Err(Error::InvalidArgument(
                "hidden layer widths must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.widths()
            .windows(2)
            .map(|p| {
                let shape = LayerShape {
                    fan_in: p[0],
                    fan_out: p[1],
                    offset,
                };
                offset += p[0] * p[1] + p[1];
                shape
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    fn weights<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        &w[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, w: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &w[start..start + self.fan_out]
    }

    fn grads_mut<'a>(&self, g: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let len = self.fan_in * self.fan_out;
        g[self.offset..self.offset + len + self.fan_out].split_at_mut(len)
    }
}

/// One layer's parameters in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out x fan_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Splits a flat vector into per-layer weights and biases.
pub fn get_params(spec: &ModelSpec, w: &ParamVector) -> Result<Vec<LayerParams>> {
    ensure_len("parameter vector", spec.num_params(), w.len())?;
    Ok(spec
        .layers()
        .iter()
        .map(|l| LayerParams {
            weights: l.weights(w).to_vec(),
            bias: l.bias(w).to_vec(),
        })
        .collect())
}

/// Inverse of [`get_params`].
pub fn set_params(spec: &ModelSpec, layers: &[LayerParams]) -> Result<ParamVector> {
    let shapes = spec.layers();
    ensure_len("layer count", shapes.len(), layers.len())?;
    let mut out = Vec::with_capacity(spec.num_params());
    for (shape, layer) in shapes.iter().zip(layers) {
        ensure_len("layer weights", shape.fan_in * shape.fan_out, layer.weights.len())?;
        ensure_len("layer bias", shape.fan_out, layer.bias.len())?;
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.bias);
    }
    Ok(ParamVector::from(out))
}

/// A minibatch: `labels.len()` rows of `input_dim` features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        ensure_len("batch inputs", labels.len() * input_dim, inputs.len())?;
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

fn check_shapes(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<()> {
    ensure_len("parameter vector", spec.num_params(), w.len())?;
    ensure_len("batch input width", spec.input_dim, batch.input_dim)?;
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {})",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Weights drawn from `N(0, 1/fan_in)`, biases zero.
pub fn init_params(spec: &ModelSpec, init_seed: u64) -> ParamVector {
    let mut rng = rng::chacha(init_seed);
    let mut w = vec![0.0; spec.num_params()];
    for layer in spec.layers() {
        let normal = Normal::new(0.0, (1.0 / layer.fan_in as f64).sqrt())
            .expect("fan-in is positive");
        let len = layer.fan_in * layer.fan_out;
        for v in &mut w[layer.offset..layer.offset + len] {
            *v = normal.sample(&mut rng);
        }
    }
    ParamVector::from(w)
}

/// Forward pass state for a single sample.
struct Trace {
    /// Activations per layer boundary; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(z)[label]`, computed stably.
fn log_prob(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[label] - lse
}

fn dense(layer: &LayerShape, w: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let weights = layer.weights(w);
    let bias = layer.bias(w);
    out.clear();
    out.extend(
        weights
            .chunks_exact(layer.fan_in)
            .zip(bias)
            .map(|(row, b)| b + crate::vector::dot(row, input)),
    );
}

fn forward(layers: &[LayerShape], w: &[f64], x: &[f64]) -> (Trace, Vec<f64>) {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    let mut logits = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.fan_out);
        dense(layer, w, acts.last().expect("input pushed"), &mut z);
        if i + 1 == layers.len() {
            logits = z;
        } else {
            z.iter_mut().for_each(|v| *v = v.tanh());
            acts.push(z);
        }
    }
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    (Trace { acts, probs }, logits)
}

/// Class logits for one input row.
pub fn logits(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    forward(&spec.layers(), w, x).1
}

/// Mean cross-entropy and its exact gradient.
pub fn loss_and_gradient(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<(f64, ParamVector)> {
    check_shapes(spec, w, batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let layers = spec.layers();
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    let mut delta = Vec::new();
    let mut next_delta = Vec::new();
    for i in 0..batch.len() {
        let (trace, logits) = forward(&layers, w, batch.row(i));
        let label = batch.labels[i];
        total -= log_prob(&logits, label);

        delta.clear();
        delta.extend_from_slice(&trace.probs);
        delta[label] -= 1.0;
        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &trace.acts[li];
            let (gw, gb) = layer.grads_mut(&mut grad);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    crate::vector::axpy(d, input, &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in]);
                }
            }
            if li == 0 {
                break;
            }
            // Back through the weights and the tanh of the layer below.
            next_delta.clear();
            next_delta.resize(layer.fan_in, 0.0);
            for (o, row) in layer.weights(w).chunks_exact(layer.fan_in).enumerate() {
                crate::vector::axpy(delta[o], row, &mut next_delta);
            }
            for (nd, a) in next_delta.iter_mut().zip(input) {
                *nd *= 1.0 - a * a;
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, ParamVector::from(grad)))
}

pub fn loss(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<f64> {
    check_shapes(spec, w, batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let layers = spec.layers();
    let total: f64 = (0..batch.len())
        .map(|i| -log_prob(&forward(&layers, w, batch.row(i)).1, batch.labels[i]))
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn gradient(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<ParamVector> {
    loss_and_gradient(spec, w, batch).map(|(_, g)| g)
}

pub fn predict(spec: &ModelSpec, w: &[f64], x: &[f64]) -> usize {
    argmax(&logits(spec, w, x))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax-correct predictions over all batches.
pub fn evaluate(spec: &ModelSpec, w: &[f64], test_set: &[Batch]) -> Result<f64> {
    let total: usize = test_set.iter().map(Batch::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let layers = spec.layers();
    let mut correct = 0usize;
    for batch in test_set {
        check_shapes(spec, w, batch)?;
        for i in 0..batch.len() {
            if argmax(&forward(&layers, w, batch.row(i)).1) == batch.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Softmax cross-entropy written out directly, independent of the layer code.
    fn direct_ce_logistic(d: usize, c: usize, w: &[f64], x: &[f64], y: usize) -> f64 {
        let z: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| w[k * d + j] * x[j]).sum::<f64>() + w[c * d + k])
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        -(z[y].exp() / denom).ln()
    }

    fn random_batch(spec: &ModelSpec, size: usize, seed: u64) -> Batch {
        let mut rng = rng::chacha(seed);
        let inputs = (0..size * spec.input_dim).map(|_| rng.random::<f64>()).collect();
        let labels = (0..size).map(|_| rng.random_range(0..spec.num_classes)).collect();
        Batch::new(inputs, labels, spec.input_dim).unwrap()
    }

    fn random_params(spec: &ModelSpec, seed: u64) -> ParamVector {
        let mut rng = rng::chacha(seed);
        ParamVector::from(
            (0..spec.num_params())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        )
    }

    fn fd_max_rel_error(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> f64 {
        let g = gradient(spec, w, batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut wp = w.clone();
        for i in 0..w.len() {
            let orig = wp[i];
            wp[i] = orig + h;
            let lp = loss(spec, &wp, batch).unwrap();
            wp[i] = orig - h;
            let lm = loss(spec, &wp, batch).unwrap();
            wp[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn parameter_counts() {
        let lr = ModelSpec::logistic_regression(2, 2);
        assert_eq!(init_params(&lr, 7).len(), 6);
        let mlp = ModelSpec::mlp(4, vec![3], 2);
        assert_eq!(mlp.num_params(), 23);
        assert_eq!(init_params(&mlp, 1).len(), 23);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::mlp(5, vec![4], 3);
        let a = init_params(&spec, 9);
        assert_eq!(a, init_params(&spec, 9));
        assert_ne!(a, init_params(&spec, 10));
        for layer in get_params(&spec, &a).unwrap() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_weights_give_log_two() {
        let spec = ModelSpec::logistic_regression(3, 2);
        let batch = random_batch(&spec, 5, 1);
        let l = loss(&spec, &vec![0.0; spec.num_params()], &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let spec = ModelSpec::logistic_regression(1, 2);
        // class 1 logit = 20 x, class 0 logit = -20 x
        let w = vec![-20.0, 20.0, 0.0, 0.0];
        let batch = Batch::new(vec![1.0], vec![1], 1).unwrap();
        assert!(loss(&spec, &w, &batch).unwrap() < 1e-3);
    }

    #[test]
    fn single_sample_loss_matches_direct_formula() {
        let spec = ModelSpec::logistic_regression(4, 3);
        for seed in 0..10 {
            let w = random_params(&spec, seed);
            let batch = random_batch(&spec, 1, seed + 100);
            let expected = direct_ce_logistic(4, 3, &w, batch.row(0), batch.labels[0]);
            let got = loss(&spec, &w, &batch).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = ModelSpec::logistic_regression(2, 2);
        let batch = random_batch(&spec, 2, 0);
        assert!(matches!(
            loss(&spec, &[0.0; 5], &batch),
            Err(Error::DimensionMismatch { .. })
        ));
        let wide = random_batch(&ModelSpec::logistic_regression(3, 2), 2, 0);
        assert!(gradient(&spec, &[0.0; 6], &wide).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_both_architectures() {
        let specs = [
            ModelSpec::logistic_regression(6, 4),
            ModelSpec::mlp(5, vec![4, 3], 3),
        ];
        for spec in &specs {
            for case in 0..100u64 {
                let w = random_params(spec, case);
                let batch = random_batch(spec, 1 + (case as usize % 4), case + 1000);
                let err = fd_max_rel_error(spec, &w, &batch);
                assert!(err < 1e-4, "{spec:?} case {case}: rel err {err}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_separable_minimum() {
        // 1-d input, labels split by sign. With huge weights the softmax is
        // saturated on both points, so the gradient is numerically zero.
        let spec = ModelSpec::logistic_regression(1, 2);
        let batch = Batch::new(vec![-1.0, 1.0], vec![0, 1], 1).unwrap();
        let w = vec![-30.0, 30.0, 0.0, 0.0];
        let g = gradient(&spec, &w, &batch).unwrap();
        assert!(crate::vector::norm2(&g) < 1e-6);
    }

    #[test]
    fn duplicated_sample_gradient_equals_single() {
        let spec = ModelSpec::mlp(3, vec![4], 2);
        let w = random_params(&spec, 5);
        let single = random_batch(&spec, 1, 77);
        let dup = Batch::new(
            single.inputs.repeat(4),
            single.labels.repeat(4),
            spec.input_dim,
        )
        .unwrap();
        let g1 = gradient(&spec, &w, &single).unwrap();
        let g4 = gradient(&spec, &w, &dup).unwrap();
        for (a, b) in g1.iter().zip(g4.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn evaluate_edge_cases() {
        let spec = ModelSpec::logistic_regression(1, 2);
        let w = vec![-30.0, 30.0, 0.0, 0.0];
        let batch = Batch::new(vec![-1.0, 1.0, -2.0], vec![0, 1, 0], 1).unwrap();
        assert_eq!(evaluate(&spec, &w, &[batch]).unwrap(), 1.0);
        assert!(evaluate(&spec, &w, &[]).is_err());

        // Constant output on a balanced 10-class set is right one time in ten.
        let spec = ModelSpec::logistic_regression(2, 10);
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let batch = Batch::new(vec![0.5; 2000], labels, 2).unwrap();
        let acc = evaluate(&spec, &vec![0.0; spec.num_params()], &[batch]).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn full_batch_descent_is_monotone_on_logistic_regression() {
        let spec = ModelSpec::logistic_regression(5, 3);
        let batch = random_batch(&spec, 40, 3);
        let mut w = init_params(&spec, 2);
        let mut prev = loss(&spec, &w, &batch).unwrap();
        for _ in 0..200 {
            let g = gradient(&spec, &w, &batch).unwrap();
            crate::vector::axpy(-0.05, &g, &mut w);
            let cur = loss(&spec, &w, &batch).unwrap();
            assert!(cur >= 0.0);
            assert!(cur <= prev + 1e-8, "{cur} > {prev}");
            prev = cur;
        }
    }

    proptest! {
        #[test]
        fn flatten_round_trip(seed in any::<u64>(), hidden in 1usize..6, classes in 1usize..5) {
            let spec = ModelSpec::mlp(3, vec![hidden], classes);
            let w = random_params(&spec, seed);
            let layers = get_params(&spec, &w).unwrap();
            prop_assert_eq!(set_params(&spec, &layers).unwrap(), w);
        }

        #[test]
        fn loss_is_nonnegative(seed in any::<u64>()) {
            let spec = ModelSpec::mlp(4, vec![3], 3);
            let w = random_params(&spec, seed);
            let batch = random_batch(&spec, 3, seed ^ 1);
            prop_assert!(loss(&spec, &w, &batch).unwrap() >= 0.0);
        }
    }
}
