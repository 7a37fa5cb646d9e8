//! Feedforward softmax classifiers over flat parameter vectors.
//!
//! A model is a [`ModelSpec`] (layer widths, hidden activation, init seed)
//! plus a [`ParamVector`]. Parameters are laid out layer by layer: the
//! weight matrix in row-major `[fan_out][fan_in]` order followed by the
//! bias vector. A spec with no hidden layers is multinomial logistic
//! regression.

pub mod checkpoint;
pub mod optim;
pub mod train;

pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use train::{train, train_observed, BatchObserver, TrainConfig, TrainData};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Lower clamp applied to every probability before a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

/// Location of one dense layer inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

fn shapes_for(dims: &[usize]) -> Vec<LayerShape> {
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let shape = LayerShape {
                fan_in: w[0],
                fan_out: w[1],
                weight_offset: offset,
                bias_offset: offset + w[0] * w[1],
            };
            offset += (w[0] + 1) * w[1];
            shape
        })
        .collect()
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        ModelSpec {
            layer_sizes,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!("layer {pos} has size 0")));
        }
        if self.output_dim() < 2 {
            return Err(Error::InvalidSpec("output dimension must be at least 2".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn shape_map(&self) -> Vec<LayerShape> {
        shapes_for(&self.layer_sizes)
    }
}

/// Flat trainable parameters of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    dims: Vec<usize>,
}

impl ParamVector {
    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            dims: spec.layer_sizes.clone(),
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Self::from_values(spec, vec![0.0; spec.param_count()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; callers are responsible for keeping entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shape_map(&self) -> Vec<LayerShape> {
        shapes_for(&self.dims)
    }

    /// Copy with new values of the same shape.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            dims: self.dims.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.dims != spec.layer_sizes {
            return Err(Error::InvalidSpec(format!(
                "parameters have layout {:?}, spec has {:?}",
                self.dims, spec.layer_sizes
            )));
        }
        Ok(())
    }
}

/// A probability vector over `p` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("posterior"));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("posterior entry outside [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("posterior sums to {total}")));
        }
        Ok(Posterior(probs))
    }

    pub fn uniform(p: usize) -> Self {
        Posterior(vec![1.0 / p as f64; p])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        Posterior(probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

/// Seeded fan-in-scaled uniform initialisation: every weight and bias of a
/// layer is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_model(spec: &ModelSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, "init"));
    let mut values = Vec::with_capacity(spec.param_count());
    for shape in spec.shape_map() {
        let bound = 1.0 / (shape.fan_in as f64).sqrt();
        for _ in 0..(shape.fan_in + 1) * shape.fan_out {
            values.push(rng.random_range(-bound..bound));
        }
    }
    ParamVector::from_values(spec, values)
}

fn check_inputs(params: &ParamVector, spec: &ModelSpec, x: &Matrix) -> Result<()> {
    spec.validate()?;
    params.check_against(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.cols(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("feature matrix"));
    }
    Ok(())
}

/// Layer activations for a batch: `acts[0]` is the input, the last entry
/// the softmax output. Each entry is `batch x width`, row-major.
struct Activations {
    layers: Vec<Vec<f64>>,
}

fn forward_all(params: &[f64], shapes: &[LayerShape], act: Activation, x: &Matrix) -> Activations {
    let batch = x.rows();
    let mut layers = Vec::with_capacity(shapes.len() + 1);
    layers.push(x.as_slice().to_vec());
    for (l, shape) in shapes.iter().enumerate() {
        let input = &layers[l];
        let w = &params[shape.weight_offset..shape.bias_offset];
        let b = &params[shape.bias_offset..shape.bias_offset + shape.fan_out];
        let mut out = vec![0.0; batch * shape.fan_out];
        let last = l + 1 == shapes.len();
        for s in 0..batch {
            let a = &input[s * shape.fan_in..(s + 1) * shape.fan_in];
            let row = &mut out[s * shape.fan_out..(s + 1) * shape.fan_out];
            for (j, z) in row.iter_mut().enumerate() {
                let wj = &w[j * shape.fan_in..(j + 1) * shape.fan_in];
                let dot: f64 = wj.iter().zip(a).map(|(wi, ai)| wi * ai).sum();
                *z = dot + b[j];
            }
            if last {
                softmax_in_place(row);
            } else {
                for z in row.iter_mut() {
                    *z = act.apply(*z);
                }
            }
        }
        layers.push(out);
    }
    Activations { layers }
}

/// Runs a forward pass and back-propagates a per-sample loss head.
///
/// `head(sample, probs, dlogits)` returns the sample's loss and writes the
/// loss gradient with respect to the logits. Returns the summed loss and
/// the summed parameter gradient (not averaged).
pub(crate) fn backprop<F>(
    params: &ParamVector,
    act: Activation,
    x: &Matrix,
    mut head: F,
) -> (f64, Vec<f64>)
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    let shapes = params.shape_map();
    let p = params.values();
    let acts = forward_all(p, &shapes, act, x);
    let batch = x.rows();
    let out_dim = shapes.last().map_or(0, |s| s.fan_out);

    let probs = acts.layers.last().expect("at least one layer");
    let mut delta = vec![0.0; batch * out_dim];
    let mut loss = 0.0;
    for s in 0..batch {
        loss += head(
            s,
            &probs[s * out_dim..(s + 1) * out_dim],
            &mut delta[s * out_dim..(s + 1) * out_dim],
        );
    }

    let mut grad = vec![0.0; p.len()];
    for (l, shape) in shapes.iter().enumerate().rev() {
        let input = &acts.layers[l];
        {
            let (gw, gb) = grad[shape.weight_offset..shape.bias_offset + shape.fan_out]
                .split_at_mut(shape.fan_in * shape.fan_out);
            for s in 0..batch {
                let a = &input[s * shape.fan_in..(s + 1) * shape.fan_in];
                let d = &delta[s * shape.fan_out..(s + 1) * shape.fan_out];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let gwj = &mut gw[j * shape.fan_in..(j + 1) * shape.fan_in];
                    for (g, &ai) in gwj.iter_mut().zip(a) {
                        *g += dj * ai;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &p[shape.weight_offset..shape.bias_offset];
        let mut prev = vec![0.0; batch * shape.fan_in];
        for s in 0..batch {
            let d = &delta[s * shape.fan_out..(s + 1) * shape.fan_out];
            let pd = &mut prev[s * shape.fan_in..(s + 1) * shape.fan_in];
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let wj = &w[j * shape.fan_in..(j + 1) * shape.fan_in];
                for (pi, &wi) in pd.iter_mut().zip(wj) {
                    *pi += dj * wi;
                }
            }
            let a = &input[s * shape.fan_in..(s + 1) * shape.fan_in];
            for (pi, &ai) in pd.iter_mut().zip(a) {
                *pi *= act.derivative_from_output(ai);
            }
        }
        delta = prev;
    }
    (loss, grad)
}

/// Softmax posteriors for every row of `x`.
pub fn forward_batch(params: &ParamVector, spec: &ModelSpec, x: &Matrix) -> Result<Vec<Posterior>> {
    check_inputs(params, spec, x)?;
    let shapes = params.shape_map();
    let acts = forward_all(params.values(), &shapes, spec.activation, x);
    let probs = acts.layers.last().expect("at least one layer");
    let p = spec.output_dim();
    Ok(probs
        .chunks(p)
        .map(|row| Posterior::from_softmax(row.to_vec()))
        .collect())
}

/// Cross-entropy loss of one sample with the probability clamp applied,
/// writing the exact gradient of that clamped loss into `dlogits`.
pub(crate) fn cross_entropy_head(probs: &[f64], label: usize, dlogits: &mut [f64]) -> f64 {
    let py = probs[label];
    if py < PROB_FLOOR {
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        return -PROB_FLOOR.ln();
    }
    for (k, d) in dlogits.iter_mut().enumerate() {
        *d = probs[k] - if k == label { 1.0 } else { 0.0 };
    }
    -py.ln()
}

fn check_labels(labels: &[usize], x: &Matrix, classes: usize) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Summed cross-entropy loss and summed gradient over the batch.
pub(crate) fn cross_entropy_sum(
    params: &ParamVector,
    spec: &ModelSpec,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_inputs(params, spec, x)?;
    if x.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_labels(labels, x, spec.output_dim())?;
    Ok(backprop(params, spec.activation, x, |s, probs, d| {
        cross_entropy_head(probs, labels[s], d)
    }))
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn grad_cross_entropy(
    params: &ParamVector,
    spec: &ModelSpec,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    let (loss, mut grad) = cross_entropy_sum(params, spec, x, labels)?;
    let n = x.rows() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    let grad = params.with_values(grad)?;
    Ok((loss / n, grad))
}

/// Accuracy (fraction of argmax matches) and mean cross-entropy.
pub fn evaluate(params: &ParamVector, spec: &ModelSpec, x: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if x.rows() == 0 {
        return Err(Error::Empty("evaluation data"));
    }
    check_labels(labels, x, spec.output_dim())?;
    let posteriors = forward_batch(params, spec, x)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (post, &label) in posteriors.iter().zip(labels) {
        if post.argmax() == label {
            correct += 1;
        }
        loss -= post.probs()[label].max(PROB_FLOOR).ln();
    }
    let n = labels.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(
        params: &ParamVector,
        spec: &ModelSpec,
        x: &Matrix,
        labels: &[usize],
        h: f64,
    ) -> Vec<f64> {
        let base = params.values().to_vec();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fp = grad_cross_entropy(&params.with_values(plus).unwrap(), spec, x, labels)
                    .unwrap()
                    .0;
                let fm = grad_cross_entropy(&params.with_values(minus).unwrap(), spec, x, labels)
                    .unwrap()
                    .0;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::new(vec![2, 3], 7);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sized_layer_rejected() {
        assert!(build_model(&ModelSpec::new(vec![2, 0, 2], 1)).is_err());
        assert!(build_model(&ModelSpec::new(vec![2], 1)).is_err());
        assert!(build_model(&ModelSpec::new(vec![2, 1], 1)).is_err());
    }

    #[test]
    fn param_count_matches_shape_map() {
        let spec = ModelSpec::new(vec![4, 8, 3], 0);
        assert_eq!(build_model(&spec).unwrap().len(), 67);
        let shapes = spec.shape_map();
        assert_eq!(shapes[1].weight_offset, 40);
        assert_eq!(shapes[1].bias_offset, 64);
    }

    #[test]
    fn zero_model_is_uniform() {
        let spec = ModelSpec::new(vec![3, 5, 4], 0);
        let params = ParamVector::zeros(&spec).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 0.0, 0.0]]).unwrap();
        for post in forward_batch(&params, &spec, &x).unwrap() {
            for &p in post.probs() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_hand_values() {
        let mut logits = [0.0, 3f64.ln()];
        softmax_in_place(&mut logits);
        assert!((logits[0] - 0.25).abs() < 1e-15);
        assert!((logits[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn logistic_regression_logits() {
        // Zero weights with biases [0, ln 3] give logits [0, ln 3] for any input.
        let spec = ModelSpec::new(vec![2, 2], 0);
        let params = ParamVector::from_values(&spec, vec![0.0, 0.0, 0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let x = Matrix::from_rows(&[vec![5.0, -1.0]]).unwrap();
        let post = &forward_batch(&params, &spec, &x).unwrap()[0];
        assert!((post.probs()[0] - 0.25).abs() < 1e-12);
        assert!((post.probs()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let spec = ModelSpec::new(vec![2, 2], 0);
        let params = build_model(&spec).unwrap();
        let wrong = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(forward_batch(&params, &spec, &wrong).is_err());
        let nan = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(forward_batch(&params, &spec, &nan).is_err());
    }

    #[test]
    fn uniform_posterior_loss_is_ln_p() {
        let spec = ModelSpec::new(vec![3, 4], 0);
        let params = ParamVector::zeros(&spec).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.1, -0.2], vec![1.0, 1.0, 1.0]]).unwrap();
        let (loss, _) = grad_cross_entropy(&params, &spec, &x, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_has_no_loss() {
        let spec = ModelSpec::new(vec![1, 2], 0);
        let params = ParamVector::from_values(&spec, vec![0.0, 0.0, 0.0, 60.0]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let (loss, grad) = grad_cross_entropy(&params, &spec, &x, &[1]).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.values().iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn cross_entropy_errors() {
        let spec = ModelSpec::new(vec![2, 2], 0);
        let params = build_model(&spec).unwrap();
        let empty = Matrix::zeros(0, 2);
        assert!(grad_cross_entropy(&params, &spec, &empty, &[]).is_err());
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            grad_cross_entropy(&params, &spec, &x, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ModelSpec::new(vec![3, 4, 2], 11).with_activation(Activation::Tanh);
        let params = build_model(&spec).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.5, -1.0, 2.0],
            vec![-0.3, 0.8, 0.1],
            vec![1.5, 0.2, -0.7],
        ])
        .unwrap();
        let labels = [0, 1, 1];
        let (_, grad) = grad_cross_entropy(&params, &spec, &x, &labels).unwrap();
        let numeric = central_difference(&params, &spec, &x, &labels, 1e-5);
        for (a, n) in grad.values().iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel <= 1e-4, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn evaluate_counts_matches() {
        let spec = ModelSpec::new(vec![1, 2], 0);
        // logit_1 - logit_0 = x, so argmax is 1 for positive x.
        let params = ParamVector::from_values(&spec, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 4.5]).collect();
        let x = Matrix::from_rows(&xs).unwrap();
        let labels = [0, 0, 1, 0, 0, 1, 1, 0, 1, 1];
        // predictions: 0,0,0,0,0,1,1,1,1,1 -> matches at 0,1,3,4,5,6,8,9
        let (acc, _) = evaluate(&params, &spec, &x, &labels).unwrap();
        assert_eq!(acc, 0.8);

        let single = Matrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(evaluate(&params, &spec, &single, &[0]).unwrap().0, 0.0);
        assert_eq!(evaluate(&params, &spec, &single, &[1]).unwrap().0, 1.0);
        assert!(evaluate(&params, &spec, &Matrix::zeros(0, 1), &[]).is_err());
    }
}
