//! Small multi-layer perceptrons built on the differentiation tape.
//!
//! A [`ModelSpec`] fixes layer widths, the hidden activation, the loss head,
//! and the initialization seed.  Parameters live in a flat
//! [`ParameterVector`] whose registry names follow the layer layout
//! (`layer0.weight`, `layer0.bias`, ...), weights stored row-major as
//! `fan_in x fan_out` so a batch flows as `X W + b`.
//!
//! Everything downstream — gradients, Jacobians, Hessian-vector products —
//! is a backward sweep over the tape recorded by [`forward`] or
//! [`supervised_loss`].  Model sizes are deliberately desk-scale: Jacobians
//! are materialized densely, which is exact and fast up to roughly 10^5
//! parameters and refused beyond that.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Largest parameter count for which dense Jacobians are materialized.
pub const MAX_DENSE_JACOBIAN_PARAMS: usize = 100_000;

/// Hidden-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// Loss head applied to the final layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Fused softmax cross-entropy over integer class labels.
    SoftmaxCrossEntropy,
    /// Mean squared error against real-valued targets.
    MeanSquaredError,
}

/// Architecture description: widths, activation, head, and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths from input to output, e.g. `[4, 8, 3]`.
    pub layers: Vec<usize>,
    /// Activation applied between layers (never after the last).
    pub activation: Activation,
    /// Loss head.
    pub head: Head,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelSpec {
    /// Checks the architecture is well-formed: at least an input and an
    /// output layer, and no zero widths.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Contract(format!(
                "a model needs at least input and output widths, got {:?}",
                self.layers
            )));
        }
        if self.layers.iter().any(|&w| w == 0) {
            return Err(Error::Contract(format!("zero-width layer in {:?}", self.layers)));
        }
        Ok(())
    }

    /// Input dimension.
    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    /// Output dimension.
    pub fn output_dim(&self) -> usize {
        *self.layers.last().unwrap()
    }

    /// Number of affine layers.
    pub fn layer_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Registry layout: `layerN.weight` as `fan_in x fan_out`, then
    /// `layerN.bias`, in layer order.
    pub fn segments(&self) -> Vec<(String, Vec<usize>)> {
        let mut segments = Vec::new();
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
            segments.push((format!("layer{}.weight", l), vec![fan_in, fan_out]));
            segments.push((format!("layer{}.bias", l), vec![fan_out]));
        }
        segments
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|l| self.layers[l] * self.layers[l + 1] + self.layers[l + 1])
            .sum()
    }
}

/// Draws initial parameters: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero, variances 1.0.
///
/// The draw order is fixed (weights row-major, layer by layer), so equal
/// seeds give bit-identical parameters.
pub fn init_params(spec: &ModelSpec) -> Result<ParameterVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for l in 0..spec.layer_count() {
        let (fan_in, fan_out) = (spec.layers[l], spec.layers[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for _ in 0..fan_in * fan_out {
            values.push(dist.sample(&mut rng));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParameterVector::from_segments(&spec.segments(), values)
}

/// Labels of a batch: integer classes for classification heads, real
/// targets (one row per sample) for regression heads.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Tensor),
}

impl Labels {
    /// Number of labeled samples.
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    /// True when no samples are labeled.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A feature matrix (one sample per row) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Labels,
}

impl Batch {
    /// Number of samples.
    pub fn len(&self) -> usize {
        self.features.shape().first().copied().unwrap_or(0)
    }

    /// True when the batch holds no samples.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new batch containing the selected rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let (_, d) = match self.features.shape() {
            [n, d] => (*n, *d),
            other => {
                return Err(Error::dimension(
                    "Batch::select",
                    format!("features must be a matrix, got {:?}", other),
                ))
            }
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        let features = Tensor::matrix(rows.len(), d, data)?;
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(rows.iter().map(|&r| c[r]).collect()),
            Labels::Targets(t) => {
                let dt = t.shape()[1];
                let mut ld = Vec::with_capacity(rows.len() * dt);
                for &r in rows {
                    ld.extend_from_slice(t.row(r));
                }
                Labels::Targets(Tensor::matrix(rows.len(), dt, ld)?)
            }
        };
        Ok(Batch { features, labels })
    }
}

/// A recorded forward pass: the tape plus the ids needed to sweep it.
#[derive(Debug)]
pub struct Evaluation {
    pub tape: Tape,
    /// Leaf holding the input batch.
    pub input_node: NodeId,
    /// Final-layer output (`n x d_y`).
    pub output_node: NodeId,
}

impl Evaluation {
    /// The forward output values.
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output_node)
    }
}

/// A recorded loss computation.
#[derive(Debug)]
pub struct LossEval {
    pub tape: Tape,
    pub input_node: NodeId,
    pub output_node: NodeId,
    /// Per-sample losses (`n` values).
    pub per_sample_node: NodeId,
    /// Scalar mean loss over the batch.
    pub loss_node: NodeId,
}

impl LossEval {
    /// The scalar batch loss.
    pub fn loss(&self) -> f64 {
        self.tape
            .value(self.loss_node)
            .scalar_value()
            .expect("loss node is scalar by construction")
    }

    /// Per-sample losses.
    pub fn per_sample(&self) -> &[f64] {
        self.tape.value(self.per_sample_node).data()
    }
}

fn features_as_matrix(spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    let d = spec.input_dim();
    match x.shape() {
        [n, c] if *c == d => Tensor::matrix(*n, *c, x.data().to_vec()),
        [c] if *c == d => Tensor::matrix(1, d, x.data().to_vec()),
        other => Err(Error::dimension(
            "forward",
            format!("input shape {:?} does not match input width {}", other, d),
        )),
    }
}

fn record_forward(spec: &ModelSpec, params: &ParameterVector, x: Tensor, tape: &mut Tape) -> Result<(NodeId, NodeId)> {
    let input = tape.leaf(x);
    let mut h = input;
    for l in 0..spec.layer_count() {
        let w = tape.param(2 * l, params.segment_tensor(2 * l)?);
        let b = tape.param(2 * l + 1, params.segment_tensor(2 * l + 1)?);
        let prod = tape.matmul(h, w)?;
        let z = tape.add_row_broadcast(prod, b)?;
        h = if l + 1 == spec.layer_count() {
            z
        } else {
            match spec.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
                Activation::Identity => z,
            }
        };
    }
    Ok((input, h))
}

/// Runs the model on a single sample (rank-1 input) or a batch (rank-2),
/// recording the computation on a fresh tape.
pub fn forward(spec: &ModelSpec, params: &ParameterVector, x: &Tensor) -> Result<Evaluation> {
    spec.validate()?;
    check_param_layout(spec, params)?;
    let x = features_as_matrix(spec, x)?;
    let mut tape = Tape::new();
    let (input_node, output_node) = record_forward(spec, params, x, &mut tape)?;
    Ok(Evaluation { tape, input_node, output_node })
}

fn check_param_layout(spec: &ModelSpec, params: &ParameterVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::dimension(
            "model parameters",
            format!(
                "spec {:?} wants {} parameters, vector holds {}",
                spec.layers,
                spec.param_count(),
                params.len()
            ),
        ));
    }
    Ok(())
}

/// Records the mean supervised loss of a batch, with per-sample losses as an
/// intermediate node.
///
/// Cross-entropy is computed in its fused log-sum-exp form, so extreme
/// logits do not overflow.  Labels must match the head: integer classes for
/// [`Head::SoftmaxCrossEntropy`], a target row per sample for
/// [`Head::MeanSquaredError`].
pub fn supervised_loss(spec: &ModelSpec, params: &ParameterVector, batch: &Batch) -> Result<LossEval> {
    spec.validate()?;
    check_param_layout(spec, params)?;
    if batch.is_empty() {
        return Err(Error::Data("cannot compute a loss over an empty batch".to_string()));
    }
    if batch.labels.len() != batch.len() {
        return Err(Error::dimension(
            "supervised_loss",
            format!("{} samples but {} labels", batch.len(), batch.labels.len()),
        ));
    }
    let x = features_as_matrix(spec, &batch.features)?;
    let n = batch.len();
    let mut tape = Tape::new();
    let (input_node, output_node) = record_forward(spec, params, x, &mut tape)?;

    let per_sample_node = match (&spec.head, &batch.labels) {
        (Head::SoftmaxCrossEntropy, Labels::Classes(labels)) => {
            let lse = tape.log_sum_exp_rows(output_node)?;
            let picked = tape.select_labels(output_node, labels.clone())?;
            tape.sub(lse, picked)?
        }
        (Head::MeanSquaredError, Labels::Targets(targets)) => {
            let d_y = spec.output_dim();
            if targets.shape() != [n, d_y] {
                return Err(Error::dimension(
                    "supervised_loss",
                    format!("targets shaped {:?}, expected [{}, {}]", targets.shape(), n, d_y),
                ));
            }
            let t = tape.leaf(targets.clone());
            let diff = tape.sub(output_node, t)?;
            let sq = tape.mul(diff, diff)?;
            let sums = tape.row_sums(sq)?;
            tape.scale(sums, 1.0 / d_y as f64)
        }
        (Head::SoftmaxCrossEntropy, Labels::Targets(_)) => {
            return Err(Error::Contract(
                "softmax cross-entropy needs integer class labels, got real targets".to_string(),
            ))
        }
        (Head::MeanSquaredError, Labels::Classes(_)) => {
            return Err(Error::Contract(
                "mean squared error needs real targets, got class labels".to_string(),
            ))
        }
    };
    let total = tape.sum_all(per_sample_node);
    let loss_node = tape.scale(total, 1.0 / n as f64);
    Ok(LossEval {
        tape,
        input_node,
        output_node,
        per_sample_node,
        loss_node,
    })
}

/// Flat gradient of the recorded batch loss with respect to the parameters.
///
/// Parameters the loss does not reach get exact zeros.  The sweep's scratch
/// nodes are reclaimed before returning.
pub fn grad_params(eval: &mut LossEval, params: &ParameterVector) -> Result<Tensor> {
    let before = eval.tape.len();
    let adjoints = eval.tape.backward(eval.loss_node, None, false)?;
    let grad = eval.tape.param_gradient(&adjoints, params);
    eval.tape.truncate(before);
    grad
}

fn check_dense_jacobian(params: &ParameterVector) -> Result<()> {
    if params.len() > MAX_DENSE_JACOBIAN_PARAMS {
        return Err(Error::Capability(format!(
            "dense Jacobians are materialized only up to {} parameters (got {}); \
             use the squared-gradient estimators instead",
            MAX_DENSE_JACOBIAN_PARAMS,
            params.len()
        )));
    }
    Ok(())
}

/// Dense Jacobian of the model output with respect to the parameters, for a
/// single input: shape `d_y x d_theta`, one backward sweep per output row.
pub fn jacobian_params(spec: &ModelSpec, params: &ParameterVector, x: &Tensor) -> Result<Tensor> {
    check_dense_jacobian(params)?;
    let mut eval = forward(spec, params, x)?;
    let n = eval.output().shape()[0];
    if n != 1 {
        return Err(Error::Contract(format!(
            "jacobian_params takes a single input sample, got a batch of {}",
            n
        )));
    }
    let d_y = spec.output_dim();
    let d_theta = params.len();
    let mut rows = Vec::with_capacity(d_y * d_theta);
    for r in 0..d_y {
        let mut seed = Tensor::zeros(&[1, d_y]);
        seed.set(0, r, 1.0);
        let before = eval.tape.len();
        let adjoints = eval.tape.backward(eval.output_node, Some(seed), false)?;
        let grad = eval.tape.param_gradient(&adjoints, params)?;
        eval.tape.truncate(before);
        rows.extend_from_slice(grad.data());
    }
    Tensor::matrix(d_y, d_theta, rows)
}

/// Dense Jacobian of the model output with respect to the input, for a
/// single input: shape `d_y x d_x`.
pub fn jacobian_input(spec: &ModelSpec, params: &ParameterVector, x: &Tensor) -> Result<Tensor> {
    let mut eval = forward(spec, params, x)?;
    let n = eval.output().shape()[0];
    if n != 1 {
        return Err(Error::Contract(format!(
            "jacobian_input takes a single input sample, got a batch of {}",
            n
        )));
    }
    let d_y = spec.output_dim();
    let d_x = spec.input_dim();
    let mut rows = Vec::with_capacity(d_y * d_x);
    for r in 0..d_y {
        let mut seed = Tensor::zeros(&[1, d_y]);
        seed.set(0, r, 1.0);
        let before = eval.tape.len();
        let adjoints = eval.tape.backward(eval.output_node, Some(seed), false)?;
        match adjoints.of(eval.input_node) {
            Some(id) => rows.extend_from_slice(eval.tape.value(id).data()),
            None => rows.extend(std::iter::repeat(0.0).take(d_x)),
        }
        eval.tape.truncate(before);
    }
    Tensor::matrix(d_y, d_x, rows)
}

/// How Hessian-vector products are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpMode {
    /// Double backward on the tape; exact, but refuses models that are not
    /// twice differentiable at the evaluation point.
    Exact,
    /// Central finite difference of gradients with step
    /// `1e-4 * (1 + max|theta|)`.
    FiniteDifference,
}

/// Hessian-vector product `H v` of the batch loss at `params`.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
    v: &[f64],
    mode: HvpMode,
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::dimension(
            "hvp",
            format!("direction holds {} values for {} parameters", v.len(), params.len()),
        ));
    }
    match mode {
        HvpMode::Exact => {
            let mut eval = supervised_loss(spec, params, batch)?;
            eval.tape.hessian_vector_product(eval.loss_node, params, v)
        }
        HvpMode::FiniteDifference => {
            let max_abs = params.values().iter().fold(0.0f64, |m, &t| m.max(t.abs()));
            let eps = 1e-4 * (1.0 + max_abs);
            let shift = |sign: f64| -> Result<Vec<f64>> {
                let values: Vec<f64> = params
                    .values()
                    .iter()
                    .zip(v)
                    .map(|(&t, &d)| t + sign * eps * d)
                    .collect();
                let shifted = params.with_values(values)?;
                let mut eval = supervised_loss(spec, &shifted, batch)?;
                Ok(grad_params(&mut eval, &shifted)?.data().to_vec())
            };
            let plus = shift(1.0)?;
            let minus = shift(-1.0)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect())
        }
    }
}

/// Fraction of batch samples whose argmax logit equals the class label.
///
/// Only defined for classification heads.
pub fn accuracy(spec: &ModelSpec, params: &ParameterVector, batch: &Batch) -> Result<f64> {
    let labels = match (&spec.head, &batch.labels) {
        (Head::SoftmaxCrossEntropy, Labels::Classes(labels)) => labels,
        _ => {
            return Err(Error::Contract(
                "accuracy is defined only for classification heads with class labels".to_string(),
            ))
        }
    };
    if batch.is_empty() {
        return Err(Error::Data("cannot compute accuracy over an empty batch".to_string()));
    }
    let eval = forward(spec, params, &batch.features)?;
    let logits = eval.output();
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
