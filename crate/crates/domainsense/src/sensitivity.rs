//! Covariance propagation and per-parameter sensitivity analysis.
//!
//! The chain runs from local linear algebra to cross-domain statistics:
//!
//! 1. A first-order perturbation model: small input and parameter noise
//!    maps through the Jacobians to an output covariance
//!    `J_x S_x J_x^T + J_th S_th J_th^T` ([`propagate_covariance`]).
//! 2. For uncorrelated parameters the parameter term splits into rank-one
//!    pieces, one per coordinate ([`param_covariance_decomposition`]),
//!    whose traces define each parameter's share of the output variance
//!    ([`local_contribution`], [`sensitivity_index`]).
//! 3. Averaged within each environment, those shares become per-domain
//!    sensitivities ([`per_domain_sensitivity`]); their spread across
//!    environments yields the variability coefficients
//!    ([`cross_domain_stats`]) that the trainer turns into per-parameter
//!    regularization weights.
//!
//! [`empirical_fisher_diagonal`] provides the information-theoretic
//! counterpart (squared per-sample score means), and
//! [`contamination_bound_check`] quantifies how far the uncorrelated-noise
//! assumption can be off when parameter noise is in fact correlated.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Batch, Head, ModelSpec};
use crate::params::{ParameterVector, Segment};
use crate::tensor::Tensor;

/// Largest parameter count accepted by the quadratic-cost
/// [`contamination_bound_check`]; it materializes a Gram matrix of
/// parameter-Jacobian columns.
pub const MAX_CONTAMINATION_PARAMS: usize = 200;

// ---------------------------------------------------------------------------
// Covariance propagation
// ---------------------------------------------------------------------------

/// A noise covariance, either diagonal (per-coordinate variances) or a full
/// symmetric matrix.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// Per-coordinate variances; off-diagonals are zero.
    Diagonal(Vec<f64>),
    /// Full covariance matrix (must be square and symmetric).
    Full(Tensor),
}

impl Covariance {
    /// The dimension this covariance describes.
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.shape()[0],
        }
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        match self {
            Covariance::Diagonal(v) => {
                if v.len() != dim {
                    return Err(Error::dimension(
                        format!("{what} covariance"),
                        format!("expected {dim} variances, got {}", v.len()),
                    ));
                }
                for (i, &var) in v.iter().enumerate() {
                    if !var.is_finite() || var < 0.0 {
                        return Err(Error::Data(format!(
                            "{what} covariance has invalid variance {var} at coordinate {i}"
                        )));
                    }
                }
            }
            Covariance::Full(m) => {
                if m.shape() != [dim, dim] {
                    return Err(Error::dimension(
                        format!("{what} covariance"),
                        format!("expected a {dim}x{dim} matrix, got shape {:?}", m.shape()),
                    ));
                }
                let scale = m.max_abs().max(1.0);
                for i in 0..dim {
                    let d = m.at(i, i);
                    if !d.is_finite() || d < 0.0 {
                        return Err(Error::Data(format!(
                            "{what} covariance has invalid diagonal entry {d} at coordinate {i}"
                        )));
                    }
                    for j in 0..i {
                        if (m.at(i, j) - m.at(j, i)).abs() > 1e-9 * scale {
                            return Err(Error::Data(format!(
                                "{what} covariance is not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A joint perturbation model: how input and parameter noise are
/// distributed, and how Monte-Carlo estimates of the induced output noise
/// should be drawn.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    /// Input noise covariance (dimension `d_x`).
    pub input_cov: Covariance,
    /// Parameter noise covariance (dimension `d_theta`); diagonal in all
    /// analysis paths, full only for the contamination bound.
    pub param_cov: Covariance,
    /// Sample count for Monte-Carlo estimates of the induced output noise.
    pub mc_samples: usize,
    /// Multiplier applied to perturbation standard deviations when
    /// sampling.
    pub scale: f64,
}

impl PerturbationSpec {
    /// Checks the covariances against the model dimensions and the basic
    /// sanity of the sampling knobs.
    pub fn validate(&self, input_dim: usize, param_dim: usize) -> Result<()> {
        self.input_cov.validate(input_dim, "input")?;
        self.param_cov.validate(param_dim, "parameter")?;
        if self.mc_samples < 2 {
            return Err(Error::Contract(format!(
                "Monte-Carlo estimation needs at least two samples, got {}",
                self.mc_samples
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Contract(format!(
                "perturbation scale must be positive and finite, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// First-order prediction of the output change caused by given input and
/// parameter perturbations: `J_x dx + J_th dth` at the point `x`.
pub fn linearized_delta_output(
    spec: &ModelSpec,
    params: &ParameterVector,
    x: &Tensor,
    dx: &Tensor,
    dtheta: &Tensor,
) -> Result<Tensor> {
    if dx.len() != spec.input_dim() {
        return Err(Error::dimension(
            "linearized output change",
            format!("input perturbation has {} entries, expected {}", dx.len(), spec.input_dim()),
        ));
    }
    if dtheta.len() != params.len() {
        return Err(Error::dimension(
            "linearized output change",
            format!(
                "parameter perturbation has {} entries, expected {}",
                dtheta.len(),
                params.len()
            ),
        ));
    }
    let jx = models::jacobian_input(spec, params, x)?;
    let jt = models::jacobian_params(spec, params, x)?;
    let from_x = jx.matvec(dx)?;
    let from_t = jt.matvec(dtheta)?;
    Ok(Tensor::vector(
        from_x.data().iter().zip(from_t.data()).map(|(a, b)| a + b).collect(),
    ))
}

/// Pushes input and parameter covariances through the Jacobians:
/// `J_x S_x J_x^T + J_th S_th J_th^T`.
///
/// Diagonal covariances are applied by column scaling (never materialized
/// as matrices), so the parameter term stays linear in parameter count.
pub fn propagate_covariance(
    jx: &Tensor,
    jtheta: &Tensor,
    input_cov: &Covariance,
    param_cov: &Covariance,
) -> Result<Tensor> {
    let d_y = jx.shape()[0];
    if jtheta.shape()[0] != d_y {
        return Err(Error::dimension(
            "covariance propagation",
            format!(
                "Jacobians disagree on output dimension: {} vs {}",
                d_y,
                jtheta.shape()[0]
            ),
        ));
    }
    input_cov.validate(jx.shape()[1], "input")?;
    param_cov.validate(jtheta.shape()[1], "parameter")?;

    let mut out = sandwich(jx, input_cov)?;
    let pt = sandwich(jtheta, param_cov)?;
    for (o, p) in out.data_mut().iter_mut().zip(pt.data()) {
        *o += p;
    }
    Ok(out)
}

/// `J S J^T` for one Jacobian and one covariance.
fn sandwich(j: &Tensor, cov: &Covariance) -> Result<Tensor> {
    match cov {
        Covariance::Diagonal(vars) => {
            // (J diag(v)) J^T via column scaling.
            let (rows, cols) = (j.shape()[0], j.shape()[1]);
            let mut scaled = j.clone();
            {
                let data = scaled.data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        data[r * cols + c] *= vars[c];
                    }
                }
            }
            scaled.matmul(&j.transpose()?)
        }
        Covariance::Full(m) => j.matmul(m)?.matmul(&j.transpose()?),
    }
}

/// Splits the diagonal-parameter covariance term into its rank-one pieces
/// and sums them: `sum_k var_k j_k j_k^T` over Jacobian columns `j_k`.
///
/// Algebraically equal to the parameter term of [`propagate_covariance`]
/// with a diagonal covariance; computed by explicit rank-one accumulation
/// so the two routes check each other.
pub fn param_covariance_decomposition(jtheta: &Tensor, variances: &[f64]) -> Result<Tensor> {
    let (d_y, d_t) = (jtheta.shape()[0], jtheta.shape()[1]);
    if variances.len() != d_t {
        return Err(Error::dimension(
            "rank-one decomposition",
            format!("expected {d_t} variances, got {}", variances.len()),
        ));
    }
    let mut out = vec![0.0; d_y * d_y];
    for k in 0..d_t {
        let var = variances[k];
        if var == 0.0 {
            continue;
        }
        for r in 0..d_y {
            let jr = jtheta.at(r, k);
            if jr == 0.0 {
                continue;
            }
            for c in 0..d_y {
                out[r * d_y + c] += var * jr * jtheta.at(c, k);
            }
        }
    }
    Tensor::matrix(d_y, d_y, out)
}

/// Each parameter's share of the first-order output variance at one input:
/// `var_k * |j_k|^2` for every parameter coordinate `k`.
pub fn local_contribution(
    spec: &ModelSpec,
    params: &ParameterVector,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let jt = models::jacobian_params(spec, params, x)?;
    let d_y = jt.shape()[0];
    let mut out = vec![0.0; params.len()];
    for k in 0..params.len() {
        let mut sq = 0.0;
        for r in 0..d_y {
            let v = jt.at(r, k);
            sq += v * v;
        }
        out[k] = params.variances()[k] * sq;
    }
    Ok(out)
}

/// Total first-order output variance induced by parameter noise at one
/// input — the trace of the propagated parameter covariance.
///
/// Computed through the matrix route on purpose: the equality with the sum
/// of [`local_contribution`] is one of the identities the validation suite
/// checks.
pub fn total_output_variance(
    spec: &ModelSpec,
    params: &ParameterVector,
    x: &Tensor,
) -> Result<f64> {
    let jt = models::jacobian_params(spec, params, x)?;
    let cov = sandwich(&jt, &Covariance::Diagonal(params.variances().to_vec()))?;
    let d_y = cov.shape()[0];
    Ok((0..d_y).map(|i| cov.at(i, i)).sum())
}

/// The per-parameter sensitivity index over a set of inputs:
/// `var_k` times the mean squared norm of the parameter-Jacobian column,
/// averaged over the rows of `features`.
pub fn sensitivity_index(
    spec: &ModelSpec,
    params: &ParameterVector,
    features: &Tensor,
) -> Result<Vec<f64>> {
    let rows = features.shape()[0];
    if rows == 0 {
        return Err(Error::Data("sensitivity index needs at least one input row".into()));
    }
    let d_y = spec.output_dim();
    let mut acc = vec![0.0; params.len()];
    for i in 0..rows {
        let x = Tensor::vector(features.row(i).to_vec());
        let jt = models::jacobian_params(spec, params, &x)?;
        for k in 0..params.len() {
            let mut sq = 0.0;
            for r in 0..d_y {
                let v = jt.at(r, k);
                sq += v * v;
            }
            acc[k] += sq;
        }
    }
    let n = rows as f64;
    for (k, a) in acc.iter_mut().enumerate() {
        *a = params.variances()[k] * (*a / n);
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Empirical Fisher information
// ---------------------------------------------------------------------------

/// Observation likelihood used to form per-sample scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodModel {
    /// Softmax-categorical observations; pairs with the cross-entropy head.
    Categorical,
    /// Independent Gaussian observations around the network output; pairs
    /// with the squared-error head.
    Gaussian {
        /// Observation noise standard deviation.
        noise_std: f64,
    },
}

/// Diagonal of the empirical Fisher information: the mean squared
/// per-sample score, one entry per parameter.
///
/// For the categorical likelihood the per-sample cross-entropy gradient is
/// the score itself.  For the Gaussian likelihood the squared-error-head
/// gradient is rescaled by `d_y / (2 sigma^2)` to become the score.
pub fn empirical_fisher_diagonal(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
    likelihood: LikelihoodModel,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Data("Fisher information needs at least one sample".into()));
    }
    let scale = match (likelihood, &spec.head) {
        (LikelihoodModel::Categorical, Head::SoftmaxCrossEntropy) => 1.0,
        (LikelihoodModel::Gaussian { noise_std }, Head::MeanSquaredError) => {
            if !(noise_std.is_finite() && noise_std > 0.0) {
                return Err(Error::Contract(format!(
                    "Gaussian likelihood needs a positive noise level, got {noise_std}"
                )));
            }
            spec.output_dim() as f64 / (2.0 * noise_std * noise_std)
        }
        (likelihood, head) => {
            return Err(Error::Capability(format!(
                "likelihood {likelihood:?} does not pair with head {head:?}"
            )));
        }
    };

    let n = batch.len();
    let mut acc = vec![0.0; params.len()];
    for i in 0..n {
        let single = batch.select(&[i])?;
        let mut eval = models::supervised_loss(spec, params, &single)?;
        let grad = models::grad_params(&mut eval, params)?;
        for (a, &g) in acc.iter_mut().zip(grad.data()) {
            let score = scale * g;
            *a += score * score;
        }
    }
    for a in acc.iter_mut() {
        *a /= n as f64;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Per-domain sensitivities and cross-domain statistics
// ---------------------------------------------------------------------------

/// How per-domain sensitivities are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Mean squared parameter-Jacobian column norms (label-free).
    Jacobian,
    /// Mean squared per-sample loss gradients (uses labels; cheaper for
    /// wide outputs, and the quantity the trainer can reuse mid-descent).
    LossGrad,
}

impl EstimatorMode {
    /// Stable lower-case name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::Jacobian => "jacobian",
            EstimatorMode::LossGrad => "loss-grad",
        }
    }
}

/// One environment's labelled data.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    /// Stable identifier, used in reports and CSV headers.
    pub id: String,
    /// The environment's samples.
    pub batch: Batch,
}

/// Per-parameter sensitivities, one column per domain, plus the parameter
/// registry they refer to.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    values: Tensor,
    domain_ids: Vec<String>,
    mode: EstimatorMode,
    registry: Vec<Segment>,
}

impl SensitivityMatrix {
    /// Sensitivity of parameter `k` in domain `d`.
    pub fn value(&self, k: usize, d: usize) -> f64 {
        self.values.at(k, d)
    }

    /// Number of parameters (rows).
    pub fn num_params(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of domains (columns).
    pub fn num_domains(&self) -> usize {
        self.values.shape()[1]
    }

    /// Domain identifiers, in column order.
    pub fn domain_ids(&self) -> &[String] {
        &self.domain_ids
    }

    /// Estimator that produced the matrix.
    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    /// Parameter registry snapshot, for attributing rows to named
    /// segments.
    pub fn registry(&self) -> &[Segment] {
        &self.registry
    }

    fn locate(&self, flat: usize) -> (&Segment, usize) {
        let seg = self
            .registry
            .iter()
            .find(|s| flat >= s.offset && flat < s.offset + s.len)
            .expect("matrix rows always lie inside the registry");
        (seg, flat - seg.offset)
    }
}

/// Estimates each parameter's sensitivity separately per domain.
///
/// Needs at least two domains — one column says nothing about cross-domain
/// stability — and distinct, non-empty batches per domain.
pub fn per_domain_sensitivity(
    spec: &ModelSpec,
    params: &ParameterVector,
    domains: &[DomainBatch],
    mode: EstimatorMode,
) -> Result<SensitivityMatrix> {
    if domains.len() < 2 {
        return Err(Error::Protocol(format!(
            "cross-domain analysis needs at least two domains, got {}",
            domains.len()
        )));
    }
    let mut seen = HashSet::new();
    for d in domains {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Data(format!("duplicate domain id {:?}", d.id)));
        }
        if d.batch.is_empty() {
            return Err(Error::Data(format!("domain {:?} has no samples", d.id)));
        }
    }

    let d_t = params.len();
    let mut values = vec![0.0; d_t * domains.len()];
    for (col, domain) in domains.iter().enumerate() {
        let s = match mode {
            EstimatorMode::Jacobian => sensitivity_index(spec, params, &domain.batch.features)?,
            EstimatorMode::LossGrad => loss_grad_index(spec, params, &domain.batch)?,
        };
        for (k, v) in s.into_iter().enumerate() {
            values[k * domains.len() + col] = v;
        }
    }
    Ok(SensitivityMatrix {
        values: Tensor::matrix(d_t, domains.len(), values)?,
        domain_ids: domains.iter().map(|d| d.id.clone()).collect(),
        mode,
        registry: params.registry().to_vec(),
    })
}

/// Loss-gradient sensitivity estimate: `var_k` times the mean squared
/// per-sample supervised-loss gradient.
fn loss_grad_index(spec: &ModelSpec, params: &ParameterVector, batch: &Batch) -> Result<Vec<f64>> {
    let n = batch.len();
    let mut acc = vec![0.0; params.len()];
    for i in 0..n {
        let single = batch.select(&[i])?;
        let mut eval = models::supervised_loss(spec, params, &single)?;
        let grad = models::grad_params(&mut eval, params)?;
        for (a, &g) in acc.iter_mut().zip(grad.data()) {
            *a += g * g;
        }
    }
    for (k, a) in acc.iter_mut().enumerate() {
        *a = params.variances()[k] * (*a / n as f64);
    }
    Ok(acc)
}

/// Cross-domain summary: the per-domain sensitivities plus their
/// per-parameter mean, spread, and variability coefficient.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    /// The per-domain sensitivities (with mode and registry) this summary
    /// was computed from.
    pub matrix: SensitivityMatrix,
    /// Per-parameter mean sensitivity across domains.
    pub mean: Vec<f64>,
    /// Per-parameter population variance across domains (divisor `D`).
    pub variance: Vec<f64>,
    /// Variability coefficients `sqrt(variance) / (mean + epsilon)`.
    pub coefficients: Vec<f64>,
    /// Stabilizer used in the coefficient denominator.
    pub epsilon: f64,
}

/// Reduces a sensitivity matrix to per-parameter mean, population variance,
/// and variability coefficient.
///
/// A parameter the output never depends on has zero sensitivity in every
/// domain, hence zero variance, and its coefficient is reported as exactly
/// zero — dead directions are never penalized, whatever `epsilon` is.
pub fn cross_domain_stats(matrix: &SensitivityMatrix, epsilon: f64) -> SensitivityReport {
    let (d_t, d) = (matrix.num_params(), matrix.num_domains());
    let dn = d as f64;
    let mut mean = vec![0.0; d_t];
    let mut variance = vec![0.0; d_t];
    let mut coefficients = vec![0.0; d_t];
    for k in 0..d_t {
        let mut m = 0.0;
        for c in 0..d {
            m += matrix.value(k, c);
        }
        m /= dn;
        let mut v = 0.0;
        for c in 0..d {
            let dev = matrix.value(k, c) - m;
            v += dev * dev;
        }
        v /= dn;
        mean[k] = m;
        variance[k] = v;
        coefficients[k] = if v == 0.0 { 0.0 } else { v.sqrt() / (m + epsilon) };
    }
    SensitivityReport { matrix: matrix.clone(), mean, variance, coefficients, epsilon }
}

/// Writes a sensitivity report as CSV: one row per parameter with its
/// registry location, one sensitivity column per domain, then the
/// cross-domain mean, variance, and variability coefficient.  Rows are
/// ordered by flat parameter index; floats use a round-trip-exact format.
pub fn write_sensitivity_csv(report: &SensitivityReport, out: &mut impl Write) -> Result<()> {
    let matrix = &report.matrix;
    write!(out, "param_index,segment,local_index")?;
    for id in matrix.domain_ids() {
        write!(out, ",s_{id}")?;
    }
    writeln!(out, ",mean,var,cv")?;
    for k in 0..matrix.num_params() {
        let (segment, local) = matrix.locate(k);
        write!(out, "{k},{},{local}", segment.name)?;
        for d in 0..matrix.num_domains() {
            write!(out, ",{:.16e}", matrix.value(k, d))?;
        }
        writeln!(
            out,
            ",{:.16e},{:.16e},{:.16e}",
            report.mean[k], report.variance[k], report.coefficients[k]
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Contamination bound for correlated parameter noise
// ---------------------------------------------------------------------------

/// For each parameter `k`, bounds the cross-term contamination the
/// diagonal approximation ignores under a full parameter covariance:
/// returns `(lhs_k, rhs_k)` with
/// `lhs_k = |sum_{l != k} cov_kl <j_k, j_l>|` and
/// `rhs_k = sum_{l != k} |cov_kl| |<j_k, j_l>|`,
/// where `j_k` are parameter-Jacobian columns at `x`.  The triangle
/// inequality guarantees `lhs_k <= rhs_k`; callers compare the bound
/// against the diagonal terms to judge how trustworthy the per-parameter
/// split is.
pub fn contamination_bound_check(
    spec: &ModelSpec,
    params: &ParameterVector,
    x: &Tensor,
    cov: &Tensor,
) -> Result<Vec<(f64, f64)>> {
    let d_t = params.len();
    if d_t > MAX_CONTAMINATION_PARAMS {
        return Err(Error::Capability(format!(
            "contamination check is quadratic in parameter count; {d_t} exceeds the limit of {MAX_CONTAMINATION_PARAMS}"
        )));
    }
    Covariance::Full(cov.clone()).validate(d_t, "parameter")?;
    let jt = models::jacobian_params(spec, params, x)?;
    let gram = jt.transpose()?.matmul(&jt)?;
    let mut out = Vec::with_capacity(d_t);
    for k in 0..d_t {
        let mut signed = 0.0;
        let mut bound = 0.0;
        for l in 0..d_t {
            if l == k {
                continue;
            }
            let term = cov.at(k, l) * gram.at(k, l);
            signed += term;
            bound += cov.at(k, l).abs() * gram.at(k, l).abs();
        }
        let lhs = signed.abs();
        if lhs > bound + 1e-10 {
            return Err(Error::Protocol(format!(
                "triangle bound violated for parameter {k}: {lhs} > {bound}"
            )));
        }
        out.push((lhs, bound));
    }
    Ok(out)
}
