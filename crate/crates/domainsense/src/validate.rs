//! Independent oracles and the pass/fail validation suite.
//!
//! Everything in this module exists to check the main code paths *by other
//! means*: a straight-line forward evaluator written without the tape,
//! central finite differences, Monte-Carlo perturbation estimates, and rank
//! statistics.  The oracles are deliberately plain — nested loops over
//! `&[f64]` — so that agreement with the tape machinery is evidence, not
//! tautology.
//!
//! [`run_all`] packages the oracles into a named check suite with measured
//! errors, tolerances, and wall-clock times.  The suite backs the
//! `validate` command; nothing in the training path calls into this module.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::models::{Activation, Batch, Head, Labels, ModelSpec};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Reference evaluators (no tape, no Tensor arithmetic)
// ---------------------------------------------------------------------------

/// Straight-line forward pass over flat parameter values.
///
/// Reads weights and biases directly out of the flat vector in registry
/// order (`layerN.weight` row-major `fan_in x fan_out`, then `layerN.bias`)
/// and loops — no tape, no tensor ops.
pub fn reference_forward(spec: &ModelSpec, values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    let last = spec.layers.len() - 2;
    for l in 0..spec.layers.len() - 1 {
        let (fan_in, fan_out) = (spec.layers[l], spec.layers[l + 1]);
        let w = &values[off..off + fan_in * fan_out];
        off += fan_in * fan_out;
        let b = &values[off..off + fan_out];
        off += fan_out;
        let mut z = vec![0.0; fan_out];
        for j in 0..fan_out {
            let mut acc = b[j];
            for i in 0..fan_in {
                acc += h[i] * w[i * fan_out + j];
            }
            z[j] = acc;
        }
        if l != last {
            match spec.activation {
                Activation::Relu => {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for v in z.iter_mut() {
                        *v = v.tanh();
                    }
                }
                Activation::Identity => {}
            }
        }
        h = z;
    }
    h
}

/// Straight-line mean batch loss over flat parameter values.
///
/// Cross-entropy uses the shifted log-sum-exp; mean squared error averages
/// over output coordinates, then over samples — matching the loss head
/// definitions without sharing any code with them.
pub fn reference_loss(spec: &ModelSpec, values: &[f64], batch: &Batch) -> f64 {
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let y = reference_forward(spec, values, batch.features.row(i));
        let per = match (&spec.head, &batch.labels) {
            (Head::SoftmaxCrossEntropy, Labels::Classes(labels)) => {
                let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = y.iter().map(|&v| (v - hi).exp()).sum();
                (hi + z.ln()) - y[labels[i]]
            }
            (Head::MeanSquaredError, Labels::Targets(t)) => {
                let row = t.row(i);
                let sq: f64 = y.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                sq / y.len() as f64
            }
            _ => panic!("reference_loss: labels do not match the head"),
        };
        total += per;
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest relative disagreement between two vectors, with denominators
/// clamped from below.
pub fn max_relative_error(candidate: &[f64], reference: &[f64], clamp: f64) -> f64 {
    candidate
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(clamp))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Monte-Carlo perturbation estimators
// ---------------------------------------------------------------------------

/// Sample covariance of the model output under jointly drawn input and
/// parameter perturbations.
///
/// Draws `dx ~ N(0, diag(input_var))` and `dtheta ~ N(0, diag(param_var))`
/// (the caller folds any perturbation scale into the variances), evaluates
/// the *nonlinear* model via [`reference_forward`], and returns the
/// `d_y x d_y` sample covariance with the `n - 1` divisor.
pub fn mc_output_covariance(
    spec: &ModelSpec,
    values: &[f64],
    x: &[f64],
    input_var: &[f64],
    param_var: &[f64],
    samples: usize,
    seed: u64,
) -> Tensor {
    let d_y = spec.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    // Accumulating deviations from the unperturbed output keeps the
    // running sums near zero, so the mean subtraction below does not
    // cancel away the (tiny) covariance signal.
    let base = reference_forward(spec, values, x);
    let mut mean = vec![0.0; d_y];
    let mut cross = vec![0.0; d_y * d_y];
    let mut xp = x.to_vec();
    let mut vp = values.to_vec();
    for _ in 0..samples {
        for (i, &var) in input_var.iter().enumerate() {
            xp[i] = x[i] + unit.sample(&mut rng) * var.sqrt();
        }
        for (k, &var) in param_var.iter().enumerate() {
            vp[k] = values[k] + unit.sample(&mut rng) * var.sqrt();
        }
        let y = reference_forward(spec, &vp, &xp);
        for r in 0..d_y {
            let dev_r = y[r] - base[r];
            mean[r] += dev_r;
            for c in 0..d_y {
                cross[r * d_y + c] += dev_r * (y[c] - base[c]);
            }
        }
    }
    let n = samples as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    let mut cov = vec![0.0; d_y * d_y];
    for r in 0..d_y {
        for c in 0..d_y {
            cov[r * d_y + c] = (cross[r * d_y + c] - n * mean[r] * mean[c]) / (n - 1.0);
        }
    }
    Tensor::matrix(d_y, d_y, cov).unwrap()
}

/// Monte-Carlo estimate of the output variance induced by perturbing a
/// single parameter coordinate.
///
/// For each feature row, draws `delta ~ N(0, sigma2)` added to parameter
/// `k` alone, evaluates the full model, and measures the variance of each
/// output coordinate over the draws (summed over coordinates).  Returns the
/// per-row variances averaged over rows; dividing by `sigma2` estimates the
/// squared column norm of the parameter Jacobian, averaged over the data.
pub fn mc_coordinate_output_variance(
    spec: &ModelSpec,
    values: &[f64],
    features: &Tensor,
    k: usize,
    sigma2: f64,
    draws: usize,
    seed: u64,
) -> f64 {
    let rows = features.shape()[0];
    let d_y = spec.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma2.sqrt()).unwrap();
    let mut vp = values.to_vec();
    let mut acc = 0.0;
    for i in 0..rows {
        let x = features.row(i);
        let mut mean = vec![0.0; d_y];
        let mut sq = vec![0.0; d_y];
        for _ in 0..draws {
            vp[k] = values[k] + noise.sample(&mut rng);
            let y = reference_forward(spec, &vp, x);
            for r in 0..d_y {
                mean[r] += y[r];
                sq[r] += y[r] * y[r];
            }
        }
        vp[k] = values[k];
        let m = draws as f64;
        for r in 0..d_y {
            let mu = mean[r] / m;
            acc += (sq[r] - m * mu * mu) / (m - 1.0);
        }
    }
    acc / rows as f64
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        // Ties share the average of the rank positions they span.
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation of two equal-length samples, with average
/// ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length samples");
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    cov / (va.sqrt() * vb.sqrt())
}

// ---------------------------------------------------------------------------
// Check suite
// ---------------------------------------------------------------------------

/// Tunable knobs of the validation suite.  Defaults match the tolerances
/// the acceptance tests pin down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Monte-Carlo sample count for the covariance check.
    pub mc_samples: usize,
    /// Standard-deviation scale of covariance perturbations, relative to
    /// parameter root-mean-square magnitude.
    pub perturbation_scale: f64,
    /// Seed for every stochastic choice the suite makes.
    pub seed: u64,
    /// Fault-injection hook: corrupt one gradient entry inside the
    /// finite-difference check to prove the harness catches it.
    pub inject_gradient_fault: bool,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            mc_samples: 200_000,
            perturbation_scale: 1e-3,
            seed: 1234,
            inject_gradient_fault: false,
        }
    }
}

impl ValidationConfig {
    /// Rejects settings the estimators cannot run with: the Monte-Carlo
    /// covariance needs at least two samples for its `n - 1` divisor, and
    /// the perturbation scale must be a positive finite number.
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.mc_samples < 2 {
            return Err(crate::error::Error::Contract(format!(
                "validation.mc_samples must be at least 2, got {}",
                self.mc_samples
            )));
        }
        if !(self.perturbation_scale.is_finite() && self.perturbation_scale > 0.0) {
            return Err(crate::error::Error::Contract(format!(
                "validation.perturbation_scale must be positive and finite, got {}",
                self.perturbation_scale
            )));
        }
        Ok(())
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (or other figure of merit, see `detail`).
    pub measured: f64,
    /// Threshold the measurement is compared against.
    pub tolerance: f64,
    pub wall_ms: u128,
    pub detail: String,
}

/// All check outcomes of one validation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    /// True when every check passed.
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<24} measured {:.3e} vs tolerance {:.3e} ({} ms) {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.wall_ms,
                c.detail,
            ));
        }
        out
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> (bool, f64, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, measured, detail) = f();
    CheckResult {
        name: name.to_string(),
        passed,
        measured,
        tolerance,
        wall_ms: start.elapsed().as_millis(),
        detail,
    }
}

/// Runs the full oracle suite and returns the per-check outcomes.
///
/// The checks, in order: finite-difference gradient fidelity, linearized
/// perturbation accuracy, Monte-Carlo covariance propagation, the algebraic
/// decomposition identities, per-coordinate Monte-Carlo sensitivity, the
/// Fisher-information relation, cross-domain separation on the two-branch
/// construction, and the covariance contamination bound.
pub fn run_all(config: &ValidationConfig) -> ValidationReport {
    let checks = vec![
        checks::gradient_fd(config),
        checks::linearization(config),
        checks::covariance_mc(config),
        checks::decomposition_identities(config),
        checks::sensitivity_mc(config),
        checks::fisher_relation(config),
        checks::domain_separation(config),
        checks::contamination_bound(config),
    ];
    ValidationReport { checks }
}

mod checks {
    use super::*;
    use crate::models;
    use crate::params::ParameterVector;
    use crate::sensitivity;
    use rand::Rng;

    fn random_spec(rng: &mut ChaCha8Rng, head: Head) -> ModelSpec {
        let depth = rng.gen_range(1..=3usize);
        let mut layers = vec![rng.gen_range(2..=6usize)];
        for _ in 0..depth - 1 {
            layers.push(rng.gen_range(2..=32usize));
        }
        layers.push(rng.gen_range(2..=4usize));
        let activation = match rng.gen_range(0..3) {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => Activation::Identity,
        };
        ModelSpec { layers, activation, head, init_seed: rng.gen() }
    }

    fn random_input(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, n: usize) -> Batch {
        let d = spec.input_dim();
        let features =
            Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = match spec.head {
            Head::SoftmaxCrossEntropy => {
                Labels::Classes((0..n).map(|_| rng.gen_range(0..spec.output_dim())).collect())
            }
            Head::MeanSquaredError => {
                let d_y = spec.output_dim();
                Labels::Targets(
                    Tensor::matrix(n, d_y, (0..n * d_y).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap(),
                )
            }
        };
        Batch { features, labels }
    }

    /// Smallest |pre-activation| anywhere in the network, used to keep
    /// finite differences away from relu kinks.
    fn min_preactivation_margin(spec: &ModelSpec, values: &[f64], x: &[f64]) -> f64 {
        let mut margin = f64::INFINITY;
        let mut h = x.to_vec();
        let mut off = 0;
        let last = spec.layers.len() - 2;
        for l in 0..spec.layers.len() - 1 {
            let (fan_in, fan_out) = (spec.layers[l], spec.layers[l + 1]);
            let w = &values[off..off + fan_in * fan_out];
            off += fan_in * fan_out;
            let b = &values[off..off + fan_out];
            off += fan_out;
            let mut z = vec![0.0; fan_out];
            for j in 0..fan_out {
                let mut acc = b[j];
                for i in 0..fan_in {
                    acc += h[i] * w[i * fan_out + j];
                }
                z[j] = acc;
                if l != last {
                    margin = margin.min(acc.abs());
                }
            }
            if l != last {
                match spec.activation {
                    Activation::Relu => z.iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v = 0.0
                        }
                    }),
                    Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Identity => {}
                }
            }
            h = z;
        }
        margin
    }

    /// Check 1: tape gradients and Jacobians against central finite
    /// differences of the straight-line reference, over 20 random models.
    pub fn gradient_fd(config: &ValidationConfig) -> CheckResult {
        timed("gradient_fd", 1e-5, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x67_72_61_64);
            let h = 1e-5;
            let mut worst = 0.0f64;
            let mut cases = 0;
            while cases < 20 {
                let head = if cases % 2 == 0 { Head::SoftmaxCrossEntropy } else { Head::MeanSquaredError };
                let spec = random_spec(&mut rng, head);
                let params = match models::init_params(&spec) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let batch = random_batch(&mut rng, &spec, 4);
                // Relu kinks make finite differences one-sided; keep a
                // safety margin between every pre-activation and zero.
                if spec.activation == Activation::Relu {
                    let margin = (0..batch.len())
                        .map(|i| min_preactivation_margin(&spec, params.values(), batch.features.row(i)))
                        .fold(f64::INFINITY, f64::min);
                    if margin < 1e-3 {
                        continue;
                    }
                }
                cases += 1;

                let mut eval = models::supervised_loss(&spec, &params, &batch).unwrap();
                let mut grad = models::grad_params(&mut eval, &params).unwrap().data().to_vec();
                if config.inject_gradient_fault && cases == 1 && !grad.is_empty() {
                    grad[0] += 1e-3;
                }
                // The clamp sits well above finite-difference roundoff
                // (~1e-11 here) so exactly-zero gradients of dead relu
                // units do not register as disagreement.
                let fd = finite_diff_gradient(|v| reference_loss(&spec, v, &batch), params.values(), h);
                worst = worst.max(max_relative_error(&grad, &fd, 1e-5));

                // Jacobians on the first batch row.
                let x = batch.features.row(0).to_vec();
                let jac_p = models::jacobian_params(&spec, &params, &Tensor::vector(x.clone())).unwrap();
                let jac_x = models::jacobian_input(&spec, &params, &Tensor::vector(x.clone())).unwrap();
                let d_y = spec.output_dim();
                for k in 0..params.len() {
                    let mut plus = params.values().to_vec();
                    let mut minus = params.values().to_vec();
                    plus[k] += h;
                    minus[k] -= h;
                    let yp = reference_forward(&spec, &plus, &x);
                    let ym = reference_forward(&spec, &minus, &x);
                    for r in 0..d_y {
                        let fd = (yp[r] - ym[r]) / (2.0 * h);
                        worst = worst.max((jac_p.at(r, k) - fd).abs() / fd.abs().max(1e-5));
                    }
                }
                for i in 0..spec.input_dim() {
                    let mut plus = x.clone();
                    let mut minus = x.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    let yp = reference_forward(&spec, params.values(), &plus);
                    let ym = reference_forward(&spec, params.values(), &minus);
                    for r in 0..d_y {
                        let fd = (yp[r] - ym[r]) / (2.0 * h);
                        worst = worst.max((jac_x.at(r, i) - fd).abs() / fd.abs().max(1e-5));
                    }
                }
            }
            (worst < 1e-5, worst, "20 random models, grads + both Jacobians".to_string())
        })
    }

    /// Check 2: first-order prediction of output changes under small joint
    /// perturbations.
    pub fn linearization(config: &ValidationConfig) -> CheckResult {
        timed("linearization", 1e-3, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c_69_6e);
            let mut worst = 0.0f64;
            for _ in 0..5 {
                let spec = ModelSpec {
                    layers: vec![4, rng.gen_range(4..=10), 3],
                    activation: Activation::Tanh,
                    head: Head::MeanSquaredError,
                    init_seed: rng.gen(),
                };
                let params = models::init_params(&spec).unwrap();
                let x = random_input(&mut rng, 4);
                let scale = 1e-4;
                let dx: Vec<f64> = (0..4).map(|_| rng.gen_range(-scale..scale)).collect();
                let dtheta: Vec<f64> =
                    (0..params.len()).map(|_| rng.gen_range(-scale..scale)).collect();

                let predicted = sensitivity::linearized_delta_output(
                    &spec,
                    &params,
                    &Tensor::vector(x.clone()),
                    &Tensor::vector(dx.clone()),
                    &Tensor::vector(dtheta.clone()),
                )
                .unwrap();

                let base = reference_forward(&spec, params.values(), &x);
                let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                let vp: Vec<f64> = params.values().iter().zip(&dtheta).map(|(a, b)| a + b).collect();
                let moved = reference_forward(&spec, &vp, &xp);
                let actual: Vec<f64> = moved.iter().zip(&base).map(|(a, b)| a - b).collect();

                let err: f64 = predicted
                    .data()
                    .iter()
                    .zip(&actual)
                    .map(|(p, a)| (p - a) * (p - a))
                    .sum::<f64>()
                    .sqrt();
                let norm = actual.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                worst = worst.max(err / norm);
            }
            (worst < 1e-3, worst, "5 tanh models at perturbation scale 1e-4".to_string())
        })
    }

    /// Check 3: analytic covariance propagation against the Monte-Carlo
    /// covariance of the nonlinear model.
    pub fn covariance_mc(config: &ValidationConfig) -> CheckResult {
        timed("covariance_mc", 0.02, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x63_6f_76);
            let mut worst = 0.0f64;
            for case in 0..5 {
                let spec = ModelSpec {
                    layers: vec![4, rng.gen_range(4..=8), 3],
                    activation: Activation::Tanh,
                    head: Head::MeanSquaredError,
                    init_seed: rng.gen(),
                };
                let params = models::init_params(&spec).unwrap();
                let x = random_input(&mut rng, 4);

                // Perturbation standard deviation: scale times parameter RMS
                // (with a floor for the near-zero bias entries).
                // Unit-free covariance profile; the sampling scale enters
                // through the perturbation spec's multiplier, applied to
                // standard deviations (variances scale by its square).
                let rms = (params.values().iter().map(|v| v * v).sum::<f64>()
                    / params.len() as f64)
                    .sqrt()
                    .max(0.1);
                let perturbation = sensitivity::PerturbationSpec {
                    input_cov: sensitivity::Covariance::Diagonal(
                        (0..4).map(|_| rms * rms * rng.gen_range(0.2..1.0)).collect(),
                    ),
                    param_cov: sensitivity::Covariance::Diagonal(
                        (0..params.len()).map(|_| rms * rms * rng.gen_range(0.2..1.0)).collect(),
                    ),
                    mc_samples: config.mc_samples,
                    scale: config.perturbation_scale,
                };
                perturbation.validate(4, params.len()).unwrap();
                let s2 = perturbation.scale * perturbation.scale;
                let (input_var, param_var) = match (&perturbation.input_cov, &perturbation.param_cov)
                {
                    (
                        sensitivity::Covariance::Diagonal(a),
                        sensitivity::Covariance::Diagonal(b),
                    ) => (
                        a.iter().map(|v| s2 * v).collect::<Vec<f64>>(),
                        b.iter().map(|v| s2 * v).collect::<Vec<f64>>(),
                    ),
                    _ => unreachable!(),
                };

                let jx = models::jacobian_input(&spec, &params, &Tensor::vector(x.clone())).unwrap();
                let jt = models::jacobian_params(&spec, &params, &Tensor::vector(x.clone())).unwrap();
                let analytic = sensitivity::propagate_covariance(
                    &jx,
                    &jt,
                    &sensitivity::Covariance::Diagonal(input_var.clone()),
                    &sensitivity::Covariance::Diagonal(param_var.clone()),
                )
                .unwrap();

                let mc = mc_output_covariance(
                    &spec,
                    params.values(),
                    &x,
                    &input_var,
                    &param_var,
                    perturbation.mc_samples,
                    config.seed ^ (case as u64) << 8,
                );
                let trace_a: f64 = (0..3).map(|i| analytic.at(i, i)).sum();
                let trace_m: f64 = (0..3).map(|i| mc.at(i, i)).sum();
                worst = worst.max((trace_a - trace_m).abs() / trace_m.abs());
            }
            (
                worst < 0.02,
                worst,
                format!("5 tanh models, {} samples each", config.mc_samples),
            )
        })
    }

    /// Check 4: rank-one decomposition and trace identities.
    pub fn decomposition_identities(config: &ValidationConfig) -> CheckResult {
        timed("decomposition_identities", 1e-10, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x64_65_63);
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let spec = random_spec(&mut rng, Head::MeanSquaredError);
                let params = models::init_params(&spec).unwrap();
                let x = Tensor::vector(random_input(&mut rng, spec.input_dim()));
                let variances: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(0.0..2.0)).collect();

                let jt = models::jacobian_params(&spec, &params, &x).unwrap();
                let rank_one =
                    sensitivity::param_covariance_decomposition(&jt, &variances).unwrap();
                let dense = sensitivity::propagate_covariance(
                    &Tensor::zeros(&[spec.output_dim(), spec.input_dim()]),
                    &jt,
                    &sensitivity::Covariance::Diagonal(vec![0.0; spec.input_dim()]),
                    &sensitivity::Covariance::Diagonal(variances.clone()),
                )
                .unwrap();
                for i in 0..spec.output_dim() {
                    for j in 0..spec.output_dim() {
                        worst = worst.max((rank_one.at(i, j) - dense.at(i, j)).abs());
                    }
                }

                let mut params_v = params.clone();
                params_v.set_variances(variances.clone()).unwrap();
                let local = sensitivity::local_contribution(&spec, &params_v, &x).unwrap();
                let total = sensitivity::total_output_variance(&spec, &params_v, &x).unwrap();
                let trace: f64 = (0..spec.output_dim()).map(|i| rank_one.at(i, i)).sum();
                worst = worst.max((local.iter().sum::<f64>() - trace).abs());
                worst = worst.max((total - trace).abs());
            }
            (worst < 1e-10, worst, "20 random models".to_string())
        })
    }

    /// Check 5: per-coordinate Monte-Carlo perturbation against the
    /// sensitivity index, on the 10 highest-index parameters of a trained
    /// classifier.
    pub fn sensitivity_mc(config: &ValidationConfig) -> CheckResult {
        timed("sensitivity_mc", 0.05, || {
            let (spec, params, features) = trained_toy_classifier(config.seed ^ 0x73_6b);
            let s = sensitivity::sensitivity_index(&spec, &params, &features).unwrap();
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());

            let sigma2 = 1e-6; // (scale 1e-3)^2, folded with unit variances
            let mut worst = 0.0f64;
            for (i, &k) in order.iter().take(10).enumerate() {
                let measured = mc_coordinate_output_variance(
                    &spec,
                    params.values(),
                    &features,
                    k,
                    sigma2 * params.variances()[k],
                    600,
                    config.seed ^ ((i as u64) << 16),
                ) / sigma2;
                worst = worst.max((measured - s[k]).abs() / s[k]);
            }
            (worst < 0.05, worst, "top-10 indices of a trained classifier".to_string())
        })
    }

    /// Check 6: the sensitivity index against the empirical Fisher diagonal
    /// — exact in the degenerate scalar-output single-sample cases, by rank
    /// correlation on a general random classifier.
    pub fn fisher_relation(config: &ValidationConfig) -> CheckResult {
        timed("fisher_relation", 0.9, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x66_69);

            // Degenerate case A: scalar-logit softmax, one shared sample
            // and class. A single logit makes the softmax constant 1, so
            // the score prefactor T = p - 1 is exactly zero and
            // I_kk = T^2 s_k holds with both sides identically zero.
            let spec = ModelSpec {
                layers: vec![3, 6, 1],
                activation: Activation::Tanh,
                head: Head::SoftmaxCrossEntropy,
                init_seed: rng.gen(),
            };
            let params = models::init_params(&spec).unwrap();
            let x = random_input(&mut rng, 3);
            let batch = Batch {
                features: Tensor::matrix(1, 3, x.clone()).unwrap(),
                labels: Labels::Classes(vec![0]),
            };
            let fisher = sensitivity::empirical_fisher_diagonal(
                &spec,
                &params,
                &batch,
                sensitivity::LikelihoodModel::Categorical,
            )
            .unwrap();
            if fisher.iter().any(|&v| v != 0.0) {
                return (false, 1.0, "scalar-logit softmax score is not zero".to_string());
            }

            // Degenerate case B: scalar output, one sample, Gaussian
            // likelihood. The score factors as T * df/dtheta with
            // T = (y - f)/sigma^2, so I_kk = T^2 s_k holds coordinate-wise
            // with both sides nonzero.
            let spec = ModelSpec { head: Head::MeanSquaredError, ..spec };
            let y_obs = 0.7;
            let sigma = 0.5;
            let batch = Batch {
                features: batch.features,
                labels: Labels::Targets(Tensor::matrix(1, 1, vec![y_obs]).unwrap()),
            };
            let fisher = sensitivity::empirical_fisher_diagonal(
                &spec,
                &params,
                &batch,
                sensitivity::LikelihoodModel::Gaussian { noise_std: sigma },
            )
            .unwrap();
            let s = sensitivity::sensitivity_index(&spec, &params, &batch.features).unwrap();
            let f = reference_forward(&spec, params.values(), &x)[0];
            let t = (y_obs - f) / (sigma * sigma);
            let mut exact_err = 0.0f64;
            for k in 0..params.len() {
                exact_err = exact_err.max((fisher[k] - t * t * s[k]).abs());
            }
            if exact_err >= 1e-10 {
                return (false, exact_err, "degenerate single-sample identity broken".to_string());
            }

            // General case: rank correlation across all parameters of a
            // random classifier.  Class count and width are chosen so the
            // label-averaged score covariance is close to isotropic — the
            // regime the approximate proportionality assumes.
            let (spec, params, features, labels) = random_classifier_data(&mut rng, 3000);
            let batch = Batch { features: features.clone(), labels };
            let fisher = sensitivity::empirical_fisher_diagonal(
                &spec,
                &params,
                &batch,
                sensitivity::LikelihoodModel::Categorical,
            )
            .unwrap();
            let s = sensitivity::sensitivity_index(&spec, &params, &features).unwrap();
            let rho = spearman(&fisher, &s);
            (rho >= 0.9, rho, "two degenerate exact cases + Spearman on a random classifier".to_string())
        })
    }

    /// Check 7: cross-domain coefficient separation on a two-branch linear
    /// construction — stable-feature weights must get near-zero variability
    /// coefficients, scale-shifting-feature weights clearly positive ones.
    pub fn domain_separation(config: &ValidationConfig) -> CheckResult {
        timed("domain_separation", 0.05, || {
            let mut inv_worst = 0.0f64;
            let mut sp_best = f64::INFINITY;
            for trial in 0..5u64 {
                let (inv_median, sp_median) =
                    two_branch_medians(config.seed ^ (trial << 32), 10_000);
                inv_worst = inv_worst.max(inv_median);
                sp_best = sp_best.min(sp_median);
            }
            let passed = inv_worst < 0.05 && sp_best > 0.5;
            (
                passed,
                inv_worst,
                format!(
                    "stable-weight medians < 0.05, shifting-weight medians > 0.5 (min {:.3})",
                    sp_best
                ),
            )
        })
    }

    /// Builds a linear model over four unit-variance features and four
    /// features whose scale multiplies by two per domain, computes the
    /// per-domain sensitivities and variability coefficients, and returns
    /// the median coefficient of each branch's weights.
    fn two_branch_medians(seed: u64, per_domain: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let spec = ModelSpec {
            layers: vec![8, 1],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: rng.gen(),
        };
        let params = models::init_params(&spec).unwrap();
        let scales = [1.0, 2.0, 4.0];
        let mut domains = Vec::new();
        for (d, &scale) in scales.iter().enumerate() {
            let mut data = Vec::with_capacity(per_domain * 8);
            for _ in 0..per_domain {
                for _ in 0..4 {
                    data.push(normal.sample(&mut rng));
                }
                for _ in 0..4 {
                    data.push(scale * normal.sample(&mut rng));
                }
            }
            let features = Tensor::matrix(per_domain, 8, data).unwrap();
            let labels = Labels::Targets(Tensor::zeros(&[per_domain, 1]));
            domains.push(sensitivity::DomainBatch {
                id: format!("d{d}"),
                batch: Batch { features, labels },
            });
        }
        let matrix = sensitivity::per_domain_sensitivity(
            &spec,
            &params,
            &domains,
            sensitivity::EstimatorMode::Jacobian,
        )
        .unwrap();
        let report = sensitivity::cross_domain_stats(&matrix, 1e-8);
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        // Weight layout: the 8x1 weight matrix maps parameter index j to
        // input feature j; the bias sits at index 8.
        let inv = median((0..4).map(|k| report.coefficients[k]).collect());
        let sp = median((4..8).map(|k| report.coefficients[k]).collect());
        (inv, sp)
    }

    /// Check 8: the contamination bound under correlated parameter
    /// covariances, 100 random trials.
    pub fn contamination_bound(config: &ValidationConfig) -> CheckResult {
        timed("contamination_bound", 0.0, || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x62_6e_64);
            let mut violations = 0usize;
            for _ in 0..100 {
                let spec = ModelSpec {
                    layers: vec![3, 4, 2],
                    activation: Activation::Tanh,
                    head: Head::MeanSquaredError,
                    init_seed: rng.gen(),
                };
                let params = models::init_params(&spec).unwrap();
                let x = Tensor::vector(random_input(&mut rng, 3));
                let d = params.len();
                // Random PSD covariance: A A^T / d plus diagonal jitter.
                let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += a[i * d + k] * a[j * d + k];
                        }
                        cov[i * d + j] = acc / d as f64;
                    }
                }
                for i in 0..d {
                    cov[i * d + i] += 1e-6;
                }
                let sigma = Tensor::matrix(d, d, cov).unwrap();
                match sensitivity::contamination_bound_check(&spec, &params, &x, &sigma) {
                    Ok(pairs) => {
                        for (lhs, rhs) in pairs {
                            if lhs > rhs + 1e-10 {
                                violations += 1;
                            }
                        }
                    }
                    Err(_) => violations += 1,
                }
            }
            (violations == 0, violations as f64, "100 random correlated covariances".to_string())
        })
    }

    /// A small classifier trained for a few epochs on blob data, plus the
    /// features it was trained on.
    fn trained_toy_classifier(seed: u64) -> (ModelSpec, ParameterVector, Tensor) {
        let (spec, mut params, features, labels) = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_classifier_data(&mut rng, 400)
        };
        let batch = Batch { features: features.clone(), labels };
        // A short plain gradient-descent run is enough to move away from
        // the random initialization.
        for _ in 0..60 {
            let mut eval = models::supervised_loss(&spec, &params, &batch).unwrap();
            let grad = models::grad_params(&mut eval, &params).unwrap();
            let values: Vec<f64> = params
                .values()
                .iter()
                .zip(grad.data())
                .map(|(t, g)| t - 0.2 * g)
                .collect();
            params = params.with_values(values).unwrap();
        }
        (spec, params, features)
    }

    /// Random classifier, Gaussian blob features, and random labels.
    fn random_classifier_data(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (ModelSpec, ParameterVector, Tensor, Labels) {
        let spec = ModelSpec {
            layers: vec![4, 16, 8],
            activation: Activation::Tanh,
            head: Head::SoftmaxCrossEntropy,
            init_seed: rng.gen(),
        };
        let params = models::init_params(&spec).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features =
            Tensor::matrix(n, 4, (0..n * 4).map(|_| normal.sample(rng)).collect()).unwrap();
        let labels = Labels::Classes((0..n).map(|_| rng.gen_range(0..8)).collect());
        (spec, params, features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, ModelSpec};
    use rand::Rng;

    #[test]
    fn reference_forward_matches_hand_computation() {
        // One affine layer: y = x W + b with hand-picked values.
        let spec = ModelSpec {
            layers: vec![2, 2],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: 0,
        };
        // W = [[1, 2], [3, 4]], b = [10, 20].
        let values = vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0];
        let y = reference_forward(&spec, &values, &[1.0, 1.0]);
        assert_eq!(y, vec![14.0, 26.0]);
    }

    #[test]
    fn reference_forward_applies_hidden_activation_only() {
        let spec = ModelSpec {
            layers: vec![1, 1, 1],
            activation: Activation::Relu,
            head: Head::MeanSquaredError,
            init_seed: 0,
        };
        // layer0: w=-1, b=0  -> hidden = relu(-x); layer1: w=1, b=-5.
        let values = vec![-1.0, 0.0, 1.0, -5.0];
        // x=2: hidden relu(-2)=0, output 0*1-5 = -5 (no relu on output).
        assert_eq!(reference_forward(&spec, &values, &[2.0]), vec![-5.0]);
        // x=-3: hidden relu(3)=3, output -2.
        assert_eq!(reference_forward(&spec, &values, &[-3.0]), vec![-2.0]);
    }

    #[test]
    fn finite_diff_gradient_recovers_polynomial_derivatives() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        let g = finite_diff_gradient(f, &[2.0, -1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn spearman_detects_monotone_agreement_and_reversal() {
        let a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let b: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
        // Ties get average ranks; correlation stays within [-1, 1].
        let d = vec![1.0, 1.0, 2.0, 2.0, 3.0];
        let rho = spearman(&a, &d);
        assert!(rho > 0.9 && rho <= 1.0);
    }

    #[test]
    fn mc_coordinate_variance_matches_linear_model_analytics() {
        // Linear scalar model y = w.x + b: perturbing w_k by N(0, s2)
        // produces output variance exactly s2 * E[x_k^2].
        let spec = ModelSpec {
            layers: vec![3, 1],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: 0,
        };
        let values = vec![0.5, -1.0, 2.0, 0.3];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 50;
        let features =
            Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0f64)).collect()).unwrap();
        let k = 1;
        let sigma2 = 1e-6;
        let measured =
            mc_coordinate_output_variance(&spec, &values, &features, k, sigma2, 4000, 42) / sigma2;
        let expect: f64 =
            (0..n).map(|i| features.at(i, k) * features.at(i, k)).sum::<f64>() / n as f64;
        assert!(
            (measured - expect).abs() / expect < 0.05,
            "{} vs {}",
            measured,
            expect
        );
    }

    #[test]
    fn mc_output_covariance_matches_linear_propagation() {
        // y = x W with W fixed: Cov(y) = W^T diag(vx) W exactly, so the MC
        // estimate must land within sampling error.
        let spec = ModelSpec {
            layers: vec![2, 2],
            activation: Activation::Identity,
            head: Head::MeanSquaredError,
            init_seed: 0,
        };
        let values = vec![1.0, 0.5, -0.5, 2.0, 0.0, 0.0];
        let input_var = vec![1e-4, 4e-4];
        let param_var = vec![0.0; 6];
        let mc = mc_output_covariance(&spec, &values, &[0.3, -0.7], &input_var, &param_var, 60_000, 7);
        // W rows: w(x0->y) = [1.0, 0.5], w(x1->y) = [-0.5, 2.0].
        let w = [[1.0, 0.5], [-0.5, 2.0]];
        // Sampling standard error of the largest entry is ~9e-6 at 60k
        // draws; 5e-5 gives five-sigma headroom without masking real bugs.
        for r in 0..2 {
            for c in 0..2 {
                let expect: f64 = (0..2).map(|i| input_var[i] * w[i][r] * w[i][c]).sum();
                assert!(
                    (mc.at(r, c) - expect).abs() < 5e-5,
                    "({}, {}): {} vs {}",
                    r,
                    c,
                    mc.at(r, c),
                    expect
                );
            }
        }
    }

    #[test]
    fn reference_loss_agrees_with_direct_formulas() {
        let spec = ModelSpec {
            layers: vec![2, 2],
            activation: Activation::Identity,
            head: Head::SoftmaxCrossEntropy,
            init_seed: 0,
        };
        // Identity weights, zero bias: logits equal the features.
        let values = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let batch = models::Batch {
            features: Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap(),
            labels: models::Labels::Classes(vec![0]),
        };
        let loss = reference_loss(&spec, &values, &batch);
        let expect = (2.0f64.exp() + 1.0).ln() - 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }
}
