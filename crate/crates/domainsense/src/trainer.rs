//! The regularized training loop: domain-sensitive penalty, periodic
//! coefficient refreshes, and the ablation suite.
//!
//! The objective is `L_total = L_sup + lambda * R_DS` where
//! `R_DS = sum_k c_k * g_k^2` squares the supervised mini-batch gradient
//! and weights each parameter by its cross-domain sensitivity variation
//! `c_k` (from [`cross_domain_stats`]).  Coefficients start uniform at 1
//! and are refreshed every `t_update` units (epochs by default) from
//! dedicated per-domain batches; between refreshes they are constants, and
//! no gradient ever flows through them.
//!
//! Three ways of differentiating the penalty are provided, because
//! "gradient of a squared gradient" hides a genuine design choice:
//!
//! - `stop-grad-weighted` (default): `2 * (c ⊙ g)`, the first-order
//!   surrogate that treats `g` as detached data.  This is the only variant
//!   whose cost matches a plain backward pass, since it reuses the
//!   gradient already computed for the supervised step.
//! - `exact-hvp`: `2 * H (c ⊙ g)`, the true gradient of `R_DS` (with `c`
//!   constant), using the tape's double backward.
//! - `fd-hvp`: the same quantity with the Hessian-vector product taken by
//!   central finite differences, for models the exact sweep refuses.
//!
//! Reproducibility contract: mini-batch shuffling, coefficient-refresh
//! batch draws, and validation-split carving each consume a *separate*
//! stream of the seeded generator.  A `lambda = 0` run therefore takes
//! bit-identical parameter steps to a run with the regularizer disabled
//! outright, refreshes or not — the inert-regularizer equivalence the
//! tests assert.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{merge_domains, DomainDataset};
use crate::error::{Error, Result};
use crate::models::{self, accuracy, grad_params, init_params, supervised_loss, Batch, Head, HvpMode, ModelSpec};
use crate::params::ParameterVector;
use crate::sensitivity::{cross_domain_stats, per_domain_sensitivity, DomainBatch, EstimatorMode, SensitivityReport};

/// Unit in which the coefficient-refresh period is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateUnit {
    /// Refresh when `epoch % t_update == 0` (the default).
    Epoch,
    /// Refresh when the global step index `% t_update == 0`.
    Iteration,
}

/// How the per-parameter coefficients evolve during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    /// Recompute `c` on every refresh tick.
    Dynamic,
    /// Compute `c` once before the first step, then freeze it.
    Static,
    /// Keep `c = 1`: the penalty degenerates to the squared gradient norm.
    Uniform,
    /// Disable the penalty path entirely (the ERM baseline).
    Off,
}

/// How the penalty's contribution to the parameter update is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegGradMode {
    /// True gradient `2 H (c ⊙ g)` via double backward.
    ExactHvp,
    /// True gradient with a finite-difference Hessian-vector product.
    FdHvp,
    /// First-order surrogate `2 (c ⊙ g)`; reuses the existing gradient.
    StopGradWeighted,
}

/// Parameter-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain gradient descent (keeps the oracle math exact).
    Gd,
    /// Adam with decay rates 0.9/0.999 and epsilon 1e-8.
    Adam,
}

/// All knobs of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Regularization strength (0 disables the penalty).
    pub lambda: f64,
    /// Units between coefficient refreshes.
    pub t_update: usize,
    /// Whether refresh ticks count epochs or steps.
    pub update_unit: UpdateUnit,
    /// Gradient-descent step size.
    pub learning_rate: f64,
    /// Number of passes over the mixed source data.
    pub epochs: usize,
    /// Mini-batch size (also the per-domain refresh batch size).
    pub batch_size: usize,
    /// Coefficient schedule.
    pub coefficient_mode: CoefficientMode,
    /// Per-domain sensitivity estimator used at refresh time.
    pub estimator_mode: EstimatorMode,
    /// Differentiation mode for the penalty.
    pub reg_grad_mode: RegGradMode,
    /// Parameter-update rule.
    pub optimizer: Optimizer,
    /// Stabilizer added to the mean in the coefficient of variation.
    pub epsilon: f64,
    /// Fraction of each source domain carved off for validation metrics.
    pub val_fraction: f64,
    /// Seed for shuffling, refresh draws, and validation carving.
    pub seed: u64,
    /// Record per-step diagnostics (loss, penalty, gradient norm).
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            t_update: 2,
            update_unit: UpdateUnit::Epoch,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 64,
            coefficient_mode: CoefficientMode::Dynamic,
            estimator_mode: EstimatorMode::Jacobian,
            reg_grad_mode: RegGradMode::StopGradWeighted,
            optimizer: Optimizer::Gd,
            epsilon: 1e-8,
            val_fraction: 0.2,
            seed: 0,
            log_steps: false,
        }
    }
}

impl TrainConfig {
    /// Checks every numeric invariant of the configuration.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Contract(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.t_update == 0 {
            return Err(Error::Contract("t_update must be at least 1".to_string()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Contract(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".to_string()));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Contract(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !self.val_fraction.is_finite() || !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::Contract(format!(
                "val_fraction must lie in [0, 0.9], got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Row label used in summaries: a run whose penalty path is inert
    /// (mode off, or `lambda = 0`) is empirical risk minimization.
    pub fn mode_label(&self) -> &'static str {
        if self.coefficient_mode == CoefficientMode::Off || self.lambda == 0.0 {
            "erm"
        } else {
            match self.coefficient_mode {
                CoefficientMode::Dynamic => "dynamic",
                CoefficientMode::Static => "static",
                CoefficientMode::Uniform => "uniform",
                CoefficientMode::Off => unreachable!("handled above"),
            }
        }
    }
}

/// The domain-sensitive penalty `sum_k c_k * g_k^2`.
///
/// Coefficients must be non-negative and match the gradient's length; the
/// result is then non-negative by construction.
pub fn ds_regularizer(c: &[f64], g: &[f64]) -> Result<f64> {
    if c.len() != g.len() {
        return Err(Error::dimension(
            "ds_regularizer",
            format!("{} coefficients for {} gradient entries", c.len(), g.len()),
        ));
    }
    if let Some(bad) = c.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!(
            "coefficients must be finite and >= 0, got {}",
            bad
        )));
    }
    Ok(c.iter().zip(g).map(|(ck, gk)| ck * gk * gk).sum())
}

/// The regularized objective `L_sup + lambda * R_DS` (callers guarantee
/// `lambda >= 0` via [`TrainConfig::validate`]).
pub fn total_loss(sup_loss: f64, reg_value: f64, lambda: f64) -> f64 {
    sup_loss + lambda * reg_value
}

/// Gradient of the penalty with respect to the parameters, treating the
/// coefficients as constants.
///
/// `g` must be the supervised gradient of `batch` at `params` — the exact
/// quantity the penalty squares.  The two Hessian-vector-product modes
/// return the true gradient `2 H (c ⊙ g)`; the stop-grad mode returns the
/// first-order surrogate `2 (c ⊙ g)`.
pub fn regularizer_gradient(
    model: &ModelSpec,
    params: &ParameterVector,
    batch: &Batch,
    c: &[f64],
    g: &[f64],
    mode: RegGradMode,
) -> Result<Vec<f64>> {
    if c.len() != params.len() || g.len() != params.len() {
        return Err(Error::dimension(
            "regularizer_gradient",
            format!(
                "{} coefficients and {} gradient entries for {} parameters",
                c.len(),
                g.len(),
                params.len()
            ),
        ));
    }
    let weighted: Vec<f64> = c.iter().zip(g).map(|(ck, gk)| ck * gk).collect();
    match mode {
        RegGradMode::StopGradWeighted => Ok(weighted.iter().map(|v| 2.0 * v).collect()),
        RegGradMode::ExactHvp | RegGradMode::FdHvp => {
            let hvp_mode = if mode == RegGradMode::ExactHvp {
                HvpMode::Exact
            } else {
                HvpMode::FiniteDifference
            };
            let hv = models::hvp(model, params, batch, &weighted, hvp_mode).map_err(|e| match e {
                Error::Capability(message) => Error::Capability(format!(
                    "{}; select the fd-hvp regularizer gradient mode",
                    message
                )),
                other => other,
            })?;
            Ok(hv.iter().map(|v| 2.0 * v).collect())
        }
    }
}

/// Loss (and accuracy, for classification heads) of one labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetric {
    /// Domain id the metric was computed on.
    pub id: String,
    /// Mean supervised loss.
    pub loss: f64,
    /// Argmax accuracy; absent for regression heads.
    pub accuracy: Option<f64>,
}

/// One completed epoch: step-averaged training losses plus end-of-epoch
/// evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Mean regularized loss over the epoch's steps.
    pub train_loss: f64,
    /// Mean supervised loss over the epoch's steps.
    pub train_sup_loss: f64,
    /// Mean penalty value over the epoch's steps.
    pub reg_value: f64,
    /// Per-source-domain validation metrics, in training-domain order.
    pub val_metrics: Vec<DomainMetric>,
    /// Metrics on the held-out domain.
    pub heldout: DomainMetric,
    /// Wall-clock time the epoch took, in milliseconds.
    pub wall_ms: f64,
}

/// Coefficients recorded at one refresh, timestamped by position in the
/// run.
#[derive(Debug, Clone)]
pub struct CoefficientSnapshot {
    /// Epoch at which the refresh happened.
    pub epoch: usize,
    /// Global step index at which the refresh happened.
    pub step: usize,
    /// Full cross-domain statistics (the coefficients live in
    /// `report.coefficients`).
    pub report: SensitivityReport,
}

/// Per-step diagnostics, recorded only when
/// [`TrainConfig::log_steps`] is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Epoch the step belongs to.
    pub epoch: usize,
    /// Global step index.
    pub step: usize,
    /// Supervised mini-batch loss.
    pub sup_loss: f64,
    /// Penalty value at this step.
    pub reg_value: f64,
    /// Squared Euclidean norm of the supervised gradient, computed
    /// independently of the penalty.
    pub grad_sq_norm: f64,
}

/// Everything a run records: per-epoch metrics, coefficient snapshots,
/// optional per-step diagnostics, and the final held-out result.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    /// One record per completed epoch.
    pub records: Vec<EpochRecord>,
    /// Coefficient snapshots, one per refresh, in refresh order.
    pub snapshots: Vec<CoefficientSnapshot>,
    /// Per-step diagnostics (empty unless step logging was enabled).
    pub steps: Vec<StepRecord>,
    /// Held-out metrics after the final epoch.
    pub final_heldout: DomainMetric,
}

/// Writes per-epoch records as JSON Lines, one record per line.
pub fn write_metrics_jsonl(metrics: &RunMetrics, out: &mut impl Write) -> Result<()> {
    for record in &metrics.records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Parse(format!("metrics serialization failed: {}", e)))?;
        writeln!(out, "{}", line)?;
    }
    Ok(())
}

/// A training domain after validation carving.
struct PreparedDomain {
    dataset: DomainDataset,
    /// Validation view: the carved-off rows, or the full domain when the
    /// fraction rounds to zero samples.
    val: Batch,
}

/// Carves each source domain into train and validation parts.
fn prepare_domains(domains: &[&DomainDataset], val_fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<PreparedDomain>> {
    let mut prepared = Vec::with_capacity(domains.len());
    for domain in domains {
        let n = domain.len();
        let k_val = ((val_fraction * n as f64).floor() as usize).min(n - 1);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(rng);
        let (val_idx, train_idx) = indices.split_at(k_val);
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let train_batch = domain.batch().select(&train_idx)?;
        let val = if val_idx.is_empty() {
            domain.batch().clone()
        } else {
            domain.batch().select(&val_idx)?
        };
        prepared.push(PreparedDomain {
            dataset: DomainDataset::new(domain.id(), train_batch.features, train_batch.labels)?,
            val,
        });
    }
    Ok(prepared)
}

/// Draws one refresh batch per domain and recomputes the cross-domain
/// statistics at the current parameters.
fn refresh_coefficients(
    model: &ModelSpec,
    params: &ParameterVector,
    parts: &[PreparedDomain],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SensitivityReport> {
    let mut batches = Vec::with_capacity(parts.len());
    for part in parts {
        let n = part.dataset.len();
        let k = config.batch_size.min(n);
        let mut chosen = rand::seq::index::sample(rng, n, k).into_vec();
        chosen.sort_unstable();
        batches.push(DomainBatch {
            id: part.dataset.id().to_string(),
            batch: part.dataset.batch().select(&chosen)?,
        });
    }
    let matrix = per_domain_sensitivity(model, params, &batches, config.estimator_mode)?;
    Ok(cross_domain_stats(&matrix, config.epsilon))
}

/// Evaluates loss (and accuracy for classification heads) on one batch.
fn evaluate(model: &ModelSpec, params: &ParameterVector, id: &str, batch: &Batch) -> Result<DomainMetric> {
    let eval = supervised_loss(model, params, batch)?;
    let acc = match model.head {
        Head::SoftmaxCrossEntropy => Some(accuracy(model, params, batch)?),
        Head::MeanSquaredError => None,
    };
    Ok(DomainMetric {
        id: id.to_string(),
        loss: eval.loss(),
        accuracy: acc,
    })
}

/// Adam moment state.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Runs one training job and returns the final parameters with the full
/// metric record.
///
/// Initializes parameters from the model seed and coefficients at 1,
/// refreshes coefficients on the configured schedule (a refresh always
/// happens before the first step in dynamic and static modes), draws
/// mini-batches from the shuffled union of all source domains, and applies
/// the composed update `theta -= eta * (g + lambda * grad R_DS)`.  Aborts
/// with a divergence error the moment any training loss turns non-finite.
pub fn train(
    model: &ModelSpec,
    config: &TrainConfig,
    train_domains: &[&DomainDataset],
    heldout: &DomainDataset,
) -> Result<(ParameterVector, RunMetrics)> {
    config.validate()?;
    model.validate()?;
    if train_domains.len() < 2 {
        return Err(Error::Protocol(format!(
            "training needs at least 2 source domains, got {}",
            train_domains.len()
        )));
    }
    for (i, a) in train_domains.iter().enumerate() {
        if train_domains[..i].iter().any(|b| b.id() == a.id()) {
            return Err(Error::Data(format!("duplicate training domain id {:?}", a.id())));
        }
    }
    for domain in train_domains.iter().copied().chain(std::iter::once(heldout)) {
        let d_x = domain.features().shape()[1];
        if d_x != model.input_dim() {
            return Err(Error::dimension(
                "train",
                format!(
                    "domain {:?} has {} features but the model expects {}",
                    domain.id(),
                    d_x,
                    model.input_dim()
                ),
            ));
        }
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut refresh_rng = ChaCha8Rng::seed_from_u64(config.seed);
    refresh_rng.set_stream(1);
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed);
    val_rng.set_stream(2);

    let parts = prepare_domains(train_domains, config.val_fraction, &mut val_rng)?;
    let part_refs: Vec<&DomainDataset> = parts.iter().map(|p| &p.dataset).collect();
    let union = merge_domains(&part_refs)?;
    let union_len = union.len();

    let mut params = init_params(model)?;
    let d_theta = params.len();
    let mut c = vec![1.0; d_theta];
    let penalty_active = config.coefficient_mode != CoefficientMode::Off && config.lambda > 0.0;
    let refreshes = matches!(
        config.coefficient_mode,
        CoefficientMode::Dynamic | CoefficientMode::Static
    );

    let mut records = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();
    let mut steps = Vec::new();
    let mut adam = AdamState {
        m: vec![0.0; d_theta],
        v: vec![0.0; d_theta],
        t: 0,
    };
    let mut global_step = 0usize;

    let mut indices: Vec<usize> = (0..union_len).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        if refreshes && config.update_unit == UpdateUnit::Epoch {
            let due = match config.coefficient_mode {
                CoefficientMode::Dynamic => epoch % config.t_update == 0,
                CoefficientMode::Static => epoch == 0,
                _ => false,
            };
            if due {
                let report = refresh_coefficients(model, &params, &parts, config, &mut refresh_rng)?;
                c = report.coefficients.clone();
                snapshots.push(CoefficientSnapshot {
                    epoch,
                    step: global_step,
                    report,
                });
            }
        }

        indices.shuffle(&mut shuffle_rng);
        let mut sum_total = 0.0;
        let mut sum_sup = 0.0;
        let mut sum_reg = 0.0;
        let mut step_count = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            if refreshes && config.update_unit == UpdateUnit::Iteration {
                let due = match config.coefficient_mode {
                    CoefficientMode::Dynamic => global_step % config.t_update == 0,
                    CoefficientMode::Static => global_step == 0,
                    _ => false,
                };
                if due {
                    let report = refresh_coefficients(model, &params, &parts, config, &mut refresh_rng)?;
                    c = report.coefficients.clone();
                    snapshots.push(CoefficientSnapshot {
                        epoch,
                        step: global_step,
                        report,
                    });
                }
            }

            let batch = union.select(chunk)?;
            let mut eval = supervised_loss(model, &params, &batch)?;
            let sup = eval.loss();
            if !sup.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {} step {} (lambda = {}, learning rate = {})",
                    epoch, global_step, config.lambda, config.learning_rate
                )));
            }
            let g = grad_params(&mut eval, &params)?;
            let g = g.data();

            let (reg_value, effective_lambda) = if config.coefficient_mode == CoefficientMode::Off {
                (0.0, 0.0)
            } else {
                (ds_regularizer(&c, g)?, config.lambda)
            };
            let total = total_loss(sup, reg_value, effective_lambda);
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite regularized loss at epoch {} step {} (lambda = {}, learning rate = {})",
                    epoch, global_step, config.lambda, config.learning_rate
                )));
            }

            let mut direction: Vec<f64> = g.to_vec();
            if penalty_active {
                let rg = regularizer_gradient(model, &params, &batch, &c, g, config.reg_grad_mode)?;
                for (d, r) in direction.iter_mut().zip(&rg) {
                    *d += config.lambda * r;
                }
            }

            if config.log_steps {
                steps.push(StepRecord {
                    epoch,
                    step: global_step,
                    sup_loss: sup,
                    reg_value,
                    grad_sq_norm: g.iter().map(|v| v * v).sum(),
                });
            }

            match config.optimizer {
                Optimizer::Gd => {
                    for (theta, d) in params.values_mut().iter_mut().zip(&direction) {
                        *theta -= config.learning_rate * d;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                    let bc1 = 1.0 - b1.powi(adam.t as i32);
                    let bc2 = 1.0 - b2.powi(adam.t as i32);
                    for (k, (theta, d)) in params.values_mut().iter_mut().zip(&direction).enumerate() {
                        adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * d;
                        adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * d * d;
                        let m_hat = adam.m[k] / bc1;
                        let v_hat = adam.v[k] / bc2;
                        *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }

            sum_total += total;
            sum_sup += sup;
            sum_reg += reg_value;
            step_count += 1;
            global_step += 1;
        }

        let mut val_metrics = Vec::with_capacity(parts.len());
        for part in &parts {
            val_metrics.push(evaluate(model, &params, part.dataset.id(), &part.val)?);
        }
        let heldout_metric = evaluate(model, &params, heldout.id(), heldout.batch())?;
        if !heldout_metric.loss.is_finite() || val_metrics.iter().any(|m| !m.loss.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite evaluation loss after epoch {} (lambda = {}, learning rate = {})",
                epoch, config.lambda, config.learning_rate
            )));
        }
        let denom = step_count.max(1) as f64;
        records.push(EpochRecord {
            epoch,
            train_loss: sum_total / denom,
            train_sup_loss: sum_sup / denom,
            reg_value: sum_reg / denom,
            val_metrics,
            heldout: heldout_metric,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let final_heldout = records
        .last()
        .map(|r| r.heldout.clone())
        .expect("at least one epoch");
    Ok((
        params,
        RunMetrics {
            records,
            snapshots,
            steps,
            final_heldout,
        },
    ))
}

/// One row of the ablation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Stable identifier of the variant (`full`, `erm`, `lambda-1e-2`, ...).
    pub run_id: String,
    /// Coefficient-mode label: `dynamic`, `static`, `uniform`, or `erm`.
    pub mode: String,
    /// Regularization strength the variant ran with.
    pub lambda: f64,
    /// Refresh period the variant ran with.
    pub t_update: usize,
    /// Seed shared by every variant.
    pub seed: u64,
    /// Final held-out loss.
    pub heldout_metric: f64,
}

/// Values swept by [`ablation_suite`] in addition to the four core
/// variants.
pub const LAMBDA_SWEEP: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];
/// Refresh periods swept by [`ablation_suite`].
pub const T_UPDATE_SWEEP: [usize; 4] = [1, 2, 3, 4];

/// Runs the full ablation protocol on one split: the four core variants
/// (full, ERM, uniform-c, static-c) plus the strength and refresh-period
/// sweeps, deduplicated against the base point.
///
/// Every variant uses the base seed, so rows differ only in the policy
/// under study.  With the default base configuration the suite holds
/// exactly 10 runs.
pub fn ablation_suite(
    model: &ModelSpec,
    base: &TrainConfig,
    train_domains: &[&DomainDataset],
    heldout: &DomainDataset,
) -> Result<Vec<(AblationRow, RunMetrics)>> {
    base.validate()?;
    let full = TrainConfig {
        coefficient_mode: CoefficientMode::Dynamic,
        ..base.clone()
    };
    let mut variants: Vec<(String, TrainConfig)> = vec![
        ("full".to_string(), full.clone()),
        (
            "erm".to_string(),
            TrainConfig {
                lambda: 0.0,
                coefficient_mode: CoefficientMode::Off,
                ..base.clone()
            },
        ),
        (
            "uniform".to_string(),
            TrainConfig {
                coefficient_mode: CoefficientMode::Uniform,
                ..base.clone()
            },
        ),
        (
            "static".to_string(),
            TrainConfig {
                coefficient_mode: CoefficientMode::Static,
                ..base.clone()
            },
        ),
    ];
    for lambda in LAMBDA_SWEEP {
        if lambda != full.lambda {
            variants.push((format!("lambda-{:e}", lambda), TrainConfig { lambda, ..full.clone() }));
        }
    }
    for t_update in T_UPDATE_SWEEP {
        if t_update != full.t_update {
            variants.push((format!("tupdate-{}", t_update), TrainConfig { t_update, ..full.clone() }));
        }
    }

    let mut out = Vec::with_capacity(variants.len());
    for (run_id, config) in variants {
        let (_, metrics) = train(model, &config, train_domains, heldout)?;
        out.push((
            AblationRow {
                run_id,
                mode: config.mode_label().to_string(),
                lambda: config.lambda,
                t_update: config.t_update,
                seed: config.seed,
                heldout_metric: metrics.final_heldout.loss,
            },
            metrics,
        ));
    }
    Ok(out)
}

/// Writes ablation rows as CSV with the schema
/// `run_id,mode,lambda,t_update,seed,heldout_metric`.
pub fn write_ablation_csv(rows: &[AblationRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "run_id,mode,lambda,t_update,seed,heldout_metric")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{:e},{},{},{:.16e}",
            row.run_id, row.mode, row.lambda, row.t_update, row.seed, row.heldout_metric
        )?;
    }
    Ok(())
}
