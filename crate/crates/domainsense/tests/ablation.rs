//! Integration check of the ablation protocol on the shortcut task: the
//! strength sweep has an interior optimum, and the suite enumerates the
//! deduplicated variant set with a shared seed.

use std::collections::HashSet;

use domainsense::data::{generate, lodo_splits, SyntheticSpec};
use domainsense::models::{Activation, Head, ModelSpec};
use domainsense::trainer::{ablation_suite, RegGradMode, TrainConfig, LAMBDA_SWEEP};

#[test]
fn strength_sweep_has_an_interior_minimum_on_the_shortcut_task() {
    let spec = SyntheticSpec::default();
    let domains = generate(&spec).unwrap();
    let splits = lodo_splits(&domains).unwrap();
    // Train on the two leaky domains; hold out the leak-free one.
    let (train_domains, heldout) = &splits[2];
    let model = ModelSpec {
        layers: vec![spec.feature_dim(), 8, 1],
        activation: Activation::Tanh,
        head: Head::MeanSquaredError,
        init_seed: 100,
    };
    let base = TrainConfig {
        lambda: 0.01,
        learning_rate: 0.03,
        epochs: 200,
        batch_size: 8,
        reg_grad_mode: RegGradMode::ExactHvp,
        seed: 0,
        ..TrainConfig::default()
    };

    let rows = ablation_suite(&model, &base, train_domains, heldout).unwrap();
    assert_eq!(rows.len(), 10, "base point dedups one strength and one period row");

    let ids: HashSet<&str> = rows.iter().map(|(row, _)| row.run_id.as_str()).collect();
    for id in ["full", "erm", "uniform", "static"] {
        assert!(ids.contains(id), "missing core variant {}", id);
    }

    // Every row shares the base seed, so differences are policy-only.
    assert!(rows.iter().all(|(row, _)| row.seed == base.seed));
    let erm_row = rows.iter().find(|(row, _)| row.run_id == "erm").unwrap();
    assert_eq!(erm_row.0.mode, "erm");
    assert_eq!(erm_row.0.lambda, 0.0);

    // Assemble the heldout-loss curve over the pinned strength grid; the
    // base strength's point is the `full` row itself.
    let metric_of = |run_id: &str| {
        rows.iter()
            .find(|(row, _)| row.run_id == run_id)
            .map(|(row, _)| row.heldout_metric)
            .unwrap_or_else(|| panic!("missing row {}", run_id))
    };
    let curve: Vec<f64> = LAMBDA_SWEEP
        .iter()
        .map(|&lambda| {
            if lambda == base.lambda {
                metric_of("full")
            } else {
                metric_of(&format!("lambda-{:e}", lambda))
            }
        })
        .collect();

    let argmin = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    assert!(
        argmin != 0 && argmin != LAMBDA_SWEEP.len() - 1,
        "expected an interior optimum, got index {} of curve {:?}",
        argmin,
        curve
    );
    assert_eq!(argmin, 2, "strongest point should be the 1e-2 strength: {:?}", curve);
}
