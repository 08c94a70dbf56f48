//! Analytic gradients versus central finite differences, in 64-bit mode, for
//! all three training losses on a sub-5K-parameter model.

mod common;

use common::{finite_difference_grads, max_relative_error};
use spa_align::lm::{
    preference_loss_and_grads, sequence_logprob, sft_loss_and_grads, ModelConfig, ParameterStore,
    PreferenceBatch, PreferenceItem, SftExample, TrainBatch,
};

const EPSILON: f64 = 1e-3;
const TOLERANCE: f64 = 1e-3;

fn grad_check_config() -> ModelConfig {
    // 4,920 parameters.
    ModelConfig {
        vocab_size: 11,
        context_length: 24,
        d_model: 16,
        n_layers: 1,
        n_heads: 4,
        tie_output: false,
    }
}

/// Evaluation point for the checks: the zero-initialized residual
/// projections get random values, and all weights are scaled up so gradients
/// stand well clear of the finite-difference truncation floor at this
/// epsilon.
fn grad_check_params(config: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut params = config.init_params::<f64>(seed).unwrap();
    let mut bump = 0.31f64;
    for name in ["layer0.attn.wo", "layer0.mlp.w2"] {
        for w in params.get_mut(name).data_mut() {
            bump = (bump * 997.0 + 0.171) % 1.0;
            *w = 0.05 * (bump - 0.5);
        }
    }
    for (name, t) in params.iter_mut() {
        if name.ends_with(".g") || name.ends_with(".b") {
            continue;
        }
        for w in t.data_mut() {
            *w *= 10.0;
        }
    }
    params
}

fn sft_batch() -> TrainBatch {
    TrainBatch::Sft(vec![
        SftExample {
            prompt: vec![0, 3, 5],
            response: vec![4, 7, 1],
        },
        SftExample {
            prompt: vec![0, 8],
            response: vec![10, 2, 2, 1],
        },
    ])
}

fn preference_batch(
    config: &ModelConfig,
    params: &ParameterStore<f64>,
    alpha: f64,
    flags: [bool; 2],
) -> PreferenceBatch {
    // A separately-initialized frozen reference supplies the log-ratios.
    let reference = config.init_params::<f64>(555).unwrap();
    let mk = |prompt: Vec<u32>, chosen: Vec<u32>, rejected: Vec<u32>, flag: bool| {
        let _ = params;
        PreferenceItem {
            ref_logp_chosen: sequence_logprob(config, &reference, &prompt, &chosen).unwrap(),
            ref_logp_rejected: sequence_logprob(config, &reference, &prompt, &rejected).unwrap(),
            prompt,
            chosen,
            rejected,
            ref_rows_chosen: Vec::new(),
            ref_rows_rejected: Vec::new(),
            flag,
        }
    };
    PreferenceBatch {
        beta: 0.1,
        alpha,
        items: vec![
            mk(vec![0, 3, 5], vec![4, 7, 1], vec![9, 1], flags[0]),
            mk(vec![0, 6], vec![2, 2, 8, 1], vec![2, 3, 1], flags[1]),
        ],
    }
}

#[test]
fn model_stays_under_five_k_params() {
    let config = grad_check_config();
    assert!(
        config.param_count() <= 5000,
        "gradient-check model has {} parameters",
        config.param_count()
    );
}

#[test]
fn sft_gradients_match_finite_differences() {
    let config = grad_check_config();
    let params = grad_check_params(&config, 101);
    let batch = sft_batch();
    let (_, analytic) = match &batch {
        TrainBatch::Sft(items) => sft_loss_and_grads(&config, &params, items).unwrap(),
        _ => unreachable!(),
    };
    let numeric = finite_difference_grads(&config, &params, &batch, EPSILON);
    let analytic_store = grads_to_store(&params, &analytic);
    let (err, at) = max_relative_error(&analytic_store, &numeric);
    assert!(err < TOLERANCE, "sft max rel err {err} at {at}");
}

#[test]
fn dpo_gradients_match_finite_differences() {
    let config = grad_check_config();
    let params = grad_check_params(&config, 202);
    let pb = preference_batch(&config, &params, 0.0, [false, false]);
    let (_, analytic, _) = preference_loss_and_grads(&config, &params, &pb, None).unwrap();
    let numeric =
        finite_difference_grads(&config, &params, &TrainBatch::Preference(pb), EPSILON);
    let analytic_store = grads_to_store(&params, &analytic);
    let (err, at) = max_relative_error(&analytic_store, &numeric);
    assert!(err < TOLERANCE, "dpo max rel err {err} at {at}");
}

#[test]
fn refined_gradients_match_finite_differences() {
    let config = grad_check_config();
    let params = grad_check_params(&config, 303);
    // One flagged and one unflagged item exercise both loss branches.
    let pb = preference_batch(&config, &params, 0.1, [true, false]);
    let (_, analytic, _) = preference_loss_and_grads(&config, &params, &pb, None).unwrap();
    let numeric =
        finite_difference_grads(&config, &params, &TrainBatch::Preference(pb), EPSILON);
    let analytic_store = grads_to_store(&params, &analytic);
    let (err, at) = max_relative_error(&analytic_store, &numeric);
    assert!(err < TOLERANCE, "refined max rel err {err} at {at}");
}

fn grads_to_store(
    params: &ParameterStore<f64>,
    grads: &spa_align::lm::GradStore<f64>,
) -> ParameterStore<f64> {
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        t.data_mut().copy_from_slice(grads.get(name).data());
    }
    out
}
