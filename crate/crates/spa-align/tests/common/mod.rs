//! Shared test oracles and fixtures.
//!
//! The finite-difference gradient oracle lives here, independent of the
//! analytic backward pass it checks: it only ever calls the loss-evaluation
//! path, perturbing one parameter at a time.

#![allow(dead_code)]

use spa_align::lm::{batch_loss, ModelConfig, ParameterStore, TrainBatch};

/// Central finite differences of `batch_loss` with respect to every
/// parameter, at the given epsilon, in f64.
pub fn finite_difference_grads(
    config: &ModelConfig,
    params: &ParameterStore<f64>,
    batch: &TrainBatch,
    epsilon: f64,
) -> ParameterStore<f64> {
    let mut grads = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut work = params.clone();
    for name in names {
        let n = params.get(&name).numel();
        for i in 0..n {
            let orig = work.get(&name).data()[i];
            work.get_mut(&name).data_mut()[i] = orig + epsilon;
            let up = batch_loss(config, &work, batch).expect("loss at +eps");
            work.get_mut(&name).data_mut()[i] = orig - epsilon;
            let down = batch_loss(config, &work, batch).expect("loss at -eps");
            work.get_mut(&name).data_mut()[i] = orig;
            grads.get_mut(&name).data_mut()[i] = (up - down) / (2.0 * epsilon);
        }
    }
    grads
}

/// Worst relative disagreement between two gradient sets. The denominator
/// floor of 1e-5 turns the comparison into an absolute check (< 1e-8 at the
/// 1e-3 threshold) for gradients that are essentially zero, where a pure
/// ratio only measures finite-difference truncation noise.
pub fn max_relative_error(a: &ParameterStore<f64>, b: &ParameterStore<f64>) -> (f64, String) {
    let mut worst = 0.0;
    let mut worst_at = String::new();
    for (name, ta) in a.iter() {
        let tb = b.get(name);
        for (i, (&x, &y)) in ta.data().iter().zip(tb.data()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-5);
            let rel = (x - y).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}] analytic={x} numeric={y}");
            }
        }
    }
    (worst, worst_at)
}

/// Levenshtein distance by the textbook recursive definition with
/// memoization, structurally different from any iterative implementation it
/// may be checked against.
pub fn levenshtein_recursive(a: &str, b: &str) -> usize {
    use std::collections::HashMap;
    fn go(
        a: &[char],
        b: &[char],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            let del = go(a, b, i + 1, j, memo);
            let ins = go(a, b, i, j + 1, memo);
            let sub = go(a, b, i + 1, j + 1, memo);
            1 + del.min(ins).min(sub)
        };
        memo.insert((i, j), v);
        v
    }
    let ac: Vec<char> = a.chars().collect();
    let bc: Vec<char> = b.chars().collect();
    go(&ac, &bc, 0, 0, &mut HashMap::new())
}
