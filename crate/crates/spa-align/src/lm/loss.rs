//! Sequence scoring and training losses.
//!
//! Three losses share one gradient path: the loss-side chain rule produces a
//! gradient on the logits of each scored sequence, and [`model::backward`]
//! carries it to the parameters.
//!
//! * cross-entropy over response tokens (supervised fine-tuning),
//! * `-ln p` over the preference probability (preference optimization),
//! * the label-smoothed refined loss, which reduces to the former at
//!   `alpha = 0` or flag 0.
//!
//! Reference log-probabilities enter as precomputed constants; no gradient
//! ever reaches a reference model.

use crate::error::{Error, Result};
use crate::lm::model::{forward, ForwardPass, ModelConfig};
use crate::lm::tensor::{GradStore, ParameterStore, Scalar};
use crate::pref::PROB_FLOOR;

/// Log-softmax value of `row[target]`.
pub fn row_logp<F: Scalar>(row: &[F], target: u32) -> Result<F> {
    let idx = target as usize;
    if idx >= row.len() {
        return Err(Error::TokenOutOfRange {
            id: target,
            vocab_size: row.len(),
        });
    }
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
    Ok(row[idx] - lse)
}

/// Softmax probabilities of one logits row.
pub fn row_probs<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: F = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    out
}

fn check_prompt_response(prompt: &[u32], response: &[u32]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt_tokens", "must be non-empty"));
    }
    if response.is_empty() {
        return Err(Error::invalid_input("response_tokens", "must be non-empty"));
    }
    Ok(())
}

/// Summed log-probability of `response` given `prompt`: log-softmax read-outs
/// at the realized response tokens, prompt positions excluded. The sum runs
/// in the model dtype and is widened at the end.
pub fn sequence_logprob<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    prompt: &[u32],
    response: &[u32],
) -> Result<f64> {
    check_prompt_response(prompt, response)?;
    let mut full = prompt.to_vec();
    full.extend_from_slice(response);
    let pass = forward(config, params, &full)?;
    logp_from_pass(&pass, prompt.len(), response)
}

/// Same read-out over an existing forward pass of prompt ++ response.
pub fn logp_from_pass<F: Scalar>(
    pass: &ForwardPass<F>,
    prompt_len: usize,
    response: &[u32],
) -> Result<f64> {
    let mut sum = F::zero();
    for (j, &tok) in response.iter().enumerate() {
        sum += row_logp(pass.logits_row(prompt_len - 1 + j), tok)?;
    }
    Ok(sum.to_f64s())
}

/// Response-position logits rows widened to `f64`, for the de-coupled
/// confidence path.
pub fn response_rows_f64<F: Scalar>(
    pass: &ForwardPass<F>,
    prompt_len: usize,
    response_len: usize,
) -> Vec<Vec<f64>> {
    (0..response_len)
        .map(|j| {
            pass.logits_row(prompt_len - 1 + j)
                .iter()
                .map(|&x| x.to_f64s())
                .collect()
        })
        .collect()
}

/// One supervised example; the loss covers response tokens only.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

/// One preference pair with its frozen reference log-probabilities. The
/// optional reference logits rows serve the de-coupled flag computation.
#[derive(Debug, Clone)]
pub struct PreferenceItem {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub ref_logp_chosen: f64,
    pub ref_logp_rejected: f64,
    /// Reference logits rows over chosen/rejected response positions,
    /// precomputed once per iteration against the frozen reference.
    pub ref_rows_chosen: Vec<Vec<f64>>,
    pub ref_rows_rejected: Vec<Vec<f64>>,
    /// Noise flag used when no live flag hook runs.
    pub flag: bool,
}

/// A preference batch plus the loss hyper-parameters.
#[derive(Debug, Clone)]
pub struct PreferenceBatch {
    pub beta: f64,
    pub alpha: f64,
    pub items: Vec<PreferenceItem>,
}

/// What a live flag hook sees for one item: both policy passes and the
/// already-computed coupled confidence.
pub struct PrefItemView<'a, F> {
    pub index: usize,
    pub item: &'a PreferenceItem,
    pub chosen_pass: &'a ForwardPass<F>,
    pub rejected_pass: &'a ForwardPass<F>,
    /// sigmoid(beta * margin) from the policy/reference log-ratio sums.
    pub p_coupled: f64,
}

/// Per-item record a preference step reports back.
#[derive(Debug, Clone, Copy)]
pub struct PrefStepStat {
    pub p: f64,
    pub flag: bool,
}

/// Type of the live flag callback.
pub type FlagHook<'h, F> = &'h mut dyn FnMut(&PrefItemView<'_, F>) -> bool;

/// A training batch for [`crate::lm::train_step`].
#[derive(Debug, Clone)]
pub enum TrainBatch {
    Sft(Vec<SftExample>),
    Preference(PreferenceBatch),
}

fn refined_loss_terms(p: f64, alpha_z: f64) -> f64 {
    -((1.0 - alpha_z) * p.max(PROB_FLOOR).ln() + alpha_z * (1.0 - p).max(PROB_FLOOR).ln())
}

/// Loss without gradients, used by training diagnostics and the
/// finite-difference checks. Flags come from the items.
pub fn batch_loss<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    batch: &TrainBatch,
) -> Result<f64> {
    match batch {
        TrainBatch::Sft(items) => {
            let total: usize = items.iter().map(|it| it.response.len()).sum();
            if total == 0 {
                return Err(Error::invalid_input("batch", "no response tokens"));
            }
            let mut loss = 0.0;
            for it in items {
                check_prompt_response(&it.prompt, &it.response)?;
                let mut full = it.prompt.clone();
                full.extend_from_slice(&it.response);
                let pass = forward(config, params, &full)?;
                loss -= logp_from_pass(&pass, it.prompt.len(), &it.response)?;
            }
            Ok(loss / total as f64)
        }
        TrainBatch::Preference(pb) => {
            if pb.items.is_empty() {
                return Err(Error::invalid_input("batch", "empty preference batch"));
            }
            let mut loss = 0.0;
            for it in &pb.items {
                let lp_c = sequence_logprob(config, params, &it.prompt, &it.chosen)?;
                let lp_r = sequence_logprob(config, params, &it.prompt, &it.rejected)?;
                let margin =
                    pb.beta * ((lp_c - it.ref_logp_chosen) - (lp_r - it.ref_logp_rejected));
                let p = crate::pref::sigmoid(margin);
                let az = pb.alpha * if it.flag { 1.0 } else { 0.0 };
                loss += refined_loss_terms(p, az);
            }
            Ok(loss / pb.items.len() as f64)
        }
    }
}

/// Cross-entropy loss and gradients over a supervised batch. Returns the
/// mean loss per response token.
pub fn sft_loss_and_grads<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    items: &[SftExample],
) -> Result<(f64, GradStore<F>)> {
    let total: usize = items.iter().map(|it| it.response.len()).sum();
    if total == 0 {
        return Err(Error::invalid_input("batch", "no response tokens"));
    }
    let mut grads = GradStore::zeros_like(params);
    let inv_total = F::from_f64(1.0 / total as f64);
    let mut loss = 0.0;
    for it in items {
        check_prompt_response(&it.prompt, &it.response)?;
        let mut full = it.prompt.clone();
        full.extend_from_slice(&it.response);
        let pass = forward(config, params, &full)?;
        let vs = pass.vocab_size();
        let mut dlogits = vec![F::zero(); pass.len() * vs];
        for (j, &tok) in it.response.iter().enumerate() {
            let row_idx = it.prompt.len() - 1 + j;
            let row = pass.logits_row(row_idx);
            loss -= row_logp(row, tok)?.to_f64s();
            let probs = row_probs(row);
            let drow = &mut dlogits[row_idx * vs..(row_idx + 1) * vs];
            for (k, &p) in probs.iter().enumerate() {
                drow[k] = p * inv_total;
            }
            drow[tok as usize] -= inv_total;
        }
        crate::lm::model::backward(config, params, &pass, &dlogits, &mut grads);
    }
    Ok((loss / total as f64, grads))
}

/// Refined preference loss and gradients over a batch. When a `flag_hook` is
/// given it decides each item's flag from the live forward passes; otherwise
/// the stored item flags apply. Returns the mean loss and per-item stats.
pub fn preference_loss_and_grads<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    batch: &PreferenceBatch,
    mut flag_hook: Option<FlagHook<'_, F>>,
) -> Result<(f64, GradStore<F>, Vec<PrefStepStat>)> {
    if batch.items.is_empty() {
        return Err(Error::invalid_input("batch", "empty preference batch"));
    }
    if !(0.0..0.5).contains(&batch.alpha) {
        return Err(Error::Config(format!(
            "preference batch alpha must lie in [0, 0.5), got {}",
            batch.alpha
        )));
    }
    let mut grads = GradStore::zeros_like(params);
    let b = batch.items.len() as f64;
    let mut loss = 0.0;
    let mut stats = Vec::with_capacity(batch.items.len());

    for (index, it) in batch.items.iter().enumerate() {
        check_prompt_response(&it.prompt, &it.chosen)?;
        check_prompt_response(&it.prompt, &it.rejected)?;
        let mut full_c = it.prompt.clone();
        full_c.extend_from_slice(&it.chosen);
        let mut full_r = it.prompt.clone();
        full_r.extend_from_slice(&it.rejected);
        let pass_c = forward(config, params, &full_c)?;
        let pass_r = forward(config, params, &full_r)?;
        let lp_c = logp_from_pass(&pass_c, it.prompt.len(), &it.chosen)?;
        let lp_r = logp_from_pass(&pass_r, it.prompt.len(), &it.rejected)?;
        let margin = batch.beta * ((lp_c - it.ref_logp_chosen) - (lp_r - it.ref_logp_rejected));
        let p = crate::pref::sigmoid(margin);

        let flag = match flag_hook.as_mut() {
            Some(hook) => hook(&PrefItemView {
                index,
                item: it,
                chosen_pass: &pass_c,
                rejected_pass: &pass_r,
                p_coupled: p,
            }),
            None => it.flag,
        };
        let az = batch.alpha * if flag { 1.0 } else { 0.0 };
        loss += refined_loss_terms(p, az);

        // dL/dmargin of the smoothed loss, with z fixed.
        let dl_dm = (1.0 - az) * (p - 1.0) + az * p;
        let g_c = F::from_f64(dl_dm * batch.beta / b);
        let g_r = F::from_f64(-dl_dm * batch.beta / b);
        for (pass, response, g) in [
            (&pass_c, &it.chosen, g_c),
            (&pass_r, &it.rejected, g_r),
        ] {
            let vs = pass.vocab_size();
            let mut dlogits = vec![F::zero(); pass.len() * vs];
            for (j, &tok) in response.iter().enumerate() {
                let row_idx = it.prompt.len() - 1 + j;
                let probs = row_probs(pass.logits_row(row_idx));
                let drow = &mut dlogits[row_idx * vs..(row_idx + 1) * vs];
                for (k, &pk) in probs.iter().enumerate() {
                    drow[k] = -g * pk;
                }
                drow[tok as usize] += g;
            }
            crate::lm::model::backward(config, params, pass, &dlogits, &mut grads);
        }
        stats.push(PrefStepStat { p, flag });
    }

    Ok((loss / b, grads, stats))
}
