//! Data expansion: sampling response pairs and labeling them, either with
//! the model's own judgment or with the oracle (seed construction).

use crate::dataset::{LabelSource, PreferenceRecord};
use crate::error::{Error, Result};
use crate::lm::{
    sample_response, sequence_logprob, GenerationConfig, ModelConfig, ParameterStore, Vocabulary,
};
use crate::oracle::{oracle_prefer, text_of, OraclePreference, TaskSpec};
use crate::pref::{judge, judge_with_length_penalty, BetaParam, LogRatioPair, Winner};
use crate::seeding::{derive_seed, stage};

/// Sampling knobs of a data-expansion pass; per-prompt RNG streams are
/// derived from the run seed, so the `rng_seed` of the embedded generation
/// config is ignored.
#[derive(Debug, Clone, Copy)]
pub struct ExpandConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub beta: f64,
    /// Per-token reward penalty; zero disables it.
    pub length_penalty: f64,
    /// Sampling attempts per prompt when building seed pairs; a sharp
    /// initial model needs several draws to produce a non-gold response.
    pub seed_attempts: u64,
    pub run_seed: u64,
}

/// Samples two responses for one prompt with independent derived streams.
fn sample_pair(
    model: &ModelConfig,
    vocab: &Vocabulary,
    params: &ParameterStore<f32>,
    prompt_tokens: &[u32],
    temperature: f64,
    max_new_tokens: usize,
    seed_parts: &[u64],
) -> Result<(String, String)> {
    let gen = |which: u64| -> Result<String> {
        let mut parts = seed_parts.to_vec();
        parts.push(which);
        let gen_cfg = GenerationConfig {
            temperature,
            max_new_tokens,
            rng_seed: derive_seed(&parts),
        };
        let toks = sample_response(model, params, vocab.eos(), prompt_tokens, &gen_cfg)?;
        Ok(text_of(vocab, &toks))
    };
    Ok((gen(1)?, gen(2)?))
}

/// Builds the seed preference set. Each record pairs the gold demonstration
/// (the stand-in for a strong annotated response) against a response sampled
/// from the initial model, with the oracle confirming the gold label. A
/// sample that reproduces the gold exactly is resampled once, then the
/// prompt is dropped. Stops once `target` records exist.
pub fn build_seed_dataset(
    model: &ModelConfig,
    vocab: &Vocabulary,
    init_params: &ParameterStore<f32>,
    task: &TaskSpec,
    prompts: &[String],
    target: usize,
    cfg: &ExpandConfig,
) -> Result<Vec<PreferenceRecord>> {
    let mut records = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        if records.len() == target {
            break;
        }
        let gold = task.gold(prompt)?;
        let prompt_tokens = vocab.encode_prompt(prompt)?;
        for attempt in 0..cfg.seed_attempts.max(1) {
            let seed = derive_seed(&[cfg.run_seed, stage::SEED_PAIRS, i as u64, attempt]);
            let gen_cfg = GenerationConfig {
                temperature: cfg.temperature,
                max_new_tokens: cfg.max_new_tokens,
                rng_seed: seed,
            };
            let toks = sample_response(model, init_params, vocab.eos(), &prompt_tokens, &gen_cfg)?;
            let sampled = text_of(vocab, &toks);
            if sampled.is_empty() || sampled == gold {
                continue;
            }
            debug_assert_eq!(
                oracle_prefer(task, prompt, &gold, &sampled)?,
                OraclePreference::First
            );
            records.push(PreferenceRecord {
                prompt: prompt.clone(),
                chosen: gold,
                rejected: sampled,
                label_source: LabelSource::SeedGold,
                confidence: None,
                iteration: 0,
            });
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::Pipeline(
            "seed construction produced zero records".into(),
        ));
    }
    if records.len() < target {
        return Err(Error::Pipeline(format!(
            "seed construction produced {} records, {} requested; provision more seed prompts",
            records.len(),
            target
        )));
    }
    Ok(records)
}

/// One improvement iteration's data expansion: two responses per prompt from
/// the current policy, judged by the implicit reward of (policy, initial
/// model). Identical or empty pairs are resampled once, then the prompt is
/// dropped.
pub fn expand_iteration(
    model: &ModelConfig,
    vocab: &Vocabulary,
    policy: &ParameterStore<f32>,
    init_params: &ParameterStore<f32>,
    prompts: &[String],
    iteration: u32,
    cfg: &ExpandConfig,
) -> Result<(Vec<PreferenceRecord>, usize)> {
    let beta = BetaParam::new(cfg.beta)?;
    let mut records = Vec::new();
    let mut dropped = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let prompt_tokens = vocab.encode_prompt(prompt)?;
        let mut emitted = false;
        for attempt in 0..2u64 {
            let (y1, y2) = sample_pair(
                model,
                vocab,
                policy,
                &prompt_tokens,
                cfg.temperature,
                cfg.max_new_tokens,
                &[cfg.run_seed, stage::EXPAND, iteration as u64, i as u64, attempt],
            )?;
            if y1.is_empty() || y2.is_empty() || y1 == y2 {
                continue;
            }
            let toks1 = vocab.encode_response(&y1)?;
            let toks2 = vocab.encode_response(&y2)?;
            let pair1 = LogRatioPair::new(
                sequence_logprob(model, policy, &prompt_tokens, &toks1)?,
                sequence_logprob(model, init_params, &prompt_tokens, &toks1)?,
            )?;
            let pair2 = LogRatioPair::new(
                sequence_logprob(model, policy, &prompt_tokens, &toks2)?,
                sequence_logprob(model, init_params, &prompt_tokens, &toks2)?,
            )?;
            let (winner, confidence) = if cfg.length_penalty > 0.0 {
                judge_with_length_penalty(
                    &pair1,
                    &pair2,
                    beta,
                    cfg.length_penalty,
                    y1.chars().count(),
                    y2.chars().count(),
                )
            } else {
                judge(&pair1, &pair2, beta)
            };
            let (chosen, rejected) = match winner {
                Winner::First => (y1, y2),
                Winner::Second => (y2, y1),
            };
            records.push(PreferenceRecord {
                prompt: prompt.clone(),
                chosen,
                rejected,
                label_source: LabelSource::SelfJudged,
                confidence: Some(confidence.value()),
                iteration,
            });
            emitted = true;
            break;
        }
        if !emitted {
            dropped += 1;
        }
    }
    if records.is_empty() {
        return Err(Error::Pipeline(format!(
            "iteration {iteration}: every prompt produced a degenerate pair"
        )));
    }
    Ok((records, dropped))
}
