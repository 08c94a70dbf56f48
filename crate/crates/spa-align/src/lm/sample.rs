//! Temperature sampling with a per-call RNG stream.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::model::{forward_step, KvCache, ModelConfig};
use crate::lm::tensor::{ParameterStore, Scalar};
use crate::seeding::rng_for;

/// Sampling controls. Generation halts at EOS or `max_new_tokens`, whichever
/// comes first; the RNG stream is fully determined by `rng_seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "generation.temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config(
                "generation.max_new_tokens must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Autoregressive sampling from softmax(logits / temperature). Returns the
/// generated tokens with EOS stripped. Generation also stops when the
/// context window fills.
pub fn sample_response<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    eos: u32,
    prompt: &[u32],
    gen: &GenerationConfig,
) -> Result<Vec<u32>> {
    gen.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt", "must be non-empty"));
    }
    let mut rng = rng_for(&[gen.rng_seed]);
    let mut kv = KvCache::new(config);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = forward_step(config, params, tok, &mut kv)?;
    }

    // Leave room for the trailing EOS so every response stays scorable
    // within the context window.
    let room = config.context_length.saturating_sub(prompt.len() + 1);
    let mut out = Vec::new();
    for _ in 0..gen.max_new_tokens.min(room) {
        let next = draw(&logits, gen.temperature, rng.gen::<f64>());
        if next == eos {
            break;
        }
        out.push(next);
        logits = forward_step(config, params, next, &mut kv)?;
    }
    Ok(out)
}

/// Inverse-CDF draw over softmax(logits / temperature), computed in f64.
fn draw<F: Scalar>(logits: &[F], temperature: f64, unit: f64) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|&x| x.to_f64s() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut dart = unit * total;
    for (i, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}
