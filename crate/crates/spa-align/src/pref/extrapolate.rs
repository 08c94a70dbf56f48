//! Logit extrapolation and the de-coupled confidence it feeds.
//!
//! The extrapolated logits `(1 + lambda) * h_policy - lambda * h_ref`
//! approximate a model trained with a `(1 + lambda)` times smaller KL term.
//! Reading the realized tokens out of a log-softmax over those logits gives
//! the sequence log-probability of that stronger model, which replaces the
//! policy side of the preference probability when flagging noisy labels.

use crate::error::{Error, Result};
use crate::pref::{preference_prob, BetaParam, Confidence, LogRatioPair};

/// Elementwise `(1 + lambda) * h_policy - lambda * h_ref`.
///
/// No normalization happens here; consumers re-apply log-softmax.
pub fn extrapolate_logits(h_policy: &[f64], h_ref: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if h_policy.len() != h_ref.len() {
        return Err(Error::Shape(format!(
            "logit length mismatch: policy {} vs reference {}",
            h_policy.len(),
            h_ref.len()
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::invalid_input(
            "lambda",
            format!("must be finite and >= 0, got {lambda}"),
        ));
    }
    Ok(h_policy
        .iter()
        .zip(h_ref)
        .map(|(&p, &r)| (1.0 + lambda) * p - lambda * r)
        .collect())
}

/// Max-shifted log-softmax over one logits row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

fn logp_of_token(logits: &[f64], token: u32) -> Result<f64> {
    let idx = token as usize;
    if idx >= logits.len() {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab_size: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits[idx] - lse)
}

/// Per-position logits and realized tokens of one response. `policy` and
/// `reference` hold one row per response token, in position order.
#[derive(Debug, Clone, Copy)]
pub struct ResponseLogits<'a> {
    pub policy: &'a [Vec<f64>],
    pub reference: &'a [Vec<f64>],
    pub tokens: &'a [u32],
}

impl ResponseLogits<'_> {
    fn validate(&self, label: &str) -> Result<()> {
        if self.policy.len() != self.tokens.len() || self.reference.len() != self.tokens.len() {
            return Err(Error::Shape(format!(
                "{label}: {} tokens but {} policy rows and {} reference rows",
                self.tokens.len(),
                self.policy.len(),
                self.reference.len()
            )));
        }
        for (pos, (p, r)) in self.policy.iter().zip(self.reference).enumerate() {
            if p.len() != r.len() {
                return Err(Error::Shape(format!(
                    "{label}: vocabulary mismatch at position {pos}: policy {} vs reference {}",
                    p.len(),
                    r.len()
                )));
            }
        }
        Ok(())
    }

    /// (sum of extrapolated log-probs, sum of reference log-probs) over the
    /// realized tokens.
    fn logp_sums(&self, lambda: f64) -> Result<(f64, f64)> {
        let mut lp_tilde = 0.0;
        let mut lp_ref = 0.0;
        for ((p_row, r_row), &tok) in self.policy.iter().zip(self.reference).zip(self.tokens) {
            let h_tilde = extrapolate_logits(p_row, r_row, lambda)?;
            lp_tilde += logp_of_token(&h_tilde, tok)?;
            lp_ref += logp_of_token(r_row, tok)?;
        }
        Ok((lp_tilde, lp_ref))
    }
}

/// Preference confidence of the extrapolated model for the currently-labeled
/// winner: the policy side of each log-ratio is the extrapolated sequence
/// log-probability, the reference side is the unmodified reference model.
///
/// With `lambda = 0` this is exactly the coupled confidence computed from the
/// same logits.
pub fn decoupled_confidence(
    winner: ResponseLogits<'_>,
    loser: ResponseLogits<'_>,
    lambda: f64,
    beta: BetaParam,
) -> Result<Confidence> {
    winner.validate("winner")?;
    loser.validate("loser")?;
    let (w_tilde, w_ref) = winner.logp_sums(lambda)?;
    let (l_tilde, l_ref) = loser.logp_sums(lambda)?;
    let w_pair = LogRatioPair::new(w_tilde, w_ref)?;
    let l_pair = LogRatioPair::new(l_tilde, l_ref)?;
    Ok(preference_prob(&w_pair, &l_pair, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_identity() {
        let h = vec![1.5, -0.25, 0.0, 7.0];
        let r = vec![9.0, -3.0, 0.5, -1.0];
        let out = extrapolate_logits(&h, &r, 0.0).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn extrapolation_hand_value() {
        let out = extrapolate_logits(&[2.0, 0.0], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(out, vec![2.5, 0.0]);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(extrapolate_logits(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = ls.iter().map(|&x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn worked_two_token_example() {
        // One position, vocabulary of two. Winner realizes token 0, loser
        // token 1, lambda 1, beta 0.1. Extrapolated logits are [2, 0].
        let policy = vec![vec![1.0, 0.0]];
        let reference = vec![vec![0.0, 0.0]];
        let winner = ResponseLogits {
            policy: &policy,
            reference: &reference,
            tokens: &[0],
        };
        let loser = ResponseLogits {
            policy: &policy,
            reference: &reference,
            tokens: &[1],
        };
        let beta = BetaParam::new(0.1).unwrap();
        let p = decoupled_confidence(winner, loser, 1.0, beta).unwrap().value();
        assert!((p - 0.549_833_997_312_477_8).abs() < 1e-12, "got {p}");

        // Spot-check the intermediate log-probabilities too.
        let h_tilde = extrapolate_logits(&policy[0], &reference[0], 1.0).unwrap();
        let ls = log_softmax(&h_tilde);
        assert!((ls[0] - (-0.126_928_011_042_972_8)).abs() < 1e-12);
        assert!((ls[1] - (-2.126_928_011_042_972_7)).abs() < 1e-12);
    }

    #[test]
    fn token_out_of_vocab_errors() {
        let policy = vec![vec![1.0, 0.0]];
        let reference = vec![vec![0.0, 0.0]];
        let bad = ResponseLogits {
            policy: &policy,
            reference: &reference,
            tokens: &[2],
        };
        let beta = BetaParam::new(0.1).unwrap();
        assert!(decoupled_confidence(bad, bad, 0.5, beta).is_err());
    }
}
