//! Scalar preference algebra.
//!
//! Everything here is a pure function of summed sequence log-probabilities:
//! implicit rewards, preference probabilities, direct judgment, the DPO and
//! label-smoothed losses, confidence-based noise flagging, and logit
//! extrapolation. No model code lives in this module; callers hand in
//! [`LogRatioPair`]s (or raw logits rows for the de-coupled path) and get
//! scalars back.
//!
//! All math is `f64`. The identities the rest of the crate leans on:
//!
//! * `preference_prob(a, b) + preference_prob(b, a) == 1`
//! * `refined_loss(p, z = 0, alpha) == dpo_loss(p)` and likewise for `alpha = 0`
//! * de-coupled confidences with `lambda = 0` reduce to the coupled ones

mod extrapolate;
mod flagging;

pub use extrapolate::{decoupled_confidence, extrapolate_logits, log_softmax, ResponseLogits};
pub use flagging::{flags_below, percentile_tau, SmaWindow};

use crate::error::{Error, Result};

/// Floor applied to every probability before it enters a logarithm, so a
/// saturated pair yields a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-response summed log-probabilities under the policy and the reference.
///
/// Both values are sums over response tokens only; prompt tokens never
/// contribute. Construction rejects non-finite values, so downstream algebra
/// can assume finite inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRatioPair {
    logp_policy: f64,
    logp_ref: f64,
}

impl LogRatioPair {
    pub fn new(logp_policy: f64, logp_ref: f64) -> Result<Self> {
        if !logp_policy.is_finite() {
            return Err(Error::invalid_input(
                "logp_policy",
                format!("must be finite, got {logp_policy}"),
            ));
        }
        if !logp_ref.is_finite() {
            return Err(Error::invalid_input(
                "logp_ref",
                format!("must be finite, got {logp_ref}"),
            ));
        }
        Ok(Self {
            logp_policy,
            logp_ref,
        })
    }

    pub fn logp_policy(&self) -> f64 {
        self.logp_policy
    }

    pub fn logp_ref(&self) -> f64 {
        self.logp_ref
    }

    /// log pi_policy(y|x) - log pi_ref(y|x).
    pub fn log_ratio(&self) -> f64 {
        self.logp_policy - self.logp_ref
    }
}

/// The preference-strength hyper-parameter; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParam(f64);

impl BetaParam {
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid_input(
                "beta",
                format!("must be finite and > 0, got {beta}"),
            ));
        }
        Ok(Self(beta))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// A preference probability assigned to the currently-labeled winner.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid_input(
                "confidence",
                format!("must lie in [0, 1], got {p}"),
            ));
        }
        Ok(Self(p))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Binary noise flag: 1 means "treat this label as suspect".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseFlag(pub bool);

impl NoiseFlag {
    pub fn as_f64(&self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Which response of a pair the judge prefers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    First,
    Second,
}

impl Winner {
    /// 1-based index, matching (y1, y2) order.
    pub fn index(&self) -> usize {
        match self {
            Winner::First => 1,
            Winner::Second => 2,
        }
    }
}

/// Hyper-parameters for label refinement and noise flagging.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefinementConfig {
    /// Label-smoothing weight; must stay below 0.5 so the smoothed target
    /// never inverts the label.
    pub alpha: f64,
    /// Percentile of least-confident samples to flag, in (0, 100).
    pub k_percent: f64,
    /// Sliding-window length for the streaming threshold.
    pub sma_window: usize,
    /// Fraction of training steps during which flags are forced to zero.
    pub denoise_warmup_fraction: f64,
    /// Extrapolation strength per iteration; non-increasing.
    pub lambda_schedule: Vec<f64>,
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "refinement.alpha must lie in [0, 0.5), got {}",
                self.alpha
            )));
        }
        if !(self.k_percent > 0.0 && self.k_percent < 100.0) {
            return Err(Error::Config(format!(
                "refinement.k_percent must lie in (0, 100), got {}",
                self.k_percent
            )));
        }
        if self.sma_window == 0 {
            return Err(Error::Config(
                "refinement.sma_window must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.denoise_warmup_fraction) {
            return Err(Error::Config(format!(
                "refinement.denoise_warmup_fraction must lie in [0, 1), got {}",
                self.denoise_warmup_fraction
            )));
        }
        for (i, lam) in self.lambda_schedule.iter().enumerate() {
            if !lam.is_finite() || *lam < 0.0 {
                return Err(Error::Config(format!(
                    "refinement.lambda_schedule[{i}] must be finite and >= 0, got {lam}"
                )));
            }
            if i > 0 && *lam > self.lambda_schedule[i - 1] {
                return Err(Error::Config(
                    "refinement.lambda_schedule must be non-increasing".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Lambda for 1-based iteration `t`. Beyond the listed schedule the last
    /// entry keeps halving.
    pub fn lambda_for_iteration(&self, t: usize) -> f64 {
        assert!(t >= 1, "iterations are 1-based");
        if self.lambda_schedule.is_empty() {
            return 0.0;
        }
        let n = self.lambda_schedule.len();
        if t <= n {
            self.lambda_schedule[t - 1]
        } else {
            self.lambda_schedule[n - 1] * 0.5_f64.powi((t - n) as i32)
        }
    }
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k_percent: 10.0,
            sma_window: 50,
            denoise_warmup_fraction: 0.2,
            lambda_schedule: vec![0.5, 0.25, 0.125],
        }
    }
}

/// Numerically stable logistic function; no overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The implicit reward of one response: beta * (logp_policy - logp_ref).
/// The partition term cancels in every comparison and is never computed.
pub fn implicit_reward(pair: &LogRatioPair, beta: BetaParam) -> f64 {
    beta.value() * pair.log_ratio()
}

/// Reward margin between two responses:
/// beta * [(a.logp_policy - a.logp_ref) - (b.logp_policy - b.logp_ref)].
pub fn implicit_reward_margin(a: &LogRatioPair, b: &LogRatioPair, beta: BetaParam) -> f64 {
    beta.value() * (a.log_ratio() - b.log_ratio())
}

/// Probability that `w` is preferred over `l` under the implicit reward.
pub fn preference_prob(w: &LogRatioPair, l: &LogRatioPair, beta: BetaParam) -> Confidence {
    Confidence(sigmoid(implicit_reward_margin(w, l, beta)))
}

/// Directly judges a response pair: the first response wins iff its
/// preference probability strictly exceeds 0.5; ties go to the second.
/// The confidence is the winner's own preference probability, recomputed in
/// winner-first order so it reproduces bit-for-bit from the stored pair.
pub fn judge(y1: &LogRatioPair, y2: &LogRatioPair, beta: BetaParam) -> (Winner, Confidence) {
    let p = preference_prob(y1, y2, beta).value();
    if p > 0.5 {
        (Winner::First, Confidence(p))
    } else {
        (Winner::Second, preference_prob(y2, y1, beta))
    }
}

/// Judgment over length-penalized rewards: each response's implicit reward is
/// reduced by `alpha_len * len` before the comparison.
pub fn judge_with_length_penalty(
    y1: &LogRatioPair,
    y2: &LogRatioPair,
    beta: BetaParam,
    alpha_len: f64,
    len1: usize,
    len2: usize,
) -> (Winner, Confidence) {
    let r1 = length_penalized_reward(implicit_reward(y1, beta), alpha_len, len1);
    let r2 = length_penalized_reward(implicit_reward(y2, beta), alpha_len, len2);
    let p = sigmoid(r1 - r2);
    if p > 0.5 {
        (Winner::First, Confidence(p))
    } else {
        (Winner::Second, Confidence(sigmoid(r2 - r1)))
    }
}

/// Plain preference loss: -ln p, with p floored at [`PROB_FLOOR`].
pub fn dpo_loss(p: Confidence) -> f64 {
    -p.value().max(PROB_FLOOR).ln()
}

/// Label-smoothed refined loss:
/// -[(1 - alpha*z) * ln(p) + alpha*z * ln(1 - p)].
///
/// With the flag off (or alpha = 0) this reduces exactly to [`dpo_loss`].
pub fn refined_loss(p_w: Confidence, z: NoiseFlag, alpha: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::Config(format!(
            "refined_loss alpha must lie in [0, 0.5), got {alpha}"
        )));
    }
    let p = p_w.value();
    let az = alpha * z.as_f64();
    Ok(-((1.0 - az) * p.max(PROB_FLOOR).ln() + az * (1.0 - p).max(PROB_FLOOR).ln()))
}

/// Heuristic verbosity correction: subtracts `alpha_len * response_len`
/// from a reward before judgment.
pub fn length_penalized_reward(r: f64, alpha_len: f64, response_len: usize) -> f64 {
    r - alpha_len * response_len as f64
}
