//! Decoupled-weight-decay adaptive-moment optimizer with a warm-up/cosine
//! learning-rate schedule, plus the training-step entry point.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lm::loss::{
    batch_loss, preference_loss_and_grads, sft_loss_and_grads, FlagHook, PrefStepStat, TrainBatch,
};
use crate::lm::model::ModelConfig;
use crate::lm::tensor::{GradStore, ParameterStore, Scalar, Tensor};

/// Optimizer and schedule hyper-parameters for one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Fraction of `total_steps` spent in linear warm-up.
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_fraction,
            total_steps,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Linear warm-up to `base_lr`, then cosine decay to zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.warmup_fraction * self.total_steps as f64).floor() as u64;
        if step < warmup {
            return self.base_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = self.total_steps.saturating_sub(warmup);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - warmup) as f64 / span as f64;
        let progress = progress.min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<F> {
    pub config: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &ParameterStore<F>, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &ParameterStore<F>| {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Ok(Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW update. Returns the learning rate used.
    pub fn apply(&mut self, params: &mut ParameterStore<F>, grads: &GradStore<F>) -> f64 {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.config.beta1.powi(t));
        let bias2 = F::from_f64(1.0 - self.config.beta2.powi(t));
        let eps = F::from_f64(self.config.eps);
        let lr_f = F::from_f64(lr);
        let wd = F::from_f64(self.config.weight_decay);
        for (name, tensor) in params.iter_mut() {
            let g = grads.get(name).data();
            let m = self.m.get_mut(name).expect("moment matches params").data_mut();
            let v = self.v.get_mut(name).expect("moment matches params").data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                let w = &mut tensor.data_mut()[i];
                *w = *w - lr_f * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        lr
    }
}

/// What one training step reports.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    /// Per-item confidence and flag, preference batches only.
    pub pref_stats: Vec<PrefStepStat>,
}

/// One optimization step of the selected loss over one batch. Gradients and
/// the updated parameters are checked for non-finite values and abort with
/// the offending tensor named.
pub fn train_step<F: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<F>,
    opt: &mut OptimState<F>,
    batch: &TrainBatch,
) -> Result<StepOutput> {
    train_step_with_hook(config, params, opt, batch, None)
}

/// [`train_step`] with a live flag hook for preference batches.
pub fn train_step_with_hook<F: Scalar>(
    config: &ModelConfig,
    params: &mut ParameterStore<F>,
    opt: &mut OptimState<F>,
    batch: &TrainBatch,
    hook: Option<FlagHook<'_, F>>,
) -> Result<StepOutput> {
    let step = opt.step;
    let (loss, grads, pref_stats) = match batch {
        TrainBatch::Sft(items) => {
            let (loss, grads) = sft_loss_and_grads(config, params, items)?;
            (loss, grads, Vec::new())
        }
        TrainBatch::Preference(pb) => preference_loss_and_grads(config, params, pb, hook)?,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".to_string(),
            what: "loss".to_string(),
            step,
        });
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            what: "gradient".to_string(),
            step,
        });
    }
    let lr = opt.apply(params, &grads);
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            what: "parameter".to_string(),
            step,
        });
    }
    Ok(StepOutput {
        loss,
        lr,
        pref_stats,
    })
}

/// Diagnostic loss evaluation without touching the parameters.
pub fn eval_loss<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    batch: &TrainBatch,
) -> Result<f64> {
    batch_loss(config, params, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::loss::SftExample;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig::new(1.0, 0.1, 100);
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        // Half way through the cosine span.
        assert!((cfg.lr_at(55) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(99) < 0.01);
        for s in 11..100 {
            assert!(cfg.lr_at(s) < cfg.lr_at(s - 1));
        }
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let cfg = OptimConfig::new(0.5, 0.0, 10);
        assert!((cfg.lr_at(0) - 0.5).abs() < 1e-12);
    }

    fn sft_batch() -> TrainBatch {
        TrainBatch::Sft(vec![
            SftExample {
                prompt: vec![0, 3],
                response: vec![4, 1],
            },
            SftExample {
                prompt: vec![0, 4],
                response: vec![3, 3, 1],
            },
        ])
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            context_length: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            tie_output: false,
        }
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let cfg = tiny_config();
        let mut params = cfg.init_params::<f32>(21).unwrap();
        let snapshot = params.clone();
        let mut opt = OptimState::new(&params, OptimConfig::new(0.0, 0.0, 4)).unwrap();
        train_step(&cfg, &mut params, &mut opt, &sft_batch()).unwrap();
        assert!(params.bit_eq(&snapshot));
        assert_eq!(opt.step(), 1);
    }

    #[test]
    fn sft_steps_reduce_loss() {
        let cfg = tiny_config();
        let mut params = cfg.init_params::<f32>(21).unwrap();
        let batch = sft_batch();
        let before = eval_loss(&cfg, &params, &batch).unwrap();
        let mut opt = OptimState::new(&params, OptimConfig::new(3e-2, 0.0, 50)).unwrap();
        for _ in 0..50 {
            train_step(&cfg, &mut params, &mut opt, &batch).unwrap();
        }
        let after = eval_loss(&cfg, &params, &batch).unwrap();
        assert!(
            after < before * 0.5,
            "loss did not drop: {before} -> {after}"
        );
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient the update must still shrink weights by
        // lr * wd * w, independent of the moments.
        let cfg = tiny_config();
        let mut params = cfg.init_params::<f64>(3).unwrap();
        let w0 = params.get("tok_emb").data()[0];
        let mut oc = OptimConfig::new(0.1, 0.0, 1);
        oc.weight_decay = 0.5;
        let mut opt = OptimState::new(&params, oc).unwrap();
        let grads = GradStore::zeros_like(&params);
        opt.apply(&mut params, &grads);
        let w1 = params.get("tok_emb").data()[0];
        assert!((w1 - w0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let cfg = tiny_config();
        let mut params = cfg.init_params::<f32>(21).unwrap();
        for w in params.get_mut("head.w").data_mut() {
            *w = f32::MAX;
        }
        let mut opt = OptimState::new(&params, OptimConfig::new(1e-3, 0.0, 4)).unwrap();
        let err = train_step(&cfg, &mut params, &mut opt, &sft_batch()).unwrap_err();
        match err {
            Error::NonFinite { what, .. } => {
                assert!(what == "loss" || what == "gradient");
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
