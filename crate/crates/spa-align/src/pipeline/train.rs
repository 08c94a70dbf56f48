//! Training stages: supervised fine-tuning and preference optimization with
//! live noise flagging.

use crate::error::{Error, Result};
use crate::lm::{
    forward, response_rows_f64, sequence_logprob, train_step_with_hook, ModelConfig, OptimConfig,
    OptimState, ParameterStore, PrefItemView, PreferenceBatch, PreferenceItem, SftExample,
    TrainBatch, Vocabulary,
};
use crate::oracle::Corpus;
use crate::pref::{
    decoupled_confidence, percentile_tau, preference_prob, BetaParam, Confidence, LogRatioPair,
    ResponseLogits, SmaWindow,
};
use crate::seeding::{rng_for, stage};

/// How the flagging threshold is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    /// Streaming percentile over a sliding window of recent confidences.
    Sma,
    /// Percentile over a fresh confidence snapshot of the whole dataset,
    /// recomputed at each epoch start.
    Exact,
}

/// Which model's log-probabilities sit in the denominator of the de-coupled
/// confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagReference {
    /// The iteration's frozen training reference (the previous policy).
    TrainingRef,
    /// The initial supervised model.
    InitModel,
}

/// Optimizer knobs shared by the training stages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainKnobs {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

impl TrainKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    fn optim(&self, total_steps: u64) -> OptimConfig {
        let mut oc = OptimConfig::new(self.lr, self.warmup_fraction, total_steps.max(1));
        oc.weight_decay = self.weight_decay;
        oc
    }
}

/// One optimizer step as traced.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub batch: usize,
    /// Flags that reached the loss in this step (post warm-up masking).
    pub flags_applied: usize,
}

/// Everything a training stage reports besides the parameters.
#[derive(Debug, Clone, Default)]
pub struct StageTrace {
    pub steps: Vec<StepTrace>,
    /// Raw detector decisions, before warm-up masking.
    pub detector_flags: usize,
    pub detector_seen: usize,
    pub applied_flags: usize,
    pub mean_confidence: f64,
    pub final_loss: f64,
}

impl StageTrace {
    pub fn total_steps(&self) -> u64 {
        self.steps.len() as u64
    }

    pub fn detector_flag_rate(&self) -> Option<f64> {
        (self.detector_seen > 0).then(|| self.detector_flags as f64 / self.detector_seen as f64)
    }
}

/// Supervised fine-tuning over gold demonstrations; response-only loss.
pub fn train_sft(
    model: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &Corpus,
    epochs: usize,
    knobs: &TrainKnobs,
    run_seed: u64,
    init: ParameterStore<f32>,
) -> Result<(ParameterStore<f32>, StageTrace)> {
    knobs.validate()?;
    if corpus.is_empty() {
        return Err(Error::Pipeline("sft corpus is empty".into()));
    }
    let examples: Vec<SftExample> = corpus
        .prompts
        .iter()
        .zip(&corpus.golds)
        .map(|(p, g)| {
            Ok(SftExample {
                prompt: vocab.encode_prompt(p)?,
                response: vocab.encode_response(g)?,
            })
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = examples.len().div_ceil(knobs.batch_size) as u64;
    let total_steps = steps_per_epoch * epochs as u64;
    let mut params = init;
    let mut opt = OptimState::new(&params, knobs.optim(total_steps))?;
    let mut trace = StageTrace::default();

    for epoch in 0..epochs {
        let order = shuffled_indices(examples.len(), &[run_seed, stage::SFT, epoch as u64]);
        for chunk in order.chunks(knobs.batch_size) {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let out = crate::lm::train_step(model, &mut params, &mut opt, &TrainBatch::Sft(batch))?;
            trace.steps.push(StepTrace {
                step: opt.step() - 1,
                loss: out.loss,
                lr: out.lr,
                batch: chunk.len(),
                flags_applied: 0,
            });
            trace.final_loss = out.loss;
        }
    }
    Ok((params, trace))
}

fn shuffled_indices(n: usize, seed_parts: &[u64]) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed_parts));
    order
}

/// A preference record prepared for training: tokenized, with frozen
/// reference quantities attached.
struct PreparedRecord {
    item: PreferenceItem,
    /// Denominator log-probabilities for the de-coupled confidence when the
    /// flag reference is the initial model.
    init_denoms: Option<(f64, f64)>,
}

/// Flag machinery for one training stage.
struct FlagEngine {
    lambda: f64,
    beta: BetaParam,
    k_percent: f64,
    tau_mode: TauMode,
    window: SmaWindow,
    /// Exact-mode snapshot: per-record flag decided at epoch start.
    snapshot: Vec<bool>,
    warmup_steps: u64,
}

impl FlagEngine {
    /// De-coupled confidence of one live item, using the policy logits from
    /// the training forward pass and the precomputed reference rows.
    fn confidence<F: crate::lm::Scalar>(
        &self,
        view: &PrefItemView<'_, F>,
        init_denoms: Option<(f64, f64)>,
    ) -> Result<f64> {
        let it = view.item;
        let plen = it.prompt.len();
        let rows_c = response_rows_f64(view.chosen_pass, plen, it.chosen.len());
        let rows_r = response_rows_f64(view.rejected_pass, plen, it.rejected.len());
        let winner = ResponseLogits {
            policy: &rows_c,
            reference: &it.ref_rows_chosen,
            tokens: &it.chosen,
        };
        let loser = ResponseLogits {
            policy: &rows_r,
            reference: &it.ref_rows_rejected,
            tokens: &it.rejected,
        };
        let p = match init_denoms {
            None => decoupled_confidence(winner, loser, self.lambda, self.beta)?.value(),
            Some((den_c, den_r)) => {
                let lt_c = extrapolated_sum(&rows_c, &it.ref_rows_chosen, &it.chosen, self.lambda)?;
                let lt_r =
                    extrapolated_sum(&rows_r, &it.ref_rows_rejected, &it.rejected, self.lambda)?;
                preference_prob(
                    &LogRatioPair::new(lt_c, den_c)?,
                    &LogRatioPair::new(lt_r, den_r)?,
                    self.beta,
                )
                .value()
            }
        };
        Ok(p)
    }
}

fn extrapolated_sum(
    policy_rows: &[Vec<f64>],
    ref_rows: &[Vec<f64>],
    tokens: &[u32],
    lambda: f64,
) -> Result<f64> {
    use crate::pref::{extrapolate_logits, log_softmax};
    let mut sum = 0.0;
    for ((p, r), &tok) in policy_rows.iter().zip(ref_rows).zip(tokens) {
        let h = extrapolate_logits(p, r, lambda)?;
        let ls = log_softmax(&h);
        sum += *ls.get(tok as usize).ok_or(Error::TokenOutOfRange {
            id: tok,
            vocab_size: ls.len(),
        })?;
    }
    Ok(sum)
}

/// Inputs of one preference-training stage.
pub struct PreferenceStage<'a> {
    pub records: &'a [crate::dataset::PreferenceRecord],
    pub beta: f64,
    /// Label-smoothing weight; zero runs plain preference optimization.
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub knobs: TrainKnobs,
    pub tau_mode: TauMode,
    pub k_percent: f64,
    pub sma_window: usize,
    pub denoise_warmup_fraction: f64,
    pub flag_reference: FlagReference,
    /// Initial model, needed only when `flag_reference` is `InitModel`.
    pub init_params: Option<&'a ParameterStore<f32>>,
    pub run_seed: u64,
    pub stage_tag: u64,
}

/// Trains a policy initialized from `start` against the frozen `reference`.
/// With `alpha = 0` this is exactly preference optimization; with
/// `alpha > 0` flags from the de-coupled detector smooth suspect labels
/// after the warm-up boundary.
pub fn train_preference(
    model: &ModelConfig,
    vocab: &Vocabulary,
    start: &ParameterStore<f32>,
    reference: &ParameterStore<f32>,
    stage_cfg: &PreferenceStage<'_>,
) -> Result<(ParameterStore<f32>, StageTrace)> {
    stage_cfg.knobs.validate()?;
    if stage_cfg.records.is_empty() {
        return Err(Error::Pipeline("preference stage got zero records".into()));
    }
    let denoise = stage_cfg.alpha > 0.0;
    let need_rows = denoise;

    // Tokenize once and precompute every frozen-reference quantity.
    let mut prepared = Vec::with_capacity(stage_cfg.records.len());
    for rec in stage_cfg.records {
        rec.validate()?;
        let prompt = vocab.encode_prompt(&rec.prompt)?;
        let chosen = vocab.encode_response(&rec.chosen)?;
        let rejected = vocab.encode_response(&rec.rejected)?;
        let mut full_c = prompt.clone();
        full_c.extend_from_slice(&chosen);
        let mut full_r = prompt.clone();
        full_r.extend_from_slice(&rejected);
        let pass_c = forward(model, reference, &full_c)?;
        let pass_r = forward(model, reference, &full_r)?;
        let ref_logp_chosen = crate::lm::logp_from_pass(&pass_c, prompt.len(), &chosen)?;
        let ref_logp_rejected = crate::lm::logp_from_pass(&pass_r, prompt.len(), &rejected)?;
        let (ref_rows_chosen, ref_rows_rejected) = if need_rows {
            (
                response_rows_f64(&pass_c, prompt.len(), chosen.len()),
                response_rows_f64(&pass_r, prompt.len(), rejected.len()),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let init_denoms = match (stage_cfg.flag_reference, denoise) {
            (FlagReference::InitModel, true) => {
                let init = stage_cfg.init_params.ok_or_else(|| {
                    Error::Config(
                        "flag_reference = init-model needs the initial model's parameters".into(),
                    )
                })?;
                Some((
                    sequence_logprob(model, init, &prompt, &chosen)?,
                    sequence_logprob(model, init, &prompt, &rejected)?,
                ))
            }
            _ => None,
        };
        prepared.push(PreparedRecord {
            item: PreferenceItem {
                prompt,
                chosen,
                rejected,
                ref_logp_chosen,
                ref_logp_rejected,
                ref_rows_chosen,
                ref_rows_rejected,
                flag: false,
            },
            init_denoms,
        });
    }

    let n = prepared.len();
    let steps_per_epoch = n.div_ceil(stage_cfg.knobs.batch_size) as u64;
    let total_steps = steps_per_epoch * stage_cfg.epochs as u64;
    let warmup_steps = (stage_cfg.denoise_warmup_fraction * total_steps as f64).floor() as u64;

    let mut params = start.clone();
    let mut opt = OptimState::new(&params, stage_cfg.knobs.optim(total_steps))?;
    let mut trace = StageTrace::default();
    let mut engine = if denoise {
        Some(FlagEngine {
            lambda: stage_cfg.lambda,
            beta: BetaParam::new(stage_cfg.beta)?,
            k_percent: stage_cfg.k_percent,
            tau_mode: stage_cfg.tau_mode,
            window: SmaWindow::new(stage_cfg.sma_window, stage_cfg.k_percent)?,
            snapshot: vec![false; n],
            warmup_steps,
        })
    } else {
        None
    };
    let mut confidence_sum = 0.0;
    let mut confidence_count = 0usize;

    for epoch in 0..stage_cfg.epochs {
        // Exact mode refreshes its dataset-wide threshold snapshot against
        // the current policy at each epoch boundary.
        if let Some(engine) = engine.as_mut() {
            if engine.tau_mode == TauMode::Exact {
                let mut confs = Vec::with_capacity(n);
                for rec in &prepared {
                    let p = exact_mode_confidence(model, &params, rec, engine)?;
                    confs.push(Confidence::new(clamp_unit(p))?);
                }
                let tau = percentile_tau(&confs, engine.k_percent)?;
                for (i, c) in confs.iter().enumerate() {
                    engine.snapshot[i] = c.value() < tau;
                }
            }
        }

        let order = shuffled_indices(n, &[stage_cfg.run_seed, stage_cfg.stage_tag, epoch as u64]);
        for chunk in order.chunks(stage_cfg.knobs.batch_size) {
            let items: Vec<PreferenceItem> =
                chunk.iter().map(|&i| prepared[i].item.clone()).collect();
            let batch = TrainBatch::Preference(PreferenceBatch {
                beta: stage_cfg.beta,
                alpha: stage_cfg.alpha,
                items,
            });
            let step = opt.step();
            let mut flags_applied = 0usize;
            let out = match engine.as_mut() {
                None => crate::lm::train_step(model, &mut params, &mut opt, &batch)?,
                Some(engine) => {
                    let mut hook_err = None;
                    let mut hook = |view: &PrefItemView<'_, f32>| -> bool {
                        let global = chunk[view.index];
                        let raw = match engine.tau_mode {
                            TauMode::Exact => engine.snapshot[global],
                            TauMode::Sma => {
                                match engine.confidence(view, prepared[global].init_denoms) {
                                    Ok(p) => {
                                        let c = Confidence::new(clamp_unit(p))
                                            .expect("clamped to unit range");
                                        let (_, flag) = engine.window.push_and_flag(c);
                                        flag
                                    }
                                    Err(e) => {
                                        hook_err = Some(e);
                                        false
                                    }
                                }
                            }
                        };
                        trace.detector_seen += 1;
                        trace.detector_flags += usize::from(raw);
                        let applied = raw && step >= engine.warmup_steps;
                        flags_applied += usize::from(applied);
                        applied
                    };
                    let out = train_step_with_hook(
                        model,
                        &mut params,
                        &mut opt,
                        &batch,
                        Some(&mut hook),
                    )?;
                    if let Some(e) = hook_err {
                        return Err(e);
                    }
                    out
                }
            };
            for stat in &out.pref_stats {
                confidence_sum += stat.p;
                confidence_count += 1;
            }
            trace.applied_flags += flags_applied;
            trace.steps.push(StepTrace {
                step,
                loss: out.loss,
                lr: out.lr,
                batch: chunk.len(),
                flags_applied,
            });
            trace.final_loss = out.loss;
        }
    }
    if confidence_count > 0 {
        trace.mean_confidence = confidence_sum / confidence_count as f64;
    }
    Ok((params, trace))
}

/// Exact-mode snapshot confidence: the same de-coupled quantity the live
/// hook computes, evaluated against the current policy outside a training
/// step.
fn exact_mode_confidence(
    model: &ModelConfig,
    params: &ParameterStore<f32>,
    rec: &PreparedRecord,
    engine: &FlagEngine,
) -> Result<f64> {
    let it = &rec.item;
    let mut full_c = it.prompt.clone();
    full_c.extend_from_slice(&it.chosen);
    let mut full_r = it.prompt.clone();
    full_r.extend_from_slice(&it.rejected);
    let pass_c = forward(model, params, &full_c)?;
    let pass_r = forward(model, params, &full_r)?;
    let view = PrefItemView {
        index: 0,
        item: it,
        chosen_pass: &pass_c,
        rejected_pass: &pass_r,
        p_coupled: 0.5,
    };
    engine.confidence(&view, rec.init_denoms)
}

fn clamp_unit(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}
