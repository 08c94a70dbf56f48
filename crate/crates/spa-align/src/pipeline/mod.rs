//! The improvement loop as an explicit state machine: seed preference
//! optimization, then per-iteration data expansion via self-judgment and
//! refined-loss training with the extrapolation schedule, all recorded in a
//! run manifest.

mod expand;
mod manifest;
mod train;

pub use expand::{build_seed_dataset, expand_iteration, ExpandConfig};
pub use manifest::{IterationState, IterationStats, ManifestBody, RunManifest, StageRecord};
pub use train::{
    train_preference, train_sft, FlagReference, PreferenceStage, StageTrace, StepTrace, TauMode,
    TrainKnobs,
};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::dataset::{write_records, LabelSource, PreferenceRecord};
use crate::error::{Error, Result};
use crate::lm::{save_checkpoint, ModelConfig, ParameterStore, Vocabulary};
use crate::pref::RefinementConfig;
use crate::seeding::{derive_seed, stage};

/// The gold-labeled records that bootstrap the loop.
#[derive(Debug, Clone)]
pub struct SeedDataset {
    pub records: Vec<PreferenceRecord>,
}

impl SeedDataset {
    pub fn new(records: Vec<PreferenceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Pipeline("seed dataset is empty".into()));
        }
        let mut prompts = HashSet::new();
        for rec in &records {
            rec.validate()?;
            if rec.label_source != LabelSource::SeedGold {
                return Err(Error::Pipeline(format!(
                    "seed dataset holds a non-seed record for prompt {:?}",
                    rec.prompt
                )));
            }
            if !prompts.insert(rec.prompt.as_str()) {
                return Err(Error::Pipeline(format!(
                    "duplicate seed prompt {:?}",
                    rec.prompt
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn prompts(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.prompt.as_str()).collect()
    }
}

/// The per-iteration prompt sets X_1..X_T.
#[derive(Debug, Clone)]
pub struct PromptPlan {
    pub prompt_sets: Vec<Vec<String>>,
}

impl PromptPlan {
    /// Checks pairwise disjointness, and disjointness from the seed prompts.
    pub fn validate(&self, seed_prompts: &HashSet<&str>) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for (t, set) in self.prompt_sets.iter().enumerate() {
            for p in set {
                if seed_prompts.contains(p.as_str()) {
                    return Err(Error::Pipeline(format!(
                        "iteration {} prompt {:?} collides with the seed set",
                        t + 1,
                        p
                    )));
                }
                if !seen.insert(p.as_str()) {
                    return Err(Error::Pipeline(format!(
                        "prompt {:?} appears in two iteration sets",
                        p
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything the loop needs besides the models and prompts.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub beta: f64,
    pub refinement: RefinementConfig,
    pub tau_mode: TauMode,
    pub flag_reference: FlagReference,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub length_penalty: f64,
    /// Sampling attempts per prompt during seed construction.
    pub seed_attempts: u64,
    /// Sampling temperature for seed construction; the expansion stages use
    /// `temperature`.
    pub seed_temperature: f64,
    pub knobs: TrainKnobs,
    /// Learning-rate override for the improvement iterations; the seed stage
    /// always uses `knobs.lr`.
    pub iteration_lr: Option<f64>,
    pub seed_epochs: usize,
    pub iteration_epochs: usize,
    pub run_seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.refinement.validate()?;
        self.knobs.validate()?;
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be finite and > 0, got {}",
                self.beta
            )));
        }
        if self.length_penalty < 0.0 {
            return Err(Error::Config("length_penalty must be >= 0".into()));
        }
        if self.seed_epochs == 0 || self.iteration_epochs == 0 {
            return Err(Error::Config("epoch counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Sampling setup of the seed-construction stage.
    pub fn seed_expand_config(&self) -> ExpandConfig {
        ExpandConfig {
            temperature: self.seed_temperature,
            ..self.expand_config()
        }
    }

    pub fn expand_config(&self) -> ExpandConfig {
        ExpandConfig {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            beta: self.beta,
            length_penalty: self.length_penalty,
            seed_attempts: self.seed_attempts,
            run_seed: self.run_seed,
        }
    }
}

/// Obtains the weakly aligned starting policy from the seed data: plain
/// preference optimization against the frozen initial model.
pub fn train_initial_dpo(
    model: &ModelConfig,
    vocab: &Vocabulary,
    init_params: &ParameterStore<f32>,
    seed: &SeedDataset,
    cfg: &PipelineConfig,
) -> Result<(ParameterStore<f32>, StageTrace)> {
    let stage_cfg = PreferenceStage {
        records: &seed.records,
        beta: cfg.beta,
        alpha: 0.0,
        lambda: 0.0,
        epochs: cfg.seed_epochs,
        knobs: cfg.knobs,
        tau_mode: cfg.tau_mode,
        k_percent: cfg.refinement.k_percent,
        sma_window: cfg.refinement.sma_window,
        denoise_warmup_fraction: cfg.refinement.denoise_warmup_fraction,
        flag_reference: cfg.flag_reference,
        init_params: None,
        run_seed: cfg.run_seed,
        stage_tag: stage::SEED_DPO,
    };
    train_preference(model, vocab, init_params, init_params, &stage_cfg)
}

/// One refined-loss training pass over an iteration's records: the policy
/// starts from and is regularized against the previous iteration's model.
pub fn train_iteration(
    model: &ModelConfig,
    vocab: &Vocabulary,
    prev_policy: &ParameterStore<f32>,
    init_params: &ParameterStore<f32>,
    records: &[PreferenceRecord],
    t: u32,
    cfg: &PipelineConfig,
) -> Result<(ParameterStore<f32>, StageTrace)> {
    let knobs = TrainKnobs {
        lr: cfg.iteration_lr.unwrap_or(cfg.knobs.lr),
        ..cfg.knobs
    };
    let stage_cfg = PreferenceStage {
        records,
        beta: cfg.beta,
        alpha: cfg.refinement.alpha,
        lambda: cfg.refinement.lambda_for_iteration(t as usize),
        epochs: cfg.iteration_epochs,
        knobs,
        tau_mode: cfg.tau_mode,
        k_percent: cfg.refinement.k_percent,
        sma_window: cfg.refinement.sma_window,
        denoise_warmup_fraction: cfg.refinement.denoise_warmup_fraction,
        flag_reference: cfg.flag_reference,
        init_params: Some(init_params),
        run_seed: derive_seed(&[cfg.run_seed, stage::TRAIN_ITER, t as u64]),
        stage_tag: stage::TRAIN_ITER,
    };
    train_preference(model, vocab, prev_policy, prev_policy, &stage_cfg)
}

/// How a run begins.
pub enum RunStart {
    /// Standard mode: an initial supervised model plus gold seed data; the
    /// weakly aligned starting policy is trained here.
    Seeded {
        init: ParameterStore<f32>,
        seed: SeedDataset,
    },
    /// No-seed mode: the given instruction-tuned model plays the starting
    /// policy and its pre-tuning base plays the judgment reference.
    NoSeed {
        policy: ParameterStore<f32>,
        base: ParameterStore<f32>,
    },
}

/// What a finished run hands back.
pub struct RunOutcome {
    pub final_params: ParameterStore<f32>,
    pub pi0_params: ParameterStore<f32>,
    pub manifest: RunManifest,
    pub datasets: Vec<Vec<PreferenceRecord>>,
}

/// Executes the full loop: optional seed-stage preference optimization, then
/// `T` iterations of expansion and refined training. Every dataset,
/// checkpoint, and statistic is persisted under `out_dir` and listed in the
/// manifest; a stage failure still writes the manifest with the completed
/// stages before the error propagates.
pub fn run_spa(
    model: &ModelConfig,
    vocab: &Vocabulary,
    start: RunStart,
    plan: &PromptPlan,
    cfg: &PipelineConfig,
    resolved_config: serde_json::Value,
    out_dir: impl AsRef<Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    model.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut body = ManifestBody::new(cfg.run_seed, resolved_config);

    let outcome = run_stages(model, vocab, start, plan, cfg, &mut body, out_dir);
    match outcome {
        Ok((final_params, pi0_params, datasets)) => {
            let manifest = RunManifest::finalize(body)?;
            manifest.save(out_dir.join("manifest.json"))?;
            Ok(RunOutcome {
                final_params,
                pi0_params,
                manifest,
                datasets,
            })
        }
        Err(e) => {
            body.record_stage("aborted", &format!("failed: {e}"), None);
            if let Ok(manifest) = RunManifest::finalize(body) {
                let _ = manifest.save(out_dir.join("manifest.json"));
            }
            Err(e)
        }
    }
}

type StagesOk = (
    ParameterStore<f32>,
    ParameterStore<f32>,
    Vec<Vec<PreferenceRecord>>,
);

fn run_stages(
    model: &ModelConfig,
    vocab: &Vocabulary,
    start: RunStart,
    plan: &PromptPlan,
    cfg: &PipelineConfig,
    body: &mut ManifestBody,
    out_dir: &Path,
) -> Result<StagesOk> {
    let save_params = |body: &mut ManifestBody, name: &str, params: &ParameterStore<f32>| -> Result<PathBuf> {
        let rel = format!("{name}.ckpt");
        save_checkpoint(out_dir.join(&rel), model, params)?;
        body.record_artifact(&rel);
        Ok(PathBuf::from(rel))
    };

    // Stage: initial policy.
    let (init_params, pi0): (ParameterStore<f32>, ParameterStore<f32>) = match start {
        RunStart::Seeded { init, seed } => {
            plan.validate(&seed.prompts())?;
            let rel = "seed.jsonl";
            write_records(out_dir.join(rel), &seed.records)?;
            body.record_artifact(rel);
            let (pi0, trace) = train_initial_dpo(model, vocab, &init, &seed, cfg)?;
            body.record_stage(
                "seed-dpo",
                "ok",
                Some(format!(
                    "records={} steps={} final_loss={:.6}",
                    seed.records.len(),
                    trace.total_steps(),
                    trace.final_loss
                )),
            );
            (init, pi0)
        }
        RunStart::NoSeed { policy, base } => {
            plan.validate(&HashSet::new())?;
            body.record_stage("seed-dpo", "skipped: no-seed mode", None);
            (base, policy)
        }
    };
    let init_rel = save_params(body, "pi_init", &init_params)?;
    save_params(body, "pi_0", &pi0)?;

    let mut policy = pi0.clone();
    let mut prev_rel = PathBuf::from("pi_0.ckpt");
    let mut datasets = Vec::new();

    for (idx, prompts) in plan.prompt_sets.iter().enumerate() {
        let t = (idx + 1) as u32;
        let lambda = cfg.refinement.lambda_for_iteration(t as usize);

        // Expansion.
        let (records, dropped) = expand_iteration(
            model,
            vocab,
            &policy,
            &init_params,
            prompts,
            t,
            &cfg.expand_config(),
        )?;
        let rel = format!("d_{t}.jsonl");
        write_records(out_dir.join(&rel), &records)?;
        body.record_artifact(&rel);
        body.record_stage(
            &format!("expand-{t}"),
            "ok",
            Some(format!("records={} dropped={dropped}", records.len())),
        );

        // Training.
        let (next, trace) =
            train_iteration(model, vocab, &policy, &init_params, &records, t, cfg)?;
        let next_rel = save_params(body, &format!("pi_{t}"), &next)?;
        body.record_stage(
            &format!("train-{t}"),
            "ok",
            Some(format!(
                "steps={} final_loss={:.6}",
                trace.total_steps(),
                trace.final_loss
            )),
        );
        let mean_judge_confidence = records
            .iter()
            .filter_map(|r| r.confidence)
            .sum::<f64>()
            / records.len() as f64;
        body.iteration_stats.push(IterationStats {
            t,
            lambda,
            dataset_size: records.len(),
            dropped_prompts: dropped,
            mean_judge_confidence,
            detector_flag_rate: trace.detector_flag_rate(),
            applied_flags: trace.applied_flags,
            steps: trace.total_steps(),
            final_loss: trace.final_loss,
        });
        body.iteration_states.push(IterationState {
            t,
            policy_ckpt: next_rel.display().to_string(),
            ref_ckpt: prev_rel.display().to_string(),
            init_ckpt: init_rel.display().to_string(),
            lambda,
            rng_seed: derive_seed(&[cfg.run_seed, stage::TRAIN_ITER, t as u64]),
            steps: trace.total_steps(),
        });

        datasets.push(records);
        policy = next;
        prev_rel = next_rel;
    }

    Ok((policy, pi0, datasets))
}
