//! Run configuration: a single TOML document with named profiles.
//!
//! The `paper` profile carries the reference hyper-parameters (lr 5e-7,
//! batch 32, 300-token cap); the `desk` profile scales them to a model that
//! trains in minutes (lr 3e-4, batch 16, 64-token cap). Profile defaults
//! resolve first, explicit file values override them, and command-line
//! overrides land last. The fully-resolved configuration is serialized into
//! every manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::oracle::{SplitSizes, TaskKind, TaskSpec};
use crate::pipeline::{FlagReference, PipelineConfig, TauMode, TrainKnobs};
use crate::pref::RefinementConfig;

/// Named hyper-parameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "profile must be `paper` or `desk`, got {other:?}"
            ))),
        }
    }

    fn lr(&self) -> f64 {
        match self {
            Profile::Paper => 5e-7,
            Profile::Desk => 3e-4,
        }
    }

    fn batch_size(&self) -> usize {
        match self {
            Profile::Paper => 32,
            Profile::Desk => 16,
        }
    }

    fn max_new_tokens(&self) -> usize {
        match self {
            Profile::Paper => 300,
            Profile::Desk => 64,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    context_length: Option<usize>,
    d_model: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    tie_output: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    kind: String,
    alphabet: String,
    min_len: usize,
    max_len: usize,
    rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplits {
    sft: usize,
    seed_prompts: usize,
    seed_pairs: usize,
    iterations: Vec<usize>,
    heldout: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSft {
    epochs: Option<usize>,
    lr: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    lr: Option<f64>,
    iteration_lr: Option<f64>,
    batch_size: Option<usize>,
    warmup_fraction: Option<f64>,
    weight_decay: Option<f64>,
    seed_epochs: Option<usize>,
    iteration_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeneration {
    temperature: Option<f64>,
    max_new_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSeeding {
    attempts: Option<u64>,
    temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPreference {
    beta: Option<f64>,
    length_penalty: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRefinement {
    alpha: Option<f64>,
    k_percent: Option<f64>,
    sma_window: Option<usize>,
    denoise_warmup_fraction: Option<f64>,
    lambda_schedule: Option<Vec<f64>>,
    tau_mode: Option<TauMode>,
    flag_reference: Option<FlagReference>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    baseline_checkpoint: Option<String>,
    candidate_checkpoint: Option<String>,
    prompts: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJudge {
    pairs: Option<String>,
    policy_checkpoint: Option<String>,
    reference_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArtifacts {
    sft_checkpoint: Option<String>,
    seed_dataset: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<String>,
    seed: Option<u64>,
    out_dir: Option<String>,
    #[serde(default)]
    model: RawModel,
    task: RawTask,
    splits: RawSplits,
    #[serde(default)]
    sft: RawSft,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    generation: RawGeneration,
    #[serde(default)]
    seeding: RawSeeding,
    #[serde(default)]
    preference: RawPreference,
    #[serde(default)]
    refinement: RawRefinement,
    #[serde(default)]
    eval: RawEval,
    #[serde(default)]
    judge: RawJudge,
    #[serde(default)]
    artifacts: RawArtifacts,
}

/// Supervised fine-tuning knobs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftSettings {
    pub epochs: usize,
    pub lr: f64,
}

/// Evaluation inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSettings {
    pub baseline_checkpoint: Option<String>,
    pub candidate_checkpoint: Option<String>,
    pub prompts: usize,
}

/// Pair-judging inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeSettings {
    pub pairs: Option<String>,
    pub policy_checkpoint: Option<String>,
    pub reference_checkpoint: Option<String>,
}

/// Staged-command inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactSettings {
    pub sft_checkpoint: Option<String>,
    pub seed_dataset: Option<String>,
}

/// The fully-resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub splits: SplitSizes,
    pub seed_pairs: usize,
    pub sft: SftSettings,
    pub training: TrainKnobs,
    pub iteration_lr: Option<f64>,
    pub seed_epochs: usize,
    pub iteration_epochs: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub beta: f64,
    pub length_penalty: f64,
    pub seed_attempts: u64,
    pub seed_temperature: f64,
    pub refinement: RefinementConfig,
    pub tau_mode: TauMode,
    pub flag_reference: FlagReference,
    pub eval: EvalSettings,
    pub judge: JudgeSettings,
    pub artifacts: ArtifactSettings,
}

/// Command-line overrides applied after profile resolution.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub profile: Option<String>,
    pub out_dir: Option<String>,
    /// `section.key=value` assignments mirroring the schema paths.
    pub sets: Vec<String>,
}

/// Loads, overrides, resolves, and validates a configuration file.
pub fn load_config(path: impl AsRef<Path>, overrides: &CliOverrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&path)?;
    let mut doc: toml::Value = text.parse::<toml::Value>().map_err(Error::Toml)?;
    for set in &overrides.sets {
        apply_set(&mut doc, set)?;
    }
    let raw: RawConfig = doc.try_into().map_err(Error::Toml)?;
    resolve(raw, overrides)
}

/// Applies one `section.key=value` override to the parsed document.
fn apply_set(doc: &mut toml::Value, set: &str) -> Result<()> {
    let (path, value) = set.split_once('=').ok_or_else(|| {
        Error::Config(format!("override {set:?} is not of the form path=value"))
    })?;
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Value>()
        .map_err(|_| Error::Config(format!("override value {value:?} is not a TOML literal")))?["v"]
        .clone();
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override path {path:?} crosses a non-table value"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty override path in {set:?}")))
}

fn resolve(raw: RawConfig, overrides: &CliOverrides) -> Result<RunConfig> {
    let profile_name = overrides
        .profile
        .clone()
        .or(raw.profile.clone())
        .unwrap_or_else(|| "desk".to_string());
    let profile = Profile::parse(&profile_name)?;

    let kind = match raw.task.kind.as_str() {
        "copy" => TaskKind::Copy,
        "reverse" => TaskKind::Reverse,
        "sort" => TaskKind::Sort,
        other => {
            return Err(Error::Config(format!(
                "task.kind must be copy|reverse|sort, got {other:?}"
            )))
        }
    };
    let seed = overrides.seed.or(raw.seed).unwrap_or(0);
    let task = TaskSpec {
        kind,
        alphabet: raw.task.alphabet.chars().collect(),
        min_len: raw.task.min_len,
        max_len: raw.task.max_len,
        rng_seed: raw.task.rng_seed.unwrap_or(seed),
    };
    task.validate()?;
    let vocab = task.vocabulary()?;

    let model = ModelConfig {
        vocab_size: vocab.size(),
        context_length: raw.model.context_length.unwrap_or(96),
        d_model: raw.model.d_model.unwrap_or(64),
        n_layers: raw.model.n_layers.unwrap_or(2),
        n_heads: raw.model.n_heads.unwrap_or(4),
        tie_output: raw.model.tie_output.unwrap_or(false),
    };
    model.validate()?;
    let max_new_tokens = raw
        .generation
        .max_new_tokens
        .unwrap_or_else(|| profile.max_new_tokens());
    let needed = 1 + task.max_len + 1 + max_new_tokens.min(task.max_len * 2 + 2) + 1;
    if model.context_length < needed {
        return Err(Error::Config(format!(
            "model.context_length = {} cannot hold a prompt of {} plus responses",
            model.context_length, task.max_len
        )));
    }

    let refinement = RefinementConfig {
        alpha: raw.refinement.alpha.unwrap_or(0.1),
        k_percent: raw.refinement.k_percent.unwrap_or(10.0),
        sma_window: raw.refinement.sma_window.unwrap_or(50),
        denoise_warmup_fraction: raw.refinement.denoise_warmup_fraction.unwrap_or(0.2),
        lambda_schedule: raw
            .refinement
            .lambda_schedule
            .unwrap_or_else(|| vec![0.5, 0.25, 0.125]),
    };
    refinement.validate()?;

    let splits = SplitSizes {
        sft: raw.splits.sft,
        seed: raw.splits.seed_prompts,
        iterations: raw.splits.iterations.clone(),
        heldout: raw.splits.heldout,
    };
    if raw.splits.seed_pairs > raw.splits.seed_prompts {
        return Err(Error::Config(format!(
            "splits.seed_pairs = {} exceeds splits.seed_prompts = {}",
            raw.splits.seed_pairs, raw.splits.seed_prompts
        )));
    }

    let training = TrainKnobs {
        lr: raw.training.lr.unwrap_or_else(|| profile.lr()),
        batch_size: raw.training.batch_size.unwrap_or_else(|| profile.batch_size()),
        warmup_fraction: raw.training.warmup_fraction.unwrap_or(0.1),
        weight_decay: raw.training.weight_decay.unwrap_or(0.0),
    };
    training.validate()?;

    let config = RunConfig {
        profile,
        seed,
        out_dir: PathBuf::from(
            overrides
                .out_dir
                .clone()
                .or(raw.out_dir)
                .unwrap_or_else(|| "runs/out".to_string()),
        ),
        model,
        task,
        splits,
        seed_pairs: raw.splits.seed_pairs,
        sft: SftSettings {
            epochs: raw.sft.epochs.unwrap_or(3),
            lr: raw.sft.lr.unwrap_or(1e-3),
        },
        training,
        iteration_lr: raw.training.iteration_lr,
        seed_epochs: raw.training.seed_epochs.unwrap_or(3),
        iteration_epochs: raw.training.iteration_epochs.unwrap_or(1),
        temperature: raw.generation.temperature.unwrap_or(0.7),
        max_new_tokens,
        seed_attempts: raw.seeding.attempts.unwrap_or(8),
        seed_temperature: raw
            .seeding
            .temperature
            .or(raw.generation.temperature)
            .unwrap_or(0.7),
        beta: raw.preference.beta.unwrap_or(0.1),
        length_penalty: raw.preference.length_penalty.unwrap_or(0.0),
        refinement,
        tau_mode: raw.refinement.tau_mode.unwrap_or(TauMode::Sma),
        flag_reference: raw
            .refinement
            .flag_reference
            .unwrap_or(FlagReference::TrainingRef),
        eval: EvalSettings {
            baseline_checkpoint: raw.eval.baseline_checkpoint,
            candidate_checkpoint: raw.eval.candidate_checkpoint,
            prompts: raw.eval.prompts.unwrap_or(raw.splits.heldout),
        },
        judge: JudgeSettings {
            pairs: raw.judge.pairs,
            policy_checkpoint: raw.judge.policy_checkpoint,
            reference_checkpoint: raw.judge.reference_checkpoint,
        },
        artifacts: ArtifactSettings {
            sft_checkpoint: raw.artifacts.sft_checkpoint,
            seed_dataset: raw.artifacts.seed_dataset,
        },
    };
    config.pipeline_config().validate()?;
    Ok(config)
}

impl RunConfig {
    /// The pipeline-facing slice of this configuration.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            beta: self.beta,
            refinement: self.refinement.clone(),
            tau_mode: self.tau_mode,
            flag_reference: self.flag_reference,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            length_penalty: self.length_penalty,
            seed_attempts: self.seed_attempts,
            seed_temperature: self.seed_temperature,
            knobs: self.training,
            iteration_lr: self.iteration_lr,
            seed_epochs: self.seed_epochs,
            iteration_epochs: self.iteration_epochs,
            run_seed: self.seed,
        }
    }

    /// The resolved configuration as the JSON value manifests embed.
    pub fn as_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const BASE: &str = r#"
profile = "desk"
seed = 7
out_dir = "runs/demo"

[task]
kind = "reverse"
alphabet = "abcdefgh"
min_len = 3
max_len = 10

[splits]
sft = 64
seed_prompts = 32
seed_pairs = 16
iterations = [24, 24]
heldout = 16
"#;

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn desk_profile_defaults_resolve() {
        let (_d, path) = write_config(BASE);
        let cfg = load_config(&path, &CliOverrides::default()).unwrap();
        assert_eq!(cfg.training.lr, 3e-4);
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.max_new_tokens, 64);
        assert_eq!(cfg.beta, 0.1);
        assert_eq!(cfg.refinement.alpha, 0.1);
        assert_eq!(cfg.refinement.k_percent, 10.0);
        assert_eq!(cfg.refinement.sma_window, 50);
        assert_eq!(cfg.seed_epochs, 3);
        // 3 control tokens + 8 symbols.
        assert_eq!(cfg.model.vocab_size, 11);
    }

    #[test]
    fn paper_profile_defaults_resolve() {
        let text = BASE.replace("profile = \"desk\"", "profile = \"paper\"")
            .replace("max_len = 10", "max_len = 10\n\n[model]\ncontext_length = 640");
        let (_d, path) = write_config(&text);
        let cfg = load_config(&path, &CliOverrides::default()).unwrap();
        assert_eq!(cfg.training.lr, 5e-7);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.max_new_tokens, 300);
    }

    #[test]
    fn explicit_values_override_profile() {
        let text = format!("{BASE}\n[training]\nlr = 0.002\nbatch_size = 4\n");
        let (_d, path) = write_config(&text);
        let cfg = load_config(&path, &CliOverrides::default()).unwrap();
        assert_eq!(cfg.training.lr, 0.002);
        assert_eq!(cfg.training.batch_size, 4);
    }

    #[test]
    fn cli_overrides_win() {
        let (_d, path) = write_config(BASE);
        let overrides = CliOverrides {
            seed: Some(99),
            out_dir: Some("elsewhere".into()),
            sets: vec!["training.lr=0.005".into(), "refinement.alpha=0.2".into()],
            ..Default::default()
        };
        let cfg = load_config(&path, &overrides).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.training.lr, 0.005);
        assert_eq!(cfg.refinement.alpha, 0.2);
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        let text = format!("{BASE}\nnot_a_key = 1\n");
        let (_d, path) = write_config(&text);
        let err = load_config(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.is_validation(), "got {err:?}");
        assert!(err.to_string().contains("not_a_key"));

        let text = format!("{BASE}\n[training]\nlr = 0.1\nbogus = 2\n");
        let (_d, path) = write_config(&text);
        let err = load_config(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn semantic_violations_name_the_field() {
        let text = format!("{BASE}\n[refinement]\nalpha = 0.7\n");
        let (_d, path) = write_config(&text);
        let err = load_config(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("alpha"), "got: {err}");

        let text = BASE.replace("seed_pairs = 16", "seed_pairs = 64");
        let (_d, path) = write_config(&text);
        let err = load_config(&path, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("seed_pairs"));
    }

    #[test]
    fn resolved_config_serializes_deterministically() {
        let (_d, path) = write_config(BASE);
        let a = load_config(&path, &CliOverrides::default()).unwrap();
        let b = load_config(&path, &CliOverrides::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.as_json().unwrap()).unwrap(),
            serde_json::to_string(&b.as_json().unwrap()).unwrap()
        );
    }
}
