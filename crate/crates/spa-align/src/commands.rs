//! Batch command implementations behind the CLI: each one reads the resolved
//! configuration, writes its artifacts under the output directory, and
//! records them in a manifest.

use std::path::PathBuf;

use crate::config::RunConfig;
use crate::dataset::{read_pairs, read_records, write_records, LabelSource, PreferenceRecord};
use crate::error::{Error, Result};
use crate::lm::{
    load_checkpoint_matching, save_checkpoint, sequence_logprob, GenerationConfig, ParameterStore,
};
use crate::oracle::{label_accuracy, make_splits, winrate, write_eval_csv, CorpusSplits};
use crate::pipeline::{
    build_seed_dataset, run_spa, train_initial_dpo, train_sft, ManifestBody, PromptPlan,
    RunManifest, RunStart, SeedDataset, TrainKnobs,
};
use crate::pref::{judge, percentile_tau, BetaParam, Confidence, LogRatioPair, Winner};

/// What a command did: artifacts written (relative to the output directory)
/// and a one-line summary for the terminal.
#[derive(Debug, Clone)]
pub struct CommandReport {
    pub name: &'static str,
    pub artifacts: Vec<String>,
    pub summary: String,
}

fn splits_for(cfg: &RunConfig) -> Result<CorpusSplits> {
    make_splits(&cfg.task, &cfg.splits, 1)
}

fn write_command_manifest(
    cfg: &RunConfig,
    name: &str,
    artifacts: &[String],
    detail: String,
) -> Result<String> {
    let mut body = ManifestBody::new(cfg.seed, cfg.as_json()?);
    body.record_stage(name, "ok", Some(detail));
    for a in artifacts {
        body.record_artifact(a);
    }
    let manifest_name = format!("{name}.manifest.json");
    RunManifest::finalize(body)?.save(cfg.artifact_path(&manifest_name))?;
    Ok(manifest_name)
}

fn load_model(cfg: &RunConfig, path: &str) -> Result<ParameterStore<f32>> {
    load_checkpoint_matching(resolve_path(cfg, path), &cfg.model)
}

/// Paths in the config resolve relative to the output directory unless
/// absolute or explicitly relative to the working directory.
fn resolve_path(cfg: &RunConfig, path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() || p.components().count() > 1 {
        p
    } else {
        cfg.out_dir.join(p)
    }
}

/// Trains the initial supervised model on gold demonstrations.
pub fn cmd_sft(cfg: &RunConfig) -> Result<CommandReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let vocab = cfg.task.vocabulary()?;
    let splits = splits_for(cfg)?;
    let init = cfg.model.init_params::<f32>(cfg.seed)?;
    let knobs = TrainKnobs {
        lr: cfg.sft.lr,
        ..cfg.training
    };
    let (params, trace) = train_sft(
        &cfg.model,
        &vocab,
        &splits.sft,
        cfg.sft.epochs,
        &knobs,
        cfg.seed,
        init,
    )?;
    save_checkpoint(cfg.artifact_path("sft.ckpt"), &cfg.model, &params)?;
    let mut artifacts = vec!["sft.ckpt".to_string()];
    let detail = format!(
        "examples={} epochs={} steps={} final_loss={:.6}",
        splits.sft.len(),
        cfg.sft.epochs,
        trace.total_steps(),
        trace.final_loss
    );
    artifacts.push(write_command_manifest(cfg, "sft", &artifacts, detail.clone())?);
    Ok(CommandReport {
        name: "sft",
        artifacts,
        summary: detail,
    })
}

fn seed_dataset(cfg: &RunConfig, splits: &CorpusSplits) -> Result<SeedDataset> {
    let vocab = cfg.task.vocabulary()?;
    if let Some(path) = &cfg.artifacts.seed_dataset {
        return SeedDataset::new(read_records(resolve_path(cfg, path))?);
    }
    let sft_path = cfg
        .artifacts
        .sft_checkpoint
        .clone()
        .unwrap_or_else(|| "sft.ckpt".to_string());
    let init = load_model(cfg, &sft_path)?;
    let records = build_seed_dataset(
        &cfg.model,
        &vocab,
        &init,
        &cfg.task,
        &splits.seed.prompts,
        cfg.seed_pairs,
        &cfg.pipeline_config().seed_expand_config(),
    )?;
    SeedDataset::new(records)
}

/// Builds the gold-labeled seed pairs and trains the weakly aligned starting
/// policy.
pub fn cmd_dpo_seed(cfg: &RunConfig) -> Result<CommandReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let vocab = cfg.task.vocabulary()?;
    let splits = splits_for(cfg)?;
    let seed = seed_dataset(cfg, &splits)?;
    write_records(cfg.artifact_path("seed.jsonl"), &seed.records)?;
    let sft_path = cfg
        .artifacts
        .sft_checkpoint
        .clone()
        .unwrap_or_else(|| "sft.ckpt".to_string());
    let init = load_model(cfg, &sft_path)?;
    let (pi0, trace) =
        train_initial_dpo(&cfg.model, &vocab, &init, &seed, &cfg.pipeline_config())?;
    save_checkpoint(cfg.artifact_path("pi_0.ckpt"), &cfg.model, &pi0)?;
    let mut artifacts = vec!["seed.jsonl".to_string(), "pi_0.ckpt".to_string()];
    let detail = format!(
        "seed_records={} steps={} final_loss={:.6}",
        seed.records.len(),
        trace.total_steps(),
        trace.final_loss
    );
    artifacts.push(write_command_manifest(
        cfg,
        "dpo-seed",
        &artifacts,
        detail.clone(),
    )?);
    Ok(CommandReport {
        name: "dpo-seed",
        artifacts,
        summary: detail,
    })
}

/// Executes the full loop: seed preference optimization plus the configured
/// improvement iterations.
pub fn cmd_spa_run(cfg: &RunConfig) -> Result<CommandReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let vocab = cfg.task.vocabulary()?;
    let splits = splits_for(cfg)?;
    let seed = seed_dataset(cfg, &splits)?;
    let sft_path = cfg
        .artifacts
        .sft_checkpoint
        .clone()
        .unwrap_or_else(|| "sft.ckpt".to_string());
    let init = load_model(cfg, &sft_path)?;
    let plan = PromptPlan {
        prompt_sets: splits.iterations.iter().map(|c| c.prompts.clone()).collect(),
    };
    let outcome = run_spa(
        &cfg.model,
        &vocab,
        RunStart::Seeded {
            init,
            seed,
        },
        &plan,
        &cfg.pipeline_config(),
        cfg.as_json()?,
        &cfg.out_dir,
    )?;
    let t = plan.prompt_sets.len();
    let summary = format!(
        "iterations={} final_checkpoint=pi_{}.ckpt datasets={}",
        t,
        t,
        outcome
            .datasets
            .iter()
            .map(|d| d.len().to_string())
            .collect::<Vec<_>>()
            .join("/")
    );
    let mut artifacts = outcome.manifest.hashed.artifacts.clone();
    artifacts.push("manifest.json".to_string());
    Ok(CommandReport {
        name: "spa-run",
        artifacts,
        summary,
    })
}

/// Win-rate evaluation of a candidate checkpoint against a baseline on the
/// held-out split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<CommandReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let baseline_path = cfg.eval.baseline_checkpoint.clone().ok_or_else(|| {
        Error::Config("eval.baseline_checkpoint is required for `eval`".into())
    })?;
    let candidate_path = cfg.eval.candidate_checkpoint.clone().ok_or_else(|| {
        Error::Config("eval.candidate_checkpoint is required for `eval`".into())
    })?;
    let vocab = cfg.task.vocabulary()?;
    let splits = splits_for(cfg)?;
    let candidate = load_model(cfg, &candidate_path)?;
    let baseline = load_model(cfg, &baseline_path)?;
    let n = cfg.eval.prompts.min(splits.heldout.len());
    if n == 0 {
        return Err(Error::Config(
            "eval needs a non-empty held-out split".into(),
        ));
    }
    let gen = GenerationConfig {
        temperature: cfg.temperature,
        max_new_tokens: cfg.max_new_tokens,
        rng_seed: 0,
    };
    let (report, rows) = winrate(
        &cfg.model,
        &vocab,
        &candidate,
        &baseline,
        &cfg.task,
        &splits.heldout.prompts[..n],
        &gen,
        cfg.seed,
    )?;
    let report_json = serde_json::to_string_pretty(&report)?;
    std::fs::write(cfg.artifact_path("eval_report.json"), report_json + "\n")?;
    write_eval_csv(cfg.artifact_path("eval_rows.csv"), &rows)?;
    let mut artifacts = vec!["eval_report.json".to_string(), "eval_rows.csv".to_string()];
    let detail = format!(
        "candidate={} baseline={} n={} wins={} losses={} ties={} winrate={}",
        candidate_path,
        baseline_path,
        report.n,
        report.wins_a,
        report.wins_b,
        report.ties,
        report
            .winrate_a
            .map(|w| format!("{w:.4}"))
            .unwrap_or_else(|| "undefined".to_string())
    );
    artifacts.push(write_command_manifest(cfg, "eval", &artifacts, detail.clone())?);
    Ok(CommandReport {
        name: "eval",
        artifacts,
        summary: detail,
    })
}

/// Labels a pair file with the direct-judgment rule and emits confidences
/// plus exact-percentile noise flags.
pub fn cmd_judge(cfg: &RunConfig) -> Result<CommandReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let pairs_path = cfg
        .judge
        .pairs
        .clone()
        .ok_or_else(|| Error::Config("judge.pairs is required for `judge`".into()))?;
    let policy_path = cfg.judge.policy_checkpoint.clone().ok_or_else(|| {
        Error::Config("judge.policy_checkpoint is required for `judge`".into())
    })?;
    let reference_path = cfg.judge.reference_checkpoint.clone().ok_or_else(|| {
        Error::Config("judge.reference_checkpoint is required for `judge`".into())
    })?;
    let vocab = cfg.task.vocabulary()?;
    let policy = load_model(cfg, &policy_path)?;
    let reference = load_model(cfg, &reference_path)?;
    let pairs = read_pairs(resolve_path(cfg, &pairs_path))?;
    if pairs.is_empty() {
        return Err(Error::Pipeline("judge got an empty pair file".into()));
    }
    let beta = BetaParam::new(cfg.beta)?;

    let mut records = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let prompt = vocab.encode_prompt(&pair.prompt)?;
        let first = vocab.encode_response(&pair.first)?;
        let second = vocab.encode_response(&pair.second)?;
        let lr1 = LogRatioPair::new(
            sequence_logprob(&cfg.model, &policy, &prompt, &first)?,
            sequence_logprob(&cfg.model, &reference, &prompt, &first)?,
        )?;
        let lr2 = LogRatioPair::new(
            sequence_logprob(&cfg.model, &policy, &prompt, &second)?,
            sequence_logprob(&cfg.model, &reference, &prompt, &second)?,
        )?;
        let (winner, confidence) = judge(&lr1, &lr2, beta);
        let (chosen, rejected) = match winner {
            Winner::First => (pair.first.clone(), pair.second.clone()),
            Winner::Second => (pair.second.clone(), pair.first.clone()),
        };
        records.push(PreferenceRecord {
            prompt: pair.prompt.clone(),
            chosen,
            rejected,
            label_source: LabelSource::SelfJudged,
            confidence: Some(confidence.value()),
            iteration: 0,
        });
    }
    write_records(cfg.artifact_path("judged.jsonl"), &records)?;

    // Exact-percentile flags over the emitted confidences.
    let confidences: Vec<Confidence> = records
        .iter()
        .map(|r| Confidence::new(r.confidence.expect("self-judged")))
        .collect::<Result<_>>()?;
    let tau = percentile_tau(&confidences, cfg.refinement.k_percent)?;
    let mut w = csv::Writer::from_path(cfg.artifact_path("judge_flags.csv"))
        .map_err(|e| Error::Pipeline(e.to_string()))?;
    w.write_record(["pair", "confidence", "tau", "flag"])
        .map_err(|e| Error::Pipeline(e.to_string()))?;
    let mut flagged = 0usize;
    for (i, c) in confidences.iter().enumerate() {
        let flag = c.value() < tau;
        flagged += usize::from(flag);
        w.write_record([
            i.to_string(),
            format!("{}", c.value()),
            format!("{tau}"),
            u8::from(flag).to_string(),
        ])
        .map_err(|e| Error::Pipeline(e.to_string()))?;
    }
    w.flush()?;

    let mut artifacts = vec!["judged.jsonl".to_string(), "judge_flags.csv".to_string()];
    let detail = format!(
        "pairs={} flagged={} tau={:.6} policy={} reference={}",
        records.len(),
        flagged,
        tau,
        policy_path,
        reference_path
    );
    artifacts.push(write_command_manifest(cfg, "judge", &artifacts, detail.clone())?);
    Ok(CommandReport {
        name: "judge",
        artifacts,
        summary: detail,
    })
}

/// Measures judged-label accuracy of a record file against the oracle,
/// used by `eval` when a dataset is supplied.
pub fn dataset_label_accuracy(cfg: &RunConfig, records_path: &str) -> Result<f64> {
    let records = read_records(resolve_path(cfg, records_path))?;
    label_accuracy(&cfg.task, &records)
}
