//! Loop mechanics on a miniature setup: stage wiring, invariants, and
//! determinism. Quality-bar checks live in the acceptance suite.

mod common;

use std::collections::HashSet;

use spa_align::dataset::{read_records, LabelSource, PreferenceRecord};
use spa_align::lm::{
    forward, load_checkpoint, sequence_logprob, ModelConfig, ParameterStore, Vocabulary,
};
use spa_align::oracle::{make_splits, SplitSizes, TaskKind, TaskSpec};
use spa_align::pipeline::{
    build_seed_dataset, expand_iteration, run_spa, train_initial_dpo, train_iteration,
    FlagReference, PipelineConfig, PreferenceStage, PromptPlan, RunStart, SeedDataset, TauMode,
    TrainKnobs,
};
use spa_align::pref::{preference_prob, BetaParam, LogRatioPair, RefinementConfig};

fn tiny_task() -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Reverse,
        alphabet: "abcd".chars().collect(),
        min_len: 2,
        max_len: 5,
        rng_seed: 17,
    }
}

fn tiny_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.size(),
        context_length: 24,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        tie_output: false,
    }
}

fn tiny_pipeline(run_seed: u64) -> PipelineConfig {
    PipelineConfig {
        beta: 0.1,
        refinement: RefinementConfig {
            alpha: 0.1,
            k_percent: 10.0,
            sma_window: 50,
            denoise_warmup_fraction: 0.2,
            lambda_schedule: vec![0.5, 0.25],
        },
        tau_mode: TauMode::Sma,
        flag_reference: FlagReference::TrainingRef,
        temperature: 0.8,
        max_new_tokens: 8,
        length_penalty: 0.0,
        seed_attempts: 2,
        seed_temperature: 0.8,
        knobs: TrainKnobs {
            lr: 1e-3,
            batch_size: 8,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
        },
        iteration_lr: None,
        seed_epochs: 2,
        iteration_epochs: 1,
        run_seed,
    }
}

struct Fixture {
    #[allow(dead_code)]
    task: TaskSpec,
    vocab: Vocabulary,
    model: ModelConfig,
    cfg: PipelineConfig,
    init: ParameterStore<f32>,
    seed: SeedDataset,
    plan: PromptPlan,
}

fn fixture(run_seed: u64) -> Fixture {
    let task = tiny_task();
    let vocab = task.vocabulary().unwrap();
    let model = tiny_model(&vocab);
    let cfg = tiny_pipeline(run_seed);
    let splits = make_splits(
        &task,
        &SplitSizes {
            sft: 0,
            seed: 48,
            iterations: vec![24, 24],
            heldout: 0,
        },
        3,
    )
    .unwrap();
    let init = model.init_params::<f32>(run_seed ^ 0xabc).unwrap();
    let seed_records = build_seed_dataset(
        &model,
        &vocab,
        &init,
        &task,
        &splits.seed.prompts,
        16,
        &cfg.seed_expand_config(),
    )
    .unwrap();
    let seed = SeedDataset::new(seed_records).unwrap();
    let plan = PromptPlan {
        prompt_sets: splits.iterations.iter().map(|c| c.prompts.clone()).collect(),
    };
    Fixture {
        task,
        vocab,
        model,
        cfg,
        init,
        seed,
        plan,
    }
}

#[test]
fn seed_dpo_raises_mean_seed_preference() {
    let f = fixture(11);
    // Under the initial model, policy == reference, so every preference
    // probability is exactly one half.
    let (pi0, _) = train_initial_dpo(&f.model, &f.vocab, &f.init, &f.seed, &f.cfg).unwrap();
    let beta = BetaParam::new(f.cfg.beta).unwrap();
    let mut mean = 0.0;
    for rec in &f.seed.records {
        let prompt = f.vocab.encode_prompt(&rec.prompt).unwrap();
        let chosen = f.vocab.encode_response(&rec.chosen).unwrap();
        let rejected = f.vocab.encode_response(&rec.rejected).unwrap();
        let w = LogRatioPair::new(
            sequence_logprob(&f.model, &pi0, &prompt, &chosen).unwrap(),
            sequence_logprob(&f.model, &f.init, &prompt, &chosen).unwrap(),
        )
        .unwrap();
        let l = LogRatioPair::new(
            sequence_logprob(&f.model, &pi0, &prompt, &rejected).unwrap(),
            sequence_logprob(&f.model, &f.init, &prompt, &rejected).unwrap(),
        )
        .unwrap();
        mean += preference_prob(&w, &l, beta).value();
    }
    mean /= f.seed.records.len() as f64;
    assert!(mean > 0.5, "mean seed preference {mean} did not rise");
}

#[test]
fn expansion_records_recompute_to_the_same_confidence() {
    let f = fixture(13);
    let (pi0, _) = train_initial_dpo(&f.model, &f.vocab, &f.init, &f.seed, &f.cfg).unwrap();
    let (records, _) = expand_iteration(
        &f.model,
        &f.vocab,
        &pi0,
        &f.init,
        &f.plan.prompt_sets[0],
        1,
        &f.cfg.expand_config(),
    )
    .unwrap();
    let beta = BetaParam::new(f.cfg.beta).unwrap();
    for rec in &records {
        assert_ne!(rec.chosen, rec.rejected);
        assert_eq!(rec.label_source, LabelSource::SelfJudged);
        assert_eq!(rec.iteration, 1);
        let prompt = f.vocab.encode_prompt(&rec.prompt).unwrap();
        let chosen = f.vocab.encode_response(&rec.chosen).unwrap();
        let rejected = f.vocab.encode_response(&rec.rejected).unwrap();
        let w = LogRatioPair::new(
            sequence_logprob(&f.model, &pi0, &prompt, &chosen).unwrap(),
            sequence_logprob(&f.model, &f.init, &prompt, &chosen).unwrap(),
        )
        .unwrap();
        let l = LogRatioPair::new(
            sequence_logprob(&f.model, &pi0, &prompt, &rejected).unwrap(),
            sequence_logprob(&f.model, &f.init, &prompt, &rejected).unwrap(),
        )
        .unwrap();
        let p = preference_prob(&w, &l, beta).value();
        let stored = rec.confidence.unwrap();
        assert!(
            (stored - p.max(1.0 - p)).abs() == 0.0,
            "confidence mismatch: stored {stored}, recomputed {}",
            p.max(1.0 - p)
        );
        assert!(stored >= 0.5);
    }
}

#[test]
fn alpha_zero_iteration_is_bitwise_plain_dpo() {
    let f = fixture(19);
    let (pi0, _) = train_initial_dpo(&f.model, &f.vocab, &f.init, &f.seed, &f.cfg).unwrap();
    let (records, _) = expand_iteration(
        &f.model,
        &f.vocab,
        &pi0,
        &f.init,
        &f.plan.prompt_sets[0],
        1,
        &f.cfg.expand_config(),
    )
    .unwrap();

    // Route A: the refined path with alpha = 0 (flags computed, then
    // multiplied away). Route B: plain preference training.
    let mut cfg_zero = f.cfg.clone();
    cfg_zero.refinement.alpha = 0.0;
    let (a, _) =
        train_iteration(&f.model, &f.vocab, &pi0, &f.init, &records, 1, &cfg_zero).unwrap();

    let stage_cfg = PreferenceStage {
        records: &records,
        beta: f.cfg.beta,
        alpha: 0.0,
        lambda: 0.0,
        epochs: cfg_zero.iteration_epochs,
        knobs: cfg_zero.knobs,
        tau_mode: cfg_zero.tau_mode,
        k_percent: cfg_zero.refinement.k_percent,
        sma_window: cfg_zero.refinement.sma_window,
        denoise_warmup_fraction: cfg_zero.refinement.denoise_warmup_fraction,
        flag_reference: cfg_zero.flag_reference,
        init_params: None,
        run_seed: spa_align::seeding::derive_seed(&[
            cfg_zero.run_seed,
            spa_align::seeding::stage::TRAIN_ITER,
            1,
        ]),
        stage_tag: spa_align::seeding::stage::TRAIN_ITER,
    };
    let (b, _) =
        spa_align::pipeline::train_preference(&f.model, &f.vocab, &pi0, &pi0, &stage_cfg).unwrap();
    assert!(a.bit_eq(&b), "alpha=0 training diverged from plain DPO");
}

#[test]
fn full_run_persists_everything_and_freezes_references() {
    let f = fixture(29);
    let dir = tempfile::tempdir().unwrap();
    let init_snapshot = f.init.clone();
    let outcome = run_spa(
        &f.model,
        &f.vocab,
        RunStart::Seeded {
            init: f.init.clone(),
            seed: f.seed.clone(),
        },
        &f.plan,
        &f.cfg,
        serde_json::json!({"fixture": "tiny"}),
        dir.path(),
    )
    .unwrap();

    // The initial model never changes across the run.
    let (_, init_reloaded) = load_checkpoint(dir.path().join("pi_init.ckpt")).unwrap();
    assert!(init_reloaded.bit_eq(&init_snapshot));

    // Two iterations ran.
    assert_eq!(outcome.datasets.len(), 2);
    assert_eq!(outcome.manifest.hashed.iteration_stats.len(), 2);
    for (idx, stats) in outcome.manifest.hashed.iteration_stats.iter().enumerate() {
        assert_eq!(stats.t as usize, idx + 1);
        assert!(stats.dataset_size > 0);
    }
    let lambdas: Vec<f64> = outcome
        .manifest
        .hashed
        .iteration_states
        .iter()
        .map(|s| s.lambda)
        .collect();
    assert_eq!(lambdas, vec![0.5, 0.25]);

    // Every file in the output directory is either the manifest or a listed
    // artifact; every listed artifact exists.
    let listed: HashSet<String> = outcome.manifest.hashed.artifacts.iter().cloned().collect();
    for rel in &listed {
        assert!(dir.path().join(rel).exists(), "missing artifact {rel}");
    }
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name == "manifest.json" {
            continue;
        }
        assert!(listed.contains(&name), "orphan file {name}");
    }

    // Datasets on disk round-trip to the in-memory records.
    for (idx, records) in outcome.datasets.iter().enumerate() {
        let back = read_records(dir.path().join(format!("d_{}.jsonl", idx + 1))).unwrap();
        assert_eq!(&back, records);
    }
}

#[test]
fn rerun_with_same_seeds_is_bit_identical() {
    let run = |dir: &std::path::Path| {
        let f = fixture(31);
        run_spa(
            &f.model,
            &f.vocab,
            RunStart::Seeded {
                init: f.init.clone(),
                seed: f.seed.clone(),
            },
            &f.plan,
            &f.cfg,
            serde_json::json!({"fixture": "tiny"}),
            dir,
        )
        .unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(d1.path());
    let b = run(d2.path());

    assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
    assert_eq!(
        a.manifest.hashed.canonical_json().unwrap(),
        b.manifest.hashed.canonical_json().unwrap()
    );
    for (da, db) in a.datasets.iter().zip(&b.datasets) {
        assert_eq!(da, db);
    }
    assert!(a.final_params.bit_eq(&b.final_params));

    // Dataset files are byte-identical too.
    for t in 1..=2 {
        let fa = std::fs::read(d1.path().join(format!("d_{t}.jsonl"))).unwrap();
        let fb = std::fs::read(d2.path().join(format!("d_{t}.jsonl"))).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn t_zero_returns_pi0_with_seed_stage_only() {
    let f = fixture(37);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_spa(
        &f.model,
        &f.vocab,
        RunStart::Seeded {
            init: f.init.clone(),
            seed: f.seed.clone(),
        },
        &PromptPlan {
            prompt_sets: vec![],
        },
        &f.cfg,
        serde_json::json!({}),
        dir.path(),
    )
    .unwrap();
    assert!(outcome.final_params.bit_eq(&outcome.pi0_params));
    assert!(outcome.datasets.is_empty());
    let stages: Vec<&str> = outcome
        .manifest
        .hashed
        .stages
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    assert_eq!(stages, vec!["seed-dpo"]);
}

#[test]
fn no_seed_mode_runs_without_seed_stage() {
    let f = fixture(41);
    let policy = f.model.init_params::<f32>(900).unwrap();
    let base = f.model.init_params::<f32>(901).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let plan = PromptPlan {
        prompt_sets: vec![f.plan.prompt_sets[0].clone()],
    };
    let outcome = run_spa(
        &f.model,
        &f.vocab,
        RunStart::NoSeed {
            policy: policy.clone(),
            base,
        },
        &plan,
        &f.cfg,
        serde_json::json!({}),
        dir.path(),
    )
    .unwrap();
    assert!(outcome.pi0_params.bit_eq(&policy));
    assert_eq!(outcome.manifest.hashed.stages[0].outcome, "skipped: no-seed mode");
    assert_eq!(outcome.datasets.len(), 1);
}

#[test]
fn prompt_plan_rejects_collisions() {
    let f = fixture(43);
    let mut sets = f.plan.prompt_sets.clone();
    sets[1][0] = sets[0][0].clone();
    let bad = PromptPlan { prompt_sets: sets };
    assert!(bad.validate(&f.seed.prompts()).is_err());

    let mut sets = f.plan.prompt_sets.clone();
    sets[0][0] = f.seed.records[0].prompt.clone();
    let bad = PromptPlan { prompt_sets: sets };
    assert!(bad.validate(&f.seed.prompts()).is_err());
    assert!(f.plan.validate(&f.seed.prompts()).is_ok());
}

#[test]
fn seed_dataset_enforces_label_source_and_uniqueness() {
    let rec = |prompt: &str| PreferenceRecord {
        prompt: prompt.into(),
        chosen: "ab".into(),
        rejected: "ba".into(),
        label_source: LabelSource::SeedGold,
        confidence: None,
        iteration: 0,
    };
    assert!(SeedDataset::new(vec![rec("aa"), rec("bb")]).is_ok());
    assert!(SeedDataset::new(vec![rec("aa"), rec("aa")]).is_err());
    assert!(SeedDataset::new(vec![]).is_err());
    let mut bad = rec("aa");
    bad.label_source = LabelSource::SelfJudged;
    bad.confidence = Some(0.7);
    assert!(SeedDataset::new(vec![bad]).is_err());
}

#[test]
fn forward_probe_of_reference_constant_through_iteration() {
    let f = fixture(47);
    let (pi0, _) = train_initial_dpo(&f.model, &f.vocab, &f.init, &f.seed, &f.cfg).unwrap();
    let (records, _) = expand_iteration(
        &f.model,
        &f.vocab,
        &pi0,
        &f.init,
        &f.plan.prompt_sets[0],
        1,
        &f.cfg.expand_config(),
    )
    .unwrap();
    let probe: Vec<u32> = f.vocab.encode_prompt(&records[0].prompt).unwrap();
    let before_ref = forward(&f.model, &pi0, &probe).unwrap();
    let before_init = forward(&f.model, &f.init, &probe).unwrap();
    let (_pi1, _) =
        train_iteration(&f.model, &f.vocab, &pi0, &f.init, &records, 1, &f.cfg).unwrap();
    let after_ref = forward(&f.model, &pi0, &probe).unwrap();
    let after_init = forward(&f.model, &f.init, &probe).unwrap();
    for (x, y) in before_ref.logits_flat().iter().zip(after_ref.logits_flat()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in before_init
        .logits_flat()
        .iter()
        .zip(after_init.logits_flat())
    {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
