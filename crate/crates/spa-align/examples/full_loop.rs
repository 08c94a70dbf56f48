//! The whole loop at desk scale: supervised fine-tuning, oracle-labeled seed
//! pairs, seed preference optimization, two self-annotation iterations, and
//! oracle win-rate evaluation of every stage.
//!
//!     cargo run --release -p spa-align --example full_loop
//!
//! Pass a directory argument to keep the artifacts.

use spa_align::lm::{GenerationConfig, ModelConfig};
use spa_align::oracle::{label_accuracy, make_splits, winrate, SplitSizes, TaskKind, TaskSpec};
use spa_align::pipeline::{
    build_seed_dataset, run_spa, train_sft, FlagReference, PipelineConfig, PromptPlan, RunStart,
    SeedDataset, TauMode, TrainKnobs,
};
use spa_align::pref::RefinementConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let keep_dir = std::env::args().nth(1);
    let tmp;
    let out_dir = match &keep_dir {
        Some(d) => std::path::PathBuf::from(d),
        None => {
            tmp = tempfile_dir()?;
            tmp.clone()
        }
    };
    let run_seed = std::env::args()
        .nth(2)
        .map(|s| s.parse::<u64>())
        .transpose()?
        .unwrap_or(42);

    let max_len = std::env::args()
        .nth(10)
        .map(|s| s.parse::<usize>().unwrap())
        .unwrap_or(12);
    let kind = match std::env::args().nth(11).as_deref() {
        Some("copy") => TaskKind::Copy,
        Some("sort") => TaskKind::Sort,
        _ => TaskKind::Reverse,
    };
    let alphabet = std::env::args().nth(16).unwrap_or_else(|| "abcdefgh".into());
    let min_len = std::env::args()
        .nth(17)
        .map(|s| s.parse::<usize>().unwrap())
        .unwrap_or(4);
    let task = TaskSpec {
        kind,
        alphabet: alphabet.chars().collect(),
        min_len,
        max_len,
        rng_seed: run_seed,
    };
    let vocab = task.vocabulary()?;
    let model = ModelConfig {
        vocab_size: vocab.size(),
        context_length: 96,
        d_model: std::env::args()
            .nth(19)
            .map(|s| s.parse::<usize>().unwrap())
            .unwrap_or(64),
        n_layers: 2,
        n_heads: 4,
        tie_output: false,
    };
    println!(
        "model: {} parameters, vocab {}",
        model.param_count(),
        vocab.size()
    );

    let splits = make_splits(
        &task,
        &SplitSizes {
            sft: std::env::args()
                .nth(4)
                .map(|s| s.parse::<usize>().unwrap())
                .unwrap_or(1024),
            seed: 512,
            iterations: vec![512, 1024],
            heldout: 200,
        },
        1,
    )?;

    let cfg = PipelineConfig {
        beta: std::env::args()
            .nth(14)
            .map(|s| s.parse::<f64>().unwrap())
            .unwrap_or(0.1),
        refinement: RefinementConfig::default(),
        tau_mode: TauMode::Sma,
        flag_reference: FlagReference::TrainingRef,
        temperature: 0.7,
        max_new_tokens: std::env::args()
            .nth(7)
            .map(|s| s.parse::<usize>().unwrap())
            .unwrap_or(64),
        length_penalty: std::env::args()
            .nth(5)
            .map(|s| s.parse::<f64>().unwrap())
            .unwrap_or(0.0),
        seed_attempts: std::env::args()
            .nth(12)
            .map(|s| s.parse::<u64>().unwrap())
            .unwrap_or(2),
        seed_temperature: std::env::args()
            .nth(9)
            .map(|s| s.parse::<f64>().unwrap())
            .unwrap_or(0.7),
        knobs: TrainKnobs {
            lr: std::env::args()
                .nth(6)
                .map(|s| s.parse::<f64>().unwrap())
                .unwrap_or(3e-4),
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
        },
        iteration_lr: std::env::args()
            .nth(18)
            .and_then(|s| s.parse::<f64>().ok()),
        seed_epochs: std::env::args()
            .nth(8)
            .map(|s| s.parse::<usize>().unwrap())
            .unwrap_or(3),
        iteration_epochs: 1,
        run_seed,
    };

    let t0 = std::time::Instant::now();
    let init = model.init_params::<f32>(run_seed)?;
    let sft_knobs = TrainKnobs {
        lr: 1e-3,
        ..cfg.knobs
    };
    let sft_epochs = std::env::args()
        .nth(3)
        .map(|s| s.parse::<usize>())
        .transpose()?
        .unwrap_or(6);
    let (sft, sft_trace) =
        train_sft(&model, &vocab, &splits.sft, sft_epochs, &sft_knobs, run_seed, init)?;
    println!(
        "sft: {} steps, final loss {:.4}, heldout exact {:.3} [{:.1?}]",
        sft_trace.total_steps(),
        sft_trace.final_loss,
        exactness(&model, &vocab, &sft, &task, &splits.heldout.prompts[..100])?,
        t0.elapsed()
    );

    let seed_style = std::env::args().nth(13).unwrap_or_else(|| "sample".into());
    let seed_records = match seed_style.as_str() {
        "sample" => build_seed_dataset(
            &model,
            &vocab,
            &sft,
            &task,
            &splits.seed.prompts,
            256,
            &cfg.seed_expand_config(),
        )?,
        style => {
            use spa_align::dataset::{LabelSource, PreferenceRecord};
            let prompts = &splits.seed.prompts;
            let mut recs = Vec::new();
            for (i, prompt) in prompts.iter().enumerate() {
                if recs.len() == 256 {
                    break;
                }
                let gold = task.gold(prompt)?;
                let rejected = match style {
                    "mismatch" => task.gold(&prompts[(i + 1) % prompts.len()])?,
                    "identity" => prompt.clone(),
                    "pool" => {
                        use spa_align::oracle::{oracle_score, text_of};
                        use spa_align::lm::{sample_response, GenerationConfig};
                        use spa_align::seeding::derive_seed;
                        let ptoks = vocab.encode_prompt(prompt)?;
                        let temps = [0.5, 0.7, 1.0, 1.3];
                        let mut best: Option<(f64, String)> = None;
                        let mut worst: Option<(f64, String)> = None;
                        for (k, &temp) in temps.iter().enumerate() {
                            let g = GenerationConfig {
                                temperature: temp,
                                max_new_tokens: cfg.max_new_tokens,
                                rng_seed: derive_seed(&[run_seed, 78, i as u64, k as u64]),
                            };
                            let y = text_of(&vocab, &sample_response(&model, &sft, vocab.eos(), &ptoks, &g)?);
                            if y.is_empty() {
                                continue;
                            }
                            let sc = oracle_score(&task, prompt, &y)?;
                            if best.as_ref().map_or(true, |(b, _)| sc > *b) {
                                best = Some((sc, y.clone()));
                            }
                            if worst.as_ref().map_or(true, |(w, _)| sc < *w) {
                                worst = Some((sc, y));
                            }
                        }
                        if let (Some((bs, by)), Some((ws, wy))) = (best, worst) {
                            if bs > ws && by != wy {
                                recs.push(PreferenceRecord {
                                    prompt: prompt.clone(),
                                    chosen: by,
                                    rejected: wy,
                                    label_source: LabelSource::SeedGold,
                                    confidence: None,
                                    iteration: 0,
                                });
                            }
                        }
                        continue;
                    }
                    "pairs" => {
                        use spa_align::oracle::{oracle_prefer, OraclePreference};
                        use spa_align::lm::{sample_response, GenerationConfig};
                        use spa_align::oracle::text_of;
                        use spa_align::seeding::derive_seed;
                        let ptoks = vocab.encode_prompt(prompt)?;
                        let mut found = None;
                        for attempt in 0..4u64 {
                            let draw = |k: u64| -> Result<String, Box<dyn std::error::Error>> {
                                let g = GenerationConfig {
                                    temperature: cfg.seed_temperature,
                                    max_new_tokens: cfg.max_new_tokens,
                                    rng_seed: derive_seed(&[run_seed, 77, i as u64, attempt, k]),
                                };
                                Ok(text_of(&vocab, &sample_response(&model, &sft, vocab.eos(), &ptoks, &g)?))
                            };
                            let y1 = draw(1)?;
                            let y2 = draw(2)?;
                            if y1.is_empty() || y2.is_empty() || y1 == y2 {
                                continue;
                            }
                            match oracle_prefer(&task, prompt, &y1, &y2)? {
                                OraclePreference::First => { found = Some((y1, y2)); break; }
                                OraclePreference::Second => { found = Some((y2, y1)); break; }
                                OraclePreference::Tie => continue,
                            }
                        }
                        match found {
                            Some((c, r)) => {
                                recs.push(PreferenceRecord {
                                    prompt: prompt.clone(),
                                    chosen: c,
                                    rejected: r,
                                    label_source: LabelSource::SeedGold,
                                    confidence: None,
                                    iteration: 0,
                                });
                            }
                            None => {}
                        }
                        continue;
                    }
                    "truncate" => {
                        let keep = 1 + i % 3;
                        gold.chars().take(keep).collect::<String>()
                    }
                    "suffix" => {
                        let cut = 1 + i % 2;
                        gold.chars().skip(cut).collect::<String>()
                    }
                    "mix" => match i % 3 {
                        0 => task.gold(&prompts[(i + 1) % prompts.len()])?,
                        1 => prompt.clone(),
                        _ => {
                            let seed_cfg = cfg.seed_expand_config();
                            let one = build_seed_dataset(
                                &model, &vocab, &sft, &task,
                                &prompts[i..i + 1], 1, &seed_cfg,
                            );
                            match one {
                                Ok(mut v) => v.remove(0).rejected,
                                Err(_) => continue,
                            }
                        }
                    },
                    other => panic!("unknown seed style {other}"),
                };
                if rejected == gold {
                    continue;
                }
                recs.push(PreferenceRecord {
                    prompt: prompt.clone(),
                    chosen: gold,
                    rejected,
                    label_source: LabelSource::SeedGold,
                    confidence: None,
                    iteration: 0,
                });
            }
            recs
        }
    };
    println!("seed pairs: {} [{:.1?}]", seed_records.len(), t0.elapsed());
    let seed = SeedDataset::new(seed_records)?;

    let plan = PromptPlan {
        prompt_sets: splits.iterations.iter().map(|c| c.prompts.clone()).collect(),
    };
    let cheat = std::env::args().nth(15).as_deref() == Some("cheat");
    let outcome = if !cheat {
        run_spa(
            &model,
            &vocab,
            RunStart::Seeded {
                init: sft.clone(),
                seed,
            },
            &plan,
            &cfg,
            serde_json::json!({"example": "full_loop", "run_seed": run_seed}),
            &out_dir,
        )?
    } else {
        // Cheat mode: oracle labels replace self-judgment, isolating the
        // training dynamics from label quality.
        use spa_align::oracle::{oracle_prefer, OraclePreference};
        use spa_align::pipeline::{expand_iteration, train_iteration, train_initial_dpo};
        let (pi0, _) = train_initial_dpo(&model, &vocab, &sft, &seed, &cfg)?;
        let mut policy = pi0.clone();
        let mut datasets = Vec::new();
        for (idx, prompts) in plan.prompt_sets.iter().enumerate() {
            let t = (idx + 1) as u32;
            let (mut records, _) = expand_iteration(
                &model, &vocab, &policy, &sft, prompts, t, &cfg.expand_config(),
            )?;
            let mut kept = Vec::new();
            for mut r in records.drain(..) {
                match oracle_prefer(&task, &r.prompt, &r.chosen, &r.rejected)? {
                    OraclePreference::First => kept.push(r),
                    OraclePreference::Second => {
                        std::mem::swap(&mut r.chosen, &mut r.rejected);
                        kept.push(r);
                    }
                    OraclePreference::Tie => {}
                }
            }
            let (next, _) = train_iteration(&model, &vocab, &policy, &sft, &kept, t, &cfg)?;
            datasets.push(kept);
            policy = next;
        }
        spa_align::pipeline::RunOutcome {
            final_params: policy,
            pi0_params: pi0,
            manifest: spa_align::pipeline::RunManifest::finalize(
                spa_align::pipeline::ManifestBody::new(run_seed, serde_json::json!({})),
            )?,
            datasets,
        }
    };
    println!("loop finished [{:.1?}]", t0.elapsed());
    for stats in &outcome.manifest.hashed.iteration_stats {
        println!(
            "  iteration {}: lambda {:.3}, {} records ({} dropped), mean judge conf {:.4}, \
             detector flag rate {:.3?}, {} applied flags, final loss {:.4}",
            stats.t,
            stats.lambda,
            stats.dataset_size,
            stats.dropped_prompts,
            stats.mean_judge_confidence,
            stats.detector_flag_rate,
            stats.applied_flags,
            stats.final_loss
        );
    }

    let acc = label_accuracy(&task, &outcome.datasets[0])?;
    println!("iteration-1 judged-label accuracy vs oracle: {acc:.4}");
    for (t, ds) in outcome.datasets.iter().enumerate() {
        let mut longer = 0;
        let mut shorter = 0;
        let mut equal = 0;
        let mut eq_match = 0;
        let mut eq_counted = 0;
        let mut neq_match = 0;
        let mut neq_counted = 0;
        for r in ds.iter() {
            let lc = r.chosen.chars().count();
            let lr = r.rejected.chars().count();
            let cmp = lc.cmp(&lr);
            match cmp {
                std::cmp::Ordering::Greater => longer += 1,
                std::cmp::Ordering::Less => shorter += 1,
                std::cmp::Ordering::Equal => equal += 1,
            }
            use spa_align::oracle::{oracle_prefer, OraclePreference};
            match oracle_prefer(&task, &r.prompt, &r.chosen, &r.rejected)? {
                OraclePreference::Tie => {}
                pref => {
                    let hit = pref == OraclePreference::First;
                    if cmp == std::cmp::Ordering::Equal {
                        eq_counted += 1;
                        eq_match += usize::from(hit);
                    } else {
                        neq_counted += 1;
                        neq_match += usize::from(hit);
                    }
                }
            }
        }
        println!(
            "  D_{}: chosen longer/shorter/equal {}/{}/{}; label acc equal-len {:.3} ({}), unequal {:.3} ({})",
            t + 1,
            longer,
            shorter,
            equal,
            eq_match as f64 / eq_counted.max(1) as f64,
            eq_counted,
            neq_match as f64 / neq_counted.max(1) as f64,
            neq_counted
        );
    }

    let gen = GenerationConfig {
        temperature: 0.7,
        max_new_tokens: 64,
        rng_seed: 0,
    };
    {
        let (r, _) = winrate(
            &model, &vocab, &outcome.pi0_params, &sft, &task,
            &splits.heldout.prompts, &gen, run_seed,
        )?;
        println!(
            "pi0 vs sft: winrate {:?} (w{} l{} t{}), scores {:.3} vs {:.3}",
            r.winrate_a, r.wins_a, r.wins_b, r.ties, r.mean_score_a, r.mean_score_b
        );
    }
    for (name, baseline) in [("sft", &sft), ("seed-dpo", &outcome.pi0_params)] {
        let (report, _) = winrate(
            &model,
            &vocab,
            &outcome.final_params,
            baseline,
            &task,
            &splits.heldout.prompts,
            &gen,
            run_seed,
        )?;
        println!(
            "final vs {name}: winrate {:?} (wins {} / losses {} / ties {}), mean scores {:.3} vs {:.3}",
            report.winrate_a, report.wins_a, report.wins_b, report.ties,
            report.mean_score_a, report.mean_score_b
        );
    }
    println!("total {:.1?}; artifacts in {}", t0.elapsed(), out_dir.display());
    Ok(())
}

/// Fraction of prompts answered exactly, sampling one response at 0.7.
fn exactness(
    model: &ModelConfig,
    vocab: &spa_align::lm::Vocabulary,
    params: &spa_align::lm::ParameterStore<f32>,
    task: &TaskSpec,
    prompts: &[String],
) -> Result<f64, Box<dyn std::error::Error>> {
    use spa_align::oracle::{oracle_score, text_of};
    let mut exact = 0usize;
    for (i, p) in prompts.iter().enumerate() {
        let gen = GenerationConfig {
            temperature: 0.7,
            max_new_tokens: 64,
            rng_seed: spa_align::seeding::derive_seed(&[999, i as u64]),
        };
        let toks =
            spa_align::lm::sample_response(model, params, vocab.eos(), &vocab.encode_prompt(p)?, &gen)?;
        if oracle_score(task, p, &text_of(vocab, &toks))? == 0.0 {
            exact += 1;
        }
    }
    Ok(exact as f64 / prompts.len() as f64)
}

fn tempfile_dir() -> Result<std::path::PathBuf, std::io::Error> {
    let dir = std::env::temp_dir().join(format!("spa-full-loop-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
