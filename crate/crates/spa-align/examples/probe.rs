//! Scratch: does the implicit reward of (stronger model, weaker reference)
//! prefer gold responses over corruptions? (temporary)

use spa_align::lm::{ModelConfig, GenerationConfig};
use spa_align::oracle::{make_splits, text_of, SplitSizes, TaskKind, TaskSpec};
use spa_align::pipeline::{train_sft, TrainKnobs};
use spa_align::pref::{judge, BetaParam, LogRatioPair, Winner};
use spa_align::lm::{sample_response, sequence_logprob};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = TaskSpec {
        kind: TaskKind::Reverse,
        alphabet: "abcdefgh".chars().collect(),
        min_len: 4,
        max_len: 12,
        rng_seed: 42,
    };
    let vocab = task.vocabulary()?;
    let model = ModelConfig {
        vocab_size: vocab.size(),
        context_length: 96,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        tie_output: false,
    };
    let splits = make_splits(
        &task,
        &SplitSizes { sft: 384, seed: 0, iterations: vec![], heldout: 200 },
        1,
    )?;
    let knobs = TrainKnobs { lr: 1e-3, batch_size: 16, warmup_fraction: 0.1, weight_decay: 0.0 };
    let weak_ep: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let strong_ep: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(36);
    let sft_n: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(384);
    let splits = make_splits(
        &task,
        &SplitSizes { sft: sft_n, seed: 0, iterations: vec![], heldout: 200 },
        1,
    )?;
    let init = model.init_params::<f32>(42)?;
    let (weak, _) = train_sft(&model, &vocab, &splits.sft, weak_ep, &knobs, 42, init)?;
    let (strong, _) = train_sft(&model, &vocab, &splits.sft, strong_ep, &knobs, 43, weak.clone())?;
    eprintln!("weak/strong trained");

    let beta = BetaParam::new(0.1)?;
    let mut gold_wins = 0usize;
    let mut n = 0usize;
    let mut sample_better_wins = 0usize;
    let mut sample_n = 0usize;
    for (i, prompt) in splits.heldout.prompts.iter().enumerate() {
        let gold = task.gold(prompt)?;
        // Corruption: swap two middle characters (distance 2).
        let mut chars: Vec<char> = gold.chars().collect();
        if chars.len() >= 3 {
            chars.swap(0, 1);
        }
        let bad: String = chars.iter().collect();
        if bad == gold {
            continue;
        }
        let p = vocab.encode_prompt(prompt)?;
        let g = vocab.encode_response(&gold)?;
        let b = vocab.encode_response(&bad)?;
        let pair_g = LogRatioPair::new(
            sequence_logprob(&model, &strong, &p, &g)?,
            sequence_logprob(&model, &weak, &p, &g)?,
        )?;
        let pair_b = LogRatioPair::new(
            sequence_logprob(&model, &strong, &p, &b)?,
            sequence_logprob(&model, &weak, &p, &b)?,
        )?;
        let (w, _) = judge(&pair_g, &pair_b, beta);
        gold_wins += usize::from(w == Winner::First);
        n += 1;

        // Also: two samples from the strong model, judged strong-vs-weak.
        let gen = |k: u64| GenerationConfig {
            temperature: 0.7,
            max_new_tokens: 24,
            rng_seed: 1000 + 2 * i as u64 + k,
        };
        let y1 = text_of(&vocab, &sample_response(&model, &strong, vocab.eos(), &p, &gen(0))?);
        let y2 = text_of(&vocab, &sample_response(&model, &strong, vocab.eos(), &p, &gen(1))?);
        if y1 != y2 && !y1.is_empty() && !y2.is_empty() {
            use spa_align::oracle::{oracle_prefer, OraclePreference};
            let pref = oracle_prefer(&task, prompt, &y1, &y2)?;
            if pref != OraclePreference::Tie {
                let t1 = vocab.encode_response(&y1)?;
                let t2 = vocab.encode_response(&y2)?;
                let p1 = LogRatioPair::new(
                    sequence_logprob(&model, &strong, &p, &t1)?,
                    sequence_logprob(&model, &weak, &p, &t1)?,
                )?;
                let p2 = LogRatioPair::new(
                    sequence_logprob(&model, &strong, &p, &t2)?,
                    sequence_logprob(&model, &weak, &p, &t2)?,
                )?;
                let (w, _) = judge(&p1, &p2, beta);
                let judged_first = w == Winner::First;
                let oracle_first = pref == OraclePreference::First;
                sample_better_wins += usize::from(judged_first == oracle_first);
                sample_n += 1;
            }
        }
    }
    println!(
        "gold-vs-corruption: {}/{} = {:.3}",
        gold_wins,
        n,
        gold_wins as f64 / n as f64
    );
    println!(
        "sampled-pair agreement with oracle: {}/{} = {:.3}",
        sample_better_wins,
        sample_n,
        sample_better_wins as f64 / sample_n as f64
    );
    Ok(())
}
