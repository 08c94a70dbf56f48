//! Synthetic instruction tasks with a programmatic judge.
//!
//! Each task maps a prompt deterministically to exactly one correct output,
//! so an edit-distance score can stand in for a human judge: gold labels for
//! seed data, label-accuracy measurement for self-judged pairs, and win-rate
//! evaluation between checkpoints.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::dataset::{LabelSource, PreferenceRecord};
use crate::error::{Error, Result};
use crate::lm::{sample_response, GenerationConfig, ModelConfig, ParameterStore, Vocabulary};
use crate::seeding::{rng_for, stage};

/// The transformation a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    fn apply(&self, arg: &str) -> String {
        match self {
            TaskKind::Copy => arg.to_string(),
            TaskKind::Reverse => arg.chars().rev().collect(),
            TaskKind::Sort => {
                let mut chars: Vec<char> = arg.chars().collect();
                chars.sort_unstable();
                chars.into_iter().collect()
            }
        }
    }
}

/// A synthetic task: kind, argument alphabet, and argument length range.
/// A prompt is the bare argument string; its unique correct output is the
/// transformed argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alphabet: Vec<char>,
    pub min_len: usize,
    pub max_len: usize,
    pub rng_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config("task.alphabet must be non-empty".into()));
        }
        let unique: HashSet<char> = self.alphabet.iter().copied().collect();
        if unique.len() != self.alphabet.len() {
            return Err(Error::Config("task.alphabet has duplicate symbols".into()));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "task length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// The model vocabulary this task implies: its alphabet plus the control
    /// tokens.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_symbols(self.alphabet.iter().copied())
    }

    /// The unique correct output for a prompt of this task.
    pub fn gold(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() || !prompt.chars().all(|c| self.alphabet.contains(&c)) {
            return Err(Error::invalid_input(
                "prompt",
                format!("{prompt:?} is not a string over the task alphabet"),
            ));
        }
        Ok(self.kind.apply(prompt))
    }

    /// Upper bound on distinct prompts, saturating.
    fn distinct_args(&self) -> usize {
        let mut total: usize = 0;
        for len in self.min_len..=self.max_len {
            let mut n: usize = 1;
            for _ in 0..len {
                n = n.saturating_mul(self.alphabet.len());
            }
            total = total.saturating_add(n);
        }
        total
    }
}

/// Deterministic prompts plus their unique correct outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub prompts: Vec<String>,
    pub golds: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Samples `n_prompts` unique prompts with their gold demonstrations.
pub fn make_corpus(task: &TaskSpec, n_prompts: usize, split_seed: u64) -> Result<Corpus> {
    task.validate()?;
    if n_prompts == 0 {
        return Err(Error::Config("corpus size must be >= 1".into()));
    }
    if task.distinct_args() < n_prompts {
        return Err(Error::Config(format!(
            "alphabet too small: {} distinct prompts exist, {} requested",
            task.distinct_args(),
            n_prompts
        )));
    }
    use rand::Rng;
    let mut rng = rng_for(&[task.rng_seed, stage::CORPUS, split_seed]);
    let mut seen = HashSet::new();
    let mut prompts = Vec::with_capacity(n_prompts);
    let mut golds = Vec::with_capacity(n_prompts);
    let mut attempts: usize = 0;
    let attempt_cap = n_prompts.saturating_mul(200) + 1000;
    while prompts.len() < n_prompts {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(Error::Config(
                "alphabet too small to sample the requested corpus without exhausting retries"
                    .into(),
            ));
        }
        let len = rng.gen_range(task.min_len..=task.max_len);
        let arg: String = (0..len)
            .map(|_| task.alphabet[rng.gen_range(0..task.alphabet.len())])
            .collect();
        if seen.insert(arg.clone()) {
            golds.push(task.kind.apply(&arg));
            prompts.push(arg);
        }
    }
    Ok(Corpus { prompts, golds })
}

/// Requested sizes of the pairwise-disjoint corpus sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub sft: usize,
    pub seed: usize,
    pub iterations: Vec<usize>,
    pub heldout: usize,
}

/// Pairwise-disjoint prompt sections carved from one unique sample.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub sft: Corpus,
    pub seed: Corpus,
    pub iterations: Vec<Corpus>,
    pub heldout: Corpus,
}

pub fn make_splits(task: &TaskSpec, sizes: &SplitSizes, split_seed: u64) -> Result<CorpusSplits> {
    let total = sizes.sft
        + sizes.seed
        + sizes.iterations.iter().sum::<usize>()
        + sizes.heldout;
    let all = make_corpus(task, total, split_seed)?;
    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let c = Corpus {
            prompts: all.prompts[cursor..cursor + n].to_vec(),
            golds: all.golds[cursor..cursor + n].to_vec(),
        };
        cursor += n;
        c
    };
    Ok(CorpusSplits {
        sft: take(sizes.sft),
        seed: take(sizes.seed),
        iterations: sizes.iterations.iter().map(|&n| take(n)).collect(),
        heldout: take(sizes.heldout),
    })
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Negated edit distance to the unique correct output; zero iff exact.
pub fn oracle_score(task: &TaskSpec, prompt: &str, response: &str) -> Result<f64> {
    let gold = task.gold(prompt)?;
    Ok(-(levenshtein(response, &gold) as f64))
}

/// The judge's verdict over one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OraclePreference {
    First,
    Second,
    Tie,
}

/// Higher oracle score wins; equal scores tie.
pub fn oracle_prefer(
    task: &TaskSpec,
    prompt: &str,
    y1: &str,
    y2: &str,
) -> Result<OraclePreference> {
    let s1 = oracle_score(task, prompt, y1)?;
    let s2 = oracle_score(task, prompt, y2)?;
    Ok(if s1 > s2 {
        OraclePreference::First
    } else if s2 > s1 {
        OraclePreference::Second
    } else {
        OraclePreference::Tie
    })
}

/// Fraction of self-judged records whose chosen response the oracle also
/// prefers; oracle ties are excluded from the denominator.
pub fn label_accuracy(task: &TaskSpec, records: &[PreferenceRecord]) -> Result<f64> {
    let mut matches = 0usize;
    let mut counted = 0usize;
    for rec in records {
        match oracle_prefer(task, &rec.prompt, &rec.chosen, &rec.rejected)? {
            OraclePreference::Tie => {}
            OraclePreference::First => {
                counted += 1;
                matches += 1;
            }
            OraclePreference::Second => {
                counted += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Pipeline(
            "label accuracy undefined: every pair ties under the oracle".into(),
        ));
    }
    Ok(matches as f64 / counted as f64)
}

/// Head-to-head evaluation counts and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// Wins of A over the non-tie subset; absent when everything tied.
    pub winrate_a: Option<f64>,
    pub tie_rate: f64,
    pub mean_score_a: f64,
    pub mean_score_b: f64,
    /// Judged-label accuracy against the oracle, when measured.
    pub label_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn consistent(&self) -> bool {
        self.wins_a + self.wins_b + self.ties == self.n
    }
}

/// One evaluated prompt, the row format of the flat CSV report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEvalRow {
    pub prompt_id: usize,
    pub prompt: String,
    pub score_a: f64,
    pub score_b: f64,
    pub winner: String,
}

/// Samples one response per policy per prompt (seeds derived per prompt, the
/// same for both policies) and lets the oracle decide each pair. Ties are
/// excluded from the win rate and reported separately.
#[allow(clippy::too_many_arguments)]
pub fn winrate(
    lm_config: &ModelConfig,
    vocab: &Vocabulary,
    policy_a: &ParameterStore<f32>,
    policy_b: &ParameterStore<f32>,
    task: &TaskSpec,
    prompts: &[String],
    gen: &GenerationConfig,
    eval_seed: u64,
) -> Result<(EvalReport, Vec<PromptEvalRow>)> {
    if prompts.is_empty() {
        return Err(Error::Pipeline("win-rate over zero prompts".into()));
    }
    let mut wins_a = 0;
    let mut wins_b = 0;
    let mut ties = 0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let seed = crate::seeding::derive_seed(&[eval_seed, stage::EVAL, i as u64]);
        let gen_i = GenerationConfig {
            rng_seed: seed,
            ..*gen
        };
        let prompt_tokens = vocab.encode_prompt(prompt)?;
        let resp_a = text_of(vocab, &sample_response(lm_config, policy_a, vocab.eos(), &prompt_tokens, &gen_i)?);
        let resp_b = text_of(vocab, &sample_response(lm_config, policy_b, vocab.eos(), &prompt_tokens, &gen_i)?);
        let score_a = oracle_score(task, prompt, &resp_a)?;
        let score_b = oracle_score(task, prompt, &resp_b)?;
        sum_a += score_a;
        sum_b += score_b;
        let winner = if score_a > score_b {
            wins_a += 1;
            "a"
        } else if score_b > score_a {
            wins_b += 1;
            "b"
        } else {
            ties += 1;
            "tie"
        };
        rows.push(PromptEvalRow {
            prompt_id: i,
            prompt: prompt.clone(),
            score_a,
            score_b,
            winner: winner.to_string(),
        });
    }
    let n = prompts.len();
    let decided = wins_a + wins_b;
    let report = EvalReport {
        n,
        wins_a,
        wins_b,
        ties,
        winrate_a: (decided > 0).then(|| wins_a as f64 / decided as f64),
        tie_rate: ties as f64 / n as f64,
        mean_score_a: sum_a / n as f64,
        mean_score_b: sum_b / n as f64,
        label_accuracy: None,
    };
    Ok((report, rows))
}

/// Text of a sampled token sequence; control tokens carry no symbols and are
/// skipped.
pub fn text_of(vocab: &Vocabulary, tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != vocab.bos() && t != vocab.eos() && t != vocab.pad())
        .filter_map(|&t| vocab.detokenize(&[t]).ok())
        .collect()
}

/// Writes the per-prompt evaluation rows as a flat CSV.
pub fn write_eval_csv(path: impl AsRef<std::path::Path>, rows: &[PromptEvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Pipeline(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Pipeline(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a gold-labeled record from a judged pair; ties yield none.
pub fn gold_record(
    prompt: &str,
    first: &str,
    second: &str,
    preference: OraclePreference,
    source: LabelSource,
    iteration: u32,
) -> Option<PreferenceRecord> {
    let (chosen, rejected) = match preference {
        OraclePreference::First => (first, second),
        OraclePreference::Second => (second, first),
        OraclePreference::Tie => return None,
    };
    Some(PreferenceRecord {
        prompt: prompt.to_string(),
        chosen: chosen.to_string(),
        rejected: rejected.to_string(),
        label_source: source,
        confidence: None,
        iteration,
    })
}
