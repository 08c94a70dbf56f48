//! Batch command-line front end. All logic lives in the library; this binary
//! parses flags, resolves the configuration, and dispatches.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use spa_align::commands::{cmd_dpo_seed, cmd_eval, cmd_judge, cmd_sft, cmd_spa_run, CommandReport};
use spa_align::config::{load_config, CliOverrides, RunConfig};
use spa_align::error::Error;

#[derive(Parser)]
#[command(
    name = "spa",
    about = "Self-annotated preference alignment for a micro language model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: std::path::PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the hyper-parameter profile.
    #[arg(long, value_parser = ["paper", "desk"])]
    profile: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,
    /// Override any config value by schema path, e.g. `training.lr=1e-4`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the initial supervised model on gold demonstrations.
    Sft(CommonArgs),
    /// Build oracle-labeled seed pairs and train the starting policy.
    DpoSeed(CommonArgs),
    /// Run the full self-annotation loop.
    SpaRun(CommonArgs),
    /// Win-rate evaluation between two checkpoints on held-out prompts.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Baseline checkpoint path.
        #[arg(long)]
        baseline: Option<String>,
        /// Candidate checkpoint path.
        #[arg(long)]
        candidate: Option<String>,
    },
    /// Label a pair file with the direct-judgment rule.
    Judge {
        #[command(flatten)]
        common: CommonArgs,
        /// Pair file (one JSON object per line: prompt, first, second).
        #[arg(long)]
        pairs: Option<String>,
        /// Policy checkpoint.
        #[arg(long)]
        policy: Option<String>,
        /// Reference checkpoint.
        #[arg(long)]
        reference: Option<String>,
    },
}

fn overrides_of(common: &CommonArgs, extra_sets: Vec<String>) -> CliOverrides {
    let mut sets = common.sets.clone();
    sets.extend(extra_sets);
    CliOverrides {
        seed: common.seed,
        profile: common.profile.clone(),
        out_dir: common.out.clone(),
        sets,
    }
}

fn config_for(common: &CommonArgs, extra_sets: Vec<String>) -> Result<RunConfig, Error> {
    load_config(&common.config, &overrides_of(common, extra_sets))
}

fn quoted(v: &str) -> String {
    format!("{v:?}")
}

fn run() -> Result<CommandReport, Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match cli.command {
        Command::Sft(common) => cmd_sft(&config_for(&common, vec![])?),
        Command::DpoSeed(common) => cmd_dpo_seed(&config_for(&common, vec![])?),
        Command::SpaRun(common) => cmd_spa_run(&config_for(&common, vec![])?),
        Command::Eval {
            common,
            baseline,
            candidate,
        } => {
            let mut sets = Vec::new();
            if let Some(b) = baseline {
                sets.push(format!("eval.baseline_checkpoint={}", quoted(&b)));
            }
            if let Some(c) = candidate {
                sets.push(format!("eval.candidate_checkpoint={}", quoted(&c)));
            }
            cmd_eval(&config_for(&common, sets)?)
        }
        Command::Judge {
            common,
            pairs,
            policy,
            reference,
        } => {
            let mut sets = Vec::new();
            if let Some(p) = pairs {
                sets.push(format!("judge.pairs={}", quoted(&p)));
            }
            if let Some(p) = policy {
                sets.push(format!("judge.policy_checkpoint={}", quoted(&p)));
            }
            if let Some(r) = reference {
                sets.push(format!("judge.reference_checkpoint={}", quoted(&r)));
            }
            cmd_judge(&config_for(&common, sets)?)
        }
    }
}

fn main() {
    match run() {
        Ok(report) => {
            println!("{}: {}", report.name, report.summary);
            for artifact in &report.artifacts {
                println!("  wrote {artifact}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_validation() { 1 } else { 2 });
        }
    }
}
