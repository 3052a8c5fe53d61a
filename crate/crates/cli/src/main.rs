mod commands;
mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

/// In-context RL workbench: distill source-algorithm learning histories into
/// causal sequence models and evaluate them by pure in-context improvement.
#[derive(Parser)]
#[command(name = "adlab", version, about)]
struct Cli {
    /// JSON pipeline config; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the core count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; defaults under $AD_LAB_OUT or ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the source algorithm over sampled train tasks and write the
    /// learning-history dataset.
    GenData {
        /// adversarial_bandit | dark_room | dark_room_hard | dark_key_to_door
        #[arg(long)]
        env: String,
        /// Number of train tasks to run the source algorithm on.
        #[arg(long)]
        tasks: Option<usize>,
        /// Actor streams per task (grid environments).
        #[arg(long)]
        actors: Option<usize>,
        /// Episode budget per actor.
        #[arg(long)]
        episodes: Option<usize>,
        /// Keep every k-th episode of each history.
        #[arg(long)]
        subsample: Option<usize>,
        /// Fraction of tasks held out for evaluation.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Train a sequence model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Context length in episodes (transitions = episodes x horizon).
        #[arg(long)]
        context_episodes: Option<usize>,
        /// Context length in transitions (overrides --context-episodes).
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Train on expert (final-episode) segments only.
        #[arg(long)]
        expert_only: bool,
        /// Final fraction of each history kept for --expert-only.
        #[arg(long, default_value_t = 0.1)]
        expert_fraction: f64,
        /// transformer | recurrent
        #[arg(long, default_value = "transformer")]
        arch: String,
        /// Label smoothing alpha.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        mask_prob: Option<f64>,
        #[arg(long)]
        train_seeds: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        embed: Option<usize>,
        #[arg(long)]
        ff: Option<usize>,
    },
    /// Roll trained models out on held-out tasks and plot learning curves.
    Eval {
        /// Dataset directory (supplies the env and task split).
        #[arg(long)]
        dataset: PathBuf,
        /// Comma list drawn from: ad, ed, recurrent, source, random.
        #[arg(long, default_value = "ad")]
        agents: String,
        /// Train-output directory for the ad agent.
        #[arg(long)]
        ad_model: Option<PathBuf>,
        /// Train-output directory for the ed agent.
        #[arg(long)]
        ed_model: Option<PathBuf>,
        /// Train-output directory for the recurrent agent.
        #[arg(long)]
        recurrent_model: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        eval_seeds: Option<usize>,
        /// Pre-fill the context with a demo: near_random | mid | near_expert.
        #[arg(long)]
        prompt: Option<String>,
        /// Report bandit scores normalized against UCB and random play.
        #[arg(long)]
        normalize: Option<String>,
        /// Argmax action selection instead of sampling.
        #[arg(long)]
        greedy: bool,
        /// Export attention maps from the final evaluation context.
        #[arg(long)]
        attention: bool,
    },
    /// Sweep one pipeline dimension end to end.
    Ablate {
        /// context_size | n_tasks | model_size | mask_prob | label_smoothing | architecture
        dimension: String,
        /// Comma-separated sweep values.
        values: String,
        #[arg(long, default_value = "dark_room")]
        env: String,
    },
    /// Run the verification suite and print a pass/fail table.
    Report {
        /// Comma list of criterion ids (default: all).
        #[arg(long)]
        criteria: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("worker pool already initialized");
    }
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    let ctx = commands::Ctx::new(cli.config, cli.seed, cli.out)?;
    match cli.command {
        Command::GenData {
            env,
            tasks,
            actors,
            episodes,
            subsample,
            holdout,
        } => commands::gen_data(ctx, &env, tasks, actors, episodes, subsample, holdout),
        Command::Train {
            dataset,
            context_episodes,
            context,
            steps,
            batch,
            expert_only,
            expert_fraction,
            arch,
            alpha,
            mask_prob,
            train_seeds,
            layers,
            embed,
            ff,
        } => commands::train(
            ctx,
            &dataset,
            commands::TrainFlags {
                context_episodes,
                context,
                steps,
                batch,
                expert_only,
                expert_fraction,
                arch,
                alpha,
                mask_prob,
                train_seeds,
                layers,
                embed,
                ff,
            },
        ),
        Command::Eval {
            dataset,
            agents,
            ad_model,
            ed_model,
            recurrent_model,
            episodes,
            eval_seeds,
            prompt,
            normalize,
            greedy,
            attention,
        } => commands::eval(
            ctx,
            &dataset,
            commands::EvalFlags {
                agents,
                ad_model,
                ed_model,
                recurrent_model,
                episodes,
                eval_seeds,
                prompt,
                normalize,
                greedy,
                attention,
            },
        ),
        Command::Ablate { dimension, values, env } => {
            commands::ablate(ctx, &dimension, &values, &env)
        }
        Command::Report { criteria } => commands::report(ctx, criteria.as_deref()),
    }
}
