//! End-to-end orchestration: task splits, dataset generation, multi-seed
//! training, and multi-seed in-context evaluation. The CLI, the ablation
//! driver, and the verification suite all run through this module.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{sample_task, EnvId, Split, TaskSplit};
use crate::error::Result;
use crate::eval::{aggregate, rollout, ActionSelection, AgentKind, EvalReport, EvalRun};
use crate::history::{split_tasks, HistoryDataset, LearningHistory};
use crate::model::{ModelArch, PolicyModel, RecurrentConfig, TransformerConfig};
use crate::rng::labeled_rng;
use crate::source::{collect_histories, run_ucb, subsample_history, A3CConfig, TaskTrainStats};
use crate::trainer::{train, TrainConfig, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_episodes: usize,
    pub train_seeds: usize,
    pub eval_seeds: usize,
    pub selection: ActionSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub env_id: EnvId,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub n_tasks: usize,
    pub a3c: A3CConfig,
    pub ucb_explore: f64,
    /// Keep every k-th episode of each history (1 = off).
    pub subsample_k: usize,
    pub model: TransformerConfig,
    pub arch: ModelArch,
    /// For the recurrent architecture dimension of ablations.
    pub recurrent: RecurrentConfig,
    pub train: TrainConfig,
    /// Train on only the final fraction of each history (expert distillation).
    pub expert_fraction: Option<f64>,
    pub eval: EvalProtocol,
}

impl PipelineConfig {
    /// Desk-scale defaults: small actor counts and budgets that run on a
    /// laptop-class CPU while preserving the published architecture shape
    /// where it matters (context arithmetic, per-env alpha and mask rates).
    pub fn desk_default(env_id: EnvId, seed: u64) -> Self {
        let horizon = env_id.horizon();
        let (n_tasks, actors, episodes, context_episodes) = match env_id {
            EnvId::AdversarialBandit => (400, 1, 1, 1),
            EnvId::DarkRoom => (65, 8, 400, 4),
            EnvId::DarkRoomHard => (180, 8, 700, 4),
            EnvId::DarkKeyToDoor => (64, 6, 400, 2),
        };
        let context = match env_id {
            EnvId::AdversarialBandit => 60,
            _ => context_episodes * horizon,
        };
        let total_steps = match env_id {
            EnvId::AdversarialBandit => 1200,
            _ => 2200,
        };
        let model = TransformerConfig {
            num_layers: 2,
            ff_dim: 256,
            ..TransformerConfig::for_env(env_id, context)
        };
        let train = TrainConfig {
            batch_size: 16,
            ..TrainConfig::for_env(env_id, total_steps, seed)
        };
        Self {
            env_id,
            seed,
            holdout_fraction: match env_id {
                EnvId::DarkKeyToDoor => 1.0 - 2000.0 / 6561.0,
                _ => 0.2,
            },
            n_tasks,
            a3c: A3CConfig {
                num_actors: actors,
                episodes_per_run: episodes,
                learning_rate: 2e-3,
                ..A3CConfig::default()
            },
            ucb_explore: crate::source::UCB_DEFAULT_EXPLORE,
            subsample_k: 1,
            model,
            arch: ModelArch::Transformer,
            recurrent: RecurrentConfig {
                embed_dim: 64,
                hidden_size: 128,
                mlp_depth: 2,
                mlp_width: 128,
            },
            train,
            expert_fraction: None,
            eval: EvalProtocol {
                n_episodes: if env_id == EnvId::AdversarialBandit { 1 } else { 120 },
                train_seeds: 2,
                eval_seeds: 10,
                selection: ActionSelection::Sample,
            },
        }
    }

    pub fn split(&self) -> Result<TaskSplit> {
        split_tasks(
            self.env_id,
            self.holdout_fraction,
            &mut labeled_rng(self.seed, "split", 0),
        )
    }
}

/// Stage 1: run the source algorithm over sampled train tasks and collect
/// every actor's learning history.
pub fn generate_dataset(
    config: &PipelineConfig,
    split: &TaskSplit,
) -> Result<(HistoryDataset, Vec<TaskTrainStats>)> {
    let gen_seed = labeled_rng(config.seed, "gen", 0).gen();
    let (histories, stats) = if config.env_id == EnvId::AdversarialBandit {
        let tasks = crate::history::choose_train_tasks(
            split,
            config.n_tasks,
            &mut labeled_rng(config.seed, "gen-tasks", 0),
        )?;
        let histories: Vec<LearningHistory> = tasks
            .par_iter()
            .map(|t| run_ucb(t, EnvId::AdversarialBandit.horizon(), config.ucb_explore))
            .collect::<Result<_>>()?;
        (histories, Vec::new())
    } else {
        collect_histories(split, config.n_tasks, &config.a3c, gen_seed)?
    };
    let histories = if config.subsample_k > 1 {
        histories
            .iter()
            .map(|h| subsample_history(h, config.subsample_k))
            .collect::<Result<_>>()?
    } else {
        histories
    };
    let gen_config = serde_json::json!({
        "n_tasks": config.n_tasks,
        "num_actors": config.a3c.num_actors,
        "episodes_per_run": config.a3c.episodes_per_run,
        "subsample_k": config.subsample_k,
        "ucb_explore": config.ucb_explore,
        "seed": config.seed,
    });
    let dataset = HistoryDataset::new(config.env_id, split.clone(), gen_config, histories);
    dataset.validate()?;
    Ok((dataset, stats))
}

/// Stage 2: train `eval.train_seeds` models (expert-filtered first if this
/// is an ED run).
pub fn train_models(
    config: &PipelineConfig,
    dataset: &HistoryDataset,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainOutput>> {
    let source = match config.expert_fraction {
        Some(fraction) => {
            let min_episodes = dataset
                .histories
                .iter()
                .map(LearningHistory::num_episodes)
                .min()
                .unwrap_or(0);
            let needed = config
                .model
                .context_transitions
                .div_ceil(config.env_id.horizon());
            let m = ((min_episodes as f64 * fraction).round() as usize).max(needed);
            crate::history::make_expert_dataset(dataset, m, config.model.context_transitions)?
        }
        None => dataset.clone(),
    };
    (0..config.eval.train_seeds)
        .map(|t| {
            let mut tc = config.train.clone();
            tc.seed = labeled_rng(config.seed, "train", t as u64).gen();
            let dir = out_dir.map(|d| d.join(format!("train_seed_{t}")));
            train(&source, &config.model, config.arch.clone(), &tc, dir.as_deref())
        })
        .collect()
}

/// Stage 3: roll each trained model out on freshly sampled test tasks.
/// Eval seeds share task draws across models and agents.
pub fn evaluate_models(
    config: &PipelineConfig,
    models: &[PolicyModel],
    split: &TaskSplit,
    agent: AgentKind,
) -> Result<(Vec<EvalRun>, EvalReport)> {
    evaluate_models_on(config, models, split, Split::Test, agent)
}

/// `evaluate_models` on a chosen side of the split (the bandit's
/// in-distribution evaluation samples the train side).
pub fn evaluate_models_on(
    config: &PipelineConfig,
    models: &[PolicyModel],
    split: &TaskSplit,
    side: Split,
    agent: AgentKind,
) -> Result<(Vec<EvalRun>, EvalReport)> {
    let c = config.model.context_transitions;
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|t| (0..config.eval.eval_seeds as u64).map(move |s| (t, s)))
        .collect();
    let runs: Vec<EvalRun> = jobs
        .par_iter()
        .map(|&(t, s)| {
            let task = sample_task(
                side,
                split,
                &mut labeled_rng(config.seed, "eval-task", s),
            )?;
            let mut run = rollout(
                &models[t],
                &task,
                config.eval.n_episodes,
                c,
                labeled_rng(config.seed, "eval-run", s).gen(),
                config.eval.selection,
            )?;
            run.agent = agent;
            run.train_seed = t as u64;
            Ok(run)
        })
        .collect::<Result<_>>()?;
    let report = aggregate(
        &runs,
        serde_json::json!({
            "agent": agent,
            "env_id": config.env_id,
            "train_seeds": models.len(),
            "eval_seeds": config.eval.eval_seeds,
            "selection": config.eval.selection,
        }),
    )?;
    Ok((runs, report))
}

/// Fresh single-stream source-algorithm runs on test tasks, reported on the
/// same per-episode axis as model rollouts (data-efficiency baseline).
pub fn source_baseline_runs(
    config: &PipelineConfig,
    split: &TaskSplit,
    n_episodes: usize,
) -> Result<(Vec<EvalRun>, EvalReport)> {
    let a3c = A3CConfig {
        num_actors: 1,
        episodes_per_run: n_episodes,
        converge_within: None,
        ..config.a3c.clone()
    };
    let jobs: Vec<u64> = (0..config.eval.eval_seeds as u64).collect();
    let runs: Vec<EvalRun> = jobs
        .par_iter()
        .map(|&s| {
            let task = sample_task(
                Split::Test,
                split,
                &mut labeled_rng(config.seed, "eval-task", s),
            )?;
            let (histories, _) = crate::source::train_single_task(
                &task,
                &a3c,
                labeled_rng(config.seed, "source-baseline", s).gen(),
            )?;
            Ok(EvalRun {
                task,
                returns: histories[0].episode_returns(),
                train_seed: 0,
                eval_seed: s,
                agent: AgentKind::Source,
                prompt: None,
            })
        })
        .collect::<Result<_>>()?;
    let report = aggregate(
        &runs,
        serde_json::json!({"agent": "source", "env_id": config.env_id, "single_stream": true}),
    )?;
    Ok((runs, report))
}

/// Uniform-random policy on test tasks, same axes as model rollouts.
pub fn random_baseline_runs(
    config: &PipelineConfig,
    split: &TaskSplit,
    n_episodes: usize,
) -> Result<(Vec<EvalRun>, EvalReport)> {
    let jobs: Vec<u64> = (0..config.eval.eval_seeds as u64).collect();
    let runs: Vec<EvalRun> = jobs
        .par_iter()
        .map(|&s| {
            let task = sample_task(
                Split::Test,
                split,
                &mut labeled_rng(config.seed, "eval-task", s),
            )?;
            let mut env = crate::env::make_env(&task)?;
            let mut rng = labeled_rng(config.seed, "random-baseline", s);
            let n_actions = env.num_actions();
            let horizon = env.horizon();
            let returns = (0..n_episodes)
                .map(|_| {
                    env.reset();
                    let mut total = 0.0f32;
                    for _ in 0..horizon {
                        total += env.step(rng.gen_range(0..n_actions))?.reward;
                    }
                    Ok(total)
                })
                .collect::<Result<_>>()?;
            Ok(EvalRun {
                task,
                returns,
                train_seed: 0,
                eval_seed: s,
                agent: AgentKind::Random,
                prompt: None,
            })
        })
        .collect::<Result<_>>()?;
    let report = aggregate(&runs, serde_json::json!({"agent": "random"}))?;
    Ok((runs, report))
}

/// Demonstration-prompted evaluation: a fresh source run on each test task
/// supplies the demo, sliced at `stage` of its learning history.
pub fn prompted_runs(
    config: &PipelineConfig,
    models: &[PolicyModel],
    split: &TaskSplit,
    agent: AgentKind,
    stage: f64,
) -> Result<(Vec<EvalRun>, EvalReport)> {
    let c = config.model.context_transitions;
    let demo_a3c = A3CConfig {
        num_actors: 1,
        ..config.a3c.clone()
    };
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|t| (0..config.eval.eval_seeds as u64).map(move |s| (t, s)))
        .collect();
    let runs: Vec<EvalRun> = jobs
        .par_iter()
        .map(|&(t, s)| {
            let task = sample_task(
                Split::Test,
                split,
                &mut labeled_rng(config.seed, "eval-task", s),
            )?;
            // Demo comes from the task's own source history, not from the
            // training set: a held-out-task demonstration.
            let (histories, _) = crate::source::train_single_task(
                &task,
                &demo_a3c,
                labeled_rng(config.seed, "demo-source", s).gen(),
            )?;
            let demo = crate::eval::demo_from_history(&histories[0], stage, c);
            let mut run = crate::eval::prompt_rollout(
                &models[t],
                &task,
                &demo,
                config.eval.n_episodes,
                c,
                labeled_rng(config.seed, "eval-run", s).gen(),
                config.eval.selection,
            )?;
            run.agent = agent;
            run.train_seed = t as u64;
            Ok(run)
        })
        .collect::<Result<_>>()?;
    let report = aggregate(
        &runs,
        serde_json::json!({"agent": agent, "prompt_stage": stage}),
    )?;
    Ok((runs, report))
}

pub struct PipelineOutcome {
    pub split: TaskSplit,
    pub dataset: HistoryDataset,
    pub gen_stats: Vec<TaskTrainStats>,
    pub models: Vec<PolicyModel>,
    pub runs: Vec<EvalRun>,
    pub report: EvalReport,
}

/// Full gen -> train -> eval pass under one config.
pub fn run_full(config: &PipelineConfig, agent: AgentKind, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    let split = config.split()?;
    let (dataset, gen_stats) = generate_dataset(config, &split)?;
    run_from_dataset(config, split, dataset, gen_stats, agent, out_dir)
}

/// As `run_full` but reusing an existing dataset (for ablation dimensions
/// that do not touch generation).
pub fn run_from_dataset(
    config: &PipelineConfig,
    split: TaskSplit,
    dataset: HistoryDataset,
    gen_stats: Vec<TaskTrainStats>,
    agent: AgentKind,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    let outputs = train_models(config, &dataset, out_dir)?;
    let models: Vec<PolicyModel> = outputs.into_iter().map(|o| o.model).collect();
    let (runs, report) = evaluate_models(config, &models, &split, agent)?;
    Ok(PipelineOutcome {
        split,
        dataset,
        gen_stats,
        models,
        runs,
        report,
    })
}
