//! Process-wide cache of the expensive pipeline artifacts the criteria
//! share: datasets, trained models, and evaluation runs at the pinned
//! desk-scale profiles.

use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use crate::env::{EnvId, Split, TaskSplit};
use crate::error::Result;
use crate::eval::{AgentKind, EvalReport, EvalRun};
use crate::history::HistoryDataset;
use crate::model::{ModelArch, PolicyModel};
use crate::pipeline::{
    evaluate_models, evaluate_models_on, generate_dataset, train_models, PipelineConfig,
};
use crate::source::{run_ucb_expert, TaskTrainStats};

use super::ACCEPT_SEED;

/// Dark Room profile: source runs slowed (lr 1e-3) so histories show a long
/// improvement phase, attention dropout eased for the small training budget,
/// evaluation long enough for in-context goal discovery.
pub fn dark_profile() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_default(EnvId::DarkRoom, ACCEPT_SEED);
    cfg.a3c.learning_rate = 1e-3;
    cfg.model.attention_dropout = 0.2;
    cfg.train.total_steps = 4000;
    cfg.train.schedule = crate::optim::LrSchedule::new(2e-6, 3e-4, 4000);
    cfg.train.batch_size = 16;
    cfg.train.eval_every = 500;
    cfg.eval.n_episodes = 500;
    cfg.eval.train_seeds = 2;
    cfg.eval.eval_seeds = 10;
    cfg
}

pub fn bandit_profile() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_default(EnvId::AdversarialBandit, ACCEPT_SEED);
    cfg.n_tasks = 400;
    cfg.model.attention_dropout = 0.2;
    cfg.train.total_steps = 1500;
    cfg.train.schedule = crate::optim::LrSchedule::new(2e-6, 3e-4, 1500);
    cfg.train.batch_size = 16;
    cfg.eval.n_episodes = 1;
    cfg.eval.train_seeds = 3;
    cfg.eval.eval_seeds = 10;
    cfg
}

pub fn ktd_profile() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_default(EnvId::DarkKeyToDoor, ACCEPT_SEED);
    cfg.n_tasks = 128;
    cfg.a3c.num_actors = 4;
    cfg.a3c.learning_rate = 1e-3;
    cfg.a3c.episodes_per_run = 400;
    cfg.model.attention_dropout = 0.2;
    cfg.train.total_steps = 4000;
    cfg.train.schedule = crate::optim::LrSchedule::new(2e-6, 3e-4, 4000);
    cfg.train.batch_size = 16;
    cfg.eval.n_episodes = 250;
    cfg.eval.train_seeds = 1;
    cfg.eval.eval_seeds = 10;
    cfg
}

pub struct DarkArtifacts {
    pub config: PipelineConfig,
    pub split: TaskSplit,
    pub dataset: HistoryDataset,
    pub gen_stats: Vec<TaskTrainStats>,
    pub gen_seconds: f64,
    pub ad_models: Vec<PolicyModel>,
    pub ed_models: Vec<PolicyModel>,
    pub ad_runs: Vec<EvalRun>,
    pub ad_report: EvalReport,
    pub ed_runs: Vec<EvalRun>,
    pub ed_report: EvalReport,
    pub build_seconds: f64,
}

pub struct BanditArtifacts {
    pub config: PipelineConfig,
    pub split: TaskSplit,
    pub dataset: HistoryDataset,
    pub ad_models: Vec<PolicyModel>,
    pub ed_models: Vec<PolicyModel>,
    /// (in-distribution, out-of-distribution) mean 100-trial returns.
    pub ad_scores: (f64, f64),
    pub ed_scores: (f64, f64),
    pub baselines_in: (f64, f64),
    pub baselines_out: (f64, f64),
}

pub struct KtdArtifacts {
    pub config: PipelineConfig,
    pub split: TaskSplit,
    pub transformer_runs: Vec<EvalRun>,
    pub transformer_report: EvalReport,
    pub recurrent_runs: Vec<EvalRun>,
    pub recurrent_report: EvalReport,
}

#[derive(Default)]
pub struct Artifacts {
    dark: Mutex<Option<Arc<DarkArtifacts>>>,
    bandit: Mutex<Option<Arc<BanditArtifacts>>>,
    ktd: Mutex<Option<Arc<KtdArtifacts>>>,
}

pub fn global_artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(Artifacts::default)
}

impl Artifacts {
    pub fn dark(&self) -> Result<Arc<DarkArtifacts>> {
        let mut slot = self.dark.lock().unwrap();
        if let Some(a) = slot.as_ref() {
            return Ok(Arc::clone(a));
        }
        let config = dark_profile();
        let t0 = Instant::now();
        let split = config.split()?;
        let (dataset, gen_stats) = generate_dataset(&config, &split)?;
        let gen_seconds = t0.elapsed().as_secs_f64();

        let ad_models: Vec<PolicyModel> = train_models(&config, &dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();
        let mut ed_config = config.clone();
        ed_config.expert_fraction = Some(0.1);
        ed_config.eval.train_seeds = 1;
        let ed_models: Vec<PolicyModel> = train_models(&ed_config, &dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();

        let (ad_runs, ad_report) = evaluate_models(&config, &ad_models, &split, AgentKind::Ad)?;
        let (ed_runs, ed_report) = evaluate_models(&ed_config, &ed_models, &split, AgentKind::Ed)?;
        let built = DarkArtifacts {
            config,
            split,
            dataset,
            gen_stats,
            gen_seconds,
            ad_models,
            ed_models,
            ad_runs,
            ad_report,
            ed_runs,
            ed_report,
            build_seconds: t0.elapsed().as_secs_f64(),
        };
        let arc = Arc::new(built);
        *slot = Some(Arc::clone(&arc));
        Ok(arc)
    }

    pub fn bandit(&self) -> Result<Arc<BanditArtifacts>> {
        let mut slot = self.bandit.lock().unwrap();
        if let Some(a) = slot.as_ref() {
            return Ok(Arc::clone(a));
        }
        let config = bandit_profile();
        let split = config.split()?;
        let (dataset, _) = generate_dataset(&config, &split)?;

        // Expert data: converged UCB trajectories (400 warmup trials).
        let expert_histories = crate::history::choose_train_tasks(
            &split,
            config.n_tasks,
            &mut crate::rng::labeled_rng(config.seed, "gen-tasks-expert", 0),
        )?
        .iter()
        .map(|t| run_ucb_expert(t, 100, 400, config.ucb_explore))
        .collect::<Result<_>>()?;
        let expert_dataset = HistoryDataset::new(
            EnvId::AdversarialBandit,
            split.clone(),
            serde_json::json!({"expert": true, "warmup": 400}),
            expert_histories,
        );

        let ad_models: Vec<PolicyModel> = train_models(&config, &dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();
        let ed_models: Vec<PolicyModel> = train_models(&config, &expert_dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();

        let mean_total = |runs: &[EvalRun]| {
            runs.iter()
                .map(|r| r.returns.iter().map(|&x| f64::from(x)).sum::<f64>())
                .sum::<f64>()
                / runs.len() as f64
        };
        let (ad_in_runs, _) =
            evaluate_models_on(&config, &ad_models, &split, Split::Train, AgentKind::Ad)?;
        let (ad_out_runs, _) =
            evaluate_models_on(&config, &ad_models, &split, Split::Test, AgentKind::Ad)?;
        let (ed_in_runs, _) =
            evaluate_models_on(&config, &ed_models, &split, Split::Train, AgentKind::Ed)?;
        let (ed_out_runs, _) =
            evaluate_models_on(&config, &ed_models, &split, Split::Test, AgentKind::Ed)?;

        let baselines_in = (
            crate::eval::bandit_random_baseline(&split, Split::Train, 1000, config.seed)?,
            crate::eval::bandit_ucb_baseline(&split, Split::Train, 1000, config.seed)?,
        );
        let baselines_out = (
            crate::eval::bandit_random_baseline(&split, Split::Test, 1000, config.seed)?,
            crate::eval::bandit_ucb_baseline(&split, Split::Test, 1000, config.seed)?,
        );
        let built = BanditArtifacts {
            config,
            split,
            dataset,
            ad_models,
            ed_models,
            ad_scores: (mean_total(&ad_in_runs), mean_total(&ad_out_runs)),
            ed_scores: (mean_total(&ed_in_runs), mean_total(&ed_out_runs)),
            baselines_in,
            baselines_out,
        };
        let arc = Arc::new(built);
        *slot = Some(Arc::clone(&arc));
        Ok(arc)
    }

    pub fn ktd(&self) -> Result<Arc<KtdArtifacts>> {
        let mut slot = self.ktd.lock().unwrap();
        if let Some(a) = slot.as_ref() {
            return Ok(Arc::clone(a));
        }
        let config = ktd_profile();
        let split = config.split()?;
        let (dataset, _) = generate_dataset(&config, &split)?;

        let transformer_models: Vec<PolicyModel> = train_models(&config, &dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();
        let mut rec_config = config.clone();
        rec_config.arch = ModelArch::Recurrent(config.recurrent.clone());
        let recurrent_models: Vec<PolicyModel> = train_models(&rec_config, &dataset, None)?
            .into_iter()
            .map(|o| o.model)
            .collect();

        let (transformer_runs, transformer_report) =
            evaluate_models(&config, &transformer_models, &split, AgentKind::Ad)?;
        let (recurrent_runs, recurrent_report) =
            evaluate_models(&rec_config, &recurrent_models, &split, AgentKind::Recurrent)?;
        let built = KtdArtifacts {
            config,
            split,
            transformer_runs,
            transformer_report,
            recurrent_runs,
            recurrent_report,
        };
        let arc = Arc::new(built);
        *slot = Some(Arc::clone(&arc));
        Ok(arc)
    }
}
