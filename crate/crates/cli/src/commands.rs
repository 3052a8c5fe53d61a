use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ad_lab_core::acceptance;
use ad_lab_core::env::EnvId;
use ad_lab_core::eval::{
    ablate as run_ablate, aggregate, export_attention, rollout_with_queue, AblateDimension,
    ActionSelection, AgentKind, EvalReport, EvalRun,
};
use ad_lab_core::history::{read_dataset, write_dataset, HistoryDataset};
use ad_lab_core::model::{tokenize, ModelArch, PolicyModel};
use ad_lab_core::pipeline::{
    evaluate_models, generate_dataset, prompted_runs, random_baseline_runs, source_baseline_runs,
    train_models, PipelineConfig,
};

use crate::plot::{line_plot, Series, PALETTE};

pub struct Ctx {
    file_config: Option<PipelineConfig>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    pub fn new(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let file_config = match config {
            Some(path) => Some(
                serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)
                    .with_context(|| format!("parsing {}", path.display()))?,
            ),
            None => None,
        };
        Ok(Self { file_config, seed, out })
    }

    fn resolve(&self, env_id: EnvId) -> PipelineConfig {
        let mut cfg = self
            .file_config
            .clone()
            .unwrap_or_else(|| PipelineConfig::desk_default(env_id, 1042));
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        cfg
    }

    /// Output directory: --out verbatim, else $AD_LAB_OUT/<name> or ./runs/<name>.
    fn out_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(dir) => dir.clone(),
            None => {
                let root = std::env::var("AD_LAB_OUT").unwrap_or_else(|_| "runs".into());
                PathBuf::from(root).join(name)
            }
        };
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Every command drops the resolved config and tool version beside its
/// artifacts.
fn write_provenance(dir: &Path, config: &PipelineConfig, flags: &serde_json::Value) -> Result<()> {
    let snapshot = serde_json::json!({
        "config": config,
        "command_flags": flags,
    });
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&snapshot)?)?;
    fs::write(
        dir.join("version.txt"),
        format!("adlab {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    ctx: Ctx,
    env: &str,
    tasks: Option<usize>,
    actors: Option<usize>,
    episodes: Option<usize>,
    subsample: Option<usize>,
    holdout: Option<f64>,
) -> Result<i32> {
    let env_id: EnvId = env.parse()?;
    let mut cfg = ctx.resolve(env_id);
    cfg.env_id = env_id;
    if let Some(v) = tasks {
        cfg.n_tasks = v;
    }
    if let Some(v) = actors {
        cfg.a3c.num_actors = v;
    }
    if let Some(v) = episodes {
        cfg.a3c.episodes_per_run = v;
    }
    if let Some(v) = subsample {
        cfg.subsample_k = v;
    }
    if let Some(v) = holdout {
        cfg.holdout_fraction = v;
    }
    let dir = ctx.out_dir(&format!("{}-data", env_id.as_str()))?;
    let split = cfg.split()?;
    let (dataset, stats) = generate_dataset(&cfg, &split)?;
    write_dataset(&dir, &dataset)?;
    write_provenance(
        &dir,
        &cfg,
        &serde_json::json!({"command": "gen-data", "subsample": cfg.subsample_k}),
    )?;
    if !stats.is_empty() {
        fs::write(dir.join("gen_stats.json"), serde_json::to_vec_pretty(&stats)?)?;
        let converged = stats
            .iter()
            .filter(|s| s.final_ma_return >= 0.9 * s.oracle)
            .count();
        println!(
            "source runs: {}/{} tasks reached 90% of oracle",
            converged,
            stats.len()
        );
    }
    println!(
        "dataset: {} tasks, {} histories, {} transitions -> {}",
        cfg.n_tasks,
        dataset.histories.len(),
        dataset.total_transitions(),
        dir.display()
    );
    Ok(0)
}

pub struct TrainFlags {
    pub context_episodes: Option<usize>,
    pub context: Option<usize>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub expert_only: bool,
    pub expert_fraction: f64,
    pub arch: String,
    pub alpha: Option<f32>,
    pub mask_prob: Option<f64>,
    pub train_seeds: Option<usize>,
    pub layers: Option<usize>,
    pub embed: Option<usize>,
    pub ff: Option<usize>,
}

pub fn train(ctx: Ctx, dataset_dir: &Path, flags: TrainFlags) -> Result<i32> {
    let dataset = read_dataset(dataset_dir)?;
    let env_id = dataset.manifest.env_id;
    let mut cfg = ctx.resolve(env_id);
    cfg.env_id = env_id;
    cfg.model.env_id = env_id;
    cfg.model.obs_vocab = env_id.obs_vocab();
    cfg.model.num_actions = env_id.num_actions();
    if let Some(e) = flags.context_episodes {
        cfg.model.context_transitions = e * env_id.horizon();
    }
    if let Some(c) = flags.context {
        cfg.model.context_transitions = c;
    }
    if let Some(v) = flags.steps {
        cfg.train.total_steps = v;
        cfg.train.schedule = ad_lab_core::optim::LrSchedule::new(
            cfg.train.schedule.initial_value,
            cfg.train.schedule.peak_value,
            v,
        );
    }
    if let Some(v) = flags.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = flags.alpha {
        cfg.train.label_smoothing = v;
    }
    if let Some(v) = flags.mask_prob {
        cfg.train.mask_prob = v;
    }
    if let Some(v) = flags.train_seeds {
        cfg.eval.train_seeds = v;
    }
    if let Some(v) = flags.layers {
        cfg.model.num_layers = v;
    }
    if let Some(v) = flags.embed {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = flags.ff {
        cfg.model.ff_dim = v;
    }
    cfg.arch = match flags.arch.as_str() {
        "transformer" => ModelArch::Transformer,
        "recurrent" => ModelArch::Recurrent(cfg.recurrent.clone()),
        other => bail!("unknown architecture {other:?}"),
    };
    cfg.expert_fraction = flags.expert_only.then_some(flags.expert_fraction);

    let label = if flags.expert_only { "ed" } else { "ad" };
    let dir = ctx.out_dir(&format!("{}-train-{label}", env_id.as_str()))?;
    let outputs = train_models(&cfg, &dataset, Some(&dir))?;
    write_provenance(&dir, &cfg, &serde_json::json!({"command": "train", "expert_only": flags.expert_only}))?;
    for (i, out) in outputs.iter().enumerate() {
        let last = out.log.entries.last().unwrap();
        println!(
            "seed {i}: final loss {:.4}, heldout loss {:?} -> {}",
            last.loss,
            last.heldout_loss,
            out.final_checkpoint.as_ref().unwrap().display()
        );
    }
    println!("checkpoints in {}", dir.display());
    Ok(0)
}

pub struct EvalFlags {
    pub agents: String,
    pub ad_model: Option<PathBuf>,
    pub ed_model: Option<PathBuf>,
    pub recurrent_model: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub eval_seeds: Option<usize>,
    pub prompt: Option<String>,
    pub normalize: Option<String>,
    pub greedy: bool,
    pub attention: bool,
}

fn load_models(dir: &Path) -> Result<Vec<PolicyModel>> {
    let mut models = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("train_seed_"))
        })
        .collect();
    entries.sort();
    for seed_dir in entries {
        let ckpt = seed_dir.join("checkpoint_final.ckpt");
        if ckpt.exists() {
            models.push(PolicyModel::load(&ckpt)?);
        }
    }
    if models.is_empty() {
        // Accept a bare checkpoint file as well.
        let direct = dir.join("checkpoint_final.ckpt");
        if direct.exists() {
            models.push(PolicyModel::load(&direct)?);
        }
    }
    if models.is_empty() {
        bail!("no checkpoint_final.ckpt under {}", dir.display());
    }
    Ok(models)
}

fn prompt_stage(name: &str) -> Result<f64> {
    Ok(match name {
        "near_random" => 0.1,
        "mid" => 0.5,
        "near_expert" => 1.0,
        other => bail!("unknown prompt stage {other:?} (near_random | mid | near_expert)"),
    })
}

pub fn eval(ctx: Ctx, dataset_dir: &Path, flags: EvalFlags) -> Result<i32> {
    let dataset = read_dataset(dataset_dir)?;
    let env_id = dataset.manifest.env_id;
    let mut cfg = ctx.resolve(env_id);
    cfg.env_id = env_id;
    if let Some(v) = flags.episodes {
        cfg.eval.n_episodes = v;
    }
    if let Some(v) = flags.eval_seeds {
        cfg.eval.eval_seeds = v;
    }
    if flags.greedy {
        cfg.eval.selection = ActionSelection::Greedy;
    }
    let split = dataset.manifest.split.clone();
    let dir = ctx.out_dir(&format!("{}-eval", env_id.as_str()))?;

    let mut series = Vec::new();
    let mut normalized = serde_json::Map::new();
    let mut all_reports: Vec<(String, EvalReport)> = Vec::new();
    for (i, agent) in flags.agents.split(',').map(str::trim).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let (runs, report): (Vec<EvalRun>, EvalReport) = match agent {
            "ad" | "ed" | "recurrent" => {
                let model_dir = match agent {
                    "ad" => flags.ad_model.as_ref(),
                    "ed" => flags.ed_model.as_ref(),
                    _ => flags.recurrent_model.as_ref(),
                }
                .with_context(|| format!("--{agent}-model is required for agent {agent}"))?;
                let models = load_models(model_dir)?;
                // The model fixes its own context capacity and tokenizer.
                cfg.model = models[0].config.clone();
                let kind = match agent {
                    "ad" => AgentKind::Ad,
                    "ed" => AgentKind::Ed,
                    _ => AgentKind::Recurrent,
                };
                match &flags.prompt {
                    Some(stage) => {
                        prompted_runs(&cfg, &models, &split, kind, prompt_stage(stage)?)?
                    }
                    None => evaluate_models(&cfg, &models, &split, kind)?,
                }
            }
            "source" => source_baseline_runs(&cfg, &split, cfg.eval.n_episodes)?,
            "random" => random_baseline_runs(&cfg, &split, cfg.eval.n_episodes)?,
            other => bail!("unknown agent {other:?}"),
        };
        fs::write(dir.join(format!("report_{agent}.csv")), report.to_csv())?;
        fs::write(
            dir.join(format!("report_{agent}.json")),
            serde_json::to_vec_pretty(&serde_json::json!({
                "metadata": report.metadata,
                "n_runs": report.n_runs,
                "runs": runs,
            }))?,
        )?;
        if flags.normalize.is_some() && env_id == EnvId::AdversarialBandit {
            let r_rand = ad_lab_core::eval::bandit_random_baseline(
                &split,
                ad_lab_core::env::Split::Test,
                1000,
                cfg.seed,
            )?;
            let r_ucb = ad_lab_core::eval::bandit_ucb_baseline(
                &split,
                ad_lab_core::env::Split::Test,
                1000,
                cfg.seed,
            )?;
            let mean_total: f64 = runs
                .iter()
                .map(|r| r.returns.iter().map(|&x| f64::from(x)).sum::<f64>())
                .sum::<f64>()
                / runs.len() as f64;
            let score = ad_lab_core::eval::normalized_score(mean_total, r_rand, r_ucb)?;
            println!("{agent}: normalized score {score:.3} (raw {mean_total:.1}, random {r_rand:.1}, ucb {r_ucb:.1})");
            normalized.insert(
                agent.to_string(),
                serde_json::json!({"score": score, "raw": mean_total, "r_random": r_rand, "r_ucb": r_ucb}),
            );
        }
        series.push(Series {
            label: agent.to_string(),
            color,
            points: report
                .episodes
                .iter()
                .map(|e| (e.env_steps as f64, e.mean, e.std))
                .collect(),
        });
        println!(
            "{agent}: first-10 mean {:.2}, final-10 mean {:.2} over {} runs",
            report.mean_over(0..10.min(report.episodes.len())),
            report.final_mean(10),
            report.n_runs
        );
        all_reports.push((agent.to_string(), report));
    }
    if !normalized.is_empty() {
        fs::write(
            dir.join("normalized.json"),
            serde_json::to_vec_pretty(&serde_json::Value::Object(normalized))?,
        )?;
    }
    fs::write(
        dir.join("plot.svg"),
        line_plot(
            &format!("{} in-context evaluation", env_id.as_str()),
            "environment steps",
            "episode return",
            &series,
        ),
    )?;
    if flags.attention {
        let model_dir = flags
            .ad_model
            .as_ref()
            .context("--ad-model is required for --attention")?;
        let models = load_models(model_dir)?;
        cfg.model = models[0].config.clone();
        let task = ad_lab_core::env::sample_task(
            ad_lab_core::env::Split::Test,
            &split,
            &mut ad_lab_core::rng::labeled_rng(cfg.seed, "attention-task", 0),
        )?;
        let c = cfg.model.context_transitions;
        let (_, queue) = rollout_with_queue(
            &models[0],
            &task,
            (3 * c).div_ceil(env_id.horizon()).max(30),
            c,
            cfg.seed,
            cfg.eval.selection,
        )?;
        let window = tokenize(&queue[queue.len().saturating_sub(c - 1)..], None, None, &cfg.model)?;
        for map in export_attention(&models[0], &window)? {
            fs::write(
                dir.join(format!("attention_l{}h{}.csv", map.layer, map.head)),
                map.to_csv(),
            )?;
        }
        println!("attention maps exported");
    }
    write_provenance(&dir, &cfg, &serde_json::json!({"command": "eval", "agents": flags.agents}))?;
    println!("reports in {}", dir.display());
    Ok(0)
}

pub fn ablate(ctx: Ctx, dimension: &str, values: &str, env: &str) -> Result<i32> {
    let env_id: EnvId = env.parse()?;
    let mut cfg = ctx.resolve(env_id);
    cfg.env_id = env_id;
    let dim: AblateDimension = dimension.parse()?;
    let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
    let dir = ctx.out_dir(&format!("{}-ablate-{}", env_id.as_str(), dim.as_str()))?;
    let outcomes = run_ablate(&cfg, dim, &values)?;

    let mut summary = String::from("value,first10_mean,final50_mean\n");
    let mut series = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        fs::write(dir.join(format!("report_{}.csv", o.value)), o.report.to_csv())?;
        let first = o.report.mean_over(0..10.min(o.report.episodes.len()));
        let last = o.report.final_mean(50);
        summary.push_str(&format!("{},{first:.4},{last:.4}\n", o.value));
        series.push(Series {
            label: format!("{}={}", dim.as_str(), o.value),
            color: PALETTE[i % PALETTE.len()],
            points: o
                .report
                .episodes
                .iter()
                .map(|e| (e.env_steps as f64, e.mean, e.std))
                .collect(),
        });
    }
    fs::write(dir.join("summary.csv"), &summary)?;
    fs::write(
        dir.join("plot.svg"),
        line_plot(
            &format!("{} ablation on {}", dim.as_str(), env_id.as_str()),
            "environment steps",
            "episode return",
            &series,
        ),
    )?;
    write_provenance(&dir, &cfg, &serde_json::json!({"command": "ablate", "dimension": dim.as_str(), "values": values}))?;
    print!("{summary}");
    println!("ablation artifacts in {}", dir.display());
    Ok(0)
}

pub fn report(ctx: Ctx, criteria: Option<&str>) -> Result<i32> {
    let ids: Vec<usize> = match criteria {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("criterion ids are integers"))
            .collect::<Result<_>>()?,
        None => (1..=11).collect(),
    };
    let dir = ctx.out_dir("report")?;
    let results = acceptance::run_criteria(&ids)?;
    let mut csv = String::from("id,name,pass,seconds,details\n");
    println!("{:-<72}", "");
    for r in &results {
        println!(
            "[{}] {:2}. {:<40} {:7.1}s  {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.seconds,
            r.details
        );
        csv.push_str(&format!(
            "{},{},{},{:.1},\"{}\"\n",
            r.id,
            r.name,
            r.pass,
            r.seconds,
            r.details.replace('"', "'")
        ));
    }
    println!("{:-<72}", "");
    let all_pass = results.iter().all(|r| r.pass);
    println!(
        "{}/{} criteria passed",
        results.iter().filter(|r| r.pass).count(),
        results.len()
    );
    fs::write(dir.join("report.csv"), csv)?;
    fs::write(
        dir.join("version.txt"),
        format!("adlab {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(if all_pass { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_stage_grammar() {
        assert_eq!(prompt_stage("near_expert").unwrap(), 1.0);
        assert_eq!(prompt_stage("mid").unwrap(), 0.5);
        assert_eq!(prompt_stage("near_random").unwrap(), 0.1);
        assert!(prompt_stage("bogus").is_err());
    }

    #[test]
    fn ctx_resolves_desk_defaults() {
        let ctx = Ctx::new(None, Some(9), None).unwrap();
        let cfg = ctx.resolve(EnvId::DarkRoom);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.env_id, EnvId::DarkRoom);
        let _ = HistoryDataset::new(
            EnvId::DarkRoom,
            cfg.split().unwrap(),
            serde_json::json!({}),
            vec![],
        );
    }
}
