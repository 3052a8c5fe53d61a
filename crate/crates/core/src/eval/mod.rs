//! Autoregressive in-context evaluation: the frozen model populates a
//! bounded transition queue while acting, and any return improvement across
//! episodes happens purely through that context.

mod ablate;
mod attention;

pub use ablate::{ablate, AblateDimension, AblateOutcome};
pub use attention::{export_attention, AttentionMap};

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, EnvId, Split, TaskSpec, TaskSplit};
use crate::error::{contract, Result};
use crate::history::{obs_from, LearningHistory, Transition};
use crate::model::{tokenize, PolicyModel};
use crate::rng::{labeled_rng, sample_from_logits, stream_rng};
use crate::source::{run_ucb, UCB_DEFAULT_EXPLORE};

/// Bounded queue of the last `capacity` transitions, oldest evicted first.
/// It persists across episode boundaries; resets only splice in a new
/// episode's first observation after the old episode's transitions.
#[derive(Debug, Clone)]
pub struct ContextQueue {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ContextQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        self.items.push_back(t);
        if self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Most recent `n` transitions, oldest first.
    pub fn last_n(&self, n: usize) -> Vec<Transition> {
        let skip = self.items.len().saturating_sub(n);
        self.items.iter().skip(skip).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ad,
    Ed,
    Source,
    Recurrent,
    Random,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Ad => "ad",
            AgentKind::Ed => "ed",
            AgentKind::Source => "source",
            AgentKind::Recurrent => "recurrent",
            AgentKind::Random => "random",
        }
    }
}

/// Per-episode returns of one evaluation run on one fixed task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub task: TaskSpec,
    pub returns: Vec<f32>,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub agent: AgentKind,
    /// Demo transitions pre-filled into the queue, if any (count, truncated).
    pub prompt: Option<(usize, bool)>,
}

/// How actions are drawn from the model's softmax at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSelection {
    Sample,
    Greedy,
}

fn select_action(logits: &[f32], mode: ActionSelection, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        ActionSelection::Sample => sample_from_logits(logits, rng),
        ActionSelection::Greedy => logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap(),
    }
}

fn rollout_inner(
    model: &PolicyModel,
    task: &TaskSpec,
    n_episodes: usize,
    c: usize,
    eval_seed: u64,
    selection: ActionSelection,
    mut queue: ContextQueue,
    prompt: Option<(usize, bool)>,
) -> Result<(EvalRun, ContextQueue)> {
    if task.env_id() != model.config.env_id {
        return Err(contract(format!(
            "task env {} does not match model env {}",
            task.env_id().as_str(),
            model.config.env_id.as_str()
        )));
    }
    if c > model.config.context_transitions {
        return Err(contract(format!(
            "evaluation context {c} exceeds trained capacity {}",
            model.config.context_transitions
        )));
    }
    let mut env = make_env(&task.with_seed(labeled_rng(eval_seed, "env", task.seed()).gen()))?;
    let mut action_rng = labeled_rng(eval_seed, "actions", task.seed());
    let horizon = env.horizon();
    let mut returns = Vec::with_capacity(n_episodes);
    // The model input is the most recent c-1 transitions plus the query
    // observation, so positions stay within the trained window.
    let ctx_len = c.saturating_sub(1);
    for _ in 0..n_episodes {
        let mut obs = env.reset();
        let mut ep_return = 0.0f32;
        for t in 0..horizon {
            let ctx = queue.last_n(ctx_len);
            let window = tokenize(&ctx, Some(&obs), None, &model.config)?;
            let logits = model.action_logits(&window)?;
            let action = select_action(&logits, selection, &mut action_rng);
            let step = env.step(action)?;
            ep_return += step.reward;
            queue.push(Transition {
                observation: obs_from(&obs),
                action: action as u16,
                reward: step.reward,
                episode_start: t == 0,
            });
            obs = step.observation;
        }
        returns.push(ep_return);
    }
    Ok((
        EvalRun {
            task: task.clone(),
            returns,
            train_seed: 0,
            eval_seed,
            agent: AgentKind::Ad,
            prompt,
        },
        queue,
    ))
}

/// As `rollout`, additionally returning the final context queue (for
/// attention-map export).
pub fn rollout_with_queue(
    model: &PolicyModel,
    task: &TaskSpec,
    n_episodes: usize,
    c: usize,
    eval_seed: u64,
    selection: ActionSelection,
) -> Result<(EvalRun, Vec<Transition>)> {
    rollout_inner(
        model,
        task,
        n_episodes,
        c,
        eval_seed,
        selection,
        ContextQueue::new(c),
        None,
    )
    .map(|(run, q)| {
        let n = q.len();
        (run, q.last_n(n))
    })
}

/// Evaluate the frozen model on one task: the context starts empty and fills
/// with the model's own behavior.
pub fn rollout(
    model: &PolicyModel,
    task: &TaskSpec,
    n_episodes: usize,
    c: usize,
    eval_seed: u64,
    selection: ActionSelection,
) -> Result<EvalRun> {
    rollout_inner(
        model,
        task,
        n_episodes,
        c,
        eval_seed,
        selection,
        ContextQueue::new(c),
        None,
    )
    .map(|(run, _)| run)
}

/// Same as `rollout` but the queue is pre-filled with a demonstration.
/// Overlong demos keep their most recent `c` transitions.
pub fn prompt_rollout(
    model: &PolicyModel,
    task: &TaskSpec,
    demo: &[Transition],
    n_episodes: usize,
    c: usize,
    eval_seed: u64,
    selection: ActionSelection,
) -> Result<EvalRun> {
    let truncated = demo.len() > c;
    let mut queue = ContextQueue::new(c);
    for t in demo.iter().skip(demo.len().saturating_sub(c)) {
        queue.push(t.clone());
    }
    rollout_inner(
        model,
        task,
        n_episodes,
        c,
        eval_seed,
        selection,
        queue,
        Some((demo.len().min(c), truncated)),
    )
    .map(|(run, _)| run)
}

/// Affine normalization mapping the random policy to 0 and UCB to 1.
pub fn normalized_score(r: f64, r_random: f64, r_ucb: f64) -> Result<f64> {
    if r_ucb <= r_random {
        return Err(contract(format!(
            "degenerate normalization: r_ucb {r_ucb} <= r_random {r_random}"
        )));
    }
    Ok((r - r_random) / (r_ucb - r_random))
}

/// A slice of a learning history usable as a demonstration prompt: the last
/// `transitions` ending where the source run had completed `fraction` of its
/// episodes, aligned to an episode boundary.
pub fn demo_from_history(
    h: &LearningHistory,
    fraction: f64,
    transitions: usize,
) -> Vec<Transition> {
    let starts = h.episode_starts();
    let end_episode = ((starts.len() as f64 * fraction).round() as usize).clamp(1, starts.len());
    let end = if end_episode == starts.len() {
        h.len()
    } else {
        starts[end_episode]
    };
    let begin = end.saturating_sub(transitions);
    h.transitions[begin..end].to_vec()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeStat {
    /// 1-based episode index.
    pub episode: usize,
    /// Cumulative environment steps after this episode (episode x horizon).
    pub env_steps: usize,
    pub mean: f64,
    pub std: f64,
}

/// Per-episode mean and population standard deviation across runs.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub env_id: EnvId,
    pub agent: AgentKind,
    pub n_runs: usize,
    pub episodes: Vec<EpisodeStat>,
    pub metadata: serde_json::Value,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,env_steps,mean,std,n_runs\n");
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                e.episode, e.env_steps, e.mean, e.std, self.n_runs
            ));
        }
        out
    }

    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.episodes[range];
        slice.iter().map(|e| e.mean).sum::<f64>() / slice.len() as f64
    }

    /// Mean return over the final `n` episodes.
    pub fn final_mean(&self, n: usize) -> f64 {
        let len = self.episodes.len();
        self.mean_over(len.saturating_sub(n)..len)
    }
}

/// Fold runs into per-episode statistics. Runs must share episode counts.
pub fn aggregate(runs: &[EvalRun], metadata: serde_json::Value) -> Result<EvalReport> {
    let first = runs.first().ok_or_else(|| contract("aggregate needs >= 1 run"))?;
    let n_eps = first.returns.len();
    if runs.iter().any(|r| r.returns.len() != n_eps) {
        return Err(contract("ragged run lengths"));
    }
    let horizon = first.task.env_id().horizon();
    let n = runs.len() as f64;
    let episodes = (0..n_eps)
        .map(|e| {
            let mean = runs.iter().map(|r| f64::from(r.returns[e])).sum::<f64>() / n;
            let var = runs
                .iter()
                .map(|r| {
                    let d = f64::from(r.returns[e]) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            EpisodeStat {
                episode: e + 1,
                env_steps: (e + 1) * horizon,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(EvalReport {
        env_id: first.task.env_id(),
        agent: first.agent,
        n_runs: runs.len(),
        episodes,
        metadata,
    })
}

/// Monte-Carlo mean 100-trial return of a uniform-random bandit policy over
/// the given split's task distribution.
pub fn bandit_random_baseline(split: &TaskSplit, side: Split, n_runs: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0x3aad);
    let mut total = 0.0f64;
    for _ in 0..n_runs {
        let task = crate::env::sample_task(side, split, &mut rng)?;
        let mut env = make_env(&task)?;
        env.reset();
        for _ in 0..EnvId::AdversarialBandit.horizon() {
            let step = env.step(rng.gen_range(0..EnvId::AdversarialBandit.num_actions()))?;
            total += f64::from(step.reward);
        }
    }
    Ok(total / n_runs as f64)
}

/// Monte-Carlo mean 100-trial return of UCB over the given split.
pub fn bandit_ucb_baseline(split: &TaskSplit, side: Split, n_runs: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0x3bbd);
    let mut total = 0.0f64;
    for _ in 0..n_runs {
        let task = crate::env::sample_task(side, split, &mut rng)?;
        let h = run_ucb(&task, EnvId::AdversarialBandit.horizon(), UCB_DEFAULT_EXPLORE)?;
        total += h.transitions.iter().map(|t| f64::from(t.reward)).sum::<f64>();
    }
    Ok(total / n_runs as f64)
}

/// Monte-Carlo mean per-episode return of a uniform-random policy on one
/// grid task.
pub fn random_policy_return(task: &TaskSpec, n_episodes: usize, seed: u64) -> Result<f64> {
    let mut env = make_env(&task.with_seed(seed))?;
    let mut rng = stream_rng(seed, 0x44aa);
    let n_actions = env.num_actions();
    let mut total = 0.0f64;
    for _ in 0..n_episodes {
        env.reset();
        for _ in 0..env.horizon() {
            total += f64::from(env.step(rng.gen_range(0..n_actions))?.reward);
        }
    }
    Ok(total / n_episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{grid_center, optimal_return};
    use crate::model::{ModelArch, TransformerConfig};

    fn tiny_model(env_id: EnvId, c: usize) -> PolicyModel {
        let cfg = TransformerConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 16,
            ..TransformerConfig::for_env(env_id, c)
        };
        PolicyModel::init(ModelArch::Transformer, cfg, 1).unwrap()
    }

    #[test]
    fn queue_evicts_oldest_and_persists_across_episodes() {
        let mut q = ContextQueue::new(3);
        for i in 0..5u16 {
            q.push(Transition {
                observation: obs_from(&[i as i16, 0]),
                action: i,
                reward: 0.0,
                episode_start: i % 2 == 0,
            });
        }
        assert_eq!(q.len(), 3);
        let items = q.last_n(3);
        assert_eq!(items[0].action, 2);
        assert_eq!(items[2].action, 4);
        assert_eq!(q.last_n(2).len(), 2);
    }

    #[test]
    fn rollout_counts_and_queue_growth() {
        // 3 episodes of dark_room (horizon 20) with c=80: 60 transitions,
        // no eviction yet, and the queue holds episode-2 transitions when
        // episode 3 starts.
        let model = tiny_model(EnvId::DarkRoom, 80);
        let task = TaskSpec::DarkRoom { goal: (0, 0), seed: 3 };
        let (run, queue) = rollout_inner(
            &model,
            &task,
            3,
            80,
            7,
            ActionSelection::Sample,
            ContextQueue::new(80),
            None,
        )
        .unwrap();
        assert_eq!(run.returns.len(), 3);
        assert_eq!(queue.len(), 60);
        let starts: Vec<usize> = queue
            .iter()
            .enumerate()
            .filter(|(_, t)| t.episode_start)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(starts, vec![0, 20, 40]);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let model = tiny_model(EnvId::DarkRoom, 12);
        let task = TaskSpec::DarkRoom { goal: (2, 2), seed: 5 };
        let a = rollout(&model, &task, 4, 12, 11, ActionSelection::Sample).unwrap();
        let b = rollout(&model, &task, 4, 12, 11, ActionSelection::Sample).unwrap();
        assert_eq!(a.returns, b.returns);
        let c = rollout(&model, &task, 4, 12, 12, ActionSelection::Sample).unwrap();
        assert!(a.returns != c.returns || a.eval_seed != c.eval_seed);
    }

    #[test]
    fn untrained_model_matches_random_policy_level() {
        // A fresh tiny transformer emits near-uniform logits; its mean
        // return should sit near the Monte-Carlo random baseline.
        let model = tiny_model(EnvId::DarkRoom, 8);
        let task = TaskSpec::DarkRoom { goal: (4, 2), seed: 9 };
        let mut totals = 0.0f64;
        let runs = 12;
        for s in 0..runs {
            let run = rollout(&model, &task, 25, 8, s, ActionSelection::Sample).unwrap();
            totals += run.returns.iter().map(|&r| f64::from(r)).sum::<f64>() / 25.0;
        }
        let model_mean = totals / runs as f64;
        let baseline = random_policy_return(&task, 4000, 1).unwrap();
        assert!(
            (model_mean - baseline).abs() < baseline.max(0.5),
            "untrained model {model_mean:.3} vs random baseline {baseline:.3}"
        );
    }

    #[test]
    fn empty_demo_equals_plain_rollout() {
        let model = tiny_model(EnvId::DarkRoom, 10);
        let task = TaskSpec::DarkRoom { goal: (1, 7), seed: 2 };
        let a = rollout(&model, &task, 3, 10, 4, ActionSelection::Sample).unwrap();
        let b = prompt_rollout(&model, &task, &[], 3, 10, 4, ActionSelection::Sample).unwrap();
        assert_eq!(a.returns, b.returns);
    }

    #[test]
    fn overlong_demo_keeps_most_recent_and_flags_truncation() {
        let model = tiny_model(EnvId::DarkRoom, 6);
        let task = TaskSpec::DarkRoom { goal: (1, 7), seed: 2 };
        let demo: Vec<Transition> = (0..10)
            .map(|i| Transition {
                observation: obs_from(&[i as i16 % 9, 0]),
                action: 0,
                reward: 0.0,
                episode_start: i == 0,
            })
            .collect();
        let run = prompt_rollout(&model, &task, &demo, 1, 6, 4, ActionSelection::Sample).unwrap();
        assert_eq!(run.prompt, Some((6, true)));
    }

    #[test]
    fn normalized_score_identities() {
        assert_eq!(normalized_score(80.0, 18.0, 80.0).unwrap(), 1.0);
        assert_eq!(normalized_score(18.0, 18.0, 80.0).unwrap(), 0.0);
        assert_eq!(normalized_score(49.0, 18.0, 80.0).unwrap(), 0.5);
        assert!(normalized_score(1.0, 5.0, 5.0).is_err());
        // Affine invariance: rescale all three inputs by x -> 3x + 7.
        let f = |x: f64| 3.0 * x + 7.0;
        let a = normalized_score(40.0, 18.0, 80.0).unwrap();
        let b = normalized_score(f(40.0), f(18.0), f(80.0)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mean_std_and_axis() {
        let task = TaskSpec::DarkRoom { goal: (0, 0), seed: 0 };
        let mk = |v: f32| EvalRun {
            task: task.clone(),
            returns: vec![v; 4],
            train_seed: 0,
            eval_seed: 0,
            agent: AgentKind::Ad,
            prompt: None,
        };
        let single = aggregate(&[mk(2.0)], serde_json::json!({})).unwrap();
        assert_eq!(single.episodes[0].mean, 2.0);
        assert_eq!(single.episodes[0].std, 0.0);
        let both = aggregate(&[mk(1.0), mk(3.0)], serde_json::json!({})).unwrap();
        assert_eq!(both.episodes[2].mean, 2.0);
        assert_eq!(both.episodes[2].std, 1.0);
        assert_eq!(both.episodes[0].episode, 1);
        assert_eq!(both.episodes[0].env_steps, 20);
        assert_eq!(both.episodes[3].env_steps, 80);
        // Ragged runs are rejected.
        let mut short = mk(1.0);
        short.returns.pop();
        assert!(aggregate(&[mk(1.0), short], serde_json::json!({})).is_err());
    }

    #[test]
    fn demo_slicing_respects_stage_and_length() {
        let transitions: Vec<Transition> = (0..100)
            .map(|i| Transition {
                observation: obs_from(&[0, 0]),
                action: (i / 20) as u16,
                reward: 0.0,
                episode_start: i % 20 == 0,
            })
            .collect();
        let h = LearningHistory {
            task: TaskSpec::DarkRoom { goal: (0, 0), seed: 0 },
            transitions,
            meta: crate::history::HistoryMeta {
                algorithm: "a3c".into(),
                actor_id: 0,
                seed: 0,
                subsample_k: 1,
                expert: false,
            },
        };
        let early = demo_from_history(&h, 0.2, 20);
        assert_eq!(early.len(), 20);
        assert_eq!(early[0].action, 0, "near-random demo comes from episode 0");
        let late = demo_from_history(&h, 1.0, 20);
        assert_eq!(late[0].action, 4, "near-expert demo comes from the last episode");
    }

    #[test]
    fn grid_oracle_vs_random_baseline_sanity() {
        let task = TaskSpec::DarkRoom { goal: (4, 4), seed: 0 };
        let r = random_policy_return(&task, 2000, 3).unwrap();
        let oracle = f64::from(optimal_return(&task, grid_center(EnvId::DarkRoom)).unwrap());
        assert!(r > 0.0 && r < oracle);
    }
}
