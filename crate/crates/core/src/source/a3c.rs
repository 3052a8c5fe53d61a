//! Synchronous batched advantage actor-critic over simulated actor streams.
//!
//! Each actor plays one full episode per update on its own copy of the task;
//! gradients from all actor episodes are averaged into a single Adam step on
//! the shared MLP. One improving transition stream per actor is recorded as
//! its own learning history.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{grid_center, make_env, obs_cell, optimal_return, Env, EnvId, TaskSpec, TaskSplit};
use crate::error::{contract, Result};
use crate::history::{choose_train_tasks, obs_from, HistoryMeta, LearningHistory, Transition};
use crate::optim::{adam_step, AdamState, ParamStore};
use crate::rng::{labeled_rng, sample_from_logits, stream_rng};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3CConfig {
    pub num_actors: usize,
    pub gae_lambda: f32,
    pub discount: f32,
    pub entropy_weight: f32,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub episodes_per_run: usize,
    /// Stop a run early once the 50-episode moving average reaches this
    /// fraction of the task oracle. `None` disables the check.
    pub converge_within: Option<f64>,
}

impl Default for A3CConfig {
    fn default() -> Self {
        Self {
            num_actors: 100,
            gae_lambda: 0.95,
            discount: 0.99,
            entropy_weight: 0.01,
            mlp_layers: 3,
            mlp_hidden: 128,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-6,
            episodes_per_run: 1000,
            converge_within: Some(0.05),
        }
    }
}

/// Shared-torso MLP: one-hot cell -> relu layers -> policy logits + value.
pub fn init_actor_critic(
    obs_vocab: usize,
    num_actions: usize,
    config: &A3CConfig,
    seed: u64,
) -> ParamStore {
    let mut rng = stream_rng(seed, 0xac);
    let mut params = ParamStore::new();
    let mut fan_in = obs_vocab;
    for layer in 0..config.mlp_layers {
        params.insert(
            format!("torso.{layer}.weight"),
            Tensor::trunc_normal(&[fan_in, config.mlp_hidden], (2.0 / fan_in as f32).sqrt(), &mut rng),
        );
        params.insert(format!("torso.{layer}.bias"), Tensor::zeros(&[config.mlp_hidden]));
        fan_in = config.mlp_hidden;
    }
    params.insert(
        "policy.weight",
        Tensor::trunc_normal(&[fan_in, num_actions], 0.01, &mut rng),
    );
    params.insert("policy.bias", Tensor::zeros(&[num_actions]));
    params.insert("value.weight", Tensor::trunc_normal(&[fan_in, 1], 0.01, &mut rng));
    params.insert("value.bias", Tensor::zeros(&[1]));
    params
}

fn gemv(x: &[f32], w: &Tensor, b: &Tensor, relu: bool) -> Vec<f32> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows);
    let mut out = b.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let wrow = &w.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out[j] += xi * wrow[j];
        }
    }
    if relu {
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
    }
    out
}

/// Policy logits for one observation cell (rollout path, no tape).
pub fn policy_logits(params: &ParamStore, config: &A3CConfig, cell: usize) -> Vec<f32> {
    let w0 = params.get("torso.0.weight").unwrap();
    let b0 = params.get("torso.0.bias").unwrap();
    let hidden = config.mlp_hidden;
    // One-hot input: the first layer is a row lookup.
    let mut h: Vec<f32> = (0..hidden)
        .map(|j| (w0.data[cell * hidden + j] + b0.data[j]).max(0.0))
        .collect();
    for layer in 1..config.mlp_layers {
        let w = params.get(&format!("torso.{layer}.weight")).unwrap();
        let b = params.get(&format!("torso.{layer}.bias")).unwrap();
        h = gemv(&h, w, b, true);
    }
    gemv(
        &h,
        params.get("policy.weight").unwrap(),
        params.get("policy.bias").unwrap(),
        false,
    )
}

/// One actor episode: observation cells, actions, rewards, raw observations.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub cells: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub observations: Vec<crate::history::Obs>,
}

fn play_episode(
    env: &mut Env,
    params: &ParamStore,
    config: &A3CConfig,
    rng: &mut ChaCha8Rng,
) -> Rollout {
    let horizon = env.horizon();
    let env_id = env.env_id();
    let mut obs = env.reset();
    let mut out = Rollout {
        cells: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        observations: Vec::with_capacity(horizon),
    };
    for _ in 0..horizon {
        let cell = obs_cell(env_id, &obs);
        let logits = policy_logits(params, config, cell);
        let action = sample_from_logits(&logits, rng);
        let step = env.step(action).expect("within horizon");
        out.cells.push(cell);
        out.actions.push(action);
        out.rewards.push(step.reward);
        out.observations.push(obs_from(&obs));
        obs = step.observation;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateDiag {
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// One synchronous update from a batch of actor episodes: GAE advantages,
/// policy-gradient + 0.5 value + entropy loss, single Adam step.
pub fn a3c_update(
    params: &mut ParamStore,
    adam: &mut AdamState,
    rollouts: &[Rollout],
    obs_vocab: usize,
    num_actions: usize,
    config: &A3CConfig,
) -> Result<UpdateDiag> {
    if rollouts.is_empty() {
        return Err(contract("a3c_update needs at least one rollout"));
    }
    let total: usize = rollouts.iter().map(|r| r.cells.len()).sum();
    let mut onehot = vec![0.0f32; total * obs_vocab];
    let mut actions = Vec::with_capacity(total);
    let mut row = 0usize;
    for r in rollouts {
        for (&cell, &a) in r.cells.iter().zip(&r.actions) {
            onehot[row * obs_vocab + cell] = 1.0;
            actions.push(a);
            row += 1;
        }
    }

    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![total, obs_vocab], onehot));
    let mut h = x;
    for layer in 0..config.mlp_layers {
        let w = tape.param(&format!("torso.{layer}.weight"), params.share(&format!("torso.{layer}.weight")));
        let b = tape.param(&format!("torso.{layer}.bias"), params.share(&format!("torso.{layer}.bias")));
        let z = tape.matmul(h, w);
        let z = tape.add_bias(z, b);
        h = tape.relu(z);
    }
    let wp = tape.param("policy.weight", params.share("policy.weight"));
    let bp = tape.param("policy.bias", params.share("policy.bias"));
    let wv = tape.param("value.weight", params.share("value.weight"));
    let bv = tape.param("value.bias", params.share("value.bias"));
    let logits = tape.matmul(h, wp);
    let logits = tape.add_bias(logits, bp);
    let values = tape.matmul(h, wv);
    let values = tape.add_bias(values, bv);
    debug_assert_eq!(tape.value(logits).shape, vec![total, num_actions]);

    // GAE per episode using the freshly predicted values as constants.
    let value_data = &tape.value(values).data;
    let mut advantages = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    let mut offset = 0usize;
    for r in rollouts {
        let t_len = r.rewards.len();
        let mut v = value_data[offset..offset + t_len].to_vec();
        v.push(0.0); // fixed-horizon terminal bootstrap
        let (adv, tgt) = super::compute_gae(&r.rewards, &v, config.discount, config.gae_lambda)?;
        advantages.extend(adv);
        targets.extend(tgt);
        offset += t_len;
    }

    let pg = tape.pg_loss_mean(logits, Arc::new(actions), Arc::new(advantages));
    let vloss = tape.mse_mean(values, Arc::new(targets));
    let ent = tape.entropy_mean(logits);
    let loss = tape.sum_scaled(vec![(pg, 1.0), (vloss, 0.5), (ent, -config.entropy_weight)]);
    tape.backward(loss);
    let grads = tape.param_grads();
    let grad_norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();

    let diag = UpdateDiag {
        mean_return: rollouts
            .iter()
            .map(|r| r.rewards.iter().map(|&x| f64::from(x)).sum::<f64>())
            .sum::<f64>()
            / rollouts.len() as f64,
        policy_loss: f64::from(tape.value(pg).data[0]),
        value_loss: f64::from(tape.value(vloss).data[0]),
        entropy: f64::from(tape.value(ent).data[0]),
        grad_norm,
    };
    adam_step(params, &grads, adam, config.learning_rate, config.adam_betas, config.adam_eps)?;
    Ok(diag)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTrainStats {
    pub task: TaskSpec,
    pub episodes_per_actor: usize,
    pub final_ma_return: f64,
    pub oracle: f64,
}

/// Train one task to the convergence criterion, recording each actor's
/// stream as a separate learning history.
pub fn train_single_task(
    task: &TaskSpec,
    config: &A3CConfig,
    seed: u64,
) -> Result<(Vec<LearningHistory>, TaskTrainStats)> {
    let env_id = task.env_id();
    let obs_vocab = env_id.obs_vocab();
    let num_actions = env_id.num_actions();
    let mut params = init_actor_critic(obs_vocab, num_actions, config, seed ^ task.seed());
    let mut adam = AdamState::new(&params);

    let oracle = match env_id {
        EnvId::DarkKeyToDoor => 2.0,
        _ => f64::from(optimal_return(task, grid_center(env_id))?),
    };

    struct Actor {
        env: Env,
        rng: ChaCha8Rng,
        transitions: Vec<Transition>,
    }
    let mut actors: Vec<Actor> = (0..config.num_actors)
        .map(|i| {
            let actor_task = task.with_seed(labeled_rng(seed ^ task.seed(), "actor-env", i as u64).next_u64());
            Ok(Actor {
                env: make_env(&actor_task)?,
                rng: labeled_rng(seed ^ task.seed(), "actor-policy", i as u64),
                transitions: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;

    let mut ma = std::collections::VecDeque::with_capacity(50);
    let mut episodes_run = 0usize;
    let mut final_ma = 0.0f64;
    for _episode in 0..config.episodes_per_run {
        let rollouts: Vec<Rollout> = actors
            .par_iter_mut()
            .map(|a| play_episode(&mut a.env, &params, config, &mut a.rng))
            .collect();
        for (a, r) in actors.iter_mut().zip(&rollouts) {
            for (i, ((obs, &action), &reward)) in
                r.observations.iter().zip(&r.actions).zip(&r.rewards).enumerate()
            {
                a.transitions.push(Transition {
                    observation: obs.clone(),
                    action: action as u16,
                    reward,
                    episode_start: i == 0,
                });
            }
        }
        let diag = a3c_update(&mut params, &mut adam, &rollouts, obs_vocab, num_actions, config)?;
        episodes_run += 1;
        if ma.len() == 50 {
            ma.pop_front();
        }
        ma.push_back(diag.mean_return);
        final_ma = ma.iter().sum::<f64>() / ma.len() as f64;
        if let Some(frac) = config.converge_within {
            if ma.len() == 50 && final_ma >= oracle * (1.0 - frac) {
                break;
            }
        }
    }

    let histories = actors
        .into_iter()
        .enumerate()
        .map(|(i, a)| LearningHistory {
            task: task.clone(),
            transitions: a.transitions,
            meta: HistoryMeta {
                algorithm: "a3c".into(),
                actor_id: i as u32,
                seed,
                subsample_k: 1,
                expert: false,
            },
        })
        .collect();
    Ok((
        histories,
        TaskTrainStats {
            task: task.clone(),
            episodes_per_actor: episodes_run,
            final_ma_return: final_ma,
            oracle,
        },
    ))
}

/// Run the source algorithm over `n_tasks` sampled train tasks; one learning
/// history per actor per task.
pub fn collect_histories(
    split: &TaskSplit,
    n_tasks: usize,
    config: &A3CConfig,
    seed: u64,
) -> Result<(Vec<LearningHistory>, Vec<TaskTrainStats>)> {
    let mut rng = stream_rng(seed, 0x7a5c);
    let tasks = choose_train_tasks(split, n_tasks, &mut rng)?;
    let mut histories = Vec::with_capacity(n_tasks * config.num_actors);
    let mut stats = Vec::with_capacity(n_tasks);
    for task in &tasks {
        let (hs, st) = train_single_task(task, config, seed)?;
        histories.extend(hs);
        stats.push(st);
    }
    Ok((histories, stats))
}

use rand_chacha::rand_core::RngCore;

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config(actors: usize, episodes: usize) -> A3CConfig {
        A3CConfig {
            num_actors: actors,
            learning_rate: 2e-3,
            episodes_per_run: episodes,
            ..A3CConfig::default()
        }
    }

    #[test]
    fn paper_defaults() {
        let c = A3CConfig::default();
        assert_eq!(c.entropy_weight, 0.01);
        assert_eq!(c.num_actors, 100);
        assert_eq!(c.gae_lambda, 0.95);
        assert_eq!(c.adam_betas, (0.9, 0.999));
    }

    #[test]
    fn zero_advantages_and_exact_targets_leave_only_entropy() {
        // Zero rewards with a zeroed value head: advantages and value error
        // vanish; with the entropy term off the gradient is numerically zero.
        let config = A3CConfig {
            entropy_weight: 0.0,
            ..desk_config(2, 1)
        };
        let mut params = init_actor_critic(81, 5, &config, 7);
        params.apply("value.weight", |t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let mut adam = AdamState::new(&params);
        let rollouts = vec![Rollout {
            cells: vec![0, 1, 2],
            actions: vec![0, 1, 2],
            rewards: vec![0.0, 0.0, 0.0],
            observations: vec![obs_from(&[0, 0]), obs_from(&[0, 1]), obs_from(&[0, 2])],
        }];
        let diag = a3c_update(&mut params, &mut adam, &rollouts, 81, 5, &config).unwrap();
        assert!(diag.grad_norm < 1e-6, "grad norm {}", diag.grad_norm);
    }

    #[test]
    fn empty_rollouts_are_rejected() {
        let config = desk_config(2, 1);
        let mut params = init_actor_critic(81, 5, &config, 7);
        let mut adam = AdamState::new(&params);
        assert!(a3c_update(&mut params, &mut adam, &[], 81, 5, &config).is_err());
    }

    #[test]
    fn trivial_center_goal_reaches_fifteen() {
        let task = TaskSpec::DarkRoom { goal: (4, 4), seed: 11 };
        let config = desk_config(4, 300);
        let (histories, stats) = train_single_task(&task, &config, 3).unwrap();
        assert_eq!(histories.len(), 4);
        assert!(
            stats.final_ma_return > 15.0,
            "moving average stalled at {}",
            stats.final_ma_return
        );
        for h in &histories {
            assert_eq!(h.meta.algorithm, "a3c");
            assert_eq!(h.num_episodes(), stats.episodes_per_actor);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let task = TaskSpec::DarkRoom { goal: (4, 3), seed: 5 };
        let config = desk_config(3, 12);
        let (h1, _) = train_single_task(&task, &config, 9).unwrap();
        let (h2, _) = train_single_task(&task, &config, 9).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn learning_trend_in_histories() {
        let task = TaskSpec::DarkRoom { goal: (2, 4), seed: 1 };
        let config = desk_config(4, 400);
        let (histories, _) = train_single_task(&task, &config, 21).unwrap();
        // Mean of last-decile episode returns >= mean of first decile.
        let mut first = 0.0f64;
        let mut last = 0.0f64;
        for h in &histories {
            let rets = h.episode_returns();
            let d = (rets.len() / 10).max(1);
            first += rets[..d].iter().map(|&r| f64::from(r)).sum::<f64>() / d as f64;
            last += rets[rets.len() - d..].iter().map(|&r| f64::from(r)).sum::<f64>() / d as f64;
        }
        assert!(last >= first, "no improvement: first {first}, last {last}");
    }
}
