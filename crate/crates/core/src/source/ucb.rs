//! Upper Confidence Bound exploration for the 10-arm bandit.

use crate::env::{make_env, TaskSpec, BANDIT_ARMS};
use crate::error::{contract, Result};
use crate::history::{obs_from, HistoryMeta, LearningHistory, Transition};

/// Tuned so the exploration bonus of a once-pulled arm stays below a
/// reward gap of 1 across a 100-trial run.
pub const UCB_DEFAULT_EXPLORE: f64 = 0.5;

/// Per-arm pull counts and reward sums.
#[derive(Debug, Clone, Default)]
pub struct UcbState {
    pub counts: [u32; BANDIT_ARMS],
    pub sums: [f64; BANDIT_ARMS],
    pub t: usize,
}

impl UcbState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        self.sums[arm] += reward;
        self.t += 1;
    }
}

/// Lowest-index unpulled arm first; afterwards argmax of
/// mean + explore_coeff * sqrt(ln t / count), ties to the lowest index.
pub fn ucb_select(state: &UcbState, explore_coeff: f64) -> usize {
    if let Some(arm) = state.counts.iter().position(|&c| c == 0) {
        return arm;
    }
    let ln_t = (state.t as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for arm in 0..BANDIT_ARMS {
        let mean = state.sums[arm] / f64::from(state.counts[arm]);
        let score = mean + explore_coeff * (ln_t / f64::from(state.counts[arm])).sqrt();
        if score > best_score {
            best_score = score;
            best = arm;
        }
    }
    best
}

/// Run UCB against an arbitrary reward source; one transition per trial.
pub fn run_ucb_with(
    mut reward_of: impl FnMut(usize) -> f32,
    trials: usize,
    explore_coeff: f64,
) -> (UcbState, Vec<Transition>) {
    let mut state = UcbState::new();
    let mut transitions = Vec::with_capacity(trials);
    for t in 0..trials {
        let arm = ucb_select(&state, explore_coeff);
        let reward = reward_of(arm);
        state.update(arm, f64::from(reward));
        transitions.push(Transition {
            observation: obs_from(&[0]),
            action: arm as u16,
            reward,
            episode_start: t == 0,
        });
    }
    (state, transitions)
}

/// One UCB learning history on a bandit task: exactly `trials` transitions
/// forming a single episode.
pub fn run_ucb(task: &TaskSpec, trials: usize, explore_coeff: f64) -> Result<LearningHistory> {
    if !matches!(task, TaskSpec::AdversarialBandit { .. }) {
        return Err(contract("run_ucb expects a bandit task"));
    }
    let mut env = make_env(task)?;
    env.reset();
    let (_, transitions) = run_ucb_with(
        |arm| env.step(arm).expect("bandit horizon matches trials").reward,
        trials,
        explore_coeff,
    );
    Ok(LearningHistory {
        task: task.clone(),
        transitions,
        meta: HistoryMeta {
            algorithm: "ucb".into(),
            actor_id: 0,
            seed: task.seed(),
            subsample_k: 1,
            expert: false,
        },
    })
}

/// Expert variant: burn in UCB for `warmup` unrecorded trials on the same
/// payout process, then record `trials` of the converged arm-puller as a
/// single-episode history flagged expert.
pub fn run_ucb_expert(
    task: &TaskSpec,
    trials: usize,
    warmup: usize,
    explore_coeff: f64,
) -> Result<LearningHistory> {
    if !matches!(task, TaskSpec::AdversarialBandit { .. }) {
        return Err(contract("run_ucb_expert expects a bandit task"));
    }
    let TaskSpec::AdversarialBandit { arm, seed } = task else { unreachable!() };
    let mut env = crate::env::BanditEnv::new(*arm, *seed);
    env.reset();
    let mut state = UcbState::new();
    for _ in 0..warmup {
        let a = ucb_select(&state, explore_coeff);
        let r = env.step(a).expect("warmup step").reward;
        state.update(a, f64::from(r));
        if state.t % crate::env::BANDIT_TRIALS == 0 {
            env.reset();
        }
    }
    let mut transitions = Vec::with_capacity(trials);
    env.reset();
    for t in 0..trials {
        let a = ucb_select(&state, explore_coeff);
        let r = env.step(a).expect("recorded step").reward;
        state.update(a, f64::from(r));
        transitions.push(Transition {
            observation: obs_from(&[0]),
            action: a as u16,
            reward: r,
            episode_start: t == 0,
        });
    }
    Ok(LearningHistory {
        task: task.clone(),
        transitions,
        meta: HistoryMeta {
            algorithm: "ucb".into(),
            actor_id: 0,
            seed: task.seed(),
            subsample_k: 1,
            expert: true,
        },
    })
}
