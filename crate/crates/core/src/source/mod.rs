//! Source RL algorithms whose training runs populate the dataset: UCB for
//! bandits and a synchronous batched advantage actor-critic for gridworlds,
//! plus the single-stream episode subsampling transform.

mod a3c;
mod gae;
mod ucb;

pub use a3c::{a3c_update, collect_histories, init_actor_critic, train_single_task, A3CConfig, Rollout, TaskTrainStats};
pub use gae::compute_gae;
pub use ucb::{run_ucb, run_ucb_expert, ucb_select, UcbState, UCB_DEFAULT_EXPLORE};

use crate::error::{contract, Result};
use crate::history::{HistoryMeta, LearningHistory};

/// Keep every `k`-th episode (0, k, 2k, ...) with transitions and boundary
/// flags intact; metadata records the compression factor.
pub fn subsample_history(h: &LearningHistory, k: usize) -> Result<LearningHistory> {
    if k == 0 {
        return Err(contract("subsample factor must be >= 1"));
    }
    let starts = h.episode_starts();
    if k > starts.len() {
        return Err(contract(format!(
            "subsample factor {k} exceeds episode count {}",
            starts.len()
        )));
    }
    if k == 1 {
        return Ok(h.clone());
    }
    let mut transitions = Vec::with_capacity(h.len() / k + 1);
    for (e, &start) in starts.iter().enumerate() {
        if e % k != 0 {
            continue;
        }
        let end = starts.get(e + 1).copied().unwrap_or(h.len());
        transitions.extend_from_slice(&h.transitions[start..end]);
    }
    Ok(LearningHistory {
        task: h.task.clone(),
        transitions,
        meta: HistoryMeta {
            subsample_k: h.meta.subsample_k * k as u32,
            ..h.meta.clone()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskSpec;
    use crate::history::{obs_from, Transition};

    fn history(episodes: usize, horizon: usize) -> LearningHistory {
        let transitions = (0..episodes * horizon)
            .map(|t| Transition {
                observation: obs_from(&[0]),
                action: (t / horizon) as u16, // action encodes episode index
                reward: 0.0,
                episode_start: t % horizon == 0,
            })
            .collect();
        LearningHistory {
            task: TaskSpec::AdversarialBandit { arm: 1, seed: 0 },
            transitions,
            meta: HistoryMeta {
                algorithm: "ucb".into(),
                actor_id: 0,
                seed: 0,
                subsample_k: 1,
                expert: false,
            },
        }
    }

    #[test]
    fn k1_is_identity() {
        let h = history(5, 4);
        assert_eq!(subsample_history(&h, 1).unwrap(), h);
    }

    #[test]
    fn factor_10_keeps_every_tenth_episode() {
        let h = history(2000, 4);
        let s = subsample_history(&h, 10).unwrap();
        assert_eq!(s.num_episodes(), 200);
        assert_eq!(s.meta.subsample_k, 10);
        // Episodes kept are 0, 10, 20, ... (episode index encoded in action).
        assert_eq!(s.transitions[0].action, 0);
        assert_eq!(s.transitions[4].action, 10);
    }

    #[test]
    fn boundary_flags_stay_one_per_episode() {
        let h = history(30, 5);
        let s = subsample_history(&h, 3).unwrap();
        assert_eq!(s.num_episodes(), 10);
        for (i, t) in s.transitions.iter().enumerate() {
            assert_eq!(t.episode_start, i % 5 == 0);
        }
    }

    #[test]
    fn oversized_factor_is_rejected() {
        let h = history(3, 4);
        assert!(subsample_history(&h, 4).is_err());
    }
}
