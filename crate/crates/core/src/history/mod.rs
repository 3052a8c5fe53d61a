//! Learning-history datasets: persistence, train/test task splits, and the
//! across-episodic window sampling that feeds sequence-model training.

mod store;
mod window;

pub use store::{read_dataset, write_dataset};
pub use window::{mask_tokens, sample_window, sample_window_from, TrainingWindow};

use arrayvec::ArrayVec;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvId, Split, TaskSpec, TaskSplit, GRID_SMALL};
use crate::error::{contract, Result};

/// Observation payload; at most two coordinates in every supported env.
pub type Obs = ArrayVec<i16, 2>;

pub fn obs_from(slice: &[i16]) -> Obs {
    let mut o = Obs::new();
    o.try_extend_from_slice(slice).expect("observation wider than 2");
    o
}

/// One (observation, action, reward, episode-boundary) record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Obs,
    pub action: u16,
    pub reward: f32,
    pub episode_start: bool,
}

/// Per-history provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMeta {
    pub algorithm: String,
    pub actor_id: u32,
    pub seed: u64,
    pub subsample_k: u32,
    pub expert: bool,
}

/// The full chronological transition stream of one source-algorithm run on
/// one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningHistory {
    pub task: TaskSpec,
    pub transitions: Vec<Transition>,
    pub meta: HistoryMeta,
}

impl LearningHistory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Offsets of episode_start flags, in order.
    pub fn episode_starts(&self) -> Vec<usize> {
        self.transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.episode_start)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_episodes(&self) -> usize {
        self.transitions.iter().filter(|t| t.episode_start).count()
    }

    /// Sum of rewards per episode, in order.
    pub fn episode_returns(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for t in &self.transitions {
            if t.episode_start {
                out.push(0.0);
            }
            if let Some(last) = out.last_mut() {
                *last += t.reward;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordInfo {
    pub offset: u64,
    pub len: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env_id: EnvId,
    pub split: TaskSplit,
    pub gen_config: serde_json::Value,
    pub record_count: usize,
    pub records: Vec<RecordInfo>,
}

/// Dataset D: the manifest plus every learning history it indexes.
#[derive(Debug, Clone)]
pub struct HistoryDataset {
    pub manifest: DatasetManifest,
    pub histories: Vec<LearningHistory>,
}

impl HistoryDataset {
    pub fn new(
        env_id: EnvId,
        split: TaskSplit,
        gen_config: serde_json::Value,
        histories: Vec<LearningHistory>,
    ) -> Self {
        Self {
            manifest: DatasetManifest {
                env_id,
                split,
                gen_config,
                record_count: histories.len(),
                records: Vec::new(),
            },
            histories,
        }
    }

    pub fn total_transitions(&self) -> usize {
        self.histories.iter().map(LearningHistory::len).sum()
    }

    /// Structural validation: horizon-length episodes, exactly one
    /// episode_start per episode, rewards in {0,1}, tasks inside the train
    /// split, manifest count matching.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.record_count != self.histories.len() {
            return Err(crate::CoreError::RecordCountMismatch {
                manifest: self.manifest.record_count,
                found: self.histories.len(),
            });
        }
        let horizon = self.manifest.env_id.horizon();
        let train_keys: std::collections::HashSet<String> = self
            .manifest
            .split
            .train
            .iter()
            .map(TaskSpec::goal_key)
            .collect();
        let bandit = self.manifest.env_id == EnvId::AdversarialBandit;
        for (i, h) in self.histories.iter().enumerate() {
            if h.is_empty() {
                return Err(contract(format!("history {i} is empty")));
            }
            if h.task.env_id() != self.manifest.env_id {
                return Err(contract(format!("history {i} env differs from manifest")));
            }
            if !bandit && !train_keys.contains(&h.task.goal_key()) {
                return Err(contract(format!(
                    "history {i} task {} is not in the train split",
                    h.task.goal_key()
                )));
            }
            let mut since_start = 0usize;
            for (j, t) in h.transitions.iter().enumerate() {
                if t.reward != 0.0 && t.reward != 1.0 {
                    return Err(contract(format!(
                        "history {i} transition {j} reward {} outside {{0,1}}",
                        t.reward
                    )));
                }
                if t.episode_start {
                    if j != 0 && since_start != horizon {
                        return Err(contract(format!(
                            "history {i} episode ending at {j} has {since_start} != {horizon} steps"
                        )));
                    }
                    since_start = 0;
                } else if j == 0 {
                    return Err(contract(format!("history {i} does not begin with episode_start")));
                }
                since_start += 1;
            }
            if since_start != horizon {
                return Err(contract(format!(
                    "history {i} final episode has {since_start} != {horizon} steps"
                )));
            }
        }
        Ok(())
    }

    /// Additional precondition for window sampling with context length `c`.
    pub fn validate_for_windows(&self, c: usize) -> Result<()> {
        self.validate()?;
        for (i, h) in self.histories.iter().enumerate() {
            if h.len() < c {
                return Err(contract(format!(
                    "history {i} has {} transitions, shorter than context {c}",
                    h.len()
                )));
            }
        }
        Ok(())
    }
}

/// Disjoint, exhaustive train/test partition over an environment's task
/// enumeration. The bandit uses the parity rule instead of tables.
pub fn split_tasks(env_id: EnvId, holdout_fraction: f64, rng: &mut ChaCha8Rng) -> Result<TaskSplit> {
    if env_id == EnvId::AdversarialBandit {
        return Ok(TaskSplit {
            env_id,
            train: vec![],
            test: vec![],
        });
    }
    if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
        return Err(contract("holdout_fraction must lie strictly between 0 and 1"));
    }
    let mut all: Vec<TaskSpec> = match env_id {
        EnvId::DarkRoom => grid_cells(GRID_SMALL)
            .map(|goal| TaskSpec::DarkRoom { goal, seed: 0 })
            .collect(),
        EnvId::DarkRoomHard => grid_cells(crate::env::GRID_LARGE)
            .map(|goal| TaskSpec::DarkRoomHard { goal, seed: 0 })
            .collect(),
        EnvId::DarkKeyToDoor => {
            let cells: Vec<(i16, i16)> = grid_cells(GRID_SMALL).collect();
            cells
                .iter()
                .flat_map(|&key| {
                    cells
                        .iter()
                        .map(move |&door| TaskSpec::DarkKeyToDoor { key, door, seed: 0 })
                })
                .collect()
        }
        EnvId::AdversarialBandit => unreachable!(),
    };
    all.shuffle(rng);
    let n = all.len();
    let test_count = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let test = all.split_off(n - test_count);
    Ok(TaskSplit {
        env_id,
        train: all,
        test,
    })
}

fn grid_cells(size: i16) -> impl Iterator<Item = (i16, i16)> {
    (0..size).flat_map(move |x| (0..size).map(move |y| (x, y)))
}

/// Truncate each history to its final `last_m_episodes` episodes (the
/// converged policy) and flag the result as expert data.
pub fn make_expert_dataset(
    dataset: &HistoryDataset,
    last_m_episodes: usize,
    context_transitions: usize,
) -> Result<HistoryDataset> {
    let horizon = dataset.manifest.env_id.horizon();
    let needed = context_transitions.div_ceil(horizon);
    if last_m_episodes < needed {
        return Err(contract(format!(
            "expert cut of {last_m_episodes} episodes cannot host windows of {context_transitions} transitions"
        )));
    }
    let histories = dataset
        .histories
        .iter()
        .map(|h| {
            let starts = h.episode_starts();
            let cut = if last_m_episodes >= starts.len() {
                0
            } else {
                starts[starts.len() - last_m_episodes]
            };
            LearningHistory {
                task: h.task.clone(),
                transitions: h.transitions[cut..].to_vec(),
                meta: HistoryMeta {
                    expert: true,
                    ..h.meta.clone()
                },
            }
        })
        .collect();
    let mut out = HistoryDataset::new(
        dataset.manifest.env_id,
        dataset.manifest.split.clone(),
        dataset.manifest.gen_config.clone(),
        histories,
    );
    out.manifest.gen_config["expert_last_m_episodes"] = serde_json::json!(last_m_episodes);
    Ok(out)
}

/// Sample a task table for data generation: the first `n_tasks` train tasks
/// under a seeded shuffle, without replacement.
pub fn choose_train_tasks(
    split: &TaskSplit,
    n_tasks: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskSpec>> {
    if split.env_id == EnvId::AdversarialBandit {
        // Parity rule: draw with replacement from the biased distribution.
        return (0..n_tasks)
            .map(|_| crate::env::sample_task(Split::Train, split, rng))
            .collect();
    }
    if n_tasks > split.train.len() {
        return Err(contract(format!(
            "requested {n_tasks} train tasks but split holds {}",
            split.train.len()
        )));
    }
    let mut table = split.train.clone();
    table.shuffle(rng);
    table.truncate(n_tasks);
    use rand::Rng;
    Ok(table.into_iter().map(|t| t.with_seed(rng.gen())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn dark_room_split_is_65_16() {
        let mut rng = stream_rng(1, 0);
        let split = split_tasks(EnvId::DarkRoom, 0.2, &mut rng).unwrap();
        assert_eq!(split.train.len(), 65);
        assert_eq!(split.test.len(), 16);
        let train: std::collections::HashSet<_> =
            split.train.iter().map(TaskSpec::goal_key).collect();
        assert!(split.test.iter().all(|t| !train.contains(&t.goal_key())));
    }

    #[test]
    fn key_to_door_split_can_target_2000_train() {
        let mut rng = stream_rng(2, 0);
        let holdout = 1.0 - 2000.0 / 6561.0;
        let split = split_tasks(EnvId::DarkKeyToDoor, holdout, &mut rng).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 6561);
        assert!((split.train.len() as i64 - 2000).abs() <= 1, "{}", split.train.len());
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let a = split_tasks(EnvId::DarkRoom, 0.2, &mut stream_rng(9, 3)).unwrap();
        let b = split_tasks(EnvId::DarkRoom, 0.2, &mut stream_rng(9, 3)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        assert!(split_tasks(EnvId::DarkRoom, 0.0, &mut stream_rng(1, 1)).is_err());
        assert!(split_tasks(EnvId::DarkRoom, 1.0, &mut stream_rng(1, 1)).is_err());
    }

    fn toy_history(n_episodes: usize, horizon: usize) -> LearningHistory {
        let mut transitions = Vec::new();
        for _ in 0..n_episodes {
            for t in 0..horizon {
                transitions.push(Transition {
                    observation: obs_from(&[4, 4]),
                    action: 0,
                    reward: f32::from(u8::from(t == 0)),
                    episode_start: t == 0,
                });
            }
        }
        LearningHistory {
            task: TaskSpec::DarkRoom { goal: (4, 4), seed: 0 },
            transitions,
            meta: HistoryMeta {
                algorithm: "test".into(),
                actor_id: 0,
                seed: 0,
                subsample_k: 1,
                expert: false,
            },
        }
    }

    #[test]
    fn expert_cut_keeps_final_episodes() {
        let mut rng = stream_rng(4, 0);
        let split = split_tasks(EnvId::DarkRoom, 0.2, &mut rng).unwrap();
        let h = toy_history(10, 20);
        let ds = HistoryDataset::new(EnvId::DarkRoom, split, serde_json::json!({}), vec![h]);
        let expert = make_expert_dataset(&ds, 3, 40).unwrap();
        assert_eq!(expert.histories[0].num_episodes(), 3);
        assert_eq!(expert.histories[0].len(), 60);
        assert!(expert.histories[0].meta.expert);
        // Idempotent under the same m.
        let twice = make_expert_dataset(&expert, 3, 40).unwrap();
        assert_eq!(twice.histories[0], expert.histories[0]);
        // m == total is the identity.
        let all = make_expert_dataset(&ds, 10, 40).unwrap();
        assert_eq!(all.histories[0].transitions, ds.histories[0].transitions);
    }

    #[test]
    fn expert_cut_too_small_for_windows_is_rejected() {
        let mut rng = stream_rng(4, 0);
        let split = split_tasks(EnvId::DarkRoom, 0.2, &mut rng).unwrap();
        let ds = HistoryDataset::new(
            EnvId::DarkRoom,
            split,
            serde_json::json!({}),
            vec![toy_history(10, 20)],
        );
        assert!(make_expert_dataset(&ds, 1, 40).is_err());
    }

    #[test]
    fn validation_rejects_ragged_episodes() {
        let mut rng = stream_rng(4, 1);
        let split = split_tasks(EnvId::DarkRoom, 0.2, &mut rng).unwrap();
        let mut h = toy_history(2, 20);
        h.transitions.pop();
        let ds = HistoryDataset::new(EnvId::DarkRoom, split, serde_json::json!({}), vec![h]);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn episode_returns_accumulate_per_episode() {
        let h = toy_history(3, 20);
        assert_eq!(h.episode_returns(), vec![1.0, 1.0, 1.0]);
        assert_eq!(h.num_episodes(), 3);
        assert_eq!(h.episode_starts(), vec![0, 20, 40]);
    }
}
