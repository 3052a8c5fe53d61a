//! Across-episodic training windows and random token masking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::history::{HistoryDataset, Transition};

/// A contiguous slice of `len` transitions inside one stored history. The
/// slice may and regularly does cross episode boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingWindow {
    pub history: usize,
    pub offset: usize,
    pub len: usize,
}

impl TrainingWindow {
    pub fn transitions<'d>(&self, dataset: &'d HistoryDataset) -> &'d [Transition] {
        &dataset.histories[self.history].transitions[self.offset..self.offset + self.len]
    }
}

/// Uniform over histories, then uniform over valid offsets `[0, T-c]`.
/// Call `validate_for_windows(c)` once per dataset before sampling.
pub fn sample_window(dataset: &HistoryDataset, c: usize, rng: &mut ChaCha8Rng) -> TrainingWindow {
    let history = rng.gen_range(0..dataset.histories.len());
    let t = dataset.histories[history].len();
    let offset = rng.gen_range(0..=t - c);
    TrainingWindow {
        history,
        offset,
        len: c,
    }
}

/// `sample_window` restricted to a subset of history indices (e.g. keeping
/// held-out monitoring histories out of the training stream).
pub fn sample_window_from(
    dataset: &HistoryDataset,
    indices: &[usize],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingWindow {
    let history = indices[rng.gen_range(0..indices.len())];
    let t = dataset.histories[history].len();
    let offset = rng.gen_range(0..=t - c);
    TrainingWindow {
        history,
        offset,
        len: c,
    }
}

/// Independent Bernoulli(mask_prob) flag per token position, one flag vector
/// per window. Flagged input tokens are replaced by the learned mask
/// embedding downstream; prediction targets are never dropped from the loss.
pub fn mask_tokens(
    n_windows: usize,
    tokens_per_window: usize,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<bool>>> {
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(crate::error::contract("mask_prob must lie in [0, 1)"));
    }
    Ok((0..n_windows)
        .map(|_| {
            (0..tokens_per_window)
                .map(|_| mask_prob > 0.0 && rng.gen_bool(mask_prob))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvId, TaskSpec};
    use crate::history::{obs_from, HistoryDataset, HistoryMeta, LearningHistory};
    use crate::rng::stream_rng;

    fn dataset(n_histories: usize, episodes: usize, horizon: usize) -> HistoryDataset {
        let split = crate::history::split_tasks(EnvId::DarkRoom, 0.2, &mut stream_rng(0, 0)).unwrap();
        let histories = (0..n_histories)
            .map(|i| {
                let transitions = (0..episodes * horizon)
                    .map(|t| Transition {
                        observation: obs_from(&[0, 0]),
                        action: 0,
                        reward: 0.0,
                        episode_start: t % horizon == 0,
                    })
                    .collect();
                LearningHistory {
                    task: TaskSpec::DarkRoom { goal: (4, 4), seed: i as u64 },
                    transitions,
                    meta: HistoryMeta {
                        algorithm: "test".into(),
                        actor_id: i as u32,
                        seed: 0,
                        subsample_k: 1,
                        expert: false,
                    },
                }
            })
            .collect();
        HistoryDataset::new(EnvId::DarkRoom, split, serde_json::json!({}), histories)
    }

    #[test]
    fn full_length_window_pins_offset_zero() {
        let ds = dataset(1, 3, 20);
        let mut rng = stream_rng(1, 0);
        for _ in 0..20 {
            let w = sample_window(&ds, 60, &mut rng);
            assert_eq!(w.offset, 0);
            assert_eq!(w.transitions(&ds).len(), 60);
        }
    }

    #[test]
    fn history_choice_is_roughly_uniform() {
        let ds = dataset(2, 3, 20);
        let mut rng = stream_rng(2, 0);
        let n = 10_000;
        let first = (0..n)
            .filter(|_| sample_window(&ds, 10, &mut rng).history == 0)
            .count();
        let frac = first as f64 / f64::from(n);
        assert!((frac - 0.5).abs() < 0.02, "history 0 fraction {frac}");
    }

    #[test]
    fn offsets_are_uniform_chi_square() {
        // 10k draws over 41 offsets; chi-square with 40 dof, 99.9% cutoff ~ 73.4.
        let ds = dataset(1, 3, 20);
        let c = 20;
        let n_offsets = 60 - c + 1;
        let mut counts = vec![0usize; n_offsets];
        let mut rng = stream_rng(3, 0);
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_window(&ds, c, &mut rng).offset] += 1;
        }
        let expected = f64::from(draws) / n_offsets as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 73.4, "chi-square statistic {chi2}");
    }

    #[test]
    fn three_episode_windows_usually_cross_boundaries() {
        let ds = dataset(1, 10, 20);
        let mut rng = stream_rng(4, 0);
        let c = 60; // 3 episode-lengths
        let crossing = (0..1000)
            .filter(|_| {
                let w = sample_window(&ds, c, &mut rng);
                w.transitions(&ds).iter().filter(|t| t.episode_start).count() >= 2
            })
            .count();
        assert!(crossing >= 950, "only {crossing}/1000 windows span 2+ episodes");
    }

    #[test]
    fn mask_prob_zero_flags_nothing() {
        let flags = mask_tokens(4, 30, 0.0, &mut stream_rng(5, 0)).unwrap();
        assert!(flags.iter().all(|w| w.iter().all(|&f| !f)));
    }

    #[test]
    fn mask_rate_tracks_probability() {
        let flags = mask_tokens(100, 300, 0.3, &mut stream_rng(6, 0)).unwrap();
        let total: usize = flags.iter().flatten().filter(|&&f| f).count();
        let rate = total as f64 / 30_000.0;
        assert!((rate - 0.3).abs() < 0.01, "mask rate {rate}");
    }
}
