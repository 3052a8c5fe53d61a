//! Attention-map export with episode-boundary and reward annotations.

use crate::error::{contract, Result};
use crate::model::{forward, ModelArch, PolicyModel, TokenizedWindow};

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub len: usize,
    /// Row-major [len, len] attention probabilities.
    pub weights: Vec<f32>,
    pub episode_starts: Vec<bool>,
    pub reward_tokens: Vec<bool>,
}

impl AttentionMap {
    /// CSV with two marker rows (episode restarts, reward-1 tokens) before
    /// the weight matrix.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let flag_row = |name: &str, flags: &[bool]| {
            let cells: Vec<&str> = flags.iter().map(|&f| if f { "1" } else { "0" }).collect();
            format!("{name},{}\n", cells.join(","))
        };
        out.push_str(&flag_row("episode_start", &self.episode_starts));
        out.push_str(&flag_row("reward_one", &self.reward_tokens));
        for i in 0..self.len {
            let row: Vec<String> = self.weights[i * self.len..(i + 1) * self.len]
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            out.push_str(&format!("row{i},{}\n", row.join(",")));
        }
        out
    }

    /// Fraction of row `i`'s mass on positions before `boundary`.
    pub fn row_mass_before(&self, i: usize, boundary: usize) -> f64 {
        self.weights[i * self.len..i * self.len + boundary]
            .iter()
            .map(|&v| f64::from(v))
            .sum()
    }
}

/// Eval-mode attention probabilities for every layer and head.
pub fn export_attention(model: &PolicyModel, window: &TokenizedWindow) -> Result<Vec<AttentionMap>> {
    if model.arch != ModelArch::Transformer {
        return Err(contract("attention export requires the transformer architecture"));
    }
    let pass = forward(&model.params, &model.config, window, false, None)?;
    let (starts, rewards) = window.annotations();
    let heads = model.config.num_heads;
    Ok(pass
        .attention
        .iter()
        .enumerate()
        .map(|(i, &var)| {
            let t = pass.tape.value(var);
            AttentionMap {
                layer: i / heads,
                head: i % heads,
                len: t.shape[0],
                weights: t.data.clone(),
                episode_starts: starts.clone(),
                reward_tokens: rewards.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvId;
    use crate::history::{obs_from, Transition};
    use crate::model::{tokenize, TransformerConfig};

    fn window_with_rewards() -> (PolicyModel, TokenizedWindow) {
        let cfg = TransformerConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 16,
            ..TransformerConfig::for_env(EnvId::DarkRoom, 8)
        };
        let model = PolicyModel::init(ModelArch::Transformer, cfg, 5).unwrap();
        let ts: Vec<Transition> = (0..6)
            .map(|i| Transition {
                observation: obs_from(&[i as i16, 0]),
                action: (i % 5) as u16,
                reward: f32::from(u8::from(i == 2)),
                episode_start: i % 3 == 0,
            })
            .collect();
        let w = tokenize(&ts, None, None, &model.config).unwrap();
        (model, w)
    }

    #[test]
    fn maps_are_row_stochastic_and_causal() {
        let (model, w) = window_with_rewards();
        let maps = export_attention(&model, &w).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            for i in 0..m.len {
                let sum: f64 = m.weights[i * m.len..(i + 1) * m.len]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for j in (i + 1)..m.len {
                    assert_eq!(m.weights[i * m.len + j], 0.0, "upper triangle must be zero");
                }
            }
        }
    }

    #[test]
    fn csv_carries_marker_rows() {
        let (model, w) = window_with_rewards();
        let maps = export_attention(&model, &w).unwrap();
        let csv = maps[0].to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("episode_start,1,0,0,0,0,0,0,0,0,1"));
        assert!(lines[1].starts_with("reward_one,"));
        // Reward token of transition 2 sits at position 3*2+2 = 8.
        let reward_flags: Vec<&str> = lines[1].split(',').skip(1).collect();
        assert_eq!(reward_flags[8], "1");
        assert_eq!(lines.len(), 2 + w.len());
    }

    #[test]
    fn recurrent_arch_is_rejected() {
        let (model, w) = window_with_rewards();
        let mut rec = model;
        rec.arch = ModelArch::Recurrent(crate::model::RecurrentConfig::default());
        assert!(export_attention(&rec, &w).is_err());
    }
}
