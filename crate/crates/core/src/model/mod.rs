//! Causal sequence models over (observation, action, reward) token streams.

mod recurrent;
mod transformer;

pub use recurrent::{init_recurrent, recurrent_forward, RecurrentConfig};
pub use transformer::{count_params, forward, init_transformer, ForwardPass};

use serde::{Deserialize, Serialize};

use crate::env::{obs_cell, EnvId};
use crate::error::{contract, Result};
use crate::history::Transition;

/// Token content tables, in tape order.
pub const TABLE_OBS: u8 = 0;
pub const TABLE_ACTION: u8 = 1;
pub const TABLE_REWARD: u8 = 2;
pub const TABLE_MASK: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub env_id: EnvId,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Only absolute position embeddings are implemented.
    pub positional: String,
    /// Only post-norm residual blocks are implemented.
    pub norm_placement: String,
    pub dropout: f32,
    pub attention_dropout: f32,
    /// Context capacity in transitions; the token window is 3x this.
    pub context_transitions: usize,
    pub obs_vocab: usize,
    pub num_actions: usize,
    pub num_rewards: usize,
}

impl TransformerConfig {
    /// Published defaults for an environment: 64-dim, 4 layers, 4 heads,
    /// feedforward 2048, attention dropout 0.5 (0 on the hard variant).
    pub fn for_env(env_id: EnvId, context_transitions: usize) -> Self {
        Self {
            env_id,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ff_dim: 2048,
            positional: "absolute".into(),
            norm_placement: "post_norm".into(),
            dropout: 0.1,
            attention_dropout: if env_id == EnvId::DarkRoomHard { 0.0 } else { 0.5 },
            context_transitions,
            obs_vocab: env_id.obs_vocab(),
            num_actions: env_id.num_actions(),
            num_rewards: 2,
        }
    }

    pub fn max_tokens(&self) -> usize {
        3 * self.context_transitions
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.num_heads != 0 {
            return Err(contract("embed_dim must be divisible by num_heads"));
        }
        if self.context_transitions == 0 {
            return Err(contract("context_transitions must be >= 1"));
        }
        if self.positional != "absolute" {
            return Err(contract("only absolute position embeddings are supported"));
        }
        if self.norm_placement != "post_norm" {
            return Err(contract("only post-norm placement is supported"));
        }
        Ok(())
    }
}

/// One token: which content table and which row of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub table: u8,
    pub id: u32,
}

/// Tokenized window: three tokens per transition in (o, a, r) order, with
/// the action target attached to the observation slot, plus optionally a
/// trailing observation token (the evaluation query).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedWindow {
    pub tokens: Vec<Token>,
    pub masked: Vec<bool>,
    /// (position, action) pairs; positions are observation slots.
    pub targets: Vec<(usize, usize)>,
    pub n_transitions: usize,
    episode_start_flags: Vec<bool>,
}

impl TokenizedWindow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token positions of episode starts and of reward-1 tokens, for
    /// attention-map annotations.
    pub fn annotations(&self) -> (Vec<bool>, Vec<bool>) {
        let mut starts = vec![false; self.len()];
        let mut rewards = vec![false; self.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if t.table == TABLE_REWARD && t.id == 1 {
                rewards[i] = true;
            }
        }
        let mut col = 0usize;
        for f in &self.episode_start_flags {
            if *f {
                starts[col] = true;
            }
            col += 3;
        }
        (starts, rewards)
    }
}

/// Map transitions (plus an optional trailing query observation) to tokens.
/// `mask` flags one entry per token and substitutes the learned mask
/// embedding; targets stay attached regardless of masking.
pub fn tokenize(
    transitions: &[Transition],
    query_obs: Option<&[i16]>,
    mask: Option<&[bool]>,
    config: &TransformerConfig,
) -> Result<TokenizedWindow> {
    let n = transitions.len();
    let total = 3 * n + usize::from(query_obs.is_some());
    if let Some(m) = mask {
        if m.len() != total {
            return Err(contract(format!(
                "mask has {} flags for {total} tokens",
                m.len()
            )));
        }
    }
    let mut tokens = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(n);
    let mut episode_start_flags = Vec::with_capacity(n);
    for (i, t) in transitions.iter().enumerate() {
        let cell = obs_cell(config.env_id, &t.observation);
        if cell >= config.obs_vocab {
            return Err(contract(format!(
                "observation {:?} maps to cell {cell} outside vocab {}",
                &t.observation[..],
                config.obs_vocab
            )));
        }
        if usize::from(t.action) >= config.num_actions {
            return Err(contract(format!("action {} out of vocab", t.action)));
        }
        targets.push((3 * i, usize::from(t.action)));
        episode_start_flags.push(t.episode_start);
        tokens.push(Token { table: TABLE_OBS, id: cell as u32 });
        tokens.push(Token { table: TABLE_ACTION, id: u32::from(t.action) });
        tokens.push(Token { table: TABLE_REWARD, id: u32::from(t.reward != 0.0) });
    }
    if let Some(obs) = query_obs {
        let cell = obs_cell(config.env_id, obs);
        if cell >= config.obs_vocab {
            return Err(contract(format!("query observation cell {cell} out of vocab")));
        }
        tokens.push(Token { table: TABLE_OBS, id: cell as u32 });
    }
    let masked = mask.map_or_else(|| vec![false; total], <[bool]>::to_vec);
    Ok(TokenizedWindow {
        tokens,
        masked,
        targets,
        n_transitions: n,
        episode_start_flags,
    })
}

/// Which sequence architecture a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    Transformer,
    Recurrent(RecurrentConfig),
}

/// A trained (or freshly initialized) sequence policy: architecture tag,
/// shared tokenizer config, and parameters.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub arch: ModelArch,
    pub config: TransformerConfig,
    pub params: crate::optim::ParamStore,
}

impl PolicyModel {
    pub fn init(arch: ModelArch, config: TransformerConfig, seed: u64) -> Result<Self> {
        let params = match &arch {
            ModelArch::Transformer => init_transformer(&config, seed)?,
            ModelArch::Recurrent(rc) => init_recurrent(&config, rc, seed),
        };
        Ok(Self { arch, config, params })
    }

    /// Eval-mode action logits at the final prediction slot (the trailing
    /// query observation for transformers; the last teacher-forced slot
    /// otherwise).
    pub fn action_logits(&self, window: &TokenizedWindow) -> Result<Vec<f32>> {
        let a = self.config.num_actions;
        match &self.arch {
            ModelArch::Transformer => {
                let pass = forward(&self.params, &self.config, window, false, None)?;
                let logits = pass.tape.value(pass.logits);
                let last = logits.rows() - 1;
                Ok(logits.data[last * a..(last + 1) * a].to_vec())
            }
            ModelArch::Recurrent(rc) => {
                let pass = recurrent_forward(&self.params, &self.config, rc, window, false)?;
                let logits = pass.tape.value(pass.logits);
                let last = logits.rows() - 1;
                Ok(logits.data[last * a..(last + 1) * a].to_vec())
            }
        }
    }

    pub fn save(&self, path: &std::path::Path, extra: &serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "arch": self.arch,
            "model_config": self.config,
            "extra": extra,
        });
        crate::checkpoint::save_checkpoint(path, &manifest, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (manifest, params) = crate::checkpoint::load_checkpoint(path)?;
        let arch: ModelArch = serde_json::from_value(
            manifest
                .get("arch")
                .cloned()
                .ok_or_else(|| contract("checkpoint manifest lacks arch"))?,
        )?;
        let config: TransformerConfig = serde_json::from_value(
            manifest
                .get("model_config")
                .cloned()
                .ok_or_else(|| contract("checkpoint manifest lacks model_config"))?,
        )?;
        Ok(Self { arch, config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::obs_from;

    fn transition(x: i16, y: i16, action: u16, reward: f32, start: bool) -> Transition {
        Transition {
            observation: obs_from(&[x, y]),
            action,
            reward,
            episode_start: start,
        }
    }

    fn config() -> TransformerConfig {
        TransformerConfig::for_env(EnvId::DarkRoom, 4)
    }

    #[test]
    fn two_transitions_make_six_tokens_with_targets_at_obs_slots() {
        let ts = vec![transition(1, 2, 3, 0.0, true), transition(2, 2, 4, 1.0, false)];
        let w = tokenize(&ts, None, None, &config()).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.targets, vec![(0, 3), (3, 4)]);
        assert_eq!(w.tokens[0].table, TABLE_OBS);
        assert_eq!(w.tokens[1].table, TABLE_ACTION);
        assert_eq!(w.tokens[2].table, TABLE_REWARD);
    }

    #[test]
    fn center_cell_flattens_row_major() {
        let ts = vec![transition(4, 4, 0, 0.0, true)];
        let w = tokenize(&ts, None, None, &config()).unwrap();
        assert_eq!(w.tokens[0].id, 40);
        // Inverse map: 40 -> (4, 4) on a 9-wide grid.
        assert_eq!((40 / 9, 40 % 9), (4, 4));
    }

    #[test]
    fn rewards_zero_and_one_get_distinct_ids() {
        let ts = vec![transition(0, 0, 0, 0.0, true), transition(0, 0, 0, 1.0, false)];
        let w = tokenize(&ts, None, None, &config()).unwrap();
        assert_eq!(w.tokens[2].id, 0);
        assert_eq!(w.tokens[5].id, 1);
        assert_ne!(w.tokens[2], w.tokens[5]);
    }

    #[test]
    fn query_observation_appends_one_obs_token() {
        let ts = vec![transition(1, 1, 0, 0.0, true)];
        let w = tokenize(&ts, Some(&[2, 3]), None, &config()).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.tokens[3], Token { table: TABLE_OBS, id: 2 * 9 + 3 });
        assert_eq!(w.targets.len(), 1);
    }

    #[test]
    fn out_of_vocab_observation_is_rejected() {
        // (12, 0) flattens to cell 108, outside the 81-cell dark_room vocab.
        let ts = vec![transition(12, 0, 0, 0.0, true)];
        assert!(tokenize(&ts, None, None, &config()).is_err());
    }

    #[test]
    fn hard_env_disables_attention_dropout() {
        assert_eq!(TransformerConfig::for_env(EnvId::DarkRoomHard, 4).attention_dropout, 0.0);
        assert_eq!(TransformerConfig::for_env(EnvId::DarkRoom, 4).attention_dropout, 0.5);
    }
}
