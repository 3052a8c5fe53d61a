//! 10-arm Bernoulli bandit with a constant dummy observation; the rewarded
//! arm is identifiable only through (action, reward) history.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{StepResult, BANDIT_ARMS, BANDIT_P_BAD, BANDIT_P_GOOD, BANDIT_TRIALS};
use crate::error::{contract, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone)]
pub struct BanditEnv {
    rewarded_arm: usize,
    rng: ChaCha8Rng,
    trial: usize,
    started: bool,
}

impl BanditEnv {
    pub fn new(arm: u8, seed: u64) -> Self {
        Self {
            rewarded_arm: usize::from(arm),
            rng: stream_rng(seed, 0xb4d1),
            trial: 0,
            started: false,
        }
    }

    pub fn reset(&mut self) -> Vec<i16> {
        self.trial = 0;
        self.started = true;
        vec![0]
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if !self.started || self.trial >= BANDIT_TRIALS {
            return Err(contract("bandit episode finished (reset required)"));
        }
        if action >= BANDIT_ARMS {
            return Err(contract(format!("bandit arm {action} out of range")));
        }
        let p = if action == self.rewarded_arm {
            BANDIT_P_GOOD
        } else {
            BANDIT_P_BAD
        };
        let reward = f32::from(u8::from(self.rng.gen_bool(p)));
        self.trial += 1;
        Ok(StepResult {
            observation: vec![0],
            reward,
            episode_done: self.trial == BANDIT_TRIALS,
        })
    }
}
