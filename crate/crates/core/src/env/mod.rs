//! Multi-task evaluation environments: an adversarial 10-arm bandit and three
//! "dark" gridworlds where the goal is invisible and must be inferred from
//! reward alone.

mod bandit;
mod grid;

pub use bandit::BanditEnv;
pub use grid::GridEnv;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const BANDIT_ARMS: usize = 10;
pub const BANDIT_TRIALS: usize = 100;
/// Rewarded arm pays Bernoulli(0.9), every other arm Bernoulli(0.1).
pub const BANDIT_P_GOOD: f64 = 0.9;
pub const BANDIT_P_BAD: f64 = 0.1;
/// Probability that the favored parity class holds the rewarded arm.
pub const BANDIT_PARITY_BIAS: f64 = 0.95;

pub const GRID_SMALL: i16 = 9;
pub const GRID_LARGE: i16 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    AdversarialBandit,
    DarkRoom,
    DarkRoomHard,
    DarkKeyToDoor,
}

impl EnvId {
    pub fn horizon(self) -> usize {
        match self {
            EnvId::AdversarialBandit => BANDIT_TRIALS,
            EnvId::DarkRoom | EnvId::DarkRoomHard => 20,
            EnvId::DarkKeyToDoor => 50,
        }
    }

    pub fn num_actions(self) -> usize {
        match self {
            EnvId::AdversarialBandit => BANDIT_ARMS,
            _ => 5,
        }
    }

    pub fn grid_size(self) -> i16 {
        match self {
            EnvId::DarkRoomHard => GRID_LARGE,
            _ => GRID_SMALL,
        }
    }

    /// Distinct observation values: grid cells, or the bandit's dummy token.
    pub fn obs_vocab(self) -> usize {
        match self {
            EnvId::AdversarialBandit => 1,
            id => (id.grid_size() as usize).pow(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::AdversarialBandit => "adversarial_bandit",
            EnvId::DarkRoom => "dark_room",
            EnvId::DarkRoomHard => "dark_room_hard",
            EnvId::DarkKeyToDoor => "dark_key_to_door",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = crate::CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial_bandit" => Ok(EnvId::AdversarialBandit),
            "dark_room" => Ok(EnvId::DarkRoom),
            "dark_room_hard" => Ok(EnvId::DarkRoomHard),
            "dark_key_to_door" => Ok(EnvId::DarkKeyToDoor),
            other => Err(contract(format!("unknown env id {other:?}"))),
        }
    }
}

/// A single task instance: goal parameters plus the RNG seed driving the
/// environment's own stochasticity (bandit payouts, key-to-door resets).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "env_id", rename_all = "snake_case")]
pub enum TaskSpec {
    AdversarialBandit { arm: u8, seed: u64 },
    DarkRoom { goal: (i16, i16), seed: u64 },
    DarkRoomHard { goal: (i16, i16), seed: u64 },
    DarkKeyToDoor { key: (i16, i16), door: (i16, i16), seed: u64 },
}

impl TaskSpec {
    pub fn env_id(&self) -> EnvId {
        match self {
            TaskSpec::AdversarialBandit { .. } => EnvId::AdversarialBandit,
            TaskSpec::DarkRoom { .. } => EnvId::DarkRoom,
            TaskSpec::DarkRoomHard { .. } => EnvId::DarkRoomHard,
            TaskSpec::DarkKeyToDoor { .. } => EnvId::DarkKeyToDoor,
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            TaskSpec::AdversarialBandit { seed, .. }
            | TaskSpec::DarkRoom { seed, .. }
            | TaskSpec::DarkRoomHard { seed, .. }
            | TaskSpec::DarkKeyToDoor { seed, .. } => seed,
        }
    }

    /// Same goal parameters, different environment seed.
    pub fn with_seed(&self, seed: u64) -> TaskSpec {
        let mut t = self.clone();
        match &mut t {
            TaskSpec::AdversarialBandit { seed: s, .. }
            | TaskSpec::DarkRoom { seed: s, .. }
            | TaskSpec::DarkRoomHard { seed: s, .. }
            | TaskSpec::DarkKeyToDoor { seed: s, .. } => *s = seed,
        }
        t
    }

    /// Goal identity ignoring the seed, for split-membership checks.
    pub fn goal_key(&self) -> String {
        match self {
            TaskSpec::AdversarialBandit { arm, .. } => format!("arm:{arm}"),
            TaskSpec::DarkRoom { goal, .. } | TaskSpec::DarkRoomHard { goal, .. } => {
                format!("goal:{},{}", goal.0, goal.1)
            }
            TaskSpec::DarkKeyToDoor { key, door, .. } => {
                format!("key:{},{};door:{},{}", key.0, key.1, door.0, door.1)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let in_grid = |c: (i16, i16), size: i16| c.0 >= 0 && c.0 < size && c.1 >= 0 && c.1 < size;
        match self {
            TaskSpec::AdversarialBandit { arm, .. } => {
                if usize::from(*arm) >= BANDIT_ARMS {
                    return Err(contract(format!("bandit arm {arm} out of range")));
                }
            }
            TaskSpec::DarkRoom { goal, .. } => {
                if !in_grid(*goal, GRID_SMALL) {
                    return Err(contract(format!("dark_room goal {goal:?} outside 9x9 grid")));
                }
            }
            TaskSpec::DarkRoomHard { goal, .. } => {
                if !in_grid(*goal, GRID_LARGE) {
                    return Err(contract(format!(
                        "dark_room_hard goal {goal:?} outside 17x17 grid"
                    )));
                }
            }
            TaskSpec::DarkKeyToDoor { key, door, .. } => {
                if !in_grid(*key, GRID_SMALL) || !in_grid(*door, GRID_SMALL) {
                    return Err(contract(format!(
                        "key_to_door cells {key:?}/{door:?} outside 9x9 grid"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Observation, reward, and episode flag for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<i16>,
    pub reward: f32,
    pub episode_done: bool,
}

/// Environment instance with a fixed horizon. Episodes never terminate
/// early; `episode_done` fires exactly at the horizon.
#[derive(Debug, Clone)]
pub enum Env {
    Bandit(BanditEnv),
    Grid(GridEnv),
}

impl Env {
    pub fn reset(&mut self) -> Vec<i16> {
        match self {
            Env::Bandit(e) => e.reset(),
            Env::Grid(e) => e.reset(),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            Env::Bandit(e) => e.step(action),
            Env::Grid(e) => e.step(action),
        }
    }

    pub fn env_id(&self) -> EnvId {
        match self {
            Env::Bandit(_) => EnvId::AdversarialBandit,
            Env::Grid(e) => e.env_id(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.env_id().horizon()
    }

    pub fn num_actions(&self) -> usize {
        self.env_id().num_actions()
    }
}

pub fn make_env(task: &TaskSpec) -> Result<Env> {
    task.validate()?;
    Ok(match task {
        TaskSpec::AdversarialBandit { arm, seed } => Env::Bandit(BanditEnv::new(*arm, *seed)),
        _ => Env::Grid(GridEnv::new(task)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Train/test task partition. Grid environments carry explicit goal tables;
/// the bandit's split is the arm-parity rule, so its tables stay empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSplit {
    pub env_id: EnvId,
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
}

impl TaskSplit {
    pub fn tasks(&self, split: Split) -> &[TaskSpec] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Draw one task. Grid environments sample uniformly from the split's goal
/// table; the bandit draws the rewarded arm from the favored parity class
/// with probability 0.95 (odd favored for train, even for test).
pub fn sample_task(split: Split, tables: &TaskSplit, rng: &mut ChaCha8Rng) -> Result<TaskSpec> {
    let seed: u64 = rng.gen();
    if tables.env_id == EnvId::AdversarialBandit {
        let favored_odd = matches!(split, Split::Train);
        let pick_odd = if rng.gen_bool(BANDIT_PARITY_BIAS) {
            favored_odd
        } else {
            !favored_odd
        };
        let offset = rng.gen_range(0..BANDIT_ARMS / 2) as u8;
        let arm = 2 * offset + u8::from(pick_odd);
        return Ok(TaskSpec::AdversarialBandit { arm, seed });
    }
    let table = tables.tasks(split);
    if table.is_empty() {
        return Err(contract(format!(
            "empty {split:?} split for {}",
            tables.env_id.as_str()
        )));
    }
    let idx = rng.gen_range(0..table.len());
    Ok(table[idx].with_seed(seed))
}

fn l1(a: (i16, i16), b: (i16, i16)) -> usize {
    ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as usize
}

/// Best achievable episode return for a grid task from `start`, under the
/// occupancy reward rule (a timestep pays if the agent stands on the paying
/// cell while acting).
pub fn optimal_return(task: &TaskSpec, start: (i16, i16)) -> Result<f32> {
    task.validate()?;
    let horizon = task.env_id().horizon();
    Ok(match task {
        TaskSpec::AdversarialBandit { .. } => {
            return Err(contract(
                "optimal_return is defined for grid tasks; use expected-reward arithmetic for bandits",
            ))
        }
        TaskSpec::DarkRoom { goal, .. } => {
            let d = l1(start, *goal);
            (horizon.saturating_sub(d)) as f32
        }
        TaskSpec::DarkRoomHard { goal, .. } => {
            if l1(start, *goal) < horizon {
                1.0
            } else {
                0.0
            }
        }
        TaskSpec::DarkKeyToDoor { key, door, .. } => {
            let d_key = l1(start, *key);
            let d_door = l1(*key, *door).max(1); // same cell still costs a timestep
            if d_key >= horizon {
                0.0
            } else if d_key + d_door >= horizon {
                1.0
            } else {
                2.0
            }
        }
    })
}

/// Center cell where dark_room and dark_room_hard agents reset.
pub fn grid_center(env_id: EnvId) -> (i16, i16) {
    let c = env_id.grid_size() / 2;
    (c, c)
}

/// Flatten an observation to its vocabulary index: row-major cell id for
/// grids (x * size + y), the constant 0 for the bandit's dummy token.
pub fn obs_cell(env_id: EnvId, obs: &[i16]) -> usize {
    match env_id {
        EnvId::AdversarialBandit => 0,
        id => obs[0] as usize * id.grid_size() as usize + obs[1] as usize,
    }
}
