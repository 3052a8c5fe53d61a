//! Sweep one pipeline dimension end to end. Training always re-runs per
//! value; generation re-runs only when the dimension affects it.

use crate::error::{contract, Result};
use crate::eval::{AgentKind, EvalReport};
use crate::model::ModelArch;
use crate::pipeline::{generate_dataset, run_from_dataset, run_full, PipelineConfig, PipelineOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateDimension {
    ContextSize,
    NTasks,
    ModelSize,
    MaskProb,
    LabelSmoothing,
    Architecture,
}

impl std::str::FromStr for AblateDimension {
    type Err = crate::CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "context_size" => Self::ContextSize,
            "n_tasks" => Self::NTasks,
            "model_size" => Self::ModelSize,
            "mask_prob" => Self::MaskProb,
            "label_smoothing" => Self::LabelSmoothing,
            "architecture" => Self::Architecture,
            other => return Err(contract(format!("unknown ablation dimension {other:?}"))),
        })
    }
}

impl AblateDimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ContextSize => "context_size",
            Self::NTasks => "n_tasks",
            Self::ModelSize => "model_size",
            Self::MaskProb => "mask_prob",
            Self::LabelSmoothing => "label_smoothing",
            Self::Architecture => "architecture",
        }
    }

    fn touches_generation(self) -> bool {
        self == Self::NTasks
    }
}

/// Apply one sweep value to a copy of the base config.
/// Value grammar: integers for context_size/n_tasks, floats for
/// mask_prob/label_smoothing, "LxE" (layers x embed) for model_size,
/// "transformer" | "recurrent" for architecture.
pub fn apply_value(config: &mut PipelineConfig, dimension: AblateDimension, value: &str) -> Result<()> {
    let parse_err = |what: &str| contract(format!("cannot parse {value:?} as {what}"));
    match dimension {
        AblateDimension::ContextSize => {
            config.model.context_transitions =
                value.parse().map_err(|_| parse_err("context size"))?;
        }
        AblateDimension::NTasks => {
            config.n_tasks = value.parse().map_err(|_| parse_err("task count"))?;
        }
        AblateDimension::ModelSize => {
            let (layers, embed) = value
                .split_once('x')
                .ok_or_else(|| parse_err("LxE model size"))?;
            config.model.num_layers = layers.parse().map_err(|_| parse_err("layer count"))?;
            config.model.embed_dim = embed.parse().map_err(|_| parse_err("embed dim"))?;
        }
        AblateDimension::MaskProb => {
            config.train.mask_prob = value.parse().map_err(|_| parse_err("mask prob"))?;
        }
        AblateDimension::LabelSmoothing => {
            config.train.label_smoothing = value.parse().map_err(|_| parse_err("alpha"))?;
        }
        AblateDimension::Architecture => {
            config.arch = match value {
                "transformer" => ModelArch::Transformer,
                "recurrent" => ModelArch::Recurrent(config.recurrent.clone()),
                _ => return Err(parse_err("architecture")),
            };
        }
    }
    Ok(())
}

pub struct AblateOutcome {
    pub dimension: AblateDimension,
    pub value: String,
    pub report: EvalReport,
    pub outcome: PipelineOutcome,
}

/// One full (or generation-reusing) pipeline run per value, commonly seeded.
pub fn ablate(
    base: &PipelineConfig,
    dimension: AblateDimension,
    values: &[String],
) -> Result<Vec<AblateOutcome>> {
    if values.is_empty() {
        return Err(contract("ablation needs at least one value"));
    }
    let shared = if dimension.touches_generation() {
        None
    } else {
        let split = base.split()?;
        let (dataset, stats) = generate_dataset(base, &split)?;
        Some((split, dataset, stats))
    };
    values
        .iter()
        .map(|value| {
            let mut config = base.clone();
            apply_value(&mut config, dimension, value)?;
            let outcome = match &shared {
                Some((split, dataset, stats)) => run_from_dataset(
                    &config,
                    split.clone(),
                    dataset.clone(),
                    stats.clone(),
                    AgentKind::Ad,
                    None,
                )?,
                None => run_full(&config, AgentKind::Ad, None)?,
            };
            Ok(AblateOutcome {
                dimension,
                value: value.clone(),
                report: outcome.report.clone(),
                outcome,
            })
        })
        .collect()
}
