//! Sequence-model training: negative log-likelihood over across-episodic
//! windows, clipped Adam with a cosine schedule, held-out monitoring, and
//! checkpointing. Expert-only training is the same loop pointed at a
//! filtered dataset.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::history::{mask_tokens, sample_window_from, HistoryDataset, TrainingWindow};
use crate::model::{
    forward, recurrent_forward, tokenize, ModelArch, PolicyModel, TransformerConfig,
};
use crate::optim::{adam_step, clip_global_norm, cosine_lr, AdamState, LrSchedule};
use crate::rng::labeled_rng;
use crate::tensor::tape::Gradients;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub label_smoothing: f32,
    pub mask_prob: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Fraction of histories reserved for held-out loss tracking.
    pub heldout_fraction: f64,
}

impl TrainConfig {
    /// Published optimizer defaults; alpha and mask_prob pick up the
    /// per-environment values from the architecture table.
    pub fn for_env(env_id: crate::env::EnvId, total_steps: usize, seed: u64) -> Self {
        let hard = env_id == crate::env::EnvId::DarkRoomHard;
        Self {
            batch_size: 128,
            total_steps,
            schedule: LrSchedule::new(2e-6, 3e-4, total_steps),
            grad_clip: 1.0,
            label_smoothing: if hard { 0.2 } else { 0.0 },
            mask_prob: if hard { 0.5 } else { 0.3 },
            seed,
            eval_every: (total_steps / 20).max(1),
            checkpoint_every: 0,
            adam_betas: (0.9, 0.99),
            adam_eps: 1e-8,
            heldout_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,grad_norm,heldout_loss,heldout_acc\n");
        for e in &self.entries {
            let h1 = e.heldout_loss.map_or(String::new(), |v| format!("{v:.6}"));
            let h2 = e.heldout_acc.map_or(String::new(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{},{:.6},{:.6e},{:.6},{},{}\n",
                e.step, e.loss, e.lr, e.grad_norm, h1, h2
            ));
        }
        out
    }
}

/// Mean label-smoothed NLL over a batch of per-slot logit rows. With
/// alpha = 0 this is exactly the action NLL averaged over slots.
pub fn ad_loss(logits: &Tensor, targets: &[usize], alpha: f32) -> Result<f64> {
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(contract(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = Tensor::new(
            vec![logits.cols()],
            logits.data[i * logits.cols()..(i + 1) * logits.cols()].to_vec(),
        );
        total += crate::optim::label_smoothed_nll(&row, t, alpha)?;
    }
    Ok(total / rows as f64)
}

/// One window's forward/backward: mean slot loss (f64) plus gradients scaled
/// by `weight` (the window's share of the batch mean).
fn window_pass(
    model: &PolicyModel,
    dataset: &HistoryDataset,
    window: TrainingWindow,
    mask: &[bool],
    alpha: f32,
    weight: f32,
    train_mode: bool,
    dropout_rng: rand_chacha::ChaCha8Rng,
) -> Result<(f64, Gradients, f64)> {
    let transitions = window.transitions(dataset);
    let tok = tokenize(
        transitions,
        None,
        if mask.is_empty() { None } else { Some(mask) },
        &model.config,
    )?;
    let targets: Arc<Vec<usize>> = Arc::new(tok.targets.iter().map(|&(_, a)| a).collect());
    let (mut tape, slot_logits) = match &model.arch {
        ModelArch::Transformer => {
            let positions: Arc<Vec<usize>> = Arc::new(tok.targets.iter().map(|&(p, _)| p).collect());
            let pass = forward(
                &model.params,
                &model.config,
                &tok,
                train_mode,
                train_mode.then_some(dropout_rng),
            )?;
            let mut tape = pass.tape;
            let rows = tape.gather_rows(pass.logits, positions);
            (tape, rows)
        }
        ModelArch::Recurrent(rc) => {
            let pass = recurrent_forward(&model.params, &model.config, rc, &tok, train_mode)?;
            (pass.tape, pass.logits)
        }
    };
    // Accuracy before backward (cheap argmax over slot rows).
    let logits_t = tape.value(slot_logits);
    let a = model.config.num_actions;
    let mut hits = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits_t.data[i * a..(i + 1) * a];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(j, _)| j)
            .unwrap();
        hits += usize::from(argmax == t);
    }
    let acc = hits as f64 / targets.len() as f64;

    let loss_var = tape.smoothed_nll_mean(slot_logits, targets, alpha);
    let loss = f64::from(tape.value(loss_var).data[0]);
    tape.backward_seeded(loss_var, weight);
    Ok((loss, tape.param_grads(), acc))
}

fn accumulate(into: &mut std::collections::BTreeMap<String, Vec<f64>>, grads: &Gradients) {
    for (name, g) in grads {
        let acc = into
            .entry(name.clone())
            .or_insert_with(|| vec![0.0f64; g.len()]);
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += f64::from(v);
        }
    }
}

/// One optimization step over a freshly sampled window batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut PolicyModel,
    adam: &mut AdamState,
    dataset: &HistoryDataset,
    train_indices: &[usize],
    config: &TrainConfig,
    step: usize,
) -> Result<TrainLogEntry> {
    let c = model.config.context_transitions;
    let b = config.batch_size;
    let mut window_rng = labeled_rng(config.seed, "windows", step as u64);
    let windows: Vec<TrainingWindow> = (0..b)
        .map(|_| sample_window_from(dataset, train_indices, c, &mut window_rng))
        .collect();
    let mut mask_rng = labeled_rng(config.seed, "mask", step as u64);
    let masks = mask_tokens(b, 3 * c, config.mask_prob, &mut mask_rng)?;

    let weight = 1.0 / b as f32;
    let results: Vec<Result<(f64, Gradients, f64)>> = windows
        .par_iter()
        .zip(masks.par_iter())
        .enumerate()
        .map(|(i, (&w, mask))| {
            window_pass(
                model,
                dataset,
                w,
                mask,
                config.label_smoothing,
                weight,
                true,
                labeled_rng(config.seed, "dropout", (step * b + i) as u64),
            )
        })
        .collect();

    let mut loss_sum = 0.0f64;
    let mut acc64: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for r in results {
        let (loss, grads, _) = r?;
        loss_sum += loss;
        accumulate(&mut acc64, &grads);
    }
    let loss = loss_sum / b as f64;
    let mut grads: Gradients = acc64
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| x as f32).collect()))
        .collect();

    let lr = cosine_lr(step, &config.schedule);
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(CoreError::NonFiniteLoss { step, lr, grad_norm });
    }
    adam_step(&mut model.params, &grads, adam, lr, config.adam_betas, config.adam_eps)?;
    Ok(TrainLogEntry {
        step,
        loss,
        lr,
        grad_norm: grad_norm.min(config.grad_clip),
        heldout_loss: None,
        heldout_acc: None,
    })
}

/// Held-out NLL and argmax accuracy on fixed windows, masking disabled and
/// dropout off.
fn heldout_eval(
    model: &PolicyModel,
    dataset: &HistoryDataset,
    windows: &[TrainingWindow],
    alpha: f32,
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, Gradients, f64)>> = windows
        .par_iter()
        .map(|&w| {
            window_pass(
                model,
                dataset,
                w,
                &[],
                alpha,
                0.0,
                false,
                labeled_rng(0, "unused", 0),
            )
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = 0.0;
    let n = windows.len() as f64;
    for r in results {
        let (l, _, a) = r?;
        loss += l / n;
        acc += a / n;
    }
    Ok((loss, acc))
}

pub struct TrainOutput {
    pub model: PolicyModel,
    pub log: TrainLog,
    pub final_checkpoint: Option<std::path::PathBuf>,
}

/// Full training run. Histories of a few seeds are held out for loss
/// monitoring; task-level generalization is measured later by rollouts.
pub fn train(
    dataset: &HistoryDataset,
    model_config: &TransformerConfig,
    arch: ModelArch,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let c = model_config.context_transitions;
    dataset.validate_for_windows(c)?;
    let n = dataset.histories.len();
    let heldout = ((n as f64 * config.heldout_fraction) as usize).clamp(usize::from(n > 1), n - 1);
    // Deterministic spread: stride the held-out picks across the dataset.
    let stride = n / heldout.max(1);
    let heldout_indices: Vec<usize> = (0..heldout).map(|i| i * stride).collect();
    let train_indices: Vec<usize> = (0..n).filter(|i| !heldout_indices.contains(i)).collect();

    let mut model = PolicyModel::init(arch, model_config.clone(), config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut log = TrainLog::default();

    let mut heldout_rng = labeled_rng(config.seed, "heldout-windows", 0);
    let heldout_windows: Vec<TrainingWindow> = if heldout_indices.is_empty() {
        vec![]
    } else {
        (0..48)
            .map(|_| sample_window_from(dataset, &heldout_indices, c, &mut heldout_rng))
            .collect()
    };

    for step in 0..config.total_steps {
        let mut entry = train_step(&mut model, &mut adam, dataset, &train_indices, config, step)?;
        let last = step + 1 == config.total_steps;
        if (!heldout_windows.is_empty() && config.eval_every > 0 && step % config.eval_every == 0)
            || last
        {
            let (hl, ha) = heldout_eval(&model, dataset, &heldout_windows, config.label_smoothing)?;
            entry.heldout_loss = Some(hl);
            entry.heldout_acc = Some(ha);
        }
        log.entries.push(entry);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && !last {
                write_checkpoint(&model, config, dir, &format!("step{:06}", step + 1))?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = write_checkpoint(&model, config, dir, "final")?;
            std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutput { model, log, final_checkpoint })
}

fn write_checkpoint(
    model: &PolicyModel,
    config: &TrainConfig,
    dir: &Path,
    tag: &str,
) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("checkpoint_{tag}.ckpt"));
    let extra = serde_json::json!({ "train_config": config });
    model.save(&path, &extra)?;
    std::fs::write(
        dir.join(format!("checkpoint_{tag}.config.json")),
        serde_json::to_vec_pretty(&extra)?,
    )?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvId, TaskSpec};
    use crate::history::{obs_from, HistoryMeta, LearningHistory, Transition};
    use crate::rng::stream_rng;

    fn tiny_dataset(n_histories: usize) -> HistoryDataset {
        let split =
            crate::history::split_tasks(EnvId::DarkRoom, 0.2, &mut stream_rng(0, 0)).unwrap();
        let task = split.train[0].clone();
        let histories = (0..n_histories)
            .map(|i| {
                // Cyclic walk with a fixed action pattern, so it is learnable.
                let transitions = (0..200)
                    .map(|t| Transition {
                        observation: obs_from(&[(t % 9) as i16, ((t / 9) % 9) as i16]),
                        action: (t % 5) as u16,
                        reward: f32::from(u8::from(t % 20 == 7)),
                        episode_start: t % 20 == 0,
                    })
                    .collect();
                LearningHistory {
                    task: task.clone(),
                    transitions,
                    meta: HistoryMeta {
                        algorithm: "test".into(),
                        actor_id: i as u32,
                        seed: i as u64,
                        subsample_k: 1,
                        expert: false,
                    },
                }
            })
            .collect();
        HistoryDataset::new(EnvId::DarkRoom, split, serde_json::json!({}), histories)
    }

    fn tiny_model(c: usize) -> TransformerConfig {
        TransformerConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            attention_dropout: 0.1,
            ..TransformerConfig::for_env(EnvId::DarkRoom, c)
        }
    }

    fn tiny_train_config(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            eval_every: 0,
            heldout_fraction: 0.2,
            ..TrainConfig::for_env(EnvId::DarkRoom, steps, 7)
        }
    }

    #[test]
    fn ad_loss_matches_single_slot_nll_exactly() {
        let logits = Tensor::new(vec![1, 5], vec![0.3, -0.2, 1.4, 0.0, -1.0]);
        let batch = ad_loss(&logits, &[2], 0.1).unwrap();
        let row = Tensor::new(vec![5], logits.data.clone());
        let single = crate::optim::label_smoothed_nll(&row, 2, 0.1).unwrap();
        assert_eq!(batch, single);
    }

    #[test]
    fn ad_loss_uniform_logits_is_ln_a() {
        let logits = Tensor::new(vec![3, 5], vec![0.0; 15]);
        let loss = ad_loss(&logits, &[0, 3, 4], 0.0).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn smoothed_loss_is_bounded_away_from_zero() {
        // Perfect predictions still pay the smoothing floor:
        // -[(1-a+a/A) ln p_t + ... ] > 0 when a > 0.
        let logits = Tensor::new(vec![1, 5], vec![60.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = ad_loss(&logits, &[0], 0.2).unwrap();
        // Closed form: target q = 0.84, others 0.04; CE >= H(q) > 0.
        assert!(loss > 0.5, "smoothed loss {loss}");
        let plain = ad_loss(&logits, &[0], 0.0).unwrap();
        assert!(plain < 1e-6);
    }

    #[test]
    fn ten_steps_are_bitwise_reproducible() {
        let ds = tiny_dataset(3);
        let cfg = tiny_train_config(10);
        let model_cfg = tiny_model(8);
        let a = train(&ds, &model_cfg, ModelArch::Transformer, &cfg, None).unwrap();
        let b = train(&ds, &model_cfg, ModelArch::Transformer, &cfg, None).unwrap();
        assert!(a.model.params.bitwise_eq(&b.model.params));
        assert_eq!(a.log.entries.len(), 10);
        for (x, y) in a.log.entries.iter().zip(&b.log.entries) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
    }

    #[test]
    fn grad_norm_is_recorded_at_or_below_clip() {
        let ds = tiny_dataset(2);
        let cfg = tiny_train_config(3);
        let out = train(&ds, &tiny_model(8), ModelArch::Transformer, &cfg, None).unwrap();
        for e in &out.log.entries {
            assert!(e.grad_norm <= cfg.grad_clip + 1e-9);
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_tiny_dataset() {
        let ds = tiny_dataset(2);
        let mut cfg = tiny_train_config(200);
        cfg.mask_prob = 0.0;
        cfg.schedule = LrSchedule::new(1e-5, 3e-3, 200);
        let out = train(&ds, &tiny_model(8), ModelArch::Transformer, &cfg, None).unwrap();
        let first: f64 = out.log.entries[..20].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        let last: f64 = out.log.entries[180..].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        assert!(
            last < first * 0.7,
            "no learning: first-20 mean {first:.4}, last-20 mean {last:.4}"
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_heldout_loss() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(3);
        let mut cfg = tiny_train_config(5);
        cfg.eval_every = 2;
        let out = train(&ds, &tiny_model(8), ModelArch::Transformer, &cfg, Some(dir.path())).unwrap();
        let loaded = PolicyModel::load(out.final_checkpoint.as_ref().unwrap()).unwrap();
        assert!(loaded.params.bitwise_eq(&out.model.params));
        // Recompute held-out loss through the loaded model: identical windows,
        // masking off, dropout off -> identical value.
        let heldout: Vec<usize> = vec![0];
        let mut rng = labeled_rng(cfg.seed, "heldout-windows", 0);
        let windows: Vec<TrainingWindow> = (0..48)
            .map(|_| sample_window_from(&ds, &heldout, 8, &mut rng))
            .collect();
        let (l1, _) = heldout_eval(&out.model, &ds, &windows, cfg.label_smoothing).unwrap();
        let (l2, _) = heldout_eval(&loaded, &ds, &windows, cfg.label_smoothing).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        assert!(dir.path().join("train_log.csv").exists());
    }

    #[test]
    fn recurrent_arch_trains_too() {
        let ds = tiny_dataset(2);
        let cfg = tiny_train_config(4);
        let rc = crate::model::RecurrentConfig {
            embed_dim: 8,
            hidden_size: 12,
            mlp_depth: 2,
            mlp_width: 8,
        };
        let out = train(&ds, &tiny_model(6), ModelArch::Recurrent(rc), &cfg, None).unwrap();
        assert_eq!(out.log.entries.len(), 4);
        assert!(out.log.entries.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn expert_variant_is_the_same_call() {
        let ds = tiny_dataset(2);
        let expert = crate::history::make_expert_dataset(&ds, 5, 8).unwrap();
        let cfg = tiny_train_config(3);
        let out = train(&expert, &tiny_model(8), ModelArch::Transformer, &cfg, None).unwrap();
        assert_eq!(out.log.entries.len(), 3);
        let _ = TaskSpec::DarkRoom { goal: (0, 0), seed: 0 };
    }
}
