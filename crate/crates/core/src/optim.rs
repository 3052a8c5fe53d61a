//! Parameter storage, Adam, learning-rate scheduling, gradient clipping, and
//! the finite-difference gradient checker.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{contract, Result};
use crate::tensor::tape::Gradients;
use crate::tensor::{log_sum_exp, Tensor};

/// Named parameter map with deterministic (sorted) iteration order.
///
/// Tensors are held behind `Arc` so forward passes on worker threads can
/// share them without copies; updates go through `apply` which clones only
/// when a tensor is still referenced elsewhere.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), Arc::new(t)).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(|t| t.as_ref())
    }

    pub fn share(&self, name: &str) -> Arc<Tensor> {
        Arc::clone(
            self.map
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// In-place update of one tensor's values.
    pub fn apply(&mut self, name: &str, f: impl FnOnce(&mut Tensor)) {
        let t = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(t));
    }

    /// Structural equality on shapes and bit-identical values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.iter().zip(other.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape == tb.shape
                    && ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Adam first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0f32; t.len()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0f32; t.len()]))
            .collect();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam step. Increments `state.t` exactly once.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(contract("adam lr must be non-negative"));
    }
    let names: Vec<String> = params.names().cloned().collect();
    if grads.len() != names.len() {
        return Err(contract(format!(
            "adam gradients cover {} parameters, store has {}",
            grads.len(),
            names.len()
        )));
    }
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| contract(format!("missing gradient for parameter {name}")))?;
        if g.len() != params.get(name).unwrap().len() {
            return Err(contract(format!("gradient length mismatch for {name}")));
        }
    }

    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for name in &names {
        let g = &grads[name];
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        params.apply(name, |t| {
            for i in 0..g.len() {
                let gi = f64::from(g[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                t.data[i] = (f64::from(t.data[i]) - update) as f32;
            }
        });
    }
    Ok(())
}

/// Warmup-then-cosine learning-rate schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub initial_value: f64,
    pub peak_value: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Linear warmup over 2% of the budget, cosine decay to zero after.
    pub fn new(initial_value: f64, peak_value: f64, total_steps: usize) -> Self {
        let warmup = (total_steps / 50).max(1);
        Self::with_warmup(initial_value, peak_value, warmup, total_steps)
    }

    pub fn with_warmup(
        initial_value: f64,
        peak_value: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Self {
        assert!(initial_value <= peak_value);
        assert!(warmup_steps < total_steps);
        Self {
            initial_value,
            peak_value,
            warmup_steps,
            total_steps,
        }
    }
}

/// Learning rate at `step`: linear warmup, then cosine decay to zero.
/// Steps past the budget clamp to the final value.
pub fn cosine_lr(step: usize, schedule: &LrSchedule) -> f64 {
    let s = step.min(schedule.total_steps);
    if s <= schedule.warmup_steps {
        let frac = s as f64 / schedule.warmup_steps as f64;
        schedule.initial_value + (schedule.peak_value - schedule.initial_value) * frac
    } else {
        let frac =
            (s - schedule.warmup_steps) as f64 / (schedule.total_steps - schedule.warmup_steps) as f64;
        schedule.peak_value * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Scale `grads` to a global L2 norm of `threshold` if they exceed it.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, threshold: f64) -> f64 {
    assert!(threshold > 0.0);
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = sq.sqrt();
    if norm > threshold {
        let scale = (threshold / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Cross-entropy of `logits` against the label-smoothed target distribution:
/// `(1-alpha) + alpha/A` on `target`, `alpha/A` elsewhere. `alpha == 0` is
/// the plain negative log-likelihood.
pub fn label_smoothed_nll(logits: &Tensor, target: usize, alpha: f32) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(contract("label smoothing alpha must be in [0, 1)"));
    }
    let a = logits.len();
    if target >= a {
        return Err(contract(format!("target {target} out of range for {a} actions")));
    }
    let lse = log_sum_exp(&logits.data);
    let uniform = f64::from(alpha) / a as f64;
    let mut ce = 0.0f64;
    for (j, &z) in logits.data.iter().enumerate() {
        let q = if j == target {
            f64::from(1.0 - alpha) + uniform
        } else {
            uniform
        };
        ce -= q * (f64::from(z) - lse);
    }
    Ok(ce)
}

/// Max relative error between analytic gradients and central differences.
///
/// `loss_and_grad` must be deterministic; it is called once for analytic
/// gradients and twice per sampled coordinate for the finite differences.
/// At most `coords_per_param` coordinates are probed per tensor.
pub fn grad_check<F>(
    params: &ParamStore,
    loss_and_grad: F,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> (f64, Gradients),
{
    let (loss_a, analytic) = loss_and_grad(params);
    let (loss_b, _) = loss_and_grad(params);
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(contract(
            "grad_check requires a deterministic loss (two forward passes disagreed)",
        ));
    }

    let mut rng = crate::rng::stream_rng(seed, 0x6fd);
    let mut max_rel = 0.0f64;
    for (name, tensor) in params.iter() {
        let mut coords: Vec<usize> = (0..tensor.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param);
        for &c in &coords {
            let orig = tensor.data[c];
            let mut plus = params.clone();
            plus.apply(name, |t| t.data[c] = (f64::from(orig) + h) as f32);
            let mut minus = params.clone();
            minus.apply(name, |t| t.data[c] = (f64::from(orig) - h) as f32);
            // Use the actually realized f32 perturbation for the divisor.
            let hp = f64::from(plus.get(name).unwrap().data[c]) - f64::from(orig);
            let hm = f64::from(orig) - f64::from(minus.get(name).unwrap().data[c]);
            let (lp, _) = loss_and_grad(&plus);
            let (lm, _) = loss_and_grad(&minus);
            let fd = (lp - lm) / (hp + hm);
            let ga = f64::from(analytic[name][c]);
            let rel = (ga - fd).abs() / (1e-8f64).max(ga.abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, t);
        p
    }

    #[test]
    fn adam_zero_grads_zero_moments_is_noop() {
        let mut params = store_with("w", Tensor::new(vec![3], vec![0.5, -0.25, 4.0]));
        let before = params.get("w").unwrap().data.clone();
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::new();
        grads.insert("w".into(), vec![0.0; 3]);
        adam_step(&mut params, &grads, &mut state, 1e-3, (0.9, 0.99), 1e-8).unwrap();
        assert_eq!(params.get("w").unwrap().data, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut params = store_with("w", Tensor::new(vec![1], vec![1.0]));
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::new();
        grads.insert("w".into(), vec![0.37]);
        let lr = 1e-2;
        adam_step(&mut params, &grads, &mut state, lr, (0.9, 0.99), 1e-8).unwrap();
        let delta = f64::from(params.get("w").unwrap().data[0]) - 1.0;
        // Bias correction makes the first update -lr * sign(g).
        assert!((delta + lr).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_rejects_misaligned_names() {
        let mut params = store_with("w", Tensor::ones(&[2]));
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::new();
        grads.insert("wrong".into(), vec![0.0; 2]);
        assert!(adam_step(&mut params, &grads, &mut state, 1e-3, (0.9, 0.99), 1e-8).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let sched = LrSchedule::with_warmup(2e-6, 3e-4, 100, 5000);
        assert!((cosine_lr(0, &sched) - 2e-6).abs() < 1e-18);
        assert!((cosine_lr(100, &sched) - 3e-4).abs() < 1e-18);
        assert!(cosine_lr(5000, &sched).abs() < 1e-18);
        // Clamp past the end.
        assert_eq!(cosine_lr(9000, &sched), cosine_lr(5000, &sched));
    }

    #[test]
    fn cosine_continuous_at_warmup_boundary() {
        let sched = LrSchedule::with_warmup(2e-6, 3e-4, 77, 4000);
        let before = cosine_lr(77, &sched);
        let after = cosine_lr(78, &sched);
        assert!((before - 3e-4).abs() < 1e-12);
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn cosine_monotone_per_phase() {
        let sched = LrSchedule::with_warmup(2e-6, 3e-4, 50, 1000);
        for s in 0..50 {
            assert!(cosine_lr(s, &sched) < cosine_lr(s + 1, &sched));
        }
        for s in 50..1000 {
            assert!(cosine_lr(s, &sched) >= cosine_lr(s + 1, &sched));
        }
    }

    #[test]
    fn clip_halves_when_norm_is_double() {
        let mut grads = Gradients::new();
        // norm = 2.0
        grads.insert("a".into(), vec![2.0f32.sqrt()]);
        grads.insert("b".into(), vec![2.0f32.sqrt()]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 2.0).abs() < 1e-6);
        assert!((f64::from(grads["a"][0]) - f64::from(2.0f32.sqrt()) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = Gradients::new();
        grads.insert("a".into(), vec![0.3, 0.4]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 0.5).abs() < 1e-6);
        assert_eq!(grads["a"], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_zero_grads_reports_zero_norm() {
        let mut grads = Gradients::new();
        grads.insert("a".into(), vec![0.0; 4]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 0.0);
        assert_eq!(grads["a"], vec![0.0; 4]);
    }

    #[test]
    fn smoothed_nll_uniform_logits_is_ln_a() {
        let logits = Tensor::new(vec![5], vec![0.7; 5]);
        let loss = label_smoothed_nll(&logits, 2, 0.0).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn smoothed_nll_confident_correct_tends_to_zero() {
        let logits = Tensor::new(vec![4], vec![50.0, 0.0, 0.0, 0.0]);
        let loss = label_smoothed_nll(&logits, 0, 0.0).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn smoothed_nll_rejects_bad_target() {
        let logits = Tensor::new(vec![4], vec![0.0; 4]);
        assert!(label_smoothed_nll(&logits, 4, 0.0).is_err());
    }

    #[test]
    fn smoothed_alpha_zero_matches_plain_nll() {
        let logits = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let lse = crate::tensor::log_sum_exp(&logits.data);
        let plain = -(f64::from(logits.data[1]) - lse);
        let smoothed = label_smoothed_nll(&logits, 1, 0.0).unwrap();
        assert!((plain - smoothed).abs() < 1e-12);
    }

    #[test]
    fn grad_check_quadratic() {
        let params = store_with("x", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let f = |p: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param("x", p.share("x"));
            // mean(x^2) over n=2 -> analytic gradient is exactly x.
            let loss = tape.mse_mean(x, std::sync::Arc::new(vec![0.0, 0.0]));
            tape.backward(loss);
            (f64::from(tape.value(loss).data[0]), tape.param_grads())
        };
        let err = grad_check(&params, f, 1e-4, 8, 7).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let params = store_with("x", Tensor::new(vec![1], vec![1.0]));
        let counter = AtomicU64::new(0);
        let f = |p: &ParamStore| {
            let jitter = counter.fetch_add(1, Ordering::SeqCst) as f64 * 1e-3;
            (f64::from(p.get("x").unwrap().data[0]) + jitter, Gradients::new())
        };
        assert!(grad_check(&params, f, 1e-4, 4, 7).is_err());
    }
}
