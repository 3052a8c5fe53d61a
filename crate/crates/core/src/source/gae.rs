//! Generalized advantage estimation.

use crate::error::{contract, Result};

/// Standard GAE over one episode. `values` must carry T+1 entries, the last
/// being the bootstrap value (0 at a true terminal). Returns (advantages,
/// value targets) with targets = advantages + values[0..T].
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    discount: f32,
    gae_lambda: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 {
        return Err(contract(format!(
            "values must have length T+1 = {}, got {}",
            t_len + 1,
            values.len()
        )));
    }
    let mut advantages = vec![0.0f32; t_len];
    let mut acc = 0.0f64;
    for t in (0..t_len).rev() {
        let delta = f64::from(rewards[t]) + f64::from(discount) * f64::from(values[t + 1])
            - f64::from(values[t]);
        acc = delta + f64::from(discount) * f64::from(gae_lambda) * acc;
        advantages[t] = acc as f32;
    }
    let targets = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, targets))
}
