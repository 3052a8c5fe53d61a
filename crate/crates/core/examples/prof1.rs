use ad_lab_core::env::TaskSpec;
use ad_lab_core::source::{train_single_task, A3CConfig};
use std::time::Instant;
fn main() {
    let config = A3CConfig {
        num_actors: 8,
        episodes_per_run: 400,
        learning_rate: 2e-3,
        ..A3CConfig::default()
    };
    let task = TaskSpec::DarkRoom { goal: (1, 2), seed: 902 };
    let t0 = Instant::now();
    let (_h, stats) = train_single_task(&task, &config, 7).unwrap();
    println!("episodes {} ma {:.2}/{:.1} in {:.2}s", stats.episodes_per_actor, stats.final_ma_return, stats.oracle, t0.elapsed().as_secs_f64());
}
