use ad_lab_core::env::{optimal_return, EnvId, Split};
use ad_lab_core::eval::{demo_from_history, prompt_rollout, rollout, ActionSelection};
use ad_lab_core::model::ModelArch;
use ad_lab_core::pipeline::{generate_dataset, PipelineConfig};
use ad_lab_core::trainer::train;
use std::time::Instant;

fn main() {
    let mut cfg = PipelineConfig::desk_default(EnvId::DarkRoom, 17);
    cfg.a3c.learning_rate = 1e-3;
    cfg.model.attention_dropout = 0.2;
    cfg.train.total_steps = 4000;
    cfg.train.batch_size = 16;
    cfg.train.eval_every = 400;
    cfg.train.schedule = ad_lab_core::optim::LrSchedule::new(2e-6, 3e-4, 4000);
    let split = cfg.split().unwrap();
    let t0 = Instant::now();
    let (dataset, stats) = generate_dataset(&cfg, &split).unwrap();
    let mean_eps: f64 = stats.iter().map(|s| s.episodes_per_actor as f64).sum::<f64>() / stats.len() as f64;
    println!("gen {:.0}s: {} histories, mean episodes/actor {:.0}, {:.2}M transitions",
        t0.elapsed().as_secs_f64(), dataset.histories.len(), mean_eps, dataset.total_transitions() as f64 / 1e6);

    let t0 = Instant::now();
    let out = train(&dataset, &cfg.model, ModelArch::Transformer, &cfg.train, None).unwrap();
    for e in out.log.entries.iter().filter(|e| e.heldout_loss.is_some()) {
        println!("step {:4} loss {:.3} heldout {:.3} acc {:.2}", e.step, e.loss, e.heldout_loss.unwrap(), e.heldout_acc.unwrap());
    }
    println!("train {:.0}s", t0.elapsed().as_secs_f64());
    let model = out.model;

    let t0 = Instant::now();
    // Unprompted 500-episode rollouts on 6 test tasks.
    use rayon::prelude::*;
    let results: Vec<String> = (0..6u64).collect::<Vec<_>>().par_iter().map(|&seed| {
        let task = ad_lab_core::env::sample_task(Split::Test, &split, &mut ad_lab_core::rng::stream_rng(seed, 5)).unwrap();
        let run = rollout(&model, &task, 500, 80, seed, ActionSelection::Sample).unwrap();
        let first: f32 = run.returns[..10].iter().sum::<f32>() / 10.0;
        let last: f32 = run.returns[450..].iter().sum::<f32>() / 50.0;
        let oracle = optimal_return(&task, (4, 4)).unwrap();
        // lock-in episode: first index with 5-ep MA >= 0.5 oracle
        let lock = run.returns.windows(5).position(|w| w.iter().sum::<f32>() / 5.0 >= 0.5 * oracle);
        format!("{}: first10 {first:.2} last50 {last:.2}/{oracle:.0} lock@{lock:?}", task.goal_key())
    }).collect();
    for r in &results { println!("A {r}"); }
    println!("eval A {:.0}s", t0.elapsed().as_secs_f64());

    // Prompted exploitation ceiling on train tasks.
    for i in [0usize, 5, 10] {
        let h = &dataset.histories[i * cfg.a3c.num_actors];
        let demo = demo_from_history(h, 1.0, 80);
        let run = prompt_rollout(&model, &h.task, &demo, 30, 80, 3, ActionSelection::Sample).unwrap();
        let first: f32 = run.returns[..10].iter().sum::<f32>() / 10.0;
        let last: f32 = run.returns[20..].iter().sum::<f32>() / 10.0;
        println!("B prompted train {}: first10 {first:.2} last10 {last:.2} oracle {:.0}", h.task.goal_key(),
            optimal_return(&h.task, (4,4)).unwrap());
    }
}
