use ad_lab_core::env::{grid_center, optimal_return, EnvId};
use ad_lab_core::eval::AgentKind;
use ad_lab_core::pipeline::{generate_dataset, run_from_dataset, PipelineConfig};
use std::time::Instant;

fn main() {
    let mut cfg = PipelineConfig::desk_default(EnvId::DarkRoom, 17);
    cfg.eval.train_seeds = 1; // calibration: single model
    cfg.eval.eval_seeds = 8;
    let split = cfg.split().unwrap();
    let t0 = Instant::now();
    let (dataset, stats) = generate_dataset(&cfg, &split).unwrap();
    println!(
        "gen: {} histories, {:.1}M transitions, {:.0}s",
        dataset.histories.len(),
        dataset.total_transitions() as f64 / 1e6,
        t0.elapsed().as_secs_f64()
    );
    let frac_ok = stats
        .iter()
        .filter(|s| s.final_ma_return >= 0.9 * s.oracle)
        .count() as f64
        / stats.len() as f64;
    println!("gen: {:.0}% of tasks reached 90% oracle", frac_ok * 100.0);

    let t0 = Instant::now();
    let outcome = run_from_dataset(&cfg, split, dataset, stats, AgentKind::Ad, None).unwrap();
    println!("train+eval: {:.0}s", t0.elapsed().as_secs_f64());
    let report = &outcome.report;
    let first10 = report.mean_over(0..10);
    let last50 = report.final_mean(50);
    // mean oracle fraction over runs
    let mut frac = 0.0;
    for run in &outcome.runs {
        let oracle = optimal_return(&run.task, grid_center(EnvId::DarkRoom)).unwrap() as f64;
        let last: f64 = run.returns[run.returns.len() - 50..].iter().map(|&r| r as f64).sum::<f64>() / 50.0;
        frac += last / oracle / outcome.runs.len() as f64;
    }
    println!("AD: first-10 mean {first10:.2}, last-50 mean {last50:.2} (x{:.2}), oracle frac {frac:.2}", last50 / first10.max(0.01));
    for e in report.episodes.iter().step_by(10) {
        println!("  ep {:3}  mean {:5.2}  std {:4.2}", e.episode, e.mean, e.std);
    }
}
