use ad_lab_core::tensor::{mm_nn, mm_nt};
use std::time::Instant;
fn main() {
    let (m, k, n) = (240, 64, 256);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let reps = 2000;
    let t0 = Instant::now();
    for _ in 0..reps { c.iter_mut().for_each(|v| *v = 0.0); mm_nn(&a, &b, &mut c, m, k, n); }
    let dt = t0.elapsed().as_secs_f64();
    let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("mm_nn {m}x{k}x{n}: {gf:.2} Gflop/s");
    let bt = vec![0.25f32; n * k];
    let t0 = Instant::now();
    for _ in 0..reps { c.iter_mut().for_each(|v| *v = 0.0); mm_nt(&a, &bt, &mut c, m, k, n); }
    let dt = t0.elapsed().as_secs_f64();
    let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("mm_nt {m}x{k}x{n}: {gf:.2} Gflop/s (sum={})", c[0]);
}
