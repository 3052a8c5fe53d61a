//! Dense row-major f32 tensors and the raw kernels behind the tape.

pub mod tape;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Dense tensor: row-major f32 values plus an optional gradient of the same
/// length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![1.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(vec![1], vec![v])
    }

    /// Truncated normal init (resample outside two standard deviations).
    pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(z as f32 * std);
            }
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-d tensor");
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn mm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
pub fn mm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    const LANES: usize = 16;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            // Lane-split accumulation so the dot product vectorizes.
            let mut lanes = [0.0f32; LANES];
            let mut ca = arow.chunks_exact(LANES);
            let mut cb = brow.chunks_exact(LANES);
            for (xa, xb) in (&mut ca).zip(&mut cb) {
                for l in 0..LANES {
                    lanes[l] += xa[l] * xb[l];
                }
            }
            let mut acc: f32 = lanes.iter().sum();
            for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
                acc += xa * xb;
            }
            crow[j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub fn mm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Row-wise softmax in place, restricted to `allowed` positions; masked
/// entries come out exactly zero. Max-subtraction plus f64 denominators.
pub fn softmax_rows_masked(x: &mut [f32], rows: usize, cols: usize, allowed: Option<&[bool]>) {
    debug_assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let mut max = f32::NEG_INFINITY;
        for j in 0..cols {
            let ok = allowed.map_or(true, |m| m[i * cols + j]);
            if ok && row[j] > max {
                max = row[j];
            }
        }
        let mut denom = 0.0f64;
        for j in 0..cols {
            let ok = allowed.map_or(true, |m| m[i * cols + j]);
            if ok {
                let e = f64::from(row[j] - max).exp();
                denom += e;
                row[j] = e as f32;
            } else {
                row[j] = 0.0;
            }
        }
        let inv = (1.0 / denom) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Scaled dot-product attention over a boolean mask: `mask[i][j] == false`
/// forbids position `i` attending to `j`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (l, d) = match q.shape[..] {
        [l, d] => (l, d),
        _ => return Err(contract("attention expects 2-d Q")),
    };
    if k.shape != [l, d] || v.shape != [l, d] {
        return Err(contract(format!(
            "attention shape mismatch: Q {:?}, K {:?}, V {:?}",
            q.shape, k.shape, v.shape
        )));
    }
    if mask.shape != [l, l] {
        return Err(contract(format!(
            "attention mask must be {l}x{l}, got {:?}",
            mask.shape
        )));
    }
    let allowed: Vec<bool> = mask.data.iter().map(|&m| m != 0.0).collect();
    for i in 0..l {
        if !allowed[i * l..(i + 1) * l].iter().any(|&a| a) {
            return Err(contract(format!("attention row {i} is fully masked")));
        }
    }
    let mut scores = vec![0.0f32; l * l];
    mm_nt(&q.data, &k.data, &mut scores, l, d, l);
    let scale = 1.0 / (d as f32).sqrt();
    for s in scores.iter_mut() {
        *s *= scale;
    }
    softmax_rows_masked(&mut scores, l, l, Some(&allowed));
    let mut out = vec![0.0f32; l * d];
    mm_nn(&scores, &v.data, &mut out, l, l, d);
    Ok(Tensor::new(vec![l, d], out))
}

/// Layer normalization over the last axis followed by a per-feature affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, epsilon: f32) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Err(contract("layer_norm epsilon must be positive"));
    }
    let d = *x.shape.last().ok_or_else(|| contract("empty shape"))?;
    if gain.data.len() != d || bias.data.len() != d {
        return Err(contract(format!(
            "layer_norm gain/bias must have length {d}, got {}/{}",
            gain.data.len(),
            bias.data.len()
        )));
    }
    let rows = x.data.len() / d;
    let mut out = vec![0.0f32; x.data.len()];
    for i in 0..rows {
        let row = &x.data[i * d..(i + 1) * d];
        let (mean, rstd) = row_moments(row, epsilon);
        for j in 0..d {
            out[i * d + j] = ((row[j] - mean) * rstd) * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor::new(x.shape.clone(), out))
}

/// log(sum(exp(row))) with max-subtraction, accumulated in f64.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = row.iter().map(|&v| f64::from(v - max)).map(f64::exp).sum();
    f64::from(max) + sum.ln()
}

/// Mean and reciprocal standard deviation of one row (f64 accumulation).
pub(crate) fn row_moments(row: &[f32], epsilon: f32) -> (f32, f32) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = f64::from(v) - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    let rstd = 1.0 / (var + f64::from(epsilon)).sqrt();
    (mean as f32, rstd as f32)
}

/// GELU (tanh approximation), smooth everywhere.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044_715 * x * x)
}
