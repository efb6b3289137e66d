//! Forward kernels shared by the tape and by plain inference helpers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Matrix product. A rank-1 right operand is a column and yields a rank-1
/// result.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().is_empty() || a.cols() != b.rows() {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let src = &bd[p * n..(p + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(src) {
                *o += aip * bv;
            }
        }
    }
    let shape = if b.shape().len() == 1 {
        vec![m]
    } else {
        vec![m, n]
    };
    Tensor::new(shape, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    let d = a.data();
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves size")
}

/// `W x + b`.
pub fn linear(w: &Tensor, x: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(w, x)?;
    match b {
        Some(b) => y.zip_map(b, "linear", |a, b| a + b),
        None => Ok(y),
    }
}

/// Concatenates vectors end to end.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Tensor::vector(data)
}

pub fn tanh_map(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over all entries, max-subtracted.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape {
            op: "softmax",
            left: vec![0],
            right: vec![],
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "softmax" });
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn cross_entropy(y_hat: f64, y: u8) -> f64 {
    let p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn mean_cross_entropy(batch: &[(f64, u8)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|&(p, y)| cross_entropy(p, y)).sum::<f64>() / batch.len() as f64
}
