//! Naive reference implementations written as explicit loops over plain
//! tensors. They share no code with the graph kernels and exist only to
//! cross-check them.

use crate::tensor::Tensor;

/// Dense attention where `allowed(i, j)` decides whether query `i` may see
/// key `j`. Returns `(Z [n, d_h], A [n, m])`.
pub fn attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    allowed: impl Fn(usize, usize) -> bool,
) -> (Tensor<f64>, Tensor<f64>) {
    let n = q.shape()[0];
    let dh = q.shape()[1];
    let m = k.shape()[0];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut a = Tensor::zeros(&[n, m]);
    let mut z = Tensor::zeros(&[n, dh]);
    for i in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; m];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            if !allowed(i, j) {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..dh {
                dot += q.at(i, c) * k.at(j, c);
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in &scores {
            if s.is_finite() {
                total += (s - max).exp();
            }
        }
        for j in 0..m {
            if scores[j].is_finite() {
                let w = (scores[j] - max).exp() / total;
                a.data_mut()[i * m + j] = w;
                for c in 0..dh {
                    z.data_mut()[i * dh + c] += w * v.at(j, c);
                }
            }
        }
    }
    (z, a)
}

/// Strided convolution with zero padding `kernel / 2`, evaluated as an
/// explicit sum. Padded input rows (`valid[t] == false`) count as zeros.
/// Returns the compressed sequence and its center-frame mask.
pub fn compress(
    x: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    valid: &[bool],
) -> (Tensor<f64>, Vec<bool>) {
    let n = x.shape()[0];
    let din = x.shape()[1];
    let kernel = weight.shape()[0];
    let dout = weight.shape()[2];
    let pad = kernel / 2;
    let m = n.div_ceil(stride);
    let mut out = Tensor::zeros(&[m, dout]);
    for j in 0..m {
        for o in 0..dout {
            let mut acc = bias.data()[o];
            for kk in 0..kernel {
                let t = (j * stride + kk) as isize - pad as isize;
                if t < 0 || t as usize >= n || !valid[t as usize] {
                    continue;
                }
                for i in 0..din {
                    acc += x.at(t as usize, i) * weight.data()[(kk * din + i) * dout + o];
                }
            }
            out.data_mut()[j * dout + o] = acc;
        }
    }
    let mask = (0..m).map(|j| valid[(j * stride).min(n - 1)]).collect();
    (out, mask)
}

/// `x · w` by explicit loops.
pub fn project(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += x.at(i, p) * w.at(p, j);
            }
            out.data_mut()[i * m + j] = acc;
        }
    }
    out
}
