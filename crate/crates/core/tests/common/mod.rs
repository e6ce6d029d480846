//! Reference computations for the integration tests, written against plain
//! nested vectors so they share nothing with the library kernels.
#![allow(dead_code)]

use multiformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let r = m.len();
    let c = m.first().map_or(0, Vec::len);
    Tensor::new(vec![r, c], m.concat()).unwrap()
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let m = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..m).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Softmax attention; `allowed(i, j)` selects visible keys. Returns (Z, A).
pub fn attention(q: &Mat, k: &Mat, v: &Mat, allowed: impl Fn(usize, usize) -> bool) -> (Mat, Mat) {
    let dh = q.first().map_or(0, Vec::len) as f64;
    let mut z = Vec::new();
    let mut a = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let s: Vec<Option<f64>> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| allowed(i, j).then(|| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / dh.sqrt()))
            .collect();
        let top = s.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(top.is_finite(), "row {i} has no visible key");
        let e: Vec<f64> = s.iter().map(|x| x.map_or(0.0, |x| (x - top).exp())).collect();
        let total: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|x| x / total).collect();
        let zi = (0..v[0].len()).map(|c| row.iter().zip(v).map(|(w, vj)| w * vj[c]).sum()).collect();
        z.push(zi);
        a.push(row);
    }
    (z, a)
}

/// Strided zero-padded convolution over rows, weights `w[k][in][out]`;
/// rows with `valid[t] == false` are read as zeros. Returns the output and
/// the center-frame mask.
pub fn compress(x: &Mat, w: &[Mat], b: &[f64], stride: usize, valid: &[bool]) -> (Mat, Vec<bool>) {
    let n = x.len();
    let kernel = w.len();
    let pad = kernel / 2;
    let m = n.div_ceil(stride);
    let mut out = vec![b.to_vec(); m];
    for (j, o) in out.iter_mut().enumerate() {
        for (kk, wk) in w.iter().enumerate() {
            let t = (j * stride + kk) as isize - pad as isize;
            if t < 0 || t >= n as isize || !valid[t as usize] {
                continue;
            }
            for (xi, wrow) in x[t as usize].iter().zip(wk) {
                for (oc, wv) in o.iter_mut().zip(wrow) {
                    *oc += xi * wv;
                }
            }
        }
    }
    let mask = (0..m).map(|j| valid[(j * stride).min(n - 1)]).collect();
    (out, mask)
}

/// Splits a `[K, din, dout]` tensor into per-tap matrices.
pub fn conv_taps(t: &Tensor<f64>) -> Vec<Mat> {
    let (k, din, dout) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..k)
        .map(|kk| {
            (0..din)
                .map(|i| t.data()[(kk * din + i) * dout..(kk * din + i + 1) * dout].to_vec())
                .collect()
        })
        .collect()
}

/// Label-smoothed cross entropy of one logit row: target distribution
/// `(1-eps)·onehot + eps/V`.
pub fn smoothed_ce(logits: &[f64], target: usize, eps: f64) -> f64 {
    let v = logits.len() as f64;
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let p = if k == target { 1.0 - eps + eps / v } else { eps / v };
            -p * (l - lse)
        })
        .sum()
}

/// Scalar Adam written out step by step.
pub fn adam_scalar(mut p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

/// Random mask with position 0 valid: a valid prefix, sometimes with holes.
pub fn random_valid(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let len = rng.random_range(1..=n);
    let holes = rng.random_bool(0.3);
    (0..n).map(|i| i == 0 || (i < len && !(holes && rng.random_bool(0.25)))).collect()
}

/// Expected per-layer head lists of the shipped full-size presets, spelled
/// out layer by layer rather than through the block notation.
pub fn expected_layers(name: &str) -> Vec<Vec<multiformer::mhma::HeadSpec>> {
    use multiformer::mhma::HeadSpec::{self, *};
    let l = Local { window: 64 };
    let c = Conv { kernel: 5, stride: 2 };
    let layer = |nl: usize, nc: usize| -> Vec<HeadSpec> {
        std::iter::repeat_n(l, nl).chain(std::iter::repeat_n(c, nc)).collect()
    };
    match name {
        "baseline" => vec![vec![Full; 4]; 12],
        "local_attention" => vec![layer(4, 0); 12],
        "conv_attention" => vec![layer(0, 4); 12],
        "multiformer_lc" => vec![layer(2, 2); 12],
        "multiformer_v1" => (0..12).map(|i| if i < 6 { layer(1, 3) } else { layer(2, 2) }).collect(),
        "multiformer_v2" => (0..12)
            .map(|i| match i {
                0..3 => layer(1, 3),
                3..8 => layer(3, 1),
                _ => layer(2, 2),
            })
            .collect(),
        _ => panic!("no expectation for {name}"),
    }
}

pub const PAPER_PRESETS: [&str; 6] =
    ["baseline", "local_attention", "conv_attention", "multiformer_lc", "multiformer_v1", "multiformer_v2"];
