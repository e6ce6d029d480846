mod common;

use common::*;
use multiformer::attention::{
    conv_attention, conv_compress, full_attention, local_attention, AttentionMask, ConvParams, LocalParams,
    OpCounter,
};
use multiformer::tensor::{Graph, ParamStore, Tensor};
use multiformer::Error;
use proptest::prelude::*;
use rand::Rng;

fn conv_store(w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> (ParamStore<f64>, ConvParams) {
    let mut store = ParamStore::new();
    let weight = store.insert("w", w.clone()).unwrap();
    let bias = store.insert("b", b.clone()).unwrap();
    let kernel = w.shape()[0];
    (store, ConvParams { kernel, stride, weight, bias })
}

#[test]
fn full_and_local_match_reference() {
    let mut r = rng(11);
    for case in 0..60 {
        let n = r.random_range(1..=64);
        let dh = r.random_range(1..=6);
        let valid = random_valid(&mut r, n);
        let (q, k, v) = (rand_mat(&mut r, n, dh), rand_mat(&mut r, n, dh), rand_mat(&mut r, n, dh));
        let window = 2 * r.random_range(1..=6);
        let mask = AttentionMask::new(valid.clone()).unwrap();

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(from_mat(&q)), g.constant(from_mat(&k)), g.constant(from_mat(&v)));
        let mut c = OpCounter::new();
        let full = full_attention(&mut g, qv, kv, vv, &mask, &mut c).unwrap();
        let (z, a) = attention(&q, &k, &v, |_, j| valid[j]);
        assert!(max_diff(&to_mat(g.value(full.z)), &z) < 1e-12, "case {case}");
        assert!(max_diff(&to_mat(g.value(*full.weights.inner())), &a) < 1e-12, "case {case}");

        let half = window / 2;
        let in_band = |i: usize, j: usize| i.abs_diff(j) <= half;
        let band_valid = |i: usize| (0..n).any(|j| in_band(i, j) && valid[j]);
        let local = local_attention(&mut g, qv, kv, vv, LocalParams::new(window).unwrap(), &mask, &mut c).unwrap();
        let (z, a) = attention(&q, &k, &v, |i, j| in_band(i, j) && (valid[j] || (i == j && !band_valid(i))));
        assert!(max_diff(&to_mat(g.value(local.z)), &z) < 1e-12, "case {case}");
        let dense = local.weights.map(|w| g.value(w).clone()).to_dense(n);
        assert!(max_diff(&to_mat(&dense), &a) < 1e-12, "case {case}");
    }
}

#[test]
fn compressed_attention_matches_reference() {
    let mut r = rng(12);
    for case in 0..60 {
        let n = r.random_range(1..=64);
        let (d, dh) = (r.random_range(1..=6), r.random_range(1..=6));
        let kernel = 2 * r.random_range(0..=3) + 1;
        let stride = r.random_range(1..=4);
        let valid = random_valid(&mut r, n);
        let x = rand_mat(&mut r, n, d);
        let (wq, wk, wv) = (rand_mat(&mut r, d, dh), rand_mat(&mut r, d, dh), rand_mat(&mut r, d, dh));
        let w = Tensor::from_fn(&[kernel, d, d], |_| r.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[d], |_| r.random_range(-1.0..1.0));
        let (xc, mc) = compress(&x, &conv_taps(&w), b.data(), stride, &valid);
        if !mc.contains(&true) {
            continue;
        }
        let (store, params) = conv_store(&w, &b, stride);
        let mut g = Graph::new(&store);
        let xv = g.constant(from_mat(&x));
        let (wqv, wkv, wvv) = (g.constant(from_mat(&wq)), g.constant(from_mat(&wk)), g.constant(from_mat(&wv)));
        let q = g.matmul(xv, wqv).unwrap();
        let mask = AttentionMask::new(valid.clone()).unwrap();
        let head = conv_attention(&mut g, q, xv, wkv, wvv, &params, &mask, &mut OpCounter::new()).unwrap();
        let (z, a) = attention(&matmul(&x, &wq), &matmul(&xc, &wk), &matmul(&xc, &wv), |_, j| mc[j]);
        assert!(max_diff(&to_mat(g.value(head.z)), &z) < 1e-12, "case {case}");
        assert!(max_diff(&to_mat(g.value(*head.weights.inner())), &a) < 1e-12, "case {case}");
    }
}

#[test]
fn wide_window_is_exactly_full() {
    let mut r = rng(13);
    for n in 1..=20 {
        let valid = random_valid(&mut r, n);
        let mask = AttentionMask::new(valid).unwrap();
        let (q, k, v) = (rand_mat(&mut r, n, 3), rand_mat(&mut r, n, 3), rand_mat(&mut r, n, 3));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(from_mat(&q)), g.constant(from_mat(&k)), g.constant(from_mat(&v)));
        let mut c = OpCounter::new();
        let full = full_attention(&mut g, qv, kv, vv, &mask, &mut c).unwrap();
        let w = 2 * (n - 1).max(1);
        let local = local_attention(&mut g, qv, kv, vv, LocalParams::new(w).unwrap(), &mask, &mut c).unwrap();
        assert_eq!(g.value(full.z).data(), g.value(local.z).data(), "n={n}");
    }
}

#[test]
fn local_counts_only_in_band_valid_pairs() {
    let mut r = rng(14);
    for _ in 0..20 {
        let n = r.random_range(10..=80);
        let window = 2 * r.random_range(1..=4);
        let half = window / 2;
        let valid = vec![true; n];
        let mask = AttentionMask::new(valid).unwrap();
        let q = rand_mat(&mut r, n, 2);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let qv = g.constant(from_mat(&q));
        let mut c = OpCounter::new();
        local_attention(&mut g, qv, qv, qv, LocalParams::new(window).unwrap(), &mask, &mut c).unwrap();
        let expected: usize = (0..n).map(|i| (0..n).filter(|j| i.abs_diff(*j) <= half).count()).sum();
        if half + 1 < n {
            assert_eq!(c.score_products, expected as u64);
        }
    }
}

#[test]
fn compression_is_blind_to_padded_frames() {
    let mut r = rng(15);
    let (n, d) = (13, 3);
    let valid: Vec<bool> = (0..n).map(|i| i < 9).collect();
    let mask = AttentionMask::new(valid).unwrap();
    let w = Tensor::from_fn(&[5, d, d], |_| r.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[d], |_| r.random_range(-1.0..1.0));
    let (store, params) = conv_store(&w, &b, 2);
    let x = rand_mat(&mut r, n, d);
    let mut y = x.clone();
    for row in y.iter_mut().skip(9) {
        for v in row.iter_mut() {
            *v = 1e3;
        }
    }
    let mut g = Graph::new(&store);
    let xv = g.constant(from_mat(&x));
    let yv = g.constant(from_mat(&y));
    let a = conv_compress(&mut g, xv, &params, &mask).unwrap();
    let b2 = conv_compress(&mut g, yv, &params, &mask).unwrap();
    assert_eq!(a.mask, b2.mask);
    assert_eq!(g.value(a.x).data(), g.value(b2.x).data());
}

#[test]
fn fully_masked_rows_are_reported() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let err = g.masked_softmax(x, Some(vec![true, false, false, false])).unwrap_err();
    assert!(matches!(err, Error::FullyMasked { row: 1 }), "{err:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| r.random_range(-30.0..30.0));
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.random_bool(0.6)).collect();
        for i in 0..rows {
            mask[i * cols + r.random_range(0..cols)] = true;
        }
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let s = g.masked_softmax(xv, Some(mask.clone())).unwrap();
        let out = g.value(s);
        for i in 0..rows {
            let row = &out.data()[i * cols..(i + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, v) in row.iter().enumerate() {
                if !mask[i * cols + j] {
                    prop_assert_eq!(*v, 0.0);
                } else {
                    prop_assert!(*v >= 0.0);
                }
            }
        }
    }

    #[test]
    fn compressed_length_is_ceil(n in 1usize..200, stride in 1usize..6, k in 0usize..4) {
        let kernel = 2 * k + 1;
        let mut r = rng(n as u64);
        let w = Tensor::from_fn(&[kernel, 2, 2], |_| r.random_range(-1.0..1.0));
        let (store, params) = conv_store(&w, &Tensor::zeros(&[2]), stride);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_fn(&[n, 2], |_| r.random_range(-1.0..1.0)));
        let c = conv_compress(&mut g, x, &params, &AttentionMask::all(n)).unwrap();
        prop_assert_eq!(g.value(c.x).shape(), &[n.div_ceil(stride), 2]);
        prop_assert_eq!(c.mask.len(), n.div_ceil(stride));
    }
}
