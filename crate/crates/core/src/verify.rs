//! Self-checks run by `mf verify`: kernels against the loop references,
//! per-head recomposition, finite-difference gradients of whole models, and
//! the score-count law of each mechanism. Every suite is seed-pinned.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, oracle, AttentionMask, ConvParams, LocalParams, OpCounter};
use crate::config::{preset, ArchitectureFile};
use crate::error::Result;
use crate::init;
use crate::mhma::{mhma_forward, recompose_check, HeadSpec, MhmaWeights};
use crate::model::{Multiformer, Seq2SeqBatch, BOS, EOS, NUM_SPECIAL};
use crate::tensor::{grad_check, GradCheckConfig, Graph, ParamStore, Scalar, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const RECOMPOSE_TOLERANCE_F64: f64 = 1e-10;
pub const RECOMPOSE_TOLERANCE_F32: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;

/// Head mixes of the bundled presets, always covered by the recomposition suite.
pub const PRESET_MIXES: &[&[&str]] = &[
    &["full", "full", "full", "full"],
    &["local(8)", "local(8)", "local(8)", "local(8)"],
    &["conv(5,2)", "conv(5,2)", "conv(5,2)", "conv(5,2)"],
    &["local(8)", "local(8)", "conv(5,2)", "conv(5,2)"],
    &["local(8)", "conv(5,2)", "conv(5,2)", "conv(5,2)"],
    &["local(8)", "local(8)", "local(8)", "conv(5,2)"],
];

pub const PAPER_PRESETS: &[&str] =
    &["baseline", "local_attention", "conv_attention", "multiformer_lc", "multiformer_v1", "multiformer_v2"];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail)?;
        }
        Ok(())
    }
}

/// Scale of each suite.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub oracle_cases: usize,
    pub recompose_cases: usize,
    pub grad_presets: usize,
    pub count_lengths: &'static [usize],
    pub seed: u64,
}

impl VerifyOptions {
    pub fn full() -> Self {
        VerifyOptions {
            oracle_cases: 100,
            recompose_cases: 100,
            grad_presets: PAPER_PRESETS.len(),
            count_lengths: &[64, 256, 1024],
            seed: 2024,
        }
    }

    pub fn fast() -> Self {
        VerifyOptions {
            oracle_cases: 20,
            recompose_cases: 20,
            grad_presets: 2,
            count_lengths: &[64, 256],
            seed: 2024,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest absolute elementwise difference; infinite on shape mismatch.
fn deviation(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

/// Random padding mask: a valid prefix of random length, occasionally with
/// extra holes after the first position.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> AttentionMask {
    let valid = rng.random_range(1..=n);
    let holes = rng.random_bool(0.3);
    let v = (0..n)
        .map(|i| i == 0 || (i < valid && !(holes && rng.random_bool(0.25))))
        .collect();
    AttentionMask::new(v).expect("position 0 is valid")
}

/// Largest deviation between graph kernels and loop references for one
/// seeded case covering full, local and compressed attention.
fn oracle_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=64);
    let dh = rng.random_range(1..=8);
    let d = rng.random_range(1..=8);
    let mask = random_mask(rng, n);
    let q = random_tensor(rng, &[n, dh]);
    let k = random_tensor(rng, &[n, dh]);
    let v = random_tensor(rng, &[n, dh]);
    let valid = mask.valid().to_vec();
    let mut worst: f64 = 0.0;

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mut c = OpCounter::new();
    let full = attention::full_attention(&mut g, qv, kv, vv, &mask, &mut c)?;
    let (z, a) = oracle::attention(&q, &k, &v, |_, j| valid[j]);
    worst = worst.max(deviation(g.value(full.z), &z));
    worst = worst.max(deviation(g.value(*full.weights.inner()), &a));

    let window = 2 * rng.random_range(1..=8);
    let lp = LocalParams::new(window)?;
    let local = attention::local_attention(&mut g, qv, kv, vv, lp, &mask, &mut c)?;
    let band_has_valid = |i: usize| (0..n).any(|j| lp.in_band(i, j) && valid[j]);
    let (z, a) = oracle::attention(&q, &k, &v, |i, j| {
        lp.in_band(i, j) && (valid[j] || (j == i && !band_has_valid(i)))
    });
    worst = worst.max(deviation(g.value(local.z), &z));
    let dense = local.weights.map(|w| g.value(w).clone()).to_dense(n);
    worst = worst.max(deviation(&dense, &a));

    let kernel = 2 * rng.random_range(0..=3) + 1;
    let stride = rng.random_range(1..=4);
    let x = random_tensor(rng, &[n, d]);
    let wq = random_tensor(rng, &[d, dh]);
    let wk = random_tensor(rng, &[d, dh]);
    let wv = random_tensor(rng, &[d, dh]);
    let cw = random_tensor(rng, &[kernel, d, d]);
    let cb = random_tensor(rng, &[d]);
    let mut store = ParamStore::<f64>::new();
    let weight = store.insert("w", cw.clone())?;
    let bias = store.insert("b", cb.clone())?;
    let params = ConvParams { kernel, stride, weight, bias };
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let (wqv, wkv, wvv) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let qc = g.matmul(xv, wqv)?;
    let (xc, mc) = oracle::compress(&x, &cw, &cb, stride, &valid);
    if !mc.iter().any(|v| *v) {
        return Ok(worst);
    }
    let head = attention::conv_attention(&mut g, qc, xv, wkv, wvv, &params, &mask, &mut c)?;
    let (z, a) = oracle::attention(&oracle::project(&x, &wq), &oracle::project(&xc, &wk), &oracle::project(&xc, &wv), |_, j| mc[j]);
    worst = worst.max(deviation(g.value(head.z), &z));
    worst = worst.max(deviation(g.value(*head.weights.inner()), &a));
    Ok(worst)
}

/// Exact-equality and identity edge cases. Returns a description of the
/// first failure.
fn oracle_edge_cases(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for n in [1usize, 2, 5, 17, 40] {
        let dh = 4;
        let mask = random_mask(rng, n);
        let q = random_tensor(rng, &[n, dh]);
        let k = random_tensor(rng, &[n, dh]);
        let v = random_tensor(rng, &[n, dh]);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let mut c = OpCounter::new();
        let full = attention::full_attention(&mut g, qv, kv, vv, &mask, &mut c)?;
        let wide = LocalParams::new(2 * n.max(1))?;
        let local = attention::local_attention(&mut g, qv, kv, vv, wide, &mask, &mut c)?;
        if g.value(full.z).data() != g.value(local.z).data() {
            return Ok(Some(format!("local(w >= 2(n-1)) differs from full at n={n}")));
        }

        let d = dh;
        let x = random_tensor(rng, &[n, d]);
        let mut eye = Tensor::zeros(&[1, d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let mut store = ParamStore::<f64>::new();
        let weight = store.insert("w", eye)?;
        let bias = store.insert("b", Tensor::zeros(&[d]))?;
        let params = ConvParams { kernel: 1, stride: 1, weight, bias };
        let wk = random_tensor(rng, &[d, dh]);
        let wv = random_tensor(rng, &[d, dh]);
        let wq = random_tensor(rng, &[d, dh]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (wqv, wkv, wvv) = (g.constant(wq), g.constant(wk), g.constant(wv));
        let q = g.matmul(xv, wqv)?;
        let conv = attention::conv_attention(&mut g, q, xv, wkv, wvv, &params, &mask, &mut c)?;
        let xm = g.mask_rows(xv, mask.valid())?;
        let k = g.matmul(xm, wkv)?;
        let v = g.matmul(xm, wvv)?;
        let full = attention::full_attention(&mut g, q, k, v, &mask, &mut c)?;
        let diff = deviation(g.value(conv.z), g.value(full.z));
        if diff > ORACLE_TOLERANCE {
            return Ok(Some(format!("conv(1,1) with identity weights differs from full by {diff:e} at n={n}")));
        }
    }
    Ok(None)
}

pub fn oracle_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        worst = worst.max(oracle_case(&mut rng)?);
    }
    let edge = oracle_edge_cases(&mut rng)?;
    let passed = worst <= ORACLE_TOLERANCE && edge.is_none();
    let detail = match edge {
        Some(e) => e,
        None => format!("{cases} cases, max deviation {worst:.3e} (tolerance {ORACLE_TOLERANCE:e})"),
    };
    Ok(SuiteResult { name: "oracle-equivalence", passed, detail })
}

/// Random head mix of `h` heads.
pub fn random_specs(rng: &mut ChaCha8Rng, h: usize) -> Vec<HeadSpec> {
    (0..h)
        .map(|_| match rng.random_range(0..3) {
            0 => HeadSpec::Full,
            1 => HeadSpec::Local { window: 2 * rng.random_range(1..=4) },
            _ => HeadSpec::Conv { kernel: 2 * rng.random_range(0..=2) + 1, stride: rng.random_range(1..=3) },
        })
        .collect()
}

/// Largest recomposition residual of one random MHMA forward pass.
fn recompose_case<F: Scalar>(specs: &[HeadSpec], n: usize, dh: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dh * specs.len();
    let mut store = ParamStore::<F>::new();
    let weights = MhmaWeights::register(&mut store, "mhma", d, specs, &mut rng)?;
    // Non-zero output bias so it is exercised by the recomposition.
    let bias = init::linear::<F>(&mut rng, 1, d);
    *store.value_mut(weights.bo) = bias.reshape(vec![d])?;
    let mask = AttentionMask::prefix(rng.random_range(1..=n), n)?;
    let x: Tensor<F> = Tensor::from_fn(&[n, d], |_| F::from_f64_lossy(rng.random_range(-1.0..1.0)));
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mhma_forward(&mut g, xv, specs, &weights, &mask, &mut OpCounter::new(), true)?;
    Ok(recompose_check(out.capture.as_ref())?.to_f64_lossy())
}

pub fn recomposition_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w64, mut w32): (f64, f64) = (0.0, 0.0);
    for c in 0..cases {
        let specs: Vec<HeadSpec> = match PRESET_MIXES.get(c) {
            Some(mix) => mix.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            None => {
                let h = rng.random_range(1..=4);
                random_specs(&mut rng, h)
            }
        };
        let n = rng.random_range(1..=48);
        let dh = rng.random_range(1..=8);
        let s = rng.random();
        w64 = w64.max(recompose_case::<f64>(&specs, n, dh, s)?);
        w32 = w32.max(recompose_case::<f32>(&specs, n, dh, s)?);
    }
    let passed = w64 < RECOMPOSE_TOLERANCE_F64 && w32 < RECOMPOSE_TOLERANCE_F32;
    Ok(SuiteResult {
        name: "recomposition",
        passed,
        detail: format!("{cases} configurations, max residual {w64:.3e} (f64), {w32:.3e} (f32)"),
    })
}

/// Tiny synthetic batch for gradient checks: two examples of different
/// lengths, so padding is exercised.
pub fn tiny_batch(arch: &ArchitectureFile, seed: u64) -> Result<Seq2SeqBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = arch.vocab_size - NUM_SPECIAL;
    let examples: Vec<(Tensor<f64>, Vec<usize>)> = [24usize, 17]
        .iter()
        .map(|&t| {
            let x = random_tensor(&mut rng, &[t, arch.feature_dim]);
            let mut y = vec![BOS];
            y.extend((0..3).map(|_| NUM_SPECIAL + rng.random_range(0..symbols)));
            y.push(EOS);
            (x, y)
        })
        .collect();
    Seq2SeqBatch::from_examples(&examples)
}

/// End-to-end finite-difference check of a whole model in `f64`.
pub fn model_grad_check(arch: &ArchitectureFile, seed: u64, cfg: &GradCheckConfig) -> Result<crate::tensor::GradCheckReport> {
    let model = Multiformer::<f64>::new(arch.to_model_config()?, seed)?;
    let batch = tiny_batch(arch, seed ^ 0xba7c)?;
    let mut store = model.params().clone();
    let ids = store.sorted_ids();
    grad_check(&mut store, &ids, cfg, |g| model.batch_loss(g, &batch, 0.1))
}

pub fn gradient_suite(presets: usize, seed: u64) -> Result<SuiteResult> {
    let cfg = GradCheckConfig { step: GRAD_STEP, tolerance: GRAD_TOLERANCE, max_elements: 24, seed, ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let (mut checked, mut skipped) = (0, 0);
    for name in PAPER_PRESETS.iter().take(presets) {
        let arch = preset(name)?.tiny();
        let r = model_grad_check(&arch, seed, &cfg)?;
        worst = worst.max(r.max_rel_error());
        checked += r.checked();
        skipped += r.skipped();
        if !r.passed() {
            failures.push(name.to_string());
        }
    }
    Ok(SuiteResult {
        name: "gradient-check",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{presets} presets, {checked} elements, max relative error {worst:.3e}, {skipped} skipped at kinks")
        } else {
            format!("failed for {}; max relative error {worst:.3e}", failures.join(", "))
        },
    })
}

/// Score-product counts of one head of each mechanism at length `n`.
pub fn mechanism_counts(n: usize, window: usize, kernel: usize, stride: usize, dh: usize, seed: u64) -> Result<(u64, u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = AttentionMask::all(n);
    let q = random_tensor(&mut rng, &[n, dh]);
    let mut store = ParamStore::<f64>::new();
    let weight = store.insert("w", random_tensor(&mut rng, &[kernel, dh, dh]))?;
    let bias = store.insert("b", Tensor::zeros(&[dh]))?;
    let eye = Tensor::from_fn(&[dh, dh], |i| if i / dh == i % dh { 1.0 } else { 0.0 });
    let mut g = Graph::new(&store);
    let qv = g.constant(q);
    let id = g.constant(eye);
    let mut full = OpCounter::new();
    attention::full_attention(&mut g, qv, qv, qv, &mask, &mut full)?;
    let mut local = OpCounter::new();
    attention::local_attention(&mut g, qv, qv, qv, LocalParams::new(window)?, &mask, &mut local)?;
    let mut conv = OpCounter::new();
    let params = ConvParams { kernel, stride, weight, bias };
    attention::conv_attention(&mut g, qv, qv, id, id, &params, &mask, &mut conv)?;
    Ok((full.score_products, local.score_products, conv.score_products))
}

pub fn count_suite(lengths: &[usize], seed: u64) -> Result<SuiteResult> {
    let (w, k, s) = (64, 5, 2);
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for &n in lengths {
        let (full, local, conv) = mechanism_counts(n, w, k, s, 4, seed)?;
        let n64 = n as u64;
        if full != n64 * n64 {
            problems.push(format!("full {full} != n^2 at n={n}"));
        }
        if local > n64 * (w as u64 + 1) {
            problems.push(format!("local {local} > n(w+1) at n={n}"));
        }
        if conv != n64 * n64.div_ceil(s as u64) {
            problems.push(format!("conv {conv} != n*ceil(n/2) at n={n}"));
        }
        if n == 1024 {
            let lr = local as f64 / full as f64;
            if lr >= 0.065 {
                problems.push(format!("local/full = {lr:.4} at n=1024"));
            }
            if conv * 2 != full {
                problems.push(format!("conv/full = {} at n=1024", conv as f64 / full as f64));
            }
        }
        summary.push(format!("n={n}: full {full}, local {local}, conv {conv}"));
    }
    Ok(SuiteResult {
        name: "count-law",
        passed: problems.is_empty(),
        detail: if problems.is_empty() { summary.join("; ") } else { problems.join("; ") },
    })
}

/// Runs all suites.
pub fn run(opts: VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            oracle_suite(opts.oracle_cases, opts.seed)?,
            recomposition_suite(opts.recompose_cases, opts.seed)?,
            gradient_suite(opts.grad_presets, opts.seed)?,
            count_suite(opts.count_lengths, opts.seed)?,
        ],
    })
}
