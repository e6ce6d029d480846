//! One line per acceptance criterion, A1 through A8. Reference values come
//! from the loop oracles in the core crate's test helpers.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use multiformer::attention::{conv_attention, full_attention, local_attention, AttentionMask, ConvParams, LocalParams, OpCounter};
use multiformer::checkpoint::{average, save_checkpoint, Checkpoint};
use multiformer::config::{preset, TaskFile, TOY_TASK};
use multiformer::mhma::{mhma_forward, HeadSpec, MhmaWeights};
use multiformer::model::Multiformer;
use multiformer::par::Execution;
use multiformer::tensor::{Graph, ParamStore, Scalar, Tensor};
use multiformer::training::{gen_synthetic_batch, held_out, inv_sqrt_lr, SyntheticTaskSpec, TrainConfig, Trainer};
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = (bool, String);

fn report(id: &str, what: &str, started: Instant, (ok, detail): &Outcome) {
    let verdict = if *ok { "PASS" } else { "FAIL" };
    let secs = started.elapsed().as_secs_f64();
    let _ = writeln!(std::io::stderr(), "{id} {verdict} {what}: {detail} [{secs:.1}s]");
}

// ---------------------------------------------------------------- A1

fn a1_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut r = rng(1001);
    let (mut worst, mut cases) = (0.0f64, 0usize);
    while cases < 120 {
        let n = r.random_range(1..=64);
        let (d, dh) = (r.random_range(1..=8), r.random_range(1..=8));
        let valid = random_valid(&mut r, n);
        let mask = AttentionMask::new(valid.clone()).unwrap();
        let x = rand_mat(&mut r, n, d);
        let (wq, wk, wv) = (rand_mat(&mut r, d, dh), rand_mat(&mut r, d, dh), rand_mat(&mut r, d, dh));
        let (q, k, v) = (matmul(&x, &wq), matmul(&x, &wk), matmul(&x, &wv));
        let window = 2 * r.random_range(1..=8);
        let (kernel, stride) = (2 * r.random_range(0..=3) + 1, r.random_range(1..=4));
        let cw = Tensor::from_fn(&[kernel, d, d], |_| r.random_range(-1.0..1.0));
        let cb = Tensor::from_fn(&[d], |_| r.random_range(-1.0..1.0));

        let mut store = ParamStore::<f64>::new();
        let weight = store.insert("w", cw.clone()).unwrap();
        let bias = store.insert("b", cb.clone()).unwrap();
        let params = ConvParams { kernel, stride, weight, bias };
        let mut g = Graph::new(&store);
        let mut c = OpCounter::new();
        let (qv, kv, vv) = (g.constant(from_mat(&q)), g.constant(from_mat(&k)), g.constant(from_mat(&v)));

        let full = full_attention(&mut g, qv, kv, vv, &mask, &mut c).unwrap();
        worst = worst.max(max_diff(&to_mat(g.value(full.z)), &attention(&q, &k, &v, |_, j| valid[j]).0));

        let half = window / 2;
        let band = |i: usize, j: usize| i.abs_diff(j) <= half;
        let any = |i: usize| (0..n).any(|j| band(i, j) && valid[j]);
        let local = local_attention(&mut g, qv, kv, vv, LocalParams::new(window).unwrap(), &mask, &mut c).unwrap();
        let expected = attention(&q, &k, &v, |i, j| band(i, j) && (valid[j] || (i == j && !any(i)))).0;
        worst = worst.max(max_diff(&to_mat(g.value(local.z)), &expected));

        let (xc, mc) = compress(&x, &conv_taps(&cw), cb.data(), stride, &valid);
        if mc.contains(&true) {
            let xv = g.constant(from_mat(&x));
            let (wkv, wvv) = (g.constant(from_mat(&wk)), g.constant(from_mat(&wv)));
            let conv = conv_attention(&mut g, qv, xv, wkv, wvv, &params, &mask, &mut c).unwrap();
            let expected = attention(&q, &matmul(&xc, &wk), &matmul(&xc, &wv), |_, j| mc[j]).0;
            worst = worst.max(max_diff(&to_mat(g.value(conv.z)), &expected));
        }
        cases += 1;
    }

    // Window covering the whole sequence, and an identity compressor.
    let mut exact = true;
    let mut identity_dev = 0.0f64;
    for n in 1..=64 {
        let d = 4;
        let valid = random_valid(&mut r, n);
        let mask = AttentionMask::new(valid).unwrap();
        let x = rand_mat(&mut r, n, d);
        let mut store = ParamStore::<f64>::new();
        let weight = store.insert("w", Tensor::from_fn(&[1, d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })).unwrap();
        let bias = store.insert("b", Tensor::zeros(&[d])).unwrap();
        let params = ConvParams { kernel: 1, stride: 1, weight, bias };
        let mut g = Graph::new(&store);
        let mut c = OpCounter::new();
        let xv = g.constant(from_mat(&x));
        let full = full_attention(&mut g, xv, xv, xv, &mask, &mut c).unwrap();
        let w = 2 * (n - 1).max(1);
        let local = local_attention(&mut g, xv, xv, xv, LocalParams::new(w).unwrap(), &mask, &mut c).unwrap();
        exact &= g.value(full.z).data() == g.value(local.z).data();
        let eye = g.constant(from_mat(&(0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()));
        let conv = conv_attention(&mut g, xv, xv, eye, eye, &params, &mask, &mut c).unwrap();
        identity_dev = identity_dev.max(max_diff(&to_mat(g.value(conv.z)), &to_mat(g.value(full.z))));
    }
    let ok = worst < TOL && exact && identity_dev < TOL;
    (ok, format!("{cases} cases, max deviation {worst:.2e} (< {TOL:e}); wide local == full: {exact}; identity conv deviation {identity_dev:.2e}"))
}

// ---------------------------------------------------------------- A2

const MIXES: &[&str] = &[
    "4 full",
    "4 local",
    "4 conv",
    "2 local 2 conv",
    "1 local 3 conv",
    "3 local 1 conv",
];

fn random_specs(r: &mut rand_chacha::ChaCha8Rng, mix: &str) -> Vec<HeadSpec> {
    let window = 2 * r.random_range(1..=8);
    let (kernel, stride) = (2 * r.random_range(0..=3) + 1, r.random_range(1..=4));
    let parts: Vec<&str> = mix.split(' ').collect();
    let mut specs = Vec::new();
    for pair in parts.chunks(2) {
        let count: usize = pair[0].parse().unwrap();
        let spec = match pair[1] {
            "full" => HeadSpec::Full,
            "local" => HeadSpec::Local { window },
            _ => HeadSpec::Conv { kernel, stride },
        };
        specs.extend(std::iter::repeat_n(spec, count));
    }
    specs
}

/// Largest gap between the captured output and bias plus the summed head
/// contributions, accumulated in f64.
fn recomposition_gap<F: Scalar>(specs: &[HeadSpec], d: usize, n: usize, valid: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::<F>::new();
    let w = MhmaWeights::register(&mut store, "m", d, specs, &mut rng(seed ^ 7)).unwrap();
    *store.value_mut(w.bo) = Tensor::from_fn(&[d], |_| F::from_f64_lossy(r.random_range(-1.0..1.0)));
    let x = Tensor::from_fn(&[n, d], |_| F::from_f64_lossy(r.random_range(-2.0..2.0)));
    let mask = AttentionMask::prefix(valid, n).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let out = mhma_forward(&mut g, xv, specs, &w, &mask, &mut OpCounter::new(), true).unwrap();
    let cap = out.capture.unwrap();
    let mut gap = 0.0f64;
    for i in 0..n {
        for c in 0..d {
            let sum: f64 = cap.bias.data()[c].to_f64_lossy() + cap.heads.iter().map(|h| h.xi.at(i, c).to_f64_lossy()).sum::<f64>();
            gap = gap.max((cap.y.at(i, c).to_f64_lossy() - sum).abs());
            gap = gap.max((g.value(out.y).at(i, c).to_f64_lossy() - sum).abs());
        }
    }
    gap
}

fn a2_recomposition() -> Outcome {
    let mut r = rng(2002);
    let (mut g64, mut g32) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let mix = MIXES[case % MIXES.len()];
        let specs = random_specs(&mut r, mix);
        let d = 4 * r.random_range(1..=6);
        let n = r.random_range(1..=64);
        let valid = r.random_range(1..=n);
        g64 = g64.max(recomposition_gap::<f64>(&specs, d, n, valid, case as u64));
        g32 = g32.max(recomposition_gap::<f32>(&specs, d, n, valid, case as u64));
    }
    (g64 < 1e-10 && g32 < 1e-5, format!("100 configs over {} mixes, max gap {g64:.2e} (f64, < 1e-10), {g32:.2e} (f32, < 1e-5)", MIXES.len()))
}

// ---------------------------------------------------------------- A3

fn a3_gradients() -> Outcome {
    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-4;
    // Relative errors are measured against max(|a|, |n|, FLOOR); below the
    // floor a gradient entry is numerically zero for a step of 1e-4.
    const FLOOR: f64 = 1e-6;
    let task = SyntheticTaskSpec { symbols: 4, min_len: 2, max_len: 4, redundancy: 4, feature_dim: 3, noise: 0.3, code_seed: 3 };
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0usize, 0usize);
    let mut failures = Vec::new();
    for (p, name) in PAPER_PRESETS.iter().enumerate() {
        let arch = preset(name).unwrap().tiny();
        assert_eq!(arch.d_model, 16);
        let mut model = Multiformer::<f64>::new(arch.to_model_config().unwrap(), 40 + p as u64).unwrap();
        let batch = gen_synthetic_batch::<f64>(&task, 2, &mut rng(p as u64)).unwrap();
        let eval = |m: &Multiformer<f64>| -> (f64, u64) {
            let mut g = Graph::new(m.params());
            g.set_track_kinks(true);
            let l = m.batch_loss(&mut g, &batch, 0.1).unwrap();
            (g.value(l).data()[0], g.kink_signature())
        };
        let (analytic, base) = {
            let mut g = Graph::new(model.params());
            g.set_track_kinks(true);
            let l = model.batch_loss(&mut g, &batch, 0.1).unwrap();
            (g.param_gradients(l).unwrap(), g.kink_signature())
        };
        let ids: Vec<_> = model.params().ids().collect();
        let mut r = rng(300 + p as u64);
        for id in ids {
            let numel = model.params().value(id).numel();
            let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
            let picks: Vec<usize> = if numel <= 12 { (0..numel).collect() } else { (0..12).map(|_| r.random_range(0..numel)).collect() };
            for e in picks {
                let orig = model.params().value(id).data()[e];
                model.params_mut().value_mut(id).data_mut()[e] = orig + STEP;
                let (plus, kp) = eval(&model);
                model.params_mut().value_mut(id).data_mut()[e] = orig - STEP;
                let (minus, km) = eval(&model);
                model.params_mut().value_mut(id).data_mut()[e] = orig;
                if kp != base || km != base {
                    kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * STEP);
                let rel = (grad[e] - numeric).abs() / grad[e].abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
                if rel >= TOL {
                    failures.push(format!("{name}:{}[{e}]", model.params().name(id)));
                }
            }
        }
    }
    let detail = format!(
        "{checked} entries over {} presets at d=16, max relative error {worst:.2e} (< {TOL:e}), {kinks} skipped at ReLU kinks{}",
        PAPER_PRESETS.len(),
        if failures.is_empty() { String::new() } else { format!("; failing {}", failures.join(" ")) }
    );
    (failures.is_empty() && checked > 0, detail)
}

// ---------------------------------------------------------------- A4

fn counts(n: usize, w: usize, stride: usize) -> (u64, u64, u64) {
    let dh = 4;
    let mut r = rng(n as u64);
    let mut store = ParamStore::<f64>::new();
    let weight = store.insert("w", Tensor::from_fn(&[5, dh, dh], |_| r.random_range(-0.3..0.3))).unwrap();
    let bias = store.insert("b", Tensor::zeros(&[dh])).unwrap();
    let params = ConvParams { kernel: 5, stride, weight, bias };
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_fn(&[n, dh], |_| r.random_range(-1.0..1.0)));
    let mask = AttentionMask::all(n);
    let (mut cf, mut cl, mut cc) = (OpCounter::new(), OpCounter::new(), OpCounter::new());
    full_attention(&mut g, x, x, x, &mask, &mut cf).unwrap();
    local_attention(&mut g, x, x, x, LocalParams::new(w).unwrap(), &mask, &mut cl).unwrap();
    let eye = g.constant(Tensor::from_fn(&[dh, dh], |i| if i / dh == i % dh { 1.0 } else { 0.0 }));
    conv_attention(&mut g, x, x, eye, eye, &params, &mask, &mut cc).unwrap();
    (cf.score_products, cl.score_products, cc.score_products)
}

fn a4_counts() -> Outcome {
    let (w, stride) = (64, 2);
    let mut ok = true;
    let mut detail = Vec::new();
    for n in [64usize, 256, 1024] {
        let (full, local, conv) = counts(n, w, stride);
        let nn = n as u64;
        ok &= full == nn * nn && local <= nn * (w as u64 + 1) && conv == nn * nn.div_ceil(stride as u64);
        if n == 1024 {
            let (lf, cf) = (local as f64 / full as f64, conv as f64 / full as f64);
            ok &= lf < 0.065 && cf == 0.5;
            detail.push(format!("n=1024 full {full} local {local} ({:.2}%) conv {conv} ({:.0}%)", 100.0 * lf, 100.0 * cf));
        }
    }
    (ok, format!("n in {{64, 256, 1024}}, w={w}, stride {stride}; {}", detail.join("")))
}

// ---------------------------------------------------------------- A5

const TOY: [&str; 6] = [
    "toy_baseline",
    "toy_local_attention",
    "toy_conv_attention",
    "toy_multiformer_lc",
    "toy_multiformer_v1",
    "toy_multiformer_v2",
];

const TRAIN_SEED: u64 = 1;

fn toy_trainer(name: &str, cfg: &TrainConfig, task: &SyntheticTaskSpec) -> Trainer<f32> {
    let model = Multiformer::<f32>::new(preset(name).unwrap().to_model_config().unwrap(), cfg.seed).unwrap();
    Trainer::new(model, cfg.clone(), task.clone(), Execution::Parallel).unwrap()
}

/// Trains until held-out accuracy reaches 90% or the update budget runs out.
fn train_to_target(name: &str, cfg: &TrainConfig, task: &SyntheticTaskSpec) -> (Option<u64>, f64, Multiformer<f32>) {
    let valid = held_out::<f32>(task, 200, cfg.seed, 50).unwrap();
    let mut t = toy_trainer(name, cfg, task);
    let mut acc = 0.0;
    while t.step_count() < cfg.max_updates {
        t.step().unwrap();
        if t.step_count().is_multiple_of(100) {
            acc = t.evaluate(&valid).unwrap().accuracy();
            if acc >= 0.9 {
                return (Some(t.step_count()), acc, t.into_model());
            }
        }
    }
    (None, acc, t.into_model())
}

fn deterministic(name: &str, cfg: &TrainConfig, task: &SyntheticTaskSpec) -> bool {
    let run = || {
        let mut t = toy_trainer(name, cfg, task);
        let losses: Vec<u64> = (0..5).map(|_| t.step().unwrap().loss.to_bits()).collect();
        let params: Vec<u32> = t.model().params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (losses, params)
    };
    run() == run()
}

fn a5_training(trained_lc: &mut Option<Multiformer<f32>>) -> Outcome {
    let tf = TaskFile::parse_str(TOY_TASK, "toy task").unwrap();
    let cfg = TrainConfig { seed: TRAIN_SEED, ..tf.train.clone() };
    let mut ok = true;
    let mut parts = Vec::new();
    for name in TOY {
        let started = Instant::now();
        let (reached, acc, model) = train_to_target(name, &cfg, &tf.task);
        let det = deterministic(name, &cfg, &tf.task);
        ok &= reached.is_some() && det;
        let short = name.trim_start_matches("toy_");
        parts.push(match reached {
            Some(s) => format!("{short} {acc:.3}@{s}"),
            None => format!("{short} only {acc:.3} after {}", cfg.max_updates),
        });
        if !det {
            parts.push(format!("{short} NOT deterministic"));
        }
        let _ = writeln!(std::io::stderr(), "   {name}: {} in {:.0}s", parts.last().unwrap(), started.elapsed().as_secs_f64());
        if name == "toy_multiformer_lc" {
            *trained_lc = Some(model);
        }
    }
    (ok, format!("held-out token accuracy >= 0.9 within {} updates, seeded reruns identical: {}", cfg.max_updates, parts.join(", ")))
}

// ---------------------------------------------------------------- A6

fn a6_analysis(trained: Option<&Multiformer<f32>>, dir: &Path) -> Outcome {
    let Some(model) = trained else {
        return (false, "no trained multiformer_lc available".into());
    };
    let task = TaskFile::parse_str(TOY_TASK, "toy task").unwrap().task;
    let ckpt = dir.join("lc.mfc");
    save_checkpoint(model, &ckpt, &[("task", task.to_inline())]).unwrap();
    let run = |tag: &str| -> Result<(String, Vec<u8>), String> {
        let (csv, svg) = (dir.join(format!("{tag}.csv")), dir.join(format!("{tag}.svg")));
        let out = Command::new(env!("CARGO_BIN_EXE_mf"))
            .args(["analyze", "--ckpt"])
            .arg(&ckpt)
            .args(["--arch", "toy_multiformer_lc", "--samples", "500", "--seed", "7", "--csv"])
            .arg(&csv)
            .arg("--svg")
            .arg(&svg)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok((std::fs::read_to_string(csv).unwrap(), std::fs::read(svg).unwrap()))
    };
    let (csv1, svg1) = match run("a") {
        Ok(v) => v,
        Err(e) => return (false, format!("mf analyze failed: {e}")),
    };
    let (csv2, svg2) = run("b").unwrap_or_default();
    let expected = preset("toy_multiformer_lc").unwrap().to_model_config().unwrap().encoder_layers;
    let (layers, heads) = (expected.len(), expected[0].len());
    let mut rows = vec![vec![None; heads]; layers];
    let mut labels_ok = true;
    let mut min_median = f64::INFINITY;
    for line in csv1.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (l, h): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let label = f[2..f.len() - 2].join(",").trim_matches('"').to_string();
        labels_ok &= label.parse::<HeadSpec>().ok() == Some(expected[l - 1][h - 1]);
        let median: f64 = f[f.len() - 2].parse().unwrap();
        min_median = min_median.min(median);
        rows[l - 1][h - 1] = Some(f[f.len() - 1].parse::<f64>().unwrap());
    }
    let complete = rows.iter().flatten().all(Option::is_some) && csv1.lines().count() == 1 + layers * heads;
    let row_err = rows
        .iter()
        .map(|r| (r.iter().flatten().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let identical = csv1 == csv2 && svg1 == svg2;
    let ok = complete && labels_ok && min_median >= 0.0 && row_err <= 1e-9 && identical;
    (
        ok,
        format!("{layers}x{heads} report, min median {min_median:.3e}, max |row sum - 1| {row_err:.1e}, labels match: {labels_ok}, reruns identical: {identical}"),
    )
}

// ---------------------------------------------------------------- A7

fn a7_recipe() -> Outcome {
    let cfg = TrainConfig { peak_lr: 2e-3, warmup_updates: 10_000, ..TrainConfig::default() };
    let lr = |t| inv_sqrt_lr(t, &cfg).unwrap();
    let (l1, l2, l3) = (lr(10_000), lr(2_500), lr(40_000));
    let lr_ok = l1 == 2e-3 && (l2 - 5e-4).abs() < 1e-15 && (l3 - 1e-3).abs() < 1e-15;

    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let logits = g.constant(Tensor::from_rows(&[vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]]));
    let l = g.smoothed_cross_entropy(logits, &[0], &[true], 0.1, 1.0).unwrap();
    let ce = g.value(l).data()[0];
    let ce_ok = (ce - 0.4631).abs() <= 1e-3;

    let arch = preset("toy_multiformer_v1").unwrap().to_model_config().unwrap();
    let a = Checkpoint::from_model(&Multiformer::<f32>::new(arch.clone(), 1).unwrap());
    let b = Checkpoint::from_model(&Multiformer::<f32>::new(arch, 2).unwrap());
    let avg = average(&[a.clone(), b.clone()]).unwrap();
    let mut mismatches = 0usize;
    for ((pa, pb), pm) in a.params.iter().zip(&b.params).zip(&avg.params) {
        for ((x, y), m) in pa.values.iter().zip(&pb.values).zip(&pm.values) {
            let mean = ((*x as f64 + *y as f64) * 0.5) as f32;
            mismatches += usize::from(mean.to_bits() != m.to_bits());
        }
    }
    (
        lr_ok && ce_ok && mismatches == 0,
        format!("lr(10000)={l1:e} lr(2500)={l2:e} lr(40000)={l3:e}; smoothed CE {ce:.5} (0.4631 +/- 1e-3); averaged {} values, {mismatches} off the f32 mean", avg.params.iter().map(|p| p.values.len()).sum::<usize>()),
    )
}

// ---------------------------------------------------------------- A8

fn a8_formats(dir: &Path) -> Outcome {
    let mut structure_ok = true;
    let mut bad = Vec::new();
    for name in PAPER_PRESETS {
        let layers = preset(name).unwrap().to_model_config().unwrap().encoder_layers;
        if layers != expected_layers(name) {
            structure_ok = false;
            bad.push(name);
        }
    }
    let mut bytes_ok = true;
    let mut r = rng(8008);
    for name in TOY {
        let cfg = preset(name).unwrap().to_model_config().unwrap();
        let seed = *[1u64, 2, 3].choose(&mut r).unwrap();
        let model = Multiformer::<f32>::new(cfg.clone(), seed).unwrap();
        let (p1, p2) = (dir.join(format!("{name}.1.mfc")), dir.join(format!("{name}.2.mfc")));
        save_checkpoint(&model, &p1, &[("step", "0".into())]).unwrap();
        let mut fresh = Multiformer::<f32>::new(cfg, seed + 100).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.apply(&mut fresh).unwrap();
        save_checkpoint(&fresh, &p2, &[("step", "0".into())]).unwrap();
        bytes_ok &= std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    }
    (
        structure_ok && bytes_ok,
        format!("{} presets match the published layer/head structure{}; save/load/save byte-identical for {} models: {bytes_ok}", PAPER_PRESETS.len(), if bad.is_empty() { String::new() } else { format!(" except {bad:?}") }, TOY.len()),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |id: &'static str, what: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, what, t, &o);
        results.push((id, o.0));
    };
    record("A1", "attention matches loop oracles", &mut a1_oracles);
    record("A2", "head decomposition recomposes the output", &mut a2_recomposition);
    record("A3", "end-to-end gradients match finite differences", &mut a3_gradients);
    record("A4", "score-product count law", &mut a4_counts);
    let mut lc = None;
    record("A5", "toy configurations learn the synthetic task", &mut || a5_training(&mut lc));
    record("A6", "analysis report", &mut || a6_analysis(lc.as_ref(), dir.path()));
    record("A7", "schedule, smoothing and averaging arithmetic", &mut a7_recipe);
    record("A8", "preset structures and checkpoint round trip", &mut || a8_formats(dir.path()));
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
