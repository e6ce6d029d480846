//! Optimizer, learning-rate schedule, synthetic data and the training loop.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::{LossStats, Multiformer, Seq2SeqBatch, BOS, EOS, NUM_SPECIAL};
use crate::par::Execution;
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_updates: u64,
    pub max_updates: u64,
    /// Approximate number of target tokens per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub smoothing: f64,
    /// Batches whose gradients are accumulated into one update.
    pub update_freq: usize,
    /// Save a checkpoint (and validate) every this many updates.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Held-out examples used for validation loss and accuracy.
    pub valid_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-3,
            warmup_updates: 400,
            max_updates: 5000,
            batch_tokens: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            smoothing: 0.1,
            update_freq: 1,
            checkpoint_every: 250,
            log_every: 50,
            valid_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_updates < 1 {
            return Err(Error::Config("warmup_updates must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.batch_tokens == 0 || self.update_freq == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_tokens, update_freq, log_every and checkpoint_every must be positive".into(),
            ));
        }
        if self.valid_samples == 0 {
            return Err(Error::Config("valid_samples must be positive".into()));
        }
        Ok(())
    }
}

/// `peak_lr · min(t / warmup, sqrt(warmup / t))`.
pub fn inv_sqrt_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step < 1 {
        return Err(Error::InvalidArgument("learning-rate step must be at least 1".into()));
    }
    cfg.validate()?;
    let t = step as f64;
    let w = cfg.warmup_updates as f64;
    Ok(cfg.peak_lr * (t / w).min((w / t).sqrt()))
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|n| vec![F::zero(); *n]).collect(),
            v: sizes.iter().map(|n| vec![F::zero(); *n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` using `grads`, in place.
pub fn adam_update<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam update over {} parameters with {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if step < 1 {
        return Err(Error::InvalidArgument("Adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
    let (one, e) = (F::one(), F::from_f64_lossy(eps));
    let step_size = F::from_f64_lossy(lr / c1);
    let c2_sqrt = F::from_f64_lossy(c2.sqrt());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let denom = v[i].sqrt() / c2_sqrt + e;
        params[i] -= step_size * m[i] / denom;
    }
    Ok(())
}

/// Applies one Adam step to every parameter of `store` using its stored
/// gradients.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let grad = p.grad.data().to_vec();
        adam_update(p.value.data_mut(), &grad, &mut state.m[k], &mut state.v[k], state.step, lr, beta1, beta2, eps)?;
    }
    Ok(())
}

/// Synthetic transduction task: each target symbol is rendered as
/// `redundancy` consecutive noisy copies of a fixed random code vector, so
/// several source frames describe one output token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Number of distinct symbols (token ids start after the reserved ones).
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub redundancy: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Seed of the symbol code table, shared by every split.
    #[serde(default)]
    pub code_seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.symbols < 2 {
            return Err(Error::Config("the task needs at least 2 symbols".into()));
        }
        if self.redundancy < 1 {
            return Err(Error::Config("redundancy must be at least 1".into()));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "target length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.feature_dim == 0 || !(self.noise >= 0.0) {
            return Err(Error::Config("feature_dim must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    /// Vocabulary size including the reserved tokens.
    pub fn vocab_size(&self) -> usize {
        self.symbols + NUM_SPECIAL
    }

    /// `[symbols, feature_dim]` table of standard-normal codes.
    pub fn codes(&self) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.code_seed);
        Tensor::from_fn(&[self.symbols, self.feature_dim], |_| rng.sample(StandardNormal))
    }

    /// Mean number of predicted target positions per example (symbols + EOS).
    pub fn mean_target_positions(&self) -> f64 {
        (self.min_len + self.max_len) as f64 / 2.0 + 1.0
    }

    /// Examples per batch for a token budget.
    pub fn examples_for_tokens(&self, batch_tokens: usize) -> usize {
        ((batch_tokens as f64 / self.mean_target_positions()).round() as usize).max(1)
    }
}

impl SyntheticTaskSpec {
    /// One-line form, e.g. for checkpoint metadata.
    pub fn to_inline(&self) -> String {
        format!(
            "{{ symbols = {}, min_len = {}, max_len = {}, redundancy = {}, feature_dim = {}, noise = {:?}, code_seed = {} }}",
            self.symbols, self.min_len, self.max_len, self.redundancy, self.feature_dim, self.noise, self.code_seed
        )
    }

    pub fn from_inline(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wrap {
            t: SyntheticTaskSpec,
        }
        let w: Wrap = toml::from_str(&format!("t = {s}")).map_err(|e| Error::Config(format!("task spec: {}", e.message())))?;
        w.t.validate()?;
        Ok(w.t)
    }
}

/// Draws `batch` examples. Targets are `[BOS, s_1, ..., s_k, EOS]`; the
/// source has `redundancy · k` frames.
pub fn gen_synthetic_batch<F: Scalar>(spec: &SyntheticTaskSpec, batch: usize, rng: &mut ChaCha8Rng) -> Result<Seq2SeqBatch<F>> {
    spec.validate()?;
    let codes = spec.codes();
    gen_with_codes(spec, &codes, batch, rng)
}

fn gen_with_codes<F: Scalar>(
    spec: &SyntheticTaskSpec,
    codes: &Tensor<f64>,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Seq2SeqBatch<F>> {
    let f = spec.feature_dim;
    let mut examples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.symbols)).collect();
        let frames = len * spec.redundancy;
        let mut data = Vec::with_capacity(frames * f);
        for s in &symbols {
            for _ in 0..spec.redundancy {
                for c in 0..f {
                    let noise: f64 = if spec.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    data.push(F::from_f64_lossy(codes.at(*s, c) + spec.noise * noise));
                }
            }
        }
        let mut tokens = Vec::with_capacity(len + 2);
        tokens.push(BOS);
        tokens.extend(symbols.iter().map(|s| s + NUM_SPECIAL));
        tokens.push(EOS);
        examples.push((Tensor::new(vec![frames, f], data)?, tokens));
    }
    Seq2SeqBatch::from_examples(&examples)
}

/// Held-out set drawn from a stream independent of the training stream.
pub fn held_out<F: Scalar>(spec: &SyntheticTaskSpec, samples: usize, seed: u64, batch: usize) -> Result<Vec<Seq2SeqBatch<F>>> {
    spec.validate()?;
    let codes = spec.codes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4e1d_0u64);
    let mut out = Vec::new();
    let mut left = samples;
    while left > 0 {
        let b = left.min(batch.max(1));
        out.push(gen_with_codes(spec, &codes, b, &mut rng)?);
        left -= b;
    }
    Ok(out)
}

/// Metrics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub token_acc: f64,
}

/// Stateful training loop over the synthetic task.
pub struct Trainer<F: Scalar> {
    model: Multiformer<F>,
    cfg: TrainConfig,
    task: SyntheticTaskSpec,
    codes: Tensor<f64>,
    adam: AdamState<F>,
    rng: ChaCha8Rng,
    exec: Execution,
    step: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Multiformer<F>, cfg: TrainConfig, task: SyntheticTaskSpec, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let mc = model.config();
        if mc.vocab_size < task.vocab_size() {
            return Err(Error::Config(format!(
                "model vocabulary {} is smaller than the task's {}",
                mc.vocab_size,
                task.vocab_size()
            )));
        }
        if mc.input_feature_dim != task.feature_dim {
            return Err(Error::Config(format!(
                "model expects {} features per frame, task produces {}",
                mc.input_feature_dim, task.feature_dim
            )));
        }
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            codes: task.codes(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            task,
            adam,
            exec,
            step: 0,
        })
    }

    pub fn model(&self) -> &Multiformer<F> {
        &self.model
    }

    pub fn into_model(self) -> Multiformer<F> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update (accumulating `update_freq` batches).
    pub fn step(&mut self) -> Result<StepReport> {
        let next = self.step + 1;
        let lr = inv_sqrt_lr(next, &self.cfg)?;
        let per_batch = self.task.examples_for_tokens(self.cfg.batch_tokens);
        let mut grads = Vec::new();
        let mut total = LossStats { loss: 0.0, correct: 0, tokens: 0 };
        for k in 0..self.cfg.update_freq {
            let batch = gen_with_codes::<F>(&self.task, &self.codes, per_batch, &mut self.rng)?;
            let dropout_seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (next << 8) ^ k as u64;
            let (stats, g) = self.model.loss_and_gradients(&batch, self.cfg.smoothing, self.exec, Some(dropout_seed))?;
            total.loss += stats.loss * stats.tokens as f64;
            total.correct += stats.correct;
            total.tokens += stats.tokens;
            grads.extend(g);
        }
        let loss = total.loss / total.tokens as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training diverged at update {next}: loss {loss}")));
        }
        let store = self.model.params_mut();
        store.zero_grad();
        let weight = F::from_f64_lossy(1.0 / self.cfg.update_freq as f64);
        for g in &grads {
            store.accumulate(g, weight);
        }
        adam_step(store, &mut self.adam, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)?;
        self.step = next;
        Ok(StepReport { step: next, loss, lr, token_acc: total.accuracy() })
    }

    /// Token-weighted loss and teacher-forced accuracy over `batches`.
    pub fn evaluate(&self, batches: &[Seq2SeqBatch<F>]) -> Result<LossStats> {
        evaluate(&self.model, batches, self.cfg.smoothing, self.exec)
    }
}

/// Token-weighted loss and teacher-forced accuracy of `model` over `batches`.
pub fn evaluate<F: Scalar>(model: &Multiformer<F>, batches: &[Seq2SeqBatch<F>], smoothing: f64, exec: Execution) -> Result<LossStats> {
    let mut total = LossStats { loss: 0.0, correct: 0, tokens: 0 };
    for b in batches {
        let s = model.forward_loss(b, smoothing, exec)?;
        total.loss += s.loss * s.tokens as f64;
        total.correct += s.correct;
        total.tokens += s.tokens;
    }
    if total.tokens > 0 {
        total.loss /= total.tokens as f64;
    }
    Ok(total)
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub valid: PathBuf,
    pub last: Option<StepReport>,
    pub last_valid: LossStats,
}

pub const METRICS_HEADER: &str = "step,loss,lr,token_acc";
pub const VALID_HEADER: &str = "step,valid_loss,valid_acc";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.mfc"))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn create_with_header(path: &Path, header: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))
}

/// Runs `cfg.max_updates` updates, writing `ckpt_<step>.mfc` (including the
/// initial `ckpt_0.mfc`), `metrics.csv` and `valid.csv` under `out`.
pub fn train(model: Multiformer<f32>, cfg: TrainConfig, task: SyntheticTaskSpec, out: &Path, exec: Execution) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics = out.join("metrics.csv");
    let valid_path = out.join("valid.csv");
    create_with_header(&metrics, METRICS_HEADER)?;
    create_with_header(&valid_path, VALID_HEADER)?;
    let per_batch = task.examples_for_tokens(cfg.batch_tokens);
    let valid = held_out::<f32>(&task, cfg.valid_samples, cfg.seed, per_batch)?;
    let task_line = task.to_inline();
    let mut trainer = Trainer::new(model, cfg.clone(), task, exec)?;
    let mut checkpoints = Vec::new();

    let checkpoint = |trainer: &Trainer<f32>, checkpoints: &mut Vec<PathBuf>| -> Result<LossStats> {
        let step = trainer.step_count();
        let stats = trainer.evaluate(&valid)?;
        let path = checkpoint_path(out, step);
        save_checkpoint(trainer.model(), &path, &[("step", step.to_string()), ("task", task_line.clone())])?;
        append_line(&valid_path, &format!("{step},{},{}", stats.loss, stats.accuracy()))?;
        checkpoints.push(path);
        Ok(stats)
    };

    let mut last_valid = checkpoint(&trainer, &mut checkpoints)?;
    let mut last = None;
    for _ in 0..cfg.max_updates {
        let r = trainer.step()?;
        if r.step % cfg.log_every == 0 || r.step == cfg.max_updates {
            append_line(&metrics, &format!("{},{},{},{}", r.step, r.loss, r.lr, r.token_acc))?;
        }
        if r.step % cfg.checkpoint_every == 0 || r.step == cfg.max_updates {
            last_valid = checkpoint(&trainer, &mut checkpoints)?;
        }
        last = Some(r);
    }
    Ok(TrainOutcome { checkpoints, metrics, valid: valid_path, last, last_valid })
}
