//! The full encoder-decoder.
//!
//! Source features pass through two strided convolutions (length / 4),
//! get sinusoidal positions, and run through encoder layers whose
//! self-attention is a multi-head multi-attention block configured per
//! layer. The decoder is a standard post-norm transformer decoder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionMask, OpCounter};
use crate::error::{Error, Result};
use crate::init;
use crate::mhma::{mhma_forward, vanilla_attention, AttentionOutput, HeadSpec, MhmaWeights};
use crate::par::{self, Execution};
use crate::tensor::{conv_out_len, Graph, ParamGradients, ParamId, ParamStore, Scalar, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved token ids before the first real symbol.
pub const NUM_SPECIAL: usize = 3;

pub const SUBSAMPLE_KERNEL: usize = 5;
pub const SUBSAMPLE_STRIDE: usize = 2;
pub const SUBSAMPLE_PADDING: usize = SUBSAMPLE_KERNEL / 2;

/// Head specs of one encoder layer.
pub type LayerConfig = Vec<HeadSpec>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: Vec<LayerConfig>,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub input_feature_dim: usize,
    pub dropout: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.encoder_layers.is_empty() {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        for (i, layer) in self.encoder_layers.iter().enumerate() {
            if layer.len() != self.heads {
                return Err(Error::Config(format!(
                    "encoder layer {} lists {} head specs, expected {}",
                    i + 1,
                    layer.len(),
                    self.heads
                )));
            }
            for h in layer {
                h.validate()?;
            }
        }
        if self.vocab_size <= NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for symbols after {NUM_SPECIAL} reserved ids",
                self.vocab_size
            )));
        }
        if self.ffn_dim == 0 || self.input_feature_dim == 0 || self.d_model == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Stable textual description of everything that determines parameter
    /// shapes and forward semantics.
    pub fn canonical(&self) -> String {
        let layers: Vec<String> = self
            .encoder_layers
            .iter()
            .map(|l| l.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        format!(
            "d_model={};heads={};ffn_dim={};vocab_size={};feature_dim={};decoder_layers={};encoder=[{}]",
            self.d_model,
            self.heads,
            self.ffn_dim,
            self.vocab_size,
            self.input_feature_dim,
            self.decoder_layers,
            layers.join("|")
        )
    }

    /// First 16 bytes of the SHA-256 of [`ModelConfig::canonical`], hex encoded.
    pub fn architecture_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..16])
    }
}

/// Encoder length after the two-convolution subsampler.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(SUBSAMPLE_STRIDE).div_ceil(SUBSAMPLE_STRIDE)
}

/// Fixed sinusoidal position table `[n, d]`: even columns `sin`, odd `cos`.
pub fn sinusoidal_positions<F: Scalar>(n: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[n, d], |idx| {
        let pos = (idx / d) as f64;
        let c = idx % d;
        let i = (c / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * i / d as f64);
        F::from_f64_lossy(if c.is_multiple_of(2) { angle.sin() } else { angle.cos() })
    })
}

/// Padded batch of source feature sequences and target token sequences.
///
/// Targets include the `BOS`/`EOS` sentinels and are padded with `PAD`.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqBatch<F: Scalar> {
    /// `[B, T, F]`
    pub source_features: Tensor<F>,
    pub source_mask: Vec<AttentionMask>,
    pub target_tokens: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

/// One unpadded example taken from a batch.
#[derive(Debug, Clone)]
pub struct Example<F: Scalar> {
    pub features: Tensor<F>,
    pub source_mask: AttentionMask,
    pub tokens: Vec<usize>,
}

impl<F: Scalar> Seq2SeqBatch<F> {
    /// Pads examples to a common length. Each example's features are `[T_b, F]`.
    pub fn from_examples(examples: &[(Tensor<F>, Vec<usize>)]) -> Result<Self> {
        let b = examples.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let f = examples[0].0.cols();
        let t = examples.iter().map(|(x, _)| x.rows()).max().unwrap_or(0);
        let u = examples.iter().map(|(_, y)| y.len()).max().unwrap_or(0);
        let mut feats = Tensor::zeros(&[b, t, f]);
        let mut source_mask = Vec::with_capacity(b);
        let mut target_tokens = Vec::with_capacity(b);
        let mut target_mask = Vec::with_capacity(b);
        for (i, (x, y)) in examples.iter().enumerate() {
            let (rows, cols) = x.dims2()?;
            if cols != f {
                return Err(Error::Shape(format!("feature width {cols} vs {f}")));
            }
            feats.data_mut()[i * t * f..i * t * f + rows * f].copy_from_slice(x.data());
            source_mask.push(AttentionMask::prefix(rows, t)?);
            let mut tokens = y.clone();
            tokens.resize(u, PAD);
            target_tokens.push(tokens);
            target_mask.push((0..u).map(|j| j < y.len()).collect());
        }
        Ok(Seq2SeqBatch {
            source_features: feats,
            source_mask,
            target_tokens,
            target_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.source_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_mask.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_features.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.source_features.shape()[2]
    }

    /// Padded `[T, F]` features of example `b` with its mask.
    pub fn padded_source(&self, b: usize) -> (Tensor<F>, AttentionMask) {
        let (t, f) = (self.source_len(), self.feature_dim());
        let data = self.source_features.data()[b * t * f..(b + 1) * t * f].to_vec();
        (Tensor::new(vec![t, f], data).expect("batch slice"), self.source_mask[b].clone())
    }

    /// Example `b` with trailing source and target padding removed.
    pub fn example(&self, b: usize) -> Example<F> {
        let (x, mask) = self.padded_source(b);
        let valid = mask.valid().iter().rposition(|v| *v).map_or(0, |i| i + 1);
        let features = x.slice_rows(0, valid).expect("valid prefix");
        let tokens = self.target_tokens[b]
            .iter()
            .zip(&self.target_mask[b])
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .collect();
        Example {
            features,
            source_mask: AttentionMask::all(valid),
            tokens,
        }
    }

    /// Number of predicted target positions (all but the leading `BOS`).
    pub fn target_positions(&self) -> usize {
        self.target_mask
            .iter()
            .map(|m| m.iter().filter(|v| **v).count().saturating_sub(1))
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            w: store.insert(format!("{name}.weight"), init::linear(rng, din, dout))?,
            b: store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?,
        })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[d], F::one()))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MhmaWeights,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MhmaWeights,
    norm1: Norm,
    cross_attn: MhmaWeights,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    norm3: Norm,
}

/// Pointwise nonlinearity used by the subsampler and the feed-forward blocks.
fn activation<F: Scalar>(g: &mut Graph<'_, F>, x: Var) -> Var {
    g.relu(x)
}

/// Optional dropout source for training-mode forward passes.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn dropout<F: Scalar>(g: &mut Graph<'_, F>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = drop.as_mut() else { return Ok(x) };
    if d.p <= 0.0 {
        return Ok(x);
    }
    let keep = F::from_f64_lossy(1.0 / (1.0 - d.p));
    let n = g.value(x).numel();
    let mask = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.p { F::zero() } else { keep })
        .collect();
    g.mul_const(x, mask)
}

/// Encoder output for one example.
pub struct EncoderRun<F: Scalar> {
    /// `[T', d]`
    pub states: Var,
    pub mask: AttentionMask,
    /// One entry per encoder layer when capture is enabled.
    pub captures: Vec<AttentionOutput<F>>,
}

/// Loss and teacher-forced accuracy counts for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Mean label-smoothed loss per predicted token.
    pub loss: f64,
    pub correct: usize,
    pub tokens: usize,
}

impl LossStats {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

/// Model parameters plus the structure needed to run them.
#[derive(Debug, Clone)]
pub struct Multiformer<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    sub1: Conv,
    sub2: Conv,
    encoder: Vec<EncoderLayer>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

impl<F: Scalar> Multiformer<F> {
    /// Builds a model with seeded Glorot-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let k = SUBSAMPLE_KERNEL;
        let sub1 = Conv {
            w: store.insert("encoder.subsample.conv1.weight", init::conv(&mut rng, k, config.input_feature_dim, d))?,
            b: store.insert("encoder.subsample.conv1.bias", Tensor::zeros(&[d]))?,
        };
        let sub2 = Conv {
            w: store.insert("encoder.subsample.conv2.weight", init::conv(&mut rng, k, d, d))?,
            b: store.insert("encoder.subsample.conv2.bias", Tensor::zeros(&[d]))?,
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers.len());
        for (i, specs) in config.encoder_layers.iter().enumerate() {
            let p = format!("encoder.layer{i:02}");
            encoder.push(EncoderLayer {
                attn: MhmaWeights::register(&mut store, &format!("{p}.attn"), d, specs, &mut rng)?,
                norm1: Norm::register(&mut store, &format!("{p}.norm1"), d)?,
                ff1: Linear::register(&mut store, &format!("{p}.ffn.fc1"), d, config.ffn_dim, &mut rng)?,
                ff2: Linear::register(&mut store, &format!("{p}.ffn.fc2"), config.ffn_dim, d, &mut rng)?,
                norm2: Norm::register(&mut store, &format!("{p}.norm2"), d)?,
            });
        }
        let embed = store.insert("decoder.embed", init::linear(&mut rng, config.vocab_size, d))?;
        let full = vec![HeadSpec::Full; config.heads];
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for i in 0..config.decoder_layers {
            let p = format!("decoder.layer{i:02}");
            decoder.push(DecoderLayer {
                self_attn: MhmaWeights::register(&mut store, &format!("{p}.self_attn"), d, &full, &mut rng)?,
                norm1: Norm::register(&mut store, &format!("{p}.norm1"), d)?,
                cross_attn: MhmaWeights::register(&mut store, &format!("{p}.cross_attn"), d, &full, &mut rng)?,
                norm2: Norm::register(&mut store, &format!("{p}.norm2"), d)?,
                ff1: Linear::register(&mut store, &format!("{p}.ffn.fc1"), d, config.ffn_dim, &mut rng)?,
                ff2: Linear::register(&mut store, &format!("{p}.ffn.fc2"), config.ffn_dim, d, &mut rng)?,
                norm3: Norm::register(&mut store, &format!("{p}.norm3"), d)?,
            });
        }
        let output = Linear::register(&mut store, "decoder.output", d, config.vocab_size, &mut rng)?;
        Ok(Multiformer {
            config,
            params: store,
            sub1,
            sub2,
            encoder,
            embed,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Same structure in another precision.
    pub fn cast<G: Scalar>(&self) -> Multiformer<G> {
        Multiformer {
            config: self.config.clone(),
            params: self.params.cast(),
            sub1: self.sub1,
            sub2: self.sub2,
            encoder: self.encoder.clone(),
            embed: self.embed,
            decoder: self.decoder.clone(),
            output: self.output,
        }
    }

    /// Parameter ids of the encoder attention block of `layer`.
    pub fn encoder_attention(&self, layer: usize) -> &MhmaWeights {
        &self.encoder[layer].attn
    }

    fn check_features(&self, x: &Tensor<F>) -> Result<()> {
        let (_, f) = x.dims2()?;
        if f != self.config.input_feature_dim {
            return Err(Error::Shape(format!(
                "feature width {f}, model expects {}",
                self.config.input_feature_dim
            )));
        }
        Ok(())
    }

    /// Two strided convolutions (kernel 5, stride 2, padding 2), each
    /// followed by the activation; padded frames are zeroed after each step.
    pub fn subsample(&self, g: &mut Graph<'_, F>, x: Var, mask: &AttentionMask) -> Result<(Var, AttentionMask)> {
        let mut h = g.mask_rows(x, mask.valid())?;
        let mut mask = mask.clone();
        for conv in [self.sub1, self.sub2] {
            let w = g.param(conv.w);
            let b = g.param(conv.b);
            let t = g.value(h).rows();
            let y = g.conv1d(h, w, b, SUBSAMPLE_STRIDE, SUBSAMPLE_PADDING)?;
            let y = activation(g, y);
            let t_out = conv_out_len(t, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE, SUBSAMPLE_PADDING)?;
            mask = mask.downsample(SUBSAMPLE_STRIDE, t_out);
            h = g.mask_rows(y, mask.valid())?;
        }
        Ok((h, mask))
    }

    /// Encoder over one `[T, F]` feature sequence.
    pub fn encode_example(
        &self,
        g: &mut Graph<'_, F>,
        features: Var,
        mask: &AttentionMask,
        capture: bool,
        counter: &mut OpCounter,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<EncoderRun<F>> {
        if mask.len() != g.value(features).rows() {
            return Err(Error::Shape(format!(
                "source mask of {} for {} frames",
                mask.len(),
                g.value(features).rows()
            )));
        }
        let (x, mask) = self.subsample(g, features, mask)?;
        let n = g.value(x).rows();
        let pos = g.constant(sinusoidal_positions(n, self.config.d_model));
        let mut x = g.add(x, pos)?;
        x = dropout(g, x, drop)?;
        let mut captures = Vec::new();
        for (layer, specs) in self.encoder.iter().zip(&self.config.encoder_layers) {
            let out = mhma_forward(g, x, specs, &layer.attn, &mask, counter, capture)?;
            if let Some(c) = out.capture {
                captures.push(c);
            }
            let a = dropout(g, out.y, drop)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, r)?;
            let h = layer.ff1.forward(g, x)?;
            let h = activation(g, h);
            let h = layer.ff2.forward(g, h)?;
            let h = dropout(g, h, drop)?;
            let r = g.add(x, h)?;
            x = layer.norm2.forward(g, r)?;
        }
        Ok(EncoderRun { states: x, mask, captures })
    }

    /// Decoder logits `[U, V]` for input tokens `inputs` (starting with `BOS`).
    pub fn decode_example(
        &self,
        g: &mut Graph<'_, F>,
        encoder: &EncoderRun<F>,
        inputs: &[usize],
        counter: &mut OpCounter,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let u = inputs.len();
        if u == 0 {
            return Err(Error::InvalidArgument("empty decoder input".into()));
        }
        let table = g.param(self.embed);
        let e = g.embedding(table, inputs)?;
        let pos = g.constant(sinusoidal_positions(u, self.config.d_model));
        let mut x = g.add(e, pos)?;
        x = dropout(g, x, drop)?;
        let self_mask = AttentionMask::all(u);
        for layer in &self.decoder {
            let a = vanilla_attention(g, x, x, &layer.self_attn, &self_mask, true, counter)?;
            let a = dropout(g, a, drop)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, r)?;
            let c = vanilla_attention(g, x, encoder.states, &layer.cross_attn, &encoder.mask, false, counter)?;
            let c = dropout(g, c, drop)?;
            let r = g.add(x, c)?;
            x = layer.norm2.forward(g, r)?;
            let h = layer.ff1.forward(g, x)?;
            let h = activation(g, h);
            let h = layer.ff2.forward(g, h)?;
            let h = dropout(g, h, drop)?;
            let r = g.add(x, h)?;
            x = layer.norm3.forward(g, r)?;
        }
        self.output.forward(g, x)
    }

    /// Adds the label-smoothed loss of one example to the graph, scaled by
    /// `1 / norm`. Returns the loss node and the number of correct argmax
    /// predictions.
    pub fn example_loss(
        &self,
        g: &mut Graph<'_, F>,
        example: &Example<F>,
        smoothing: f64,
        norm: f64,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, usize)> {
        self.check_features(&example.features)?;
        if example.tokens.len() < 2 {
            return Err(Error::InvalidArgument(
                "target sequence is empty: need at least BOS and one predicted token".into(),
            ));
        }
        let mut counter = OpCounter::new();
        let x = g.constant(example.features.clone());
        let enc = self.encode_example(g, x, &example.source_mask, false, &mut counter, drop)?;
        let inputs = &example.tokens[..example.tokens.len() - 1];
        let targets = &example.tokens[1..];
        let logits = self.decode_example(g, &enc, inputs, &mut counter, drop)?;
        let include = vec![true; targets.len()];
        let loss = g.smoothed_cross_entropy(
            logits,
            targets,
            &include,
            F::from_f64_lossy(smoothing),
            F::from_f64_lossy(norm),
        )?;
        let correct = count_correct(g.value(logits), targets);
        Ok((loss, correct))
    }

    /// Whole-batch loss on one graph (mean over predicted tokens).
    pub fn batch_loss(&self, g: &mut Graph<'_, F>, batch: &Seq2SeqBatch<F>, smoothing: f64) -> Result<Var> {
        let norm = batch.target_positions() as f64;
        if norm == 0.0 {
            return Err(Error::InvalidArgument("batch has no target tokens".into()));
        }
        let mut total: Option<Var> = None;
        let mut none = None;
        for b in 0..batch.len() {
            let (l, _) = self.example_loss(g, &batch.example(b), smoothing, norm, &mut none)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty batch"))
    }

    /// Label-smoothed loss and teacher-forced accuracy without gradients.
    pub fn forward_loss(&self, batch: &Seq2SeqBatch<F>, smoothing: f64, exec: Execution) -> Result<LossStats> {
        let norm = batch.target_positions();
        if norm == 0 {
            return Err(Error::InvalidArgument("batch has no target tokens".into()));
        }
        let per: Vec<Result<(f64, usize)>> = par::map(exec, 0..batch.len(), |b| {
            let mut g = Graph::new(&self.params);
            let (l, c) = self.example_loss(&mut g, &batch.example(b), smoothing, norm as f64, &mut None)?;
            Ok((g.value(l).data()[0].to_f64_lossy(), c))
        });
        let mut stats = LossStats { loss: 0.0, correct: 0, tokens: norm };
        for r in per {
            let (l, c) = r?;
            stats.loss += l;
            stats.correct += c;
        }
        Ok(stats)
    }

    /// Loss, accuracy and summed parameter gradients for a batch. Examples
    /// run on separate graphs (in parallel when `exec` allows) and their
    /// gradients are reduced in example order, so the result does not depend
    /// on scheduling.
    pub fn loss_and_gradients(
        &self,
        batch: &Seq2SeqBatch<F>,
        smoothing: f64,
        exec: Execution,
        dropout_seed: Option<u64>,
    ) -> Result<(LossStats, Vec<ParamGradients<F>>)> {
        let norm = batch.target_positions();
        if norm == 0 {
            return Err(Error::InvalidArgument("batch has no target tokens".into()));
        }
        let p = self.config.dropout;
        let per: Vec<Result<(f64, usize, ParamGradients<F>)>> = par::map(exec, 0..batch.len(), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0) ^ ((b as u64) << 32));
            let mut drop = match dropout_seed {
                Some(_) if p > 0.0 => Some(Dropout { p, rng: &mut rng }),
                _ => None,
            };
            let mut g = Graph::new(&self.params);
            let (l, c) = self.example_loss(&mut g, &batch.example(b), smoothing, norm as f64, &mut drop)?;
            let grads = g.param_gradients(l)?;
            Ok((g.value(l).data()[0].to_f64_lossy(), c, grads))
        });
        let mut stats = LossStats { loss: 0.0, correct: 0, tokens: norm };
        let mut grads = Vec::with_capacity(per.len());
        for r in per {
            let (l, c, gr) = r?;
            stats.loss += l;
            stats.correct += c;
            grads.push(gr);
        }
        Ok((stats, grads))
    }

    /// Encoder states `[B, T', d]` for a batch, plus per-example, per-layer
    /// captures when requested.
    pub fn encode(
        &self,
        batch: &Seq2SeqBatch<F>,
        capture: bool,
        exec: Execution,
    ) -> Result<(Tensor<F>, Vec<Vec<AttentionOutput<F>>>)> {
        let t = subsampled_len(batch.source_len());
        let d = self.config.d_model;
        let per: Vec<Result<(Tensor<F>, Vec<AttentionOutput<F>>)>> = par::map(exec, 0..batch.len(), |b| {
            let (x, mask) = batch.padded_source(b);
            self.check_features(&x)?;
            let mut g = Graph::new(&self.params);
            let xv = g.constant(x);
            let run = self.encode_example(&mut g, xv, &mask, capture, &mut OpCounter::new(), &mut None)?;
            Ok((g.value(run.states).clone(), run.captures))
        });
        let mut out = Tensor::zeros(&[batch.len(), t, d]);
        let mut caps = Vec::with_capacity(batch.len());
        for (b, r) in per.into_iter().enumerate() {
            let (states, c) = r?;
            out.data_mut()[b * t * d..(b + 1) * t * d].copy_from_slice(states.data());
            caps.push(c);
        }
        Ok((out, caps))
    }
}

fn count_correct<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(r, t)| {
            let row = logits.row(*r);
            let best = row
                .iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |acc, (k, v)| if *v > acc.1 { (k, *v) } else { acc });
            best.0 == **t
        })
        .count()
}
