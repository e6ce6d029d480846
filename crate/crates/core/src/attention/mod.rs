//! Per-head attention mechanisms.
//!
//! Each mechanism maps projected queries, keys and values (plus a padding
//! mask) to head outputs and attention weights, and reports how many
//! query-key dot products it evaluated through an [`OpCounter`].

pub mod oracle;

use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, Graph, ParamId, Scalar, Tensor, Var};

/// Validity flags of a (possibly padded) sequence; `true` marks a real token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|v| *v) {
            return Err(Error::InvalidArgument(
                "attention mask needs at least one valid position".into(),
            ));
        }
        Ok(AttentionMask { valid })
    }

    /// All `n` positions valid.
    pub fn all(n: usize) -> Self {
        assert!(n > 0, "empty sequence");
        AttentionMask { valid: vec![true; n] }
    }

    /// First `valid` of `n` positions valid, the rest padding.
    pub fn prefix(valid: usize, n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i < valid).collect())
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mask of a strided sequence: position `j` inherits the validity of the
    /// input frame at the center of its receptive field, `min(j·stride, n-1)`.
    pub fn downsample(&self, stride: usize, out_len: usize) -> AttentionMask {
        let n = self.valid.len();
        AttentionMask {
            valid: (0..out_len).map(|j| self.valid[(j * stride).min(n - 1)]).collect(),
        }
    }
}

/// Sliding-window hyperparameter: each token sees `window / 2` neighbours on
/// each side plus itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalParams {
    window: usize,
}

impl LocalParams {
    pub fn new(window: usize) -> Result<Self> {
        if window < 2 || !window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "local attention window must be even and >= 2, got {window}"
            )));
        }
        Ok(LocalParams { window })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn half(&self) -> usize {
        self.window / 2
    }

    /// Whether query `i` may attend key `j` (ignoring padding).
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.half()
    }
}

/// Key/value compression convolution: kernel, stride (the compression
/// factor) and the parameters holding its weights `[K, d, d]` and bias `[d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn validate(kernel: usize, stride: usize) -> Result<()> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "compression kernel must be odd and >= 1, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("compression stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Compressed length `ceil(n / stride)`.
    pub fn compressed_len(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }
}

/// Number of query-key dot products evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub score_products: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, n: u64) {
        self.score_products += n;
    }
}

/// Attention weights of one head, either dense `[n, m]` or banded
/// `[n, 2·half+1]` where column `o` of row `i` refers to key `i + o - half`.
#[derive(Debug, Clone)]
pub enum AttentionWeights<T> {
    Dense(T),
    Banded { half: usize, weights: T },
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> AttentionWeights<U> {
        match self {
            AttentionWeights::Dense(t) => AttentionWeights::Dense(f(t)),
            AttentionWeights::Banded { half, weights } => AttentionWeights::Banded {
                half,
                weights: f(weights),
            },
        }
    }

    pub fn inner(&self) -> &T {
        match self {
            AttentionWeights::Dense(t) => t,
            AttentionWeights::Banded { weights, .. } => weights,
        }
    }
}

impl<F: Scalar> AttentionWeights<Tensor<F>> {
    /// Dense `[n, keys]` view.
    pub fn to_dense(&self, keys: usize) -> Tensor<F> {
        match self {
            AttentionWeights::Dense(t) => t.clone(),
            AttentionWeights::Banded { half, weights } => {
                let (n, width) = weights.dims2().expect("banded weights are a matrix");
                let mut out = Tensor::zeros(&[n, keys]);
                for i in 0..n {
                    for o in 0..width {
                        if let Some(j) = (i + o).checked_sub(*half) {
                            if j < keys {
                                out.data_mut()[i * keys + j] = weights.at(i, o);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Head output and its attention weights.
pub struct HeadResult {
    pub z: Var,
    pub weights: AttentionWeights<Var>,
}

fn check_qkv<F: Scalar>(g: &Graph<'_, F>, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize)> {
    let (n, dh) = g.value(q).dims2()?;
    let (m, dk) = g.value(k).dims2()?;
    let (mv, dv) = g.value(v).dims2()?;
    if dk != dh || dv != dh || mv != m {
        return Err(Error::Shape(format!(
            "attention inputs q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    Ok((n, m, dh))
}

fn inv_sqrt<F: Scalar>(d: usize) -> F {
    F::one() / F::from_usize(d).unwrap().sqrt()
}

/// Score mask `[n, m]` from a key mask, optionally causal (`j <= i`).
pub fn score_mask(n: usize, key_mask: &AttentionMask, causal: bool) -> Vec<bool> {
    let m = key_mask.len();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        out.extend((0..m).map(|j| key_mask.is_valid(j) && (!causal || j <= i)));
    }
    out
}

/// Dense scaled dot-product attention under an explicit `[n, m]` score mask.
/// Every one of the `n·m` scores is computed.
pub fn dense_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    allowed: Vec<bool>,
    counter: &mut OpCounter,
) -> Result<(Var, Var)> {
    let (n, m, dh) = check_qkv(g, q, k, v)?;
    if allowed.len() != n * m {
        return Err(Error::Shape(format!("score mask of {} for {n}x{m}", allowed.len())));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, inv_sqrt(dh));
    counter.add((n * m) as u64);
    let a = g.masked_softmax(scores, Some(allowed))?;
    let z = g.matmul(a, v)?;
    Ok((z, a))
}

/// Full attention: `A = softmax(QKᵀ/√d_h)` over valid keys, `Z = A·V`.
pub fn full_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    counter: &mut OpCounter,
) -> Result<HeadResult> {
    let (n, m, _) = check_qkv(g, q, k, v)?;
    if mask.len() != m {
        return Err(Error::Shape(format!("key mask of {} for {m} keys", mask.len())));
    }
    let (z, a) = dense_attention(g, q, k, v, score_mask(n, mask, false), counter)?;
    Ok(HeadResult {
        z,
        weights: AttentionWeights::Dense(a),
    })
}

/// Sliding-window self-attention. Token `i` attends valid tokens `j` with
/// `|i - j| <= window/2`; scores outside the band are never computed. A
/// padded query with no valid token in its window attends to itself.
pub fn local_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    params: LocalParams,
    mask: &AttentionMask,
    counter: &mut OpCounter,
) -> Result<HeadResult> {
    let (n, m, dh) = check_qkv(g, q, k, v)?;
    if m != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "local attention is self-attention: {n} queries, {m} keys, mask {}",
            mask.len()
        )));
    }
    let half = params.half();
    if half + 1 >= n {
        // Band covers the whole sequence: identical to dense attention.
        let mut dense_counter = OpCounter::new();
        let (z, a) = dense_attention(g, q, k, v, score_mask(n, mask, false), &mut dense_counter)?;
        counter.add((n * mask.count_valid()) as u64);
        return Ok(HeadResult {
            z,
            weights: AttentionWeights::Dense(a),
        });
    }
    let (scores, allowed, count) = g.local_scores(q, k, half, mask.valid(), inv_sqrt(dh))?;
    counter.add(count);
    let a = g.masked_softmax(scores, Some(allowed))?;
    let z = g.local_mix(a, v, half)?;
    Ok(HeadResult {
        z,
        weights: AttentionWeights::Banded { half, weights: a },
    })
}

/// Keys/values source after compression.
pub struct Compressed {
    pub x: Var,
    pub mask: AttentionMask,
}

/// Strided convolution over the sequence axis: `[n, d] -> [ceil(n/χ), d]`,
/// with the compressed mask taken from each receptive field's center frame.
/// Padded input rows are zeroed first so they cannot leak into valid outputs.
pub fn conv_compress<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    params: &ConvParams,
    mask: &AttentionMask,
) -> Result<Compressed> {
    ConvParams::validate(params.kernel, params.stride)?;
    let (n, _) = g.value(x).dims2()?;
    if mask.len() != n {
        return Err(Error::Shape(format!("mask of {} for {n} frames", mask.len())));
    }
    let xm = g.mask_rows(x, mask.valid())?;
    let w = g.param(params.weight);
    let b = g.param(params.bias);
    let xc = g.conv1d(xm, w, b, params.stride, params.padding())?;
    let m = conv_out_len(n, params.kernel, params.stride, params.padding())?;
    debug_assert_eq!(m, params.compressed_len(n));
    Ok(Compressed {
        x: xc,
        mask: mask.downsample(params.stride, m),
    })
}

/// Attention of uncompressed queries over keys and values projected from an
/// already compressed sequence.
pub fn compressed_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    compressed: &Compressed,
    key_proj: Var,
    value_proj: Var,
    counter: &mut OpCounter,
) -> Result<HeadResult> {
    let k = g.matmul(compressed.x, key_proj)?;
    let v = g.matmul(compressed.x, value_proj)?;
    full_attention(g, q, k, v, &compressed.mask, counter)
}

/// ConvAttention: compress the layer input, project keys and values from the
/// compressed sequence, attend with uncompressed queries. Output length
/// equals the query length.
#[allow(clippy::too_many_arguments)]
pub fn conv_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    q: Var,
    x: Var,
    key_proj: Var,
    value_proj: Var,
    params: &ConvParams,
    mask: &AttentionMask,
    counter: &mut OpCounter,
) -> Result<HeadResult> {
    let compressed = conv_compress(g, x, params, mask)?;
    compressed_attention(g, q, &compressed, key_proj, value_proj, counter)
}
