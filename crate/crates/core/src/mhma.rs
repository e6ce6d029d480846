//! Multi-head multi-attention: every head picks its own mechanism.
//!
//! Heads project the layer input with their own query/key/value matrices,
//! run full, local or compressed attention, and the concatenated head
//! outputs go through a shared output projection. When capture is enabled
//! the forward pass also keeps, per head, the attention weights, the head
//! output `z^h` and its projected share `ξ^h = z^h · Wo^h` of the layer
//! output, so that `y = Σ_h ξ^h + b_o` can be checked and analysed.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    compressed_attention, conv_compress, dense_attention, full_attention, local_attention,
    score_mask, AttentionMask, AttentionWeights, Compressed, ConvParams, LocalParams, OpCounter,
};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Attention mechanism of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadSpec {
    Full,
    Local { window: usize },
    Conv { kernel: usize, stride: usize },
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadSpec::Full => Ok(()),
            HeadSpec::Local { window } => LocalParams::new(window).map(|_| ()),
            HeadSpec::Conv { kernel, stride } => ConvParams::validate(kernel, stride),
        }
    }

    /// Short mechanism label: `full`, `local` or `conv`.
    pub fn mechanism(&self) -> &'static str {
        match self {
            HeadSpec::Full => "full",
            HeadSpec::Local { .. } => "local",
            HeadSpec::Conv { .. } => "conv",
        }
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadSpec::Full => write!(f, "full"),
            HeadSpec::Local { window } => write!(f, "local({window})"),
            HeadSpec::Conv { kernel, stride } => write!(f, "conv({kernel},{stride})"),
        }
    }
}

impl FromStr for HeadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let lower = compact.to_ascii_lowercase();
        let (tag, args) = match lower.split_once('(') {
            Some((tag, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("unbalanced parentheses in head spec `{s}`")))?;
                (tag.to_string(), Some(inner.to_string()))
            }
            None => (lower.clone(), None),
        };
        let nums = |args: &Option<String>, want: usize| -> Result<Vec<usize>> {
            let a = args
                .as_deref()
                .ok_or_else(|| Error::Config(format!("head spec `{s}` needs {want} argument(s)")))?;
            let v = a
                .split(',')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("non-integer argument in head spec `{s}`")))?;
            if v.len() != want {
                return Err(Error::Config(format!("head spec `{s}` needs {want} argument(s)")));
            }
            Ok(v)
        };
        let spec = match tag.as_str() {
            "full" if args.is_none() => HeadSpec::Full,
            "full" => return Err(Error::Config(format!("`full` takes no arguments (got `{s}`)"))),
            "local" => HeadSpec::Local { window: nums(&args, 1)?[0] },
            "conv" => {
                let v = nums(&args, 2)?;
                HeadSpec::Conv { kernel: v[0], stride: v[1] }
            }
            other => return Err(Error::Config(format!("unknown attention mechanism `{other}`"))),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

impl TryFrom<String> for HeadSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadSpec> for String {
    fn from(h: HeadSpec) -> String {
        h.to_string()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    /// `[d, d_h]`
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Parameters of one multi-head attention block.
///
/// `wo` is stored as `[H·d_h, d]` (input-major), so the block belonging to
/// head `h` is the row range `[h·d_h, (h+1)·d_h)`.
#[derive(Debug, Clone)]
pub struct MhmaWeights {
    pub d_model: usize,
    pub heads: Vec<HeadWeights>,
    pub wo: ParamId,
    pub bo: ParamId,
    /// One compression convolution per distinct `(kernel, stride)`.
    pub convs: Vec<ConvParams>,
}

impl MhmaWeights {
    /// Registers the parameters for `specs` under `prefix` in `store`.
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_model: usize,
        specs: &[HeadSpec],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = specs.len();
        if h == 0 || !d_model.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "model dimension {d_model} is not divisible by {h} heads"
            )));
        }
        let dh = d_model / h;
        let mut heads = Vec::with_capacity(h);
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let p = format!("{prefix}.head{i}");
            heads.push(HeadWeights {
                wq: store.insert(format!("{p}.wq"), init::linear(rng, d_model, dh))?,
                wk: store.insert(format!("{p}.wk"), init::linear(rng, d_model, dh))?,
                wv: store.insert(format!("{p}.wv"), init::linear(rng, d_model, dh))?,
            });
        }
        let wo = store.insert(format!("{prefix}.out.weight"), init::linear(rng, h * dh, d_model))?;
        let bo = store.insert(format!("{prefix}.out.bias"), Tensor::zeros(&[d_model]))?;
        let mut convs: Vec<ConvParams> = Vec::new();
        for spec in specs {
            if let HeadSpec::Conv { kernel, stride } = *spec {
                if convs.iter().any(|c| c.kernel == kernel && c.stride == stride) {
                    continue;
                }
                let p = format!("{prefix}.compress_k{kernel}_s{stride}");
                convs.push(ConvParams {
                    kernel,
                    stride,
                    weight: store.insert(format!("{p}.weight"), init::conv(rng, kernel, d_model, d_model))?,
                    bias: store.insert(format!("{p}.bias"), Tensor::zeros(&[d_model]))?,
                });
            }
        }
        Ok(MhmaWeights {
            d_model,
            heads,
            wo,
            bo,
            convs,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.len()
    }

    fn conv(&self, kernel: usize, stride: usize) -> Result<&ConvParams> {
        self.convs
            .iter()
            .find(|c| c.kernel == kernel && c.stride == stride)
            .ok_or_else(|| Error::Config(format!("no compression weights for conv({kernel},{stride})")))
    }
}

/// Per-head values kept when capture is enabled.
#[derive(Debug, Clone)]
pub struct HeadCapture<F: Scalar> {
    pub spec: HeadSpec,
    /// `z^h`, `[n, d_h]`
    pub z: Tensor<F>,
    pub weights: AttentionWeights<Tensor<F>>,
    /// Number of keys the head attended over (`n`, or `ceil(n/χ)` for conv).
    pub keys: usize,
    /// `ξ^h = z^h · Wo^h`, `[n, d]`
    pub xi: Tensor<F>,
}

/// Layer output together with its per-head decomposition.
#[derive(Debug, Clone)]
pub struct AttentionOutput<F: Scalar> {
    pub y: Tensor<F>,
    pub bias: Tensor<F>,
    pub heads: Vec<HeadCapture<F>>,
}

pub struct MhmaOutput<F: Scalar> {
    pub y: Var,
    pub capture: Option<AttentionOutput<F>>,
}

/// Forward pass of one multi-head multi-attention block over `x: [n, d]`.
pub fn mhma_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    specs: &[HeadSpec],
    weights: &MhmaWeights,
    mask: &AttentionMask,
    counter: &mut OpCounter,
    capture: bool,
) -> Result<MhmaOutput<F>> {
    let h = weights.num_heads();
    if specs.len() != h {
        return Err(Error::Config(format!("{} head specs for {h} heads", specs.len())));
    }
    let (n, d) = g.value(x).dims2()?;
    if d != weights.d_model {
        return Err(Error::Shape(format!("input width {d}, model width {}", weights.d_model)));
    }
    let mut compressed: Vec<((usize, usize), Compressed)> = Vec::new();
    let mut zs = Vec::with_capacity(h);
    let mut attn = Vec::with_capacity(h);
    for (spec, hw) in specs.iter().zip(&weights.heads) {
        let wq = g.param(hw.wq);
        let wk = g.param(hw.wk);
        let wv = g.param(hw.wv);
        let q = g.matmul(x, wq)?;
        let (res, keys) = match *spec {
            HeadSpec::Full => {
                let k = g.matmul(x, wk)?;
                let v = g.matmul(x, wv)?;
                (full_attention(g, q, k, v, mask, counter)?, n)
            }
            HeadSpec::Local { window } => {
                let k = g.matmul(x, wk)?;
                let v = g.matmul(x, wv)?;
                let params = LocalParams::new(window)?;
                (local_attention(g, q, k, v, params, mask, counter)?, n)
            }
            HeadSpec::Conv { kernel, stride } => {
                let key = (kernel, stride);
                let idx = match compressed.iter().position(|(k, _)| *k == key) {
                    Some(i) => i,
                    None => {
                        let c = conv_compress(g, x, weights.conv(kernel, stride)?, mask)?;
                        compressed.push((key, c));
                        compressed.len() - 1
                    }
                };
                let c = &compressed[idx].1;
                let keys = c.mask.len();
                (compressed_attention(g, q, c, wk, wv, counter)?, keys)
            }
        };
        zs.push(res.z);
        attn.push((res.weights, keys));
    }
    let concat = g.concat_cols(&zs)?;
    let wo = g.param(weights.wo);
    let bo = g.param(weights.bo);
    let y = g.matmul(concat, wo)?;
    let y = g.add_row(y, bo)?;

    let capture = if capture {
        let dh = weights.head_dim();
        let wo_val = g.value(wo);
        let mut heads = Vec::with_capacity(h);
        for (i, ((z, (w, keys)), spec)) in zs.iter().zip(attn).zip(specs).enumerate() {
            let z_val = g.value(*z).clone();
            let block = wo_val.slice_rows(i * dh, (i + 1) * dh)?;
            let xi = z_val.matmul(&block)?;
            heads.push(HeadCapture {
                spec: *spec,
                z: z_val,
                weights: w.map(|v| g.value(v).clone()),
                keys,
                xi,
            });
        }
        debug_assert_eq!(g.value(y).rows(), n);
        Some(AttentionOutput {
            y: g.value(y).clone(),
            bias: g.value(bo).clone(),
            heads,
        })
    } else {
        None
    };
    Ok(MhmaOutput { y, capture })
}

/// Standard multi-head attention with every head full: queries from
/// `query_x`, keys and values from `kv_x`. Used for decoder self- and
/// cross-attention.
pub fn vanilla_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    query_x: Var,
    kv_x: Var,
    weights: &MhmaWeights,
    key_mask: &AttentionMask,
    causal: bool,
    counter: &mut OpCounter,
) -> Result<Var> {
    let n = g.value(query_x).rows();
    let mut zs = Vec::with_capacity(weights.num_heads());
    for hw in &weights.heads {
        let wq = g.param(hw.wq);
        let wk = g.param(hw.wk);
        let wv = g.param(hw.wv);
        let q = g.matmul(query_x, wq)?;
        let k = g.matmul(kv_x, wk)?;
        let v = g.matmul(kv_x, wv)?;
        let (z, _) = dense_attention(g, q, k, v, score_mask(n, key_mask, causal), counter)?;
        zs.push(z);
    }
    let concat = g.concat_cols(&zs)?;
    let wo = g.param(weights.wo);
    let bo = g.param(weights.bo);
    let y = g.matmul(concat, wo)?;
    g.add_row(y, bo)
}

/// `max_i ‖y_i − (Σ_h ξ_i^h + b_o)‖∞` for a captured forward pass.
pub fn recompose_check<F: Scalar>(out: Option<&AttentionOutput<F>>) -> Result<F> {
    let out = out.ok_or_else(|| {
        Error::InvalidArgument("recomposition needs a forward pass with capture enabled".into())
    })?;
    let (n, d) = out.y.dims2()?;
    let mut worst = F::zero();
    for i in 0..n {
        for j in 0..d {
            let mut sum = out.bias.data()[j];
            for head in &out.heads {
                sum += head.xi.at(i, j);
            }
            worst = worst.max((out.y.at(i, j) - sum).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn head_spec_text_round_trip() {
        for s in ["full", "local(64)", "conv(5,2)"] {
            let h: HeadSpec = s.parse().unwrap();
            assert_eq!(h.to_string(), s);
        }
        assert_eq!("Conv (5, 2)".parse::<HeadSpec>().unwrap(), HeadSpec::Conv { kernel: 5, stride: 2 });
    }

    #[test]
    fn head_spec_rejects_bad_input() {
        for s in ["local(63)", "conv(4,2)", "conv(5)", "full(3)", "linformer(8)", "local(x)", "local(8"] {
            assert!(s.parse::<HeadSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn conv_heads_share_one_compression() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs: Vec<HeadSpec> = ["local(64)", "local(64)", "conv(5,2)", "conv(5,2)"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let w = MhmaWeights::register(&mut store, "l", 16, &specs, &mut rng).unwrap();
        assert_eq!(w.convs.len(), 1);
        assert_eq!(w.head_dim(), 4);
    }

    #[test]
    fn recompose_requires_capture() {
        assert!(recompose_check::<f64>(None).is_err());
    }

    #[test]
    fn zeroed_head_share_shows_up_in_recomposition() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [HeadSpec::Full, HeadSpec::Local { window: 2 }, HeadSpec::Conv { kernel: 3, stride: 2 }, HeadSpec::Full];
        let w = MhmaWeights::register(&mut store, "l", 8, &specs, &mut rng).unwrap();
        let x = init::linear::<f64>(&mut rng, 6, 8);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let mut c = OpCounter::new();
        let out = mhma_forward(&mut g, xv, &specs, &w, &AttentionMask::all(6), &mut c, true).unwrap();
        let mut cap = out.capture.unwrap();
        assert!(recompose_check(Some(&cap)).unwrap() < 1e-12);
        let removed = cap.heads[1].xi.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        cap.heads[1].xi = Tensor::zeros(cap.heads[1].xi.shape());
        let dev = recompose_check(Some(&cap)).unwrap();
        assert!(dev > 0.0);
        assert!((dev - removed).abs() < 1e-12);
    }
}
