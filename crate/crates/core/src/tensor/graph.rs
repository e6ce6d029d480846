//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the backward pass.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::param::{ParamGradients, ParamId, ParamStore};
use crate::tensor::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Value<F: Scalar> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F: Scalar> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Relu(Var),
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<F> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    LocalScores { q: Var, k: Var, half: usize, allowed: Vec<bool>, scale: F },
    LocalMix { a: Var, v: Var, half: usize },
    SmoothedCrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, eps: F, norm: F, probs: Vec<F> },
}

struct Node<F: Scalar> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation tape. Parameters are read from a borrowed [`ParamStore`]
/// without copying.
pub struct Graph<'p, F: Scalar> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    track_kinks: bool,
    kinks: DefaultHasher,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`. Nodes that require gradients but do
    /// not influence the loss get zeros; constants get `None`.
    pub fn wrt(&self, v: Var) -> Option<Tensor<F>> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn accumulate_into<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<'p, F: Scalar> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track_kinks: false,
            kinks: DefaultHasher::new(),
        }
    }

    /// A graph with no parameter store; only leaves can be differentiated.
    pub fn detached() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track_kinks: false,
            kinks: DefaultHasher::new(),
        }
    }

    /// Record the activation pattern of every non-smooth op (rectifiers) so
    /// finite-difference checks can detect when a perturbation crosses a kink.
    pub fn set_track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input, never differentiated.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by the parameter store.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---------------------------------------------------------------- ops

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (k2, m) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![F::zero(); n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2(a)?;
        if self.shape(row) != [d] {
            return Err(shape_err(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, y) in data[i * d..(i + 1) * d].iter_mut().zip(r) {
                *x += *y;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant (dropout masks, row masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(shape_err(format!(
                "mul_const: {} constants for shape {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    /// Zeroes the rows of an `[n, d]` matrix where `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (n, d) = self.dims2(a)?;
        if keep.len() != n {
            return Err(shape_err(format!("mask_rows: {} flags for {n} rows", keep.len())));
        }
        if keep.iter().all(|k| *k) {
            return Ok(a);
        }
        let c = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { F::one() } else { F::zero() }, d))
            .collect();
        self.mul_const(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        if self.track_kinks {
            let words: Vec<u64> = self
                .value(a)
                .data()
                .chunks(64)
                .map(|c| c.iter().fold(0u64, |acc, x| (acc << 1) | u64::from(*x > F::zero())))
                .collect();
            for w in words {
                self.kinks.write_u64(w);
            }
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax over the last axis. Positions with `mask == false` get
    /// exactly zero probability; `mask` has one flag per element, or `None`.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mask = mask.unwrap_or_else(|| vec![true; t.numel()]);
        if mask.len() != t.numel() {
            return Err(shape_err(format!(
                "masked_softmax: mask of {} for shape {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let out = softmax_rows(t.data(), &mask, cols)?;
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskedSoftmax { x }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!("layer_norm over {d} features")));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let dn = F::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![F::zero(); n * d];
        let mut rstds = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm { x, gamma, beta, rstd: rstds },
            rg,
        ))
    }

    /// 1-D convolution over time. `x: [T, D_in]`, `w: [K, D_in, D_out]`,
    /// `b: [D_out]`, zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (t, din) = self.dims2(x)?;
        let (k, wdin, dout) = match self.shape(w) {
            &[k, i, o] => (k, i, o),
            s => return Err(shape_err(format!("conv1d weights must be [K, D_in, D_out], got {s:?}"))),
        };
        if wdin != din || self.shape(b) != [dout] {
            return Err(shape_err(format!(
                "conv1d: input {:?}, weights {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let t_out = conv_out_len(t, k, stride, padding)?;
        let cols = im2col(self.value(x).data(), t, din, k, stride, padding, t_out);
        let mut out = vec![F::zero(); t_out * dout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(bias);
        }
        gemm(t_out, k * din, dout, &cols, false, self.value(w).data(), false, &mut out, true);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![t_out, dout], out)?,
            Op::Conv1d { x, w, b, stride, padding },
            rg,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let n = self.dims2(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.dims2(*p)?;
            if r != n {
                return Err(shape_err(format!("concat_cols: {r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); n * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_cols(start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Banded attention scores: row `i`, column `o` holds
    /// `scale · q_i · k_{i+o-half}` when that key is in range and allowed by
    /// `key_valid`; other entries are never computed and come back masked.
    /// A row with no allowed key keeps its own position (`o = half`).
    ///
    /// Returns the score node, its mask, and the number of dot products
    /// evaluated.
    pub fn local_scores(
        &mut self,
        q: Var,
        k: Var,
        half: usize,
        key_valid: &[bool],
        scale: F,
    ) -> Result<(Var, Vec<bool>, u64)> {
        let (n, dh) = self.dims2(q)?;
        let (nk, dk) = self.dims2(k)?;
        if nk != n || dk != dh || key_valid.len() != n {
            return Err(shape_err(format!(
                "local_scores: q {:?}, k {:?}, mask {}",
                self.shape(q),
                self.shape(k),
                key_valid.len()
            )));
        }
        let width = 2 * half + 1;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut out = vec![F::zero(); n * width];
        let mut allowed = vec![false; n * width];
        let mut count = 0u64;
        for i in 0..n {
            let qi = &qv[i * dh..(i + 1) * dh];
            for o in 0..width {
                let Some(j) = (i + o).checked_sub(half) else { continue };
                if j >= n || !key_valid[j] {
                    continue;
                }
                let kj = &kv[j * dh..(j + 1) * dh];
                let dot = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<F>();
                out[i * width + o] = dot * scale;
                allowed[i * width + o] = true;
                count += 1;
            }
            // A padded query whose whole window is padding attends to itself.
            if !allowed[i * width..(i + 1) * width].contains(&true) {
                let ki = &kv[i * dh..(i + 1) * dh];
                out[i * width + half] = qi.iter().zip(ki).map(|(a, b)| *a * *b).sum::<F>() * scale;
                allowed[i * width + half] = true;
                count += 1;
            }
        }
        let rg = self.rg(&[q, k]);
        let var = self.push(
            Tensor::new(vec![n, width], out)?,
            Op::LocalScores { q, k, half, allowed: allowed.clone(), scale },
            rg,
        );
        Ok((var, allowed, count))
    }

    /// Weighted sum of values under banded weights: `z_i = Σ_o a[i,o] v_{i+o-half}`.
    pub fn local_mix(&mut self, a: Var, v: Var, half: usize) -> Result<Var> {
        let (n, width) = self.dims2(a)?;
        let (nv, dh) = self.dims2(v)?;
        if width != 2 * half + 1 || nv != n {
            return Err(shape_err(format!(
                "local_mix: weights {:?}, values {:?}, half {half}",
                self.shape(a),
                self.shape(v)
            )));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut out = vec![F::zero(); n * dh];
        for i in 0..n {
            let zi = &mut out[i * dh..(i + 1) * dh];
            for o in 0..width {
                let w = av[i * width + o];
                let Some(j) = (i + o).checked_sub(half) else { continue };
                if j >= n || w == F::zero() {
                    continue;
                }
                for (z, x) in zi.iter_mut().zip(&vv[j * dh..(j + 1) * dh]) {
                    *z += w * *x;
                }
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(Tensor::new(vec![n, dh], out)?, Op::LocalMix { a, v, half }, rg))
    }

    /// Label-smoothed cross entropy over rows of `logits: [U, V]`.
    ///
    /// Each included row contributes `-Σ_k q_k log p_k` with
    /// `q = (1-ε)·onehot(target) + ε/V`; the total is divided by `norm`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: &[bool],
        eps: F,
        norm: F,
    ) -> Result<Var> {
        let (u, v) = self.dims2(logits)?;
        if targets.len() != u || include.len() != u {
            return Err(shape_err(format!(
                "cross entropy: {u} rows, {} targets, {} flags",
                targets.len(),
                include.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("target {bad} outside vocabulary of {v}")));
        }
        let lv = self.value(logits).data();
        let vf = F::from_usize(v).unwrap();
        let mut probs = vec![F::zero(); u * v];
        let mut total = F::zero();
        for r in 0..u {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<F>().ln();
            for k in 0..v {
                probs[r * v + k] = (row[k] - lse).exp();
            }
            if !include[r] {
                continue;
            }
            let mean_logp = row.iter().map(|x| *x - lse).sum::<F>() / vf;
            let gold_logp = row[targets[r]] - lse;
            total += -((F::one() - eps) * gold_logp + eps * mean_logp);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                eps,
                norm,
                probs,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let grads = self.backward_impl(loss, true)?;
        Ok(Gradients {
            grads,
            shapes: (0..self.nodes.len()).map(|i| self.shape(Var(i)).to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    /// Runs the backward pass and keeps only parameter gradients.
    pub fn param_gradients(&self, loss: Var) -> Result<ParamGradients<F>> {
        let mut grads = self.backward_impl(loss, false)?;
        let mut entries: Vec<(ParamId, Vec<F>)> = self
            .param_vars
            .iter()
            .map(|(id, v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); self.value(*v).numel()]);
                (*id, g)
            })
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Ok(ParamGradients { entries })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let g = self.param_gradients(loss)?;
        store.accumulate(&g, F::one());
        Ok(())
    }

    fn backward_impl(&self, loss: Var, keep_all: bool) -> Result<Vec<Option<Vec<F>>>> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() != 0 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(Var(i), &g, &mut grads);
            let keep = keep_all || matches!(node.op, Op::Param);
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> &'a mut Vec<F> {
        let len = self.value(v).numel();
        accumulate_into(&mut grads[v.0], len)
    }

    fn propagate(&self, out: Var, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[out.0];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.value(a).dims2().unwrap();
                let m = self.value(out).cols();
                if self.wants(a) {
                    // dA = dC · op(B)ᵀ
                    let bv = self.value(b).data();
                    let da = self.slot(grads, a);
                    gemm(n, m, k, g, false, bv, !trans_b, da, true);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let db = self.slot(grads, b);
                    if trans_b {
                        // B is [m, k]: dB = dCᵀ · A
                        gemm(m, n, k, g, true, av, false, db, true);
                    } else {
                        // B is [k, m]: dB = Aᵀ · dC
                        gemm(k, n, m, av, true, g, false, db, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_assign(self.slot(grads, v), g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    add_assign(self.slot(grads, a), g);
                }
                if self.wants(row) {
                    let d = self.value(row).numel();
                    let dr = self.slot(grads, row);
                    for chunk in g.chunks(d) {
                        add_assign(dr, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let da = self.slot(grads, a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += *gi * *y;
                    }
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let db = self.slot(grads, b);
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += *gi * *x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                let da = self.slot(grads, a);
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += *gi * c;
                }
            }
            Op::MulConst(a, c) => {
                let da = self.slot(grads, *a);
                for ((d, gi), ci) in da.iter_mut().zip(g).zip(c) {
                    *d += *gi * *ci;
                }
            }
            &Op::Relu(a) => {
                let xv = self.value(a).data();
                let da = self.slot(grads, a);
                for ((d, gi), x) in da.iter_mut().zip(g).zip(xv) {
                    if *x > F::zero() {
                        *d += *gi;
                    }
                }
            }
            Op::MaskedSoftmax { x, .. } => {
                let y = self.value(out);
                let cols = y.cols();
                let yv = y.data();
                let dx = self.slot(grads, *x);
                for r in 0..yv.len() / cols.max(1) {
                    let ys = &yv[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum::<F>();
                    for j in 0..cols {
                        dx[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (n, d) = self.value(*x).dims2().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let dn = F::from_usize(d).unwrap();
                let mut xhat = vec![F::zero(); n * d];
                for i in 0..n {
                    let row = &xv[i * d..(i + 1) * d];
                    let mean = row.iter().copied().sum::<F>() / dn;
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - mean) * rstd[i];
                    }
                }
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    for chunk in g.chunks(d) {
                        add_assign(db, chunk);
                    }
                }
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for i in 0..n {
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * d + j];
                        }
                        mean_dxhat /= dn;
                        mean_dxhat_xhat /= dn;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gv[j];
                            dx[i * d + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            &Op::Conv1d { x, w, b, stride, padding } => {
                let (t, din) = self.value(x).dims2().unwrap();
                let k = self.shape(w)[0];
                let dout = self.shape(w)[2];
                let t_out = self.value(out).rows();
                if self.wants(b) {
                    let db = self.slot(grads, b);
                    for chunk in g.chunks(dout) {
                        add_assign(db, chunk);
                    }
                }
                if self.wants(w) {
                    let cols = im2col(self.value(x).data(), t, din, k, stride, padding, t_out);
                    let dw = self.slot(grads, w);
                    gemm(k * din, t_out, dout, &cols, true, g, false, dw, true);
                }
                if self.wants(x) {
                    let mut dcols = vec![F::zero(); t_out * k * din];
                    gemm(t_out, dout, k * din, g, false, self.value(w).data(), true, &mut dcols, false);
                    let dx = self.slot(grads, x);
                    col2im(&dcols, dx, t, din, k, stride, padding, t_out);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let dt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.value(out).cols();
                let n = self.value(out).rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let dp = self.slot(grads, *p);
                        for i in 0..n {
                            add_assign(&mut dp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.value(x).cols();
                let (n, w) = self.value(out).dims2().unwrap();
                let dx = self.slot(grads, x);
                for i in 0..n {
                    add_assign(&mut dx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                }
            }
            &Op::Sum(x) => {
                let dx = self.slot(grads, x);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::LocalScores { q, k, half, allowed, scale } => {
                let (n, dh) = self.value(*q).dims2().unwrap();
                let width = 2 * half + 1;
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let mut dq = vec![F::zero(); n * dh];
                let mut dk = vec![F::zero(); n * dh];
                for i in 0..n {
                    for o in 0..width {
                        if !allowed[i * width + o] {
                            continue;
                        }
                        let j = i + o - half;
                        let gs = g[i * width + o] * *scale;
                        for c in 0..dh {
                            dq[i * dh + c] += gs * kv[j * dh + c];
                            dk[j * dh + c] += gs * qv[i * dh + c];
                        }
                    }
                }
                if self.wants(*q) {
                    add_assign(self.slot(grads, *q), &dq);
                }
                if self.wants(*k) {
                    add_assign(self.slot(grads, *k), &dk);
                }
            }
            &Op::LocalMix { a, v, half } => {
                let (n, width) = self.value(a).dims2().unwrap();
                let dh = self.value(v).cols();
                let av = self.value(a).data();
                let vv = self.value(v).data();
                let mut da = vec![F::zero(); n * width];
                let mut dv = vec![F::zero(); n * dh];
                for i in 0..n {
                    let gi = &g[i * dh..(i + 1) * dh];
                    for o in 0..width {
                        let Some(j) = (i + o).checked_sub(half) else { continue };
                        if j >= n {
                            continue;
                        }
                        let vj = &vv[j * dh..(j + 1) * dh];
                        da[i * width + o] = gi.iter().zip(vj).map(|(x, y)| *x * *y).sum();
                        let w = av[i * width + o];
                        for c in 0..dh {
                            dv[j * dh + c] += w * gi[c];
                        }
                    }
                }
                if self.wants(a) {
                    add_assign(self.slot(grads, a), &da);
                }
                if self.wants(v) {
                    add_assign(self.slot(grads, v), &dv);
                }
            }
            Op::SmoothedCrossEntropy { logits, targets, include, eps, norm, probs } => {
                let v = self.value(*logits).cols();
                let vf = F::from_usize(v).unwrap();
                let scale = g[0] / *norm;
                let dl = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    if !include[r] {
                        continue;
                    }
                    for k in 0..v {
                        let mut q = *eps / vf;
                        if k == t {
                            q += F::one() - *eps;
                        }
                        dl[r * v + k] += (probs[r * v + k] - q) * scale;
                    }
                }
            }
        }
    }
}

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Output length of a strided, zero-padded convolution.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv1d needs kernel >= 1 and stride >= 1 (got {kernel}, {stride})"
        )));
    }
    if t + 2 * padding < kernel {
        return Err(Error::InvalidArgument(format!(
            "conv1d input of length {t} with padding {padding} is shorter than kernel {kernel}"
        )));
    }
    Ok((t + 2 * padding - kernel) / stride + 1)
}

fn im2col<F: Scalar>(
    x: &[F],
    t: usize,
    din: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); t_out * k * din];
    for o in 0..t_out {
        for kk in 0..k {
            let Some(r) = (o * stride + kk).checked_sub(padding) else { continue };
            if r >= t {
                continue;
            }
            let dst = (o * k + kk) * din;
            cols[dst..dst + din].copy_from_slice(&x[r * din..(r + 1) * din]);
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &[F],
    dx: &mut [F],
    t: usize,
    din: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) {
    for o in 0..t_out {
        for kk in 0..k {
            let Some(r) = (o * stride + kk).checked_sub(padding) else { continue };
            if r >= t {
                continue;
            }
            let src = (o * k + kk) * din;
            add_assign(&mut dx[r * din..(r + 1) * din], &dcols[src..src + din]);
        }
    }
}

/// Masked softmax over consecutive rows of length `cols`.
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], mask: &[bool], cols: usize) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); x.len()];
    if cols == 0 {
        return Ok(out);
    }
    for r in 0..x.len() / cols {
        let xs = &x[r * cols..(r + 1) * cols];
        let ms = &mask[r * cols..(r + 1) * cols];
        let mut max = F::neg_infinity();
        for (v, m) in xs.iter().zip(ms) {
            if *m && *v > max {
                max = *v;
            }
        }
        if !ms.iter().any(|m| *m) {
            return Err(Error::FullyMasked { row: r });
        }
        let os = &mut out[r * cols..(r + 1) * cols];
        let mut sum = F::zero();
        for j in 0..cols {
            if ms[j] {
                let e = (xs[j] - max).exp();
                os[j] = e;
                sum += e;
            }
        }
        for o in os.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}
