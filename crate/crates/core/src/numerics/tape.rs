use std::borrow::Cow;

use rand::Rng;

use super::{gelu, gelu_grad, gemm, log_sum_exp, softmax_row, ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        b_trans: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    AddTiled {
        x: usize,
        tile: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Sum {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
        k: usize,
        tau: T,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttentionDims,
        probs: Vec<T>,
        drop: Option<Vec<T>>,
    },
    Gather {
        table: usize,
        cols: usize,
        indices: Vec<usize>,
    },
    SelectRows {
        x: usize,
        cols: usize,
        rows: Vec<usize>,
    },
    SliceCols {
        x: usize,
        cols: usize,
        start: usize,
        end: usize,
    },
    CrossEntropy {
        logits: usize,
        k: usize,
        targets: Vec<usize>,
        eps: T,
        probs: Vec<T>,
    },
    Mse {
        a: usize,
        b: usize,
    },
    StraightThrough {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geo: ConvGeometry,
    },
    Upsample2 {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    Transpose {
        x: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
}

struct Node<'p, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    param: Option<ParamId>,
}

/// Linear record of a forward computation.
///
/// Leaves keep their gradient across [`Tape::backward`] calls (accumulating),
/// intermediate gradients are recomputed on every call.
pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn accumulate<T>(grads: &mut [Option<Vec<T>>], idx: usize, f: impl FnOnce(&mut [T])) {
    if let Some(g) = grads[idx].as_mut() {
        f(g);
    }
}

impl<'p> Tape<'p, f32> {
    /// Record a leaf. Its gradient is tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, tensor.data, Op::Leaf, rg)
    }

    /// Borrow a parameter onto the tape; its gradient is handed back by
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            grad: None,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of parameter leaves, releasing the borrow on the set.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<f32>)> {
        self.nodes
            .into_iter()
            .filter_map(|n| Some((n.param?, n.grad?)))
            .collect()
    }

    /// Add the gradients of parameter leaves into `params`' grad buffers.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                let t = params.get_mut(id);
                match t.grad.as_mut() {
                    Some(acc) => add_into(acc, g),
                    None => t.grad = Some(g.clone()),
                }
            }
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Record a raw leaf of any float type.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} elements but data has {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf (None before any backward call or
    /// for untracked values).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            m,
            k,
            n,
            b_trans: false,
        };
        Ok(self.push(vec![m, n], out, op, rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            m,
            k,
            n,
            b_trans: true,
        };
        Ok(self.push(vec![m, n], out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// `x[..×c] + bias[c]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.shape(bias).iter().product::<usize>();
        let xs = self.shape(x);
        if self.shape(bias).len() != 1 || xs.last() != Some(&cols) {
            return Err(dim_err("add_bias", xs, self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
        }
        let shape = xs.to_vec();
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                cols,
            },
            rg,
        ))
    }

    /// Adds `tile` repeatedly along the leading dimension of `x`
    /// (e.g. `[B·S × H] + [S × H]`).
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let tl = self.value(tile).len();
        if tl == 0 || self.value(x).len() % tl != 0 {
            return Err(dim_err("add_tiled", self.shape(x), self.shape(tile)));
        }
        let tv = self.value(tile);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_exact_mut(tl) {
            chunk.iter_mut().zip(tv).for_each(|(o, &t)| *o = *o + t);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0, tile.0]);
        Ok(self.push(shape, out, Op::AddTiled { x: x.0, tile: tile.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let c = T::lit(c as f64);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![], vec![s], Op::Sum { x: x.0 }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Gelu { x: x.0 }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Relu { x: x.0 }, rg)
    }

    /// Per-row normalisation over the trailing dimension, then `·gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).len() / d;
        let dt = T::from_usize(d).unwrap();
        let eps = T::lit(super::LAYER_NORM_EPS as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            d,
            xhat,
            rstd,
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Row softmax of `x / tau` over the trailing dimension.
    pub fn softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        let k = *self.shape(x).last().unwrap_or(&0);
        let out = super::softmax_with_temperature(self.value(x), k, tau)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        let tau = T::lit(tau as f64);
        Ok(self.push(shape, out, Op::Softmax { x: x.0, k, tau }, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let mask: Vec<T> = dropout_mask(self.value(x).len(), p, rng);
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, Op::Dropout { x: x.0, mask }, rg)
    }

    /// Bidirectional multi-head scaled dot-product attention over
    /// `[batch·seq × hidden]` projections, optional dropout on the
    /// attention weights.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        dropout: f32,
        rng: &mut R,
    ) -> Result<Var> {
        let AttentionDims {
            batch,
            seq,
            heads,
            hidden,
        } = dims;
        let want = [batch * seq, hidden];
        for x in [q, k, v] {
            if self.shape(x) != want {
                return Err(dim_err("attention", self.shape(x), &want));
            }
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "hidden {hidden} not divisible by heads {heads}"
            )));
        }
        let dh = hidden / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = seq * seq;
        let mut probs = vec![T::zero(); batch * heads * block];
        let drop: Option<Vec<T>> = (dropout > 0.0).then(|| dropout_mask(probs.len(), dropout, rng));
        let mut out = vec![T::zero(); batch * seq * hidden];
        let mut qh = vec![T::zero(); seq * dh];
        let mut kh = vec![T::zero(); seq * dh];
        let mut vh = vec![T::zero(); seq * dh];
        let mut oh = vec![T::zero(); seq * dh];
        let mut pd = vec![T::zero(); block];
        let mut tmp = vec![T::zero(); seq];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                gather_head(qv, b, h, seq, dh, hidden, &mut qh);
                gather_head(kv, b, h, seq, dh, hidden, &mut kh);
                gather_head(vv, b, h, seq, dh, hidden, &mut vh);
                let off = (b * heads + h) * block;
                let p = &mut probs[off..off + block];
                gemm(seq, dh, seq, &qh, false, &kh, true, p, false);
                for row in p.chunks_exact_mut(seq) {
                    for (t, &s) in tmp.iter_mut().zip(row.iter()) {
                        *t = s * scale;
                    }
                    softmax_row(&tmp, T::one(), row);
                }
                let pw: &[T] = match &drop {
                    Some(mask) => {
                        for ((d, &pv), &mv) in pd.iter_mut().zip(p.iter()).zip(&mask[off..off + block]) {
                            *d = pv * mv;
                        }
                        &pd
                    }
                    None => p,
                };
                gemm(seq, seq, dh, pw, false, &vh, false, &mut oh, false);
                scatter_head(&oh, b, h, seq, dh, hidden, &mut out);
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            dims,
            probs,
            drop,
        };
        Ok(self.push(want.to_vec(), out, op, rg))
    }

    /// Attention weights (pre-dropout) of an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Weights of every attention node on the tape, in recording order.
    pub fn all_attention_weights(&self) -> Vec<&[T]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Rows of `table[R×C]` picked by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(table, "gather")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row table")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table.0]);
        let op = Op::Gather {
            table: table.0,
            cols: c,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), c], out, op, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} of a {r}-row matrix")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x.0]);
        let op = Op::SelectRows {
            x: x.0,
            cols: c,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), c], out, op, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::Index(format!("columns {start}..{end} of {c}")));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for row in xv.chunks_exact(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(&[x.0]);
        let op = Op::SliceCols {
            x: x.0,
            cols: c,
            start,
            end,
        };
        Ok(self.push(vec![r, w], out, op, rg))
    }

    /// Mean over rows of `-Σ_k q_k log p_k`, with `q = (1-ε)·onehot + ε/K`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f32) -> Result<Var> {
        let (b, k) = self.mat_dims(logits, "cross_entropy")?;
        if b != targets.len() {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if b == 0 {
            return Err(Error::Contract("cross entropy over an empty batch".into()));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidParameter(format!("label smoothing {eps} outside [0,1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} with {k} classes")));
        }
        let eps = T::lit(eps as f64);
        let off = eps / T::from_usize(k).unwrap();
        let on = T::one() - eps + off;
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = 0.0f64;
        for (i, row) in lv.chunks_exact(k).enumerate() {
            let lse = log_sum_exp(row);
            let mut li = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let q = if j == targets[i] { on } else { off };
                li = li - q * (z - lse);
                probs[i * k + j] = (z - lse).exp();
            }
            total += li.to_f64().unwrap();
        }
        let loss = T::lit(total / b as f64);
        let rg = self.rg(&[logits.0]);
        let op = Op::CrossEntropy {
            logits: logits.0,
            k,
            targets: targets.to_vec(),
            eps,
            probs,
        };
        Ok(self.push(vec![], vec![loss], op, rg))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| ((x - y) * (x - y)).to_f64().unwrap())
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![], vec![T::lit(s / n as f64)], Op::Mse { a: a.0, b: b.0 }, rg))
    }

    /// Forward value `replacement`, gradient copied unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Vec<T>) -> Result<Var> {
        if replacement.len() != self.value(x).len() {
            return Err(dim_err("straight_through", self.shape(x), &[replacement.len()]));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, replacement, Op::StraightThrough { x: x.0 }, rg))
    }

    /// 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin·k·k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geo: ConvGeometry) -> Result<Var> {
        let want_x = [geo.batch, geo.in_ch, geo.height, geo.width];
        if self.shape(x) != want_x {
            return Err(dim_err("conv2d", self.shape(x), &want_x));
        }
        let want_w = [geo.out_ch, geo.col_rows()];
        if self.shape(w) != want_w {
            return Err(dim_err("conv2d", self.shape(w), &want_w));
        }
        if self.shape(b) != [geo.out_ch] {
            return Err(dim_err("conv2d", self.shape(b), &[geo.out_ch]));
        }
        if geo.height + 2 * geo.pad < geo.kernel || geo.width + 2 * geo.pad < geo.kernel || geo.stride == 0 {
            return Err(Error::Shape(format!("conv2d: degenerate geometry {geo:?}")));
        }
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let plane_in = geo.in_ch * geo.height * geo.width;
        let plane_out = geo.out_ch * oh * ow;
        let mut out = vec![T::zero(); geo.batch * plane_out];
        let mut col = vec![T::zero(); geo.col_rows() * oh * ow];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for n in 0..geo.batch {
            im2col(&xv[n * plane_in..(n + 1) * plane_in], &geo, &mut col);
            let o = &mut out[n * plane_out..(n + 1) * plane_out];
            for (c, row) in o.chunks_exact_mut(oh * ow).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[c]);
            }
            gemm(geo.out_ch, geo.col_rows(), oh * ow, wv, false, &col, false, o, true);
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            geo,
        };
        Ok(self.push(vec![geo.batch, geo.out_ch, oh, ow], out, op, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = *self.shape(x) else {
            return Err(Error::Shape(format!("upsample2 expects rank 4, got {:?}", self.shape(x))));
        };
        let planes = b * c;
        let xv = self.value(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2 { x: x.0, planes, h, w }, rg))
    }

    /// `[batch, rows, cols] -> [batch, cols, rows]`; `out_shape` is recorded
    /// as given (its product must match).
    pub fn transpose(&mut self, x: Var, batch: usize, rows: usize, cols: usize, out_shape: Vec<usize>) -> Result<Var> {
        let n = batch * rows * cols;
        if self.value(x).len() != n || out_shape.iter().product::<usize>() != n {
            return Err(dim_err("transpose", self.shape(x), &out_shape));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); n];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = xv[base + r * cols + c];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out_shape, out, Op::Transpose { x: x.0, batch, rows, cols }, rg))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = self.nodes[..n]
            .iter()
            .map(|nd| nd.requires_grad.then(|| vec![T::zero(); nd.value.len()]))
            .collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |j: usize| -> &[T] { &self.nodes[j].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, b_trans } => {
                let (av, bv) = (val(a), val(b));
                // dA = dC · op(B)ᵀ
                accumulate(grads, a, |ga| gemm(m, n, k, g, false, bv, !b_trans, ga, true));
                if b_trans {
                    // B is n×k: dB = dCᵀ · A
                    accumulate(grads, b, |gb| gemm(n, m, k, g, true, av, false, gb, true));
                } else {
                    accumulate(grads, b, |gb| gemm(k, m, n, av, true, g, false, gb, true));
                }
            }
            &Op::Add { a, b } => {
                accumulate(grads, a, |ga| add_into(ga, g));
                accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::AddBias { x, bias, cols } => {
                accumulate(grads, x, |gx| add_into(gx, g));
                accumulate(grads, bias, |gb| {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::AddTiled { x, tile } => {
                accumulate(grads, x, |gx| add_into(gx, g));
                accumulate(grads, tile, |gt| {
                    let tl = gt.len();
                    for chunk in g.chunks_exact(tl) {
                        add_into(gt, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                accumulate(grads, a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                accumulate(grads, b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            &Op::Scale { x, c } => {
                accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, &gi)| *o = *o + gi * c));
            }
            &Op::Sum { x } => {
                accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                accumulate(grads, x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gi * gelu_grad(v);
                    }
                });
            }
            &Op::Relu { x } => {
                let xv = val(x);
                accumulate(grads, x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o = *o + gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let dt = T::from_usize(d).unwrap();
                let gv = val(*gain);
                accumulate(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                });
                accumulate(grads, *bias, |gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
                accumulate(grads, *x, |gx| {
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                            mean_dh = mean_dh + dh[j];
                            mean_dhh = mean_dhh + dh[j] * hr[j];
                        }
                        mean_dh = mean_dh / dt;
                        mean_dhh = mean_dhh / dt;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                });
            }
            &Op::Softmax { x, k, tau } => {
                let y = val(i);
                accumulate(grads, x, |gx| {
                    for ((gr, yr), out) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            out[j] = out[j] + yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, |gx| {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
                drop,
            } => {
                let (dq, dk, dv) = attention_backward(g, val(*q), val(*k), val(*v), *dims, probs, drop.as_deref());
                accumulate(grads, *q, |gq| add_into(gq, &dq));
                accumulate(grads, *k, |gk| add_into(gk, &dk));
                accumulate(grads, *v, |gv| add_into(gv, &dv));
            }
            Op::Gather { table, cols, indices } => {
                let c = *cols;
                accumulate(grads, *table, |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SelectRows { x, cols, rows } => {
                let c = *cols;
                accumulate(grads, *x, |gx| {
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            &Op::SliceCols { x, cols, start, end } => {
                let w = end - start;
                accumulate(grads, x, |gx| {
                    for (dst, src) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(w)) {
                        add_into(&mut dst[start..end], src);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                k,
                targets,
                eps,
                probs,
            } => {
                let k = *k;
                let off = *eps / T::from_usize(k).unwrap();
                let on = T::one() - *eps + off;
                let s = g[0] / T::from_usize(targets.len()).unwrap();
                accumulate(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let q = if j == t { on } else { off };
                            gl[i * k + j] = gl[i * k + j] + s * (probs[i * k + j] - q);
                        }
                    }
                });
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (val(a), val(b));
                let s = T::lit(2.0) * g[0] / T::from_usize(av.len().max(1)).unwrap();
                accumulate(grads, a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o = *o + s * (x - y);
                    }
                });
                accumulate(grads, b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o = *o - s * (x - y);
                    }
                });
            }
            &Op::StraightThrough { x } => {
                accumulate(grads, x, |gx| add_into(gx, g));
            }
            &Op::Conv2d { x, w, b, geo } => {
                let (oh, ow) = (geo.out_height(), geo.out_width());
                let plane_in = geo.in_ch * geo.height * geo.width;
                let plane_out = geo.out_ch * oh * ow;
                let cr = geo.col_rows();
                let (xv, wv) = (val(x), val(w));
                accumulate(grads, b, |gb| {
                    for go in g.chunks_exact(plane_out) {
                        for (c, row) in go.chunks_exact(oh * ow).enumerate() {
                            gb[c] = gb[c] + row.iter().copied().sum::<T>();
                        }
                    }
                });
                let mut col = vec![T::zero(); cr * oh * ow];
                accumulate(grads, w, |gw| {
                    for nb in 0..geo.batch {
                        im2col(&xv[nb * plane_in..(nb + 1) * plane_in], &geo, &mut col);
                        let go = &g[nb * plane_out..(nb + 1) * plane_out];
                        gemm(geo.out_ch, oh * ow, cr, go, false, &col, true, gw, true);
                    }
                });
                accumulate(grads, x, |gx| {
                    for nb in 0..geo.batch {
                        let go = &g[nb * plane_out..(nb + 1) * plane_out];
                        gemm(cr, geo.out_ch, oh * ow, wv, true, go, false, &mut col, false);
                        col2im_add(&col, &geo, &mut gx[nb * plane_in..(nb + 1) * plane_in]);
                    }
                });
            }
            &Op::Upsample2 { x, planes, h, w } => {
                accumulate(grads, x, |gx| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let dst = p * h * w + (y / 2) * w + xx / 2;
                                gx[dst] = gx[dst] + g[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, batch, rows, cols } => {
                accumulate(grads, x, |gx| {
                    for b in 0..batch {
                        let base = b * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                let dst = base + r * cols + c;
                                gx[dst] = gx[dst] + g[base + c * rows + r];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, p: f32, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p as f64));
    (0..n)
        .map(|_| if rng.random::<f32>() < p { T::zero() } else { keep })
        .collect()
}

fn gather_head<T: Scalar>(x: &[T], b: usize, h: usize, seq: usize, dh: usize, hidden: usize, out: &mut [T]) {
    for s in 0..seq {
        let src = (b * seq + s) * hidden + h * dh;
        out[s * dh..(s + 1) * dh].copy_from_slice(&x[src..src + dh]);
    }
}

fn scatter_head<T: Scalar>(src: &[T], b: usize, h: usize, seq: usize, dh: usize, hidden: usize, x: &mut [T]) {
    for s in 0..seq {
        let dst = (b * seq + s) * hidden + h * dh;
        x[dst..dst + dh].copy_from_slice(&src[s * dh..(s + 1) * dh]);
    }
}

fn scatter_head_add<T: Scalar>(src: &[T], b: usize, h: usize, seq: usize, dh: usize, hidden: usize, x: &mut [T]) {
    for s in 0..seq {
        let dst = (b * seq + s) * hidden + h * dh;
        add_into(&mut x[dst..dst + dh], &src[s * dh..(s + 1) * dh]);
    }
}

fn attention_backward<T: Scalar>(
    g: &[T],
    qv: &[T],
    kv: &[T],
    vv: &[T],
    dims: AttentionDims,
    probs: &[T],
    drop: Option<&[T]>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionDims {
        batch,
        seq,
        heads,
        hidden,
    } = dims;
    let dh = hidden / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let block = seq * seq;
    let z = T::zero();
    let mut dq = vec![z; qv.len()];
    let mut dk = vec![z; kv.len()];
    let mut dv = vec![z; vv.len()];
    let mut qh = vec![z; seq * dh];
    let mut kh = vec![z; seq * dh];
    let mut vh = vec![z; seq * dh];
    let mut go = vec![z; seq * dh];
    let mut tmp = vec![z; seq * dh];
    let mut pd = vec![z; block];
    let mut dp = vec![z; block];
    for b in 0..batch {
        for h in 0..heads {
            gather_head(qv, b, h, seq, dh, hidden, &mut qh);
            gather_head(kv, b, h, seq, dh, hidden, &mut kh);
            gather_head(vv, b, h, seq, dh, hidden, &mut vh);
            gather_head(g, b, h, seq, dh, hidden, &mut go);
            let off = (b * heads + h) * block;
            let p = &probs[off..off + block];
            let pw: &[T] = match drop {
                Some(mask) => {
                    for ((d, &pv), &mv) in pd.iter_mut().zip(p).zip(&mask[off..off + block]) {
                        *d = pv * mv;
                    }
                    &pd
                }
                None => p,
            };
            // dV = Pᵀ · dO
            gemm(seq, seq, dh, pw, true, &go, false, &mut tmp, false);
            scatter_head_add(&tmp, b, h, seq, dh, hidden, &mut dv);
            // dP = dO · Vᵀ
            gemm(seq, dh, seq, &go, false, &vh, true, &mut dp, false);
            if let Some(mask) = drop {
                dp.iter_mut().zip(&mask[off..off + block]).for_each(|(d, &m)| *d = *d * m);
            }
            for (dr, pr) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS · K, dK = dSᵀ · Q
            gemm(seq, seq, dh, &dp, false, &kh, false, &mut tmp, false);
            scatter_head_add(&tmp, b, h, seq, dh, hidden, &mut dq);
            gemm(seq, seq, dh, &dp, true, &qh, false, &mut tmp, false);
            scatter_head_add(&tmp, b, h, seq, dh, hidden, &mut dk);
        }
    }
    (dq, dk, dv)
}

fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, col: &mut [T]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    for ci in 0..geo.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < geo.height && (ix as usize) < geo.width;
                        dst[oy * ow + ox] = if inside {
                            x[(ci * geo.height + iy as usize) * geo.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], geo: &ConvGeometry, gx: &mut [T]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    for ci in 0..geo.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy as usize >= geo.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && (ix as usize) < geo.width {
                            let dst = (ci * geo.height + iy as usize) * geo.width + ix as usize;
                            gx[dst] = gx[dst] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
