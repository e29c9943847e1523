use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[..., k] × [k, n]`
    MatMul(Var, Var),
    /// `[B, m, k] × [B, k, n]`, or `[B, n, k]` transposed when the flag is set.
    BatchMatMul(Var, Var, bool),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast add of a tensor whose shape is a suffix of the first operand's.
    AddTrailing(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner tape of recorded operations.
///
/// Values are appended in execution order, so the tape is topologically
/// sorted by construction. [`Graph::backward`] may run once; call
/// [`Graph::reset`] to reuse the allocation for another pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::from_parts(shape, data);
        self.push(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {:?} and {:?}", sa, sb)));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out, false);
        Ok(self.push_op(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis; `trans_b` multiplies by each `b[i]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Dimension(format!(
                "batched matmul of {:?} and {:?} (transpose={})",
                sa, sb, trans_b
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ai, bi, ci, false);
            } else {
                gemm_nn(m, k, n, ai, bi, ci, false);
            }
        }
        Ok(self.push_op(vec![batch, m, n], out, Op::BatchMatMul(a, b, trans_b), &[a, b]))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{} of {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x` (biases, positional tables).
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!(
                "broadcast add of {:?} onto {:?}",
                sb, sx
            )));
        }
        let bd = self.data(b);
        let width = bd.len();
        let out: Vec<f64> = self
            .data(x)
            .chunks(width.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(a, c)| a + c))
            .collect();
        let shape = sx.to_vec();
        Ok(self.push_op(shape, out, Op::AddTrailing(x, b), &[x, b]))
    }

    fn map_op(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Abs(x), f64::abs)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!(
                "softmax over axis {} of {:?}",
                axis, shape
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.data(x).to_vec();
        softmax_in_place(&mut out, outer, len, inner);
        Ok(self.push_op(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                shape,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut normalized = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            rstd,
        };
        Ok(self.push_op(shape, out, op, &[x, gain, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Dimension(format!(
                "permutation {:?} of {:?}",
                perm, shape
            )));
        }
        let (out, out_shape) = kernels::permute(self.data(x), shape, perm);
        Ok(self.push_op(out_shape, out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "transpose of rank-{} tensor",
                rank
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {} of {:?}", axis, base)));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat of {:?} and {:?} along axis {}",
                    base, s, axis
                )));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let chunk = w * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            widths,
        };
        Ok(self.push_op(shape, out, op, parts))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice [{}, {}) of axis {} in {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * axis_len + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice {
            x,
            outer,
            inner,
            axis_len,
            start,
            len,
        };
        Ok(self.push_op(out_shape, out, op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push_op(Vec::new(), vec![total], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("sum over axis {} of {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push_op(out_shape, out, Op::SumAxis { x, outer, len, inner }, &[x]))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; reset it first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k.max(1);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, self.data(*b), &mut da, false);
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, self.data(*a), g, &mut db, false);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::BatchMatMul(a, b, trans_b) => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b[i] is n×k: dA = dC · b
                            gemm_nn(m, n, k, gi, bi, dai, false);
                        } else {
                            gemm_nt(m, n, k, gi, bi, dai, false);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ · a
                            gemm_tn(n, m, k, gi, ai, dbi, false);
                        } else {
                            gemm_tn(k, m, n, ai, gi, dbi, false);
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddTrailing(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.needs(*b) {
                    let width = self.value(*b).numel();
                    let mut db = vec![0.0; width];
                    for row in g.chunks(width.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                accumulate(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xd)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                );
            }
            Op::Tanh(x) => {
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                );
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                accumulate(
                    &mut grads[x.0],
                    g.iter().zip(xd).map(|(gv, &xv)| gv * sign(xv)).collect(),
                );
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut dx = vec![0.0; g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..*len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..*len {
                            dx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gd = self.data(*gain);
                let rows = g.len() / d;
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += row[j] * normalized[r * d + j];
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.to_vec()),
            Op::Permute(x, perm) => {
                let (dx, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                accumulate(&mut grads[x.0], dx);
            }
            Op::Concat {
                parts,
                outer,
                inner,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.needs(p) {
                        let chunk = w * inner;
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[from..from + chunk]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let mut dx = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let to = (o * axis_len + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::SumAxis { x, outer, len, inner } => {
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    for _ in 0..*len {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (data[at(l)] - max).exp();
                data[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                data[at(l)] /= total;
            }
        }
    }
}
