//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` simply walks it in reverse.

use std::sync::Arc;

use rand::Rng;

use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-padding mask for [`Graph::softmax`].
///
/// Softmax row `r` excludes column `c` when
/// `padded[(r / rows_per_entry) * C + c]` is true.
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub padded: Arc<Vec<bool>>,
    pub rows_per_entry: usize,
}

/// Batch statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

pub const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather(Var, Arc<Vec<usize>>),
    BroadcastRows(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// `Some` in training mode: rows that contributed to the statistics.
        included: Option<Vec<bool>>,
    },
    Sum(Var),
    Mean(Var),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    needs_grad: bool,
}

/// A differentiable computation recorded as it is evaluated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    retained: Vec<bool>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Array>, op: Op, needs_grad: bool) -> Var {
        self.retained.push(matches!(op, Op::Leaf));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Array> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Arc<Array>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that receives a gradient, from an owned array.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x + bias` with `bias` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.ndim() != 1 || vx.last_dim() != vb.len() || vx.ndim() == 0 {
            return Err(Error::shape(format!("add_bias: {:?} + {:?}", vx.shape(), vb.shape())));
        }
        let c = vb.len();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::array::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Batched product `[N, m, k] x [N, k, n] -> [N, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                1.0,
                &va.data()[i * m * k..],
                k as isize,
                1,
                &vb.data()[i * k * n..],
                n as isize,
                1,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Array::new(vec![nb, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchMatMul(a, b), ng))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() < 2 {
            return Err(Error::shape(format!("transpose of {:?}", vx.shape())));
        }
        let out = transpose_last2(vx);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.ndim()];
        if axes.len() != vx.ndim() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute {:?} by {axes:?}", vx.shape())));
        }
        let out = permute_array(vx, axes);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.len() {
            return Err(Error::shape(format!("reshape {:?} to {shape:?}", vx.shape())));
        }
        let mut out = vx.clone();
        out.set_shape(shape.to_vec());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::contract("concat of zero arrays"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat {:?} with {:?} on axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let va = self.value(v);
                let len = va.shape()[axis] * inner;
                out.extend_from_slice(&va.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Array::new(shape, out)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || start > end || end > vx.shape()[axis] {
            return Err(Error::shape(format!("slice {start}..{end} on axis {axis} of {:?}", vx.shape())));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let w = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&vx.data()[base..base + w]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = end - start;
        let ng = self.ng(x);
        Ok(self.push(Array::new(shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    /// Selects entries along axis 0; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() == 0 || indices.iter().any(|&i| i >= vx.shape()[0]) {
            return Err(Error::shape(format!("gather out of range on {:?}", vx.shape())));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices.iter() {
            out.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = indices.len();
        let ng = self.ng(x);
        Ok(self.push(Array::new(shape, out)?, Op::Gather(x, indices), ng))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let vx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(vx.shape());
        let data = vx.data().repeat(n);
        let ng = self.ng(x);
        self.push(Array::new(shape, data).expect("consistent"), Op::BroadcastRows(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if let Some(v) = vx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let out = vx.map(f64::ln);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Log(x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Softmax along the trailing axis. Masked entries get probability 0;
    /// a fully masked row is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.len() / c.max(1);
        if let Some(m) = mask {
            if m.rows_per_entry == 0 || m.padded.len() != rows.div_ceil(m.rows_per_entry) * c {
                return Err(Error::shape(format!(
                    "softmax mask of length {} for {:?} with {} rows per entry",
                    m.padded.len(),
                    vx.shape(),
                    m.rows_per_entry
                )));
            }
        }
        let mut out = vx.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let pad = mask.map(|m| &m.padded[(r / m.rows_per_entry) * c..(r / m.rows_per_entry + 1) * c]);
            let keep = |j: usize| pad.is_none_or(|p| !p[j]);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - mx).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            if total > 0.0 {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Layer norm over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.last_dim();
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::shape(format!("layer_norm {:?} with gamma {:?}", vx.shape(), vg.shape())));
        }
        let rows = vx.len() / c;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Array::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Training-mode batch norm over the rows of a 2-D array `[N, C]`.
    ///
    /// Only rows with `included[r]` contribute to the statistics (all rows when
    /// `None`); every row is normalized with them. Zero-variance channels map
    /// to `beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        included: Option<Vec<bool>>,
    ) -> Result<(Var, BatchStats)> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::shape(format!("batch_norm expects [N, C], got {:?}", vx.shape())));
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let included = included.unwrap_or_else(|| vec![true; n]);
        if included.len() != n {
            return Err(Error::shape("batch_norm row mask length"));
        }
        let count = included.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::contract("batch_norm over zero rows"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in (0..n).filter(|&r| included[r]) {
            for j in 0..c {
                mean[j] += vx.data()[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for r in (0..n).filter(|&r| included[r]) {
            for j in 0..c {
                var[j] += (vx.data()[r * c + j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
        let v = self.batch_norm_with(x, gamma, beta, &mean, &var, Some(included))?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, None)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        included: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.ndim() != 2 {
            return Err(Error::shape(format!("batch_norm expects [N, C], got {:?}", vx.shape())));
        }
        let c = vx.shape()[1];
        if vg.shape() != [c] || vb.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape(format!("batch_norm parameters for {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for (i, &v) in vx.data().iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * inv_std[j];
            xhat[i] = h;
            out[i] = h * vg.data()[j] + vb.data()[j];
        }
        let out = Array::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, included }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Array::scalar(s), Op::Mean(x), ng)
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. Call only in training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..vx.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = Array::new(vx.shape().to_vec(), vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Keeps the gradient of an intermediate node after `backward`; leaves always keep theirs.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained[v.0] = true;
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of the last `backward` root with respect to `v`, for leaves
    /// and nodes marked with [`Graph::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Reverse pass from a scalar root. Clears gradients from any earlier call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Array::full(self.value(root).shape(), 1.0);
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if self.retained[i] {
                self.backprop_node(i, g.clone());
                self.grads[i] = Some(g);
            } else {
                self.backprop_node(i, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Array) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, owned: Array) {
        let g = &owned;
        let node = &self.nodes[i];
        let y = Arc::clone(&node.value);
        // Each arm computes parent gradients first, then accumulates them, so
        // the immutable borrow of `self.nodes` ends before mutation.
        let updates: Vec<(Var, Array)> = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, owned)],
            Op::Sub(a, b) => {
                let neg = g.map(|v| -v);
                vec![(*a, owned), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut u = vec![];
                if self.ng(*a) {
                    u.push((*a, zip_map(g, vb, |x, y| x * y)));
                }
                if self.ng(*b) {
                    u.push((*b, zip_map(g, va, |x, y| x * y)));
                }
                u
            }
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, owned), (*b, Array::vector(db))]
            }
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut u = vec![];
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), n as isize, 1, vb.data(), 1, n as isize, 0.0, &mut da);
                    u.push((*a, Array::new(vec![m, k], da).unwrap()));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, va.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut db);
                    u.push((*b, Array::new(vec![k, n], db).unwrap()));
                }
                u
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (nb, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                let mut u = vec![];
                if self.ng(*a) {
                    let mut da = vec![0.0; nb * m * k];
                    for s in 0..nb {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g.data()[s * m * n..],
                            n as isize,
                            1,
                            &vb.data()[s * k * n..],
                            1,
                            n as isize,
                            0.0,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    u.push((*a, Array::new(vec![nb, m, k], da).unwrap()));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; nb * k * n];
                    for s in 0..nb {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &va.data()[s * m * k..],
                            1,
                            k as isize,
                            &g.data()[s * m * n..],
                            n as isize,
                            1,
                            0.0,
                            &mut db[s * k * n..(s + 1) * k * n],
                        );
                    }
                    u.push((*b, Array::new(vec![nb, k, n], db).unwrap()));
                }
                u
            }
            Op::Transpose(x) => vec![(*x, transpose_last2(g))],
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_array(g, &inverse))]
            }
            Op::Reshape(x) => {
                let mut d = g.clone();
                d.set_shape(self.value(*x).shape().to_vec());
                vec![(*x, d)]
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                let mut u = vec![];
                for &v in xs {
                    let shape = self.value(v).shape().to_vec();
                    let len = shape[*axis];
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        u.push((v, Array::new(shape, d).unwrap()));
                    }
                    offset += len;
                }
                u
            }
            Op::Slice { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let w = g.shape()[*axis] * inner;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    d[base..base + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
                }
                vec![(*x, Array::new(shape, d).unwrap())]
            }
            Op::Gather(x, indices) => {
                let shape = self.value(*x).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut d = vec![0.0; shape.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        d[i * inner + j] += g.data()[k * inner + j];
                    }
                }
                vec![(*x, Array::new(shape, d).unwrap())]
            }
            Op::BroadcastRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                let inner = self.value(*x).len();
                let mut d = vec![0.0; inner];
                for row in g.data().chunks(inner) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![(*x, Array::new(shape, d).unwrap())]
            }
            Op::Exp(x) => vec![(*x, zip_map(g, &y, |a, b| a * b))],
            Op::Log(x) => vec![(*x, zip_map(g, self.value(*x), |a, b| a / b))],
            Op::Tanh(x) => vec![(*x, zip_map(g, &y, |a, t| a * (1.0 - t * t)))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, &y, |a, s| a * s * (1.0 - s)))],
            Op::Relu(x) => vec![(*x, zip_map(g, self.value(*x), |a, v| if v > 0.0 { a } else { 0.0 }))],
            Op::Softmax(x) => {
                let c = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*x, Array::new(y.shape().to_vec(), d).unwrap())]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let vg = self.value(*gamma);
                let c = vg.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, s) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * vg.data()[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..c {
                        let dh = gr[j] * vg.data()[j];
                        dx[r * c + j] = s / c as f64 * (c as f64 * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                vec![
                    (*x, Array::new(y.shape().to_vec(), dx).unwrap()),
                    (*gamma, Array::vector(dgamma)),
                    (*beta, Array::vector(dbeta)),
                ]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, included } => {
                let vg = self.value(*gamma);
                let c = vg.len();
                let n = xhat.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_d = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                let mut dxhat = vec![0.0; xhat.len()];
                for i in 0..xhat.len() {
                    let j = i % c;
                    dgamma[j] += g.data()[i] * xhat[i];
                    dbeta[j] += g.data()[i];
                    let dh = g.data()[i] * vg.data()[j];
                    dxhat[i] = dh;
                    sum_d[j] += dh;
                    sum_dh[j] += dh * xhat[i];
                }
                let mut dx = vec![0.0; xhat.len()];
                match included {
                    None => {
                        for i in 0..xhat.len() {
                            dx[i] = dxhat[i] * inv_std[i % c];
                        }
                    }
                    Some(inc) => {
                        let count = inc.iter().filter(|&&b| b).count() as f64;
                        for r in 0..n {
                            for j in 0..c {
                                let i = r * c + j;
                                let mut v = inv_std[j] * dxhat[i];
                                if inc[r] {
                                    v -= inv_std[j] / count * (sum_d[j] + xhat[i] * sum_dh[j]);
                                }
                                dx[i] = v;
                            }
                        }
                    }
                }
                vec![
                    (*x, Array::new(y.shape().to_vec(), dx).unwrap()),
                    (*gamma, Array::vector(dgamma)),
                    (*beta, Array::vector(dbeta)),
                ]
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                vec![(*x, Array::full(self.value(*x).shape(), s))]
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let s = g.data()[0] / vx.len().max(1) as f64;
                vec![(*x, Array::full(vx.shape(), s))]
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                vec![(*x, Array::new(g.shape().to_vec(), d).unwrap())]
            }
        };
        for (v, d) in updates {
            self.accumulate(v, d);
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose_last2(x: &Array) -> Array {
    let s = x.shape();
    let nd = s.len();
    let (r, c) = (s[nd - 2], s[nd - 1]);
    let batch = x.len() / (r * c).max(1);
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Array::new(shape, out).unwrap()
}

fn permute_array(x: &Array, axes: &[usize]) -> Array {
    let s = x.shape();
    let nd = s.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; nd];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, st)| i * st).sum();
        out.push(x.data()[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array::new(out_shape, out).unwrap()
}
