//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a dynamically recorded tape: every operation appends a node
//! holding its kind and input ids, and [`Tensor`] handles are just (graph,
//! node id) pairs. Graphs live for one forward/backward pass and are
//! discarded afterwards; parameters persist outside the graph and are bound
//! as leaves at the start of each pass.
//!
//! Backward walks the tape once in reverse. Gradients are only computed along
//! paths that reach a trainable leaf, so frozen subgraphs cost nothing beyond
//! their forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::value::{broadcast_shape, matmul, matmul_nt, matmul_tn_acc, BroadcastMap, Value};

/// Inputs to `log` and `div` are clamped here to keep losses finite.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Neg,
    Abs,
    Log,
    Powf(f64),
    Sigmoid,
    Gelu,
    Softmax { axis: usize },
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape,
    LayerNorm { eps: f64 },
    ExtractPatches { patch: usize },
    Upsample2d { out_h: usize, out_w: usize },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
}

struct GraphInner {
    nodes: Vec<Node>,
    values: Vec<Value>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    trainable: Vec<bool>,
}

/// A recorded computation tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                values: Vec::new(),
                grads: Vec::new(),
                requires: Vec::new(),
                trainable: Vec::new(),
            })),
        }
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Value, trainable: bool) -> Tensor {
        let mut g = self.inner.borrow_mut();
        let requires = trainable || inputs.iter().any(|&i| g.requires[i]);
        let id = g.nodes.len();
        g.nodes.push(Node { op, inputs });
        g.values.push(value);
        g.grads.push(None);
        g.requires.push(requires);
        g.trainable.push(trainable);
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// A leaf tensor. Trainable leaves accumulate gradients in backward.
    pub fn leaf(&self, value: Value, trainable: bool) -> Tensor {
        self.push(Op::Leaf, vec![], value, trainable)
    }

    /// A frozen leaf: no gradient is ever accumulated for it.
    pub fn constant(&self, value: Value) -> Tensor {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Run the reverse pass from a scalar loss, populating gradients for every
    /// tensor on a path between the loss and a trainable leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.same_as(&loss.graph) {
            return Err(Error::GraphMismatch);
        }
        let mut g = self.inner.borrow_mut();
        if g.values[loss.id].numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: g.values[loss.id].shape().to_vec(),
            });
        }

        // Ancestors of the loss, found by a reverse sweep over the tape.
        let n = g.nodes.len();
        let mut reachable = vec![false; n];
        reachable[loss.id] = true;
        for id in (0..=loss.id).rev() {
            if reachable[id] {
                for &inp in &g.nodes[id].inputs {
                    reachable[inp] = true;
                }
            }
        }

        for id in 0..n {
            g.grads[id] = if reachable[id] && g.requires[id] {
                Some(vec![0.0; g.values[id].numel()])
            } else {
                None
            };
        }
        if let Some(gl) = g.grads[loss.id].as_mut() {
            gl[0] = 1.0;
        } else {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }

        let inner = &mut *g;
        for id in (0..=loss.id).rev() {
            if inner.grads[id].is_none() {
                continue;
            }
            if matches!(inner.nodes[id].op, Op::Leaf) {
                continue;
            }
            // consumed here; only leaf gradients remain readable afterwards
            let upstream = inner.grads[id].take().unwrap();
            backprop_node(inner, id, &upstream);
        }
        Ok(())
    }
}

/// A handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().values[self.id].numel()
    }

    /// Clone the current value out of the graph.
    pub fn value(&self) -> Value {
        self.graph.inner.borrow().values[self.id].clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.graph.inner.borrow().values[self.id].scalar_value()
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Value> {
        let g = self.graph.inner.borrow();
        g.grads[self.id]
            .as_ref()
            .map(|d| Value::new(g.values[self.id].shape().to_vec(), d.clone()).unwrap())
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(self)
    }

    fn unary(&self, op: Op, value: Value) -> Tensor {
        self.graph.push(op, vec![self.id], value, false)
    }

    fn with_peer<'a>(&self, rhs: &'a Tensor) -> Result<&'a Tensor> {
        if !self.graph.same_as(&rhs.graph) {
            return Err(Error::GraphMismatch);
        }
        Ok(rhs)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.with_peer(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = {
            let g = self.graph.inner.borrow();
            matmul(g.values[self.id].data(), g.values[rhs.id].data(), m, k, n)
        };
        Ok(self.graph.push(
            Op::Matmul,
            vec![self.id, rhs.id],
            Value::new(vec![m, n], out).unwrap(),
            false,
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                shape: s,
                reason: "rank-2 required".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = {
            let g = self.graph.inner.borrow();
            transpose_data(g.values[self.id].data(), r, c)
        };
        Ok(self.unary(Op::Transpose, Value::new(vec![c, r], out).unwrap()))
    }

    // ── Elementwise (broadcasting) ──────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Mul, "mul", |a, b| a * b)
    }

    /// Elementwise division; denominators are clamped at ±[`LOG_CLAMP`].
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Div, "div", |a, b| a / clamp_den(b))
    }

    fn binary(
        &self,
        rhs: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with_peer(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let out = {
            let g = self.graph.inner.borrow();
            let a = g.values[self.id].data();
            let b = g.values[rhs.id].data();
            if sa == sb {
                a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>()
            } else {
                let ma = BroadcastMap::new(&out_shape, &sa);
                let mb = BroadcastMap::new(&out_shape, &sb);
                let n: usize = out_shape.iter().product();
                (0..n).map(|i| f(a[ma.map(i)], b[mb.map(i)])).collect()
            }
        };
        Ok(self.graph.push(
            op,
            vec![self.id, rhs.id],
            Value::new(out_shape, out).unwrap(),
            false,
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.map_data(|x| s * x);
        self.unary(Op::Scale(s), out)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.map_data(|x| x + c);
        self.unary(Op::AddScalar(c), out)
    }

    pub fn neg(&self) -> Tensor {
        let out = self.map_data(|x| -x);
        self.unary(Op::Neg, out)
    }

    pub fn abs(&self) -> Tensor {
        let out = self.map_data(f64::abs);
        self.unary(Op::Abs, out)
    }

    /// Natural log of the input clamped to at least [`LOG_CLAMP`].
    pub fn log(&self) -> Tensor {
        let out = self.map_data(|x| x.max(LOG_CLAMP).ln());
        self.unary(Op::Log, out)
    }

    /// Elementwise power with a fixed exponent.
    pub fn powf(&self, p: f64) -> Tensor {
        // the focal exponent is usually a small integer; x.powf is slow
        let out = if p == 2.0 {
            self.map_data(|x| x * x)
        } else if p == 1.0 {
            self.map_data(|x| x)
        } else if p == 0.0 {
            self.map_data(|_| 1.0)
        } else {
            self.map_data(|x| x.powf(p))
        };
        self.unary(Op::Powf(p), out)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.map_data(sigmoid);
        self.unary(Op::Sigmoid, out)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self.map_data(gelu);
        self.unary(Op::Gelu, out)
    }

    fn map_data(&self, f: impl Fn(f64) -> f64) -> Value {
        let g = self.graph.inner.borrow();
        let v = &g.values[self.id];
        Value::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    // ── Normalization and attention pieces ──────────────────────────

    /// Numerically stabilized softmax along one axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::BadAxis {
                op: "softmax",
                axis,
                shape: s,
            });
        }
        let out = {
            let g = self.graph.inner.borrow();
            softmax_data(&g.values[self.id], axis)
        };
        Ok(self.unary(Op::Softmax { axis }, out))
    }

    /// Layer normalization over the last axis, then affine by gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.with_peer(gain)?;
        self.with_peer(bias)?;
        let s = self.shape();
        let d = *s.last().ok_or(Error::BadShape {
            op: "layer_norm",
            shape: s.clone(),
            reason: "rank >= 1 required".into(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: gain.shape(),
            });
        }
        let out = {
            let g = self.graph.inner.borrow();
            layer_norm_data(
                &g.values[self.id],
                g.values[gain.id].data(),
                g.values[bias.id].data(),
                eps,
            )
        };
        Ok(self.graph.push(
            Op::LayerNorm { eps },
            vec![self.id, gain.id, bias.id],
            out,
            false,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let g = self.graph.inner.borrow();
        let s = sum_fixed(g.values[self.id].data());
        drop(g);
        self.unary(Op::SumAll, Value::scalar(s))
    }

    pub fn mean_all(&self) -> Tensor {
        let g = self.graph.inner.borrow();
        let v = &g.values[self.id];
        let s = sum_fixed(v.data()) / v.numel() as f64;
        drop(g);
        self.unary(Op::MeanAll, Value::scalar(s))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::BadAxis {
                op: if mean { "mean_axis" } else { "sum_axis" },
                axis,
                shape: s,
            });
        }
        let (out_shape, out) = {
            let g = self.graph.inner.borrow();
            reduce_axis_data(&g.values[self.id], axis, mean)
        };
        let op = if mean {
            Op::MeanAxis { axis }
        } else {
            Op::SumAxis { axis }
        };
        Ok(self.unary(op, Value::new(out_shape, out).unwrap()))
    }

    // ── Structure ───────────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::BadShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        for p in parts {
            first.with_peer(p)?;
        }
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::BadAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let out = {
            let g = first.graph.inner.borrow();
            let vals: Vec<&Value> = parts.iter().map(|p| &g.values[p.id]).collect();
            concat_data(&vals, axis, &out_shape)
        };
        Ok(first.graph.push(
            Op::Concat { axis },
            parts.iter().map(|p| p.id).collect(),
            Value::new(out_shape, out).unwrap(),
            false,
        ))
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::BadAxis {
                op: "slice",
                axis,
                shape: s,
            });
        }
        if start > end || end > s[axis] {
            return Err(Error::BadShape {
                op: "slice",
                shape: s,
                reason: format!("range {start}..{end} out of bounds"),
            });
        }
        let mut out_shape = s.clone();
        out_shape[axis] = end - start;
        let out = {
            let g = self.graph.inner.borrow();
            slice_data(&g.values[self.id], axis, start, end)
        };
        Ok(self.unary(
            Op::Slice { axis, start, end },
            Value::new(out_shape, out).unwrap(),
        ))
    }

    /// Reinterpret the data with a new shape of the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} expected", self.numel()),
            });
        }
        let v = {
            let g = self.graph.inner.borrow();
            Value::new(shape.to_vec(), g.values[self.id].data().to_vec()).unwrap()
        };
        Ok(self.unary(Op::Reshape, v))
    }

    /// Split a `[channels, side, side]` image into raster-ordered flattened
    /// patches of shape `[n, channels·patch²]`.
    pub fn extract_patches(&self, patch: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[1] != s[2] || patch == 0 || s[1] % patch != 0 {
            return Err(Error::BadShape {
                op: "extract_patches",
                shape: s,
                reason: format!("square [c, s, s] with side divisible by {patch} required"),
            });
        }
        let out = {
            let g = self.graph.inner.borrow();
            extract_patches_data(&g.values[self.id], patch)
        };
        Ok(self.unary(Op::ExtractPatches { patch }, out))
    }

    /// Bilinear upsampling of `[c, h, w]` planes (align-corners=false: source
    /// coordinates are `(dst + 0.5)·size_in/size_out − 0.5`, clamped).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::BadShape {
                op: "upsample_bilinear",
                shape: s,
                reason: "non-empty [c, h, w] required".into(),
            });
        }
        let out = {
            let g = self.graph.inner.borrow();
            upsample_data(&g.values[self.id], out_h, out_w)
        };
        Ok(self.unary(Op::Upsample2d { out_h, out_w }, out))
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn clamp_den(b: f64) -> f64 {
    if b.abs() < LOG_CLAMP {
        if b.is_sign_negative() {
            -LOG_CLAMP
        } else {
            LOG_CLAMP
        }
    } else {
        b
    }
}

/// Fixed-order summation (same accumulator scheme as `dot`).
fn sum_fixed(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let cx = x.chunks_exact(4);
    let rem = cx.remainder();
    for a in cx {
        acc[0] += a[0];
        acc[1] += a[1];
        acc[2] += a[2];
        acc[3] += a[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for a in rem {
        s += a;
    }
    s
}

// ── Array kernels ───────────────────────────────────────────────────

fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Decompose a shape around `axis` into (outer, k, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, k, inner)
}

fn softmax_data(v: &Value, axis: usize) -> Value {
    let (outer, k, inner) = axis_split(v.shape(), axis);
    let x = v.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * k + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                mx = mx.max(x[idx(j)]);
            }
            let mut z = 0.0;
            for j in 0..k {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..k {
                out[idx(j)] /= z;
            }
        }
    }
    Value::new(v.shape().to_vec(), out).unwrap()
}

fn layer_norm_data(v: &Value, gain: &[f64], bias: &[f64], eps: f64) -> Value {
    let d = *v.shape().last().unwrap();
    let rows = v.numel() / d;
    let x = v.data();
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = sum_fixed(row) / d as f64;
        let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - mu) * inv * gain[j] + bias[j];
        }
    }
    Value::new(v.shape().to_vec(), out).unwrap()
}

fn reduce_axis_data(v: &Value, axis: usize, mean: bool) -> (Vec<usize>, Vec<f64>) {
    let (outer, k, inner) = axis_split(v.shape(), axis);
    let x = v.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..k {
            let src = &x[(o * k + j) * inner..(o * k + j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..inner {
                dst[i] += src[i];
            }
        }
    }
    if mean && k > 0 {
        for e in &mut out {
            *e /= k as f64;
        }
    }
    let mut out_shape = v.shape().to_vec();
    out_shape.remove(axis);
    (out_shape, out)
}

fn concat_data(parts: &[&Value], axis: usize, out_shape: &[usize]) -> Vec<f64> {
    let (outer, k_total, inner) = axis_split(out_shape, axis);
    let mut out = vec![0.0; outer * k_total * inner];
    let mut offset = 0;
    for p in parts {
        let k = p.shape()[axis];
        let x = p.data();
        for o in 0..outer {
            let src = &x[o * k * inner..(o + 1) * k * inner];
            let dst_start = (o * k_total + offset) * inner;
            out[dst_start..dst_start + k * inner].copy_from_slice(src);
        }
        offset += k;
    }
    out
}

fn slice_data(v: &Value, axis: usize, start: usize, end: usize) -> Vec<f64> {
    let (outer, k, inner) = axis_split(v.shape(), axis);
    let ks = end - start;
    let x = v.data();
    let mut out = vec![0.0; outer * ks * inner];
    for o in 0..outer {
        let src_start = (o * k + start) * inner;
        out[o * ks * inner..(o + 1) * ks * inner]
            .copy_from_slice(&x[src_start..src_start + ks * inner]);
    }
    out
}

fn extract_patches_data(v: &Value, patch: usize) -> Value {
    let c = v.shape()[0];
    let s = v.shape()[1];
    let grid = s / patch;
    let n = grid * grid;
    let pd = c * patch * patch;
    let x = v.data();
    let mut out = vec![0.0; n * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let r = gy * grid + gx;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        let src = (ch * s + gy * patch + py) * s + gx * patch + px;
                        out[r * pd + (ch * patch + py) * patch + px] = x[src];
                    }
                }
            }
        }
    }
    Value::new(vec![n, pd], out).unwrap()
}

/// Per-axis bilinear sample table: (lo index, hi index, hi weight).
fn bilerp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn upsample_data(v: &Value, out_h: usize, out_w: usize) -> Value {
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let ty = bilerp_table(h, out_h);
    let tx = bilerp_table(w, out_w);
    let x = v.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                dst[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    Value::new(vec![c, out_h, out_w], out).unwrap()
}

// ── Backward ────────────────────────────────────────────────────────

/// Add `g`, mapped through broadcasting, into the gradient of an operand with
/// shape `op_shape`. When the operand was broadcast, contributions along the
/// broadcast axes accumulate.
fn accumulate_broadcast(grad: &mut [f64], op_shape: &[usize], out_shape: &[usize], g: &[f64]) {
    if op_shape == out_shape {
        for (d, s) in grad.iter_mut().zip(g) {
            *d += s;
        }
    } else {
        let map = BroadcastMap::new(out_shape, op_shape);
        for (i, s) in g.iter().enumerate() {
            grad[map.map(i)] += s;
        }
    }
}

fn backprop_node(inner: &mut GraphInner, id: usize, upstream: &[f64]) {
    let GraphInner {
        nodes,
        values,
        grads,
        ..
    } = inner;
    let inputs = &nodes[id].inputs;
    let op = nodes[id].op;
    let mut any = false;
    for &i in inputs.iter() {
        any |= grads[i].is_some();
    }
    if !any {
        return;
    }
    let needs: Vec<bool> = inputs.iter().map(|&i| grads[i].is_some()).collect();
    let out_shape = values[id].shape();

    // Helper to mutate one input's gradient buffer.
    macro_rules! grad_mut {
        ($slot:expr) => {
            grads[inputs[$slot]].as_mut().unwrap()
        };
    }

    match op {
        Op::Leaf => {}
        Op::Matmul => {
            let (m, k) = {
                let s = values[inputs[0]].shape();
                (s[0], s[1])
            };
            let n = values[inputs[1]].shape()[1];
            if needs[0] {
                // dA = dOut · Bᵀ; with B row-major this is an NT product.
                let da = matmul_nt(upstream, values[inputs[1]].data(), m, n, k);
                for (d, s) in grad_mut!(0).iter_mut().zip(&da) {
                    *d += s;
                }
            }
            if needs[1] {
                matmul_tn_acc(values[inputs[0]].data(), upstream, m, k, n, grad_mut!(1));
            }
        }
        Op::Transpose => {
            if needs[0] {
                let s = values[inputs[0]].shape().to_vec();
                let gt = transpose_data(upstream, s[1], s[0]);
                for (d, s) in grad_mut!(0).iter_mut().zip(&gt) {
                    *d += s;
                }
            }
        }
        Op::Add | Op::Sub => {
            for slot in 0..2 {
                if !needs[slot] {
                    continue;
                }
                let shp = values[inputs[slot]].shape().to_vec();
                if op == Op::Sub && slot == 1 {
                    let neg: Vec<f64> = upstream.iter().map(|&x| -x).collect();
                    accumulate_broadcast(grad_mut!(slot), &shp, out_shape, &neg);
                } else {
                    accumulate_broadcast(grad_mut!(slot), &shp, out_shape, upstream);
                }
            }
        }
        Op::Mul | Op::Div => {
            let sa = values[inputs[0]].shape();
            let sb = values[inputs[1]].shape();
            let a = values[inputs[0]].data();
            let b = values[inputs[1]].data();
            if sa == out_shape && sb == out_shape {
                if needs[0] {
                    let ga = grad_mut!(0);
                    for (i, &u) in upstream.iter().enumerate() {
                        ga[i] += match op {
                            Op::Mul => u * b[i],
                            _ => u / clamp_den(b[i]),
                        };
                    }
                }
                if needs[1] {
                    let gb = grad_mut!(1);
                    for (i, &u) in upstream.iter().enumerate() {
                        gb[i] += match op {
                            Op::Mul => u * a[i],
                            _ => {
                                if b[i].abs() < LOG_CLAMP {
                                    0.0
                                } else {
                                    -a[i] * u / (b[i] * b[i])
                                }
                            }
                        };
                    }
                }
                return;
            }
            let ma = BroadcastMap::new(out_shape, sa);
            let mb = BroadcastMap::new(out_shape, sb);
            if needs[0] {
                let ga = grad_mut!(0);
                for (i, &u) in upstream.iter().enumerate() {
                    let bi = b[mb.map(i)];
                    let v = match op {
                        Op::Mul => u * bi,
                        _ => u / clamp_den(bi),
                    };
                    ga[ma.map(i)] += v;
                }
            }
            if needs[1] {
                let gb = grad_mut!(1);
                for (i, &u) in upstream.iter().enumerate() {
                    let bi = b[mb.map(i)];
                    let v = match op {
                        Op::Mul => u * a[ma.map(i)],
                        _ => {
                            if bi.abs() < LOG_CLAMP {
                                0.0 // clamped region is flat in the denominator
                            } else {
                                -a[ma.map(i)] * u / (bi * bi)
                            }
                        }
                    };
                    gb[mb.map(i)] += v;
                }
            }
        }
        Op::Scale(s) => {
            if needs[0] {
                for (d, u) in grad_mut!(0).iter_mut().zip(upstream) {
                    *d += s * u;
                }
            }
        }
        Op::AddScalar(_) => {
            if needs[0] {
                for (d, u) in grad_mut!(0).iter_mut().zip(upstream) {
                    *d += u;
                }
            }
        }
        Op::Neg => {
            if needs[0] {
                for (d, u) in grad_mut!(0).iter_mut().zip(upstream) {
                    *d -= u;
                }
            }
        }
        Op::Abs => {
            if needs[0] {
                let x = values[inputs[0]].data();
                let g = grad_mut!(0);
                for i in 0..x.len() {
                    let sgn = if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g[i] += sgn * upstream[i];
                }
            }
        }
        Op::Log => {
            if needs[0] {
                let x = values[inputs[0]].data();
                let g = grad_mut!(0);
                for i in 0..x.len() {
                    if x[i] > LOG_CLAMP {
                        g[i] += upstream[i] / x[i];
                    }
                }
            }
        }
        Op::Powf(p) => {
            if needs[0] && p != 0.0 {
                let x = values[inputs[0]].data();
                let g = grad_mut!(0);
                if p == 2.0 {
                    for i in 0..x.len() {
                        g[i] += 2.0 * x[i] * upstream[i];
                    }
                } else if p == 1.0 {
                    for i in 0..x.len() {
                        g[i] += upstream[i];
                    }
                } else {
                    for i in 0..x.len() {
                        g[i] += p * x[i].powf(p - 1.0) * upstream[i];
                    }
                }
            }
        }
        Op::Sigmoid => {
            if needs[0] {
                let y = values[id].data();
                let g = grad_mut!(0);
                for i in 0..y.len() {
                    g[i] += y[i] * (1.0 - y[i]) * upstream[i];
                }
            }
        }
        Op::Gelu => {
            if needs[0] {
                let x = values[inputs[0]].data();
                let g = grad_mut!(0);
                for i in 0..x.len() {
                    g[i] += gelu_grad(x[i]) * upstream[i];
                }
            }
        }
        Op::Softmax { axis } => {
            if needs[0] {
                let y = values[id].data();
                let (outer, k, inner_e) = axis_split(out_shape, axis);
                let g = grad_mut!(0);
                for o in 0..outer {
                    for i in 0..inner_e {
                        let idx = |j: usize| (o * k + j) * inner_e + i;
                        let mut s = 0.0;
                        for j in 0..k {
                            s += upstream[idx(j)] * y[idx(j)];
                        }
                        for j in 0..k {
                            g[idx(j)] += y[idx(j)] * (upstream[idx(j)] - s);
                        }
                    }
                }
            }
        }
        Op::SumAll => {
            if needs[0] {
                let u = upstream[0];
                for d in grad_mut!(0).iter_mut() {
                    *d += u;
                }
            }
        }
        Op::MeanAll => {
            if needs[0] {
                let n = values[inputs[0]].numel() as f64;
                let u = upstream[0] / n;
                for d in grad_mut!(0).iter_mut() {
                    *d += u;
                }
            }
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            if needs[0] {
                let in_shape = values[inputs[0]].shape().to_vec();
                let (outer, k, inner_e) = axis_split(&in_shape, axis);
                let scale = match op {
                    Op::MeanAxis { .. } => 1.0 / k as f64,
                    _ => 1.0,
                };
                let g = grad_mut!(0);
                for o in 0..outer {
                    for j in 0..k {
                        let dst = &mut g[(o * k + j) * inner_e..(o * k + j + 1) * inner_e];
                        let src = &upstream[o * inner_e..(o + 1) * inner_e];
                        for i in 0..inner_e {
                            dst[i] += scale * src[i];
                        }
                    }
                }
            }
        }
        Op::Concat { axis } => {
            let (outer, k_total, inner_e) = axis_split(out_shape, axis);
            let mut offset = 0;
            for (slot, &inp) in inputs.iter().enumerate() {
                let k = values[inp].shape()[axis];
                if needs[slot] {
                    let g = grads[inp].as_mut().unwrap();
                    for o in 0..outer {
                        let src_start = (o * k_total + offset) * inner_e;
                        let dst = &mut g[o * k * inner_e..(o + 1) * k * inner_e];
                        let src = &upstream[src_start..src_start + k * inner_e];
                        for i in 0..dst.len() {
                            dst[i] += src[i];
                        }
                    }
                }
                offset += k;
            }
        }
        Op::Slice { axis, start, end } => {
            if needs[0] {
                let in_shape = values[inputs[0]].shape().to_vec();
                let (outer, k, inner_e) = axis_split(&in_shape, axis);
                let ks = end - start;
                let g = grad_mut!(0);
                for o in 0..outer {
                    let dst_start = (o * k + start) * inner_e;
                    let dst = &mut g[dst_start..dst_start + ks * inner_e];
                    let src = &upstream[o * ks * inner_e..(o + 1) * ks * inner_e];
                    for i in 0..dst.len() {
                        dst[i] += src[i];
                    }
                }
            }
        }
        Op::Reshape => {
            if needs[0] {
                for (d, u) in grad_mut!(0).iter_mut().zip(upstream) {
                    *d += u;
                }
            }
        }
        Op::LayerNorm { eps } => {
            let x = &values[inputs[0]];
            let gain = values[inputs[1]].data();
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mu = sum_fixed(row) / d as f64;
                let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let u = &upstream[r * d..(r + 1) * d];
                // dxhat, and its means against xhat
                let mut m1 = 0.0; // mean of dxhat
                let mut m2 = 0.0; // mean of dxhat ⊙ xhat
                for j in 0..d {
                    let xh = (row[j] - mu) * inv;
                    let dxh = u[j] * gain[j];
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                m1 /= d as f64;
                m2 /= d as f64;
                if needs[0] {
                    let g = grads[inputs[0]].as_mut().unwrap();
                    let gr = &mut g[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv;
                        let dxh = u[j] * gain[j];
                        gr[j] += (dxh - m1 - xh * m2) * inv;
                    }
                }
                if needs[1] {
                    let g = grads[inputs[1]].as_mut().unwrap();
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv;
                        g[j] += u[j] * xh;
                    }
                }
                if needs[2] {
                    let g = grads[inputs[2]].as_mut().unwrap();
                    for j in 0..d {
                        g[j] += u[j];
                    }
                }
            }
        }
        Op::ExtractPatches { patch } => {
            if needs[0] {
                let in_shape = values[inputs[0]].shape().to_vec();
                let (c, s) = (in_shape[0], in_shape[1]);
                let grid = s / patch;
                let pd = c * patch * patch;
                let g = grad_mut!(0);
                for gy in 0..grid {
                    for gx in 0..grid {
                        let r = gy * grid + gx;
                        for ch in 0..c {
                            for py in 0..patch {
                                for px in 0..patch {
                                    let dst = (ch * s + gy * patch + py) * s + gx * patch + px;
                                    g[dst] += upstream[r * pd + (ch * patch + py) * patch + px];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2d { out_h, out_w } => {
            if needs[0] {
                let in_shape = values[inputs[0]].shape().to_vec();
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let ty = bilerp_table(h, out_h);
                let tx = bilerp_table(w, out_w);
                let g = grad_mut!(0);
                for ch in 0..c {
                    let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                    let src = &upstream[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let u = src[oy * out_w + ox];
                            plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * u;
                            plane[y0 * w + x1] += (1.0 - fy) * fx * u;
                            plane[y1 * w + x0] += fy * (1.0 - fx) * u;
                            plane[y1 * w + x1] += fy * fx * u;
                        }
                    }
                }
            }
        }
    }
}
