//! Dense row-major f64 arrays: the storage behind graph tensors, plus the
//! shape/broadcast arithmetic and the matmul kernels shared by forward and
//! backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense N-dimensional array of f64 in row-major order.
///
/// Scalars use the empty shape `[]` (one element). Zero extents are allowed
/// and yield empty data (useful for degenerate prompt banks).
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadShape {
                op: "Value::new",
                shape,
                reason: format!("{} elements provided", data.len()),
            });
        }
        Ok(Value { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Value {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Gaussian init, mean 0, given std, in iteration order of the rng.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Value {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }

    /// 2-D constructor from nested rows (test and fixture convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Value {
            shape: vec![r, c],
            data,
        }
    }

    /// Round every element through f32 and back. File payloads are f32, so
    /// generators call this to make in-memory and reloaded data identical.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes: ranks are right-aligned, the shorter one padded with
/// leading 1s; each axis pair must be equal or contain a 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Iterator-free mapping from an output linear index to an operand linear
/// index under broadcasting. `operand` is right-aligned against `out_shape`.
pub(crate) struct BroadcastMap {
    // per output axis: stride into the operand (0 where the operand broadcasts)
    strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl BroadcastMap {
    pub(crate) fn new(out_shape: &[usize], operand: &[usize]) -> Self {
        let rank = out_shape.len();
        let pad = rank - operand.len();
        let op_strides = strides(operand);
        let mut st = vec![0; rank];
        for i in 0..rank {
            if i >= pad && operand[i - pad] != 1 {
                st[i] = op_strides[i - pad];
            }
        }
        BroadcastMap {
            strides: st,
            out_shape: out_shape.to_vec(),
        }
    }

    pub(crate) fn map(&self, mut lin: usize) -> usize {
        let mut off = 0;
        for i in (0..self.out_shape.len()).rev() {
            let e = self.out_shape[i];
            let ix = lin % e;
            lin /= e;
            off += ix * self.strides[i];
        }
        off
    }
}

/// Dot product with eight fixed accumulator lanes. The summation order is a
/// pure function of the length, so results are bitwise reproducible.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let rx = cx.remainder();
    let ry = cy.remainder();
    for (a, b) in cx.zip(cy) {
        for lane in 0..8 {
            acc[lane] += a[lane] * b[lane];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (a, b) in rx.iter().zip(ry) {
        s += a * b;
    }
    s
}

/// out[m×n] = a[m×k] · b[k×n]. Backed by a blocked dgemm kernel; for fixed
/// shapes the reduction order is fixed, so results are reproducible run to
/// run. [`matmul_naive`] is the independent reference used by tests.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    dgemm(a, (k, 1), b, (n, 1), &mut out, m, k, n, 0.0);
    out
}

/// out[m×n] = a[m×k] · bt[n×k]ᵀ, i.e. out[i][j] = dot(a row i, bt row j).
pub(crate) fn matmul_nt(a: &[f64], bt: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    dgemm(a, (k, 1), bt, (1, k), &mut out, m, k, n, 0.0);
    out
}

/// out[k×n] += aᵀ[k×m] · g[m×n]. Used for the weight-side matmul gradient.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    dgemm(a, (1, k), g, (n, 1), out, k, m, n, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Textbook row-major matrix product; the reference implementation that the
/// dgemm-backed kernels are checked against.
#[allow(dead_code)]
pub(crate) fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let w = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += w * b[l * n + j];
            }
        }
    }
    out
}
