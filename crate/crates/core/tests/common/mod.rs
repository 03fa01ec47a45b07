//! Shared oracles for the integration and acceptance suites. Everything here
//! is independent of the library's computation paths: finite differences for
//! gradients, plain loops for matrix products and argmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zegseg_core::{Graph, Tensor, Value};

pub fn randv(seed: u64, shape: &[usize]) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Value::randn(&mut rng, shape, 1.0)
}

/// Central finite differences (step 1e-5, double precision) against analytic
/// gradients, relative error at most `tol`.
pub fn fd_check(inputs: &[Value], tol: f64, build: impl Fn(&Graph, &[Tensor]) -> Tensor) {
    let h = 1e-5;
    let graph = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| graph.leaf(v.clone(), true)).collect();
    let loss = build(&graph, &leaves);
    loss.backward().unwrap();
    let grads: Vec<Value> = leaves.iter().map(|l| l.grad().expect("grad")).collect();

    let eval = |vals: &[Value]| -> f64 {
        let g = Graph::new();
        let ls: Vec<Tensor> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
        build(&g, &ls).scalar_value()
    };
    for (vi, v) in inputs.iter().enumerate() {
        for e in 0..v.numel() {
            let mut plus = inputs.to_vec();
            plus[vi].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[vi].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads[vi].data()[e];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom <= tol,
                "input {vi} elem {e}: analytic {an} vs fd {fd}"
            );
        }
    }
}

/// Plain-loop matrix product used as the independent route for decoder checks.
pub fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn add_bias(mut m: Vec<f64>, bias: &[f64], rows: usize) -> Vec<f64> {
    let cols = bias.len();
    for r in 0..rows {
        for c in 0..cols {
            m[r * cols + c] += bias[c];
        }
    }
    m
}
