//! Shared oracles for unit tests: finite-difference gradient checking and
//! seeded random values. Compiled only for tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Tensor};
use crate::value::Value;

pub(crate) fn randv(seed: u64, shape: &[usize]) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Value::randn(&mut rng, shape, 1.0)
}

/// Central finite differences (step 1e-5, double precision) against analytic
/// gradients. `build` must construct the same scalar loss from fresh leaves.
pub(crate) fn fd_check(
    inputs: &[Value],
    tol: f64,
    build: impl Fn(&Graph, &[Tensor]) -> Tensor,
) {
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
