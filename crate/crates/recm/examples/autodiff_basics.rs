//! Minimal tour of the reverse-mode tensor engine: build a small graph,
//! pull gradients back through it, and confirm them against central
//! finite differences.

use rand::Rng as _;
use rand::SeedableRng;
use recm::tensor::gradcheck;
use recm::{Rng, Tensor};

fn main() {
    let mut rng = Rng::seed_from_u64(42);

    // y = sum( gelu(W x + b) ^ 2 )
    let w = Tensor::param(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let b = Tensor::param(vec![3, 1], vec![0.1, -0.2, 0.3]);
    let x = Tensor::constant(vec![4, 1], vec![0.5, -1.0, 0.25, 0.8]);

    let h = w.matmul(&x).add(&b).gelu();
    let y = h.mul(&h).sum();
    println!("forward value: {:.6}", y.value()[0]);

    y.backward();
    println!("dy/db = {:?}", b.grad());

    // the same graph, rebuilt inside a closure so finite differences can
    // re-evaluate it at perturbed parameters
    let rel = gradcheck(&[w.clone(), b.clone()], || {
        let h = w.matmul(&x).add(&b).gelu();
        h.mul(&h).sum()
    });
    println!("max relative error vs central differences: {rel:.3e}");

    // a chain mixing the shaped ops used by the models: row norms as a
    // gate, elementwise transcendentals, log-sum readout
    let p = Tensor::param(vec![4, 2], (0..8).map(|_| rng.gen_range(0.2..1.0)).collect());
    let rel = gradcheck(&[p.clone()], || {
        let gate = p.row_norms().sigmoid();
        p.scale_rows(&gate).tanh().exp().sum().ln()
    });
    println!("shaped-op chain relative error: {rel:.3e}");
}
