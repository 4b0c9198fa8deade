//! Drives a single relaxed layer's recurrent state by hand and watches
//! the modulation react: fed input/target pairs with a preferred
//! orientation the relaxation weights wake up, fed rotation-balanced
//! pairs they stay asleep.

use rand::Rng as _;
use rand::SeedableRng;
use recm::equivariant::UnconstrainedTerm;
use recm::groups::{c4, GeneratingSet, Representation};
use recm::modulation::{modulation_values, EqPath, RecmLayer, RecmState, UpdateNet};
use recm::equivariant::LinearIntertwiner;
use recm::{Rng, Tensor};

fn build_layer(rng: &mut Rng) -> RecmLayer {
    let eq = EqPath::Intertwiner(LinearIntertwiner::new(
        Tensor::param(vec![2, 2], (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        c4(),
        Representation::Standard,
        Representation::Standard,
    ));
    let terms = vec![
        UnconstrainedTerm::dense(
            Tensor::param(vec![2, 2], (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect()),
            vec![2],
            2.0,
        ),
        UnconstrainedTerm::bias(Tensor::param(vec![2], vec![0.1, -0.1]), 2.0),
    ];
    let net = UpdateNet::new(4, 16, 16, 1.0, rng);
    let state = RecmState::new(16, 2, 0.01, 1.0, rng);
    RecmLayer::new(
        "demo",
        eq,
        terms,
        net,
        state,
        GeneratingSet::canonical_for("C4").unwrap(),
        Representation::Standard,
        Representation::Trivial(2),
    )
}

fn drive(mut layer: RecmLayer, balanced: bool, rng: &mut Rng) {
    let group = c4();
    for step in 0..2_000usize {
        // pairs concentrated along one axis; optionally re-balanced by a
        // random group element so the driving distribution is invariant
        let mut z = vec![1.0 + 0.1 * rng.gen_range(-1.0..1.0), 0.1 * rng.gen_range(-1.0..1.0)];
        let y = vec![0.7, 0.1];
        if balanced {
            let g = group.element(rng.gen_range(0..group.order()));
            let rot = &g.mat * nalgebra::DVector::from_column_slice(&z);
            z = rot.iter().cloned().collect();
        }
        let _ = layer.forward(&Tensor::constant(vec![2], z), None);
        layer.step_hooks(&[y]).unwrap();
        if (step + 1) % 500 == 0 {
            let (alphas, beta) = modulation_values(&layer.state);
            let h_norm: f64 = layer.state.h.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!(
                "  step {:>4}: |h| = {h_norm:.3}, beta = {beta:.3}, alphas = {alphas:.4?}",
                step + 1
            );
        }
    }
}

fn main() {
    let mut rng = Rng::seed_from_u64(10);
    println!("oriented drivers (symmetry broken):");
    drive(build_layer(&mut rng), false, &mut rng);

    let mut rng = Rng::seed_from_u64(10);
    println!("rotation-balanced drivers (no pressure to relax):");
    drive(build_layer(&mut rng), true, &mut rng);
}
