//! Measures how far a distribution is from being symmetric and shows the
//! two-sided certificate attached to that gap: the expectation of any
//! generator-centered update function is trapped below 2 B W1(p, p_G),
//! and a trained Lipschitz potential recovers a matching share of the
//! dual optimum from below.

use rand::SeedableRng;
use recm::groups::{c4, GeneratingSet, Representation};
use recm::modulation::UpdateNet;
use recm::transport::{
    kantorovich_lower, symmetrize_full, symmetrize_generators, total_variation,
    verify_upper_bound, wasserstein1, EmpiricalDistribution,
};
use recm::Rng;

fn main() {
    let mut rng = Rng::seed_from_u64(7);
    let group = c4();
    let gens = GeneratingSet::canonical_for("C4").unwrap();
    let rep = Representation::Standard;

    // a lopsided three-atom distribution over (z, y) pairs in R^2 x R^2
    let p = EmpiricalDistribution::new(
        vec![
            vec![1.0, 0.2, 0.5, 0.0],
            vec![0.8, -0.1, 0.0, 0.5],
            vec![-0.3, 0.9, 0.2, 0.2],
        ],
        vec![0.5, 0.3, 0.2],
        2,
    )
    .unwrap();

    let p_sym = symmetrize_full(&p, &group, &rep, &rep);
    let (w1, plan) = wasserstein1(&p, &p_sym).unwrap();
    println!("W1(p, p_G) = {w1:.5} via {} transport arcs", plan.flows.len());
    println!("TV(p, generator average) = {:.5}", {
        let avg = symmetrize_generators(&p, &gens, &rep, &rep);
        total_variation(&p, &avg)
    });

    // upper certificate for a few random update networks
    for k in 0..3 {
        let net = UpdateNet::new(4, 16, 16, 0.5 + 0.5 * k as f64, &mut rng);
        let check = verify_upper_bound(&net, &p, &group, &gens, &rep, &rep).unwrap();
        let max_lhs = check.lhs.iter().cloned().fold(0.0f64, f64::max);
        println!(
            "net {k}: max |E_p[l]| = {max_lhs:.5} <= bound {:.5} (margin {:.5})",
            check.rhs.iter().cloned().fold(f64::INFINITY, f64::min),
            check.margin
        );
    }

    // dual search from below with a unit Lipschitz budget
    let lower = kantorovich_lower(&p, &gens, &rep, &rep, 1.0, 400, 0.05, &mut rng).unwrap();
    println!(
        "dual search: achieved {:.5} of optimum {:.5} (ratio {:.2})",
        lower.achieved,
        lower.lipschitz * lower.w1_gen,
        lower.ratio
    );

    // the symmetrized distribution is a fixed point: its gap vanishes
    let fully = symmetrize_full(&p, &group, &rep, &rep);
    let (w1_fixed, _) = wasserstein1(&fully, &symmetrize_full(&fully, &group, &rep, &rep)).unwrap();
    println!("gap of the symmetrized distribution: {w1_fixed:.2e}");
}
