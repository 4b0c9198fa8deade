//! The planar two-body integrator as a physically equivariant map:
//! rotating the initial conditions and integrating gives the same result
//! as integrating first and rotating the outcome. A clean target for
//! layers whose equivariance is supposed to be worth keeping.

use rand::SeedableRng;
use recm::experiments::{integrate_twobody, sample_twobody_initial};
use recm::groups::Group;
use recm::Rng;

fn rotate_state(state: &[f64], c: f64, s: f64) -> Vec<f64> {
    state
        .chunks(2)
        .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect()
}

fn main() {
    let mut rng = Rng::seed_from_u64(21);
    let group = Group::by_name("SO2").unwrap();

    let mut worst = 0.0f64;
    for trial in 0..5 {
        let init = sample_twobody_initial(&mut rng);
        let g = group.haar_sample(&mut rng);
        let (c, s) = (g.mat[(0, 0)], g.mat[(1, 0)]);

        let final_then_rotate = rotate_state(&integrate_twobody(&init, 1e-3, 2_000), c, s);
        let rotate_then_final = integrate_twobody(&rotate_state(&init, c, s), 1e-3, 2_000);

        let err = final_then_rotate
            .iter()
            .zip(&rotate_then_final)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(err);
        println!(
            "trial {trial}: rotation angle {:+.3} rad, commutation error {err:.2e}",
            s.atan2(c)
        );
    }
    println!("worst over 5 trials: {worst:.2e}");
}
