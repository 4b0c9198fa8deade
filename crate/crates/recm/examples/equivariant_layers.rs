//! Builds exactly equivariant linear layers two ways — group-averaged
//! projection of an arbitrary matrix for finite groups, and channel
//! mixing of geometric features for the rotation groups — and checks
//! both numerically over random group elements.

use rand::Rng as _;
use rand::SeedableRng;
use recm::equivariant::{check_equivariance, ChannelMixLayer, FeatureLayout, LinearIntertwiner};
use recm::groups::{c4, s3, Group, Representation};
use recm::{Rng, Tensor};

fn main() {
    let mut rng = Rng::seed_from_u64(3);

    // projecting a random 2x2 matrix onto the maps that commute with the
    // quarter-turn rotations
    let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    println!("raw matrix: {raw:.3?}");
    let layer = LinearIntertwiner::new(
        Tensor::param(vec![2, 2], raw),
        c4(),
        Representation::Standard,
        Representation::Standard,
    );
    println!("projected : {:.3?}", layer.projected().value());
    let violation = check_equivariance(
        |x| {
            let v: Vec<f64> = (0..2).map(|i| x[(i, 0)]).collect();
            let out = layer.forward(&Tensor::constant(vec![2], v)).value();
            nalgebra::DMatrix::from_column_slice(2, 1, &out)
        },
        &Group::Finite(c4()),
        &Representation::Standard,
        FeatureLayout::Vector,
        &Representation::Standard,
        FeatureLayout::Vector,
        0,
        100,
        &mut rng,
    );
    println!("C4 equivariance violation: {violation:.2e}");

    // the same construction for a permutation group
    let layer = LinearIntertwiner::new(
        Tensor::param(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        s3(),
        Representation::Standard,
        Representation::Standard,
    );
    println!(
        "S3 projected matrix (diagonal + constant pattern): {:.3?}",
        layer.projected().value()
    );

    // for continuous rotations no averaging is needed: mixing whole
    // geometric channels commutes with the action by construction
    let group = Group::by_name("SO3").unwrap();
    let channels = 4;
    let mix = ChannelMixLayer::new(Tensor::param(
        vec![channels, channels],
        (0..channels * channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let violation = check_equivariance(
        |x| {
            let v: Vec<f64> = (0..channels).flat_map(|i| (0..3).map(move |j| x[(i, j)])).collect();
            let out = mix.forward(&Tensor::constant(vec![channels, 3], v)).value();
            nalgebra::DMatrix::from_row_slice(channels, 3, &out)
        },
        &group,
        &Representation::Standard,
        FeatureLayout::Channels,
        &Representation::Standard,
        FeatureLayout::Channels,
        channels,
        100,
        &mut rng,
    );
    println!("SO(3) channel-mix violation over Haar samples: {violation:.2e}");
}
