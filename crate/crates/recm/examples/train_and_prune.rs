//! Trains the relaxed shape classifier on a symmetric or aligned data
//! distribution, prints the learned modulation scalars, prunes, and
//! reports the equivariance of what remains.
//!
//! Usage: train_and_prune [symmetric|aligned] [steps] [seed]

use rand::SeedableRng;
use recm::experiments::{evaluate, train, ShapeTask, TrainConfig};
use recm::groups::Group;
use recm::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("aligned");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let task = match mode {
        "symmetric" => ShapeTask::symmetric("C4"),
        "aligned" => ShapeTask::aligned("C4"),
        other => {
            eprintln!("unknown mode {other}; use symmetric or aligned");
            std::process::exit(2);
        }
    };
    let cfg = TrainConfig { steps, seed, ..TrainConfig::default() };

    let t0 = std::time::Instant::now();
    let mut out = train(&task, &cfg).expect("training failed");
    println!("mode={mode} steps={steps} seed={seed} wall={:.1?}", t0.elapsed());
    println!(
        "final train loss {:.4}, test loss {:.4}",
        out.final_train_loss, out.test_loss
    );
    for (li, (alphas, beta)) in out.final_alphas.iter().zip(&out.final_betas).enumerate() {
        let labels: Vec<String> = out.model.layers[li]
            .terms
            .iter()
            .map(|t| t.kind.label().to_string())
            .collect();
        let pairs: Vec<String> = labels
            .iter()
            .zip(alphas)
            .map(|(l, a)| format!("{l}={a:+.4}"))
            .collect();
        let h_norm: f64 = out.model.layers[li].state.h.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("layer{li}: beta={beta:.4} |h|={h_norm:.4} alphas [{}]", pairs.join(", "));
    }

    let reports = out.model.prune_all(cfg.prune_eps);
    for (li, r) in reports.iter().enumerate() {
        println!(
            "layer{li} after pruning: kept {:?}, extra params {} (equivariant path {})",
            r.retained, r.retained_unconstrained_params, r.equivariant_params
        );
    }
    let mut rng = Rng::seed_from_u64(123);
    let violation = out
        .model
        .invariance_violation(&Group::by_name("C4").unwrap(), 30, &mut rng);
    println!("post-prune invariance violation: {violation:.3e}");
    let mut test_rng = Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED_5EED_5EED);
    let pruned_loss = evaluate(&mut out.model, &task, cfg.test_samples, &mut test_rng);
    println!("post-prune test loss {pruned_loss:.4}");
}
