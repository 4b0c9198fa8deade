//! Shows the recurrent optimization state settling onto the mean of its
//! driving signal: the decaying convex-combination update has the exact
//! closed form h_T = (b h_0 + a sum l_t) / (b + a T), so its fluctuation
//! around the mean shrinks like sqrt(T) / T.

use recm::experiments::{lemma_harness, run_state_recursion};

fn main() {
    let (h0, mean, sd) = (2.0, 0.5, 0.4);
    println!("h0 = {h0}, driving mean = {mean}, driving sd = {sd}, a = b = 1");
    println!("{:>8} {:>12} {:>12} {:>12}", "T", "h_T", "|h_T-E[h_T]|", "3*stderr");
    for t_max in [100usize, 1_000, 10_000, 100_000] {
        let res = lemma_harness(h0, 1.0, 1.0, t_max, mean, sd, 99);
        println!(
            "{t_max:>8} {:>12.6} {:>12.6} {:>12.6}{}",
            res.h_final,
            (res.h_final - res.expected).abs(),
            3.0 * res.stderr,
            if res.within_3_stderr { "" } else { "  <- outside" }
        );
    }

    // constant driver: the closed form is exact to roundoff
    let ls = vec![-0.75f64; 50_000];
    let (h, closed) = run_state_recursion(h0, 1.0, 1.0, &ls);
    println!("constant driver: recursion {h:.12}, closed form {closed:.12}, gap {:.2e}", (h - closed).abs());

    // slower forgetting (small a) keeps more of h0 at the same horizon
    for a in [1.0, 1e-2, 1e-3] {
        let res = lemma_harness(h0, a, 1.0, 10_000, mean, sd, 7);
        let lam = 1.0 / (1.0 + a * 10_000.0);
        println!("a = {a:>6}: h_T = {:+.4}, h0 weight = {lam:.4}", res.h_final);
    }
}
