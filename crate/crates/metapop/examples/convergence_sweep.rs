//! Measure how fast finite-scale trajectories approach the deterministic
//! limit: the median sup-norm error should shrink like 1/sqrt(N).
//!
//! Run with `cargo run --release --example convergence_sweep`.

use metapop::harness::{run_converge, ExperimentSpec};

fn main() -> metapop::Result<()> {
    let spec = ExperimentSpec {
        ns: vec![200, 800, 3200],
        horizon: 4.0,
        replicas: 50,
        seed: 7,
        ..ExperimentSpec::new("host-parasite")
    };
    let report = run_converge(&spec)?;

    println!("model: {} horizon: {} replicas/scale: {}", spec.model, spec.horizon, spec.replicas);
    println!();
    println!("{:>6} {:>6} {:>10} {:>22} {:>10} {:>10}", "n", "used", "excluded", "median sup-mu-error", "q1", "q3");
    for r in &report.rows {
        println!(
            "{:>6} {:>6} {:>10} {:>22.6} {:>10.6} {:>10.6}",
            r.n, r.used, r.excluded, r.median_sup_mu_error, r.q1, r.q3
        );
    }
    println!();
    println!("successive error ratios (1/2 expected for 4x scale steps): {:?}", report.ratios);
    println!("strictly decreasing: {}", report.strictly_decreasing);
    Ok(())
}
