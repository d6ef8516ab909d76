//! Audit the growth conditions behind the deterministic approximation:
//! per-type first and second moments of the jump kernel must stay bounded
//! relative to the patch weight, independent of where the occupancy cap
//! sits. The built-in models pass; a quadratic-rate chain is flagged.
//!
//! Run with `cargo run --release --example assumption_audit`.

use metapop::harness::{run_audit, ExperimentSpec};

fn main() -> metapop::Result<()> {
    for model in ["host-parasite", "metapop-dispersal", "quadratic-growth"] {
        let spec = ExperimentSpec { horizon: 5.0, ..ExperimentSpec::new(model) };
        let report = run_audit(&spec)?;
        println!("== {model} ==");
        println!(
            "{:>34} {:>12} {:>12} {:>8}",
            "condition", "constant", "widened cap", "flag"
        );
        let cmp = report.cap_comparison.as_ref().unwrap();
        for (b, w) in report.conditions.conditions.iter().zip(&cmp.wide.conditions) {
            let flagged = cmp.flags.iter().any(|f| f.name == b.name);
            println!(
                "{:>34} {:>12.4} {:>12.4} {:>8}",
                b.name,
                b.constant,
                w.constant,
                if flagged { "GREW" } else { "ok" }
            );
        }
        println!(
            "weight drift: {:.4}  rate Lipschitz: {:.4}  cap-independent: {}",
            report.weight_drift,
            report.sensitivity.rate_lipschitz,
            report.cap_independent.unwrap()
        );
        println!();
    }
    Ok(())
}
