//! Integrate the deterministic limit of the host-parasite model through
//! its boom-bust epidemic, then find the equilibrium of the dispersal
//! metapopulation.
//!
//! Run with `cargo run --release --example deterministic_limit`.

use metapop::builtins::{HostParasiteParams, Mg1Params};
use metapop::det::{equilibrium, integrate, EquilibriumOptions, IntegrateOptions};

fn main() -> metapop::Result<()> {
    let params = HostParasiteParams::default();
    let model = params.model()?;
    let space = model.space();
    let init = params.default_init(&model);

    let path = integrate(&model, &init, 40.0, &IntegrateOptions::default())?;
    println!(
        "host-parasite limit to t = {} in {} accepted steps ({} rejected)",
        path.end_time(),
        path.steps_accepted,
        path.steps_rejected
    );
    println!();
    println!("{:>6} {:>12} {:>12}", "t", "hosts", "mean load");
    for &t in &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 20.0, 40.0] {
        let x = path.at(t);
        let hosts = space.interior_l1(&x);
        let load = if hosts > 0.0 { space.interior_load(&x) / hosts } else { 0.0 };
        println!("{:>6.1} {:>12.6} {:>12.6}", t, hosts, load);
    }
    println!("(the epidemic sweeps through, burns out, and the hosts recover)");

    let params = Mg1Params::default();
    let model = params.model()?;
    let space = model.space();
    let eq = equilibrium(&model, &params.default_init(&model), &EquilibriumOptions::default())?;
    println!();
    println!("metapop-dispersal equilibrium (damped-Newton polished):");
    for z in 0..space.n_interior() {
        if eq.values[z] > 1e-10 {
            println!("  occupancy {:>2}: {:.8}", space.total(z), eq.values[z]);
        }
    }
    println!("  migrants:     {:.8}", eq.values[space.migrant(0)]);
    Ok(())
}
