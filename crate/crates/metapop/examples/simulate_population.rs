//! Simulate the host-parasite model at a finite scale and print how the
//! patch-type histogram moves.
//!
//! Run with `cargo run --release --example simulate_population`.

use metapop::builtins::HostParasiteParams;
use metapop::rng::RngStream;
use metapop::ssa::{initial_population, simulate, SimOptions};

fn main() -> metapop::Result<()> {
    let params = HostParasiteParams::default();
    let model = params.model()?;
    let space = model.space();
    let init = params.default_init(&model);

    let n = 2000;
    let mut opts = SimOptions::with_grid(8.0, 8);
    opts.truncation_budget = u64::MAX; // tally boundary suppressions, don't stop

    let mut rng = RngStream::new(42);
    let pop = initial_population(&model, n, &init)?;
    let traj = simulate(&model, &pop, &opts, &mut rng)?;

    println!("model: {} (cap {})", model.name(), space.cap());
    println!("n = {n}, horizon = 8, events = {}, stop = {:?}", traj.n_events, traj.stop);
    println!("suppressed boundary events: {}", traj.truncation_losses);
    println!();
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "t", "load 0", "load 1", "load 2", "migrants");
    let i0 = space.index_of(&[0]).unwrap();
    let i1 = space.index_of(&[1]).unwrap();
    let i2 = space.index_of(&[2]).unwrap();
    let mg = space.migrant(0);
    for (t, x) in traj.grid.iter().zip(&traj.snapshots) {
        println!(
            "{:>6.2} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            t, x.values[i0], x.values[i1], x.values[i2], x.values[mg]
        );
    }
    println!();
    println!(
        "final weighted population size <X, mu>/N = {:.4}",
        space.mu_norm(&traj.final_state.scaled())
    );
    Ok(())
}
