//! Simulation and numerical verification toolkit for structured
//! metapopulation models: finitely many patches carrying a composition of
//! animals of `d` varieties, plus migrant pools with explicit slot
//! bookkeeping, evolving as a density-dependent Markov population process.
//!
//! The crate covers the whole pipeline from model definition to verdict:
//!
//! * [`model`] — type space, states, rate structure, event enumeration;
//! * [`ssa`] — exact stochastic simulation of the scaled process;
//! * [`det`] — deterministic (fluid-limit) solver, drift splitting,
//!   equilibria;
//! * [`tagged`] — tagged patches and individuals, couplings, independence
//!   diagnostics;
//! * [`audit`] — numerical checks of the growth and Lipschitz conditions
//!   behind the fluid approximation;
//! * [`branching`] — offspring statistics of an invading lineage: mean
//!   counts, Malthusian parameter, extinction probability;
//! * [`harness`] — experiment orchestration, built-in models, CSV/JSON
//!   reporting.
//!
//! Every experiment is reproducible: a seed plus a model spec determines
//! the byte content of all outputs. Worker-count control: set
//! `METAPOP_WORKERS` (falls back to one worker per core).
//!
//! Each major capability has a runnable example under `examples/`, e.g.
//! `cargo run --release --example convergence_sweep`.

pub mod audit;
pub mod branching;
pub mod builtins;
pub mod det;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod ssa;
pub mod stats;
pub mod tagged;

pub use error::{Error, Result};
