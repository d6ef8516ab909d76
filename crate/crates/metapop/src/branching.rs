//! Invasion lineages as a branching process.
//!
//! When a rare variety invades an established population, each of its
//! migrants founds a lineage that lives and dies inside a single patch
//! while the surrounding population stays (to first order) at a frozen
//! density. Counting the migrant children such a lineage emits turns the
//! invasion into a general branching process whose individuals are
//! migrants: the reproduction measure `m(t)`, its total mass `m̄`, the
//! growth exponent and the extinction probability decide whether the
//! invasion can establish.
//!
//! [`InvasionChain`] holds the lineage dynamics (a time-homogeneous jump
//! chain — the environment is frozen); [`simulate_w`] runs one founder to
//! lineage extinction; [`collect_offspring`] aggregates replicas into a
//! [`ReproductionEstimate`] with the Malthusian root, and
//! [`extinction_prob`] iterates the empirical offspring generating
//! function to the establishment-failure probability.

use crate::builtins::{Mg1Params, Mg2Params};
use crate::error::{Error, Result};
use crate::model::ScaledState;
use crate::rng::RngStream;
use crate::stats;

// ── Lineage chain ────────────────────────────────────────────────────────

/// Dynamics of one invading lineage in a frozen environment.
///
/// The founder is a migrant. It either dies or settles in a patch drawn
/// by availability; from then on the lineage members give birth in the
/// patch, emit migrant children (the *offspring* of the branching
/// process), and die, while resident occupants of the same patch breed,
/// die and receive arrivals on their own clock. A patch catastrophe ends
/// the lineage. All rates mirror the truncated population model exactly,
/// including the occupancy gate on births, emissions and arrivals.
#[derive(Clone, Debug, PartialEq)]
pub struct InvasionChain {
    /// Occupancy at which births, emissions and arrivals switch off.
    limit: u32,
    inv_birth: f64,
    inv_dispersal: f64,
    inv_death: f64,
    inv_settle: f64,
    inv_migrant_death: f64,
    res_birth: f64,
    res_dispersal: f64,
    res_death: f64,
    res_settle: f64,
    catastrophe: f64,
    /// Density of settleable patches holding `i` residents, `i < limit`.
    patch_density: Vec<f64>,
    /// Density of resident migrants feeding arrivals into the patch.
    res_migrant_density: f64,
}

impl InvasionChain {
    /// Lineage of variety `invader` (0 or 1) invading the two-variety
    /// competition model at the frozen resident density `env` (a scaled
    /// state of that model). The environment must be effectively free of
    /// the invading variety.
    pub fn from_competition(
        params: &Mg2Params,
        invader: usize,
        env: &ScaledState,
    ) -> Result<Self> {
        if invader > 1 {
            return Err(Error::Config("invader variety must be 0 or 1".into()));
        }
        let resident = 1 - invader;
        let model = params.model()?;
        let space = model.space();
        if env.values.len() != space.len() {
            return Err(Error::Config(
                "environment does not match the competition model's type space".into(),
            ));
        }
        // A lineage analysis needs the invader absent from the background.
        let mut invader_mass = env.values[space.migrant(invader)];
        for i in 0..space.n_interior() {
            if space.comp(i)[invader] > 0 {
                invader_mass += env.values[i];
            }
        }
        if invader_mass > 1e-9 {
            return Err(Error::Config(format!(
                "environment carries invader mass {invader_mass:.3e}; \
                 the lineage approximation needs a resident-only background"
            )));
        }
        let limit = params.occupancy_limit;
        let mut patch_density = vec![0.0; limit as usize];
        for (i, dens) in patch_density.iter_mut().enumerate() {
            let mut comp = [0u32; 2];
            comp[resident] = i as u32;
            if let Some(idx) = space.index_of(&comp) {
                *dens = env.values[idx];
            }
        }
        let chain = InvasionChain {
            limit,
            inv_birth: params.birth[invader],
            inv_dispersal: params.dispersal[invader],
            inv_death: params.death[invader],
            inv_settle: params.settle[invader],
            inv_migrant_death: params.migrant_death[invader],
            res_birth: params.birth[resident],
            res_dispersal: params.dispersal[resident],
            res_death: params.death[resident],
            res_settle: params.settle[resident],
            catastrophe: params.catastrophe,
            patch_density,
            res_migrant_density: env.values[space.migrant(resident)],
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Lineage of the single-variety dispersal model invading its own
    /// background at the frozen density `env` (a scaled state of that
    /// model). Background occupants act as residents with the same
    /// parameters as the lineage.
    pub fn from_dispersal(params: &Mg1Params, env: &ScaledState) -> Result<Self> {
        let model = params.model()?;
        let space = model.space();
        if env.values.len() != space.len() {
            return Err(Error::Config(
                "environment does not match the dispersal model's type space".into(),
            ));
        }
        let limit = params.occupancy_limit;
        let mut patch_density = vec![0.0; limit as usize];
        for (i, dens) in patch_density.iter_mut().enumerate() {
            if let Some(idx) = space.index_of(&[i as u32]) {
                *dens = env.values[idx];
            }
        }
        let chain = InvasionChain {
            limit,
            inv_birth: params.birth,
            inv_dispersal: params.dispersal,
            inv_death: params.death,
            inv_settle: params.settle,
            inv_migrant_death: params.migrant_death,
            res_birth: params.birth,
            res_dispersal: params.dispersal,
            res_death: params.death,
            res_settle: params.settle,
            catastrophe: params.catastrophe,
            patch_density,
            res_migrant_density: env.values[space.migrant(0)],
        };
        chain.validate()?;
        Ok(chain)
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.inv_birth,
            self.inv_dispersal,
            self.inv_death,
            self.inv_settle,
            self.inv_migrant_death,
            self.res_birth,
            self.res_dispersal,
            self.res_death,
            self.res_settle,
            self.catastrophe,
            self.res_migrant_density,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self.patch_density.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("lineage rates must be finite and nonnegative".into()));
        }
        if self.limit == 0 {
            return Err(Error::Config("occupancy limit must be positive".into()));
        }
        if self.inv_death <= 0.0 && self.catastrophe <= 0.0 {
            return Err(Error::Config(
                "lineage members need a positive death or catastrophe rate, \
                 otherwise the lineage never ends"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Probability that the founder settles at all, given the frozen
    /// availability of patches.
    pub fn settlement_probability(&self) -> f64 {
        let s: f64 = self.inv_settle * self.patch_density.iter().sum::<f64>();
        if s + self.inv_migrant_death <= 0.0 {
            0.0
        } else {
            s / (s + self.inv_migrant_death)
        }
    }
}

// ── Single-lineage simulation ────────────────────────────────────────────

/// One realized lineage.
#[derive(Clone, Debug)]
pub struct WOutcome {
    /// Whether the founder settled before dying.
    pub settled: bool,
    /// Emission times of migrant children, measured from the founding.
    pub offspring_times: Vec<f64>,
    /// Time from founding to lineage extinction.
    pub lifetime: f64,
    /// Largest lineage size reached.
    pub peak: u32,
}

/// Runs one founder migrant to lineage extinction (guaranteed by the
/// validated death/catastrophe rates). `max_events` guards against
/// pathological parameterizations.
pub fn simulate_w(
    chain: &InvasionChain,
    max_events: u64,
    rng: &mut RngStream,
) -> Result<WOutcome> {
    let mut t = 0.0;
    let mut events = 0u64;
    let mut offspring_times = Vec::new();
    let mut rates = Vec::with_capacity(chain.patch_density.len() + 1);

    // Migrant phase: settle somewhere or die.
    for &dens in &chain.patch_density {
        rates.push(chain.inv_settle * dens);
    }
    rates.push(chain.inv_migrant_death);
    let total: f64 = rates.iter().sum();
    if total <= 0.0 {
        return Ok(WOutcome { settled: false, offspring_times, lifetime: 0.0, peak: 0 });
    }
    t += rng.exponential(total);
    let pick = rng.choose_weighted(&rates, total);
    if pick == rates.len() - 1 {
        return Ok(WOutcome { settled: false, offspring_times, lifetime: t, peak: 0 });
    }
    let mut residents = pick as u32;
    let mut lineage = 1u32;
    let mut peak = 1u32;

    // In-patch phase. Six competing moves; order fixed.
    loop {
        events += 1;
        if events > max_events {
            return Err(Error::Experiment(format!(
                "lineage still alive after {max_events} events"
            )));
        }
        let open = residents + lineage < chain.limit;
        let j = f64::from(lineage);
        let i = f64::from(residents);
        let lineage_birth = if open { j * chain.inv_birth * (1.0 - chain.inv_dispersal) } else { 0.0 };
        let emission = if open { j * chain.inv_birth * chain.inv_dispersal } else { 0.0 };
        let lineage_death = j * chain.inv_death;
        let resident_birth = if open { i * chain.res_birth * (1.0 - chain.res_dispersal) } else { 0.0 };
        let arrival = if open { chain.res_settle * chain.res_migrant_density } else { 0.0 };
        let resident_death = i * chain.res_death;
        let rates = [
            lineage_birth,
            emission,
            lineage_death,
            chain.catastrophe,
            resident_birth + arrival,
            resident_death,
        ];
        let total: f64 = rates.iter().sum();
        t += rng.exponential(total);
        match rng.choose_weighted(&rates, total) {
            0 => {
                lineage += 1;
                peak = peak.max(lineage);
            }
            1 => offspring_times.push(t),
            2 => {
                lineage -= 1;
                if lineage == 0 {
                    return Ok(WOutcome {
                        settled: true,
                        offspring_times,
                        lifetime: t,
                        peak,
                    });
                }
            }
            3 => {
                return Ok(WOutcome { settled: true, offspring_times, lifetime: t, peak });
            }
            4 => residents += 1,
            _ => residents -= 1,
        }
    }
}

// ── Aggregation ──────────────────────────────────────────────────────────

/// Empirical reproduction measure of the migrant branching process.
#[derive(Clone, Debug)]
pub struct ReproductionEstimate {
    pub replicas: usize,
    /// Offspring count per replica.
    pub counts: Vec<u32>,
    /// Mean emissions per replica falling in each time bin.
    pub increments: Vec<f64>,
    pub bin_width: f64,
    /// Mean emissions per replica beyond the binned horizon.
    pub tail_mass: f64,
    pub settled_fraction: f64,
    /// Mean total offspring per founder.
    pub mbar: f64,
    /// Standard error of [`Self::mbar`].
    pub mbar_se: f64,
}

impl ReproductionEstimate {
    /// Estimated cumulative reproduction `m(t)` (emissions per founder up
    /// to lineage age `t` within the binned horizon).
    pub fn cumulative(&self, t: f64) -> f64 {
        let mut sum = 0.0;
        for (b, inc) in self.increments.iter().enumerate() {
            if (b as f64 + 1.0) * self.bin_width <= t {
                sum += inc;
            } else {
                break;
            }
        }
        sum
    }

    /// Laplace transform of the binned reproduction measure at `rho`,
    /// with each bin's mass placed at its midpoint. Empty bins are
    /// skipped so extreme arguments cannot produce 0 * inf.
    pub fn laplace(&self, rho: f64) -> f64 {
        self.increments
            .iter()
            .enumerate()
            .filter(|(_, inc)| **inc > 0.0)
            .map(|(b, inc)| inc * (-rho * (b as f64 + 0.5) * self.bin_width).exp())
            .sum()
    }

    /// Growth exponent: the root of `laplace(rho) = 1`, positive for a
    /// growing invasion and negative for a fading one. `None` when no
    /// emissions were observed.
    pub fn malthusian(&self) -> Option<f64> {
        if self.increments.iter().sum::<f64>() <= 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (-50.0f64, 50.0f64);
        // laplace is strictly decreasing in rho.
        if self.laplace(hi) > 1.0 {
            return Some(hi);
        }
        if self.laplace(lo) < 1.0 {
            return Some(lo);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.laplace(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Whether the invasion grows, fades, or sits within `z` standard
    /// errors of the critical mean.
    pub fn criticality(&self, z: f64) -> Criticality {
        if (self.mbar - 1.0).abs() <= z * self.mbar_se {
            Criticality::Critical
        } else if self.mbar > 1.0 {
            Criticality::Supercritical
        } else {
            Criticality::Subcritical
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criticality {
    Supercritical,
    Critical,
    Subcritical,
}

/// Runs `replicas` independent founders and aggregates their offspring
/// into a reproduction estimate with `bins` equal time bins over
/// `[0, horizon)`; later emissions land in the tail mass (they still
/// count toward `mbar` and the per-replica counts).
pub fn collect_offspring(
    chain: &InvasionChain,
    replicas: usize,
    horizon: f64,
    bins: usize,
    seed: u64,
) -> Result<ReproductionEstimate> {
    if replicas == 0 || bins == 0 || !(horizon > 0.0) {
        return Err(Error::Config(
            "offspring collection needs replicas, bins and a positive horizon".into(),
        ));
    }
    let bin_width = horizon / bins as f64;
    let mut counts = Vec::with_capacity(replicas);
    let mut increments = vec![0.0; bins];
    let mut tail = 0.0;
    let mut settled = 0usize;
    for k in 0..replicas {
        let mut rng = RngStream::substream(seed, k as u64);
        let out = simulate_w(chain, 10_000_000, &mut rng)?;
        counts.push(out.offspring_times.len() as u32);
        if out.settled {
            settled += 1;
        }
        for &ot in &out.offspring_times {
            let b = (ot / bin_width) as usize;
            if b < bins {
                increments[b] += 1.0;
            } else {
                tail += 1.0;
            }
        }
    }
    let r = replicas as f64;
    for inc in &mut increments {
        *inc /= r;
    }
    let as_f64: Vec<f64> = counts.iter().map(|&c| f64::from(c)).collect();
    let (mbar, mbar_se) = stats::mean_and_se(&as_f64);
    Ok(ReproductionEstimate {
        replicas,
        counts,
        increments,
        bin_width,
        tail_mass: tail / r,
        settled_fraction: settled as f64 / r,
        mbar,
        mbar_se,
    })
}

// ── Extinction probability ───────────────────────────────────────────────

/// Extinction probability of the migrant branching process with a
/// bootstrap standard error.
#[derive(Clone, Copy, Debug)]
pub struct ExtinctionEstimate {
    pub q: f64,
    pub se: f64,
}

fn pgf_fixed_point(freqs: &[f64]) -> f64 {
    let mut q = 0.0f64;
    for _ in 0..200_000 {
        let mut next = 0.0;
        let mut pw = 1.0;
        for &p in freqs {
            next += p * pw;
            pw *= q;
        }
        if (next - q).abs() < 1e-12 {
            return next.min(1.0);
        }
        q = next;
    }
    q.min(1.0)
}

/// Smallest fixed point of the empirical offspring generating function:
/// the probability that a single founder's whole descent dies out.
/// The standard error comes from `bootstrap_rounds` resamples.
pub fn extinction_prob(
    counts: &[u32],
    bootstrap_rounds: usize,
    rng: &mut RngStream,
) -> Result<ExtinctionEstimate> {
    if counts.is_empty() {
        return Err(Error::Config("extinction estimate needs offspring counts".into()));
    }
    let kmax = *counts.iter().max().unwrap() as usize;
    let freqs_of = |idx: &[usize]| -> f64 {
        let mut freqs = vec![0.0f64; kmax + 1];
        for &i in idx {
            freqs[counts[i] as usize] += 1.0;
        }
        let m = idx.len() as f64;
        for f in &mut freqs {
            *f /= m;
        }
        pgf_fixed_point(&freqs)
    };
    let all: Vec<usize> = (0..counts.len()).collect();
    let q = freqs_of(&all);
    let mut boots = Vec::with_capacity(bootstrap_rounds);
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..bootstrap_rounds {
        for slot in &mut idx {
            *slot = rng.gen_index(counts.len());
        }
        boots.push(freqs_of(&idx));
    }
    let se = if boots.len() > 1 { stats::variance(&boots).sqrt() } else { 0.0 };
    Ok(ExtinctionEstimate { q, se })
}

// ── Tests ────────────────────────────────────────────────────────────────
