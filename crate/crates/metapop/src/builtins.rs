//! Ready-made model families used by the experiments, examples, and
//! tests: a host–parasite load model, a single-variety metapopulation
//! with juvenile dispersal, its two-variety competition extension, and a
//! deliberately ill-behaved chain for exercising the assumption audit.

use serde::{Deserialize, Serialize};

use crate::model::{
    LifeHistorySpec, MigrantChildEntry, ModelBuilder, ModelDefinition, OwnOffspringEntry,
    PatchChangeEntry, RateExpr, ScaledState,
};
use crate::Result;

// ── Host–parasite load model ─────────────────────────────────────────────

/// Host–parasite system: patches are hosts, occupants are parasites.
/// Hosts acquire parasites at a rate proportional to the mean parasite
/// load in the population (saturating in host density), parasites die
/// individually, and hosts reproduce (uninfected offspring) at a
/// per-parasite-discounted rate and die at a load-dependent rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostParasiteParams {
    /// Infection rate multiplier on the mean-load pressure.
    pub infection: f64,
    /// Half-saturation host density of the infection pressure.
    pub half_sat: f64,
    /// Per-parasite death rate.
    pub parasite_death: f64,
    /// Host birth-rate multiplier.
    pub birth: f64,
    /// Per-parasite fecundity discount in [0, 1].
    pub fecundity: f64,
    /// Parasite-independent host death rate.
    pub host_death: f64,
    /// Additional host death rate per parasite carried.
    pub virulence: f64,
    /// Largest representable parasite load.
    pub cap: u32,
}

impl Default for HostParasiteParams {
    /// Defaults staged for a boom–bust epidemic: a small infected seed
    /// grows (infection pressure above clearance), sweeps through the
    /// host population around t = 4–10, kills enough hosts to starve
    /// itself, and burns out; the host population then recovers. Host
    /// turnover is slow compared to parasite turnover, so individual
    /// hosts live through a meaningful stretch of the sweep — and at
    /// small scales the random take-off time of the epidemic is the
    /// dominant environmental fluctuation.
    fn default() -> Self {
        HostParasiteParams {
            infection: 3.5,
            half_sat: 1.0,
            parasite_death: 1.0,
            birth: 0.16,
            fecundity: 0.95,
            host_death: 0.1,
            virulence: 0.05,
            cap: 20,
        }
    }
}

impl HostParasiteParams {
    /// Same parameters at a different load cap (the dynamics of loads
    /// below the cap are unchanged; only the truncation moves).
    pub fn with_cap(&self, cap: u32) -> Self {
        HostParasiteParams { cap, ..self.clone() }
    }

    pub fn model(&self) -> Result<ModelDefinition> {
        let mut b = ModelBuilder::new("host-parasite", 1, self.cap)?;
        let pressure =
            RateExpr::MeanLoadInfection { rate: self.infection, half_sat: self.half_sat };
        for i in 0..=self.cap {
            // acquisition [i] -> [i+1]; at the cap this is a tallied
            // truncation-loss channel, keeping the generator honest
            b.type_change_expr(&[i], &[i + 1], pressure.clone());
            if i >= 1 {
                b.type_change(&[i], &[i - 1], f64::from(i) * self.parasite_death);
            }
            b.destruction(&[i], self.host_death + f64::from(i) * self.virulence);
        }
        b.patch_creation(
            &[0],
            RateExpr::FecundityWeightedBirth { rate: self.birth, fecundity: self.fecundity },
        );
        b.build()
    }

    /// Mostly-uninfected starting density: 95% load 0, 5% load 1. The
    /// small infected seed makes the epidemic take-off time noticeably
    /// random at small scales.
    pub fn default_init(&self, model: &ModelDefinition) -> ScaledState {
        ScaledState::from_patches(model.space(), &[(&[0][..], 0.95), (&[1][..], 0.05)], &[0.0])
            .expect("initial composition is in space")
    }
}

// ── Single-variety metapopulation with juvenile dispersal ────────────────

/// Metapopulation on a fixed pool of habitat patches: occupants give
/// birth (newborns either stay or emigrate into the migrant pool),
/// die individually, and whole patches are emptied by catastrophes.
/// Migrants settle into patches below the occupancy limit or die.
/// Patches themselves are never created or destroyed.
///
/// The defaults are tuned so that invasion of an empty world is exactly
/// critical in the branching approximation: the expected number of
/// migrant descendants of a migrant equals one (see
/// [`Mg1Params::offspring_mean_uncapped`]).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mg1Params {
    /// Per-occupant brood rate while the patch is below the limit.
    pub birth: f64,
    /// Probability that a newborn emigrates instead of settling locally.
    pub dispersal: f64,
    /// Per-occupant death rate.
    pub death: f64,
    /// Patch catastrophe rate (all occupants die at once).
    pub catastrophe: f64,
    /// Per-(migrant, patch) settlement rate below the occupancy limit.
    pub settle: f64,
    /// Migrant death rate.
    pub migrant_death: f64,
    /// Occupancy at which births and settlement switch off.
    pub occupancy_limit: u32,
    /// Truncation cap of the type space (>= occupancy limit; equal means
    /// the truncation is lossless).
    pub cap: u32,
    /// Reserved empty-slot density for migrant bookkeeping.
    pub slot_reserve: f64,
}

impl Default for Mg1Params {
    fn default() -> Self {
        Mg1Params {
            birth: 5.0 / 3.0,
            dispersal: 0.5,
            death: 1.0,
            catastrophe: 0.5,
            settle: 4.0,
            migrant_death: 1.0,
            occupancy_limit: 16,
            cap: 16,
            slot_reserve: 2.0,
        }
    }
}

impl Mg1Params {
    /// Small supercritical variant for quick invasion experiments.
    pub fn invasion_toy() -> Self {
        Mg1Params { birth: 2.5, occupancy_limit: 6, cap: 6, ..Mg1Params::default() }
    }

    pub fn with_cap(&self, cap: u32) -> Self {
        Mg1Params { cap, ..self.clone() }
    }

    /// Expected migrant descendants of a single migrant entering a world
    /// of empty patches at density `empty_density`, ignoring the
    /// occupancy limit: settlement probability times emissions of the
    /// founded lineage. Finite only when the local lineage is subcritical
    /// (net decay `death + catastrophe - birth * (1 - dispersal)` > 0).
    pub fn offspring_mean_uncapped(&self, empty_density: f64) -> f64 {
        let settle = self.settle * empty_density;
        let p_settle = settle / (settle + self.migrant_death);
        let decay = self.death + self.catastrophe - self.birth * (1.0 - self.dispersal);
        p_settle * self.birth * self.dispersal / decay
    }

    pub fn model(&self) -> Result<ModelDefinition> {
        let mut b = ModelBuilder::new("metapop-dispersal", 1, self.cap)?;
        let limit = self.occupancy_limit.min(self.cap);
        for i in 0..=self.cap {
            let occ = f64::from(i);
            if i >= 1 && i < limit {
                // local births that stay
                b.type_change(&[i], &[i + 1], occ * self.birth * (1.0 - self.dispersal));
                // newborns that emigrate
                b.migrant_birth(&[i], 0, occ * self.birth * self.dispersal);
            }
            if i >= 1 {
                // individual deaths and whole-patch catastrophes; at
                // occupancy 1 both end at the empty patch and merge
                b.type_change(&[i], &[i - 1], occ * self.death);
                b.type_change(&[i], &[0], self.catastrophe);
            }
            if i < limit {
                b.settlement(0, &[i], RateExpr::Const(self.settle));
            }
        }
        b.migrant_death(0, self.migrant_death);
        b.slot_reserve(0, self.slot_reserve);
        let mut life = self.life_history(b.space().n_interior());
        life.patch_change = self.patch_change_entries(&mut b);
        b.life_history(life);
        b.build()
    }

    /// Decomposition of the patch rates from the viewpoint of one tagged
    /// occupant: own broods, emigrating children, changes caused by the
    /// other occupants, and the tagged occupant's own death (individual
    /// death plus catastrophe).
    fn life_history(&self, n_interior: usize) -> LifeHistorySpec {
        let limit = self.occupancy_limit.min(self.cap);
        let mut life = LifeHistorySpec {
            death_fixed: vec![0.0; n_interior],
            death_expr: vec![0usize; n_interior],
            ..LifeHistorySpec::default()
        };
        // interior index of [i] is i for a single variety (sorted by total)
        for i in 1..=self.cap {
            let idx = i as usize;
            life.death_fixed[idx] = self.death + self.catastrophe;
            if i < limit {
                life.own_offspring.push(OwnOffspringEntry {
                    itype: idx,
                    variety: 0,
                    brood: vec![1],
                    fixed: self.birth * (1.0 - self.dispersal),
                    expr: 0,
                });
                life.migrant_child.push(MigrantChildEntry {
                    itype: idx,
                    variety: 0,
                    child_variety: 0,
                    fixed: self.birth * self.dispersal,
                    expr: 0,
                });
            }
        }
        life
    }

    /// Others' contributions to patch changes need the settlement
    /// arrival evaluator, which must be registered on the same builder;
    /// done here so `model()` stays the single assembly point.
    fn patch_change_entries(&self, b: &mut ModelBuilder) -> Vec<PatchChangeEntry> {
        let limit = self.occupancy_limit.min(self.cap);
        let arrival = b.register(RateExpr::MigrantLinear { coeff: self.settle, variety: 0 });
        let mut entries = Vec::new();
        for i in 1..=self.cap {
            let idx = i as usize;
            let others = f64::from(i - 1);
            if i < limit {
                entries.push(PatchChangeEntry {
                    itype: idx,
                    variety: 0,
                    to: idx + 1,
                    fixed: others * self.birth * (1.0 - self.dispersal),
                    expr: arrival,
                });
            }
            if i >= 2 {
                entries.push(PatchChangeEntry {
                    itype: idx,
                    variety: 0,
                    to: idx - 1,
                    fixed: others * self.death,
                    expr: 0,
                });
            }
        }
        entries
    }

    /// Half-occupied starting density: equal mass on empty patches and
    /// patches holding one occupant.
    pub fn default_init(&self, model: &ModelDefinition) -> ScaledState {
        ScaledState::from_patches(model.space(), &[(&[0][..], 0.5), (&[1][..], 0.5)], &[0.0])
            .expect("initial composition is in space")
    }

    /// World of empty patches at density 1: the environment an invading
    /// migrant encounters.
    pub fn virgin_environment(&self, model: &ModelDefinition) -> ScaledState {
        ScaledState::from_patches(model.space(), &[(&[0][..], 1.0)], &[0.0])
            .expect("initial composition is in space")
    }
}

// ── Two-variety competition metapopulation ───────────────────────────────

/// Two varieties sharing the same patch pool, each with its own birth,
/// dispersal, death, settlement, and migrant-death rates; catastrophes
/// and the occupancy limit act on patches regardless of who occupies
/// them. The per-variety dynamics at a given total occupancy match the
/// single-variety model, which [`Mg2Params::symmetric_from_mg1`] pins
/// down exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mg2Params {
    pub birth: [f64; 2],
    pub dispersal: [f64; 2],
    pub death: [f64; 2],
    pub catastrophe: f64,
    pub settle: [f64; 2],
    pub migrant_death: [f64; 2],
    pub occupancy_limit: u32,
    pub cap: u32,
    pub slot_reserve: f64,
}

impl Default for Mg2Params {
    fn default() -> Self {
        // variety 1 out-births and out-disperses the resident: a clearly
        // advantaged invader probing variety 0's equilibrium, far enough
        // above criticality that its establishment chance is testable
        // against the branching prediction at desk scale
        Mg2Params {
            birth: [2.5, 4.0],
            dispersal: [0.4, 0.5],
            death: [1.0, 1.0],
            catastrophe: 0.5,
            settle: [4.0, 4.0],
            migrant_death: [1.0, 1.0],
            occupancy_limit: 6,
            cap: 6,
            slot_reserve: 2.0,
        }
    }
}

impl Mg2Params {
    /// Both varieties endowed with the single-variety parameters.
    pub fn symmetric_from_mg1(p: &Mg1Params) -> Self {
        Mg2Params {
            birth: [p.birth; 2],
            dispersal: [p.dispersal; 2],
            death: [p.death; 2],
            catastrophe: p.catastrophe,
            settle: [p.settle; 2],
            migrant_death: [p.migrant_death; 2],
            occupancy_limit: p.occupancy_limit,
            cap: p.cap,
            slot_reserve: p.slot_reserve,
        }
    }

    pub fn model(&self) -> Result<ModelDefinition> {
        let mut b = ModelBuilder::new("metapop-competition", 2, self.cap)?;
        let limit = self.occupancy_limit.min(self.cap);
        for i in 0..=self.cap {
            for j in 0..=(self.cap - i) {
                let comp = [i, j];
                let total = i + j;
                for l in 0..2usize {
                    let occ = f64::from(comp[l]);
                    let mut up = comp;
                    up[l] += 1;
                    let mut down = comp;
                    if comp[l] >= 1 {
                        down[l] -= 1;
                    }
                    if comp[l] >= 1 && total < limit {
                        b.type_change(&comp, &up, occ * self.birth[l] * (1.0 - self.dispersal[l]));
                        b.migrant_birth(&comp, l, occ * self.birth[l] * self.dispersal[l]);
                    }
                    if comp[l] >= 1 {
                        b.type_change(&comp, &down, occ * self.death[l]);
                    }
                    if total < limit {
                        b.settlement(l, &comp, RateExpr::Const(self.settle[l]));
                    }
                }
                if total >= 1 {
                    b.type_change(&comp, &[0, 0], self.catastrophe);
                }
            }
        }
        for l in 0..2usize {
            b.migrant_death(l, self.migrant_death[l]);
            b.slot_reserve(l, self.slot_reserve);
        }
        b.build()
    }

    /// Resident-only starting density (variety 0), half-occupied.
    pub fn resident_init(&self, model: &ModelDefinition) -> ScaledState {
        ScaledState::from_patches(
            model.space(),
            &[(&[0, 0][..], 0.5), (&[1, 0][..], 0.5)],
            &[0.0, 0.0],
        )
        .expect("initial composition is in space")
    }
}

// ── Pathological chain for audit exercises ───────────────────────────────

/// Birth–death chain whose upward rate grows quadratically with the
/// occupancy. No linear weight family can dominate its jumps, so the
/// growth-condition audit must flag it.
pub fn quadratic_growth_chain(cap: u32) -> Result<ModelDefinition> {
    let mut b = ModelBuilder::new("quadratic-chain", 1, cap)?;
    for i in 0..=cap {
        let occ = f64::from(i);
        b.type_change(&[i], &[i + 1], occ * occ);
        if i >= 1 {
            b.type_change(&[i], &[i - 1], occ);
        }
    }
    b.build()
}
