//! Model structure: the type space, population states, rate definitions,
//! and exact enumeration of the possible transition events.
//!
//! A model describes patches whose content is a composition over `d`
//! varieties (a vector of per-variety occupant counts with total at most
//! `cap`), together with one migrant pool per variety. Migrants are
//! tracked with explicit slot bookkeeping: each variety has occupied
//! migrant slots and empty ones, and every migration or settlement event
//! moves one unit between the two, so their sum is conserved along any
//! path. The scaled process is stopped the first time some variety runs
//! out of empty slots.
//!
//! Seven event families drive the dynamics:
//!
//! * type change of a patch (births, deaths, infections inside a patch),
//! * patch creation and patch destruction,
//! * migration of one occupant out of a patch,
//! * direct birth of a migrant from a patch,
//! * settlement of a migrant into a patch,
//! * death of a migrant.
//!
//! Each family has a constant part and an optional state-dependent part;
//! the state-dependent parts are drawn from a small registry of named
//! functional forms ([`RateExpr`]) with declared bounds, so simulation by
//! thinning and numerical audits can reason about them.
//!
//! Patch contents are capped at `cap` occupants. Events that would push a
//! patch above the cap are not silently dropped: they are enumerated as
//! explicit truncation-loss channels whose firing leaves the state alone
//! but is tallied, so a too-small cap is observable rather than a hidden
//! bias.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Per-variety occupant counts of a patch.
pub type Composition = Vec<u32>;

/// Handle into a model's registry of state-dependent rate evaluators.
pub type ExprId = usize;

// ── Type space ───────────────────────────────────────────────────────────

/// Descriptor of one coordinate of the state vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PatchType {
    /// A patch holding the given composition (index by variety).
    Patch(Composition),
    /// An occupied migrant slot of the given variety.
    Migrant { variety: usize },
    /// An empty migrant slot of the given variety.
    EmptySlot { variety: usize },
}

impl fmt::Display for PatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchType::Patch(c) => {
                write!(f, "p")?;
                for (k, v) in c.iter().enumerate() {
                    if k > 0 {
                        write!(f, "_")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
            PatchType::Migrant { variety } => write!(f, "m{variety}"),
            PatchType::EmptySlot { variety } => write!(f, "s{variety}"),
        }
    }
}

/// Finite, indexed enumeration of every coordinate the process can use:
/// all compositions with total at most `cap`, then per variety an
/// occupied-migrant and an empty-slot coordinate.
///
/// Interior (patch) types come first, ordered by total then
/// lexicographically, so index 0 is always the empty patch.
#[derive(Clone, Debug)]
pub struct TypeSpace {
    d: usize,
    cap: u32,
    comps: Vec<Composition>,
    lookup: HashMap<Composition, usize>,
    /// Size weight per coordinate (`total + 1` for patches, 1 for
    /// migrants and empty slots); used for jump-size functionals.
    nu: Vec<f64>,
    /// Norm weight per coordinate: equal to `nu` except that empty slots
    /// weigh 0, which keeps slot bookkeeping out of the state norm.
    mu: Vec<f64>,
}

fn enumerate_compositions(d: usize, cap: u32) -> Vec<Composition> {
    let mut out: Vec<Composition> = Vec::new();
    let mut current = vec![0u32; d];
    fn rec(out: &mut Vec<Composition>, current: &mut Composition, pos: usize, left: u32) {
        if pos + 1 == current.len() {
            current[pos] = left;
            out.push(current.clone());
            return;
        }
        for v in 0..=left {
            current[pos] = v;
            rec(out, current, pos + 1, left - v);
        }
        current[pos] = 0;
    }
    for total in 0..=cap {
        // lexicographic within a fixed total
        let mut batch: Vec<Composition> = Vec::new();
        rec(&mut batch, &mut current, 0, total);
        batch.sort();
        out.extend(batch);
    }
    out
}

impl TypeSpace {
    pub fn new(d: usize, cap: u32) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidModel("at least one variety required".into()));
        }
        if cap == 0 {
            return Err(Error::InvalidModel("patch capacity must be positive".into()));
        }
        let comps = enumerate_compositions(d, cap);
        let lookup: HashMap<Composition, usize> =
            comps.iter().cloned().enumerate().map(|(k, c)| (c, k)).collect();
        let n_interior = comps.len();
        let n = n_interior + 2 * d;
        let mut nu = vec![1.0; n];
        let mut mu = vec![1.0; n];
        for (k, c) in comps.iter().enumerate() {
            let size = c.iter().sum::<u32>() as f64 + 1.0;
            nu[k] = size;
            mu[k] = size;
        }
        for l in 0..d {
            mu[n_interior + 2 * l + 1] = 0.0; // empty slots carry no mass
        }
        Ok(TypeSpace { d, cap, comps, lookup, nu, mu })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    /// Number of patch (interior) coordinates.
    pub fn n_interior(&self) -> usize {
        self.comps.len()
    }

    /// Total number of coordinates including migrant and slot bookkeeping.
    pub fn len(&self) -> usize {
        self.comps.len() + 2 * self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the occupied-migrant coordinate of a variety.
    pub fn migrant(&self, variety: usize) -> usize {
        debug_assert!(variety < self.d);
        self.comps.len() + 2 * variety
    }

    /// Index of the empty-slot coordinate of a variety.
    pub fn empty_slot(&self, variety: usize) -> usize {
        debug_assert!(variety < self.d);
        self.comps.len() + 2 * variety + 1
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        idx < self.comps.len()
    }

    pub fn is_empty_slot(&self, idx: usize) -> bool {
        idx >= self.comps.len() && (idx - self.comps.len()) % 2 == 1
    }

    /// Composition of an interior coordinate.
    pub fn comp(&self, idx: usize) -> &Composition {
        &self.comps[idx]
    }

    pub fn index_of(&self, comp: &[u32]) -> Option<usize> {
        self.lookup.get(comp).copied()
    }

    pub fn patch_type(&self, idx: usize) -> PatchType {
        if idx < self.comps.len() {
            PatchType::Patch(self.comps[idx].clone())
        } else {
            let off = idx - self.comps.len();
            let variety = off / 2;
            if off % 2 == 0 {
                PatchType::Migrant { variety }
            } else {
                PatchType::EmptySlot { variety }
            }
        }
    }

    /// Occupant total of an interior coordinate.
    pub fn total(&self, idx: usize) -> u32 {
        self.comps[idx].iter().sum()
    }

    /// Index of `comp + e_l`, or `None` if that exceeds the cap.
    pub fn add_unit(&self, idx: usize, variety: usize) -> Option<usize> {
        let c = &self.comps[idx];
        if self.total(idx) >= self.cap {
            return None;
        }
        let mut t = c.clone();
        t[variety] += 1;
        self.lookup.get(&t).copied()
    }

    /// Index of `comp - e_l`, or `None` if the variety is absent.
    pub fn sub_unit(&self, idx: usize, variety: usize) -> Option<usize> {
        let c = &self.comps[idx];
        if c[variety] == 0 {
            return None;
        }
        let mut t = c.clone();
        t[variety] -= 1;
        self.lookup.get(&t).copied()
    }

    /// Size weight of a coordinate (patch total + 1; migrants and empty
    /// slots both weigh 1 so slot moves cancel in jump-size sums).
    pub fn nu(&self, idx: usize) -> f64 {
        self.nu[idx]
    }

    /// Norm weight of a coordinate (like [`Self::nu`] but 0 on empty
    /// slots, which are bookkeeping rather than population mass).
    pub fn mu(&self, idx: usize) -> f64 {
        self.mu[idx]
    }

    /// Weighted norm `sum_z mu(z) |x_z|`.
    pub fn mu_norm(&self, x: &ScaledState) -> f64 {
        debug_assert_eq!(x.values.len(), self.len());
        x.values.iter().zip(&self.mu).map(|(v, m)| v.abs() * m).sum()
    }

    /// Weighted distance between two states in the `mu` norm.
    pub fn mu_dist(&self, a: &ScaledState, b: &ScaledState) -> f64 {
        debug_assert_eq!(a.values.len(), b.values.len());
        a.values
            .iter()
            .zip(&b.values)
            .zip(&self.mu)
            .map(|((u, v), m)| (u - v).abs() * m)
            .sum()
    }

    /// Empirical size moment `S_r(x) = sum_z nu(z)^r x_z`, taken over
    /// patches and occupied migrants (empty slots excluded).
    pub fn empirical_moment(&self, x: &ScaledState, r: u32) -> f64 {
        let mut s = 0.0;
        for idx in 0..self.comps.len() {
            s += self.nu[idx].powi(r as i32) * x.values[idx];
        }
        for l in 0..self.d {
            s += x.values[self.migrant(l)];
        }
        s
    }

    /// Total patch density `sum_i x_i` (interior coordinates only).
    pub fn interior_l1(&self, x: &ScaledState) -> f64 {
        x.values[..self.comps.len()].iter().sum()
    }

    /// Total occupant density `sum_i |i| x_i` carried inside patches.
    pub fn interior_load(&self, x: &ScaledState) -> f64 {
        (0..self.comps.len()).map(|k| (self.nu[k] - 1.0) * x.values[k]).sum()
    }
}

// ── States ───────────────────────────────────────────────────────────────

/// Integer-count state of the full process at a given scale `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopulationState {
    pub n: u64,
    counts: Vec<u64>,
}

impl PopulationState {
    pub fn new(space: &TypeSpace, n: u64) -> Self {
        PopulationState { n, counts: vec![0; space.len()] }
    }

    /// Integer state closest to the density `x`: patch and migrant counts
    /// are rounded from `n * x`, and each variety's empty-slot count is
    /// `ceil(n * reserve_l)` regardless of `x`.
    pub fn from_density(space: &TypeSpace, n: u64, x: &ScaledState, reserve: &[f64]) -> Self {
        debug_assert_eq!(reserve.len(), space.d());
        let mut counts = vec![0u64; space.len()];
        for idx in 0..space.len() {
            counts[idx] = (n as f64 * x.values[idx]).round().max(0.0) as u64;
        }
        for (l, h) in reserve.iter().enumerate() {
            counts[space.empty_slot(l)] = (n as f64 * h).ceil().max(0.0) as u64;
        }
        PopulationState { n, counts }
    }

    pub fn count(&self, idx: usize) -> u64 {
        self.counts[idx]
    }

    pub fn set_count(&mut self, idx: usize, c: u64) {
        self.counts[idx] = c;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Density seen by rate evaluators: every count divided by `n`.
    pub fn scaled(&self) -> ScaledState {
        let n = self.n as f64;
        ScaledState { values: self.counts.iter().map(|&c| c as f64 / n).collect() }
    }

    /// Applies an event's increments in place. Panics in debug builds if
    /// a count would go negative, which indicates an inadmissible event.
    pub fn apply(&mut self, space: &TypeSpace, event: &Event) {
        let mut delta = [(0usize, 0i64); 4];
        let k = event.delta(space, &mut delta);
        for &(idx, sgn) in &delta[..k] {
            if sgn >= 0 {
                self.counts[idx] += sgn as u64;
            } else {
                let dec = (-sgn) as u64;
                debug_assert!(
                    self.counts[idx] >= dec,
                    "event {event:?} drives coordinate {idx} negative"
                );
                self.counts[idx] -= dec;
            }
        }
    }

    /// Conserved slot total (occupied + empty) of a variety.
    pub fn slot_total(&self, space: &TypeSpace, variety: usize) -> u64 {
        self.counts[space.migrant(variety)] + self.counts[space.empty_slot(variety)]
    }

    /// True when some variety has no empty slot left; the process is
    /// stopped at the first such time.
    pub fn slots_exhausted(&self, space: &TypeSpace) -> bool {
        (0..space.d()).any(|l| self.counts[space.empty_slot(l)] == 0)
    }
}

/// Real-valued density state; coordinates indexed by the [`TypeSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledState {
    pub values: Vec<f64>,
}

impl ScaledState {
    pub fn zero(space: &TypeSpace) -> Self {
        ScaledState { values: vec![0.0; space.len()] }
    }

    /// Builds a density from (composition, value) pairs, with migrant
    /// densities given separately per variety.
    pub fn from_patches(
        space: &TypeSpace,
        patches: &[(&[u32], f64)],
        migrants: &[f64],
    ) -> Result<Self> {
        let mut x = ScaledState::zero(space);
        for (comp, v) in patches {
            let idx = space
                .index_of(comp)
                .ok_or_else(|| Error::Mismatch(format!("composition {comp:?} outside type space")))?;
            x.values[idx] = *v;
        }
        for (l, v) in migrants.iter().enumerate() {
            if l >= space.d() {
                return Err(Error::Mismatch("more migrant densities than varieties".into()));
            }
            x.values[space.migrant(l)] = *v;
        }
        Ok(x)
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }
}

// ── Rate evaluators ──────────────────────────────────────────────────────

/// State-dependent rate evaluator. Each named form carries its parameters
/// and knows a rigorous upper bound for itself on any norm ball, which is
/// what thinned simulation and the numerical audits lean on.
#[derive(Clone)]
pub enum RateExpr {
    Zero,
    Const(f64),
    /// `rate * sum_j |j| x_j / (half_sat + sum_j x_j)`: acquisition
    /// pressure proportional to the mean occupant load across patches.
    MeanLoadInfection { rate: f64, half_sat: f64 },
    /// `rate * sum_i x_i * fecundity^{|i|}`: birth rate summed over
    /// patches, discounted per occupant (fecundity in [0, 1]).
    FecundityWeightedBirth { rate: f64, fecundity: f64 },
    /// `coeff * x_m(variety)`: proportional to one migrant density.
    MigrantLinear { coeff: f64, variety: usize },
    /// Arbitrary evaluator with a declared bound `bound_const +
    /// bound_slope * r` valid on every ball of norm radius `r`.
    Custom {
        f: Arc<dyn Fn(&TypeSpace, &ScaledState) -> f64 + Send + Sync>,
        bound_const: f64,
        bound_slope: f64,
        label: String,
    },
}

impl fmt::Debug for RateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateExpr::Zero => write!(f, "Zero"),
            RateExpr::Const(c) => write!(f, "Const({c})"),
            RateExpr::MeanLoadInfection { rate, half_sat } => {
                write!(f, "MeanLoadInfection(rate={rate}, half_sat={half_sat})")
            }
            RateExpr::FecundityWeightedBirth { rate, fecundity } => {
                write!(f, "FecundityWeightedBirth(rate={rate}, fecundity={fecundity})")
            }
            RateExpr::MigrantLinear { coeff, variety } => {
                write!(f, "MigrantLinear(coeff={coeff}, variety={variety})")
            }
            RateExpr::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl RateExpr {
    pub fn eval(&self, space: &TypeSpace, x: &ScaledState) -> f64 {
        match self {
            RateExpr::Zero => 0.0,
            RateExpr::Const(c) => *c,
            RateExpr::MeanLoadInfection { rate, half_sat } => {
                let load = space.interior_load(x);
                let hosts = space.interior_l1(x);
                rate * load / (half_sat + hosts)
            }
            RateExpr::FecundityWeightedBirth { rate, fecundity } => {
                let mut s = 0.0;
                for idx in 0..space.n_interior() {
                    let size = space.nu(idx) - 1.0;
                    s += x.values[idx] * fecundity.powf(size);
                }
                rate * s
            }
            RateExpr::MigrantLinear { coeff, variety } => coeff * x.values[space.migrant(*variety)],
            RateExpr::Custom { f, .. } => f(space, x),
        }
    }

    /// Upper bound valid whenever the argument has norm at most `r` and
    /// nonnegative coordinates.
    pub fn bound_within(&self, r: f64) -> f64 {
        match self {
            RateExpr::Zero => 0.0,
            RateExpr::Const(c) => *c,
            // load <= norm and the denominator is at least half_sat
            RateExpr::MeanLoadInfection { rate, half_sat } => rate * r / half_sat,
            // the discounted sum is at most the patch density, <= norm
            RateExpr::FecundityWeightedBirth { rate, .. } => rate * r,
            RateExpr::MigrantLinear { coeff, .. } => coeff * r,
            RateExpr::Custom { bound_const, bound_slope, .. } => bound_const + bound_slope * r,
        }
    }

    /// True when the value cannot depend on the state.
    pub fn is_static(&self) -> bool {
        matches!(self, RateExpr::Zero | RateExpr::Const(_))
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidModel(msg.into()));
        let nonneg = |v: f64, what: &str| {
            if !v.is_finite() || v < 0.0 {
                Err(Error::InvalidModel(format!("{what} must be finite and nonnegative, got {v}")))
            } else {
                Ok(())
            }
        };
        match self {
            RateExpr::Zero => Ok(()),
            RateExpr::Const(c) => nonneg(*c, "constant rate"),
            RateExpr::MeanLoadInfection { rate, half_sat } => {
                nonneg(*rate, "infection rate")?;
                if !half_sat.is_finite() || *half_sat <= 0.0 {
                    return bad("infection half-saturation must be positive");
                }
                Ok(())
            }
            RateExpr::FecundityWeightedBirth { rate, fecundity } => {
                nonneg(*rate, "birth rate")?;
                if !(0.0..=1.0).contains(fecundity) {
                    return bad("fecundity discount must lie in [0, 1]");
                }
                Ok(())
            }
            RateExpr::MigrantLinear { coeff, .. } => nonneg(*coeff, "migrant-linear coefficient"),
            RateExpr::Custom { bound_const, bound_slope, .. } => {
                nonneg(*bound_const, "custom bound constant")?;
                nonneg(*bound_slope, "custom bound slope")
            }
        }
    }

    /// Structural key used to share identical evaluators in the registry.
    fn dedup_key(&self) -> Option<(u8, u64, u64, usize)> {
        match self {
            RateExpr::Zero => Some((0, 0, 0, 0)),
            RateExpr::Const(c) => Some((1, c.to_bits(), 0, 0)),
            RateExpr::MeanLoadInfection { rate, half_sat } => {
                Some((2, rate.to_bits(), half_sat.to_bits(), 0))
            }
            RateExpr::FecundityWeightedBirth { rate, fecundity } => {
                Some((3, rate.to_bits(), fecundity.to_bits(), 0))
            }
            RateExpr::MigrantLinear { coeff, variety } => {
                Some((4, coeff.to_bits(), 0, *variety))
            }
            RateExpr::Custom { .. } => None,
        }
    }
}

// ── Events and channels ──────────────────────────────────────────────────

/// One possible transition of the population process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    /// A patch changes composition `from -> to`.
    TypeChange { from: usize, to: usize },
    /// A new patch of the given type appears.
    PatchCreated { itype: usize },
    /// A patch of the given type disappears with all occupants.
    PatchDestroyed { itype: usize },
    /// One `variety` occupant leaves patch `from`, becoming a migrant
    /// (fills an empty slot).
    MigrationOut { from: usize, variety: usize },
    /// A patch of type `source` emits a new `variety` migrant directly.
    MigrantBirth { source: usize, variety: usize },
    /// A `variety` migrant settles into a patch of type `into`, freeing
    /// its slot.
    Settlement { into: usize, variety: usize },
    /// A migrant of the given variety dies, freeing its slot.
    MigrantDeath { variety: usize },
    /// A suppressed boundary event: the underlying transition would push
    /// a patch above the cap. Firing changes nothing but is tallied.
    TruncationLoss { from: usize, variety: Option<usize> },
}

impl Event {
    /// Writes the event's coordinate increments into `out`, returning how
    /// many entries are used (at most 4).
    pub fn delta(&self, space: &TypeSpace, out: &mut [(usize, i64); 4]) -> usize {
        match *self {
            Event::TypeChange { from, to } => {
                out[0] = (from, -1);
                out[1] = (to, 1);
                2
            }
            Event::PatchCreated { itype } => {
                out[0] = (itype, 1);
                1
            }
            Event::PatchDestroyed { itype } => {
                out[0] = (itype, -1);
                1
            }
            Event::MigrationOut { from, variety } => {
                let to = space
                    .sub_unit(from, variety)
                    .expect("migration event from a patch without that variety");
                out[0] = (from, -1);
                out[1] = (to, 1);
                out[2] = (space.migrant(variety), 1);
                out[3] = (space.empty_slot(variety), -1);
                4
            }
            Event::MigrantBirth { variety, .. } => {
                out[0] = (space.migrant(variety), 1);
                out[1] = (space.empty_slot(variety), -1);
                2
            }
            Event::Settlement { into, variety } => {
                let to = space
                    .add_unit(into, variety)
                    .expect("settlement event into a patch at capacity");
                out[0] = (into, -1);
                out[1] = (to, 1);
                out[2] = (space.migrant(variety), -1);
                out[3] = (space.empty_slot(variety), 1);
                4
            }
            Event::MigrantDeath { variety } => {
                out[0] = (space.migrant(variety), -1);
                out[1] = (space.empty_slot(variety), 1);
                2
            }
            Event::TruncationLoss { .. } => 0,
        }
    }

    /// Signed jump-size functional `sum_k a_k nu(z_k)^r` of the event's
    /// increments.
    pub fn size_jump(&self, space: &TypeSpace, r: u32) -> f64 {
        let mut delta = [(0usize, 0i64); 4];
        let k = self.delta(space, &mut delta);
        delta[..k]
            .iter()
            .map(|&(idx, sgn)| sgn as f64 * space.nu(idx).powi(r as i32))
            .sum()
    }
}

/// Which count factor scales a channel's evaluator value into a rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ChannelKind {
    /// `x_from * value`
    PerPatch { from: usize },
    /// `value` alone (patch creation, already per unit of scale)
    PerScale,
    /// `x_migrant(l) * x_into * value`
    PerEncounter { into: usize, variety: usize },
    /// `x_migrant(l) * value`
    PerMigrant { variety: usize },
}

/// Precompiled transition channel: event shape, constant rate part, and
/// registry handle of the state-dependent part.
#[derive(Clone, Debug)]
pub(crate) struct Channel {
    pub(crate) event: Event,
    kind: ChannelKind,
    pub(crate) fixed: f64,
    pub(crate) expr: ExprId,
}

impl Channel {
    /// Coordinates whose scaled counts enter the rate as multiplicative
    /// factors. Returns a fixed-size buffer and how many entries are used;
    /// callers use this to maintain rates incrementally.
    pub(crate) fn count_coords(&self, space: &TypeSpace) -> ([usize; 2], usize) {
        match self.kind {
            ChannelKind::PerPatch { from } => ([from, 0], 1),
            ChannelKind::PerScale => ([0, 0], 0),
            ChannelKind::PerEncounter { into, variety } => ([space.migrant(variety), into], 2),
            ChannelKind::PerMigrant { variety } => ([space.migrant(variety), 0], 1),
        }
    }

    /// Scaled transition intensity split into its constant-rate and
    /// state-dependent parts, so callers can separate the linear drift.
    pub(crate) fn alpha_parts(&self, space: &TypeSpace, x: &ScaledState, cache: &[f64]) -> (f64, f64) {
        let factor = match self.kind {
            ChannelKind::PerPatch { from } => x.values[from],
            ChannelKind::PerScale => 1.0,
            ChannelKind::PerEncounter { into, variety } => {
                x.values[space.migrant(variety)] * x.values[into]
            }
            ChannelKind::PerMigrant { variety } => x.values[space.migrant(variety)],
        };
        (factor * self.fixed, factor * cache[self.expr])
    }
}

// ── Model definition ─────────────────────────────────────────────────────

/// Immutable, validated model. Built with [`ModelBuilder`].
#[derive(Clone, Debug)]
pub struct ModelDefinition {
    pub name: String,
    space: TypeSpace,
    exprs: Vec<RateExpr>,
    channels: Vec<Channel>,
    // dense per-family views used by the drift splitting, tagged chains
    // and audits
    pub(crate) lambda_entries: Vec<TypeChangeEntry>,
    pub(crate) delta_fixed: Vec<f64>,
    pub(crate) delta_expr: Vec<ExprId>,
    pub(crate) gamma_fixed: Vec<f64>,
    pub(crate) gamma_expr: Vec<ExprId>,
    pub(crate) gamma_prime_fixed: Vec<f64>,
    pub(crate) gamma_prime_expr: Vec<ExprId>,
    pub(crate) sigma_expr: Vec<ExprId>,
    pub(crate) zeta_fixed: Vec<f64>,
    pub(crate) beta_entries: Vec<(usize, ExprId)>,
    slot_reserve: Vec<f64>,
    pub(crate) life: Option<LifeHistorySpec>,
}

/// One patch type-change rate `from -> to`; `to == None` marks a
/// transition that would leave the truncated space.
#[derive(Clone, Debug)]
pub(crate) struct TypeChangeEntry {
    pub(crate) from: usize,
    pub(crate) to: Option<usize>,
    pub(crate) fixed: f64,
    pub(crate) expr: ExprId,
}

/// Per-individual life-history declaration layered on top of the patch
/// rates: how patch-level events decompose from the viewpoint of a single
/// tagged occupant. Only needed when tagged individuals are simulated.
#[derive(Clone, Debug, Default)]
pub struct LifeHistorySpec {
    /// Broods produced by the tagged occupant itself: the patch gains
    /// `brood` and the occupant's offspring tally grows by it.
    pub own_offspring: Vec<OwnOffspringEntry>,
    /// Patch composition changes not attributed to the tagged occupant.
    pub patch_change: Vec<PatchChangeEntry>,
    /// The tagged occupant switches variety.
    pub variety_change: Vec<VarietyChangeEntry>,
    /// The tagged occupant emits a migrant child (tally grows, patch
    /// composition does not change).
    pub migrant_child: Vec<MigrantChildEntry>,
    /// Death rate of the tagged occupant per (patch type, variety); must
    /// dominate the patch-destruction rate. Flat index `itype * d + l`.
    pub death_fixed: Vec<f64>,
    pub death_expr: Vec<ExprId>,
}

#[derive(Clone, Debug)]
pub struct OwnOffspringEntry {
    pub itype: usize,
    pub variety: usize,
    pub brood: Composition,
    pub fixed: f64,
    pub expr: ExprId,
}

#[derive(Clone, Debug)]
pub struct PatchChangeEntry {
    pub itype: usize,
    pub variety: usize,
    pub to: usize,
    pub fixed: f64,
    pub expr: ExprId,
}

#[derive(Clone, Debug)]
pub struct VarietyChangeEntry {
    pub itype: usize,
    pub variety: usize,
    pub to_variety: usize,
    pub fixed: f64,
    pub expr: ExprId,
}

#[derive(Clone, Debug)]
pub struct MigrantChildEntry {
    pub itype: usize,
    pub variety: usize,
    pub child_variety: usize,
    pub fixed: f64,
    pub expr: ExprId,
}

impl ModelDefinition {
    pub fn space(&self) -> &TypeSpace {
        &self.space
    }

    pub fn d(&self) -> usize {
        self.space.d()
    }

    pub fn cap(&self) -> u32 {
        self.space.cap()
    }

    pub fn slot_reserve(&self) -> &[f64] {
        &self.slot_reserve
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn life_history(&self) -> Option<&LifeHistorySpec> {
        self.life.as_ref()
    }

    pub(crate) fn exprs(&self) -> &[RateExpr] {
        &self.exprs
    }

    pub(crate) fn expr(&self, id: ExprId) -> &RateExpr {
        &self.exprs[id]
    }

    pub(crate) fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// Evaluates every registered evaluator at `x` into `out`.
    pub(crate) fn eval_exprs(&self, x: &ScaledState, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.exprs.iter().map(|e| e.eval(&self.space, x)));
    }

    /// Visits every transition channel with its scaled intensity at `x`,
    /// split into (constant-rate part, state-dependent part). Channels
    /// with zero intensity are skipped.
    pub(crate) fn for_each_alpha<F: FnMut(&Event, f64, f64)>(&self, x: &ScaledState, mut f: F) {
        let mut cache = Vec::new();
        self.eval_exprs(x, &mut cache);
        for ch in &self.channels {
            let (af, ax) = ch.alpha_parts(&self.space, x, &cache);
            if af != 0.0 || ax != 0.0 {
                f(&ch.event, af, ax);
            }
        }
    }

    /// Stable fingerprint of the model structure, suitable for table
    /// provenance. Sensitive to every rate constant and evaluator
    /// parameter, insensitive to build order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update((self.space.d() as u64).to_le_bytes());
        h.update(u64::from(self.space.cap()).to_le_bytes());
        for ch in &self.channels {
            h.update(format!("{:?}|{:?}|", ch.event, ch.kind).as_bytes());
            h.update(ch.fixed.to_bits().to_le_bytes());
            h.update(format!("{:?};", self.exprs[ch.expr]).as_bytes());
        }
        for r in &self.slot_reserve {
            h.update(r.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ── Rate table ───────────────────────────────────────────────────────────

/// One admissible event with its population-level rate.
#[derive(Clone, Debug)]
pub struct EventRate {
    pub event: Event,
    pub rate: f64,
}

/// Exhaustive event/rate enumeration at one population state.
#[derive(Clone, Debug)]
pub struct RateTable {
    pub events: Vec<EventRate>,
    pub total: f64,
    /// Combined rate of suppressed boundary events in `events`.
    pub truncation_loss_rate: f64,
}

/// Enumerates every event with positive rate at `state`, including
/// truncation-loss channels. Rates are exact products of integer counts
/// with the per-capita rates up to floating-point rounding.
pub fn event_rate_table(model: &ModelDefinition, state: &PopulationState) -> RateTable {
    let x = state.scaled();
    let n = state.n as f64;
    let mut events = Vec::new();
    let mut total = 0.0;
    let mut loss = 0.0;
    model.for_each_alpha(&x, |event, af, ax| {
        let rate = n * (af + ax);
        if rate > 0.0 {
            if matches!(event, Event::TruncationLoss { .. }) {
                loss += rate;
            }
            total += rate;
            events.push(EventRate { event: event.clone(), rate });
        }
    });
    RateTable { events, total, truncation_loss_rate: loss }
}

// ── Builder ──────────────────────────────────────────────────────────────

/// Assembles and validates a [`ModelDefinition`].
///
/// Rates are registered per family; constant and state-dependent parts of
/// the same entry merge into one channel. Type-change targets outside the
/// truncated space are accepted and become truncation-loss channels.
pub struct ModelBuilder {
    name: String,
    space: TypeSpace,
    exprs: Vec<RateExpr>,
    dedup: HashMap<(u8, u64, u64, usize), ExprId>,
    lambda: BTreeMap<(usize, Option<usize>), (f64, ExprId)>,
    delta: BTreeMap<usize, (f64, ExprId)>,
    gamma: BTreeMap<(usize, usize), (f64, ExprId)>,
    gamma_prime: BTreeMap<(usize, usize), (f64, ExprId)>,
    sigma: BTreeMap<(usize, usize), ExprId>,
    zeta: BTreeMap<usize, (f64, ExprId)>,
    beta: BTreeMap<usize, ExprId>,
    slot_reserve: Vec<f64>,
    life: Option<LifeHistorySpec>,
    error: Option<Error>,
}

impl ModelBuilder {
    pub fn new(name: &str, d: usize, cap: u32) -> Result<Self> {
        let space = TypeSpace::new(d, cap)?;
        let mut b = ModelBuilder {
            name: name.to_string(),
            space,
            exprs: Vec::new(),
            dedup: HashMap::new(),
            lambda: BTreeMap::new(),
            delta: BTreeMap::new(),
            gamma: BTreeMap::new(),
            gamma_prime: BTreeMap::new(),
            sigma: BTreeMap::new(),
            zeta: BTreeMap::new(),
            beta: BTreeMap::new(),
            slot_reserve: vec![1.0; d],
            life: None,
            error: None,
        };
        b.register(RateExpr::Zero); // id 0 is always the zero evaluator
        Ok(b)
    }

    pub fn space(&self) -> &TypeSpace {
        &self.space
    }

    fn fail(&mut self, e: Error) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    /// Registers an evaluator, sharing structurally identical ones.
    pub fn register(&mut self, expr: RateExpr) -> ExprId {
        if let Err(e) = expr.validate() {
            self.fail(e);
            return 0;
        }
        if let Some(key) = expr.dedup_key() {
            if let Some(&id) = self.dedup.get(&key) {
                return id;
            }
            let id = self.exprs.len();
            self.exprs.push(expr);
            self.dedup.insert(key, id);
            id
        } else {
            let id = self.exprs.len();
            self.exprs.push(expr);
            id
        }
    }

    fn require_interior(&mut self, comp: &[u32], what: &str) -> Option<usize> {
        match self.space.index_of(comp) {
            Some(idx) => Some(idx),
            None => {
                self.fail(Error::InvalidModel(format!(
                    "{what}: composition {comp:?} outside the type space"
                )));
                None
            }
        }
    }

    fn check_rate(&mut self, rate: f64, what: &str) -> f64 {
        if !rate.is_finite() || rate < 0.0 {
            self.fail(Error::InvalidModel(format!(
                "{what}: rate must be finite and nonnegative, got {rate}"
            )));
            0.0
        } else {
            rate
        }
    }

    /// Patch type change `from -> to` with a constant rate. `to` may lie
    /// outside the truncated space, producing a truncation-loss channel.
    pub fn type_change(&mut self, from: &[u32], to: &[u32], rate: f64) -> &mut Self {
        let rate = self.check_rate(rate, "type change");
        let Some(fi) = self.require_interior(from, "type change source") else { return self };
        if from == to {
            self.fail(Error::InvalidModel(format!(
                "type change {from:?} -> {to:?} may not be diagonal"
            )));
            return self;
        }
        let ti = self.space.index_of(to);
        if ti.is_none() && to.iter().sum::<u32>() <= self.space.cap() {
            self.fail(Error::InvalidModel(format!("type change target {to:?} malformed")));
            return self;
        }
        let slot = self.lambda.entry((fi, ti)).or_insert((0.0, 0));
        slot.0 += rate;
        self
    }

    /// State-dependent part of a type change. At most one evaluator per
    /// (from, to) pair.
    pub fn type_change_expr(&mut self, from: &[u32], to: &[u32], expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(fi) = self.require_interior(from, "type change source") else { return self };
        if from == to {
            self.fail(Error::InvalidModel(format!(
                "type change {from:?} -> {to:?} may not be diagonal"
            )));
            return self;
        }
        let ti = self.space.index_of(to);
        if ti.is_none() && to.iter().sum::<u32>() <= self.space.cap() {
            self.fail(Error::InvalidModel(format!("type change target {to:?} malformed")));
            return self;
        }
        let slot = self.lambda.entry((fi, ti)).or_insert((0.0, 0));
        if slot.1 != 0 {
            self.fail(Error::InvalidModel(format!(
                "duplicate state-dependent type change {from:?} -> {to:?}"
            )));
            return self;
        }
        slot.1 = id;
        self
    }

    /// Patch creation of the given type (per-scale rate evaluator).
    pub fn patch_creation(&mut self, itype: &[u32], expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(idx) = self.require_interior(itype, "patch creation") else { return self };
        if self.beta.insert(idx, id).is_some() {
            self.fail(Error::InvalidModel(format!("duplicate patch creation for {itype:?}")));
        }
        self
    }

    /// Patch destruction: constant part.
    pub fn destruction(&mut self, itype: &[u32], rate: f64) -> &mut Self {
        let rate = self.check_rate(rate, "destruction");
        let Some(idx) = self.require_interior(itype, "destruction") else { return self };
        self.delta.entry(idx).or_insert((0.0, 0)).0 += rate;
        self
    }

    /// Patch destruction: state-dependent part.
    pub fn destruction_expr(&mut self, itype: &[u32], expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(idx) = self.require_interior(itype, "destruction") else { return self };
        let slot = self.delta.entry(idx).or_insert((0.0, 0));
        if slot.1 != 0 {
            self.fail(Error::InvalidModel(format!("duplicate destruction evaluator for {itype:?}")));
            return self;
        }
        slot.1 = id;
        self
    }

    /// Migration of one `variety` occupant out of `from` (requires the
    /// variety present in the composition).
    pub fn migration_out(&mut self, from: &[u32], variety: usize, rate: f64) -> &mut Self {
        let rate = self.check_rate(rate, "migration out");
        let Some(idx) = self.require_interior(from, "migration out") else { return self };
        if variety >= self.space.d() || from[variety] == 0 {
            self.fail(Error::InvalidModel(format!(
                "migration of variety {variety} out of {from:?}: variety absent"
            )));
            return self;
        }
        self.gamma.entry((idx, variety)).or_insert((0.0, 0)).0 += rate;
        self
    }

    pub fn migration_out_expr(&mut self, from: &[u32], variety: usize, expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(idx) = self.require_interior(from, "migration out") else { return self };
        if variety >= self.space.d() || from[variety] == 0 {
            self.fail(Error::InvalidModel(format!(
                "migration of variety {variety} out of {from:?}: variety absent"
            )));
            return self;
        }
        let slot = self.gamma.entry((idx, variety)).or_insert((0.0, 0));
        if slot.1 != 0 {
            self.fail(Error::InvalidModel("duplicate migration evaluator".into()));
            return self;
        }
        slot.1 = id;
        self
    }

    /// Direct migrant birth emitted by patches of type `source`.
    pub fn migrant_birth(&mut self, source: &[u32], variety: usize, rate: f64) -> &mut Self {
        let rate = self.check_rate(rate, "migrant birth");
        let Some(idx) = self.require_interior(source, "migrant birth") else { return self };
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("migrant birth: no variety {variety}")));
            return self;
        }
        self.gamma_prime.entry((idx, variety)).or_insert((0.0, 0)).0 += rate;
        self
    }

    pub fn migrant_birth_expr(&mut self, source: &[u32], variety: usize, expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(idx) = self.require_interior(source, "migrant birth") else { return self };
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("migrant birth: no variety {variety}")));
            return self;
        }
        let slot = self.gamma_prime.entry((idx, variety)).or_insert((0.0, 0));
        if slot.1 != 0 {
            self.fail(Error::InvalidModel("duplicate migrant-birth evaluator".into()));
            return self;
        }
        slot.1 = id;
        self
    }

    /// Settlement propensity of `variety` migrants into patches of type
    /// `into`. The population rate is migrants x patch density x value.
    pub fn settlement(&mut self, variety: usize, into: &[u32], expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        let Some(idx) = self.require_interior(into, "settlement") else { return self };
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("settlement: no variety {variety}")));
            return self;
        }
        if self.sigma.insert((idx, variety), id).is_some() {
            self.fail(Error::InvalidModel("duplicate settlement evaluator".into()));
        }
        self
    }

    /// Migrant death: constant part.
    pub fn migrant_death(&mut self, variety: usize, rate: f64) -> &mut Self {
        let rate = self.check_rate(rate, "migrant death");
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("migrant death: no variety {variety}")));
            return self;
        }
        self.zeta.entry(variety).or_insert((0.0, 0)).0 += rate;
        self
    }

    pub fn migrant_death_expr(&mut self, variety: usize, expr: RateExpr) -> &mut Self {
        let id = self.register(expr);
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("migrant death: no variety {variety}")));
            return self;
        }
        let slot = self.zeta.entry(variety).or_insert((0.0, 0));
        if slot.1 != 0 {
            self.fail(Error::InvalidModel("duplicate migrant-death evaluator".into()));
            return self;
        }
        slot.1 = id;
        self
    }

    /// Empty-slot reserve per unit of scale for one variety; must cover
    /// the migrant density over the horizon of interest with a margin.
    pub fn slot_reserve(&mut self, variety: usize, h: f64) -> &mut Self {
        if variety >= self.space.d() {
            self.fail(Error::InvalidModel(format!("slot reserve: no variety {variety}")));
            return self;
        }
        if !h.is_finite() || h <= 0.0 {
            self.fail(Error::InvalidModel("slot reserve must be positive".into()));
            return self;
        }
        self.slot_reserve[variety] = h;
        self
    }

    /// Attaches a life-history declaration built against this builder's
    /// evaluator registry.
    pub fn life_history(&mut self, life: LifeHistorySpec) -> &mut Self {
        self.life = Some(life);
        self
    }

    pub fn build(mut self) -> Result<ModelDefinition> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let space = self.space;
        let d = space.d();
        let ni = space.n_interior();

        let mut lambda_entries = Vec::new();
        let mut channels = Vec::new();
        for (&(from, to), &(fixed, expr)) in &self.lambda {
            lambda_entries.push(TypeChangeEntry { from, to, fixed, expr });
            let event = match to {
                Some(to) => Event::TypeChange { from, to },
                None => Event::TruncationLoss { from, variety: None },
            };
            channels.push(Channel { event, kind: ChannelKind::PerPatch { from }, fixed, expr });
        }

        let mut beta_entries = Vec::new();
        for (&itype, &expr) in &self.beta {
            beta_entries.push((itype, expr));
            channels.push(Channel {
                event: Event::PatchCreated { itype },
                kind: ChannelKind::PerScale,
                fixed: 0.0,
                expr,
            });
        }

        let mut delta_fixed = vec![0.0; ni];
        let mut delta_expr = vec![0usize; ni];
        for (&itype, &(fixed, expr)) in &self.delta {
            delta_fixed[itype] = fixed;
            delta_expr[itype] = expr;
            channels.push(Channel {
                event: Event::PatchDestroyed { itype },
                kind: ChannelKind::PerPatch { from: itype },
                fixed,
                expr,
            });
        }

        let mut gamma_fixed = vec![0.0; ni * d];
        let mut gamma_expr = vec![0usize; ni * d];
        for (&(from, variety), &(fixed, expr)) in &self.gamma {
            gamma_fixed[from * d + variety] = fixed;
            gamma_expr[from * d + variety] = expr;
            channels.push(Channel {
                event: Event::MigrationOut { from, variety },
                kind: ChannelKind::PerPatch { from },
                fixed,
                expr,
            });
        }

        let mut gamma_prime_fixed = vec![0.0; ni * d];
        let mut gamma_prime_expr = vec![0usize; ni * d];
        for (&(source, variety), &(fixed, expr)) in &self.gamma_prime {
            gamma_prime_fixed[source * d + variety] = fixed;
            gamma_prime_expr[source * d + variety] = expr;
            channels.push(Channel {
                event: Event::MigrantBirth { source, variety },
                kind: ChannelKind::PerPatch { from: source },
                fixed,
                expr,
            });
        }

        let mut sigma_expr = vec![0usize; ni * d];
        for (&(into, variety), &expr) in &self.sigma {
            sigma_expr[into * d + variety] = expr;
            let event = match space.add_unit(into, variety) {
                Some(_) => Event::Settlement { into, variety },
                None => Event::TruncationLoss { from: into, variety: Some(variety) },
            };
            channels.push(Channel {
                event,
                kind: ChannelKind::PerEncounter { into, variety },
                fixed: 0.0,
                expr,
            });
        }

        let mut zeta_fixed = vec![0.0; d];
        for (&variety, &(fixed, expr)) in &self.zeta {
            zeta_fixed[variety] = fixed;
            channels.push(Channel {
                event: Event::MigrantDeath { variety },
                kind: ChannelKind::PerMigrant { variety },
                fixed,
                expr,
            });
        }

        if let Some(life) = &self.life {
            let want = ni * d;
            if life.death_fixed.len() != want || life.death_expr.len() != want {
                return Err(Error::InvalidModel(
                    "life history death table must cover every (patch type, variety)".into(),
                ));
            }
            for itype in 0..ni {
                for l in 0..d {
                    if space.comp(itype)[l] == 0 {
                        continue;
                    }
                    if life.death_fixed[itype * d + l] < delta_fixed[itype] {
                        return Err(Error::InvalidModel(format!(
                            "life history death rate at type {:?} variety {l} is below the \
                             patch-destruction rate",
                            space.comp(itype)
                        )));
                    }
                }
            }
        }

        Ok(ModelDefinition {
            name: self.name,
            space,
            exprs: self.exprs,
            channels,
            lambda_entries,
            delta_fixed,
            delta_expr,
            gamma_fixed,
            gamma_expr,
            gamma_prime_fixed,
            gamma_prime_expr,
            sigma_expr,
            zeta_fixed,
            beta_entries,
            slot_reserve: self.slot_reserve,
            life: self.life,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> ModelDefinition {
        // d = 1, cap = 2: patches p0, p1, p2 plus one migrant pool
        let mut b = ModelBuilder::new("toy", 1, 2).unwrap();
        b.type_change(&[1], &[2], 2.0)
            .destruction(&[1], 0.5)
            .migration_out(&[1], 0, 0.3)
            .settlement(0, &[0], RateExpr::Const(1.5))
            .migrant_death(0, 0.25)
            .patch_creation(&[0], RateExpr::Const(0.7));
        b.build().unwrap()
    }

    #[test]
    fn composition_enumeration_is_sorted_and_complete() {
        let space = TypeSpace::new(2, 2).unwrap();
        let want: Vec<Vec<u32>> =
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![0, 2], vec![1, 1], vec![2, 0]];
        let got: Vec<Vec<u32>> = (0..space.n_interior()).map(|k| space.comp(k).clone()).collect();
        assert_eq!(got, want);
        assert_eq!(space.len(), 6 + 4);
    }

    #[test]
    fn weights_match_patch_sizes() {
        let space = TypeSpace::new(2, 3).unwrap();
        let idx = space.index_of(&[1, 1]).unwrap();
        assert_eq!(space.nu(idx), 3.0);
        assert_eq!(space.mu(idx), 3.0);
        assert_eq!(space.nu(space.migrant(0)), 1.0);
        assert_eq!(space.mu(space.migrant(1)), 1.0);
        assert_eq!(space.nu(space.empty_slot(0)), 1.0);
        assert_eq!(space.mu(space.empty_slot(0)), 0.0, "empty slots carry no norm weight");
    }

    #[test]
    fn mu_norm_hand_value() {
        let space = TypeSpace::new(1, 3).unwrap();
        let x = ScaledState::from_patches(&space, &[(&[0], 0.5), (&[2], 0.25)], &[0.1]).unwrap();
        // 0.5 * 1 + 0.25 * 3 + 0.1 * 1
        assert!((space.mu_norm(&x) - 1.35).abs() < 1e-12);
    }

    #[test]
    fn mu_norm_matches_descriptor_weighted_sum() {
        // independent recomputation through the public descriptors
        let space = TypeSpace::new(2, 4).unwrap();
        let mut x = ScaledState::zero(&space);
        for (k, v) in x.values.iter_mut().enumerate() {
            *v = ((k * 7919) % 13) as f64 / 13.0 - 0.3;
        }
        let by_descriptor: f64 = (0..space.len())
            .map(|idx| match space.patch_type(idx) {
                PatchType::Patch(c) => (c.iter().sum::<u32>() as f64 + 1.0) * x.values[idx].abs(),
                PatchType::Migrant { .. } => x.values[idx].abs(),
                PatchType::EmptySlot { .. } => 0.0,
            })
            .sum();
        assert!((space.mu_norm(&x) - by_descriptor).abs() < 1e-12);
    }

    #[test]
    fn empirical_moments_hand_values() {
        let space = TypeSpace::new(1, 3).unwrap();
        let x = ScaledState::from_patches(&space, &[(&[0], 0.5), (&[2], 0.25)], &[0.1]).unwrap();
        let s0 = space.empirical_moment(&x, 0);
        let s1 = space.empirical_moment(&x, 1);
        let s2 = space.empirical_moment(&x, 2);
        assert!((s0 - 0.85).abs() < 1e-12, "S_0 counts patches and migrants");
        assert!((s1 - space.mu_norm(&x)).abs() < 1e-12, "S_1 equals the norm for x >= 0");
        assert!((s2 - (0.5 + 0.25 * 9.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn neighbor_lookups_respect_boundaries() {
        let space = TypeSpace::new(2, 2).unwrap();
        let i11 = space.index_of(&[1, 1]).unwrap();
        assert_eq!(space.add_unit(i11, 0), None, "cap reached");
        let i10 = space.index_of(&[1, 0]).unwrap();
        assert_eq!(space.sub_unit(i10, 1), None, "variety absent");
        assert_eq!(space.sub_unit(i10, 0), space.index_of(&[0, 0]));
        assert_eq!(space.add_unit(i10, 1), Some(i11));
    }

    #[test]
    fn builder_rejects_negative_rate() {
        let mut b = ModelBuilder::new("bad", 1, 2).unwrap();
        b.type_change(&[1], &[2], -1.0);
        assert!(matches!(b.build(), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn builder_rejects_diagonal_type_change() {
        let mut b = ModelBuilder::new("bad", 1, 2).unwrap();
        b.type_change(&[1], &[1], 1.0);
        assert!(matches!(b.build(), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn builder_rejects_migration_of_absent_variety() {
        let mut b = ModelBuilder::new("bad", 2, 2).unwrap();
        b.migration_out(&[1, 0], 1, 0.5);
        assert!(matches!(b.build(), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn rate_table_matches_hand_enumeration() {
        let model = toy_model();
        let space = model.space();
        let mut state = PopulationState::new(space, 10);
        state.set_count(space.index_of(&[0]).unwrap(), 2);
        state.set_count(space.index_of(&[1]).unwrap(), 3);
        state.set_count(space.index_of(&[2]).unwrap(), 1);
        state.set_count(space.migrant(0), 2);
        state.set_count(space.empty_slot(0), 4);

        let table = event_rate_table(&model, &state);
        let mut by_event: HashMap<String, f64> = HashMap::new();
        for er in &table.events {
            by_event.insert(format!("{:?}", er.event), er.rate);
        }
        let i0 = space.index_of(&[0]).unwrap();
        let i1 = space.index_of(&[1]).unwrap();
        let i2 = space.index_of(&[2]).unwrap();

        // hand-computed population rates at N = 10
        let expect = [
            (format!("{:?}", Event::TypeChange { from: i1, to: i2 }), 3.0 * 2.0),
            (format!("{:?}", Event::PatchCreated { itype: i0 }), 10.0 * 0.7),
            (format!("{:?}", Event::PatchDestroyed { itype: i1 }), 3.0 * 0.5),
            (format!("{:?}", Event::MigrationOut { from: i1, variety: 0 }), 3.0 * 0.3),
            // migrants x patches x sigma / N = 2 * 2 * 1.5 / 10
            (format!("{:?}", Event::Settlement { into: i0, variety: 0 }), 0.6),
            (format!("{:?}", Event::MigrantDeath { variety: 0 }), 2.0 * 0.25),
        ];
        assert_eq!(table.events.len(), expect.len());
        for (key, want) in expect {
            let got = by_event.get(&key).unwrap_or_else(|| panic!("missing event {key}"));
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "{key}: got {got}, want {want}");
        }
        let want_total: f64 = 6.0 + 7.0 + 1.5 + 0.9 + 0.6 + 0.5;
        assert!((table.total - want_total).abs() < 1e-9);
        assert_eq!(table.truncation_loss_rate, 0.0);
    }

    #[test]
    fn events_conserve_slot_totals() {
        let model = toy_model();
        let space = model.space();
        let mut state = PopulationState::new(space, 10);
        state.set_count(space.index_of(&[0]).unwrap(), 2);
        state.set_count(space.index_of(&[1]).unwrap(), 3);
        state.set_count(space.migrant(0), 2);
        state.set_count(space.empty_slot(0), 4);
        let before = state.slot_total(space, 0);
        for er in event_rate_table(&model, &state).events {
            let mut s = state.clone();
            s.apply(space, &er.event);
            assert_eq!(s.slot_total(space, 0), before, "event {:?} broke slot total", er.event);
        }
    }

    #[test]
    fn rates_scale_linearly_with_n() {
        // same density at twice the scale must double every rate
        let model = toy_model();
        let space = model.space();
        let mut small = PopulationState::new(space, 10);
        small.set_count(space.index_of(&[0]).unwrap(), 2);
        small.set_count(space.index_of(&[1]).unwrap(), 3);
        small.set_count(space.migrant(0), 2);
        small.set_count(space.empty_slot(0), 4);
        let mut big = PopulationState::new(space, 20);
        for idx in 0..space.len() {
            big.set_count(idx, small.count(idx) * 2);
        }
        let ts = event_rate_table(&model, &small);
        let tb = event_rate_table(&model, &big);
        assert_eq!(ts.events.len(), tb.events.len());
        for (a, b) in ts.events.iter().zip(&tb.events) {
            assert_eq!(a.event, b.event);
            assert!((b.rate - 2.0 * a.rate).abs() < 1e-9 * b.rate.max(1.0));
        }
    }

    #[test]
    fn settlement_at_cap_is_truncation_loss() {
        let mut b = ModelBuilder::new("cap", 1, 2).unwrap();
        b.settlement(0, &[2], RateExpr::Const(1.0));
        let model = b.build().unwrap();
        let space = model.space();
        let mut state = PopulationState::new(space, 4);
        state.set_count(space.index_of(&[2]).unwrap(), 1);
        state.set_count(space.migrant(0), 2);
        state.set_count(space.empty_slot(0), 2);
        let table = event_rate_table(&model, &state);
        assert_eq!(table.events.len(), 1);
        assert!(matches!(table.events[0].event, Event::TruncationLoss { variety: Some(0), .. }));
        // migrants x patches x sigma / N = 2 * 1 * 1 / 4
        assert!((table.truncation_loss_rate - 0.5).abs() < 1e-12);
        assert!((table.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_space_type_change_is_truncation_loss() {
        let mut b = ModelBuilder::new("cap", 1, 2).unwrap();
        b.type_change(&[2], &[3], 4.0);
        let model = b.build().unwrap();
        let space = model.space();
        let mut state = PopulationState::new(space, 4);
        state.set_count(space.index_of(&[2]).unwrap(), 3);
        let table = event_rate_table(&model, &state);
        assert_eq!(table.events.len(), 1);
        assert!(matches!(table.events[0].event, Event::TruncationLoss { variety: None, .. }));
        assert!((table.truncation_loss_rate - 12.0).abs() < 1e-12);
    }

    #[test]
    fn event_application_updates_counts() {
        let space = TypeSpace::new(1, 2).unwrap();
        let mut state = PopulationState::new(&space, 10);
        let i1 = space.index_of(&[1]).unwrap();
        let i0 = space.index_of(&[0]).unwrap();
        state.set_count(i1, 2);
        state.set_count(space.empty_slot(0), 3);
        state.apply(&space, &Event::MigrationOut { from: i1, variety: 0 });
        assert_eq!(state.count(i1), 1);
        assert_eq!(state.count(i0), 1);
        assert_eq!(state.count(space.migrant(0)), 1);
        assert_eq!(state.count(space.empty_slot(0)), 2);
        state.apply(&space, &Event::Settlement { into: i0, variety: 0 });
        assert_eq!(state.count(i0), 0);
        assert_eq!(state.count(i1), 2);
        assert_eq!(state.count(space.migrant(0)), 0);
        assert_eq!(state.count(space.empty_slot(0)), 3);
    }

    #[test]
    fn size_jumps_cancel_slot_moves() {
        let space = TypeSpace::new(1, 3).unwrap();
        let i2 = space.index_of(&[2]).unwrap();
        // migration out: patch shrinks by one, slot bookkeeping cancels
        let out = Event::MigrationOut { from: i2, variety: 0 };
        for r in 0..4 {
            let want = (2f64).powi(r) - 3f64.powi(r);
            assert!((out.size_jump(&space, r as u32) - want).abs() < 1e-12);
        }
        // migrant birth and death move size only between slot kinds
        let birth = Event::MigrantBirth { source: i2, variety: 0 };
        let death = Event::MigrantDeath { variety: 0 };
        for r in 0..4 {
            assert_eq!(birth.size_jump(&space, r), 0.0);
            assert_eq!(death.size_jump(&space, r), 0.0);
        }
    }

    #[test]
    fn mean_load_infection_hand_value() {
        let space = TypeSpace::new(1, 3).unwrap();
        let x = ScaledState::from_patches(&space, &[(&[0], 0.4), (&[2], 0.3)], &[0.0]).unwrap();
        let e = RateExpr::MeanLoadInfection { rate: 2.0, half_sat: 1.0 };
        // load = 2 * 0.3 = 0.6, hosts = 0.7 => 2 * 0.6 / 1.7
        assert!((e.eval(&space, &x) - 2.0 * 0.6 / 1.7).abs() < 1e-12);
        assert!(e.eval(&space, &x) <= e.bound_within(space.mu_norm(&x)) + 1e-12);
    }

    #[test]
    fn fecundity_birth_hand_value() {
        let space = TypeSpace::new(1, 3).unwrap();
        let x = ScaledState::from_patches(&space, &[(&[0], 0.4), (&[2], 0.3)], &[0.0]).unwrap();
        let e = RateExpr::FecundityWeightedBirth { rate: 3.0, fecundity: 0.5 };
        let want = 3.0 * (0.4 + 0.3 * 0.25);
        assert!((e.eval(&space, &x) - want).abs() < 1e-12);
        assert!(e.eval(&space, &x) <= e.bound_within(space.mu_norm(&x)) + 1e-12);
    }

    #[test]
    fn expr_registry_shares_identical_forms() {
        let mut b = ModelBuilder::new("dedup", 1, 3).unwrap();
        let a = b.register(RateExpr::Const(2.5));
        let c = b.register(RateExpr::Const(2.5));
        let d = b.register(RateExpr::Const(2.0));
        assert_eq!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let m1 = toy_model();
        let m2 = toy_model();
        assert_eq!(m1.fingerprint(), m2.fingerprint());
        let mut b = ModelBuilder::new("toy", 1, 2).unwrap();
        b.type_change(&[1], &[2], 2.000001)
            .destruction(&[1], 0.5)
            .migration_out(&[1], 0, 0.3)
            .settlement(0, &[0], RateExpr::Const(1.5))
            .migrant_death(0, 0.25)
            .patch_creation(&[0], RateExpr::Const(0.7));
        let m3 = b.build().unwrap();
        assert_ne!(m1.fingerprint(), m3.fingerprint());
    }
}
