//! Tagged patches and tagged individuals.
//!
//! A *tagged* unit is a single patch (or a single occupant of a patch)
//! followed through time while the surrounding population acts only as an
//! environment. Its law is an inhomogeneous jump chain whose rates are the
//! per-unit conditional rates of the population process, evaluated along
//! whatever environment drives it: an empirical trajectory, a
//! deterministic path, or a frozen state.
//!
//! The module provides
//! * [`TaggedChain`] — the transition structure of a tagged patch or
//!   tagged individual, derived from a [`ModelDefinition`];
//! * the [`Environment`] trait with empirical, deterministic-path and
//!   frozen drivers;
//! * [`simulate_tagged`] — exact simulation by thinning against a
//!   declared-rate majorant;
//! * [`couple_tagged`] — a joint construction of two copies of the same
//!   chain in two environments that move together at the pointwise
//!   minimum of their rates and split apart at the difference;
//! * [`replay_tagged_patches`] — exact conditional tracking of specific
//!   patches inside a recorded population run;
//! * decoupling probability bounds and an empirical joint-vs-product
//!   independence measurement for groups of tagged units.

use crate::error::{Error, Result};
use crate::model::{
    Event, ExprId, ModelDefinition, PopulationState, ScaledState, TypeSpace,
};
use crate::rng::RngStream;
use crate::ssa::Trajectory;
use crate::stats;

// ── Tag state ────────────────────────────────────────────────────────────

/// State of one tagged unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagState {
    /// A tagged patch of the given interior type index.
    Patch(usize),
    /// A tagged occupant: the type index of its patch and its variety.
    Individual { patch: usize, variety: usize },
    /// The tagged unit has been removed (patch destroyed or occupant
    /// dead). Absorbing.
    Dead,
}

impl TagState {
    pub fn is_alive(&self) -> bool {
        !matches!(self, TagState::Dead)
    }

    /// Interior type index of the patch the tag currently occupies.
    pub fn patch_index(&self) -> Option<usize> {
        match *self {
            TagState::Patch(i) => Some(i),
            TagState::Individual { patch, .. } => Some(patch),
            TagState::Dead => None,
        }
    }
}

// ── Chain structure ──────────────────────────────────────────────────────

/// One admissible move of a tagged unit, as a rate template: the actual
/// rate at environment `x` is `(fixed + expr(x)) * factor`, where the
/// factor is the scaled migrant density of `encounter`'s variety when the
/// move is settlement-driven and 1 otherwise.
#[derive(Clone, Debug)]
struct MoveTemplate {
    to: TagState,
    fixed: f64,
    expr: ExprId,
    encounter: Option<usize>,
    /// Offspring credited to the tag when the move fires.
    births: u32,
}

/// A fully evaluated admissible move at one (state, environment) point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EvaluatedMove {
    pub(crate) to: TagState,
    pub(crate) rate: f64,
    pub(crate) births: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ChainKind {
    Patch,
    Individual,
}

/// Transition structure of a tagged patch or tagged individual derived
/// from a model. Instances are cheap to build and borrow the model.
///
/// Moves that the truncated population suppresses at the occupancy cap
/// (loss channels, out-of-space brood targets) are omitted here as well,
/// so the tagged law matches the truncated population law exactly.
pub struct TaggedChain<'m> {
    model: &'m ModelDefinition,
    kind: ChainKind,
    /// Indexed by interior type (patch chains) or `patch * d + variety`
    /// (individual chains). The per-state order is fixed, which the
    /// coupling construction relies on to align moves across copies.
    templates: Vec<Vec<MoveTemplate>>,
}

impl<'m> TaggedChain<'m> {
    /// Chain of one tagged patch: type changes, migrant departures,
    /// settlement arrivals and patch destruction.
    pub fn patch(model: &'m ModelDefinition) -> Self {
        let space = model.space();
        let d = space.d();
        let ni = space.n_interior();
        let mut templates = vec![Vec::new(); ni];
        for e in &model.lambda_entries {
            if let Some(to) = e.to {
                templates[e.from].push(MoveTemplate {
                    to: TagState::Patch(to),
                    fixed: e.fixed,
                    expr: e.expr,
                    encounter: None,
                    births: 0,
                });
            }
        }
        for i in 0..ni {
            for l in 0..d {
                let f = i * d + l;
                if model.gamma_fixed[f] != 0.0 || model.gamma_expr[f] != 0 {
                    if let Some(to) = space.sub_unit(i, l) {
                        templates[i].push(MoveTemplate {
                            to: TagState::Patch(to),
                            fixed: model.gamma_fixed[f],
                            expr: model.gamma_expr[f],
                            encounter: None,
                            births: 0,
                        });
                    }
                }
                if model.sigma_expr[f] != 0 {
                    if let Some(to) = space.add_unit(i, l) {
                        templates[i].push(MoveTemplate {
                            to: TagState::Patch(to),
                            fixed: 0.0,
                            expr: model.sigma_expr[f],
                            encounter: Some(l),
                            births: 0,
                        });
                    }
                }
            }
            if model.delta_fixed[i] != 0.0 || model.delta_expr[i] != 0 {
                templates[i].push(MoveTemplate {
                    to: TagState::Dead,
                    fixed: model.delta_fixed[i],
                    expr: model.delta_expr[i],
                    encounter: None,
                    births: 0,
                });
            }
        }
        TaggedChain { model, kind: ChainKind::Patch, templates }
    }

    /// Chain of one tagged occupant, derived from the model's
    /// life-history declaration. Fails when the model has none.
    pub fn individual(model: &'m ModelDefinition) -> Result<Self> {
        let life = model.life_history().ok_or_else(|| {
            Error::InvalidModel(format!(
                "model '{}' declares no life history; tagged individuals need one",
                model.name
            ))
        })?;
        let space = model.space();
        let d = space.d();
        let ni = space.n_interior();
        let mut templates = vec![Vec::new(); ni * d];
        for e in &life.own_offspring {
            let comp = space.comp(e.itype);
            let mut target: Vec<u32> = comp.to_vec();
            let mut births = 0u32;
            for (l, &b) in e.brood.iter().enumerate() {
                target[l] += b;
                births += b;
            }
            // Broods that would push the patch over the cap are suppressed
            // in the truncated population, hence omitted here too.
            if let Some(to) = space.index_of(&target) {
                templates[e.itype * d + e.variety].push(MoveTemplate {
                    to: TagState::Individual { patch: to, variety: e.variety },
                    fixed: e.fixed,
                    expr: e.expr,
                    encounter: None,
                    births,
                });
            }
        }
        for e in &life.patch_change {
            templates[e.itype * d + e.variety].push(MoveTemplate {
                to: TagState::Individual { patch: e.to, variety: e.variety },
                fixed: e.fixed,
                expr: e.expr,
                encounter: None,
                births: 0,
            });
        }
        for e in &life.variety_change {
            templates[e.itype * d + e.variety].push(MoveTemplate {
                to: TagState::Individual { patch: e.itype, variety: e.to_variety },
                fixed: e.fixed,
                expr: e.expr,
                encounter: None,
                births: 0,
            });
        }
        for e in &life.migrant_child {
            templates[e.itype * d + e.variety].push(MoveTemplate {
                to: TagState::Individual { patch: e.itype, variety: e.variety },
                fixed: e.fixed,
                expr: e.expr,
                encounter: None,
                births: 1,
            });
        }
        for i in 0..ni {
            for l in 0..d {
                let f = i * d + l;
                if life.death_fixed[f] != 0.0 || life.death_expr[f] != 0 {
                    templates[f].push(MoveTemplate {
                        to: TagState::Dead,
                        fixed: life.death_fixed[f],
                        expr: life.death_expr[f],
                        encounter: None,
                        births: 0,
                    });
                }
            }
        }
        Ok(TaggedChain { model, kind: ChainKind::Individual, templates })
    }

    pub fn model(&self) -> &ModelDefinition {
        self.model
    }

    fn slot_of(&self, s: TagState) -> Option<usize> {
        match (self.kind, s) {
            (ChainKind::Patch, TagState::Patch(i)) => Some(i),
            (ChainKind::Individual, TagState::Individual { patch, variety }) => {
                Some(patch * self.model.d() + variety)
            }
            _ => None,
        }
    }

    /// Checks that `s` is a valid live state for this chain kind.
    fn validate_start(&self, s: TagState) -> Result<()> {
        match self.slot_of(s) {
            Some(slot) if slot < self.templates.len() => Ok(()),
            _ => Err(Error::Config(format!(
                "start state {s:?} does not fit this tagged chain"
            ))),
        }
    }

    /// Evaluates the admissible moves from `s` at environment `x` into
    /// `out`, given the evaluator cache for `x`. Dead states have none.
    pub(crate) fn moves_into(
        &self,
        s: TagState,
        x: &ScaledState,
        cache: &[f64],
        out: &mut Vec<EvaluatedMove>,
    ) {
        out.clear();
        let Some(slot) = self.slot_of(s) else { return };
        let space = self.model.space();
        for t in &self.templates[slot] {
            let factor = match t.encounter {
                Some(l) => x.values[space.migrant(l)],
                None => 1.0,
            };
            out.push(EvaluatedMove {
                to: t.to,
                rate: (t.fixed + cache[t.expr]) * factor,
                births: t.births,
            });
        }
    }

    /// Upper bound on the total move rate from any state, valid whenever
    /// the environment stays within μ-norm `radius`. Uses the declared
    /// bounds of every evaluator, so it is a true majorant as long as the
    /// declarations hold (violations are detected during simulation).
    pub fn rate_bound(&self, radius: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for state in &self.templates {
            let mut total = 0.0;
            for t in state {
                let factor = if t.encounter.is_some() { radius } else { 1.0 };
                total += (t.fixed + self.model.expr(t.expr).bound_within(radius)) * factor;
            }
            worst = worst.max(total);
        }
        worst
    }
}

// ── Environments ─────────────────────────────────────────────────────────

/// A (possibly time-varying) population density that drives a tagged
/// chain. Queries must come with nondecreasing times.
pub trait Environment {
    /// Scaled population state at time `t`.
    fn at(&mut self, t: f64) -> &ScaledState;
    /// A μ-norm radius the environment never exceeds on its horizon;
    /// used to size thinning majorants.
    fn radius(&self) -> f64;
}

/// A constant environment (e.g. an equilibrium).
pub struct FrozenEnv {
    x: ScaledState,
    r: f64,
}

impl FrozenEnv {
    pub fn new(space: &TypeSpace, x: ScaledState) -> Self {
        let r = space.mu_norm(&x);
        FrozenEnv { x, r }
    }
}

impl Environment for FrozenEnv {
    fn at(&mut self, _t: f64) -> &ScaledState {
        &self.x
    }

    fn radius(&self) -> f64 {
        self.r
    }
}

/// A deterministic-path environment. Values between nodes interpolate
/// linearly, which cannot exceed the node norms, so the stored supremum
/// is a valid radius.
pub struct PathEnv<'a> {
    path: &'a crate::det::DeterministicPath,
    scratch: ScaledState,
}

impl<'a> PathEnv<'a> {
    pub fn new(path: &'a crate::det::DeterministicPath) -> Self {
        let scratch = path.at(0.0);
        PathEnv { path, scratch }
    }
}

impl Environment for PathEnv<'_> {
    fn at(&mut self, t: f64) -> &ScaledState {
        self.scratch = self.path.at(t);
        &self.scratch
    }

    fn radius(&self) -> f64 {
        self.path.sup_mu_norm
    }
}

/// An empirical environment: the piecewise-constant scaled state of a
/// recorded population run, replayed exactly from its event log.
pub struct EmpiricalEnv<'a> {
    space: &'a TypeSpace,
    events: &'a [(f64, Event)],
    state: PopulationState,
    x: ScaledState,
    pos: usize,
    r: f64,
}

impl<'a> EmpiricalEnv<'a> {
    /// Builds the environment from a run's initial state and trajectory.
    /// The trajectory must carry its event log (`record_events`).
    pub fn new(
        model: &'a ModelDefinition,
        init: &PopulationState,
        traj: &'a Trajectory,
    ) -> Result<Self> {
        if traj.events.is_empty() && traj.n_events > 0 {
            return Err(Error::Config(
                "trajectory has no event log; rerun with event recording on".into(),
            ));
        }
        let space = model.space();
        // One pass to find the exact norm radius over the whole run.
        let mut probe = init.clone();
        let mut r = space.mu_norm(&probe.scaled());
        for (_, ev) in &traj.events {
            probe.apply(space, ev);
            r = r.max(space.mu_norm(&probe.scaled()));
        }
        let state = init.clone();
        let x = state.scaled();
        Ok(EmpiricalEnv { space, events: &traj.events, state, x, pos: 0, r })
    }
}

impl Environment for EmpiricalEnv<'_> {
    fn at(&mut self, t: f64) -> &ScaledState {
        let mut moved = false;
        while self.pos < self.events.len() && self.events[self.pos].0 <= t {
            self.state.apply(self.space, &self.events[self.pos].1);
            self.pos += 1;
            moved = true;
        }
        if moved {
            self.x = self.state.scaled();
        }
        &self.x
    }

    fn radius(&self) -> f64 {
        self.r
    }
}

// ── Simulation ───────────────────────────────────────────────────────────

/// Options for tagged simulation.
#[derive(Clone, Copy, Debug)]
pub struct TaggedOptions {
    pub horizon: f64,
    /// Safety factor applied to the declared rate bound when sizing the
    /// thinning majorant. Larger values cost proposals, never accuracy.
    pub majorant_margin: f64,
}

impl TaggedOptions {
    pub fn new(horizon: f64) -> Self {
        TaggedOptions { horizon, majorant_margin: 1.25 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("tagged horizon must be positive and finite".into()));
        }
        if !(self.majorant_margin >= 1.0) {
            return Err(Error::Config("majorant margin must be at least 1".into()));
        }
        Ok(())
    }
}

/// One realized tagged path: jump times with post-jump states.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedPath {
    pub start: TagState,
    pub times: Vec<f64>,
    pub states: Vec<TagState>,
    /// Total offspring credited to the tag over the run.
    pub births: u32,
    pub final_state: TagState,
    /// Thinning proposals generated (accepted + rejected).
    pub proposals: u64,
}

impl TaggedPath {
    fn new(start: TagState) -> Self {
        TaggedPath {
            start,
            times: Vec::new(),
            states: Vec::new(),
            births: 0,
            final_state: start,
            proposals: 0,
        }
    }

    fn record(&mut self, t: f64, s: TagState, births: u32) {
        self.times.push(t);
        self.states.push(s);
        self.births += births;
        self.final_state = s;
    }

    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> TagState {
        match self.times.partition_point(|&u| u <= t) {
            0 => self.start,
            k => self.states[k - 1],
        }
    }
}

/// Simulates one tagged unit exactly by thinning a Poisson proposal
/// stream against the chain's declared rate bound. Valid for every
/// environment kind; errors with [`Error::MajorantViolation`] if the
/// realized rates ever exceed the majorant (a broken bound declaration).
pub fn simulate_tagged(
    chain: &TaggedChain,
    env: &mut dyn Environment,
    start: TagState,
    opts: &TaggedOptions,
    rng: &mut RngStream,
) -> Result<TaggedPath> {
    opts.validate()?;
    chain.validate_start(start)?;
    let majorant = chain.rate_bound(env.radius()) * opts.majorant_margin;
    let mut path = TaggedPath::new(start);
    if majorant <= 0.0 {
        return Ok(path);
    }
    let mut state = start;
    let mut t = 0.0;
    let mut cache = Vec::new();
    let mut moves = Vec::new();
    loop {
        t += rng.exponential(majorant);
        if t >= opts.horizon {
            break;
        }
        path.proposals += 1;
        let x = env.at(t);
        chain.model.eval_exprs(x, &mut cache);
        chain.moves_into(state, x, &cache, &mut moves);
        let total: f64 = moves.iter().map(|m| m.rate).sum();
        if total > majorant * (1.0 + 1e-9) {
            return Err(Error::MajorantViolation { rate: total, bound: majorant, t });
        }
        let u = rng.uniform() * majorant;
        if u > total {
            continue; // thinned proposal
        }
        let mut acc = 0.0;
        for m in &moves {
            acc += m.rate;
            if u <= acc {
                state = m.to;
                path.record(t, state, m.births);
                break;
            }
        }
        if state == TagState::Dead {
            break;
        }
    }
    Ok(path)
}

// ── Coupling ─────────────────────────────────────────────────────────────

/// Outcome of a two-environment coupling run.
#[derive(Clone, Debug)]
pub struct CoupleOutcome {
    /// First time the two copies made different moves; `None` when they
    /// stayed together over the whole horizon.
    pub tau: Option<f64>,
    pub path1: TaggedPath,
    pub path2: TaggedPath,
}

impl CoupleOutcome {
    pub fn stayed_coupled(&self) -> bool {
        self.tau.is_none()
    }
}

/// Runs two copies of the same tagged chain, driven by `env1` and `env2`,
/// jointly: while the copies agree they share every move at the pointwise
/// minimum of their rates and split only at the rate difference; from the
/// first split onward they evolve independently (even if their states
/// later coincide). Both marginals are exact.
pub fn couple_tagged(
    chain: &TaggedChain,
    env1: &mut dyn Environment,
    env2: &mut dyn Environment,
    start: TagState,
    opts: &TaggedOptions,
    rng: &mut RngStream,
) -> Result<CoupleOutcome> {
    opts.validate()?;
    chain.validate_start(start)?;
    let radius = env1.radius().max(env2.radius());
    // Covers the sum of both totals on the diagonal and each total alone
    // off it.
    let majorant = 2.0 * chain.rate_bound(radius) * opts.majorant_margin;
    let mut path1 = TaggedPath::new(start);
    let mut path2 = TaggedPath::new(start);
    let mut s1 = start;
    let mut s2 = start;
    let mut tau = None;
    let mut t = 0.0;
    let (mut cache1, mut cache2) = (Vec::new(), Vec::new());
    let (mut moves1, mut moves2) = (Vec::new(), Vec::new());
    if majorant > 0.0 {
        loop {
            t += rng.exponential(majorant);
            if t >= opts.horizon {
                break;
            }
            path1.proposals += 1;
            path2.proposals += 1;
            {
                let x1 = env1.at(t);
                chain.model.eval_exprs(x1, &mut cache1);
                chain.moves_into(s1, x1, &cache1, &mut moves1);
            }
            {
                let x2 = env2.at(t);
                chain.model.eval_exprs(x2, &mut cache2);
                chain.moves_into(s2, x2, &cache2, &mut moves2);
            }
            if tau.is_none() && s1 == s2 {
                // Diagonal step: moves align template-for-template.
                debug_assert_eq!(moves1.len(), moves2.len());
                let joint: f64 =
                    moves1.iter().zip(&moves2).map(|(a, b)| a.rate.min(b.rate)).sum();
                let excess1: f64 =
                    moves1.iter().zip(&moves2).map(|(a, b)| (a.rate - b.rate).max(0.0)).sum();
                let excess2: f64 =
                    moves2.iter().zip(&moves1).map(|(a, b)| (a.rate - b.rate).max(0.0)).sum();
                let grand = joint + excess1 + excess2;
                if grand > majorant * (1.0 + 1e-9) {
                    return Err(Error::MajorantViolation { rate: grand, bound: majorant, t });
                }
                let u = rng.uniform() * majorant;
                if u <= joint {
                    let mut acc = 0.0;
                    for (a, b) in moves1.iter().zip(&moves2) {
                        acc += a.rate.min(b.rate);
                        if u <= acc {
                            s1 = a.to;
                            s2 = a.to;
                            path1.record(t, s1, a.births);
                            path2.record(t, s2, b.births);
                            break;
                        }
                    }
                } else if u <= joint + excess1 {
                    let mut acc = joint;
                    for (a, b) in moves1.iter().zip(&moves2) {
                        acc += (a.rate - b.rate).max(0.0);
                        if u <= acc {
                            s1 = a.to;
                            path1.record(t, s1, a.births);
                            tau = Some(t);
                            break;
                        }
                    }
                } else if u <= grand {
                    let mut acc = joint + excess1;
                    for (b, a) in moves2.iter().zip(&moves1) {
                        acc += (b.rate - a.rate).max(0.0);
                        if u <= acc {
                            s2 = b.to;
                            path2.record(t, s2, b.births);
                            tau = Some(t);
                            break;
                        }
                    }
                }
            } else {
                // Past the split (or started apart): independent thinning
                // of each copy against the shared proposal stream.
                let total1: f64 = moves1.iter().map(|m| m.rate).sum();
                let total2: f64 = moves2.iter().map(|m| m.rate).sum();
                if total1.max(total2) > majorant * (1.0 + 1e-9) {
                    return Err(Error::MajorantViolation {
                        rate: total1.max(total2),
                        bound: majorant,
                        t,
                    });
                }
                let u1 = rng.uniform() * majorant;
                if u1 <= total1 {
                    let mut acc = 0.0;
                    for m in &moves1 {
                        acc += m.rate;
                        if u1 <= acc {
                            s1 = m.to;
                            path1.record(t, s1, m.births);
                            break;
                        }
                    }
                }
                let u2 = rng.uniform() * majorant;
                if u2 <= total2 {
                    let mut acc = 0.0;
                    for m in &moves2 {
                        acc += m.rate;
                        if u2 <= acc {
                            s2 = m.to;
                            path2.record(t, s2, m.births);
                            break;
                        }
                    }
                }
            }
            if s1 == TagState::Dead && s2 == TagState::Dead {
                break;
            }
        }
    }
    Ok(CoupleOutcome { tau, path1, path2 })
}

// ── Conditional replay ───────────────────────────────────────────────────

/// Follows specific patches of a recorded population run through its
/// event log, exactly.
///
/// Patch counts carry no identities, but patches of equal type are
/// exchangeable, so conditionally on the count path each event of a
/// patch-level family strikes a uniformly chosen patch of its source
/// type. The replay draws that choice: with `m` live tags of the source
/// type among `X` patches, the event hits a tag with probability `m / X`,
/// uniformly among them. Tags must start on distinct patches, which holds
/// whenever each requested type's multiplicity fits its initial count.
///
/// Returns the final [`TagState`] of each tag at the end of the log.
pub fn replay_tagged_patches(
    model: &ModelDefinition,
    init: &PopulationState,
    events: &[(f64, Event)],
    initial_types: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<TagState>> {
    let space = model.space();
    let ni = space.n_interior();
    let mut demand = vec![0u64; ni];
    for &g in initial_types {
        if g >= ni {
            return Err(Error::Config(format!(
                "tagged type index {g} is not an interior type"
            )));
        }
        demand[g] += 1;
    }
    for (i, &need) in demand.iter().enumerate() {
        if need > init.count(i) {
            return Err(Error::Config(format!(
                "cannot tag {need} patches of type index {i}: only {} present",
                init.count(i)
            )));
        }
    }
    let mut tags: Vec<TagState> = initial_types.iter().map(|&g| TagState::Patch(g)).collect();
    let mut pop = init.clone();
    let mut hit_pool = Vec::new();
    for (_, ev) in events {
        let strike = match *ev {
            Event::TypeChange { from, to } => Some((from, TagState::Patch(to))),
            Event::PatchDestroyed { itype } => Some((itype, TagState::Dead)),
            Event::MigrationOut { from, variety } => {
                let to = space.sub_unit(from, variety).ok_or_else(|| {
                    Error::Mismatch("event log departs a variety the patch lacks".into())
                })?;
                Some((from, TagState::Patch(to)))
            }
            Event::Settlement { into, variety } => {
                let to = space.add_unit(into, variety).ok_or_else(|| {
                    Error::Mismatch("event log settles above the occupancy cap".into())
                })?;
                Some((into, TagState::Patch(to)))
            }
            _ => None,
        };
        if let Some((from, next)) = strike {
            let x_f = pop.count(from);
            if x_f == 0 {
                return Err(Error::Mismatch(
                    "event log fires from a type with zero count".into(),
                ));
            }
            hit_pool.clear();
            hit_pool.extend(
                tags.iter()
                    .enumerate()
                    .filter(|(_, s)| **s == TagState::Patch(from))
                    .map(|(g, _)| g),
            );
            if !hit_pool.is_empty() {
                let k = rng.gen_index(x_f as usize);
                if k < hit_pool.len() {
                    tags[hit_pool[k]] = next;
                }
            }
        }
        pop.apply(space, ev);
    }
    Ok(tags)
}

// ── Bounds ───────────────────────────────────────────────────────────────

/// Upper bound on the probability that at least one of `group` tagged
/// patches splits from its deterministic-environment copy by `horizon`:
/// each copy splits at rate at most `rate_lipschitz * eps` while the
/// empirical environment stays within μ-distance `eps` of the path, and
/// `env_tail` bounds the probability that it does not.
pub fn patch_decoupling_bound(
    group: usize,
    horizon: f64,
    eps: f64,
    rate_lipschitz: f64,
    env_tail: f64,
) -> f64 {
    group as f64 * horizon * eps * rate_lipschitz + env_tail
}

/// Same bound for tagged individuals, with one extra term: distinct tags
/// can be struck by the same settlement event with probability of order
/// `group^2 / scale` per unit time, bounded via the settlement-rate
/// supremum `encounter_sup`.
pub fn individual_decoupling_bound(
    group: usize,
    horizon: f64,
    eps: f64,
    rate_lipschitz: f64,
    env_tail: f64,
    encounter_sup: f64,
    scale: u64,
) -> f64 {
    patch_decoupling_bound(group, horizon, eps, rate_lipschitz, env_tail)
        + horizon * (group as f64).powi(2) * encounter_sup / scale as f64
}

// ── Independence measurement ─────────────────────────────────────────────

/// Empirical joint-vs-product comparison for a group of tagged units.
#[derive(Clone, Debug)]
pub struct IndependenceReport {
    /// Plug-in total-variation distance between the joint empirical law
    /// and the product of the per-position marginals.
    pub tv: f64,
    /// Bootstrap percentile interval for the plug-in statistic.
    pub ci: (f64, f64),
    pub samples: usize,
    pub cells: usize,
}

/// Measures how far a group of tagged outcomes is from independence.
///
/// `samples[r]` holds one replica's bucketed outcome per tag (each bucket
/// index below `n_buckets`). Errors with [`Error::Underpowered`] when
/// there are fewer than ten replicas per joint cell.
pub fn group_independence(
    samples: &[Vec<usize>],
    n_buckets: usize,
    bootstrap_rounds: usize,
    level: f64,
    rng: &mut RngStream,
) -> Result<IndependenceReport> {
    let r = samples.len();
    if r == 0 {
        return Err(Error::Config("no independence samples".into()));
    }
    let group = samples[0].len();
    if group < 2 {
        return Err(Error::Config("independence needs at least two tags".into()));
    }
    let mut cells: usize = 1;
    for _ in 0..group {
        cells = cells.checked_mul(n_buckets).ok_or_else(|| {
            Error::Config("bucket grid too large".into())
        })?;
    }
    for s in samples {
        if s.len() != group {
            return Err(Error::Config("ragged independence samples".into()));
        }
        if s.iter().any(|&b| b >= n_buckets) {
            return Err(Error::Config("bucket index out of range".into()));
        }
    }
    if r < 10 * cells {
        return Err(Error::Underpowered(format!(
            "{r} replicas for {cells} joint cells; need at least {}",
            10 * cells
        )));
    }
    let tv_of = |idx: &[usize]| -> f64 {
        let m = idx.len() as f64;
        let mut joint = vec![0.0f64; cells];
        let mut marginals = vec![vec![0.0f64; n_buckets]; group];
        for &i in idx {
            let s = &samples[i];
            let mut flat = 0usize;
            for (g, &b) in s.iter().enumerate() {
                flat = flat * n_buckets + b;
                marginals[g][b] += 1.0;
            }
            joint[flat] += 1.0;
        }
        let mut tv = 0.0;
        for (flat, &j) in joint.iter().enumerate() {
            let mut prod = 1.0;
            let mut rest = flat;
            for g in (0..group).rev() {
                prod *= marginals[g][rest % n_buckets] / m;
                rest /= n_buckets;
            }
            tv += (j / m - prod).abs();
        }
        0.5 * tv
    };
    let all: Vec<usize> = (0..r).collect();
    let tv = tv_of(&all);
    let ci = stats::bootstrap_ci(r, bootstrap_rounds, level, rng, |idx| tv_of(idx));
    Ok(IndependenceReport { tv, ci, samples: r, cells })
}

// ── Tests ────────────────────────────────────────────────────────────────
