//! Exact event-by-event simulation of the finite population process.
//!
//! The engine draws jump times and events from the model's transition
//! channels without approximation. Channel rates are kept in a persistent
//! buffer and updated incrementally after each event: a channel is
//! recomputed only when one of its count factors or the value of its
//! state-dependent evaluator changed. The total rate is re-summed over the
//! buffer each event (channel order), so an optimized run consumes random
//! draws identically to the naive rebuild-everything loop — a property the
//! tests exploit. Every 10⁴ events the whole buffer is rebuilt from
//! scratch.
//!
//! Runs stop at the horizon, when the reserve of empty migrant slots of
//! some variety is exhausted, when the configured budget of suppressed
//! boundary events is spent, or when no event can fire any more. In all
//! cases the recorded snapshots extend the final state as a constant, so
//! a trajectory always covers its whole grid.

use crate::det::DeterministicPath;
use crate::model::{
    event_rate_table, Event, ModelDefinition, PopulationState, ScaledState, TypeSpace,
};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Events between two full rebuilds of the rate buffer.
const REBUILD_EVERY: u64 = 10_000;

// ── Options and results ──────────────────────────────────────────────────

/// Controls for one simulation run.
#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Simulated time to cover.
    pub horizon: f64,
    /// Snapshot times, strictly increasing, within `[0, horizon]`.
    pub grid: Vec<f64>,
    /// Number of suppressed boundary events tolerated before the run
    /// stops. The default 0 stops the run at the first suppressed event;
    /// `u64::MAX` tallies them silently.
    pub truncation_budget: u64,
    /// Safety valve on the number of event firings.
    pub max_events: u64,
    /// Whether to keep the full event log (times and kinds).
    pub record_events: bool,
}

impl SimOptions {
    /// Options covering `[0, horizon]` with 101 equally spaced snapshots.
    pub fn new(horizon: f64) -> Self {
        Self::with_grid(horizon, 100)
    }

    /// Options with `intervals + 1` equally spaced snapshots.
    pub fn with_grid(horizon: f64, intervals: usize) -> Self {
        SimOptions {
            horizon,
            grid: uniform_grid(horizon, intervals),
            truncation_budget: 0,
            max_events: u64::MAX,
            record_events: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        for w in self.grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("snapshot grid must be strictly increasing".into()));
            }
        }
        if let (Some(first), Some(last)) = (self.grid.first(), self.grid.last()) {
            if *first < 0.0 || *last > self.horizon + 1e-12 {
                return Err(Error::Config("snapshot grid must lie within [0, horizon]".into()));
            }
        }
        Ok(())
    }
}

/// `intervals + 1` equally spaced points spanning `[0, horizon]`.
pub fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    assert!(intervals > 0);
    (0..=intervals).map(|k| horizon * k as f64 / intervals as f64).collect()
}

/// Why a run stopped producing events.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopReason {
    /// The horizon was reached.
    Horizon,
    /// Some variety ran out of empty migrant slots; the process is frozen
    /// from this time on.
    SlotExhaustion { time: f64 },
    /// More boundary events were suppressed than the budget allows.
    TruncationBudget { time: f64 },
    /// The total event rate vanished; the state is constant thereafter.
    Absorbed { time: f64 },
    /// The `max_events` safety valve triggered.
    EventCap { time: f64 },
}

impl StopReason {
    /// Whether the run covered its whole horizon with live dynamics.
    pub fn completed(&self) -> bool {
        matches!(self, StopReason::Horizon | StopReason::Absorbed { .. })
    }
}

/// One simulated path: scaled snapshots on a grid plus the event log.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Scale parameter of the run.
    pub n: u64,
    /// Snapshot times.
    pub grid: Vec<f64>,
    /// Scaled state at each grid time (right-continuous convention).
    pub snapshots: Vec<ScaledState>,
    /// Full event log `(time, event)`, empty when not recorded.
    pub events: Vec<(f64, Event)>,
    /// Why event generation ceased.
    pub stop: StopReason,
    /// Number of suppressed boundary events.
    pub truncation_losses: u64,
    /// Total number of event firings (suppressed ones included).
    pub n_events: u64,
    /// Time of the last firing (0 if none).
    pub final_time: f64,
    /// Exact integer state at the end of the run.
    pub final_state: PopulationState,
}

impl Trajectory {
    /// Scaled snapshot closest to (at or before) time `t`.
    pub fn snapshot_at(&self, t: f64) -> &ScaledState {
        let pos = self.grid.partition_point(|&g| g <= t);
        &self.snapshots[pos.saturating_sub(1)]
    }
}

/// Largest weighted distance between a trajectory's snapshots and a
/// deterministic path evaluated on the same grid.
pub fn sup_mu_error(
    space: &TypeSpace,
    traj: &Trajectory,
    path: &DeterministicPath,
) -> Result<f64> {
    let last = traj.grid.last().copied().unwrap_or(0.0);
    if path.end_time() + 1e-9 < last {
        return Err(Error::Mismatch(format!(
            "deterministic path ends at {} but trajectory grid extends to {}",
            path.end_time(),
            last
        )));
    }
    let mut worst = 0.0f64;
    for (t, snap) in traj.grid.iter().zip(&traj.snapshots) {
        let reference = path.at(*t);
        worst = worst.max(space.mu_dist(snap, &reference));
    }
    Ok(worst)
}

// ── Single exact step ────────────────────────────────────────────────────

/// Draws one holding time and one event from the exhaustive rate table at
/// `state`, applies the event, and returns `(dt, event)`. Suppressed
/// boundary events are returned like any other firing (the state does not
/// change). Errors with [`Error::Absorbed`] when nothing can fire.
pub fn step(
    model: &ModelDefinition,
    state: &mut PopulationState,
    rng: &mut RngStream,
) -> Result<(f64, Event)> {
    let table = event_rate_table(model, state);
    if table.total <= 0.0 {
        return Err(Error::Absorbed);
    }
    let dt = rng.exponential(table.total);
    let rates: Vec<f64> = table.events.iter().map(|e| e.rate).collect();
    let pick = rng.choose_weighted(&rates, table.total);
    let event = table.events[pick].event.clone();
    state.apply(model.space(), &event);
    Ok((dt, event))
}

// ── Incremental engine ───────────────────────────────────────────────────

struct Engine<'m> {
    model: &'m ModelDefinition,
    scale: f64,
    state: PopulationState,
    /// Scaled view of `state`, kept in lockstep.
    x: ScaledState,
    /// Cached evaluator values at `x`.
    expr_cache: Vec<f64>,
    /// Registry ids of evaluators that depend on the state.
    dynamic_exprs: Vec<usize>,
    /// Per-channel population rate.
    rates: Vec<f64>,
    total: f64,
    /// coordinate -> channels whose count factor reads it
    by_coord: Vec<Vec<u32>>,
    /// evaluator id -> channels scaled by it
    by_expr: Vec<Vec<u32>>,
    /// Dirty-channel collection (stamp per channel + current epoch).
    stamp: Vec<u64>,
    epoch: u64,
    dirty: Vec<u32>,
}

impl<'m> Engine<'m> {
    fn new(model: &'m ModelDefinition, state: PopulationState) -> Result<Self> {
        let space = model.space();
        let channels = model.channels();
        let mut by_coord = vec![Vec::new(); space.len()];
        let mut by_expr = vec![Vec::new(); model.exprs().len()];
        for (c, ch) in channels.iter().enumerate() {
            let (coords, k) = ch.count_coords(space);
            for &coord in &coords[..k] {
                by_coord[coord].push(c as u32);
            }
            if !model.expr(ch.expr).is_static() {
                by_expr[ch.expr].push(c as u32);
            }
        }
        let dynamic_exprs: Vec<usize> = model
            .exprs()
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_static())
            .map(|(id, _)| id)
            .collect();
        let mut engine = Engine {
            model,
            scale: state.n as f64,
            x: state.scaled(),
            state,
            expr_cache: Vec::new(),
            dynamic_exprs,
            rates: vec![0.0; channels.len()],
            total: 0.0,
            by_coord,
            by_expr,
            stamp: vec![0; channels.len()],
            epoch: 0,
            dirty: Vec::new(),
        };
        engine.rebuild()?;
        Ok(engine)
    }

    /// Recomputes the evaluator cache and every channel rate from scratch.
    fn rebuild(&mut self) -> Result<()> {
        self.model.eval_exprs(&self.x, &mut self.expr_cache);
        let space = self.model.space();
        let mut total = 0.0;
        for (c, ch) in self.model.channels().iter().enumerate() {
            let (af, ax) = ch.alpha_parts(space, &self.x, &self.expr_cache);
            let rate = self.scale * (af + ax);
            if rate < 0.0 || !rate.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "channel for {:?} has rate {rate} at the current state",
                    ch.event
                )));
            }
            self.rates[c] = rate;
            total += rate;
        }
        self.total = total;
        Ok(())
    }

    /// Applies `event` to the state and refreshes exactly the channels
    /// whose rate can have changed. Values agree bitwise with a full
    /// rebuild because each affected rate is recomputed from scratch.
    fn apply(&mut self, event: &Event) {
        let space = self.model.space();
        self.state.apply(space, event);
        self.epoch += 1;
        self.dirty.clear();

        let mut delta = [(0usize, 0i64); 4];
        let k = event.delta(space, &mut delta);
        for &(coord, _) in &delta[..k] {
            self.x.values[coord] = self.state.count(coord) as f64 / self.scale;
            for &c in &self.by_coord[coord] {
                if self.stamp[c as usize] != self.epoch {
                    self.stamp[c as usize] = self.epoch;
                    self.dirty.push(c);
                }
            }
        }
        for i in 0..self.dynamic_exprs.len() {
            let id = self.dynamic_exprs[i];
            let fresh = self.model.expr(id).eval(space, &self.x);
            if fresh.to_bits() != self.expr_cache[id].to_bits() {
                self.expr_cache[id] = fresh;
                for &c in &self.by_expr[id] {
                    if self.stamp[c as usize] != self.epoch {
                        self.stamp[c as usize] = self.epoch;
                        self.dirty.push(c);
                    }
                }
            }
        }
        let channels = self.model.channels();
        for d in 0..self.dirty.len() {
            let c = self.dirty[d] as usize;
            let (af, ax) = channels[c].alpha_parts(space, &self.x, &self.expr_cache);
            let rate = self.scale * (af + ax);
            debug_assert!(rate >= 0.0 && rate.is_finite());
            self.rates[c] = rate;
        }
        // Re-summing (channel order) keeps the total bitwise equal to a
        // naive full enumeration, so optimized and naive runs consume the
        // same random draws.
        self.total = self.rates.iter().sum();
    }
}

/// Builds the integer initial state for scale `n` from a scaled density:
/// patch and migrant counts are rounded, empty-slot reserves are taken
/// from the model (rounded up).
pub fn initial_population(
    model: &ModelDefinition,
    n: u64,
    x0: &ScaledState,
) -> Result<PopulationState> {
    if n == 0 {
        return Err(Error::Config("scale parameter must be positive".into()));
    }
    if x0.values.len() != model.space().len() {
        return Err(Error::Config(format!(
            "initial density has {} coordinates, model has {}",
            x0.values.len(),
            model.space().len()
        )));
    }
    if x0.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("initial density must be finite and nonnegative".into()));
    }
    Ok(PopulationState::from_density(model.space(), n, x0, model.slot_reserve()))
}

/// Simulates one path of the population process from `init` under `opts`.
pub fn simulate(
    model: &ModelDefinition,
    init: &PopulationState,
    opts: &SimOptions,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    opts.validate()?;
    let space = model.space();
    let uses_slots = model
        .channels()
        .iter()
        .any(|ch| matches!(ch.event, Event::MigrationOut { .. } | Event::MigrantBirth { .. }));

    let mut engine = Engine::new(model, init.clone())?;
    let mut t = 0.0f64;
    let mut next_grid = 0usize;
    let mut snapshots: Vec<ScaledState> = Vec::with_capacity(opts.grid.len());
    let mut events: Vec<(f64, Event)> = Vec::new();
    let mut losses = 0u64;
    let mut n_events = 0u64;
    let mut final_time = 0.0f64;

    let stop = 'run: loop {
        if uses_slots && engine.state.slots_exhausted(space) {
            break 'run StopReason::SlotExhaustion { time: t };
        }
        if engine.total <= 0.0 {
            break 'run StopReason::Absorbed { time: t };
        }
        if n_events >= opts.max_events {
            break 'run StopReason::EventCap { time: t };
        }
        let dt = rng.exponential(engine.total);
        let t_new = t + dt;
        if t_new >= opts.horizon {
            break 'run StopReason::Horizon;
        }
        // snapshots strictly before the jump show the pre-jump state
        while next_grid < opts.grid.len() && opts.grid[next_grid] < t_new {
            snapshots.push(engine.x.clone());
            next_grid += 1;
        }
        let pick = rng.choose_weighted(&engine.rates, engine.total);
        let event = engine.model.channels()[pick].event.clone();
        t = t_new;
        final_time = t;
        n_events += 1;
        if opts.record_events {
            events.push((t, event.clone()));
        }
        if matches!(event, Event::TruncationLoss { .. }) {
            losses += 1;
            if losses > opts.truncation_budget {
                break 'run StopReason::TruncationBudget { time: t };
            }
        } else {
            engine.apply(&event);
        }
        if n_events % REBUILD_EVERY == 0 {
            engine.rebuild()?;
        }
    };

    // the state extends as a constant beyond the stopping time
    while next_grid < opts.grid.len() {
        snapshots.push(engine.x.clone());
        next_grid += 1;
    }

    Ok(Trajectory {
        n: init.n,
        grid: opts.grid.clone(),
        snapshots,
        events,
        stop,
        truncation_losses: losses,
        n_events,
        final_time,
        final_state: engine.state,
    })
}
