//! Deterministic (fluid-limit) dynamics: the drift field, its splitting
//! into a constant-rate linear part plus a state-dependent residual,
//! adaptive integration, equilibria, and the norm-subinvariance constant
//! of the linear part.
//!
//! The drift is assembled from the same transition channels the exact
//! simulator uses, so the integrated path is the fluid limit of exactly
//! the process being simulated — including the treatment of capped
//! events, which contribute nothing to either.

use crate::error::{Error, Result};
use crate::model::{ModelDefinition, ScaledState, TypeSpace};

// ── Drift ────────────────────────────────────────────────────────────────

/// Full drift field at `x`, written into `out` (one entry per
/// coordinate, empty-slot coordinates mirroring their migrant pools).
pub fn drift_into(model: &ModelDefinition, x: &ScaledState, cache: &mut Vec<f64>, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let space = model.space();
    model.eval_exprs(x, cache);
    let mut delta = [(0usize, 0i64); 4];
    for ch in model.channels() {
        let (af, ax) = ch.alpha_parts(space, x, cache);
        let a = af + ax;
        if a == 0.0 {
            continue;
        }
        let k = ch.event.delta(space, &mut delta);
        for &(idx, sgn) in &delta[..k] {
            out[idx] += a * sgn as f64;
        }
    }
}

/// Full drift field at `x`.
pub fn drift(model: &ModelDefinition, x: &ScaledState) -> ScaledState {
    let mut out = vec![0.0; model.space().len()];
    let mut cache = Vec::new();
    drift_into(model, x, &mut cache, &mut out);
    ScaledState { values: out }
}

/// State-dependent residual of the drift: every contribution whose rate
/// is not a model constant (patch creation, settlements, and all
/// registered evaluators).
pub fn residual_drift(model: &ModelDefinition, x: &ScaledState) -> ScaledState {
    let space = model.space();
    let mut out = vec![0.0; space.len()];
    let mut delta = [(0usize, 0i64); 4];
    let mut cache = Vec::new();
    model.eval_exprs(x, &mut cache);
    for ch in model.channels() {
        let (_, ax) = ch.alpha_parts(space, x, cache.as_slice());
        if ax == 0.0 {
            continue;
        }
        let k = ch.event.delta(space, &mut delta);
        for &(idx, sgn) in &delta[..k] {
            out[idx] += ax * sgn as f64;
        }
    }
    ScaledState { values: out }
}

// ── Sparse matrix and drift splitting ────────────────────────────────────

/// Column-major sparse matrix over the coordinate space.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub n: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        SparseMatrix { n, cols: vec![Vec::new(); n] }
    }

    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        let entries = &mut self.cols[col];
        for e in entries.iter_mut() {
            if e.0 == row {
                e.1 += v;
                return;
            }
        }
        entries.push((row, v));
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cols[col].iter().find(|e| e.0 == row).map_or(0.0, |e| e.1)
    }

    /// `y = M x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (col, entries) in self.cols.iter().enumerate() {
            let xc = x[col];
            if xc == 0.0 {
                continue;
            }
            for &(row, v) in entries {
                y[row] += v * xc;
            }
        }
        y
    }

    /// Weighted column sums `sum_row w(row) M[row, col]` for every column.
    pub fn weighted_column_sums(&self, w: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|entries| entries.iter().map(|&(row, v)| w[row] * v).sum())
            .collect()
    }

    /// Largest absolute diagonal entry.
    pub fn max_abs_diag(&self) -> f64 {
        (0..self.n).map(|k| self.get(k, k).abs()).fold(0.0, f64::max)
    }
}

/// Splitting of the drift into `A x + F(x)`: `A` collects every constant
/// per-capita rate (type changes, destructions, migrations, migrant
/// births and deaths), `F` the state-dependent residual. Both live on the
/// patch and migrant coordinates; empty-slot coordinates are bookkeeping
/// mirrors and stay outside the splitting.
#[derive(Clone, Debug)]
pub struct DriftSplit {
    pub matrix: SparseMatrix,
}

/// Assembles the linear part of the drift from the model's constant
/// rates. Capped type changes are suppressed in the truncated dynamics
/// and therefore absent here too.
pub fn split_drift(model: &ModelDefinition) -> DriftSplit {
    let space = model.space();
    let d = space.d();
    let ni = space.n_interior();
    let mut a = SparseMatrix::new(space.len());

    for e in &model.lambda_entries {
        if e.fixed == 0.0 {
            continue;
        }
        if let Some(to) = e.to {
            a.add(to, e.from, e.fixed);
            a.add(e.from, e.from, -e.fixed);
        }
    }
    for i in 0..ni {
        if model.delta_fixed[i] != 0.0 {
            a.add(i, i, -model.delta_fixed[i]);
        }
        for l in 0..d {
            let g = model.gamma_fixed[i * d + l];
            if g != 0.0 {
                let to = space
                    .sub_unit(i, l)
                    .expect("validated migration entry with variety present");
                a.add(to, i, g);
                a.add(i, i, -g);
                a.add(space.migrant(l), i, g);
            }
            let gp = model.gamma_prime_fixed[i * d + l];
            if gp != 0.0 {
                a.add(space.migrant(l), i, gp);
            }
        }
    }
    for l in 0..d {
        if model.zeta_fixed[l] != 0.0 {
            a.add(space.migrant(l), space.migrant(l), -model.zeta_fixed[l]);
        }
    }
    DriftSplit { matrix: a }
}

/// Norm-subinvariance constant of the linear part: the smallest `w` with
/// `A^T mu <= w mu` columnwise, i.e. the largest weighted column sum
/// relative to the column's own weight. Returns `(w, witness column)`.
pub fn mu_subinvariance(split: &DriftSplit, space: &TypeSpace) -> (f64, usize) {
    let sums = split.matrix.weighted_column_sums(
        &(0..space.len()).map(|k| space.mu(k)).collect::<Vec<_>>(),
    );
    let mut w = f64::NEG_INFINITY;
    let mut witness = 0;
    for idx in 0..space.len() {
        if space.is_empty_slot(idx) {
            continue;
        }
        let ratio = sums[idx] / space.mu(idx);
        if ratio > w {
            w = ratio;
            witness = idx;
        }
    }
    (w, witness)
}

// ── Adaptive integration ─────────────────────────────────────────────────

/// Options for [`integrate`]. The tolerance is an error-per-unit-time
/// budget in the weighted path norm.
#[derive(Clone, Debug)]
pub struct IntegrateOptions {
    pub tol: f64,
    /// Largest step; also the coarsest spacing of stored path points.
    pub max_step: Option<f64>,
    /// Norm threshold treated as blow-up.
    pub blowup_norm: f64,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { tol: 1e-8, max_step: None, blowup_norm: 1e6, max_steps: 4_000_000 }
    }
}

/// Deterministic path stored at every accepted step; linear interpolation
/// in between.
#[derive(Clone, Debug)]
pub struct DeterministicPath {
    pub times: Vec<f64>,
    pub states: Vec<ScaledState>,
    /// Total mass removed by clipping slightly negative coordinates.
    pub clipped_mass: f64,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Largest weighted norm along the path.
    pub sup_mu_norm: f64,
}

impl DeterministicPath {
    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_state(&self) -> &ScaledState {
        self.states.last().unwrap()
    }

    /// State at time `t`, linearly interpolated; clamped to the ends.
    pub fn at(&self, t: f64) -> ScaledState {
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.end_time() {
            return self.final_state().clone();
        }
        let k = match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(k) => return self.states[k].clone(),
            Err(k) => k,
        };
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        let a = &self.states[k - 1].values;
        let b = &self.states[k].values;
        ScaledState {
            values: a.iter().zip(b).map(|(u, v)| u + w * (v - u)).collect(),
        }
    }

    /// Path sampled on an arbitrary time grid.
    pub fn on_grid(&self, grid: &[f64]) -> Vec<ScaledState> {
        grid.iter().map(|&t| self.at(t)).collect()
    }
}

// Dormand-Prince 5(4) coefficients (autonomous field, so the stage
// abscissae are not needed).
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrates the drift from `x0` over `[0, t_end]` with an embedded
/// Dormand-Prince 5(4) pair, error-controlled per unit time in the
/// weighted norm. Slightly negative coordinates produced by a step are
/// clipped to zero and tallied.
pub fn integrate(
    model: &ModelDefinition,
    x0: &ScaledState,
    t_end: f64,
    opts: &IntegrateOptions,
) -> Result<DeterministicPath> {
    let space = model.space();
    let n = space.len();
    if x0.values.len() != n {
        return Err(Error::Mismatch("initial state length does not match type space".into()));
    }
    if !(t_end > 0.0) {
        return Err(Error::Integration(format!("horizon must be positive, got {t_end}")));
    }
    let max_step = opts.max_step.unwrap_or(t_end / 256.0).min(t_end);
    let mut cache = Vec::new();
    let mut k = vec![vec![0.0; n]; 7];
    let mut y = x0.values.clone();
    let mut stage = vec![0.0; n];
    let mut t = 0.0;
    let mut h = max_step.min(t_end / 100.0);
    let mut path = DeterministicPath {
        times: vec![0.0],
        states: vec![x0.clone()],
        clipped_mass: 0.0,
        steps_accepted: 0,
        steps_rejected: 0,
        sup_mu_norm: space.mu_norm(x0),
    };

    drift_into(model, &ScaledState { values: y.clone() }, &mut cache, &mut k[0]);
    let mut steps = 0usize;
    while t < t_end {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Integration(format!("step budget exhausted at t = {t}")));
        }
        if h < 1e-14 * t_end {
            return Err(Error::Integration(format!("step size underflow at t = {t}")));
        }
        h = h.min(max_step).min(t_end - t);

        for s in 0..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    let a = DP_A[s][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                stage[i] = y[i] + h * acc;
            }
            let xs = ScaledState { values: stage.clone() };
            drift_into(model, &xs, &mut cache, &mut k[s + 1]);
        }

        // error estimate of the embedded 4th-order solution
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if DP_E[j] != 0.0 {
                    e += DP_E[j] * kj[i];
                }
            }
            err += space.mu(i).max(1.0) * (h * e).abs();
        }

        let budget = opts.tol * h;
        if err <= budget || h <= 1e-13 * t_end {
            // 5th-order advance: the b coefficients equal the last A row
            let mut clipped = false;
            for i in 0..n {
                let adv = DP_A[5][0] * k[0][i]
                    + DP_A[5][2] * k[2][i]
                    + DP_A[5][3] * k[3][i]
                    + DP_A[5][4] * k[4][i]
                    + DP_A[5][5] * k[5][i];
                y[i] += h * adv;
                if y[i] < 0.0 {
                    path.clipped_mass += -y[i];
                    y[i] = 0.0;
                    clipped = true;
                }
            }
            t += h;
            path.steps_accepted += 1;
            let state = ScaledState { values: y.clone() };
            let norm = space.mu_norm(&state);
            if !norm.is_finite() || norm > opts.blowup_norm {
                return Err(Error::Integration(format!(
                    "norm blow-up at t = {t}: |x| = {norm}"
                )));
            }
            path.sup_mu_norm = path.sup_mu_norm.max(norm);
            path.times.push(t);
            path.states.push(state);
            if clipped {
                drift_into(model, path.states.last().unwrap(), &mut cache, &mut k[0]);
            } else {
                // first-same-as-last: stage 7 is the new point's derivative
                k.swap(0, 6);
            }
        } else {
            path.steps_rejected += 1;
        }
        let q = if err > 0.0 { budget / err } else { 10.0 };
        h *= (0.9 * q.powf(0.25)).clamp(0.2, 5.0);
    }
    Ok(path)
}

// ── Equilibrium ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EquilibriumOptions {
    /// Residual norm below which the state counts as an equilibrium.
    pub residual_tol: f64,
    /// Relaxation horizon integrated before damped iteration starts.
    pub relax_time: f64,
    pub max_iters: usize,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions { residual_tol: 1e-10, relax_time: 200.0, max_iters: 500_000 }
    }
}

/// Solves the dense system `a y = b` in place by LU decomposition with
/// partial pivoting; `b` holds the solution on return.
fn lu_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot < 1e-300 {
            return Err(Error::FixedPoint("singular Jacobian in equilibrium solve".into()));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            a[row][col] = 0.0;
            for k in col + 1..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        b[col] /= a[col][col];
        for row in 0..col {
            b[row] -= a[row][col] * b[col];
        }
    }
    Ok(())
}

/// Finds a stable equilibrium near the flow from `x0`: integrates the
/// drift for a relaxation period, then polishes with a damped Newton
/// iteration on the drift until its weighted norm is at most
/// `residual_tol`. Oscillatory approaches to the fixed point (complex
/// linearization spectrum) are handled by the Newton step.
///
/// The reserve coordinates are excluded from the solve — the migrant
/// accounting conserves `migrants + reserve`, which would make the full
/// Jacobian singular — and are restored from that conservation law
/// afterward. Rate evaluators must not read the reserve coordinates (none
/// of the named forms do).
pub fn equilibrium(
    model: &ModelDefinition,
    x0: &ScaledState,
    opts: &EquilibriumOptions,
) -> Result<ScaledState> {
    let space = model.space();
    let relax = integrate(
        model,
        x0,
        opts.relax_time,
        &IntegrateOptions { tol: 1e-10, ..Default::default() },
    )?;
    let mut x = relax.final_state().clone();
    let slot_totals: Vec<f64> =
        (0..space.d()).map(|l| x0.values[space.migrant(l)] + x0.values[space.empty_slot(l)]).collect();
    let free: Vec<usize> = (0..space.len()).filter(|&z| !space.is_empty_slot(z)).collect();

    let mut cache = Vec::new();
    let mut f = vec![0.0; space.len()];
    let residual_of = |x: &ScaledState, f: &mut Vec<f64>, cache: &mut Vec<f64>| {
        drift_into(model, x, cache, f);
        f.iter()
            .enumerate()
            .map(|(z, v)| v.abs() * space.mu(z).max(f64::from(u8::from(!space.is_empty_slot(z)))))
            .fold(0.0f64, f64::max)
    };
    let mut res = residual_of(&x, &mut f, &mut cache);

    let mut jac = vec![vec![0.0; free.len()]; free.len()];
    let mut rhs = vec![0.0; free.len()];
    for _ in 0..60 {
        if res <= opts.residual_tol {
            break;
        }
        // central-difference Jacobian over the free coordinates
        let mut fp = vec![0.0; space.len()];
        let mut fm = vec![0.0; space.len()];
        for (col, &zj) in free.iter().enumerate() {
            let h = 1e-7 * x.values[zj].abs().max(1e-3);
            let saved = x.values[zj];
            x.values[zj] = saved + h;
            drift_into(model, &x, &mut cache, &mut fp);
            x.values[zj] = saved - h;
            drift_into(model, &x, &mut cache, &mut fm);
            x.values[zj] = saved;
            for (row, &zi) in free.iter().enumerate() {
                jac[row][col] = (fp[zi] - fm[zi]) / (2.0 * h);
            }
        }
        for (row, &zi) in free.iter().enumerate() {
            rhs[row] = -f[zi];
        }
        // pin coordinates with no dynamics at all (zero drift and zero
        // sensitivities), e.g. a migrant pool no channel ever touches
        for row in 0..free.len() {
            let inert = rhs[row].abs() < 1e-12
                && jac[row].iter().all(|v| v.abs() < 1e-12)
                && jac.iter().all(|r| r[row].abs() < 1e-12);
            if inert {
                jac[row][row] = 1.0;
                rhs[row] = 0.0;
            }
        }
        let mut lu = jac.clone();
        if lu_solve(&mut lu, &mut rhs).is_err() {
            break;
        }
        // backtracking line search on the residual
        let mut step = 1.0f64;
        let mut improved = false;
        for _ in 0..12 {
            let mut trial = x.clone();
            for (col, &zj) in free.iter().enumerate() {
                trial.values[zj] += step * rhs[col];
            }
            if trial.values.iter().any(|v| *v < -0.1 || !v.is_finite()) {
                step *= 0.5;
                continue;
            }
            let trial_res = residual_of(&trial, &mut f, &mut cache);
            if trial_res < res {
                x = trial;
                res = trial_res;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }

    if res > opts.residual_tol {
        // damped fixed-point fallback for cases Newton cannot handle
        let mut eta = 0.5;
        drift_into(model, &x, &mut cache, &mut f);
        for _ in 0..opts.max_iters {
            if res <= opts.residual_tol {
                break;
            }
            let mut trial = x.clone();
            for (v, df) in trial.values.iter_mut().zip(&f) {
                *v = (*v + eta * df).max(0.0);
            }
            let mut trial_f = vec![0.0; space.len()];
            let trial_res = residual_of(&trial, &mut trial_f, &mut cache);
            if trial_res < res {
                x = trial;
                f = trial_f;
                res = trial_res;
                eta = (eta * 1.2).min(1.0);
            } else {
                eta *= 0.5;
                if eta < 1e-12 {
                    break;
                }
            }
        }
    }

    if res > opts.residual_tol {
        return Err(Error::FixedPoint(format!(
            "stalled at residual {res} (tolerance {})",
            opts.residual_tol
        )));
    }
    for v in x.values.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 {
                return Err(Error::FixedPoint(format!(
                    "equilibrium has a negative coordinate {v}"
                )));
            }
            *v = 0.0;
        }
    }
    for l in 0..space.d() {
        let m = x.values[space.migrant(l)];
        x.values[space.empty_slot(l)] = (slot_totals[l] - m).max(0.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBuilder, RateExpr};
    use crate::rng::RngStream;
    use std::sync::Arc;

    /// Toy exercising every rate family (two varieties to hit the
    /// cross-variety paths).
    fn full_toy() -> ModelDefinition {
        let mut b = ModelBuilder::new("full-toy", 2, 3).unwrap();
        b.type_change(&[1, 0], &[2, 0], 1.5)
            .type_change(&[1, 1], &[0, 1], 0.8)
            .type_change_expr(
                &[0, 1],
                &[1, 1],
                RateExpr::MeanLoadInfection { rate: 2.0, half_sat: 1.0 },
            )
            .destruction(&[1, 1], 0.4)
            .destruction_expr(&[1, 0], RateExpr::MigrantLinear { coeff: 0.3, variety: 1 })
            .migration_out(&[1, 0], 0, 0.6)
            .migration_out(&[2, 1], 1, 0.7)
            .migrant_birth(&[1, 1], 0, 0.2)
            .migrant_birth_expr(&[2, 0], 1, RateExpr::Const(0.15))
            .settlement(0, &[0, 0], RateExpr::Const(1.1))
            .settlement(1, &[1, 0], RateExpr::MeanLoadInfection { rate: 0.5, half_sat: 2.0 })
            .migrant_death(0, 0.35)
            .migrant_death(1, 0.45)
            .patch_creation(&[0, 0], RateExpr::FecundityWeightedBirth { rate: 0.9, fecundity: 0.7 });
        b.build().unwrap()
    }

    fn random_state(space: &TypeSpace, rng: &mut RngStream) -> ScaledState {
        let mut x = ScaledState::zero(space);
        for v in x.values.iter_mut() {
            *v = rng.uniform() * 0.8;
        }
        x
    }

    #[test]
    fn drift_vanishes_at_zero_without_creation() {
        let mut b = ModelBuilder::new("no-birth", 1, 2).unwrap();
        b.type_change(&[1], &[2], 1.0).destruction(&[1], 0.5);
        let model = b.build().unwrap();
        let x = ScaledState::zero(model.space());
        let f = drift(&model, &x);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parasite_drift_matches_hand_expansion() {
        // host patches carrying 0..2 parasites: acquisition lambda*phi(x),
        // per-parasite death mu, host death kappa + alpha * load, birth of
        // uninfected hosts discounted by theta per parasite
        let (lam, mu, c, beta, theta, kappa, alpha) = (3.0, 1.0, 1.0, 0.5, 0.9, 0.25, 0.2);
        let mut b = ModelBuilder::new("parasite", 1, 2).unwrap();
        let acquire = RateExpr::MeanLoadInfection { rate: lam, half_sat: c };
        for i in 0..=2u32 {
            if i > 0 {
                b.type_change(&[i], &[i - 1], i as f64 * mu);
            }
            b.type_change_expr(&[i], &[i + 1], acquire.clone());
            b.destruction(&[i], kappa + i as f64 * alpha);
        }
        b.patch_creation(&[0], RateExpr::FecundityWeightedBirth { rate: beta, fecundity: theta });
        let model = b.build().unwrap();
        let space = model.space();

        let x = ScaledState::from_patches(&space, &[(&[0], 0.5), (&[1], 0.3), (&[2], 0.15)], &[])
            .unwrap();
        let (x0, x1, x2) = (0.5, 0.3, 0.15);
        let phi = (x1 + 2.0 * x2) / (c + x0 + x1 + x2);
        let want0 = beta * (x0 + theta * x1 + theta * theta * x2) + mu * x1
            - lam * phi * x0
            - kappa * x0;
        let want1 =
            lam * phi * x0 + 2.0 * mu * x2 - (mu + lam * phi) * x1 - (kappa + alpha) * x1;
        let want2 = lam * phi * x1 - 2.0 * mu * x2 - (kappa + 2.0 * alpha) * x2;

        let f = drift(&model, &x);
        let i0 = space.index_of(&[0]).unwrap();
        let i1 = space.index_of(&[1]).unwrap();
        let i2 = space.index_of(&[2]).unwrap();
        assert!((f.values[i0] - want0).abs() < 1e-12, "{} vs {want0}", f.values[i0]);
        assert!((f.values[i1] - want1).abs() < 1e-12, "{} vs {want1}", f.values[i1]);
        assert!((f.values[i2] - want2).abs() < 1e-12, "{} vs {want2}", f.values[i2]);
    }

    #[test]
    fn splitting_reproduces_drift_at_random_states() {
        let model = full_toy();
        let space = model.space();
        let split = split_drift(&model);
        let mut rng = RngStream::new(11);
        for _ in 0..100 {
            let x = random_state(space, &mut rng);
            let full = drift(&model, &x);
            let lin = split.matrix.apply(&x.values);
            let res = residual_drift(&model, &x);
            for idx in 0..space.len() {
                if space.is_empty_slot(idx) {
                    continue;
                }
                let got = lin[idx] + res.values[idx];
                assert!(
                    (got - full.values[idx]).abs() <= 1e-12 * (1.0 + full.values[idx].abs()),
                    "coordinate {idx}: linear {} + residual {} != drift {}",
                    lin[idx],
                    res.values[idx],
                    full.values[idx]
                );
            }
        }
    }

    #[test]
    fn linear_part_entries_match_rate_constants() {
        let mut b = ModelBuilder::new("entries", 1, 2).unwrap();
        b.type_change(&[1], &[2], 2.0)
            .destruction(&[1], 0.5)
            .migration_out(&[1], 0, 0.3)
            .migrant_birth(&[2], 0, 0.9)
            .settlement(0, &[0], RateExpr::Const(1.5))
            .migrant_death(0, 0.25)
            .patch_creation(&[0], RateExpr::Const(0.7));
        let model = b.build().unwrap();
        let space = model.space();
        let a = split_drift(&model).matrix;
        let i0 = space.index_of(&[0]).unwrap();
        let i1 = space.index_of(&[1]).unwrap();
        let i2 = space.index_of(&[2]).unwrap();
        let m0 = space.migrant(0);
        assert_eq!(a.get(i2, i1), 2.0, "type change inflow");
        assert_eq!(a.get(i1, i1), -(2.0 + 0.5 + 0.3), "outflows on the diagonal");
        assert_eq!(a.get(i0, i1), 0.3, "migration moves the patch down one occupant");
        assert_eq!(a.get(m0, i1), 0.3, "migration produces a migrant");
        assert_eq!(a.get(m0, i2), 0.9, "direct migrant birth");
        assert_eq!(a.get(m0, m0), -0.25, "migrant death");
        // state-dependent families stay out of the linear part
        assert_eq!(a.get(i1, i0), 0.0, "settlement is not linear");
        assert_eq!(a.get(i0, i0), 0.0, "creation is not linear");
    }

    #[test]
    fn pure_death_subinvariance_constant_is_zero() {
        let mut b = ModelBuilder::new("pure-death", 1, 1).unwrap();
        b.type_change(&[1], &[0], 1.0);
        let model = b.build().unwrap();
        let split = split_drift(&model);
        let (w, witness) = mu_subinvariance(&split, model.space());
        // column of type [1]: inflow 1 * mu([0]) - outflow 1 * mu([1]) =
        // 1 - 2 = -1, ratio -1/2; column of [0] is empty, ratio 0
        assert_eq!(w, 0.0);
        assert_eq!(witness, model.space().index_of(&[0]).unwrap());
    }

    #[test]
    fn integrate_constant_source_is_exact() {
        let mut b = ModelBuilder::new("source", 1, 1).unwrap();
        b.patch_creation(&[0], RateExpr::Const(0.4));
        let model = b.build().unwrap();
        let x0 = ScaledState::zero(model.space());
        let path = integrate(&model, &x0, 2.0, &IntegrateOptions::default()).unwrap();
        let i0 = model.space().index_of(&[0]).unwrap();
        assert!((path.final_state().values[i0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn integrate_exponential_decay_meets_tolerance() {
        let mut b = ModelBuilder::new("decay", 1, 1).unwrap();
        b.destruction(&[0], 1.0);
        let model = b.build().unwrap();
        let space = model.space();
        let x0 = ScaledState::from_patches(space, &[(&[0], 1.0)], &[]).unwrap();
        let path =
            integrate(&model, &x0, 3.0, &IntegrateOptions { tol: 1e-10, ..Default::default() })
                .unwrap();
        let i0 = space.index_of(&[0]).unwrap();
        let got = path.final_state().values[i0];
        assert!((got - (-3.0f64).exp()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn tighter_tolerance_does_not_hurt_accuracy() {
        let (lam, mu, c) = (3.0, 1.0, 1.0);
        let mut b = ModelBuilder::new("nl", 1, 4).unwrap();
        let acquire = RateExpr::MeanLoadInfection { rate: lam, half_sat: c };
        for i in 0..=4u32 {
            if i > 0 {
                b.type_change(&[i], &[i - 1], i as f64 * mu);
            }
            b.type_change_expr(&[i], &[i + 1], acquire.clone());
        }
        let model = b.build().unwrap();
        let space = model.space();
        let x0 = ScaledState::from_patches(space, &[(&[0], 0.7), (&[1], 0.3)], &[]).unwrap();
        let reference =
            integrate(&model, &x0, 4.0, &IntegrateOptions { tol: 1e-12, ..Default::default() })
                .unwrap();
        let err = |tol: f64| {
            let p = integrate(&model, &x0, 4.0, &IntegrateOptions { tol, ..Default::default() })
                .unwrap();
            space.mu_dist(p.final_state(), reference.final_state())
        };
        let e_loose = err(1e-5);
        let e_tight = err(1e-9);
        assert!(e_tight <= 1e-7, "tight-tolerance error {e_tight} too large");
        assert!(e_tight <= e_loose * 1.5 + 1e-12, "tightening made the error worse");
    }

    #[test]
    fn slot_mirror_is_conserved_along_the_path() {
        let model = full_toy();
        let space = model.space();
        let mut x0 = ScaledState::zero(space);
        x0.values[space.index_of(&[1, 0]).unwrap()] = 0.5;
        x0.values[space.index_of(&[1, 1]).unwrap()] = 0.3;
        x0.values[space.migrant(0)] = 0.1;
        x0.values[space.migrant(1)] = 0.2;
        x0.values[space.empty_slot(0)] = 1.0;
        x0.values[space.empty_slot(1)] = 1.0;
        let path = integrate(&model, &x0, 2.0, &IntegrateOptions::default()).unwrap();
        for state in &path.states {
            for l in 0..2 {
                let tot = state.values[space.migrant(l)] + state.values[space.empty_slot(l)];
                let want = x0.values[space.migrant(l)] + x0.values[space.empty_slot(l)];
                assert!((tot - want).abs() < 1e-9, "slot mirror broke: {tot} vs {want}");
            }
        }
    }

    #[test]
    fn clipping_tally_counts_negative_excursions() {
        // a synthetic evaluator that turns negative drives the coordinate
        // below zero; the integrator must clip and tally
        let mut b = ModelBuilder::new("clip", 1, 1).unwrap();
        b.patch_creation(
            &[0],
            RateExpr::Custom {
                f: Arc::new(|space: &TypeSpace, x: &ScaledState| {
                    x.values[space.index_of(&[0]).unwrap()] - 0.5
                }),
                bound_const: 1.0,
                bound_slope: 0.0,
                label: "signed-source".into(),
            },
        );
        let model = b.build().unwrap();
        let space = model.space();
        let x0 = ScaledState::from_patches(space, &[(&[0], 0.2)], &[]).unwrap();
        let path = integrate(&model, &x0, 1.0, &IntegrateOptions::default()).unwrap();
        assert!(path.clipped_mass > 0.0, "expected clipping to occur");
        assert!(path.final_state().values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn blow_up_is_reported() {
        let mut b = ModelBuilder::new("blow", 1, 1).unwrap();
        b.patch_creation(
            &[0],
            RateExpr::Custom {
                f: Arc::new(|space: &TypeSpace, x: &ScaledState| {
                    let v = x.values[space.index_of(&[0]).unwrap()];
                    10.0 * v * v
                }),
                bound_const: 0.0,
                bound_slope: 1.0,
                label: "quadratic-source".into(),
            },
        );
        let model = b.build().unwrap();
        let x0 = ScaledState::from_patches(model.space(), &[(&[0], 1.0)], &[]).unwrap();
        let got = integrate(&model, &x0, 10.0, &IntegrateOptions::default());
        assert!(matches!(got, Err(Error::Integration(_))), "got {got:?}");
    }

    #[test]
    fn equilibrium_of_linear_birth_death() {
        let mut b = ModelBuilder::new("bd", 1, 1).unwrap();
        b.patch_creation(&[0], RateExpr::Const(1.0)).destruction(&[0], 1.0);
        let model = b.build().unwrap();
        let space = model.space();
        let x0 = ScaledState::zero(space);
        let eq = equilibrium(&model, &x0, &EquilibriumOptions::default()).unwrap();
        let i0 = space.index_of(&[0]).unwrap();
        assert!((eq.values[i0] - 1.0).abs() < 1e-9);
        let res = space.mu_norm(&drift(&model, &eq));
        assert!(res <= 1e-10, "residual {res} above tolerance");
    }

    #[test]
    fn interpolation_hits_stored_points() {
        let mut b = ModelBuilder::new("decay2", 1, 1).unwrap();
        b.destruction(&[0], 0.7);
        let model = b.build().unwrap();
        let space = model.space();
        let x0 = ScaledState::from_patches(space, &[(&[0], 1.0)], &[]).unwrap();
        let path = integrate(&model, &x0, 2.0, &IntegrateOptions::default()).unwrap();
        for (t, s) in path.times.iter().zip(&path.states).step_by(7) {
            let q = path.at(*t);
            assert_eq!(q.values, s.values);
        }
        // interpolated values stay within the model's range
        let mid = path.at(1.234);
        let i0 = space.index_of(&[0]).unwrap();
        let want = (-0.7f64 * 1.234).exp();
        assert!((mid.values[i0] - want).abs() < 1e-6);
    }
}
