//! Numerical audit of the growth conditions behind the scaling limit.
//!
//! The law-of-large-numbers argument needs the model's aggregate jump
//! activity to grow at most linearly with the weighted population size,
//! family by family. Those requirements cannot be checked symbolically
//! for arbitrary rate evaluators, but they can be probed: evaluate each
//! growth functional on a spread of states — points along the
//! deterministic flow, perturbations of them, and heavy-tailed states
//! that pile occupancy near the cap — and report the smallest constant
//! that dominates each functional there, together with the witness state.
//!
//! Re-running the audit at a widened cap with the same probe masses then
//! separates genuinely linear models (constants stay put) from
//! superlinear ones (constants grow with the cap): the latter are flagged
//! because their truncated dynamics do not approximate any well-posed
//! untruncated limit.
//!
//! The module also estimates the environment-sensitivity constants the
//! coupling bounds consume: the Lipschitz constant of the tagged-unit
//! rates in the environment, and the settlement-intensity supremum.

use crate::det::{integrate, mu_subinvariance, split_drift, IntegrateOptions};
use crate::error::{Error, Result};
use crate::model::{Event, ModelDefinition, ScaledState};
use crate::rng::RngStream;
use crate::tagged::{TagState, TaggedChain};

// ── Probe states ─────────────────────────────────────────────────────────

/// A labelled collection of states on which growth functionals are
/// evaluated.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub states: Vec<ScaledState>,
    pub labels: Vec<String>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn push(&mut self, x: ScaledState, label: String) {
        self.states.push(x);
        self.labels.push(label);
    }
}

/// Options controlling probe generation.
#[derive(Clone, Debug)]
pub struct ProbeOptions {
    /// Horizon over which the deterministic flow is sampled.
    pub horizon: f64,
    /// Number of flow samples (and of perturbed copies).
    pub flow_points: usize,
    /// Relative amplitude of the multiplicative perturbations.
    pub jitter: f64,
    /// μ-masses of the heavy-tailed probes. Keeping these fixed across
    /// caps is what makes cap comparisons meaningful.
    pub mass_levels: Vec<f64>,
    /// Geometric decay of the heavy-tail occupancy profile.
    pub tail_decay: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            horizon: 10.0,
            flow_points: 12,
            jitter: 0.2,
            mass_levels: vec![1.0, 2.0, 4.0],
            tail_decay: 0.65,
            seed: 0x5eed,
        }
    }
}

/// Builds the standard probe set for `model`: deterministic-flow samples
/// from `init`, jittered copies of each, and heavy-tailed states at the
/// configured μ-mass levels.
pub fn standard_probes(
    model: &ModelDefinition,
    init: &ScaledState,
    opts: &ProbeOptions,
) -> Result<ProbeSet> {
    if opts.flow_points == 0 {
        return Err(Error::Config("probe generation needs at least one flow point".into()));
    }
    if !(opts.jitter >= 0.0 && opts.jitter < 1.0) {
        return Err(Error::Config("probe jitter must lie in [0, 1)".into()));
    }
    let path = integrate(model, init, opts.horizon, &IntegrateOptions::default())?;
    let mut probes = ProbeSet { states: Vec::new(), labels: Vec::new() };
    let mut rng = RngStream::new(opts.seed);
    for k in 0..opts.flow_points {
        let t = opts.horizon * k as f64 / opts.flow_points as f64;
        let x = path.at(t);
        let mut y = x.clone();
        for v in &mut y.values {
            *v = (*v * (1.0 + opts.jitter * (2.0 * rng.uniform() - 1.0))).max(0.0);
        }
        probes.push(x, format!("flow t={t:.3}"));
        probes.push(y, format!("perturbed t={t:.3}"));
    }
    for &mass in &opts.mass_levels {
        let x = heavy_tail_state(model, mass, opts.tail_decay)?;
        probes.push(x, format!("heavy-tail mass={mass}"));
    }
    Ok(probes)
}

/// A state whose occupied-patch μ-mass equals `mass`, distributed over
/// interior types with geometric weight `decay^total`: most of the mass
/// sits at low occupancy, but every level up to the cap is populated, so
/// superlinear rate growth near the cap becomes visible. Migrants carry a
/// fixed small density and empty slots a nominal one; the empty-patch
/// density is fixed as well. The construction depends on the cap only
/// through how far the tail extends.
pub fn heavy_tail_state(model: &ModelDefinition, mass: f64, decay: f64) -> Result<ScaledState> {
    if !(mass > 0.0) || !(0.0 < decay && decay < 1.0) {
        return Err(Error::Config("heavy-tail probes need mass > 0 and decay in (0,1)".into()));
    }
    let space = model.space();
    let d = space.d();
    let empty_density = 0.3;
    let migrant_density = 0.1;
    let fixed_mass = empty_density * space.mu(space.index_of(&vec![0; d]).unwrap())
        + d as f64 * migrant_density;
    let occupied_target = mass - fixed_mass;
    if occupied_target <= 0.0 {
        return Err(Error::Config(format!(
            "heavy-tail mass {mass} is below the fixed base mass {fixed_mass}"
        )));
    }
    let mut values = vec![0.0; space.len()];
    let empty_idx = space.index_of(&vec![0; d]).unwrap();
    values[empty_idx] = empty_density;
    let mut profile_mass = 0.0;
    for i in 0..space.n_interior() {
        let total: u32 = space.comp(i).iter().sum();
        if total == 0 {
            continue;
        }
        let w = decay.powi(total as i32);
        values[i] = w;
        profile_mass += w * space.mu(i);
    }
    let scale = occupied_target / profile_mass;
    for i in 0..space.n_interior() {
        let total: u32 = space.comp(i).iter().sum();
        if total > 0 {
            values[i] *= scale;
        }
    }
    for l in 0..d {
        values[space.migrant(l)] = migrant_density;
        values[space.empty_slot(l)] = 0.4;
    }
    Ok(ScaledState { values })
}

// ── Growth conditions ────────────────────────────────────────────────────

/// The audited condition families, named by what they control.
///
/// * `creation-influx` — weighted patch-creation intensity relative to
///   `1 + size(x)` (aggregate).
/// * `type-change-first-moment` — size gained per unit time by a patch of
///   type `i` through type changes, relative to its own weight `ν(i)`
///   (per-type supremum; suppressed boundary moves count with unit gain).
/// * `type-change-second-moment` — same with squared jumps, relative to
///   `ν(i)^2` (catastrophe-style whole-patch jumps scale with `ν(i)`, so
///   their squares are quadratic and must be weighed accordingly).
/// * `transport-first-moment` — departures, emissions and settlement
///   arrivals per patch, relative to `ν(i)`.
/// * `removal-first-moment` — destruction rate per patch, relative to
///   `ν(i)`.
/// * `total-second-moment` — aggregate squared-jump intensity of every
///   realized channel relative to `1 + <x, ν²>`.
pub const CONDITION_NAMES: [&str; 6] = [
    "creation-influx",
    "type-change-first-moment",
    "type-change-second-moment",
    "transport-first-moment",
    "removal-first-moment",
    "total-second-moment",
];

/// One growth condition's smallest dominating constant over the probes.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConditionReport {
    pub name: &'static str,
    /// Smallest constant dominating the condition's normalized
    /// functional across the probe set (see [`CONDITION_NAMES`]).
    pub constant: f64,
    /// Label of the probe attaining the constant.
    pub witness: String,
}

/// Complete audit of one model instance.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AuditReport {
    pub conditions: Vec<ConditionReport>,
    /// Subinvariance constant of the comparison weight under the linear
    /// drift part (the exponential weight-growth rate used by error
    /// propagation).
    pub weight_drift: f64,
    pub probes: usize,
}

impl AuditReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Evaluates the six growth functionals at one state (see
/// [`CONDITION_NAMES`] for their normalizations).
fn functionals_at(model: &ModelDefinition, x: &ScaledState) -> [f64; 6] {
    let space = model.space();
    let d = space.d();
    let ni = space.n_interior();
    let size = 1.0 + space.empirical_moment(x, 1);
    let mut cache = Vec::new();
    model.eval_exprs(x, &mut cache);
    let mut g = [0.0f64; 6];
    for &(itype, expr) in &model.beta_entries {
        g[0] += cache[expr] * space.nu(itype);
    }
    g[0] /= size;
    let mut up1 = vec![0.0f64; ni];
    let mut up2 = vec![0.0f64; ni];
    let mut transport = vec![0.0f64; ni];
    let mut removal = vec![0.0f64; ni];
    for e in &model.lambda_entries {
        let rate = e.fixed + cache[e.expr];
        // A suppressed boundary move would have gained at least one unit
        // of size; counting it with unit gain keeps superlinear growth
        // visible at the cap.
        let jump = match e.to {
            Some(to) => space.nu(to) - space.nu(e.from),
            None => 1.0,
        };
        up1[e.from] += rate * jump.max(0.0);
        up2[e.from] += rate * jump * jump;
    }
    for i in 0..ni {
        for l in 0..d {
            let f = i * d + l;
            // Departures and emissions each move one individual; arrivals
            // add one.
            transport[i] += model.gamma_fixed[f] + cache[model.gamma_expr[f]];
            transport[i] += model.gamma_prime_fixed[f] + cache[model.gamma_prime_expr[f]];
            if model.sigma_expr[f] != 0 {
                transport[i] += x.values[space.migrant(l)] * cache[model.sigma_expr[f]];
            }
        }
        removal[i] = model.delta_fixed[i] + cache[model.delta_expr[i]];
    }
    for i in 0..ni {
        let nu = space.nu(i);
        g[1] = g[1].max(up1[i] / nu);
        g[2] = g[2].max(up2[i] / (nu * nu));
        g[3] = g[3].max(transport[i] / nu);
        g[4] = g[4].max(removal[i] / nu);
    }
    model.for_each_alpha(x, |event, af, ax| {
        if matches!(event, Event::TruncationLoss { .. }) {
            return;
        }
        let jump = event.size_jump(space, 1);
        g[5] += (af + ax) * jump * jump;
    });
    // Whole-patch removals jump by ν(i), so quadratic variation is naturally
    // controlled by the second weighted moment rather than the size.
    g[5] /= 1.0 + space.empirical_moment(x, 2);
    g
}

/// Audits every growth condition over the probe set and computes the
/// weight-drift constant.
pub fn audit_conditions(model: &ModelDefinition, probes: &ProbeSet) -> Result<AuditReport> {
    if probes.is_empty() {
        return Err(Error::Config("audit needs at least one probe state".into()));
    }
    let mut best = [(0.0f64, 0usize); 6];
    for (p, x) in probes.states.iter().enumerate() {
        let g = functionals_at(model, x);
        for (k, &v) in g.iter().enumerate() {
            if v > best[k].0 {
                best[k] = (v, p);
            }
        }
    }
    let conditions = CONDITION_NAMES
        .iter()
        .zip(best.iter())
        .map(|(&name, &(constant, p))| ConditionReport {
            name,
            constant,
            witness: probes.labels[p].clone(),
        })
        .collect();
    let split = split_drift(model);
    let (weight_drift, _) = mu_subinvariance(&split, model.space());
    Ok(AuditReport { conditions, weight_drift, probes: probes.len() })
}

// ── Cap comparison ───────────────────────────────────────────────────────

/// One condition whose constant grew materially when the cap widened.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CapFlag {
    pub name: &'static str,
    pub base_constant: f64,
    pub wide_constant: f64,
    pub ratio: f64,
}

/// Side-by-side audit of the same dynamics at two truncation caps.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CapComparison {
    pub base: AuditReport,
    pub wide: AuditReport,
    /// Conditions whose constants grew beyond the tolerated ratio.
    pub flags: Vec<CapFlag>,
    pub ratio_threshold: f64,
}

impl CapComparison {
    pub fn cap_independent(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Audits `base` and `wide` (the same dynamics truncated at a wider cap)
/// over probe sets built with identical μ-mass levels, and flags every
/// condition whose constant grows by more than `ratio_threshold`.
/// Constants below `floor` are treated as zero activity and never
/// flagged.
pub fn compare_caps(
    base: &ModelDefinition,
    base_probes: &ProbeSet,
    wide: &ModelDefinition,
    wide_probes: &ProbeSet,
    ratio_threshold: f64,
    floor: f64,
) -> Result<CapComparison> {
    if ratio_threshold <= 1.0 {
        return Err(Error::Config("cap ratio threshold must exceed 1".into()));
    }
    let base_report = audit_conditions(base, base_probes)?;
    let wide_report = audit_conditions(wide, wide_probes)?;
    let mut flags = Vec::new();
    for (b, w) in base_report.conditions.iter().zip(&wide_report.conditions) {
        if w.constant <= floor {
            continue;
        }
        let ratio = w.constant / b.constant.max(floor);
        if ratio > ratio_threshold {
            flags.push(CapFlag {
                name: b.name,
                base_constant: b.constant,
                wide_constant: w.constant,
                ratio,
            });
        }
    }
    Ok(CapComparison {
        base: base_report,
        wide: wide_report,
        flags,
        ratio_threshold,
    })
}

// ── Environment sensitivity ──────────────────────────────────────────────

/// Estimated sensitivity of tagged-unit rates to the environment.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SensitivityEstimate {
    /// Smallest `D` with `sum_k |q_k(s, x) - q_k(s, y)| <= D * |x - y|_μ`
    /// over all probed pairs and tag states.
    pub rate_lipschitz: f64,
    /// Largest per-migrant settlement intensity over the probes (the
    /// crowding term of the individual decoupling bound).
    pub encounter_sup: f64,
    pub pairs: usize,
    pub witness: String,
}

/// Builds nearby state pairs around each probe: each pair is the probe
/// and a jittered copy, mimicking the tube around the deterministic path
/// in which the coupling argument operates.
pub fn tube_pairs(
    probes: &ProbeSet,
    jitter: f64,
    per_state: usize,
    seed: u64,
) -> Vec<(ScaledState, ScaledState)> {
    let mut rng = RngStream::new(seed);
    let mut pairs = Vec::with_capacity(probes.len() * per_state);
    for x in &probes.states {
        for _ in 0..per_state {
            let mut y = x.clone();
            for v in &mut y.values {
                *v = (*v * (1.0 + jitter * (2.0 * rng.uniform() - 1.0))).max(0.0);
            }
            pairs.push((x.clone(), y));
        }
    }
    pairs
}

/// Measures the rate-Lipschitz constant of the tagged-patch chain over
/// explicit state pairs, and the settlement-intensity supremum over the
/// pair states.
pub fn rate_sensitivity(
    model: &ModelDefinition,
    pairs: &[(ScaledState, ScaledState)],
) -> Result<SensitivityEstimate> {
    if pairs.is_empty() {
        return Err(Error::Config("sensitivity estimation needs state pairs".into()));
    }
    let space = model.space();
    let chain = TaggedChain::patch(model);
    let mut lipschitz = 0.0f64;
    let mut witness = String::new();
    let (mut cache_x, mut cache_y) = (Vec::new(), Vec::new());
    let (mut moves_x, mut moves_y) = (Vec::new(), Vec::new());
    let mut encounter_sup = 0.0f64;
    for (p, (x, y)) in pairs.iter().enumerate() {
        let dist = space.mu_dist(x, y);
        if dist <= 0.0 {
            continue;
        }
        model.eval_exprs(x, &mut cache_x);
        model.eval_exprs(y, &mut cache_y);
        for i in 0..space.n_interior() {
            chain.moves_into(TagState::Patch(i), x, &cache_x, &mut moves_x);
            chain.moves_into(TagState::Patch(i), y, &cache_y, &mut moves_y);
            let diff: f64 = moves_x
                .iter()
                .zip(&moves_y)
                .map(|(a, b)| (a.rate - b.rate).abs())
                .sum();
            let ratio = diff / dist;
            if ratio > lipschitz {
                lipschitz = ratio;
                witness = format!("pair {p}, patch state {i}");
            }
        }
        for z in [x, y] {
            model.eval_exprs(z, &mut cache_x);
            let mut settle = vec![0.0f64; space.d()];
            model.for_each_alpha(z, |event, af, ax| {
                if let Event::Settlement { variety, .. } = event {
                    let m = z.values[space.migrant(*variety)];
                    if m > 0.0 {
                        settle[*variety] += (af + ax) / m;
                    }
                }
            });
            for &s in &settle {
                encounter_sup = encounter_sup.max(s);
            }
        }
    }
    Ok(SensitivityEstimate {
        rate_lipschitz: lipschitz,
        encounter_sup,
        pairs: pairs.len(),
        witness,
    })
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{quadratic_growth_chain, HostParasiteParams, Mg1Params};
    use crate::model::{ModelBuilder, RateExpr};

    #[test]
    fn single_channel_constant_is_exact() {
        let mut b = ModelBuilder::new("one-channel", 1, 3).unwrap();
        b.type_change(&[1], &[2], 0.9);
        let model = b.build().unwrap();
        let space = model.space();
        let x = ScaledState::from_patches(space, &[(&[1], 0.5), (&[0], 0.2)], &[0.0]).unwrap();
        let probes = ProbeSet {
            states: vec![x.clone()],
            labels: vec!["manual".into()],
        };
        let report = audit_conditions(&model, &probes).unwrap();
        // Per-type: a [1]-patch gains one unit of size at rate 0.9 and
        // weighs nu([1]) = 2; the squared jump is weighed against nu^2.
        // Aggregate second moment: alpha = 0.5 * 0.9 with unit jumps,
        // normalized by 1 + <x, nu^2>.
        let first = report.condition("type-change-first-moment").unwrap();
        assert!((first.constant - 0.9 / 2.0).abs() < 1e-12);
        let second = report.condition("type-change-second-moment").unwrap();
        assert!((second.constant - 0.9 / 4.0).abs() < 1e-12);
        let mass2 = 1.0 + space.empirical_moment(&x, 2);
        let total = report.condition("total-second-moment").unwrap();
        assert!((total.constant - 0.5 * 0.9 / mass2).abs() < 1e-12);
        assert_eq!(report.condition("creation-influx").unwrap().constant, 0.0);
    }

    #[test]
    fn builtin_models_audit_cap_independent() {
        let cases: [(&str, ModelDefinition, ModelDefinition, ScaledState); 2] = [
            {
                let p = HostParasiteParams::default();
                let base = p.model().unwrap();
                let wide = p.with_cap(p.cap + 10).model().unwrap();
                let init = p.default_init(&base);
                ("host-parasite", base, wide, init)
            },
            {
                let p = Mg1Params::default();
                let base = p.model().unwrap();
                let wide = p.with_cap(p.cap + 10).model().unwrap();
                let init = p.default_init(&base);
                ("metapop-dispersal", base, wide, init)
            },
        ];
        for (name, base, wide, init) in cases {
            let opts = ProbeOptions { horizon: 6.0, flow_points: 8, ..Default::default() };
            let bp = standard_probes(&base, &init, &opts).unwrap();
            let mut wide_init = ScaledState { values: vec![0.0; wide.space().len()] };
            embed(&base, &wide, &init, &mut wide_init);
            let wp = standard_probes(&wide, &wide_init, &opts).unwrap();
            let cmp = compare_caps(&base, &bp, &wide, &wp, 1.25, 1e-9).unwrap();
            assert!(
                cmp.cap_independent(),
                "{name} flagged: {:?}",
                cmp.flags
            );
        }
    }

    /// Copies a narrow-cap state into a wider space by composition.
    fn embed(
        base: &ModelDefinition,
        wide: &ModelDefinition,
        x: &ScaledState,
        out: &mut ScaledState,
    ) {
        let bs = base.space();
        let ws = wide.space();
        for i in 0..bs.n_interior() {
            let j = ws.index_of(bs.comp(i)).unwrap();
            out.values[j] = x.values[i];
        }
        for l in 0..bs.d() {
            out.values[ws.migrant(l)] = x.values[bs.migrant(l)];
            out.values[ws.empty_slot(l)] = x.values[bs.empty_slot(l)];
        }
    }

    #[test]
    fn quadratic_growth_is_flagged() {
        let base = quadratic_growth_chain(12).unwrap();
        let wide = quadratic_growth_chain(24).unwrap();
        let init =
            ScaledState::from_patches(base.space(), &[(&[0], 0.7), (&[1], 0.3)], &[0.0]).unwrap();
        let mut wide_init = ScaledState { values: vec![0.0; wide.space().len()] };
        embed(&base, &wide, &init, &mut wide_init);
        let opts = ProbeOptions { horizon: 2.0, flow_points: 6, ..Default::default() };
        let bp = standard_probes(&base, &init, &opts).unwrap();
        let wp = standard_probes(&wide, &wide_init, &opts).unwrap();
        let cmp = compare_caps(&base, &bp, &wide, &wp, 1.25, 1e-9).unwrap();
        assert!(!cmp.cap_independent(), "superlinear growth escaped the audit");
        assert!(
            cmp.flags.iter().any(|f| f.name == "type-change-first-moment"),
            "flags: {:?}",
            cmp.flags
        );
    }

    #[test]
    fn rate_lipschitz_is_exact_for_linear_dependence() {
        let coeff = 1.7;
        let mut b = ModelBuilder::new("linear-env", 1, 2).unwrap();
        b.type_change_expr(&[1], &[2], RateExpr::MigrantLinear { coeff, variety: 0 });
        let model = b.build().unwrap();
        let space = model.space();
        let x = ScaledState::from_patches(space, &[(&[1], 0.5)], &[0.3]).unwrap();
        let mut y = x.clone();
        y.values[space.migrant(0)] = 0.55;
        let est = rate_sensitivity(&model, &[(x, y)]).unwrap();
        // The only state-dependent move changes by coeff * |dm|, and the
        // μ-distance equals |dm| because only the migrant moved.
        assert!(
            (est.rate_lipschitz - coeff).abs() < 1e-12,
            "lipschitz {} vs {coeff}",
            est.rate_lipschitz
        );
    }

    #[test]
    fn encounter_supremum_matches_hand_value() {
        let mut b = ModelBuilder::new("settle-only", 1, 2).unwrap();
        b.settlement(0, &[0], RateExpr::Const(2.0))
            .settlement(0, &[1], RateExpr::Const(1.5))
            .migrant_death(0, 0.1);
        let model = b.build().unwrap();
        let space = model.space();
        let x =
            ScaledState::from_patches(space, &[(&[0], 0.4), (&[1], 0.2)], &[0.25]).unwrap();
        let y = x.clone();
        let mut y2 = y;
        y2.values[0] += 0.01;
        let est = rate_sensitivity(&model, &[(x, y2)]).unwrap();
        // Per-migrant settlement intensity: 2.0*0.4 + 1.5*0.2 (+ the
        // perturbed copy, slightly larger).
        let base = 2.0 * 0.4 + 1.5 * 0.2;
        assert!(est.encounter_sup >= base && est.encounter_sup < base + 0.05);
    }

    #[test]
    fn heavy_tail_probes_hold_their_mass_across_caps() {
        let p = Mg1Params::default();
        let narrow = p.model().unwrap();
        let wide = p.with_cap(p.cap + 16).model().unwrap();
        for mass in [1.0, 2.0, 4.0] {
            let a = heavy_tail_state(&narrow, mass, 0.65).unwrap();
            let b = heavy_tail_state(&wide, mass, 0.65).unwrap();
            let ma = narrow.space().mu_norm(&a);
            let mb = wide.space().mu_norm(&b);
            assert!((ma - mass).abs() < 1e-10, "narrow mass {ma} vs {mass}");
            assert!((mb - mass).abs() < 1e-10, "wide mass {mb} vs {mass}");
        }
    }
}
