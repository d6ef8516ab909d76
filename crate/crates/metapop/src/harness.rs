//! Experiment orchestration: model ingestion (built-ins and TOML model
//! files), replica-parallel drivers for each command verb, and CSV/JSON
//! serialization with provenance columns.
//!
//! Every driver takes an [`ExperimentSpec`], returns a typed report, and
//! — when an output directory is set — writes `report.json` plus one or
//! more RFC-4180-style CSV tables whose rows carry the model hash, seed,
//! cap, and tolerance settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{
    compare_caps, rate_sensitivity, standard_probes, tube_pairs, AuditReport, CapComparison,
    ProbeOptions, SensitivityEstimate,
};
use crate::branching::{collect_offspring, extinction_prob, InvasionChain};
use crate::builtins::{quadratic_growth_chain, HostParasiteParams, Mg1Params, Mg2Params};
use crate::det::{equilibrium, integrate, EquilibriumOptions, IntegrateOptions};
use crate::error::{Error, Result};
use crate::model::{
    ModelBuilder, ModelDefinition, PopulationState, RateExpr, ScaledState, TypeSpace,
};
use crate::rng::RngStream;
use crate::ssa::{initial_population, simulate, sup_mu_error, SimOptions, StopReason, Trajectory};
use crate::stats;
use crate::tagged::{
    couple_tagged, group_independence, patch_decoupling_bound, replay_tagged_patches,
    simulate_tagged, EmpiricalEnv, PathEnv, TagState, TaggedChain, TaggedOptions,
};

/// Snapshot-grid intervals used by every replica simulation.
const GRID_INTERVALS: usize = 40;
/// Replicas whose full snapshot rows are dumped by the simulate driver.
const TRAJECTORY_DUMP_LIMIT: usize = 20;
/// Offspring-histogram time bins for invasion runs.
const OFFSPRING_BINS: usize = 64;
/// Extra cap applied for the audit's widened re-run.
const CAP_WIDENING: u32 = 10;
/// Ratio above which a widened audit constant counts as cap-dependent.
const CAP_RATIO_THRESHOLD: f64 = 1.25;
/// Constants at or below this are treated as zero in cap ratios.
const CAP_RATIO_FLOOR: f64 = 1e-9;
/// Bootstrap resampling rounds behind interval estimates.
const BOOTSTRAP_ROUNDS: usize = 400;
/// Confidence level of bootstrap intervals.
const BOOTSTRAP_LEVEL: f64 = 0.9;
/// Relative jitter of the sensitivity tube around each probe state.
const TUBE_JITTER: f64 = 0.2;
/// Jittered copies per probe state when estimating rate sensitivity.
const TUBE_PAIRS_PER_STATE: usize = 2;
/// Outcome buckets for tagged-patch independence: occupancy 0, 1, 2,
/// three-or-more, and destroyed.
const INDEPENDENCE_BUCKETS: usize = 5;
/// Tagged patches per independence replica.
const INDEPENDENCE_GROUP: usize = 2;
/// Live individuals at which an invading lineage counts as established.
const ESTABLISHMENT_THRESHOLD: f64 = 100.0;
/// Quadrature intervals for the cohort mean integral.
const QUADRATURE_INTERVALS: usize = 800;

// ── Worker pool ──────────────────────────────────────────────────────────

/// Builds the replica worker pool. The `METAPOP_WORKERS` environment
/// variable fixes the thread count; unset means one thread per core.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    pool_with(std::env::var("METAPOP_WORKERS").ok().as_deref())
}

fn pool_with(workers: Option<&str>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(v) = workers {
        let count: usize = v.trim().parse().map_err(|_| {
            Error::Config(format!("METAPOP_WORKERS must be a positive integer, got {v:?}"))
        })?;
        if count == 0 {
            return Err(Error::Config("METAPOP_WORKERS must be positive".into()));
        }
        builder = builder.num_threads(count);
    }
    builder
        .build()
        .map_err(|e| Error::Experiment(format!("cannot build worker pool: {e}")))
}

/// Distinct substream per (purpose, scale index, replica), so replica
/// draws never depend on the worker count or on other experiments run
/// from the same seed.
fn stream(seed: u64, purpose: u64, scale_idx: usize, replica: usize) -> RngStream {
    RngStream::substream(seed, (purpose << 56) | ((scale_idx as u64) << 40) | replica as u64)
}

// ── CSV ──────────────────────────────────────────────────────────────────

/// In-memory table rendered in RFC-4180 style: header row, quoted fields
/// where needed, CRLF line endings.
#[derive(Clone, Debug)]
pub struct CsvTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CsvTable { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    /// Appends one row; its arity must match the header.
    pub fn row(&mut self, fields: Vec<String>) {
        assert_eq!(fields.len(), self.columns.len(), "CSV row arity mismatch");
        self.rows.push(fields);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |fields: &[String], out: &mut String| {
            for (k, f) in fields.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&csv_field(f));
            }
            out.push_str("\r\n");
        };
        line(&self.columns, &mut out);
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

fn csv_field(f: &str) -> String {
    if f.contains(',') || f.contains('"') || f.contains('\n') || f.contains('\r') {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

// ── Model ingestion ──────────────────────────────────────────────────────

/// Model names accepted by [`load_model`] without a config file.
pub const BUILTIN_MODELS: [&str; 4] =
    ["host-parasite", "metapop-dispersal", "metapop-competition", "quadratic-growth"];

/// Single-variety occupancy chain given by per-occupancy rate arrays.
/// Array index = current occupancy; arrays are either empty (channel
/// absent) or of length `cap + 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyProfile {
    /// Largest representable occupancy.
    pub cap: u32,
    /// Occupancy increase `i -> i+1`; a positive entry at the cap is a
    /// suppressed boundary move (tallied, never applied).
    #[serde(default)]
    pub up: Vec<f64>,
    /// Occupancy decrease `i -> i-1` (entry 0 must be zero).
    #[serde(default)]
    pub down: Vec<f64>,
    /// Collapse `i -> 0` (entry 0 must be zero).
    #[serde(default)]
    pub reset: Vec<f64>,
    /// Migrant emission; the patch is unchanged.
    #[serde(default)]
    pub emit: Vec<f64>,
    /// Per-(migrant, patch) settlement rate onto an occupancy-`i` patch
    /// (entry at the cap must be zero).
    #[serde(default)]
    pub settle: Vec<f64>,
    #[serde(default = "default_migrant_death")]
    pub migrant_death: f64,
    #[serde(default = "default_slot_reserve")]
    pub slot_reserve: f64,
}

fn default_migrant_death() -> f64 {
    1.0
}

fn default_slot_reserve() -> f64 {
    2.0
}

impl OccupancyProfile {
    fn check_array(&self, name: &str, arr: &[f64]) -> Result<()> {
        if !arr.is_empty() && arr.len() != self.cap as usize + 1 {
            return Err(Error::Config(format!(
                "params.{name}: expected {} entries (cap + 1), got {}",
                self.cap + 1,
                arr.len()
            )));
        }
        for (i, v) in arr.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Config(format!(
                    "params.{name}[{i}]: rates must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<ModelDefinition> {
        self.check_array("up", &self.up)?;
        self.check_array("down", &self.down)?;
        self.check_array("reset", &self.reset)?;
        self.check_array("emit", &self.emit)?;
        self.check_array("settle", &self.settle)?;
        if self.down.first().copied().unwrap_or(0.0) != 0.0 {
            return Err(Error::Config("params.down[0]: an empty patch cannot lose an occupant".into()));
        }
        if self.reset.first().copied().unwrap_or(0.0) != 0.0 {
            return Err(Error::Config("params.reset[0]: an empty patch cannot collapse".into()));
        }
        if self.settle.last().copied().unwrap_or(0.0) != 0.0 && self.settle.len() == self.cap as usize + 1 {
            return Err(Error::Config(
                "params.settle: settlement onto a patch at the cap is not representable; the last entry must be zero".into(),
            ));
        }
        if !self.migrant_death.is_finite() || self.migrant_death < 0.0 {
            return Err(Error::Config("params.migrant_death must be finite and nonnegative".into()));
        }
        if !self.slot_reserve.is_finite() || self.slot_reserve <= 0.0 {
            return Err(Error::Config("params.slot_reserve must be positive".into()));
        }
        let mut b = ModelBuilder::new(name, 1, self.cap)?;
        b.slot_reserve(0, self.slot_reserve);
        for i in 0..=self.cap {
            let at = |arr: &[f64]| arr.get(i as usize).copied().unwrap_or(0.0);
            if at(&self.up) > 0.0 {
                b.type_change(&[i], &[i + 1], at(&self.up));
            }
            if i >= 1 && at(&self.down) > 0.0 {
                b.type_change(&[i], &[i - 1], at(&self.down));
            }
            if i >= 1 && at(&self.reset) > 0.0 {
                b.type_change(&[i], &[0], at(&self.reset));
            }
            if at(&self.emit) > 0.0 {
                b.migrant_birth(&[i], 0, at(&self.emit));
            }
            if i < self.cap && at(&self.settle) > 0.0 {
                b.settlement(0, &[i], RateExpr::Const(at(&self.settle)));
            }
        }
        if self.migrant_death > 0.0 {
            b.migrant_death(0, self.migrant_death);
        }
        b.build()
    }

    fn widened(&self, extra: u32) -> OccupancyProfile {
        let extend = |arr: &[f64]| {
            if arr.is_empty() {
                Vec::new()
            } else {
                let mut v = arr.to_vec();
                v.resize(self.cap as usize + 1 + extra as usize, 0.0);
                v
            }
        };
        OccupancyProfile {
            cap: self.cap + extra,
            up: extend(&self.up),
            down: extend(&self.down),
            reset: extend(&self.reset),
            emit: extend(&self.emit),
            settle: extend(&self.settle),
            migrant_death: self.migrant_death,
            slot_reserve: self.slot_reserve,
        }
    }
}

/// Which parameterized family a loaded model belongs to. The family is
/// what lets experiments rebuild the model at a wider cap and pick
/// family-specific procedures (cohort law, invasion chain).
#[derive(Clone, Debug)]
pub enum ModelFamily {
    HostParasite(HostParasiteParams),
    Dispersal(Mg1Params),
    Competition(Mg2Params),
    QuadraticGrowth { cap: u32 },
    OccupancyProfile(OccupancyProfile),
}

impl ModelFamily {
    fn build(&self, name: &str) -> Result<ModelDefinition> {
        match self {
            ModelFamily::HostParasite(p) => p.model(),
            ModelFamily::Dispersal(p) => p.model(),
            ModelFamily::Competition(p) => p.model(),
            ModelFamily::QuadraticGrowth { cap } => quadratic_growth_chain(*cap),
            ModelFamily::OccupancyProfile(p) => p.model(name),
        }
    }

    fn widened(&self, extra: u32) -> ModelFamily {
        match self {
            ModelFamily::HostParasite(p) => ModelFamily::HostParasite(p.with_cap(p.cap + extra)),
            ModelFamily::Dispersal(p) => ModelFamily::Dispersal(p.with_cap(p.cap + extra)),
            ModelFamily::Competition(p) => {
                ModelFamily::Competition(Mg2Params { cap: p.cap + extra, ..p.clone() })
            }
            ModelFamily::QuadraticGrowth { cap } => {
                ModelFamily::QuadraticGrowth { cap: cap + extra }
            }
            ModelFamily::OccupancyProfile(p) => ModelFamily::OccupancyProfile(p.widened(extra)),
        }
    }

    fn default_init(&self, model: &ModelDefinition) -> Result<ScaledState> {
        match self {
            ModelFamily::HostParasite(p) => Ok(p.default_init(model)),
            ModelFamily::Dispersal(p) => Ok(p.default_init(model)),
            ModelFamily::Competition(p) => Ok(p.resident_init(model)),
            ModelFamily::QuadraticGrowth { .. } => ScaledState::from_patches(
                model.space(),
                &[(&[0][..], 0.25), (&[1][..], 0.4), (&[2][..], 0.1)],
                &[0.0],
            ),
            ModelFamily::OccupancyProfile(_) => Err(Error::Config(
                "occupancy-profile models need an [init] section in their config file".into(),
            )),
        }
    }
}

/// A model ready for experiments: definition, initial density, and the
/// parameter family it was built from.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub name: String,
    pub family: ModelFamily,
    pub model: ModelDefinition,
    pub init: ScaledState,
}

impl LoadedModel {
    fn assemble(name: String, family: ModelFamily, init: Option<ConfigInit>) -> Result<Self> {
        let model = family.build(&name)?;
        let init = match init {
            Some(ci) => ci.to_state(model.space())?,
            None => family.default_init(&model)?,
        };
        Ok(LoadedModel { name, family, model, init })
    }

    /// Same family at `extra` more occupancy, with the initial density
    /// embedded into the wider space.
    pub fn widened(&self, extra: u32) -> Result<(ModelDefinition, ScaledState)> {
        let family = self.family.widened(extra);
        let model = family.build(&self.name)?;
        let init = embed_state(self.model.space(), model.space(), &self.init)?;
        Ok((model, init))
    }
}

/// Copies a density into a wider type space of the same varieties:
/// interior coordinates map by composition, migrant and slot coordinates
/// by variety.
pub fn embed_state(narrow: &TypeSpace, wide: &TypeSpace, x: &ScaledState) -> Result<ScaledState> {
    if narrow.d() != wide.d() {
        return Err(Error::Mismatch("spaces have different variety counts".into()));
    }
    if wide.cap() < narrow.cap() {
        return Err(Error::Mismatch("target space is narrower than the source".into()));
    }
    let mut y = ScaledState::zero(wide);
    for z in 0..narrow.n_interior() {
        let w = wide
            .index_of(narrow.comp(z))
            .ok_or_else(|| Error::Mismatch("composition missing from wider space".into()))?;
        y.values[w] = x.values[z];
    }
    for l in 0..narrow.d() {
        y.values[wide.migrant(l)] = x.values[narrow.migrant(l)];
        y.values[wide.empty_slot(l)] = x.values[narrow.empty_slot(l)];
    }
    Ok(y)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    kind: String,
    name: Option<String>,
    params: Option<toml::Value>,
    init: Option<ConfigInit>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigInit {
    #[serde(default)]
    patches: Vec<ConfigPatch>,
    #[serde(default)]
    migrants: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigPatch {
    comp: Vec<u32>,
    density: f64,
}

impl ConfigInit {
    fn to_state(&self, space: &TypeSpace) -> Result<ScaledState> {
        for p in &self.patches {
            if !p.density.is_finite() || p.density < 0.0 {
                return Err(Error::Config(format!(
                    "init.patches: density for {:?} must be finite and nonnegative",
                    p.comp
                )));
            }
        }
        for (l, m) in self.migrants.iter().enumerate() {
            if !m.is_finite() || *m < 0.0 {
                return Err(Error::Config(format!(
                    "init.migrants[{l}]: must be finite and nonnegative"
                )));
            }
        }
        let pairs: Vec<(&[u32], f64)> =
            self.patches.iter().map(|p| (p.comp.as_slice(), p.density)).collect();
        ScaledState::from_patches(space, &pairs, &self.migrants)
            .map_err(|e| Error::Config(format!("init: {e}")))
    }
}

fn typed_params<P: serde::de::DeserializeOwned + Default>(
    params: Option<toml::Value>,
    path: &Path,
) -> Result<P> {
    match params {
        None => Ok(P::default()),
        Some(v) => v.try_into().map_err(|e| {
            Error::Config(format!("{}: [params] {e}", path.display()))
        }),
    }
}

/// Loads a model by built-in name or from a TOML model file.
///
/// Built-ins: `host-parasite` (load-structured hosts), `metapop-dispersal`
/// (single-variety patches with juvenile dispersal), `metapop-competition`
/// (its two-variety extension), and `quadratic-growth` (the audit's
/// superlinear counterexample). A file supplies `kind` (a built-in family
/// or `occupancy-profile`), optional `[params]` overrides, and an
/// optional `[init]` density section.
pub fn load_model(source: &str) -> Result<LoadedModel> {
    match source {
        "host-parasite" => LoadedModel::assemble(
            source.into(),
            ModelFamily::HostParasite(HostParasiteParams::default()),
            None,
        ),
        "metapop-dispersal" => LoadedModel::assemble(
            source.into(),
            ModelFamily::Dispersal(Mg1Params::default()),
            None,
        ),
        "metapop-competition" => LoadedModel::assemble(
            source.into(),
            ModelFamily::Competition(Mg2Params::default()),
            None,
        ),
        "quadratic-growth" => LoadedModel::assemble(
            source.into(),
            ModelFamily::QuadraticGrowth { cap: 12 },
            None,
        ),
        other => {
            let path = Path::new(other);
            if path.exists() {
                load_model_file(path)
            } else {
                Err(Error::Config(format!(
                    "unknown model {other:?}: expected one of {} or a path to a .toml model file",
                    BUILTIN_MODELS.join(", ")
                )))
            }
        }
    }
}

fn load_model_file(path: &Path) -> Result<LoadedModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model file {}: {e}", path.display())))?;
    let cfg: ConfigFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let family = match cfg.kind.as_str() {
        "host-parasite" => ModelFamily::HostParasite(typed_params(cfg.params, path)?),
        "metapop-dispersal" => ModelFamily::Dispersal(typed_params(cfg.params, path)?),
        "metapop-competition" => ModelFamily::Competition(typed_params(cfg.params, path)?),
        "occupancy-profile" => {
            let v = cfg.params.ok_or_else(|| {
                Error::Config(format!(
                    "{}: occupancy-profile models need a [params] table",
                    path.display()
                ))
            })?;
            ModelFamily::OccupancyProfile(v.try_into().map_err(|e| {
                Error::Config(format!("{}: [params] {e}", path.display()))
            })?)
        }
        other => {
            return Err(Error::Config(format!(
                "{}: unknown model kind {other:?} (expected host-parasite, metapop-dispersal, metapop-competition, or occupancy-profile)",
                path.display()
            )))
        }
    };
    let name = cfg.name.unwrap_or_else(|| {
        path.file_stem().map_or_else(|| cfg.kind.clone(), |s| s.to_string_lossy().into_owned())
    });
    LoadedModel::assemble(name, family, cfg.init)
}

// ── Provenance ───────────────────────────────────────────────────────────

/// Identification block stamped on every emitted table and report.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub model: String,
    /// Structural hash of the model definition.
    pub model_hash: String,
    pub seed: u64,
    pub cap: u32,
    /// Named tolerance settings of the run, rendered `k=v;...` in CSV.
    pub tolerances: BTreeMap<String, f64>,
    /// Order `2d + 6` of the weighted initial moment recorded below.
    pub moment_order: u32,
    /// Weighted moment of that order of the initial density (recorded,
    /// not enforced).
    pub initial_moment: f64,
}

impl Provenance {
    pub const CSV_COLUMNS: [&'static str; 5] = ["model", "model_hash", "seed", "cap", "tolerances"];

    fn new(loaded: &LoadedModel, seed: u64, tolerances: BTreeMap<String, f64>) -> Self {
        let space = loaded.model.space();
        let order = 2 * space.d() as u32 + 6;
        Provenance {
            model: loaded.name.clone(),
            model_hash: loaded.model.fingerprint(),
            seed,
            cap: space.cap(),
            tolerances,
            moment_order: order,
            initial_moment: space.empirical_moment(&loaded.init, order),
        }
    }

    fn csv_fields(&self) -> [String; 5] {
        let tol = self
            .tolerances
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        [
            self.model.clone(),
            self.model_hash.clone(),
            self.seed.to_string(),
            self.cap.to_string(),
            tol,
        ]
    }
}

fn table_with_provenance<I, S>(columns: I) -> CsvTable
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut cols: Vec<String> = columns.into_iter().map(Into::into).collect();
    cols.extend(Provenance::CSV_COLUMNS.iter().map(|s| s.to_string()));
    CsvTable::new(cols)
}

fn push_row(table: &mut CsvTable, mut fields: Vec<String>, prov: &Provenance) {
    fields.extend(prov.csv_fields());
    table.row(fields);
}

fn write_outputs<R: Serialize>(
    out: &Option<PathBuf>,
    report: &R,
    tables: &[(&str, &CsvTable)],
) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;
    for (name, table) in tables {
        table.write(&dir.join(name))?;
    }
    Ok(())
}

// ── Experiment specification ─────────────────────────────────────────────

/// One experiment request: which model, at which scales, for how long,
/// how many replicas, from which seed, and where to write results.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSpec {
    /// Built-in name or model-file path.
    pub model: String,
    /// Scale parameters (capacity N) to run at.
    pub ns: Vec<u64>,
    /// Simulated time horizon.
    pub horizon: f64,
    /// Replicas per scale.
    pub replicas: usize,
    /// Master seed; all replica streams derive from it.
    pub seed: u64,
    /// Output directory (`None` keeps results in memory).
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(model: &str) -> Self {
        ExperimentSpec {
            model: model.into(),
            ns: vec![1000],
            horizon: 10.0,
            replicas: 200,
            seed: 1,
            out: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::Config("at least one scale parameter is required".into()));
        }
        if self.ns.iter().any(|&n| n == 0) {
            return Err(Error::Config("scale parameters must be positive".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("at least one replica is required".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config("horizon must be positive and finite".into()));
        }
        Ok(())
    }

    fn validate_increasing_scales(&self) -> Result<()> {
        if self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scale parameters must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Largest interior initial type by density — the canonical tag start.
fn densest_interior(space: &TypeSpace, x: &ScaledState) -> Result<usize> {
    (0..space.n_interior())
        .filter(|&z| x.values[z] > 0.0)
        .max_by(|a, b| x.values[*a].partial_cmp(&x.values[*b]).unwrap())
        .ok_or_else(|| Error::Config("initial density has no occupied interior type".into()))
}

fn stop_label(stop: &StopReason) -> &'static str {
    match stop {
        StopReason::Horizon => "horizon",
        StopReason::SlotExhaustion { .. } => "slot-exhaustion",
        StopReason::TruncationBudget { .. } => "truncation-budget",
        StopReason::Absorbed { .. } => "absorbed",
        StopReason::EventCap { .. } => "event-cap",
    }
}

// ── simulate ─────────────────────────────────────────────────────────────

/// Per-scale summary of plain forward simulation.
#[derive(Clone, Debug, Serialize)]
pub struct ScaleSummary {
    pub n: u64,
    pub replicas: usize,
    /// Stop-reason tally over the replicas.
    pub stops: BTreeMap<String, usize>,
    pub mean_events: f64,
    pub mean_suppressed: f64,
    /// Mean weighted size of the final state.
    pub mean_final_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub spec: ExperimentSpec,
    pub scales: Vec<ScaleSummary>,
    pub provenance: Provenance,
}

/// Runs plain replicas of the population process at each scale and
/// tabulates grid snapshots (first few replicas) plus stop statistics.
pub fn run_simulate(spec: &ExperimentSpec) -> Result<SimulateReport> {
    spec.validate()?;
    let loaded = load_model(&spec.model)?;
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let mut opts = SimOptions::with_grid(spec.horizon, GRID_INTERVALS);
    opts.truncation_budget = u64::MAX;

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([("grid_intervals".to_string(), GRID_INTERVALS as f64)]),
    );
    let mut cols: Vec<String> =
        ["n", "replica", "time"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..space.len()).map(|z| type_label(space, z)));
    cols.extend(Provenance::CSV_COLUMNS.iter().map(|s| s.to_string()));
    let mut table = CsvTable::new(cols);

    let mut scales = Vec::new();
    for (ni, &n) in spec.ns.iter().enumerate() {
        let runs: Vec<Result<Trajectory>> = pool.install(|| {
            (0..spec.replicas)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(spec.seed, 1, ni, k);
                    let pop = initial_population(model, n, &loaded.init)?;
                    simulate(model, &pop, &opts, &mut rng)
                })
                .collect()
        });
        let mut stops: BTreeMap<String, usize> = BTreeMap::new();
        let (mut events, mut suppressed, mut final_norm) = (0.0, 0.0, 0.0);
        for (k, run) in runs.into_iter().enumerate() {
            let traj = run?;
            *stops.entry(stop_label(&traj.stop).to_string()).or_insert(0) += 1;
            events += traj.n_events as f64;
            suppressed += traj.truncation_losses as f64;
            final_norm += space.mu_norm(&traj.final_state.scaled());
            if k < TRAJECTORY_DUMP_LIMIT {
                for (t, snap) in traj.grid.iter().zip(&traj.snapshots) {
                    let mut row = vec![n.to_string(), k.to_string(), fmt_f64(*t)];
                    row.extend(snap.values.iter().map(|v| fmt_f64(*v)));
                    row.extend(prov.csv_fields());
                    table.row(row);
                }
            }
        }
        let r = spec.replicas as f64;
        scales.push(ScaleSummary {
            n,
            replicas: spec.replicas,
            stops,
            mean_events: events / r,
            mean_suppressed: suppressed / r,
            mean_final_norm: final_norm / r,
        });
    }
    let report = SimulateReport { spec: spec.clone(), scales, provenance: prov };
    write_outputs(&spec.out, &report, &[("trajectories.csv", &table)])?;
    Ok(report)
}

fn type_label(space: &TypeSpace, z: usize) -> String {
    if space.is_interior(z) {
        let comp =
            space.comp(z).iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        format!("patch[{comp}]")
    } else {
        for l in 0..space.d() {
            if z == space.migrant(l) {
                return format!("migrant[{l}]");
            }
            if z == space.empty_slot(l) {
                return format!("slot[{l}]");
            }
        }
        unreachable!("index outside type space")
    }
}

// ── converge ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ConvergeRow {
    pub n: u64,
    /// Replicas that reached the horizon and entered the statistics.
    pub used: usize,
    /// Replicas stopped early (slot exhaustion, truncation budget) and
    /// excluded.
    pub excluded: usize,
    pub median_sup_mu_error: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergeReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<ConvergeRow>,
    /// Successive ratios of median errors between consecutive scales.
    pub ratios: Vec<f64>,
    pub strictly_decreasing: bool,
    pub provenance: Provenance,
}

/// Convergence sweep: at each scale, replica sup-μ-errors against the
/// deterministic limit path, summarized by median and quartiles.
pub fn run_converge(spec: &ExperimentSpec) -> Result<ConvergeReport> {
    spec.validate()?;
    spec.validate_increasing_scales()?;
    let loaded = load_model(&spec.model)?;
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let ode = IntegrateOptions::default();
    let path = integrate(model, &loaded.init, spec.horizon, &ode)?;
    let opts = SimOptions::with_grid(spec.horizon, GRID_INTERVALS);

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("ode_tol".to_string(), ode.tol),
            ("grid_intervals".to_string(), GRID_INTERVALS as f64),
        ]),
    );
    let mut rows = Vec::new();
    for (ni, &n) in spec.ns.iter().enumerate() {
        let runs: Vec<Result<Option<f64>>> = pool.install(|| {
            (0..spec.replicas)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(spec.seed, 1, ni, k);
                    let pop = initial_population(model, n, &loaded.init)?;
                    let traj = simulate(model, &pop, &opts, &mut rng)?;
                    if !traj.stop.completed() {
                        return Ok(None);
                    }
                    Ok(Some(sup_mu_error(space, &traj, &path)?))
                })
                .collect()
        });
        let mut errors = Vec::new();
        let mut excluded = 0usize;
        for run in runs {
            match run? {
                Some(e) => errors.push(e),
                None => excluded += 1,
            }
        }
        if errors.is_empty() {
            return Err(Error::Experiment(format!(
                "all {} replicas at n={n} stopped before the horizon",
                spec.replicas
            )));
        }
        let median = stats::median(&errors);
        let (q1, q3) = stats::quartiles(&errors);
        rows.push(ConvergeRow {
            n,
            used: errors.len(),
            excluded,
            median_sup_mu_error: median,
            q1,
            q3,
        });
    }
    let ratios = rows
        .windows(2)
        .map(|w| {
            if w[0].median_sup_mu_error > 0.0 {
                w[1].median_sup_mu_error / w[0].median_sup_mu_error
            } else {
                f64::NAN
            }
        })
        .collect::<Vec<_>>();
    let strictly_decreasing = rows
        .windows(2)
        .all(|w| w[1].median_sup_mu_error < w[0].median_sup_mu_error);

    let mut table = table_with_provenance([
        "n",
        "used",
        "excluded",
        "median_sup_mu_error",
        "q1",
        "q3",
    ]);
    for r in &rows {
        push_row(
            &mut table,
            vec![
                r.n.to_string(),
                r.used.to_string(),
                r.excluded.to_string(),
                fmt_f64(r.median_sup_mu_error),
                fmt_f64(r.q1),
                fmt_f64(r.q3),
            ],
            &prov,
        );
    }
    let report =
        ConvergeReport { spec: spec.clone(), rows, ratios, strictly_decreasing, provenance: prov };
    write_outputs(&spec.out, &report, &[("converge.csv", &table)])?;
    Ok(report)
}

// ── couple ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct CoupleRow {
    pub n: u64,
    pub used: usize,
    pub excluded: usize,
    /// Fraction of replicas whose two copies agreed on the whole horizon.
    pub coupled_fraction: f64,
    pub decoupled_fraction: f64,
    /// Monte-Carlo standard error of the decoupled fraction.
    pub se: f64,
    /// Largest sup-μ-error of the replica environments at this scale.
    pub eps_hat: f64,
    /// Decoupling bound evaluated with the audited rate sensitivity and
    /// the measured environment error (tail term zero: every replica
    /// stayed inside the measured tube by construction).
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoupleReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<CoupleRow>,
    /// Audited rate-Lipschitz constant of the tagged-patch chain.
    pub rate_lipschitz: f64,
    /// Audited per-migrant settlement supremum (crowding term input).
    pub encounter_sup: f64,
    pub sensitivity_pairs: usize,
    pub provenance: Provenance,
}

/// Couples a tagged patch driven by a finite-scale simulation against
/// the same patch driven by the deterministic limit, one shared proposal
/// clock per replica, and compares the observed split frequency with the
/// decoupling bound.
pub fn run_couple(spec: &ExperimentSpec) -> Result<CoupleReport> {
    spec.validate()?;
    let loaded = load_model(&spec.model)?;
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let ode = IntegrateOptions::default();
    let path = integrate(model, &loaded.init, spec.horizon, &ode)?;
    let probes =
        standard_probes(model, &loaded.init, &ProbeOptions { horizon: spec.horizon, ..ProbeOptions::default() })?;
    let pairs = tube_pairs(&probes, TUBE_JITTER, TUBE_PAIRS_PER_STATE, spec.seed ^ 0x70be);
    let sens = rate_sensitivity(model, &pairs)?;
    let chain = TaggedChain::patch(model);
    let start = TagState::Patch(densest_interior(space, &loaded.init)?);
    let tag_opts = TaggedOptions::new(spec.horizon);
    let mut opts = SimOptions::with_grid(spec.horizon, GRID_INTERVALS);
    opts.truncation_budget = u64::MAX;
    opts.record_events = true;

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("ode_tol".to_string(), ode.tol),
            ("majorant_margin".to_string(), tag_opts.majorant_margin),
            ("tube_jitter".to_string(), TUBE_JITTER),
        ]),
    );

    let mut rows = Vec::new();
    for (ni, &n) in spec.ns.iter().enumerate() {
        let runs: Vec<Result<Option<(bool, f64)>>> = pool.install(|| {
            (0..spec.replicas)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(spec.seed, 1, ni, k);
                    let pop = initial_population(model, n, &loaded.init)?;
                    let traj = simulate(model, &pop, &opts, &mut rng)?;
                    if !traj.stop.completed() {
                        return Ok(None);
                    }
                    let eps = sup_mu_error(space, &traj, &path)?;
                    let mut env1 = EmpiricalEnv::new(model, &pop, &traj)?;
                    let mut env2 = PathEnv::new(&path);
                    let outcome =
                        couple_tagged(&chain, &mut env1, &mut env2, start, &tag_opts, &mut rng)?;
                    Ok(Some((outcome.stayed_coupled(), eps)))
                })
                .collect()
        });
        let (mut used, mut excluded, mut split, mut eps_hat) = (0usize, 0usize, 0usize, 0.0f64);
        for run in runs {
            match run? {
                Some((coupled, eps)) => {
                    used += 1;
                    if !coupled {
                        split += 1;
                    }
                    eps_hat = eps_hat.max(eps);
                }
                None => excluded += 1,
            }
        }
        if used == 0 {
            return Err(Error::Experiment(format!(
                "all {} replicas at n={n} stopped before the horizon",
                spec.replicas
            )));
        }
        let p = split as f64 / used as f64;
        let se = (p * (1.0 - p) / used as f64).sqrt();
        let bound = patch_decoupling_bound(1, spec.horizon, eps_hat, sens.rate_lipschitz, 0.0);
        rows.push(CoupleRow {
            n,
            used,
            excluded,
            coupled_fraction: 1.0 - p,
            decoupled_fraction: p,
            se,
            eps_hat,
            bound,
        });
    }

    let mut table = table_with_provenance([
        "n",
        "used",
        "excluded",
        "coupled_fraction",
        "decoupled_fraction",
        "se",
        "eps_hat",
        "bound",
    ]);
    for r in &rows {
        push_row(
            &mut table,
            vec![
                r.n.to_string(),
                r.used.to_string(),
                r.excluded.to_string(),
                fmt_f64(r.coupled_fraction),
                fmt_f64(r.decoupled_fraction),
                fmt_f64(r.se),
                fmt_f64(r.eps_hat),
                fmt_f64(r.bound),
            ],
            &prov,
        );
    }
    let report = CoupleReport {
        spec: spec.clone(),
        rows,
        rate_lipschitz: sens.rate_lipschitz,
        encounter_sup: sens.encounter_sup,
        sensitivity_pairs: sens.pairs,
        provenance: prov,
    };
    write_outputs(&spec.out, &report, &[("couple.csv", &table)])?;
    Ok(report)
}

// ── independence ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct IndependenceRow {
    pub n: u64,
    pub used: usize,
    pub excluded: usize,
    /// Plug-in total variation between the joint law of the tagged pair
    /// and the product of its marginals, on the occupancy buckets.
    pub tv: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupIndependenceReport {
    pub spec: ExperimentSpec,
    pub group: usize,
    pub buckets: usize,
    pub rows: Vec<IndependenceRow>,
    pub tv_strictly_decreasing: bool,
    /// Whether the first scale's interval lies strictly above the last's.
    pub ci_separated: bool,
    pub provenance: Provenance,
}

/// Tags a pair of patches inside one simulation per replica (conditional
/// replay), buckets their final occupancy, and measures joint-vs-product
/// total variation per scale.
pub fn run_independence(spec: &ExperimentSpec) -> Result<GroupIndependenceReport> {
    spec.validate()?;
    spec.validate_increasing_scales()?;
    let loaded = load_model(&spec.model)?;
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let start = densest_interior(space, &loaded.init)?;
    let mut opts = SimOptions::with_grid(spec.horizon, GRID_INTERVALS);
    opts.truncation_budget = u64::MAX;
    opts.record_events = true;

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("bootstrap_rounds".to_string(), BOOTSTRAP_ROUNDS as f64),
            ("bootstrap_level".to_string(), BOOTSTRAP_LEVEL),
        ]),
    );

    let mut rows = Vec::new();
    for (ni, &n) in spec.ns.iter().enumerate() {
        let runs: Vec<Result<Option<Vec<usize>>>> = pool.install(|| {
            (0..spec.replicas)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream(spec.seed, 1, ni, k);
                    let pop = initial_population(model, n, &loaded.init)?;
                    if pop.count(start) < INDEPENDENCE_GROUP as u64 {
                        return Err(Error::Config(format!(
                            "cannot tag {INDEPENDENCE_GROUP} distinct patches: only {} of the densest type at n={n}",
                            pop.count(start)
                        )));
                    }
                    let traj = simulate(model, &pop, &opts, &mut rng)?;
                    if !traj.stop.completed() {
                        return Ok(None);
                    }
                    let tags = replay_tagged_patches(
                        model,
                        &pop,
                        &traj.events,
                        &vec![start; INDEPENDENCE_GROUP],
                        &mut rng,
                    )?;
                    Ok(Some(tags.iter().map(|t| occupancy_bucket(space, t)).collect()))
                })
                .collect()
        });
        let mut samples = Vec::new();
        let mut excluded = 0usize;
        for run in runs {
            match run? {
                Some(s) => samples.push(s),
                None => excluded += 1,
            }
        }
        if samples.is_empty() {
            return Err(Error::Experiment(format!(
                "all {} replicas at n={n} stopped before the horizon",
                spec.replicas
            )));
        }
        let rep = group_independence(
            &samples,
            INDEPENDENCE_BUCKETS,
            BOOTSTRAP_ROUNDS,
            BOOTSTRAP_LEVEL,
            &mut stream(spec.seed, 3, ni, 0),
        )?;
        rows.push(IndependenceRow {
            n,
            used: samples.len(),
            excluded,
            tv: rep.tv,
            ci_lo: rep.ci.0,
            ci_hi: rep.ci.1,
            cells: rep.cells,
        });
    }
    let tv_strictly_decreasing = rows.windows(2).all(|w| w[1].tv < w[0].tv);
    let ci_separated = rows.len() >= 2 && rows[0].ci_lo > rows[rows.len() - 1].ci_hi;

    let mut table =
        table_with_provenance(["n", "used", "excluded", "tv", "ci_lo", "ci_hi", "cells"]);
    for r in &rows {
        push_row(
            &mut table,
            vec![
                r.n.to_string(),
                r.used.to_string(),
                r.excluded.to_string(),
                fmt_f64(r.tv),
                fmt_f64(r.ci_lo),
                fmt_f64(r.ci_hi),
                r.cells.to_string(),
            ],
            &prov,
        );
    }
    let report = GroupIndependenceReport {
        spec: spec.clone(),
        group: INDEPENDENCE_GROUP,
        buckets: INDEPENDENCE_BUCKETS,
        rows,
        tv_strictly_decreasing,
        ci_separated,
        provenance: prov,
    };
    write_outputs(&spec.out, &report, &[("independence.csv", &table)])?;
    Ok(report)
}

/// Occupancy bucket of a tag outcome: 0, 1, 2, three-or-more, or
/// destroyed (`Dead`).
fn occupancy_bucket(space: &TypeSpace, tag: &TagState) -> usize {
    match tag {
        TagState::Patch(idx) if space.is_interior(*idx) => (space.total(*idx) as usize).min(3),
        _ => 4,
    }
}

// ── cohort ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct CohortReport {
    pub spec: ExperimentSpec,
    pub replicas: usize,
    pub survivors: usize,
    pub survival_fraction: f64,
    /// Mean occupant load of survivors at the horizon.
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    /// Variance-to-mean ratio (1 for a Poisson law).
    pub dispersion: f64,
    /// Goodness-of-fit p-value against a Poisson law with the sample
    /// mean.
    pub gof_p: f64,
    /// Predicted mean: the acquisition rate along the deterministic path,
    /// discounted by per-occupant loss between acquisition and the
    /// horizon.
    pub quadrature_mean: f64,
    pub mean_abs_diff: f64,
    pub within_three_se: bool,
    pub underpowered: bool,
    pub provenance: Provenance,
}

/// Simulates a cohort of hosts born parasite-free at time zero in the
/// deterministic environment, conditions on survival to the horizon, and
/// compares the load distribution against the predicted Poisson law.
pub fn run_cohort(spec: &ExperimentSpec) -> Result<CohortReport> {
    spec.validate()?;
    let loaded = load_model(&spec.model)?;
    let ModelFamily::HostParasite(params) = &loaded.family else {
        return Err(Error::Config(
            "the cohort experiment needs a host-parasite model (load-structured hosts)".into(),
        ));
    };
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let ode = IntegrateOptions::default();
    let path = integrate(model, &loaded.init, spec.horizon, &ode)?;
    let chain = TaggedChain::patch(model);
    let newborn = space
        .index_of(&[0])
        .ok_or_else(|| Error::Config("host-parasite space lacks the empty load".into()))?;
    let loaded_one = space
        .index_of(&[1])
        .ok_or_else(|| Error::Config("host-parasite space lacks load one".into()))?;
    let tag_opts = TaggedOptions::new(spec.horizon);

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("ode_tol".to_string(), ode.tol),
            ("majorant_margin".to_string(), tag_opts.majorant_margin),
            ("quadrature_intervals".to_string(), QUADRATURE_INTERVALS as f64),
        ]),
    );

    let loads: Vec<Result<Option<u32>>> = pool.install(|| {
        (0..spec.replicas)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(spec.seed, 4, 0, k);
                let mut env = PathEnv::new(&path);
                let tag = simulate_tagged(
                    &chain,
                    &mut env,
                    TagState::Patch(newborn),
                    &tag_opts,
                    &mut rng,
                )?;
                match tag.state_at(spec.horizon) {
                    TagState::Patch(idx) => Ok(Some(space.total(idx))),
                    _ => Ok(None),
                }
            })
            .collect()
    });
    let mut survivors: Vec<f64> = Vec::new();
    for l in loads {
        if let Some(load) = l? {
            survivors.push(load as f64);
        }
    }
    if survivors.is_empty() {
        return Err(Error::Experiment("no tagged host survived to the horizon".into()));
    }
    let underpowered = survivors.len() < 100;
    let (mean, mean_se) = stats::mean_and_se(&survivors);
    let variance = stats::variance(&survivors);
    let dispersion = if mean > 0.0 { variance / mean } else { f64::NAN };

    // Discount rate per carried occupant: its own loss rate plus the
    // extra host mortality it induces.
    let discount = params.parasite_death + params.virulence;
    let acquisition = |x: &ScaledState| -> f64 {
        let mut cache = Vec::new();
        model.eval_exprs(x, &mut cache);
        let mut moves = Vec::new();
        chain.moves_into(TagState::Patch(newborn), x, &cache, &mut moves);
        moves
            .iter()
            .filter(|m| m.to == TagState::Patch(loaded_one))
            .map(|m| m.rate)
            .sum()
    };
    let quadrature_mean = simpson(0.0, spec.horizon, QUADRATURE_INTERVALS, |t| {
        acquisition(&path.at(t)) * (-(discount) * (spec.horizon - t)).exp()
    });
    let mean_abs_diff = (mean - quadrature_mean).abs();

    // Histogram against the fitted Poisson law, with the tail lumped so
    // every compared cell keeps expected mass.
    let max_load = survivors.iter().cloned().fold(0.0f64, f64::max) as u64;
    let total = survivors.len() as f64;
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    let mut tail_obs = 0.0;
    let mut tail_exp = 0.0;
    for k in 0..=max_load {
        let obs = survivors.iter().filter(|&&l| l as u64 == k).count() as f64;
        let exp = total * stats::poisson_pmf(k, mean);
        if exp >= 5.0 && tail_exp == 0.0 {
            observed.push(obs);
            expected.push(exp);
        } else {
            tail_obs += obs;
            tail_exp += exp;
        }
    }
    tail_exp += total * (1.0 - (0..=max_load).map(|k| stats::poisson_pmf(k, mean)).sum::<f64>());
    if tail_exp > 0.0 {
        observed.push(tail_obs);
        expected.push(tail_exp.max(1e-12));
    }
    let (_, _, gof_p) = stats::chi_square_gof(&observed, &expected, 1);

    let mut table = table_with_provenance(["load", "observed", "expected_poisson"]);
    for (k, (o, e)) in observed.iter().zip(&expected).enumerate() {
        push_row(&mut table, vec![k.to_string(), fmt_f64(*o), fmt_f64(*e)], &prov);
    }
    let report = CohortReport {
        spec: spec.clone(),
        replicas: spec.replicas,
        survivors: survivors.len(),
        survival_fraction: survivors.len() as f64 / spec.replicas as f64,
        mean,
        mean_se,
        variance,
        dispersion,
        gof_p,
        quadrature_mean,
        mean_abs_diff,
        within_three_se: mean_abs_diff <= 3.0 * mean_se,
        underpowered,
        provenance: prov,
    };
    write_outputs(&spec.out, &report, &[("cohort_histogram.csv", &table)])?;
    Ok(report)
}

fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + k as f64 * h);
    }
    sum * h / 3.0
}

// ── invade ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct EstablishmentBlock {
    /// Scale of the full two-variety simulation.
    pub n: u64,
    /// Introduced founder migrants.
    pub k: u64,
    pub trials: usize,
    pub established: usize,
    pub extinct: usize,
    /// Trials alive below the establishment threshold at the horizon.
    pub ambiguous: usize,
    pub frequency: f64,
    /// `1 - q^k` from the branching fixed point.
    pub predicted: f64,
    pub abs_diff: f64,
    /// `k^2 / n`; the finite-scale correction scale of the comparison.
    pub k_sq_over_n: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvadeReport {
    pub spec: ExperimentSpec,
    /// Which invasion construction ran: `dispersal` (conspecific
    /// re-invasion of the single-variety model) or `competition`
    /// (variety 1 invading variety 0's equilibrium).
    pub construction: String,
    pub replicas: usize,
    pub settled_fraction: f64,
    /// Mean migrant offspring per founder migrant.
    pub mbar: f64,
    pub mbar_se: f64,
    /// Offspring mass beyond the binned horizon (tail-bias control).
    pub tail_mass: f64,
    /// Growth exponent from the empirical reproduction measure, when the
    /// lineage is supercritical enough to have one.
    pub rho: Option<f64>,
    pub criticality: String,
    /// Extinction probability of a single founder's descent.
    pub q: f64,
    pub q_se: f64,
    pub establishment: Option<EstablishmentBlock>,
    pub provenance: Provenance,
}

/// Invasion study: estimates the founder lineage's reproduction
/// statistics and extinction probability against the resident
/// environment, and — for the competition family — checks the branching
/// prediction against direct establishment frequencies of the full
/// process.
pub fn run_invade(spec: &ExperimentSpec) -> Result<InvadeReport> {
    spec.validate()?;
    let loaded = load_model(&spec.model)?;
    let model = &loaded.model;
    let eq_opts = EquilibriumOptions::default();
    let (construction, chain) = match &loaded.family {
        ModelFamily::Dispersal(p) => {
            let virgin = p.virgin_environment(model);
            let env = equilibrium(model, &virgin, &eq_opts)?;
            ("dispersal".to_string(), InvasionChain::from_dispersal(p, &env)?)
        }
        ModelFamily::Competition(p) => {
            let env = equilibrium(model, &loaded.init, &eq_opts)?;
            ("competition".to_string(), InvasionChain::from_competition(p, 1, &env)?)
        }
        _ => {
            return Err(Error::Config(
                "the invade experiment needs a metapop-dispersal or metapop-competition model"
                    .into(),
            ))
        }
    };

    let est = collect_offspring(&chain, spec.replicas, spec.horizon, OFFSPRING_BINS, spec.seed)?;
    let ext = extinction_prob(&est.counts, BOOTSTRAP_ROUNDS, &mut stream(spec.seed, 5, 0, 0))?;
    let rho = est.malthusian();
    let criticality = format!("{:?}", est.criticality(3.0)).to_lowercase();

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("equilibrium_residual_tol".to_string(), eq_opts.residual_tol),
            ("offspring_bins".to_string(), OFFSPRING_BINS as f64),
            ("establishment_threshold".to_string(), ESTABLISHMENT_THRESHOLD),
        ]),
    );

    let establishment = if let ModelFamily::Competition(_) = &loaded.family {
        Some(run_establishment(spec, &loaded, ext.q)?)
    } else {
        None
    };

    let mut offspring = table_with_provenance(["offspring", "replicas"]);
    let kmax = est.counts.iter().copied().max().unwrap_or(0);
    for k in 0..=kmax {
        let c = est.counts.iter().filter(|&&v| v == k).count();
        push_row(&mut offspring, vec![k.to_string(), c.to_string()], &prov);
    }
    let mut intensity = table_with_provenance(["t_mid", "mean_emissions", "cumulative"]);
    let mut cum = 0.0;
    for (b, inc) in est.increments.iter().enumerate() {
        cum += inc;
        push_row(
            &mut intensity,
            vec![
                fmt_f64((b as f64 + 0.5) * est.bin_width),
                fmt_f64(*inc),
                fmt_f64(cum),
            ],
            &prov,
        );
    }

    let report = InvadeReport {
        spec: spec.clone(),
        construction,
        replicas: est.replicas,
        settled_fraction: est.settled_fraction,
        mbar: est.mbar,
        mbar_se: est.mbar_se,
        tail_mass: est.tail_mass,
        rho,
        criticality,
        q: ext.q,
        q_se: ext.se,
        establishment,
        provenance: prov,
    };
    write_outputs(
        &spec.out,
        &report,
        &[("offspring.csv", &offspring), ("reproduction.csv", &intensity)],
    )?;
    Ok(report)
}

/// Direct establishment frequency of the full two-variety process with
/// one introduced founder migrant, classified against the threshold.
fn run_establishment(
    spec: &ExperimentSpec,
    loaded: &LoadedModel,
    q: f64,
) -> Result<EstablishmentBlock> {
    let pool = worker_pool()?;
    let model = &loaded.model;
    let space = model.space();
    let n = *spec.ns.last().unwrap();
    let k_founders = 1u64;
    let trials = ((spec.replicas / 100).max(200)).min(spec.replicas);
    let eq = equilibrium(model, &loaded.init, &EquilibriumOptions::default())?;
    let invader_migrant = space.migrant(1);
    let mut opts = SimOptions::with_grid(spec.horizon, GRID_INTERVALS);
    opts.truncation_budget = u64::MAX;

    let invader_count = |pop: &PopulationState| -> u64 {
        let mut total = pop.count(invader_migrant);
        for z in 0..space.n_interior() {
            total += pop.count(z) * space.comp(z)[1] as u64;
        }
        total
    };
    let invader_density = |x: &ScaledState| -> f64 {
        let mut total = x.values[invader_migrant];
        for z in 0..space.n_interior() {
            total += x.values[z] * space.comp(z)[1] as f64;
        }
        total
    };

    let outcomes: Vec<Result<u8>> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(spec.seed, 6, 0, k);
                let mut pop = initial_population(model, n, &eq)?;
                pop.set_count(invader_migrant, pop.count(invader_migrant) + k_founders);
                let traj = simulate(model, &pop, &opts, &mut rng)?;
                let crossed = traj
                    .snapshots
                    .iter()
                    .any(|x| invader_density(x) * n as f64 >= ESTABLISHMENT_THRESHOLD);
                if crossed {
                    Ok(1)
                } else if invader_count(&traj.final_state) == 0 {
                    Ok(0)
                } else {
                    Ok(2)
                }
            })
            .collect()
    });
    let (mut established, mut extinct, mut ambiguous) = (0usize, 0usize, 0usize);
    for o in outcomes {
        match o? {
            1 => established += 1,
            0 => extinct += 1,
            _ => ambiguous += 1,
        }
    }
    let frequency = established as f64 / trials as f64;
    let predicted = 1.0 - q.powi(k_founders as i32);
    Ok(EstablishmentBlock {
        n,
        k: k_founders,
        trials,
        established,
        extinct,
        ambiguous,
        frequency,
        predicted,
        abs_diff: (frequency - predicted).abs(),
        k_sq_over_n: (k_founders * k_founders) as f64 / n as f64,
        threshold: ESTABLISHMENT_THRESHOLD,
    })
}

// ── audit ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct AuditRunReport {
    pub spec: ExperimentSpec,
    /// Growth-condition constants over the probe set at the model's cap.
    pub conditions: AuditReport,
    /// Weight-drift constant of the linear drift part.
    pub weight_drift: f64,
    pub sensitivity: SensitivityEstimate,
    /// Same audit re-run at a widened cap, with flags for constants that
    /// grew materially.
    pub cap_comparison: Option<CapComparison>,
    pub cap_independent: Option<bool>,
    pub provenance: Provenance,
}

/// Audits the growth conditions over the standard probe set, estimates
/// rate sensitivity, and re-runs the audit at a widened cap to flag
/// constants that depend on the truncation.
pub fn run_audit(spec: &ExperimentSpec) -> Result<AuditRunReport> {
    spec.validate()?;
    let loaded = load_model(&spec.model)?;
    let model = &loaded.model;
    let probe_opts = ProbeOptions { horizon: spec.horizon, ..ProbeOptions::default() };
    let probes = standard_probes(model, &loaded.init, &probe_opts)?;
    let conditions = crate::audit::audit_conditions(model, &probes)?;
    let weight_drift = conditions.weight_drift;
    let pairs = tube_pairs(&probes, TUBE_JITTER, TUBE_PAIRS_PER_STATE, spec.seed ^ 0x70be);
    let sensitivity = rate_sensitivity(model, &pairs)?;

    let (wide_model, wide_init) = loaded.widened(CAP_WIDENING)?;
    let wide_probes = standard_probes(&wide_model, &wide_init, &probe_opts)?;
    let cmp = compare_caps(
        model,
        &probes,
        &wide_model,
        &wide_probes,
        CAP_RATIO_THRESHOLD,
        CAP_RATIO_FLOOR,
    )?;
    let cap_independent = cmp.cap_independent();

    let prov = Provenance::new(
        &loaded,
        spec.seed,
        BTreeMap::from([
            ("cap_ratio_threshold".to_string(), CAP_RATIO_THRESHOLD),
            ("cap_widening".to_string(), CAP_WIDENING as f64),
            ("probe_jitter".to_string(), probe_opts.jitter),
        ]),
    );
    let mut table = table_with_provenance(["condition", "constant", "witness", "wide_constant"]);
    for (b, w) in conditions.conditions.iter().zip(&cmp.wide.conditions) {
        push_row(
            &mut table,
            vec![
                b.name.to_string(),
                fmt_f64(b.constant),
                b.witness.clone(),
                fmt_f64(w.constant),
            ],
            &prov,
        );
    }
    let report = AuditRunReport {
        spec: spec.clone(),
        conditions,
        weight_drift,
        sensitivity,
        cap_comparison: Some(cmp),
        cap_independent: Some(cap_independent),
        provenance: prov,
    };
    write_outputs(&spec.out, &report, &[("audit.csv", &table)])?;
    Ok(report)
}
