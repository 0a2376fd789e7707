//! Run configuration.
//!
//! A configuration is a TOML tree. Layers are merged in order: a named
//! preset, an optional file, then dotted `key=value` overrides. The merged
//! tree is deserialized into [`RunConfig`]; keys that a command needs but
//! the tree lacks are reported by their dotted path.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::experiments::{
    calibrate_problem, derive_seed, CalibrationResult, CalibrationSettings, ManufacturedProblem, NoiseSpec, SnapshotSpec,
    Snapshots, SweepConfig, WaveVelocity,
};
use crate::field_net::{NetworkArchitecture, OutputTransform, ProjectionConstraint};
use crate::forward::{Grid1D, NewtonConfig};
use crate::lbfgs::{OptimizerConfig, ParamProjection};
use crate::residual::{ProblemKind, ResidualProblem};
use crate::sensitivity::QuantityFunctional;

const FIG1: &str = r#"
problem = "diffusion"
seed = 0
lambda = 0.0

[grid]
n = 1000

[snapshots]
times = [0.1]
dt = 0.001

[network]
widths = [20, 20]

[noise]
std = 0.0
"#;

const FIG2_DT: &str = r#"
problem = "diffusion"
seed = 0
lambda = 0.0

[snapshots]
times = [0.1]

[network]
widths = [20, 20]

[noise]
std = 0.0

[sweep]
dts = [0.1, 0.05, 0.01, 0.005, 0.001]
ns = [10, 20, 40, 80, 160, 320, 640]
seeds = 3
axis = "dt"
"#;

const FIG2_H: &str = r#"
problem = "diffusion"
seed = 0
lambda = 0.0

[snapshots]
times = [0.1]

[network]
widths = [20, 20]

[noise]
std = 0.0

[sweep]
dts = [0.1, 0.05, 0.01, 0.005, 0.001]
ns = [10, 20, 40, 80, 160, 320, 640]
seeds = 3
axis = "h"
"#;

const WAVE_C1: &str = r#"
problem = "wave"
seed = 0
lambda = 0.0

[wave]
velocity = "smooth"
sim_dt = 1e-4

[grid]
n = 500

[snapshots]
times = [0.3313, 0.6647, 0.998]
dt = 0.001

[noise]
std = 1e-7

[network]
widths = [20, 20]
output = { bounded = { lo = 0.0, hi = 2.0 } }

[baseline]
initial = 1.0
"#;

const WAVE_C2: &str = r#"
problem = "wave"
seed = 0
lambda = 0.0

[wave]
velocity = "layered"
sim_dt = 1e-4

[grid]
n = 500

[snapshots]
times = [0.3313, 0.6647, 0.998]
dt = 0.001

[noise]
std = 1e-7

[network]
widths = [20, 20]
output = { bounded = { lo = 0.0, hi = 2.0 } }

[baseline]
initial = 1.0
"#;

const BURGERS: &str = r#"
problem = "burgers"
seed = 0
lambda = 0.01

[burgers]
diffusivity = 0.1
sim_dt = 2e-5

[grid]
n = 250

[snapshots]
times = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1,
         0.11, 0.12, 0.13, 0.14, 0.15, 0.16, 0.17, 0.18, 0.19]
dt = 0.01

[noise]
std = 1e-5

[network]
widths = [40, 40, 40, 40]

[baseline]
initial = 0.0
"#;

const BURGERS_FULL: &str = r#"
[grid]
n = 500

[burgers]
sim_dt = 2e-6
"#;

const SENS_DIFFUSION: &str = r#"
problem = "diffusion"
seed = 0
lambda = 0.0

[grid]
n = 1000

[snapshots]
times = [0.1]
dt = 0.001

[network]
widths = [20, 20]

[noise]
std = 3e-7

[sensitivity]
anchor = { kind = "value_at_point", x = 0.0 }
deltas = [0.001, 0.002, 0.003]
n_alpha = 31
"#;

const PRESETS: [(&str, &str); 7] = [
    ("paper-fig1", FIG1),
    ("paper-fig2-dt", FIG2_DT),
    ("paper-fig2-h", FIG2_H),
    ("paper-wave-c1", WAVE_C1),
    ("paper-wave-c2", WAVE_C2),
    ("paper-burgers", BURGERS),
    ("paper-sens-diffusion", SENS_DIFFUSION),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// TOML text of a named preset.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Overlay switching a preset from its desk-scale default to the full
/// published resolution. Only presets with a reduced default have one.
pub fn full_fidelity_overlay(name: &str) -> Option<&'static str> {
    (name == "paper-burgers").then_some(BURGERS_FULL)
}

pub fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::InvalidConfig(format!("{origin}: {e}")))
}

/// Recursive merge; values in `overlay` win, tables are merged key by key.
pub fn merge_tables(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `dotted.key=value` assignment. The value is read as a TOML
/// value when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed override key `{key}`")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = table;
    for (depth, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(Error::InvalidKey {
                    key: parts[..=depth].join("."),
                    message: "is not a table".into(),
                })
            }
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Number of intervals; the grid has `n + 1` points.
    pub n: Option<usize>,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n: None,
            x_min: -1.0,
            x_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotSection {
    pub times: Option<Vec<f64>>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub widths: Vec<usize>,
    pub output: OutputTransform,
    /// Spectral-norm bound for every weight matrix; unconstrained if absent.
    pub projection: Option<f64>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            widths: vec![20, 20],
            output: OutputTransform::Identity,
            projection: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveSection {
    pub velocity: WaveVelocity,
    pub sim_dt: f64,
}

impl Default for WaveSection {
    fn default() -> Self {
        WaveSection {
            velocity: WaveVelocity::Smooth,
            sim_dt: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BurgersSection {
    pub diffusivity: f64,
    pub sim_dt: f64,
    pub c_ref: f64,
    pub clamp: f64,
    pub newton: NewtonConfig,
}

impl Default for BurgersSection {
    fn default() -> Self {
        BurgersSection {
            diffusivity: 0.1,
            sim_dt: 2e-5,
            c_ref: 1.0,
            clamp: 1e-2,
            newton: NewtonConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// One curve per grid size, error against `Δt`.
    #[default]
    Dt,
    /// One curve per `Δt`, error against `h`.
    H,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub dts: Option<Vec<f64>>,
    /// Interval counts; `h = (x_max − x_min)/n`.
    pub ns: Option<Vec<usize>>,
    pub seeds: usize,
    pub axis: SweepAxis,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            dts: None,
            ns: None,
            seeds: 1,
            axis: SweepAxis::Dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivitySection {
    pub anchor: QuantityFunctional,
    pub deltas: Vec<f64>,
    pub n_alpha: usize,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        SensitivitySection {
            anchor: QuantityFunctional::ValueAtPoint { x: 0.0 },
            deltas: vec![0.001, 0.002, 0.003],
            n_alpha: 31,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub t_end: Option<f64>,
    /// Time step; defaults to the problem's simulation step, or to
    /// `snapshots.dt` for diffusion.
    pub dt: Option<f64>,
    /// Store every k-th step.
    pub every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub window: (f64, f64),
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection { window: (0.2, 0.8) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Starting value of every grid unknown.
    pub initial: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { initial: 1.0 }
    }
}

/// Snapshots, residual problem and network fit produced by one
/// configuration.
pub struct ConfiguredFit {
    pub problem: ManufacturedProblem,
    pub snapshots: Snapshots,
    pub residual: ResidualProblem,
    pub result: CalibrationResult,
}

/// Fully merged configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<ProblemKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub snapshots: SnapshotSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub wave: WaveSection,
    #[serde(default)]
    pub burgers: BurgersSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::InvalidKey {
        key: key.into(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let text = toml::to_string(&table).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string().trim().to_string()))
    }

    /// Preset (if any), then file text (if any), then overrides.
    pub fn resolve(preset_name: Option<&str>, full_fidelity: bool, file: Option<(&str, &str)>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::new();
        if let Some(name) = preset_name {
            let text = preset(name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown preset `{name}` (known: {})",
                    preset_names().collect::<Vec<_>>().join(", ")
                ))
            })?;
            table = parse_table(text, name)?;
            if full_fidelity {
                if let Some(overlay) = full_fidelity_overlay(name) {
                    merge_tables(&mut table, parse_table(overlay, name)?);
                }
            }
        }
        if let Some((origin, text)) = file {
            merge_tables(&mut table, parse_table(text, origin)?);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::from_table(table)
    }

    pub fn problem_kind(&self) -> Result<ProblemKind> {
        self.problem.ok_or_else(|| Error::MissingKey("problem".into()))
    }

    pub fn manufactured(&self) -> Result<ManufacturedProblem> {
        Ok(match self.problem_kind()? {
            ProblemKind::Diffusion => ManufacturedProblem::Diffusion,
            ProblemKind::Wave => ManufacturedProblem::Wave {
                velocity: self.wave.velocity,
                sim_dt: positive("wave.sim_dt", self.wave.sim_dt)?,
            },
            ProblemKind::Burgers => {
                let b = &self.burgers;
                ManufacturedProblem::Burgers {
                    diffusivity: positive("burgers.diffusivity", b.diffusivity)?,
                    c_ref: b.c_ref,
                    clamp: positive("burgers.clamp", b.clamp)?,
                    sim_dt: positive("burgers.sim_dt", b.sim_dt)?,
                    newton: b.newton,
                }
            }
        })
    }

    pub fn grid(&self) -> Result<Grid1D> {
        let n = self.grid.n.ok_or_else(|| Error::MissingKey("grid.n".into()))?;
        self.grid_with(n)
    }

    /// Grid with `n` intervals on the configured interval.
    pub fn grid_with(&self, n: usize) -> Result<Grid1D> {
        if n < 2 {
            return Err(invalid("grid.n", format!("needs at least 2 intervals, got {n}")));
        }
        Grid1D::new(n + 1, self.grid.x_min, self.grid.x_max).map_err(|e| invalid("grid", e.to_string()))
    }

    pub fn snapshot_times(&self) -> Result<Vec<f64>> {
        let times = self
            .snapshots
            .times
            .clone()
            .ok_or_else(|| Error::MissingKey("snapshots.times".into()))?;
        if times.is_empty() || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(invalid("snapshots.times", "must be a non-empty list of non-negative times"));
        }
        Ok(times)
    }

    pub fn snapshot_spec(&self) -> Result<SnapshotSpec> {
        let dt = self.snapshots.dt.ok_or_else(|| Error::MissingKey("snapshots.dt".into()))?;
        Ok(SnapshotSpec {
            times: self.snapshot_times()?,
            m: self.problem_kind()?.group_size(),
            dt: positive("snapshots.dt", dt)?,
        })
    }

    /// Noise for a run seeded by `seed`.
    pub fn noise_spec(&self, seed: u64) -> Result<NoiseSpec> {
        let std = self.noise.std;
        if !(std >= 0.0 && std.is_finite()) {
            return Err(invalid("noise.std", format!("must be non-negative, got {std}")));
        }
        if std == 0.0 {
            Ok(NoiseSpec::none())
        } else {
            NoiseSpec::gaussian(std, derive_seed(seed, 1))
        }
    }

    pub fn architecture(&self) -> Result<NetworkArchitecture> {
        NetworkArchitecture::new(1, self.network.widths.clone(), self.network.output)
            .map_err(|e| invalid("network", e.to_string()))
    }

    pub fn settings(&self) -> Result<CalibrationSettings> {
        let arch = self.architecture()?;
        let mut optimizer = self.optimizer.clone();
        optimizer.validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        if let Some(c) = self.network.projection {
            let constraint = ProjectionConstraint::new(c).map_err(|e| invalid("network.projection", e.to_string()))?;
            optimizer.projection = Some(ParamProjection {
                arch: arch.clone(),
                constraint,
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        Ok(CalibrationSettings {
            arch,
            optimizer,
            lambda: self.lambda,
            seed: self.seed,
        })
    }

    /// Sweep points `(Δt, h)` in `dts × ns` order.
    pub fn sweep_points(&self) -> Result<Vec<(f64, f64)>> {
        let dts = self.sweep.dts.clone().ok_or_else(|| Error::MissingKey("sweep.dts".into()))?;
        let ns = self.sweep.ns.clone().ok_or_else(|| Error::MissingKey("sweep.ns".into()))?;
        if dts.is_empty() || ns.is_empty() {
            return Err(invalid("sweep", "dts and ns must be non-empty"));
        }
        let len = self.grid.x_max - self.grid.x_min;
        let mut points = Vec::with_capacity(dts.len() * ns.len());
        for &dt in &dts {
            positive("sweep.dts", dt)?;
            for &n in &ns {
                if n < 2 {
                    return Err(invalid("sweep.ns", format!("needs at least 2 intervals, got {n}")));
                }
                points.push((dt, len / n as f64));
            }
        }
        Ok(points)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        if self.sweep.seeds == 0 {
            return Err(invalid("sweep.seeds", "must be at least 1"));
        }
        if (self.grid.x_min, self.grid.x_max) != (-1.0, 1.0) {
            return Err(invalid("grid", "sweeps run on [-1, 1]"));
        }
        self.noise_spec(self.seed)?;
        Ok(SweepConfig {
            points: self.sweep_points()?,
            seeds: (0..self.sweep.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect(),
            times: self.snapshot_times()?,
            noise_std: self.noise.std,
            settings: self.settings()?,
            jobs: self.jobs,
        })
    }

    pub fn check_sensitivity(&self) -> Result<()> {
        let s = &self.sensitivity;
        if s.deltas.is_empty() || s.deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(invalid("sensitivity.deltas", "must be a non-empty list of non-negative values"));
        }
        if s.n_alpha == 0 || s.n_alpha.is_multiple_of(2) {
            return Err(invalid("sensitivity.n_alpha", format!("must be odd, got {}", s.n_alpha)));
        }
        Ok(())
    }

    /// Generates the configured snapshots and fits the network to them.
    pub fn fit(&self) -> Result<ConfiguredFit> {
        let problem = self.manufactured()?;
        let snapshots = problem.make_snapshots(&self.grid()?, &self.snapshot_spec()?, &self.noise_spec(self.seed)?)?;
        let settings = self.settings()?;
        let residual = problem.residual_problem(snapshots.observed.clone(), settings.arch.clone(), settings.lambda)?;
        let exact = |x: f64| problem.exact_field(x);
        let result = calibrate_problem(&residual, &settings, Some(&exact))?;
        Ok(ConfiguredFit {
            problem,
            snapshots,
            residual,
            result,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}
