//! Scenario files, the time-stepping driver and the artifacts it writes.
//!
//! A scenario is a TOML file with the sections `field`, `grid`, `time`,
//! `levels`, `tolerances`, `particles`, `checks` and `outputs`. Every run
//! writes CSV tables per time step and a `summary.json` with the resolved
//! configuration, per-step diagnostics and one verdict per invariant.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::equilibrium::{EquilibriumOptions, EquilibriumState, GridSpec};
use crate::error::{Error, Result};
use crate::fields::{FieldSpec, Potential, Topology, Volume};
use crate::geom::{norm, Point};
use crate::kinematics::{Flow, KinematicsContext, VelocityDecomposition};
use crate::levelset::extract_level_curves;
use crate::oned::OneDProfile;
use crate::tangential::{minimality_gap, parallel_kinetic_energy};

const SCHEMA: &[(&str, &[&str])] = &[
    ("field", &["potential", "volume", "dimension", "topology", "mass"]),
    ("grid", &["lower", "upper", "resolution"]),
    ("time", &["start", "end", "steps"]),
    ("levels", &["values"]),
    ("tolerances", &["mass", "avg", "dt_probe", "table_size", "bisection"]),
    ("particles", &["seeds", "dt", "tangential"]),
    ("checks", &["theta_zero", "nonzero_tangential"]),
    ("outputs", &["dir", "equilibrium", "dos", "curves", "kinematics", "tangential", "trajectories", "samples"]),
];

/// Shifts `c` used by the minimality check, in units of `|grad pi|`.
pub const MINIMALITY_SHIFTS: [f64; 4] = [-1.0, -0.1, 0.1, 1.0];
const COAREA_TOL: f64 = 1e-2;
const THETA_ZERO_TOL: f64 = 1e-6;
const PI_DRIFT_TOL: f64 = 1e-2;
const ONED_ENDPOINT_TOL: f64 = 1e-8;
const ONED_CONTINUITY_TOL: f64 = 1e-6;
const ONED_POINTS: usize = 100;

#[derive(Debug, Deserialize)]
struct RawScenario {
    name: Option<String>,
    field: Option<RawField>,
    grid: Option<RawGrid>,
    time: Option<RawTime>,
    levels: Option<RawLevels>,
    tolerances: Option<RawTolerances>,
    particles: Option<RawParticles>,
    checks: Option<RawChecks>,
    outputs: Option<RawOutputs>,
}

#[derive(Debug, Deserialize)]
struct RawField {
    potential: Option<String>,
    volume: Option<String>,
    dimension: Option<usize>,
    topology: Option<String>,
    mass: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawResolution {
    Square(usize),
    Axes([usize; 2]),
}

#[derive(Debug, Deserialize)]
struct RawGrid {
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    resolution: Option<RawResolution>,
}

#[derive(Debug, Deserialize)]
struct RawTime {
    start: Option<f64>,
    end: Option<f64>,
    steps: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawLevels {
    values: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct RawTolerances {
    mass: Option<f64>,
    avg: Option<f64>,
    dt_probe: Option<f64>,
    table_size: Option<usize>,
    bisection: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawParticles {
    seeds: Option<Vec<[f64; 2]>>,
    dt: Option<f64>,
    tangential: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct RawChecks {
    theta_zero: Option<bool>,
    nonzero_tangential: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct RawOutputs {
    dir: Option<String>,
    equilibrium: Option<bool>,
    dos: Option<bool>,
    curves: Option<bool>,
    kinematics: Option<bool>,
    tangential: Option<bool>,
    trajectories: Option<bool>,
    samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl TimeWindow {
    /// `steps + 1` equally spaced times from `start` to `end`.
    pub fn samples(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![self.start];
        }
        (0..=self.steps)
            .map(|k| if k == self.steps { self.end } else { self.start + (self.end - self.start) * k as f64 / self.steps as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Absolute mass tolerance of the Fermi level search.
    pub mass: f64,
    /// Coefficient of the averaged continuity bound `avg N / L`.
    pub avg: f64,
    pub dt_probe: f64,
    pub table_size: usize,
    pub bisection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Particles {
    pub seeds: Vec<Point>,
    pub dt: f64,
    /// Include the interpolated tangential velocity in the transport.
    pub tangential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checks {
    pub theta_zero: bool,
    pub nonzero_tangential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outputs {
    pub dir: PathBuf,
    pub equilibrium: bool,
    pub dos: bool,
    pub curves: bool,
    pub kinematics: bool,
    pub tangential: bool,
    pub trajectories: bool,
    /// Number of sampled velocities per row of `oned.csv`.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    #[serde(serialize_with = "display")]
    pub potential: Potential,
    #[serde(serialize_with = "display")]
    pub volume: Volume,
    pub dimension: usize,
    pub topology: Topology,
    #[serde(rename = "N")]
    pub n_total: f64,
    pub grid: Option<GridSpec>,
    pub time: TimeWindow,
    pub levels: Vec<f64>,
    pub tolerances: Tolerances,
    pub particles: Particles,
    pub checks: Checks,
    pub outputs: Outputs,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// `{N/4, N/2, 3N/4, N (1 - 1e-3)}`.
pub fn default_levels(n_total: f64) -> Vec<f64> {
    vec![0.25 * n_total, 0.5 * n_total, 0.75 * n_total, n_total * (1.0 - 1e-3)]
}

fn check_keys(doc: &toml::Table) -> Result<()> {
    for (key, value) in doc {
        if key == "name" {
            continue;
        }
        let Some((_, allowed)) = SCHEMA.iter().find(|(section, _)| section == key) else {
            return Err(Error::Config(format!("unknown key: {key}")));
        };
        let toml::Value::Table(table) = value else {
            return Err(Error::Config(format!("[{key}] must be a table")));
        };
        if let Some(bad) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key: {bad} in [{key}]")));
        }
    }
    Ok(())
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing key: {key}"))
}

fn point(v: &[f64], key: &str) -> Result<Point> {
    match v {
        [x1, x2] => Ok([*x1, *x2]),
        [x1] => Ok([*x1, 0.0]),
        _ => Err(Error::Config(format!("{key} needs one or two coordinates"))),
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
        Self::parse(&text, stem)
    }

    /// Parses scenario text; `fallback_name` is used when `name` is absent.
    pub fn parse(text: &str, fallback_name: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        check_keys(&doc)?;
        let raw: RawScenario = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;

        let name = raw.name.unwrap_or_else(|| fallback_name.to_string());
        let field = raw.field.ok_or_else(|| missing("field"))?;
        let potential: Potential = field.potential.ok_or_else(|| missing("field.potential"))?.parse()?;
        let volume: Volume = field.volume.ok_or_else(|| missing("field.volume"))?.parse()?;
        let dimension = field.dimension.unwrap_or(2);
        let topology: Topology = field.topology.as_deref().unwrap_or("full-plane").parse()?;
        let n_total = field.mass.ok_or_else(|| missing("field.mass"))?;
        if !(n_total > 0.0 && n_total.is_finite()) {
            return Err(Error::Config(format!("field.mass must be positive, got {n_total}")));
        }
        let spec = FieldSpec::new(potential.clone(), volume, dimension, topology).map_err(|e| Error::Config(e.to_string()))?;

        let grid = match (dimension, raw.grid) {
            (1, None) => None,
            (_, None) => return Err(missing("grid")),
            (_, Some(g)) => {
                let lower = point(&g.lower.ok_or_else(|| missing("grid.lower"))?, "grid.lower")?;
                let upper = point(&g.upper.ok_or_else(|| missing("grid.upper"))?, "grid.upper")?;
                let resolution = match g.resolution {
                    None => [256, 256],
                    Some(RawResolution::Square(n)) => [n, n],
                    Some(RawResolution::Axes(r)) => r,
                };
                let grid = GridSpec { lower, upper, resolution };
                grid.validate(&spec).map_err(|e| Error::Config(e.to_string()))?;
                Some(grid)
            }
        };

        let time = raw.time.map_or(TimeWindow { start: 0.0, end: 0.0, steps: 0 }, |t| {
            let start = t.start.unwrap_or(0.0);
            TimeWindow { start, end: t.end.unwrap_or(start), steps: t.steps.unwrap_or(0) }
        });
        if !(time.end >= time.start) || (time.steps == 0 && time.end != time.start) {
            return Err(Error::Config(format!("invalid time window [{}, {}] with {} steps", time.start, time.end, time.steps)));
        }

        let levels = raw.levels.and_then(|l| l.values).unwrap_or_else(|| default_levels(n_total));
        validate_levels(&levels, n_total)?;

        let tol = raw.tolerances;
        let span = time.end - time.start;
        let tolerances = Tolerances {
            mass: tol.as_ref().and_then(|t| t.mass).unwrap_or(1e-4 * n_total),
            avg: tol.as_ref().and_then(|t| t.avg).unwrap_or(1e-3),
            dt_probe: tol.as_ref().and_then(|t| t.dt_probe).unwrap_or(1e-3 * if span > 0.0 { span } else { 1.0 }),
            table_size: tol.as_ref().and_then(|t| t.table_size).unwrap_or(512),
            bisection: tol.as_ref().and_then(|t| t.bisection).unwrap_or(1e-6),
        };
        if !(tolerances.mass > 0.0 && tolerances.avg > 0.0 && tolerances.dt_probe > 0.0 && tolerances.bisection > 0.0)
            || tolerances.table_size < 8
        {
            return Err(Error::Config("tolerances must be positive and table_size at least 8".into()));
        }

        let particles = raw.particles.map_or(Particles { seeds: Vec::new(), dt: 0.05, tangential: true }, |p| Particles {
            seeds: p.seeds.unwrap_or_default(),
            dt: p.dt.unwrap_or(0.05),
            tangential: p.tangential.unwrap_or(true),
        });
        if !(particles.dt > 0.0) {
            return Err(Error::Config(format!("particles.dt must be positive, got {}", particles.dt)));
        }

        let checks = Checks {
            theta_zero: raw.checks.as_ref().and_then(|c| c.theta_zero).unwrap_or(spec.is_radially_symmetric()),
            nonzero_tangential: raw.checks.as_ref().and_then(|c| c.nonzero_tangential).unwrap_or(false),
        };

        let out = raw.outputs;
        let flag = |f: fn(&RawOutputs) -> Option<bool>| out.as_ref().and_then(f).unwrap_or(true);
        let outputs = Outputs {
            dir: out.as_ref().and_then(|o| o.dir.clone()).map_or_else(|| PathBuf::from("out").join(&name), PathBuf::from),
            equilibrium: flag(|o| o.equilibrium),
            dos: flag(|o| o.dos),
            curves: flag(|o| o.curves),
            kinematics: flag(|o| o.kinematics),
            tangential: flag(|o| o.tangential),
            trajectories: flag(|o| o.trajectories),
            samples: out.as_ref().and_then(|o| o.samples).unwrap_or(11).max(2),
        };

        Ok(Scenario {
            name,
            potential,
            volume,
            dimension,
            topology,
            n_total,
            grid,
            time,
            levels,
            tolerances,
            particles,
            checks,
            outputs,
        })
    }

    pub fn spec(&self) -> FieldSpec {
        FieldSpec::new(self.potential.clone(), self.volume, self.dimension, self.topology)
            .expect("validated at load time")
    }

    pub fn equilibrium_options(&self) -> EquilibriumOptions {
        EquilibriumOptions {
            table_size: self.tolerances.table_size,
            bisection_tol: self.tolerances.bisection,
            mass_tol: Some(self.tolerances.mass),
        }
    }

    /// Replaces the level list, validating it against `N`.
    pub fn set_levels(&mut self, levels: Vec<f64>) -> Result<()> {
        validate_levels(&levels, self.n_total)?;
        self.levels = levels;
        Ok(())
    }

    pub fn set_resolution(&mut self, resolution: [usize; 2]) -> Result<()> {
        let spec = self.spec();
        let grid = self.grid.as_mut().ok_or_else(|| Error::Config("one-dimensional scenarios have no grid".into()))?;
        grid.resolution = resolution;
        grid.validate(&spec).map_err(|e| Error::Config(e.to_string()))
    }
}

fn validate_levels(levels: &[f64], n_total: f64) -> Result<()> {
    if let Some(p) = levels.iter().find(|&&p| !(p > 0.0 && p < n_total)) {
        return Err(Error::Config(format!("level p = {p} must lie strictly between 0 and N = {n_total}")));
    }
    Ok(())
}

/// Verdict of one invariant.
pub fn verdict(ok: bool) -> Value {
    json!(if ok { "pass" } else { "fail" })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummary {
    pub p: f64,
    pub component: usize,
    pub vertices: usize,
    pub length: f64,
    pub coarea: f64,
    pub avg_residual: f64,
    pub avg_limit: f64,
    pub theta_norm: f64,
    pub theta_max: f64,
    pub v_par_max: f64,
    pub energy: f64,
    pub weak_residual: f64,
    pub weak_limit: f64,
    pub coercivity: f64,
    pub one_sided: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneDStep {
    pub a: f64,
    pub b: f64,
    pub a_prime: f64,
    pub b_prime: f64,
    pub endpoint_mismatch: [f64; 2],
    pub mass_rate: f64,
    pub max_continuity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub t: f64,
    #[serde(rename = "U_N")]
    pub u_n: Option<f64>,
    pub curves: Vec<CurveSummary>,
    pub invariants: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oned: Option<OneDStep>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub id: usize,
    pub x0: Point,
    pub p: f64,
    pub samples: usize,
    pub max_pi_drift: f64,
    pub clamped: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub config: Scenario,
    pub steps: Vec<StepSummary>,
    pub trajectories: Vec<TrajectorySummary>,
    pub invariants: BTreeMap<String, Value>,
    pub status: String,
}

impl RunSummary {
    fn verdicts(&self) -> impl Iterator<Item = &Value> {
        self.steps.iter().flat_map(|s| s.invariants.values()).chain(self.invariants.values())
    }

    pub fn has_errors(&self) -> bool {
        self.steps.iter().any(|s| s.error.is_some()) || self.trajectories.iter().any(|t| t.error.is_some())
    }

    pub fn all_pass(&self) -> bool {
        !self.has_errors() && self.verdicts().all(|v| v != "fail")
    }

    /// `0` all pass, `2` an invariant failed, `4` a numerical abort.
    pub fn exit_code(&self) -> i32 {
        if self.has_errors() {
            4
        } else if self.all_pass() {
            0
        } else {
            2
        }
    }

    /// Names of failed invariants, prefixed with the step time.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (k, v) in &s.invariants {
                if v == "fail" {
                    out.push(format!("t={}: {k}", s.t));
                }
            }
            if let Some(e) = &s.error {
                out.push(format!("t={}: error: {e}", s.t));
            }
        }
        for (k, v) in &self.invariants {
            if v == "fail" {
                out.push(k.clone());
            }
        }
        for t in &self.trajectories {
            if let Some(e) = &t.error {
                out.push(format!("trajectory {}: {e}", t.id));
            }
        }
        out
    }

    fn finish(&mut self) {
        self.status = if self.all_pass() { "pass" } else { "fail" }.to_string();
    }
}

/// Fixed 17-significant-digit rendering used by every CSV.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn level_tag(p: f64) -> String {
    format!("{p}")
}

fn curve_tag(p: f64, component: usize) -> String {
    if component == 0 {
        format!("p{}", level_tag(p))
    } else {
        format!("p{}_c{component}", level_tag(p))
    }
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_float).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a scenario, writing its artifacts under `outputs.dir`.
pub fn run_scenario(s: &Scenario) -> Result<RunSummary> {
    fs::create_dir_all(&s.outputs.dir)?;
    let mut summary = if s.dimension == 1 { run_line(s)? } else { run_plane(s)? };
    summary.finish();
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(s.outputs.dir.join("summary.json"), text + "\n")?;
    Ok(summary)
}

fn empty_summary(s: &Scenario) -> RunSummary {
    RunSummary {
        scenario: s.name.clone(),
        config: s.clone(),
        steps: Vec::new(),
        trajectories: Vec::new(),
        invariants: BTreeMap::new(),
        status: String::new(),
    }
}

fn run_line(s: &Scenario) -> Result<RunSummary> {
    let spec = s.spec();
    let times = s.time.samples();
    let m = s.outputs.samples;
    let profiles: Vec<Result<OneDProfile>> =
        times.par_iter().map(|&t| OneDProfile::compute(&spec, s.n_total, t, m)).collect();
    let mut summary = empty_summary(s);
    let mut rows = Vec::new();
    for (&t, profile) in times.iter().zip(profiles) {
        let mut step = StepSummary { t, u_n: None, curves: Vec::new(), invariants: BTreeMap::new(), oned: None, error: None };
        match profile.and_then(|p| oned_step(&spec, &p).map(|d| (p, d))) {
            Ok((profile, data)) => {
                step.u_n = Some(profile.interval.level);
                step.invariants.insert("endpoint_a".into(), verdict(data.endpoint_mismatch[0] < ONED_ENDPOINT_TOL));
                step.invariants.insert("endpoint_b".into(), verdict(data.endpoint_mismatch[1] < ONED_ENDPOINT_TOL));
                step.invariants.insert("mass_rate".into(), verdict(data.mass_rate.abs() < ONED_ENDPOINT_TOL));
                step.invariants
                    .insert("continuity".into(), verdict(data.max_continuity_residual < ONED_CONTINUITY_TOL));
                let mut row = vec![t, data.a, data.b, data.a_prime, data.b_prime];
                row.extend(profile.samples.iter().map(|s| s.1));
                rows.push(row);
                step.oned = Some(data);
            }
            Err(e) => step.error = Some(e.to_string()),
        }
        summary.steps.push(step);
    }
    let mut header: Vec<String> = ["t", "a", "b", "a_prime", "b_prime"].iter().map(|s| s.to_string()).collect();
    header.extend((0..m).map(|k| format!("v_s{}", k as f64 / (m - 1) as f64)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&s.outputs.dir.join("oned.csv"), &header, rows)?;
    Ok(summary)
}

fn oned_step(spec: &FieldSpec, profile: &OneDProfile) -> Result<OneDStep> {
    let residuals = profile.continuity_residuals(spec, ONED_POINTS)?;
    let (ea, eb) = profile.endpoint_mismatch();
    Ok(OneDStep {
        a: profile.interval.a,
        b: profile.interval.b,
        a_prime: profile.a_prime,
        b_prime: profile.b_prime,
        endpoint_mismatch: [ea, eb],
        mass_rate: profile.mass_rate(spec)?,
        max_continuity_residual: residuals.iter().fold(0.0, |m, r| m.max(r.1.abs())),
    })
}

struct Track {
    id: usize,
    x0: Point,
    p: f64,
    samples: Vec<(f64, Point, f64)>,
    clamped: bool,
    error: Option<String>,
}

fn run_plane(s: &Scenario) -> Result<RunSummary> {
    let spec = s.spec();
    let grid = s.grid.expect("planar scenarios have a grid");
    let ctx = KinematicsContext::new(spec, s.n_total, grid, s.equilibrium_options(), s.tolerances.dt_probe);
    // The box must hold the medium over the whole window.
    ctx.state(s.time.end)?;
    let flow_levels = if s.particles.tangential { s.levels.clone() } else { Vec::new() };
    let flow = Flow::new(&ctx, flow_levels, s.tolerances.avg);

    let times = s.time.samples();
    let mut tracks: Vec<Track> = s
        .particles
        .seeds
        .iter()
        .enumerate()
        .map(|(id, &x0)| {
            let start = ctx.state(times[0]).and_then(|st| st.compute_pi(x0));
            match start {
                Ok(p) => Track { id, x0, p, samples: vec![(times[0], x0, p)], clamped: false, error: None },
                Err(e) => Track { id, x0, p: f64::NAN, samples: Vec::new(), clamped: false, error: Some(e.to_string()) },
            }
        })
        .collect();

    let mut summary = empty_summary(s);
    for (k, &t) in times.iter().enumerate() {
        let step_dir = s.outputs.dir.join(format!("step_{k:03}"));
        fs::create_dir_all(&step_dir)?;
        summary.steps.push(plane_step(s, &ctx, t, &step_dir)?);
        if let Some(&t_next) = times.get(k + 1) {
            tracks.par_iter_mut().for_each(|track| advance(&flow, track, t, t_next, s.particles.dt));
            let keep = t_next - 2.0 * s.tolerances.dt_probe;
            ctx.forget_before(keep);
            flow.forget_before(keep);
        }
    }

    let n_total = s.n_total;
    for track in &tracks {
        let drift = track.samples.iter().fold(0.0f64, |m, smp| m.max((smp.2 - track.p).abs()));
        if track.error.is_none() {
            summary
                .invariants
                .insert(format!("pi_conservation_{}", track.id), verdict(drift < PI_DRIFT_TOL * n_total));
        }
        summary.trajectories.push(TrajectorySummary {
            id: track.id,
            x0: track.x0,
            p: track.p,
            samples: track.samples.len(),
            max_pi_drift: drift,
            clamped: track.clamped,
            error: track.error.clone(),
        });
        if s.outputs.trajectories && !track.samples.is_empty() {
            write_csv(
                &s.outputs.dir.join(format!("trajectory_{}.csv", track.id)),
                &["t", "x1", "x2", "pi"],
                track.samples.iter().map(|&(t, x, pi)| vec![t, x[0], x[1], pi]),
            )?;
        }
    }
    if tracks.len() > 1 {
        summary.invariants.insert("ordering".into(), verdict(ordering_preserved(&tracks)));
    }
    Ok(summary)
}

fn advance(flow: &Flow<'_>, track: &mut Track, t0: f64, t1: f64, dt: f64) {
    if track.error.is_some() || track.clamped {
        return;
    }
    let x = track.samples.last().expect("live tracks have samples").1;
    match flow.advect_particle(x, t0, t1, dt) {
        Ok(tr) => {
            track.samples.extend(tr.samples.into_iter().skip(1));
            track.clamped = tr.clamped;
        }
        Err(e) => track.error = Some(e.to_string()),
    }
}

/// Particles starting on distinct levels keep their order at every shared
/// sample time.
fn ordering_preserved(tracks: &[Track]) -> bool {
    let live: Vec<&Track> = tracks.iter().filter(|t| t.error.is_none()).collect();
    for a in &live {
        for b in &live {
            if !(a.p < b.p) {
                continue;
            }
            for (sa, sb) in a.samples.iter().zip(&b.samples) {
                if sa.0 == sb.0 && !(sa.2 < sb.2) {
                    return false;
                }
            }
        }
    }
    true
}

fn plane_step(s: &Scenario, ctx: &KinematicsContext, t: f64, dir: &Path) -> Result<StepSummary> {
    let mut step = StepSummary { t, u_n: None, curves: Vec::new(), invariants: BTreeMap::new(), oned: None, error: None };
    let state = match ctx.state(t) {
        Ok(st) => st,
        Err(e) => {
            step.error = Some(e.to_string());
            return Ok(step);
        }
    };
    step.u_n = Some(state.fermi_level());
    step.invariants.insert("p_table_increasing".into(), verdict(state.table().is_strictly_increasing()));
    match state.integrated_mass() {
        Ok(m) => {
            step.invariants.insert("mass_recovery".into(), verdict((m - s.n_total).abs() <= state.mass_tolerance()));
            step.invariants.insert("mass_error".into(), json!(m - s.n_total));
        }
        Err(e) => {
            step.error = Some(e.to_string());
            return Ok(step);
        }
    }
    if s.outputs.equilibrium {
        write_csv(
            &dir.join("equilibrium.csv"),
            &["x1", "x2", "W", "tau_inv", "n", "pi"],
            state.node_samples().into_iter().map(|n| vec![n.x[0], n.x[1], n.w, n.tau_inv, n.n, n.pi]),
        )?;
    }
    if s.outputs.dos {
        write_dos(&state, &dir.join("dos.csv"))?;
    }

    let solved: Vec<Result<Vec<VelocityDecomposition>>> = s
        .levels
        .par_iter()
        .map(|&p| {
            extract_level_curves(&state, p)?.iter().map(|c| ctx.decompose(c, s.tolerances.avg)).collect()
        })
        .collect();
    let mut decompositions = Vec::new();
    for r in solved {
        match r {
            Ok(ds) => decompositions.push(ds),
            Err(e) => {
                step.error = Some(e.to_string());
                return Ok(step);
            }
        }
    }

    for (&p, ds) in s.levels.iter().zip(&decompositions) {
        // The coarea identity holds for the whole level set, not per component.
        let coarea: f64 = ds.iter().map(|d| d.curve.weighted_integral(&d.curve.tau_inv)).sum();
        step.invariants.insert(format!("coarea_p{}", level_tag(p)), verdict((coarea - 1.0).abs() < COAREA_TOL));
        for (component, d) in ds.iter().enumerate() {
            let tag = curve_tag(p, component);
            let summary = curve_summary(d, component);
            let inv = &mut step.invariants;
            inv.insert(format!("averaged_continuity_{tag}"), verdict(summary.avg_residual < summary.avg_limit));
            inv.insert(format!("weak_residual_{tag}"), verdict(summary.weak_residual <= summary.weak_limit));
            let minimal = MINIMALITY_SHIFTS.iter().all(|&c| minimality_gap(&d.curve, &d.v_par, c) >= 0.0);
            inv.insert(format!("minimality_{tag}"), verdict(minimal));
            if s.checks.theta_zero {
                inv.insert(format!("theta_zero_{tag}"), verdict(summary.theta_max < THETA_ZERO_TOL));
            }
            if s.checks.nonzero_tangential {
                inv.insert(format!("nonzero_tangential_{tag}"), verdict(summary.v_par_max > 10.0 * summary.avg_limit));
            }
            write_curve_files(s, d, dir, &tag)?;
            step.curves.push(summary);
        }
    }
    Ok(step)
}

fn write_dos(state: &EquilibriumState, path: &Path) -> Result<()> {
    let table = state.table();
    write_csv(
        path,
        &["u", "P", "dPdu"],
        (0..table.len()).map(|k| {
            let u = table.u_at(k);
            vec![u, table.values()[k], table.derivative(u)]
        }),
    )
}

fn write_curve_files(s: &Scenario, d: &VelocityDecomposition, dir: &Path, tag: &str) -> Result<()> {
    let c = &d.curve;
    if s.outputs.curves {
        write_csv(
            &dir.join(format!("curve_{tag}.csv")),
            &["s", "x1", "x2", "nu1", "nu2", "tau_inv", "grad_pi_norm"],
            (0..c.len()).map(|i| {
                vec![c.arclength[i], c.vertices[i][0], c.vertices[i][1], c.normal[i][0], c.normal[i][1], c.tau_inv[i], c.grad_pi_norm[i]]
            }),
        )?;
    }
    if s.outputs.kinematics {
        write_csv(
            &dir.join(format!("kinematics_{tag}.csv")),
            &["s", "w_perp", "f"],
            (0..c.len()).map(|i| vec![c.arclength[i], d.w_perp[i], d.f[i]]),
        )?;
    }
    if s.outputs.tangential {
        write_csv(
            &dir.join(format!("tangential_{tag}.csv")),
            &["s", "theta", "v_par"],
            (0..c.len()).map(|i| vec![c.arclength[i], d.theta[i], d.v_par[i]]),
        )?;
    }
    Ok(())
}

/// Diagnostics of one solved curve.
pub fn curve_summary(d: &VelocityDecomposition, component: usize) -> CurveSummary {
    let c = &d.curve;
    let theta_sq: Vec<f64> = d.theta.iter().map(|v| v * v).collect();
    CurveSummary {
        p: c.p,
        component,
        vertices: c.len(),
        length: c.length,
        coarea: c.weighted_integral(&c.tau_inv),
        avg_residual: d.avg_residual,
        avg_limit: d.avg_limit,
        theta_norm: c.weighted_integral(&theta_sq).sqrt(),
        theta_max: d.theta_max(),
        v_par_max: d.v_par_max(),
        energy: parallel_kinetic_energy(c, &d.v_par),
        weak_residual: d.weak_residual,
        weak_limit: d.weak_limit,
        coercivity: d.coercivity,
        one_sided: d.one_sided.iter().filter(|&&b| b).count(),
        warning: d.warning.clone(),
    }
}

/// Mass on the torus strip used by the counter-example.
pub const COUNTEREXAMPLE_MASS: f64 = 4.0;

/// The periodic-strip setup with `V = x2^2 / 2` and `tau = |x| t`.
pub fn counterexample_scenario(t: f64, resolution: usize) -> Result<Scenario> {
    let text = format!(
        "name = \"counterexample\"\n\
         [field]\npotential = \"separable_x2\"\nvolume = \"radial_time\"\ntopology = \"torus-strip\"\nmass = {COUNTEREXAMPLE_MASS:?}\n\
         [grid]\nlower = [-1.0, -1.5]\nupper = [1.0, 1.5]\nresolution = {resolution}\n\
         [time]\nstart = {t:?}\nend = {t:?}\nsteps = 0\n\
         [checks]\nnonzero_tangential = true\n"
    );
    Scenario::parse(&text, "counterexample")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleCurve {
    pub p: f64,
    pub component: usize,
    pub avg_residual: f64,
    pub avg_limit: f64,
    pub weak_residual: f64,
    pub weak_limit: f64,
    pub v_par_max: f64,
    pub theta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub t: f64,
    pub resolution: [usize; 2],
    #[serde(rename = "N")]
    pub n_total: f64,
    /// Radius of the excluded disc around the singular point of `tau`.
    pub band: f64,
    /// Nodes inside the medium where the residual was evaluated.
    pub nodes_evaluated: usize,
    /// Nodes in the disc or on the critical line, where `nu` is undefined.
    pub nodes_excluded: usize,
    pub max_residual: f64,
    pub max_at: Point,
    pub curves: Vec<CounterexampleCurve>,
    pub checks: BTreeMap<String, Value>,
}

impl CounterexampleReport {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|v| v == "pass")
    }
}

/// Pointwise versus averaged continuity for the purely normal velocity on the
/// periodic strip, and the tangential correction that repairs it.
pub fn counterexample_report(s: &Scenario, t: f64) -> Result<CounterexampleReport> {
    let spec = s.spec();
    if !(spec.topology == Topology::TorusStrip
        && matches!(spec.potential, Potential::SeparableX2)
        && matches!(spec.volume, Volume::RadialTime))
    {
        return Err(Error::Config("the counter-example needs separable_x2, radial_time and the torus strip".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Config(format!("the counter-example needs t > 0, got {t}")));
    }
    let grid = s.grid.expect("planar scenarios have a grid");
    let ctx = KinematicsContext::new(spec, s.n_total, grid, s.equilibrium_options(), s.tolerances.dt_probe);
    let state = ctx.state(t)?;
    let h = grid.spacing();
    let band = 0.1f64.max(4.0 * h[0].max(h[1]));

    let [nx, ny] = grid.resolution;
    let nodes: Vec<Point> = (0..=ny).flat_map(|j| (0..nx).map(move |i| (i, j))).map(|(i, j)| grid.node(i, j)).collect();
    // `Some(None)` marks nodes excluded for a singular `tau` or a degenerate normal.
    let evaluated: Vec<Option<Option<(f64, Point)>>> = nodes
        .par_iter()
        .map(|&x| {
            if norm(x) < band {
                return Ok(Some(None));
            }
            if !state.compute_pi(x).is_ok_and(|p| p < s.n_total) {
                return Ok(None);
            }
            match ctx.normal_flow_residual(x, t) {
                Ok((r, one_sided)) => Ok((!one_sided).then_some(Some((r, x)))),
                Err(Error::DegenerateNormal { .. }) => Ok(Some(None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let inside: Vec<(f64, Point)> = evaluated.iter().flatten().flatten().copied().collect();
    let excluded = evaluated.iter().filter(|e| matches!(e, Some(None))).count();
    let (max_residual, max_at) =
        inside.iter().fold((0.0, [f64::NAN; 2]), |(m, at), &(r, x)| if r.abs() > m { (r.abs(), x) } else { (m, at) });

    let mut curves = Vec::new();
    for &p in &s.levels {
        for (component, curve) in extract_level_curves(&state, p)?.iter().enumerate() {
            let d = ctx.decompose(curve, s.tolerances.avg)?;
            curves.push(CounterexampleCurve {
                p,
                component,
                avg_residual: d.avg_residual,
                avg_limit: d.avg_limit,
                weak_residual: d.weak_residual,
                weak_limit: d.weak_limit,
                v_par_max: d.v_par_max(),
                theta_max: d.theta_max(),
            });
        }
    }

    let mut checks = BTreeMap::new();
    checks.insert("pointwise_violation".to_string(), verdict(max_residual > 0.05));
    checks.insert("averaged_continuity".to_string(), verdict(curves.iter().all(|c| c.avg_residual < 1e-3)));
    checks.insert("weak_residual".to_string(), verdict(curves.iter().all(|c| c.weak_residual < 1e-6)));
    checks.insert(
        "nonzero_tangential".to_string(),
        verdict(curves.iter().all(|c| c.v_par_max > 10.0 * c.avg_limit)),
    );
    Ok(CounterexampleReport {
        t,
        resolution: grid.resolution,
        n_total: s.n_total,
        band,
        nodes_evaluated: inside.len(),
        nodes_excluded: excluded,
        max_residual,
        max_at,
        curves,
        checks,
    })
}
