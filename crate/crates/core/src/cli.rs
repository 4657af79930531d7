//! Configuration-driven experiment runner behind the `fraclap` binary.
//!
//! A config names one space (a fixture descriptor or an inline space), one
//! or more exponents and a list of experiments. Running it writes
//! `report.json` plus CSV tables into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::dirichlet::{
    competitor_check, default_extension_grid, harnack_scan, holder_estimate,
    maximum_principle_check, solve_extension, solve_spectral, strong_maximum_check,
    uniqueness_check, DirichletProblem, IterSpec, DEFAULT_EXTENSION_CELLS,
};
use crate::energy::{comparability_bounds, comparability_report, FracEnergyForm};
use crate::extension::{
    codim_ball_check, default_ymax, dtn_apply, dtn_constant, mode_energy, poisson_extend,
    vertical_modulus_limit, DtnStencil, GridLayout, HalfSpaceGrid,
};
use crate::quadrature::QuadratureSpec;
use crate::space::{fit_line, Fixture, Space, SpaceRecord};
use crate::spectral::{heat_kernel, semigroup_error, SpectralDecomposition, DEFAULT_EIGENTOLERANCE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{failed} of {total} assertive experiments failed: {names}")]
    ExperimentFailure {
        failed: usize,
        total: usize,
        names: String,
    },
}

fn parse_error(path: impl Into<String>, message: impl ToString) -> CliError {
    CliError::ConfigParse {
        path: path.into(),
        message: message.to_string(),
    }
}

/// The space under study.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum SpaceSpec {
    Fixture(Fixture),
    Inline(Space),
}

impl SpaceSpec {
    pub fn build(&self) -> crate::Result<Space> {
        match self {
            SpaceSpec::Fixture(f) => f.build(),
            SpaceSpec::Inline(s) => Ok(s.clone()),
        }
    }
}

/// Which vertices form the domain of a Dirichlet problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(untagged)]
pub enum OmegaSpec {
    /// `"auto"`: the vertices of maximal degree (the lattice interior on
    /// grids, the inner vertices of a path).
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
    Indices(Vec<usize>),
}

mod auto_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"auto\" or a list of indices, got \"{s}\""
            )))
        }
    }
}

impl OmegaSpec {
    pub fn mask(&self, space: &Space) -> crate::Result<Vec<bool>> {
        let n = space.n();
        let mask = match self {
            OmegaSpec::Auto => {
                let degrees: Vec<f64> = (0..n).map(|x| space.degree(x)).collect();
                let top = degrees.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                degrees.iter().map(|&d| d == top).collect()
            }
            OmegaSpec::Indices(idx) => {
                let mut m = vec![false; n];
                for &x in idx {
                    if x >= n {
                        return Err(crate::Error::InvalidParams(format!(
                            "domain index {x} out of range for {n} points"
                        )));
                    }
                    m[x] = true;
                }
                m
            }
        };
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatParams {
    pub times: Vec<f64>,
    pub subordination_times: Vec<f64>,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            times: vec![0.01, 0.1, 1.0, 10.0],
            subordination_times: vec![0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparabilityParams {
    pub family_size: usize,
    /// Allowed relative change of the spread under re-seeding.
    pub spread_tolerance: f64,
}

impl Default for ComparabilityParams {
    fn default() -> Self {
        Self {
            family_size: 100,
            spread_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtnParams {
    /// Cell counts of the successive geometric grids.
    pub cells: Vec<usize>,
    pub ymax: Option<f64>,
    pub stencil: DtnStencil,
    /// Largest relative error allowed on the finest grid.
    pub tolerance: f64,
    pub min_slope: f64,
}

impl Default for DtnParams {
    fn default() -> Self {
        Self {
            cells: vec![8, 9, 10, 11, 12],
            ymax: None,
            stencil: DtnStencil::TwoPoint,
            tolerance: 1e-2,
            min_slope: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyIdentityParams {
    pub lambdas: Vec<f64>,
    pub tolerance: f64,
}

impl Default for EnergyIdentityParams {
    fn default() -> Self {
        Self {
            lambdas: vec![0.5, 1.0, 2.0],
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutesParams {
    pub omega: OmegaSpec,
    /// Refinement sequence for the extension route.
    pub cells: Vec<usize>,
    /// Gap allowed at the default grid, relative to the data oscillation.
    pub tolerance: f64,
    pub min_slope: f64,
    pub competitors: usize,
}

impl Default for RoutesParams {
    fn default() -> Self {
        Self {
            omega: OmegaSpec::Auto,
            cells: vec![32, 64, 128, 256],
            tolerance: 1e-2,
            min_slope: 0.9,
            competitors: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxPrincipleParams {
    pub omega: OmegaSpec,
    pub seeds: usize,
}

impl Default for MaxPrincipleParams {
    fn default() -> Self {
        Self {
            omega: OmegaSpec::Auto,
            seeds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnackParams {
    pub omega: OmegaSpec,
    pub radius: f64,
}

impl Default for HarnackParams {
    fn default() -> Self {
        Self {
            omega: OmegaSpec::Auto,
            radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulusParams {
    pub heights: Vec<f64>,
    /// Defaults to the first half of the points.
    pub subset: Option<Vec<usize>>,
    pub tolerance: f64,
}

impl Default for ModulusParams {
    fn default() -> Self {
        Self {
            heights: vec![0.5, 1.0, 2.0],
            subset: None,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodimParams {
    /// Defaults to every distinct distance, its half, and `1e-6`.
    pub radii: Option<Vec<f64>>,
    pub cells: usize,
    pub tolerance: f64,
}

impl Default for CodimParams {
    fn default() -> Self {
        Self {
            radii: None,
            cells: 64,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Experiment {
    HeatProperties(HeatParams),
    EnergyComparability(ComparabilityParams),
    DtnConvergence(DtnParams),
    EnergyIdentity(EnergyIdentityParams),
    DirichletRoutes(RoutesParams),
    MaxPrincipleBatch(MaxPrincipleParams),
    HarnackScan(HarnackParams),
    ModulusCheck(ModulusParams),
    CodimCheck(CodimParams),
}

pub const EXPERIMENT_KINDS: [&str; 9] = [
    "heat_properties",
    "energy_comparability",
    "dtn_convergence",
    "energy_identity",
    "dirichlet_routes",
    "max_principle_batch",
    "harnack_scan",
    "modulus_check",
    "codim_check",
];

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::HeatProperties(_) => EXPERIMENT_KINDS[0],
            Experiment::EnergyComparability(_) => EXPERIMENT_KINDS[1],
            Experiment::DtnConvergence(_) => EXPERIMENT_KINDS[2],
            Experiment::EnergyIdentity(_) => EXPERIMENT_KINDS[3],
            Experiment::DirichletRoutes(_) => EXPERIMENT_KINDS[4],
            Experiment::MaxPrincipleBatch(_) => EXPERIMENT_KINDS[5],
            Experiment::HarnackScan(_) => EXPERIMENT_KINDS[6],
            Experiment::ModulusCheck(_) => EXPERIMENT_KINDS[7],
            Experiment::CodimCheck(_) => EXPERIMENT_KINDS[8],
        }
    }

    fn params_value(&self) -> Value {
        serde_json::to_value(self).expect("experiment serializes")["params"].clone()
    }

    fn from_parts(kind: &str, params: Value, path: &str) -> Result<Self, CliError> {
        fn p<T: DeserializeOwned>(v: Value, path: &str) -> Result<T, CliError> {
            serde_json::from_value(v).map_err(|e| parse_error(format!("{path}.params"), e))
        }
        Ok(match kind {
            "heat_properties" => Experiment::HeatProperties(p(params, path)?),
            "energy_comparability" => Experiment::EnergyComparability(p(params, path)?),
            "dtn_convergence" => Experiment::DtnConvergence(p(params, path)?),
            "energy_identity" => Experiment::EnergyIdentity(p(params, path)?),
            "dirichlet_routes" => Experiment::DirichletRoutes(p(params, path)?),
            "max_principle_batch" => Experiment::MaxPrincipleBatch(p(params, path)?),
            "harnack_scan" => Experiment::HarnackScan(p(params, path)?),
            "modulus_check" => Experiment::ModulusCheck(p(params, path)?),
            "codim_check" => Experiment::CodimCheck(p(params, path)?),
            other => {
                return Err(parse_error(
                    format!("{path}.kind"),
                    format!(
                        "unknown experiment kind `{other}`; valid kinds: {}",
                        EXPERIMENT_KINDS.join(", ")
                    ),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub space: SpaceSpec,
    pub theta: Vec<f64>,
    pub experiments: Vec<Experiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Every experiment kind with default parameters on the 4x4 grid.
    pub fn default_suite() -> Self {
        Self {
            space: SpaceSpec::Fixture(Fixture::Grid2d { rows: 4, cols: 4 }),
            theta: vec![0.25, 0.5, 0.75],
            experiments: vec![
                Experiment::HeatProperties(Default::default()),
                Experiment::EnergyComparability(Default::default()),
                Experiment::DtnConvergence(Default::default()),
                Experiment::EnergyIdentity(Default::default()),
                Experiment::DirichletRoutes(Default::default()),
                Experiment::MaxPrincipleBatch(Default::default()),
                Experiment::HarnackScan(Default::default()),
                Experiment::ModulusCheck(Default::default()),
                Experiment::CodimCheck(Default::default()),
            ],
            output: None,
            seed: 7,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config document. Errors carry the JSON path of
/// the offending entry, or the line and column for malformed JSON.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let root: Value = serde_json::from_str(text).map_err(|e| {
        parse_error(
            format!("line {}, column {}", e.line(), e.column()),
            e,
        )
    })?;
    let Value::Object(mut obj) = root else {
        return Err(parse_error("$", "config must be a JSON object"));
    };
    for key in obj.keys() {
        if !["space", "theta", "experiments", "output", "seed"].contains(&key.as_str()) {
            return Err(parse_error(
                key.clone(),
                "unknown field; expected one of space, theta, experiments, output, seed",
            ));
        }
    }

    let space_value = obj
        .remove("space")
        .ok_or_else(|| parse_error("space", "missing field `space`"))?;
    let space = if space_value.get("kind").is_some() {
        let fx: Fixture =
            serde_json::from_value(space_value).map_err(|e| parse_error("space", e))?;
        SpaceSpec::Fixture(fx)
    } else {
        let rec: SpaceRecord =
            serde_json::from_value(space_value).map_err(|e| parse_error("space", e))?;
        SpaceSpec::Inline(Space::try_from(rec).map_err(|e| parse_error("space", e))?)
    };
    space.build().map_err(|e| parse_error("space", e))?;

    let theta = match obj.remove("theta") {
        None => vec![0.5],
        Some(Value::Number(x)) => vec![x.as_f64().unwrap_or(f64::NAN)],
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_f64()
                    .ok_or_else(|| parse_error(format!("theta[{i}]"), "expected a number"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(parse_error("theta", "expected a number or a list of numbers")),
    };
    if theta.is_empty() {
        return Err(parse_error("theta", "at least one exponent is required"));
    }
    for (i, &t) in theta.iter().enumerate() {
        if !(t > 0.0 && t < 1.0) {
            return Err(parse_error(
                format!("theta[{i}]"),
                format!("exponent {t} outside (0, 1)"),
            ));
        }
    }

    let experiments = match obj.remove("experiments") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, item)| {
                let path = format!("experiments[{i}]");
                let Value::Object(mut e) = item else {
                    return Err(parse_error(path, "expected an object with `kind`"));
                };
                let kind = match e.remove("kind") {
                    Some(Value::String(k)) => k,
                    _ => return Err(parse_error(format!("{path}.kind"), "missing field `kind`")),
                };
                let params = e.remove("params").unwrap_or_else(|| json!({}));
                if let Some(extra) = e.keys().next() {
                    return Err(parse_error(
                        format!("{path}.{extra}"),
                        "unknown field; expected kind, params",
                    ));
                }
                Experiment::from_parts(&kind, params, &path)
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(parse_error("experiments", "expected a list")),
    };

    let output = match obj.remove("output") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(parse_error("output", "expected a path string")),
    };
    let seed = match obj.remove("seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| parse_error("seed", "expected a non-negative integer"))?,
    };

    Ok(ExperimentConfig {
        space,
        theta,
        experiments,
        output,
        seed,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

/// One experiment's outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub index: usize,
    pub kind: String,
    pub inputs: Value,
    pub metrics: Value,
    /// `None` for diagnostic experiments.
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: Value,
    pub experiments: Vec<ExperimentRecord>,
    pub all_pass: bool,
    /// Everything that may differ between identical runs.
    pub metadata: Value,
}

struct Table {
    name: String,
    body: String,
}

struct Outcome {
    metrics: Value,
    pass: Option<bool>,
    tables: Vec<Table>,
}

struct Context {
    space: Space,
    dec: SpectralDecomposition,
    thetas: Vec<f64>,
}

fn experiment_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        if v.iter().any(|&x| x != v[0]) {
            return v;
        }
    }
}

fn fmt_csv(rows: &[Vec<String>], header: &str) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn e(x: f64) -> String {
    format!("{x:e}")
}

fn tight_quad() -> QuadratureSpec {
    QuadratureSpec {
        abs_tol: 1e-13,
        rel_tol: 1e-13,
        max_intervals: 5000,
    }
}

fn relative_quad(tol: f64) -> QuadratureSpec {
    QuadratureSpec {
        abs_tol: 0.0,
        rel_tol: tol,
        max_intervals: 5000,
    }
}

fn log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    fit_line(&pts).map(|l| l.0)
}

fn heat_properties(ctx: &Context, p: &HeatParams) -> crate::Result<Outcome> {
    let mu = ctx.space.mu();
    let mut rows = Vec::new();
    let mut markov_max: f64 = 0.0;
    let mut semigroup_max: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut symmetric = true;
    let mut spectral_gap: f64 = 0.0;
    for &t in &p.times {
        let k = heat_kernel(&ctx.space, t)?;
        let markov = k.markov_error(mu);
        let semi = semigroup_error(&ctx.space, t, t)?;
        let spectral = ctx.dec.heat_kernel_spectral(t)?;
        let agreement = (&spectral.entries - &k.entries).amax();
        markov_max = markov_max.max(markov);
        semigroup_max = semigroup_max.max(semi);
        min_entry = min_entry.min(k.min_entry());
        symmetric &= k.is_symmetric();
        spectral_gap = spectral_gap.max(agreement);
        rows.push(vec![e(t), e(markov), e(semi), e(k.min_entry()), e(agreement)]);
    }
    let mut subordination_max: f64 = 0.0;
    for &t in &p.subordination_times {
        subordination_max =
            subordination_max.max(ctx.dec.subordination_check(t, &QuadratureSpec::with_abs_tol(1e-10))?);
    }
    let pass = markov_max <= 1e-10
        && semigroup_max <= 1e-10
        && symmetric
        && min_entry > 0.0
        && subordination_max <= 1e-6;
    Ok(Outcome {
        metrics: json!({
            "markov_max_err": markov_max,
            "semigroup_max_err": semigroup_max,
            "symmetric": symmetric,
            "min_entry": min_entry,
            "spectral_sum_max_diff": spectral_gap,
            "subordination_max_err": subordination_max,
        }),
        pass: Some(pass),
        tables: vec![Table {
            name: "heat".into(),
            body: fmt_csv(&rows, "t,markov_err,semigroup_err,min_entry,spectral_sum_diff"),
        }],
    })
}

fn energy_comparability(ctx: &Context, p: &ComparabilityParams, seed: u64) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let mut per_theta = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for (i, &theta) in ctx.thetas.iter().enumerate() {
        let mut spreads = Vec::new();
        let mut reports = Vec::new();
        for reseed in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(experiment_seed(seed, 100 * i + reseed as usize));
            let family: Vec<Vec<f64>> = (0..p.family_size)
                .map(|_| random_vector(&mut rng, n, -1.0, 1.0))
                .collect();
            let rep = comparability_report(&ctx.space, &ctx.dec, theta, &family)?;
            spreads.push(rep.spread());
            rows.push(vec![e(theta), reseed.to_string(), e(rep.ratio_min), e(rep.ratio_max), e(rep.spread())]);
            reports.push(rep);
        }
        let change = (spreads[0] / spreads[1] - 1.0).abs();
        let bounds = comparability_bounds(&ctx.space, &ctx.dec, theta)?;
        let enclosed = reports.iter().all(|r| {
            r.ratio_min >= bounds.lower * (1.0 - 1e-10) && r.ratio_max <= bounds.upper * (1.0 + 1e-10)
        });
        let ok = reports
            .iter()
            .all(|r| r.ratio_min > 0.0 && r.ratio_max.is_finite())
            && enclosed
            && change <= p.spread_tolerance;
        pass &= ok;
        per_theta.push(json!({
            "theta": theta,
            "reports": reports,
            "exact_bounds": bounds,
            "spread_change": change,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "per_theta": per_theta }),
        pass: Some(pass),
        tables: vec![Table {
            name: "comparability".into(),
            body: fmt_csv(&rows, "theta,reseed,ratio_min,ratio_max,spread"),
        }],
    })
}

fn dtn_convergence(ctx: &Context, p: &DtnParams, seed: u64) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_vector(&mut rng, n, -1.0, 1.0);
    let ymax = p.ymax.unwrap_or_else(|| default_ymax(&ctx.dec));
    let quad = tight_quad();
    let mut per_theta = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for &theta in &ctx.thetas {
        let target = ctx.dec.frac_apply(theta, &f)?;
        let scale = target.amax();
        let mut y1s = Vec::new();
        let mut errs = Vec::new();
        for &m in &p.cells {
            let grid = HalfSpaceGrid::new(theta, ymax, m, GridLayout::geometric())?;
            let u = poisson_extend(&ctx.dec, theta, &f, &grid, &quad)?;
            let d = dtn_apply(&u, p.stencil)?;
            let err = (d - &target).amax();
            y1s.push(grid.ys()[1]);
            errs.push(err);
            rows.push(vec![e(theta), m.to_string(), e(grid.ys()[1]), e(err), e(err / scale)]);
        }
        let slope = log_slope(&y1s, &errs);
        let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
        let final_rel = errs.last().copied().unwrap_or(f64::NAN) / scale;
        let ok = decreasing && slope.is_some_and(|s| s >= p.min_slope) && final_rel <= p.tolerance;
        pass &= ok;
        per_theta.push(json!({
            "theta": theta,
            "y1": y1s,
            "max_err": errs,
            "slope": slope,
            "decreasing": decreasing,
            "final_relative_err": final_rel,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "ymax": ymax, "per_theta": per_theta }),
        pass: Some(pass),
        tables: vec![Table {
            name: "dtn".into(),
            body: fmt_csv(&rows, "theta,cells,y1,max_err,relative_err"),
        }],
    })
}

fn energy_identity(ctx: &Context, p: &EnergyIdentityParams) -> crate::Result<Outcome> {
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut pass = true;
    for &theta in &ctx.thetas {
        let d = dtn_constant(theta);
        for &lambda in &p.lambdas {
            let value = mode_energy(lambda, theta, &relative_quad(1e-10), &relative_quad(1e-13))?;
            let inverse = lambda.powf(theta) / d;
            let direct = lambda.powf(theta) * d;
            let err_inverse = (value - inverse).abs() / inverse;
            let err_direct = (value - direct).abs() / direct;
            pass &= err_inverse <= p.tolerance;
            rows.push(vec![e(theta), e(lambda), e(value), e(inverse), e(direct)]);
            entries.push(json!({
                "theta": theta,
                "lambda": lambda,
                "energy": value,
                "lambda_pow_over_d": inverse,
                "relative_err": err_inverse,
                "d_times_lambda_pow": direct,
                "relative_err_d_times": err_direct,
            }));
        }
    }
    Ok(Outcome {
        metrics: json!({ "modes": entries }),
        pass: Some(pass),
        tables: vec![Table {
            name: "mode_energy".into(),
            body: fmt_csv(&rows, "theta,lambda,energy,lambda_pow_over_d,d_times_lambda_pow"),
        }],
    })
}

fn problem_for(ctx: &Context, theta: f64, omega: &OmegaSpec, f: Vec<f64>) -> crate::Result<DirichletProblem> {
    let space = std::sync::Arc::new(ctx.space.clone());
    let dec = std::sync::Arc::new(ctx.dec.clone());
    let form = std::sync::Arc::new(FracEnergyForm::new(&ctx.dec, theta)?);
    DirichletProblem::with_parts(space, dec, form, omega.mask(&ctx.space)?, f)
}

fn dirichlet_routes(ctx: &Context, p: &RoutesParams, seed: u64) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_vector(&mut rng, n, -1.0, 1.0);
    let iter = IterSpec::default();
    let mut per_theta = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for &theta in &ctx.thetas {
        let problem = problem_for(ctx, theta, &p.omega, f.clone())?;
        let osc = problem.data_oscillation();
        let spectral = solve_spectral(&problem)?;
        let gap_of = |cells: usize| -> crate::Result<(f64, f64, usize)> {
            let grid = default_extension_grid(&problem, cells)?;
            let sol = solve_extension(&problem, &grid, &iter)?;
            let gap = sol
                .u
                .iter()
                .zip(&spectral.u)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((gap, sol.residual, sol.iterations))
        };
        let mut gaps = Vec::new();
        for &m in &p.cells {
            let (gap, residual, iterations) = gap_of(m)?;
            gaps.push(gap);
            rows.push(vec![e(theta), m.to_string(), e(gap), e(residual), iterations.to_string()]);
        }
        let default_gap = match p.cells.iter().position(|&m| m == DEFAULT_EXTENSION_CELLS) {
            Some(i) => gaps[i],
            None => gap_of(DEFAULT_EXTENSION_CELLS)?.0,
        };
        let inv: Vec<f64> = p.cells.iter().map(|&m| 1.0 / m as f64).collect();
        let slope = log_slope(&inv, &gaps);
        // below this the gap is truncation and solver noise
        let floor = 1e-8 * osc.max(f64::MIN_POSITIVE);
        let at_floor = gaps.iter().all(|&g| g <= floor);
        let contracting = at_floor || slope.is_some_and(|s| s >= p.min_slope);

        let grid = default_extension_grid(&problem, DEFAULT_EXTENSION_CELLS)?;
        let uniq = uniqueness_check(&problem, &grid, &iter)?;
        let comp = competitor_check(&spectral, &problem, p.competitors, seed ^ 0x5eed);
        let ok = default_gap <= p.tolerance * osc
            && contracting
            && uniq.positive_definite
            && uniq.traces_agree
            && comp.violations == 0
            && spectral.scaled_residual <= 1e-9;
        pass &= ok;
        per_theta.push(json!({
            "theta": theta,
            "data_oscillation": osc,
            "cells": p.cells,
            "gaps": gaps,
            "default_gap": default_gap,
            "slope": slope,
            "at_floor": at_floor,
            "spectral": spectral,
            "uniqueness": uniq,
            "competitors": comp,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "per_theta": per_theta }),
        pass: Some(pass),
        tables: vec![Table {
            name: "routes".into(),
            body: fmt_csv(&rows, "theta,cells,gap,residual,iterations"),
        }],
    })
}

fn max_principle_batch(ctx: &Context, p: &MaxPrincipleParams, seed: u64) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let mut per_theta = Vec::new();
    let mut pass = true;
    for (i, &theta) in ctx.thetas.iter().enumerate() {
        let base = problem_for(ctx, theta, &p.omega, vec![0.0; n])?;
        let mut violations = 0;
        let mut not_strict = 0;
        let mut worst_excess = f64::NEG_INFINITY;
        for s in 0..p.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(experiment_seed(seed, 1000 * i + s));
            let problem = base.with_data(random_vector(&mut rng, n, -1.0, 1.0))?;
            let sol = solve_spectral(&problem)?;
            let mp = maximum_principle_check(&sol, &problem);
            let strong = strong_maximum_check(&[(&problem, &sol)]);
            worst_excess = worst_excess
                .max(mp.inside_max - mp.data_max)
                .max(mp.data_min - mp.inside_min);
            violations += usize::from(!mp.holds);
            not_strict += usize::from(!strong.all_hold);
        }
        let ok = violations == 0 && not_strict == 0;
        pass &= ok;
        per_theta.push(json!({
            "theta": theta,
            "seeds": p.seeds,
            "violations": violations,
            "strong_failures": not_strict,
            "worst_excess": worst_excess,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "per_theta": per_theta }),
        pass: Some(pass),
        tables: Vec::new(),
    })
}

fn harnack_scan_exp(ctx: &Context, p: &HarnackParams, seed: u64) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_vector(&mut rng, n, 0.0, 1.0);
    let mut per_theta = Vec::new();
    let mut harnack_rows = Vec::new();
    let mut holder_rows = Vec::new();
    for &theta in &ctx.thetas {
        let problem = problem_for(ctx, theta, &p.omega, f.clone())?;
        let sol = solve_spectral(&problem)?;
        let scan = harnack_scan(&sol, &problem, p.radius)?;
        for h in &scan {
            harnack_rows.push(vec![e(theta), h.center.to_string(), e(h.radius), e(h.quotient)]);
        }
        let holder = match holder_estimate(&sol, &problem) {
            Ok(fit) => {
                for (lr, lo) in &fit.points {
                    holder_rows.push(vec![e(theta), e(*lr), e(*lo)]);
                }
                json!({
                    "alpha_fit": if fit.alpha_fit.is_finite() { json!(fit.alpha_fit) } else { json!("inf") },
                    "r2": fit.r2,
                })
            }
            Err(err) => json!({ "error": err.to_string() }),
        };
        let max_quotient = scan.iter().map(|h| h.quotient).fold(f64::NAN, f64::max);
        per_theta.push(json!({
            "theta": theta,
            "balls": scan.len(),
            "max_quotient": if scan.is_empty() { Value::Null } else { json!(max_quotient) },
            "holder": holder,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "per_theta": per_theta }),
        pass: None,
        tables: vec![
            Table {
                name: "harnack".into(),
                body: fmt_csv(&harnack_rows, "theta,center,radius,quotient"),
            },
            Table {
                name: "holder".into(),
                body: fmt_csv(&holder_rows, "theta,log_r,log_oscillation"),
            },
        ],
    })
}

fn modulus_check(ctx: &Context, p: &ModulusParams) -> crate::Result<Outcome> {
    let n = ctx.space.n();
    let subset = p.subset.clone().unwrap_or_else(|| (0..n.div_ceil(2)).collect());
    let mass: f64 = subset.iter().filter(|&&x| x < n).map(|&x| ctx.space.mu()[x]).sum();
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut pass = true;
    for &theta in &ctx.thetas {
        let a = 1.0 - 2.0 * theta;
        for &h in &p.heights {
            let lim = vertical_modulus_limit(&ctx.space, &subset, h, theta)?;
            let rel = (lim.limit - lim.exact).abs() / lim.exact;
            let unit = mass / h.powf(1.0 - a);
            let lower = (1.0 - a) * unit;
            let upper = unit / (1.0 + a);
            // the extrapolated limit carries the refinement tolerance; the raw
            // finest-grid optimum must sit in the bracket to rounding
            let finest = lim.levels.last().map(|l| l.1).unwrap_or(f64::NAN);
            let slack = p.tolerance * unit;
            let inside = lim.limit >= lower - slack && lim.limit <= upper + slack;
            let raw_inside = finest >= lower * (1.0 - 1e-12) && finest <= upper * (1.0 + 1e-12);
            let ok = rel <= p.tolerance && inside && raw_inside;
            pass &= ok;
            rows.push(vec![e(theta), e(a), e(h), e(lim.limit), e(lim.exact), e(rel)]);
            entries.push(json!({
                "theta": theta,
                "a": a,
                "h": h,
                "limit": lim.limit,
                "exact": lim.exact,
                "relative_err": rel,
                "bracket": [lower, upper],
                "inside_bracket": inside,
                "finest_numeric": finest,
                "finest_inside_bracket": raw_inside,
                "pass": ok,
            }));
        }
    }
    Ok(Outcome {
        metrics: json!({ "subset": subset, "entries": entries }),
        pass: Some(pass),
        tables: vec![Table {
            name: "modulus".into(),
            body: fmt_csv(&rows, "theta,a,h,limit,exact,relative_err"),
        }],
    })
}

fn codim_check(ctx: &Context, p: &CodimParams) -> crate::Result<Outcome> {
    let space = &ctx.space;
    let n = space.n();
    let radii = match &p.radii {
        Some(r) => r.clone(),
        None => {
            let mut r: Vec<f64> = space.dist().iter().copied().filter(|&d| d > 0.0).collect();
            r.sort_by(f64::total_cmp);
            r.dedup();
            let halves: Vec<f64> = r.iter().map(|d| 0.5 * d).collect();
            r.extend(halves);
            r.push(1e-6);
            r.sort_by(f64::total_cmp);
            r.dedup();
            r
        }
    };
    let ymax = radii.iter().copied().fold(1.0, f64::max);
    let mut per_theta = Vec::new();
    let mut pass = true;
    for &theta in &ctx.thetas {
        let grid = HalfSpaceGrid::new(theta, ymax, p.cells, GridLayout::geometric())?;
        let mut worst: f64 = 0.0;
        for x in 0..n {
            for &r in &radii {
                let c = codim_ball_check(space, &grid, x, r)?;
                worst = worst.max((c.lhs - c.rhs).abs() / c.rhs.abs().max(f64::MIN_POSITIVE));
            }
        }
        let ok = worst <= p.tolerance;
        pass &= ok;
        per_theta.push(json!({
            "theta": theta,
            "a": grid.a(),
            "max_relative_diff": worst,
            "pass": ok,
        }));
    }
    Ok(Outcome {
        metrics: json!({ "radii": radii, "per_theta": per_theta }),
        pass: Some(pass),
        tables: Vec::new(),
    })
}

fn run_one(ctx: &Context, exp: &Experiment, seed: u64) -> crate::Result<Outcome> {
    match exp {
        Experiment::HeatProperties(p) => heat_properties(ctx, p),
        Experiment::EnergyComparability(p) => energy_comparability(ctx, p, seed),
        Experiment::DtnConvergence(p) => dtn_convergence(ctx, p, seed),
        Experiment::EnergyIdentity(p) => energy_identity(ctx, p),
        Experiment::DirichletRoutes(p) => dirichlet_routes(ctx, p, seed),
        Experiment::MaxPrincipleBatch(p) => max_principle_batch(ctx, p, seed),
        Experiment::HarnackScan(p) => harnack_scan_exp(ctx, p, seed),
        Experiment::ModulusCheck(p) => modulus_check(ctx, p),
        Experiment::CodimCheck(p) => codim_check(ctx, p),
    }
}

fn io_error(path: &Path, err: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

/// Executes every experiment and writes `report.json` and the CSV tables
/// under the output directory. Experiments run on a pool of `threads`
/// workers; records are assembled in declaration order.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let started = Instant::now();
    let out = opts
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| parse_error("output", "no output directory given"))?;
    let seed = opts.seed.unwrap_or(config.seed);
    let space = config.space.build().map_err(|e| parse_error("space", e))?;
    let dec = SpectralDecomposition::new(&space, DEFAULT_EIGENTOLERANCE)
        .map_err(|e| parse_error("space", e))?;
    let ctx = Context {
        space,
        dec,
        thetas: config.theta.clone(),
    };

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = opts.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| parse_error("threads", e))?
    };
    let results: Vec<(crate::Result<Outcome>, f64)> = pool.install(|| {
        use rayon::prelude::*;
        config
            .experiments
            .par_iter()
            .enumerate()
            .map(|(i, exp)| {
                let t0 = Instant::now();
                let r = run_one(&ctx, exp, experiment_seed(seed, i));
                (r, t0.elapsed().as_secs_f64())
            })
            .collect()
    });

    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for (i, (exp, (result, secs))) in config.experiments.iter().zip(results).enumerate() {
        let kind = exp.kind();
        timings.push(json!({ "index": i, "kind": kind, "wall_time_s": secs }));
        let record = match result {
            Ok(outcome) => {
                let mut tables = Vec::new();
                for t in outcome.tables {
                    let name = format!("{i:02}_{kind}_{}.csv", t.name);
                    let path = out.join(&name);
                    fs::write(&path, t.body).map_err(|e| io_error(&path, e))?;
                    tables.push(name);
                }
                ExperimentRecord {
                    index: i,
                    kind: kind.into(),
                    inputs: exp.params_value(),
                    metrics: outcome.metrics,
                    pass: outcome.pass,
                    error: None,
                    tables,
                }
            }
            Err(err) => ExperimentRecord {
                index: i,
                kind: kind.into(),
                inputs: exp.params_value(),
                metrics: Value::Object(Map::new()),
                pass: Some(false),
                error: Some(err.to_string()),
                tables: Vec::new(),
            },
        };
        records.push(record);
    }

    let mut echoed = config.clone();
    echoed.output = None;
    echoed.seed = seed;
    let generated = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let report = Report {
        schema_version: SCHEMA_VERSION,
        config: serde_json::to_value(&echoed).expect("config serializes"),
        all_pass: records.iter().all(|r| r.pass != Some(false)),
        experiments: records,
        metadata: json!({
            "generated_at_unix": generated,
            "threads": pool.current_num_threads(),
            "wall_time_s": started.elapsed().as_secs_f64(),
            "experiment_wall_times": timings,
            "output": out.display().to_string(),
        }),
    };
    let path = out.join("report.json");
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, body + "\n").map_err(|e| io_error(&path, e))?;
    Ok(report)
}

/// Failure summary for a finished report, if any assertive check failed.
pub fn failures(report: &Report) -> Option<CliError> {
    let failed: Vec<String> = report
        .experiments
        .iter()
        .filter(|r| r.pass == Some(false))
        .map(|r| format!("{}#{}", r.kind, r.index))
        .collect();
    if failed.is_empty() {
        return None;
    }
    Some(CliError::ExperimentFailure {
        failed: failed.len(),
        total: report.experiments.iter().filter(|r| r.pass.is_some()).count(),
        names: failed.join(", "),
    })
}

/// The report with its metadata removed, as compared across runs.
pub fn deterministic_view(report_json: &str) -> serde_json::Result<String> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Value::Object(m) = &mut v {
        m.remove("metadata");
    }
    let sorted: BTreeMap<String, Value> = match v {
        Value::Object(m) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    serde_json::to_string(&sorted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_and_defaults() {
        let c = parse_config(r#"{"space": {"kind": "path", "params": {"n": 8}}}"#).unwrap();
        assert_eq!(c.theta, vec![0.5]);
        assert!(c.experiments.is_empty());
        assert_eq!(c.seed, 0);
        let c = parse_config(
            r#"{"space": {"kind": "path", "params": {"n": 8}}, "theta": [0.25, 0.75],
                "experiments": [{"kind": "heat_properties"}, {"kind": "dtn_convergence", "params": {"cells": [8, 10]}}]}"#,
        )
        .unwrap();
        assert_eq!(c.experiments.len(), 2);
        match &c.experiments[1] {
            Experiment::DtnConvergence(p) => {
                assert_eq!(p.cells, vec![8, 10]);
                assert_eq!(p.tolerance, 1e-2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_are_specific() {
        let err = parse_config(r#"{"space": {"kind": "path", "params": {"n": 8}}, "theta": 1.5}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("theta[0]") && err.contains("1.5"), "{err}");

        let err = parse_config(
            r#"{"space": {"kind": "path", "params": {"n": 8}}, "experiments": [{"kind": "bogus"}]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("`bogus`") && err.contains("codim_check"), "{err}");

        let err = parse_config(
            r#"{"space": {"kind": "random_geometric", "params": {"n": 8, "radius": 0.5}}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("seed"), "{err}");

        let err = parse_config("{\n  \"space\": ").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let err = parse_config(
            r#"{"space": {"kind": "path", "params": {"n": 8}}, "experiments": [{"kind": "modulus_check", "params": {"hieghts": [1]}}]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("experiments[0].params") && err.contains("hieghts"), "{err}");
    }

    #[test]
    fn inline_space_round_trip() {
        let s = Fixture::Path { n: 3 }.build().unwrap();
        let text = format!(r#"{{"space": {}}}"#, serde_json::to_string(&s).unwrap());
        let c = parse_config(&text).unwrap();
        assert_eq!(c.space.build().unwrap(), s);
    }

    #[test]
    fn normalized_config_reparses() {
        let c = ExperimentConfig::default_suite();
        let again = parse_config(&c.to_json_pretty()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn omega_auto_masks() {
        let grid = Fixture::Grid2d { rows: 4, cols: 4 }.build().unwrap();
        let m = OmegaSpec::Auto.mask(&grid).unwrap();
        let inside: Vec<usize> = (0..16).filter(|&x| m[x]).collect();
        assert_eq!(inside, vec![5, 6, 9, 10]);
        let path = Fixture::Path { n: 8 }.build().unwrap();
        let m = OmegaSpec::Auto.mask(&path).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 6);
        assert!(!m[0] && !m[7]);
    }

    #[test]
    fn empty_experiment_list_runs() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse_config(r#"{"space": {"kind": "path", "params": {"n": 4}}}"#).unwrap();
        let rep = run(
            &c,
            &RunOptions {
                out: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.all_pass && rep.experiments.is_empty());
        assert!(failures(&rep).is_none());
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn heat_experiment_on_path() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse_config(
            r#"{"space": {"kind": "path", "params": {"n": 8}}, "theta": 0.5,
                "experiments": [{"kind": "heat_properties"}]}"#,
        )
        .unwrap();
        let rep = run(
            &c,
            &RunOptions {
                out: Some(dir.path().to_path_buf()),
                threads: Some(1),
                seed: None,
            },
        )
        .unwrap();
        let rec = &rep.experiments[0];
        assert_eq!(rec.pass, Some(true), "{:?}", rec.metrics);
        assert!(rec.metrics["markov_max_err"].as_f64().unwrap() <= 1e-10);
        assert!(dir.path().join(&rec.tables[0]).exists());
    }
}
