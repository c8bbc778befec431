//! Config-driven experiment runner.
//!
//! A run reads an [`ExperimentConfig`], validates every parameter before any
//! walk is simulated, computes one set of rows per replica and writes three
//! files into the output directory:
//!
//! * `results.json`: a [`ResultRecord`] with aggregates and all rows,
//! * `rows.csv`: long-form rows `experiment,n,d,replica,statistic,value`,
//! * `manifest.json`: the config hash and a SHA-256 of each output.
//!
//! Replica `i` draws only from streams keyed by `(seed, i)`, so rows do not
//! depend on the thread count and `rows.csv` is byte-identical across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::excursion::{check_concentration, concentration_report, count_excursions_batch, sample_w, WGeometry};
use crate::latepoints::{
    calibrate_t_star, distinguisher_test, epsilon_range, hitting_uniformity_test, late_count,
    neighbor_pair_statistic, random_separated_set, sample_bernoulli_field, sample_uncovered_at,
    sample_uncovered_at_count, separation_statistic, uncovered_summary, Calibration, StartPolicy, DEFAULT_MARGIN,
};
use crate::lattice::{AnnulusSpec, Point, TorusGeometry};
use crate::oracle::{ChainProblem, DEFAULT_STATE_CAP};
use crate::potential;
use crate::rng;
use crate::stats::{self, Estimate};
use crate::walk::{antipode, hitting_time, WalkConfig, Walker};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.json";
pub const ROWS_FILE: &str = "rows.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticId {
    Constants,
    CoverTime,
    HittingTime,
    ExcursionCount,
    Uncovered,
    TauAlpha,
    Distinguish,
    Uniformity,
    NestedW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    BallBall,
    BoxBall,
    BoxBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub laziness: f64,
}

fn default_d() -> usize {
    3
}

/// Free parameters; each statistic reads the ones it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub phi: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub psi: Option<f64>,
    pub epsilon: Option<f64>,
    pub r: Option<usize>,
    #[serde(rename = "R")]
    pub big_r: Option<usize>,
    pub flavor: Option<Flavor>,
    /// Time horizon in steps.
    pub t: Option<f64>,
    pub t_star: Option<f64>,
    pub t_hat: Option<f64>,
    pub margin: Option<f64>,
    /// Size of the target set for uniformity runs.
    pub targets: Option<usize>,
    /// Samples per chain for nested counts.
    pub per_chain: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub statistic: StatisticId,
    #[serde(default)]
    pub replicas: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub params: Params,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the config without its output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn geometry(&self) -> Result<TorusGeometry> {
        TorusGeometry::new(self.geometry.n, self.geometry.d)
    }

    pub fn walk(&self) -> Result<WalkConfig> {
        let cfg = WalkConfig::new(self.geometry()?, self.seed).lazy(self.geometry.laziness);
        cfg.validate()?;
        Ok(cfg)
    }

    fn need<T: Copy>(&self, v: Option<T>, name: &str) -> Result<T> {
        v.ok_or_else(|| Error::Invalid(format!("statistic {:?} needs parameter `{name}`", self.statistic)))
    }

    fn annulus(&self) -> Result<AnnulusSpec> {
        let r = self.need(self.params.r, "r")?;
        let big_r = self.need(self.params.big_r, "R")?;
        let c = Point::origin(self.geometry.d);
        let spec = match self.params.flavor.unwrap_or(Flavor::BallBall) {
            Flavor::BallBall => AnnulusSpec::balls(c, r, big_r),
            Flavor::BoxBall => AnnulusSpec::box_in_ball(c, r, big_r),
            Flavor::BoxBox => AnnulusSpec::box_in_box(c, r, big_r),
        };
        spec.validate(&self.geometry()?)?;
        if big_r < 2 * r {
            return Err(Error::Hypothesis(format!("R = {big_r} is below 2r = {} (annulus needs R >= 2r)", 2 * r)));
        }
        Ok(spec)
    }

    fn alpha(&self) -> Result<f64> {
        let a = self.need(self.params.alpha, "alpha")?;
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Invalid(format!("alpha = {a} must be finite and non-negative")));
        }
        Ok(a)
    }

    fn gamma(&self) -> Result<Option<f64>> {
        match self.params.gamma {
            Some(g) if !(g > 0.0 && g < 1.0) => Err(Error::Invalid(format!("gamma = {g} must lie in (0, 1)"))),
            g => Ok(g),
        }
    }

    /// Checks every precondition of the requested statistic.
    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        self.walk()?;
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '"', '\n']) {
            return Err(Error::Invalid(format!("experiment name {:?} must be non-empty without / \\ , \" or newlines", self.name)));
        }
        match self.statistic {
            StatisticId::Constants | StatisticId::CoverTime | StatisticId::HittingTime => {}
            StatisticId::ExcursionCount => {
                self.annulus()?;
                let t = self.need(self.params.t, "t")?;
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::Invalid(format!("t = {t} must be finite and non-negative")));
                }
                if let Some(delta) = self.params.delta {
                    if let Some(psi) = self.params.psi {
                        check_concentration(g.n(), g.d(), self.need(self.params.r, "r")? as f64, delta, psi)?;
                    } else if !(delta > 0.0 && delta < 1.0) {
                        return Err(Error::Invalid(format!("delta = {delta} must lie in (0, 1)")));
                    }
                }
            }
            StatisticId::Uncovered | StatisticId::Distinguish => {
                self.alpha()?;
                self.gamma()?;
                if self.params.t_star.is_none() {
                    potential::star_radii(g.n(), g.d(), self.need(self.params.phi, "phi or t_star")?)?;
                }
                if self.statistic == StatisticId::Distinguish {
                    let eps = self.need(self.params.epsilon, "epsilon")?;
                    let p_d = potential::constants(g.d())?.p_d;
                    let (lo, hi) = epsilon_range(self.alpha()?, p_d);
                    if !(eps > lo && eps < hi) {
                        return Err(Error::Hypothesis(format!(
                            "epsilon = {eps} must lie in (0, 2 alpha p_d / (1 + p_d)) = (0, {hi:.4})"
                        )));
                    }
                }
            }
            StatisticId::TauAlpha => {
                let m = late_count(g.n(), g.d(), self.alpha()?);
                if m >= g.volume() {
                    return Err(Error::Invalid(format!("alpha too small: n^(d - alpha d) rounds to {m}, not below n^d")));
                }
            }
            StatisticId::Uniformity => {
                self.need(self.params.gamma, "gamma")?;
                self.gamma()?;
                if self.params.targets == Some(0) {
                    return Err(Error::Invalid("uniformity needs at least one target".into()));
                }
            }
            StatisticId::NestedW => {
                WGeometry::new(g.n(), self.need(self.params.beta, "beta")?, self.need(self.params.phi, "phi")?)?;
            }
        }
        Ok(())
    }
}

/// One value of one statistic for one replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub experiment: String,
    pub n: usize,
    pub d: usize,
    pub replica: u64,
    pub statistic: String,
    pub value: f64,
}

/// Sorted union of row batches; the result does not depend on batch order.
pub fn merge_rows(parts: Vec<Vec<ReplicaRow>>) -> Vec<ReplicaRow> {
    let mut all: Vec<ReplicaRow> = parts.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        (&a.experiment, a.n, a.d, a.replica, &a.statistic)
            .cmp(&(&b.experiment, b.n, b.d, b.replica, &b.statistic))
            .then(a.value.total_cmp(&b.value))
    });
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub latewalk: String,
    pub schema: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub statistic: StatisticId,
    pub config_hash: String,
    pub seed: u64,
    pub replicas: u64,
    pub aggregates: BTreeMap<String, Value>,
    pub rows: Vec<ReplicaRow>,
    pub wall_clock_secs: f64,
    pub versions: Versions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub experiment: String,
    pub config_hash: String,
    pub outputs: Vec<ManifestEntry>,
}

struct Rows<'a> {
    cfg: &'a ExperimentConfig,
}

impl Rows<'_> {
    fn row(&self, replica: u64, statistic: &str, value: f64) -> ReplicaRow {
        ReplicaRow {
            experiment: self.cfg.name.clone(),
            n: self.cfg.geometry.n,
            d: self.cfg.geometry.d,
            replica,
            statistic: statistic.to_string(),
            value,
        }
    }
}

fn values(rows: &[ReplicaRow], statistic: &str) -> Vec<f64> {
    rows.iter().filter(|r| r.statistic == statistic).map(|r| r.value).collect()
}

fn estimate_json(xs: &[f64]) -> Value {
    if xs.is_empty() {
        return Value::Null;
    }
    serde_json::to_value(Estimate::from_samples(xs)).expect("estimate serializes")
}

fn resolve_t_star(cfg: &ExperimentConfig, g: &TorusGeometry) -> Result<(f64, Value)> {
    if let Some(t) = cfg.params.t_star {
        return Ok((t, json!({ "source": "config", "t_star": t })));
    }
    let phi = cfg.need(cfg.params.phi, "phi or t_star")?;
    let source = if g.volume() <= DEFAULT_STATE_CAP {
        Calibration::Oracle
    } else {
        Calibration::MonteCarlo { replicas: 16, per_replica: 2000, burn_in: 20, seed: cfg.seed }
    };
    let cal = calibrate_t_star(g, phi, source)?;
    Ok((cal.t_star, serde_json::to_value(&cal)?))
}

fn compute(cfg: &ExperimentConfig) -> Result<(Vec<ReplicaRow>, BTreeMap<String, Value>)> {
    let g = cfg.geometry()?;
    let walk = cfg.walk()?;
    let mk = Rows { cfg };
    let reps = cfg.replicas;
    let mut agg = BTreeMap::new();
    let rows: Vec<ReplicaRow> = match cfg.statistic {
        StatisticId::Constants => {
            agg.insert("constants".into(), serde_json::to_value(potential::constants(g.d())?)?);
            Vec::new()
        }
        StatisticId::CoverTime => {
            let parts: Vec<Vec<ReplicaRow>> = (0..reps)
                .into_par_iter()
                .map(|r| vec![mk.row(r, "cover_time", crate::walk::cover_time(&walk, r) as f64)])
                .collect();
            merge_rows(parts)
        }
        StatisticId::HittingTime => {
            let start = g.index(&antipode(&g));
            let parts: Vec<Vec<ReplicaRow>> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut w = Walker::at(&g, walk.laziness, start, rng::stream(cfg.seed, rng::lane::WALK, r));
                    vec![mk.row(r, "hitting_time", hitting_time(&mut w, 0) as f64)]
                })
                .collect();
            merge_rows(parts)
        }
        StatisticId::ExcursionCount => {
            let spec = cfg.annulus()?;
            let t = cfg.need(cfg.params.t, "t")?;
            let counts = count_excursions_batch(&walk, &spec, t.round() as u64, reps)?;
            if let Some(delta) = cfg.params.delta {
                let t_hat = match cfg.params.t_hat {
                    Some(v) => v,
                    None => ChainProblem::new(g.clone(), walk.laziness)?.exit_chain(&spec)?.mean_duration,
                };
                agg.insert("t_hat".into(), json!(t_hat));
                agg.insert("concentration".into(), serde_json::to_value(concentration_report(&counts, t, t_hat, delta))?);
            }
            merge_rows(vec![counts.iter().enumerate().map(|(r, &c)| mk.row(r as u64, "count", c as f64)).collect()])
        }
        StatisticId::Uncovered => {
            let alpha = cfg.alpha()?;
            let gamma = cfg.gamma()?;
            let (t_star, cal) = resolve_t_star(cfg, &g)?;
            agg.insert("t_star".into(), cal);
            let fields: Vec<_> = (0..reps)
                .into_par_iter()
                .map(|r| sample_uncovered_at(&walk, r, alpha, t_star))
                .collect::<Result<_>>()?;
            agg.insert("size".into(), serde_json::to_value(uncovered_summary(&fields, g.n(), g.d(), alpha))?);
            let parts: Vec<Vec<ReplicaRow>> = fields
                .par_iter()
                .map(|f| {
                    let r = f.meta.replica;
                    let mut out = vec![
                        mk.row(r, "size", f.len() as f64),
                        mk.row(r, "neighbor_pairs", neighbor_pair_statistic(&g, &f.sites) as f64),
                    ];
                    if let Some(gm) = gamma {
                        let rep = separation_statistic(&g, &f.sites, gm);
                        out.push(mk.row(r, "z_gamma", rep.z_gamma as f64));
                        if let Some(m) = rep.min_pair_distance {
                            out.push(mk.row(r, "min_pair_distance", m));
                        }
                    }
                    out
                })
                .collect();
            let rows = merge_rows(parts);
            if gamma.is_some() {
                let z = values(&rows, "z_gamma");
                let pos = z.iter().filter(|&&v| v > 0.0).count() as f64 / z.len().max(1) as f64;
                agg.insert("z_gamma_positive_fraction".into(), json!(pos));
            }
            rows
        }
        StatisticId::TauAlpha => {
            let alpha = cfg.alpha()?;
            let parts: Vec<Vec<ReplicaRow>> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let f = sample_uncovered_at_count(&walk, r, alpha)?;
                    Ok(vec![
                        mk.row(r, "size", f.len() as f64),
                        mk.row(r, "time", f.meta.time.unwrap_or(0) as f64),
                    ])
                })
                .collect::<Result<_>>()?;
            agg.insert("target_size".into(), json!(late_count(g.n(), g.d(), alpha)));
            merge_rows(parts)
        }
        StatisticId::Distinguish => {
            let alpha = cfg.alpha()?;
            let eps = cfg.need(cfg.params.epsilon, "epsilon")?;
            let (t_star, cal) = resolve_t_star(cfg, &g)?;
            agg.insert("t_star".into(), cal);
            let p = (g.n() as f64).powf(-alpha * g.d() as f64);
            let parts: Vec<Vec<ReplicaRow>> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let walk_f = sample_uncovered_at(&walk, r, alpha, t_star)?;
                    let ref_f = sample_bernoulli_field(&g, p, cfg.seed, r)?;
                    Ok(vec![
                        mk.row(r, "walk_w", neighbor_pair_statistic(&g, &walk_f.sites) as f64),
                        mk.row(r, "reference_w", neighbor_pair_statistic(&g, &ref_f.sites) as f64),
                    ])
                })
                .collect::<Result<_>>()?;
            let rows = merge_rows(parts);
            let as_u = |s: &str| values(&rows, s).into_iter().map(|v| v as u64).collect::<Vec<_>>();
            let p_d = potential::constants(g.d())?.p_d;
            let margin = cfg.params.margin.unwrap_or(DEFAULT_MARGIN);
            let rep = distinguisher_test(&as_u("walk_w"), &as_u("reference_w"), g.n(), g.d(), alpha, eps, p_d, margin)?;
            agg.insert("distinguisher".into(), serde_json::to_value(rep)?);
            rows
        }
        StatisticId::Uniformity => {
            let gamma = cfg.need(cfg.params.gamma, "gamma")?;
            let k = cfg.params.targets.unwrap_or(8);
            let mut trng = rng::stream(cfg.seed, rng::lane::AUX, 0);
            let targets = random_separated_set(&g, k, gamma, &mut trng)?;
            let rows = if reps == 0 {
                Vec::new()
            } else {
                let rep = hitting_uniformity_test(&g, &targets, gamma, reps, &StartPolicy::UniformFar, cfg.seed)?;
                agg.insert("tv".into(), json!(rep.tv));
                agg.insert("chi_square".into(), json!(rep.chi_square));
                agg.insert("p_value".into(), json!(rep.p_value));
                rep.frequencies.iter().enumerate().map(|(i, &f)| mk.row(i as u64, "first_hit_frequency", f)).collect()
            };
            agg.insert("targets".into(), json!(targets.iter().map(|p| p.0.clone()).collect::<Vec<_>>()));
            rows
        }
        StatisticId::NestedW => {
            let wg = WGeometry::new(g.n(), cfg.need(cfg.params.beta, "beta")?, cfg.need(cfg.params.phi, "phi")?)?;
            let per = cfg.params.per_chain.unwrap_or(100);
            let rows = if reps == 0 {
                Vec::new()
            } else {
                let st = sample_w(g.d(), &wg, reps, per, 5, cfg.seed)?;
                agg.insert("w_mean".into(), serde_json::to_value(st.mean)?);
                st.samples
                    .chunks(per)
                    .enumerate()
                    .map(|(c, s)| mk.row(c as u64, "w_chain_mean", s.iter().sum::<u64>() as f64 / s.len() as f64))
                    .collect()
            };
            agg.insert("w_geometry".into(), serde_json::to_value(&wg)?);
            rows
        }
    };
    agg.insert("replicas".into(), json!(reps));
    let names: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.statistic.as_str()).collect();
    for s in names {
        agg.insert(format!("mean.{s}"), estimate_json(&values(&rows, s)));
    }
    Ok((rows, agg))
}

/// Validates and runs `cfg`, writing outputs into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<ResultRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let (rows, aggregates) = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(|| compute(cfg))?,
        None => compute(cfg)?,
    };
    let record = ResultRecord {
        experiment: cfg.name.clone(),
        statistic: cfg.statistic,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        replicas: cfg.replicas,
        aggregates,
        rows,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        versions: Versions { latewalk: env!("CARGO_PKG_VERSION").to_string(), schema: SCHEMA_VERSION },
    };
    fs::create_dir_all(out)?;
    let results = serde_json::to_vec_pretty(&record)?;
    let csv_bytes = rows_csv(&record.rows)?;
    fs::write(out.join(RESULTS_FILE), &results)?;
    fs::write(out.join(ROWS_FILE), &csv_bytes)?;
    let manifest = Manifest {
        schema: SCHEMA_VERSION,
        experiment: cfg.name.clone(),
        config_hash: record.config_hash.clone(),
        outputs: vec![
            ManifestEntry { file: RESULTS_FILE.into(), sha256: hex::encode(Sha256::digest(&results)) },
            ManifestEntry { file: ROWS_FILE.into(), sha256: hex::encode(Sha256::digest(&csv_bytes)) },
        ],
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(record)
}

const ROW_HEADER: [&str; 6] = ["experiment", "n", "d", "replica", "statistic", "value"];

pub fn rows_csv(rows: &[ReplicaRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(ROW_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads a long-form rows file; `None` if the header does not match.
pub fn read_rows(path: &Path) -> Result<Option<Vec<ReplicaRow>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(ROW_HEADER) {
        return Ok(None);
    }
    Ok(Some(rdr.deserialize().collect::<std::result::Result<_, _>>()?))
}

/// Plot-ready tables built from every rows file under a directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub files: usize,
    pub summary: Vec<SummaryRow>,
    pub scaling: Vec<ScalingRow>,
    pub exceedance: Vec<ExceedanceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub n: usize,
    pub d: usize,
    pub statistic: String,
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
}

/// Log-log slope of a statistic's mean against `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub statistic: String,
    pub d: usize,
    pub points: usize,
    pub slope: f64,
    pub slope_std_err: f64,
}

/// `P(value >= x)` at each observed `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceRow {
    pub experiment: String,
    pub statistic: String,
    pub value: f64,
    pub exceed_fraction: f64,
}

fn collect_csv(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "csv") {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Aggregates every rows file under `dir` and writes `summary.csv`,
/// `scaling.csv` and `exceedance.csv` into `out`.
pub fn report(dir: &Path, out: &Path) -> Result<ReportTables> {
    let paths = if dir.exists() { collect_csv(dir)? } else { Vec::new() };
    let mut parts = Vec::new();
    for p in &paths {
        if let Some(rows) = read_rows(p)? {
            parts.push(rows);
        }
    }
    let files = parts.len();
    let rows = merge_rows(parts);
    let mut groups: BTreeMap<(String, usize, usize, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.experiment.clone(), r.n, r.d, r.statistic.clone())).or_default().push(r.value);
    }
    let mut tables = ReportTables { files, ..Default::default() };
    let mut by_stat: BTreeMap<(String, usize), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for ((exp, n, d, stat), xs) in &groups {
        let e = Estimate::from_samples(xs);
        tables.summary.push(SummaryRow {
            experiment: exp.clone(),
            n: *n,
            d: *d,
            statistic: stat.clone(),
            count: xs.len(),
            mean: e.mean,
            std_err: e.std_err,
        });
        by_stat.entry((stat.clone(), *d)).or_default().entry(*n).or_default().extend(xs);
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        for v in sorted {
            let frac = xs.iter().filter(|&&x| x >= v).count() as f64 / xs.len() as f64;
            tables.exceedance.push(ExceedanceRow {
                experiment: exp.clone(),
                statistic: stat.clone(),
                value: v,
                exceed_fraction: frac,
            });
        }
    }
    for ((stat, d), per_n) in by_stat {
        let pts: Vec<(f64, f64)> = per_n.iter().map(|(&n, xs)| (n as f64, stats::mean(xs))).filter(|p| p.1 > 0.0).collect();
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            let fit = stats::log_log_slope(&x, &y);
            tables.scaling.push(ScalingRow {
                statistic: stat,
                d,
                points: pts.len(),
                slope: fit.slope,
                slope_std_err: fit.slope_std_err,
            });
        }
    }
    fs::create_dir_all(out)?;
    write_table(&out.join("summary.csv"), &tables.summary, &["experiment", "n", "d", "statistic", "count", "mean", "std_err"])?;
    write_table(&out.join("scaling.csv"), &tables.scaling, &["statistic", "d", "points", "slope", "slope_std_err"])?;
    write_table(&out.join("exceedance.csv"), &tables.exceedance, &["experiment", "statistic", "value", "exceed_fraction"])?;
    Ok(tables)
}

fn write_table<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const BUNDLED: &[(&str, &str)] = &[
    ("constants-d3", include_str!("../configs/constants-d3.toml")),
    ("hitting-n16", include_str!("../configs/hitting-n16.toml")),
    ("cover-n16", include_str!("../configs/cover-n16.toml")),
    ("concentration-n16", include_str!("../configs/concentration-n16.toml")),
    ("uncovered-n16", include_str!("../configs/uncovered-n16.toml")),
    ("separation-n20", include_str!("../configs/separation-n20.toml")),
    ("distinguish-n32", include_str!("../configs/distinguish-n32.toml")),
    ("uniformity-n24", include_str!("../configs/uniformity-n24.toml")),
    ("nested-w-n32", include_str!("../configs/nested-w-n32.toml")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|b| b.0).collect()
}

pub fn bundled_config(name: &str) -> Result<ExperimentConfig> {
    let text = BUNDLED
        .iter()
        .find(|b| b.0 == name)
        .map(|b| b.1)
        .ok_or_else(|| Error::Invalid(format!("no bundled config named {name:?}; known: {:?}", bundled_names())))?;
    ExperimentConfig::from_toml(text)
}

/// Shuffles row batches; used to check that merging is order-independent.
pub fn shuffled(mut parts: Vec<Vec<ReplicaRow>>, seed: u64) -> Vec<Vec<ReplicaRow>> {
    let mut g = rng::stream(seed, rng::lane::AUX, 0);
    parts.shuffle(&mut g);
    for p in parts.iter_mut() {
        p.shuffle(&mut g);
    }
    parts
}
