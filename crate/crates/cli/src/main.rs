use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use latewalk::harness::{self, ExperimentConfig, Flavor, GeometryConfig, Params, StatisticId};
use latewalk::latepoints::epsilon_range;
use latewalk::lattice::{AnnulusSpec, Point};
use latewalk::oracle::{ChainProblem, Fixture};
use latewalk::{potential, Error, Result, TorusGeometry};

/// Experiments on late points of random walk on the discrete torus.
#[derive(Parser, Debug)]
#[command(name = "latewalk", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replica count, overrides the config.
    #[arg(long, global = true)]
    replicas: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment from --config or a bundled config.
    Simulate {
        /// Name of a bundled config (see --list).
        #[arg(long, conflicts_with = "list")]
        bundled: Option<String>,
        /// List bundled configs.
        #[arg(long)]
        list: bool,
    },
    /// Print the lattice constants for dimension d as JSON.
    Constants {
        #[arg(long, default_value_t = 3)]
        d: usize,
    },
    /// Count excursions across an annulus.
    Excursions {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long = "R", default_value_t = 6)]
        big_r: usize,
        /// ball-ball, box-ball or box-box.
        #[arg(long, default_value = "box-ball")]
        flavor: String,
        /// Horizon in steps; defaults to n^d ln n.
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        psi: Option<f64>,
    },
    /// Neighbour-pair exceedance of walk late points against a Bernoulli field.
    Distinguish {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        /// Defaults to a tenth of the admissible upper end.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Sets the annulus radii used to calibrate t_*.
        #[arg(long, default_value_t = 0.6)]
        phi: f64,
        #[arg(long)]
        t_star: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// First-hit law on a random separated target set.
    Uniformity {
        #[arg(long, default_value_t = 24)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        #[arg(long, default_value_t = 8)]
        targets: usize,
    },
    /// Write exact oracle fixtures as JSON.
    OracleFixtures,
    /// Aggregate rows files under a directory into plot-ready tables.
    Report {
        /// Directory to scan; defaults to --out.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn base_config(name: String, statistic: StatisticId, n: usize, d: usize, params: Params) -> ExperimentConfig {
    ExperimentConfig {
        name,
        statistic,
        replicas: 200,
        seed: 0,
        out: None,
        geometry: GeometryConfig { n, d, laziness: 0.0 },
        params,
    }
}

/// Config from --config if given, otherwise the built-in default.
fn resolve(common: &Common, default: impl FnOnce() -> Result<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => default()?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.replicas {
        cfg.replicas = r;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

fn run(common: &Common, cfg: ExperimentConfig) -> Result<Value> {
    let out = out_dir(common, &cfg);
    let rec = harness::run(&cfg, &out, common.jobs)?;
    Ok(json!({
        "experiment": rec.experiment,
        "config_hash": rec.config_hash,
        "out": out,
        "aggregates": rec.aggregates,
    }))
}

fn flavor(s: &str) -> Result<Flavor> {
    match s {
        "ball-ball" => Ok(Flavor::BallBall),
        "box-ball" => Ok(Flavor::BoxBall),
        "box-box" => Ok(Flavor::BoxBox),
        _ => Err(Error::Invalid(format!("unknown flavor {s:?}; use ball-ball, box-ball or box-box"))),
    }
}

fn dispatch(cli: &Cli) -> Result<Value> {
    let common = &cli.common;
    match &cli.command {
        Command::Simulate { bundled, list } => {
            if *list {
                return Ok(json!(harness::bundled_names()));
            }
            let cfg = resolve(common, || match bundled {
                Some(name) => harness::bundled_config(name),
                None => Err(Error::Invalid("simulate needs --config PATH or --bundled NAME".into())),
            })?;
            run(common, cfg)
        }
        Command::Constants { d } => {
            let c = potential::constants(*d)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join(format!("constants-d{d}.json")), serde_json::to_vec_pretty(&c)?)?;
            }
            Ok(serde_json::to_value(c)?)
        }
        Command::Excursions { n, d, r, big_r, flavor: fl, t, delta, psi } => {
            let cfg = resolve(common, || {
                let horizon = t.unwrap_or_else(|| (*n as f64).powi(*d as i32) * (*n as f64).ln());
                let params = Params {
                    r: Some(*r),
                    big_r: Some(*big_r),
                    flavor: Some(flavor(fl)?),
                    t: Some(horizon),
                    delta: *delta,
                    psi: *psi,
                    ..Params::default()
                };
                Ok(base_config(format!("excursions-n{n}"), StatisticId::ExcursionCount, *n, *d, params))
            })?;
            run(common, cfg)
        }
        Command::Distinguish { alpha, n, d, epsilon, phi, t_star, margin } => {
            let cfg = resolve(common, || {
                let eps = match epsilon {
                    Some(e) => *e,
                    None => epsilon_range(*alpha, potential::constants(*d)?.p_d).1 / 10.0,
                };
                let params = Params {
                    alpha: Some(*alpha),
                    epsilon: Some(eps),
                    phi: Some(*phi),
                    t_star: *t_star,
                    margin: *margin,
                    ..Params::default()
                };
                Ok(base_config(format!("distinguish-n{n}-a{alpha}"), StatisticId::Distinguish, *n, *d, params))
            })?;
            run(common, cfg)
        }
        Command::Uniformity { n, d, gamma, targets } => {
            let cfg = resolve(common, || {
                let params = Params { gamma: Some(*gamma), targets: Some(*targets), ..Params::default() };
                let mut c = base_config(format!("uniformity-n{n}"), StatisticId::Uniformity, *n, *d, params);
                c.replicas = 100_000;
                Ok(c)
            })?;
            run(common, cfg)
        }
        Command::OracleFixtures => oracle_fixtures(common.out.clone().unwrap_or_else(|| PathBuf::from("fixtures"))),
        Command::Report { input } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let dir = input.clone().unwrap_or_else(|| out.clone());
            let t = harness::report(&dir, &out)?;
            Ok(json!({
                "files": t.files,
                "summary_rows": t.summary.len(),
                "scaling": t.scaling,
                "out": out,
            }))
        }
    }
}

fn oracle_fixtures(out: PathBuf) -> Result<Value> {
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut save = |name: &str, f: Fixture| -> Result<()> {
        std::fs::write(out.join(name), serde_json::to_vec_pretty(&f)?)?;
        written.push(name.to_string());
        Ok(())
    };

    let g4 = TorusGeometry::new(4, 3)?;
    let p4 = ChainProblem::new(g4.clone(), 0.0)?;
    let (m, res) = p4.exact_expected_hitting_time(&[0])?;
    let mean = m.iter().sum::<f64>() / g4.volume() as f64;
    save(
        "hitting-time-n4.json",
        Fixture::new(json!({"n": 4, "d": 3, "target": [0, 0, 0], "start": "uniform"}), json!(mean), res),
    )?;

    let g16 = TorusGeometry::new(16, 3)?;
    let p16 = ChainProblem::new(g16.clone(), 0.0)?;
    let c = Point(vec![8, 8, 8]);
    let spec = AnnulusSpec::balls(c.clone(), 2, 6);
    let chain = p16.exit_chain(&spec)?;
    let ci = g16.index(&c);
    let (_, single) = chain.hit_probability(&p16, &[ci])?;
    let nb = g16.index(&Point(vec![9, 8, 8]));
    let (_, pair) = chain.hit_probability(&p16, &[ci, nb])?;
    save(
        "excursion-hit-n16.json",
        Fixture::new(
            json!({"n": 16, "d": 3, "annulus": "ball-ball", "r": 2, "R": 6, "targets": "center"}),
            json!({"single": single, "pair": pair, "mean_duration": chain.mean_duration}),
            chain.residual,
        ),
    )?;
    Ok(json!({"out": out, "fixtures": written}))
}
