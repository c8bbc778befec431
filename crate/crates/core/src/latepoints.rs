//! Uncovered-set samplers, reference fields and the statistics that tell
//! them apart.

use std::collections::HashMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excursion::{estimate_t_rr, nested_stop_count, TileClock};
use crate::lattice::{round_half_up, AnnulusSpec, Decomposition, Point, TorusGeometry};
use crate::oracle::ChainProblem;
use crate::potential;
use crate::rng::{self, Rng};
use crate::stats::{self, Estimate};
use crate::walk::{run_tracked, run_until_uncovered_count, VisitTracker, WalkConfig, Walker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    WalkUncovered,
    WalkUncoveredExcursionStopped,
    WalkUncoveredAtCount,
    Bernoulli,
    UniformSubset,
}

impl FieldKind {
    fn code(self) -> u8 {
        match self {
            FieldKind::WalkUncovered => 0,
            FieldKind::WalkUncoveredExcursionStopped => 1,
            FieldKind::WalkUncoveredAtCount => 2,
            FieldKind::Bernoulli => 3,
            FieldKind::UniformSubset => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => FieldKind::WalkUncovered,
            1 => FieldKind::WalkUncoveredExcursionStopped,
            2 => FieldKind::WalkUncoveredAtCount,
            3 => FieldKind::Bernoulli,
            4 => FieldKind::UniformSubset,
            _ => return Err(Error::Format(format!("unknown field kind code {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    /// `α` for walk fields, `p` for Bernoulli, `m` for uniform subsets.
    pub parameter: f64,
    pub seed: u64,
    pub replica: u64,
    /// Walk time the field was read at.
    pub time: Option<u64>,
}

/// A random subset of the torus, stored as sorted site indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub n: usize,
    pub d: usize,
    pub kind: FieldKind,
    pub sites: Vec<usize>,
    pub meta: FieldMeta,
}

impl FieldSample {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn geometry(&self) -> Result<TorusGeometry> {
        TorusGeometry::new(self.n, self.d)
    }
}

/// `max(1, round(n^{d - αd}))`.
pub fn late_count(n: usize, d: usize, alpha: f64) -> usize {
    round_half_up((n as f64).powf(d as f64 * (1.0 - alpha))).max(1)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("alpha must be a finite non-negative number, got {alpha}")));
    }
    Ok(())
}

/// `U(round(α t_*))` for a stationary-start walk.
pub fn sample_uncovered_at(cfg: &WalkConfig, replica: u64, alpha: f64, t_star: f64) -> Result<FieldSample> {
    cfg.validate()?;
    check_alpha(alpha)?;
    if !(t_star >= 0.0 && t_star.is_finite()) {
        return Err(Error::Invalid(format!("t_* must be finite and non-negative, got {t_star}")));
    }
    let steps = (alpha * t_star).round() as u64;
    let (_, tr) = run_tracked(cfg, replica, steps, false);
    Ok(walk_field(cfg, replica, FieldKind::WalkUncovered, alpha, steps, tr.uncovered(cfg.geometry.volume())))
}

pub fn sample_uncovered_batch(cfg: &WalkConfig, alpha: f64, t_star: f64, replicas: u64) -> Result<Vec<FieldSample>> {
    (0..replicas).into_par_iter().map(|r| sample_uncovered_at(cfg, r, alpha, t_star)).collect()
}

/// Uncovered set at `τ_α`, the first time exactly `late_count` sites remain.
pub fn sample_uncovered_at_count(cfg: &WalkConfig, replica: u64, alpha: f64) -> Result<FieldSample> {
    cfg.validate()?;
    check_alpha(alpha)?;
    let g = &cfg.geometry;
    let m = late_count(g.n(), g.d(), alpha);
    let (w, sites) = run_until_uncovered_count(cfg, replica, m)?;
    Ok(walk_field(cfg, replica, FieldKind::WalkUncoveredAtCount, alpha, w.time(), sites))
}

fn walk_field(cfg: &WalkConfig, replica: u64, kind: FieldKind, alpha: f64, time: u64, sites: Vec<usize>) -> FieldSample {
    FieldSample {
        n: cfg.geometry.n(),
        d: cfg.geometry.d(),
        kind,
        sites,
        meta: FieldMeta { parameter: alpha, seed: cfg.seed, replica, time: Some(time) },
    }
}

/// Box clocks for the excursion-stopped field: every box stops after
/// `stop` thin excursions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppedPlan {
    pub decomposition: Decomposition,
    pub stop: u64,
}

impl StoppedPlan {
    /// Stop count `floor(α t_* / ((1 + δ/4) T^{□,□}))`.
    pub fn new(decomposition: Decomposition, alpha: f64, t_star: f64, t_thin: f64, delta: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(t_thin > 0.0 && delta >= 0.0) {
            return Err(Error::Invalid(format!("need T > 0 and delta >= 0, got T = {t_thin}, delta = {delta}")));
        }
        Ok(StoppedPlan { decomposition, stop: nested_stop_count(alpha * t_star, t_thin, delta / 4.0) })
    }
}

/// `U(round(α t_*))` and the excursion-stopped field `Y` read off the same
/// trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledFields {
    pub uncovered: FieldSample,
    pub stopped: FieldSample,
    /// `U(round(α t_*))` with the sites of `A` removed.
    pub uncovered_off_a: Vec<usize>,
}

impl CoupledFields {
    /// Both fields coincide off `A`.
    pub fn agree(&self) -> bool {
        self.uncovered_off_a == self.stopped.sites
    }
}

pub fn sample_uncovered_coupled(
    cfg: &WalkConfig,
    replica: u64,
    alpha: f64,
    t_star: f64,
    plan: &StoppedPlan,
) -> Result<CoupledFields> {
    cfg.validate()?;
    check_alpha(alpha)?;
    let g = &cfg.geometry;
    let dec = &plan.decomposition;
    if dec.n != g.n() || dec.d != g.d() {
        return Err(Error::Invalid(format!(
            "decomposition is for n = {}, d = {} but the walk runs on n = {}, d = {}",
            dec.n,
            dec.d,
            g.n(),
            g.d()
        )));
    }
    let vol = g.volume();
    let horizon = (alpha * t_star).round() as u64;
    let mut w = Walker::new(cfg, replica);
    let mut plain = VisitTracker::new(vol, false);
    let mut early = VisitTracker::new(vol, false);
    let mut clock = TileClock::new(g, dec, plan.stop);
    let tile: Vec<u32> = (0..vol).map(|s| dec.tile_of(g, s) as u32).collect();
    let observe = |t: u64, s: usize, clock: &mut TileClock, plain: &mut VisitTracker, early: &mut VisitTracker| {
        if t <= horizon {
            plain.observe(s, t);
        }
        if clock.frozen_at(tile[s] as usize).is_none() {
            early.observe(s, t);
        }
        clock.feed(t, s);
    };
    observe(0, w.site(), &mut clock, &mut plain, &mut early);
    while w.time() < horizon || !clock.all_frozen() {
        let s = w.step();
        observe(w.time(), s, &mut clock, &mut plain, &mut early);
    }
    let stopped_sites: Vec<usize> = early.uncovered(vol).into_iter().filter(|&s| !dec.in_a(g, s)).collect();
    let last = (0..dec.tiles()).filter_map(|t| clock.frozen_at(t)).max().unwrap_or(0);
    let uncovered = plain.uncovered(vol);
    Ok(CoupledFields {
        uncovered_off_a: uncovered.iter().copied().filter(|&s| !dec.in_a(g, s)).collect(),
        uncovered: walk_field(cfg, replica, FieldKind::WalkUncovered, alpha, horizon, uncovered),
        stopped: walk_field(cfg, replica, FieldKind::WalkUncoveredExcursionStopped, alpha, last, stopped_sites),
    })
}

/// The excursion-stopped field alone; sites of `A` are never included.
pub fn sample_uncovered_excursion_stopped(
    cfg: &WalkConfig,
    replica: u64,
    alpha: f64,
    t_star: f64,
    plan: &StoppedPlan,
) -> Result<FieldSample> {
    Ok(sample_uncovered_coupled(cfg, replica, alpha, t_star, plan)?.stopped)
}

/// Independent Bernoulli(`p`) membership for every site.
pub fn sample_bernoulli_field(geom: &TorusGeometry, p: f64, seed: u64, replica: u64) -> Result<FieldSample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("p = {p} is outside [0, 1]")));
    }
    let mut g = rng::stream(seed, rng::lane::FIELD, replica);
    let sites = (0..geom.volume()).filter(|_| g.random::<f64>() < p).collect();
    Ok(FieldSample {
        n: geom.n(),
        d: geom.d(),
        kind: FieldKind::Bernoulli,
        sites,
        meta: FieldMeta { parameter: p, seed, replica, time: None },
    })
}

/// Uniformly random subset of exactly `m` sites.
pub fn sample_uniform_subset(geom: &TorusGeometry, m: usize, seed: u64, replica: u64) -> Result<FieldSample> {
    let vol = geom.volume();
    if m > vol {
        return Err(Error::Invalid(format!("m = {m} exceeds the {vol} sites of the torus")));
    }
    let mut g = rng::stream(seed, rng::lane::FIELD, replica);
    let mut sites = rand::seq::index::sample(&mut g, vol, m).into_vec();
    sites.sort_unstable();
    Ok(FieldSample {
        n: geom.n(),
        d: geom.d(),
        kind: FieldKind::UniformSubset,
        sites,
        meta: FieldMeta { parameter: m as f64, seed, replica, time: None },
    })
}

/// Mean size of the uncovered set against `n^{d - αd}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncoveredSummary {
    pub size: Estimate,
    pub predicted: f64,
    /// `log_n(mean size) - (d - αd)`.
    pub log_gap: f64,
    /// `P(x ∈ U) n^{αd}`, with `P(x ∈ U) = E|U| / n^d` by transitivity.
    pub fitted_constant: f64,
}

pub fn uncovered_summary(samples: &[FieldSample], n: usize, d: usize, alpha: f64) -> UncoveredSummary {
    let sizes: Vec<f64> = samples.iter().map(|s| s.len() as f64).collect();
    let size = Estimate::from_samples(&sizes);
    let ln = (n as f64).ln();
    let expo = d as f64 * (1.0 - alpha);
    UncoveredSummary {
        size,
        predicted: (n as f64).powf(expo),
        log_gap: size.mean.ln() / ln - expo,
        fitted_constant: size.mean / (n as f64).powf(expo),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub gamma: f64,
    /// `n^γ`.
    pub radius: f64,
    /// Ordered pairs of distinct sites at distance at most `n^γ`.
    pub z_gamma: u64,
    /// Up to `MAX_REPORTED_PAIRS` offending pairs with `x < y`.
    pub violating_pairs: Vec<(usize, usize)>,
    /// `None` for fewer than two sites.
    pub min_pair_distance: Option<f64>,
}

pub const MAX_REPORTED_PAIRS: usize = 16;

/// Sites bucketed into cubic cells of side at least `reach`.
struct Buckets<'a> {
    geom: &'a TorusGeometry,
    per_axis: usize,
    cells: HashMap<usize, Vec<usize>>,
}

impl<'a> Buckets<'a> {
    fn new(geom: &'a TorusGeometry, sites: &[usize], reach: f64) -> Self {
        let n = geom.n();
        let per_axis = ((n as f64 / reach.max(1.0)).floor() as usize).clamp(1, n);
        let mut b = Buckets { geom, per_axis, cells: HashMap::new() };
        for &s in sites {
            b.cells.entry(b.cell_of(s)).or_default().push(s);
        }
        b
    }

    fn cell_coord(&self, c: usize) -> usize {
        c * self.per_axis / self.geom.n()
    }

    fn cell_of(&self, s: usize) -> usize {
        (0..self.geom.d()).fold(0, |acc, a| acc * self.per_axis + self.cell_coord(self.geom.coord(s, a)))
    }

    /// Distinct cells within one step (per axis, with wraparound) of `s`'s cell.
    fn around(&self, s: usize) -> Vec<usize> {
        let d = self.geom.d();
        let m = self.per_axis;
        let own: Vec<usize> = (0..d).map(|a| self.cell_coord(self.geom.coord(s, a))).collect();
        let mut out = vec![0usize];
        for c in own {
            let mut opts = vec![c, (c + 1) % m, (c + m - 1) % m];
            opts.sort_unstable();
            opts.dedup();
            out = out.iter().flat_map(|&acc| opts.iter().map(move |&o| acc * m + o)).collect();
        }
        out
    }

    /// Ordered pairs within `reach`, calling `f(x, y, dist2)` for each.
    fn pairs(&self, sites: &[usize], reach: f64, mut f: impl FnMut(usize, usize, usize)) {
        let lim = reach * reach + 1e-9;
        for &x in sites {
            for c in self.around(x) {
                if let Some(list) = self.cells.get(&c) {
                    for &y in list {
                        if y != x {
                            let d2 = self.geom.dist2(x, y);
                            if d2 as f64 <= lim {
                                f(x, y, d2);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dedup_sites(sites: &[usize]) -> Vec<usize> {
    let mut v = sites.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Closest pair distance, by bucketing at doubling radii.
pub fn min_pair_distance(geom: &TorusGeometry, sites: &[usize]) -> Option<f64> {
    let sites = dedup_sites(sites);
    if sites.len() < 2 {
        return None;
    }
    let max = (geom.d() as f64).sqrt() * (geom.n() / 2) as f64;
    let mut reach = 1.0;
    loop {
        let b = Buckets::new(geom, &sites, reach);
        let mut best = usize::MAX;
        b.pairs(&sites, reach, |_, _, d2| best = best.min(d2));
        if best != usize::MAX {
            return Some((best as f64).sqrt());
        }
        if reach >= max {
            unreachable!("two distinct sites lie within the torus diameter");
        }
        reach = (2.0 * reach).min(max);
    }
}

/// `Z_γ` and the closest pair distance of a site set.
pub fn separation_statistic(geom: &TorusGeometry, sites: &[usize], gamma: f64) -> SeparationReport {
    let sites = dedup_sites(sites);
    let radius = (geom.n() as f64).powf(gamma);
    let b = Buckets::new(geom, &sites, radius);
    let mut z = 0u64;
    let mut pairs = Vec::new();
    b.pairs(&sites, radius, |x, y, _| {
        z += 1;
        if x < y && pairs.len() < MAX_REPORTED_PAIRS {
            pairs.push((x, y));
        }
    });
    pairs.sort_unstable();
    SeparationReport { gamma, radius, z_gamma: z, violating_pairs: pairs, min_pair_distance: min_pair_distance(geom, &sites) }
}

/// Ordered nearest-neighbour pairs with both ends in `sites`.
pub fn neighbor_pair_statistic(geom: &TorusGeometry, sites: &[usize]) -> u64 {
    let mut member = vec![false; geom.volume()];
    sites.iter().for_each(|&s| member[s] = true);
    let mut w = 0u64;
    for (x, _) in member.iter().enumerate().filter(|(_, &m)| m) {
        w += geom.neighbors(x).filter(|&y| member[y]).count() as u64;
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherReport {
    pub alpha: f64,
    pub epsilon: f64,
    /// `n^{d - 2αd/(1+p_d) - εd}`.
    pub threshold: f64,
    pub walk_exceed: f64,
    pub reference_exceed: f64,
    pub gap: f64,
    pub margin: f64,
    pub distinguishable: bool,
}

pub const DEFAULT_MARGIN: f64 = 0.4;

/// Admissible range `(0, 2α p_d / (1 + p_d))` for `ε`.
pub fn epsilon_range(alpha: f64, p_d: f64) -> (f64, f64) {
    (0.0, 2.0 * alpha * p_d / (1.0 + p_d))
}

pub fn pair_threshold(n: usize, d: usize, alpha: f64, epsilon: f64, p_d: f64) -> f64 {
    let d = d as f64;
    (n as f64).powf(d - 2.0 * alpha * d / (1.0 + p_d) - epsilon * d)
}

/// Exceedance frequencies of the neighbour-pair count over the threshold.
#[allow(clippy::too_many_arguments)]
pub fn distinguisher_test(
    walk_w: &[u64],
    reference_w: &[u64],
    n: usize,
    d: usize,
    alpha: f64,
    epsilon: f64,
    p_d: f64,
    margin: f64,
) -> Result<DistinguisherReport> {
    let (lo, hi) = epsilon_range(alpha, p_d);
    if !(epsilon > lo && epsilon < hi) {
        return Err(Error::Hypothesis(format!(
            "epsilon = {epsilon} must lie in (0, 2 alpha p_d / (1 + p_d)) = (0, {hi:.4})"
        )));
    }
    let threshold = pair_threshold(n, d, alpha, epsilon, p_d);
    let freq = |ws: &[u64]| ws.iter().filter(|&&w| w as f64 >= threshold).count() as f64 / ws.len().max(1) as f64;
    let walk_exceed = freq(walk_w);
    let reference_exceed = freq(reference_w);
    let gap = walk_exceed - reference_exceed;
    Ok(DistinguisherReport {
        alpha,
        epsilon,
        threshold,
        walk_exceed,
        reference_exceed,
        gap,
        margin,
        distinguishable: gap >= margin,
    })
}

/// Where each first-hit trial starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPolicy {
    Fixed(Point),
    /// Uniform over sites at distance at least `n^γ` from every target.
    UniformFar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub targets: Vec<Point>,
    pub trials: u64,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub tv: f64,
    pub chi_square: f64,
    pub p_value: f64,
}

fn check_separated(geom: &TorusGeometry, targets: &[usize], gamma: f64) -> Result<f64> {
    let rho = (geom.n() as f64).powf(gamma);
    if targets.is_empty() {
        return Err(Error::Invalid("target set is empty".into()));
    }
    for (i, &a) in targets.iter().enumerate() {
        for &b in &targets[i + 1..] {
            let dist = geom.site_distance(a, b);
            if dist < rho {
                return Err(Error::Hypothesis(format!(
                    "targets {:?} and {:?} are {dist:.3} apart, closer than n^gamma = {rho:.3}",
                    geom.point(a).0,
                    geom.point(b).0
                )));
            }
        }
    }
    Ok(rho)
}

fn far_sites(geom: &TorusGeometry, targets: &[usize], rho: f64) -> Vec<usize> {
    (0..geom.volume()).filter(|&s| targets.iter().all(|&a| geom.site_distance(s, a) >= rho)).collect()
}

/// Empirical first-hit law on a separated target set against uniform.
pub fn hitting_uniformity_test(
    geom: &TorusGeometry,
    targets: &[Point],
    gamma: f64,
    trials: u64,
    start: &StartPolicy,
    seed: u64,
) -> Result<UniformityReport> {
    let idx: Vec<usize> = targets.iter().map(|p| geom.index(p)).collect();
    let rho = check_separated(geom, &idx, gamma)?;
    let far = far_sites(geom, &idx, rho);
    let fixed = match start {
        StartPolicy::Fixed(p) => {
            let s = geom.index(p);
            if far.binary_search(&s).is_err() {
                return Err(Error::Hypothesis(format!("start {:?} is closer than n^gamma = {rho:.3} to the targets", p.0)));
            }
            Some(s)
        }
        StartPolicy::UniformFar => {
            if far.is_empty() {
                return Err(Error::Hypothesis(format!("no site is at distance n^gamma = {rho:.3} from all targets")));
            }
            None
        }
    };
    let mut which = vec![usize::MAX; geom.volume()];
    idx.iter().enumerate().for_each(|(i, &s)| which[s] = i);
    let counts = (0..trials)
        .into_par_iter()
        .fold(
            || vec![0u64; idx.len()],
            |mut acc, trial| {
                let s0 = fixed.unwrap_or_else(|| {
                    let mut g = rng::stream(seed, rng::lane::START, trial);
                    far[g.random_range(0..far.len())]
                });
                let mut w = Walker::at(geom, 0.0, s0, rng::stream(seed, rng::lane::WALK, trial));
                let mut s = s0;
                while which[s] == usize::MAX {
                    s = w.step();
                }
                acc[which[s]] += 1;
                acc
            },
        )
        .reduce(|| vec![0u64; idx.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let frequencies = stats::normalize(&counts);
    let uniform = vec![1.0 / idx.len() as f64; idx.len()];
    let (chi_square, p_value) = stats::chi_square(&counts, &uniform);
    Ok(UniformityReport {
        targets: targets.to_vec(),
        trials,
        tv: stats::total_variation(&frequencies, &uniform),
        counts,
        frequencies,
        chi_square,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleUniformity {
    /// Exact first-hit law, averaged over the starts.
    pub law: Vec<f64>,
    pub tv: f64,
    /// `max_z |P(hit z first) - 1/|A||` over starts and targets.
    pub max_deviation: f64,
    pub residual: f64,
}

/// Exact counterpart of `hitting_uniformity_test`.
pub fn oracle_uniformity(
    problem: &ChainProblem,
    targets: &[Point],
    gamma: f64,
    start: &StartPolicy,
) -> Result<OracleUniformity> {
    let geom = &problem.geometry;
    let idx: Vec<usize> = targets.iter().map(|p| geom.index(p)).collect();
    let rho = check_separated(geom, &idx, gamma)?;
    let (rows, residual) = problem.hitting_distribution(&idx, &[])?;
    let starts = match start {
        StartPolicy::Fixed(p) => vec![geom.index(p)],
        StartPolicy::UniformFar => far_sites(geom, &idx, rho),
    };
    if starts.is_empty() {
        return Err(Error::Hypothesis(format!("no site is at distance n^gamma = {rho:.3} from all targets")));
    }
    let k = idx.len() as f64;
    let mut law = vec![0.0; idx.len()];
    let mut max_deviation: f64 = 0.0;
    for &s in &starts {
        for (j, row) in rows.iter().enumerate() {
            law[j] += row[s] / starts.len() as f64;
            max_deviation = max_deviation.max((row[s] - 1.0 / k).abs());
        }
    }
    let uniform = vec![1.0 / k; idx.len()];
    Ok(OracleUniformity { tv: stats::total_variation(&law, &uniform), law, max_deviation, residual })
}

/// `k` sites with pairwise distance at least `n^γ`, by rejection.
pub fn random_separated_set(geom: &TorusGeometry, k: usize, gamma: f64, rng: &mut Rng) -> Result<Vec<Point>> {
    let rho = (geom.n() as f64).powf(gamma);
    for _ in 0..1000 {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..100 * k.max(1) {
            if chosen.len() == k {
                break;
            }
            let s = rng.random_range(0..geom.volume());
            if chosen.iter().all(|&c| geom.site_distance(c, s) >= rho) {
                chosen.push(s);
            }
        }
        if chosen.len() == k {
            return Ok(chosen.into_iter().map(|s| geom.point(s)).collect());
        }
    }
    Err(Error::Hypothesis(format!("could not place {k} sites at mutual distance n^gamma = {rho:.3}")))
}

/// Inputs and value of `t_* = log(n^d) T / p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TStarCalibration {
    pub n: usize,
    pub d: usize,
    pub phi: f64,
    pub r: usize,
    pub big_r: usize,
    pub t_hat: f64,
    pub p_hat: f64,
    pub t_star: f64,
    pub exact: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Calibration {
    Oracle,
    MonteCarlo { replicas: u64, per_replica: usize, burn_in: usize, seed: u64 },
}

/// `T` and `p` for the ball annulus with radii from `φ`, then `t_*`.
pub fn calibrate_t_star(geom: &TorusGeometry, phi: f64, source: Calibration) -> Result<TStarCalibration> {
    let (r, big_r) = potential::star_radii(geom.n(), geom.d(), phi)?;
    let center = Point::origin(geom.d());
    let spec = AnnulusSpec::balls(center.clone(), r, big_r);
    spec.validate(geom)?;
    let c = geom.index(&center);
    let (t_hat, p_hat, exact) = match source {
        Calibration::Oracle => {
            let problem = ChainProblem::new(geom.clone(), 0.0)?;
            let chain = problem.exit_chain(&spec)?;
            let (_, p) = chain.hit_probability(&problem, &[c])?;
            (chain.mean_duration, p, true)
        }
        Calibration::MonteCarlo { replicas, per_replica, burn_in, seed } => {
            let cfg = WalkConfig::new(geom.clone(), seed);
            let st = estimate_t_rr(&cfg, &spec, &[c], replicas, per_replica, burn_in)?;
            (st.mean.mean, st.hit_fraction[0].mean, false)
        }
    };
    Ok(TStarCalibration {
        n: geom.n(),
        d: geom.d(),
        phi,
        r,
        big_r,
        t_hat,
        p_hat,
        t_star: potential::t_star(geom.n(), geom.d(), t_hat, p_hat)?,
        exact,
    })
}

const MAGIC: &[u8; 4] = b"LWFS";
const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 8;

/// Binary bitmap: `b"LWFS"`, version byte, `n` and `d` as little-endian
/// `u32`, kind byte, seed as little-endian `u64`, then `n^d` bits, site `i`
/// in bit `i % 8` of byte `i / 8`.
pub fn to_bitmap(field: &FieldSample) -> Vec<u8> {
    let vol = field.n.pow(field.d as u32);
    let mut out = Vec::with_capacity(HEADER_LEN + vol.div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(field.n as u32).to_le_bytes());
    out.extend_from_slice(&(field.d as u32).to_le_bytes());
    out.push(field.kind.code());
    out.extend_from_slice(&field.meta.seed.to_le_bytes());
    let start = out.len();
    out.resize(start + vol.div_ceil(8), 0);
    for &s in &field.sites {
        out[start + s / 8] |= 1 << (s % 8);
    }
    out
}

/// Inverse of `to_bitmap`; metadata other than the seed is not stored.
pub fn from_bitmap(bytes: &[u8]) -> Result<FieldSample> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a field bitmap".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported bitmap version {}", bytes[4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes")) as usize;
    let n = u32_at(5);
    let d = u32_at(9);
    let kind = FieldKind::from_code(bytes[13])?;
    let seed = u64::from_le_bytes(bytes[14..22].try_into().expect("eight bytes"));
    let vol = TorusGeometry::new(n, d)?.volume();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != vol.div_ceil(8) {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", payload.len(), vol.div_ceil(8))));
    }
    let sites = (0..vol).filter(|&s| payload[s / 8] >> (s % 8) & 1 == 1).collect();
    Ok(FieldSample { n, d, kind, sites, meta: FieldMeta { parameter: f64::NAN, seed, replica: 0, time: None } })
}

/// Sparse JSON form: metadata plus a coordinate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseField {
    pub n: usize,
    pub d: usize,
    pub kind: FieldKind,
    pub meta: FieldMeta,
    pub sites: Vec<Vec<usize>>,
}

impl SparseField {
    pub fn from_field(field: &FieldSample) -> Result<Self> {
        let g = field.geometry()?;
        Ok(SparseField {
            n: field.n,
            d: field.d,
            kind: field.kind,
            meta: field.meta.clone(),
            sites: field.sites.iter().map(|&s| g.point(s).0).collect(),
        })
    }

    pub fn into_field(self) -> Result<FieldSample> {
        let g = TorusGeometry::new(self.n, self.d)?;
        let mut sites = Vec::with_capacity(self.sites.len());
        for c in self.sites {
            if c.len() != self.d || c.iter().any(|&x| x >= self.n) {
                return Err(Error::Format(format!("{c:?} is not a site of the torus")));
            }
            sites.push(g.index(&Point(c)));
        }
        sites.sort_unstable();
        Ok(FieldSample { n: self.n, d: self.d, kind: self.kind, sites, meta: self.meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::decompose;

    fn geom(n: usize) -> TorusGeometry {
        TorusGeometry::new(n, 3).unwrap()
    }

    fn brute_z(g: &TorusGeometry, sites: &[usize], rho: f64) -> (u64, Option<f64>) {
        let mut z = 0;
        let mut best: Option<f64> = None;
        for &x in sites {
            for &y in sites {
                if x != y {
                    let dist = g.site_distance(x, y);
                    if dist <= rho + 1e-9 {
                        z += 1;
                    }
                    best = Some(best.map_or(dist, |b| b.min(dist)));
                }
            }
        }
        (z, best)
    }

    #[test]
    fn alpha_zero_leaves_all_but_start() {
        let cfg = WalkConfig::new(geom(6), 1);
        let f = sample_uncovered_at(&cfg, 0, 0.0, 1000.0).unwrap();
        let start = Walker::new(&cfg, 0).site();
        assert_eq!(f.len(), 215);
        assert!(f.sites.binary_search(&start).is_err());
        assert_eq!(f.meta.time, Some(0));
        assert!(sample_uncovered_at(&cfg, 0, -0.1, 1000.0).is_err());
    }

    #[test]
    fn uncovered_shrinks_and_replays() {
        let cfg = WalkConfig::new(geom(8), 2);
        let a = sample_uncovered_at(&cfg, 3, 0.2, 5000.0).unwrap();
        let b = sample_uncovered_at(&cfg, 3, 0.6, 5000.0).unwrap();
        assert!(b.sites.iter().all(|s| a.sites.binary_search(s).is_ok()));
        assert_eq!(a, sample_uncovered_at(&cfg, 3, 0.2, 5000.0).unwrap());
    }

    #[test]
    fn tau_alpha_stops_at_exact_count() {
        let cfg = WalkConfig::new(geom(10), 4);
        for alpha in [0.3, 0.6, 0.9, 1.2] {
            let f = sample_uncovered_at_count(&cfg, 0, alpha).unwrap();
            assert_eq!(f.len(), late_count(10, 3, alpha));
        }
        assert_eq!(late_count(10, 3, 1.5), 1);
    }

    #[test]
    fn bernoulli_and_uniform_laws() {
        let g = geom(6);
        assert_eq!(sample_bernoulli_field(&g, 1.0, 0, 0).unwrap().len(), 216);
        assert!(sample_bernoulli_field(&g, 0.0, 0, 0).unwrap().is_empty());
        assert!(sample_bernoulli_field(&g, 1.5, 0, 0).is_err());
        let p = 0.3;
        let counts: Vec<f64> = (0..400).map(|r| sample_bernoulli_field(&g, p, 7, r).unwrap().len() as f64).collect();
        let est = Estimate::from_samples(&counts);
        let sd = (216.0 * p * (1.0 - p) / 400.0).sqrt();
        assert!((est.mean - 216.0 * p).abs() <= 3.0 * sd);

        let mut hits = vec![0u64; 216];
        for r in 0..2000 {
            let f = sample_uniform_subset(&g, 10, 9, r).unwrap();
            assert_eq!(f.len(), 10);
            f.sites.iter().for_each(|&s| hits[s] += 1);
        }
        let (_, pv) = stats::chi_square(&hits, &[1.0 / 216.0; 216]);
        assert!(pv > 1e-3);
        assert!(sample_uniform_subset(&g, 217, 0, 0).is_err());
    }

    #[test]
    fn separation_matches_brute_force() {
        let g = geom(12);
        let one = separation_statistic(&g, &[5], 0.5);
        assert_eq!((one.z_gamma, one.min_pair_distance), (0, None));
        let a = g.index(&Point(vec![11, 0, 0]));
        let b = g.index(&Point(vec![0, 0, 0]));
        let two = separation_statistic(&g, &[a, b], 0.1);
        assert_eq!(two.z_gamma, 2);
        assert_eq!(two.min_pair_distance, Some(1.0));
        let mut r = rng::stream(5, rng::lane::AUX, 0);
        for (k, gamma) in [(3, 0.3), (20, 0.5), (60, 0.7), (200, 0.2)] {
            let sites = rand::seq::index::sample(&mut r, g.volume(), k).into_vec();
            let rep = separation_statistic(&g, &sites, gamma);
            let (z, best) = brute_z(&g, &sites, rep.radius);
            assert_eq!(rep.z_gamma, z);
            assert!((rep.min_pair_distance.unwrap() - best.unwrap()).abs() < 1e-12);
            assert_eq!(rep.z_gamma == 0, rep.min_pair_distance.unwrap() > rep.radius);
        }
    }

    #[test]
    fn neighbor_pairs() {
        let g = geom(5);
        let all: Vec<usize> = (0..g.volume()).collect();
        assert_eq!(neighbor_pair_statistic(&g, &all), 6 * 125);
        assert_eq!(neighbor_pair_statistic(&g, &[]), 0);
        let g = geom(10);
        let p = 0.2;
        let ws: Vec<f64> = (0..300)
            .map(|r| neighbor_pair_statistic(&g, &sample_bernoulli_field(&g, p, 3, r).unwrap().sites) as f64)
            .collect();
        let est = Estimate::from_samples(&ws);
        assert!(est.contains(6.0 * 1000.0 * p * p, 3.0), "{est:?}");
    }

    #[test]
    fn neighbor_count_is_separation_at_unit_radius() {
        let g = geom(9);
        let gamma = 1.2f64.ln() / 9f64.ln();
        let mut r = rng::stream(6, rng::lane::AUX, 1);
        for k in [5, 50, 300] {
            let sites = rand::seq::index::sample(&mut r, g.volume(), k).into_vec();
            assert_eq!(neighbor_pair_statistic(&g, &sites), separation_statistic(&g, &sites, gamma).z_gamma);
        }
    }

    #[test]
    fn distinguisher_conventions() {
        let bank = [1u64, 50, 400, 900];
        let rep = distinguisher_test(&bank, &bank, 20, 3, 0.4, 0.05, 0.34, DEFAULT_MARGIN).unwrap();
        assert_eq!(rep.gap, 0.0);
        assert!(!rep.distinguishable);
        assert!(distinguisher_test(&bank, &bank, 20, 3, 0.4, 0.3, 0.34, DEFAULT_MARGIN).is_err());
        let rep = distinguisher_test(&[10_000; 5], &[0; 5], 20, 3, 0.4, 0.05, 0.34, DEFAULT_MARGIN).unwrap();
        assert!(rep.distinguishable);
    }

    #[test]
    fn symmetric_pair_is_hit_evenly() {
        let g = geom(8);
        let targets = [Point(vec![0, 0, 0]), Point(vec![4, 4, 4])];
        let start = StartPolicy::Fixed(Point(vec![2, 2, 2]));
        let rep = hitting_uniformity_test(&g, &targets, 0.5, 20_000, &start, 1).unwrap();
        let sd = (0.25f64 / 20_000.0).sqrt();
        assert!((rep.frequencies[0] - 0.5).abs() <= 3.0 * sd);
        let near = StartPolicy::Fixed(Point(vec![1, 0, 0]));
        assert!(matches!(hitting_uniformity_test(&g, &targets, 0.5, 10, &near, 1), Err(Error::Hypothesis(_))));
        let close = [Point(vec![0, 0, 0]), Point(vec![1, 1, 0])];
        assert!(hitting_uniformity_test(&g, &close, 0.5, 10, &StartPolicy::UniformFar, 1).is_err());
    }

    #[test]
    fn first_hit_law_matches_oracle() {
        let g = geom(8);
        let targets = [Point(vec![0, 0, 0]), Point(vec![4, 1, 0]), Point(vec![1, 4, 5])];
        let start = StartPolicy::Fixed(Point(vec![4, 5, 3]));
        let exact = oracle_uniformity(&ChainProblem::new(g.clone(), 0.0).unwrap(), &targets, 0.5, &start).unwrap();
        assert!((exact.law.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let trials = 30_000;
        let rep = hitting_uniformity_test(&g, &targets, 0.5, trials, &start, 2).unwrap();
        for (f, p) in rep.frequencies.iter().zip(&exact.law) {
            assert!((f - p).abs() <= 3.5 * (p * (1.0 - p) / trials as f64).sqrt(), "{f} vs {p}");
        }
    }

    #[test]
    fn serialization_round_trips() {
        let g = geom(5);
        let f = sample_bernoulli_field(&g, 0.3, 11, 2).unwrap();
        let bytes = to_bitmap(&f);
        assert_eq!(bytes.len(), HEADER_LEN + 16);
        let back = from_bitmap(&bytes).unwrap();
        assert_eq!((back.n, back.d, back.kind, back.meta.seed), (5, 3, FieldKind::Bernoulli, 11));
        assert_eq!(back.sites, f.sites);
        assert!(from_bitmap(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bitmap(b"nope").is_err());
        let json = serde_json::to_string(&SparseField::from_field(&f).unwrap()).unwrap();
        let sparse: SparseField = serde_json::from_str(&json).unwrap();
        assert_eq!(sparse.into_field().unwrap(), f);
    }

    #[test]
    fn stopped_field_avoids_a_and_replays() {
        let g = geom(16);
        let dec = decompose(&g, 6f64.ln() / 16f64.ln(), 0.25).unwrap();
        let cfg = WalkConfig::new(g.clone(), 3);
        let plan = StoppedPlan { decomposition: dec.clone(), stop: 40 };
        let c = sample_uncovered_coupled(&cfg, 1, 0.5, 20_000.0, &plan).unwrap();
        assert!(c.stopped.sites.iter().all(|&s| !dec.in_a(&g, s)));
        assert!(!c.stopped.is_empty());
        assert_eq!(c, sample_uncovered_coupled(&cfg, 1, 0.5, 20_000.0, &plan).unwrap());
        let none = StoppedPlan { decomposition: dec.clone(), stop: 0 };
        let c0 = sample_uncovered_coupled(&cfg, 1, 0.0, 0.0, &none).unwrap();
        assert_eq!(c0.stopped.len(), g.volume() - dec.a_size());
        assert!(StoppedPlan::new(dec, 0.5, 1e4, 0.0, 0.1).is_err());
    }

    #[test]
    fn oracle_t_star_calibration() {
        let cal = calibrate_t_star(&geom(16), 0.65, Calibration::Oracle).unwrap();
        assert_eq!((cal.r, cal.big_r), (3, 6));
        assert!(cal.p_hat > 0.0 && cal.p_hat < 1.0);
        let lead = 3.0 * 16f64.ln() * cal.t_hat / cal.p_hat;
        assert!((cal.t_star - lead).abs() < 1e-6 * lead);
    }
}
