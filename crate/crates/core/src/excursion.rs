//! Excursions across annuli.
//!
//! An excursion starts at the first visit `τ_k` to the inner boundary `∂E`
//! after the previous exit and ends at the first time `σ_k` the walk stands
//! outside the outer shape `F`.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AnnulusMap, AnnulusSpec, Decomposition, Point, TorusGeometry};
use crate::rng;
use crate::stats::{self, Estimate};
use crate::walk::{WalkConfig, Walker};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcursionRecord {
    pub k: usize,
    pub tau: u64,
    pub sigma: u64,
    /// Entry site on `∂E`.
    pub entry: usize,
    /// First site outside `F`.
    pub exit: usize,
    /// `σ_k - σ_{k-1}`, absent for `k = 0`.
    pub duration: Option<u64>,
    /// Indices into the marked list of the sites visited during `[τ_k, σ_k]`.
    pub hit_targets: Vec<usize>,
}

/// Excursions of one trajectory up to its horizon.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExcursionLog {
    pub records: Vec<ExcursionRecord>,
    /// `(τ, entry)` of an excursion still running at the horizon.
    pub partial: Option<(u64, usize)>,
    pub horizon: u64,
}

impl ExcursionLog {
    pub fn tau0(&self) -> Option<u64> {
        self.records.first().map(|r| r.tau).or(self.partial.map(|p| p.0))
    }
}

#[derive(Clone, Copy, Debug)]
enum Phase {
    Seeking,
    Inside { tau: u64, entry: usize },
}

/// Online excursion detector fed one position at a time.
#[derive(Clone, Debug)]
pub struct ExcursionScanner<'a> {
    map: &'a AnnulusMap,
    marked: &'a [usize],
    phase: Phase,
    last_sigma: Option<u64>,
    k: usize,
    hits: Vec<usize>,
    tau0: Option<u64>,
}

impl<'a> ExcursionScanner<'a> {
    pub fn new(map: &'a AnnulusMap, marked: &'a [usize]) -> Self {
        ExcursionScanner { map, marked, phase: Phase::Seeking, last_sigma: None, k: 0, hits: Vec::new(), tau0: None }
    }

    /// Position `site` at time `t`; returns an excursion completed now.
    #[inline]
    pub fn feed(&mut self, t: u64, site: usize) -> Option<ExcursionRecord> {
        let label = self.map.label(site);
        match self.phase {
            Phase::Seeking => {
                if label & AnnulusMap::INNER_BOUNDARY != 0 {
                    self.phase = Phase::Inside { tau: t, entry: site };
                    self.tau0.get_or_insert(t);
                    self.hits.clear();
                    self.note_hit(label, site);
                }
                None
            }
            Phase::Inside { tau, entry } => {
                if label & AnnulusMap::OUTER == 0 {
                    let rec = ExcursionRecord {
                        k: self.k,
                        tau,
                        sigma: t,
                        entry,
                        exit: site,
                        duration: self.last_sigma.map(|s| t - s),
                        hit_targets: std::mem::take(&mut self.hits),
                    };
                    self.k += 1;
                    self.last_sigma = Some(t);
                    self.phase = Phase::Seeking;
                    Some(rec)
                } else {
                    self.note_hit(label, site);
                    None
                }
            }
        }
    }

    #[inline]
    fn note_hit(&mut self, label: u8, site: usize) {
        if label & AnnulusMap::MARKED != 0 {
            if let Some(i) = self.marked.iter().position(|&m| m == site) {
                if !self.hits.contains(&i) {
                    self.hits.push(i);
                }
            }
        }
    }

    pub fn completed(&self) -> usize {
        self.k
    }

    pub fn tau0(&self) -> Option<u64> {
        self.tau0
    }

    pub fn partial(&self) -> Option<(u64, usize)> {
        match self.phase {
            Phase::Inside { tau, entry } => Some((tau, entry)),
            Phase::Seeking => None,
        }
    }
}

/// Excursions of a stored trajectory (`positions[t]` is `X(t)`).
pub fn decompose_excursions(positions: &[usize], map: &AnnulusMap, marked: &[usize]) -> ExcursionLog {
    let mut sc = ExcursionScanner::new(map, marked);
    let mut records = Vec::new();
    for (t, &s) in positions.iter().enumerate() {
        if let Some(r) = sc.feed(t as u64, s) {
            records.push(r);
        }
    }
    ExcursionLog { records, partial: sc.partial(), horizon: positions.len().saturating_sub(1) as u64 }
}

/// `N = min{k >= 0 : σ_k - τ_0 >= t}` from a log; `None` when the log is
/// too short to decide.
pub fn count_from_log(log: &ExcursionLog, t: u64) -> Option<usize> {
    let tau0 = match log.tau0() {
        Some(x) => x,
        None => return (t == 0).then_some(0),
    };
    if let Some(r) = log.records.iter().find(|r| r.sigma - tau0 >= t) {
        return Some(r.k);
    }
    (log.horizon >= tau0 + t).then_some(log.records.len())
}

fn check_annulus(geom: &TorusGeometry, spec: &AnnulusSpec) -> Result<()> {
    spec.validate(geom)?;
    if spec.outer.radius < 2 * spec.inner.radius {
        return Err(Error::Hypothesis(format!(
            "outer size {} is below twice the inner size {} (R >= 2r)",
            spec.outer.radius, spec.inner.radius
        )));
    }
    Ok(())
}

/// Number of excursions by the counting rule for a walk from `cfg`.
pub fn count_excursions(cfg: &WalkConfig, replica: u64, spec: &AnnulusSpec, t: u64) -> Result<usize> {
    cfg.validate()?;
    check_annulus(&cfg.geometry, spec)?;
    let map = AnnulusMap::new(&cfg.geometry, spec)?;
    Ok(count_with_map(cfg, replica, &map, t))
}

fn count_with_map(cfg: &WalkConfig, replica: u64, map: &AnnulusMap, t: u64) -> usize {
    let mut w = Walker::new(cfg, replica);
    let mut sc = ExcursionScanner::new(map, &[]);
    sc.feed(0, w.site());
    while sc.tau0().is_none() {
        let s = w.step();
        sc.feed(w.time(), s);
    }
    let end = sc.tau0().expect("entered") + t;
    let mut n = 0;
    while w.time() < end {
        let s = w.step();
        if let Some(r) = sc.feed(w.time(), s) {
            if r.sigma < end {
                n += 1;
            }
        }
    }
    n
}

/// Counts for `replicas` independent walks.
pub fn count_excursions_batch(cfg: &WalkConfig, spec: &AnnulusSpec, t: u64, replicas: u64) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_annulus(&cfg.geometry, spec)?;
    let map = AnnulusMap::new(&cfg.geometry, spec)?;
    Ok((0..replicas).into_par_iter().map(|r| count_with_map(cfg, r, &map, t)).collect())
}

/// Completed excursions of one walk after the first, with hit flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExcursionSample {
    pub records: Vec<ExcursionRecord>,
}

/// Runs a walk until `count` excursions with a duration are complete.
pub fn collect_excursions(cfg: &WalkConfig, replica: u64, spec: &AnnulusSpec, marked: &[usize], count: usize) -> Result<ExcursionSample> {
    cfg.validate()?;
    check_annulus(&cfg.geometry, spec)?;
    let mut map = AnnulusMap::new(&cfg.geometry, spec)?;
    map.mark(marked);
    let mut w = Walker::new(cfg, replica);
    let mut sc = ExcursionScanner::new(&map, marked);
    let mut records = Vec::with_capacity(count);
    sc.feed(0, w.site());
    while records.len() < count {
        let s = w.step();
        if let Some(r) = sc.feed(w.time(), s) {
            if r.duration.is_some() {
                records.push(r);
            }
        }
    }
    Ok(ExcursionSample { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionLengthStats {
    /// `T̂`: mean of `σ_i - σ_{i-1}` after burn-in.
    pub mean: Estimate,
    /// Mean duration grouped by the exit site the excursion started from.
    pub per_start: Vec<(usize, f64, usize)>,
    /// Fraction of excursions visiting each marked site.
    pub hit_fraction: Vec<Estimate>,
    /// Fraction visiting at least one marked site.
    pub any_hit: Option<Estimate>,
}

/// Duration and hit statistics of excursions, dropping `burn_in` per walk.
pub fn excursion_length_stats(samples: &[ExcursionSample], burn_in: usize, marked: usize) -> ExcursionLengthStats {
    let mut durations = Vec::new();
    let mut strata: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut hits = vec![Vec::new(); marked];
    let mut any = Vec::new();
    for s in samples {
        let mut prev_exit: Option<usize> = None;
        for (i, r) in s.records.iter().enumerate() {
            let start = prev_exit.replace(r.exit);
            if i < burn_in {
                continue;
            }
            let d = r.duration.expect("completed excursion") as f64;
            durations.push(d);
            if let Some(b) = start {
                let e = strata.entry(b).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
            for (m, h) in hits.iter_mut().enumerate() {
                h.push(if r.hit_targets.contains(&m) { 1.0 } else { 0.0 });
            }
            any.push(if r.hit_targets.is_empty() { 0.0 } else { 1.0 });
        }
    }
    ExcursionLengthStats {
        mean: Estimate::from_samples(&durations),
        per_start: strata.into_iter().map(|(b, (s, c))| (b, s / c as f64, c)).collect(),
        hit_fraction: hits.iter().map(|h| Estimate::from_samples(h)).collect(),
        any_hit: (marked > 0).then(|| Estimate::from_samples(&any)),
    }
}

/// `T̂_{r,R}` from `replicas` walks of `per_replica` excursions each.
pub fn estimate_t_rr(
    cfg: &WalkConfig,
    spec: &AnnulusSpec,
    marked: &[usize],
    replicas: u64,
    per_replica: usize,
    burn_in: usize,
) -> Result<ExcursionLengthStats> {
    if per_replica <= burn_in {
        return Err(Error::Invalid(format!("{per_replica} excursions per walk leave nothing after burn-in {burn_in}")));
    }
    let samples: Result<Vec<ExcursionSample>> = (0..replicas)
        .into_par_iter()
        .map(|r| collect_excursions(cfg, r, spec, marked, per_replica))
        .collect();
    Ok(excursion_length_stats(&samples?, burn_in, marked.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitChainStats {
    /// Exit sites with their empirical frequencies, sorted by site.
    pub frequencies: Vec<(usize, f64)>,
    pub samples: usize,
    /// First lag at which the autocorrelation of exit positions drops below 0.05.
    pub k0_hat: usize,
    pub autocorrelation: Vec<f64>,
}

/// Empirical law of exit points and a decorrelation lag.
pub fn exit_chain_stats(cfg: &WalkConfig, spec: &AnnulusSpec, samples: usize, burn_in: usize) -> Result<ExitChainStats> {
    let run = collect_excursions(cfg, 0, spec, &[], samples + burn_in)?;
    let exits: Vec<usize> = run.records[burn_in..].iter().map(|r| r.exit).collect();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &b in &exits {
        *counts.entry(b).or_insert(0) += 1;
    }
    let g = &cfg.geometry;
    let c = g.index(&spec.outer.center);
    let max_lag = 20.min(exits.len() / 4);
    let mut acf = Vec::with_capacity(max_lag);
    // Signed offsets of the exit from the centre, one series per axis.
    let series: Vec<Vec<f64>> = (0..g.d())
        .map(|a| {
            exits
                .iter()
                .map(|&b| {
                    let (x, y) = (g.coord(b, a) as i64, g.coord(c, a) as i64);
                    let n = g.n() as i64;
                    let mut o = (x - y).rem_euclid(n);
                    if o > n / 2 {
                        o -= n;
                    }
                    o as f64
                })
                .collect()
        })
        .collect();
    for lag in 1..=max_lag {
        let mut v = 0.0;
        for s in &series {
            let m = stats::mean(s);
            let var = stats::variance(s);
            let cov: f64 = s.windows(lag + 1).map(|w| (w[0] - m) * (w[lag] - m)).sum::<f64>() / (s.len() - lag) as f64;
            v += cov / var;
        }
        acf.push(v / series.len() as f64);
    }
    let k0_hat = acf.iter().position(|a| a.abs() < 0.05).map_or(max_lag.max(1), |i| i + 1);
    let total = exits.len() as f64;
    Ok(ExitChainStats {
        frequencies: counts.into_iter().map(|(b, c)| (b, c as f64 / total)).collect(),
        samples: exits.len(),
        k0_hat,
        autocorrelation: acf,
    })
}

/// Geometry of the thin-annulus count `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WGeometry {
    /// Side of the box `S(0, n^β)`.
    pub inner: usize,
    /// Side of the box `S(0, n^β + n^φ)`.
    pub thin: usize,
    /// Radius of the ball `B(0, 10 n^β)`.
    pub ball: usize,
    /// Radius at which a returning walk is restarted from its exit site.
    pub escape: usize,
}

impl WGeometry {
    pub fn new(n: usize, beta: f64, phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi < beta && beta < 1.0) {
            return Err(Error::Invalid(format!("need 0 < phi < beta < 1, got beta = {beta}, phi = {phi}")));
        }
        let nb = crate::lattice::round_half_up((n as f64).powf(beta));
        let nf = crate::lattice::round_half_up((n as f64).powf(phi));
        if nb < 1 || nf < 1 {
            return Err(Error::Invalid(format!("box sizes round(n^beta) = {nb}, round(n^phi) = {nf} must be positive")));
        }
        let ball = crate::lattice::round_half_up(10.0 * (n as f64).powf(beta));
        Ok(WGeometry { inner: nb, thin: nb + nf, ball, escape: 2 * ball })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WStats {
    pub geometry: WGeometry,
    pub samples: Vec<u64>,
    pub mean: Estimate,
}

fn box_span(side: usize) -> (i64, i64) {
    let lo = -((side / 2) as i64);
    (lo, lo + side as i64 - 1)
}

/// Samples of `W`, the number of thin-annulus excursions across
/// `S(0, n^β + n^φ) \ S(0, n^β)` during one excursion across
/// `B(0, 10 n^β) \ S(0, n^β)`.
///
/// The walk runs on `Z^d`: after leaving the ball it is returned to the
/// inner box, restarting from its exit site whenever it strays beyond the
/// escape radius, so successive exit sites form the lattice version of the
/// exit chain. The first `burn_in` samples of each chain are discarded.
pub fn sample_w(d: usize, geom: &WGeometry, chains: u64, per_chain: usize, burn_in: usize, seed: u64) -> Result<WStats> {
    if d < 3 {
        return Err(Error::Invalid(format!("dimension {d} < 3")));
    }
    if 2 * geom.thin >= geom.ball {
        return Err(Error::Hypothesis(format!(
            "thin box side {} does not fit well inside the ball of radius {}",
            geom.thin, geom.ball
        )));
    }
    let per: Vec<Vec<u64>> = (0..chains)
        .into_par_iter()
        .map(|c| w_chain(d, geom, per_chain + burn_in, rng::stream(seed, rng::lane::AUX, c)).split_off(burn_in))
        .collect();
    let samples: Vec<u64> = per.into_iter().flatten().collect();
    let xs: Vec<f64> = samples.iter().map(|&x| x as f64).collect();
    Ok(WStats { geometry: geom.clone(), mean: Estimate::from_samples(&xs), samples })
}

fn w_chain(d: usize, geom: &WGeometry, count: usize, mut g: rng::Rng) -> Vec<u64> {
    let (ilo, ihi) = box_span(geom.inner);
    let (tlo, thi) = box_span(geom.thin);
    let in_box = |p: &[i64], lo: i64, hi: i64| p.iter().all(|&x| x >= lo && x <= hi);
    let on_inner_boundary = |p: &[i64]| in_box(p, ilo, ihi) && p.iter().any(|&x| x == ilo || x == ihi);
    let ball2 = (geom.ball * geom.ball) as i64;
    let esc2 = (geom.escape * geom.escape) as i64;
    let mut pos = vec![0i64; d];
    pos[0] = geom.ball as i64 + 1;
    let mut out = Vec::with_capacity(count);
    let mut step = |pos: &mut [i64], norm2: &mut i64| {
        let dir = g.random_range(0..2 * d);
        let a = dir >> 1;
        let s = if dir & 1 == 0 { 1 } else { -1 };
        *norm2 += 2 * s * pos[a] + 1;
        pos[a] += s;
    };
    while out.len() < count {
        // Return leg: from the exit site back to the inner box.
        let exit_site = pos.clone();
        let mut norm2: i64 = pos.iter().map(|x| x * x).sum();
        while !on_inner_boundary(&pos) {
            step(&mut pos, &mut norm2);
            if norm2 > esc2 {
                pos.copy_from_slice(&exit_site);
                norm2 = pos.iter().map(|x| x * x).sum();
            }
        }
        // One big excursion; count thin excursions inside it.
        let mut w = 0u64;
        let mut inside_thin = true;
        while norm2 <= ball2 {
            step(&mut pos, &mut norm2);
            if inside_thin {
                if !in_box(&pos, tlo, thi) {
                    w += 1;
                    inside_thin = false;
                }
            } else if on_inner_boundary(&pos) {
                inside_thin = true;
            }
        }
        out.push(w);
    }
    out
}

/// Geometric variable on `{1, 2, ...}` with success probability `p`.
pub fn sample_geometric(rng: &mut rng::Rng, p: f64) -> u64 {
    let u: f64 = rng.random::<f64>();
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
}

/// `E[X^j]` for the geometric law on `{1, 2, ...}`, summed to machine precision.
pub fn geometric_moment(j: u32, p: f64) -> f64 {
    let q = 1.0 - p;
    let mut s = 0.0;
    let mut k = 1u64;
    let mut w = p;
    loop {
        let term = (k as f64).powi(j as i32) * w;
        s += term;
        if k > 10 && term < 1e-18 * s {
            return s;
        }
        w *= q;
        k += 1;
    }
}

/// The moment bound `j! / p^j`.
pub fn geometric_moment_bound(j: u32, p: f64) -> f64 {
    (1..=j).map(|i| i as f64).product::<f64>() / p.powi(j as i32)
}

/// Tail `P(S > u)` of a sum of `k` geometric variables with parameter `p`.
pub fn negative_binomial_tail(k: u32, p: f64, u: u64) -> f64 {
    if u < k as u64 {
        return 1.0;
    }
    let lp = p.ln();
    let lq = (1.0 - p).ln();
    let mut cdf = 0.0;
    for s in k as u64..=u {
        let ln_c = ln_choose(s - 1, k as u64 - 1);
        cdf += (ln_c + k as f64 * lp + (s - k as u64) as f64 * lq).exp();
    }
    (1.0 - cdf).max(0.0)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Hypotheses of the excursion-count concentration bound.
pub fn check_concentration(n: usize, d: usize, r: f64, delta: f64, psi: f64) -> Result<()> {
    let nf = n as f64;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("delta = {delta} must lie in (0, 1)")));
    }
    if delta * nf.powf(psi) > 1.0 {
        return Err(Error::Hypothesis(format!(
            "delta * n^psi = {:.4} > 1 (excursion-count concentration needs delta * n^psi <= 1)",
            delta * nf.powf(psi)
        )));
    }
    let h = delta * r.powi(d as i32 - 2) * nf.powf(-psi - 0.5);
    if h > 1.0 {
        return Err(Error::Hypothesis(format!(
            "delta * r^(d-2) * n^(-psi-1/2) = {h:.4} > 1 (excursion-count concentration hypothesis)"
        )));
    }
    Ok(())
}

/// Share of counts outside `[t/((1+δ)T), t/((1-δ)T)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub lower: f64,
    pub upper: f64,
    pub replicas: usize,
    pub outside: usize,
    pub outside_fraction: f64,
    pub mean_count: f64,
}

pub fn concentration_report(counts: &[usize], t: f64, t_hat: f64, delta: f64) -> ConcentrationReport {
    let lower = t / ((1.0 + delta) * t_hat);
    let upper = t / ((1.0 - delta) * t_hat);
    let outside = counts.iter().filter(|&&c| (c as f64) < lower || (c as f64) > upper).count();
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    ConcentrationReport {
        lower,
        upper,
        replicas: counts.len(),
        outside,
        outside_fraction: outside as f64 / counts.len().max(1) as f64,
        mean_count: stats::mean(&xs),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Completion {
    pub tile: usize,
    pub count: u64,
    /// The box reached its stop count with this excursion.
    pub froze: bool,
}

/// Simultaneous thin-annulus clocks for every box of a decomposition.
///
/// Excursions of box `i` go from the boundary of its middle box to the
/// outside of its partition box; a box freezes once `stop` of them are done.
pub struct TileClock {
    tile: Vec<u32>,
    mid_boundary: Vec<bool>,
    counts: Vec<u64>,
    frozen_at: Vec<Option<u64>>,
    active: Option<u32>,
    stop: u64,
    open: usize,
}

impl TileClock {
    pub fn new(geom: &TorusGeometry, dec: &Decomposition, stop: u64) -> Self {
        let tile = (0..geom.volume()).map(|s| dec.tile_of(geom, s) as u32).collect();
        let mid_boundary = (0..geom.volume()).map(|s| dec.on_mid_boundary(geom, s)).collect();
        let tiles = dec.tiles();
        let frozen_at = vec![if stop == 0 { Some(0) } else { None }; tiles];
        TileClock {
            tile,
            mid_boundary,
            counts: vec![0; tiles],
            frozen_at,
            active: None,
            stop,
            open: if stop == 0 { 0 } else { tiles },
        }
    }

    /// Advances to `site` at time `t`; reports a thin excursion completed now.
    #[inline]
    pub fn feed(&mut self, t: u64, site: usize) -> Option<Completion> {
        let here = self.tile[site];
        let mut done = None;
        if let Some(a) = self.active {
            if a != here {
                self.active = None;
                let ai = a as usize;
                self.counts[ai] += 1;
                let froze = self.counts[ai] == self.stop && self.frozen_at[ai].is_none();
                if froze {
                    self.frozen_at[ai] = Some(t);
                    self.open -= 1;
                }
                done = Some(Completion { tile: ai, count: self.counts[ai], froze });
            }
        }
        if self.active.is_none() && self.mid_boundary[site] {
            self.active = Some(here);
        }
        done
    }

    pub fn count(&self, tile: usize) -> u64 {
        self.counts[tile]
    }

    pub fn all_frozen(&self) -> bool {
        self.open == 0
    }

    pub fn frozen_at(&self, tile: usize) -> Option<u64> {
        self.frozen_at[tile]
    }
}

/// `E̲(t, δ) = floor(t / ((1 + δ) T^{□,□}))` with `T^{□,□}` the mean
/// thin-annulus excursion length (equal to `T^{□,○} / E[W]` by renewal).
pub fn nested_stop_count(t: f64, t_thin: f64, delta: f64) -> u64 {
    (t / ((1.0 + delta) * t_thin)).floor().max(0.0) as u64
}

/// Ball excursions around `z` completed during the first `stop` thin
/// excursions of the box containing `z`.
pub fn count_nested_excursions(
    cfg: &WalkConfig,
    replica: u64,
    dec: &Decomposition,
    z: &Point,
    r: usize,
    big_r: usize,
    stop: u64,
) -> Result<usize> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let zi = g.index(z);
    if dec.in_a(g, zi) {
        return Err(Error::Invalid(format!("z = {:?} lies in the annular region A", z.0)));
    }
    let spec = AnnulusSpec::balls(z.clone(), r, big_r);
    check_annulus(g, &spec)?;
    let tile = dec.tile_of(g, zi);
    if spec.outer.sites(g).iter().any(|&s| !dec.in_mid(g, s) || dec.tile_of(g, s) != tile) {
        return Err(Error::Hypothesis(format!("B(z, {big_r}) is not contained in the middle box around z")));
    }
    let ball_map = AnnulusMap::new(g, &spec)?;
    let mid = dec.mid_sites(g, tile);
    let mid_boundary: Vec<usize> = mid.iter().copied().filter(|&s| dec.on_mid_boundary(g, s)).collect();
    let thin_map = AnnulusMap::from_sets(g.volume(), &mid, &mid_boundary, &dec.tile_sites(g, tile));
    if stop == 0 {
        return Ok(0);
    }
    let mut w = Walker::new(cfg, replica);
    let mut thin = ExcursionScanner::new(&thin_map, &[]);
    let mut ball = ExcursionScanner::new(&ball_map, &[]);
    thin.feed(0, w.site());
    ball.feed(0, w.site());
    loop {
        let s = w.step();
        let t = w.time();
        let done = thin.feed(t, s).is_some() && thin.completed() as u64 == stop;
        ball.feed(t, s);
        if done {
            return Ok(ball.completed());
        }
    }
}

/// Thin-annulus excursion length for the boxes of `dec`, from one long walk.
pub fn estimate_thin_length(cfg: &WalkConfig, dec: &Decomposition, steps: u64) -> Result<Estimate> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let mut clock = TileClock::new(g, dec, u64::MAX);
    let mut w = Walker::new(cfg, 0);
    let mut last = vec![None::<u64>; dec.tiles()];
    let mut durations = Vec::new();
    clock.feed(0, w.site());
    for _ in 0..steps {
        let s = w.step();
        let t = w.time();
        if let Some(c) = clock.feed(t, s) {
            if let Some(l) = last[c.tile].replace(t) {
                durations.push((t - l) as f64);
            }
        }
    }
    if durations.len() < 2 {
        return Err(Error::Invalid("walk too short to observe thin excursions".into()));
    }
    Ok(Estimate::from_samples(&durations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::decompose;
    use crate::oracle::ChainProblem;

    fn geom(n: usize) -> TorusGeometry {
        TorusGeometry::new(n, 3).unwrap()
    }

    /// Stopping times straight from their definitions, by repeated search.
    fn naive(traj: &[usize], boundary: &[usize], outer: &[usize]) -> Vec<(u64, u64, usize, usize)> {
        let find = |from: usize, pred: &dyn Fn(usize) -> bool| (from..traj.len()).find(|&t| pred(traj[t]));
        let mut out = Vec::new();
        let mut t = 0;
        while let Some(tau) = find(t, &|s| boundary.contains(&s)) {
            match find(tau, &|s| !outer.contains(&s)) {
                Some(sigma) => {
                    out.push((tau as u64, sigma as u64, traj[tau], traj[sigma]));
                    t = sigma;
                }
                None => break,
            }
        }
        out
    }

    #[test]
    fn scanner_agrees_with_naive_search() {
        let g = geom(9);
        for (spec, seed) in [
            (AnnulusSpec::balls(Point(vec![4, 4, 4]), 1, 3), 1),
            (AnnulusSpec::box_in_ball(Point(vec![0, 0, 0]), 2, 4), 2),
            (AnnulusSpec::box_in_box(Point(vec![1, 7, 3]), 1, 5), 3),
        ] {
            let map = AnnulusMap::new(&g, &spec).unwrap();
            let traj = Walker::new(&WalkConfig::new(g.clone(), seed), 0).trajectory(30_000);
            let log = decompose_excursions(&traj, &map, &[]);
            let expect = naive(&traj, &spec.inner.boundary(&g), &spec.outer.sites(&g));
            let got: Vec<_> = log.records.iter().map(|r| (r.tau, r.sigma, r.entry, r.exit)).collect();
            assert!(got.len() > 5);
            assert_eq!(got, expect);
            for w in log.records.windows(2) {
                assert!(w[0].tau < w[0].sigma && w[0].sigma < w[1].tau);
                assert!(w[1].duration.unwrap() >= 2);
            }
        }
    }

    #[test]
    fn partial_excursion_is_flagged() {
        let g = geom(8);
        let spec = AnnulusSpec::balls(Point(vec![0, 0, 0]), 1, 2);
        let map = AnnulusMap::new(&g, &spec).unwrap();
        // Start on the inner boundary and stay inside.
        let a = g.index(&Point(vec![1, 0, 0]));
        let log = decompose_excursions(&[a, 0, a], &map, &[]);
        assert!(log.records.is_empty());
        assert_eq!(log.partial, Some((0, a)));
    }

    fn record(k: usize, tau: u64, sigma: u64) -> ExcursionRecord {
        ExcursionRecord { k, tau, sigma, entry: 0, exit: 0, duration: None, hit_targets: vec![] }
    }

    #[test]
    fn counting_rule() {
        // σ_k - τ_0 = 10, 25, 40, 60, 75.
        let sig = [15u64, 30, 45, 65, 80];
        let log = ExcursionLog {
            records: sig.iter().enumerate().map(|(k, &s)| record(k, if k == 0 { 5 } else { s - 8 }, s)).collect(),
            partial: None,
            horizon: 90,
        };
        assert_eq!(count_from_log(&log, 0), Some(0));
        assert_eq!(count_from_log(&log, 10), Some(0));
        assert_eq!(count_from_log(&log, 11), Some(1));
        assert_eq!(count_from_log(&log, 55), Some(3));
        assert_eq!(count_from_log(&log, 85), Some(5));
        assert_eq!(count_from_log(&log, 86), None);
    }

    #[test]
    fn live_count_matches_log_count() {
        let g = geom(8);
        let cfg = WalkConfig::new(g.clone(), 21);
        let spec = AnnulusSpec::balls(Point(vec![0, 0, 0]), 1, 2);
        let map = AnnulusMap::new(&g, &spec).unwrap();
        let traj = Walker::new(&cfg, 0).trajectory(40_000);
        let log = decompose_excursions(&traj, &map, &[]);
        for t in [0u64, 100, 1000, 5000, 20_000] {
            assert_eq!(Some(count_excursions(&cfg, 0, &spec, t).unwrap()), count_from_log(&log, t));
        }
    }

    #[test]
    fn rejects_thin_annulus_ratio() {
        let cfg = WalkConfig::new(geom(16), 0);
        let spec = AnnulusSpec::balls(Point(vec![0, 0, 0]), 3, 5);
        assert!(matches!(count_excursions(&cfg, 0, &spec, 10), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn mean_length_and_hits_match_oracle() {
        let g = geom(8);
        let spec = AnnulusSpec::balls(Point(vec![0, 0, 0]), 1, 2);
        let p = ChainProblem::new(g.clone(), 0.0).unwrap();
        let chain = p.exit_chain(&spec).unwrap();
        let (_, p_hit) = chain.hit_probability(&p, &[0]).unwrap();
        let cfg = WalkConfig::new(g, 5);
        let st = estimate_t_rr(&cfg, &spec, &[0], 20, 1000, 10).unwrap();
        assert!(st.mean.contains(chain.mean_duration, 3.5), "{:?} vs {}", st.mean, chain.mean_duration);
        assert!(st.hit_fraction[0].contains(p_hit, 3.5), "{:?} vs {p_hit}", st.hit_fraction[0]);
    }

    #[test]
    fn exit_law_matches_oracle() {
        let g = geom(10);
        let spec = AnnulusSpec::balls(Point(vec![0, 0, 0]), 1, 3);
        let p = ChainProblem::new(g.clone(), 0.0).unwrap();
        let chain = p.exit_chain(&spec).unwrap();
        let st = exit_chain_stats(&WalkConfig::new(g, 8), &spec, 50_000, 10).unwrap();
        let tv: f64 = 0.5
            * chain
                .exit_sites
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let emp = st.frequencies.iter().find(|f| f.0 == *s).map_or(0.0, |f| f.1);
                    (emp - chain.stationary[i]).abs()
                })
                .sum::<f64>();
        assert!(tv <= 0.03, "{tv}");
        assert!(st.k0_hat <= 3);
    }

    #[test]
    fn geometric_moment_bound_holds() {
        for p in [0.02, 0.1, 0.3, 0.5] {
            for j in 1..=6 {
                let m = geometric_moment(j, p);
                assert!(m <= 2.0 * geometric_moment_bound(j, p), "p = {p}, j = {j}");
            }
            assert!((geometric_moment(1, p) - 1.0 / p).abs() < 1e-9 / p);
        }
        let mut g = rng::stream(3, rng::lane::AUX, 0);
        let xs: Vec<f64> = (0..200_000).map(|_| sample_geometric(&mut g, 0.25) as f64).collect();
        let m = stats::mean(&xs);
        assert!((m - 4.0).abs() < 0.05);
    }

    #[test]
    fn negative_binomial_tail_edges() {
        assert_eq!(negative_binomial_tail(3, 0.5, 2), 1.0);
        // One geometric: P(X > u) = (1-p)^u.
        assert!((negative_binomial_tail(1, 0.3, 4) - 0.7f64.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn w_is_positive_and_dominated() {
        let wg = WGeometry { inner: 4, thin: 5, ball: 40, escape: 80 };
        let st = sample_w(3, &wg, 2, 150, 5, 9).unwrap();
        assert!(st.samples.iter().all(|&w| w >= 1));
        assert!(st.mean.mean > 1.0);
        assert!(sample_w(3, &WGeometry { inner: 4, thin: 5, ball: 8, escape: 16 }, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn tile_clock_matches_single_scanners() {
        let g = geom(12);
        let dec = decompose(&g, 3f64.ln() / 12f64.ln(), 0.05).unwrap();
        assert_eq!(dec.big, 4);
        let traj = Walker::new(&WalkConfig::new(g.clone(), 4), 0).trajectory(50_000);
        let mut clock = TileClock::new(&g, &dec, 7);
        for (t, &s) in traj.iter().enumerate() {
            clock.feed(t as u64, s);
        }
        for tile in [0, 5, 26] {
            let mid = dec.mid_sites(&g, tile);
            let bd: Vec<usize> = mid.iter().copied().filter(|&s| dec.on_mid_boundary(&g, s)).collect();
            let map = AnnulusMap::from_sets(g.volume(), &mid, &bd, &dec.tile_sites(&g, tile));
            let log = decompose_excursions(&traj, &map, &[]);
            assert_eq!(clock.count(tile), log.records.len() as u64);
            if log.records.len() >= 7 {
                assert_eq!(clock.frozen_at(tile), Some(log.records[6].sigma));
            }
        }
    }

    #[test]
    fn nested_count_requires_small_box() {
        let g = geom(16);
        let dec = decompose(&g, 6f64.ln() / 16f64.ln(), 0.25).unwrap();
        let cfg = WalkConfig::new(g.clone(), 0);
        let corner = dec.tile_corner(0);
        assert!(count_nested_excursions(&cfg, 0, &dec, &corner, 1, 2, 3).is_err());
        let c = dec.tile_center(0);
        assert_eq!(count_nested_excursions(&cfg, 0, &dec, &c, 1, 2, 0).unwrap(), 0);
        assert!(count_nested_excursions(&cfg, 0, &dec, &c, 1, 2, 5).is_ok());
    }
}
