//! Simple random walk on the torus with visit tracking.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Point, TorusGeometry};
use crate::rng::{self, Rng};
use crate::stats::Estimate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Start {
    Stationary,
    Fixed(Point),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub geometry: TorusGeometry,
    /// Probability of holding in place at each step.
    pub laziness: f64,
    pub seed: u64,
    pub start: Start,
}

impl WalkConfig {
    pub fn new(geometry: TorusGeometry, seed: u64) -> Self {
        WalkConfig { geometry, laziness: 0.0, seed, start: Start::Stationary }
    }

    pub fn lazy(mut self, laziness: f64) -> Self {
        self.laziness = laziness;
        self
    }

    pub fn from(mut self, p: Point) -> Self {
        self.start = Start::Fixed(p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.laziness) {
            return Err(Error::Invalid(format!("laziness {} is outside [0, 1/2]", self.laziness)));
        }
        if let Start::Fixed(p) = &self.start {
            if p.0.len() != self.geometry.d() || p.0.iter().any(|&c| c >= self.geometry.n()) {
                return Err(Error::Invalid(format!("start {:?} is not a site", p.0)));
            }
        }
        Ok(())
    }
}

/// Uniform site; the uniform law is stationary for the walk on a regular graph.
pub fn sample_stationary_start(cfg: &WalkConfig, rng: &mut Rng) -> Point {
    match &cfg.start {
        Start::Fixed(p) => p.clone(),
        Start::Stationary => cfg.geometry.point(rng.random_range(0..cfg.geometry.volume())),
    }
}

/// Walk state: position, clock and its private random stream.
#[derive(Clone, Debug)]
pub struct Walker {
    geom: TorusGeometry,
    laziness: f64,
    dirs: usize,
    site: usize,
    time: u64,
    rng: Rng,
}

impl Walker {
    /// Walker for `replica`, placed according to the configured start.
    pub fn new(cfg: &WalkConfig, replica: u64) -> Self {
        let mut start_rng = rng::stream(cfg.seed, rng::lane::START, replica);
        let p = sample_stationary_start(cfg, &mut start_rng);
        let site = cfg.geometry.index(&p);
        Walker::at(&cfg.geometry, cfg.laziness, site, rng::stream(cfg.seed, rng::lane::WALK, replica))
    }

    pub fn at(geom: &TorusGeometry, laziness: f64, site: usize, rng: Rng) -> Self {
        Walker { geom: geom.clone(), laziness, dirs: 2 * geom.d(), site, time: 0, rng }
    }

    #[inline]
    pub fn site(&self) -> usize {
        self.site
    }

    pub fn position(&self) -> Point {
        self.geom.point(self.site)
    }

    #[inline]
    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geom
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// One step of the kernel; returns the new site.
    #[inline]
    pub fn step(&mut self) -> usize {
        self.time += 1;
        if self.laziness > 0.0 && self.rng.random::<f64>() < self.laziness {
            return self.site;
        }
        let dir = self.rng.random_range(0..self.dirs);
        self.site = self.geom.neighbor(self.site, dir);
        self.site
    }

    /// Positions at times `0..=steps` measured from now.
    pub fn trajectory(&mut self, steps: u64) -> Vec<usize> {
        let mut out = Vec::with_capacity(steps as usize + 1);
        out.push(self.site);
        for _ in 0..steps {
            out.push(self.step());
        }
        out
    }
}

/// Bit-packed visit mask with a running count of unvisited sites.
#[derive(Clone, Debug)]
pub struct VisitTracker {
    bits: Vec<u64>,
    unvisited: usize,
    first_hit: Option<Vec<u64>>,
    horizon: u64,
}

const NEVER: u64 = u64::MAX;

impl VisitTracker {
    pub fn new(volume: usize, record_times: bool) -> Self {
        VisitTracker {
            bits: vec![0; volume.div_ceil(64)],
            unvisited: volume,
            first_hit: record_times.then(|| vec![NEVER; volume]),
            horizon: 0,
        }
    }

    /// Records the walker's current site at its current time.
    #[inline]
    pub fn observe(&mut self, site: usize, t: u64) -> bool {
        self.horizon = t;
        let (w, b) = (site >> 6, 1u64 << (site & 63));
        if self.bits[w] & b != 0 {
            return false;
        }
        self.bits[w] |= b;
        self.unvisited -= 1;
        if let Some(fh) = &mut self.first_hit {
            fh[site] = t;
        }
        true
    }

    #[inline]
    pub fn is_visited(&self, site: usize) -> bool {
        self.bits[site >> 6] & (1u64 << (site & 63)) != 0
    }

    pub fn unvisited_count(&self) -> usize {
        self.unvisited
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn volume(&self) -> usize {
        self.first_hit.as_ref().map_or(self.bits.len() * 64, |f| f.len())
    }

    pub fn first_hit(&self, site: usize) -> Option<u64> {
        self.first_hit.as_ref().and_then(|f| (f[site] != NEVER).then_some(f[site]))
    }

    /// Sites not visited so far.
    pub fn uncovered(&self, volume: usize) -> Vec<usize> {
        (0..volume).filter(|&s| !self.is_visited(s)).collect()
    }
}

/// Sites with first visit strictly after `t`.
pub fn uncovered_set(tracker: &VisitTracker, volume: usize, t: u64) -> Result<Vec<usize>> {
    if t > tracker.horizon {
        return Err(Error::Horizon { requested: t, horizon: tracker.horizon });
    }
    match &tracker.first_hit {
        Some(fh) => Ok((0..volume).filter(|&s| fh[s] == NEVER || fh[s] > t).collect()),
        None if t == tracker.horizon => Ok(tracker.uncovered(volume)),
        None => Err(Error::Invalid("first-hit times were not recorded for this run".into())),
    }
}

/// Runs `steps` steps from the configured start, tracking visits.
pub fn run_tracked(cfg: &WalkConfig, replica: u64, steps: u64, record_times: bool) -> (Walker, VisitTracker) {
    let mut w = Walker::new(cfg, replica);
    let mut tr = VisitTracker::new(cfg.geometry.volume(), record_times);
    tr.observe(w.site(), 0);
    for _ in 0..steps {
        let s = w.step();
        tr.observe(s, w.time());
    }
    (w, tr)
}

/// Stops at the first time exactly `m` sites remain unvisited.
pub fn run_until_uncovered_count(cfg: &WalkConfig, replica: u64, m: usize) -> Result<(Walker, Vec<usize>)> {
    let vol = cfg.geometry.volume();
    if m == 0 || m >= vol {
        return Err(Error::Invalid(format!("target count {m} must lie in 1..={}", vol - 1)));
    }
    let mut w = Walker::new(cfg, replica);
    let mut tr = VisitTracker::new(vol, false);
    tr.observe(w.site(), 0);
    while tr.unvisited_count() > m {
        let s = w.step();
        tr.observe(s, w.time());
    }
    Ok((w, tr.uncovered(vol)))
}

/// First time every site has been visited.
pub fn cover_time(cfg: &WalkConfig, replica: u64) -> u64 {
    let mut w = Walker::new(cfg, replica);
    let mut tr = VisitTracker::new(cfg.geometry.volume(), false);
    tr.observe(w.site(), 0);
    while tr.unvisited_count() > 0 {
        let s = w.step();
        tr.observe(s, w.time());
    }
    w.time()
}

pub fn cover_times(cfg: &WalkConfig, replicas: u64) -> Vec<u64> {
    (0..replicas).into_par_iter().map(|r| cover_time(cfg, r)).collect()
}

/// Steps until the walker first stands on `target` (0 if already there).
pub fn hitting_time(w: &mut Walker, target: usize) -> u64 {
    let t0 = w.time();
    while w.site() != target {
        w.step();
    }
    w.time() - t0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitTimeEstimate {
    pub estimate: Estimate,
    /// Start class attaining the maximum.
    pub start: Point,
    pub per_class: Vec<(Point, Estimate)>,
}

/// Farthest site from the origin, the default start class.
pub fn antipode(geom: &TorusGeometry) -> Point {
    Point(vec![geom.n() / 2; geom.d()])
}

/// Monte Carlo estimate of the maximal expected hitting time.
///
/// The target is the origin; by transitivity only the start varies. Each
/// class in `classes` (antipode if empty) gets `replicas` runs and the class
/// with the largest mean is reported.
pub fn estimate_t_hit(cfg: &WalkConfig, replicas: u64, classes: &[Point]) -> Result<HitTimeEstimate> {
    cfg.validate()?;
    if replicas == 0 {
        return Err(Error::Invalid("replicas must be at least 1".into()));
    }
    let default = [antipode(&cfg.geometry)];
    let classes = if classes.is_empty() { &default[..] } else { classes };
    let geom = &cfg.geometry;
    let mut per_class = Vec::new();
    for (ci, p) in classes.iter().enumerate() {
        let start = geom.index(p);
        let times: Vec<f64> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let stream = rng::stream(cfg.seed, rng::lane::WALK, (ci as u64) << 40 | r);
                let mut w = Walker::at(geom, cfg.laziness, start, stream);
                hitting_time(&mut w, 0) as f64
            })
            .collect();
        per_class.push((p.clone(), Estimate::from_samples(&times)));
    }
    let (start, estimate) = per_class
        .iter()
        .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .cloned()
        .expect("at least one class");
    Ok(HitTimeEstimate { estimate, start, per_class })
}
