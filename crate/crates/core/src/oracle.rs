//! Exact finite-chain quantities for the walk on small tori.
//!
//! Everything reduces to linear systems `(I - P_UU) x = b` on a set `U` of
//! transient sites. `P` is symmetric, so the restricted operator is
//! symmetric positive definite and conjugate gradients converge.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AnnulusSpec, ShapeSpec, TorusGeometry};

pub const DEFAULT_STATE_CAP: usize = 200_000;
/// Accepted residual relative to the right-hand side.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainProblem {
    pub geometry: TorusGeometry,
    pub laziness: f64,
    pub cap: usize,
}

/// Indexing of a transient set inside the torus.
struct Restricted {
    local: Vec<u32>,
    sites: Vec<usize>,
}

const OUT: u32 = u32::MAX;

impl Restricted {
    fn new(volume: usize, member: impl Fn(usize) -> bool) -> Self {
        let mut local = vec![OUT; volume];
        let mut sites = Vec::new();
        for (s, l) in local.iter_mut().enumerate() {
            if member(s) {
                *l = sites.len() as u32;
                sites.push(s);
            }
        }
        Restricted { local, sites }
    }

    fn contains(&self, s: usize) -> bool {
        self.local[s] != OUT
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl ChainProblem {
    pub fn new(geometry: TorusGeometry, laziness: f64) -> Result<Self> {
        Self::with_cap(geometry, laziness, DEFAULT_STATE_CAP)
    }

    pub fn with_cap(geometry: TorusGeometry, laziness: f64, cap: usize) -> Result<Self> {
        if geometry.volume() > cap {
            return Err(Error::TooLarge { states: geometry.volume(), cap });
        }
        if !(0.0..=0.5).contains(&laziness) {
            return Err(Error::Invalid(format!("laziness {laziness} is outside [0, 1/2]")));
        }
        Ok(ChainProblem { geometry, laziness, cap })
    }

    fn volume(&self) -> usize {
        self.geometry.volume()
    }

    fn move_prob(&self) -> f64 {
        (1.0 - self.laziness) / (2 * self.geometry.d()) as f64
    }

    /// `out = (I - P_UU) v`.
    fn apply(&self, u: &Restricted, v: &[f64], out: &mut [f64]) {
        let q = self.move_prob();
        let stay = self.laziness;
        for (i, &s) in u.sites.iter().enumerate() {
            let mut acc = 0.0;
            for nb in self.geometry.neighbors(s) {
                let j = u.local[nb];
                if j != OUT {
                    acc += v[j as usize];
                }
            }
            out[i] = v[i] - stay * v[i] - q * acc;
        }
    }

    /// Conjugate gradients; returns the solution and relative residual.
    fn solve(&self, u: &Restricted, b: &[f64]) -> Result<(Vec<f64>, f64)> {
        let m = u.sites.len();
        let bn = norm(b);
        if bn == 0.0 {
            return Ok((vec![0.0; m], 0.0));
        }
        let mut x = vec![0.0; m];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; m];
        let mut rr = dot(&r, &r);
        let max_iter = 50 * m + 1000;
        for _ in 0..max_iter {
            if rr.sqrt() <= 1e-13 * bn {
                break;
            }
            self.apply(u, &p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..m {
                p[i] = r[i] + beta * p[i];
            }
        }
        self.apply(u, &x, &mut ap);
        let res = ap.iter().zip(b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt() / bn;
        if res.is_nan() || res > RESIDUAL_TOL {
            return Err(Error::Solver(format!("residual {res:e} above {RESIDUAL_TOL:e} on {m} unknowns")));
        }
        Ok((x, res))
    }

    fn transient(&self, absorbing: &[usize]) -> Result<Restricted> {
        let mut mask = vec![false; self.volume()];
        for &s in absorbing {
            mask[s] = true;
        }
        if absorbing.is_empty() {
            return Err(Error::Invalid("the absorbing set is empty".into()));
        }
        Ok(Restricted::new(self.volume(), |s| !mask[s]))
    }

    /// For every target `z`, `h_z(x) = P_x(first visit to targets ∪ stop is at z)`.
    ///
    /// Rows are full-length site vectors; the maximal relative residual is
    /// returned alongside.
    pub fn hitting_distribution(&self, targets: &[usize], stop: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
        let absorbing: Vec<usize> = targets.iter().chain(stop).copied().collect();
        let u = self.transient(&absorbing)?;
        let q = self.move_prob();
        let mut worst = 0.0f64;
        let mut rows = Vec::with_capacity(targets.len());
        for &z in targets {
            let mut b = vec![0.0; u.sites.len()];
            for nb in self.geometry.neighbors(z) {
                if u.contains(nb) {
                    b[u.local[nb] as usize] += q;
                }
            }
            let (x, res) = self.solve(&u, &b)?;
            worst = worst.max(res);
            let mut full = vec![0.0; self.volume()];
            for (i, &s) in u.sites.iter().enumerate() {
                full[s] = x[i];
            }
            full[z] = 1.0;
            rows.push(full);
        }
        Ok((rows, worst))
    }

    /// `P_start(X at the first visit to targets ∪ stop = z)` per target.
    pub fn exact_hitting_probability(&self, start: usize, targets: &[usize], stop: &[usize]) -> Result<(Vec<f64>, f64)> {
        let (rows, res) = self.hitting_distribution(targets, stop)?;
        Ok((rows.iter().map(|h| h[start]).collect(), res))
    }

    /// Probability of reaching `targets` before leaving `region`, for every site.
    pub fn hit_before_exit(&self, targets: &[usize], region: &[usize]) -> Result<(Vec<f64>, f64)> {
        let mut in_region = vec![false; self.volume()];
        region.iter().for_each(|&s| in_region[s] = true);
        let mut is_target = vec![false; self.volume()];
        targets.iter().for_each(|&s| is_target[s] = true);
        let u = Restricted::new(self.volume(), |s| in_region[s] && !is_target[s]);
        let q = self.move_prob();
        let mut b = vec![0.0; u.sites.len()];
        for (i, &s) in u.sites.iter().enumerate() {
            b[i] = q * self.geometry.neighbors(s).filter(|&v| is_target[v]).count() as f64;
        }
        let (x, res) = self.solve(&u, &b)?;
        let mut full = vec![0.0; self.volume()];
        for (i, &s) in u.sites.iter().enumerate() {
            full[s] = x[i];
        }
        for &z in targets {
            full[z] = 1.0;
        }
        Ok((full, res))
    }

    /// `E_x τ_targets` for every site `x`.
    pub fn exact_expected_hitting_time(&self, targets: &[usize]) -> Result<(Vec<f64>, f64)> {
        let u = self.transient(targets)?;
        let (x, res) = self.solve(&u, &vec![1.0; u.sites.len()])?;
        let mut full = vec![0.0; self.volume()];
        for (i, &s) in u.sites.iter().enumerate() {
            full[s] = x[i];
        }
        Ok((full, res))
    }

    /// Expected time to leave `region` from every site (zero outside).
    pub fn expected_exit_time(&self, region: &[usize]) -> Result<(Vec<f64>, f64)> {
        let mut inside = vec![false; self.volume()];
        region.iter().for_each(|&s| inside[s] = true);
        let u = Restricted::new(self.volume(), |s| inside[s]);
        let (x, res) = self.solve(&u, &vec![1.0; u.sites.len()])?;
        let mut full = vec![0.0; self.volume()];
        for (i, &s) in u.sites.iter().enumerate() {
            full[s] = x[i];
        }
        Ok((full, res))
    }

    /// Law of the first site outside `region` for the walk started at `start`.
    pub fn exact_exit_distribution(&self, start: usize, region: &[usize]) -> Result<(Vec<(usize, f64)>, f64)> {
        let mut inside = vec![false; self.volume()];
        region.iter().for_each(|&s| inside[s] = true);
        if !inside[start] {
            return Ok((vec![(start, 1.0)], 0.0));
        }
        let u = Restricted::new(self.volume(), |s| inside[s]);
        let mut b = vec![0.0; u.sites.len()];
        b[u.local[start] as usize] = 1.0;
        // Symmetry of P makes the solution the killed Green function G(start, .).
        let (g, res) = self.solve(&u, &b)?;
        let q = self.move_prob();
        let mut mass = vec![0.0; self.volume()];
        for (i, &s) in u.sites.iter().enumerate() {
            for nb in self.geometry.neighbors(s) {
                if !inside[nb] {
                    mass[nb] += q * g[i];
                }
            }
        }
        let out = mass.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(s, &m)| (s, m)).collect();
        Ok((out, res))
    }

    /// Worst ratio of harmonic-measure masses on leaving `outer` between two
    /// starts in `inner`.
    pub fn harnack_ratio(&self, inner: &ShapeSpec, outer: &ShapeSpec) -> Result<HarnackReport> {
        let region = outer.sites(&self.geometry);
        let starts = inner.sites(&self.geometry);
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        let mut sites: Vec<usize> = Vec::new();
        let mut residual: f64 = 0.0;
        for (k, &x) in starts.iter().enumerate() {
            let (law, res) = self.exact_exit_distribution(x, &region)?;
            residual = residual.max(res);
            if k == 0 {
                sites = law.iter().map(|e| e.0).collect();
                lo = law.iter().map(|e| e.1).collect();
                hi = lo.clone();
                continue;
            }
            for (i, (s, m)) in law.into_iter().enumerate() {
                debug_assert_eq!(sites[i], s);
                lo[i] = lo[i].min(m);
                hi[i] = hi[i].max(m);
            }
        }
        let ratio = lo.iter().zip(&hi).map(|(l, h)| h / l).fold(1.0, f64::max);
        let scale = inner.radius as f64 / outer.radius as f64;
        Ok(HarnackReport { ratio, scale, fitted_constant: (ratio - 1.0) / scale, residual })
    }

    /// `sum_{t < horizon} p^t(start, .)`.
    pub fn exact_truncated_green(&self, start: usize, horizon: usize) -> Vec<f64> {
        let mut cur = vec![0.0; self.volume()];
        cur[start] = 1.0;
        let mut acc = vec![0.0; self.volume()];
        for _ in 0..horizon {
            acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += c);
            cur = self.evolve(&cur);
        }
        acc
    }

    /// One step of the distribution.
    pub fn evolve(&self, mu: &[f64]) -> Vec<f64> {
        let q = self.move_prob();
        let mut out: Vec<f64> = mu.iter().map(|m| m * self.laziness).collect();
        for (s, &m) in mu.iter().enumerate() {
            if m != 0.0 {
                for nb in self.geometry.neighbors(s) {
                    out[nb] += q * m;
                }
            }
        }
        out
    }

    /// Distance-to-stationarity profile from the origin, `t = 0..=t_max`.
    pub fn mixing_profile(&self, t_max: usize) -> Result<MixingProfile> {
        if self.laziness == 0.0 && self.geometry.n().is_multiple_of(2) {
            return Err(Error::Invalid(
                "the walk without holding is periodic on an even torus; set laziness > 0".into(),
            ));
        }
        let vol = self.volume() as f64;
        let mut mu = vec![0.0; self.volume()];
        mu[0] = 1.0;
        let mut prof = MixingProfile { tv: Vec::new(), sep: Vec::new(), ratio_max: Vec::new() };
        for t in 0..=t_max {
            let tv = 0.5 * mu.iter().map(|p| (p - 1.0 / vol).abs()).sum::<f64>();
            let sep = mu.iter().map(|p| (p * vol - 1.0).abs()).fold(0.0, f64::max);
            let rmax = mu.iter().map(|p| p * vol).fold(0.0, f64::max);
            prof.tv.push(tv);
            prof.sep.push(sep);
            prof.ratio_max.push(rmax);
            if t < t_max {
                mu = self.evolve(&mu);
            }
        }
        Ok(prof)
    }

    /// Checks `d(t+s) <= 4 d(t) d(s)` and
    /// `max |p^{t+s}/π - 1| <= max p^s/π · d(t)` for all `t + s <= t_max`.
    pub fn mixing_decay_check(&self, t_max: usize) -> Result<MixingCheck> {
        let prof = self.mixing_profile(t_max)?;
        let mut worst_tv = 0.0f64;
        let mut worst_unif = 0.0f64;
        for t in 1..=t_max {
            for s in 1..=(t_max - t) {
                let bound = 4.0 * prof.tv[t] * prof.tv[s];
                if bound > 0.0 {
                    worst_tv = worst_tv.max(prof.tv[t + s] / bound);
                }
                let ub = prof.ratio_max[s] * prof.tv[t];
                if ub > 0.0 {
                    worst_unif = worst_unif.max(prof.sep[t + s] / ub);
                }
            }
        }
        Ok(MixingCheck { profile: prof, worst_tv_ratio: worst_tv, worst_uniform_ratio: worst_unif })
    }

    /// Exact excursion structure of an annulus.
    pub fn exit_chain(&self, spec: &AnnulusSpec) -> Result<ExitChain> {
        spec.validate(&self.geometry)?;
        let g = &self.geometry;
        let inner = spec.inner.sites(g);
        let entry_sites = spec.inner.boundary(g);
        let outer = spec.outer.sites(g);
        let mut in_outer = vec![false; self.volume()];
        outer.iter().for_each(|&s| in_outer[s] = true);
        let mut exit_sites: Vec<usize> = outer
            .iter()
            .flat_map(|&s| g.neighbors(s).collect::<Vec<_>>())
            .filter(|&v| !in_outer[v])
            .collect();
        exit_sites.sort_unstable();
        exit_sites.dedup();

        let mut worst = 0.0f64;
        // Entry law on ∂E from each exit site.
        let stop: Vec<usize> = inner.iter().copied().filter(|s| !entry_sites.contains(s)).collect();
        let (h, res) = self.hitting_distribution(&entry_sites, &stop)?;
        worst = worst.max(res);
        let entry: Vec<Vec<f64>> = exit_sites.iter().map(|&b| h.iter().map(|row| row[b]).collect()).collect();
        // Exit law from each entry site.
        let mut exit = Vec::with_capacity(entry_sites.len());
        for &a in &entry_sites {
            let (dist, res) = self.exact_exit_distribution(a, &outer)?;
            worst = worst.max(res);
            let mut row = vec![0.0; exit_sites.len()];
            for (s, p) in dist {
                let i = exit_sites.binary_search(&s).map_err(|_| Error::Solver("exit outside the frontier".into()))?;
                row[i] = p;
            }
            exit.push(row);
        }
        let m = exit_sites.len();
        let mut kernel = vec![vec![0.0; m]; m];
        for (bi, krow) in kernel.iter_mut().enumerate() {
            for (ai, &pe) in entry[bi].iter().enumerate() {
                if pe > 0.0 {
                    for (ci, &px) in exit[ai].iter().enumerate() {
                        krow[ci] += pe * px;
                    }
                }
            }
        }
        let stationary = stationary_vector(&kernel)?;
        let entry_law: Vec<f64> = (0..entry_sites.len())
            .map(|ai| (0..m).map(|bi| stationary[bi] * entry[bi][ai]).sum())
            .collect();

        let (to_inner, res) = self.exact_expected_hitting_time(&inner)?;
        worst = worst.max(res);
        let (exit_time, res) = self.expected_exit_time(&outer)?;
        worst = worst.max(res);
        let duration_from: Vec<f64> = exit_sites
            .iter()
            .enumerate()
            .map(|(bi, &b)| to_inner[b] + entry_sites.iter().enumerate().map(|(ai, &a)| entry[bi][ai] * exit_time[a]).sum::<f64>())
            .collect();
        let mean_duration = dot(&stationary, &duration_from);
        Ok(ExitChain {
            exit_sites,
            entry_sites,
            outer,
            entry,
            exit,
            kernel,
            stationary,
            entry_law,
            duration_from,
            mean_duration,
            residual: worst,
        })
    }
}

fn stationary_vector(kernel: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = kernel.len();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..100_000 {
        let mut next = vec![0.0; m];
        for (i, row) in kernel.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                next[j] += pi[i] * k;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-14 {
            return Ok(pi);
        }
    }
    Err(Error::Solver("exit chain power iteration did not converge".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    /// `max_b max_{x,y} f_b(x) / f_b(y)`.
    pub ratio: f64,
    /// `r / R`.
    pub scale: f64,
    /// `(ratio - 1) R / r`.
    pub fitted_constant: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    /// `||p^t(0, .) - π||_TV`.
    pub tv: Vec<f64>,
    /// `max_y |p^t(0, y)/π(y) - 1|`.
    pub sep: Vec<f64>,
    /// `max_y p^t(0, y)/π(y)`.
    pub ratio_max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingCheck {
    pub profile: MixingProfile,
    /// Largest `d(t+s) / (4 d(t) d(s))`; at most 1 when the bound holds.
    pub worst_tv_ratio: f64,
    pub worst_uniform_ratio: f64,
}

/// Exact exit-point chain of an annulus: from the first site outside `F`
/// to the entry point on `∂E` and out again.
#[derive(Clone, Debug)]
pub struct ExitChain {
    pub exit_sites: Vec<usize>,
    pub entry_sites: Vec<usize>,
    pub outer: Vec<usize>,
    /// `entry[b][a] = P_b(enter ∂E at a)`.
    pub entry: Vec<Vec<f64>>,
    /// `exit[a][b] = P_a(leave F at b)`.
    pub exit: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
    /// Entry law on `∂E` under the stationary exit chain.
    pub entry_law: Vec<f64>,
    /// Expected excursion length started from each exit site.
    pub duration_from: Vec<f64>,
    pub mean_duration: f64,
    pub residual: f64,
}

impl ExitChain {
    /// Per-entry and stationary-averaged chance of visiting `targets`
    /// before leaving the outer shape.
    pub fn hit_probability(&self, problem: &ChainProblem, targets: &[usize]) -> Result<(Vec<f64>, f64)> {
        let (h, _) = problem.hit_before_exit(targets, &self.outer)?;
        let per: Vec<f64> = self.entry_sites.iter().map(|&a| h[a]).collect();
        let avg = dot(&per, &self.entry_law);
        Ok((per, avg))
    }

    pub fn stationary_of(&self, site: usize) -> f64 {
        self.exit_sites.binary_search(&site).map_or(0.0, |i| self.stationary[i])
    }
}

/// Stored oracle output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub problem: serde_json::Value,
    pub value: serde_json::Value,
    pub residual: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl Fixture {
    pub fn new(problem: serde_json::Value, value: serde_json::Value, residual: f64) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Fixture { problem, value, residual, timestamp }
    }
}
