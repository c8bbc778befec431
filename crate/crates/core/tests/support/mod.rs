//! Invariant checks shared by the property suite and the acceptance gate.
//! Each returns `Err` with a description of the first violation.
#![allow(dead_code)]

use latewalk::excursion::{count_excursions, decompose_excursions, geometric_moment, geometric_moment_bound};
use latewalk::latepoints::{sample_bernoulli_field, sample_uncovered_at, sample_uniform_subset};
use latewalk::lattice::{AnnulusMap, AnnulusSpec, Point, TorusGeometry};
use latewalk::oracle::ChainProblem;
use latewalk::potential;
use latewalk::stats::chi_square;
use latewalk::walk::{run_tracked, uncovered_set, WalkConfig, Walker};

pub type Check = Result<(), String>;

fn geom(n: usize) -> TorusGeometry {
    TorusGeometry::new(n, 3).expect("geometry")
}

/// Ball annuli `(r, small_r)` and `(r, big_r)` share the inner ball, so every
/// excursion across the small annulus lies inside one across the large one.
pub fn nesting(n: usize, seed: u64, steps: u64, r: usize, small_r: usize, big_r: usize) -> Check {
    let g = geom(n);
    let c = Point(vec![n / 2; 3]);
    let small = AnnulusMap::new(&g, &AnnulusSpec::balls(c.clone(), r, small_r)).map_err(|e| e.to_string())?;
    let big = AnnulusMap::new(&g, &AnnulusSpec::balls(c, r, big_r)).map_err(|e| e.to_string())?;
    let path = Walker::new(&WalkConfig::new(g, seed), 0).trajectory(steps);
    let thin = decompose_excursions(&path, &small, &[]);
    let wide = decompose_excursions(&path, &big, &[]);
    if thin.tau0() != wide.tau0() {
        return Err(format!("first entries differ: {:?} vs {:?}", thin.tau0(), wide.tau0()));
    }
    if wide.records.is_empty() {
        return Err(format!("no complete large excursion in {steps} steps"));
    }
    let mut total = 0;
    for (k, b) in wide.records.iter().enumerate() {
        let w = thin.records.iter().filter(|s| s.tau >= b.tau && s.sigma <= b.sigma).count();
        if w == 0 {
            return Err(format!("large excursion {k} contains no small excursion"));
        }
        total += w;
    }
    let last = wide.records.last().map_or(0, |b| b.sigma);
    let before = thin.records.iter().filter(|s| s.sigma <= last).count();
    if total != before {
        return Err(format!("nested counts sum to {total}, but {before} small excursions end by the last large exit"));
    }
    for s in &thin.records {
        let inside = wide.records.iter().any(|b| s.tau >= b.tau && s.sigma <= b.sigma)
            || wide.partial.is_some_and(|(tau, _)| s.tau >= tau);
        if !inside {
            return Err(format!("small excursion at {} is not inside a large one", s.tau));
        }
    }
    Ok(())
}

/// `U(t2) ⊆ U(t1)` for `t1 <= t2`.
pub fn uncovered_monotone(n: usize, seed: u64, t1: u64, t2: u64) -> Check {
    let (t1, t2) = (t1.min(t2), t1.max(t2));
    let g = geom(n);
    let (_, tr) = run_tracked(&WalkConfig::new(g.clone(), seed), 0, t2, true);
    let early = uncovered_set(&tr, g.volume(), t1).map_err(|e| e.to_string())?;
    let late = uncovered_set(&tr, g.volume(), t2).map_err(|e| e.to_string())?;
    match late.iter().find(|s| early.binary_search(s).is_err()) {
        Some(s) => Err(format!("site {s} uncovered at {t2} but covered at {t1}")),
        None => Ok(()),
    }
}

/// Same seed and replica give the same path and the same late-point set.
pub fn replay(n: usize, seed: u64, replica: u64) -> Check {
    let cfg = WalkConfig::new(geom(n), seed);
    if Walker::new(&cfg, replica).trajectory(2000) != Walker::new(&cfg, replica).trajectory(2000) {
        return Err("trajectories differ".into());
    }
    let t = (n * n * n) as f64;
    let a = sample_uncovered_at(&cfg, replica, 0.5, t).map_err(|e| e.to_string())?;
    let b = sample_uncovered_at(&cfg, replica, 0.5, t).map_err(|e| e.to_string())?;
    if a != b {
        return Err("uncovered sets differ".into());
    }
    Ok(())
}

fn mask(sites: &[usize]) -> usize {
    sites.iter().map(|&s| 1usize << s).sum()
}

/// Joint law of the Bernoulli field on the 8-site torus against the product law.
pub fn bernoulli_law(p: f64, seed: u64, samples: u64) -> Check {
    let g = geom(2);
    let mut counts = vec![0u64; 256];
    for k in 0..samples {
        counts[mask(&sample_bernoulli_field(&g, p, seed, k).map_err(|e| e.to_string())?.sites)] += 1;
    }
    let probs: Vec<f64> = (0..256u32)
        .map(|m| p.powi(m.count_ones() as i32) * (1.0 - p).powi(8 - m.count_ones() as i32))
        .collect();
    let (chi, pv) = chi_square(&counts, &probs);
    if pv > 1e-3 {
        Ok(())
    } else {
        Err(format!("Bernoulli({p}) joint law: chi-square {chi:.1}, p {pv:.2e}"))
    }
}

/// Law of the uniform `m`-subset of the 8-site torus against uniform on subsets.
pub fn uniform_subset_law(m: usize, seed: u64, samples: u64) -> Check {
    let g = geom(2);
    let mut counts = vec![0u64; 256];
    for k in 0..samples {
        let f = sample_uniform_subset(&g, m, seed, k).map_err(|e| e.to_string())?;
        if f.len() != m {
            return Err(format!("subset of size {} instead of {m}", f.len()));
        }
        counts[mask(&f.sites)] += 1;
    }
    let support: Vec<usize> = (0..256).filter(|x: &usize| x.count_ones() as usize == m).collect();
    let observed: Vec<u64> = support.iter().map(|&x| counts[x]).collect();
    let probs = vec![1.0 / support.len() as f64; support.len()];
    let (chi, pv) = chi_square(&observed, &probs);
    if pv > 1e-3 {
        Ok(())
    } else {
        Err(format!("uniform {m}-subset law: chi-square {chi:.1}, p {pv:.2e}"))
    }
}

/// `E[X^j] <= j!/p^j` for `j <= 6`.
pub fn geometric_moments(p: f64) -> Check {
    for j in 1..=6 {
        let m = geometric_moment(j, p);
        let b = geometric_moment_bound(j, p);
        if m > b * (1.0 + 1e-12) {
            return Err(format!("E[X^{j}] = {m} exceeds {b} at p = {p}"));
        }
    }
    Ok(())
}

/// `d(t+s) <= 4 d(t) d(s)` and the pointwise ratio bound on the lazy chain.
pub fn mixing_submultiplicative(n: usize, laziness: f64, t_max: usize) -> Check {
    let problem = ChainProblem::new(geom(n), laziness).map_err(|e| e.to_string())?;
    let c = problem.mixing_decay_check(t_max).map_err(|e| e.to_string())?;
    if c.worst_tv_ratio <= 1.0 + 1e-9 && c.worst_uniform_ratio <= 1.0 + 1e-9 {
        Ok(())
    } else {
        Err(format!(
            "n = {n}, laziness {laziness}: ratios {:.6} and {:.6} exceed 1",
            c.worst_tv_ratio, c.worst_uniform_ratio
        ))
    }
}

/// `α0(d) <= α1(d)` and `α0(d) > 1/2`.
pub fn thresholds_ordered(d: usize) -> Check {
    let p = potential::return_probability(d).map_err(|e| e.to_string())?;
    let (a0, a1, _) = potential::thresholds(d, p);
    if a0 <= a1 && a0 > 0.5 {
        Ok(())
    } else {
        Err(format!("d = {d}: alpha0 {a0:.5}, alpha1 {a1:.5}"))
    }
}

/// Excursion count is nondecreasing in `t` and nonincreasing in `R`.
pub fn counter_monotone(n: usize, seed: u64, t1: u64, t2: u64, r: usize, small_r: usize, big_r: usize) -> Check {
    let (t1, t2) = (t1.min(t2), t1.max(t2));
    let g = geom(n);
    let c = Point(vec![n / 2; 3]);
    let cfg = WalkConfig::new(g, seed);
    let small = AnnulusSpec::balls(c.clone(), r, small_r);
    let big = AnnulusSpec::balls(c, r, big_r);
    let count = |spec: &AnnulusSpec, t| count_excursions(&cfg, 0, spec, t).map_err(|e| e.to_string());
    let (a, b) = (count(&small, t1)?, count(&small, t2)?);
    if a > b {
        return Err(format!("count fell from {a} to {b} between t = {t1} and {t2}"));
    }
    let wide = count(&big, t2)?;
    if wide > b {
        return Err(format!("R = {big_r} gives {wide} excursions, more than {b} at R = {small_r}"));
    }
    Ok(())
}
