//! Lattice Green function, return probability, hitting-probability
//! predictions and the threshold exponents built from them.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_li, ln_gamma};

use crate::error::{Error, Result};
use crate::lattice::round_half_up;
use crate::rng;

/// Default time horizon for the convolution route.
pub const DEFAULT_HORIZON: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GreenMethod {
    /// Exact `t`-step kernels for `t <= horizon` plus a local-limit tail.
    ExactConvolution { horizon: usize },
    /// Visits counted before leaving a ball of radius `radius`, corrected
    /// for the visits after escape.
    MonteCarlo { samples: u64, radius: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenValue {
    pub value: f64,
    pub error_bound: f64,
}

/// `ln k!` for `k <= max`.
fn ln_factorials(max: usize) -> Vec<f64> {
    let mut v = vec![0.0; max + 1];
    for k in 1..=max {
        v[k] = v[k - 1] + (k as f64).ln();
    }
    v
}

/// Probability that a one-dimensional walk sits at `m` after `k` steps.
fn one_dim(lf: &[f64], k: usize, m: usize) -> f64 {
    if m > k || (k + m) % 2 == 1 {
        return 0.0;
    }
    let up = (k + m) / 2;
    (lf[k] - lf[up] - lf[k - up] - k as f64 * std::f64::consts::LN_2).exp()
}

/// `p^t(0, x)` for `t = 0..=horizon`.
///
/// Coordinates are added one at a time: with `j` active axes the number of
/// steps spent on the newest one is Binomial(t, 1/j).
pub fn return_kernel(x: &[i64], horizon: usize) -> Vec<f64> {
    let lf = ln_factorials(horizon);
    // G is invariant under axis permutations and reflections.
    let mut ax: Vec<usize> = x.iter().map(|c| c.unsigned_abs() as usize).collect();
    ax.sort_unstable();
    let mut q: Vec<f64> = (0..=horizon).map(|t| one_dim(&lf, t, ax[0])).collect();
    for (j, &m) in ax.iter().enumerate().skip(1) {
        let p = 1.0 / (j + 1) as f64;
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        let prev = q;
        q = vec![0.0; horizon + 1];
        for (t, qt) in q.iter_mut().enumerate() {
            let tf = t as f64;
            let sd = (tf * p * (1.0 - p)).sqrt();
            let lo = ((tf * p - 12.0 * sd - 2.0).floor().max(0.0)) as usize;
            let hi = ((tf * p + 12.0 * sd + 2.0).ceil() as usize).min(t);
            let mut s = 0.0;
            let mut k = lo.max(m);
            if (k + m) % 2 == 1 {
                k += 1;
            }
            while k <= hi {
                let rest = prev[t - k];
                if rest > 0.0 {
                    let b = (lf[t] - lf[k] - lf[t - k] + k as f64 * lp + (t - k) as f64 * lq).exp();
                    s += b * one_dim(&lf, k, m) * rest;
                }
                k += 2;
            }
            *qt = s;
        }
    }
    q
}

/// Local-limit estimate of `sum_{t > horizon} p^t(0, x)`.
fn lclt_tail(d: usize, x2: f64, horizon: usize) -> f64 {
    let h = d as f64 / 2.0;
    let pref = (d as f64 / (2.0 * std::f64::consts::PI)).powf(h);
    // Terms of one parity, each standing for an interval of length 2.
    let u0 = 1.0 / horizon as f64;
    let a = d as f64 * x2 / 2.0;
    if a == 0.0 {
        pref * u0.powf(h - 1.0) / (h - 1.0)
    } else {
        pref * a.powf(1.0 - h) * gamma_li(h - 1.0, a * u0)
    }
}

/// Green function `G(x) = sum_t p^t(0, x)` of simple random walk on `Z^d`.
pub fn green_function(d: usize, x: &[i64], method: &GreenMethod) -> Result<GreenValue> {
    if d < 3 {
        return Err(Error::Invalid(format!("the Green function is finite only for d >= 3, got {d}")));
    }
    if x.len() != d {
        return Err(Error::Invalid(format!("point has {} coordinates, expected {d}", x.len())));
    }
    match method {
        GreenMethod::ExactConvolution { horizon } => {
            let x2: i64 = x.iter().map(|c| c * c).sum();
            let l1: i64 = x.iter().map(|c| c.abs()).sum();
            if (*horizon as i64) < 4 * x2.max(l1) {
                return Err(Error::Invalid(format!("horizon {horizon} is too short for |x|^2 = {x2}")));
            }
            let kern = return_kernel(x, *horizon);
            let head: f64 = kern.iter().sum();
            let tail = lclt_tail(d, x2 as f64, *horizon);
            let error_bound = tail * (2.0 * d as f64 + x2 as f64) / *horizon as f64 + 1e-12;
            Ok(GreenValue { value: head + tail, error_bound })
        }
        GreenMethod::MonteCarlo { samples, radius, seed } => monte_carlo_green(d, x, *samples, *radius, *seed),
    }
}

/// Asymptotic constant of `G(x) ~ c_d |x|^{2-d}` from its closed form; only
/// used to correct the Monte Carlo route for escaped visits.
pub fn c_d_closed_form(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    d as f64 * ln_gamma(h - 1.0).exp() / (2.0 * std::f64::consts::PI.powf(h))
}

fn monte_carlo_green(d: usize, x: &[i64], samples: u64, radius: usize, seed: u64) -> Result<GreenValue> {
    let x2: i64 = x.iter().map(|c| c * c).sum();
    if samples < 2 || (radius as i64).pow(2) <= 4 * x2 {
        return Err(Error::Invalid("need at least two samples and a radius well beyond |x|".into()));
    }
    let r2 = (radius * radius) as i64;
    let cd = c_d_closed_form(d);
    let per: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut g = rng::stream(seed, rng::lane::AUX, s);
            let mut pos = vec![0i64; d];
            let mut norm2 = 0i64;
            let mut visits = 0u64;
            while norm2 <= r2 {
                if pos == x {
                    visits += 1;
                }
                let dir = g.random_range(0..2 * d);
                let a = dir >> 1;
                let step = if dir & 1 == 0 { 1 } else { -1 };
                norm2 += 2 * step * pos[a] + 1;
                pos[a] += step;
            }
            let e2: i64 = pos.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
            visits as f64 + cd / (e2 as f64).powf(d as f64 / 2.0 - 1.0)
        })
        .collect();
    let est = crate::stats::Estimate::from_samples(&per);
    let model = cd / (radius as f64).powi(d as i32);
    Ok(GreenValue { value: est.mean, error_bound: 3.0 * est.std_err + model })
}

/// Probability that the walk on `Z^d` ever returns to its start.
pub fn return_probability(d: usize) -> Result<f64> {
    Ok(1.0 - 1.0 / green_at_origin(d)?)
}

fn cache() -> &'static Mutex<HashMap<usize, Constants>> {
    static C: OnceLock<Mutex<HashMap<usize, Constants>>> = OnceLock::new();
    C.get_or_init(|| Mutex::new(HashMap::new()))
}

fn green_at_origin(d: usize) -> Result<f64> {
    if let Some(c) = cache().lock().expect("cache").get(&d) {
        return Ok(c.g0);
    }
    Ok(green_function(d, &vec![0; d], &GreenMethod::ExactConvolution { horizon: DEFAULT_HORIZON })?.value)
}

/// `(alpha0, alpha1, kappa)` for dimension `d` with return probability `p_d`.
pub fn thresholds(d: usize, p_d: f64) -> (f64, f64, usize) {
    let kappa = d.min(6);
    let (k, df) = (kappa as f64, d as f64);
    let alpha0 = (1.0 + p_d) / 2.0;
    let alpha1 = ((k - 2.0) * df + df * k) / ((k - 2.0) * (df + 1.0) + df * k);
    (alpha0, alpha1, kappa)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Bound on the truncation error of `G0`.
    pub g0_error: f64,
    /// Largest residual of the `c_d` fit, relative to `c_d`.
    pub c_d_fit_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub d: usize,
    #[serde(rename = "G0")]
    pub g0: f64,
    pub p_d: f64,
    pub c_d: f64,
    #[serde(rename = "C_d")]
    pub big_c_d: f64,
    pub kappa: usize,
    pub alpha0: f64,
    pub alpha1: f64,
    pub method: String,
    pub tolerances: Tolerances,
}

/// Axis points used to fit `c_d`.
const FIT_RADII: [i64; 5] = [4, 6, 8, 10, 12];

/// Fits `G(x)|x|^{d-2} = c_d + b |x|^{-2}` along the first axis.
pub fn fit_c_d(d: usize, horizon: usize) -> Result<(f64, f64)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &k in &FIT_RADII {
        let mut p = vec![0i64; d];
        p[0] = k;
        let g = green_function(d, &p, &GreenMethod::ExactConvolution { horizon })?.value;
        xs.push(1.0 / (k * k) as f64);
        ys.push(g * (k as f64).powi(d as i32 - 2));
    }
    let fit = crate::stats::fit_line(&xs, &ys);
    let resid = xs
        .iter()
        .zip(&ys)
        .map(|(a, b)| (b - fit.intercept - fit.slope * a).abs())
        .fold(0.0, f64::max);
    Ok((fit.intercept, resid / fit.intercept))
}

/// All constants for dimension `d`, computed once per process.
pub fn constants(d: usize) -> Result<Constants> {
    if let Some(c) = cache().lock().expect("cache").get(&d) {
        return Ok(c.clone());
    }
    let method = GreenMethod::ExactConvolution { horizon: DEFAULT_HORIZON };
    let g = green_function(d, &vec![0; d], &method)?;
    let p_d = 1.0 - 1.0 / g.value;
    let (c_d, fit_resid) = fit_c_d(d, DEFAULT_HORIZON)?;
    let (alpha0, alpha1, kappa) = thresholds(d, p_d);
    let c = Constants {
        d,
        g0: g.value,
        p_d,
        c_d,
        big_c_d: c_d / g.value,
        kappa,
        alpha0,
        alpha1,
        method: format!("exact_convolution(horizon={DEFAULT_HORIZON})"),
        tolerances: Tolerances { g0_error: g.error_bound, c_d_fit_residual: fit_resid },
    };
    cache().lock().expect("cache").insert(d, c.clone());
    Ok(c)
}

/// Leading term and relative error scale of a hitting probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitPrediction {
    pub leading: f64,
    /// Relative error scale `r/R + 1/r^2 + |z|/r` (all constants set to 1).
    pub error_band: f64,
}

impl HitPrediction {
    pub fn contains(&self, x: f64) -> bool {
        (x / self.leading - 1.0).abs() <= self.error_band
    }
}

fn check_radii(r: f64, big_r: f64, strict: bool) -> Result<()> {
    let ok = if strict { big_r > 2.0 * r } else { big_r >= 2.0 * r };
    if !(r >= 1.0 && ok) {
        let rel = if strict { ">" } else { ">=" };
        return Err(Error::Hypothesis(format!("need r >= 1 and R {rel} 2r, got r = {r}, R = {big_r}")));
    }
    Ok(())
}

/// Chance that one excursion from `∂B(0,r)` to `∂B(0,R)` hits `z`.
pub fn predict_hit_prob(c: &Constants, r: f64, big_r: f64, z_norm: f64) -> Result<HitPrediction> {
    check_radii(r, big_r, false)?;
    if z_norm > r / 4.0 {
        return Err(Error::Hypothesis(format!("|z| = {z_norm} exceeds r/4 = {}", r / 4.0)));
    }
    Ok(HitPrediction {
        leading: c.big_c_d / r.powi(c.d as i32 - 2),
        error_band: r / big_r + 1.0 / (r * r) + z_norm / r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub leading: f64,
    pub error_band: f64,
    /// Leading pair term over twice the single-point term.
    pub ratio_to_single: f64,
    /// For non-adjacent pairs the leading term is only a lower bound.
    pub lower_bound_only: bool,
}

/// Chance that one excursion hits at least one of two points near the centre.
pub fn predict_pair_hit(c: &Constants, r: f64, big_r: f64, adjacent: bool) -> Result<PairPrediction> {
    check_radii(r, big_r, true)?;
    let ratio = 1.0 / (1.0 + c.p_d);
    let single = c.big_c_d / r.powi(c.d as i32 - 2);
    Ok(PairPrediction {
        leading: 2.0 * single * ratio,
        error_band: r / big_r + 1.0 / (r * r),
        ratio_to_single: ratio,
        lower_bound_only: !adjacent,
    })
}

/// Step size `r^{(2-d)/2} n^psi` used in the concentration bands.
pub fn delta_for(r: f64, n: usize, d: usize, psi: f64) -> f64 {
    r.powf((2.0 - d as f64) / 2.0) * (n as f64).powf(psi)
}

/// Radii `(round(n^{2 phi / kappa}), round(n^phi))` of the reference clock.
pub fn star_radii(n: usize, d: usize, phi: f64) -> Result<(usize, usize)> {
    let kappa = d.min(6) as f64;
    let nf = n as f64;
    let r = round_half_up(nf.powf(2.0 * phi / kappa));
    let big_r = round_half_up(nf.powf(phi));
    if r < 2 {
        return Err(Error::Hypothesis(format!(
            "inner radius round(n^(2 phi / kappa)) = {r} < 2 at n = {n}, phi = {phi}"
        )));
    }
    if big_r < 2 * r {
        return Err(Error::Hypothesis(format!("outer radius {big_r} is below twice the inner radius {r}")));
    }
    Ok((r, big_r))
}

/// Reference clock `log(n^d) T / p`.
pub fn t_star(n: usize, d: usize, t_hat: f64, p_hat: f64) -> Result<f64> {
    if !(t_hat > 0.0 && p_hat > 0.0 && p_hat <= 1.0) {
        return Err(Error::Invalid(format!("need T > 0 and p in (0, 1], got T = {t_hat}, p = {p_hat}")));
    }
    Ok(d as f64 * (n as f64).ln() * t_hat / p_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent route: `G(0) = d * int_0^inf (e^{-s} I_0(s))^d ds`.
    fn watson(d: usize) -> f64 {
        let bessel = |s: f64| {
            let m = 400;
            let h = std::f64::consts::PI / m as f64;
            let mut acc = 0.0;
            for i in 0..=m {
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                acc += w * (s * ((i as f64 * h).cos() - 1.0)).exp();
            }
            acc * h / std::f64::consts::PI
        };
        let (s_max, steps) = (4000.0f64, 400_000);
        // Simpson in u = sqrt(s) to tame the slow decay.
        let f = |u: f64| 2.0 * u * bessel(u * u).powi(d as i32);
        let umax = s_max.sqrt();
        let h = umax / steps as f64;
        let mut acc = f(0.0) + f(umax);
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let head = acc * h / 3.0;
        let k = d as f64 / 2.0;
        let tail = (2.0 * std::f64::consts::PI).powf(-k) * s_max.powf(1.0 - k) / (k - 1.0);
        d as f64 * (head + tail)
    }

    #[test]
    fn one_dim_kernel_sums_to_one() {
        let lf = ln_factorials(40);
        let s: f64 = (0..=40).map(|m| one_dim(&lf, 40, m) * if m == 0 { 1.0 } else { 2.0 }).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_matches_direct_enumeration() {
        // Brute-force distribution of a 3d walk after t steps.
        let t = 8usize;
        let mut dist: HashMap<[i64; 3], f64> = HashMap::new();
        dist.insert([0, 0, 0], 1.0);
        for _ in 0..t {
            let mut next = HashMap::new();
            for (p, w) in &dist {
                for a in 0..3 {
                    for s in [-1, 1] {
                        let mut q = *p;
                        q[a] += s;
                        *next.entry(q).or_insert(0.0) += w / 6.0;
                    }
                }
            }
            dist = next;
        }
        for x in [[0i64, 0, 0], [2, 0, 0], [1, 1, 2], [-1, 3, 0]] {
            let k = return_kernel(&x, t);
            assert!((k[t] - dist.get(&x).copied().unwrap_or(0.0)).abs() < 1e-14, "{x:?}");
        }
    }

    #[test]
    fn g0_in_three_dimensions() {
        let g = green_function(3, &[0, 0, 0], &GreenMethod::ExactConvolution { horizon: DEFAULT_HORIZON }).unwrap();
        let w = watson(3);
        assert!((g.value - w).abs() < 1e-4, "{} vs {}", g.value, w);
        assert!((g.value - 1.5164).abs() < 1e-3);
        assert!(g.error_bound < 1e-4);
        let p = return_probability(3).unwrap();
        assert!((p - 0.34).abs() < 0.01);
    }

    #[test]
    fn green_is_symmetric_and_decays_like_inverse_distance() {
        let m = GreenMethod::ExactConvolution { horizon: 6000 };
        let a = green_function(3, &[1, 2, 3], &m).unwrap().value;
        let b = green_function(3, &[3, -1, 2], &m).unwrap().value;
        assert_eq!(a, b);
        let m = GreenMethod::ExactConvolution { horizon: DEFAULT_HORIZON };
        let g8 = green_function(3, &[8, 0, 0], &m).unwrap().value * 8.0;
        let g16 = green_function(3, &[16, 0, 0], &m).unwrap().value * 16.0;
        assert!((g8 / g16 - 1.0).abs() < 0.05, "{g8} {g16}");
    }

    #[test]
    fn fitted_c_d_matches_closed_form() {
        for d in [3, 4] {
            let (c, resid) = fit_c_d(d, DEFAULT_HORIZON).unwrap();
            let exact = c_d_closed_form(d);
            assert!((c / exact - 1.0).abs() < 5e-3, "d = {d}: {c} vs {exact}");
            assert!(resid < 1e-2);
        }
    }

    #[test]
    fn green_is_harmonic_off_the_origin() {
        // G(0) - 1 is the mean of G over the neighbours of 0.
        let m = GreenMethod::ExactConvolution { horizon: DEFAULT_HORIZON };
        let g0 = green_function(3, &[0, 0, 0], &m).unwrap().value;
        let g1 = green_function(3, &[1, 0, 0], &m).unwrap().value;
        assert!((g0 - 1.0 - g1).abs() < 1e-6);
    }

    #[test]
    fn return_probability_decreases_with_dimension() {
        let ps: Vec<f64> = (3..=6).map(|d| return_probability(d).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]), "{ps:?}");
    }

    #[test]
    fn thresholds_in_three_dimensions() {
        let c = constants(3).unwrap();
        assert!((c.alpha1 - 12.0 / 13.0).abs() < 1e-12);
        assert!((c.alpha0 - (1.0 + c.p_d) / 2.0).abs() < 1e-15);
        assert!(c.alpha0 < c.alpha1 && c.alpha0 > 0.5);
        let json = serde_json::to_value(&c).unwrap();
        for key in ["d", "G0", "p_d", "C_d", "alpha0", "alpha1", "method", "tolerances"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn pair_prediction_ratio() {
        let c = constants(3).unwrap();
        let single = predict_hit_prob(&c, 4.0, 16.0, 0.0).unwrap();
        let pair = predict_pair_hit(&c, 4.0, 16.0, true).unwrap();
        assert!((pair.leading / (2.0 * single.leading) - 1.0 / (1.0 + c.p_d)).abs() < 1e-12);
        assert!(predict_hit_prob(&c, 4.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn star_radii_require_room() {
        assert_eq!(star_radii(16, 3, 0.65).unwrap(), (3, 6));
        assert!(star_radii(16, 3, 0.1).is_err());
    }
}
