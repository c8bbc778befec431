//! Torus geometry, shapes, annuli and the box decomposition.
//!
//! Sites are stored as flat indices; coordinate `i` has stride `n^i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest torus we agree to index.
pub const MAX_SITES: usize = 1 << 32;

/// Nearest integer with ties going up; used for every `n^x` size.
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point(pub Vec<usize>);

impl Point {
    pub fn origin(d: usize) -> Self {
        Point(vec![0; d])
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclid,
    Linf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGeometry {
    n: usize,
    d: usize,
    volume: usize,
    strides: Vec<usize>,
}

impl TorusGeometry {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Geometry(format!("side n = {n} must be at least 2")));
        }
        if d < 3 {
            return Err(Error::Geometry(format!("dimension d = {d} must be at least 3")));
        }
        let mut strides = Vec::with_capacity(d);
        let mut volume: usize = 1;
        for _ in 0..d {
            strides.push(volume);
            volume = volume
                .checked_mul(n)
                .filter(|&v| v <= MAX_SITES)
                .ok_or_else(|| Error::Geometry(format!("n^d = {n}^{d} exceeds {MAX_SITES} sites")))?;
        }
        Ok(TorusGeometry { n, d, volume, strides })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of sites, `n^d`.
    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn index(&self, p: &Point) -> usize {
        debug_assert_eq!(p.0.len(), self.d);
        p.0.iter().zip(&self.strides).map(|(&c, &s)| (c % self.n) * s).sum()
    }

    pub fn point(&self, idx: usize) -> Point {
        let mut c = vec![0; self.d];
        self.coords_into(idx, &mut c);
        Point(c)
    }

    pub fn coords_into(&self, mut idx: usize, buf: &mut [usize]) {
        for c in buf.iter_mut().take(self.d) {
            *c = idx % self.n;
            idx /= self.n;
        }
    }

    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.n
    }

    /// Neighbour in direction `dir`: `2i` steps `+e_i`, `2i+1` steps `-e_i`.
    pub fn neighbor(&self, idx: usize, dir: usize) -> usize {
        let axis = dir >> 1;
        let s = self.strides[axis];
        let c = (idx / s) % self.n;
        if dir & 1 == 0 {
            if c + 1 == self.n {
                idx - c * s
            } else {
                idx + s
            }
        } else if c == 0 {
            idx + (self.n - 1) * s
        } else {
            idx - s
        }
    }

    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        (0..2 * self.d).map(move |dir| self.neighbor(idx, dir))
    }

    /// Site reached from `idx` by the signed offset `off`.
    pub fn translate(&self, idx: usize, off: &[i64]) -> usize {
        let n = self.n as i64;
        let mut out = 0;
        for (axis, &o) in off.iter().enumerate() {
            let c = self.coord(idx, axis) as i64;
            out += ((c + o).rem_euclid(n) as usize) * self.strides[axis];
        }
        out
    }

    /// Per-axis wrapped distance `min(|a-b|, n-|a-b|)`.
    pub fn axis_gap(&self, a: usize, b: usize) -> usize {
        let g = a.abs_diff(b) % self.n;
        g.min(self.n - g)
    }

    pub fn distance(&self, a: &Point, b: &Point, metric: Metric) -> f64 {
        let gaps = a.0.iter().zip(&b.0).map(|(&x, &y)| self.axis_gap(x, y));
        match metric {
            Metric::Euclid => (gaps.map(|g| (g * g) as f64).sum::<f64>()).sqrt(),
            Metric::Linf => gaps.max().unwrap_or(0) as f64,
        }
    }

    /// Squared Euclidean torus distance between two site indices.
    pub fn dist2(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        let mut s = 0;
        for _ in 0..self.d {
            let g = self.axis_gap(a % self.n, b % self.n);
            s += g * g;
            a /= self.n;
            b /= self.n;
        }
        s
    }

    pub fn site_distance(&self, a: usize, b: usize) -> f64 {
        (self.dist2(a, b) as f64).sqrt()
    }

    /// Parity of the coordinate sum; only meaningful for even `n`.
    pub fn parity(&self, idx: usize) -> usize {
        let mut s = 0;
        let mut i = idx;
        for _ in 0..self.d {
            s += i % self.n;
            i /= self.n;
        }
        s & 1
    }
}

pub fn torus_distance(geom: &TorusGeometry, a: &Point, b: &Point, metric: Metric) -> f64 {
    geom.distance(a, b, metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    /// Cube of `radius` sites per side.
    Box,
    /// Closed Euclidean ball.
    Ball,
}

/// A box `S(x, s)` (side `s` in sites) or a closed ball `B(x, r)`.
///
/// A box of even side `s` covers offsets `-s/2 ..= s/2 - 1` on each axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: Point,
    pub radius: usize,
}

impl ShapeSpec {
    pub fn ball(center: Point, radius: usize) -> Self {
        ShapeSpec { kind: ShapeKind::Ball, center, radius }
    }

    pub fn cube(center: Point, side: usize) -> Self {
        ShapeSpec { kind: ShapeKind::Box, center, radius: side }
    }

    /// Offset range per axis of the bounding box.
    fn span(&self) -> (i64, i64) {
        match self.kind {
            ShapeKind::Box => {
                let lo = -((self.radius / 2) as i64);
                (lo, lo + self.radius as i64 - 1)
            }
            ShapeKind::Ball => (-(self.radius as i64), self.radius as i64),
        }
    }

    /// Sites per axis covered by the bounding box.
    pub fn extent(&self) -> usize {
        let (lo, hi) = self.span();
        (hi - lo + 1) as usize
    }

    pub fn validate(&self, geom: &TorusGeometry) -> Result<()> {
        if self.center.0.len() != geom.d() || self.center.0.iter().any(|&c| c >= geom.n()) {
            return Err(Error::Shape(format!("center {:?} is not a site of the torus", self.center.0)));
        }
        if self.kind == ShapeKind::Box && self.radius == 0 {
            return Err(Error::Shape("box side must be at least 1".into()));
        }
        if self.extent() > geom.n() {
            return Err(Error::Shape(format!(
                "{:?} of size {} spans {} sites per axis and wraps around a torus of side {}",
                self.kind,
                self.radius,
                self.extent(),
                geom.n()
            )));
        }
        Ok(())
    }

    /// True when the diameter stays below `n/2`, the regime where the
    /// torus is locally indistinguishable from the lattice.
    pub fn well_inside(&self, geom: &TorusGeometry) -> bool {
        2 * self.extent() < geom.n()
    }

    fn offset_inside(&self, off: &[i64]) -> bool {
        match self.kind {
            ShapeKind::Box => {
                let (lo, hi) = self.span();
                off.iter().all(|&o| o >= lo && o <= hi)
            }
            ShapeKind::Ball => {
                let r2 = (self.radius * self.radius) as i64;
                off.iter().map(|o| o * o).sum::<i64>() <= r2
            }
        }
    }

    /// Membership of a site; assumes the shape passed `validate`.
    pub fn contains(&self, geom: &TorusGeometry, idx: usize) -> bool {
        let n = geom.n() as i64;
        let (lo, hi) = self.span();
        let mut r2 = 0i64;
        for axis in 0..geom.d() {
            let c = geom.coord(idx, axis) as i64;
            let delta = (c - self.center.0[axis] as i64).rem_euclid(n);
            let o = if delta <= hi {
                delta
            } else if delta - n >= lo {
                delta - n
            } else {
                return false;
            };
            r2 += o * o;
        }
        match self.kind {
            ShapeKind::Box => true,
            ShapeKind::Ball => r2 <= (self.radius * self.radius) as i64,
        }
    }

    pub fn sites(&self, geom: &TorusGeometry) -> Vec<usize> {
        let (lo, hi) = self.span();
        let c = geom.index(&self.center);
        let d = geom.d();
        let mut off = vec![lo; d];
        let mut out = Vec::new();
        loop {
            if self.offset_inside(&off) {
                out.push(geom.translate(c, &off));
            }
            let mut axis = 0;
            loop {
                if axis == d {
                    out.sort_unstable();
                    return out;
                }
                off[axis] += 1;
                if off[axis] <= hi {
                    break;
                }
                off[axis] = lo;
                axis += 1;
            }
        }
    }

    /// Inner vertex boundary: sites of the shape with a neighbour outside it.
    pub fn boundary(&self, geom: &TorusGeometry) -> Vec<usize> {
        self.sites(geom)
            .into_iter()
            .filter(|&s| geom.neighbors(s).any(|v| !self.contains(geom, v)))
            .collect()
    }
}

pub fn shape_boundary(geom: &TorusGeometry, shape: &ShapeSpec) -> Result<Vec<usize>> {
    shape.validate(geom)?;
    Ok(shape.boundary(geom))
}

/// Inner shape `E` nested in outer shape `F`; excursions go from `∂E` to the
/// outside of `F`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    pub inner: ShapeSpec,
    pub outer: ShapeSpec,
}

impl AnnulusSpec {
    pub fn new(inner: ShapeSpec, outer: ShapeSpec) -> Self {
        AnnulusSpec { inner, outer }
    }

    /// Ball-in-ball annulus `B(x,R) \ B(x,r)`.
    pub fn balls(center: Point, r: usize, big_r: usize) -> Self {
        AnnulusSpec::new(ShapeSpec::ball(center.clone(), r), ShapeSpec::ball(center, big_r))
    }

    /// Box of side `r` inside the ball of radius `R`.
    pub fn box_in_ball(center: Point, r: usize, big_r: usize) -> Self {
        AnnulusSpec::new(ShapeSpec::cube(center.clone(), r), ShapeSpec::ball(center, big_r))
    }

    /// Box of side `r` inside the box of side `R`.
    pub fn box_in_box(center: Point, r: usize, big_r: usize) -> Self {
        AnnulusSpec::new(ShapeSpec::cube(center.clone(), r), ShapeSpec::cube(center, big_r))
    }

    pub fn validate(&self, geom: &TorusGeometry) -> Result<()> {
        self.inner.validate(geom)?;
        self.outer.validate(geom)?;
        let inner = self.inner.sites(geom);
        if inner.is_empty() {
            return Err(Error::Shape("inner shape is empty".into()));
        }
        if inner.iter().any(|&s| !self.outer.contains(geom, s)) {
            return Err(Error::Shape("inner shape is not contained in the outer shape".into()));
        }
        if self.outer.sites(geom).len() == geom.volume() {
            return Err(Error::Shape("outer shape covers the whole torus".into()));
        }
        if self.outer.boundary(geom).iter().all(|&s| self.inner.contains(geom, s)) {
            return Err(Error::Shape("annulus has no room between inner and outer shape".into()));
        }
        Ok(())
    }
}

/// Site labels for one annulus, used by the excursion scanners.
#[derive(Clone, Debug)]
pub struct AnnulusMap {
    labels: Vec<u8>,
}

impl AnnulusMap {
    pub const INNER: u8 = 1;
    pub const INNER_BOUNDARY: u8 = 2;
    pub const OUTER: u8 = 4;
    pub const MARKED: u8 = 8;

    pub fn new(geom: &TorusGeometry, spec: &AnnulusSpec) -> Result<Self> {
        spec.validate(geom)?;
        Ok(Self::from_sets(geom.volume(), &spec.inner.sites(geom), &spec.inner.boundary(geom), &spec.outer.sites(geom)))
    }

    pub fn from_sets(volume: usize, inner: &[usize], inner_boundary: &[usize], outer: &[usize]) -> Self {
        let mut labels = vec![0u8; volume];
        for &s in outer {
            labels[s] |= Self::OUTER;
        }
        for &s in inner {
            labels[s] |= Self::INNER;
        }
        for &s in inner_boundary {
            labels[s] |= Self::INNER_BOUNDARY;
        }
        AnnulusMap { labels }
    }

    pub fn mark(&mut self, sites: &[usize]) {
        for &s in sites {
            self.labels[s] |= Self::MARKED;
        }
    }

    #[inline]
    pub fn label(&self, site: usize) -> u8 {
        self.labels[site]
    }

    #[inline]
    pub fn in_outer(&self, site: usize) -> bool {
        self.labels[site] & Self::OUTER != 0
    }

    #[inline]
    pub fn on_inner_boundary(&self, site: usize) -> bool {
        self.labels[site] & Self::INNER_BOUNDARY != 0
    }

    pub fn volume(&self) -> usize {
        self.labels.len()
    }
}

/// Partition of the torus into boxes of side `s̄ = round(n^β) + round(n^φ)`,
/// each holding concentric boxes of sides `round(n^β)` and
/// `round(n^β) - round(n^φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub phi: f64,
    /// Side of the partition boxes `S̄`.
    pub big: usize,
    /// Side of the middle boxes `S`.
    pub mid: usize,
    /// Side of the small boxes `S̲`.
    pub small: usize,
    pub per_axis: usize,
    mid_offset: usize,
    small_offset: usize,
}

fn sides(n: usize, beta: f64, phi: f64) -> (usize, usize, usize) {
    let nb = round_half_up((n as f64).powf(beta));
    let nf = round_half_up((n as f64).powf(phi));
    (nb + nf, nb, nb.saturating_sub(nf))
}

/// Side lengths `n'` near `n` for which the decomposition exists.
pub fn admissible_sides(n: usize, beta: f64, phi: f64, count: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (4..=4 * n.max(4))
        .filter(|&m| {
            let (big, _, small) = sides(m, beta, phi);
            small >= 1 && big < m && m % big == 0
        })
        .collect();
    c.sort_by_key(|&m| (m.abs_diff(n), m));
    c.truncate(count);
    c.sort_unstable();
    c
}

pub fn decompose(geom: &TorusGeometry, beta: f64, phi: f64) -> Result<Decomposition> {
    if !(phi > 0.0 && phi < beta && beta < 1.0) {
        return Err(Error::Invalid(format!("need 0 < phi < beta < 1, got beta = {beta}, phi = {phi}")));
    }
    let n = geom.n();
    let (big, mid, small) = sides(n, beta, phi);
    if small < 1 {
        return Err(Error::Divisibility(format!(
            "round(n^beta) - round(n^phi) = {small} leaves no inner box at n = {n}"
        )));
    }
    if big >= n || !n.is_multiple_of(big) {
        let ok = admissible_sides(n, beta, phi, 6);
        return Err(Error::Divisibility(format!(
            "box side round(n^beta) + round(n^phi) = {big} does not divide n = {n} into at least two boxes; admissible n for beta = {beta}, phi = {phi}: {ok:?}"
        )));
    }
    Ok(Decomposition {
        n,
        d: geom.d(),
        beta,
        phi,
        big,
        mid,
        small,
        per_axis: n / big,
        mid_offset: (big - mid) / 2,
        small_offset: (big - small) / 2,
    })
}

impl Decomposition {
    pub fn tiles(&self) -> usize {
        self.per_axis.pow(self.d as u32)
    }

    /// Index of the partition box holding `site`.
    pub fn tile_of(&self, geom: &TorusGeometry, site: usize) -> usize {
        let mut t = 0;
        let mut mul = 1;
        for axis in 0..self.d {
            t += (geom.coord(site, axis) / self.big) * mul;
            mul *= self.per_axis;
        }
        t
    }

    fn local(&self, geom: &TorusGeometry, site: usize, axis: usize) -> usize {
        geom.coord(site, axis) % self.big
    }

    fn within(&self, geom: &TorusGeometry, site: usize, offset: usize, side: usize) -> bool {
        (0..self.d).all(|a| {
            let l = self.local(geom, site, a);
            l >= offset && l < offset + side
        })
    }

    pub fn in_mid(&self, geom: &TorusGeometry, site: usize) -> bool {
        self.within(geom, site, self.mid_offset, self.mid)
    }

    pub fn in_small(&self, geom: &TorusGeometry, site: usize) -> bool {
        self.within(geom, site, self.small_offset, self.small)
    }

    /// Inner vertex boundary of the middle box around `site`.
    pub fn on_mid_boundary(&self, geom: &TorusGeometry, site: usize) -> bool {
        self.in_mid(geom, site)
            && (0..self.d).any(|a| {
                let l = self.local(geom, site, a);
                l == self.mid_offset || l + 1 == self.mid_offset + self.mid
            })
    }

    /// The set `A`: sites outside every small box.
    pub fn in_a(&self, geom: &TorusGeometry, site: usize) -> bool {
        !self.in_small(geom, site)
    }

    pub fn a_size(&self) -> usize {
        self.n.pow(self.d as u32) - self.tiles() * self.small.pow(self.d as u32)
    }

    /// Lowest corner of tile `t`.
    pub fn tile_corner(&self, t: usize) -> Point {
        let mut c = Vec::with_capacity(self.d);
        let mut t = t;
        for _ in 0..self.d {
            c.push((t % self.per_axis) * self.big);
            t /= self.per_axis;
        }
        Point(c)
    }

    /// Site at the centre of the middle box of tile `t` (lower centre for even sides).
    pub fn tile_center(&self, t: usize) -> Point {
        let c = self.tile_corner(t);
        Point(c.0.iter().map(|&x| x + self.mid_offset + self.mid / 2).collect())
    }

    fn block(&self, geom: &TorusGeometry, t: usize, offset: usize, side: usize) -> Vec<usize> {
        let corner = self.tile_corner(t);
        let base: Vec<i64> = corner.0.iter().map(|&x| (x + offset) as i64).collect();
        let origin = geom.translate(0, &base);
        let mut out = Vec::with_capacity(side.pow(self.d as u32));
        let mut off = vec![0i64; self.d];
        loop {
            out.push(geom.translate(origin, &off));
            let mut a = 0;
            loop {
                if a == self.d {
                    return out;
                }
                off[a] += 1;
                if (off[a] as usize) < side {
                    break;
                }
                off[a] = 0;
                a += 1;
            }
        }
    }

    pub fn small_sites(&self, geom: &TorusGeometry, t: usize) -> Vec<usize> {
        self.block(geom, t, self.small_offset, self.small)
    }

    pub fn mid_sites(&self, geom: &TorusGeometry, t: usize) -> Vec<usize> {
        self.block(geom, t, self.mid_offset, self.mid)
    }

    pub fn tile_sites(&self, geom: &TorusGeometry, t: usize) -> Vec<usize> {
        self.block(geom, t, 0, self.big)
    }
}
