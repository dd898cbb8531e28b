//! Iterated lines V_n = f^n(L) in P² and their bounded-geometry part.
//!
//! The curve is handled through its global parametrization ι_n = f^n∘ι by
//! P¹ ≅ L. For a central projection π: P² ⇢ P¹ the composite
//! g = π∘ι_n is a rational function of degree d^n, so the components of
//! π^{-1}(Q)∩V_n are the components of g^{-1}(Q) in the parameter sphere.
//! A component is a graph over Q exactly when it holds no critical point of
//! g, which is what the classifier tests, by path lifting from sample
//! parameters to the critical values inside the cube.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::green_fields::Potential;
use crate::numeric::{linear_fit, par_map, par_range, random_unit, stream, C64};
use crate::projective_map::{fs_distance, sup_norm, ChartPoint, Hom, ProjectiveMap, ONE, ZERO};

pub const DEFAULT_DIAMETER: f64 = 1.0;
pub const DEFAULT_AREA_CUT: f64 = 0.25;
pub const DEFAULT_N_CAP: usize = 6;
pub const DEFAULT_R0: f64 = 0.1;
/// Minimum pairwise FS angle between projection centers (10°).
pub const MIN_CENTER_ANGLE: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Generic shift of every cube grid, in units of r.
const GRID_SHIFT: [f64; 2] = [0.0371, 0.0213];
const SUBDIVISIONS: [[f64; 2]; 4] = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]];
/// Side of the shape quadrature grid over a cube.
const SHAPE_GRID: usize = 5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("iterated lines need a map of P², got k = {0}")]
    Dimension(usize),
    #[error("line through dependent points")]
    DegenerateLine,
    #[error("iterate {n} above the cap {cap}")]
    IterateCap { n: usize, cap: usize },
    #[error("projection centers are not in general position")]
    Projections,
    #[error("cube size {0} does not tile the unit chart window")]
    Grid(f64),
    #[error("found {found} critical points of π∘f^n on L, expected {expected}")]
    Critical { found: usize, expected: usize },
    #[error("no good components left at r = {0}")]
    EmptyGood(f64),
}

fn dot3(u: &[C64; 3], z: &Hom) -> C64 {
    // conjugate-linear in u
    u[0].conj() * z[0] + u[1].conj() * z[1] + u[2].conj() * z[2]
}

fn norm3(z: &Hom) -> f64 {
    (z[0].norm_sqr() + z[1].norm_sqr() + z[2].norm_sqr()).sqrt()
}

/// Orthonormal basis of a complex line in C³ (a projective line of P²).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub a: [C64; 3],
    pub b: [C64; 3],
}

impl Line {
    pub fn through(p: &Hom, q: &Hom) -> Result<Line, GeometryError> {
        let np = norm3(p);
        if np == 0.0 {
            return Err(GeometryError::DegenerateLine);
        }
        let a = [p[0] / np, p[1] / np, p[2] / np];
        let ip = dot3(&a, q);
        let mut b = [q[0] - a[0] * ip, q[1] - a[1] * ip, q[2] - a[2] * ip];
        let nb = (b.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt();
        if nb < 1e-8 * norm3(q).max(1e-300) {
            return Err(GeometryError::DegenerateLine);
        }
        for c in &mut b {
            *c /= nb;
        }
        Ok(Line { a, b })
    }

    pub fn random(seed: u64) -> Line {
        let mut rng = stream(seed, 0x11ae);
        loop {
            let (u, v) = (random_unit(&mut rng, 3), random_unit(&mut rng, 3));
            let p: Hom = [u[0], u[1], u[2], ZERO];
            let q: Hom = [v[0], v[1], v[2], ZERO];
            if let Ok(l) = Line::through(&p, &q) {
                return l;
            }
        }
    }

    /// Lift of a parameter and its derivative in the parameter's chart.
    pub fn at(&self, p: Param) -> (Hom, Hom) {
        let (x, y) = if p.chart == 0 { (&self.a, &self.b) } else { (&self.b, &self.a) };
        let mut z = [ZERO; 4];
        let mut dz = [ZERO; 4];
        for i in 0..3 {
            z[i] = x[i] + p.v * y[i];
            dz[i] = y[i];
        }
        (z, dz)
    }
}

/// A point of P¹ ≅ L: chart 0 is `a + v b`, chart 1 is `v a + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub chart: u8,
    pub v: C64,
}

impl Param {
    pub fn new(chart: u8, v: C64) -> Self {
        Param { chart, v }
    }

    fn rechart(self) -> Param {
        if self.v.norm() > 1.5 {
            Param { chart: 1 - self.chart, v: self.v.inv() }
        } else {
            self
        }
    }

    fn in_chart(self, chart: u8) -> Option<C64> {
        if chart == self.chart {
            Some(self.v)
        } else if self.v.norm() > 1e-300 {
            Some(self.v.inv())
        } else {
            None
        }
    }

    fn hom(self) -> [C64; 2] {
        if self.chart == 0 {
            [ONE, self.v]
        } else {
            [self.v, ONE]
        }
    }

    /// Chordal distance on P¹.
    pub fn chordal(self, o: Param) -> f64 {
        let (x, y) = (self.hom(), o.hom());
        let nx = (x[0].norm_sqr() + x[1].norm_sqr()).sqrt();
        let ny = (y[0].norm_sqr() + y[1].norm_sqr()).sqrt();
        (x[0] * y[1] - x[1] * y[0]).norm() / (nx * ny)
    }
}

/// ι_n = f^n restricted to a line.
#[derive(Clone, Copy)]
pub struct IteratedLine<'a> {
    pub map: &'a ProjectiveMap,
    pub line: &'a Line,
    pub n: usize,
}

impl IteratedLine<'_> {
    pub fn degree(&self) -> usize {
        self.map.d.pow(self.n as u32)
    }

    /// Lift Z of ι_n(p) and dZ/dv, renormalized jointly at every step.
    pub fn lift(&self, p: Param) -> (Hom, Hom) {
        let (mut z, mut dz) = self.line.at(p);
        for _ in 0..self.n {
            let (w, jac) = self.map.eval_with_jacobian(&z);
            let mut dw = [ZERO; 4];
            for (l, o) in dw.iter_mut().enumerate().take(3) {
                *o = jac[l][0] * dz[0] + jac[l][1] * dz[1] + jac[l][2] * dz[2];
            }
            let s = sup_norm(&w, 3);
            for i in 0..3 {
                z[i] = w[i] / s;
                dz[i] = dw[i] / s;
            }
        }
        (z, dz)
    }

    /// Unnormalized F^n(a + v b), a polynomial of degree d^n in v.
    fn raw(&self, v: C64) -> Hom {
        let mut z = self.line.at(Param::new(0, v)).0;
        for _ in 0..self.n {
            z = self.map.eval_lift(&z);
        }
        z
    }

    pub fn point(&self, p: Param) -> ChartPoint {
        ChartPoint::from_hom(&self.lift(p).0, 2)
    }

    /// Fubini–Study area of the image per unit Euclidean parameter area,
    /// normalized so that a line has area 1.
    pub fn area_density(&self, p: Param) -> f64 {
        let (z, dz) = self.lift(p);
        fs_density(&z, &dz)
    }
}

fn fs_density(z: &Hom, dz: &Hom) -> f64 {
    let nz = z[0].norm_sqr() + z[1].norm_sqr() + z[2].norm_sqr();
    let nd = dz[0].norm_sqr() + dz[1].norm_sqr() + dz[2].norm_sqr();
    let ip = z[0].conj() * dz[0] + z[1].conj() * dz[1] + z[2].conj() * dz[2];
    ((nz * nd - ip.norm_sqr()).max(0.0)) / (std::f64::consts::PI * nz * nz)
}

/// FS area density of the base P¹ in an affine chart, total mass 1.
fn base_density(z: C64) -> f64 {
    1.0 / (std::f64::consts::PI * (1.0 + z.norm_sqr()).powi(2))
}

// ---------------------------------------------------------------------------
// Polynomials

fn poly_eval(c: &[C64], x: C64) -> (C64, C64) {
    let mut p = ZERO;
    let mut dp = ZERO;
    for &a in c.iter().rev() {
        dp = dp * x + p;
        p = p * x + a;
    }
    (p, dp)
}

/// Roots of `Σ c_i x^i` by the Aberth–Ehrlich iteration. Leading
/// coefficients negligible against the largest are dropped (roots at ∞).
pub fn poly_roots(c: &[C64]) -> Vec<C64> {
    let big = c.iter().map(|a| a.norm()).fold(0.0, f64::max);
    let mut deg = c.len().saturating_sub(1);
    while deg > 0 && c[deg].norm() <= 1e-13 * big {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let c = &c[..=deg];
    let lead = c[deg];
    let low = c.iter().position(|a| a.norm() > 1e-13 * big).unwrap_or(0);
    // roots at the origin are exact
    let mut roots = vec![ZERO; low];
    let c = &c[low..];
    let m = c.len() - 1;
    if m == 0 {
        return roots;
    }
    let radius = (c[0].norm() / lead.norm()).powf(1.0 / m as f64).max(1e-8);
    let mut z: Vec<C64> = (0..m)
        .map(|i| C64::from_polar(radius, 2.0 * std::f64::consts::PI * i as f64 / m as f64 + 0.4))
        .collect();
    let mut done = vec![false; m];
    for _ in 0..800 {
        let mut all = true;
        for i in 0..m {
            if done[i] {
                continue;
            }
            let (p, dp) = poly_eval(c, z[i]);
            if p.norm() == 0.0 {
                done[i] = true;
                continue;
            }
            let w = p / dp;
            let s: C64 = (0..m).filter(|&j| j != i).map(|j| (z[i] - z[j]).inv()).sum();
            let corr = w / (ONE - w * s);
            if !corr.re.is_finite() || !corr.im.is_finite() {
                z[i] += C64::new(1e-3 * radius, 1e-3 * radius);
                all = false;
                continue;
            }
            z[i] -= corr;
            if corr.norm() <= 1e-15 * z[i].norm().max(1e-300) {
                done[i] = true;
            } else {
                all = false;
            }
        }
        if all {
            break;
        }
    }
    roots.extend(z);
    roots
}

/// Coefficients of a polynomial of degree ≤ `deg` from its values on the
/// unit circle (discrete Fourier inversion).
fn interpolate<F: Fn(C64) -> C64>(deg: usize, f: F) -> Vec<C64> {
    let m = deg + 1;
    let vals: Vec<C64> = (0..m).map(|k| f(C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / m as f64))).collect();
    (0..m)
        .map(|j| {
            let s: C64 = (0..m)
                .map(|k| vals[k] * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (j * k % m) as f64 / m as f64))
                .sum();
            s / m as f64
        })
        .collect()
}

fn poly_mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_deriv(a: &[C64]) -> Vec<C64> {
    if a.len() <= 1 {
        return vec![ZERO];
    }
    a.iter().enumerate().skip(1).map(|(i, &x)| x * i as f64).collect()
}

// ---------------------------------------------------------------------------
// Projections

/// Central projection from a point of P² onto the P¹ of lines through it.
/// Base chart 0 is ℓ₁/ℓ₀, chart 1 is ℓ₀/ℓ₁.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub center: [C64; 3],
    pub l0: [C64; 3],
    pub l1: [C64; 3],
}

impl Projection {
    pub fn new(center: &Hom) -> Result<Projection, GeometryError> {
        let nc = norm3(center);
        if nc == 0.0 {
            return Err(GeometryError::Projections);
        }
        let c = [center[0] / nc, center[1] / nc, center[2] / nc];
        // complete c to a unitary basis by Gram–Schmidt on the standard basis
        let mut basis: Vec<[C64; 3]> = vec![c];
        for e in 0..3 {
            let mut v = [ZERO; 3];
            v[e] = ONE;
            for u in &basis {
                let ip = u[0].conj() * v[0] + u[1].conj() * v[1] + u[2].conj() * v[2];
                for i in 0..3 {
                    v[i] -= u[i] * ip;
                }
            }
            let nv = (v.iter().map(|x| x.norm_sqr()).sum::<f64>()).sqrt();
            if nv > 0.3 {
                basis.push([v[0] / nv, v[1] / nv, v[2] / nv]);
            }
            if basis.len() == 3 {
                break;
            }
        }
        Ok(Projection { center: c, l0: basis[1], l1: basis[2] })
    }

    /// Three pseudo-random centers in general position, off the line.
    pub fn generic(seed: u64, line: &Line) -> Vec<Projection> {
        let mut rng = stream(seed, 0x9a0e);
        let mut centers: Vec<Hom> = Vec::new();
        while centers.len() < 3 {
            let u = random_unit(&mut rng, 3);
            let c: Hom = [u[0], u[1], u[2], ZERO];
            // distance to L: the component normal to span(a, b)
            let (pa, pb) = (dot3(&line.a, &c), dot3(&line.b, &c));
            let normal = (1.0 - pa.norm_sqr() - pb.norm_sqr()).max(0.0).sqrt();
            if normal < 0.2 || centers.iter().any(|o| fs_distance(o, &c, 3) < MIN_CENTER_ANGLE) {
                continue;
            }
            centers.push(c);
        }
        centers.iter().map(|c| Projection::new(c).expect("unit center")).collect()
    }

    fn forms(&self, bc: u8) -> (&[C64; 3], &[C64; 3]) {
        if bc == 0 {
            (&self.l1, &self.l0)
        } else {
            (&self.l0, &self.l1)
        }
    }

    /// Base point of Z in its owner chart (|z| ≤ 1).
    pub fn base(&self, z: &Hom) -> (u8, C64) {
        let (x0, x1) = (dot3(&self.l0, z), dot3(&self.l1, z));
        if x1.norm() <= x0.norm() {
            (0, x1 / x0)
        } else {
            (1, x0 / x1)
        }
    }

    pub fn base_in(&self, z: &Hom, bc: u8) -> Option<C64> {
        let (num, den) = self.forms(bc);
        let d = dot3(den, z);
        if d.norm() == 0.0 {
            None
        } else {
            Some(dot3(num, z) / d)
        }
    }

    pub fn angle_to(&self, o: &Projection) -> f64 {
        let a: Hom = [self.center[0], self.center[1], self.center[2], ZERO];
        let b: Hom = [o.center[0], o.center[1], o.center[2], ZERO];
        fs_distance(&a, &b, 3)
    }
}

pub fn check_general_position(ps: &[Projection]) -> Result<(), GeometryError> {
    for i in 0..ps.len() {
        for j in 0..i {
            if ps[i].angle_to(&ps[j]) <= MIN_CENTER_ANGLE {
                return Err(GeometryError::Projections);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub param: Param,
    /// Critical value in base charts 0 and 1.
    pub value: [Option<C64>; 2],
    /// Half the second derivative of g at the critical point, per base chart.
    pub curv: [C64; 2],
}

#[derive(Debug, Clone)]
pub struct ProjectionData {
    pub proj: Projection,
    pub crits: Vec<CriticalPoint>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Cuts {
    /// Diameter bound D (FS distance).
    pub diameter: f64,
    /// Absolute FS area bound A for a graph component (line area = 1).
    pub area: f64,
}

impl Default for Cuts {
    fn default() -> Self {
        Cuts { diameter: DEFAULT_DIAMETER, area: DEFAULT_AREA_CUT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Bad,
    Boundary,
}

/// Cube of side r in a base chart; `half` is half the side of the box used
/// for components (r/2 for Q, r for 2Q).
#[derive(Debug, Clone, Copy)]
struct Cube {
    chart: u8,
    ix: i64,
    iy: i64,
    center: C64,
}

fn grid_origin(r: f64, sub: usize) -> [f64; 2] {
    [(GRID_SHIFT[0] + SUBDIVISIONS[sub][0]) * r, (GRID_SHIFT[1] + SUBDIVISIONS[sub][1]) * r]
}

fn cube_of(chart: u8, z: C64, r: f64, sub: usize) -> Cube {
    let o = grid_origin(r, sub);
    let ix = ((z.re - o[0]) / r).floor() as i64;
    let iy = ((z.im - o[1]) / r).floor() as i64;
    cube_at(chart, ix, iy, r, sub)
}

fn cube_at(chart: u8, ix: i64, iy: i64, r: f64, sub: usize) -> Cube {
    let o = grid_origin(r, sub);
    Cube { chart, ix, iy, center: C64::new(o[0] + (ix as f64 + 0.5) * r, o[1] + (iy as f64 + 0.5) * r) }
}

fn owned(c: &Cube) -> bool {
    if c.chart == 0 {
        c.center.norm() <= 1.0
    } else {
        c.center.norm() < 1.0
    }
}

fn sup_dist(a: C64, b: C64) -> f64 {
    (a.re - b.re).abs().max((a.im - b.im).abs())
}

/// Cube sides must tile the unit chart window.
pub fn check_cube_size(r: f64) -> Result<(), GeometryError> {
    let m = 2.0 / r;
    if !(r > 0.0 && r <= 0.5) || (m - m.round()).abs() > 1e-9 {
        return Err(GeometryError::Grid(r));
    }
    Ok(())
}

/// The curve ι_n together with three projections and the critical points of
/// each composite π_j∘ι_n.
pub struct CurveGeometry<'a> {
    pub curve: IteratedLine<'a>,
    pub projections: Vec<ProjectionData>,
}

impl<'a> CurveGeometry<'a> {
    pub fn new(map: &'a ProjectiveMap, line: &'a Line, n: usize, projections: &[Projection]) -> Result<Self, GeometryError> {
        if map.k != 2 {
            return Err(GeometryError::Dimension(map.k));
        }
        check_general_position(projections)?;
        let curve = IteratedLine { map, line, n };
        let projections = projections
            .iter()
            .map(|p| {
                let crits = critical_points(&curve, p)?;
                Ok(ProjectionData { proj: p.clone(), crits })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        Ok(CurveGeometry { curve, projections })
    }

    pub fn degree(&self) -> usize {
        self.curve.degree()
    }

    /// g = π∘ι_n in base chart `bc` and its derivative in the parameter chart.
    fn g(&self, proj: &Projection, bc: u8, p: Param) -> (C64, C64) {
        let (z, dz) = self.curve.lift(p);
        let (num, den) = proj.forms(bc);
        let (a, da) = (dot3(num, &z), dot3(num, &dz));
        let (b, db) = (dot3(den, &z), dot3(den, &dz));
        (a / b, (da * b - a * db) / (b * b))
    }

    fn newton_to(&self, proj: &Projection, bc: u8, mut p: Param, target: C64) -> Option<Param> {
        for _ in 0..16 {
            let (g, dg) = self.g(proj, bc, p);
            // near a fold dg is small and roundoff in g keeps the steps from
            // shrinking further, so a residual at roundoff level also counts
            if (g - target).norm() <= 1e-14 * (1.0 + target.norm()) {
                return Some(p.rechart());
            }
            let step = (g - target) / dg;
            if !step.re.is_finite() || !step.im.is_finite() {
                return None;
            }
            p.v -= step;
            let small = step.norm() <= 1e-13 * (1.0 + p.v.norm());
            p = p.rechart();
            if small {
                return Some(p);
            }
        }
        None
    }

    /// Continues the preimage `start` of `from` along the segment to `to`.
    /// `None` when the continuation stalls, which happens at critical points.
    fn lift_path(&self, proj: &Projection, bc: u8, start: Param, from: C64, to: C64) -> Option<Param> {
        let mut p = start;
        let (mut t, mut dt) = (0.0f64, 0.125f64);
        while t < 1.0 {
            let t1 = (t + dt).min(1.0);
            let target = from + (to - from) * t1;
            let (g, dg) = self.g(proj, bc, p);
            let guess = Param::new(p.chart, p.v - (g - target) / dg).rechart();
            let ok = guess.v.re.is_finite() && guess.v.im.is_finite();
            match self.newton_to(proj, bc, guess, target).filter(|_| ok) {
                Some(q) if q.chordal(guess) <= 0.3 * guess.chordal(p) + 1e-12 => {
                    p = q;
                    t = t1;
                    dt = (dt * 1.5).min(0.25);
                }
                _ => {
                    dt *= 0.5;
                    if dt < 1e-7 {
                        return None;
                    }
                }
            }
        }
        Some(p)
    }

    fn near_crit(&self, q: Param, c: &CriticalPoint, bc: u8, eps: f64) -> bool {
        match q.in_chart(c.param.chart) {
            Some(v) => (v - c.param.v).norm() < 4.0 * (eps / c.curv[bc as usize].norm()).sqrt() + 1e-9,
            None => false,
        }
    }

    /// FS area and diameter of the component through `p` over the box of
    /// half-side `half` around `center`, by lifting a quadrature grid.
    fn component_shape(&self, pd: &ProjectionData, bc: u8, p: Param, z: C64, center: C64, half: f64) -> Option<(f64, f64)> {
        let h = 2.0 * half / SHAPE_GRID as f64;
        let mut area = 0.0;
        let mut pts: Vec<Hom> = Vec::with_capacity(SHAPE_GRID * SHAPE_GRID);
        for i in 0..SHAPE_GRID {
            for j in 0..SHAPE_GRID {
                let zg = center + C64::new(-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h);
                let q = self.lift_path(&pd.proj, bc, p, z, zg)?;
                let (lz, ldz) = self.curve.lift(q);
                let (_, dg) = self.g(&pd.proj, bc, q);
                area += fs_density(&lz, &ldz) / dg.norm_sqr() * h * h;
                pts.push(lz);
            }
        }
        let mut diam = 0.0f64;
        for i in 0..pts.len() {
            for j in 0..i {
                diam = diam.max(fs_distance(&pts[i], &pts[j], 3));
            }
        }
        Some((area, diam))
    }

    /// Label of the curve point ι_n(p) for projection `j`, subdivision `sub`
    /// and cube size `r`: good when its component over the box of side
    /// `factor·r` around its cube is a graph within the cuts. Factor 2 gives
    /// the strong labels.
    pub fn label(&self, j: usize, p: Param, sub: usize, r: f64, factor: f64, cuts: &Cuts) -> Label {
        let pd = &self.projections[j];
        let (bc, z) = pd.proj.base(&self.curve.lift(p).0);
        let cube = cube_of(bc, z, r, sub);
        let lo = cube.center - C64::new(r / 2.0, r / 2.0);
        let edge = (z.re - lo.re).min(lo.re + r - z.re).min(z.im - lo.im).min(lo.im + r - z.im);
        if edge < 1e-9 * r {
            return Label::Boundary;
        }
        let half = factor * r / 2.0;
        let eps = 1e-5 * r;
        // worst ratio |z − c| / dist(c, box) over critical values near the box
        let mut shape: Option<f64> = None;
        for c in &pd.crits {
            let Some(cv) = c.value[bc as usize] else { continue };
            let dist = sup_dist(cv, cube.center);
            if dist < half {
                let gap = z - cv;
                if gap.norm() < 1e-12 {
                    return Label::Bad;
                }
                let target = cv + gap / gap.norm() * eps;
                match self.lift_path(&pd.proj, bc, p, z, target) {
                    None => return Label::Bad,
                    Some(q) if self.near_crit(q, c, bc, eps) => return Label::Bad,
                    _ => {}
                }
            } else if dist < half + r {
                let ratio = (z - cv).norm() / (dist - half).max(0.05 * r);
                shape = Some(shape.map_or(ratio, |s: f64| s.max(ratio)));
            }
        }
        if let Some(ratio) = shape {
            // the inverse branch is like (z − c)^{1/2}, so its area density
            // grows at most like the distance ratio; skip the quadrature when
            // even that bound keeps the area well under the cut
            let (lz, ldz) = self.curve.lift(p);
            let (_, dg) = self.g(&pd.proj, bc, p);
            let bound = fs_density(&lz, &ldz) / dg.norm_sqr() * 4.0 * half * half * ratio;
            if bound < 0.25 * cuts.area {
                return Label::Good;
            }
            match self.component_shape(pd, bc, p, z, cube.center, half) {
                Some((a, d)) if a <= cuts.area && d <= cuts.diameter => {}
                _ => return Label::Bad,
            }
        }
        Label::Good
    }

    /// Good for at least one projection and subdivision.
    pub fn in_bounded_geometry(&self, p: Param, r: f64, factor: f64, cuts: &Cuts) -> bool {
        (0..self.projections.len()).any(|j| (0..SUBDIVISIONS.len()).any(|s| self.label(j, p, s, r, factor, cuts) == Label::Good))
    }

    /// All preimages of the base point `z` (chart `bc`) under π_j∘ι_n.
    pub fn preimages(&self, j: usize, bc: u8, z: C64) -> Vec<Param> {
        let proj = &self.projections[j].proj;
        let deg = self.degree();
        let (num, den) = proj.forms(bc);
        let coeffs = interpolate(deg, |v| {
            let w = self.curve.raw(v);
            dot3(num, &w) - z * dot3(den, &w)
        });
        let mut out: Vec<Param> = Vec::new();
        let mut push = |p: Param| {
            if let Some(q) = self.newton_to(proj, bc, p.rechart(), z) {
                if out.iter().all(|o| o.chordal(q) > 1e-9) {
                    out.push(q);
                }
            }
        };
        let roots = poly_roots(&coeffs);
        for &v in &roots {
            push(Param::new(0, v));
        }
        if roots.len() < deg {
            // missing roots sit at v = ∞
            push(Param::new(1, ZERO));
        }
        out
    }
}

/// Critical points of g = π∘ι_n: zeros of the Wronskian P₁'P₀ − P₁P₀' of
/// the two base coordinates, found in both parameter charts.
fn critical_points(curve: &IteratedLine, proj: &Projection) -> Result<Vec<CriticalPoint>, GeometryError> {
    let deg = curve.degree();
    if deg < 2 {
        return Ok(Vec::new());
    }
    let raws: Vec<Hom> = (0..=deg).map(|k| curve.raw(C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / (deg + 1) as f64))).collect();
    let coeffs = |form: &[C64; 3]| {
        let vals: Vec<C64> = raws.iter().map(|w| dot3(form, w)).collect();
        let m = deg + 1;
        (0..m)
            .map(|j| {
                (0..m).map(|k| vals[k] * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (j * k % m) as f64 / m as f64)).sum::<C64>() / m as f64
            })
            .collect::<Vec<C64>>()
    };
    let (p0, p1) = (coeffs(&proj.l0), coeffs(&proj.l1));
    let a = poly_mul(&poly_deriv(&p1), &p0);
    let b = poly_mul(&p1, &poly_deriv(&p0));
    let mut w: Vec<C64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    w.truncate(2 * deg - 1);
    let expected = 2 * deg - 2;
    let mut params: Vec<Param> = poly_roots(&w).into_iter().filter(|v| v.norm() <= 1.0).map(|v| Param::new(0, v)).collect();
    let rev: Vec<C64> = w.iter().rev().copied().collect();
    params.extend(poly_roots(&rev).into_iter().filter(|u| u.norm() < 1.0).map(|u| Param::new(1, u)));
    let geom = CurveGeometry { curve: *curve, projections: Vec::new() };
    let mut out: Vec<CriticalPoint> = Vec::with_capacity(params.len());
    for p in params {
        let z = curve.lift(p).0;
        let mut value = [None, None];
        let mut curv = [ZERO; 2];
        for bc in 0..2u8 {
            value[bc as usize] = proj.base_in(&z, bc);
            let h = 1e-6;
            let (_, gp) = geom.g(proj, bc, Param::new(p.chart, p.v + h));
            let (_, gm) = geom.g(proj, bc, Param::new(p.chart, p.v - h));
            curv[bc as usize] = (gp - gm) / (4.0 * h);
        }
        out.push(CriticalPoint { param: p, value, curv });
    }
    if out.len() != expected {
        return Err(GeometryError::Critical { found: out.len(), expected });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adaptive sampling

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelLayer {
    pub projection: usize,
    pub subdivision: usize,
    pub r: f64,
    pub strong: bool,
    pub labels: Vec<Label>,
}

/// Adaptive sample of V_n: square parameter cells in the two charts of
/// P¹ ≅ L, refined until the images of each cell's corners are within `tol`
/// of the image of its center.
#[derive(Debug, Clone)]
pub struct SampledCurve {
    pub n: usize,
    pub line: Line,
    pub tol: f64,
    pub params: Vec<Param>,
    /// Half-side of each parameter cell.
    pub halves: Vec<f64>,
    pub images: Vec<ChartPoint>,
    pub area_weights: Vec<f64>,
    /// Cells left unresolved by the sample budget, with their area.
    pub unresolved: Vec<(Param, f64, f64)>,
    pub labels: Vec<LabelLayer>,
}

impl SampledCurve {
    pub fn total_area(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.area_weights)
    }

    pub fn unresolved_area(&self) -> f64 {
        self.unresolved.iter().map(|u| u.2).sum()
    }
}

fn owns_cell(chart: u8, c: C64) -> bool {
    if chart == 0 {
        true
    } else {
        // chart 1 keeps the points whose chart-0 coordinate leaves [-1, 1]²
        if c.norm() == 0.0 {
            return true;
        }
        let s = c.inv();
        s.re.abs() > 1.0 || s.im.abs() > 1.0
    }
}

fn cell_spread(curve: &IteratedLine, chart: u8, c: C64, half: f64) -> (Hom, f64) {
    let mid = curve.lift(Param::new(chart, c)).0;
    let mut worst = 0.0f64;
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let corner = curve.lift(Param::new(chart, c + C64::new(sx * half, sy * half))).0;
        worst = worst.max(fs_distance(&mid, &corner, 3));
    }
    (mid, worst)
}

/// Samples f^n(L) adaptively. Cells still above `tol` when `max_samples`
/// is reached are reported as unresolved and carry no area weight.
pub fn iterate_line(map: &ProjectiveMap, line: &Line, n: usize, tol: f64, max_samples: usize) -> Result<SampledCurve, GeometryError> {
    if map.k != 2 {
        return Err(GeometryError::Dimension(map.k));
    }
    let cap = if map.d <= 2 { DEFAULT_N_CAP } else { 3 };
    if n > cap {
        return Err(GeometryError::IterateCap { n, cap });
    }
    let curve = IteratedLine { map, line, n };
    let mut level: Vec<(u8, C64, f64)> = Vec::new();
    let start = 8;
    let h0 = 1.0 / start as f64;
    for chart in 0..2u8 {
        for i in 0..start {
            for j in 0..start {
                let c = C64::new(-1.0 + (2 * i + 1) as f64 * h0, -1.0 + (2 * j + 1) as f64 * h0);
                level.push((chart, c, h0));
            }
        }
    }
    let mut out = SampledCurve {
        n,
        line: line.clone(),
        tol,
        params: Vec::new(),
        halves: Vec::new(),
        images: Vec::new(),
        area_weights: Vec::new(),
        unresolved: Vec::new(),
        labels: Vec::new(),
    };
    while !level.is_empty() {
        let evals = par_map(&level, |_, &(chart, c, half)| {
            let (mid, spread) = cell_spread(&curve, chart, c, half);
            let (z, dz) = curve.lift(Param::new(chart, c));
            // cells straddling the chart-ownership frontier are split to a
            // fine scale so that ownership by center is accurate
            let own_corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
                .iter()
                .filter(|(sx, sy)| owns_cell(chart, c + C64::new(sx * half, sy * half)))
                .count();
            let mixed = own_corners != 0 && own_corners != 4;
            (mid, spread, fs_density(&z, &dz) * 4.0 * half * half, mixed)
        });
        let mut next = Vec::new();
        let count = level.len();
        for (idx, (&(chart, c, half), (mid, spread, w, mixed))) in level.iter().zip(evals).enumerate() {
            let refine = spread > tol || (mixed && half > 1.0 / 512.0);
            // leaves so far: resolved, queued, and the rest of this level
            let leaves = out.params.len() + out.unresolved.len() + next.len() + (count - idx);
            if refine && leaves + 3 <= max_samples {
                let q = half / 2.0;
                for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                    next.push((chart, c + C64::new(sx * q, sy * q), q));
                }
                continue;
            }
            if !owns_cell(chart, c) {
                continue;
            }
            let p = Param::new(chart, c);
            if spread > tol {
                out.unresolved.push((p, half, w));
                continue;
            }
            out.params.push(p);
            out.halves.push(half);
            out.images.push(ChartPoint::from_hom(&mid, 2));
            out.area_weights.push(w);
        }
        level = next;
    }
    Ok(out)
}

/// Labels every sample for each projection and subdivision at cube size r.
pub fn label_samples(geom: &CurveGeometry, curve: &mut SampledCurve, r: f64, strong: bool, cuts: &Cuts) -> Result<(), GeometryError> {
    check_cube_size(r)?;
    let factor = if strong { 2.0 } else { 1.0 };
    for j in 0..geom.projections.len() {
        for s in 0..SUBDIVISIONS.len() {
            let labels = par_map(&curve.params, |_, &p| geom.label(j, p, s, r, factor, cuts));
            curve.labels.push(LabelLayer { projection: j, subdivision: s, r, strong, labels });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Component tables

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub sheets: usize,
    /// FS diameter and area; NaN for ramified components, which are bad
    /// regardless.
    pub diameter: f64,
    pub area: f64,
    pub good: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeRecord {
    pub projection: usize,
    pub subdivision: usize,
    pub chart: u8,
    pub ix: i64,
    pub iy: i64,
    pub center: [f64; 2],
    /// FS mass of the cube Q in the base.
    pub base_mass: f64,
    /// Components near critical points of π∘ι_n over 2Q.
    pub components: Vec<ComponentRecord>,
    /// g_n(Q) and b_n(Q), counted in sheets.
    pub good: usize,
    pub bad: usize,
}

/// Cubes of one size whose doubled cube meets the critical values of some
/// π_j∘ι_n, or borders them. Every other cube carries v_n good graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentTable {
    pub n: usize,
    pub r: f64,
    pub degree: usize,
    pub cubes: Vec<CubeRecord>,
}

impl ComponentTable {
    pub fn bad_total(&self) -> usize {
        self.cubes.iter().map(|c| c.bad).sum()
    }

    /// (1/v_n) Σ_Q b_n(Q) ω(Q) for one projection and subdivision: the
    /// π*ω-mass of S_n outside its strong-good components.
    pub fn deficit_of(&self, projection: usize, subdivision: usize) -> f64 {
        self.cubes
            .iter()
            .filter(|c| c.projection == projection && c.subdivision == subdivision)
            .map(|c| c.base_mass * c.bad as f64)
            .sum::<f64>()
            / self.degree as f64
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "n,r,projection,subdivision,chart,ix,iy,center_re,center_im,base_mass,good,bad,component,sheets,diameter,area,component_good")?;
        for c in &self.cubes {
            for (i, comp) in c.components.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{},{},{},{},{:.6e},{:.6e},{}",
                    self.n, self.r, c.projection, c.subdivision, c.chart, c.ix, c.iy, c.center[0], c.center[1], c.base_mass, c.good, c.bad, i,
                    comp.sheets, comp.diameter, comp.area, comp.good
                )?;
            }
        }
        Ok(())
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        self.0[i] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn classify_one(geom: &CurveGeometry, j: usize, sub: usize, r: f64, cuts: &Cuts) -> Vec<CubeRecord> {
    let pd = &geom.projections[j];
    // cube → (critical points with value in 2Q, critical points bordering it)
    let mut work: BTreeMap<(u8, i64, i64), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (ci, c) in pd.crits.iter().enumerate() {
        for bc in 0..2u8 {
            let Some(cv) = c.value[bc as usize] else { continue };
            if cv.norm() > 1.5 + 2.0 * r {
                continue;
            }
            let home = cube_of(bc, cv, r, sub);
            for dx in -2..=2 {
                for dy in -2..=2 {
                    let cube = cube_at(bc, home.ix + dx, home.iy + dy, r, sub);
                    if !owned(&cube) {
                        continue;
                    }
                    let dist = sup_dist(cv, cube.center);
                    if dist < r {
                        work.entry((bc, cube.ix, cube.iy)).or_default().0.push(ci);
                    } else if dist < 2.0 * r {
                        work.entry((bc, cube.ix, cube.iy)).or_default().1.push(ci);
                    }
                }
            }
        }
    }
    let deg = geom.degree();
    let mut out = Vec::with_capacity(work.len());
    for ((bc, ix, iy), (ram, near)) in work {
        let cube = cube_at(bc, ix, iy, r, sub);
        let part = sheet_partition(geom, j, bc, cube.center, &ram);
        let mut comps = Vec::new();
        let mut groups: BTreeMap<usize, (usize, bool)> = BTreeMap::new();
        for (i, &root) in part.root.iter().enumerate() {
            let g = groups.entry(root).or_default();
            g.0 += 1;
            g.1 |= part.ramified[i];
        }
        for &(size, ramified) in groups.values() {
            if ramified {
                comps.push(ComponentRecord { sheets: size, diameter: f64::NAN, area: f64::NAN, good: false });
            }
        }
        // a critical value just outside 2Q can stretch an unramified sheet,
        // so every such sheet is measured; finding which sheets pass near
        // the critical point costs more than measuring them all
        if !near.is_empty() {
            for (i, &p) in part.pre.iter().enumerate() {
                if part.ramified[i] {
                    continue;
                }
                let rec = match geom.component_shape(pd, bc, p, cube.center, cube.center, r) {
                    Some((area, diam)) => ComponentRecord { sheets: 1, diameter: diam, area, good: area <= cuts.area && diam <= cuts.diameter },
                    None => ComponentRecord { sheets: 1, diameter: f64::NAN, area: f64::NAN, good: false },
                };
                comps.push(rec);
            }
        }
        let bad: usize = comps.iter().filter(|c| !c.good).map(|c| c.sheets).sum();
        out.push(CubeRecord {
            projection: j,
            subdivision: sub,
            chart: bc,
            ix,
            iy,
            center: [cube.center.re, cube.center.im],
            base_mass: base_density(cube.center) * r * r,
            components: comps,
            good: deg.saturating_sub(bad),
            bad,
        });
    }
    out
}

/// Strong classification (components over 2Q) for every projection and
/// each of the four overlapping subdivisions at cube size r.
pub fn classify_components(geom: &CurveGeometry, r: f64, cuts: &Cuts) -> Result<ComponentTable, GeometryError> {
    check_cube_size(r)?;
    let jobs: Vec<(usize, usize)> = (0..geom.projections.len()).flat_map(|j| (0..SUBDIVISIONS.len()).map(move |s| (j, s))).collect();
    let parts = par_map(&jobs, |_, &(j, s)| classify_one(geom, j, s, r, cuts));
    Ok(ComponentTable { n: geom.curve.n, r, degree: geom.degree(), cubes: parts.into_iter().flatten().collect() })
}

/// Every component over one cube, found from the preimages of its center:
/// preimages reached from a common critical point share a component.
pub fn components_over(geom: &CurveGeometry, j: usize, bc: u8, center: C64, half: f64) -> Vec<usize> {
    let crits: Vec<usize> = geom.projections[j]
        .crits
        .iter()
        .enumerate()
        .filter(|(_, c)| c.value[bc as usize].is_some_and(|cv| sup_dist(cv, center) < half))
        .map(|(i, _)| i)
        .collect();
    let part = sheet_partition(geom, j, bc, center, &crits);
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    for &root in &part.root {
        *groups.entry(root).or_default() += 1;
    }
    groups.into_values().collect()
}

/// The preimages of `center` grouped into components over the box around
/// it. Each preimage is continued toward every listed critical value; the
/// two sheets arriving closest to the critical point are the ones it joins.
/// Over a disc these transpositions generate the monodromy, so the classes
/// are the components. Continuing outward from the critical point instead
/// fails where the curve is nearly collapsed and g is flat to roundoff.
struct SheetPartition {
    pre: Vec<Param>,
    root: Vec<usize>,
    /// Joined at some critical point.
    ramified: Vec<bool>,
}

/// The two sheets over `center` that meet at critical point `ci`. The two
/// preimages of a point near the critical value closest to the critical
/// point are lifted back to the center; if that fails, every sheet is
/// continued toward the critical value and the two arriving closest win.
fn sheets_at_crit(geom: &CurveGeometry, j: usize, bc: u8, center: C64, pre: &[Param], ci: usize) -> Option<[usize; 2]> {
    let pd = &geom.projections[j];
    let c = &pd.crits[ci];
    let cv = c.value[bc as usize]?;
    if pre.len() < 2 {
        return None;
    }
    let target = cv + (center - cv) * 1e-2;
    let by_distance = |mut d: Vec<(f64, usize)>| {
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d
    };
    let nearest_sheet = |q: Param| by_distance(pre.iter().enumerate().map(|(i, p)| (p.chordal(q), i)).collect())[0];

    let branches = geom.preimages(j, bc, target);
    if branches.len() >= 2 {
        let near = by_distance(branches.iter().enumerate().map(|(i, b)| (b.chordal(c.param), i)).collect());
        let back: Option<Vec<(f64, usize)>> = near[..2]
            .iter()
            .map(|&(_, i)| geom.lift_path(&pd.proj, bc, branches[i], target, center).map(nearest_sheet))
            .collect();
        if let Some(back) = back {
            if back[0].1 != back[1].1 && back.iter().all(|&(d, _)| d < 1e-6) {
                return Some([back[0].1, back[1].1]);
            }
        }
    }

    let d = pre
        .iter()
        .enumerate()
        .map(|(i, &p)| match geom.lift_path(&pd.proj, bc, p, center, target) {
            Some(end) => (end.chordal(c.param), i),
            // continuation stalls only at a critical point
            None => (0.0, i),
        })
        .collect();
    let d = by_distance(d);
    Some([d[0].1, d[1].1])
}

fn sheet_partition(geom: &CurveGeometry, j: usize, bc: u8, center: C64, crits: &[usize]) -> SheetPartition {
    let pre = geom.preimages(j, bc, center);
    let mut uf = UnionFind((0..pre.len()).collect());
    let mut ramified = vec![false; pre.len()];
    for &ci in crits {
        if let Some([a, b]) = sheets_at_crit(geom, j, bc, center, &pre, ci) {
            ramified[a] = true;
            ramified[b] = true;
            uf.union(a, b);
        }
    }
    let root = (0..pre.len()).map(|i| uf.find(i)).collect();
    SheetPartition { pre, root, ramified }
}

// ---------------------------------------------------------------------------
// Volume deficit and mass concentration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeficitRow {
    pub r: f64,
    /// Mean over projections and subdivisions.
    pub deficit: f64,
    pub per_projection: Vec<f64>,
    /// Σ_Q b_n(Q) over all projections and subdivisions.
    pub bad_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeficitTable {
    pub n: usize,
    pub rows: Vec<DeficitRow>,
    /// Least-squares slope of log deficit against log r.
    pub slope: f64,
    /// Geometric mean of deficit/r².
    pub c: f64,
}

/// Mass of S_n outside the strong-good components, measured per
/// projection j with π_j*ω and averaged over projections and subdivisions.
pub fn volume_deficit(geom: &CurveGeometry, r_list: &[f64], cuts: &Cuts) -> Result<DeficitTable, GeometryError> {
    let mut rows = Vec::new();
    for &r in r_list {
        let table = classify_components(geom, r, cuts)?;
        let np = geom.projections.len();
        let per_projection: Vec<f64> =
            (0..np).map(|j| (0..SUBDIVISIONS.len()).map(|s| table.deficit_of(j, s)).sum::<f64>() / SUBDIVISIONS.len() as f64).collect();
        let deficit = per_projection.iter().sum::<f64>() / np.max(1) as f64;
        if deficit >= 1.0 {
            return Err(GeometryError::EmptyGood(r));
        }
        rows.push(DeficitRow { r, deficit, per_projection, bad_count: table.bad_total() });
    }
    let pos: Vec<&DeficitRow> = rows.iter().filter(|r| r.deficit > 0.0).collect();
    let (slope, c) = if pos.len() >= 2 {
        let x: Vec<f64> = pos.iter().map(|r| r.r.ln()).collect();
        let y: Vec<f64> = pos.iter().map(|r| r.deficit.ln()).collect();
        let slope = linear_fit(&x, &y).0;
        let c = (pos.iter().map(|r| (r.deficit / (r.r * r.r)).ln()).sum::<f64>() / pos.len() as f64).exp();
        (slope, c)
    } else {
        (f64::NAN, 0.0)
    };
    Ok(DeficitTable { n: geom.curve.n, rows, slope, c })
}

/// Point masses of [L]∧T: the Laplacian of G on L by five-point differences
/// over an `m × m` grid in each parameter chart.
#[derive(Debug, Clone)]
pub struct LineMeasure {
    pub atoms: Vec<(Param, f64)>,
    /// Negative mass and positive mass below `MIN_ATOM`, both dropped. On
    /// the harmonic part of G|L the five-point Laplacian leaves O(h²) noise
    /// of either sign.
    pub negative: f64,
    pub dropped: f64,
}

/// Atoms lighter than this are discretization noise.
pub const MIN_ATOM: f64 = 1e-7;

impl LineMeasure {
    pub fn total(&self) -> f64 {
        crate::numeric::pairwise_sum(&self.atoms.iter().map(|a| a.1).collect::<Vec<_>>())
    }
}

pub fn line_measure(pot: &dyn Potential, line: &Line, m: usize) -> LineMeasure {
    let h = 2.0 / m as f64;
    let mut atoms = Vec::new();
    let (mut negative, mut dropped) = (0.0, 0.0);
    for chart in 0..2u8 {
        let side = m + 2;
        let vals = par_range(side * side, |idx| {
            let (i, j) = (idx % side, idx / side);
            let v = C64::new(-1.0 - h / 2.0 + i as f64 * h, -1.0 - h / 2.0 + j as f64 * h);
            pot.eval(&line.at(Param::new(chart, v)).0)
        });
        for j in 1..=m {
            for i in 1..=m {
                let v = C64::new(-1.0 - h / 2.0 + i as f64 * h, -1.0 - h / 2.0 + j as f64 * h);
                if !owns_cell(chart, v) {
                    continue;
                }
                let at = |a: usize, b: usize| vals[b * side + a];
                let lap = at(i + 1, j) + at(i - 1, j) + at(i, j + 1) + at(i, j - 1) - 4.0 * at(i, j);
                let mass = lap / (2.0 * std::f64::consts::PI);
                if mass >= MIN_ATOM {
                    atoms.push((Param::new(chart, v), mass));
                } else if mass < 0.0 {
                    negative -= mass;
                } else {
                    dropped += mass;
                }
            }
        }
    }
    LineMeasure { atoms, negative, dropped }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub r: f64,
    /// Fraction of (f^n)_*([L]∧T) on strong-good points, averaged over
    /// projections and subdivisions like the volume deficit.
    pub fraction: f64,
    /// Fraction on points strong-good for at least one projection and
    /// subdivision.
    pub union_fraction: f64,
    pub pushed_mass: f64,
}

/// M(T∧S_n[r]) for each r: the atoms of [L]∧T are pushed to their images
/// ι_n(p) on V_n and the mass on strong-good points is summed. Boundary
/// labels count as not concentrated.
pub fn mass_concentration(geom: &CurveGeometry, measure: &LineMeasure, r_list: &[f64], cuts: &Cuts) -> Result<Vec<ConcentrationRow>, GeometryError> {
    let total = measure.total();
    let combos = (geom.projections.len() * SUBDIVISIONS.len()) as f64;
    let mut rows = Vec::new();
    for &r in r_list {
        check_cube_size_loose(r)?;
        let tallies = par_map(&measure.atoms, |_, &(p, m)| {
            let mut good = 0usize;
            for j in 0..geom.projections.len() {
                for s in 0..SUBDIVISIONS.len() {
                    if geom.label(j, p, s, r, 2.0, cuts) == Label::Good {
                        good += 1;
                    }
                }
            }
            (m * good as f64 / combos, if good > 0 { m } else { 0.0 })
        });
        let mean: Vec<f64> = tallies.iter().map(|t| t.0).collect();
        let union: Vec<f64> = tallies.iter().map(|t| t.1).collect();
        rows.push(ConcentrationRow {
            n: geom.curve.n,
            r,
            fraction: crate::numeric::pairwise_sum(&mean) / total,
            union_fraction: crate::numeric::pairwise_sum(&union) / total,
            pushed_mass: total,
        });
    }
    Ok(rows)
}

/// The (H_1) ladder r_n = r₀ n^{-2} (r₀ for n = 0) need not be dyadic.
fn check_cube_size_loose(r: f64) -> Result<(), GeometryError> {
    if r > 0.0 && r <= 0.5 {
        Ok(())
    } else {
        Err(GeometryError::Grid(r))
    }
}

pub fn h1_radius(r0: f64, n: usize) -> f64 {
    r0 / (n.max(1) as f64).powi(2)
}

pub fn write_deficit_csv<W: Write>(w: &mut W, tables: &[DeficitTable]) -> io::Result<()> {
    writeln!(w, "n,r,deficit,deficit_over_r2,bad_count")?;
    for t in tables {
        for row in &t.rows {
            writeln!(w, "{},{},{:.12e},{:.12e},{}", t.n, row.r, row.deficit, row.deficit / (row.r * row.r), row.bad_count)?;
        }
    }
    Ok(())
}

/// Curve samples in one projection's base chart colored by label (green
/// good, red bad, blue boundary) on a `size × size` image of [-1, 1]².
pub fn write_overlay_ppm<W: Write>(w: &mut W, geom: &CurveGeometry, curve: &SampledCurve, layer: usize, size: usize) -> io::Result<()> {
    let l = &curve.labels[layer];
    let proj = &geom.projections[l.projection].proj;
    let mut img = vec![[0u8; 3]; size * size];
    for (i, x) in curve.images.iter().enumerate() {
        let (bc, z) = proj.base(&x.to_hom());
        if bc != 0 {
            continue;
        }
        let px = ((z.re + 1.0) / 2.0 * size as f64) as i64;
        let py = ((1.0 - z.im) / 2.0 * size as f64) as i64;
        if px < 0 || py < 0 || px >= size as i64 || py >= size as i64 {
            continue;
        }
        img[py as usize * size + px as usize] = match l.labels[i] {
            Label::Good => [40, 200, 60],
            Label::Bad => [230, 40, 40],
            Label::Boundary => [60, 90, 230],
        };
    }
    write!(w, "P6\n{size} {size}\n255\n")?;
    for p in img {
        w.write_all(&p)?;
    }
    Ok(())
}
