//! Holomorphic endomorphisms of P^k given by homogeneous polynomial lifts.
//!
//! Points in hot loops are homogeneous arrays `[C64; 4]` (only the first k+1
//! entries are used), renormalized by their sup-norm after every step.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{random_unit, stream, C64};

pub type Hom = [C64; 4];

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("unsupported dimension k={0} (need 1 ≤ k ≤ 3)")]
    Dimension(usize),
    #[error("unsupported degree d={0}")]
    Degree(usize),
    #[error("component {component} is not homogeneous of degree {d}")]
    NotHomogeneous { component: usize, d: usize },
    #[error("lift has {got} components, expected {expected}")]
    Components { got: usize, expected: usize },
    #[error("unknown catalog map '{0}'")]
    UnknownMap(String),
    #[error("degenerate lift: {0}")]
    Degenerate(String),
    #[error("invalid chart point: {0}")]
    BadPoint(String),
    #[error("overflow while evaluating the lift")]
    Overflow,
    #[error("ill-conditioned chart transition along the orbit at step {0}")]
    IllConditioned(usize),
    #[error("map JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub exps: Vec<u32>,
    pub coef: C64,
}

#[derive(Debug, Clone)]
pub struct ProjectiveMap {
    pub k: usize,
    pub d: usize,
    pub lift: Vec<Vec<Monomial>>,
    pub name: Option<String>,
    packed: Vec<Vec<Packed>>,
    /// Derivatives `∂F_l/∂Z_c`, indexed `[l][c]`.
    deriv: Vec<Vec<Vec<Packed>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub chart: usize,
    pub coords: Vec<C64>,
}

/// Chart Jacobians along an orbit together with Fubini–Study factors.
///
/// `metric_factors[j]` is an upper-triangular R with `R*R` the Fubini–Study
/// metric at the j-th orbit point, so `‖v‖_FS = |R v|`.
#[derive(Debug, Clone)]
pub struct CocycleResult {
    pub n: usize,
    pub orbit: Vec<ChartPoint>,
    pub matrices: Vec<DMatrix<C64>>,
    pub metric_factors: Vec<DMatrix<C64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub homogeneous: bool,
    /// Minimum of the Euclidean norm of the lift over the unit sphere.
    pub min_norm: f64,
    pub argmin: Vec<[f64; 2]>,
    pub suspected_common_zero: bool,
    pub pass: bool,
}

pub const COMMON_ZERO_THRESHOLD: f64 = 1e-8;

/// Monomial with exponents packed for the evaluation loops.
#[derive(Debug, Clone, Copy)]
struct Packed {
    coef: C64,
    exps: [u8; 4],
}

const MAX_TABLE: usize = 33;

fn eval_packed(poly: &[Packed], pw: &[[C64; MAX_TABLE]; 4], n: usize) -> C64 {
    let mut acc = ZERO;
    for m in poly {
        let mut t = m.coef;
        for i in 0..n {
            let e = m.exps[i] as usize;
            if e != 0 {
                t *= pw[i][e];
            }
        }
        acc += t;
    }
    acc
}

fn power_table(z: &Hom, n: usize, d: usize) -> [[C64; MAX_TABLE]; 4] {
    let mut pw = [[ZERO; MAX_TABLE]; 4];
    for i in 0..n {
        pw[i][0] = ONE;
        for e in 1..=d {
            pw[i][e] = pw[i][e - 1] * z[i];
        }
    }
    pw
}

pub fn sup_norm(z: &Hom, n: usize) -> f64 {
    z[..n].iter().map(|c| c.norm_sqr()).fold(0.0, f64::max).sqrt()
}

pub fn euclid_norm(z: &Hom, n: usize) -> f64 {
    z[..n].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Index of the largest modulus coordinate, ties to the lowest index.
pub fn max_chart(z: &Hom, n: usize) -> usize {
    let mut best = 0;
    let mut bv = z[0].norm_sqr();
    for (i, c) in z.iter().enumerate().take(n).skip(1) {
        let v = c.norm_sqr();
        if v > bv {
            best = i;
            bv = v;
        }
    }
    best
}

/// Scales z to unit sup-norm, returning the log of the former sup-norm.
pub fn sup_normalize(z: &mut Hom, n: usize) -> f64 {
    let s = sup_norm(z, n);
    let inv = 1.0 / s;
    for c in z.iter_mut().take(n) {
        *c *= inv;
    }
    s.ln()
}

impl ChartPoint {
    pub fn new(chart: usize, coords: Vec<C64>) -> Self {
        ChartPoint { chart, coords }
    }

    pub fn to_hom(&self) -> Hom {
        let mut z = [ZERO; 4];
        let mut a = 0;
        for (i, zi) in z.iter_mut().enumerate().take(self.coords.len() + 1) {
            if i == self.chart {
                *zi = ONE;
            } else {
                *zi = self.coords[a];
                a += 1;
            }
        }
        z
    }

    /// Chart point in the chart of the largest coordinate.
    pub fn from_hom(z: &Hom, k: usize) -> Self {
        Self::from_hom_in(z, k, max_chart(z, k + 1))
    }

    pub fn from_hom_in(z: &Hom, k: usize, chart: usize) -> Self {
        let inv = ONE / z[chart];
        let coords = (0..=k).filter(|&i| i != chart).map(|i| z[i] * inv).collect();
        ChartPoint { chart, coords }
    }

    pub fn in_chart(&self, chart: usize) -> Result<Self, MapError> {
        let k = self.coords.len();
        let z = self.to_hom();
        if z[chart].norm() < 1e-300 {
            return Err(MapError::BadPoint(format!("coordinate {chart} vanishes")));
        }
        Ok(Self::from_hom_in(&z, k, chart))
    }

    pub fn validate(&self, k: usize) -> Result<(), MapError> {
        if self.chart > k || self.coords.len() != k {
            return Err(MapError::BadPoint(format!("chart {} with {} coordinates", self.chart, self.coords.len())));
        }
        if self.coords.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(MapError::BadPoint("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// Index of the chart coordinate `a` inside the homogeneous vector.
fn hom_index(chart: usize, a: usize) -> usize {
    if a < chart {
        a
    } else {
        a + 1
    }
}

/// Jacobian in charts of Z ↦ W (given W and ∂W/∂Z), source chart `c`,
/// target chart `m`.
fn chart_jacobian(w: &Hom, jac: &[[C64; 4]; 4], k: usize, c: usize, m: usize) -> DMatrix<C64> {
    let wm = w[m];
    let wm2 = wm * wm;
    DMatrix::from_fn(k, k, |r, a| {
        let l = hom_index(m, r);
        let ia = hom_index(c, a);
        (jac[l][ia] * wm - w[l] * jac[m][ia]) / wm2
    })
}

/// Derivative of the change of charts at x, from `x.chart` to `target`.
pub fn chart_transition(x: &ChartPoint, target: usize) -> DMatrix<C64> {
    let k = x.coords.len();
    let z = x.to_hom();
    let mut id = [[ZERO; 4]; 4];
    for (i, row) in id.iter_mut().enumerate() {
        row[i] = ONE;
    }
    chart_jacobian(&z, &id, k, x.chart, target)
}

/// Fubini–Study metric in affine coordinates:
/// `((1+|x|²) I − x x*) / (1+|x|²)²`.
pub fn fs_metric(coords: &[C64]) -> DMatrix<C64> {
    let k = coords.len();
    let s = 1.0 + coords.iter().map(|c| c.norm_sqr()).sum::<f64>();
    DMatrix::from_fn(k, k, |a, b| {
        let delta = if a == b { s } else { 0.0 };
        (C64::from(delta) - coords[a] * coords[b].conj()) / (s * s)
    })
}

/// Upper factor R with `R* R` equal to the Fubini–Study metric.
pub fn fs_factor(coords: &[C64]) -> DMatrix<C64> {
    let g = fs_metric(coords);
    let l = g.cholesky().expect("Fubini-Study metric is positive definite").l();
    l.adjoint()
}

/// Fubini–Study distance on P^k (in [0, π/2]).
pub fn fs_distance(a: &Hom, b: &Hom, n: usize) -> f64 {
    // atan2 form stays accurate for nearby points, unlike acos
    let (na, nb) = (euclid_norm(a, n), euclid_norm(b, n));
    let mut ip = ZERO;
    for i in 0..n {
        ip += a[i].conj() * b[i];
    }
    ip /= na * nb;
    let mut perp = 0.0;
    for i in 0..n {
        perp += (b[i] / nb - a[i] / na * ip).norm_sqr();
    }
    perp.sqrt().atan2(ip.norm())
}

impl ProjectiveMap {
    pub fn new(k: usize, d: usize, lift: Vec<Vec<Monomial>>, name: Option<String>) -> Result<Self, MapError> {
        if !(1..=3).contains(&k) {
            return Err(MapError::Dimension(k));
        }
        if d == 0 || d >= MAX_TABLE {
            return Err(MapError::Degree(d));
        }
        if lift.len() != k + 1 {
            return Err(MapError::Components { got: lift.len(), expected: k + 1 });
        }
        for (l, poly) in lift.iter().enumerate() {
            if poly.iter().any(|m| m.exps.len() != k + 1 || m.exps.iter().sum::<u32>() as usize != d) {
                return Err(MapError::NotHomogeneous { component: l, d });
            }
        }
        let lift: Vec<Vec<Monomial>> = lift.into_iter().map(normalize_poly).collect();
        let pack = |m: &Monomial| {
            let mut exps = [0u8; 4];
            for (i, &e) in m.exps.iter().enumerate() {
                exps[i] = e as u8;
            }
            Packed { coef: m.coef, exps }
        };
        let packed = lift.iter().map(|p| p.iter().map(pack).collect()).collect();
        let deriv = lift
            .iter()
            .map(|poly| {
                (0..=k)
                    .map(|c| {
                        poly.iter()
                            .filter(|m| m.exps[c] > 0)
                            .map(|m| {
                                let mut exps = m.exps.clone();
                                exps[c] -= 1;
                                pack(&Monomial { exps, coef: m.coef * m.exps[c] as f64 })
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(ProjectiveMap { k, d, lift, name, packed, deriv })
    }

    pub fn dim(&self) -> usize {
        self.k + 1
    }

    /// The lift F(Z).
    pub fn eval_lift(&self, z: &Hom) -> Hom {
        let n = self.k + 1;
        let pw = power_table(z, n, self.d);
        let mut out = [ZERO; 4];
        for (l, o) in out.iter_mut().enumerate().take(n) {
            *o = eval_packed(&self.packed[l], &pw, n);
        }
        out
    }

    /// F(Z) and its Jacobian `J[l][c] = ∂F_l/∂Z_c`.
    pub fn eval_with_jacobian(&self, z: &Hom) -> (Hom, [[C64; 4]; 4]) {
        let n = self.k + 1;
        let pw = power_table(z, n, self.d);
        let mut w = [ZERO; 4];
        let mut jac = [[ZERO; 4]; 4];
        for l in 0..n {
            w[l] = eval_packed(&self.packed[l], &pw, n);
            for c in 0..n {
                jac[l][c] = eval_packed(&self.deriv[l][c], &pw, n);
            }
        }
        (w, jac)
    }

    /// Lift applied to a truncated power series `Z(s) = Σ z_j s^j`,
    /// returning the image series to the same order.
    pub fn eval_series<const N: usize>(&self, z: &[[C64; N]; 4]) -> [[C64; N]; 4] {
        let n = self.k + 1;
        let mul = |a: &[C64; N], b: &[C64; N]| {
            let mut o = [ZERO; N];
            for i in 0..N {
                for j in 0..N - i {
                    o[i + j] += a[i] * b[j];
                }
            }
            o
        };
        let mut pw: Vec<Vec<[C64; N]>> = Vec::with_capacity(n);
        for zi in z.iter().take(n) {
            let mut row = Vec::with_capacity(self.d + 1);
            let mut one = [ZERO; N];
            one[0] = ONE;
            row.push(one);
            for e in 1..=self.d {
                let next = mul(&row[e - 1], zi);
                row.push(next);
            }
            pw.push(row);
        }
        let mut out = [[ZERO; N]; 4];
        for l in 0..n {
            for m in &self.lift[l] {
                let mut t = [ZERO; N];
                t[0] = m.coef;
                for (i, &e) in m.exps.iter().enumerate() {
                    if e > 0 {
                        t = mul(&t, &pw[i][e as usize]);
                    }
                }
                for j in 0..N {
                    out[l][j] += t[j];
                }
            }
        }
        out
    }

    /// One sup-normalized step: returns F(ẑ)/‖F(ẑ)‖_∞ and log‖F(ẑ)‖_∞,
    /// where ẑ is z scaled to unit sup-norm.
    pub fn step(&self, z: &Hom) -> (Hom, f64) {
        let n = self.k + 1;
        let mut zh = *z;
        sup_normalize(&mut zh, n);
        let mut w = self.eval_lift(&zh);
        let lg = sup_normalize(&mut w, n);
        (w, lg)
    }

    pub fn evaluate(&self, x: &ChartPoint) -> Result<ChartPoint, MapError> {
        x.validate(self.k)?;
        let (w, lg) = self.step(&x.to_hom());
        if !lg.is_finite() || w.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(MapError::Overflow);
        }
        Ok(ChartPoint::from_hom(&w, self.k))
    }

    /// Chart Jacobians of f along the orbit of x, with metric factors.
    pub fn differential(&self, x: &ChartPoint, n: usize) -> Result<CocycleResult, MapError> {
        x.validate(self.k)?;
        let k = self.k;
        let mut orbit = vec![x.clone()];
        let mut matrices = Vec::with_capacity(n);
        let mut metric_factors = vec![fs_factor(&x.coords)];
        let mut cur = x.clone();
        for step in 0..n {
            let z = cur.to_hom();
            let (w, jac) = self.eval_with_jacobian(&z);
            let m = max_chart(&w, k + 1);
            if w[m].norm() == 0.0 || !w[m].norm().is_finite() {
                return Err(MapError::IllConditioned(step));
            }
            let a = chart_jacobian(&w, &jac, k, cur.chart, m);
            if a.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(MapError::IllConditioned(step));
            }
            let next = ChartPoint::from_hom_in(&w, k, m);
            metric_factors.push(fs_factor(&next.coords));
            matrices.push(a);
            orbit.push(next.clone());
            cur = next;
        }
        Ok(CocycleResult { n, orbit, matrices, metric_factors })
    }

    /// Composition self ∘ other as a new lift (degree d·d').
    pub fn compose(&self, other: &ProjectiveMap) -> Result<ProjectiveMap, MapError> {
        if self.k != other.k {
            return Err(MapError::Dimension(other.k));
        }
        let n = self.k + 1;
        let g: Vec<Poly> = other.lift.iter().map(|p| Poly::from_monomials(p)).collect();
        let mut lift = Vec::with_capacity(n);
        for poly in &self.lift {
            let mut acc = Poly::default();
            for m in poly {
                let mut t = Poly::constant(m.coef, n);
                for (i, &e) in m.exps.iter().enumerate() {
                    for _ in 0..e {
                        t = t.mul(&g[i]);
                    }
                }
                acc.add_assign(&t);
            }
            lift.push(acc.to_monomials());
        }
        ProjectiveMap::new(self.k, self.d * other.d, lift, None)
    }

    pub fn to_json(&self) -> MapJson {
        MapJson {
            k: self.k,
            d: self.d,
            lift: self
                .lift
                .iter()
                .map(|p| p.iter().map(|m| MonomialJson { exps: m.exps.clone(), re: m.coef.re, im: m.coef.im }).collect())
                .collect(),
            name: self.name.clone(),
        }
    }

    pub fn from_json(j: &MapJson) -> Result<ProjectiveMap, MapError> {
        let lift = j
            .lift
            .iter()
            .map(|p| p.iter().map(|m| Monomial { exps: m.exps.clone(), coef: C64::new(m.re, m.im) }).collect())
            .collect();
        ProjectiveMap::new(j.k, j.d, lift, j.name.clone())
    }
}

fn normalize_poly(poly: Vec<Monomial>) -> Vec<Monomial> {
    let mut map: BTreeMap<Vec<u32>, C64> = BTreeMap::new();
    for m in poly {
        *map.entry(m.exps).or_insert(ZERO) += m.coef;
    }
    map.into_iter().filter(|(_, c)| c.norm() != 0.0).map(|(exps, coef)| Monomial { exps, coef }).collect()
}

#[derive(Debug, Clone, Default)]
struct Poly {
    terms: BTreeMap<Vec<u32>, C64>,
}

impl Poly {
    fn constant(c: C64, n: usize) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(vec![0; n], c);
        Poly { terms }
    }
    fn from_monomials(ms: &[Monomial]) -> Self {
        Poly { terms: ms.iter().map(|m| (m.exps.clone(), m.coef)).collect() }
    }
    fn mul(&self, o: &Poly) -> Poly {
        let mut terms: BTreeMap<Vec<u32>, C64> = BTreeMap::new();
        for (a, x) in &self.terms {
            for (b, y) in &o.terms {
                let e: Vec<u32> = a.iter().zip(b).map(|(p, q)| p + q).collect();
                *terms.entry(e).or_insert(ZERO) += x * y;
            }
        }
        Poly { terms }
    }
    fn add_assign(&mut self, o: &Poly) {
        for (e, c) in &o.terms {
            *self.terms.entry(e.clone()).or_insert(ZERO) += c;
        }
    }
    fn to_monomials(&self) -> Vec<Monomial> {
        normalize_poly(self.terms.iter().map(|(e, c)| Monomial { exps: e.clone(), coef: *c }).collect())
    }
}

impl CocycleResult {
    /// Cocycle in orthonormal frames: `R_{j+1} J_j R_j^{-1}`.
    pub fn normalized(&self) -> Vec<DMatrix<C64>> {
        (0..self.n)
            .map(|j| {
                let rinv = self.metric_factors[j].clone().try_inverse().expect("metric factor invertible");
                &self.metric_factors[j + 1] * &self.matrices[j] * rinv
            })
            .collect()
    }

    /// Product `J_{n−1} ⋯ J_0` in chart coordinates.
    pub fn product(&self) -> DMatrix<C64> {
        let k = self.metric_factors[0].nrows();
        let mut p = DMatrix::identity(k, k);
        for m in &self.matrices {
            p = m * p;
        }
        p
    }

    /// `‖df^n v‖_FS / ‖v‖_FS` for a chart tangent vector v at the start.
    pub fn stretch(&self, v: &DVector<C64>) -> f64 {
        let w = self.product() * v;
        let num = (&self.metric_factors[self.n] * w).norm();
        let den = (&self.metric_factors[0] * v).norm();
        num / den
    }
}

/// Homogeneity, plus a numerical search for common zeros: minimum of the
/// Euclidean norm of the lift over the unit sphere by multistart Riemannian
/// gradient descent.
pub fn validate(map: &ProjectiveMap, trials: usize, seed: u64) -> ValidationReport {
    let n = map.k + 1;
    let homogeneous = map
        .lift
        .iter()
        .all(|p| p.iter().all(|m| m.exps.iter().sum::<u32>() as usize == map.d));
    let mut best = f64::INFINITY;
    let mut arg = [ZERO; 4];
    for t in 0..trials.max(1) {
        let mut rng = stream(seed, t as u64);
        let u = random_unit(&mut rng, n);
        let mut z = [ZERO; 4];
        for i in 0..n {
            z[i] = u[i];
        }
        let (zf, val) = descend(map, z);
        if val < best {
            best = val;
            arg = zf;
        }
    }
    let min_norm = best.sqrt();
    let suspected = min_norm < COMMON_ZERO_THRESHOLD;
    ValidationReport {
        homogeneous,
        min_norm,
        argmin: arg[..n].iter().map(|c| [c.re, c.im]).collect(),
        suspected_common_zero: suspected,
        pass: homogeneous && !suspected,
    }
}

fn objective(map: &ProjectiveMap, z: &Hom) -> f64 {
    map.eval_lift(z)[..map.k + 1].iter().map(|c| c.norm_sqr()).sum()
}

fn descend(map: &ProjectiveMap, mut z: Hom) -> (Hom, f64) {
    let n = map.k + 1;
    let mut f = objective(map, &z);
    let mut step = 0.1;
    for _ in 0..2000 {
        let (w, jac) = map.eval_with_jacobian(&z);
        // Wirtinger gradient of ‖F‖² with respect to conj(Z) is J* F
        let mut g = [ZERO; 4];
        for c in 0..n {
            for l in 0..n {
                g[c] += jac[l][c].conj() * w[l];
            }
        }
        let mut rad = ZERO;
        for i in 0..n {
            rad += z[i].conj() * g[i];
        }
        for i in 0..n {
            g[i] -= z[i] * rad.re;
        }
        let gn: f64 = g[..n].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if gn < 1e-300 || f < 1e-40 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut zn = z;
            for i in 0..n {
                zn[i] -= g[i] * step;
            }
            let nn = euclid_norm(&zn, n);
            for c in zn.iter_mut().take(n) {
                *c /= nn;
            }
            let fnew = objective(map, &zn);
            if fnew < f - 1e-4 * step * gn * gn {
                z = zn;
                f = fnew;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (z, f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialJson {
    pub exps: Vec<u32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapJson {
    pub k: usize,
    pub d: usize,
    pub lift: Vec<Vec<MonomialJson>>,
    #[serde(default)]
    pub name: Option<String>,
}

pub mod catalog {
    //! The example families.

    use super::*;

    /// Parameters accepted by [`build`].
    #[derive(Debug, Clone, Serialize, Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    pub struct CatalogParams {
        #[serde(default)]
        pub k: Option<usize>,
        #[serde(default)]
        pub d: Option<usize>,
        /// Perturbation for `pk_power`.
        #[serde(default)]
        pub c: Option<[f64; 2]>,
        #[serde(default)]
        pub custom: Option<MapJson>,
    }

    pub fn build(name: &str, params: &CatalogParams) -> Result<ProjectiveMap, MapError> {
        let map = match name {
            "monomial" => monomial(params.k.unwrap_or(2), params.d.unwrap_or(2))?,
            "lattes" | "product_quotient" | "lattes_product_quotient" => product_quotient(&lattes_1d())?,
            "skew" | "skew_polynomial" => skew_polynomial(&lattes_1d())?,
            "pk_power" => {
                let c = params.c.unwrap_or([0.1, 0.0]);
                pk_power(params.k.unwrap_or(2), params.d.unwrap_or(2), C64::new(c[0], c[1]))?
            }
            "custom" => {
                let j = params.custom.as_ref().ok_or_else(|| MapError::Json("custom map needs a definition".into()))?;
                ProjectiveMap::from_json(j)?
            }
            other => return Err(MapError::UnknownMap(other.to_string())),
        };
        if map.d >= 1 {
            let rep = validate(&map, 24, 0x5eed);
            if !rep.pass {
                return Err(MapError::Degenerate(format!("min |F| on sphere = {:.3e}", rep.min_norm)));
            }
        }
        Ok(map)
    }

    fn mono(exps: &[u32], c: C64) -> Monomial {
        Monomial { exps: exps.to_vec(), coef: c }
    }

    /// `[Z_0^d : … : Z_k^d]`.
    pub fn monomial(k: usize, d: usize) -> Result<ProjectiveMap, MapError> {
        let lift = (0..=k)
            .map(|i| {
                let mut e = vec![0; k + 1];
                e[i] = d as u32;
                vec![mono(&e, ONE)]
            })
            .collect();
        ProjectiveMap::new(k, d, lift, Some(format!("monomial(k={k},d={d})")))
    }

    /// `[Z_0^d + c Z_1^d : … : Z_k^d + c Z_0^d]`; needs `|c| ≠ 1`.
    pub fn pk_power(k: usize, d: usize, c: C64) -> Result<ProjectiveMap, MapError> {
        if (c.norm() - 1.0).abs() < 1e-9 {
            return Err(MapError::Degenerate("|c| = 1 gives a common zero".into()));
        }
        let lift = (0..=k)
            .map(|i| {
                let mut e = vec![0; k + 1];
                e[i] = d as u32;
                let mut poly = vec![mono(&e, ONE)];
                if c != ZERO {
                    let mut e2 = vec![0; k + 1];
                    e2[(i + 1) % (k + 1)] = d as u32;
                    poly.push(mono(&e2, c));
                }
                poly
            })
            .collect();
        ProjectiveMap::new(k, d, lift, Some(format!("pk_power(k={k},d={d},c={}{:+}i)", c.re, c.im)))
    }

    /// Degree-4 duplication map of the Weierstrass ℘ function for the
    /// hexagonal lattice with g₂ = 0, g₃ = √2:
    /// `x ↦ (x⁴ + 2√2 x) / (4x³ − √2)`, as `[A(x,y) : B(x,y)]` on P¹.
    pub fn lattes_1d() -> ProjectiveMap {
        let s2 = std::f64::consts::SQRT_2;
        let a = vec![mono(&[4, 0], ONE), mono(&[1, 3], C64::from(2.0 * s2))];
        let b = vec![mono(&[3, 1], C64::from(4.0)), mono(&[0, 4], C64::from(-s2))];
        ProjectiveMap::new(1, 4, vec![a, b], Some("lattes_1d".into())).expect("valid Lattès map")
    }

    /// Scaling of the middle symmetric coordinate that makes the quotient
    /// coordinates unitarily natural.
    pub const SYM_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

    /// `[x₁ : y₁], [x₂ : y₂] ↦ [x₁x₂ : S(x₁y₂ + x₂y₁) : y₁y₂]`.
    pub fn symmetrize(p1: [C64; 2], p2: [C64; 2]) -> Hom {
        [p1[0] * p2[0], (p1[0] * p2[1] + p2[0] * p1[1]) * SYM_SCALE, p1[1] * p2[1], ZERO]
    }

    /// The map of P² = Sym²(P¹) induced by `(z,w) ↦ (h(z), h(w))`.
    pub fn product_quotient(h: &ProjectiveMap) -> Result<ProjectiveMap, MapError> {
        if h.k != 1 {
            return Err(MapError::Dimension(h.k));
        }
        let d = h.d;
        let s = SYM_SCALE;
        // bihomogeneous polys of bidegree (d,d): coefficient of x1^i y1^(d-i) x2^j y2^(d-j) at i*(d+1)+j
        let nb = (d + 1) * (d + 1);
        let sigma: Vec<(usize, usize, usize)> =
            (0..=d).flat_map(|a| (0..=d - a).map(move |b| (a, b, d - a - b))).collect();
        let binom = |n: usize, r: usize| crate::numeric::binomial(n, r) as f64;
        let mut mat = DMatrix::<C64>::zeros(nb, sigma.len());
        for (col, &(a, b, _c)) in sigma.iter().enumerate() {
            // σ0^a σ1^b σ2^c; σ1^b = S^b Σ_m C(b,m) (x1 y2)^m (x2 y1)^(b-m)
            for m in 0..=b {
                let i = a + m;
                let j = a + b - m;
                mat[(i * (d + 1) + j, col)] += C64::from(s.powi(b as i32) * binom(b, m));
            }
        }
        let coeffs = |poly: &[Monomial]| {
            let mut v = vec![ZERO; d + 1];
            for m in poly {
                v[m.exps[0] as usize] += m.coef;
            }
            v
        };
        let av = coeffs(&h.lift[0]);
        let bv = coeffs(&h.lift[1]);
        let target = |p: &[C64], q: &[C64], scale: f64, sym: bool| {
            let mut t = DVector::<C64>::zeros(nb);
            for i in 0..=d {
                for j in 0..=d {
                    let mut v = p[i] * q[j];
                    if sym {
                        v += q[i] * p[j];
                    }
                    t[i * (d + 1) + j] += v * scale;
                }
            }
            t
        };
        let rhs = [target(&av, &av, 1.0, false), target(&av, &bv, s, true), target(&bv, &bv, 1.0, false)];
        let svd = mat.clone().svd(true, true);
        let mut lift = Vec::new();
        for r in &rhs {
            let sol = svd.solve(r, 1e-12).map_err(|e| MapError::Degenerate(e.to_string()))?;
            let resid = (&mat * &sol - r).norm();
            if resid > 1e-9 * (1.0 + r.norm()) {
                return Err(MapError::Degenerate(format!("symmetrization residual {resid:.2e}")));
            }
            let poly = sigma
                .iter()
                .zip(sol.iter())
                .filter(|(_, c)| c.norm() > 1e-13)
                .map(|(&(a, b, c), &v)| mono(&[a as u32, b as u32, c as u32], v))
                .collect();
            lift.push(poly);
        }
        ProjectiveMap::new(2, d, lift, Some("lattes_product_quotient".into()))
    }

    /// `[A(z,w) : B(z,w) : t^d]` for a map `[A : B]` of P¹.
    pub fn skew_polynomial(h: &ProjectiveMap) -> Result<ProjectiveMap, MapError> {
        if h.k != 1 {
            return Err(MapError::Dimension(h.k));
        }
        let d = h.d as u32;
        let lift3 = |p: &Vec<Monomial>| p.iter().map(|m| mono(&[m.exps[0], m.exps[1], 0], m.coef)).collect();
        let lift = vec![lift3(&h.lift[0]), lift3(&h.lift[1]), vec![mono(&[0, 0, d], ONE)]];
        ProjectiveMap::new(2, h.d, lift, Some("skew_lattes".into()))
    }

    pub fn identity(k: usize) -> ProjectiveMap {
        monomial(k, 1).expect("identity").renamed("identity")
    }
}

impl ProjectiveMap {
    pub fn renamed(mut self, name: &str) -> Self {
        self.name = Some(name.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::catalog::*;
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn monomial_squares() {
        let f = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![c(1.0, 0.0), c(2.0, 0.0)]);
        let y = f.evaluate(&x).unwrap();
        // [1:4:1] lives in the chart of its largest coordinate
        assert_eq!(y.chart, 1);
        assert!((y.coords[0] - c(0.25, 0.0)).norm() < 1e-15);
        assert!((y.coords[1] - c(0.25, 0.0)).norm() < 1e-15);
        let z = y.in_chart(2).unwrap();
        assert!((z.coords[0] - c(1.0, 0.0)).norm() < 1e-14 && (z.coords[1] - c(4.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn fixed_point_is_fixed() {
        let f = monomial(2, 3).unwrap();
        let x = ChartPoint::new(0, vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(f.evaluate(&x).unwrap().to_hom(), x.to_hom());
    }

    #[test]
    fn zero_iterates_give_identity_cocycle() {
        let f = pk_power(2, 2, c(0.2, 0.1)).unwrap();
        let x = ChartPoint::new(0, vec![c(0.3, 0.1), c(-0.2, 0.5)]);
        let r = f.differential(&x, 0).unwrap();
        assert!(r.matrices.is_empty());
        assert_eq!(r.product(), DMatrix::identity(2, 2));
    }

    #[test]
    fn chart_jacobian_matches_finite_differences() {
        let f = pk_power(2, 3, c(0.4, -0.2)).unwrap();
        let x = ChartPoint::new(1, vec![c(0.3, 0.1), c(-0.2, 0.5)]);
        let r = f.differential(&x, 1).unwrap();
        let target = r.orbit[1].chart;
        let h = 1e-6;
        for a in 0..2 {
            let mut xp = x.clone();
            xp.coords[a] += h;
            let mut xm = x.clone();
            xm.coords[a] -= h;
            let yp = ChartPoint::from_hom_in(&f.eval_lift(&xp.to_hom()), 2, target);
            let ym = ChartPoint::from_hom_in(&f.eval_lift(&xm.to_hom()), 2, target);
            for l in 0..2 {
                let fd = (yp.coords[l] - ym.coords[l]) / (2.0 * h);
                assert!((fd - r.matrices[0][(l, a)]).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn series_evaluation_matches_jacobian() {
        let f = pk_power(2, 2, c(0.3, 0.0)).unwrap();
        let z = [c(0.4, 0.2), c(1.0, 0.0), c(-0.3, 0.6), ZERO];
        let v = [c(0.1, -0.2), c(0.3, 0.0), c(0.2, 0.5), ZERO];
        let mut s = [[ZERO; 3]; 4];
        for i in 0..3 {
            s[i] = [z[i], v[i], ZERO];
        }
        let out = f.eval_series(&s);
        let (w, jac) = f.eval_with_jacobian(&z);
        for l in 0..3 {
            assert!((out[l][0] - w[l]).norm() < 1e-14);
            let jv: C64 = (0..3).map(|cc| jac[l][cc] * v[cc]).sum();
            assert!((out[l][1] - jv).norm() < 1e-14);
        }
    }

    #[test]
    fn degenerate_lift_fails_validation() {
        let lift = vec![
            vec![Monomial { exps: vec![2, 0], coef: ONE }],
            vec![Monomial { exps: vec![1, 1], coef: ONE }],
        ];
        let f = ProjectiveMap::new(1, 2, lift, None).unwrap();
        let rep = validate(&f, 20, 1);
        assert!(rep.suspected_common_zero, "min {}", rep.min_norm);
        assert!(!rep.pass);
    }

    #[test]
    fn monomial_sphere_minimum() {
        for (k, d) in [(1, 2), (2, 2), (2, 3), (3, 2)] {
            let f = monomial(k, d).unwrap();
            let rep = validate(&f, 30, 2);
            let expect = ((k + 1) as f64).powf((1.0 - d as f64) / 2.0);
            assert!((rep.min_norm - expect).abs() < 1e-6 * expect, "k={k} d={d}: {}", rep.min_norm);
            assert!(rep.pass);
        }
    }

    #[test]
    fn non_homogeneous_rejected() {
        let lift = vec![vec![Monomial { exps: vec![2, 0], coef: ONE }], vec![Monomial { exps: vec![1, 0], coef: ONE }]];
        assert!(matches!(ProjectiveMap::new(1, 2, lift, None), Err(MapError::NotHomogeneous { component: 1, d: 2 })));
    }

    #[test]
    fn unknown_catalog_name() {
        assert!(matches!(build("nope", &Default::default()), Err(MapError::UnknownMap(_))));
    }

    #[test]
    fn json_roundtrip() {
        let f = product_quotient(&lattes_1d()).unwrap();
        let s = serde_json::to_string(&f.to_json()).unwrap();
        let g = ProjectiveMap::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        let z = [c(0.3, 0.2), c(1.0, 0.0), c(-0.5, 0.1), ZERO];
        assert_eq!(f.eval_lift(&z), g.eval_lift(&z));
    }

    #[test]
    fn pk_power_unit_modulus_rejected() {
        assert!(pk_power(2, 2, c(1.0, 0.0)).is_err());
    }
}
