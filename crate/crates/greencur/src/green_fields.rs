//! Green potentials on chart lattices and the finite-difference Green current.
//!
//! Conventions: `T = (i/π) Σ T_ij dz_i∧dz̄_j` with `T_ij = ∂_i∂̄_j G`, so a
//! projective line has unit T-mass. A stored (q,q) field holds the wedge
//! power of the matrix `T_ij` in the `E_{I,J}` basis; the form itself is
//! that divided by `π^q`. Lattices are uniform in all 2k real directions.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exterior_algebra::{power, wedge, Kind, MultiVector};
use crate::numeric::{binomial, hermitian_eigen, pairwise_sum, par_range, C64};
use crate::projective_map::{max_chart, sup_normalize, ChartPoint, Hom, ProjectiveMap, ZERO};

/// Stencil step of [`dd_c`] in lattice spacings.
pub const DEFAULT_STENCIL_STEP: usize = 1;
/// Smoothing radius of [`self_power`] in lattice spacings.
pub const DEFAULT_SMOOTHING_CELLS: f64 = 3.0;
/// Points per axis of each chart cube in [`covering_lattices`].
pub const DEFAULT_COVER_RES: usize = 32;
/// Tent width of [`invariance_check`] in cells.
pub const DEFAULT_TENT_BLOCK: usize = 16;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("stencil exits the window: {0}")]
    Stencil(String),
    #[error("smoothing radius below lattice resolution")]
    Resolution,
    #[error("orbit overflow in potential evaluation")]
    Overflow,
    #[error("inconsistent geometry: {0}")]
    Geometry(String),
    #[error("bad argument: {0}")]
    Argument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A plurisubharmonic function on C^{k+1} with `G(λZ) = log|λ| + G(Z)`.
pub trait Potential: Sync {
    fn k(&self) -> usize;
    fn eval(&self, z: &Hom) -> f64;

    fn eval_chart(&self, chart: usize, x: &[C64]) -> f64 {
        self.eval(&ChartPoint::new(chart, x.to_vec()).to_hom())
    }
}

/// `G_n(Z) = log‖Z‖_∞ + Σ_{j<n} d^{−(j+1)} log‖F(Ẑ_j)‖_∞`.
pub struct GreenPotential<'a> {
    pub map: &'a ProjectiveMap,
    pub n: usize,
}

impl Potential for GreenPotential<'_> {
    fn k(&self) -> usize {
        self.map.k
    }

    fn eval(&self, z: &Hom) -> f64 {
        let m = self.map.k + 1;
        let mut w = *z;
        let mut g = sup_normalize(&mut w, m);
        let inv_d = 1.0 / self.map.d as f64;
        let mut scale = inv_d;
        for _ in 0..self.n {
            let mut img = self.map.eval_lift(&w);
            g += scale * sup_normalize(&mut img, m);
            w = img;
            scale *= inv_d;
        }
        g
    }
}

/// `log‖Z‖₂`, whose dd^c is the Fubini–Study form ω.
pub struct FsPotential {
    pub k: usize,
}

impl Potential for FsPotential {
    fn k(&self) -> usize {
        self.k
    }
    fn eval(&self, z: &Hom) -> f64 {
        z[..=self.k].iter().map(|c| c.norm_sqr()).sum::<f64>().ln() * 0.5
    }
}

/// Any homogeneous-log function given as a closure.
pub struct FnPotential<F: Fn(&Hom) -> f64 + Sync> {
    pub k: usize,
    pub f: F,
}

impl<F: Fn(&Hom) -> f64 + Sync> Potential for FnPotential<F> {
    fn k(&self) -> usize {
        self.k
    }
    fn eval(&self, z: &Hom) -> f64 {
        (self.f)(z)
    }
}

/// Uniform lattice in one affine chart; real axis `2a` is `Re x_a`, `2a+1`
/// is `Im x_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub chart: usize,
    pub k: usize,
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub dims: Vec<usize>,
}

impl Lattice {
    pub fn new(chart: usize, k: usize, origin: Vec<f64>, spacing: f64, dims: Vec<usize>) -> Result<Self, FieldError> {
        if origin.len() != 2 * k || dims.len() != 2 * k || chart > k || spacing <= 0.0 {
            return Err(FieldError::Geometry(format!("lattice k={k}, chart={chart}")));
        }
        Ok(Lattice { chart, k, origin, spacing, dims })
    }

    /// Box with `res` interior points per real axis covering
    /// `center ± half_width`, plus `margin` extra points each side.
    pub fn cube(chart: usize, center: &[C64], half_width: f64, res: usize, margin: usize) -> Result<Self, FieldError> {
        let k = center.len();
        let spacing = 2.0 * half_width / res as f64;
        let mut origin = Vec::with_capacity(2 * k);
        for c in center {
            origin.push(c.re - half_width + 0.5 * spacing - margin as f64 * spacing);
            origin.push(c.im - half_width + 0.5 * spacing - margin as f64 * spacing);
        }
        Lattice::new(chart, k, origin, spacing, vec![res + 2 * margin; 2 * k])
    }

    /// A `res × res` slice of complex coordinate `plane` through `center`,
    /// thickened by `margin` points in every other real direction.
    pub fn slab(
        chart: usize,
        center: &[C64],
        plane: usize,
        half_width: f64,
        res: usize,
        margin: usize,
    ) -> Result<Self, FieldError> {
        let k = center.len();
        let spacing = 2.0 * half_width / res as f64;
        let mut origin = Vec::with_capacity(2 * k);
        let mut dims = Vec::with_capacity(2 * k);
        for (a, c) in center.iter().enumerate() {
            for v in [c.re, c.im] {
                if a == plane {
                    origin.push(v - half_width + 0.5 * spacing - margin as f64 * spacing);
                    dims.push(res + 2 * margin);
                } else {
                    origin.push(v - margin as f64 * spacing);
                    dims.push(2 * margin + 1);
                }
            }
        }
        Lattice::new(chart, k, origin, spacing, dims)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for a in (0..self.dims.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    pub fn unflatten(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            out[a] = idx % self.dims[a];
            idx /= self.dims[a];
        }
        out
    }

    pub fn coords_of(&self, multi: &[usize]) -> Vec<C64> {
        (0..self.k)
            .map(|a| {
                C64::new(
                    self.origin[2 * a] + multi[2 * a] as f64 * self.spacing,
                    self.origin[2 * a + 1] + multi[2 * a + 1] as f64 * self.spacing,
                )
            })
            .collect()
    }

    pub fn point(&self, idx: usize) -> ChartPoint {
        ChartPoint::new(self.chart, self.coords_of(&self.unflatten(idx)))
    }

    /// Nearest lattice multi-index to a chart point, if inside.
    pub fn locate(&self, x: &[C64]) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(2 * self.k);
        for a in 0..self.k {
            for (t, v) in [(0, x[a].re), (1, x[a].im)] {
                let i = ((v - self.origin[2 * a + t]) / self.spacing).round();
                if i < 0.0 || i >= self.dims[2 * a + t] as f64 {
                    return None;
                }
                out.push(i as usize);
            }
        }
        Some(out)
    }

    pub fn flatten(&self, multi: &[usize]) -> usize {
        multi.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    /// Real 2k-volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(2 * self.k as i32)
    }
}

#[derive(Debug, Clone)]
pub struct PotentialGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

pub fn potential_grid(pot: &dyn Potential, lattice: &Lattice) -> PotentialGrid {
    let values = par_range(lattice.len(), |i| {
        let x = lattice.point(i);
        pot.eval(&x.to_hom())
    });
    PotentialGrid { lattice: lattice.clone(), values, n: 0, d: 1 }
}

pub fn green_potential(map: &ProjectiveMap, lattice: &Lattice, n: usize) -> Result<PotentialGrid, FieldError> {
    if n == 0 {
        return Err(FieldError::Argument("iterate depth must be at least 1".into()));
    }
    if lattice.k != map.k {
        return Err(FieldError::Geometry("lattice and map dimensions differ".into()));
    }
    let mut g = potential_grid(&GreenPotential { map, n }, lattice);
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(FieldError::Overflow);
    }
    g.n = n;
    g.d = map.d;
    Ok(g)
}

/// Row of the Cauchy-tail table: `sup |G_{n+1} − G_n|` over the lattice and
/// the constant `C_n = d^n · sup |G_{n+1} − G_n|`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TailRow {
    pub n: usize,
    pub sup_increment: f64,
    pub c: f64,
}

pub fn convergence_table(map: &ProjectiveMap, lattice: &Lattice, n_max: usize) -> Vec<TailRow> {
    let m = map.k + 1;
    let per_point = par_range(lattice.len(), |i| {
        let mut w = lattice.point(i).to_hom();
        sup_normalize(&mut w, m);
        let mut incs = Vec::with_capacity(n_max + 1);
        for _ in 0..=n_max {
            let mut img = map.eval_lift(&w);
            incs.push(sup_normalize(&mut img, m).abs());
            w = img;
        }
        incs
    });
    let d = map.d as f64;
    (0..n_max)
        .map(|n| {
            // G_{n+1} − G_n = d^{−(n+1)} log‖F(Ẑ_n)‖_∞
            let sup = per_point.iter().map(|v| v[n]).fold(0.0, f64::max) / d.powi(n as i32 + 1);
            TailRow { n, sup_increment: sup, c: sup * d.powi(n as i32) }
        })
        .collect()
}

/// Offsets (in lattice steps, per real axis) and weights of the stencils
/// used for `T_ij`. Each entry is `(i, j, re_or_im, [(offset, weight)])`.
type Stencil = Vec<(Vec<i64>, f64)>;

fn direction_laplacian(k: usize, v: &[(usize, C64)], s: i64) -> Stencil {
    // 5-point Laplacian in the complex direction v, divided by 4
    let mut out: Stencil = Vec::new();
    for rot in [C64::new(1.0, 0.0), C64::new(-1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, -1.0)] {
        let mut off = vec![0i64; 2 * k];
        for &(a, c) in v {
            let w = c * rot;
            off[2 * a] += w.re.round() as i64 * s;
            off[2 * a + 1] += w.im.round() as i64 * s;
        }
        out.push((off, 0.25));
    }
    out.push((vec![0; 2 * k], -1.0));
    out
}

/// Entries of the stencil for `T_ij = ∂_i∂̄_j G`, as (row, col, part, stencil)
/// with part 0 = real, 1 = imaginary. Divide by `h²` after applying.
fn hessian_stencils(k: usize, s: i64) -> Vec<(usize, usize, usize, Stencil)> {
    let one = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    let mut out = Vec::new();
    for a in 0..k {
        out.push((a, a, 0, direction_laplacian(k, &[(a, one)], s)));
        for b in a + 1..k {
            let mut re = direction_laplacian(k, &[(a, one), (b, one)], s);
            for (off, w) in direction_laplacian(k, &[(a, one), (b, -one)], s) {
                re.push((off, -w));
            }
            re.iter_mut().for_each(|e| e.1 *= 0.25);
            // L(e_a + i e_b) − L(e_a − i e_b) gives 4 Im T_ab
            let mut im = direction_laplacian(k, &[(a, one), (b, i)], s);
            for (off, w) in direction_laplacian(k, &[(a, one), (b, -i)], s) {
                im.push((off, -w));
            }
            im.iter_mut().for_each(|e| e.1 *= 0.25);
            out.push((a, b, 0, re));
            out.push((a, b, 1, im));
        }
    }
    out
}

/// Finite-difference `∂_i∂̄_j G` at an arbitrary chart point, step h.
pub fn hessian_at(pot: &dyn Potential, chart: usize, x: &[C64], h: f64) -> DMatrix<C64> {
    let k = x.len();
    hessian_along(pot, chart, x, &DMatrix::identity(k, k), h)
}

/// Finite-difference complex Hessian at δ = 0 of `δ ↦ G(x + Bδ)`, i.e. the
/// pullback `Bᵀ T(x) B̄` with the stencil mapped by B.
pub fn hessian_along(pot: &dyn Potential, chart: usize, x: &[C64], basis: &DMatrix<C64>, h: f64) -> DMatrix<C64> {
    let k = x.len();
    let mut m = DMatrix::zeros(k, k);
    for (a, b, part, st) in hessian_stencils(k, 1) {
        let mut acc = 0.0;
        for (off, w) in st {
            let delta: Vec<C64> = (0..k).map(|c| C64::new(off[2 * c] as f64 * h, off[2 * c + 1] as f64 * h)).collect();
            let y: Vec<C64> = (0..k).map(|r| x[r] + (0..k).map(|c| basis[(r, c)] * delta[c]).sum::<C64>()).collect();
            acc += w * pot.eval_chart(chart, &y);
        }
        let v = acc / (h * h);
        if a == b {
            m[(a, a)] = C64::new(v, 0.0);
        } else if part == 0 {
            m[(a, b)].re = v;
            m[(b, a)].re = v;
        } else {
            m[(a, b)].im = v;
            m[(b, a)].im = -v;
        }
    }
    m
}

/// Cellwise Hermitian (q,q) coefficients on a lattice.
#[derive(Debug, Clone)]
pub struct HermitianField {
    pub lattice: Lattice,
    pub q: usize,
    /// Side of the coefficient matrix, `C(k,q)`.
    pub m: usize,
    /// Row-major `m×m` blocks, one per cell.
    pub coeffs: Vec<C64>,
    pub valid: Vec<bool>,
    /// Trace density σ per cell (trace of the coefficient block).
    pub trace: Vec<f64>,
    /// Stencil step h (real units) and smoothing radius ε used.
    pub h: f64,
    pub eps: f64,
    /// Sum of clipped negative eigenvalue magnitudes, and of traces, over
    /// valid cells (both before clipping).
    pub clipped: f64,
    pub raw_trace: f64,
    /// Blocks before clipping, kept by [`dd_c`]. Linear functionals (ω-mass,
    /// smoothing) are taken on these.
    pub unclipped: Option<Vec<C64>>,
}

impl HermitianField {
    pub fn k(&self) -> usize {
        self.lattice.k
    }

    pub fn block(&self, cell: usize) -> DMatrix<C64> {
        let m = self.m;
        DMatrix::from_row_slice(m, m, &self.coeffs[cell * m * m..(cell + 1) * m * m])
    }

    /// Fraction of trace removed by eigenvalue clipping.
    pub fn clip_fraction(&self) -> f64 {
        if self.raw_trace > 0.0 {
            self.clipped / self.raw_trace
        } else {
            0.0
        }
    }

    /// Trace mass `σ_{T^q}` of the valid cells, against `β^{k−q}/(k−q)!`.
    pub fn trace_mass(&self) -> f64 {
        let v: Vec<f64> = (0..self.trace.len()).map(|c| if self.valid[c] { self.trace[c] } else { 0.0 }).collect();
        pairwise_sum(&v) * self.cell_mass_factor()
    }

    /// Factor turning a trace density into the mass of one cell.
    pub fn cell_mass_factor(&self) -> f64 {
        let k = self.k() as i32;
        2f64.powi(k) / std::f64::consts::PI.powi(self.q as i32) * self.lattice.cell_volume()
    }

    /// Block before clipping when available, else the stored block.
    pub fn linear_block(&self, cell: usize) -> DMatrix<C64> {
        let m = self.m;
        match &self.unclipped {
            Some(u) => DMatrix::from_row_slice(m, m, &u[cell * m * m..(cell + 1) * m * m]),
            None => self.block(cell),
        }
    }

    /// Density of `T^q ∧ ω^{k−q}` against Lebesgue measure at a cell.
    pub fn omega_density(&self, cell: usize) -> f64 {
        let x = self.lattice.point(cell);
        omega_density(&self.linear_block(cell), self.k(), self.q, &x.coords)
    }

    pub fn from_blocks(lattice: &Lattice, q: usize, blocks: Vec<Option<DMatrix<C64>>>) -> Self {
        let m = binomial(lattice.k, q);
        let mut coeffs = Vec::with_capacity(blocks.len() * m * m);
        let mut valid = Vec::with_capacity(blocks.len());
        let mut trace = Vec::with_capacity(blocks.len());
        for b in blocks {
            match b {
                Some(b) => {
                    for r in 0..m {
                        for c in 0..m {
                            coeffs.push(b[(r, c)]);
                        }
                    }
                    trace.push((0..m).map(|i| b[(i, i)].re).sum());
                    valid.push(true);
                }
                None => {
                    coeffs.extend(std::iter::repeat_n(ZERO, m * m));
                    trace.push(0.0);
                    valid.push(false);
                }
            }
        }
        HermitianField { lattice: lattice.clone(), q, m, coeffs, valid, trace, h: 0.0, eps: 0.0, clipped: 0.0, raw_trace: 0.0, unclipped: None }
    }
}

/// `∂_a∂̄_b` of `½ log(1+|x|²)`, so that ω = (i/π) Σ Ω_ab dz_a∧dz̄_b.
pub fn omega_matrix(x: &[C64]) -> DMatrix<C64> {
    let k = x.len();
    let s = 1.0 + x.iter().map(|c| c.norm_sqr()).sum::<f64>();
    DMatrix::from_fn(k, k, |a, b| {
        let delta = if a == b { s } else { 0.0 };
        (C64::new(delta, 0.0) - x[a].conj() * x[b]) * (0.5 / (s * s))
    })
}

/// Lebesgue density of `T^q ∧ ω^{k−q}` for stored (q,q) coefficients.
pub fn omega_density(block: &DMatrix<C64>, k: usize, q: usize, x: &[C64]) -> f64 {
    let om = omega_matrix(x);
    let top = if k == 2 && q == 1 {
        // mixed discriminant
        (block[(0, 0)] * om[(1, 1)] + block[(1, 1)] * om[(0, 0)] - block[(0, 1)] * om[(1, 0)] - block[(1, 0)] * om[(0, 1)]).re
    } else if q == k {
        block[(0, 0)].re
    } else {
        let t = MultiVector::from_coeffs(k, q, Kind::Covector, block.clone()).expect("hermitian block");
        let w = MultiVector::from_coeffs(k, 1, Kind::Covector, om).expect("hermitian omega");
        let wp = power(&w, k - q).expect("degree");
        wedge(&t, &wp).expect("degree").top_coefficient().re
    };
    top * 2f64.powi(k as i32) / std::f64::consts::PI.powi(k as i32)
}

fn clip_psd(m: &DMatrix<C64>) -> (DMatrix<C64>, f64) {
    let (vals, vecs) = hermitian_eigen(m);
    let neg: f64 = vals.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    if neg == 0.0 {
        return (m.clone(), 0.0);
    }
    let k = m.nrows();
    let mut out = DMatrix::zeros(k, k);
    for (i, &v) in vals.iter().enumerate() {
        if v > 0.0 {
            let u = vecs.column(i);
            out += &u * u.adjoint() * C64::new(v, 0.0);
        }
    }
    (out, neg)
}

/// Mixed complex Hessian of the potential on the lattice, stencil step
/// `s` lattice spacings. Cells whose stencil leaves the lattice are invalid.
/// Negative eigenvalues are clipped to zero; the clipped amount is kept.
pub fn dd_c(pot: &PotentialGrid, s: usize) -> Result<HermitianField, FieldError> {
    let lat = &pot.lattice;
    let k = lat.k;
    if s == 0 {
        return Err(FieldError::Argument("stencil step must be positive".into()));
    }
    if lat.dims.iter().all(|&n| n <= 2 * s) {
        return Err(FieldError::Stencil(format!("lattice too small for step {s}")));
    }
    let h = s as f64 * lat.spacing;
    let stencils = hessian_stencils(k, s as i64);
    let strides = lat.strides();
    let compiled: Vec<(usize, usize, usize, Vec<(i64, f64)>)> = stencils
        .into_iter()
        .map(|(a, b, p, st)| {
            let flat = st
                .into_iter()
                .map(|(off, w)| (off.iter().zip(&strides).map(|(o, &sd)| o * sd as i64).sum::<i64>(), w))
                .collect();
            (a, b, p, flat)
        })
        .collect();
    let inv_h2 = 1.0 / (h * h);
    let results = par_range(lat.len(), |cell| {
        let multi = lat.unflatten(cell);
        if multi.iter().zip(&lat.dims).any(|(&i, &n)| i < s || i + s >= n) {
            return None;
        }
        let mut m = DMatrix::zeros(k, k);
        for (a, b, part, st) in &compiled {
            let mut acc = 0.0;
            for &(off, w) in st {
                acc += w * pot.values[(cell as i64 + off) as usize];
            }
            let v = acc * inv_h2;
            if a == b {
                m[(*a, *a)] = C64::new(v, 0.0);
            } else if *part == 0 {
                m[(*a, *b)].re = v;
                m[(*b, *a)].re = v;
            } else {
                m[(*a, *b)].im = v;
                m[(*b, *a)].im = -v;
            }
        }
        let tr: f64 = (0..k).map(|i| m[(i, i)].re).sum();
        let (c, neg) = clip_psd(&m);
        Some((c, m, neg, tr.max(0.0)))
    });
    let mut clipped = Vec::with_capacity(results.len());
    let mut raw = Vec::with_capacity(results.len());
    let mut unclipped = Vec::with_capacity(results.len() * k * k);
    let blocks = results
        .into_iter()
        .map(|r| match r {
            Some((c, m, neg, tr)) => {
                clipped.push(neg);
                raw.push(tr);
                unclipped.extend(m.transpose().iter().copied());
                Some(c)
            }
            None => {
                unclipped.extend(std::iter::repeat_n(ZERO, k * k));
                None
            }
        })
        .collect();
    let mut f = HermitianField::from_blocks(lat, 1, blocks);
    f.unclipped = Some(unclipped);
    f.h = h;
    f.clipped = pairwise_sum(&clipped);
    f.raw_trace = pairwise_sum(&raw);
    Ok(f)
}

/// Offsets of lattice points within distance ε of the origin.
fn ball_offsets(k: usize, radius_cells: f64) -> Vec<Vec<i64>> {
    let r = radius_cells.floor() as i64;
    let dim = 2 * k;
    let mut out = Vec::new();
    let mut cur = vec![-r; dim];
    loop {
        let n2: i64 = cur.iter().map(|c| c * c).sum();
        if (n2 as f64) <= radius_cells * radius_cells + 1e-9 {
            out.push(cur.clone());
        }
        let mut a = 0;
        loop {
            if a == dim {
                return out;
            }
            cur[a] += 1;
            if cur[a] > r {
                cur[a] = -r;
                a += 1;
            } else {
                break;
            }
        }
    }
}

/// Ball-kernel smoothing of a (1,1) field followed by the cellwise q-th
/// exterior power. A cell is valid when its whole ball is valid. Smoothing
/// acts on the unclipped blocks; the smoothed block is clipped before the
/// power and the clipped amount is recorded on the result.
pub fn self_power(t: &HermitianField, q: usize, eps: f64) -> Result<HermitianField, FieldError> {
    let lat = &t.lattice;
    let k = lat.k;
    if t.q != 1 {
        return Err(FieldError::Argument("self_power expects a (1,1) field".into()));
    }
    if q == 0 || q > k {
        return Err(FieldError::Argument(format!("power {q} outside 1..={k}")));
    }
    if eps < lat.spacing * (1.0 - 1e-12) {
        return Err(FieldError::Resolution);
    }
    let rc = eps / lat.spacing;
    let strides = lat.strides();
    let dim = 2 * k;
    let last = lat.dims[dim - 1];
    // The ball as a union of runs along the last (unit-stride) axis:
    // (flat offset of the run center, half-length).
    let mut runs: Vec<(i64, i64)> = Vec::new();
    for o in ball_offsets(k, rc) {
        if o[dim - 1] != 0 {
            continue;
        }
        let n2: i64 = o.iter().map(|c| c * c).sum();
        let half = ((rc * rc + 1e-9 - n2 as f64).max(0.0)).sqrt().floor() as i64;
        runs.push((o.iter().zip(&strides).map(|(a, &s)| a * s as i64).sum(), half));
    }
    let nball: i64 = runs.iter().map(|&(_, h)| 2 * h + 1).sum();
    let nball = nball as f64;
    let kk = k * k;
    let src = t.unclipped.as_deref().unwrap_or(&t.coeffs);
    // Inclusive prefix sums along the last axis, and counts of invalid cells.
    let mut prefix = vec![ZERO; src.len()];
    let mut bad = vec![0u32; lat.len()];
    for row in 0..lat.len() / last {
        let base = row * last;
        let mut accm = vec![ZERO; kk];
        let mut nb = 0u32;
        for i in 0..last {
            let c = base + i;
            for e in 0..kk {
                accm[e] += src[c * kk + e];
                prefix[c * kk + e] = accm[e];
            }
            if !t.valid[c] {
                nb += 1;
            }
            bad[c] = nb;
        }
    }
    let r = rc.floor() as usize;
    let blocks = par_range(lat.len(), |cell| {
        let multi = lat.unflatten(cell);
        if multi.iter().zip(&lat.dims).any(|(&i, &n)| i < r || i + r >= n) {
            return None;
        }
        let pos = multi[dim - 1] as i64;
        let mut acc = DMatrix::<C64>::zeros(k, k);
        for &(off, half) in &runs {
            let hi = (cell as i64 + off + half) as usize;
            let lo = cell as i64 + off - half - 1;
            let lo = if pos - half - 1 < 0 { None } else { Some(lo as usize) };
            let nb = bad[hi] - lo.map_or(0, |l| bad[l]);
            if nb > 0 {
                return None;
            }
            for i in 0..k {
                for j in 0..k {
                    let e = i * k + j;
                    acc[(i, j)] += prefix[hi * kk + e] - lo.map_or(ZERO, |l| prefix[l * kk + e]);
                }
            }
        }
        acc /= C64::new(nball, 0.0);
        let tr: f64 = (0..k).map(|i| acc[(i, i)].re).sum();
        let (c, neg) = clip_psd(&acc);
        Some((matrix_power(&c, q), neg, tr.max(0.0)))
    });
    let mut clipped = Vec::new();
    let mut raw = Vec::new();
    let blocks = blocks
        .into_iter()
        .map(|b| {
            b.map(|(p, neg, tr)| {
                clipped.push(neg);
                raw.push(tr);
                p
            })
        })
        .collect();
    let mut f = HermitianField::from_blocks(lat, q, blocks);
    f.clipped = pairwise_sum(&clipped);
    f.raw_trace = pairwise_sum(&raw);
    f.h = t.h;
    f.eps = eps;
    Ok(f)
}

/// q-th exterior power of a (1,1) coefficient matrix in the E basis.
pub fn matrix_power(m: &DMatrix<C64>, q: usize) -> DMatrix<C64> {
    let k = m.nrows();
    if q == 1 {
        return m.clone();
    }
    if k == 2 && q == 2 {
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        return DMatrix::from_element(1, 1, C64::new(2.0 * det.re, 0.0));
    }
    let t = MultiVector::from_coeffs(k, 1, Kind::Covector, m.clone()).expect("hermitian");
    power(&t, q).expect("degree").coeffs
}

/// Outer ratio of the partition bump: chart c carries weight only where
/// `max_j |Z_j| < PARTITION_REACH · |Z_c|`.
pub const PARTITION_REACH: f64 = 1.5;

fn partition_bump(r: f64) -> f64 {
    let s = ((r - 1.0) / (PARTITION_REACH - 1.0)).clamp(0.0, 1.0);
    1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Smooth partition of unity subordinate to the polydiscs
/// `{max_j |Z_j| < PARTITION_REACH |Z_c|}`.
pub fn chart_weight(z: &Hom, k: usize, chart: usize) -> f64 {
    let m = z[..=k].iter().map(|c| c.norm()).fold(0.0, f64::max);
    let own = partition_bump(m / z[chart].norm());
    if own == 0.0 {
        return 0.0;
    }
    let tot: f64 = z[..=k].iter().map(|c| partition_bump(m / c.norm())).sum();
    own / tot
}

/// `∫ w_c · T^q∧ω^{k−q}` over the valid cells, `w_c` the chart weight.
/// Summed over [`covering_lattices`] this is the mass on P^k.
pub fn omega_mass(field: &HermitianField) -> f64 {
    let k = field.k();
    let lat = &field.lattice;
    let v = par_range(lat.len(), |cell| {
        if !field.valid[cell] {
            return 0.0;
        }
        let x = lat.point(cell);
        let w = chart_weight(&x.to_hom(), k, lat.chart);
        if w == 0.0 {
            return 0.0;
        }
        w * field.omega_density(cell)
    });
    pairwise_sum(&v) * lat.cell_volume()
}

/// One cube per chart covering the support of its partition weight, `res`
/// points per axis inside and `margin` extra points for stencils and
/// smoothing.
pub fn covering_lattices(k: usize, res: usize, margin: usize) -> Vec<Lattice> {
    (0..=k).map(|c| Lattice::cube(c, &vec![ZERO; k], PARTITION_REACH, res, margin).expect("lattice")).collect()
}

/// Masses over P^k from the chart cover: `∫T∧ω^{k−1}` and, for
/// 2 ≤ q ≤ max_power, `∫ P(T_ε^q)∧ω^{k−q}`; `clip` is the trace fraction
/// clipped in T.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassReport {
    pub res: usize,
    pub t_omega: f64,
    pub powers: Vec<f64>,
    pub clip: f64,
}

pub fn whole_space_masses(pot: &dyn Potential, res: usize, s: usize, eps_cells: f64, max_power: usize) -> Result<MassReport, FieldError> {
    let k = pot.k();
    let margin = s + eps_cells.floor() as usize + 1;
    let mut t_omega = 0.0;
    let mut powers = vec![0.0; max_power.min(k).saturating_sub(1)];
    let mut clipped = 0.0;
    let mut raw = 0.0;
    for lat in covering_lattices(k, res, margin) {
        let f = dd_c(&potential_grid(pot, &lat), s)?;
        t_omega += omega_mass(&f);
        clipped += f.clipped;
        raw += f.raw_trace;
        for (i, p) in powers.iter_mut().enumerate() {
            let fq = self_power(&f, i + 2, eps_cells * lat.spacing)?;
            *p += omega_mass(&fq);
        }
    }
    let clip = if raw > 0.0 { clipped / raw } else { 0.0 };
    Ok(MassReport { res, t_omega, powers, clip })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub residual: f64,
    pub cells_used: usize,
    pub cells_skipped: usize,
}

/// Relative L¹ deviation between `f*T` and `d·T`, tested against a tent
/// partition of unity with `block` cells per tent in the non-degenerate
/// lattice directions. `f*T` at x is `Aᵀ T(f(x)) Ā`, A the chart Jacobian,
/// with T(f(x)) differenced along the image of the stencil at x (the
/// linearized pullback of the potential). Both sides are taken before
/// clipping.
pub fn invariance_check(
    map: &ProjectiveMap,
    pot: &dyn Potential,
    field: &HermitianField,
    block: usize,
) -> InvarianceReport {
    let lat = &field.lattice;
    let k = lat.k;
    let d = map.d as f64;
    let h = field.h;
    let cells = par_range(lat.len(), |cell| {
        if !field.valid[cell] {
            return None;
        }
        let x = lat.point(cell);
        let cyc = match map.differential(&x, 1) {
            Ok(c) => c,
            Err(_) => return Some(None),
        };
        let a = &cyc.matrices[0];
        let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        if a.clone().determinant().norm() < 1e-10 * scale.powi(k as i32) {
            return Some(None);
        }
        let y = &cyc.orbit[1];
        let pull = hessian_along(pot, y.chart, &y.coords, a, h);
        let target = field.linear_block(cell) * C64::new(d, 0.0);
        Some(Some((pull, target)))
    });
    // tents along axes with more than one point
    let axes: Vec<usize> = (0..2 * k).filter(|&a| lat.dims[a] > 1 + 2 * (h / lat.spacing).round() as usize).collect();
    let b = block.max(1) as f64;
    let mut used = 0;
    let mut skipped = 0;
    let mut tents: std::collections::BTreeMap<Vec<i64>, (DMatrix<C64>, DMatrix<C64>)> = Default::default();
    for (cell, r) in cells.into_iter().enumerate() {
        let (p, t) = match r {
            None => continue,
            Some(None) => {
                skipped += 1;
                continue;
            }
            Some(Some(v)) => v,
        };
        used += 1;
        let multi = lat.unflatten(cell);
        // multilinear tent weights over the enclosing block corners
        let pos: Vec<f64> = axes.iter().map(|&a| multi[a] as f64 / b).collect();
        let base: Vec<i64> = pos.iter().map(|p| p.floor() as i64).collect();
        let frac: Vec<f64> = pos.iter().zip(&base).map(|(p, b)| p - *b as f64).collect();
        for corner in 0..(1usize << axes.len()) {
            let mut w = 1.0;
            let mut key = base.clone();
            for (i, f) in frac.iter().enumerate() {
                if corner & (1 << i) != 0 {
                    w *= f;
                    key[i] += 1;
                } else {
                    w *= 1.0 - f;
                }
            }
            if w == 0.0 {
                continue;
            }
            let e = tents.entry(key).or_insert_with(|| (DMatrix::zeros(k, k), DMatrix::zeros(k, k)));
            e.0 += &p * C64::new(w, 0.0);
            e.1 += &t * C64::new(w, 0.0);
        }
    }
    let mut num = Vec::new();
    let mut den = Vec::new();
    for (p, t) in tents.values() {
        num.push((p - t).iter().map(|z| z.norm()).sum::<f64>());
        den.push(t.iter().map(|z| z.norm()).sum::<f64>());
    }
    let dsum = pairwise_sum(&den);
    let residual = if dsum > 0.0 { pairwise_sum(&num) / dsum } else { 0.0 };
    InvarianceReport { residual, cells_used: used, cells_skipped: skipped }
}

/// Whether a point is inside the region where its own chart is the max chart.
pub fn in_max_chart(x: &ChartPoint) -> bool {
    max_chart(&x.to_hom(), x.coords.len() + 1) == x.chart
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub lattice: Lattice,
    pub q: usize,
    pub n: usize,
    pub h: f64,
    pub eps: f64,
    pub convention: String,
    pub clip_fraction: f64,
    pub trace_mass: f64,
}

impl HermitianField {
    pub fn sidecar(&self, n: usize) -> FieldSidecar {
        FieldSidecar {
            lattice: self.lattice.clone(),
            q: self.q,
            n,
            h: self.h,
            eps: self.eps,
            convention: "T = (i/pi) sum T_ij dz_i ^ dzbar_j; (q,q) blocks in the i^{q^2} e_I ^ ebar_J basis, \
                         divided by pi^q; cell mass = trace * 2^k / pi^q * spacing^(2k)"
                .into(),
            clip_fraction: self.clip_fraction(),
            trace_mass: self.trace_mass(),
        }
    }

    /// One line per valid cell: index, block entries (re, im), trace.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.m;
        write!(w, "cell")?;
        for r in 0..m {
            for c in 0..m {
                write!(w, ",t{r}{c}_re,t{r}{c}_im")?;
            }
        }
        writeln!(w, ",trace")?;
        for cell in 0..self.trace.len() {
            if !self.valid[cell] {
                continue;
            }
            write!(w, "{cell}")?;
            for z in &self.coeffs[cell * m * m..(cell + 1) * m * m] {
                write!(w, ",{},{}", z.re, z.im)?;
            }
            writeln!(w, ",{}", self.trace[cell])?;
        }
        Ok(())
    }

    /// Trace density on the 2D slice spanned by real axes `(ax, ay)` through
    /// the middle of the other axes.
    pub fn slice(&self, ax: usize, ay: usize) -> (usize, usize, Vec<f64>) {
        let lat = &self.lattice;
        let mut mid: Vec<usize> = lat.dims.iter().map(|n| n / 2).collect();
        let (nx, ny) = (lat.dims[ax], lat.dims[ay]);
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                mid[ax] = i;
                mid[ay] = ny - 1 - j;
                let c = lat.flatten(&mid);
                out.push(if self.valid[c] { self.trace[c] } else { 0.0 });
            }
        }
        (nx, ny, out)
    }
}

/// Binary 16-bit PGM, linear scaling of [0, max] to [0, 65535].
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, values: &[f64]) -> std::io::Result<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(values.len() * 2);
    for &v in values {
        let s = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        buf.extend_from_slice(&s.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(max)
}
