//! Tangent fields of the currents T^q by Lebesgue-density averaging, rank
//! statistics and the filtration masks J_q = supp T^q.
//!
//! A (q,q) field stores forms; the tangent vector of T^q at x is the
//! (k−q,k−q) vector dual to the σ-average of the blocks around x. Its
//! reduction by `β^{k−q−1}/(k−q−1)!` is a (1,1) vector `Σ λ_j i u_j∧ū_j`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exterior_algebra::{contract, inverse_hodge_dual, ExtError, Kind, MultiVector};
use crate::green_fields::{chart_weight, dd_c, potential_grid, write_pgm, HermitianField, Lattice, Potential, DEFAULT_STENCIL_STEP};
use crate::numeric::{hermitian_eigen, pairwise_sum, principal_angle, stream, C64};
use crate::projective_map::ChartPoint;

#[derive(Debug, Error)]
pub enum TangentError {
    #[error("no σ-mass near the point ({mass:e} ≤ floor {floor:e})")]
    NoMass { mass: f64, floor: f64 },
    #[error("point is outside the field window")]
    Outside,
    #[error("inconsistent geometry: {0}")]
    Geometry(String),
    #[error("empty sample")]
    Empty,
    #[error(transparent)]
    Algebra(#[from] ExtError),
}

#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub x: ChartPoint,
    pub q: usize,
    /// λ_1 ≥ … ≥ λ_m > 0, summing to 1.
    pub weights: Vec<f64>,
    /// k×m, orthonormal columns u_j (chart coordinates).
    pub directions: DMatrix<C64>,
    pub rank: usize,
    pub decomposable: bool,
    pub radius_used: f64,
    /// Two successive radii agreed in rank and span.
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameParams {
    /// Decreasing radii (chart units).
    pub radii: Vec<f64>,
    pub mass_floor: f64,
    /// Largest principal angle (radians) between agreeing spans.
    pub angle_tol: f64,
    /// Eigenvalues below `rank_tol · Σλ` do not count toward the rank.
    pub rank_tol: f64,
}

pub const DEFAULT_RANK_TOL: f64 = 0.1;
pub const DEFAULT_ANGLE_TOL_DEG: f64 = 5.0;

impl FrameParams {
    /// Radii `r_max, r_max/2, …` down to two lattice spacings.
    pub fn ladder(spacing: f64, r_max_cells: f64) -> Self {
        let mut radii = Vec::new();
        let mut r = r_max_cells;
        while r >= 2.0 - 1e-12 {
            radii.push(r * spacing);
            r *= 0.5;
        }
        FrameParams { radii, mass_floor: 1e-12, angle_tol: DEFAULT_ANGLE_TOL_DEG.to_radians(), rank_tol: DEFAULT_RANK_TOL }
    }
}

impl TangentFrame {
    pub fn min_weight(&self) -> f64 {
        self.weights.last().copied().unwrap_or(0.0)
    }
}

/// Reduction of a (q,q) form block to the (1,1) tangent vector: eigenvalues
/// (descending, all of them) and eigenvectors.
pub fn reduced_tangent(block: &DMatrix<C64>, k: usize, q: usize) -> Result<(Vec<f64>, DMatrix<C64>), ExtError> {
    let form = MultiVector::from_coeffs(k, q, Kind::Covector, block.clone())?;
    let t = inverse_hodge_dual(&form)?;
    let p = k - q;
    if p == 0 {
        return Ok((Vec::new(), DMatrix::zeros(k, 0)));
    }
    let one_one = if p == 1 { t.coeffs } else { contract(&t, &MultiVector::beta_power(k, p - 1, Kind::Covector))?.coeffs };
    Ok(hermitian_eigen(&one_one))
}

/// Weights, directions and rank from a (q,q) block.
pub fn frame_from_block(block: &DMatrix<C64>, k: usize, q: usize, rank_tol: f64) -> Result<(Vec<f64>, DMatrix<C64>, usize), ExtError> {
    let (vals, vecs) = reduced_tangent(block, k, q)?;
    let tr: f64 = vals.iter().filter(|&&v| v > 0.0).sum();
    if tr <= 0.0 {
        return Ok((Vec::new(), DMatrix::zeros(k, 0), 0));
    }
    let rank = vals.iter().filter(|&&v| v > rank_tol * tr).count();
    let kept: f64 = vals[..rank].iter().sum();
    let weights = vals[..rank].iter().map(|v| v / kept).collect();
    Ok((weights, vecs.columns(0, rank).into_owned(), rank))
}

/// Sum of valid blocks and of their traces over cells within `r` of `x`.
fn ball_sum(field: &HermitianField, x: &[C64], r: f64) -> (DMatrix<C64>, f64) {
    let lat = &field.lattice;
    let m = field.m;
    let dim = 2 * lat.k;
    let pos: Vec<f64> = (0..dim)
        .map(|a| {
            let v = if a % 2 == 0 { x[a / 2].re } else { x[a / 2].im };
            (v - lat.origin[a]) / lat.spacing
        })
        .collect();
    let rc = r / lat.spacing;
    let lo: Vec<i64> = pos.iter().map(|p| (p - rc).ceil().max(0.0) as i64).collect();
    let hi: Vec<i64> = pos.iter().zip(&lat.dims).map(|(p, &n)| ((p + rc).floor() as i64).min(n as i64 - 1)).collect();
    let mut acc = DMatrix::zeros(m, m);
    let mut traces = Vec::new();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return (acc, 0.0);
    }
    let mut cur = lo.clone();
    loop {
        let d2: f64 = cur.iter().zip(&pos).map(|(&c, p)| (c as f64 - p).powi(2)).sum();
        if d2 <= rc * rc + 1e-9 {
            let multi: Vec<usize> = cur.iter().map(|&c| c as usize).collect();
            let cell = lat.flatten(&multi);
            if field.valid[cell] {
                acc += field.block(cell);
                traces.push(field.trace[cell]);
            }
        }
        let mut a = 0;
        loop {
            if a == dim {
                return (acc, pairwise_sum(&traces));
            }
            cur[a] += 1;
            if cur[a] > hi[a] {
                cur[a] = lo[a];
                a += 1;
            } else {
                break;
            }
        }
    }
}

fn in_window(lat: &Lattice, x: &[C64]) -> bool {
    (0..lat.k).all(|a| {
        [(x[a].re, 2 * a), (x[a].im, 2 * a + 1)].iter().all(|&(v, ax)| {
            let t = (v - lat.origin[ax]) / lat.spacing;
            t >= 0.0 && t <= (lat.dims[ax] - 1) as f64
        })
    })
}

/// σ-weighted average of the field's tangent vectors over shrinking balls
/// around x. The frame of the first radius that agrees with its predecessor
/// is returned; otherwise the frame of the smallest radius with mass,
/// flagged unconverged.
pub fn tangent_at(field: &HermitianField, x: &ChartPoint, params: &FrameParams) -> Result<TangentFrame, TangentError> {
    let lat = &field.lattice;
    let k = lat.k;
    let x = if x.chart == lat.chart { x.clone() } else { x.in_chart(lat.chart).map_err(|_| TangentError::Outside)? };
    if !in_window(lat, &x.coords) {
        return Err(TangentError::Outside);
    }
    if params.radii.is_empty() {
        return Err(TangentError::Empty);
    }
    let mut prev: Option<(usize, DMatrix<C64>)> = None;
    let mut last: Option<TangentFrame> = None;
    for &r in &params.radii {
        let (sum, tr) = ball_sum(field, &x.coords, r);
        let mass = tr * field.cell_mass_factor();
        if mass <= params.mass_floor {
            if last.is_none() {
                return Err(TangentError::NoMass { mass, floor: params.mass_floor });
            }
            break;
        }
        let (weights, directions, rank) = frame_from_block(&sum, k, field.q, params.rank_tol)?;
        let frame = TangentFrame {
            x: x.clone(),
            q: field.q,
            weights,
            directions: directions.clone(),
            rank,
            decomposable: rank == k - field.q,
            radius_used: r,
            converged: false,
        };
        if let Some((pr, pd)) = &prev {
            if *pr == rank && principal_angle(pd, &directions) < params.angle_tol {
                return Ok(TangentFrame { converged: true, ..frame });
            }
        }
        prev = Some((rank, directions));
        last = Some(frame);
    }
    Ok(last.expect("at least one radius had mass"))
}

/// Frame of T at x from a small patch field of spacing `spacing` around
/// x, with the radius ladder `r_max_cells, r_max_cells/2, …, 2`.
pub fn local_frame(
    pot: &dyn Potential,
    x: &ChartPoint,
    spacing: f64,
    r_max_cells: usize,
    rank_tol: f64,
) -> Result<TangentFrame, TangentError> {
    let hw = (r_max_cells as f64 + 0.5) * spacing;
    let lat = Lattice::cube(x.chart, &x.coords, hw, 2 * r_max_cells + 1, DEFAULT_STENCIL_STEP)
        .map_err(|e| TangentError::Geometry(e.to_string()))?;
    let field = dd_c(&potential_grid(pot, &lat), DEFAULT_STENCIL_STEP).map_err(|e| TangentError::Geometry(e.to_string()))?;
    let mut params = FrameParams::ladder(spacing, r_max_cells as f64);
    params.rank_tol = rank_tol;
    tangent_at(&field, x, &params)
}

/// Filtration levels per cell: the largest q with the cell in J_q, 0 off
/// J_1, [`FiltrationMask::INVALID`] where the T field is undefined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiltrationMask {
    pub lattice: Lattice,
    pub levels: Vec<u8>,
    pub thresholds: Vec<f64>,
}

impl FiltrationMask {
    pub const INVALID: u8 = u8::MAX;

    pub fn level(&self, cell: usize) -> Option<usize> {
        let l = self.levels[cell];
        (l != Self::INVALID).then_some(l as usize)
    }

    pub fn in_j(&self, cell: usize, q: usize) -> bool {
        self.level(cell).is_some_and(|l| l >= q)
    }

    pub fn level_at(&self, x: &ChartPoint) -> Option<usize> {
        let x = x.in_chart(self.lattice.chart).ok()?;
        let multi = self.lattice.locate(&x.coords)?;
        self.level(self.lattice.flatten(&multi))
    }

    pub fn count(&self, level: usize) -> usize {
        self.levels.iter().filter(|&&l| l as usize == level && l != Self::INVALID).count()
    }

    /// Gray levels on a 2D slice (same axes convention as
    /// [`HermitianField::slice`]); invalid cells are black.
    pub fn write_pgm<W: Write>(&self, w: W, ax: usize, ay: usize) -> std::io::Result<f64> {
        let lat = &self.lattice;
        let mut mid: Vec<usize> = lat.dims.iter().map(|n| n / 2).collect();
        let (nx, ny) = (lat.dims[ax], lat.dims[ay]);
        let mut vals = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                mid[ax] = i;
                mid[ay] = ny - 1 - j;
                vals.push(match self.level(lat.flatten(&mid)) {
                    Some(l) => 1.0 + l as f64,
                    None => 0.0,
                });
            }
        }
        write_pgm(w, nx, ny, &vals)
    }
}

/// Region name of a filtration level in P^k.
pub fn region_name(level: Option<usize>, k: usize) -> String {
    match level {
        None => "invalid".into(),
        Some(0) => "off".into(),
        Some(l) if l == k => format!("J{l}"),
        Some(l) => format!("J{l}-J{}", l + 1),
    }
}

/// 1% of the mean positive trace density of each field.
pub fn default_thresholds(fields: &[&HermitianField]) -> Vec<f64> {
    fields
        .iter()
        .map(|f| {
            let pos: Vec<f64> = (0..f.trace.len()).filter(|&c| f.valid[c] && f.trace[c] > 0.0).map(|c| f.trace[c]).collect();
            if pos.is_empty() {
                0.0
            } else {
                0.01 * pairwise_sum(&pos) / pos.len() as f64
            }
        })
        .collect()
}

/// `fields[i]` is the (i+1, i+1) field. A cell is in J_q when the mean
/// trace density of T^q over valid cells within `radius_cells` exceeds
/// `thresholds[q−1]`; levels are then made nested by taking the largest
/// such q.
pub fn filtration_mask(fields: &[&HermitianField], thresholds: &[f64], radius_cells: f64) -> Result<FiltrationMask, TangentError> {
    let first = fields.first().ok_or(TangentError::Empty)?;
    if thresholds.len() != fields.len() {
        return Err(TangentError::Geometry("one threshold per field".into()));
    }
    for (i, f) in fields.iter().enumerate() {
        if f.lattice != first.lattice || f.q != i + 1 {
            return Err(TangentError::Geometry(format!("field {i} has another lattice or degree")));
        }
    }
    let lat = &first.lattice;
    let r = radius_cells.floor() as i64;
    let dim = 2 * lat.k;
    let mut offs = Vec::new();
    let mut cur = vec![-r; dim];
    'outer: loop {
        if cur.iter().map(|c| c * c).sum::<i64>() as f64 <= radius_cells * radius_cells + 1e-9 {
            offs.push(cur.clone());
        }
        let mut a = 0;
        loop {
            if a == dim {
                break 'outer;
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
    let levels = crate::numeric::par_range(lat.len(), |cell| {
        if !first.valid[cell] {
            return FiltrationMask::INVALID;
        }
        let multi = lat.unflatten(cell);
        let mut level = 0u8;
        for (i, f) in fields.iter().enumerate() {
            let mut s = 0.0;
            let mut n = 0usize;
            for o in &offs {
                let idx: Option<Vec<usize>> = multi
                    .iter()
                    .zip(o)
                    .zip(&lat.dims)
                    .map(|((&m, &d), &len)| {
                        let v = m as i64 + d;
                        (v >= 0 && v < len as i64).then_some(v as usize)
                    })
                    .collect();
                if let Some(idx) = idx {
                    let c = lat.flatten(&idx);
                    if f.valid[c] {
                        s += f.trace[c];
                        n += 1;
                    }
                }
            }
            if n > 0 && s / n as f64 > thresholds[i] {
                level = (i + 1) as u8;
            }
        }
        level
    });
    Ok(FiltrationMask { lattice: lat.clone(), levels, thresholds: thresholds.to_vec() })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RankStats {
    pub total: usize,
    pub failed: usize,
    /// Counts of rank 0..=k.
    pub histogram: Vec<usize>,
    pub decomposable_fraction: f64,
    pub by_region: BTreeMap<String, RegionRankStats>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegionRankStats {
    pub count: usize,
    pub histogram: Vec<usize>,
    pub decomposable_fraction: f64,
}

/// Rank histogram of the tangent frames at the sample, split by region.
pub fn classify_rank(
    field: &HermitianField,
    mask: Option<&FiltrationMask>,
    sample: &[ChartPoint],
    params: &FrameParams,
) -> Result<(RankStats, Vec<Option<TangentFrame>>), TangentError> {
    if sample.is_empty() {
        return Err(TangentError::Empty);
    }
    let k = field.k();
    let frames = crate::numeric::par_map(sample, |_, x| tangent_at(field, x, params).ok());
    let mut st = RankStats { histogram: vec![0; k + 1], ..Default::default() };
    let mut dec = 0usize;
    let mut regions: BTreeMap<String, (RegionRankStats, usize)> = BTreeMap::new();
    for (x, f) in sample.iter().zip(&frames) {
        let Some(f) = f else {
            st.failed += 1;
            continue;
        };
        st.total += 1;
        st.histogram[f.rank] += 1;
        dec += f.decomposable as usize;
        let name = match mask {
            Some(m) => region_name(m.level_at(x), k),
            None => "all".into(),
        };
        let e = regions.entry(name).or_insert_with(|| (RegionRankStats { histogram: vec![0; k + 1], ..Default::default() }, 0));
        e.0.count += 1;
        e.0.histogram[f.rank] += 1;
        e.1 += f.decomposable as usize;
    }
    st.decomposable_fraction = if st.total > 0 { dec as f64 / st.total as f64 } else { 0.0 };
    st.by_region = regions
        .into_iter()
        .map(|(n, (mut r, d))| {
            r.decomposable_fraction = d as f64 / r.count as f64;
            (n, r)
        })
        .collect();
    Ok((st, frames))
}

/// Points drawn with probability proportional to `weight(cell) · trace`,
/// uniformly jittered inside the cell. Deterministic in `seed`.
pub fn importance_sample<W: Fn(usize) -> f64>(field: &HermitianField, count: usize, seed: u64, weight: W) -> Result<Vec<ChartPoint>, TangentError> {
    let lat = &field.lattice;
    let w: Vec<f64> = (0..lat.len())
        .map(|c| if field.valid[c] && field.trace[c] > 0.0 { field.trace[c] * weight(c) } else { 0.0 })
        .collect();
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in &w {
        acc += v;
        cum.push(acc);
    }
    if acc <= 0.0 {
        return Err(TangentError::Empty);
    }
    let mut rng = stream(seed, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.random::<f64>() * acc;
        let cell = cum.partition_point(|&c| c <= u).min(w.len() - 1);
        let multi = lat.unflatten(cell);
        let coords = (0..lat.k)
            .map(|a| {
                let jr: f64 = rng.random::<f64>() - 0.5;
                let ji: f64 = rng.random::<f64>() - 0.5;
                C64::new(
                    lat.origin[2 * a] + (multi[2 * a] as f64 + jr) * lat.spacing,
                    lat.origin[2 * a + 1] + (multi[2 * a + 1] as f64 + ji) * lat.spacing,
                )
            })
            .collect();
        out.push(ChartPoint::new(lat.chart, coords));
    }
    Ok(out)
}

/// Points of P^k drawn from the trace measure `T^q∧ω^{k−q}` assembled from
/// fields on a chart cover (one per chart, partition-weighted), jittered
/// inside the chosen cell. `accept(field, cell)` can restrict the region.
pub fn sample_cover<A: Fn(usize, usize) -> bool>(fields: &[&HermitianField], count: usize, seed: u64, accept: A) -> Result<Vec<ChartPoint>, TangentError> {
    let mut cum = Vec::new();
    let mut index = Vec::new();
    let mut acc = 0.0;
    for (fi, f) in fields.iter().enumerate() {
        let vol = f.lattice.cell_volume();
        for cell in 0..f.lattice.len() {
            if !f.valid[cell] || !accept(fi, cell) {
                continue;
            }
            let x = f.lattice.point(cell);
            let w = chart_weight(&x.to_hom(), f.k(), f.lattice.chart) * f.omega_density(cell).max(0.0) * vol;
            if w > 0.0 {
                acc += w;
                cum.push(acc);
                index.push((fi, cell));
            }
        }
    }
    if acc <= 0.0 {
        return Err(TangentError::Empty);
    }
    let mut rng = stream(seed, 0);
    Ok((0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let (fi, cell) = index[cum.partition_point(|&c| c <= u).min(index.len() - 1)];
            let lat = &fields[fi].lattice;
            let multi = lat.unflatten(cell);
            let coords = (0..lat.k)
                .map(|a| {
                    let jr: f64 = rng.random::<f64>() - 0.5;
                    let ji: f64 = rng.random::<f64>() - 0.5;
                    C64::new(
                        lat.origin[2 * a] + (multi[2 * a] as f64 + jr) * lat.spacing,
                        lat.origin[2 * a + 1] + (multi[2 * a + 1] as f64 + ji) * lat.spacing,
                    )
                })
                .collect();
            ChartPoint::new(lat.chart, coords)
        })
        .collect())
}

/// Frames as CSV: point, radius, convergence, rank, λ's and directions
/// (padded to k columns).
pub fn write_frames_csv<W: Write>(mut w: W, k: usize, frames: &[(usize, TangentFrame)]) -> std::io::Result<()> {
    write!(w, "id,chart")?;
    for a in 0..k {
        write!(w, ",x{a}_re,x{a}_im")?;
    }
    write!(w, ",q,radius,converged,rank,decomposable")?;
    for j in 0..k {
        write!(w, ",lambda{j}")?;
    }
    for j in 0..k {
        for a in 0..k {
            write!(w, ",u{j}_{a}_re,u{j}_{a}_im")?;
        }
    }
    writeln!(w)?;
    for (id, f) in frames {
        write!(w, "{id},{}", f.x.chart)?;
        for c in &f.x.coords {
            write!(w, ",{},{}", c.re, c.im)?;
        }
        write!(w, ",{},{},{},{},{}", f.q, f.radius_used, f.converged as u8, f.rank, f.decomposable as u8)?;
        for j in 0..k {
            write!(w, ",{}", f.weights.get(j).copied().unwrap_or(0.0))?;
        }
        for j in 0..k {
            for a in 0..k {
                let z = if j < f.directions.ncols() { f.directions[(a, j)] } else { C64::new(0.0, 0.0) };
                write!(w, ",{},{}", z.re, z.im)?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green_fields::FnPotential;
    use crate::projective_map::Hom;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn dual_of_dz_is_the_other_direction() {
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 0)] = c(1.0, 0.0);
        let (w, d, r) = frame_from_block(&b, 2, 1, 0.1).unwrap();
        assert_eq!(r, 1);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((d[(1, 0)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_block_has_full_rank() {
        let (w, _, r) = frame_from_block(&DMatrix::identity(3, 3), 3, 1, 0.1).unwrap();
        assert_eq!(r, 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_current_frame() {
        // dd^c log(1+|w|²) only involves dw, so its tangent is ∂/∂z.
        let pot = FnPotential { k: 2, f: |z: &Hom| (z[1].norm_sqr() + z[2].norm_sqr()).ln() * 0.5 };
        let lat = Lattice::cube(2, &[c(0.0, 0.0), c(1.0, 0.0)], 0.3, 16, 2).unwrap();
        let f = dd_c(&potential_grid(&pot, &lat), 1).unwrap();
        let params = FrameParams::ladder(lat.spacing, 8.0);
        let fr = tangent_at(&f, &ChartPoint::new(2, vec![c(0.02, 0.0), c(1.0, 0.0)]), &params).unwrap();
        assert_eq!(fr.rank, 1);
        assert!(fr.decomposable);
        assert!(fr.directions[(0, 0)].norm() > 0.99);
    }

    #[test]
    fn region_names() {
        assert_eq!(region_name(Some(1), 2), "J1-J2");
        assert_eq!(region_name(Some(2), 2), "J2");
        assert_eq!(region_name(Some(0), 2), "off");
    }
}
