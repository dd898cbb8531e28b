//! Growth rates `χ_n = (1/n) log‖df^n_x v‖` in the Fubini–Study metric:
//! along tangent frames of T^q, on random q-planes, and the count of Fatou
//! (non-expanding) singular directions.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{quantile, random_frame, stream, C64};
use crate::projective_map::{ChartPoint, MapError, ProjectiveMap};
use crate::tangent_fields::TangentFrame;

pub const DEFAULT_EC_CUT: f64 = 0.05;
pub const DEFAULT_FATOU_TOL: f64 = 0.1;
/// `|det df|` below this fraction of `‖df‖^k` counts as critical.
pub const CRITICAL_DET_RATIO: f64 = 1e-10;
/// Below this a renormalized product is treated as collapsed.
const TINY: f64 = 1e-280;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("frame not converged")]
    NotConverged,
    #[error("frame fails the E_c cut (min λ = {min:.3} < {c})")]
    BelowCut { min: f64, c: f64 },
    #[error("orbit left the reliable window: {0}")]
    Orbit(#[from] MapError),
    #[error("near the critical set at step {0}")]
    NearCritical(usize),
    #[error("n_max must be at least 2")]
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateKind {
    Tangential,
    Transverse,
    FatouDim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateSample {
    pub x: Vec<[f64; 2]>,
    pub chart: usize,
    pub region: String,
    pub kind: RateKind,
    pub n_values: Vec<usize>,
    /// One row per direction (tangential) or subspace (transverse); NaN
    /// past the last finite value.
    pub rates: Vec<Vec<f64>>,
    /// Per row: max and min of χ_n over n ∈ [n_max/2, n_max].
    pub tail_max: Vec<f64>,
    pub tail_min: Vec<f64>,
    #[serde(skip)]
    pub bases: Vec<DMatrix<C64>>,
    pub seed: u64,
}

impl RateSample {
    /// Limsup proxy: largest tail max over the rows.
    pub fn rate(&self) -> f64 {
        self.tail_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Window start of the limsup proxy.
pub fn tail_start(n_max: usize) -> usize {
    n_max.div_ceil(2).max(1)
}

/// Tail max/min over `n ≥ start` among finite values; when every value in
/// the window is lost to underflow, the last finite value stands in.
pub fn tail_stats(rates: &[f64], n_values: &[usize], start: usize) -> (f64, f64) {
    let mut mx = f64::NEG_INFINITY;
    let mut mn = f64::INFINITY;
    for (r, &n) in rates.iter().zip(n_values) {
        if n >= start && r.is_finite() {
            mx = mx.max(*r);
            mn = mn.min(*r);
        }
    }
    if mx == f64::NEG_INFINITY {
        if let Some(r) = rates.iter().rev().find(|r| r.is_finite()) {
            return (*r, *r);
        }
    }
    (mx, mn)
}

fn to_pairs(x: &ChartPoint) -> Vec<[f64; 2]> {
    x.coords.iter().map(|c| [c.re, c.im]).collect()
}

/// Normalized (orthonormal-frame) cocycle matrices along the orbit.
fn cocycle(map: &ProjectiveMap, x: &ChartPoint, n: usize) -> Result<Vec<DMatrix<C64>>, ExpansionError> {
    let c = map.differential(x, n)?;
    Ok(c.normalized())
}

/// `(1/n) log σ_min` of `M_{n-1}⋯M_0 V` for n = 1..=len, renormalizing as
/// it goes. Rows after an exact collapse are NaN.
fn plane_rates(ms: &[DMatrix<C64>], v: &DMatrix<C64>) -> Vec<f64> {
    let mut w = v.clone();
    let mut logscale = 0.0;
    let mut out = Vec::with_capacity(ms.len());
    let mut dead = false;
    for (i, m) in ms.iter().enumerate() {
        if dead {
            out.push(f64::NAN);
            continue;
        }
        w = m * &w;
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            dead = true;
            out.push(f64::NAN);
            continue;
        }
        let sv = w.clone().singular_values();
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        if !(smin > 0.0) || !smax.is_finite() || smax < TINY {
            dead = true;
            out.push(f64::NAN);
            continue;
        }
        out.push((logscale + smin.ln()) / (i + 1) as f64);
        w /= C64::from(smax);
        logscale += smax.ln();
    }
    out
}

/// Rates along each direction of a tangent frame.
pub fn tangential_rate(map: &ProjectiveMap, frame: &TangentFrame, c: f64, n_max: usize) -> Result<RateSample, ExpansionError> {
    if n_max < 2 {
        return Err(ExpansionError::Horizon);
    }
    if !frame.converged {
        return Err(ExpansionError::NotConverged);
    }
    if frame.min_weight() < c {
        return Err(ExpansionError::BelowCut { min: frame.min_weight(), c });
    }
    let ms = cocycle(map, &frame.x, n_max)?;
    let r0 = crate::projective_map::fs_factor(&frame.x.coords);
    let r0inv = r0.clone().try_inverse().expect("metric factor invertible");
    let n_values: Vec<usize> = (1..=n_max).collect();
    let start = tail_start(n_max);
    let mut sample = RateSample {
        x: to_pairs(&frame.x),
        chart: frame.x.chart,
        region: String::new(),
        kind: RateKind::Tangential,
        n_values: n_values.clone(),
        rates: Vec::new(),
        tail_max: Vec::new(),
        tail_min: Vec::new(),
        bases: Vec::new(),
        seed: 0,
    };
    for j in 0..frame.directions.ncols() {
        // chart direction → unit FS vector
        let u = frame.directions.column(j).into_owned();
        let mut e = &r0 * &u;
        e /= C64::from(e.norm());
        let rates = plane_rates(&ms, &DMatrix::from_column_slice(e.len(), 1, e.as_slice()));
        let (mx, mn) = tail_stats(&rates, &n_values, start);
        sample.rates.push(rates);
        sample.tail_max.push(mx);
        sample.tail_min.push(mn);
        sample.bases.push(&r0inv * DMatrix::from_column_slice(e.len(), 1, e.as_slice()));
    }
    Ok(sample)
}

/// Skip points where df_x itself is nearly singular; later orbit points
/// may approach (super)attracting critical orbits legitimately.
fn check_critical(ms: &[DMatrix<C64>]) -> Result<(), ExpansionError> {
    if let Some(m) = ms.first() {
        let k = m.nrows() as i32;
        if m.determinant().norm() < CRITICAL_DET_RATIO * m.norm().powi(k) {
            return Err(ExpansionError::NearCritical(0));
        }
    }
    Ok(())
}

/// `χ_n(x,V) = (1/n) log σ_min(df^n_x|_V)` for `subspaces` Haar-random
/// q-planes (orthonormal in the FS metric at x).
pub fn transverse_rate(map: &ProjectiveMap, x: &ChartPoint, q: usize, subspaces: usize, n_max: usize, seed: u64) -> Result<RateSample, ExpansionError> {
    if n_max < 2 {
        return Err(ExpansionError::Horizon);
    }
    let ms = cocycle(map, x, n_max)?;
    check_critical(&ms)?;
    let k = map.k;
    let mut rng = stream(seed, 0);
    let n_values: Vec<usize> = (1..=n_max).collect();
    let start = tail_start(n_max);
    let mut sample = RateSample {
        x: to_pairs(x),
        chart: x.chart,
        region: String::new(),
        kind: RateKind::Transverse,
        n_values: n_values.clone(),
        rates: Vec::new(),
        tail_max: Vec::new(),
        tail_min: Vec::new(),
        bases: Vec::new(),
        seed,
    };
    for _ in 0..subspaces {
        let v = random_frame(&mut rng, k, q);
        let rates = plane_rates(&ms, &v);
        let (mx, mn) = tail_stats(&rates, &n_values, start);
        sample.rates.push(rates);
        sample.tail_max.push(mx);
        sample.tail_min.push(mn);
        sample.bases.push(v);
    }
    Ok(sample)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FatouDimension {
    /// `None` when the spectrum is ambiguous.
    pub dim: Option<usize>,
    /// Tail max of `(1/n) log σ_i`, descending in i.
    pub rates: Vec<f64>,
    pub gap: f64,
}

/// Number of singular directions of `df^n_x` whose rate stays ≤ tol over
/// the tail window. Indeterminate when some rate lies within tol of the
/// threshold (gap < 2·tol around it).
pub fn fatou_dimension(map: &ProjectiveMap, x: &ChartPoint, n_max: usize, tol: f64) -> Result<FatouDimension, ExpansionError> {
    if n_max < 2 {
        return Err(ExpansionError::Horizon);
    }
    let ms = cocycle(map, x, n_max)?;
    let k = map.k;
    let start = tail_start(n_max);
    // QR-type accumulation of all k log singular values
    let mut w = DMatrix::<C64>::identity(k, k);
    let mut logscale = 0.0;
    let mut tail = vec![f64::NEG_INFINITY; k];
    let mut last = vec![f64::NAN; k];
    for (i, m) in ms.iter().enumerate() {
        w = m * &w;
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            break;
        }
        let mut sv: Vec<f64> = w.clone().singular_values().iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let smax = sv[0];
        if !(smax > TINY) || !smax.is_finite() {
            break;
        }
        let n = (i + 1) as f64;
        for (j, s) in sv.iter().enumerate() {
            // exact zeros (superattracting) count as −∞
            let r = if *s > 0.0 { (logscale + s.ln()) / n } else { f64::NEG_INFINITY };
            last[j] = r;
            if i + 1 >= start {
                tail[j] = tail[j].max(r);
            }
        }
        w /= C64::from(smax);
        logscale += smax.ln();
    }
    for j in 0..k {
        if tail[j] == f64::NEG_INFINITY && last[j].is_finite() {
            tail[j] = last[j];
        }
    }
    let gap = tail.iter().filter(|r| r.is_finite()).map(|r| (r - tol).abs()).fold(f64::INFINITY, f64::min);
    let dim = tail.iter().filter(|&&r| r <= tol).count();
    let ambiguous = gap < tol;
    Ok(FatouDimension { dim: (!ambiguous).then_some(dim), rates: tail, gap })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegionSummary {
    pub count: usize,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub tail_min_median: f64,
}

/// Quantiles of the limsup proxy per region and kind.
pub fn summarize(samples: &[RateSample]) -> BTreeMap<String, RegionSummary> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let key = format!("{}/{}", kind_name(s.kind), s.region);
        let e = groups.entry(key).or_default();
        for (mx, mn) in s.tail_max.iter().zip(&s.tail_min) {
            if mx.is_finite() {
                e.0.push(*mx);
            }
            if mn.is_finite() {
                e.1.push(*mn);
            }
        }
    }
    groups
        .into_iter()
        .map(|(k, (v, m))| {
            (
                k,
                RegionSummary {
                    count: v.len(),
                    q05: quantile(&v, 0.05),
                    q25: quantile(&v, 0.25),
                    median: quantile(&v, 0.5),
                    q75: quantile(&v, 0.75),
                    q95: quantile(&v, 0.95),
                    tail_min_median: quantile(&m, 0.5),
                },
            )
        })
        .collect()
}

pub fn kind_name(k: RateKind) -> &'static str {
    match k {
        RateKind::Tangential => "tangential",
        RateKind::Transverse => "transverse",
        RateKind::FatouDim => "fatou-dim",
    }
}

/// Long-format rate table: one row per (sample, row, n).
pub fn write_rates_csv<W: Write>(mut w: W, samples: &[RateSample]) -> std::io::Result<()> {
    writeln!(w, "sample,region,kind,row,n,chi,tail_max,tail_min")?;
    for (id, s) in samples.iter().enumerate() {
        for (row, rates) in s.rates.iter().enumerate() {
            for (n, r) in s.n_values.iter().zip(rates) {
                writeln!(w, "{id},{},{},{row},{n},{r},{},{}", s.region, kind_name(s.kind), s.tail_max[row], s.tail_min[row])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projective_map::catalog::monomial;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn frame(x: ChartPoint, dirs: DMatrix<C64>) -> TangentFrame {
        let m = dirs.ncols();
        TangentFrame { x, q: 1, weights: vec![1.0 / m as f64; m], directions: dirs, rank: m, decomposable: m == 1, radius_used: 0.1, converged: true }
    }

    #[test]
    fn monomial_w_direction_contracts() {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![C64::from_polar(1.0, 0.7), c(0.5, 0.0)]);
        let u = DMatrix::from_column_slice(2, 1, &[c(0.0, 0.0), c(1.0, 0.0)]);
        let s = tangential_rate(&map, &frame(x, u), 0.05, 15).unwrap();
        assert!(s.rate() < -0.5, "{:?}", s.rates);
    }

    #[test]
    fn repelling_fixed_point_expands_at_log_d() {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let s = transverse_rate(&map, &x, 2, 3, 12, 1).unwrap();
        for r in &s.tail_max {
            assert!((r - 2f64.ln()).abs() < 1e-9, "{r}");
        }
        let f = fatou_dimension(&map, &x, 12, 0.1).unwrap();
        assert_eq!(f.dim, Some(0));
    }

    #[test]
    fn superattracting_point_is_all_fatou() {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![c(0.2, 0.1), c(-0.3, 0.0)]);
        let f = fatou_dimension(&map, &x, 12, 0.1).unwrap();
        assert_eq!(f.dim, Some(2));
    }

    #[test]
    fn tail_window_and_fallback() {
        let (mx, mn) = tail_stats(&[1.0, 2.0, 0.5, f64::NAN], &[1, 2, 3, 4], 2);
        assert_eq!((mx, mn), (2.0, 0.5));
        let (mx, _) = tail_stats(&[1.0, f64::NAN], &[1, 2], 2);
        assert_eq!(mx, 1.0);
    }
}
