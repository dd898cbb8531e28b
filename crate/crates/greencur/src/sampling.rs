//! Point samplers on the Julia filtration: backward iteration for supp μ and
//! sensitivity bisection for J₁.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{par_range, random_unit, stream, C64};
use crate::projective_map::{fs_distance, max_chart, sup_normalize, ChartPoint, Hom, ProjectiveMap, ZERO};

/// One preimage of `y` by projective Newton from a random start: solve
/// `F_j(Z) Y_m − F_m(Z) Y_j = 0` (j ≠ m) with the affine normalization
/// `a·Z = 1`.
pub fn newton_preimage<R: Rng + ?Sized>(map: &ProjectiveMap, y: &Hom, rng: &mut R) -> Option<Hom> {
    let n = map.k + 1;
    let mut yy = *y;
    sup_normalize(&mut yy, n);
    let m = max_chart(&yy, n);
    let a = random_unit(rng, n);
    let start = random_unit(rng, n);
    let s: C64 = (0..n).map(|i| a[i] * start[i]).sum();
    if s.norm() < 1e-3 {
        return None;
    }
    let mut z = DVector::from_fn(n, |i, _| start[i] / s);
    let residual = |z: &DVector<C64>| -> (DVector<C64>, DMatrix<C64>) {
        let mut h: Hom = [ZERO; 4];
        for i in 0..n {
            h[i] = z[i];
        }
        let (w, jac) = map.eval_with_jacobian(&h);
        let mut r = DVector::zeros(n);
        let mut jm = DMatrix::zeros(n, n);
        let mut row = 0;
        for j in (0..n).filter(|&j| j != m) {
            r[row] = w[j] * yy[m] - w[m] * yy[j];
            for c in 0..n {
                jm[(row, c)] = jac[j][c] * yy[m] - jac[m][c] * yy[j];
            }
            row += 1;
        }
        r[row] = (0..n).map(|i| a[i] * z[i]).sum::<C64>() - C64::new(1.0, 0.0);
        for c in 0..n {
            jm[(row, c)] = a[c];
        }
        (r, jm)
    };
    let (mut r, mut jm) = residual(&z);
    for _ in 0..80 {
        let step = jm.clone().lu().solve(&r)?;
        let mut t = 1.0;
        let r0 = r.norm();
        loop {
            let trial = &z - &step * C64::from(t);
            let (rt, jt) = residual(&trial);
            if rt.norm() < r0 || t < 1e-3 {
                z = trial;
                r = rt;
                jm = jt;
                break;
            }
            t *= 0.5;
        }
        if step.norm() * t < 1e-15 * z.norm() {
            break;
        }
    }
    let mut h: Hom = [ZERO; 4];
    for i in 0..n {
        h[i] = z[i];
    }
    if !h[..n].iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        return None;
    }
    let w = map.eval_lift(&h);
    if w[..n].iter().all(|c| c.norm() == 0.0) || fs_distance(&w, &yy, n) > 1e-9 {
        return None;
    }
    sup_normalize(&mut h, n);
    Some(h)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackwardParams {
    pub chains: usize,
    pub burn_in: usize,
    pub steps: usize,
    /// Newton starts per step; a uniform choice is made among the distinct
    /// preimages found.
    pub starts: usize,
}

impl Default for BackwardParams {
    fn default() -> Self {
        BackwardParams { chains: 100, burn_in: 20, steps: 200, starts: 6 }
    }
}

/// Backward orbits of random points. After burn-in the points accumulate on
/// supp μ = J_k. Returned in chain order.
pub fn backward_orbits(map: &ProjectiveMap, params: &BackwardParams, seed: u64) -> Vec<ChartPoint> {
    let n = map.k + 1;
    let chains = par_range(params.chains, |c| {
        let mut rng = stream(seed, c as u64);
        let v = random_unit(&mut rng, n);
        let mut z: Hom = [ZERO; 4];
        for i in 0..n {
            z[i] = v[i];
        }
        let mut out = Vec::with_capacity(params.steps);
        for it in 0..params.burn_in + params.steps {
            let mut found: Vec<Hom> = Vec::new();
            for _ in 0..params.starts {
                if let Some(p) = newton_preimage(map, &z, &mut rng) {
                    if found.iter().all(|q| fs_distance(q, &p, n) > 1e-7) {
                        found.push(p);
                    }
                }
            }
            if found.is_empty() {
                break;
            }
            z = found[rng.random_range(0..found.len())];
            if it >= params.burn_in {
                out.push(ChartPoint::from_hom(&z, map.k));
            }
        }
        out
    });
    chains.into_iter().flatten().collect()
}

/// Key of the coarse cell holding a max-chart point: chart plus `bins`
/// divisions of each real coordinate of the unit polydisc.
pub fn coarse_cell(x: &ChartPoint, bins: usize) -> Vec<usize> {
    let mut key = vec![x.chart];
    for c in &x.coords {
        for v in [c.re, c.im] {
            let t = ((v + 1.0) * 0.5 * bins as f64).floor();
            key.push(t.clamp(0.0, bins as f64 - 1.0) as usize);
        }
    }
    key
}

/// `count` points drawn by first choosing an occupied coarse cell uniformly
/// and then a point of it uniformly.
pub fn cell_uniform(points: &[ChartPoint], bins: usize, count: usize, seed: u64) -> Vec<ChartPoint> {
    let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let own = p.in_chart(crate::projective_map::max_chart(&p.to_hom(), p.coords.len() + 1)).unwrap_or_else(|_| p.clone());
        cells.entry(coarse_cell(&own, bins)).or_default().push(i);
    }
    if cells.is_empty() {
        return Vec::new();
    }
    let cells: Vec<Vec<usize>> = cells.into_values().collect();
    let mut rng = stream(seed, u64::MAX);
    (0..count)
        .map(|_| {
            let c = &cells[rng.random_range(0..cells.len())];
            points[c[rng.random_range(0..c.len())]].clone()
        })
        .collect()
}

/// `count` points of `points` spread evenly over their support: each is the
/// sample nearest (in FS distance) to an FS-uniform random point of P^k.
pub fn spread_over_support(points: &[ChartPoint], k: usize, count: usize, seed: u64) -> Vec<ChartPoint> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = k + 1;
    let homs: Vec<Hom> = points.iter().map(|p| p.to_hom()).collect();
    par_range(count, |i| {
        let mut rng = stream(seed, i as u64);
        let v = random_unit(&mut rng, n);
        let mut z: Hom = [ZERO; 4];
        for a in 0..n {
            z[a] = v[a];
        }
        let mut best = (f64::INFINITY, 0);
        for (j, h) in homs.iter().enumerate() {
            let d = fs_distance(&z, h, n);
            if d < best.0 {
                best = (d, j);
            }
        }
        points[best.1].clone()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapParams {
    /// Half-length of the initial segment (chart units).
    pub rho: f64,
    /// Iterates used to test separation, and the FS separation threshold.
    pub iterates: usize,
    pub delta: f64,
    pub max_bisections: usize,
    pub directions: usize,
}

impl Default for SnapParams {
    fn default() -> Self {
        SnapParams { rho: 0.05, iterates: 40, delta: 0.1, max_bisections: 60, directions: 6 }
    }
}

#[derive(Debug, Clone)]
pub struct Snapped {
    pub point: ChartPoint,
    /// Length of the last segment whose ends separated.
    pub precision: f64,
    pub moved: f64,
}

fn orbit_end(map: &ProjectiveMap, z: &Hom, n: usize) -> Hom {
    let mut w = *z;
    for _ in 0..n {
        w = map.step(&w).0;
    }
    w
}

/// Moves `x` onto J₁ along a random complex line: a segment whose end
/// orbits separate contains a point of J₁; bisection keeps a separating
/// half. `None` when no direction separates (x is deep in the Fatou set).
pub fn snap_to_julia(map: &ProjectiveMap, x: &ChartPoint, params: &SnapParams, seed: u64) -> Option<Snapped> {
    let n = map.k + 1;
    let mut rng = stream(seed, 0);
    let at = |c: &DVector<C64>| ChartPoint::new(x.chart, c.iter().copied().collect()).to_hom();
    let sep = |a: &Hom, b: &Hom| fs_distance(&orbit_end(map, a, params.iterates), &orbit_end(map, b, params.iterates), n) > params.delta;
    let x0 = DVector::from_vec(x.coords.clone());
    for attempt in 0..params.directions {
        // the radius doubles every other attempt
        let rho = params.rho * 2f64.powi((attempt / 2) as i32);
        let v = random_unit(&mut rng, map.k) * C64::from(rho);
        let mut a = &x0 - &v;
        let mut b = &x0 + &v;
        if !sep(&at(&a), &at(&b)) {
            continue;
        }
        for _ in 0..params.max_bisections {
            let mid = (&a + &b) * C64::from(0.5);
            let hm = at(&mid);
            let left_first = rng.random::<bool>();
            let (l, r) = (sep(&at(&a), &hm), sep(&hm, &at(&b)));
            match (l, r) {
                (true, true) if left_first => b = mid,
                (true, true) => a = mid,
                (true, false) => b = mid,
                (false, true) => a = mid,
                (false, false) => break,
            }
        }
        let mid = (&a + &b) * C64::from(0.5);
        let p = ChartPoint::new(x.chart, mid.iter().copied().collect());
        let own = ChartPoint::from_hom(&p.to_hom(), map.k);
        return Some(Snapped { point: own, precision: (&b - &a).norm(), moved: (&mid - &x0).norm() });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projective_map::catalog::{monomial, pk_power};

    #[test]
    fn newton_finds_true_preimages() {
        let map = pk_power(2, 2, C64::new(0.3, 0.0)).unwrap();
        let mut rng = stream(1, 0);
        let y: Hom = [C64::new(0.3, 0.2), C64::new(1.0, 0.0), C64::new(-0.4, 0.7), ZERO];
        let mut hits = 0;
        for _ in 0..10 {
            if let Some(z) = newton_preimage(&map, &y, &mut rng) {
                hits += 1;
                let w = map.eval_lift(&z);
                assert!(fs_distance(&w, &y, 3) < 1e-9);
            }
        }
        assert!(hits >= 5);
    }

    #[test]
    fn monomial_backward_orbits_land_on_the_torus() {
        let map = monomial(2, 2).unwrap();
        let pts = backward_orbits(&map, &BackwardParams { chains: 4, burn_in: 30, steps: 10, starts: 4 }, 7);
        assert_eq!(pts.len(), 40);
        for p in &pts {
            for c in &p.coords {
                assert!((c.norm() - 1.0).abs() < 1e-6, "{p:?}");
            }
        }
    }

    #[test]
    fn snapping_reaches_the_unit_circle() {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![C64::new(1.02, 0.0), C64::new(0.3, 0.1)]);
        let s = snap_to_julia(&map, &x, &SnapParams::default(), 3).unwrap();
        let z = s.point.in_chart(2).unwrap();
        let on = z.coords.iter().any(|c| (c.norm() - 1.0).abs() < 1e-9);
        assert!(on, "{z:?}");
    }

    #[test]
    fn cell_uniform_is_deterministic() {
        let pts: Vec<ChartPoint> = (0..50).map(|i| ChartPoint::new(0, vec![C64::new(i as f64 / 60.0, 0.0), C64::new(0.1, 0.0)])).collect();
        assert_eq!(cell_uniform(&pts, 4, 20, 9), cell_uniform(&pts, 4, 20, 9));
    }
}
