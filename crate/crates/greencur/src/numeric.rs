//! Small numerical helpers shared by the modules: deterministic reductions,
//! per-sample RNG streams, Hermitian eigen-decompositions and subspace angles.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub type C64 = Complex64;

pub const I: C64 = C64::new(0.0, 1.0);

/// Pairwise (cascade) summation with a fixed tree shape, so the result does
/// not depend on how the terms were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Order-preserving parallel map.
pub fn par_map<T: Sync, R: Send, F: Fn(usize, &T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Order-preserving parallel map over an index range.
pub fn par_range<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

/// Independent random stream for sample `index` under a root seed.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn complex_gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Unit vector drawn from the unitarily invariant law on the sphere of C^n.
pub fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<C64> {
    loop {
        let v = DVector::from_fn(n, |_, _| complex_gaussian(rng));
        let nv = v.norm();
        if nv > 1e-12 {
            return v / C64::from(nv);
        }
    }
}

/// Orthonormal n×q frame from a Gaussian matrix (Haar-distributed q-plane).
pub fn random_frame<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, q: usize) -> DMatrix<C64> {
    let g = DMatrix::from_fn(n, q, |_, _| complex_gaussian(rng));
    orthonormalize(&g)
}

/// Modified Gram-Schmidt on the columns; columns that vanish are dropped.
pub fn orthonormalize(m: &DMatrix<C64>) -> DMatrix<C64> {
    let mut cols: Vec<DVector<C64>> = Vec::new();
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dotc(&v);
                v -= c * proj;
            }
        }
        let nv = v.norm();
        if nv > 1e-12 {
            cols.push(v / C64::from(nv));
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues descending.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let h = (m + m.adjoint()) * C64::from(0.5);
    let eig = h.symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal frames of equal dimension.
pub fn principal_angle(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    if a.ncols() == 0 && b.ncols() == 0 {
        return 0.0;
    }
    if a.ncols() != b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    let m = a.adjoint() * b;
    let sv = m.singular_values();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    smin.acos()
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Least-squares slope and intercept of y against x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Empirical quantile by linear interpolation on the sorted sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    v[lo] * (1.0 - t) + v[hi] * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        use rand::Rng;
        let a: u64 = stream(7, 3).random();
        let b: u64 = stream(7, 3).random();
        let c: u64 = stream(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn random_frame_is_orthonormal() {
        let mut rng = stream(1, 0);
        let f = random_frame(&mut rng, 3, 2);
        let g = f.adjoint() * &f;
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - C64::from(e)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn principal_angle_of_rotated_line() {
        let a = DMatrix::from_column_slice(2, 1, &[C64::from(1.0), C64::from(0.0)]);
        let t = 0.3f64;
        let b = DMatrix::from_column_slice(2, 1, &[C64::from(t.cos()), C64::from(t.sin())]);
        assert!((principal_angle(&a, &b) - t).abs() < 1e-12);
    }
}
