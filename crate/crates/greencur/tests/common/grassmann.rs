//! Brute-force Grassmann algebra on the 2k generators dz_1..dz_k, dz̄_1..dz̄_k.
//! Monomials are bitmasks (bit j = dz_j, bit k+j = dz̄_j) in increasing
//! generator order; products are reordered by counting transpositions.

#![allow(dead_code)]

use std::collections::BTreeMap;

use greencur::exterior_algebra::{subsets, Kind, MultiVector};
use greencur::numeric::C64;
use nalgebra::DMatrix;

#[derive(Clone, Debug)]
pub struct Form {
    pub k: usize,
    pub terms: BTreeMap<u32, C64>,
}

fn reorder_sign(a: u32, b: u32) -> f64 {
    // number of pairs (x in a, y in b) with x > y
    let mut n = 0;
    for x in 0..32 {
        if a & (1 << x) != 0 {
            n += (b & ((1u32 << x) - 1)).count_ones();
        }
    }
    if n % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn ipow(n: usize) -> C64 {
    [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)][n % 4]
}

impl Form {
    pub fn mul(&self, other: &Form) -> Form {
        let mut terms = BTreeMap::new();
        for (&a, &x) in &self.terms {
            for (&b, &y) in &other.terms {
                if a & b != 0 {
                    continue;
                }
                *terms.entry(a | b).or_insert(C64::new(0.0, 0.0)) += x * y * reorder_sign(a, b);
            }
        }
        Form { k: self.k, terms }
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn from_multivector(t: &MultiVector) -> Form {
        let k = t.k;
        let subs = subsets(k, t.p);
        let mut terms = BTreeMap::new();
        for (a, &i) in subs.iter().enumerate() {
            for (b, &j) in subs.iter().enumerate() {
                let c = t.coeffs[(a, b)];
                if c.norm() > 0.0 {
                    terms.insert(i | (j << k), c * ipow(t.p * t.p));
                }
            }
        }
        Form { k, terms }
    }

    /// Coefficient matrix of the (p,p) part in the E basis.
    pub fn to_coeffs(&self, p: usize) -> DMatrix<C64> {
        let k = self.k;
        let subs = subsets(k, p);
        let n = subs.len();
        let scale = ipow(p * p).conj();
        DMatrix::from_fn(n, n, |a, b| {
            self.terms.get(&(subs[a] | (subs[b] << k))).copied().unwrap_or(C64::new(0.0, 0.0)) * scale
        })
    }

    pub fn to_multivector(&self, p: usize, kind: Kind) -> MultiVector {
        MultiVector::from_coeffs(self.k, p, kind, self.to_coeffs(p)).unwrap()
    }
}
