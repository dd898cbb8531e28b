//! Positive exterior algebra of (p,p) vectors and (q,q) covectors on C^k.
//!
//! A (p,p) element is stored through its Hermitian coefficient matrix over
//! ordered p-subsets (lexicographic), relative to the basis
//! `E_{I,J} = i^{p²} e_I ∧ ē_J`. With that normalisation the wedge product is
//! `E_{I,J} ∧ E_{K,L} = sgn(I,K) sgn(J,L) E_{I∪K,J∪L}` and the volume form
//! `β^k/k!` is `E_{[k],[k]}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{binomial, hermitian_eigen, orthonormalize, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("kind mismatch: cannot combine a vector with a covector")]
    Kind,
    #[error("degree overflow: {0} + {1} exceeds {2}")]
    DegreeOverflow(usize, usize, usize),
    #[error("coefficient matrix is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),
    #[error("not positive: {0}")]
    NotPositive(String),
    #[error("bidegree {0} > 1 requires a strong positivity certificate")]
    NotCertified(usize),
    #[error("weights do not form a probability vector (sum {0})")]
    Weights(f64),
    #[error("sample {index} violates the pointwise bound: {value} < {c}")]
    SampleBelowBound { index: usize, value: f64, c: f64 },
    #[error("sample {0} does not have trace 1")]
    SampleTrace(usize),
    #[error("malformed serialized multivector: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Vector,
    Covector,
}

/// `scale · i u_1∧ū_1 ∧ … ∧ i u_p∧ū_p`. For covectors the factors are the
/// coefficient vectors of the (1,0)-forms.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposableWitness {
    pub factors: Vec<DVector<C64>>,
    pub scale: f64,
}

impl DecomposableWitness {
    pub fn new(factors: Vec<DVector<C64>>, scale: f64) -> Self {
        let factors = factors
            .into_iter()
            .map(|u| {
                let n = u.norm();
                if n > 0.0 {
                    u / C64::from(n)
                } else {
                    u
                }
            })
            .collect();
        DecomposableWitness { factors, scale }
    }

    pub fn p(&self) -> usize {
        self.factors.len()
    }

    /// Coefficients `λ det(U_I) conj(det(U_J))`.
    pub fn assemble(&self, k: usize) -> DMatrix<C64> {
        let p = self.p();
        let subs = subsets(k, p);
        let dets: Vec<C64> = subs
            .iter()
            .map(|&mask| {
                let rows = members(mask);
                let m = DMatrix::from_fn(p, p, |r, c| self.factors[c][rows[r]]);
                if p == 0 {
                    C64::from(1.0)
                } else {
                    m.determinant()
                }
            })
            .collect();
        let n = subs.len();
        DMatrix::from_fn(n, n, |a, b| dets[a] * dets[b].conj() * self.scale)
    }
}

#[derive(Debug, Clone)]
pub struct MultiVector {
    pub k: usize,
    pub p: usize,
    pub kind: Kind,
    pub coeffs: DMatrix<C64>,
    /// Explicit decomposition as a sum of decomposables, when known.
    pub certificate: Option<Vec<DecomposableWitness>>,
}

#[derive(Debug, Clone)]
pub struct RankInfo {
    pub rank: usize,
    /// Orthonormal basis of the span, as columns.
    pub span: DMatrix<C64>,
    pub eigenvalues: Vec<f64>,
    pub decomposable: bool,
    pub witness: Option<DecomposableWitness>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaratheodoryReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// p-subsets of {0..k} as bitmasks, lexicographic on sorted tuples.
pub fn subsets(k: usize, p: usize) -> Vec<u32> {
    fn rec(start: usize, k: usize, left: usize, acc: u32, out: &mut Vec<u32>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for i in start..k {
            if k - i < left {
                break;
            }
            rec(i + 1, k, left - 1, acc | (1 << i), out);
        }
    }
    let mut out = Vec::with_capacity(binomial(k, p));
    rec(0, k, p, 0, &mut out);
    out
}

pub fn members(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

fn position(k: usize, p: usize, mask: u32) -> usize {
    subsets(k, p).iter().position(|&m| m == mask).expect("subset in range")
}

/// Sign of the permutation sorting the concatenation (I, K).
pub fn sgn(i: u32, k: u32) -> f64 {
    let mut inversions = 0u32;
    for a in members(i) {
        // elements of K smaller than a must jump over a
        inversions += (k & ((1u32 << a) - 1)).count_ones();
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn full(k: usize) -> u32 {
    (1u32 << k) - 1
}

impl MultiVector {
    pub fn zero(k: usize, p: usize, kind: Kind) -> Self {
        let n = binomial(k, p);
        MultiVector { k, p, kind, coeffs: DMatrix::zeros(n, n), certificate: Some(Vec::new()) }
    }

    pub fn from_coeffs(k: usize, p: usize, kind: Kind, coeffs: DMatrix<C64>) -> Result<Self, ExtError> {
        if !(1..=4).contains(&k) || p > k {
            return Err(ExtError::Dimension(format!("k={k}, p={p}")));
        }
        let n = binomial(k, p);
        if coeffs.nrows() != n || coeffs.ncols() != n {
            return Err(ExtError::Dimension(format!(
                "expected {n}x{n} coefficients, got {}x{}",
                coeffs.nrows(),
                coeffs.ncols()
            )));
        }
        let scale = coeffs.iter().map(|z| z.norm()).fold(1.0, f64::max);
        let defect = (&coeffs - coeffs.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if defect > 1e-10 * scale {
            return Err(ExtError::NotHermitian(defect));
        }
        let coeffs = (&coeffs + coeffs.adjoint()) * C64::from(0.5);
        Ok(MultiVector { k, p, kind, coeffs, certificate: None })
    }

    /// Sum of decomposables; the result carries its own certificate.
    pub fn from_decomposables(k: usize, kind: Kind, terms: Vec<DecomposableWitness>) -> Result<Self, ExtError> {
        let p = match terms.first() {
            Some(t) => t.p(),
            None => return Err(ExtError::Dimension("empty decomposition".into())),
        };
        let n = binomial(k, p);
        let mut coeffs = DMatrix::zeros(n, n);
        for t in &terms {
            if t.p() != p || t.factors.iter().any(|u| u.len() != k) {
                return Err(ExtError::Dimension("inconsistent decomposable terms".into()));
            }
            if t.scale < 0.0 {
                return Err(ExtError::NotPositive("negative decomposable weight".into()));
            }
            coeffs += t.assemble(k);
        }
        Ok(MultiVector { k, p, kind, coeffs, certificate: Some(terms) })
    }

    pub fn decomposable(kind: Kind, factors: Vec<DVector<C64>>, scale: f64) -> Result<Self, ExtError> {
        let k = factors.first().map(|u| u.len()).unwrap_or(0);
        Self::from_decomposables(k, kind, vec![DecomposableWitness::new(factors, scale)])
    }

    /// `β = i Σ dz_j∧dz̄_j` (or its vector analogue).
    pub fn beta(k: usize, kind: Kind) -> Self {
        let terms = (0..k)
            .map(|j| DecomposableWitness::new(vec![unit(k, j)], 1.0))
            .collect();
        Self::from_decomposables(k, kind, terms).expect("beta")
    }

    /// `β^m / m!`, whose coefficient matrix is the identity on m-subsets.
    pub fn beta_power(k: usize, m: usize, kind: Kind) -> Self {
        let n = binomial(k, m);
        let terms = subsets(k, m)
            .into_iter()
            .map(|mask| DecomposableWitness::new(members(mask).into_iter().map(|j| unit(k, j)).collect(), 1.0))
            .collect();
        let mut v = if m == 0 {
            MultiVector::from_coeffs(k, 0, kind, DMatrix::identity(1, 1)).expect("scalar")
        } else {
            Self::from_decomposables(k, kind, terms).expect("beta power")
        };
        v.coeffs = DMatrix::identity(n, n);
        v
    }

    pub fn volume(k: usize, kind: Kind) -> Self {
        Self::beta_power(k, k, kind)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let certificate = if s >= 0.0 {
            self.certificate.as_ref().map(|c| {
                c.iter()
                    .map(|w| DecomposableWitness { factors: w.factors.clone(), scale: w.scale * s })
                    .collect()
            })
        } else {
            None
        };
        MultiVector { k: self.k, p: self.p, kind: self.kind, coeffs: &self.coeffs * C64::from(s), certificate }
    }

    pub fn add(&self, other: &MultiVector) -> Result<Self, ExtError> {
        self.check_same(other)?;
        if self.p != other.p {
            return Err(ExtError::Dimension("bidegree mismatch".into()));
        }
        let certificate = match (&self.certificate, &other.certificate) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            _ => None,
        };
        Ok(MultiVector { k: self.k, p: self.p, kind: self.kind, coeffs: &self.coeffs + &other.coeffs, certificate })
    }

    fn check_same(&self, other: &MultiVector) -> Result<(), ExtError> {
        if self.k != other.k {
            return Err(ExtError::Dimension(format!("k={} vs k={}", self.k, other.k)));
        }
        if self.kind != other.kind {
            return Err(ExtError::Kind);
        }
        Ok(())
    }

    pub fn coeff(&self, i: &[usize], j: &[usize]) -> C64 {
        let mi = i.iter().fold(0u32, |m, &a| m | (1 << a));
        let mj = j.iter().fold(0u32, |m, &a| m | (1 << a));
        self.coeffs[(position(self.k, self.p, mi), position(self.k, self.p, mj))]
    }

    pub fn is_strongly_positive(&self) -> bool {
        self.p <= 1 && self.is_psd(1e-10) || self.certificate.is_some()
    }

    fn is_psd(&self, tol: f64) -> bool {
        let (vals, _) = hermitian_eigen(&self.coeffs);
        let tr = self.trace().abs().max(f64::MIN_POSITIVE);
        vals.iter().all(|&v| v >= -tol * tr.max(1.0))
    }

    pub fn trace(&self) -> f64 {
        (0..self.coeffs.nrows()).map(|i| self.coeffs[(i, i)].re).sum()
    }

    /// Largest coefficient modulus, used for relative tolerances.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Coefficient of the top-degree element against `β^k/k!`.
    pub fn top_coefficient(&self) -> C64 {
        if self.p == self.k {
            self.coeffs[(0, 0)]
        } else {
            C64::from(0.0)
        }
    }
}

fn unit(k: usize, j: usize) -> DVector<C64> {
    DVector::from_fn(k, |i, _| C64::from(if i == j { 1.0 } else { 0.0 }))
}

/// Exterior product with the `i^{p²}` convention.
pub fn wedge(a: &MultiVector, b: &MultiVector) -> Result<MultiVector, ExtError> {
    a.check_same(b)?;
    let k = a.k;
    let p = a.p + b.p;
    if p > k {
        return Err(ExtError::DegreeOverflow(a.p, b.p, k));
    }
    let sa = subsets(k, a.p);
    let sb = subsets(k, b.p);
    let sc = subsets(k, p);
    let n = sc.len();
    let mut out = DMatrix::zeros(n, n);
    let pos = |m: u32| sc.iter().position(|&x| x == m).unwrap();
    for (ia, &i) in sa.iter().enumerate() {
        for (ja, &j) in sa.iter().enumerate() {
            let x = a.coeffs[(ia, ja)];
            if x == C64::from(0.0) {
                continue;
            }
            for (ib, &kk) in sb.iter().enumerate() {
                if i & kk != 0 {
                    continue;
                }
                let si = sgn(i, kk);
                for (jb, &l) in sb.iter().enumerate() {
                    if j & l != 0 {
                        continue;
                    }
                    let y = b.coeffs[(ib, jb)];
                    out[(pos(i | kk), pos(j | l))] += x * y * (si * sgn(j, l));
                }
            }
        }
    }
    let certificate = match (&a.certificate, &b.certificate) {
        (Some(ca), Some(cb)) => Some(
            ca.iter()
                .flat_map(|x| {
                    cb.iter().map(move |y| DecomposableWitness {
                        factors: x.factors.iter().chain(&y.factors).cloned().collect(),
                        scale: x.scale * y.scale,
                    })
                })
                .collect(),
        ),
        _ => None,
    };
    Ok(MultiVector { k, p, kind: a.kind, coeffs: out, certificate })
}

/// `a^r`, with `a^0 = 1`.
pub fn power(a: &MultiVector, r: usize) -> Result<MultiVector, ExtError> {
    if a.p * r > a.k {
        return Err(ExtError::DegreeOverflow(a.p * (r.max(1) - 1), a.p, a.k));
    }
    let mut acc = MultiVector::beta_power(a.k, 0, a.kind);
    for _ in 0..r {
        acc = wedge(&acc, a)?;
    }
    Ok(acc)
}

/// `⟨t, φ⟩ = Σ t_{I,J} φ_{I,J}` for a vector and a covector of equal bidegree.
pub fn pairing(t: &MultiVector, phi: &MultiVector) -> Result<C64, ExtError> {
    if t.kind != Kind::Vector || phi.kind != Kind::Covector {
        return Err(ExtError::Kind);
    }
    if t.k != phi.k || t.p != phi.p {
        return Err(ExtError::Dimension("pairing needs equal bidegree".into()));
    }
    Ok(t.coeffs.iter().zip(phi.coeffs.iter()).map(|(a, b)| a * b).sum())
}

/// Duality `Φ(t) ∧ φ = ⟨t, φ⟩ β^k/k!` from (p,p) vectors to (k−p,k−p) covectors.
pub fn hodge_dual(t: &MultiVector) -> Result<MultiVector, ExtError> {
    if t.kind != Kind::Vector {
        return Err(ExtError::Kind);
    }
    Ok(complement(t, Kind::Covector, false))
}

/// Inverse of [`hodge_dual`].
pub fn inverse_hodge_dual(phi: &MultiVector) -> Result<MultiVector, ExtError> {
    if phi.kind != Kind::Covector {
        return Err(ExtError::Kind);
    }
    Ok(complement(phi, Kind::Vector, true))
}

fn complement(t: &MultiVector, kind: Kind, inverse: bool) -> MultiVector {
    let k = t.k;
    let q = k - t.p;
    let src = subsets(k, t.p);
    let dst = subsets(k, q);
    let n = dst.len();
    let all = full(k);
    let mut out = DMatrix::zeros(n, n);
    let sign = |m: u32| if inverse { sgn(m, all ^ m) } else { sgn(all ^ m, m) };
    for (a, &i) in src.iter().enumerate() {
        let ia = dst.iter().position(|&x| x == all ^ i).unwrap();
        for (b, &j) in src.iter().enumerate() {
            let jb = dst.iter().position(|&x| x == all ^ j).unwrap();
            out[(ia, jb)] = t.coeffs[(a, b)] * (sign(i) * sign(j));
        }
    }
    let certificate = t.certificate.as_ref().map(|c| c.iter().filter_map(|w| dual_decomposable(k, w)).collect());
    MultiVector { k, p: q, kind, coeffs: out, certificate }
}

/// Image of a decomposable under the duality: the complement of its span,
/// weighted by the Gram determinant of the factors.
fn dual_decomposable(k: usize, w: &DecomposableWitness) -> Option<DecomposableWitness> {
    let p = w.p();
    if p == 0 {
        return Some(DecomposableWitness {
            factors: (0..k).map(|j| unit(k, j)).collect(),
            scale: w.scale,
        });
    }
    let u = DMatrix::from_columns(&w.factors);
    let gram = (u.adjoint() * &u).determinant().re;
    if gram <= 1e-300 {
        return None;
    }
    let comp = orthogonal_complement(&u);
    let factors = (0..comp.ncols()).map(|c| comp.column(c).map(|z| z.conj())).collect();
    Some(DecomposableWitness { factors, scale: w.scale * gram })
}

/// Orthonormal basis of the complement of the column span.
pub fn orthogonal_complement(u: &DMatrix<C64>) -> DMatrix<C64> {
    let k = u.nrows();
    let mut m = orthonormalize(u);
    let r = m.ncols();
    let mut extra = Vec::new();
    for j in 0..k {
        let mut v = unit(k, j);
        for c in 0..m.ncols() {
            let col = m.column(c).into_owned();
            let proj = col.dotc(&v);
            v -= col * proj;
        }
        for e in &extra {
            let e: &DVector<C64> = e;
            let proj = e.dotc(&v);
            v -= e * proj;
        }
        let nv = v.norm();
        if nv > 1e-8 {
            extra.push(v / C64::from(nv));
        }
        if r + extra.len() == k {
            break;
        }
    }
    if extra.is_empty() {
        return DMatrix::zeros(k, 0);
    }
    m = DMatrix::from_columns(&extra);
    m
}

/// Trace and mass (sum of coefficient moduli).
pub fn trace_and_mass(t: &MultiVector) -> Result<(f64, f64), ExtError> {
    let mass: f64 = t.coeffs.iter().map(|z| z.norm()).sum();
    let tol = 1e-12 * mass.max(1e-300);
    for i in 0..t.coeffs.nrows() {
        let d = t.coeffs[(i, i)].re;
        if d < -tol {
            return Err(ExtError::NotPositive(format!("diagonal entry {i} is {d}")));
        }
    }
    let trace = t.trace();
    if t.p == 1 && (mass < trace * (1.0 - 1e-12) - tol || mass > t.k as f64 * trace * (1.0 + 1e-12) + tol) {
        return Err(ExtError::NotPositive(format!("mass {mass} outside [trace, k trace] for trace {trace}")));
    }
    Ok((trace, mass))
}

/// Contraction `t ⌟ φ` of a (p,p) vector by an (m,m) covector, defined by
/// `⟨t⌟φ, ψ⟩ = ⟨t, φ∧ψ⟩`.
pub fn contract(t: &MultiVector, phi: &MultiVector) -> Result<MultiVector, ExtError> {
    if t.kind != Kind::Vector || phi.kind != Kind::Covector {
        return Err(ExtError::Kind);
    }
    if t.k != phi.k || phi.p > t.p {
        return Err(ExtError::Dimension("contraction degree".into()));
    }
    let k = t.k;
    let r = t.p - phi.p;
    let st = subsets(k, t.p);
    let sp = subsets(k, phi.p);
    let sr = subsets(k, r);
    let n = sr.len();
    let pos = |m: u32| st.iter().position(|&x| x == m).unwrap();
    let mut out = DMatrix::zeros(n, n);
    for (a, &ma) in sr.iter().enumerate() {
        for (b, &mb) in sr.iter().enumerate() {
            let mut acc = C64::from(0.0);
            for (x, &mk) in sp.iter().enumerate() {
                if mk & ma != 0 {
                    continue;
                }
                for (y, &ml) in sp.iter().enumerate() {
                    if ml & mb != 0 {
                        continue;
                    }
                    let f = phi.coeffs[(x, y)];
                    if f == C64::from(0.0) {
                        continue;
                    }
                    acc += f * t.coeffs[(pos(mk | ma), pos(ml | mb))] * (sgn(mk, ma) * sgn(ml, mb));
                }
            }
            out[(a, b)] = acc;
        }
    }
    Ok(MultiVector { k, p: r, kind: Kind::Vector, coeffs: out, certificate: None })
}

/// Rank, span and decomposability of a positive element.
///
/// For p > 1 the element must carry a strong positivity certificate; the rank
/// is read from the (1,1) contraction by `β^{p−1}/(p−1)!`, whose kernel is the
/// common kernel of the decomposable pieces.
pub fn rank_of_positive(t: &MultiVector, tol: f64) -> Result<RankInfo, ExtError> {
    let k = t.k;
    if t.p == 0 {
        return Err(ExtError::Dimension("rank of a scalar".into()));
    }
    let one_one = if t.p == 1 {
        if !t.is_psd(1e-9) {
            return Err(ExtError::NotPositive("coefficient matrix has a negative eigenvalue".into()));
        }
        t.coeffs.clone()
    } else {
        if t.certificate.is_none() {
            return Err(ExtError::NotCertified(t.p));
        }
        let as_vector = MultiVector { kind: Kind::Vector, ..t.clone() };
        let b = MultiVector::beta_power(k, t.p - 1, Kind::Covector);
        contract(&as_vector, &b)?.coeffs
    };
    let (vals, vecs) = hermitian_eigen(&one_one);
    let tr: f64 = vals.iter().sum();
    let thr = tol * tr.max(0.0);
    let rank = if tr <= 0.0 { 0 } else { vals.iter().filter(|&&v| v > thr).count() };
    let span = vecs.columns(0, rank).into_owned();
    let decomposable = rank == t.p;
    let witness = if !decomposable {
        None
    } else if t.p == 1 {
        Some(DecomposableWitness::new(vec![vecs.column(0).into_owned()], vals[0]))
    } else {
        let factors = (0..rank).map(|c| span.column(c).into_owned()).collect();
        Some(DecomposableWitness { factors, scale: t.trace() })
    };
    Ok(RankInfo { rank, span, eigenvalues: vals, decomposable, witness })
}

/// Corank of a strongly positive covector: the rank of its preimage under the
/// duality.
pub fn corank(phi: &MultiVector, tol: f64) -> Result<usize, ExtError> {
    let t = inverse_hodge_dual(phi)?;
    Ok(rank_of_positive(&t, tol)?.rank)
}

/// (1,0)-forms α (as coefficient vectors) with `iα∧ᾱ ∧ φ = 0`, one for each
/// direction of the complement of the span of `Φ^{-1}(φ)`. The list has
/// `k − corank(φ)` entries and is empty when φ is not divisible.
pub fn dividing_forms(phi: &MultiVector, tol: f64) -> Result<Vec<DVector<C64>>, ExtError> {
    let t = inverse_hodge_dual(phi)?;
    let info = rank_of_positive(&t, tol)?;
    let comp = orthogonal_complement(&info.span);
    let mut out = Vec::new();
    let scale = phi.max_abs().max(1e-300);
    for c in 0..comp.ncols() {
        let alpha: DVector<C64> = comp.column(c).map(|z| z.conj());
        if phi.p + 1 <= phi.k {
            let f = MultiVector::decomposable(Kind::Covector, vec![alpha.clone()], 1.0)?;
            let w = wedge(&f, phi)?;
            if w.max_abs() > 1e-8 * scale {
                continue;
            }
        }
        out.push(alpha);
    }
    Ok(out)
}

/// Convexity bound for `φ^ℓ ∧ β^{k−ℓq}` over mixtures of trace-one strongly
/// positive (q,q) covectors that individually satisfy it with constant c.
pub fn caratheodory_bound_check(
    samples: &[MultiVector],
    weights: &[f64],
    c: f64,
    ell: usize,
) -> Result<CaratheodoryReport, ExtError> {
    if samples.is_empty() || samples.len() != weights.len() {
        return Err(ExtError::Dimension("samples and weights differ in length".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(ExtError::Weights(sum));
    }
    let k = samples[0].k;
    let q = samples[0].p;
    if ell * q > k {
        return Err(ExtError::DegreeOverflow(ell * q, 0, k));
    }
    let mut mix = MultiVector::zero(k, q, Kind::Covector);
    for (i, (s, &w)) in samples.iter().zip(weights).enumerate() {
        if s.k != k || s.p != q {
            return Err(ExtError::Dimension(format!("sample {i} has a different bidegree")));
        }
        if s.kind != Kind::Covector {
            return Err(ExtError::Kind);
        }
        if !s.is_strongly_positive() {
            return Err(ExtError::NotCertified(q));
        }
        if (s.trace() - 1.0).abs() > 1e-9 {
            return Err(ExtError::SampleTrace(i));
        }
        let v = bound_value(s, ell)?;
        if v < c - 1e-12 {
            return Err(ExtError::SampleBelowBound { index: i, value: v, c });
        }
        mix = mix.add(&s.scaled(w))?;
    }
    let lhs = bound_value(&mix, ell)?;
    let d = (binomial(k, q) * binomial(k, q)) as f64 - 1.0;
    let rhs = c * (d + 1.0).powi(1 - ell as i32);
    // samples have trace 1, so values are O(1): absolute roundoff slack as
    // in the pointwise check
    Ok(CaratheodoryReport { lhs, rhs, holds: lhs >= rhs - 1e-12 })
}

/// Coefficient of `φ^ℓ ∧ β^{k−ℓq}` against `β^k`.
fn bound_value(phi: &MultiVector, ell: usize) -> Result<f64, ExtError> {
    let k = phi.k;
    let m = k - ell * phi.p;
    let pw = power(phi, ell)?;
    let top = wedge(&pw, &MultiVector::beta_power(k, m, Kind::Covector))?;
    // β^m = m!·(β^m/m!), β^k = k!·vol
    let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
    Ok(top.top_coefficient().re * fact(m) / fact(k))
}

/// Largest observed mass/trace ratio over the given strongly positive
/// elements. Only an empirical constant, not a guaranteed bound.
pub fn empirical_mass_constant(items: &[MultiVector]) -> f64 {
    items
        .iter()
        .filter_map(|t| trace_and_mass(t).ok())
        .filter(|(tr, _)| *tr > 0.0)
        .map(|(tr, m)| m / tr)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiVectorJson {
    pub k: usize,
    pub p: usize,
    pub kind: Kind,
    /// Row-major `[re, im]` pairs.
    pub coeffs: Vec<[f64; 2]>,
}

impl MultiVector {
    pub fn to_json(&self) -> MultiVectorJson {
        let n = self.coeffs.nrows();
        let mut coeffs = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let z = self.coeffs[(r, c)];
                coeffs.push([z.re, z.im]);
            }
        }
        MultiVectorJson { k: self.k, p: self.p, kind: self.kind, coeffs }
    }

    /// The certificate is not serialized; a decoded element of bidegree > 1
    /// is plain data until re-certified.
    pub fn from_json(j: &MultiVectorJson) -> Result<Self, ExtError> {
        let n = binomial(j.k, j.p);
        if j.coeffs.len() != n * n {
            return Err(ExtError::Format(format!("expected {} coefficients, got {}", n * n, j.coeffs.len())));
        }
        let m = DMatrix::from_fn(n, n, |r, c| {
            let [re, im] = j.coeffs[r * n + c];
            C64::new(re, im)
        });
        MultiVector::from_coeffs(j.k, j.p, j.kind, m)
    }
}
