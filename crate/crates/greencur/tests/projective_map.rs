use greencur::numeric::{random_unit, stream, C64};
use greencur::projective_map::catalog::*;
use greencur::projective_map::*;
use nalgebra::{DMatrix, DVector};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn proj_close(a: &Hom, b: &Hom, n: usize, tol: f64) -> bool {
    fs_distance(a, b, n) < tol
}

fn catalog_maps() -> Vec<ProjectiveMap> {
    vec![
        monomial(2, 2).unwrap(),
        monomial(1, 3).unwrap(),
        monomial(3, 2).unwrap(),
        pk_power(2, 2, c(0.3, 0.0)).unwrap(),
        pk_power(3, 2, c(-0.2, 0.4)).unwrap(),
        product_quotient(&lattes_1d()).unwrap(),
        skew_polynomial(&lattes_1d()).unwrap(),
        lattes_1d(),
    ]
}

#[test]
fn radial_stretch_on_monomial_torus() {
    for d in [2usize, 3] {
        let f = monomial(2, d).unwrap();
        let z = C64::from_polar(1.0, 0.7);
        let w = C64::from_polar(1.0, -1.9);
        let x = ChartPoint::new(2, vec![z, w]);
        for n in 1..=6 {
            let r = f.differential(&x, n).unwrap();
            let v = DVector::from_vec(vec![z, c(0.0, 0.0)]);
            let s = r.stretch(&v);
            let expect = (d as f64).powi(n as i32);
            assert!((s - expect).abs() < 1e-9 * expect, "d={d} n={n}: {s}");
        }
    }
}

#[test]
fn chain_rule_for_cocycles() {
    let f = pk_power(2, 2, c(0.25, 0.1)).unwrap();
    let x = ChartPoint::new(0, vec![c(0.6, -0.3), c(0.8, 0.2)]);
    let r4 = f.differential(&x, 4).unwrap();
    let r2a = f.differential(&x, 2).unwrap();
    let r2b = f.differential(&r2a.orbit[2], 2).unwrap();
    let prod = r2b.product() * r2a.product();
    let p4 = r4.product();
    let rel = (&p4 - &prod).norm() / p4.norm();
    assert!(rel < 1e-10, "{rel}");
}

#[test]
fn stretch_is_chart_independent() {
    let f = product_quotient(&lattes_1d()).unwrap();
    let mut rng = stream(7, 0);
    for _ in 0..20 {
        let u = random_unit(&mut rng, 3);
        let z: Hom = [u[0], u[1], u[2], c(0.0, 0.0)];
        let x0 = ChartPoint::from_hom_in(&z, 2, 0);
        let x1 = ChartPoint::from_hom_in(&z, 2, 1);
        let v0 = DVector::from_vec(vec![c(0.3, 0.1), c(-0.2, 0.7)]);
        let v1 = chart_transition(&x0, 1) * &v0;
        for n in [1usize, 3] {
            let a = f.differential(&x0, n).unwrap().stretch(&v0);
            let b = f.differential(&x1, n).unwrap().stretch(&v1);
            assert!((a - b).abs() < 1e-8 * a, "{a} vs {b}");
        }
    }
}

#[test]
fn cocycle_matches_finite_differences_of_iterate() {
    let f = pk_power(2, 2, c(0.3, 0.0)).unwrap();
    let x = ChartPoint::new(2, vec![c(0.5, 0.4), c(-0.7, 0.3)]);
    for n in 1..=5 {
        let r = f.differential(&x, n).unwrap();
        let target = r.orbit[n].chart;
        let iter = |p: &ChartPoint| {
            let mut z = p.to_hom();
            for _ in 0..n {
                z = f.step(&z).0;
            }
            ChartPoint::from_hom_in(&z, 2, target)
        };
        let h = 1e-6;
        let mut fd = DMatrix::zeros(2, 2);
        for a in 0..2 {
            let mut xp = x.clone();
            xp.coords[a] += h;
            let mut xm = x.clone();
            xm.coords[a] -= h;
            let (yp, ym) = (iter(&xp), iter(&xm));
            for l in 0..2 {
                fd[(l, a)] = (yp.coords[l] - ym.coords[l]) / (2.0 * h);
            }
        }
        let p = r.product();
        let rel = (&p - &fd).norm() / p.norm();
        assert!(rel < 1e-6, "n={n}: {rel}");
    }
}

#[test]
fn iterated_evaluation_equals_composed_lift() {
    let f = pk_power(2, 2, c(0.3, -0.1)).unwrap();
    let mut fn_ = f.clone();
    let mut rng = stream(8, 0);
    let u = random_unit(&mut rng, 3);
    let z: Hom = [u[0], u[1], u[2], c(0.0, 0.0)];
    let mut it = z;
    for n in 1..=4 {
        it = f.step(&it).0;
        if n > 1 {
            fn_ = f.compose(&fn_).unwrap();
        }
        let direct = fn_.step(&z).0;
        assert!(proj_close(&it, &direct, 3, 1e-9), "n={n}");
        assert_eq!(fn_.d, 1 << n);
    }
}

#[test]
fn product_quotient_matches_one_dimensional_factor() {
    let h = lattes_1d();
    let f = product_quotient(&h).unwrap();
    assert_eq!(f.d, 4);
    let mut rng = stream(9, 0);
    for _ in 0..50 {
        let a = random_unit(&mut rng, 2);
        let b = random_unit(&mut rng, 2);
        let z = symmetrize([a[0], a[1]], [b[0], b[1]]);
        let ha = h.eval_lift(&[a[0], a[1], c(0.0, 0.0), c(0.0, 0.0)]);
        let hb = h.eval_lift(&[b[0], b[1], c(0.0, 0.0), c(0.0, 0.0)]);
        let expect = symmetrize([ha[0], ha[1]], [hb[0], hb[1]]);
        let got = f.eval_lift(&z);
        // the identity holds for the lifts themselves, not only projectively
        for i in 0..3 {
            assert!((got[i] - expect[i]).norm() < 1e-10 * (1.0 + expect[i].norm()));
        }
    }
}

#[test]
fn lattes_factor_is_duplication_of_weierstrass_p() {
    // ℘(2u) for g2 = 0, g3 = √2, checked against the Laurent series of ℘ near 0
    let g3 = std::f64::consts::SQRT_2;
    let p = |u: C64| {
        // ℘ = u⁻² + (g3/28) u⁴ + O(u¹⁰) when g2 = 0
        u.powi(-2) + u.powi(4) * (g3 / 28.0)
    };
    let h = lattes_1d();
    for u in [c(0.05, 0.02), c(-0.03, 0.04), c(0.02, -0.06)] {
        let x = p(u);
        let w = h.eval_lift(&[x, c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let y = w[0] / w[1];
        let expect = p(u * 2.0);
        assert!(((y - expect) / expect).norm() < 1e-8, "{y} vs {expect}");
    }
}

#[test]
fn catalog_maps_pass_validation() {
    for f in catalog_maps() {
        let rep = validate(&f, 100, 3);
        assert!(rep.pass, "{:?}: min {}", f.name, rep.min_norm);
        assert!(rep.min_norm > 1e-3);
    }
}

#[test]
fn catalog_build_by_name() {
    let p = CatalogParams { k: Some(2), d: Some(3), ..Default::default() };
    assert_eq!(build("monomial", &p).unwrap().d, 3);
    assert_eq!(build("lattes", &p).unwrap().d, 4);
    assert_eq!(build("skew", &p).unwrap().k, 2);
    let json = monomial(1, 2).unwrap().to_json();
    let p = CatalogParams { custom: Some(json), ..Default::default() };
    assert_eq!(build("custom", &p).unwrap().k, 1);
}
