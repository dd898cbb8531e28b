use greencur::green_fields::*;
use greencur::numeric::{hermitian_eigen, C64};
use greencur::projective_map::catalog::{lattes_1d, monomial, pk_power, product_quotient, skew_polynomial};
use greencur::projective_map::{ChartPoint, Hom};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[test]
fn monomial_potential_equals_max_log_on_a_slab() {
    let map = monomial(2, 2).unwrap();
    let lat = Lattice::slab(2, &[c(0.0, 0.0), c(0.4, -0.2)], 0, 2.0, 64, 1).unwrap();
    for n in [1, 4, 9, 14] {
        let g = green_potential(&map, &lat, n).unwrap();
        for (i, v) in g.values.iter().enumerate() {
            let z = lat.point(i).to_hom();
            let expect = z[..3].iter().map(|w| w.norm().ln()).fold(f64::NEG_INFINITY, f64::max);
            assert!((v - expect).abs() < 1e-12, "n={n} cell={i}: {v} vs {expect}");
        }
    }
}

#[test]
fn potential_is_log_homogeneous() {
    let map = pk_power(2, 2, c(0.3, 0.0)).unwrap();
    let pot = GreenPotential { map: &map, n: 10 };
    let z: Hom = [c(0.3, 0.1), c(-1.2, 0.4), c(0.7, 0.0), c(0.0, 0.0)];
    let lam = c(-2.5, 1.5);
    let zl: Hom = [z[0] * lam, z[1] * lam, z[2] * lam, z[3]];
    assert!((pot.eval(&zl) - pot.eval(&z) - lam.norm().ln()).abs() < 1e-12);
}

#[test]
fn green_tail_is_geometric() {
    let map = pk_power(2, 2, c(0.3, 0.0)).unwrap();
    let lat = Lattice::slab(2, &[c(0.0, 0.0), c(0.5, 0.0)], 0, 1.5, 96, 0).unwrap();
    let tab = convergence_table(&map, &lat, 15);
    let cs: Vec<f64> = tab.iter().filter(|r| (4..=14).contains(&r.n)).map(|r| r.c).collect();
    let lo = cs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cs.iter().cloned().fold(0.0, f64::max);
    assert!(hi / lo < 1.2, "{cs:?}");
}

#[test]
fn clipped_blocks_are_positive_and_smooth_potentials_barely_clip() {
    let lat = Lattice::cube(2, &[c(0.2, 0.0), c(-0.1, 0.3)], 0.6, 12, 1).unwrap();
    let lattes = product_quotient(&lattes_1d()).unwrap();
    for (name, grid) in [
        ("fs", potential_grid(&FsPotential { k: 2 }, &lat)),
        ("lattes", green_potential(&lattes, &lat, 12).unwrap()),
    ] {
        let f = dd_c(&grid, DEFAULT_STENCIL_STEP).unwrap();
        assert!(f.clip_fraction() < 0.01, "{name}: {}", f.clip_fraction());
        for cell in (0..lat.len()).filter(|&i| f.valid[i]) {
            let (vals, _) = hermitian_eigen(&f.block(cell));
            let tr = f.trace[cell];
            assert!(vals.iter().all(|&v| v >= -1e-6 * tr.max(1e-300)), "{name} {vals:?}");
        }
    }
}

#[test]
fn fubini_study_current_is_omega() {
    let pot = FsPotential { k: 2 };
    let x = [c(0.4, -0.3), c(1.1, 0.2)];
    let t = hessian_at(&pot, 1, &x, 1e-3);
    let om = omega_matrix(&x);
    assert!((t - om).norm() < 1e-6);
}

#[test]
fn whole_space_masses_at_default_settings() {
    let lattes = product_quotient(&lattes_1d()).unwrap();
    let mono = monomial(2, 2).unwrap();
    let pk = pk_power(2, 2, c(0.3, 0.0)).unwrap();
    let pots: Vec<(&str, Box<dyn Potential>)> = vec![
        ("fs", Box::new(FsPotential { k: 2 })),
        ("monomial", Box::new(GreenPotential { map: &mono, n: 12 })),
        ("pk_power", Box::new(GreenPotential { map: &pk, n: 12 })),
        ("lattes", Box::new(GreenPotential { map: &lattes, n: 12 })),
    ];
    for (name, pot) in pots {
        let r = whole_space_masses(pot.as_ref(), DEFAULT_COVER_RES, DEFAULT_STENCIL_STEP, DEFAULT_SMOOTHING_CELLS, 2).unwrap();
        println!("{name}: T∧ω = {:.4}, T² = {:.4}, clip = {:.4}", r.t_omega, r.powers[0], r.clip);
        assert!((0.97..=1.03).contains(&r.t_omega), "{name}: {}", r.t_omega);
        assert!((0.95..=1.05).contains(&r.powers[0]), "{name}: {}", r.powers[0]);
    }
}

#[test]
fn monomial_measure_sits_on_the_torus() {
    let map = monomial(2, 2).unwrap();
    let res = DEFAULT_COVER_RES;
    let margin = DEFAULT_STENCIL_STEP + DEFAULT_SMOOTHING_CELLS as usize + 1;
    let lat = Lattice::cube(2, &[c(0.0, 0.0), c(0.0, 0.0)], PARTITION_REACH, res, margin).unwrap();
    let f = dd_c(&green_potential(&map, &lat, 12).unwrap(), DEFAULT_STENCIL_STEP).unwrap();
    let eps = DEFAULT_SMOOTHING_CELLS * lat.spacing;
    let f2 = self_power(&f, 2, eps).unwrap();
    let mut near = 0.0;
    let mut total = 0.0;
    for cell in (0..lat.len()).filter(|&i| f2.valid[i]) {
        let x = lat.point(cell);
        let w = chart_weight(&x.to_hom(), 2, 2) * f2.omega_density(cell);
        let dist = ((x.coords[0].norm() - 1.0).powi(2) + (x.coords[1].norm() - 1.0).powi(2)).sqrt();
        total += w;
        if dist <= eps + f.h {
            near += w;
        }
    }
    assert!(near / total >= 0.95, "{}", near / total);
}

#[test]
fn pullback_matches_degree_times_current() {
    let mono = monomial(2, 2).unwrap();
    let pot = GreenPotential { map: &mono, n: 12 };
    let residual = |res: usize| {
        let lat = Lattice::slab(2, &[c(0.0, 0.0), c(0.5, 0.0)], 0, 1.5, res, DEFAULT_STENCIL_STEP).unwrap();
        let f = dd_c(&green_potential(&mono, &lat, 12).unwrap(), DEFAULT_STENCIL_STEP).unwrap();
        invariance_check(&mono, &pot, &f, res / 16).residual
    };
    let (coarse, fine) = (residual(64), residual(128));
    assert!(fine < 0.6 * coarse && fine < 0.05, "{coarse} {fine}");
    let cases = [
        ("pk_power", pk_power(2, 2, c(0.3, 0.0)).unwrap(), [c(0.0, 0.0), c(0.5, 0.0)], 0.05),
        ("lattes", product_quotient(&lattes_1d()).unwrap(), [c(0.0, 0.0), c(0.3, 0.0)], 0.05),
        ("skew", skew_polynomial(&lattes_1d()).unwrap(), [c(0.0, 0.0), c(0.3, 0.0)], 0.05),
    ];
    for (name, map, center, tol) in cases {
        let lat = Lattice::slab(2, &center, 0, 1.5, 96, DEFAULT_STENCIL_STEP).unwrap();
        let g = green_potential(&map, &lat, 12).unwrap();
        let f = dd_c(&g, DEFAULT_STENCIL_STEP).unwrap();
        let pot = GreenPotential { map: &map, n: 12 };
        let r = invariance_check(&map, &pot, &f, 8);
        assert!(r.residual < tol, "{name}: {}", r.residual);
        assert!(r.cells_used > 0);
    }
}

#[test]
fn max_chart_partition_sums_to_one() {
    let mut rng = greencur::numeric::stream(3, 0);
    for _ in 0..200 {
        let v = greencur::numeric::random_unit(&mut rng, 3);
        let z: Hom = [v[0], v[1], v[2], c(0.0, 0.0)];
        let s: f64 = (0..3).map(|ch| chart_weight(&z, 2, ch)).sum();
        assert!((s - 1.0).abs() < 1e-12);
        let own = ChartPoint::from_hom(&z, 2);
        assert!(in_max_chart(&own));
        assert!(chart_weight(&z, 2, own.chart) > 0.0);
    }
}

#[test]
fn field_dump_has_one_row_per_valid_cell() {
    let lat = Lattice::cube(2, &[c(0.0, 0.0), c(0.0, 0.0)], 0.5, 4, 1).unwrap();
    let f = dd_c(&potential_grid(&FsPotential { k: 2 }, &lat), 1).unwrap();
    let mut buf = Vec::new();
    f.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len() - 1, f.valid.iter().filter(|&&v| v).count());
    assert_eq!(lines[0].split(',').count(), 1 + 8 + 1);
    let side = serde_json::to_value(f.sidecar(0)).unwrap();
    assert_eq!(side["q"], 1);
    let (w, h, vals) = f.slice(0, 1);
    let mut pgm = Vec::new();
    let max = write_pgm(&mut pgm, w, h, &vals).unwrap();
    assert!(max > 0.0);
    assert_eq!(pgm.len(), format!("P5\n{w} {h}\n65535\n").len() + 2 * w * h);
}
