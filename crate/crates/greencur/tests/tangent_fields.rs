use greencur::green_fields::*;
use greencur::numeric::{complex_gaussian, random_unit, stream, C64};
use greencur::projective_map::catalog::monomial;
use greencur::projective_map::ChartPoint;
use greencur::tangent_fields::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[test]
fn monomial_current_is_foliated_by_vertical_discs() {
    // off the torus, T for (z², w²) is dd^c max(log|z|, 0) near |z| = 1:
    // rank one, tangent to the discs {z = const}
    let map = monomial(2, 2).unwrap();
    let pot = GreenPotential { map: &map, n: 12 };
    let x = ChartPoint::new(2, vec![C64::from_polar(1.0, 0.7), c(0.5, 0.0)]);
    let fr = local_frame(&pot, &x, 0.004, 4, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(fr.rank, 1);
    assert!(fr.decomposable && fr.converged);
    assert!(fr.directions[(1, 0)].norm() > 0.99, "{}", fr.directions);

    // on the torus both foliations meet
    let y = ChartPoint::new(2, vec![C64::from_polar(1.0, 0.7), C64::from_polar(1.0, -1.9)]);
    let fr = local_frame(&pot, &y, 0.004, 4, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(fr.rank, 2);
    assert!(!fr.decomposable);
    assert!((fr.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // and in the Fatou set there is nothing to see
    let z = ChartPoint::new(2, vec![c(0.2, 0.1), c(-0.3, 0.0)]);
    assert!(matches!(local_frame(&pot, &z, 0.004, 4, DEFAULT_RANK_TOL), Err(TangentError::NoMass { .. })));
}

#[test]
fn monomial_filtration_levels() {
    let map = monomial(2, 2).unwrap();
    let pot = GreenPotential { map: &map, n: 12 };
    let margin = DEFAULT_STENCIL_STEP + DEFAULT_SMOOTHING_CELLS as usize + 1;
    let lats = covering_lattices(2, 24, margin);
    let t1: Vec<HermitianField> = lats.iter().map(|l| dd_c(&potential_grid(&pot, l), DEFAULT_STENCIL_STEP).unwrap()).collect();
    let eps = DEFAULT_SMOOTHING_CELLS * lats[0].spacing;
    let t2: Vec<HermitianField> = t1.iter().map(|f| self_power(f, 2, eps).unwrap()).collect();
    let chart2 = lats.iter().position(|l| l.chart == 2).unwrap();
    let th = default_thresholds(&[&t1[chart2], &t2[chart2]]);
    assert_eq!(th.len(), 2);
    let mask = filtration_mask(&[&t1[chart2], &t2[chart2]], &th, 1.5).unwrap();
    assert!(mask.count(0) > 0 && mask.count(1) > 0 && mask.count(2) > 0);
    let at = |z: C64, w: C64| mask.level_at(&ChartPoint::new(2, vec![z, w]));
    assert_eq!(at(c(0.2, 0.1), c(-0.3, 0.0)), Some(0));
    assert_eq!(at(C64::from_polar(1.0, 0.7), c(0.3, 0.1)), Some(1));
    assert_eq!(at(C64::from_polar(1.0, 0.7), C64::from_polar(1.0, 2.1)), Some(2));
    assert_eq!(region_name(at(C64::from_polar(1.0, 0.7), C64::from_polar(1.0, 2.1)), 2), "J2");

    // sampling respects the acceptance rule and the seed
    let refs: Vec<&HermitianField> = t1.iter().collect();
    let a = sample_cover(&refs, 40, 9, |fi, cell| t1[fi].trace[cell] > 0.0).unwrap();
    let b = sample_cover(&refs, 40, 9, |fi, cell| t1[fi].trace[cell] > 0.0).unwrap();
    assert_eq!(a.len(), 40);
    assert!(a.iter().zip(&b).all(|(p, q)| p.chart == q.chart && p.coords == q.coords));
    assert!(matches!(sample_cover(&refs, 5, 9, |_, _| false), Err(TangentError::Empty)));

    // rank statistics split by region; the cover is too coarse for rank
    // one here, which is why sample frames use local patches
    let pts = importance_sample(&t1[chart2], 60, 3, |cell| (mask.levels[cell] == 1) as u8 as f64).unwrap();
    let params = FrameParams::ladder(t1[chart2].lattice.spacing, 4.0);
    let (stats, frames) = classify_rank(&t1[chart2], Some(&mask), &pts, &params).unwrap();
    assert_eq!(frames.len(), 60);
    assert_eq!(stats.total + stats.failed, 60);
    let j1 = &stats.by_region["J1-J2"];
    assert_eq!(j1.count, stats.total);
    assert_eq!(j1.histogram.iter().sum::<usize>(), j1.count);
    assert_eq!(j1.histogram[0], 0);
    let dec = frames.iter().flatten().filter(|f| f.decomposable).count();
    assert!((stats.decomposable_fraction - dec as f64 / stats.total as f64).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // a rank-one (1,1) form i ξ∧ξ̄ on C² is the current of a line, and its
    // tangent is the kernel of ξ
    #[test]
    fn rank_one_form_tangent_is_the_kernel(seed in any::<u64>()) {
        let mut rng = stream(seed, 0);
        let alpha = random_unit(&mut rng, 2);
        let block = &alpha * alpha.adjoint();
        let (w, d, r) = frame_from_block(&block, 2, 1, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(r, 1);
        prop_assert!((w[0] - 1.0).abs() < 1e-12);
        // ξ = Σ α_j dz_j annihilates the tangent: Σ α_j u_j = 0
        prop_assert!(alpha.dot(&d.column(0).into_owned()).norm() < 1e-12);
    }

    #[test]
    fn frames_are_orthonormal_with_ordered_weights(seed in any::<u64>(), k in 2usize..4) {
        let mut rng = stream(seed, 1);
        let g = DMatrix::from_fn(k, k, |_, _| complex_gaussian(&mut rng));
        let block = &g * g.adjoint();
        let (w, d, r) = frame_from_block(&block, k, 1, 0.0).unwrap();
        prop_assert_eq!(r, k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
        let gram = d.adjoint() * &d;
        prop_assert!((gram - DMatrix::<C64>::identity(r, r)).norm() < 1e-10);
    }
}
