use greencur::expansion::*;
use greencur::green_fields::GreenPotential;
use greencur::numeric::C64;
use greencur::projective_map::catalog::{build, monomial, CatalogParams};
use greencur::projective_map::ChartPoint;
use greencur::sampling::{backward_orbits, spread_over_support, BackwardParams};
use greencur::tangent_fields::{local_frame, DEFAULT_RANK_TOL};
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[test]
fn lattes_expands_every_direction_at_half_log_d() {
    // the catalog Lattès map has degree 4 and is uniformly expanding on P²:
    // every direction grows at ½ log 4
    let map = build("lattes", &CatalogParams::default()).unwrap();
    let pts = backward_orbits(&map, &BackwardParams { chains: 10, burn_in: 20, steps: 20, starts: 6 }, 1);
    let pick = spread_over_support(&pts, 2, 12, 2);
    let pot = GreenPotential { map: &map, n: 12 };
    let mut rates = Vec::new();
    for (i, x) in pick.iter().enumerate() {
        if let Ok(s) = transverse_rate(&map, x, 1, 3, 15, i as u64) {
            assert_eq!(s.kind, RateKind::Transverse);
            rates.extend(s.tail_min.iter().copied());
        }
        let Ok(fr) = local_frame(&pot, x, 0.004, 4, DEFAULT_RANK_TOL) else { continue };
        if let Ok(s) = tangential_rate(&map, &fr, DEFAULT_EC_CUT, 15) {
            rates.push(s.rate());
        }
    }
    assert!(rates.len() >= 10);
    rates.sort_by(f64::total_cmp);
    let median = rates[rates.len() / 2];
    assert!((median / 2f64.ln() - 1.0).abs() < 0.1, "{rates:?}");
}

#[test]
fn monomial_fatou_disc_through_a_vertical_point() {
    let map = monomial(2, 2).unwrap();
    let pot = GreenPotential { map: &map, n: 12 };
    let x = ChartPoint::new(2, vec![C64::from_polar(1.0, 0.9), c(0.4, -0.2)]);
    let fr = local_frame(&pot, &x, 0.004, 4, DEFAULT_RANK_TOL).unwrap();
    let s = tangential_rate(&map, &fr, DEFAULT_EC_CUT, 15).unwrap();
    assert!(s.rate() <= 0.05, "{:?}", s.tail_max);
    let f = fatou_dimension(&map, &x, 15, DEFAULT_FATOU_TOL).unwrap();
    assert_eq!(f.dim, Some(1), "{:?}", f.rates);
    // a transverse line picks up the expanding direction
    let t = transverse_rate(&map, &x, 1, 5, 15, 3).unwrap();
    assert!(t.rate() > 0.5);
}

#[test]
fn frames_below_the_cut_are_refused() {
    let map = monomial(2, 2).unwrap();
    let pot = GreenPotential { map: &map, n: 12 };
    let y = ChartPoint::new(2, vec![C64::from_polar(1.0, 0.7), C64::from_polar(1.0, -1.9)]);
    let fr = local_frame(&pot, &y, 0.004, 4, DEFAULT_RANK_TOL).unwrap();
    assert!(matches!(tangential_rate(&map, &fr, 0.99, 15), Err(ExpansionError::BelowCut { .. })));
    assert!(matches!(tangential_rate(&map, &fr, DEFAULT_EC_CUT, 1), Err(ExpansionError::Horizon)));
}

#[test]
fn summaries_and_tables() {
    let map = monomial(2, 2).unwrap();
    let mut samples = Vec::new();
    for (i, th) in [0.3f64, 1.1, 2.5, 4.0].iter().enumerate() {
        let x = ChartPoint::new(2, vec![C64::from_polar(1.0, *th), C64::from_polar(1.0, 1.7 * th)]);
        let mut s = transverse_rate(&map, &x, 1, 2, 10, i as u64).unwrap();
        s.region = "J2".into();
        samples.push(s);
    }
    let sum = summarize(&samples);
    let r = &sum["transverse/J2"];
    assert_eq!(r.count, 8);
    assert!(r.q05 <= r.q25 && r.q25 <= r.median && r.median <= r.q75 && r.q75 <= r.q95);
    let mut buf = Vec::new();
    write_rates_csv(&mut buf, &samples).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 2 * 10);
    assert!(text.starts_with("sample,region,kind,row,n,chi,tail_max,tail_min\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // every point of the torus expands both directions at log 2
    #[test]
    fn torus_points_have_no_fatou_directions(a in 0.0..std::f64::consts::TAU, b in 0.0..std::f64::consts::TAU, seed in any::<u64>()) {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![C64::from_polar(1.0, a), C64::from_polar(1.0, b)]);
        let f = fatou_dimension(&map, &x, 12, DEFAULT_FATOU_TOL).unwrap();
        prop_assert_eq!(f.dim, Some(0));
        let t = transverse_rate(&map, &x, 1, 3, 12, seed).unwrap();
        for r in t.tail_max.iter().chain(&t.tail_min) {
            prop_assert!((r - 2f64.ln()).abs() < 0.05, "{}", r);
        }
    }

    #[test]
    fn the_bidisc_is_fatou(r1 in 0.0..0.9f64, r2 in 0.0..0.9f64, a in 0.0..6.0f64) {
        let map = monomial(2, 2).unwrap();
        let x = ChartPoint::new(2, vec![C64::from_polar(r1, a), C64::from_polar(r2, 2.0 * a)]);
        prop_assert_eq!(fatou_dimension(&map, &x, 12, DEFAULT_FATOU_TOL).unwrap().dim, Some(2));
    }
}
