//! The ten acceptance criteria at their stated tolerances and time budgets.
//! Each prints one PASS/FAIL line to stderr (uncaptured).

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::grassmann::Form;
use greencur::bounded_geometry::{self as bg, Cuts, CurveGeometry, Line, Projection};
use greencur::cli::{
    self, closed_form_error, cover_fields, expansion_criteria, expansion_stage, geometry_criteria, slab_invariance,
    tail_spread, Criterion, ExpansionConfig, ExperimentConfig, FiltrationConfig, GeometrySummary, GreenConfig, MapInfo,
    MeasureSummary,
};
use greencur::exterior_algebra::*;
use greencur::green_fields::{convergence_table, whole_space_masses, GreenPotential, Lattice};
use greencur::numeric::{binomial, complex_gaussian, random_frame, random_unit, stream, C64};
use greencur::projective_map::catalog::{self, CatalogParams};
use greencur::projective_map::ProjectiveMap;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

fn map(name: &str) -> ProjectiveMap {
    catalog::build(name, &CatalogParams::default()).unwrap()
}

fn pk(c: f64) -> ProjectiveMap {
    catalog::pk_power(2, 2, C64::new(c, 0.0)).unwrap()
}

fn criterion(id: &str, title: &str, budget_s: f64, f: impl FnOnce() -> (bool, String)) -> bool {
    let t = Instant::now();
    let (ok, detail) = f();
    let secs = t.elapsed().as_secs_f64();
    let pass = ok && secs < budget_s;
    let line = format!("{} criterion {id} ({title}): {detail}; {secs:.1} s (budget {budget_s} s)\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn find(cs: &[Criterion], id: &str) -> (bool, String) {
    match cs.iter().find(|c| c.id == id) {
        Some(c) => (c.pass, c.detail.clone()),
        None => (false, format!("criterion {id} was not evaluated")),
    }
}

// ---------------------------------------------------------------------------
// 1, 2: exterior algebra

fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<C64> {
    let g = DMatrix::from_fn(n, n, |_, _| complex_gaussian(rng));
    &g + g.adjoint()
}

fn random_strong(rng: &mut ChaCha8Rng, k: usize, p: usize, kind: Kind, terms: usize) -> MultiVector {
    let ws = (0..terms)
        .map(|_| {
            let f = (0..p).map(|_| random_unit(rng, k)).collect();
            DecomposableWitness::new(f, rng.random::<f64>() + 0.05)
        })
        .collect();
    MultiVector::from_decomposables(k, kind, ws).unwrap()
}

/// Largest r with t^r ≠ 0, on the Grassmann generators.
fn oracle_rank(t: &MultiVector) -> usize {
    let f = Form::from_multivector(t);
    let scale = t.max_abs();
    let mut acc = f.clone();
    let mut r = 1;
    while r < t.k {
        acc = acc.mul(&f);
        if acc.max_abs() < 1e-9 * scale.powi(r as i32 + 1) {
            break;
        }
        r += 1;
    }
    r
}

fn exterior_identities() -> (bool, String) {
    let mut rng = stream(SEED, 1);
    let tol = 1e-12;

    let mut duality: f64 = 0.0;
    for trial in 0..1000 {
        let k = 2 + trial % 3;
        let p = 1 + (trial / 3) % k;
        let t = random_strong(&mut rng, k, p, Kind::Vector, 3);
        let phi = MultiVector::from_coeffs(k, p, Kind::Covector, random_hermitian(&mut rng, binomial(k, p))).unwrap();
        let top = Form::from_multivector(&hodge_dual(&t).unwrap()).mul(&Form::from_multivector(&phi)).to_coeffs(k);
        duality = duality.max((top[(0, 0)] - pairing(&t, &phi).unwrap()).norm());
    }

    let mut trace_mass_bad = 0;
    for trial in 0..1000 {
        let k = 2 + trial % 3;
        let t = random_strong(&mut rng, k, 1, Kind::Vector, 1 + trial % 4);
        let (tr, m) = trace_and_mass(&t).unwrap();
        let f = Form::from_multivector(&t);
        let i = C64::new(0.0, 1.0);
        let o_tr: f64 = (0..k).map(|j| (f.terms[&((1u32 << j) | (1u32 << (k + j)))] / i).re).sum();
        let o_m: f64 = f.terms.values().map(|z| z.norm()).sum();
        let ok = (tr - o_tr).abs() <= tol * o_m && (m - o_m).abs() <= tol * o_m && tr <= m * (1.0 + tol) && m <= k as f64 * tr * (1.0 + tol);
        trace_mass_bad += !ok as usize;
    }

    let mut rank_bad = 0;
    for trial in 0..1000 {
        let k = 2 + trial % 3;
        let r = 1 + (trial / 3) % k;
        let g = DMatrix::from_fn(k, r, |_, _| complex_gaussian(&mut rng));
        let t = MultiVector::from_coeffs(k, 1, Kind::Vector, &g * g.adjoint()).unwrap();
        let info = rank_of_positive(&t, DEFAULT_RANK_TOL).unwrap();
        rank_bad += (info.rank != r || oracle_rank(&t) != r || info.decomposable != (r == 1)) as usize;
    }

    // φ = Σ_{j≥2} i α∧ᾱ ∧ i u_j∧ū_j in a random unitary frame: φ² = 0 and
    // corank k − 1 with α the only divisor
    let mut square: f64 = 0.0;
    let mut corank_bad = 0;
    for trial in 0..1000 {
        let k = 4 + trial % 2;
        let u = random_frame(&mut rng, k, k);
        let alpha = u.column(0).into_owned();
        let ws = (1..k)
            .map(|j| {
                let w = if trial % 2 == 0 { 1.0 } else { rng.random::<f64>() + 0.1 };
                DecomposableWitness::new(vec![alpha.clone(), u.column(j).into_owned()], w)
            })
            .collect();
        let phi = MultiVector::from_decomposables(k, Kind::Covector, ws).unwrap();
        let lib = wedge(&phi, &phi).unwrap().max_abs();
        let f = Form::from_multivector(&phi);
        square = square.max(lib).max(f.mul(&f).max_abs());
        let forms = dividing_forms(&phi, 1e-9).unwrap();
        let ok = corank(&phi, 1e-9).unwrap() == k - 1 && forms.len() == 1 && (forms[0].dotc(&alpha).norm() - 1.0).abs() < 1e-9;
        corank_bad += !ok as usize;
    }
    let pass = duality < tol && trace_mass_bad == 0 && rank_bad == 0 && square < tol && corank_bad == 0;
    (
        pass,
        format!(
            "duality defect {duality:.1e}; trace/mass failures {trace_mass_bad}; rank mismatches {rank_bad}; max |φ²| {square:.1e}, corank failures {corank_bad} (1000 trials each)"
        ),
    )
}

fn caratheodory() -> (bool, String) {
    let mut rng = stream(SEED, 2);
    let fact = |n: usize| (1..=n).map(|x| x as f64).product::<f64>();
    let mut violations = 0;
    let mut errors = 0;
    let mut trials = 0;
    for k in [2usize, 3] {
        let combos: Vec<(usize, usize)> = [(1, 1), (1, 2), (1, 3), (2, 1)].into_iter().filter(|&(q, l)| q * l <= k).collect();
        for trial in 0..1000 {
            let (q, ell) = combos[trial % combos.len()];
            let m = 1 + trial % 5;
            let samples: Vec<MultiVector> = (0..m)
                .map(|_| {
                    let s = random_strong(&mut rng, k, q, Kind::Covector, 1 + trial % 4);
                    let tr = s.trace();
                    s.scaled(1.0 / tr)
                })
                .collect();
            let c = samples
                .iter()
                .map(|s| {
                    let pw = power(s, ell).unwrap();
                    let rest = MultiVector::beta_power(k, k - ell * q, Kind::Covector);
                    wedge(&pw, &rest).unwrap().top_coefficient().re * fact(k - ell * q) / fact(k)
                })
                .fold(f64::INFINITY, f64::min);
            let mut w: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.01).collect();
            let sw: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= sw);
            trials += 1;
            match caratheodory_bound_check(&samples, &w, c, ell) {
                Ok(rep) => violations += !rep.holds as usize,
                Err(_) => errors += 1,
            }
        }
    }
    (violations == 0 && errors == 0, format!("{violations} violations, {errors} errors in {trials} ensembles over k in {{2, 3}}"))
}

// ---------------------------------------------------------------------------
// 3, 4: Green potential and current

fn green_closed_form() -> (bool, String) {
    let center = [C64::new(0.0, 0.0), C64::new(0.5, 0.0)];
    let lat = Lattice::slab(2, &center, 0, 1.5, 256, 0).unwrap();
    let ladder: Vec<usize> = (1..=15).collect();
    let err = closed_form_error(&map("monomial"), &lat, &ladder).unwrap();
    // the monomial tail vanishes, so the constant is fitted on a perturbation
    let tail = convergence_table(&pk(0.3), &lat, 15);
    let spread = tail_spread(&tail, [4, 14]);
    let pass = err <= cli::CLOSED_FORM_TOL && spread.is_some_and(|s| s < cli::TAIL_SPREAD_MAX);
    (pass, format!("monomial |G_n - max log|Z_i|| ≤ {err:.1e} for n = 1..15; pk_power(c=0.3) tail constant max/min {:.4} over n = 4..14", spread.unwrap_or(f64::NAN)))
}

fn current_normalization() -> (bool, String) {
    let cfg = GreenConfig::default();
    // the T∧ω mass needs no self-intersection, and 24 cells per axis keep
    // four maps inside the budget on one core
    let cover_res = 24;
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["monomial", "pk_power", "lattes", "skew"] {
        let m = map(name);
        let info = MapInfo::new(name, &m);
        let masses = whole_space_masses(&GreenPotential { map: &m, n: cfg.n }, cover_res, cfg.stencil, cfg.smoothing_cells, 1).unwrap();
        let (inv, _) = slab_invariance(&m, &cfg).unwrap();
        let tol = if info.monomial { cli::INVARIANCE_MONOMIAL } else { cli::INVARIANCE_CATALOG };
        pass &= (cli::MASS_RANGE[0]..=cli::MASS_RANGE[1]).contains(&masses.t_omega) && inv.residual < tol;
        parts.push(format!("{name}: T∧ω {:.4}, residual {:.4} < {tol}", masses.t_omega, inv.residual));
    }
    (pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 5, 6, 7: expansion

fn only(tangential_j1: bool, tangential_j2: bool, transverse: bool, fatou: bool) -> ExpansionConfig {
    ExpansionConfig { tangential_j1, tangential_j2, transverse, fatou, ..ExpansionConfig::default() }
}

fn tangential_bounds() -> (bool, String) {
    let lattes = map("lattes");
    let (s, _) = expansion_stage(&lattes, None, &only(false, true, false, false), SEED).unwrap();
    let (ok_l, det_l) = find(&expansion_criteria(&MapInfo::new("lattes", &lattes), &s), "5-lattes");
    let mono = map("monomial");
    let cover = cover_fields(&mono, &FiltrationConfig::default()).unwrap();
    let (s, _) = expansion_stage(&mono, Some(&cover), &only(true, false, false, false), SEED).unwrap();
    let (ok_m, det_m) = find(&expansion_criteria(&MapInfo::new("monomial", &mono), &s), "5-monomial");
    (ok_l && ok_m, format!("Lattès: {det_l}; monomial: {det_m}"))
}

fn transverse_bound() -> (bool, String) {
    let m = map("pk_power");
    let cover = cover_fields(&m, &FiltrationConfig::default()).unwrap();
    let (s, _) = expansion_stage(&m, Some(&cover), &only(false, false, true, false), SEED).unwrap();
    let (ok, det) = find(&expansion_criteria(&MapInfo::new("pk_power", &m), &s), "6");
    (ok, format!("{}: {det}", m.name.clone().unwrap_or_default()))
}

fn fatou_dimension() -> (bool, String) {
    let m = map("monomial");
    let cover = cover_fields(&m, &FiltrationConfig::default()).unwrap();
    let (s, _) = expansion_stage(&m, Some(&cover), &only(false, false, false, true), SEED).unwrap();
    find(&expansion_criteria(&MapInfo::new("monomial", &m), &s), "7")
}

// ---------------------------------------------------------------------------
// 8, 9: bounded geometry

const LINE_SEED: u64 = 5;
const PROJECTION_SEED: u64 = 7;

fn empty_geometry() -> GeometrySummary {
    GeometrySummary {
        line_seed: LINE_SEED,
        projection_seed: PROJECTION_SEED,
        cuts: Cuts::default(),
        measure: MeasureSummary { atoms: 0, total: 0.0, negative: 0.0, dropped: 0.0 },
        deficit: Vec::new(),
        fixed_r: Vec::new(),
        h1: Vec::new(),
        curves: Vec::new(),
    }
}

fn volume_deficit() -> (bool, String) {
    let m = map("monomial");
    let line = Line::random(LINE_SEED);
    let projs = Projection::generic(PROJECTION_SEED, &line);
    let rs: Vec<f64> = (3..=7).map(|k| 2f64.powi(-k)).collect();
    let mut g = empty_geometry();
    for n in 1..=5 {
        let geom = CurveGeometry::new(&m, &line, n, &projs).unwrap();
        g.deficit.push(bg::volume_deficit(&geom, &rs, &g.cuts).unwrap());
    }
    let cs: Vec<String> = g.deficit.iter().map(|t| format!("{:.2}", t.c)).collect();
    let (ok, det) = find(&geometry_criteria(&g), "8");
    (ok, format!("{det}; C by n {cs:?}"))
}

fn mass_concentration() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m) in [("monomial", map("monomial")), ("pk_power(c=0.1)", map("pk_power"))] {
        let line = Line::random(LINE_SEED);
        let projs = Projection::generic(PROJECTION_SEED, &line);
        let measure = bg::line_measure(&GreenPotential { map: &m, n: 20 }, &line, 256);
        let mut g = empty_geometry();
        g.measure = MeasureSummary { atoms: measure.atoms.len(), total: measure.total(), negative: measure.negative, dropped: measure.dropped };
        for n in 1..=5 {
            let geom = CurveGeometry::new(&m, &line, n, &projs).unwrap();
            let rows = bg::mass_concentration(&geom, &measure, &[1.0 / 32.0, bg::h1_radius(0.1, n)], &g.cuts).unwrap();
            g.fixed_r.push(rows[0].clone());
            g.h1.push(rows[1].clone());
        }
        let (ok, det) = find(&geometry_criteria(&g), "9");
        pass &= ok;
        parts.push(format!("{name}: {det}"));
    }
    (pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 10: determinism

fn suite_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "kind": "full-report",
            "seed": 7,
            "map": { "name": "pk_power" },
            "green": { "res": 48, "cover_res": 16, "closed_form_ladder": [1, 4], "tail_n_max": 8, "tail_window": [3, 7], "tent_block": 8 },
            "filtration": { "cover_res": 16 },
            "tangent": { "samples": 12 },
            "expansion": {
                "j1_candidates": 30, "j1_samples": 12, "j2_samples": 12,
                "backward": { "chains": 6, "burn_in": 10, "steps": 10, "starts": 4 }
            },
            "bounded_geometry": {
                "n_ladder": [1, 2], "r_ladder": [0.125, 0.0625], "concentration_r": 0.125,
                "measure_res": 32, "curve_max_samples": 20000
            }
        }"#,
        None,
    )
    .unwrap()
}

fn deterministic_files(dir: &Path, m: &cli::Manifest) -> BTreeMap<String, Vec<u8>> {
    m.files.iter().filter(|f| f.deterministic).map(|f| (f.path.clone(), std::fs::read(dir.join(&f.path)).unwrap())).collect()
}

fn determinism(first_run_s: &mut f64) -> (bool, String) {
    let cfg = suite_config();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("threads1"), tmp.path().join("threads3"));
    let t = Instant::now();
    let ma = cli::run(&cfg, &a, Some(1)).unwrap();
    *first_run_s = t.elapsed().as_secs_f64();
    let mb = cli::run(&cfg, &b, Some(3)).unwrap();
    let (fa, fb) = (deterministic_files(&a, &ma), deterministic_files(&b, &mb));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let rep = cli::report(&[a, b]).unwrap();
    let (rep_ok, _) = find(&rep.criteria, "10");
    let pass = fa.len() == fb.len() && differing.is_empty() && rep_ok;
    (pass, format!("{} CSV/JSON files compared between 1 and 3 threads, {} differ", fa.len(), differing.len()))
}

/// `ACCEPTANCE_ONLY=2,4` restricts the run to the listed criteria.
fn selected(id: &str) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim() == id),
        Err(_) => true,
    }
}

fn skip(id: &str) {
    let _ = std::io::stderr().write_all(format!("SKIP criterion {id}\n").as_bytes());
}

#[test]
fn acceptance_criteria() {
    let start = Instant::now();
    type Check = fn() -> (bool, String);
    let checks: [(&str, &str, f64, Check); 9] = [
        ("1", "exterior-algebra identities", 10.0, exterior_identities),
        ("2", "Carathéodory bound", 10.0, caratheodory),
        ("3", "Green closed form and tail", 30.0, green_closed_form),
        ("4", "normalization and invariance", 180.0, current_normalization),
        ("5", "tangential rates", 300.0, tangential_bounds),
        ("6", "transverse rates", 300.0, transverse_bound),
        ("7", "Fatou dimension", 120.0, fatou_dimension),
        ("8", "volume deficit", 300.0, volume_deficit),
        ("9", "mass concentration", 300.0, mass_concentration),
    ];
    let mut failed = Vec::new();
    for (id, title, budget, f) in checks {
        if !selected(id) {
            skip(id);
        } else if !criterion(id, title, budget, f) {
            failed.push(id);
        }
    }
    if selected("10") {
        // the budget covers the overhead over a single run: the second run
        // and the comparison
        let t = Instant::now();
        let mut first = 0.0;
        let d = determinism(&mut first);
        let overhead = t.elapsed().as_secs_f64() - first;
        let pass = d.0 && overhead < 60.0;
        let line = format!(
            "{} criterion 10 (determinism): {}; overhead {overhead:.1} s over one {first:.1} s run (budget 60 s)\n",
            if pass { "PASS" } else { "FAIL" },
            d.1
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !pass {
            failed.push("10");
        }
    } else {
        skip("10");
    }
    let total = start.elapsed().as_secs_f64();
    let _ = std::io::stderr().write_all(format!("acceptance total {total:.1} s (budget 1800 s)\n").as_bytes());
    assert!(failed.is_empty() && total < 1800.0, "failed criteria: {failed:?}");
}
