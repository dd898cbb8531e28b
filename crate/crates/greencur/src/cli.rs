//! Config-driven experiment runs: strict JSON configs, stage runners,
//! content-hashed manifests and merged reports.
//!
//! A run writes CSV/JSON artifacts that are byte-identical for a given
//! config and seed whatever the worker count. Images and the wall-clock
//! fields of `manifest.json` are outside that contract.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounded_geometry::{self as bg, ConcentrationRow, Cuts, DeficitTable};
use crate::expansion::{self, fatou_dimension, summarize, tangential_rate, transverse_rate, RateSample, RegionSummary};
use crate::green_fields::{
    convergence_table, covering_lattices, dd_c, green_potential, invariance_check, potential_grid, self_power,
    whole_space_masses, write_pgm, GreenPotential, HermitianField, InvarianceReport, Lattice, TailRow,
    DEFAULT_SMOOTHING_CELLS, DEFAULT_STENCIL_STEP, DEFAULT_TENT_BLOCK,
};
use crate::numeric::{par_map, C64};
use crate::projective_map::catalog::{self, CatalogParams};
use crate::projective_map::{ChartPoint, ProjectiveMap};
use crate::sampling::{backward_orbits, snap_to_julia, spread_over_support, BackwardParams, SnapParams};
use crate::tangent_fields::{
    default_thresholds, filtration_mask, local_frame, region_name, sample_cover, write_frames_csv, FiltrationMask,
    RegionRankStats, TangentError, TangentFrame, DEFAULT_RANK_TOL,
};

pub const ENV_THREADS: &str = "GREENCUR_THREADS";
pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Schema(String),
    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
    #[error("cannot merge: {0}")]
    Report(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) | CliError::Report(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    fn stage(stage: &str, msg: impl ToString) -> Self {
        CliError::Stage { stage: stage.into(), msg: msg.to_string() }
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Green,
    Filtration,
    Tangent,
    Expansion,
    BoundedGeometry,
    FullReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Green,
    Filtration,
    Tangent,
    Expansion,
    BoundedGeometry,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Green => "green",
            Stage::Filtration => "filtration",
            Stage::Tangent => "tangent",
            Stage::Expansion => "expansion",
            Stage::BoundedGeometry => "bounded-geometry",
        }
    }
}

impl ExperimentKind {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            ExperimentKind::Green => vec![Stage::Green],
            ExperimentKind::Filtration => vec![Stage::Filtration],
            ExperimentKind::Tangent => vec![Stage::Tangent],
            ExperimentKind::Expansion => vec![Stage::Expansion],
            ExperimentKind::BoundedGeometry => vec![Stage::BoundedGeometry],
            ExperimentKind::FullReport => {
                vec![Stage::Green, Stage::Filtration, Stage::Tangent, Stage::Expansion, Stage::BoundedGeometry]
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    /// Catalog name: monomial, pk_power, lattes, skew or custom.
    pub name: String,
    #[serde(default)]
    pub params: CatalogParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub map: MapSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub green: GreenConfig,
    #[serde(default)]
    pub filtration: FiltrationConfig,
    #[serde(default)]
    pub tangent: TangentConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub bounded_geometry: GeometryConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenConfig {
    /// Iterate depth of the potential.
    pub n: usize,
    /// Slab: `res × res` points of coordinate `plane` of `chart` around
    /// `center`, half-width `half_width`.
    pub res: usize,
    pub chart: usize,
    pub center: Vec<[f64; 2]>,
    pub plane: usize,
    pub half_width: f64,
    /// Depths checked against the closed form (monomial maps only).
    pub closed_form_ladder: Vec<usize>,
    pub tail_n_max: usize,
    /// Depths over which the tail constant must stay flat.
    pub tail_window: [usize; 2],
    pub stencil: usize,
    pub tent_block: usize,
    /// Points per axis of each chart cube for the whole-space masses.
    pub cover_res: usize,
    pub smoothing_cells: f64,
}

impl Default for GreenConfig {
    fn default() -> Self {
        GreenConfig {
            n: 12,
            res: 256,
            chart: 2,
            center: vec![[0.0, 0.0], [0.5, 0.0]],
            plane: 0,
            half_width: 1.5,
            closed_form_ladder: (1..=14).collect(),
            tail_n_max: 15,
            tail_window: [4, 14],
            stencil: DEFAULT_STENCIL_STEP,
            tent_block: DEFAULT_TENT_BLOCK,
            cover_res: 32,
            smoothing_cells: DEFAULT_SMOOTHING_CELLS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiltrationConfig {
    pub n: usize,
    pub cover_res: usize,
    pub radius_cells: f64,
    /// Trace thresholds for T and T²; per-chart defaults when absent.
    pub thresholds: Option<Vec<f64>>,
}

impl Default for FiltrationConfig {
    fn default() -> Self {
        FiltrationConfig { n: 12, cover_res: 24, radius_cells: 1.5, thresholds: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub potential_n: usize,
    /// Patch lattice spacing and the largest averaging radius in cells.
    pub spacing: f64,
    pub r_max_cells: usize,
    pub rank_tol: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig { potential_n: 12, spacing: 0.004, r_max_cells: 4, rank_tol: DEFAULT_RANK_TOL }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TangentConfig {
    pub samples: usize,
    pub frame: FrameConfig,
}

impl Default for TangentConfig {
    fn default() -> Self {
        TangentConfig { samples: 100, frame: FrameConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub n_max: usize,
    /// Eigenvalue cut of the tangent frames.
    pub c: f64,
    pub fatou_tol: f64,
    /// Random lines per point for the transverse rate.
    pub subspaces: usize,
    /// Cover samples drawn in J₁∖J₂ before snapping, and how many snapped
    /// points are kept.
    pub j1_candidates: usize,
    pub j1_samples: usize,
    pub j2_samples: usize,
    pub backward: BackwardParams,
    pub snap: SnapParams,
    pub frame: FrameConfig,
    pub tangential_j1: bool,
    pub tangential_j2: bool,
    pub transverse: bool,
    pub fatou: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            n_max: 15,
            c: expansion::DEFAULT_EC_CUT,
            fatou_tol: expansion::DEFAULT_FATOU_TOL,
            subspaces: 5,
            j1_candidates: 300,
            j1_samples: 200,
            j2_samples: 200,
            backward: BackwardParams { chains: 50, burn_in: 20, steps: 100, starts: 6 },
            snap: SnapParams { rho: 0.1, directions: 8, ..SnapParams::default() },
            frame: FrameConfig::default(),
            tangential_j1: true,
            tangential_j2: true,
            transverse: true,
            fatou: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_ladder: Vec<usize>,
    /// Cube sides for the deficit fit; each must divide 2.
    pub r_ladder: Vec<f64>,
    /// Fixed side for the concentration check.
    pub concentration_r: f64,
    /// `r_n = h1_r0 · n⁻²` for the (H_1) statistic.
    pub h1_r0: f64,
    /// Derived from the run seed when absent.
    pub line_seed: Option<u64>,
    pub projection_seed: Option<u64>,
    pub diameter: f64,
    pub area_cut: f64,
    /// Grid per parameter chart and depth of the potential for [L]∧T.
    pub measure_res: usize,
    pub measure_n: usize,
    /// Adaptive sampling of f^n(L): area tolerance and sample budget.
    pub curve_check: bool,
    pub curve_tol: f64,
    pub curve_max_samples: usize,
    /// Side of the label overlay images, 0 for none.
    pub overlay_size: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_ladder: (1..=5).collect(),
            r_ladder: (3..=7).map(|k| 2f64.powi(-k)).collect(),
            concentration_r: 1.0 / 32.0,
            h1_r0: bg::DEFAULT_R0,
            line_seed: None,
            projection_seed: None,
            diameter: bg::DEFAULT_DIAMETER,
            area_cut: bg::DEFAULT_AREA_CUT,
            measure_res: 256,
            measure_n: 20,
            curve_check: true,
            curve_tol: 0.02,
            curve_max_samples: 2_000_000,
            overlay_size: 0,
        }
    }
}

fn nonempty<T>(v: &[T], what: &str) -> Result<(), CliError> {
    if v.is_empty() {
        Err(CliError::Schema(format!("{what} must not be empty")))
    } else {
        Ok(())
    }
}

fn positive(x: f64, what: &str) -> Result<(), CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(CliError::Schema(format!("{what} must be positive, got {x}")))
    }
}

fn at_least(x: usize, min: usize, what: &str) -> Result<(), CliError> {
    if x >= min {
        Ok(())
    } else {
        Err(CliError::Schema(format!("{what} must be at least {min}, got {x}")))
    }
}

impl ExperimentConfig {
    /// Parses strict JSON; `seed` overrides (or supplies) the config seed.
    pub fn from_json(text: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        if let Some(s) = seed {
            match v.as_object_mut() {
                Some(obj) => {
                    obj.insert("seed".into(), Value::from(s));
                }
                None => return Err(CliError::Schema("config must be a JSON object".into())),
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| CliError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, seed)
    }

    pub fn build_map(&self) -> Result<ProjectiveMap, CliError> {
        catalog::build(&self.map.name, &self.map.params).map_err(|e| CliError::Schema(format!("map: {e}")))
    }

    /// Schema-level checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let map = self.build_map()?;
        let stages = self.kind.stages();
        let g = &self.green;
        if stages.contains(&Stage::Green) {
            nonempty(&g.closed_form_ladder, "green.closed_form_ladder")?;
            if g.closed_form_ladder.contains(&0) {
                return Err(CliError::Schema("green.closed_form_ladder needs depths ≥ 1".into()));
            }
            at_least(g.n, 1, "green.n")?;
            at_least(g.res, 4, "green.res")?;
            at_least(g.cover_res, 4, "green.cover_res")?;
            at_least(g.stencil, 1, "green.stencil")?;
            at_least(g.tent_block, 1, "green.tent_block")?;
            at_least(g.tail_n_max, 2, "green.tail_n_max")?;
            positive(g.half_width, "green.half_width")?;
            positive(g.smoothing_cells, "green.smoothing_cells")?;
            if g.center.len() != map.k || g.chart > map.k || g.plane >= map.k {
                return Err(CliError::Schema(format!("green slab does not fit P^{}", map.k)));
            }
            if g.tail_window[0] > g.tail_window[1] || g.tail_window[1] >= g.tail_n_max {
                return Err(CliError::Schema("green.tail_window must lie below tail_n_max".into()));
            }
        }
        let needs_cover = stages.iter().any(|s| matches!(s, Stage::Filtration | Stage::Tangent | Stage::Expansion));
        if (needs_cover || stages.contains(&Stage::BoundedGeometry)) && map.k != 2 {
            return Err(CliError::Schema(format!("filtration, tangent, expansion and geometry stages need k = 2, got {}", map.k)));
        }
        if needs_cover {
            let f = &self.filtration;
            at_least(f.n, 1, "filtration.n")?;
            at_least(f.cover_res, 8, "filtration.cover_res")?;
            positive(f.radius_cells, "filtration.radius_cells")?;
            if let Some(t) = &f.thresholds {
                if t.len() != 2 || t.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(CliError::Schema("filtration.thresholds needs two nonnegative values".into()));
                }
            }
        }
        let frame_ok = |fr: &FrameConfig, what: &str| -> Result<(), CliError> {
            at_least(fr.potential_n, 1, &format!("{what}.potential_n"))?;
            at_least(fr.r_max_cells, 2, &format!("{what}.r_max_cells"))?;
            positive(fr.spacing, &format!("{what}.spacing"))?;
            positive(fr.rank_tol, &format!("{what}.rank_tol"))
        };
        if stages.contains(&Stage::Tangent) {
            at_least(self.tangent.samples, 1, "tangent.samples")?;
            frame_ok(&self.tangent.frame, "tangent.frame")?;
        }
        if stages.contains(&Stage::Expansion) {
            let e = &self.expansion;
            at_least(e.n_max, 2, "expansion.n_max")?;
            at_least(e.subspaces, 1, "expansion.subspaces")?;
            at_least(e.j1_candidates, 1, "expansion.j1_candidates")?;
            at_least(e.j1_samples, 1, "expansion.j1_samples")?;
            at_least(e.j2_samples, 1, "expansion.j2_samples")?;
            at_least(e.backward.chains, 1, "expansion.backward.chains")?;
            at_least(e.backward.steps, 1, "expansion.backward.steps")?;
            at_least(e.backward.starts, 1, "expansion.backward.starts")?;
            positive(e.c, "expansion.c")?;
            positive(e.fatou_tol, "expansion.fatou_tol")?;
            positive(e.snap.rho, "expansion.snap.rho")?;
            frame_ok(&e.frame, "expansion.frame")?;
        }
        if stages.contains(&Stage::BoundedGeometry) {
            let b = &self.bounded_geometry;
            nonempty(&b.n_ladder, "bounded_geometry.n_ladder")?;
            nonempty(&b.r_ladder, "bounded_geometry.r_ladder")?;
            for &r in &b.r_ladder {
                bg::check_cube_size(r).map_err(|e| CliError::Schema(format!("bounded_geometry.r_ladder: {e}")))?;
            }
            bg::check_cube_size(b.concentration_r)
                .map_err(|e| CliError::Schema(format!("bounded_geometry.concentration_r: {e}")))?;
            if let Some(&n) = b.n_ladder.iter().find(|&&n| n > bg::DEFAULT_N_CAP) {
                return Err(CliError::Schema(format!("bounded_geometry.n_ladder: depth {n} exceeds {}", bg::DEFAULT_N_CAP)));
            }
            if !(b.h1_r0 > 0.0 && b.h1_r0 <= 0.5) {
                return Err(CliError::Schema("bounded_geometry.h1_r0 must lie in (0, 0.5]".into()));
            }
            positive(b.diameter, "bounded_geometry.diameter")?;
            positive(b.area_cut, "bounded_geometry.area_cut")?;
            positive(b.curve_tol, "bounded_geometry.curve_tol")?;
            at_least(b.measure_res, 8, "bounded_geometry.measure_res")?;
            at_least(b.measure_n, 1, "bounded_geometry.measure_n")?;
            at_least(b.curve_max_samples, 128, "bounded_geometry.curve_max_samples")?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Independent sub-seeds per purpose (splitmix64 of seed and tag).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TANGENT: u64 = 1;
const TAG_BACKWARD: u64 = 2;
const TAG_SPREAD: u64 = 3;
const TAG_COVER: u64 = 4;
const TAG_SNAP: u64 = 5;
const TAG_TRANSVERSE: u64 = 6;
const TAG_LINE: u64 = 7;
const TAG_PROJECTION: u64 = 8;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Map facts the criteria depend on

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapInfo {
    pub name: String,
    pub k: usize,
    pub d: usize,
    pub monomial: bool,
    pub lattes: bool,
    pub hash: String,
}

impl MapInfo {
    pub fn new(spec_name: &str, map: &ProjectiveMap) -> Self {
        let monomial = map.lift.iter().enumerate().all(|(i, poly)| {
            poly.len() == 1
                && poly[0].coef == C64::new(1.0, 0.0)
                && poly[0].exps.iter().enumerate().all(|(j, &e)| e as usize == if i == j { map.d } else { 0 })
        });
        let lattes = matches!(spec_name, "lattes" | "product_quotient" | "lattes_product_quotient");
        MapInfo {
            name: map.name.clone().unwrap_or_else(|| spec_name.to_string()),
            k: map.k,
            d: map.d,
            monomial,
            lattes,
            hash: sha256_hex(&serde_json::to_vec(&map.to_json()).expect("map serializes")),
        }
    }
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone)]
pub struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
    /// Covered by the byte-identity contract.
    pub deterministic: bool,
}

fn json_output<T: Serialize>(name: &str, v: &T) -> Output {
    let mut bytes = serde_json::to_vec_pretty(v).expect("summary serializes");
    bytes.push(b'\n');
    Output { name: name.into(), bytes, deterministic: true }
}

fn text_output<F: FnOnce(&mut Vec<u8>) -> io::Result<()>>(name: &str, deterministic: bool, f: F) -> Result<Output, String> {
    let mut bytes = Vec::new();
    f(&mut bytes).map_err(|e| e.to_string())?;
    Ok(Output { name: name.into(), bytes, deterministic })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub deterministic: bool,
}

struct Artifacts {
    dir: PathBuf,
    created: bool,
    files: Vec<FileEntry>,
}

impl Artifacts {
    fn open(dir: &Path) -> Result<Self, CliError> {
        let created = !dir.exists();
        if created {
            fs::create_dir_all(dir).map_err(|e| CliError::stage("output", format!("{}: {e}", dir.display())))?;
        } else if !dir.is_dir() {
            return Err(CliError::stage("output", format!("{} is not a directory", dir.display())));
        }
        Ok(Artifacts { dir: dir.to_path_buf(), created, files: Vec::new() })
    }

    fn put(&mut self, stage: &str, o: Output) -> Result<(), CliError> {
        fs::write(self.dir.join(&o.name), &o.bytes).map_err(|e| CliError::stage(stage, format!("{}: {e}", o.name)))?;
        self.files.push(FileEntry {
            path: o.name,
            sha256: sha256_hex(&o.bytes),
            bytes: o.bytes.len() as u64,
            deterministic: o.deterministic,
        });
        Ok(())
    }

    /// Removes everything this run wrote.
    fn discard(&self) {
        for f in &self.files {
            let _ = fs::remove_file(self.dir.join(&f.path));
        }
        let _ = fs::remove_file(self.dir.join(MANIFEST));
        if self.created {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
    pub map_hash: String,
    pub map_name: String,
    pub stages: Vec<String>,
    pub files: Vec<FileEntry>,
    /// Not covered by the byte-identity contract.
    pub threads: usize,
    pub wall_clock_s: f64,
    pub stage_seconds: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// Stage summaries and criteria

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Criterion {
    pub id: String,
    pub title: String,
    pub pass: bool,
    pub detail: String,
}

fn fraction<T>(xs: &[T], ok: impl Fn(&T) -> bool) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().filter(|x| ok(x)).count() as f64 / xs.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreenSummary {
    pub n: usize,
    pub res: usize,
    /// Largest deviation from `max_i log|Z_i|` over the ladder (monomial).
    pub closed_form_error: Option<f64>,
    pub tail: Vec<TailRow>,
    /// max/min of the tail constant over the window; `None` when the tail
    /// vanishes identically.
    pub tail_spread: Option<f64>,
    pub tail_window: [usize; 2],
    pub t_omega: f64,
    pub t_powers: Vec<f64>,
    pub cover_clip: f64,
    pub slab_clip: f64,
    pub invariance: InvarianceReport,
}

pub const CLOSED_FORM_TOL: f64 = 1e-12;
pub const TAIL_SPREAD_MAX: f64 = 1.2;
pub const MASS_RANGE: [f64; 2] = [0.97, 1.03];
pub const INVARIANCE_MONOMIAL: f64 = 0.02;
pub const INVARIANCE_CATALOG: f64 = 0.05;

pub fn green_criteria(info: &MapInfo, g: &GreenSummary) -> Vec<Criterion> {
    let cf_ok = g.closed_form_error.is_none_or(|e| e <= CLOSED_FORM_TOL);
    let tail_ok = g.tail_spread.is_none_or(|s| s < TAIL_SPREAD_MAX);
    let closed = match g.closed_form_error {
        Some(e) => format!("closed-form error {e:.2e}"),
        None => "no closed form for this map".into(),
    };
    let tail = match g.tail_spread {
        Some(s) => format!("tail constant max/min {s:.4} over n in {:?}", g.tail_window),
        None => "tail vanishes identically".into(),
    };
    let inv_tol = if info.monomial { INVARIANCE_MONOMIAL } else { INVARIANCE_CATALOG };
    let mass_ok = (MASS_RANGE[0]..=MASS_RANGE[1]).contains(&g.t_omega);
    vec![
        Criterion {
            id: "3".into(),
            title: "Green potential closed form and geometric tail".into(),
            pass: cf_ok && tail_ok,
            detail: format!("{closed}; {tail}"),
        },
        Criterion {
            id: "4".into(),
            title: "current normalization and invariance".into(),
            pass: mass_ok && g.invariance.residual < inv_tol,
            detail: format!("T∧ω = {:.4}; invariance residual {:.4} (limit {inv_tol})", g.t_omega, g.invariance.residual),
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartFiltration {
    pub chart: usize,
    pub thresholds: Vec<f64>,
    pub off: usize,
    pub j1_minus_j2: usize,
    pub j2: usize,
    pub invalid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiltrationSummary {
    pub n: usize,
    pub cover_res: usize,
    pub charts: Vec<ChartFiltration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TangentSummary {
    pub requested: usize,
    pub computed: usize,
    pub failed: usize,
    pub histogram: Vec<usize>,
    pub decomposable_fraction: f64,
    pub by_region: BTreeMap<String, RegionRankStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionSummary {
    pub k: usize,
    pub d: usize,
    pub n_max: usize,
    pub j1_candidates: usize,
    pub j1_points: usize,
    pub j2_points: usize,
    /// Limsup proxies of the tangential rates where a frame was usable.
    pub tangential_j1: Vec<f64>,
    pub tangential_j2: Vec<f64>,
    pub tangential_j1_skipped: usize,
    pub tangential_j2_skipped: usize,
    /// Tail max per (point, random line).
    pub transverse_j1: Vec<f64>,
    pub transverse_skipped: usize,
    /// One entry per point; `None` when ambiguous or not computable.
    pub fatou_j1: Vec<Option<usize>>,
    pub fatou_j2: Vec<Option<usize>>,
    pub quantiles: BTreeMap<String, RegionSummary>,
}

pub const LATTES_BAND: [f64; 2] = [0.9, 1.1];
pub const LATTES_FRACTION: f64 = 0.8;
pub const MIN_RATE_SAMPLES: usize = 200;
pub const FATOU_TANGENTIAL_MAX: f64 = 0.05;
pub const FATOU_TANGENTIAL_FRACTION: f64 = 0.9;
pub const TRANSVERSE_SLACK: f64 = 0.1;
pub const TRANSVERSE_FRACTION: f64 = 0.9;
pub const FATOU_DIM_FRACTION: f64 = 0.8;

pub fn expansion_criteria(info: &MapInfo, e: &ExpansionSummary) -> Vec<Criterion> {
    let half_log = (e.d as f64).ln() / 2.0;
    let mut out = Vec::new();
    if info.lattes && !e.tangential_j2.is_empty() {
        let (lo, hi) = (LATTES_BAND[0] * half_log, LATTES_BAND[1] * half_log);
        let f = fraction(&e.tangential_j2, |r| (lo..=hi).contains(r));
        out.push(Criterion {
            id: "5-lattes".into(),
            title: "tangential rate equals (log d)/2 on J_k for a Lattès map".into(),
            pass: f >= LATTES_FRACTION && e.tangential_j2.len() >= MIN_RATE_SAMPLES,
            detail: format!("{:.1}% of {} samples in [{lo:.4}, {hi:.4}]", 100.0 * f, e.tangential_j2.len()),
        });
    }
    if info.monomial && !e.tangential_j1.is_empty() {
        let f = fraction(&e.tangential_j1, |r| *r <= FATOU_TANGENTIAL_MAX);
        out.push(Criterion {
            id: "5-monomial".into(),
            title: "tangential rate vanishes on J1 minus J2".into(),
            pass: f >= FATOU_TANGENTIAL_FRACTION,
            detail: format!("{:.1}% of {} samples at most {FATOU_TANGENTIAL_MAX}", 100.0 * f, e.tangential_j1.len()),
        });
    }
    if !info.lattes && !e.transverse_j1.is_empty() {
        let floor = half_log - TRANSVERSE_SLACK;
        let f = fraction(&e.transverse_j1, |r| *r >= floor);
        out.push(Criterion {
            id: "6".into(),
            title: "transverse rate at least (log d)/2 for q = 1".into(),
            pass: f >= TRANSVERSE_FRACTION && e.j1_points >= MIN_RATE_SAMPLES,
            detail: format!("{:.1}% of {} (point, line) pairs at least {floor:.4}; {} points", 100.0 * f, e.transverse_j1.len(), e.j1_points),
        });
    }
    if info.monomial && !e.fatou_j1.is_empty() && !e.fatou_j2.is_empty() {
        let f1 = fraction(&e.fatou_j1, |d| *d == Some(e.k - 1));
        let f2 = fraction(&e.fatou_j2, |d| *d == Some(0));
        out.push(Criterion {
            id: "7".into(),
            title: "Fatou dimension k - q".into(),
            pass: f1 >= FATOU_DIM_FRACTION && f2 >= FATOU_DIM_FRACTION,
            detail: format!("dim {} on {:.1}% of J1 minus J2, dim 0 on {:.1}% of J2", e.k - 1, 100.0 * f1, 100.0 * f2),
        });
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveCheck {
    pub n: usize,
    pub samples: usize,
    /// FS area of f^n(L) over d^n, and the part left unresolved.
    pub area_ratio: f64,
    pub unresolved_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub atoms: usize,
    pub total: f64,
    pub negative: f64,
    pub dropped: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub line_seed: u64,
    pub projection_seed: u64,
    pub cuts: Cuts,
    pub measure: MeasureSummary,
    pub deficit: Vec<DeficitTable>,
    pub fixed_r: Vec<ConcentrationRow>,
    pub h1: Vec<ConcentrationRow>,
    pub curves: Vec<CurveCheck>,
}

pub const SLOPE_RANGE: [f64; 2] = [1.6, 2.4];
pub const DEFICIT_C_FACTOR: f64 = 3.0;
pub const CONCENTRATION_MIN: f64 = 0.9;
pub const H1_FINAL_MIN: f64 = 0.85;

pub fn geometry_criteria(g: &GeometrySummary) -> Vec<Criterion> {
    let mut out = Vec::new();
    let tabs: Vec<&DeficitTable> = g.deficit.iter().filter(|t| t.n >= 1).collect();
    if !tabs.is_empty() {
        let slopes_ok = tabs.iter().all(|t| (SLOPE_RANGE[0]..=SLOPE_RANGE[1]).contains(&t.slope));
        let cs: Vec<f64> = tabs.iter().map(|t| t.c).collect();
        let lo = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cs.iter().cloned().fold(0.0, f64::max);
        let ratio = hi / lo;
        out.push(Criterion {
            id: "8".into(),
            title: "volume deficit is O(r²)".into(),
            pass: slopes_ok && lo > 0.0 && ratio <= DEFICIT_C_FACTOR,
            detail: format!(
                "slopes {:?}; C max/min {ratio:.3}",
                tabs.iter().map(|t| format!("n={}: {:.3}", t.n, t.slope)).collect::<Vec<_>>()
            ),
        });
    }
    let fixed: Vec<&ConcentrationRow> = g.fixed_r.iter().filter(|r| r.n >= 1).collect();
    let h1: Vec<&ConcentrationRow> = g.h1.iter().filter(|r| r.n >= 1).collect();
    if !fixed.is_empty() && !h1.is_empty() {
        let min_fixed = fixed.iter().map(|r| r.fraction).fold(f64::INFINITY, f64::min);
        // fractions are only known up to the mass the discrete measure lost
        let slack = (g.measure.negative + g.measure.dropped) / g.measure.total.max(f64::MIN_POSITIVE);
        let monotone = h1.windows(2).all(|w| w[1].fraction >= w[0].fraction - slack);
        let last = h1.last().map(|r| r.fraction).unwrap_or(0.0);
        out.push(Criterion {
            id: "9".into(),
            title: "mass concentrates on the bounded-geometry part".into(),
            pass: min_fixed >= CONCENTRATION_MIN && monotone && last >= H1_FINAL_MIN,
            detail: format!(
                "min fraction {min_fixed:.6} at r = {}; H1 ladder {:?} (slack {slack:.1e})",
                fixed[0].r,
                h1.iter().map(|r| format!("{:.6}", r.fraction)).collect::<Vec<_>>()
            ),
        });
    }
    out
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sections {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub green: Option<GreenSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filtration: Option<FiltrationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tangent: Option<TangentSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounded_geometry: Option<GeometrySummary>,
}

impl Sections {
    pub fn criteria(&self, info: &MapInfo) -> Vec<Criterion> {
        let mut out = Vec::new();
        if let Some(g) = &self.green {
            out.extend(green_criteria(info, g));
        }
        if let Some(e) = &self.expansion {
            out.extend(expansion_criteria(info, e));
        }
        if let Some(g) = &self.bounded_geometry {
            out.extend(geometry_criteria(g));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub map: &'a MapInfo,
    pub sections: &'a Sections,
    pub criteria: Vec<Criterion>,
}

// ---------------------------------------------------------------------------
// Green stage

/// Largest `|G_n − max_i log|Z_i||` over the lattice and the ladder.
pub fn closed_form_error(map: &ProjectiveMap, lattice: &Lattice, ladder: &[usize]) -> Result<f64, String> {
    let m = map.k + 1;
    let expect: Vec<f64> = (0..lattice.len())
        .map(|i| {
            let z = lattice.point(i).to_hom();
            z[..m].iter().map(|w| w.norm().ln()).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for &n in ladder {
        let g = green_potential(map, lattice, n).map_err(|e| e.to_string())?;
        for (v, e) in g.values.iter().zip(&expect) {
            worst = worst.max((v - e).abs());
        }
    }
    Ok(worst)
}

pub fn tail_spread(tail: &[TailRow], window: [usize; 2]) -> Option<f64> {
    let cs: Vec<f64> = tail.iter().filter(|r| (window[0]..=window[1]).contains(&r.n)).map(|r| r.c).collect();
    // roundoff-level constants mean the tail vanishes
    if cs.iter().all(|&c| c <= CLOSED_FORM_TOL) {
        return None;
    }
    let lo = cs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cs.iter().cloned().fold(0.0, f64::max);
    Some(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

fn slab(cfg: &GreenConfig, margin: usize) -> Result<Lattice, String> {
    let center: Vec<C64> = cfg.center.iter().map(|c| C64::new(c[0], c[1])).collect();
    Lattice::slab(cfg.chart, &center, cfg.plane, cfg.half_width, cfg.res, margin).map_err(|e| e.to_string())
}

/// Invariance residual of the current on the configured slab.
pub fn slab_invariance(map: &ProjectiveMap, cfg: &GreenConfig) -> Result<(InvarianceReport, f64), String> {
    let lat = slab(cfg, cfg.stencil)?;
    let g = green_potential(map, &lat, cfg.n).map_err(|e| e.to_string())?;
    let f = dd_c(&g, cfg.stencil).map_err(|e| e.to_string())?;
    let pot = GreenPotential { map, n: cfg.n };
    Ok((invariance_check(map, &pot, &f, cfg.tent_block), f.clip_fraction()))
}

pub fn green_stage(map: &ProjectiveMap, info: &MapInfo, cfg: &GreenConfig) -> Result<(GreenSummary, Vec<Output>), String> {
    let flat = slab(cfg, 0)?;
    let closed_form_error = if info.monomial { Some(closed_form_error(map, &flat, &cfg.closed_form_ladder)?) } else { None };
    let tail = convergence_table(map, &flat, cfg.tail_n_max);
    let g0 = green_potential(map, &flat, cfg.n).map_err(|e| e.to_string())?;

    let lat = slab(cfg, cfg.stencil)?;
    let g = green_potential(map, &lat, cfg.n).map_err(|e| e.to_string())?;
    let field = dd_c(&g, cfg.stencil).map_err(|e| e.to_string())?;
    let pot = GreenPotential { map, n: cfg.n };
    let invariance = invariance_check(map, &pot, &field, cfg.tent_block);
    if invariance.cells_used == 0 {
        return Err("no usable cells for the invariance check".into());
    }
    let masses = whole_space_masses(&pot, cfg.cover_res, cfg.stencil, cfg.smoothing_cells, map.k).map_err(|e| e.to_string())?;

    let summary = GreenSummary {
        n: cfg.n,
        res: cfg.res,
        closed_form_error,
        tail_spread: tail_spread(&tail, cfg.tail_window),
        tail: tail.clone(),
        tail_window: cfg.tail_window,
        t_omega: masses.t_omega,
        t_powers: masses.powers.clone(),
        cover_clip: masses.clip,
        slab_clip: field.clip_fraction(),
        invariance,
    };

    let mut out = Vec::new();
    let p = 2 * cfg.plane;
    out.push(text_output("potential.csv", true, |w| {
        writeln!(w, "i,j,re,im,g")?;
        for (idx, v) in g0.values.iter().enumerate() {
            let multi = flat.unflatten(idx);
            let x = flat.point(idx);
            writeln!(w, "{},{},{},{},{}", multi[p], multi[p + 1], x.coords[cfg.plane].re, x.coords[cfg.plane].im, v)?;
        }
        Ok(())
    })?);
    out.push(text_output("potential.pgm", false, |w| {
        let (nx, ny) = (flat.dims[p], flat.dims[p + 1]);
        let lo = g0.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut img = Vec::with_capacity(nx * ny);
        let mut multi = vec![0usize; flat.dims.len()];
        for j in 0..ny {
            for i in 0..nx {
                multi[p] = i;
                multi[p + 1] = ny - 1 - j;
                img.push(g0.values[flat.flatten(&multi)] - lo);
            }
        }
        write_pgm(w, nx, ny, &img).map(|_| ())
    })?);
    out.push(text_output("current.pgm", false, |w| {
        let (nx, ny, vals) = field.slice(p, p + 1);
        write_pgm(w, nx, ny, &vals).map(|_| ())
    })?);
    out.push(text_output("convergence.csv", true, |w| {
        writeln!(w, "n,sup_increment,c")?;
        for r in &tail {
            writeln!(w, "{},{:e},{:e}", r.n, r.sup_increment, r.c)?;
        }
        Ok(())
    })?);
    out.push(json_output("current.json", &field.sidecar(cfg.n)));
    Ok((summary, out))
}

// ---------------------------------------------------------------------------
// Filtration and tangent stages

/// T and T² on the chart cover with the filtration masks.
pub struct CoverFields {
    pub t1: Vec<HermitianField>,
    pub t2: Vec<HermitianField>,
    pub masks: Vec<FiltrationMask>,
}

impl CoverFields {
    pub fn refs(&self) -> Vec<&HermitianField> {
        self.t1.iter().collect()
    }

    pub fn level_at(&self, x: &ChartPoint) -> Option<usize> {
        self.masks.iter().find(|m| m.lattice.chart == x.chart).and_then(|m| m.level_at(x))
    }
}

pub fn cover_fields(map: &ProjectiveMap, cfg: &FiltrationConfig) -> Result<CoverFields, String> {
    let margin = DEFAULT_STENCIL_STEP + DEFAULT_SMOOTHING_CELLS as usize + 1;
    let pot = GreenPotential { map, n: cfg.n };
    let mut cover = CoverFields { t1: Vec::new(), t2: Vec::new(), masks: Vec::new() };
    for lat in covering_lattices(map.k, cfg.cover_res, margin) {
        let t1 = dd_c(&potential_grid(&pot, &lat), DEFAULT_STENCIL_STEP).map_err(|e| e.to_string())?;
        let t2 = self_power(&t1, 2, DEFAULT_SMOOTHING_CELLS * lat.spacing).map_err(|e| e.to_string())?;
        let th = cfg.thresholds.clone().unwrap_or_else(|| default_thresholds(&[&t1, &t2]));
        let mask = filtration_mask(&[&t1, &t2], &th, cfg.radius_cells).map_err(|e| e.to_string())?;
        cover.t1.push(t1);
        cover.t2.push(t2);
        cover.masks.push(mask);
    }
    Ok(cover)
}

pub fn filtration_stage(cover: &CoverFields, cfg: &FiltrationConfig) -> Result<(FiltrationSummary, Vec<Output>), String> {
    let charts = cover
        .masks
        .iter()
        .map(|m| ChartFiltration {
            chart: m.lattice.chart,
            thresholds: m.thresholds.clone(),
            off: m.count(0),
            j1_minus_j2: m.count(1),
            j2: m.count(2),
            invalid: m.levels.iter().filter(|&&l| l == FiltrationMask::INVALID).count(),
        })
        .collect();
    let mut out = Vec::new();
    for m in &cover.masks {
        out.push(text_output(&format!("filtration_chart{}.pgm", m.lattice.chart), false, |w| m.write_pgm(w, 0, 1).map(|_| ()))?);
    }
    Ok((FiltrationSummary { n: cfg.n, cover_res: cfg.cover_res, charts }, out))
}

fn frame_at(pot: &GreenPotential, x: &ChartPoint, fr: &FrameConfig) -> Option<TangentFrame> {
    local_frame(pot, x, fr.spacing, fr.r_max_cells, fr.rank_tol).ok()
}

pub fn tangent_stage(
    map: &ProjectiveMap,
    cover: &CoverFields,
    cfg: &TangentConfig,
    seed: u64,
) -> Result<(TangentSummary, Vec<Output>), String> {
    let pts = sample_cover(&cover.refs(), cfg.samples, sub_seed(seed, TAG_TANGENT), |fi, c| cover.masks[fi].in_j(c, 1))
        .map_err(|e| e.to_string())?;
    let pot = GreenPotential { map, n: cfg.frame.potential_n };
    let frames = par_map(&pts, |_, x| frame_at(&pot, x, &cfg.frame));
    let k = map.k;
    let mut s = TangentSummary {
        requested: pts.len(),
        computed: 0,
        failed: 0,
        histogram: vec![0; k + 1],
        decomposable_fraction: 0.0,
        by_region: BTreeMap::new(),
    };
    let mut dec = 0usize;
    let mut region_dec: BTreeMap<String, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for (i, (x, f)) in pts.iter().zip(frames).enumerate() {
        let Some(f) = f else {
            s.failed += 1;
            continue;
        };
        s.computed += 1;
        s.histogram[f.rank] += 1;
        dec += f.decomposable as usize;
        let name = region_name(cover.level_at(x), k);
        let r = s.by_region.entry(name.clone()).or_insert_with(|| RegionRankStats { histogram: vec![0; k + 1], ..Default::default() });
        r.count += 1;
        r.histogram[f.rank] += 1;
        *region_dec.entry(name).or_default() += f.decomposable as usize;
        kept.push((i, f));
    }
    if s.computed == 0 {
        return Err("no tangent frame converged".into());
    }
    s.decomposable_fraction = dec as f64 / s.computed as f64;
    for (name, r) in s.by_region.iter_mut() {
        r.decomposable_fraction = region_dec[name] as f64 / r.count as f64;
    }
    let out = vec![text_output("frames.csv", true, |w| write_frames_csv(w, k, &kept))?];
    Ok((s, out))
}

// ---------------------------------------------------------------------------
// Expansion stage

/// Points of J_k: backward orbits spread evenly over their support.
pub fn j2_points(map: &ProjectiveMap, cfg: &ExpansionConfig, seed: u64) -> Vec<ChartPoint> {
    let orbit = backward_orbits(map, &cfg.backward, sub_seed(seed, TAG_BACKWARD));
    spread_over_support(&orbit, map.k, cfg.j2_samples, sub_seed(seed, TAG_SPREAD))
}

/// Points of J₁∖J₂: trace-measure samples of that region snapped onto J₁.
/// Empty when the region carries no mass (J₁ = J₂, as for Lattès maps).
pub fn j1_points(map: &ProjectiveMap, cover: &CoverFields, cfg: &ExpansionConfig, seed: u64) -> Result<Vec<ChartPoint>, String> {
    let cand = match sample_cover(&cover.refs(), cfg.j1_candidates, sub_seed(seed, TAG_COVER), |fi, c| cover.masks[fi].levels[c] == 1) {
        Ok(c) => c,
        Err(TangentError::Empty) => return Ok(Vec::new()),
        Err(e) => return Err(e.to_string()),
    };
    let snap_seed = sub_seed(seed, TAG_SNAP);
    let snapped = par_map(&cand, |i, p| snap_to_julia(map, p, &cfg.snap, sub_seed(snap_seed, i as u64)));
    Ok(snapped.into_iter().flatten().map(|s| s.point).take(cfg.j1_samples).collect())
}

struct PointRates {
    tangential: Option<RateSample>,
    transverse: Option<RateSample>,
    fatou: Option<usize>,
}

fn point_rates(
    map: &ProjectiveMap,
    pot: &GreenPotential,
    x: &ChartPoint,
    cfg: &ExpansionConfig,
    (tangential, transverse): (bool, bool),
    seed: u64,
) -> PointRates {
    let tangential = if tangential {
        frame_at(pot, x, &cfg.frame).and_then(|f| tangential_rate(map, &f, cfg.c, cfg.n_max).ok())
    } else {
        None
    };
    let transverse = if transverse { transverse_rate(map, x, 1, cfg.subspaces, cfg.n_max, seed).ok() } else { None };
    let fatou = if cfg.fatou { fatou_dimension(map, x, cfg.n_max, cfg.fatou_tol).ok().and_then(|f| f.dim) } else { None };
    PointRates { tangential, transverse, fatou }
}

pub fn expansion_stage(
    map: &ProjectiveMap,
    cover: Option<&CoverFields>,
    cfg: &ExpansionConfig,
    seed: u64,
) -> Result<(ExpansionSummary, Vec<Output>), String> {
    let pot = GreenPotential { map, n: cfg.frame.potential_n };
    let k = map.k;
    let j2_name = region_name(Some(k), k);
    let j1_name = region_name(Some(1), k);
    let mut samples: Vec<RateSample> = Vec::new();
    let mut s = ExpansionSummary {
        k,
        d: map.d,
        n_max: cfg.n_max,
        j1_candidates: 0,
        j1_points: 0,
        j2_points: 0,
        tangential_j1: Vec::new(),
        tangential_j2: Vec::new(),
        tangential_j1_skipped: 0,
        tangential_j2_skipped: 0,
        transverse_j1: Vec::new(),
        transverse_skipped: 0,
        fatou_j1: Vec::new(),
        fatou_j2: Vec::new(),
        quantiles: BTreeMap::new(),
    };
    let tr_seed = sub_seed(seed, TAG_TRANSVERSE);

    if cfg.tangential_j2 || cfg.fatou {
        let pts = j2_points(map, cfg, seed);
        if pts.is_empty() {
            return Err("backward iteration produced no points".into());
        }
        s.j2_points = pts.len();
        let rates = par_map(&pts, |_, x| point_rates(map, &pot, x, cfg, (cfg.tangential_j2, false), 0));
        for r in rates {
            if cfg.tangential_j2 {
                match r.tangential {
                    Some(mut t) => {
                        t.region = j2_name.clone();
                        s.tangential_j2.push(t.rate());
                        samples.push(t);
                    }
                    None => s.tangential_j2_skipped += 1,
                }
            }
            if cfg.fatou {
                s.fatou_j2.push(r.fatou);
            }
        }
    }

    if cfg.tangential_j1 || cfg.transverse || cfg.fatou {
        let cover = cover.ok_or("J1 sampling needs the filtration fields")?;
        let pts = j1_points(map, cover, cfg, seed)?;
        s.j1_candidates = cfg.j1_candidates;
        s.j1_points = pts.len();
        let rates = par_map(&pts, |i, x| point_rates(map, &pot, x, cfg, (cfg.tangential_j1, cfg.transverse), sub_seed(tr_seed, i as u64)));
        for r in rates {
            if cfg.tangential_j1 {
                match r.tangential {
                    Some(mut t) => {
                        t.region = j1_name.clone();
                        s.tangential_j1.push(t.rate());
                        samples.push(t);
                    }
                    None => s.tangential_j1_skipped += 1,
                }
            }
            if cfg.transverse {
                match r.transverse {
                    Some(mut t) => {
                        t.region = j1_name.clone();
                        s.transverse_j1.extend(t.tail_max.iter().copied());
                        samples.push(t);
                    }
                    None => s.transverse_skipped += 1,
                }
            }
            if cfg.fatou {
                s.fatou_j1.push(r.fatou);
            }
        }
    }
    if s.j1_points + s.j2_points == 0 {
        return Err("no sample points in J1 or J2".into());
    }
    s.quantiles = summarize(&samples);
    let out = vec![text_output("rates.csv", true, |w| expansion::write_rates_csv(w, &samples))?];
    Ok((s, out))
}

// ---------------------------------------------------------------------------
// Bounded-geometry stage

pub fn geometry_stage(map: &ProjectiveMap, cfg: &GeometryConfig, seed: u64) -> Result<(GeometrySummary, Vec<Output>), String> {
    let line_seed = cfg.line_seed.unwrap_or_else(|| sub_seed(seed, TAG_LINE));
    let projection_seed = cfg.projection_seed.unwrap_or_else(|| sub_seed(seed, TAG_PROJECTION));
    let line = bg::Line::random(line_seed);
    let projs = bg::Projection::generic(projection_seed, &line);
    bg::check_general_position(&projs).map_err(|e| e.to_string())?;
    let cuts = Cuts { diameter: cfg.diameter, area: cfg.area_cut };
    let measure = bg::line_measure(&GreenPotential { map, n: cfg.measure_n }, &line, cfg.measure_res);
    if measure.atoms.is_empty() {
        return Err("[L]∧T has no resolved mass".into());
    }
    let mut s = GeometrySummary {
        line_seed,
        projection_seed,
        cuts,
        measure: MeasureSummary { atoms: measure.atoms.len(), total: measure.total(), negative: measure.negative, dropped: measure.dropped },
        deficit: Vec::new(),
        fixed_r: Vec::new(),
        h1: Vec::new(),
        curves: Vec::new(),
    };
    let mut out = Vec::new();
    for &n in &cfg.n_ladder {
        let geom = bg::CurveGeometry::new(map, &line, n, &projs).map_err(|e| format!("n = {n}: {e}"))?;
        s.deficit.push(bg::volume_deficit(&geom, &cfg.r_ladder, &cuts).map_err(|e| format!("n = {n}: {e}"))?);
        let rows = bg::mass_concentration(&geom, &measure, &[cfg.concentration_r, bg::h1_radius(cfg.h1_r0, n)], &cuts)
            .map_err(|e| format!("n = {n}: {e}"))?;
        s.fixed_r.push(rows[0].clone());
        s.h1.push(rows[1].clone());
        let table = bg::classify_components(&geom, cfg.concentration_r, &cuts).map_err(|e| e.to_string())?;
        out.push(text_output(&format!("components_n{n}.csv"), true, |w| table.write_csv(w))?);
        if cfg.curve_check {
            let mut curve = bg::iterate_line(map, &line, n, cfg.curve_tol, cfg.curve_max_samples).map_err(|e| e.to_string())?;
            let deg = geom.degree() as f64;
            s.curves.push(CurveCheck {
                n,
                samples: curve.params.len(),
                area_ratio: curve.total_area() / deg,
                unresolved_ratio: curve.unresolved_area() / deg,
            });
            if cfg.overlay_size > 0 {
                bg::label_samples(&geom, &mut curve, cfg.concentration_r, true, &cuts).map_err(|e| e.to_string())?;
                out.push(text_output(&format!("overlay_n{n}.ppm"), false, |w| {
                    bg::write_overlay_ppm(w, &geom, &curve, 0, cfg.overlay_size)
                })?);
            }
        }
    }
    out.push(text_output("deficit.csv", true, |w| bg::write_deficit_csv(w, &s.deficit))?);
    out.push(text_output("concentration.csv", true, |w| {
        writeln!(w, "n,r,ladder,fraction,union_fraction,pushed_mass")?;
        for (ladder, rows) in [("fixed", &s.fixed_r), ("h1", &s.h1)] {
            for r in rows {
                writeln!(w, "{},{},{ladder},{},{},{}", r.n, r.r, r.fraction, r.union_fraction, r.pushed_mass)?;
            }
        }
        Ok(())
    })?);
    Ok((s, out))
}

// ---------------------------------------------------------------------------
// Runs

fn run_stages(
    cfg: &ExperimentConfig,
    map: &ProjectiveMap,
    info: &MapInfo,
    art: &mut Artifacts,
) -> Result<(Sections, BTreeMap<String, f64>), CliError> {
    let mut sections = Sections::default();
    let mut times = BTreeMap::new();
    let mut cover: Option<CoverFields> = None;
    let e = &cfg.expansion;
    for stage in cfg.kind.stages() {
        let t = Instant::now();
        let name = stage.name();
        let err = |m: String| CliError::stage(name, m);
        let needs_cover = match stage {
            Stage::Filtration | Stage::Tangent => true,
            Stage::Expansion => e.tangential_j1 || e.transverse || e.fatou,
            _ => false,
        };
        if needs_cover && cover.is_none() {
            cover = Some(cover_fields(map, &cfg.filtration).map_err(err)?);
        }
        let outputs = match stage {
            Stage::Green => {
                let (s, o) = green_stage(map, info, &cfg.green).map_err(err)?;
                sections.green = Some(s);
                o
            }
            Stage::Filtration => {
                let (s, o) = filtration_stage(cover.as_ref().expect("cover built"), &cfg.filtration).map_err(err)?;
                sections.filtration = Some(s);
                o
            }
            Stage::Tangent => {
                let (s, o) = tangent_stage(map, cover.as_ref().expect("cover built"), &cfg.tangent, cfg.seed).map_err(err)?;
                sections.tangent = Some(s);
                o
            }
            Stage::Expansion => {
                let (s, o) = expansion_stage(map, cover.as_ref(), e, cfg.seed).map_err(err)?;
                sections.expansion = Some(s);
                o
            }
            Stage::BoundedGeometry => {
                let (s, o) = geometry_stage(map, &cfg.bounded_geometry, cfg.seed).map_err(err)?;
                sections.bounded_geometry = Some(s);
                o
            }
        };
        for o in outputs {
            art.put(name, o)?;
        }
        times.insert(name.to_string(), t.elapsed().as_secs_f64());
    }
    Ok((sections, times))
}

/// Runs every stage of the config into `out`. On failure the files written
/// so far are removed.
pub fn run(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let map = cfg.build_map()?;
    let info = MapInfo::new(&cfg.map.name, &map);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::stage("threads", e))?;
    let mut art = Artifacts::open(out)?;
    let t0 = Instant::now();
    let result = pool.install(|| {
        let (sections, times) = run_stages(cfg, &map, &info, &mut art)?;
        let summary = RunSummary { kind: cfg.kind, seed: cfg.seed, map: &info, sections: &sections, criteria: sections.criteria(&info) };
        art.put("output", json_output("config.json", cfg))?;
        art.put("output", json_output(SUMMARY, &summary))?;
        Ok::<_, CliError>(times)
    });
    let result = result.and_then(|stage_seconds| {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: cfg.kind,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            map_hash: info.hash.clone(),
            map_name: info.name.clone(),
            stages: cfg.kind.stages().iter().map(|s| s.name().to_string()).collect(),
            files: art.files.clone(),
            threads: pool.current_num_threads(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
            stage_seconds,
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(art.dir.join(MANIFEST), text).map_err(|e| CliError::stage("output", e))?;
        Ok(manifest)
    });
    if result.is_err() {
        art.discard();
    }
    result
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunRef {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
}

impl PartialOrd for ExperimentKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExperimentKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub map_hash: String,
    pub map_name: String,
    pub runs: Vec<RunRef>,
    /// Distinct stage summaries by section name.
    pub sections: BTreeMap<String, Vec<Value>>,
    pub criteria: Vec<Criterion>,
}

impl PartialEq for Criterion {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id && self.title == o.title && self.pass == o.pass && self.detail == o.detail
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read(path).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
}

/// Loads a run directory, checking every listed file against its hash.
pub fn load_run(dir: &Path) -> Result<(Manifest, Value), CliError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path)).map_err(|e| CliError::Report(format!("{}: {e}", f.path)))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(CliError::Report(format!("{} in {} does not match its manifest hash", f.path, dir.display())));
        }
    }
    let summary: Value = read_json(&dir.join(SUMMARY))?;
    Ok((manifest, summary))
}

/// Merges run directories of one map. Runs sharing a config are compared
/// file by file for the determinism criterion.
pub fn report(dirs: &[PathBuf]) -> Result<Report, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Report("no run directories given".into()));
    }
    let mut loaded = Vec::new();
    for d in dirs {
        loaded.push(load_run(d)?);
    }
    let (first, _) = &loaded[0];
    let mut rep = Report {
        map_hash: first.map_hash.clone(),
        map_name: first.map_name.clone(),
        runs: Vec::new(),
        sections: BTreeMap::new(),
        criteria: Vec::new(),
    };
    let mut groups: BTreeMap<String, Vec<&Manifest>> = BTreeMap::new();
    for (m, summary) in &loaded {
        if m.map_hash != rep.map_hash {
            return Err(CliError::Report(format!("map {} differs from {}", m.map_name, rep.map_name)));
        }
        let r = RunRef { kind: m.kind, seed: m.seed, config_hash: m.config_hash.clone() };
        if !rep.runs.contains(&r) {
            rep.runs.push(r);
        }
        groups.entry(m.config_hash.clone()).or_default().push(m);
        if let Some(obj) = summary.get("sections").and_then(|s| s.as_object()) {
            for (name, v) in obj {
                let e = rep.sections.entry(name.clone()).or_default();
                if !e.contains(v) {
                    e.push(v.clone());
                }
            }
        }
        let crits: Vec<Criterion> = summary
            .get("criteria")
            .map(|c| serde_json::from_value(c.clone()))
            .transpose()
            .map_err(|e| CliError::Report(format!("criteria table: {e}")))?
            .unwrap_or_default();
        for c in crits {
            if !rep.criteria.contains(&c) {
                rep.criteria.push(c);
            }
        }
    }
    for (hash, ms) in groups.iter().filter(|(_, ms)| ms.len() > 1) {
        let files = |m: &Manifest| -> BTreeSet<(String, String)> {
            m.files.iter().filter(|f| f.deterministic).map(|f| (f.path.clone(), f.sha256.clone())).collect()
        };
        let base = files(ms[0]);
        let same = ms.iter().all(|m| files(m) == base);
        let threads: BTreeSet<usize> = ms.iter().map(|m| m.threads).collect();
        let c = Criterion {
            id: "10".into(),
            title: "byte-identical CSV/JSON across worker counts".into(),
            pass: same,
            detail: format!("config {}: {} files over thread counts {threads:?}", &hash[..12], base.len()),
        };
        if !rep.criteria.contains(&c) {
            rep.criteria.push(c);
        }
    }
    rep.runs.sort();
    rep.criteria.sort_by(|a, b| a.id.cmp(&b.id).then(a.detail.cmp(&b.detail)));
    Ok(rep)
}

impl Report {
    pub fn text(&self) -> String {
        let mut s = format!("map {} ({})\n", self.map_name, &self.map_hash[..12]);
        for r in &self.runs {
            s += &format!("run {:?} seed {} config {}\n", r.kind, r.seed, &r.config_hash[..12]);
        }
        for name in self.sections.keys() {
            s += &format!("section {name}\n");
        }
        for c in &self.criteria {
            s += &format!("criterion {} {}: {}. {}\n", c.id, if c.pass { "PASS" } else { "FAIL" }, c.title, c.detail);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let io = |e: io::Error| CliError::stage("report", e);
        fs::create_dir_all(dir).map_err(io)?;
        let mut json = serde_json::to_vec_pretty(self).expect("report serializes");
        json.push(b'\n');
        fs::write(dir.join("report.json"), json).map_err(io)?;
        fs::write(dir.join("report.txt"), self.text()).map_err(io)
    }
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "greencur", version, about = "Green currents, tangent fields and expansion rates of endomorphisms of P^k")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment config and write its artifacts
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides output_dir in the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; falls back to GREENCUR_THREADS
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge run directories of one map into a report
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write report.json and report.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(ENV_THREADS) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Schema(format!("{ENV_THREADS}={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, out, threads, seed } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            let threads = thread_count(threads)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| CliError::Schema("no output directory: pass --out or set output_dir".into()))?;
            let m = run(&cfg, &out, threads)?;
            println!("wrote {} files to {} in {:.1} s", m.files.len() + 1, out.display(), m.wall_clock_s);
            Ok(())
        }
        Command::Report { dirs, out } => {
            let rep = report(&dirs)?;
            if let Some(dir) = out {
                rep.write(&dir)?;
            }
            print!("{}", rep.text());
            Ok(())
        }
        Command::ValidateConfig { config, seed } => {
            let cfg = ExperimentConfig::load(&config, seed)?;
            println!("ok: {:?} on {} with seed {} (config {})", cfg.kind, cfg.map.name, cfg.seed, &cfg.hash()[..12]);
            Ok(())
        }
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(args.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("greencur: {e}");
            e.exit_code()
        }
    }
}
