//! Strain-path generation for dataset design. Proportional families scale a
//! unit direction by a scalar loading function (monotonic ramps,
//! unload-reload zigzags, fine-stepped ramps); the non-proportional family
//! walks each strain component along an independent Gaussian-process sample.
//! Every generator is a pure function of its spec and a seed.

pub mod files;
pub mod gp;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{StrainVec, StressVec};
use crate::train::TrainingCurve;

pub use gp::{gp_walk, se_kernel, GpSpec, GP_JITTER};

#[derive(Debug, Error)]
pub enum PathGenError {
    #[error("invalid path spec: {0}")]
    Config(String),
    #[error(
        "conditioning kernel at step {step} is not positive definite even after jitter; \
         lengthscale or variance are out of range"
    )]
    GpCholesky { step: usize },
    #[error("dataset file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
}

/// The path families making up the experiment design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// Monotonic ramp along one of the fixed canonical directions.
    KnownRamp,
    /// Monotonic ramp along a random unit direction.
    RandomRamp,
    /// Ramp, partial unload, reload past the old peak.
    UnloadReload,
    /// Later peak and a much deeper unload than [`CurveKind::UnloadReload`].
    DeepUnload,
    /// Tenth-size steps over ten times as many increments, same final point
    /// as [`CurveKind::RandomRamp`].
    FineRamp,
    /// Non-proportional Gaussian-process random walk.
    GpWalk,
}

impl CurveKind {
    pub fn is_proportional(self) -> bool {
        !matches!(self, CurveKind::GpWalk)
    }
}

/// Breakpoints of a piecewise-linear ramp-unload-reload loading function,
/// in step units relative to the curve's step count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnloadReloadShape {
    /// Step at which the initial ramp peaks.
    pub peak_step: usize,
    /// Step at which unloading bottoms out.
    pub trough_step: usize,
    /// Loading value at the trough as a fraction of the peak value.
    pub trough_fraction: f64,
}

impl UnloadReloadShape {
    fn validate(&self, n_steps: usize) -> Result<(), PathGenError> {
        if !(0 < self.peak_step && self.peak_step < self.trough_step && self.trough_step < n_steps)
        {
            return Err(PathGenError::Config(format!(
                "breakpoints must satisfy 0 < peak < trough < {n_steps}, got peak={} trough={}",
                self.peak_step, self.trough_step
            )));
        }
        if !(0.0..1.0).contains(&self.trough_fraction) {
            return Err(PathGenError::Config(format!(
                "trough fraction must lie in [0, 1), got {}",
                self.trough_fraction
            )));
        }
        Ok(())
    }
}

/// Shared scalar parameters of the proportional families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    /// Number of increments; paths also carry the zero state at step 0.
    pub n_steps: usize,
    /// Strain increment per step along the direction vector.
    pub step_size: f64,
    pub unload_reload: UnloadReloadShape,
    pub deep_unload: UnloadReloadShape,
    /// Step-size divisor of the fine-ramp family.
    pub fine_divisor: f64,
    /// Step count of the fine-ramp family.
    pub fine_steps: usize,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            n_steps: 60,
            step_size: 1e-4,
            unload_reload: UnloadReloadShape {
                peak_step: 30,
                trough_step: 45,
                trough_fraction: 0.4,
            },
            deep_unload: UnloadReloadShape {
                peak_step: 40,
                trough_step: 50,
                trough_fraction: 0.2,
            },
            fine_divisor: 10.0,
            fine_steps: 600,
        }
    }
}

impl CurveParams {
    pub fn validate(&self) -> Result<(), PathGenError> {
        self.validate_sizes()?;
        self.unload_reload.validate(self.n_steps)?;
        self.deep_unload.validate(self.n_steps)
    }

    fn validate_sizes(&self) -> Result<(), PathGenError> {
        if self.n_steps == 0 || self.fine_steps == 0 {
            return Err(PathGenError::Config("step counts must be positive".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.step_size) || !positive(self.fine_divisor) {
            return Err(PathGenError::Config("step size and divisor must be positive".into()));
        }
        Ok(())
    }

    /// Number of increments a path of this kind takes.
    pub fn total_steps(&self, kind: CurveKind) -> usize {
        match kind {
            CurveKind::FineRamp => self.fine_steps,
            _ => self.n_steps,
        }
    }
}

/// Descriptive metadata carried by every generated path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMeta {
    pub kind: CurveKind,
    pub seed: u64,
    pub n_steps: usize,
    /// Per-step loading increment; absent for the non-proportional family.
    pub step_size: Option<f64>,
    /// Unit loading direction; absent for the non-proportional family.
    pub direction: Option<StrainVec>,
}

/// A macroscopic strain history. `strains[t]` is the strain after t
/// increments; `strains[0]` is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadPath {
    pub meta: PathMeta,
    pub strains: Vec<StrainVec>,
}

/// The fixed set of canonical loading directions: six uniaxial, four biaxial
/// in the normal components, and all eight sign patterns mixing both normals
/// with shear. All unit vectors.
pub fn known_directions() -> Vec<StrainVec> {
    let mut dirs = Vec::with_capacity(18);
    for s in [1.0, -1.0] {
        dirs.push(Vector3::new(s, 0.0, 0.0));
        dirs.push(Vector3::new(0.0, s, 0.0));
        dirs.push(Vector3::new(0.0, 0.0, s));
    }
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            dirs.push(Vector3::new(sx, sy, 0.0).normalize());
        }
    }
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                dirs.push(Vector3::new(sx, sy, sz).normalize());
            }
        }
    }
    dirs
}

/// Uniform direction on the sphere: normalized isotropic Gaussian draw.
pub fn random_direction(seed: u64) -> StrainVec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Scalar loading value after `t` increments for a proportional family.
pub fn loading_function(kind: CurveKind, params: &CurveParams, t: usize) -> f64 {
    debug_assert!(t <= params.total_steps(kind), "step {t} beyond the path length");
    match kind {
        CurveKind::KnownRamp | CurveKind::RandomRamp => t as f64 * params.step_size,
        CurveKind::UnloadReload => piecewise(&params.unload_reload, params, t),
        CurveKind::DeepUnload => piecewise(&params.deep_unload, params, t),
        CurveKind::FineRamp => t as f64 * params.step_size / params.fine_divisor,
        CurveKind::GpWalk => panic!("the loading function only applies to proportional families"),
    }
}

fn piecewise(shape: &UnloadReloadShape, params: &CurveParams, t: usize) -> f64 {
    let peak = shape.peak_step as f64 * params.step_size;
    let trough = shape.trough_fraction * peak;
    // Reload overshoots the old peak, ending where a plain ramp would.
    let final_value = params.n_steps as f64 * params.step_size;
    if t <= shape.peak_step {
        t as f64 * params.step_size
    } else if t <= shape.trough_step {
        let frac = (t - shape.peak_step) as f64 / (shape.trough_step - shape.peak_step) as f64;
        peak + frac * (trough - peak)
    } else {
        let frac = (t - shape.trough_step) as f64 / (params.n_steps - shape.trough_step) as f64;
        trough + frac * (final_value - trough)
    }
}

/// Builds one proportional path: `strains[t] = loading(t) * direction`.
pub fn proportional_path(
    kind: CurveKind,
    params: &CurveParams,
    direction: &StrainVec,
    seed: u64,
) -> LoadPath {
    let total = params.total_steps(kind);
    let strains = (0..=total)
        .map(|t| *direction * loading_function(kind, params, t))
        .collect();
    LoadPath {
        meta: PathMeta {
            kind,
            seed,
            n_steps: total,
            step_size: Some(params.step_size),
            direction: Some(*direction),
        },
        strains,
    }
}

/// How many paths of each family a dataset contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveCounts {
    pub known_ramp: usize,
    pub random_ramp: usize,
    pub unload_reload: usize,
    pub deep_unload: usize,
    pub fine_ramp: usize,
    pub gp_walk: usize,
}

impl CurveCounts {
    pub fn total(&self) -> usize {
        self.known_ramp
            + self.random_ramp
            + self.unload_reload
            + self.deep_unload
            + self.fine_ramp
            + self.gp_walk
    }
}

/// Complete recipe for a reproducible dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub counts: CurveCounts,
    pub curve: CurveParams,
    pub gp: GpSpec,
    /// Base seed; per-curve seeds are drawn from disjoint pools on top of it.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            counts: CurveCounts::default(),
            curve: CurveParams::default(),
            gp: GpSpec::default(),
            seed: 0,
        }
    }
}

// A derived Default would work today, but the struct exists in serialized
// manifests, so the defaults are spelled out where a reader will look for
// them.

// Seed pool offsets per family. Ramps and fine ramps share a pool so a fine
// ramp retraces the ramp with the same index; the two unload families share
// one so the deep variant revisits the same directions.
const POOL_SIZE: usize = 1000;
const RAMP_POOL: u64 = 1_000;
const UNLOAD_POOL: u64 = 2_000;
const GP_POOL: u64 = 5_000;

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), PathGenError> {
        self.curve.validate_sizes()?;
        // Breakpoint shapes only matter for the families that use them, so
        // a short-ramp spec is not rejected over defaults it never touches.
        if self.counts.unload_reload > 0 {
            self.curve.unload_reload.validate(self.curve.n_steps)?;
        }
        if self.counts.deep_unload > 0 {
            self.curve.deep_unload.validate(self.curve.n_steps)?;
        }
        self.gp.validate()?;
        if self.counts.known_ramp > 18 {
            return Err(PathGenError::Config(format!(
                "at most 18 canonical directions exist, requested {}",
                self.counts.known_ramp
            )));
        }
        for (name, count) in [
            ("random_ramp", self.counts.random_ramp),
            ("unload_reload", self.counts.unload_reload),
            ("deep_unload", self.counts.deep_unload),
            ("fine_ramp", self.counts.fine_ramp),
            ("gp_walk", self.counts.gp_walk),
        ] {
            if count > POOL_SIZE {
                return Err(PathGenError::Config(format!(
                    "{name} count {count} exceeds the per-family seed pool ({POOL_SIZE})"
                )));
            }
        }
        Ok(())
    }
}

/// One dataset entry: a path and, once an oracle has labeled it, the
/// homogenized stress at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub id: u32,
    pub path: LoadPath,
    pub stresses: Option<Vec<StressVec>>,
}

impl Curve {
    /// Strain/stress pair for training, if labeled.
    pub fn training_curve(&self) -> Option<TrainingCurve> {
        self.stresses.as_ref().map(|s| TrainingCurve {
            strains: self.path.strains.clone(),
            stresses: s.clone(),
        })
    }
}

/// Record of a curve an oracle failed to label; such curves are dropped from
/// the dataset but stay traceable through the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub id: u32,
    pub kind: CurveKind,
    pub seed: u64,
    /// Path step at which the solve gave up.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub curves: Vec<Curve>,
    pub failures: Vec<LabelFailure>,
}

impl Dataset {
    /// All labeled curves, in id order.
    pub fn training_curves(&self) -> Vec<TrainingCurve> {
        self.curves.iter().filter_map(Curve::training_curve).collect()
    }
}

/// Generates every path of a dataset, unlabeled, in a fixed family order.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset, PathGenError> {
    spec.validate()?;
    let mut curves = Vec::with_capacity(spec.counts.total());
    let mut id = 0u32;
    let mut push = |curves: &mut Vec<Curve>, path: LoadPath| {
        curves.push(Curve { id, path, stresses: None });
        id += 1;
    };

    let dirs = known_directions();
    for dir in dirs.iter().take(spec.counts.known_ramp) {
        push(&mut curves, proportional_path(CurveKind::KnownRamp, &spec.curve, dir, spec.seed));
    }
    for k in 0..spec.counts.random_ramp {
        let seed = spec.seed + RAMP_POOL + k as u64;
        let dir = random_direction(seed);
        push(&mut curves, proportional_path(CurveKind::RandomRamp, &spec.curve, &dir, seed));
    }
    for k in 0..spec.counts.unload_reload {
        let seed = spec.seed + UNLOAD_POOL + k as u64;
        let dir = random_direction(seed);
        push(&mut curves, proportional_path(CurveKind::UnloadReload, &spec.curve, &dir, seed));
    }
    for k in 0..spec.counts.deep_unload {
        // Same seed pool as unload_reload: revisits those directions.
        let seed = spec.seed + UNLOAD_POOL + k as u64;
        let dir = random_direction(seed);
        push(&mut curves, proportional_path(CurveKind::DeepUnload, &spec.curve, &dir, seed));
    }
    for k in 0..spec.counts.fine_ramp {
        // Same seed pool as random_ramp: retraces those ramps finely.
        let seed = spec.seed + RAMP_POOL + k as u64;
        let dir = random_direction(seed);
        push(&mut curves, proportional_path(CurveKind::FineRamp, &spec.curve, &dir, seed));
    }
    for k in 0..spec.counts.gp_walk {
        let seed = spec.seed + GP_POOL + k as u64;
        let path = gp_walk(&spec.gp, seed)?;
        push(&mut curves, path);
    }
    Ok(Dataset { spec: spec.clone(), curves, failures: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn known_directions_cover_the_canonical_set() {
        let dirs = known_directions();
        assert_eq!(dirs.len(), 18);
        for d in &dirs {
            assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(dirs.iter().any(|d| (d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12));
        assert!(dirs.iter().any(|d| (d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12));
        // All pairwise distinct.
        for (i, a) in dirs.iter().enumerate() {
            for b in dirs.iter().skip(i + 1) {
                assert!((a - b).norm() > 1e-6);
            }
        }
    }

    #[test]
    fn random_directions_are_unit_deterministic_and_isotropic() {
        let d = random_direction(99);
        assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
        assert_eq!(random_direction(99), d);
        assert_ne!(random_direction(100), d);

        // Octant counts of 10^4 draws stay within 5 sigma of uniform.
        let n = 10_000;
        let mut counts = [0usize; 8];
        for seed in 0..n {
            let v = random_direction(seed);
            let idx = ((v.x > 0.0) as usize) << 2 | ((v.y > 0.0) as usize) << 1 | (v.z > 0.0) as usize;
            counts[idx] += 1;
        }
        let expected = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 5.0 * sigma,
                "octant {i} count {c} vs expected {expected}"
            );
        }
    }

    #[test]
    fn ramp_loading_is_linear() {
        let p = CurveParams::default();
        assert_eq!(loading_function(CurveKind::RandomRamp, &p, 0), 0.0);
        assert_relative_eq!(
            loading_function(CurveKind::RandomRamp, &p, 60),
            6e-3,
            max_relative = 1e-12
        );
        // Fine ramp ends at the same value despite smaller steps.
        assert_relative_eq!(
            loading_function(CurveKind::FineRamp, &p, 600),
            loading_function(CurveKind::RandomRamp, &p, 60),
            max_relative = 1e-12
        );
    }

    #[test]
    fn unload_reload_shapes_match_their_breakpoints() {
        let p = CurveParams::default();
        let lf = |t| loading_function(CurveKind::UnloadReload, &p, t);
        let peak = lf(30);
        assert_relative_eq!(peak, 30.0 * 1e-4, max_relative = 1e-12);
        assert_relative_eq!(lf(45), 0.4 * peak, max_relative = 1e-12);
        assert!(lf(45) < peak);
        assert_relative_eq!(lf(60), 6e-3, max_relative = 1e-12);
        // Monotone on each leg.
        for t in 1..=30 {
            assert!(lf(t) > lf(t - 1));
        }
        for t in 31..=45 {
            assert!(lf(t) < lf(t - 1));
        }
        for t in 46..=60 {
            assert!(lf(t) > lf(t - 1));
        }

        let deep = |t| loading_function(CurveKind::DeepUnload, &p, t);
        assert_relative_eq!(deep(50), 0.2 * deep(40), max_relative = 1e-12);
        assert_relative_eq!(deep(60), 6e-3, max_relative = 1e-12);
    }

    #[test]
    fn proportional_paths_stay_collinear() {
        let p = CurveParams::default();
        let dir = random_direction(3);
        let path = proportional_path(CurveKind::UnloadReload, &p, &dir, 3);
        assert_eq!(path.strains.len(), 61);
        assert_eq!(path.strains[0], Vector3::zeros());
        for s in &path.strains[1..] {
            let cross = s.cross(&dir).norm();
            assert!(cross < 1e-15, "strain {s:?} off-direction by {cross}");
        }
    }

    #[test]
    fn dataset_assembly_counts_and_reuse() {
        let spec = DatasetSpec {
            counts: CurveCounts {
                known_ramp: 18,
                random_ramp: 3,
                unload_reload: 2,
                deep_unload: 2,
                fine_ramp: 1,
                gp_walk: 2,
            },
            ..DatasetSpec::default()
        };
        let ds = make_dataset(&spec).unwrap();
        assert_eq!(ds.curves.len(), 28);
        assert_eq!(
            ds.curves.iter().map(|c| c.id).collect::<Vec<_>>(),
            (0..28).collect::<Vec<_>>()
        );

        let by_kind = |k: CurveKind| -> Vec<&Curve> {
            ds.curves.iter().filter(|c| c.path.meta.kind == k).collect()
        };
        assert_eq!(by_kind(CurveKind::KnownRamp).len(), 18);
        assert_eq!(by_kind(CurveKind::GpWalk).len(), 2);

        // Deep unloads revisit the unload-reload directions pairwise.
        let ur = by_kind(CurveKind::UnloadReload);
        let du = by_kind(CurveKind::DeepUnload);
        for (a, b) in ur.iter().zip(&du) {
            assert_eq!(a.path.meta.direction, b.path.meta.direction);
        }
        // Fine ramps retrace random ramps, ending at the same point.
        let rr = by_kind(CurveKind::RandomRamp);
        let fr = by_kind(CurveKind::FineRamp);
        assert_eq!(rr[0].path.meta.direction, fr[0].path.meta.direction);
        let end_rr = rr[0].path.strains.last().unwrap();
        let end_fr = fr[0].path.strains.last().unwrap();
        assert_relative_eq!((end_rr - end_fr).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(fr[0].path.strains.len(), 601);

        // Reproducible wholesale.
        let again = make_dataset(&spec).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn dataset_rejects_overlong_requests() {
        let mut spec = DatasetSpec::default();
        spec.counts.known_ramp = 19;
        assert!(matches!(make_dataset(&spec), Err(PathGenError::Config(_))));
    }
}
