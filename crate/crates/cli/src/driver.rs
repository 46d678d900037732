//! Stress-controlled single-point driver: given a stress target per step,
//! Newton-invert the network's strain response, reusing its algorithmic
//! tangent. An elastic-tangent variant exists as the comparison baseline.

use std::fs::{self, File};
use std::io::Write as _;

use anyhow::Context;
use nalgebra::Matrix3;
use serde::Serialize;
use thiserror::Error;

use prnn_core::constitutive::{StrainVec, StressVec};
use prnn_core::prnn::{
    forward_sequence, forward_step, jacobian, Checkpoint, PrnnConfig, PrnnError, PrnnParams,
    PrnnState,
};

use crate::config::ExperimentConfig;
use crate::failure::{Classify, CmdResult};
use crate::pipeline::default_model;

pub const DRIVER_MAX_ITER: usize = 25;
/// Convergence: residual norm relative to `max(1, |target|)` in MPa.
pub const DRIVER_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DriveError {
    #[error("driver diverged at step {step}: residual {residual:.3e} MPa after {DRIVER_MAX_ITER} iterations")]
    Diverged { step: usize, residual: f64 },
    #[error("tangent is singular at step {step}")]
    SingularTangent { step: usize },
    #[error(transparent)]
    Network(#[from] PrnnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TangentMode {
    /// Network jacobian assembled from each point's algorithmic tangent.
    Consistent,
    /// Fixed elastic operator, the classic slow-but-cheap baseline.
    Elastic,
}

/// What to do when a step exhausts its iteration budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergencePolicy {
    Fail,
    /// Stop driving and return the partial trace; lets a comparison run
    /// report "gave up at step k" instead of erroring out.
    Record,
}

#[derive(Clone, Copy, Debug)]
pub struct DriveStep {
    pub target: StressVec,
    pub strain: StrainVec,
    pub stress: StressVec,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct DriveTrace {
    pub steps: Vec<DriveStep>,
    /// Step index at which the driver gave up, if it did.
    pub diverged_at: Option<usize>,
}

impl DriveTrace {
    pub fn mean_iterations(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::NAN;
        }
        self.steps.iter().map(|s| s.iterations as f64).sum::<f64>() / self.steps.len() as f64
    }

    pub fn max_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).max().unwrap_or(0)
    }
}

/// The network's stress-strain operator with every point elastic:
/// decoder blocks times the elastic stiffness times encoder blocks.
pub fn elastic_operator(config: &PrnnConfig, params: &PrnnParams) -> Matrix3<f64> {
    let d_e = config.material.elastic_props().plane_stress_stiffness();
    let decoder = params.effective_decoder();
    let mut op = Matrix3::zeros();
    for j in 0..config.n_points {
        let enc = params.w_encoder.fixed_view::<3, 3>(3 * j, 0);
        let dec = decoder.fixed_view::<3, 3>(0, 3 * j);
        op += dec * d_e * enc;
    }
    op
}

/// Halvings of a Newton correction before it is taken as-is; see below.
const DRIVER_MAX_BACKTRACKS: usize = 8;

/// Drives the network through a list of stress targets. Each step starts
/// from the previous strain, evaluates the network, and corrects the strain
/// with the selected tangent until the stress residual is tiny.
///
/// Corrections that raise the residual (or land the material somewhere its
/// return map cannot follow) are halved a few times first: the saturating
/// hardening makes the algorithmic tangent collapse once every point is deep
/// into the plastic branch, and a raw Newton update there can overshoot by
/// orders of magnitude. Well-posed steps never backtrack.
pub fn drive_path(
    config: &PrnnConfig,
    params: &PrnnParams,
    targets: &[StressVec],
    mode: TangentMode,
    policy: DivergencePolicy,
) -> Result<DriveTrace, DriveError> {
    let elastic = elastic_operator(config, params);
    let mut state = PrnnState::virgin(config.n_points);
    let mut strain = StrainVec::zeros();
    let mut steps = Vec::with_capacity(targets.len());

    for (step, target) in targets.iter().enumerate() {
        let scale = target.norm().max(1.0);
        let mut record = forward_step(config, params, &strain, &state)?;
        let mut residual = (record.macro_stress - target).norm();
        let mut iterations = 0;
        while residual > DRIVER_TOL * scale {
            if iterations == DRIVER_MAX_ITER {
                match policy {
                    DivergencePolicy::Fail => return Err(DriveError::Diverged { step, residual }),
                    DivergencePolicy::Record => {
                        steps.push(DriveStep {
                            target: *target,
                            strain,
                            stress: record.macro_stress,
                            iterations,
                            residual,
                        });
                        return Ok(DriveTrace { steps, diverged_at: Some(step) });
                    }
                }
            }
            let tangent = match mode {
                TangentMode::Consistent => jacobian(params, &record),
                TangentMode::Elastic => elastic,
            };
            let correction = tangent
                .lu()
                .solve(&(target - record.macro_stress))
                .ok_or(DriveError::SingularTangent { step })?;
            let mut fraction = 1.0;
            (strain, record, residual) = loop {
                let candidate = strain + correction * fraction;
                let last_try = fraction <= 0.5f64.powi(DRIVER_MAX_BACKTRACKS as i32);
                match forward_step(config, params, &candidate, &state) {
                    Ok(r) => {
                        let res = (r.macro_stress - target).norm();
                        if res < residual || last_try {
                            break (candidate, r, res);
                        }
                    }
                    Err(e) if last_try => return Err(e.into()),
                    Err(_) => {}
                }
                fraction *= 0.5;
            };
            iterations += 1;
        }
        state = record.state_after();
        steps.push(DriveStep {
            target: *target,
            strain,
            stress: record.macro_stress,
            iterations,
            residual,
        });
    }
    Ok(DriveTrace { steps, diverged_at: None })
}

/// Smallest ramp amplitude along `direction` at which any material point
/// leaves the elastic branch, found by bracketing and bisection.
pub fn plastic_onset(
    config: &PrnnConfig,
    params: &PrnnParams,
    direction: &StrainVec,
) -> Result<f64, PrnnError> {
    let dir = direction / direction.norm();
    let yields = |amplitude: f64| -> Result<bool, PrnnError> {
        let strains: Vec<StrainVec> = (0..=40).map(|t| dir * (amplitude * t as f64 / 40.0)).collect();
        let (_, trace) = forward_sequence(config, params, &strains)?;
        let last = trace.steps.last().expect("non-empty ramp");
        Ok(last.states_after.iter().any(|s| s.eps_p_eq > 0.0))
    };

    let mut hi = 1e-3;
    while !yields(hi)? {
        hi *= 2.0;
        if hi > 1.0 {
            return Err(PrnnError::Config(
                "network stays elastic up to 100% strain; cannot build a plastic ramp".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if yields(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Uniform strain ramp along `direction` up to `peak`, excluding the zero
/// start.
pub fn ramp_strains(direction: &StrainVec, peak: f64, n_steps: usize) -> Vec<StrainVec> {
    let dir = direction / direction.norm();
    (1..=n_steps).map(|t| dir * (peak * t as f64 / n_steps as f64)).collect()
}

/// Ramp that rushes to the plastic onset in 40% of its steps and spends the
/// rest between onset and `peak`, so per-step iteration statistics are
/// dominated by plastic steps rather than the trivial elastic approach.
pub fn plastic_ramp_strains(
    direction: &StrainVec,
    onset: f64,
    peak: f64,
    n_steps: usize,
) -> Vec<StrainVec> {
    let dir = direction / direction.norm();
    let n_approach = ((2 * n_steps) / 5).max(1).min(n_steps - 1);
    let n_plastic = n_steps - n_approach;
    let mut strains = Vec::with_capacity(n_steps);
    for t in 1..=n_approach {
        strains.push(dir * (onset * t as f64 / n_approach as f64));
    }
    for t in 1..=n_plastic {
        strains.push(dir * (onset + (peak - onset) * t as f64 / n_plastic as f64));
    }
    strains
}

/// The network's own responses along a strain path, usable as stress
/// targets the driver can provably reach.
pub fn realizable_targets(
    config: &PrnnConfig,
    params: &PrnnParams,
    strains: &[StrainVec],
) -> Result<Vec<StressVec>, PrnnError> {
    let mut with_origin = Vec::with_capacity(strains.len() + 1);
    with_origin.push(StrainVec::zeros());
    with_origin.extend_from_slice(strains);
    let (stresses, _) = forward_sequence(config, params, &with_origin)?;
    Ok(stresses.into_iter().skip(1).collect())
}

#[derive(Serialize)]
struct DriveSummary {
    schema_version: u32,
    model: String,
    direction: [f64; 3],
    n_steps: usize,
    step_size: f64,
    tolerance: f64,
    consistent_mean_iterations: f64,
    consistent_max_iterations: usize,
    elastic_mean_iterations: f64,
    elastic_max_iterations: usize,
    elastic_diverged_at: Option<usize>,
}

/// Runs the driver on a plastic ramp with both tangents and reports the
/// iteration counts side by side.
pub fn cmd_drive(config: &ExperimentConfig) -> CmdResult {
    let model_path = default_model(config, config.drive.model.as_ref())?;
    let net = Checkpoint::load(&model_path)
        .with_context(|| format!("loading {}", model_path.display()))
        .or_user()?;
    let params = net.params().or_user()?;

    let dir = StrainVec::from_row_slice(&config.drive.direction);
    if dir.norm() == 0.0 {
        return crate::failure::user_error("[drive] direction must be nonzero");
    }
    let n_steps = config.drive.n_steps.max(2);
    // A mild plastic ramp keeps the elastic baseline convergent so the
    // comparison is iterations against iterations, not success/failure:
    // saturating hardening makes deep ramps hopeless for a fixed tangent.
    let strains = match config.drive.step_size {
        Some(h) => ramp_strains(&dir, h * n_steps as f64, n_steps),
        None => {
            let onset = plastic_onset(&net.config, &params, &dir).or_fault()?;
            plastic_ramp_strains(&dir, onset, onset * 1.05, n_steps)
        }
    };
    let peak = strains.last().map(|s| s.norm()).unwrap_or(0.0);
    let step_size = peak / n_steps as f64;
    let targets = realizable_targets(&net.config, &params, &strains).or_fault()?;

    let consistent = drive_path(
        &net.config,
        &params,
        &targets,
        TangentMode::Consistent,
        DivergencePolicy::Fail,
    )
    .context("consistent-tangent drive")
    .or_fault()?;
    let elastic = drive_path(
        &net.config,
        &params,
        &targets,
        TangentMode::Elastic,
        DivergencePolicy::Record,
    )
    .context("elastic-tangent drive")
    .or_fault()?;

    fs::create_dir_all(&config.out_dir).ok();
    let csv_path = config.out_dir.join("drive.csv");
    let mut file = File::create(&csv_path)
        .with_context(|| format!("cannot create {}", csv_path.display()))
        .or_fault()?;
    writeln!(file, "# stress-controlled drive; tolerance {DRIVER_TOL:.1e} relative").or_fault()?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "step",
        "target_xx",
        "target_yy",
        "target_xy",
        "strain_xx",
        "strain_yy",
        "strain_xy",
        "iters_consistent",
        "iters_elastic",
    ])
    .or_fault()?;
    for (i, s) in consistent.steps.iter().enumerate() {
        let el = elastic.steps.get(i);
        w.write_record([
            (i + 1).to_string(),
            format!("{:.9e}", s.target.x),
            format!("{:.9e}", s.target.y),
            format!("{:.9e}", s.target.z),
            format!("{:.9e}", s.strain.x),
            format!("{:.9e}", s.strain.y),
            format!("{:.9e}", s.strain.z),
            s.iterations.to_string(),
            el.map_or_else(String::new, |e| e.iterations.to_string()),
        ])
        .or_fault()?;
    }
    w.flush().or_fault()?;

    let summary = DriveSummary {
        schema_version: 1,
        model: model_path.display().to_string(),
        direction: config.drive.direction,
        n_steps,
        step_size,
        tolerance: DRIVER_TOL,
        consistent_mean_iterations: consistent.mean_iterations(),
        consistent_max_iterations: consistent.max_iterations(),
        elastic_mean_iterations: elastic.mean_iterations(),
        elastic_max_iterations: elastic.max_iterations(),
        elastic_diverged_at: elastic.diverged_at,
    };
    let json_path = config.out_dir.join("drive.json");
    fs::write(&json_path, serde_json::to_string_pretty(&summary).or_fault()?)
        .with_context(|| format!("writing {}", json_path.display()))
        .or_fault()?;

    println!(
        "drive: {} steps to strain {:.3e}; consistent tangent {:.2} iters/step (max {}), \
         elastic tangent {:.2} iters/step (max {}){}",
        n_steps,
        peak,
        summary.consistent_mean_iterations,
        summary.consistent_max_iterations,
        summary.elastic_mean_iterations,
        summary.elastic_max_iterations,
        match elastic.diverged_at {
            Some(k) => format!(", gave up at step {k}"),
            None => String::new(),
        }
    );
    println!("drive report -> {}", json_path.display());
    Ok(())
}
