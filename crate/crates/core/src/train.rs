//! Training for the recurrent surrogate. The forward pass is exact; the
//! backward pass propagates adjoints through time, combining the exact
//! consistent tangent of each constitutive update with finite-difference
//! blocks for the derivatives that involve internal history (the material
//! update is an opaque solver, not an autodiff graph). Optimization is Adam
//! on mini-batches of whole curves with per-curve gradient averaging.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    ConstitutiveError, Material, MaterialState, StrainVec, StressVec, N_INT_VAR,
};
use crate::prnn::{
    forward_sequence, init_params, ForwardTrace, PrnnConfig, PrnnError, PrnnParams,
};

/// Central-difference step for history-derivative blocks, in strain units.
pub const DEFAULT_FD_STEP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("forward pass failed: {0}")]
    Forward(#[from] PrnnError),
    #[error("gradient fault at step {step}{}: {detail}", point_suffix(.point))]
    GradientFault {
        step: usize,
        point: Option<usize>,
        detail: String,
    },
    #[error("training needs at least one curve")]
    EmptyDataset,
    #[error("curve {curve} has {n_stress} stress rows for {n_strain} strain rows")]
    RaggedCurve {
        curve: usize,
        n_strain: usize,
        n_stress: usize,
    },
    #[error("result file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("result file encoding: {0}")]
    Csv(#[from] csv::Error),
}

fn point_suffix(point: &Option<usize>) -> String {
    point.map_or(String::new(), |p| format!(", material point {p}"))
}

/// Mean over time steps of half the squared stress residual, MPa^2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue(pub f64);

pub fn loss(predicted: &[StressVec], target: &[StressVec]) -> LossValue {
    assert_eq!(predicted.len(), target.len(), "prediction/target length mismatch");
    let n = predicted.len().max(1) as f64;
    LossValue(
        predicted
            .iter()
            .zip(target)
            .map(|(p, t)| 0.5 * (p - t).norm_squared())
            .sum::<f64>()
            / n,
    )
}

/// One strain path with its labeled stress response.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCurve {
    pub strains: Vec<StrainVec>,
    pub stresses: Vec<StressVec>,
}

/// Derivatives of a single constitutive update around a recorded point.
/// Stress-strain is the exact consistent tangent; everything touching the
/// internal state is central finite differences, because the update is a
/// Newton solver with no closed-form state sensitivity.
#[derive(Clone, Debug)]
pub struct FdBlocks {
    pub d_stress_d_strain: SMatrix<f64, 3, 3>,
    pub d_state_d_strain: SMatrix<f64, N_INT_VAR, 3>,
    pub d_stress_d_state: SMatrix<f64, 3, N_INT_VAR>,
    pub d_state_d_state: SMatrix<f64, N_INT_VAR, N_INT_VAR>,
}

pub fn material_fd_blocks(
    material: &Material,
    strain: &StrainVec,
    state_prev: &MaterialState,
    h: f64,
) -> Result<FdBlocks, ConstitutiveError> {
    let base = material.update(strain, state_prev)?;
    let mut blocks = FdBlocks {
        d_stress_d_strain: base.tangent,
        d_state_d_strain: SMatrix::zeros(),
        d_stress_d_state: SMatrix::zeros(),
        d_state_d_state: SMatrix::zeros(),
    };

    for k in 0..3 {
        let mut ep = *strain;
        let mut em = *strain;
        ep[k] += h;
        em[k] -= h;
        let rp = material.update(&ep, state_prev)?;
        let rm = material.update(&em, state_prev)?;
        let ap = rp.new_state.to_array();
        let am = rm.new_state.to_array();
        for i in 0..N_INT_VAR {
            blocks.d_state_d_strain[(i, k)] = (ap[i] - am[i]) / (2.0 * h);
        }
    }

    let base_arr = state_prev.to_array();
    for k in 0..N_INT_VAR {
        let mut ap_in = base_arr;
        let mut am_in = base_arr;
        ap_in[k] += h;
        am_in[k] -= h;
        let rp = material.update(strain, &MaterialState::from_array(ap_in))?;
        let rm = material.update(strain, &MaterialState::from_array(am_in))?;
        for i in 0..3 {
            blocks.d_stress_d_state[(i, k)] = (rp.stress[i] - rm.stress[i]) / (2.0 * h);
        }
        let ap = rp.new_state.to_array();
        let am = rm.new_state.to_array();
        for i in 0..N_INT_VAR {
            blocks.d_state_d_state[(i, k)] = (ap[i] - am[i]) / (2.0 * h);
        }
    }
    Ok(blocks)
}

/// Loss gradients with respect to both weight matrices. The decoder entry is
/// with respect to the raw (pre-softplus) weights.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub g_encoder: DMatrix<f64>,
    pub g_decoder_raw: DMatrix<f64>,
}

impl Gradients {
    pub fn zeros(config: &PrnnConfig) -> Self {
        let width = config.layer_width();
        Self {
            g_encoder: DMatrix::zeros(width, 3),
            g_decoder_raw: DMatrix::zeros(3, width),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        self.g_encoder.zip_apply(&other.g_encoder, |a, b| *a += factor * b);
        self.g_decoder_raw.zip_apply(&other.g_decoder_raw, |a, b| *a += factor * b);
    }
}

/// Backpropagation through time over one recorded sequence.
///
/// Walking the steps in reverse, the adjoint of each material point's local
/// strain combines the decoder-propagated stress error with the incoming
/// history adjoint; the history adjoint itself is pushed one step further into
/// the past through the state-to-state FD block. Encoder and decoder gradients
/// are rank-one accumulations per step.
pub fn backward_sequence(
    config: &PrnnConfig,
    params: &PrnnParams,
    trace: &ForwardTrace,
    target: &[StressVec],
    h_fd: f64,
) -> Result<Gradients, TrainError> {
    let n = trace.steps.len();
    assert_eq!(target.len(), n, "trace/target length mismatch");
    let m = config.n_points;
    let width = config.layer_width();
    let decoder = params.effective_decoder();

    let mut g_encoder = DMatrix::zeros(width, 3);
    let mut g_decoder_eff = DMatrix::zeros(3, width);
    // dL/d(state of point j after step t), flowing backwards; zero at the end.
    let mut d_state: Vec<SVector<f64, N_INT_VAR>> = vec![SVector::zeros(); m];

    for t in (0..n).rev() {
        let rec = &trace.steps[t];
        let d_out = (rec.macro_stress - target[t]) / n as f64;
        if !d_out.iter().all(|v| v.is_finite()) {
            return Err(TrainError::GradientFault {
                step: t,
                point: None,
                detail: "non-finite stress residual".into(),
            });
        }
        for i in 0..3 {
            for q in 0..width {
                g_decoder_eff[(i, q)] += d_out[i] * rec.local_stresses[q];
            }
        }
        let d_local: DVector<f64> = decoder.transpose() * d_out;

        for j in 0..m {
            let strain_j: StrainVec = rec.local_strains.fixed_rows::<3>(3 * j).into_owned();
            let blocks = material_fd_blocks(&config.material, &strain_j, &rec.states_before[j], h_fd)
                .map_err(|e| TrainError::GradientFault {
                    step: t,
                    point: Some(j),
                    detail: e.to_string(),
                })?;
            let d_a_j = StrainVec::new(d_local[3 * j], d_local[3 * j + 1], d_local[3 * j + 2]);
            let d_v_j = blocks.d_stress_d_strain.transpose() * d_a_j
                + blocks.d_state_d_strain.transpose() * d_state[j];
            let d_h_prev = blocks.d_stress_d_state.transpose() * d_a_j
                + blocks.d_state_d_state.transpose() * d_state[j];
            if !(d_v_j.iter().all(|v| v.is_finite()) && d_h_prev.iter().all(|v| v.is_finite())) {
                return Err(TrainError::GradientFault {
                    step: t,
                    point: Some(j),
                    detail: "non-finite adjoint".into(),
                });
            }
            for c in 0..3 {
                for r in 0..3 {
                    g_encoder[(3 * j + r, c)] += d_v_j[r] * rec.macro_strain[c];
                }
            }
            d_state[j] = d_h_prev;
        }
    }

    Ok(Gradients {
        g_encoder,
        g_decoder_raw: g_decoder_eff.component_mul(&params.decoder_sensitivity()),
    })
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one slot per weight.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub step: u64,
    m_encoder: DMatrix<f64>,
    v_encoder: DMatrix<f64>,
    m_decoder: DMatrix<f64>,
    v_decoder: DMatrix<f64>,
}

impl AdamState {
    pub fn new(config: &PrnnConfig, hyper: AdamParams) -> Self {
        let width = config.layer_width();
        Self {
            hyper,
            step: 0,
            m_encoder: DMatrix::zeros(width, 3),
            v_encoder: DMatrix::zeros(width, 3),
            m_decoder: DMatrix::zeros(3, width),
            v_decoder: DMatrix::zeros(3, width),
        }
    }
}

fn adam_update_matrix(
    hyper: &AdamParams,
    bc1: f64,
    bc2: f64,
    m: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    w: &mut DMatrix<f64>,
    g: &DMatrix<f64>,
) {
    for ((m_i, v_i), (w_i, g_i)) in m
        .iter_mut()
        .zip(v.iter_mut())
        .zip(w.iter_mut().zip(g.iter()))
    {
        *m_i = hyper.beta1 * *m_i + (1.0 - hyper.beta1) * g_i;
        *v_i = hyper.beta2 * *v_i + (1.0 - hyper.beta2) * g_i * g_i;
        let m_hat = *m_i / bc1;
        let v_hat = *v_i / bc2;
        *w_i -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(state: &mut AdamState, params: &mut PrnnParams, grads: &Gradients) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.hyper.beta1.powi(t);
    let bc2 = 1.0 - state.hyper.beta2.powi(t);
    adam_update_matrix(
        &state.hyper,
        bc1,
        bc2,
        &mut state.m_encoder,
        &mut state.v_encoder,
        &mut params.w_encoder,
        &grads.g_encoder,
    );
    adam_update_matrix(
        &state.hyper,
        bc1,
        bc2,
        &mut state.m_decoder,
        &mut state.v_decoder,
        &mut params.w_decoder_raw,
        &grads.g_decoder_raw,
    );
}

/// Everything a training run needs besides the data and the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub fd_step: f64,
    /// Stop once the epoch training loss drops to this value, if set.
    pub stop_loss: Option<f64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 9,
            seed: 0,
            adam: AdamParams::default(),
            fd_step: DEFAULT_FD_STEP,
            stop_loss: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PrnnParams,
    /// Entry 0 is the full-dataset loss at initialization; entry e >= 1 is the
    /// mean pre-update batch loss of epoch e.
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
}

fn check_curves(curves: &[TrainingCurve]) -> Result<(), TrainError> {
    if curves.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, c) in curves.iter().enumerate() {
        if c.strains.is_empty() || c.strains.len() != c.stresses.len() {
            return Err(TrainError::RaggedCurve {
                curve: i,
                n_strain: c.strains.len(),
                n_stress: c.stresses.len(),
            });
        }
    }
    Ok(())
}

/// Mean per-curve loss over a whole set, without touching optimizer state.
pub fn dataset_loss(
    config: &PrnnConfig,
    params: &PrnnParams,
    curves: &[TrainingCurve],
) -> Result<f64, TrainError> {
    check_curves(curves)?;
    let losses: Result<Vec<f64>, PrnnError> = curves
        .par_iter()
        .map(|c| {
            let (pred, _) = forward_sequence(config, params, &c.strains)?;
            Ok(loss(&pred, &c.stresses).0)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Full training run: deterministic given the seed, including shuffling.
/// Batch-member gradients are computed in parallel but reduced in a fixed
/// order, so reruns reproduce results exactly.
pub fn train(
    config: &PrnnConfig,
    spec: &TrainSpec,
    curves: &[TrainingCurve],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_curves(curves)?;
    let mut params = init_params(config, spec.seed);
    let mut adam = AdamState::new(config, spec.adam);
    // Separate stream from weight init so architecture changes do not couple
    // into the batch order.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..curves.len()).collect();

    let mut loss_history = Vec::with_capacity(spec.epochs + 1);
    loss_history.push(dataset_loss(config, &params, curves)?);
    let mut epochs_run = 0;

    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_loss_count = 0usize;
        for batch in order.chunks(spec.batch_size) {
            let members: Result<Vec<(f64, Gradients)>, TrainError> = batch
                .par_iter()
                .map(|&ci| {
                    let curve = &curves[ci];
                    let (pred, trace) = forward_sequence(config, &params, &curve.strains)?;
                    let l = loss(&pred, &curve.stresses).0;
                    let g = backward_sequence(config, &params, &trace, &curve.stresses, spec.fd_step)?;
                    Ok((l, g))
                })
                .collect();
            let members = members?;
            let mut batch_grad = Gradients::zeros(config);
            let weight = 1.0 / members.len() as f64;
            for (l, g) in &members {
                epoch_loss_sum += l;
                epoch_loss_count += 1;
                batch_grad.add_scaled(g, weight);
            }
            adam_step(&mut adam, &mut params, &batch_grad);
        }
        let epoch_loss = epoch_loss_sum / epoch_loss_count as f64;
        loss_history.push(epoch_loss);
        epochs_run += 1;
        if spec.stop_loss.is_some_and(|threshold| epoch_loss <= threshold) {
            break;
        }
    }

    Ok(TrainOutcome { params, loss_history, epochs_run })
}

/// Root-mean-square stress error of one curve over all steps and components,
/// MPa.
pub fn curve_rmse(predicted: &[StressVec], target: &[StressVec]) -> f64 {
    assert_eq!(predicted.len(), target.len(), "prediction/target length mismatch");
    let n = (3 * predicted.len().max(1)) as f64;
    (predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Per-curve RMSE of a model over a curve set.
pub fn evaluate(
    config: &PrnnConfig,
    params: &PrnnParams,
    curves: &[TrainingCurve],
) -> Result<Vec<f64>, TrainError> {
    check_curves(curves)?;
    let rmse: Result<Vec<f64>, PrnnError> = curves
        .par_iter()
        .map(|c| {
            let (pred, _) = forward_sequence(config, params, &c.strains)?;
            Ok(curve_rmse(&pred, &c.stresses))
        })
        .collect();
    Ok(rmse?)
}

pub fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One cell of the model-selection sweep.
#[derive(Clone, Debug, Serialize)]
pub struct GridResult {
    pub n_points: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub train_error: f64,
    pub val_error: f64,
    /// Populated when this run failed; errors are NaN in that case.
    pub fault: Option<String>,
}

/// Trains every (layer size, seed) combination and scores it on both sets.
/// A diverged run is reported, not fatal: the sweep always completes.
pub fn grid_search(
    material: &Material,
    sizes: &[usize],
    seeds: &[u64],
    base_spec: &TrainSpec,
    train_set: &[TrainingCurve],
    val_set: &[TrainingCurve],
) -> Vec<GridResult> {
    let runs: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    runs.par_iter()
        .map(|&(n_points, seed)| {
            let config = PrnnConfig::new(n_points, material.clone());
            let spec = TrainSpec { seed, ..base_spec.clone() };
            let outcome = train(&config, &spec, train_set).and_then(|out| {
                let train_err = evaluate(&config, &out.params, train_set)?;
                let val_err = evaluate(&config, &out.params, val_set)?;
                Ok((out, train_err, val_err))
            });
            match outcome {
                Ok((out, train_err, val_err)) => GridResult {
                    n_points,
                    seed,
                    final_train_loss: *out.loss_history.last().unwrap(),
                    train_error: mean_of(&train_err),
                    val_error: mean_of(&val_err),
                    fault: None,
                },
                Err(e) => GridResult {
                    n_points,
                    seed,
                    final_train_loss: f64::NAN,
                    train_error: f64::NAN,
                    val_error: f64::NAN,
                    fault: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Writes `epoch,loss` rows; epoch 0 is the pre-training loss.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, l) in history.iter().enumerate() {
        w.write_record([epoch.to_string(), format!("{l:.12e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the sweep table, one row per (size, seed) run.
pub fn write_grid_results(path: &Path, results: &[GridResult]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n_points", "seed", "final_train_loss", "train_error", "val_error", "fault"])?;
    for r in results {
        w.write_record([
            r.n_points.to_string(),
            r.seed.to_string(),
            format!("{:.12e}", r.final_train_loss),
            format!("{:.12e}", r.train_error),
            format!("{:.12e}", r.val_error),
            r.fault.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of checking analytic gradients against finite differences on the
/// loss itself, perturbing one weight at a time.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_rel_dev: f64,
    pub n_checked: usize,
    /// Weights skipped because a probe flipped some point across the
    /// elastic-plastic transition, where the loss is not differentiable.
    pub n_excluded: usize,
}

fn plastic_signature(
    config: &PrnnConfig,
    params: &PrnnParams,
    curve: &TrainingCurve,
) -> Result<(f64, Vec<bool>), TrainError> {
    let (pred, trace) = forward_sequence(config, params, &curve.strains)?;
    let flags = trace.steps.iter().flat_map(|s| s.plastic.iter().copied()).collect();
    Ok((loss(&pred, &curve.stresses).0, flags))
}

/// Central-difference check of [`backward_sequence`] over every weight and
/// every curve. Probes that change any point's elastic/plastic branch are
/// excluded: straddling the transition makes the finite difference
/// meaningless, not the gradient wrong.
pub fn gradient_fd_check(
    config: &PrnnConfig,
    params: &PrnnParams,
    curves: &[TrainingCurve],
    h: f64,
) -> Result<GradientCheck, TrainError> {
    check_curves(curves)?;
    let mut analytic = Gradients::zeros(config);
    let mut base_flags = Vec::with_capacity(curves.len());
    let weight = 1.0 / curves.len() as f64;
    for curve in curves {
        let (_, trace) = forward_sequence(config, params, &curve.strains)?;
        let g = backward_sequence(config, params, &trace, &curve.stresses, DEFAULT_FD_STEP)?;
        analytic.add_scaled(&g, weight);
        base_flags.push(plastic_signature(config, params, curve)?.1);
    }
    let g_scale = analytic
        .g_encoder
        .iter()
        .chain(analytic.g_decoder_raw.iter())
        .fold(0.0_f64, |acc, g| acc.max(g.abs()));
    let reg = 1e-9 * g_scale + 1e-300;

    let mut check = GradientCheck { max_rel_dev: 0.0, n_checked: 0, n_excluded: 0 };
    let width = config.layer_width();
    // (matrix selector, row, col) for every weight in the network.
    let slots: Vec<(bool, usize, usize)> = (0..width)
        .flat_map(|r| (0..3).map(move |c| (true, r, c)))
        .chain((0..3).flat_map(|r| (0..width).map(move |c| (false, r, c))))
        .collect();

    for (is_encoder, r, c) in slots {
        let probe = |delta: f64| -> Result<(f64, bool), TrainError> {
            let mut p = params.clone();
            if is_encoder {
                p.w_encoder[(r, c)] += delta;
            } else {
                p.w_decoder_raw[(r, c)] += delta;
            }
            let mut total = 0.0;
            let mut branch_flip = false;
            for (curve, flags) in curves.iter().zip(&base_flags) {
                let (l, probe_flags) = plastic_signature(config, &p, curve)?;
                total += l * weight;
                branch_flip |= probe_flags != *flags;
            }
            Ok((total, branch_flip))
        };
        let (lp, flip_p) = probe(h)?;
        let (lm, flip_m) = probe(-h)?;
        if flip_p || flip_m {
            check.n_excluded += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let g = if is_encoder {
            analytic.g_encoder[(r, c)]
        } else {
            analytic.g_decoder_raw[(r, c)]
        };
        let dev = (fd - g).abs() / (fd.abs() + g.abs() + reg);
        check.max_rel_dev = check.max_rel_dev.max(dev);
        check.n_checked += 1;
    }
    Ok(check)
}
