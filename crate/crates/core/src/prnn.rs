//! The recurrent surrogate network. A linear encoder maps the macroscopic
//! strain to a set of fictitious material points (three neurons per point, one
//! local strain vector each), a real constitutive model evaluates every point
//! against its own internal history, and a linear decoder with
//! softplus-positive weights maps local stresses back to a macroscopic stress.
//! There are no biases and no squashing activations: all nonlinearity and all
//! memory live in the material layer, so path dependence comes for free.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{
    ConstitutiveError, Material, MaterialState, StrainVec, StressVec, Tangent,
};

/// Components per material point; fixed by the plane-stress setting.
pub const STRAIN_DIM: usize = 3;

/// Current on-disk checkpoint layout.
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PrnnError {
    #[error("material point {point}: {source}")]
    Point {
        point: usize,
        #[source]
        source: ConstitutiveError,
    },
    #[error("step {step}, material point {point}: {source}")]
    StepPoint {
        step: usize,
        point: usize,
        #[source]
        source: ConstitutiveError,
    },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema version {found}, this build reads {expected}")]
    Schema { found: u32, expected: u32 },
    #[error("checkpoint weight shapes do not match a network with {n_points} material points")]
    Shape { n_points: usize },
    #[error("invalid network configuration: {0}")]
    Config(String),
}

/// Architecture of one network: how many material points populate the layer
/// and which constitutive model they all run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrnnConfig {
    pub n_points: usize,
    /// Always 3 in this plane-stress implementation; stored for checkpoint
    /// compatibility checks.
    pub strain_dim: usize,
    pub material: Material,
}

impl PrnnConfig {
    pub fn new(n_points: usize, material: Material) -> Self {
        Self { n_points, strain_dim: STRAIN_DIM, material }
    }

    pub fn validate(&self) -> Result<(), PrnnError> {
        if self.n_points == 0 {
            return Err(PrnnError::Config("network needs at least one material point".into()));
        }
        if self.strain_dim != STRAIN_DIM {
            return Err(PrnnError::Config(format!(
                "strain dimension {} unsupported, this build is plane-stress only",
                self.strain_dim
            )));
        }
        self.material.validate().map_err(PrnnError::Config)
    }

    /// Width of the material layer, `3 * n_points`.
    pub fn layer_width(&self) -> usize {
        STRAIN_DIM * self.n_points
    }
}

/// Trainable weights. The decoder is stored pre-softplus; apply
/// [`PrnnParams::effective_decoder`] before multiplying stresses.
#[derive(Clone, Debug, PartialEq)]
pub struct PrnnParams {
    /// `(3m x 3)`: macro strain in, local strains out.
    pub w_encoder: DMatrix<f64>,
    /// `(3 x 3m)`, pre-softplus: local stresses in, macro stress out.
    pub w_decoder_raw: DMatrix<f64>,
}

impl PrnnParams {
    pub fn effective_decoder(&self) -> DMatrix<f64> {
        self.w_decoder_raw.map(softplus)
    }

    /// Element-wise derivative of the effective decoder with respect to the
    /// raw weights; the chain-rule factor for decoder gradients.
    pub fn decoder_sensitivity(&self) -> DMatrix<f64> {
        self.w_decoder_raw.map(softplus_prime)
    }
}

/// History carried between steps: one constitutive state per material point.
#[derive(Clone, Debug, PartialEq)]
pub struct PrnnState {
    pub states: Vec<MaterialState>,
}

impl PrnnState {
    pub fn virgin(n_points: usize) -> Self {
        Self { states: vec![MaterialState::default(); n_points] }
    }
}

/// Everything one forward step produced, recorded for backpropagation.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub macro_strain: StrainVec,
    /// Encoder output, `3m`.
    pub local_strains: DVector<f64>,
    /// Material-layer output, `3m`.
    pub local_stresses: DVector<f64>,
    /// Consistent tangent of each point at this step.
    pub tangents: Vec<Tangent>,
    pub states_before: Vec<MaterialState>,
    pub states_after: Vec<MaterialState>,
    /// Whether each point took the plastic branch here; finite-difference
    /// probes straddling a branch flip are meaningless, so consumers check.
    pub plastic: Vec<bool>,
    pub macro_stress: StressVec,
}

impl StepRecord {
    pub fn state_after(&self) -> PrnnState {
        PrnnState { states: self.states_after.clone() }
    }
}

/// Step-by-step record of one sequence evaluation.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub steps: Vec<StepRecord>,
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic sigmoid.
pub fn softplus_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on y > 0: `ln(e^y - 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0, "softplus is positive, cannot invert {y}");
    y.exp_m1().ln()
}

/// Fresh weights for a given architecture. Encoder entries are Glorot
/// uniform over `(-sqrt(6/(3 + 3m)), +)`. Raw decoder entries sit at
/// `softplus^-1(1/m)` plus small uniform noise, so each output channel
/// starts as roughly an average over the m points with weights summing
/// to about one.
pub fn init_params(config: &PrnnConfig, seed: u64) -> PrnnParams {
    let m = config.n_points;
    let width = config.layer_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bound = (6.0 / (STRAIN_DIM + width) as f64).sqrt();
    let mut w_encoder = DMatrix::zeros(width, STRAIN_DIM);
    for i in 0..width {
        for j in 0..STRAIN_DIM {
            w_encoder[(i, j)] = rng.gen_range(-bound..bound);
        }
    }

    let base = softplus_inv(1.0 / m as f64);
    let mut w_decoder_raw = DMatrix::zeros(STRAIN_DIM, width);
    for i in 0..STRAIN_DIM {
        for j in 0..width {
            w_decoder_raw[(i, j)] = base + rng.gen_range(-0.02..0.02);
        }
    }

    PrnnParams { w_encoder, w_decoder_raw }
}

/// One recurrent step: encode the macro strain, update every material point
/// against its own history, decode the local stresses.
pub fn forward_step(
    config: &PrnnConfig,
    params: &PrnnParams,
    macro_strain: &StrainVec,
    state: &PrnnState,
) -> Result<StepRecord, PrnnError> {
    let m = config.n_points;
    debug_assert_eq!(state.states.len(), m);
    let local_strains = &params.w_encoder * macro_strain;

    let mut local_stresses = DVector::zeros(config.layer_width());
    let mut tangents = Vec::with_capacity(m);
    let mut states_after = Vec::with_capacity(m);
    let mut plastic = Vec::with_capacity(m);
    for j in 0..m {
        let eps_j = StrainVec::new(
            local_strains[3 * j],
            local_strains[3 * j + 1],
            local_strains[3 * j + 2],
        );
        let resp = config
            .material
            .update(&eps_j, &state.states[j])
            .map_err(|source| PrnnError::Point { point: j, source })?;
        local_stresses
            .rows_mut(3 * j, 3)
            .copy_from(&resp.stress);
        plastic.push(resp.new_state.eps_p_eq > state.states[j].eps_p_eq);
        tangents.push(resp.tangent);
        states_after.push(resp.new_state);
    }

    let macro_stress_dyn = params.effective_decoder() * &local_stresses;
    let macro_stress = StressVec::new(macro_stress_dyn[0], macro_stress_dyn[1], macro_stress_dyn[2]);

    Ok(StepRecord {
        macro_strain: *macro_strain,
        local_strains,
        local_stresses,
        tangents,
        states_before: state.states.clone(),
        states_after,
        plastic,
        macro_stress,
    })
}

/// Runs a strain path from the virgin state, returning the stress at every
/// step plus the full trace for training.
pub fn forward_sequence(
    config: &PrnnConfig,
    params: &PrnnParams,
    strains: &[StrainVec],
) -> Result<(Vec<StressVec>, ForwardTrace), PrnnError> {
    let mut state = PrnnState::virgin(config.n_points);
    let mut stresses = Vec::with_capacity(strains.len());
    let mut trace = ForwardTrace { steps: Vec::with_capacity(strains.len()) };
    for (t, strain) in strains.iter().enumerate() {
        let record = forward_step(config, params, strain, &state).map_err(|e| match e {
            PrnnError::Point { point, source } => PrnnError::StepPoint { step: t, point, source },
            other => other,
        })?;
        state = record.state_after();
        stresses.push(record.macro_stress);
        trace.steps.push(record);
    }
    Ok((stresses, trace))
}

/// Macroscopic consistent tangent d(macro stress)/d(macro strain) of one
/// recorded step: decoder times the block-diagonal of point tangents times
/// the encoder, assembled blockwise.
pub fn jacobian(params: &PrnnParams, record: &StepRecord) -> Matrix3<f64> {
    let decoder = params.effective_decoder();
    let mut jac = Matrix3::zeros();
    for (j, tangent) in record.tangents.iter().enumerate() {
        let dec_block = decoder.fixed_view::<3, 3>(0, 3 * j);
        let enc_block = params.w_encoder.fixed_view::<3, 3>(3 * j, 0);
        jac += dec_block * tangent * enc_block;
    }
    jac
}

/// Summary of the run that produced a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// On-disk network snapshot. Weights are stored row-major as nested arrays;
/// JSON round-trips `f64` exactly, so save/load is bit-faithful.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: PrnnConfig,
    pub w_encoder: Vec<Vec<f64>>,
    pub w_decoder_raw: Vec<Vec<f64>>,
    pub meta: Option<TrainingMeta>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Option<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Checkpoint {
    pub fn new(config: PrnnConfig, params: &PrnnParams, meta: Option<TrainingMeta>) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config,
            w_encoder: matrix_to_rows(&params.w_encoder),
            w_decoder_raw: matrix_to_rows(&params.w_decoder_raw),
            meta,
        }
    }

    pub fn params(&self) -> Result<PrnnParams, PrnnError> {
        let width = self.config.layer_width();
        let shape_err = || PrnnError::Shape { n_points: self.config.n_points };
        Ok(PrnnParams {
            w_encoder: rows_to_matrix(&self.w_encoder, width, STRAIN_DIM).ok_or_else(shape_err)?,
            w_decoder_raw: rows_to_matrix(&self.w_decoder_raw, STRAIN_DIM, width)
                .ok_or_else(shape_err)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PrnnError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PrnnError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(PrnnError::Schema {
                found: ckpt.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        ckpt.config.validate()?;
        ckpt.params()?; // shape check up front
        Ok(ckpt)
    }
}
