//! Full-order micromechanical oracle: a plane-stress finite element solver
//! for a periodic unit cell of elastic fibers in an elastoplastic matrix.
//! It labels macroscopic strain paths with ground-truth homogenized stresses
//! and serves as the reference the surrogate network is measured against.
//!
//! The cell is meshed with constant-strain triangles on a structured grid.
//! Periodicity is enforced by eliminating slave boundary nodes against their
//! masters; the macroscopic strain enters through the affine part of the
//! displacement split, so the unknowns are periodic fluctuations only.

mod mesh;
mod solver;

use thiserror::Error;

use crate::constitutive::ConstitutiveError;

pub use mesh::{
    build_rve, Element, Fiber, Phase, PbcMap, PbcPair, RveMesh, CELL_LENGTH, DEFAULT_N_DIV,
    DEFAULT_N_FIBERS, DEFAULT_VF,
};
pub use solver::{
    hill_mandel_relative_gap, homogenize, homogenized_elastic_stiffness, label_path,
    label_path_logged, solve_step, MicroSolution, StepLog, MAX_BISECTIONS, MAX_NEWTON_ITER,
    NEWTON_TOL,
};

#[derive(Debug, Error)]
pub enum MicroFeError {
    #[error("invalid cell request: {0}")]
    Config(String),
    #[error("fiber placement failed after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("stiffness factorization failed: system is not positive definite")]
    Factorization,
    #[error("equilibrium iteration stalled at residual {residual:.3e} after {iterations} iterations")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("labeling failed at path step {step}: {source}")]
    PathFailed {
        step: usize,
        #[source]
        source: Box<MicroFeError>,
    },
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
}
