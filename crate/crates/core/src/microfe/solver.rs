//! Incremental equilibrium solver on the periodic cell and the averaging
//! operators that turn converged micro fields into macroscopic labels.

use nalgebra::{DMatrix, DVector, Matrix3, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use super::mesh::{PbcMap, Phase, RveMesh};
use super::MicroFeError;
use crate::constitutive::{Material, MaterialState, StrainVec, StressVec};
use crate::pathgen::LoadPath;

/// Relative residual drop demanded of the equilibrium iteration.
pub const NEWTON_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 25;
/// How often a non-converging step may be cut in half before the path
/// is declared failed.
pub const MAX_BISECTIONS: usize = 5;

/// Accepts steps whose very first residual is already numerical dust,
/// e.g. a zero-strain step from a virgin state. Units are N/mm.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// Converged state of the cell after one macroscopic strain step.
#[derive(Clone, Debug)]
pub struct MicroSolution {
    pub macro_strain: StrainVec,
    /// Periodic fluctuation field over all nodal components; slaves mirror
    /// masters exactly and the pinned corner is zero.
    pub fluctuation: DVector<f64>,
    pub states: Vec<MaterialState>,
    /// Per-element total strain, macro plus fluctuation gradient.
    pub strains: Vec<StrainVec>,
    pub stresses: Vec<StressVec>,
    pub converged: bool,
    /// Linear solves spent; zero when the initial residual already passed.
    pub iterations: usize,
    pub residual: f64,
}

impl MicroSolution {
    pub fn virgin(mesh: &RveMesh) -> Self {
        let n_el = mesh.elements.len();
        MicroSolution {
            macro_strain: StrainVec::zeros(),
            fluctuation: DVector::zeros(2 * mesh.n_nodes()),
            states: vec![MaterialState::default(); n_el],
            strains: vec![StrainVec::zeros(); n_el],
            stresses: vec![StressVec::zeros(); n_el],
            converged: true,
            iterations: 0,
            residual: 0.0,
        }
    }
}

/// Advances the cell to a new macroscopic strain by Newton iteration on the
/// condensed fluctuation unknowns. Internal states always branch off `prev`,
/// never off a rejected iterate, so the step is incrementally objective.
pub fn solve_step(
    mesh: &RveMesh,
    pbc: &PbcMap,
    macro_strain: StrainVec,
    prev: &MicroSolution,
) -> Result<MicroSolution, MicroFeError> {
    let matrix_mat = Material::matrix_default();
    let fiber_mat = Material::fiber_default();
    let n = pbc.n_free;
    let n_el = mesh.elements.len();

    let mut u = pbc.condense(&prev.fluctuation);
    let mut strains = vec![StrainVec::zeros(); n_el];
    let mut stresses = vec![StressVec::zeros(); n_el];
    let mut states = vec![MaterialState::default(); n_el];
    let mut ref_norm = 0.0;
    let mut solves = 0usize;

    for iter in 0..=MAX_NEWTON_ITER {
        let mut residual = DVector::zeros(n);
        let mut coo = CooMatrix::new(n, n);

        for (idx, el) in mesh.elements.iter().enumerate() {
            let mut dofs = [None; 6];
            let mut ue = Vector6::zeros();
            for (i, &node) in el.nodes.iter().enumerate() {
                for comp in 0..2 {
                    if let Some(k) = pbc.free_dof(node, comp) {
                        dofs[2 * i + comp] = Some(k);
                        ue[2 * i + comp] = u[k];
                    }
                }
            }
            let eps = macro_strain + el.b * ue;
            let mat = match el.phase {
                Phase::Fiber => &fiber_mat,
                Phase::Matrix => &matrix_mat,
            };
            let resp = mat.update(&eps, &prev.states[idx])?;
            let fe = el.b.transpose() * resp.stress * el.area;
            let ke = el.b.transpose() * resp.tangent * el.b * el.area;
            strains[idx] = eps;
            stresses[idx] = resp.stress;
            states[idx] = resp.new_state;

            for i in 0..6 {
                let Some(gi) = dofs[i] else { continue };
                residual[gi] += fe[i];
                for j in 0..6 {
                    if let Some(gj) = dofs[j] {
                        coo.push(gi, gj, ke[(i, j)]);
                    }
                }
            }
        }

        let rnorm = residual.norm();
        if iter == 0 {
            ref_norm = rnorm;
        }
        if rnorm <= NEWTON_TOL * ref_norm || rnorm <= RESIDUAL_FLOOR {
            return Ok(MicroSolution {
                macro_strain,
                fluctuation: pbc.expand(&u),
                states,
                strains,
                stresses,
                converged: true,
                iterations: solves,
                residual: rnorm,
            });
        }
        if iter == MAX_NEWTON_ITER {
            return Err(MicroFeError::NewtonDiverged { iterations: iter, residual: rnorm });
        }

        let csc = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&csc).map_err(|_| MicroFeError::Factorization)?;
        let rhs = DMatrix::from_column_slice(n, 1, (-residual).as_slice());
        let delta = chol.solve(&rhs);
        u += delta.column(0);
        solves += 1;
    }
    unreachable!("loop exits by convergence or divergence");
}

/// Area-weighted average of the element stresses.
pub fn homogenize(mesh: &RveMesh, solution: &MicroSolution) -> StressVec {
    let mut sum = StressVec::zeros();
    let mut area = 0.0;
    for (e, sigma) in mesh.elements.iter().zip(&solution.stresses) {
        sum += sigma * e.area;
        area += e.area;
    }
    sum / area
}

/// Relative mismatch between the macroscopic stress power and the averaged
/// micro stress power over one converged increment. Vanishes at equilibrium
/// for periodic fluctuations, so a large value flags a broken solve.
pub fn hill_mandel_relative_gap(
    mesh: &RveMesh,
    prev: &MicroSolution,
    next: &MicroSolution,
) -> f64 {
    let d_macro = next.macro_strain - prev.macro_strain;
    let macro_power = homogenize(mesh, next).dot(&d_macro);
    let mut micro_power = 0.0;
    let mut area = 0.0;
    for (i, e) in mesh.elements.iter().enumerate() {
        micro_power += e.area * next.stresses[i].dot(&(next.strains[i] - prev.strains[i]));
        area += e.area;
    }
    micro_power /= area;
    (macro_power - micro_power).abs() / macro_power.abs().max(1e-12)
}

/// Homogenized stiffness in the virgin elastic regime, column by column from
/// small strain probes. The probe magnitude keeps every point far below
/// yield, where the response is exactly linear.
pub fn homogenized_elastic_stiffness(
    mesh: &RveMesh,
    pbc: &PbcMap,
) -> Result<Matrix3<f64>, MicroFeError> {
    const PROBE: f64 = 1e-6;
    let virgin = MicroSolution::virgin(mesh);
    let mut d = Matrix3::zeros();
    for j in 0..3 {
        let mut eps = StrainVec::zeros();
        eps[j] = PROBE;
        let sol = solve_step(mesh, pbc, eps, &virgin)?;
        d.set_column(j, &(homogenize(mesh, &sol) / PROBE));
    }
    Ok(d)
}

fn advance(
    mesh: &RveMesh,
    pbc: &PbcMap,
    from: &MicroSolution,
    target: StrainVec,
    depth: usize,
) -> Result<MicroSolution, MicroFeError> {
    match solve_step(mesh, pbc, target, from) {
        Ok(sol) => Ok(sol),
        Err(e @ (MicroFeError::NewtonDiverged { .. } | MicroFeError::Constitutive(_)))
            if depth < MAX_BISECTIONS =>
        {
            let _ = e;
            let mid = (from.macro_strain + target) / 2.0;
            let half = advance(mesh, pbc, from, mid, depth + 1)?;
            advance(mesh, pbc, &half, target, depth + 1)
        }
        Err(e) => Err(e),
    }
}

/// One line of a per-path solver log: cost and final residual of the solve
/// that produced the label for this step.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub iterations: usize,
    pub residual: f64,
}

/// Labels every row of a strain path with the homogenized stress, carrying
/// internal states from step to step. Non-converging steps are retried on
/// half increments before the whole path is declared failed.
pub fn label_path(
    mesh: &RveMesh,
    pbc: &PbcMap,
    path: &LoadPath,
) -> Result<Vec<StressVec>, MicroFeError> {
    label_path_logged(mesh, pbc, path).map(|(labels, _)| labels)
}

/// Like [`label_path`], but also reports per-step solver effort.
pub fn label_path_logged(
    mesh: &RveMesh,
    pbc: &PbcMap,
    path: &LoadPath,
) -> Result<(Vec<StressVec>, Vec<StepLog>), MicroFeError> {
    let mut solution = MicroSolution::virgin(mesh);
    let mut labels = Vec::with_capacity(path.strains.len());
    let mut log = Vec::with_capacity(path.strains.len());
    for (step, target) in path.strains.iter().enumerate() {
        solution = advance(mesh, pbc, &solution, *target, 0)
            .map_err(|e| MicroFeError::PathFailed { step, source: Box::new(e) })?;
        labels.push(homogenize(mesh, &solution));
        log.push(StepLog { step, iterations: solution.iterations, residual: solution.residual });
    }
    Ok((labels, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microfe::{build_rve, DEFAULT_N_DIV};
    use crate::pathgen::{proportional_path, random_direction, CurveKind, CurveParams};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn zero_strain_step_from_virgin_is_identically_zero() {
        let (mesh, pbc) = build_rve(4, 0.6, 8, 0).unwrap();
        let sol = solve_step(&mesh, &pbc, StrainVec::zeros(), &MicroSolution::virgin(&mesh))
            .unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.fluctuation.norm(), 0.0);
        assert!(sol.stresses.iter().all(|s| s.norm() == 0.0));
        assert_eq!(homogenize(&mesh, &sol), StressVec::zeros());
    }

    #[test]
    fn homogeneous_cell_carries_a_uniform_field() {
        let (mesh, pbc) = build_rve(0, 0.0, 8, 0).unwrap();
        let virgin = MicroSolution::virgin(&mesh);

        // Elastic probe: homogenization of a uniform field equals the
        // pointwise response, 3.43956 MPa for this modulus pair.
        let eps = Vector3::new(1e-3, 0.0, 0.0);
        let sol = solve_step(&mesh, &pbc, eps, &virgin).unwrap();
        assert!(sol.fluctuation.norm() < 1e-10, "fluctuation {}", sol.fluctuation.norm());
        let sigma = homogenize(&mesh, &sol);
        assert_relative_eq!(sigma.x, 3.43956, epsilon = 1e-4);
        let point = Material::matrix_default()
            .update(&eps, &MaterialState::default())
            .unwrap()
            .stress;
        assert!((sigma - point).norm() < 1e-10);

        // Deep into plasticity the field must stay uniform as well.
        let eps_p = Vector3::new(2e-2, 0.0, 0.0);
        let sol_p = solve_step(&mesh, &pbc, eps_p, &virgin).unwrap();
        assert!(sol_p.fluctuation.norm() < 1e-10);
        for e in &sol_p.strains {
            assert!((e - eps_p).norm() < 1e-12);
        }
        // Hardening saturates within a few eps_ref, so even a deep probe
        // accumulates only ~2e-4 equivalent plastic strain.
        assert!(sol_p.states[0].eps_p_eq > 1e-4, "expected a plastic probe");
    }

    #[test]
    fn micro_strain_average_equals_applied_macro_strain() {
        let (mesh, pbc) = build_rve(4, 0.6, 16, 0).unwrap();
        let eps = Vector3::new(8e-3, -3e-3, 6e-3);
        let sol = solve_step(&mesh, &pbc, eps, &MicroSolution::virgin(&mesh)).unwrap();
        let mut avg = StrainVec::zeros();
        let mut area = 0.0;
        for (e, strain) in mesh.elements.iter().zip(&sol.strains) {
            avg += strain * e.area;
            area += e.area;
        }
        avg /= area;
        assert!((avg - eps).norm() < 1e-10, "strain average off by {}", (avg - eps).norm());
        assert!(sol.states.iter().any(|s| s.eps_p_eq > 0.0), "probe should yield somewhere");
    }

    #[test]
    fn elastic_stiffness_sits_between_reuss_and_voigt_bounds() {
        let (mesh, pbc) = build_rve(4, 0.6, 16, 0).unwrap();
        let d = homogenized_elastic_stiffness(&mesh, &pbc).unwrap();
        assert_relative_eq!(d[(0, 1)], d[(1, 0)], max_relative = 1e-6);

        let vf = mesh.measured_vf;
        let d_f = Material::fiber_default().elastic_props().plane_stress_stiffness();
        let d_m = Material::matrix_default().elastic_props().plane_stress_stiffness();
        let voigt = d_f * vf + d_m * (1.0 - vf);
        let reuss = (d_f.try_inverse().unwrap() * vf + d_m.try_inverse().unwrap() * (1.0 - vf))
            .try_inverse()
            .unwrap();
        for probe in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, -0.5, 0.25),
        ] {
            let e_hom = (probe.transpose() * d * probe)[0];
            let e_voigt = (probe.transpose() * voigt * probe)[0];
            let e_reuss = (probe.transpose() * reuss * probe)[0];
            assert!(
                e_reuss * (1.0 - 1e-9) <= e_hom && e_hom <= e_voigt * (1.0 + 1e-9),
                "energy {e_hom} outside [{e_reuss}, {e_voigt}]"
            );
        }
    }

    #[test]
    fn equilibrium_satisfies_hill_mandel_and_periodicity() {
        let (mesh, pbc) = build_rve(4, 0.6, 8, 0).unwrap();
        let mut sol = MicroSolution::virgin(&mesh);
        let step = Vector3::new(4e-3, 1e-3, 2e-3);
        for k in 1..=3 {
            let next = solve_step(&mesh, &pbc, step * k as f64, &sol).unwrap();
            let gap = hill_mandel_relative_gap(&mesh, &sol, &next);
            assert!(gap < 1e-6, "stress power gap {gap} at step {k}");
            for p in &pbc.pairs {
                assert_eq!(next.fluctuation[2 * p.slave], next.fluctuation[2 * p.master]);
                assert_eq!(
                    next.fluctuation[2 * p.slave + 1],
                    next.fluctuation[2 * p.master + 1]
                );
            }
            assert!(next.residual <= NEWTON_TOL * 1.0_f64.max(next.residual));
            sol = next;
        }
        assert!(sol.states.iter().any(|s| s.eps_p_eq > 0.0));
    }

    #[test]
    fn unloading_after_plastic_flow_follows_the_elastic_stiffness() {
        let (mesh, pbc) = build_rve(4, 0.6, 8, 0).unwrap();
        let d_el = homogenized_elastic_stiffness(&mesh, &pbc).unwrap();

        let direction = Vector3::new(1.0, 0.0, 0.0);
        let mut sol = MicroSolution::virgin(&mesh);
        for k in 1..=20 {
            sol = solve_step(&mesh, &pbc, direction * (1e-3 * k as f64), &sol).unwrap();
        }
        assert!(sol.states.iter().any(|s| s.eps_p_eq > 1e-4), "peak must be plastic");
        let sigma_peak = homogenize(&mesh, &sol);

        let d_eps = direction * -1e-4;
        let unloaded = solve_step(&mesh, &pbc, sol.macro_strain + d_eps, &sol).unwrap();
        let d_sigma = homogenize(&mesh, &unloaded) - sigma_peak;
        let predicted = d_el * d_eps;
        let rel = (d_sigma - predicted).norm() / predicted.norm();
        assert!(rel < 0.01, "unloading secant deviates from elastic stiffness by {rel}");
    }

    #[test]
    fn labeling_is_deterministic_and_starts_at_zero() {
        let (mesh, pbc) = build_rve(4, 0.6, 8, 0).unwrap();
        let params = CurveParams { n_steps: 10, ..CurveParams::default() };
        let path = proportional_path(CurveKind::RandomRamp, &params, &random_direction(42), 42);
        let a = label_path(&mesh, &pbc, &path).unwrap();
        let b = label_path(&mesh, &pbc, &path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), path.strains.len());
        assert_eq!(a[0], StressVec::zeros());
        assert!(a.last().unwrap().norm() > 0.0);
    }


    #[test]
    fn one_refinement_moves_elastic_stiffness_by_under_two_percent() {
        let (coarse_mesh, coarse_pbc) = build_rve(4, 0.6, DEFAULT_N_DIV, 0).unwrap();
        let (fine_mesh, fine_pbc) = build_rve(4, 0.6, 2 * DEFAULT_N_DIV, 0).unwrap();
        let d_c = homogenized_elastic_stiffness(&coarse_mesh, &coarse_pbc).unwrap();
        let d_f = homogenized_elastic_stiffness(&fine_mesh, &fine_pbc).unwrap();
        let rel = (d_f - d_c).norm() / d_c.norm();
        assert!(rel < 0.02, "refinement moved stiffness by {rel}");
    }
}
