//! Plane-stress constitutive models for the two composite phases: linear
//! elasticity (fibers) and J2 plasticity with isotropic exponential hardening
//! (matrix).
//!
//! Strain and stress are 3-component Voigt vectors `(xx, yy, xy)` with
//! engineering shear strain, so `stress . strain` is work-conjugate without
//! extra factors. Updates are pure functions of the total strain and the
//! previous internal state; callers own the state and commit the returned one.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voigt strain `(eps_xx, eps_yy, gamma_xy)`, engineering shear.
pub type StrainVec = Vector3<f64>;
/// Voigt stress `(sigma_xx, sigma_yy, sigma_xy)` in MPa.
pub type StressVec = Vector3<f64>;
/// Algorithmic stiffness d(stress)/d(strain), MPa.
pub type Tangent = Matrix3<f64>;

/// Number of scalar internal variables in [`MaterialState`].
pub const N_INT_VAR: usize = 5;

/// Relative tolerance on the return-mapping residual |vm - sigma_y|.
pub const RETURN_TOL: f64 = 1e-10;
/// Relative tolerance on the trial yield check; looser than [`RETURN_TOL`] so
/// a re-evaluation at a converged point stays on the elastic branch.
pub const YIELD_TOL: f64 = 1e-8;
/// Iteration cap for the local return-mapping Newton loop.
pub const MAX_LOCAL_ITER: usize = 50;

static CALL_COUNT: AtomicU64 = AtomicU64::new(0);

/// Total number of constitutive updates since the last reset, across threads.
/// Used to compare surrogate cost against the full-field solver.
pub fn material_call_count() -> u64 {
    CALL_COUNT.load(Ordering::Relaxed)
}

pub fn reset_material_call_count() {
    CALL_COUNT.store(0, Ordering::Relaxed);
}

#[derive(Debug, Error)]
pub enum ConstitutiveError {
    #[error(
        "return mapping did not converge in {iterations} iterations \
         (trial von Mises stress {trial_vm:.4} MPa); reduce the strain increment"
    )]
    ReturnMapDiverged { iterations: usize, trial_vm: f64 },
}

/// Isotropic linear elastic constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticProps {
    /// Young's modulus, MPa.
    pub young: f64,
    /// Poisson's ratio, dimensionless.
    pub poisson: f64,
}

impl ElasticProps {
    pub fn new(young: f64, poisson: f64) -> Self {
        let props = Self { young, poisson };
        props.validate().expect("invalid elastic constants");
        props
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.young > 0.0 && self.young.is_finite()) {
            return Err(format!("Young's modulus must be positive, got {}", self.young));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(format!("Poisson's ratio must lie in [0, 0.5), got {}", self.poisson));
        }
        Ok(())
    }

    pub fn shear_modulus(&self) -> f64 {
        self.young / (2.0 * (1.0 + self.poisson))
    }

    /// Plane-stress stiffness: D00 = D11 = E/(1-nu^2), D01 = nu E/(1-nu^2),
    /// D22 = E/(2(1+nu)) acting on engineering shear.
    pub fn plane_stress_stiffness(&self) -> Tangent {
        let f = self.young / (1.0 - self.poisson * self.poisson);
        Matrix3::new(
            f,
            self.poisson * f,
            0.0,
            self.poisson * f,
            f,
            0.0,
            0.0,
            0.0,
            self.shear_modulus(),
        )
    }
}

/// Saturating exponential isotropic hardening
/// `sigma_y(k) = sigma_inf - delta_sigma * exp(-k / eps_ref)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardeningLaw {
    /// Saturation yield stress, MPa.
    pub sigma_inf: f64,
    /// Drop from saturation to the initial yield stress, MPa.
    pub delta_sigma: f64,
    /// Reference equivalent plastic strain controlling the saturation rate.
    pub eps_ref: f64,
}

impl HardeningLaw {
    pub fn validate(&self) -> Result<(), String> {
        if !self.sigma_inf.is_finite() || self.sigma_inf <= 0.0 {
            return Err(format!("sigma_inf must be positive, got {}", self.sigma_inf));
        }
        if self.delta_sigma.is_nan() || self.delta_sigma < 0.0 || self.delta_sigma >= self.sigma_inf
        {
            return Err(format!(
                "delta_sigma must lie in [0, sigma_inf), got {}",
                self.delta_sigma
            ));
        }
        if !self.eps_ref.is_finite() || self.eps_ref <= 0.0 {
            return Err(format!("eps_ref must be positive, got {}", self.eps_ref));
        }
        Ok(())
    }

    /// Current yield stress at equivalent plastic strain `eps_p_eq`.
    pub fn yield_stress(&self, eps_p_eq: f64) -> f64 {
        debug_assert!(
            eps_p_eq >= -1e-3,
            "equivalent plastic strain must not be negative, got {eps_p_eq}"
        );
        self.sigma_inf - self.delta_sigma * (-eps_p_eq / self.eps_ref).exp()
    }

    /// Hardening modulus d(sigma_y)/d(eps_p_eq).
    pub fn hardening_modulus(&self, eps_p_eq: f64) -> f64 {
        self.delta_sigma / self.eps_ref * (-eps_p_eq / self.eps_ref).exp()
    }
}

/// Internal variables of the J2 model. The elastic model carries none and
/// leaves this untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaterialState {
    /// In-plane plastic strain, Voigt with engineering shear.
    pub plastic_strain: StrainVec,
    /// Out-of-plane plastic strain; tracked so plastic flow stays isochoric.
    pub plastic_strain_zz: f64,
    /// Accumulated equivalent plastic strain, monotonically non-decreasing.
    pub eps_p_eq: f64,
}

impl MaterialState {
    /// Flattens to `[eps_p_xx, eps_p_yy, gamma_p_xy, eps_p_zz, eps_p_eq]`,
    /// the layout finite-difference probes perturb entry by entry.
    pub fn to_array(&self) -> [f64; N_INT_VAR] {
        [
            self.plastic_strain.x,
            self.plastic_strain.y,
            self.plastic_strain.z,
            self.plastic_strain_zz,
            self.eps_p_eq,
        ]
    }

    pub fn from_array(a: [f64; N_INT_VAR]) -> Self {
        Self {
            plastic_strain: Vector3::new(a[0], a[1], a[2]),
            plastic_strain_zz: a[3],
            eps_p_eq: a[4],
        }
    }

    /// Trace of the full 3D plastic strain tensor; zero up to round-off.
    pub fn plastic_trace(&self) -> f64 {
        self.plastic_strain.x + self.plastic_strain.y + self.plastic_strain_zz
    }
}

/// Everything a single constitutive update produces.
#[derive(Clone, Debug)]
pub struct MaterialResponse {
    pub stress: StressVec,
    pub new_state: MaterialState,
    /// Consistent algorithmic tangent of this update.
    pub tangent: Tangent,
}

/// A phase model: parameters plus the update rule. Serialized into network
/// checkpoints and mesh snapshots, so variants are tagged by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Material {
    Elastic { props: ElasticProps },
    J2 { props: ElasticProps, hardening: HardeningLaw },
}

impl Material {
    /// Carbon-fiber phase: stiff, elastic.
    pub fn fiber_default() -> Self {
        Material::Elastic { props: ElasticProps { young: 74_000.0, poisson: 0.2 } }
    }

    /// Epoxy matrix phase: J2 with saturating hardening. Initial yield
    /// stress is `sigma_inf - delta_sigma` = 31.2 MPa, saturating at 64.8.
    pub fn matrix_default() -> Self {
        Material::J2 {
            props: ElasticProps { young: 3130.0, poisson: 0.3 },
            hardening: HardeningLaw {
                sigma_inf: 64.8,
                delta_sigma: 33.6,
                eps_ref: 0.0003407,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Material::Elastic { props } => props.validate(),
            Material::J2 { props, hardening } => {
                props.validate()?;
                hardening.validate()
            }
        }
    }

    pub fn elastic_props(&self) -> &ElasticProps {
        match self {
            Material::Elastic { props } | Material::J2 { props, .. } => props,
        }
    }

    /// Evaluates the model at a total strain given the previous state.
    /// Bumps the global call counter exactly once.
    pub fn update(
        &self,
        strain: &StrainVec,
        state: &MaterialState,
    ) -> Result<MaterialResponse, ConstitutiveError> {
        match self {
            Material::Elastic { props } => {
                let mut resp = update_elastic(props, strain);
                // An elastic phase has no internal variables of its own;
                // echo the caller's state so sequences can thread it blindly.
                resp.new_state = *state;
                Ok(resp)
            }
            Material::J2 { props, hardening } => update_j2(props, hardening, strain, state),
        }
    }
}

/// Von Mises equivalent stress in plane stress.
pub fn von_mises(s: &StressVec) -> f64 {
    (s.x * s.x - s.x * s.y + s.y * s.y + 3.0 * s.z * s.z).sqrt()
}

/// Linear elastic update; stateless and exact.
pub fn update_elastic(props: &ElasticProps, strain: &StrainVec) -> MaterialResponse {
    CALL_COUNT.fetch_add(1, Ordering::Relaxed);
    let d = props.plane_stress_stiffness();
    MaterialResponse {
        stress: d * strain,
        new_state: MaterialState::default(),
        tangent: d,
    }
}

/// J2 update with a plane-stress-projected return mapping.
///
/// The trial stress is elastic. If its von Mises norm exceeds the current
/// yield stress, a scalar Newton iteration finds the plastic multiplier
/// `dgamma` such that the mapped-back stress sits on the hardened yield
/// surface. The projection `A = (I + dgamma D P)^{-1} D` is evaluated in
/// closed form: `D` and the deviatoric-projection matrix `P` share the
/// eigenvectors `(1,1,0)`, `(1,-1,0)`, `(0,0,1)`, so the update diagonalizes
/// into a hydrostatic-like mode scaled by `1 + dgamma E/(3(1-nu))` and two
/// deviatoric modes scaled by `1 + 2 G dgamma`.
pub fn update_j2(
    props: &ElasticProps,
    law: &HardeningLaw,
    strain: &StrainVec,
    state: &MaterialState,
) -> Result<MaterialResponse, ConstitutiveError> {
    CALL_COUNT.fetch_add(1, Ordering::Relaxed);
    let d_el = props.plane_stress_stiffness();
    let trial = d_el * (strain - state.plastic_strain);
    let sy_n = law.yield_stress(state.eps_p_eq);
    let vm_trial = von_mises(&trial);
    if vm_trial <= sy_n * (1.0 + YIELD_TOL) {
        return Ok(MaterialResponse {
            stress: trial,
            new_state: *state,
            tangent: d_el,
        });
    }

    let g = props.shear_modulus();
    // Eigenvalue of D P on the (1,1,0) mode; the other two modes see 2G.
    let ka = props.young / (3.0 * (1.0 - props.poisson));
    let s_sum = trial.x + trial.y;
    let s_dif = trial.y - trial.x;
    let s_shr = trial.z;
    // Invariant xi = s^T P s splits over the two mode families.
    let q_sum = s_sum * s_sum / 6.0;
    let q_dev = 0.5 * s_dif * s_dif + 2.0 * s_shr * s_shr;

    let xi_at = |dg: f64| {
        let da = 1.0 + ka * dg;
        let db = 1.0 + 2.0 * g * dg;
        (
            q_sum / (da * da) + q_dev / (db * db),
            -2.0 * ka * q_sum / (da * da * da) - 4.0 * g * q_dev / (db * db * db),
        )
    };

    let mut dg = 0.0;
    let mut converged = false;
    let mut root = 0.0; // sqrt(2 xi / 3), the equivalent-strain rate factor
    let mut eps_eq = state.eps_p_eq;
    for _ in 0..MAX_LOCAL_ITER {
        let (xi, xi_p) = xi_at(dg);
        root = (2.0 / 3.0 * xi).sqrt();
        eps_eq = state.eps_p_eq + dg * root;
        let sy = law.yield_stress(eps_eq);
        if ((1.5 * xi).sqrt() - sy).abs() <= RETURN_TOL * sy {
            converged = true;
            break;
        }
        let h = law.hardening_modulus(eps_eq);
        let f = 0.5 * xi - sy * sy / 3.0;
        let dk_ddg = root + dg * xi_p / (3.0 * root);
        let fp = 0.5 * xi_p - (2.0 / 3.0) * sy * h * dk_ddg;
        dg -= f / fp;
        if !dg.is_finite() {
            break;
        }
        // The residual is positive and decreasing on dg >= 0; a negative
        // iterate only arises from overshoot, so fold it back.
        dg = dg.max(0.0);
    }
    if !converged {
        return Err(ConstitutiveError::ReturnMapDiverged {
            iterations: MAX_LOCAL_ITER,
            trial_vm: vm_trial,
        });
    }

    let da = 1.0 + ka * dg;
    let db = 1.0 + 2.0 * g * dg;
    let sum = s_sum / da;
    let dif = s_dif / db;
    let sxy = s_shr / db;
    let stress = Vector3::new(0.5 * (sum - dif), 0.5 * (sum + dif), sxy);

    // Flow direction n = P stress (engineering-shear layout doubles the
    // shear slot). Out-of-plane flow balances the in-plane trace exactly.
    let flow = Vector3::new(
        (2.0 * stress.x - stress.y) / 3.0,
        (2.0 * stress.y - stress.x) / 3.0,
        2.0 * stress.z,
    );
    let mut new_state = *state;
    new_state.plastic_strain += dg * flow;
    new_state.plastic_strain_zz -= dg * (flow.x + flow.y);
    new_state.eps_p_eq = eps_eq;

    // Consistent tangent: A = (D^{-1} + dgamma P)^{-1} shares the mode
    // decomposition above; the plastic correction is the standard rank-one
    // downdate with hardening terms kept separate because c1 may cross zero
    // at high hardening modulus.
    let a_sum = props.young / (1.0 - props.poisson) / da;
    let a_dev = 2.0 * g / db;
    let a_mat = Matrix3::new(
        0.5 * (a_sum + a_dev),
        0.5 * (a_sum - a_dev),
        0.0,
        0.5 * (a_sum - a_dev),
        0.5 * (a_sum + a_dev),
        0.0,
        0.0,
        0.0,
        g / db,
    );
    let sy = law.yield_stress(eps_eq);
    let h = law.hardening_modulus(eps_eq);
    let an = a_mat * flow;
    let c1 = 1.0 - 4.0 / 9.0 * sy * h * dg / root;
    let c2 = 2.0 / 3.0 * sy * h * root;
    let denom = c1 * flow.dot(&an) + c2;
    let tangent = a_mat - an * an.transpose() * (c1 / denom);

    Ok(MaterialResponse {
        stress,
        new_state,
        tangent,
    })
}

/// Central-difference verification of the consistent tangent. Returns the
/// worst entry-wise relative deviation; regularized so near-zero entries
/// compare absolutely. Probe points must sit away from the elastic-plastic
/// transition or the two branches pollute the difference.
pub fn tangent_fd_check(
    material: &Material,
    strain: &StrainVec,
    state: &MaterialState,
    h: f64,
) -> f64 {
    const EPS_REG: f64 = 1.0; // MPa; stiffness entries are O(1e2..1e4)
    let base = material
        .update(strain, state)
        .expect("tangent check probe failed at the base point");
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let mut ep = *strain;
        let mut em = *strain;
        ep[j] += h;
        em[j] -= h;
        let sp = material.update(&ep, state).expect("tangent check probe failed").stress;
        let sm = material.update(&em, state).expect("tangent check probe failed").stress;
        for i in 0..3 {
            let fd = (sp[i] - sm[i]) / (2.0 * h);
            let dev = (base.tangent[(i, j)] - fd).abs() / (fd.abs() + EPS_REG);
            worst = worst.max(dev);
        }
    }
    worst
}
