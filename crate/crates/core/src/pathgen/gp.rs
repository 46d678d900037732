//! Gaussian-process strain walks. Each component follows an independent GP
//! with a squared-exponential kernel over integer step indices, pinned to
//! zero at step 0 by a prior datum. Sampling is incremental: every accepted
//! value joins the conditioning set before the next step is drawn, so a
//! path is a pure function of the spec and the seed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CurveKind, LoadPath, PathGenError, PathMeta};

/// Diagonal jitter added once if the conditioning Gram matrix fails its
/// Cholesky factorization; the squared-exponential kernel on a dense grid is
/// near-singular by construction.
pub const GP_JITTER: f64 = 1e-10;

/// Spec of the component processes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpSpec {
    /// Kernel lengthscale in step units; larger means smoother paths.
    pub lengthscale: f64,
    /// Kernel variance (sigma_f squared), strain units squared.
    pub variance: f64,
    /// Independent components per step; 3 in plane stress.
    pub n_components: usize,
    pub n_steps: usize,
}

impl Default for GpSpec {
    fn default() -> Self {
        Self {
            lengthscale: 20.0,
            variance: 1e-6,
            n_components: 3,
            n_steps: 60,
        }
    }
}

impl GpSpec {
    pub fn validate(&self) -> Result<(), PathGenError> {
        if !self.lengthscale.is_finite() || self.lengthscale <= 0.0 {
            return Err(PathGenError::Config(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !self.variance.is_finite() || self.variance <= 0.0 {
            return Err(PathGenError::Config(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if self.n_components != 3 {
            return Err(PathGenError::Config(format!(
                "plane stress needs exactly 3 components, got {}",
                self.n_components
            )));
        }
        if self.n_steps == 0 {
            return Err(PathGenError::Config("GP walk needs at least one step".into()));
        }
        Ok(())
    }
}

/// Squared-exponential kernel `variance * exp(-(p-q)^2 / (2 l^2))`.
pub fn se_kernel(variance: f64, lengthscale: f64, p: f64, q: f64) -> f64 {
    let d = p - q;
    variance * (-d * d / (2.0 * lengthscale * lengthscale)).exp()
}

fn cholesky_with_jitter(
    gram: DMatrix<f64>,
    step: usize,
) -> Result<Cholesky<f64, Dyn>, PathGenError> {
    let n = gram.nrows();
    match Cholesky::new(gram.clone()) {
        Some(c) => Ok(c),
        None => {
            let jittered = gram + DMatrix::identity(n, n) * GP_JITTER;
            Cholesky::new(jittered).ok_or(PathGenError::GpCholesky { step })
        }
    }
}

/// Samples one component: values at steps `0..=n_steps`, with the exact zero
/// prior at step 0 already in the conditioning set.
fn sample_component(spec: &GpSpec, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, PathGenError> {
    let mut times = vec![0.0_f64];
    let mut values = vec![0.0_f64];
    let mut out = Vec::with_capacity(spec.n_steps + 1);
    out.push(0.0);
    for t in 1..=spec.n_steps {
        let x = t as f64;
        let k = times.len();
        let gram = DMatrix::from_fn(k, k, |i, j| {
            se_kernel(spec.variance, spec.lengthscale, times[i], times[j])
        });
        let chol = cholesky_with_jitter(gram, t)?;
        let k_star =
            DVector::from_fn(k, |i, _| se_kernel(spec.variance, spec.lengthscale, times[i], x));
        let mean = k_star.dot(&chol.solve(&DVector::from_vec(values.clone())));
        // Conditioning can push the predicted variance below zero by
        // round-off; clamp instead of propagating NaN through sqrt.
        let var = (spec.variance - k_star.dot(&chol.solve(&k_star))).max(0.0);
        let z: f64 = rng.sample(StandardNormal);
        let y = mean + var.sqrt() * z;
        out.push(y);
        times.push(x);
        values.push(y);
    }
    Ok(out)
}

/// Generates one non-proportional walk; components share one seeded stream,
/// drawn component by component.
pub fn gp_walk(spec: &GpSpec, seed: u64) -> Result<LoadPath, PathGenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Vec::with_capacity(spec.n_components);
    for _ in 0..spec.n_components {
        components.push(sample_component(spec, &mut rng)?);
    }
    let strains = (0..=spec.n_steps)
        .map(|t| Vector3::new(components[0][t], components[1][t], components[2][t]))
        .collect();
    Ok(LoadPath {
        meta: PathMeta {
            kind: CurveKind::GpWalk,
            seed,
            n_steps: spec.n_steps,
            step_size: None,
            direction: None,
        },
        strains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_is_variance_at_zero_distance() {
        for x in [0.0, 3.5, 60.0] {
            assert_eq!(se_kernel(1e-6, 20.0, x, x), 1e-6);
        }
        assert!(se_kernel(1e-6, 20.0, 0.0, 60.0) < 1e-6 * 0.02);
    }

    #[test]
    fn walks_start_at_exact_zero_and_are_deterministic() {
        let spec = GpSpec::default();
        let a = gp_walk(&spec, 7).unwrap();
        assert_eq!(a.strains.len(), 61);
        assert_eq!(a.strains[0], Vector3::zeros());
        let b = gp_walk(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(gp_walk(&spec, 8).unwrap().strains, a.strains);
    }

    #[test]
    fn walks_are_smooth_relative_to_the_kernel_scale() {
        let spec = GpSpec::default();
        let sigma_f = spec.variance.sqrt();
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..100 {
            let path = gp_walk(&spec, seed).unwrap();
            for t in 1..path.strains.len() {
                let inc = (path.strains[t] - path.strains[t - 1]).abs();
                total += inc.x + inc.y + inc.z;
                count += 3;
            }
        }
        let mean_increment = total / count as f64;
        // With lengthscale 20 over unit steps, one-step moves are tiny
        // compared to the marginal standard deviation.
        assert!(
            mean_increment < sigma_f / 5.0,
            "mean one-step increment {mean_increment} vs sigma_f {sigma_f}"
        );
        // And the walk actually wanders somewhere.
        assert!(mean_increment > 0.0);
    }

    #[test]
    fn incremental_sampling_matches_joint_posterior_factorization() {
        // Oracle: conditioned on the zero prior at step 0, draw the whole
        // sequence at once as mean + L z with L the lower Cholesky factor of
        // the posterior covariance. Incremental conditioning consumes the
        // same standard-normal draws in the same order, so the sequences
        // must agree up to factorization round-off. A short lengthscale
        // keeps the Gram matrices well-conditioned; at the production
        // lengthscale both routes are noise-limited far above round-off.
        let spec = GpSpec { n_steps: 20, lengthscale: 2.0, ..GpSpec::default() };
        let seed = 13;
        let inc = gp_walk(&spec, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.n_steps;
        for c in 0..3 {
            let cov = DMatrix::from_fn(n, n, |i, j| {
                let (p, q) = ((i + 1) as f64, (j + 1) as f64);
                se_kernel(spec.variance, spec.lengthscale, p, q)
                    - se_kernel(spec.variance, spec.lengthscale, p, 0.0)
                        * se_kernel(spec.variance, spec.lengthscale, 0.0, q)
                        / spec.variance
            });
            let chol = cholesky_with_jitter(cov, 0).unwrap();
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let joint = chol.l() * z;
            let sigma_f = spec.variance.sqrt();
            for t in 0..n {
                let got = inc.strains[t + 1][c];
                assert!(
                    (got - joint[t]).abs() < 1e-6 * sigma_f,
                    "component {c} step {t}: incremental {got} vs joint {}",
                    joint[t]
                );
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = GpSpec { lengthscale: 0.0, ..GpSpec::default() };
        assert!(bad.validate().is_err());
        let bad = GpSpec { n_components: 2, ..GpSpec::default() };
        assert!(bad.validate().is_err());
    }
}
