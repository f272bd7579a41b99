//! N = 2 compound fixed points. For product systems where the driver acts on
//! one factor, the closed compound circuit survives as an isolated fixed
//! point of the composed map
//!
//!   x ↦ Φ_driven^{t'} ( Φ_H^{t} (x) )
//!
//! subject to H(x) = E and H(Φ_H^t(x) | τ) = E'. This module locates such
//! fixed points by a damped Newton iteration in the 2N + 2 unknowns
//! (x, t, t') and reports the reduced stability of the recovered circuit.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{driven_hamiltonian, flow, sample_trajectory, tangent_flow, FlowKind};
use crate::error::{Error, Result};
use crate::orbits::symplectic_area;
use crate::system::{PhasePoint, SystemSpec, TransitionQuery};

/// A converged compound fixed point of the product system.
#[derive(Debug, Clone)]
pub struct SectionFixedPoint {
    pub point: PhasePoint,
    pub t: f64,
    pub t_prime: f64,
    /// ∞-norm of the residual vector at convergence.
    pub residual: f64,
    pub iterations: usize,
    /// ∮ p·dq around the recovered circuit.
    pub action: f64,
    /// Compound monodromy M'(t')·M(t) of the full 2N-dimensional flow.
    pub stability: DMatrix<f64>,
    pub det_one_minus_m: f64,
    pub warnings: Vec<String>,
}

/// Controls for [`product_section_fixed_point`].
#[derive(Debug, Clone, Copy)]
pub struct SectionParams {
    pub max_iters: usize,
    pub residual_tol: f64,
    /// Finite-difference step for the Newton Jacobian.
    pub fd_step: f64,
    /// Samples per circuit leg for the action quadrature.
    pub action_samples: usize,
}

impl Default for SectionParams {
    fn default() -> Self {
        Self { max_iters: 50, residual_tol: 1e-9, fd_step: 1e-6, action_samples: 4096 }
    }
}

fn pack(x: &PhasePoint, t: f64, t_prime: f64) -> DVector<f64> {
    let n = x.dof();
    let mut v = DVector::zeros(2 * n + 2);
    for i in 0..n {
        v[i] = x.q[i];
        v[n + i] = x.p[i];
    }
    v[2 * n] = t;
    v[2 * n + 1] = t_prime;
    v
}

fn unpack(v: &DVector<f64>, n: usize) -> (PhasePoint, f64, f64) {
    let q: Vec<f64> = (0..n).map(|i| v[i]).collect();
    let p: Vec<f64> = (0..n).map(|i| v[n + i]).collect();
    (PhasePoint { q, p }, v[2 * n], v[2 * n + 1])
}

/// Closure-and-energy residual F(x, t, t') ∈ R^{2N+2}:
/// the first 2N components are Φ_driven^{t'}(Φ^t(x)) − x, then H(x) − E and
/// H(Φ^t(x)|τ) − E'.
fn residual_vector(
    v: &DVector<f64>,
    query: &TransitionQuery,
    spec: &SystemSpec,
) -> Result<DVector<f64>> {
    let n = spec.dof;
    let (x, t, t_prime) = unpack(v, n);
    let mid = flow(&x, t, FlowKind::Intrinsic, spec)?;
    let back = flow(&mid, t_prime, FlowKind::Driven { tau: query.tau }, spec)?;
    let mut f = DVector::zeros(2 * n + 2);
    for i in 0..n {
        f[i] = back.q[i] - x.q[i];
        f[n + i] = back.p[i] - x.p[i];
    }
    f[2 * n] = spec.hamiltonian.eval(&x) - query.e;
    f[2 * n + 1] = driven_hamiltonian(&mid, query.tau, spec)? - query.e_prime;
    Ok(f)
}

/// Newton search for a compound fixed point of an N ≥ 2 product system,
/// seeded from an embedded lower-dimensional orbit. Converges when the
/// residual ∞-norm drops below `residual_tol`; a singular Newton matrix or
/// iteration budget exhaustion is a [`Error::NoConvergence`].
pub fn product_section_fixed_point(
    query: &TransitionQuery,
    spec: &SystemSpec,
    seed: &PhasePoint,
    seed_t: f64,
    seed_t_prime: f64,
    params: &SectionParams,
) -> Result<SectionFixedPoint> {
    if spec.dof < 2 {
        return Err(Error::Invalid("product fixed-point search requires N >= 2".into()));
    }
    if seed.dof() != spec.dof {
        return Err(Error::Invalid(format!(
            "seed has {} degrees of freedom, system has {}",
            seed.dof(),
            spec.dof
        )));
    }
    let dim = 2 * spec.dof + 2;
    let mut v = pack(seed, seed_t, seed_t_prime);
    let mut f = residual_vector(&v, query, spec)?;
    let mut warnings = Vec::new();
    let mut iterations = 0usize;
    while f.amax() > params.residual_tol {
        if iterations >= params.max_iters {
            return Err(Error::NoConvergence { iters: iterations, residual: f.amax() });
        }
        // forward-difference Jacobian of the residual map
        let mut jac = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut vp = v.clone();
            let h = params.fd_step * (1.0 + v[j].abs());
            vp[j] += h;
            let fp = residual_vector(&vp, query, spec)?;
            for i in 0..dim {
                jac[(i, j)] = (fp[i] - f[i]) / h;
            }
        }
        let lu = jac.lu();
        let step = lu.solve(&f).ok_or(Error::NoConvergence {
            iters: iterations,
            residual: f.amax(),
        })?;
        // backtracking line search on the residual norm
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let vt = &v - lambda * &step;
            if let Ok(ft) = residual_vector(&vt, query, spec) {
                if ft.amax() < f.amax() || f.amax() <= params.residual_tol {
                    v = vt;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iters: iterations, residual: f.amax() });
        }
        iterations += 1;
    }
    let (x, t, t_prime) = unpack(&v, spec.dof);
    let residual = f.amax();

    // compound stability M'(t')·M(t) of the converged circuit
    let mid = flow(&x, t, FlowKind::Intrinsic, spec)?;
    let m_e = tangent_flow(&x, t, FlowKind::Intrinsic, spec)?;
    let m_ep = tangent_flow(&mid, t_prime, FlowKind::Driven { tau: query.tau }, spec)?;
    let stability = &m_ep.matrix * &m_e.matrix;
    let ident = DMatrix::identity(stability.nrows(), stability.ncols());
    let det_one_minus_m = (&ident - &stability).lu().determinant();
    if det_one_minus_m.abs() < 1e-6 {
        warnings.push(format!(
            "degenerate compound fixed point: |det(Id - M)| = {:.3e}",
            det_one_minus_m.abs()
        ));
    }

    // ∮ p·dq from the two sampled legs
    let leg_e = sample_trajectory(&x, t, FlowKind::Intrinsic, spec, params.action_samples)?;
    let leg_ep = sample_trajectory(
        &mid,
        t_prime,
        FlowKind::Driven { tau: query.tau },
        spec,
        params.action_samples,
    )?;
    let mut curve: Vec<PhasePoint> = leg_e.samples.into_iter().map(|(_, p)| p).collect();
    curve.extend(leg_ep.samples.into_iter().skip(1).map(|(_, p)| p));
    let action = symplectic_area(&curve, 1e-5)?;

    Ok(SectionFixedPoint {
        point: x,
        t,
        t_prime,
        residual,
        iterations,
        action,
        stability,
        det_one_minus_m,
        warnings,
    })
}
