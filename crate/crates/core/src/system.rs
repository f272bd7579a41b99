//! Shared domain types: phase-space points, the named Hamiltonian family,
//! the system specification, Lorentzian smoothing and configuration validation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point x = (q, p) in 2N-dimensional phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() || q.is_empty() {
            return Err(Error::Invalid(format!(
                "q and p must have equal positive length (got {} and {})",
                q.len(),
                p.len()
            )));
        }
        if !q.iter().chain(p.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("PhasePoint"));
        }
        Ok(Self { q, p })
    }

    /// 1-D convenience constructor.
    pub fn one(q: f64, p: f64) -> Self {
        Self { q: vec![q], p: vec![p] }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// Flatten to the [q..., p...] vector used by the integrators.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.dof(), self.q.iter().chain(self.p.iter()).copied())
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        Self { q: v.as_slice()[..n].to_vec(), p: v.as_slice()[n..].to_vec() }
    }

    pub fn dist(&self, other: &Self) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

/// Smooth phase-space functions with analytic gradients and Hessians.
///
/// The same family serves as intrinsic Hamiltonian and as driving Hamiltonian;
/// every member splits as T(p) + V(q), which the quantum module relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhaseFunction {
    /// ω (p² + q²) / 2, summed over degrees of freedom.
    Harmonic { omega: f64 },
    /// p²/2 + a (q − shift)⁴  (one degree of freedom).
    Quartic { a: f64, shift: f64 },
    /// p²/2 − c2 q² + c4 q⁴  (one degree of freedom).
    DoubleWell { c2: f64, c4: f64 },
    /// p²/2 (free motion; non-compact shells, used for flow checks).
    Free,
    /// ω₁(p₁²+q₁²)/2 + ω₂(p₂²+q₂²)/2 (two degrees of freedom, product system).
    HarmonicPair { omega1: f64, omega2: f64 },
    /// (p₁²+p₂²)/2 + a(q₁⁴+q₂⁴) + c q₁² q₂²  (two degrees of freedom).
    CoupledQuartic { a: f64, coupling: f64 },
    /// Λ = p₁ (translation driver).
    LinearP,
    /// Λ = q₁ (boost driver).
    LinearQ,
}

impl PhaseFunction {
    /// Degrees of freedom this function insists on; `None` means any.
    pub fn required_dof(&self) -> Option<usize> {
        match self {
            PhaseFunction::Harmonic { .. } | PhaseFunction::Free => None,
            PhaseFunction::Quartic { .. } | PhaseFunction::DoubleWell { .. } => Some(1),
            PhaseFunction::HarmonicPair { .. } | PhaseFunction::CoupledQuartic { .. } => Some(2),
            PhaseFunction::LinearP | PhaseFunction::LinearQ => None,
        }
    }

    /// Kinetic part T(p).
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        match self {
            PhaseFunction::Harmonic { omega } => omega * p.iter().map(|v| v * v).sum::<f64>() / 2.0,
            PhaseFunction::Quartic { .. } | PhaseFunction::DoubleWell { .. } | PhaseFunction::Free => {
                p[0] * p[0] / 2.0
            }
            PhaseFunction::HarmonicPair { omega1, omega2 } => {
                omega1 * p[0] * p[0] / 2.0 + omega2 * p[1] * p[1] / 2.0
            }
            PhaseFunction::CoupledQuartic { .. } => (p[0] * p[0] + p[1] * p[1]) / 2.0,
            PhaseFunction::LinearP => p[0],
            PhaseFunction::LinearQ => 0.0,
        }
    }

    /// Potential part V(q).
    pub fn potential(&self, q: &[f64]) -> f64 {
        match self {
            PhaseFunction::Harmonic { omega } => omega * q.iter().map(|v| v * v).sum::<f64>() / 2.0,
            PhaseFunction::Quartic { a, shift } => a * (q[0] - shift).powi(4),
            PhaseFunction::DoubleWell { c2, c4 } => -c2 * q[0] * q[0] + c4 * q[0].powi(4),
            PhaseFunction::Free => 0.0,
            PhaseFunction::HarmonicPair { omega1, omega2 } => {
                omega1 * q[0] * q[0] / 2.0 + omega2 * q[1] * q[1] / 2.0
            }
            PhaseFunction::CoupledQuartic { a, coupling } => {
                a * (q[0].powi(4) + q[1].powi(4)) + coupling * q[0] * q[0] * q[1] * q[1]
            }
            PhaseFunction::LinearP => 0.0,
            PhaseFunction::LinearQ => q[0],
        }
    }

    pub fn eval(&self, x: &PhasePoint) -> f64 {
        self.kinetic(&x.p) + self.potential(&x.q)
    }

    /// Gradient in the [∂/∂q..., ∂/∂p...] ordering.
    pub fn gradient(&self, x: &PhasePoint) -> DVector<f64> {
        let n = x.dof();
        let mut g = DVector::zeros(2 * n);
        match self {
            PhaseFunction::Harmonic { omega } => {
                for i in 0..n {
                    g[i] = omega * x.q[i];
                    g[n + i] = omega * x.p[i];
                }
            }
            PhaseFunction::Quartic { a, shift } => {
                g[0] = 4.0 * a * (x.q[0] - shift).powi(3);
                g[n] = x.p[0];
            }
            PhaseFunction::DoubleWell { c2, c4 } => {
                g[0] = -2.0 * c2 * x.q[0] + 4.0 * c4 * x.q[0].powi(3);
                g[n] = x.p[0];
            }
            PhaseFunction::Free => {
                g[n] = x.p[0];
            }
            PhaseFunction::HarmonicPair { omega1, omega2 } => {
                g[0] = omega1 * x.q[0];
                g[1] = omega2 * x.q[1];
                g[n] = omega1 * x.p[0];
                g[n + 1] = omega2 * x.p[1];
            }
            PhaseFunction::CoupledQuartic { a, coupling } => {
                g[0] = 4.0 * a * x.q[0].powi(3) + 2.0 * coupling * x.q[0] * x.q[1] * x.q[1];
                g[1] = 4.0 * a * x.q[1].powi(3) + 2.0 * coupling * x.q[1] * x.q[0] * x.q[0];
                g[n] = x.p[0];
                g[n + 1] = x.p[1];
            }
            PhaseFunction::LinearP => {
                g[n] = 1.0;
            }
            PhaseFunction::LinearQ => {
                g[0] = 1.0;
            }
        }
        g
    }

    /// Hessian in the same [q..., p...] ordering.
    pub fn hessian(&self, x: &PhasePoint) -> DMatrix<f64> {
        let n = x.dof();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        match self {
            PhaseFunction::Harmonic { omega } => {
                for i in 0..2 * n {
                    h[(i, i)] = *omega;
                }
            }
            PhaseFunction::Quartic { a, shift } => {
                h[(0, 0)] = 12.0 * a * (x.q[0] - shift).powi(2);
                h[(n, n)] = 1.0;
            }
            PhaseFunction::DoubleWell { c2, c4 } => {
                h[(0, 0)] = -2.0 * c2 + 12.0 * c4 * x.q[0] * x.q[0];
                h[(n, n)] = 1.0;
            }
            PhaseFunction::Free => {
                h[(n, n)] = 1.0;
            }
            PhaseFunction::HarmonicPair { omega1, omega2 } => {
                h[(0, 0)] = *omega1;
                h[(1, 1)] = *omega2;
                h[(n, n)] = *omega1;
                h[(n + 1, n + 1)] = *omega2;
            }
            PhaseFunction::CoupledQuartic { a, coupling } => {
                h[(0, 0)] = 12.0 * a * x.q[0] * x.q[0] + 2.0 * coupling * x.q[1] * x.q[1];
                h[(1, 1)] = 12.0 * a * x.q[1] * x.q[1] + 2.0 * coupling * x.q[0] * x.q[0];
                h[(0, 1)] = 4.0 * coupling * x.q[0] * x.q[1];
                h[(1, 0)] = h[(0, 1)];
                h[(n, n)] = 1.0;
                h[(n + 1, n + 1)] = 1.0;
            }
            PhaseFunction::LinearP | PhaseFunction::LinearQ => {}
        }
        h
    }

    /// Canonical text form, used for cache keys and record files.
    pub fn describe(&self) -> String {
        match self {
            PhaseFunction::Harmonic { omega } => format!("harmonic(omega={omega:.17e})"),
            PhaseFunction::Quartic { a, shift } => format!("quartic(a={a:.17e},shift={shift:.17e})"),
            PhaseFunction::DoubleWell { c2, c4 } => format!("double_well(c2={c2:.17e},c4={c4:.17e})"),
            PhaseFunction::Free => "free".to_string(),
            PhaseFunction::HarmonicPair { omega1, omega2 } => {
                format!("harmonic_pair(omega1={omega1:.17e},omega2={omega2:.17e})")
            }
            PhaseFunction::CoupledQuartic { a, coupling } => {
                format!("coupled_quartic(a={a:.17e},coupling={coupling:.17e})")
            }
            PhaseFunction::LinearP => "linear_p".to_string(),
            PhaseFunction::LinearQ => "linear_q".to_string(),
        }
    }
}

/// The immutable pair (H, Λ) plus ħ that every computation consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub hamiltonian: PhaseFunction,
    pub driver: PhaseFunction,
    pub hbar: f64,
    pub dof: usize,
}

impl SystemSpec {
    pub fn new(hamiltonian: PhaseFunction, driver: PhaseFunction, hbar: f64, dof: usize) -> Result<Self> {
        let spec = Self { hamiltonian, driver, hbar, dof };
        let report = validate_system(&spec);
        if !report.ok() {
            return Err(Error::Invalid(report.failures.join("; ")));
        }
        Ok(spec)
    }

    pub fn describe(&self) -> String {
        format!(
            "H={};L={};hbar={:.17e};dof={}",
            self.hamiltonian.describe(),
            self.driver.describe(),
            self.hbar,
            self.dof
        )
    }
}

/// Lorentzian energy window width ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingWindow {
    pub epsilon: f64,
}

impl SmoothingWindow {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Invalid(format!("epsilon must be positive and finite (got {epsilon})")));
        }
        Ok(Self { epsilon })
    }
}

/// One evaluation point (E, E', τ) of the transition density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionQuery {
    pub e: f64,
    pub e_prime: f64,
    pub tau: f64,
    pub window: SmoothingWindow,
}

impl TransitionQuery {
    pub fn new(e: f64, e_prime: f64, tau: f64, window: SmoothingWindow) -> Result<Self> {
        if ![e, e_prime, tau].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("TransitionQuery"));
        }
        Ok(Self { e, e_prime, tau, window })
    }

    pub fn epsilon(&self) -> f64 {
        self.window.epsilon
    }
}

/// The smoothing window δ_ε(E) = ε / (π (ε² + E²)).
pub fn lorentzian_delta(e: f64, window: SmoothingWindow) -> Result<f64> {
    if !e.is_finite() {
        return Err(Error::NonFinite("lorentzian_delta"));
    }
    Ok(lorentzian(e, window.epsilon))
}

/// Unchecked inner kernel for hot loops (ε > 0 assumed).
#[inline]
pub(crate) fn lorentzian(e: f64, epsilon: f64) -> f64 {
    epsilon / (std::f64::consts::PI * (epsilon * epsilon + e * e))
}

/// Outcome of [`validate_system`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub failures: Vec<String>,
    pub max_gradient_error: f64,
    pub worst_point: Option<PhasePoint>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares a claimed gradient against central finite differences at 100
/// seeded random points in the box [-2, 2]^{2N}. Returns the worst relative
/// error, its location, and a failure message when the 1e-6 bound is exceeded.
pub fn gradient_consistency<F, G>(eval: F, gradient: G, dof: usize) -> (f64, Option<PhasePoint>, Option<String>)
where
    F: Fn(&PhasePoint) -> f64,
    G: Fn(&PhasePoint) -> DVector<f64>,
{
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let h = 1e-5;
    let mut max_err = 0.0;
    let mut worst = None;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dof).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p: Vec<f64> = (0..dof).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = PhasePoint { q, p };
        let analytic = gradient(&x);
        let scale = analytic.norm().max(1.0);
        for i in 0..2 * dof {
            let mut plus = x.clone();
            let mut minus = x.clone();
            if i < dof {
                plus.q[i] += h;
                minus.q[i] -= h;
            } else {
                plus.p[i - dof] += h;
                minus.p[i - dof] -= h;
            }
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / scale;
            if err > max_err {
                max_err = err;
                worst = Some(x.clone());
            }
            if err > 1e-6 {
                let msg = format!(
                    "gradient component {i} disagrees with finite differences \
                     (relative error {err:.3e} at q={:?}, p={:?})",
                    x.q, x.p
                );
                return (max_err, worst, Some(msg));
            }
        }
    }
    (max_err, worst, None)
}

/// Checks ħ > 0, N ≥ 1, dof compatibility, and analytic-vs-central-difference
/// gradient consistency at 100 seeded random points in the box [-2, 2]^{2N}.
pub fn validate_system(spec: &SystemSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !(spec.hbar > 0.0) || !spec.hbar.is_finite() {
        report.failures.push(format!("hbar must be positive (got {})", spec.hbar));
    }
    if spec.dof < 1 {
        report.failures.push("dof must be at least 1".to_string());
    }
    for (label, f) in [("hamiltonian", &spec.hamiltonian), ("driver", &spec.driver)] {
        if let Some(required) = f.required_dof() {
            if required != spec.dof {
                report.failures.push(format!(
                    "{label} {} requires dof {}, spec has {}",
                    f.describe(),
                    required,
                    spec.dof
                ));
            }
        }
    }
    if !report.failures.is_empty() {
        return report;
    }

    for (label, f) in [("hamiltonian", &spec.hamiltonian), ("driver", &spec.driver)] {
        let (max_err, worst, failure) =
            gradient_consistency(|x| f.eval(x), |x| f.gradient(x), spec.dof);
        if max_err > report.max_gradient_error {
            report.max_gradient_error = max_err;
            report.worst_point = worst;
        }
        if let Some(msg) = failure {
            report.failures.push(format!("{label}: {msg}"));
            return report;
        }
    }
    report
}
