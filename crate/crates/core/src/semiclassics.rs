//! The semiclassical pathway: the transition density as a smooth classical
//! background plus an oscillatory sum over closed compound orbits,
//!
//!   P(E, E', τ) ≈ B(E, E', τ)
//!     + (2^{N−1} / (πħ)^N) Σ_orbits cos(S/ħ + σ) e^{−ε(|t|+|t'|)/ħ}
//!       |det ∂(t,t')/∂(E,E')|^{1/2} |det(Id − M)|^{−1/2},
//!
//! with one cosine per time-reversed pair of orbits (the cosine pairing
//! already carries the orientation factor 2, which is why the prefactor is
//! half of the naive 2^N count of segment orientations). The Maslov-type phase σ
//! carries a per-family constant offset that is fixed once against an exact
//! pathway by [`sigma_calibration`] and then frozen.

use serde::{Deserialize, Serialize};

use crate::dynamics::driven_hamiltonian;
use crate::error::{Error, Result};
use crate::orbits::CompoundOrbit;
use crate::system::{lorentzian_delta, PhasePoint, SystemSpec, TransitionQuery};

/// Which of the independent computations produced a density value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Semiclassical,
    EigenSum,
    DoubleFt,
    ClassicalBackground,
}

impl Pathway {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pathway::Semiclassical => "semiclassical",
            Pathway::EigenSum => "eigen_sum",
            Pathway::DoubleFt => "double_ft",
            Pathway::ClassicalBackground => "classical_background",
        }
    }
}

/// One compound orbit's contribution to the oscillatory sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SCTerm {
    pub t: f64,
    pub t_prime: f64,
    pub winding: (i64, i64),
    pub action: f64,
    /// (2^{N−1}/(πħ)^N)·|det ∂(t,t')/∂(E,E')|^{1/2}·|det(Id−M)|^{−1/2}
    pub amplitude: f64,
    /// S/ħ
    pub phase: f64,
    /// caustic_index·π/2 + family offset
    pub maslov_sigma: f64,
    /// e^{−ε(|t|+|t'|)/ħ}
    pub damping: f64,
    /// amplitude · damping · cos(phase + maslov_sigma)
    pub value: f64,
}

/// A density value with full provenance.
#[derive(Debug, Clone)]
pub struct DensityResult {
    pub query: TransitionQuery,
    pub value: f64,
    pub pathway: Pathway,
    pub terms: Vec<SCTerm>,
    pub warnings: Vec<String>,
}

/// Controls for [`sc_density`].
#[derive(Debug, Clone, Copy)]
pub struct SCParams {
    /// Frozen per-family σ offset (see [`sigma_calibration`]).
    pub sigma_offset: f64,
    /// Orbits with |det(Id − M)| below this are excluded as near-caustic.
    pub caustic_cutoff: f64,
}

impl Default for SCParams {
    fn default() -> Self {
        Self { sigma_offset: 0.0, caustic_cutoff: 1e-6 }
    }
}

/// True for the canonical member of a time-reversed pair: the cosine already
/// combines an orbit with its reversal, so only one of each pair is summed.
fn canonical_orientation(orbit: &CompoundOrbit) -> bool {
    if orbit.t != 0.0 {
        orbit.t > 0.0
    } else {
        orbit.t_prime > 0.0
    }
}

/// Assembles the semiclassical density from a precomputed orbit catalogue and
/// background value. An empty catalogue reduces exactly to the background.
pub fn sc_density(
    spec: &SystemSpec,
    query: &TransitionQuery,
    catalogue: &[CompoundOrbit],
    background: f64,
    params: &SCParams,
) -> Result<DensityResult> {
    let hbar = spec.hbar;
    let n = spec.dof as i32;
    let mut warnings = Vec::new();
    let mut terms = Vec::new();
    let mut value = background;
    for orbit in catalogue {
        if !canonical_orientation(orbit) {
            continue;
        }
        if orbit.near_caustic || orbit.det_one_minus_m.abs() < params.caustic_cutoff {
            warnings.push(format!(
                "orbit (t={:.6}, t'={:.6}) excluded: |det(Id-M)| = {:.3e} is near-caustic",
                orbit.t,
                orbit.t_prime,
                orbit.det_one_minus_m.abs()
            ));
            continue;
        }
        let jac = orbit.jacobian_te.as_ref().ok_or_else(|| {
            Error::Invalid("semiclassical sum needs orbits built with jacobians".into())
        })?;
        let caustic_index = orbit.caustic.as_ref().map(|c| c.count).unwrap_or(0);
        let amplitude = (2f64.powi(n - 1) / (std::f64::consts::PI * hbar).powi(n))
            * jac.det.abs().sqrt()
            / orbit.det_one_minus_m.abs().sqrt();
        let phase = orbit.action_energy / hbar;
        let maslov_sigma =
            caustic_index as f64 * std::f64::consts::FRAC_PI_2 + params.sigma_offset;
        // damping uses the ε of the query being evaluated, not the ε the
        // catalogue was pruned with (the orbit geometry is ε-independent)
        let damping =
            (-query.window.epsilon * (orbit.t.abs() + orbit.t_prime.abs()) / hbar).exp();
        let term_value = amplitude * damping * (phase + maslov_sigma).cos();
        value += term_value;
        terms.push(SCTerm {
            t: orbit.t,
            t_prime: orbit.t_prime,
            winding: orbit.winding,
            action: orbit.action_energy,
            amplitude,
            phase,
            maslov_sigma,
            damping,
            value: term_value,
        });
    }
    Ok(DensityResult {
        query: query.clone(),
        value,
        pathway: Pathway::Semiclassical,
        terms,
        warnings,
    })
}

/// Controls for [`classical_background`].
#[derive(Debug, Clone, Copy)]
pub struct BackgroundParams {
    /// Half-width of the integration box per phase-space axis.
    pub half_width: f64,
    /// Coarsest grid points per axis; refined by doubling.
    pub base_resolution: usize,
    /// Relative agreement demanded between successive Richardson values.
    pub tol: f64,
    pub max_refinements: usize,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        Self { half_width: 8.0, base_resolution: 64, tol: 1e-4, max_refinements: 6 }
    }
}

fn background_midpoint(
    spec: &SystemSpec,
    query: &TransitionQuery,
    params: &BackgroundParams,
    resolution: usize,
) -> Result<f64> {
    let n = spec.dof;
    let h = 2.0 * params.half_width / resolution as f64;
    let dims = 2 * n;
    let cells = resolution.pow(dims as u32);
    let mut sum = 0.0f64;
    let mut idx = vec![0usize; dims];
    for flat in 0..cells {
        let mut r = flat;
        for v in idx.iter_mut() {
            *v = r % resolution;
            r /= resolution;
        }
        let coord =
            |i: usize| -> f64 { -params.half_width + (idx[i] as f64 + 0.5) * h };
        let x = PhasePoint::new(
            (0..n).map(coord).collect(),
            (n..dims).map(coord).collect(),
        )?;
        let e_here = spec.hamiltonian.eval(&x);
        let w1 = lorentzian_delta(query.e - e_here, query.window)?;
        // skip the driven evaluation where the first window is negligible
        if w1 < 1e-14 {
            continue;
        }
        let ed = driven_hamiltonian(&x, query.tau, spec)?;
        let w2 = lorentzian_delta(query.e_prime - ed, query.window)?;
        sum += w1 * w2;
    }
    let measure = h.powi(dims as i32);
    Ok(sum * measure / (2.0 * std::f64::consts::PI * spec.hbar).powi(n as i32))
}

/// The smooth background term
/// (2πħ)^{−N} ∫ dx δ_ε(E − H(x)) δ_ε(E' − H(x|τ))
/// by midpoint tensor-grid quadrature with Richardson extrapolation over
/// grid doublings.
pub fn classical_background(
    spec: &SystemSpec,
    query: &TransitionQuery,
    params: &BackgroundParams,
) -> Result<DensityResult> {
    let mut resolution = params.base_resolution;
    let mut coarse = background_midpoint(spec, query, params, resolution)?;
    let mut prev_rich: Option<f64> = None;
    for _ in 0..params.max_refinements {
        resolution *= 2;
        let fine = background_midpoint(spec, query, params, resolution)?;
        // midpoint rule is second order, so the doubling combination is
        // (4·fine − coarse)/3
        let rich = (4.0 * fine - coarse) / 3.0;
        if let Some(p) = prev_rich {
            if (rich - p).abs() <= params.tol * rich.abs().max(1e-300) {
                return Ok(DensityResult {
                    query: query.clone(),
                    value: rich,
                    pathway: Pathway::ClassicalBackground,
                    terms: Vec::new(),
                    warnings: Vec::new(),
                });
            }
        }
        prev_rich = Some(rich);
        coarse = fine;
    }
    Err(Error::Refinement(format!(
        "background quadrature not converged to {:.1e} after {} doublings (last {:?})",
        params.tol, params.max_refinements, prev_rich
    )))
}

/// Outcome of the σ-offset calibration for one orbit family.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub offset: f64,
    /// RMS of (sc_osc − oracle_osc) over the sweep at the best offset.
    pub rms_residual: f64,
    /// False when the oracle's oscillation amplitude is below the supplied
    /// noise floor, in which case `offset` is not meaningful.
    pub conclusive: bool,
}

/// Picks the family σ offset from {0, π/2, π, 3π/2} that minimizes the L2
/// distance between the semiclassical oscillatory part (produced by `sweep`
/// at a trial offset) and the exact-pathway oscillatory part. Strictly
/// opt-in: the chosen offset must be frozen by the caller, never re-fit per
/// query point.
pub fn sigma_calibration<F>(mut sweep: F, oracle_osc: &[f64], noise_floor: f64) -> Result<Calibration>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    if oracle_osc.is_empty() {
        return Err(Error::Invalid("empty calibration sweep".into()));
    }
    let oracle_rms =
        (oracle_osc.iter().map(|v| v * v).sum::<f64>() / oracle_osc.len() as f64).sqrt();
    let mut best = (0.0f64, f64::INFINITY);
    for k in 0..4 {
        let offset = k as f64 * std::f64::consts::FRAC_PI_2;
        let sc = sweep(offset)?;
        if sc.len() != oracle_osc.len() {
            return Err(Error::Invalid("calibration sweep length mismatch".into()));
        }
        let rms = (sc
            .iter()
            .zip(oracle_osc)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / sc.len() as f64)
            .sqrt();
        if rms < best.1 {
            best = (offset, rms);
        }
    }
    Ok(Calibration {
        offset: best.0,
        rms_residual: best.1,
        conclusive: oracle_rms > noise_floor,
    })
}

/// Removes the smooth trend with a centered boxcar whose width is one local
/// oscillation period, leaving the oscillatory part. Edge windows shrink
/// symmetrically.
pub fn detrend_boxcar(values: &[f64], period_samples: usize) -> Vec<f64> {
    let n = values.len();
    let half = (period_samples / 2).max(1);
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            let lo = i - r;
            let hi = i + r;
            let mean = values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            values[i] - mean
        })
        .collect()
}

/// Centered boxcar smoothing with symmetrically shrinking edge windows. With
/// the width set to one period of an unwanted oscillation, that component is
/// averaged out while slower structure passes through.
pub fn smooth_boxcar(values: &[f64], width: usize) -> Vec<f64> {
    let n = values.len();
    let half = (width / 2).max(1);
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            values[i - r..=i + r].iter().sum::<f64>() / (2 * r + 1) as f64
        })
        .collect()
}

/// Removes a global smooth trend by least-squares Chebyshev fit over the whole
/// sample range (mapped to [−1, 1]), returning the residual. A degree well
/// below twice the number of oscillation periods leaves the oscillatory part
/// essentially intact while following broad background curvature that a
/// single-period boxcar cannot.
pub fn detrend_chebyshev(values: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = values.len();
    if n < degree + 1 {
        return Err(Error::Invalid(format!(
            "chebyshev detrend of degree {degree} needs more than {n} samples"
        )));
    }
    // Chebyshev-Vandermonde by the three-term recurrence
    let mut basis = nalgebra::DMatrix::<f64>::zeros(n, degree + 1);
    for i in 0..n {
        let x = if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
        basis[(i, 0)] = 1.0;
        if degree >= 1 {
            basis[(i, 1)] = x;
        }
        for k in 2..=degree {
            basis[(i, k)] = 2.0 * x * basis[(i, k - 1)] - basis[(i, k - 2)];
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(values);
    let coeffs = basis
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Invalid(format!("chebyshev fit failed: {e}")))?;
    let trend = basis * coeffs;
    Ok(values.iter().zip(trend.iter()).map(|(v, t)| v - t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Monodromy;
    use crate::orbits::{CausticReport, CompoundOrbit, JacobianTE, ShellIntersection};
    use crate::system::{PhaseFunction, SmoothingWindow};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix2};

    fn ho_spec(hbar: f64) -> SystemSpec {
        SystemSpec::new(PhaseFunction::Harmonic { omega: 1.0 }, PhaseFunction::LinearP, hbar, 1)
            .unwrap()
    }

    fn query(e: f64, ep: f64, tau: f64, eps: f64) -> TransitionQuery {
        TransitionQuery { e, e_prime: ep, tau, window: SmoothingWindow::new(eps).unwrap() }
    }

    fn synthetic_orbit(
        q: &TransitionQuery,
        t: f64,
        t_prime: f64,
        action: f64,
        det_1m: f64,
        jac_det: f64,
        caustic_count: u32,
    ) -> CompoundOrbit {
        let pt = ShellIntersection {
            point: PhasePoint::one(1.0, 0.0),
            tangency_flag: false,
            grazing_angle: 1.0,
            time_e: 0.0,
            time_ep: 0.0,
        };
        CompoundOrbit {
            query: q.clone(),
            endpoints: (pt.clone(), pt),
            t,
            t_prime,
            winding: (0, 0),
            action_energy: action,
            action_time: action - q.e * t - q.e_prime * t_prime,
            monodromy: Monodromy { matrix: DMatrix::identity(2, 2), time: t + t_prime },
            det_one_minus_m: det_1m,
            jacobian_te: Some(JacobianTE {
                matrix: Matrix2::identity(),
                det: jac_det,
                inverse_det: Some(1.0 / jac_det),
            }),
            caustic: Some(CausticReport { count: caustic_count, near_endpoint: false }),
            near_caustic: false,
        }
    }

    #[test]
    fn empty_catalogue_is_background_only() {
        let spec = ho_spec(0.1);
        let q = query(1.0, 1.5, 1.0, 0.1);
        let r = sc_density(&spec, &q, &[], 3.25, &SCParams::default()).unwrap();
        assert_eq!(r.value, 3.25);
        assert!(r.terms.is_empty() && r.warnings.is_empty());
        assert_eq!(r.pathway, Pathway::Semiclassical);
    }

    #[test]
    fn single_orbit_term_matches_hand_formula() {
        let hbar = 0.1;
        let spec = ho_spec(hbar);
        let q = query(1.0, 1.5, 1.0, 0.05);
        let (t, tp, s, d1m, jd) = (1.2, 0.8, 0.37, 1.6, 0.9);
        let orb = synthetic_orbit(&q, t, tp, s, d1m, jd, 1);
        let r = sc_density(&spec, &q, &[orb], 2.0, &SCParams::default()).unwrap();
        let amp = (1.0 / (std::f64::consts::PI * hbar)) * jd.sqrt() / d1m.sqrt();
        let damp = (-0.05 * (t + tp) / hbar).exp();
        let expect = 2.0 + amp * damp * (s / hbar + std::f64::consts::FRAC_PI_2).cos();
        assert_relative_eq!(r.value, expect, max_relative = 1e-14);
        assert_eq!(r.terms.len(), 1);
    }

    #[test]
    fn time_reversed_partner_not_double_counted() {
        let spec = ho_spec(0.1);
        let q = query(1.0, 1.5, 1.0, 0.05);
        let fwd = synthetic_orbit(&q, 1.2, 0.8, 0.37, 1.6, 0.9, 0);
        let mut rev = synthetic_orbit(&q, -1.2, -0.8, -0.37, 1.6, 0.9, 0);
        rev.action_time = -rev.action_energy + q.e * 1.2 + q.e_prime * 0.8;
        let both = sc_density(&spec, &q, &[fwd.clone(), rev], 0.0, &SCParams::default()).unwrap();
        let one = sc_density(&spec, &q, &[fwd], 0.0, &SCParams::default()).unwrap();
        assert_eq!(both.terms.len(), 1);
        assert_relative_eq!(both.value, one.value, max_relative = 1e-15);
    }

    #[test]
    fn near_caustic_orbit_excluded_with_warning() {
        let spec = ho_spec(0.1);
        let q = query(1.0, 1.5, 1.0, 0.05);
        let orb = synthetic_orbit(&q, 1.2, 0.8, 0.37, 1e-9, 0.9, 0);
        let r = sc_density(&spec, &q, &[orb], 5.0, &SCParams::default()).unwrap();
        assert_eq!(r.value, 5.0);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("near-caustic"));
    }

    #[test]
    fn damping_monotone_in_epsilon() {
        let hbar = 0.1;
        let mut last = f64::INFINITY;
        for eps in [0.02, 0.05, 0.1, 0.2] {
            let q = query(1.0, 1.5, 1.0, eps);
            let orb = synthetic_orbit(&q, 1.2, 0.8, 0.37, 1.6, 0.9, 0);
            let d = orb.damping(hbar);
            assert!(d < last, "damping not decreasing at eps={eps}");
            last = d;
        }
    }

    #[test]
    fn action_is_hbar_independent_in_terms() {
        // the catalogue is classical: across ħ the recorded action is
        // untouched and only phase = S/ħ changes
        for hbar in [0.1, 0.05, 0.025] {
            let spec = ho_spec(hbar);
            let q = query(1.0, 1.5, 1.0, 0.05);
            let orb = synthetic_orbit(&q, 1.2, 0.8, 0.37, 1.6, 0.9, 0);
            let r = sc_density(&spec, &q, &[orb], 0.0, &SCParams::default()).unwrap();
            assert!((r.terms[0].action - 0.37).abs() < 1e-8);
            assert_relative_eq!(r.terms[0].phase, 0.37 / hbar, max_relative = 1e-14);
        }
    }

    #[test]
    fn symmetry_under_query_reversal_with_mapped_catalogue() {
        // sc(E, E', τ) = sc(E', E, −τ) when the catalogue is mapped by
        // swapping segment roles; invariants (action, |det(1−M)|, |det J|,
        // |t|+|t'|) are shared, so the values agree identically
        let spec = ho_spec(0.1);
        let qf = query(1.0, 1.5, 1.0, 0.05);
        let qb = query(1.5, 1.0, -1.0, 0.05);
        let fwd = synthetic_orbit(&qf, 1.2, 0.8, 0.37, 1.6, 0.9, 1);
        let mapped = synthetic_orbit(&qb, 0.8, 1.2, 0.37, 1.6, 0.9, 1);
        let bg = 2.7;
        let a = sc_density(&spec, &qf, &[fwd], bg, &SCParams::default()).unwrap();
        let b = sc_density(&spec, &qb, &[mapped], bg, &SCParams::default()).unwrap();
        assert_relative_eq!(a.value, b.value, max_relative = 1e-6);
    }

    #[test]
    fn background_ho_coarea_oracle() {
        // HO at τ = 0: co-area gives
        // B = (1/ħ)∫δ_ε(E−E'')δ_ε(E'−E'')dE'' ≈ (1/ħ)·δ_{2ε}(E−E')
        // (Lorentzian self-convolution), exact up to the negligible E''<0 tail
        let spec = ho_spec(1.0);
        let eps = 0.1;
        for (e, ep) in [(2.5, 2.5), (2.5, 2.9)] {
            let q = query(e, ep, 0.0, eps);
            let params = BackgroundParams { half_width: 6.0, base_resolution: 128, ..Default::default() };
            let r = classical_background(&spec, &q, &params).unwrap();
            let oracle = (1.0 / std::f64::consts::PI) * (2.0 * eps)
                / ((e - ep).powi(2) + (2.0 * eps).powi(2));
            assert_relative_eq!(r.value, oracle, max_relative = 1e-3);
        }
    }

    #[test]
    fn background_peak_decreases_with_epsilon() {
        let spec = ho_spec(1.0);
        let mut last = f64::INFINITY;
        for eps in [0.1, 0.2, 0.4] {
            let q = query(2.5, 2.5, 0.0, eps);
            let params = BackgroundParams { half_width: 6.0, base_resolution: 128, ..Default::default() };
            let v = classical_background(&spec, &q, &params).unwrap().value;
            assert!(v < last, "peak not decreasing at eps={eps}");
            last = v;
        }
    }

    #[test]
    fn background_refinement_failure_is_error() {
        let spec = ho_spec(1.0);
        let q = query(2.5, 2.5, 0.0, 0.01);
        // a 4-point base grid cannot resolve an ε = 0.01 window
        let params = BackgroundParams {
            half_width: 6.0,
            base_resolution: 4,
            tol: 1e-4,
            max_refinements: 2,
        };
        assert!(matches!(classical_background(&spec, &q, &params), Err(Error::Refinement(_))));
    }

    #[test]
    fn calibration_recovers_planted_offset() {
        let thetas: Vec<f64> = (0..64).map(|i| 0.37 * i as f64).collect();
        let oracle: Vec<f64> =
            thetas.iter().map(|th| 1.3 * (th + std::f64::consts::PI).cos()).collect();
        let cal = sigma_calibration(
            |off| Ok(thetas.iter().map(|th| 1.3 * (th + off).cos()).collect()),
            &oracle,
            1e-6,
        )
        .unwrap();
        assert!(cal.conclusive);
        assert_relative_eq!(cal.offset, std::f64::consts::PI, max_relative = 1e-12);
        assert!(cal.rms_residual < 1e-12);
    }

    #[test]
    fn calibration_flat_oracle_is_inconclusive() {
        let oracle = vec![1e-12; 32];
        let cal = sigma_calibration(|_| Ok(vec![0.0; 32]), &oracle, 1e-6).unwrap();
        assert!(!cal.conclusive);
    }

    #[test]
    fn smooth_boxcar_cancels_period_matched_oscillation() {
        // averaging over exactly one period annihilates the oscillation and
        // preserves a constant
        let w = 21;
        let vals: Vec<f64> = (0..300)
            .map(|i| 4.0 + (i as f64 * 2.0 * std::f64::consts::PI / w as f64).sin())
            .collect();
        let sm = smooth_boxcar(&vals, w);
        for i in 30..270 {
            assert!((sm[i] - 4.0).abs() < 1e-2, "i={i}: {}", sm[i]);
        }
    }

    #[test]
    fn chebyshev_detrend_exact_on_polynomial_keeps_fast_sine() {
        // a cubic trend lies inside the degree-8 fit space, so the residual is
        // the fast sine alone up to the small fraction of the sine the fit can
        // follow; that leakage concentrates at the interval ends, so the tight
        // check is on the interior
        let n = 301;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                1.0 + x - 0.5 * x * x + 2.0 * x * x * x + 0.3 * (40.0 * x).sin()
            })
            .collect();
        let osc = detrend_chebyshev(&vals, 8).unwrap();
        for i in 0..n {
            let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            let tol = if (40..n - 40).contains(&i) { 0.03 } else { 0.30 };
            assert!((osc[i] - 0.3 * (40.0 * x).sin()).abs() < tol, "i={i}");
        }
    }

    #[test]
    fn chebyshev_detrend_underdetermined_is_error() {
        assert!(detrend_chebyshev(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn detrend_removes_linear_trend() {
        let vals: Vec<f64> = (0..200)
            .map(|i| {
                let x = i as f64;
                3.0 + 0.01 * x + 0.5 * (x * 2.0 * std::f64::consts::PI / 20.0).sin()
            })
            .collect();
        let osc = detrend_boxcar(&vals, 20);
        // interior points keep the oscillation and drop the trend
        for i in 40..160 {
            let pure = 0.5 * ((i as f64) * 2.0 * std::f64::consts::PI / 20.0).sin();
            assert!((osc[i] - pure).abs() < 0.05, "i={i}: {} vs {pure}", osc[i]);
        }
    }
}
