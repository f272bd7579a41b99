//! Classical side: Hamiltonian flows, variational (monodromy) equations,
//! the driven Hamiltonian H(x|τ), and energy-contour tracing for N = 1 shells.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode::Rk45;
use crate::system::{PhaseFunction, PhasePoint, SystemSpec};

/// Which generator moves the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    Intrinsic,
    Driver,
    /// Flow of the driven Hamiltonian H(·|τ).
    Driven { tau: f64 },
}

/// Stability matrix M(t) of a flow segment.
#[derive(Debug, Clone)]
pub struct Monodromy {
    pub matrix: DMatrix<f64>,
    pub time: f64,
}

impl Monodromy {
    /// ‖MᵀJM − J‖∞, zero for an exactly symplectic matrix.
    pub fn symplectic_defect(&self) -> f64 {
        let n2 = self.matrix.nrows();
        let j = symplectic_form(n2 / 2);
        let d = self.matrix.transpose() * &j * &self.matrix - &j;
        d.amax()
    }

    pub fn det(&self) -> f64 {
        self.matrix.clone().lu().determinant()
    }
}

/// The standard symplectic form J in the [q..., p...] ordering.
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// A sampled flow segment with conserved-energy bookkeeping.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, PhasePoint)>,
    pub energy: f64,
    pub max_drift: f64,
}

/// A closed N = 1 energy contour, sampled at uniform times over one period.
#[derive(Debug, Clone)]
pub struct ShellContour {
    pub energy: f64,
    pub period: f64,
    /// n + 1 samples at t_i = i·T/n; the last one closes the curve.
    pub samples: Vec<(f64, PhasePoint)>,
    pub closure_gap: f64,
    pub max_drift: f64,
}

impl ShellContour {
    pub fn seed(&self) -> &PhasePoint {
        &self.samples[0].1
    }

    /// Index of the sample closest to `x`.
    pub fn nearest_sample(&self, x: &PhasePoint) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, (_, s)) in self.samples.iter().enumerate() {
            let d = s.dist(x);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Numerical controls for flows and contour tracing.
#[derive(Debug, Clone, Copy)]
pub struct ContourParams {
    pub search_box: f64,
    pub scan_points: usize,
    pub n_samples: usize,
    pub closure_tol: f64,
    pub t_max: f64,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self { search_box: 12.0, scan_points: 8192, n_samples: 2048, closure_tol: 1e-8, t_max: 1e4 }
    }
}

pub(crate) fn default_rk() -> Rk45 {
    Rk45::default()
}

/// Hamiltonian vector field ẋ = J ∇H of a phase function.
pub(crate) fn hamiltonian_field<'a>(f: &'a PhaseFunction) -> impl Fn(&DVector<f64>) -> DVector<f64> + 'a {
    move |y: &DVector<f64>| {
        let x = PhasePoint::from_vector(y);
        let g = f.gradient(&x);
        let n = x.dof();
        let mut v = DVector::zeros(2 * n);
        for i in 0..n {
            v[i] = g[n + i];
            v[n + i] = -g[i];
        }
        v
    }
}

/// Variational field for the augmented state [x; vec(M)].
fn variational_field<'a>(f: &'a PhaseFunction, n: usize) -> impl Fn(&DVector<f64>) -> DVector<f64> + 'a {
    move |y: &DVector<f64>| {
        let d = 2 * n;
        let x = PhasePoint::from_vector(&DVector::from_column_slice(&y.as_slice()[..d]));
        let g = f.gradient(&x);
        let hess = f.hessian(&x);
        let mut out = DVector::zeros(d + d * d);
        for i in 0..n {
            out[i] = g[n + i];
            out[n + i] = -g[i];
        }
        // A = J·Hess, Ṁ = A·M with M stored column-major after the state
        for col in 0..d {
            for row in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    // (J·Hess)[row, k]
                    let a = if row < n { hess[(n + row, k)] } else { -hess[(row - n, k)] };
                    acc += a * y[d + col * d + k];
                }
                out[d + col * d + row] = acc;
            }
        }
        out
    }
}

/// Closed-form flow for the generators that have one; None falls back to RK.
fn exact_flow(f: &PhaseFunction, x0: &PhasePoint, t: f64) -> Option<PhasePoint> {
    match f {
        PhaseFunction::LinearP => {
            let mut x = x0.clone();
            x.q[0] += t;
            Some(x)
        }
        PhaseFunction::LinearQ => {
            let mut x = x0.clone();
            x.p[0] -= t;
            Some(x)
        }
        PhaseFunction::Free => {
            let mut x = x0.clone();
            x.q[0] += x.p[0] * t;
            Some(x)
        }
        PhaseFunction::Harmonic { omega } => {
            let (c, s) = ((omega * t).cos(), (omega * t).sin());
            let mut x = x0.clone();
            for i in 0..x.dof() {
                let (q, p) = (x0.q[i], x0.p[i]);
                x.q[i] = q * c + p * s;
                x.p[i] = -q * s + p * c;
            }
            Some(x)
        }
        _ => None,
    }
}

/// Closed-form tangent map matching `exact_flow`.
fn exact_tangent(f: &PhaseFunction, n: usize, t: f64) -> Option<DMatrix<f64>> {
    match f {
        PhaseFunction::LinearP | PhaseFunction::LinearQ => Some(DMatrix::identity(2 * n, 2 * n)),
        PhaseFunction::Free => {
            let mut m = DMatrix::identity(2 * n, 2 * n);
            m[(0, n)] = t;
            Some(m)
        }
        PhaseFunction::Harmonic { omega } => {
            let (c, s) = ((omega * t).cos(), (omega * t).sin());
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                m[(i, i)] = c;
                m[(i, n + i)] = s;
                m[(n + i, i)] = -s;
                m[(n + i, n + i)] = c;
            }
            Some(m)
        }
        _ => None,
    }
}

fn flow_raw(f: &PhaseFunction, x0: &PhasePoint, t: f64) -> Result<PhasePoint> {
    if let Some(x) = exact_flow(f, x0, t) {
        return Ok(x);
    }
    let rk = default_rk();
    let field = hamiltonian_field(f);
    let y = rk.solve(&field, x0.to_vector(), 0.0, t)?;
    Ok(PhasePoint::from_vector(&y))
}

/// One flow step of `dt` under a phase function, taking the closed form when
/// available. The workhorse of contour resampling and root polishing.
pub(crate) fn advance(f: &PhaseFunction, x: &PhasePoint, dt: f64) -> Result<PhasePoint> {
    flow_raw(f, x, dt)
}

/// Φᵗ(x₀) under the selected generator. Negative t flows backward.
pub fn flow(x0: &PhasePoint, t: f64, which: FlowKind, spec: &SystemSpec) -> Result<PhasePoint> {
    if !t.is_finite() {
        return Err(Error::NonFinite("flow time"));
    }
    match which {
        FlowKind::Intrinsic => flow_raw(&spec.hamiltonian, x0, t),
        FlowKind::Driver => flow_raw(&spec.driver, x0, t),
        FlowKind::Driven { tau } => {
            // Φ_{H(·|τ)}^t = Φ_Λ^{τ} ∘ Φ_H^t ∘ Φ_Λ^{−τ}, an exact identity.
            let y = flow_raw(&spec.driver, x0, -tau)?;
            let z = flow_raw(&spec.hamiltonian, &y, t)?;
            flow_raw(&spec.driver, &z, tau)
        }
    }
}

fn tangent_raw(f: &PhaseFunction, x0: &PhasePoint, t: f64) -> Result<(PhasePoint, DMatrix<f64>)> {
    let n = x0.dof();
    if let (Some(x), Some(m)) = (exact_flow(f, x0, t), exact_tangent(f, n, t)) {
        return Ok((x, m));
    }
    let d = 2 * n;
    let rk = default_rk();
    let field = variational_field(f, n);
    let mut y0 = DVector::zeros(d + d * d);
    y0.rows_mut(0, d).copy_from(&x0.to_vector());
    for i in 0..d {
        y0[d + i * d + i] = 1.0;
    }
    let y = rk.solve(&field, y0, 0.0, t)?;
    let x1 = PhasePoint::from_vector(&DVector::from_column_slice(&y.as_slice()[..d]));
    let m = DMatrix::from_column_slice(d, d, &y.as_slice()[d..]);
    Ok((x1, m))
}

/// Integrates the variational equations Ṁ = J·Hess(H)·M along the flow and
/// returns the stability matrix M(t).
pub fn tangent_flow(x0: &PhasePoint, t: f64, which: FlowKind, spec: &SystemSpec) -> Result<Monodromy> {
    let matrix = match which {
        FlowKind::Intrinsic => tangent_raw(&spec.hamiltonian, x0, t)?.1,
        FlowKind::Driver => tangent_raw(&spec.driver, x0, t)?.1,
        FlowKind::Driven { tau } => {
            let (y, m_back) = tangent_raw(&spec.driver, x0, -tau)?;
            let (z, m_mid) = tangent_raw(&spec.hamiltonian, &y, t)?;
            let (_, m_fwd) = tangent_raw(&spec.driver, &z, tau)?;
            m_fwd * m_mid * m_back
        }
    };
    Ok(Monodromy { matrix, time: t })
}

/// Stability matrices at intermediate fractions s·t of a flow segment,
/// s running over `fractions` (each in [0, 1], increasing).
pub fn monodromy_checkpoints(
    x0: &PhasePoint,
    t: f64,
    which: FlowKind,
    spec: &SystemSpec,
    fractions: &[f64],
) -> Result<Vec<DMatrix<f64>>> {
    let n = x0.dof();
    let d = 2 * n;
    match which {
        FlowKind::Intrinsic | FlowKind::Driver => {
            let f = match which {
                FlowKind::Intrinsic => &spec.hamiltonian,
                _ => &spec.driver,
            };
            if exact_tangent(f, n, 0.0).is_some() {
                return Ok(fractions.iter().map(|&s| exact_tangent(f, n, s * t).unwrap()).collect());
            }
            let rk = default_rk();
            let field = variational_field(f, n);
            let mut y = DVector::zeros(d + d * d);
            y.rows_mut(0, d).copy_from(&x0.to_vector());
            for i in 0..d {
                y[d + i * d + i] = 1.0;
            }
            let mut out = Vec::with_capacity(fractions.len());
            let mut t_cur = 0.0;
            for &s in fractions {
                let t_next = s * t;
                y = rk.solve(&field, y, t_cur, t_next)?;
                t_cur = t_next;
                out.push(DMatrix::from_column_slice(d, d, &y.as_slice()[d..]));
            }
            Ok(out)
        }
        FlowKind::Driven { tau } => {
            // conjugate the intrinsic checkpoints by the frozen driver maps
            let (y0, m_back) = tangent_raw(&spec.driver, x0, -tau)?;
            let inner = monodromy_checkpoints(&y0, t, FlowKind::Intrinsic, spec, fractions)?;
            let mut out = Vec::with_capacity(fractions.len());
            for (&s, m_mid) in fractions.iter().zip(inner) {
                let z = flow_raw(&spec.hamiltonian, &y0, s * t)?;
                let (_, m_fwd) = tangent_raw(&spec.driver, &z, tau)?;
                out.push(m_fwd * m_mid * &m_back);
            }
            Ok(out)
        }
    }
}

/// H(x|τ) = H(Φ_Λ^{−τ}(x)), the classical counterpart of Û(τ)ĤÛ(τ)†.
pub fn driven_hamiltonian(x: &PhasePoint, tau: f64, spec: &SystemSpec) -> Result<f64> {
    let y = flow_raw(&spec.driver, x, -tau)?;
    Ok(spec.hamiltonian.eval(&y))
}

/// Gradient of H(·|τ), by the chain rule through the driver-flow linearisation.
pub fn driven_gradient(x: &PhasePoint, tau: f64, spec: &SystemSpec) -> Result<DVector<f64>> {
    let (y, m) = tangent_raw(&spec.driver, x, -tau)?;
    Ok(m.transpose() * spec.hamiltonian.gradient(&y))
}

/// Samples Φ^{s}(x₀) at n+1 uniform times s = 0, t/n, ..., t.
pub fn sample_trajectory(
    x0: &PhasePoint,
    t: f64,
    which: FlowKind,
    spec: &SystemSpec,
    n: usize,
) -> Result<Trajectory> {
    let generator = match which {
        FlowKind::Intrinsic => spec.hamiltonian.clone(),
        FlowKind::Driver => spec.driver.clone(),
        FlowKind::Driven { .. } => spec.hamiltonian.clone(),
    };
    // For the driven flow, sample the conjugated intrinsic segment and map.
    let (start, back): (PhasePoint, Option<f64>) = match which {
        FlowKind::Driven { tau } => (flow_raw(&spec.driver, x0, -tau)?, Some(tau)),
        _ => (x0.clone(), None),
    };
    let mut samples = Vec::with_capacity(n + 1);
    let mut x = start.clone();
    let e0 = generator.eval(&start);
    let mut max_drift = 0.0f64;
    let dt = t / n as f64;
    for i in 0..=n {
        let ti = t * i as f64 / n as f64;
        if i > 0 {
            x = advance(&generator, &x, dt)?;
        }
        max_drift = max_drift.max((generator.eval(&x) - e0).abs());
        let mapped = match back {
            Some(tau) => flow_raw(&spec.driver, &x, tau)?,
            None => x.clone(),
        };
        samples.push((ti, mapped));
    }
    let energy = match which {
        FlowKind::Driven { tau } => driven_hamiltonian(&samples[0].1, tau, spec)?,
        _ => e0,
    };
    Ok(Trajectory { samples, energy, max_drift })
}

/// Finds a seed point on the level set of a 1-D phase function (q-axis
/// bracketing, then the p-axis fallback).
fn find_seed(f: &PhaseFunction, e: f64, params: &ContourParams) -> Result<PhasePoint> {
    let scan = params.scan_points;
    let mut min_seen = f64::INFINITY;
    for (is_q, make) in [
        (true, &(|v: f64| PhasePoint::one(v, 0.0)) as &dyn Fn(f64) -> PhasePoint),
        (false, &(|v: f64| PhasePoint::one(0.0, v)) as &dyn Fn(f64) -> PhasePoint),
    ] {
        let _ = is_q;
        let mut bracket: Option<(f64, f64)> = None;
        let mut prev_v = -params.search_box;
        let mut prev_g = f.eval(&make(prev_v)) - e;
        min_seen = min_seen.min(prev_g + e);
        for i in 1..=scan {
            let v = -params.search_box + 2.0 * params.search_box * i as f64 / scan as f64;
            let g = f.eval(&make(v)) - e;
            min_seen = min_seen.min(g + e);
            if prev_g * g <= 0.0 && prev_g != g {
                bracket = Some((prev_v, v)); // keep scanning: the rightmost bracket wins
            }
            prev_v = v;
            prev_g = g;
        }
        if let Some((mut lo, mut hi)) = bracket {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let g = f.eval(&make(mid)) - e;
                if g == 0.0 || (hi - lo).abs() < 1e-15 * mid.abs().max(1.0) {
                    break;
                }
                let glo = f.eval(&make(lo)) - e;
                if glo * g <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(make(0.5 * (lo + hi)));
        }
    }
    if e < min_seen {
        Err(Error::EmptyShell { e })
    } else {
        Err(Error::UnsupportedTopology { e })
    }
}

fn trace_closed(f: &PhaseFunction, e: f64, params: &ContourParams) -> Result<ShellContour> {
    let seed = find_seed(f, e, params)?;
    let field = hamiltonian_field(f);
    let v0 = field(&seed.to_vector());
    let speed = v0.norm();
    if speed < 1e-12 {
        return Err(Error::UnsupportedTopology { e });
    }
    let v0n = v0 / speed;
    let seed_v = seed.to_vector();
    let rk = default_rk();
    // first return to the transversal section through the seed, forward crossing
    let g = {
        let seed_v = seed_v.clone();
        let v0n = v0n.clone();
        move |y: &DVector<f64>| (y - &seed_v).dot(&v0n)
    };
    let (period, end) = rk
        .flow_to_event(&field, seed_v.clone(), &g, 1e-6, params.t_max, 1)
        .map_err(|err| match err {
            Error::Escape { .. } | Error::NoConvergence { .. } => Error::UnsupportedTopology { e },
            other => other,
        })?;
    let closure_gap = (end - &seed_v).norm();
    if closure_gap > params.closure_tol {
        return Err(Error::NotClosed { gap: closure_gap, tol: params.closure_tol });
    }
    // resample one period at uniform times
    let n = params.n_samples;
    let mut samples = Vec::with_capacity(n + 1);
    let mut x = PhasePoint::from_vector(&seed_v);
    let mut max_drift = 0.0f64;
    let dt = period / n as f64;
    for i in 0..=n {
        let ti = period * i as f64 / n as f64;
        if i > 0 {
            x = advance(f, &x, dt)?;
        }
        max_drift = max_drift.max((f.eval(&x) - e).abs());
        samples.push((ti, x.clone()));
    }
    Ok(ShellContour { energy: e, period, samples, closure_gap, max_drift })
}

/// Traces the closed N = 1 contour of the selected Hamiltonian at energy `e`.
/// The driven contour is obtained by transporting the intrinsic E'-contour
/// through the driver flow, which preserves its time parametrisation.
pub fn trace_contour(
    e: f64,
    which: FlowKind,
    spec: &SystemSpec,
    params: &ContourParams,
) -> Result<ShellContour> {
    if spec.dof != 1 {
        return Err(Error::Invalid("trace_contour requires N = 1".into()));
    }
    match which {
        FlowKind::Intrinsic => trace_closed(&spec.hamiltonian, e, params),
        FlowKind::Driver => trace_closed(&spec.driver, e, params),
        FlowKind::Driven { tau } => {
            let base = trace_closed(&spec.hamiltonian, e, params)?;
            let mut samples = Vec::with_capacity(base.samples.len());
            for (t, x) in &base.samples {
                samples.push((*t, flow_raw(&spec.driver, x, tau)?));
            }
            let closure_gap = samples[0].1.dist(&samples[samples.len() - 1].1);
            Ok(ShellContour {
                energy: e,
                period: base.period,
                samples,
                closure_gap,
                max_drift: base.max_drift,
            })
        }
    }
}

/// Enclosed symplectic area of a full closed contour, oriented along the flow.
pub fn contour_area(contour: &ShellContour) -> f64 {
    let s = &contour.samples;
    let mut area = 0.0;
    for w in s.windows(2) {
        let (_, a) = &w[0];
        let (_, b) = &w[1];
        for d in 0..a.dof() {
            area += 0.5 * (a.p[d] + b.p[d]) * (b.q[d] - a.q[d]);
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SmoothingWindow;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn ho_spec() -> SystemSpec {
        SystemSpec::new(PhaseFunction::Harmonic { omega: 1.0 }, PhaseFunction::LinearP, 1.0, 1).unwrap()
    }

    fn free_spec() -> SystemSpec {
        SystemSpec::new(PhaseFunction::Free, PhaseFunction::LinearP, 1.0, 1).unwrap()
    }

    #[test]
    fn ho_quarter_period_rotation() {
        let x = flow(&PhasePoint::one(1.0, 0.0), PI / 2.0, FlowKind::Intrinsic, &ho_spec()).unwrap();
        assert!((x.q[0]).abs() < 1e-9 && (x.p[0] + 1.0).abs() < 1e-9, "{x:?}");
    }

    #[test]
    fn zero_time_is_identity() {
        let x0 = PhasePoint::one(0.3, -1.2);
        let x = flow(&x0, 0.0, FlowKind::Intrinsic, &ho_spec()).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn free_particle_drift() {
        let x = flow(&PhasePoint::one(0.0, 1.0), 2.0, FlowKind::Intrinsic, &free_spec()).unwrap();
        assert!((x.q[0] - 2.0).abs() < 1e-10 && (x.p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tangent_flow_ho_rotation_matrix() {
        let t = 0.73;
        let m = tangent_flow(&PhasePoint::one(0.4, 0.1), t, FlowKind::Intrinsic, &ho_spec()).unwrap();
        assert_relative_eq!(m.matrix[(0, 0)], t.cos(), epsilon = 1e-9);
        assert_relative_eq!(m.matrix[(0, 1)], t.sin(), epsilon = 1e-9);
        assert_relative_eq!(m.matrix[(1, 0)], -t.sin(), epsilon = 1e-9);
        assert_relative_eq!(m.matrix[(1, 1)], t.cos(), epsilon = 1e-9);
    }

    #[test]
    fn tangent_flow_zero_time_identity() {
        let m = tangent_flow(&PhasePoint::one(0.4, 0.1), 0.0, FlowKind::Intrinsic, &ho_spec()).unwrap();
        assert!((m.matrix.clone() - DMatrix::identity(2, 2)).amax() < 1e-13);
    }

    #[test]
    fn tangent_flow_free_shear() {
        let t = 1.7;
        let m = tangent_flow(&PhasePoint::one(0.0, 1.0), t, FlowKind::Intrinsic, &free_spec()).unwrap();
        assert_relative_eq!(m.matrix[(0, 1)], t, epsilon = 1e-10);
        assert_relative_eq!(m.matrix[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(m.matrix[(1, 0)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn driven_hamiltonian_translated_ho() {
        let spec = ho_spec();
        let tau = 0.8;
        for (q, p) in [(0.3, -0.4), (1.0, 0.0), (-0.7, 1.1)] {
            let h = driven_hamiltonian(&PhasePoint::one(q, p), tau, &spec).unwrap();
            let expected = ((q - tau).powi(2) + p * p) / 2.0;
            assert_relative_eq!(h, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn driven_hamiltonian_zero_tau() {
        let spec = ho_spec();
        let x = PhasePoint::one(0.5, -1.0);
        let h = driven_hamiltonian(&x, 0.0, &spec).unwrap();
        assert_relative_eq!(h, spec.hamiltonian.eval(&x), epsilon = 1e-13);
    }

    #[test]
    fn self_driving_leaves_h_invariant() {
        let spec = SystemSpec::new(
            PhaseFunction::Harmonic { omega: 1.0 },
            PhaseFunction::Harmonic { omega: 1.0 },
            1.0,
            1,
        )
        .unwrap();
        let x = PhasePoint::one(0.9, 0.2);
        for tau in [0.3, 1.7, -2.5] {
            let h = driven_hamiltonian(&x, tau, &spec).unwrap();
            assert_relative_eq!(h, spec.hamiltonian.eval(&x), epsilon = 1e-9);
        }
    }

    #[test]
    fn contour_ho_circle() {
        let c = trace_contour(0.5, FlowKind::Intrinsic, &ho_spec(), &ContourParams::default()).unwrap();
        assert_relative_eq!(c.period, 2.0 * PI, epsilon = 1e-9);
        for (_, x) in &c.samples {
            assert_relative_eq!(x.q[0] * x.q[0] + x.p[0] * x.p[0], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn contour_below_minimum_is_empty_shell() {
        let err = trace_contour(-0.25, FlowKind::Intrinsic, &ho_spec(), &ContourParams::default()).unwrap_err();
        matches!(err, Error::EmptyShell { .. }).then_some(()).expect("EmptyShell");
    }

    #[test]
    fn free_shell_not_compact() {
        let params = ContourParams { t_max: 50.0, ..Default::default() };
        let err = trace_contour(0.5, FlowKind::Intrinsic, &free_spec(), &params).unwrap_err();
        assert!(matches!(err, Error::UnsupportedTopology { .. }), "{err}");
    }

    #[test]
    fn driven_contour_is_shifted_circle() {
        let c = trace_contour(0.5, FlowKind::Driven { tau: 1.0 }, &ho_spec(), &ContourParams::default()).unwrap();
        assert_relative_eq!(c.period, 2.0 * PI, epsilon = 1e-9);
        for (_, x) in &c.samples {
            let r2 = (x.q[0] - 1.0).powi(2) + x.p[0].powi(2);
            assert_relative_eq!(r2, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn flow_reversibility() {
        let spec = SystemSpec::new(
            PhaseFunction::Quartic { a: 0.25, shift: 0.0 },
            PhaseFunction::LinearP,
            1.0,
            1,
        )
        .unwrap();
        let x0 = PhasePoint::one(0.9, 0.4);
        for t in [1.0, 7.0, 31.0] {
            let fwd = flow(&x0, t, FlowKind::Intrinsic, &spec).unwrap();
            let back = flow(&fwd, -t, FlowKind::Intrinsic, &spec).unwrap();
            assert!(back.dist(&x0) < 1e-8, "t={t}, gap {}", back.dist(&x0));
        }
    }

    #[test]
    fn tangent_flow_symplectic_and_composes() {
        let spec = SystemSpec::new(
            PhaseFunction::Quartic { a: 0.25, shift: 0.0 },
            PhaseFunction::LinearP,
            1.0,
            1,
        )
        .unwrap();
        let x0 = PhasePoint::one(1.1, 0.0);
        let (t1, t2) = (0.9, 1.4);
        let m_full = tangent_flow(&x0, t1 + t2, FlowKind::Intrinsic, &spec).unwrap();
        assert!(m_full.symplectic_defect() < 1e-8);
        let m1 = tangent_flow(&x0, t1, FlowKind::Intrinsic, &spec).unwrap();
        let x1 = flow(&x0, t1, FlowKind::Intrinsic, &spec).unwrap();
        let m2 = tangent_flow(&x1, t2, FlowKind::Intrinsic, &spec).unwrap();
        let prod = m2.matrix * m1.matrix;
        assert!((prod - m_full.matrix).amax() < 1e-6);
    }

    #[test]
    fn driven_shell_is_transported_shell() {
        let spec = ho_spec();
        let tau = 1.3;
        for (q, p) in [(0.2, 0.7), (-1.0, 0.1)] {
            let x = PhasePoint::one(q, p);
            let fwd = flow(&x, tau, FlowKind::Driver, &spec).unwrap();
            let h_driven = driven_hamiltonian(&fwd, tau, &spec).unwrap();
            assert_relative_eq!(h_driven, spec.hamiltonian.eval(&x), epsilon = 1e-8);
        }
    }

    #[test]
    fn period_equals_darea_de() {
        let spec = SystemSpec::new(
            PhaseFunction::Quartic { a: 0.25, shift: 0.0 },
            PhaseFunction::LinearP,
            1.0,
            1,
        )
        .unwrap();
        let params = ContourParams::default();
        let e = 0.8;
        let h = 1e-4;
        let c = trace_contour(e, FlowKind::Intrinsic, &spec, &params).unwrap();
        let a_plus = contour_area(&trace_contour(e + h, FlowKind::Intrinsic, &spec, &params).unwrap());
        let a_minus = contour_area(&trace_contour(e - h, FlowKind::Intrinsic, &spec, &params).unwrap());
        let fd = (a_plus - a_minus) / (2.0 * h);
        assert!((fd - c.period).abs() / c.period < 1e-4, "dA/dE {fd} vs T {}", c.period);
    }

    #[test]
    fn driven_flow_conserves_driven_energy() {
        let spec = ho_spec();
        let tau = 0.9;
        let x0 = PhasePoint::one(1.4, 0.2);
        let e0 = driven_hamiltonian(&x0, tau, &spec).unwrap();
        let x1 = flow(&x0, 2.1, FlowKind::Driven { tau }, &spec).unwrap();
        let e1 = driven_hamiltonian(&x1, tau, &spec).unwrap();
        assert_relative_eq!(e0, e1, epsilon = 1e-9);
        let _ = SmoothingWindow::new(0.1).unwrap();
    }
}
