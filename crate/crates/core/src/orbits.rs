//! Closed compound orbits for N = 1: pairs of flow segments, one on the
//! E-shell of H and one on the E'-shell of H(·|τ), joined at the points where
//! the two shells intersect. Provides their times, actions, monodromies,
//! energy-Jacobians and caustic counts — the raw material of the
//! semiclassical transition density.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::{DMatrix, Matrix2, Vector2};

use crate::dynamics::{
    advance, driven_gradient, driven_hamiltonian, flow, monodromy_checkpoints,
    sample_trajectory, tangent_flow, trace_contour, ContourParams, FlowKind, Monodromy,
    ShellContour,
};
use crate::error::{Error, Result};
use crate::system::{PhaseFunction, PhasePoint, SystemSpec, TransitionQuery};

/// A point common to the E-shell of H and the E'-shell of H(·|τ), with its
/// flow times along each contour's parametrisation.
#[derive(Debug, Clone)]
pub struct ShellIntersection {
    pub point: PhasePoint,
    pub tangency_flag: bool,
    /// Angle between the two shell tangents at the point, in [0, π/2].
    pub grazing_angle: f64,
    /// Flow time from the E-contour seed to this point.
    pub time_e: f64,
    /// Flow time from the driven-contour seed to this point.
    pub time_ep: f64,
}

/// One traversal of a shell arc between two intersections.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub from: usize,
    pub to: usize,
    /// Signed traversal time, including windings.
    pub time: f64,
    pub winding: i64,
}

/// Segment catalogue for one query: all ordered endpoint pairs, both flow
/// directions, windings up to the cutoff.
#[derive(Debug, Clone)]
pub struct SegmentCatalogue {
    pub on_e: Vec<Segment>,
    pub on_ep: Vec<Segment>,
    pub period_e: f64,
    pub period_ep: f64,
}

/// A closed compound orbit: E-segment from `endpoints.0` to `endpoints.1`
/// in time `t`, then back along the driven shell in time `t_prime`.
#[derive(Debug, Clone)]
pub struct CompoundOrbit {
    pub query: TransitionQuery,
    pub endpoints: (ShellIntersection, ShellIntersection),
    pub t: f64,
    pub t_prime: f64,
    pub winding: (i64, i64),
    /// S(E, E') = ∮ p·dq around the compound circuit.
    pub action_energy: f64,
    /// S(t, t') = S(E, E') − E·t − E'·t'.
    pub action_time: f64,
    pub monodromy: Monodromy,
    pub det_one_minus_m: f64,
    /// ∂(t, t')/∂(E, E') and its determinant; None if not requested.
    pub jacobian_te: Option<JacobianTE>,
    /// Caustic count σ along the short-time continuation path; None if not requested.
    pub caustic: Option<CausticReport>,
    pub near_caustic: bool,
}

impl CompoundOrbit {
    /// Damping weight exp(−ε(|t| + |t'|)/ħ) of this orbit's contribution.
    pub fn damping(&self, hbar: f64) -> f64 {
        (-(self.query.window.epsilon) * (self.t.abs() + self.t_prime.abs()) / hbar).exp()
    }
}

/// Finite-difference Jacobian of orbit times over the shell energies.
#[derive(Debug, Clone, Copy)]
pub struct JacobianTE {
    pub matrix: Matrix2<f64>,
    pub det: f64,
    /// Determinant of the independently computed inverse map ∂(E,E')/∂(t,t'),
    /// populated only when the dual-route check is requested.
    pub inverse_det: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CausticReport {
    pub count: u32,
    /// det[Id − M] vanishes at the orbit itself (endpoint of the path).
    pub near_endpoint: bool,
}

/// Numerical controls for the orbit search.
#[derive(Debug, Clone)]
pub struct OrbitParams {
    pub contour: ContourParams,
    /// Winding cutoff; None picks the smallest count consistent with the damping cutoff.
    pub j_max: Option<i64>,
    /// Orbits with exp(−ε(|t|+|t'|)/ħ) below this are pruned.
    pub damping_cutoff: f64,
    /// Sample count per shell period for circuit actions (doubled once for extrapolation).
    pub segment_samples: usize,
    pub tangency_threshold: f64,
    pub closure_tol: f64,
    pub caustic_samples_per_period: usize,
    pub with_jacobian: bool,
    /// Also run the inverse-route Newton solve that cross-checks the Jacobian
    /// determinant; expensive, so off by default.
    pub with_jacobian_check: bool,
    pub with_caustics: bool,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self {
            contour: ContourParams::default(),
            j_max: None,
            damping_cutoff: 1e-6,
            segment_samples: 1024,
            tangency_threshold: 1e-4,
            closure_tol: 1e-7,
            caustic_samples_per_period: 100,
            with_jacobian: true,
            with_jacobian_check: false,
            with_caustics: true,
        }
    }
}

/// Shared shell geometry for one (E, E', τ): both contours and their
/// intersection points. The driven E'-shell is parametrised through the
/// intrinsic E'-contour transported by the driver flow.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub contour_e: ShellContour,
    pub contour_ep: ShellContour,
    pub intersections: Vec<ShellIntersection>,
}

/// Finds the flow time of a point known to lie on the contour, by Newton
/// steps along the flow from the nearest stored sample.
fn locate_time(contour: &ShellContour, f: &PhaseFunction, y: &PhasePoint) -> Result<f64> {
    let i = contour.nearest_sample(y);
    let (mut s, mut x) = (contour.samples[i].0, contour.samples[i].1.clone());
    let field = crate::dynamics::hamiltonian_field(f);
    let target = y.to_vector();
    for _ in 0..60 {
        let xv = x.to_vector();
        let v = field(&xv);
        let vv = v.dot(&v);
        if vv < 1e-20 {
            return Err(Error::UnsupportedTopology { e: contour.energy });
        }
        let ds = -(&xv - &target).dot(&v) / vv;
        if ds.abs() < 1e-14 * contour.period.max(1.0) {
            break;
        }
        x = advance(f, &x, ds)?;
        s += ds;
    }
    if x.dist(y) > 1e-6 {
        return Err(Error::NoConvergence { iters: 60, residual: x.dist(y) });
    }
    Ok(s.rem_euclid(contour.period))
}

/// Builds the contours and intersection set for one query.
pub fn build_geometry(query: &TransitionQuery, spec: &SystemSpec, params: &OrbitParams) -> Result<Geometry> {
    if spec.dof != 1 {
        return Err(Error::Invalid("compound-orbit geometry requires N = 1".into()));
    }
    let tau = query.tau;
    let contour_e = trace_contour(query.e, FlowKind::Intrinsic, spec, &params.contour)?;
    let contour_ep = trace_contour(query.e_prime, FlowKind::Intrinsic, spec, &params.contour)?;
    let n = contour_e.samples.len() - 1;
    let mut g = Vec::with_capacity(n + 1);
    for (_, x) in &contour_e.samples {
        g.push(driven_hamiltonian(x, tau, spec)? - query.e_prime);
    }
    let field = crate::dynamics::hamiltonian_field(&spec.hamiltonian);
    // refine a point on the E-contour where H(x|τ) − E' = 0, from time t0
    let refine_root = |t0: f64, x0: &PhasePoint, t_hi: f64| -> Result<(f64, PhasePoint)> {
        let mut t = t0;
        let mut x = x0.clone();
        for _ in 0..80 {
            let gv = driven_hamiltonian(&x, tau, spec)? - query.e_prime;
            let grad = driven_gradient(&x, tau, spec)?;
            let v = field(&x.to_vector());
            let dg = grad.dot(&v);
            if dg.abs() < 1e-14 {
                break;
            }
            let mut dt = -gv / dg;
            let span = t_hi - t0;
            dt = dt.clamp(-span, span);
            if dt.abs() < 1e-15 * contour_e.period {
                break;
            }
            x = advance(&spec.hamiltonian, &x, dt)?;
            t += dt;
        }
        Ok((t, x))
    };
    let scale = query.e_prime.abs().max(1.0);
    let mut raw: Vec<(f64, PhasePoint, bool)> = Vec::new();
    for i in 1..=n {
        let (t_lo, ref x_lo) = contour_e.samples[i - 1];
        let t_hi = contour_e.samples[i].0;
        if g[i - 1] == 0.0 {
            raw.push((t_lo, x_lo.clone(), false));
        } else if g[i - 1] * g[i] < 0.0 {
            let (t, x) = refine_root(t_lo, x_lo, t_hi)?;
            raw.push((t, x, false));
        }
    }
    // tangential touches: local minima of |g| that dip to zero without a sign
    // change; indices treated cyclically so a touch at the seed is not missed
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let near = g[i].abs() < 1e-3 * scale;
        let local_min = g[i].abs() < g[prev].abs() && g[i].abs() <= g[next].abs();
        let same_sign = g[prev] * g[i] > 0.0 && g[i] * g[next] > 0.0;
        if near && local_min && same_sign {
            // ternary search for the minimum of |g| over the three-sample window
            let (t_a, ref x_a) = contour_e.samples[prev];
            let span = 2.0 * contour_e.period / n as f64;
            let eval = |dt: f64| -> Result<(f64, PhasePoint)> {
                let x = advance(&spec.hamiltonian, x_a, dt)?;
                Ok(((driven_hamiltonian(&x, tau, spec)? - query.e_prime).abs(), x))
            };
            let (mut lo, mut hi) = (0.0, span);
            for _ in 0..80 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if eval(m1)?.0 < eval(m2)?.0 {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let dt = 0.5 * (lo + hi);
            let (gmin, x) = eval(dt)?;
            if gmin < 1e-8 * scale {
                raw.push(((t_a + dt).rem_euclid(contour_e.period), x, true));
            }
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    // dedupe (sign-change roots adjacent to a touch, seed duplicated at t = 0 and T)
    let mut pts: Vec<(f64, PhasePoint, bool)> = Vec::new();
    for (t, x, tang) in raw {
        if pts.iter().all(|(_, y, _)| y.dist(&x) > 1e-6) {
            pts.push((t, x, tang));
        }
    }
    let mut intersections = Vec::with_capacity(pts.len());
    for (time_e, x, tang) in pts {
        let drift_e = (spec.hamiltonian.eval(&x) - query.e).abs();
        let drift_ep = (driven_hamiltonian(&x, tau, spec)? - query.e_prime).abs();
        if drift_e > 1e-9 * scale || drift_ep > 1e-9 * scale {
            return Err(Error::NoConvergence { iters: 80, residual: drift_e.max(drift_ep) });
        }
        let v1 = {
            let gr = spec.hamiltonian.gradient(&x);
            Vector2::new(gr[1], -gr[0])
        };
        let v2 = {
            let gr = driven_gradient(&x, tau, spec)?;
            Vector2::new(gr[1], -gr[0])
        };
        let cross = (v1[0] * v2[1] - v1[1] * v2[0]).abs();
        let grazing_angle = (cross / (v1.norm() * v2.norm())).min(1.0).asin();
        let y = flow(&x, -tau, FlowKind::Driver, spec)?;
        let time_ep = locate_time(&contour_ep, &spec.hamiltonian, &y)?;
        intersections.push(ShellIntersection {
            point: x,
            tangency_flag: tang || grazing_angle < params.tangency_threshold,
            grazing_angle,
            time_e,
            time_ep,
        });
    }
    Ok(Geometry { contour_e, contour_ep, intersections })
}

/// All transversal (and tangential, flagged) intersections of the E-shell of
/// H with the E'-shell of H(·|τ). An empty list means disjoint or nested
/// shells, which is a valid geometry, not an error.
pub fn shell_intersections(
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
) -> Result<Vec<ShellIntersection>> {
    Ok(build_geometry(query, spec, params)?.intersections)
}

/// Smallest winding cutoff consistent with the damping cutoff: windings with
/// exp(−ε·j·T/ħ) below the cutoff cannot contribute above it.
pub fn default_j_max(query: &TransitionQuery, hbar: f64, period: f64, damping_cutoff: f64) -> i64 {
    let rate = query.window.epsilon * period / hbar;
    if rate <= 0.0 {
        return 3;
    }
    let j = (-damping_cutoff.ln() / rate).ceil() as i64;
    j.clamp(0, 60)
}

fn segment_time_set(base: f64, period: f64, j_max: i64) -> Vec<(f64, i64)> {
    // j = 0 is the forward arc, j = −1 its backward traversal; further
    // windings extend both directions symmetrically.
    let mut out = Vec::new();
    for j in -(j_max + 1)..=j_max {
        out.push((base + j as f64 * period, j));
    }
    out
}

/// Signed traversal times between every ordered pair of distinct
/// intersections, on each shell, for all windings up to `j_max`.
pub fn segment_times(
    intersections: &[ShellIntersection],
    geometry: &Geometry,
    j_max: i64,
) -> SegmentCatalogue {
    let t_e = geometry.contour_e.period;
    let t_ep = geometry.contour_ep.period;
    let mut on_e = Vec::new();
    let mut on_ep = Vec::new();
    for a in 0..intersections.len() {
        for b in 0..intersections.len() {
            if a == b {
                continue;
            }
            let base_e = (intersections[b].time_e - intersections[a].time_e).rem_euclid(t_e);
            for (time, winding) in segment_time_set(base_e, t_e, j_max) {
                on_e.push(Segment { from: a, to: b, time, winding });
            }
            let base_ep = (intersections[b].time_ep - intersections[a].time_ep).rem_euclid(t_ep);
            for (time, winding) in segment_time_set(base_ep, t_ep, j_max) {
                on_ep.push(Segment { from: a, to: b, time, winding });
            }
        }
    }
    SegmentCatalogue { on_e, on_ep, period_e: t_e, period_ep: t_ep }
}

/// ∮ p·dq around an ordered closed curve given by samples. The first and
/// last samples must coincide within `closure_tol`.
pub fn symplectic_area(curve: &[PhasePoint], closure_tol: f64) -> Result<f64> {
    if curve.len() < 2 {
        return Ok(0.0);
    }
    let gap = curve[0].dist(&curve[curve.len() - 1]);
    if gap > closure_tol {
        return Err(Error::NotClosed { gap, tol: closure_tol });
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        for d in 0..w[0].dof() {
            area += 0.5 * (w[0].p[d] + w[1].p[d]) * (w[1].q[d] - w[0].q[d]);
        }
    }
    Ok(area)
}

/// Circuit action at one sampling resolution: E-segment then driven segment.
fn circuit_action(
    a: &ShellIntersection,
    b: &ShellIntersection,
    t: f64,
    t_prime: f64,
    tau: f64,
    spec: &SystemSpec,
    n_e: usize,
    n_ep: usize,
    closure_tol: f64,
) -> Result<f64> {
    let seg_e = sample_trajectory(&a.point, t, FlowKind::Intrinsic, spec, n_e)?;
    let end_e = &seg_e.samples[seg_e.samples.len() - 1].1;
    if end_e.dist(&b.point) > closure_tol {
        return Err(Error::NotClosed { gap: end_e.dist(&b.point), tol: closure_tol });
    }
    let seg_ep = sample_trajectory(&b.point, t_prime, FlowKind::Driven { tau }, spec, n_ep)?;
    let end_ep = &seg_ep.samples[seg_ep.samples.len() - 1].1;
    if end_ep.dist(&a.point) > closure_tol {
        return Err(Error::NotClosed { gap: end_ep.dist(&a.point), tol: closure_tol });
    }
    let mut curve: Vec<PhasePoint> = seg_e.samples.into_iter().map(|(_, x)| x).collect();
    curve.extend(seg_ep.samples.into_iter().skip(1).map(|(_, x)| x));
    symplectic_area(&curve, closure_tol)
}

fn assemble_orbit(
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
    geometry: &Geometry,
    a: &ShellIntersection,
    b: &ShellIntersection,
    t: f64,
    t_prime: f64,
    winding: (i64, i64),
) -> Result<CompoundOrbit> {
    let tau = query.tau;
    let t_e = geometry.contour_e.period;
    let t_ep = geometry.contour_ep.period;
    let n_of = |time: f64, period: f64, base: usize| -> usize {
        let frac = (time.abs() / period).max(0.25);
        ((base as f64 * frac).ceil() as usize).max(64)
    };
    let n_e = n_of(t, t_e, params.segment_samples);
    let n_ep = n_of(t_prime, t_ep, params.segment_samples);
    // trapezoid at n and 2n, Richardson-extrapolated
    let s_coarse = circuit_action(a, b, t, t_prime, tau, spec, n_e, n_ep, params.closure_tol)?;
    let s_fine = circuit_action(a, b, t, t_prime, tau, spec, 2 * n_e, 2 * n_ep, params.closure_tol)?;
    let action_energy = (4.0 * s_fine - s_coarse) / 3.0;
    let action_time = action_energy - query.e * t - query.e_prime * t_prime;
    let m_e = tangent_flow(&a.point, t, FlowKind::Intrinsic, spec)?;
    let m_ep = tangent_flow(&b.point, t_prime, FlowKind::Driven { tau }, spec)?;
    let matrix = &m_ep.matrix * &m_e.matrix;
    let d = matrix.nrows();
    let det_one_minus_m = (DMatrix::identity(d, d) - &matrix).lu().determinant();
    let monodromy = Monodromy { matrix, time: t + t_prime };
    let near_caustic = a.tangency_flag || b.tangency_flag || det_one_minus_m.abs() < 1e-6;
    Ok(CompoundOrbit {
        query: query.clone(),
        endpoints: (a.clone(), b.clone()),
        t,
        t_prime,
        winding,
        action_energy,
        action_time,
        monodromy,
        det_one_minus_m,
        jacobian_te: None,
        caustic: None,
        near_caustic,
    })
}

/// Enumerates every closed compound orbit of the query above the damping
/// cutoff, with actions, monodromies and (optionally) energy-Jacobians and
/// caustic counts filled in.
pub fn compound_orbits(
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
) -> Result<Vec<CompoundOrbit>> {
    let geometry = build_geometry(query, spec, params)?;
    compound_orbits_in(query, spec, params, &geometry)
}

/// As `compound_orbits`, reusing an already-built geometry.
pub fn compound_orbits_in(
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
    geometry: &Geometry,
) -> Result<Vec<CompoundOrbit>> {
    let ints = &geometry.intersections;
    if ints.len() < 2 {
        return Ok(Vec::new());
    }
    let hbar = spec.hbar;
    let min_period = geometry.contour_e.period.min(geometry.contour_ep.period);
    let j_max = params
        .j_max
        .unwrap_or_else(|| default_j_max(query, hbar, min_period, params.damping_cutoff));
    let catalogue = segment_times(ints, geometry, j_max);
    let mut orbits = Vec::new();
    for seg_e in &catalogue.on_e {
        for seg_ep in catalogue.on_ep.iter().filter(|s| s.from == seg_e.to && s.to == seg_e.from) {
            let (t, t_prime) = (seg_e.time, seg_ep.time);
            if t == 0.0 && t_prime == 0.0 {
                continue;
            }
            let damping = (-(query.window.epsilon) * (t.abs() + t_prime.abs()) / hbar).exp();
            if damping < params.damping_cutoff {
                continue;
            }
            let a = &ints[seg_e.from];
            let b = &ints[seg_e.to];
            let mut orbit = assemble_orbit(
                query,
                spec,
                params,
                geometry,
                a,
                b,
                t,
                t_prime,
                (seg_e.winding, seg_ep.winding),
            )?;
            if params.with_caustics {
                let report = caustic_counter(&orbit, spec, params)?;
                orbit.near_caustic = orbit.near_caustic || report.near_endpoint;
                orbit.caustic = Some(report);
            }
            orbits.push(orbit);
        }
    }
    if params.with_jacobian {
        let mut cache = GeometryCache::new(spec.clone(), params.clone());
        cache.insert(query.e, query.e_prime, Rc::new(geometry.clone()));
        for orbit in &mut orbits {
            orbit.jacobian_te = Some(jacobian_times_energies_cached(orbit, query, &mut cache)?);
        }
    }
    orbits.sort_by(|x, y| (x.t.abs() + x.t_prime.abs()).total_cmp(&(y.t.abs() + y.t_prime.abs())));
    Ok(orbits)
}

/// Memoized shell geometries over displaced energies, shared by the
/// finite-difference Jacobian evaluations of one catalogue.
pub struct GeometryCache {
    spec: SystemSpec,
    params: OrbitParams,
    map: HashMap<(u64, u64), Rc<Geometry>>,
}

impl GeometryCache {
    pub fn new(spec: SystemSpec, params: OrbitParams) -> Self {
        Self { spec, params, map: HashMap::new() }
    }

    fn insert(&mut self, e: f64, ep: f64, g: Rc<Geometry>) {
        self.map.insert((e.to_bits(), ep.to_bits()), g);
    }

    fn get(&mut self, query: &TransitionQuery, e: f64, ep: f64) -> Result<Rc<Geometry>> {
        let key = (e.to_bits(), ep.to_bits());
        if let Some(g) = self.map.get(&key) {
            return Ok(g.clone());
        }
        let q = TransitionQuery { e, e_prime: ep, ..query.clone() };
        let g = Rc::new(build_geometry(&q, &self.spec, &self.params)?);
        self.insert(e, ep, g.clone());
        Ok(g)
    }
}

/// Times (t, t') of the continuation of `orbit` to displaced energies,
/// matching intersections by proximity and windings by closest time.
fn continued_times(
    orbit: &CompoundOrbit,
    query: &TransitionQuery,
    cache: &mut GeometryCache,
    e: f64,
    ep: f64,
) -> Result<(f64, f64)> {
    let g0 = cache.get(query, query.e, query.e_prime)?;
    let g = cache.get(query, e, ep)?;
    if g.intersections.len() != g0.intersections.len() {
        return Err(Error::Bifurcation);
    }
    let mut min_sep = f64::INFINITY;
    for (i, x) in g0.intersections.iter().enumerate() {
        for y in g0.intersections.iter().skip(i + 1) {
            min_sep = min_sep.min(x.point.dist(&y.point));
        }
    }
    let match_radius = (0.25 * min_sep).max(1e-6);
    let find = |target: &ShellIntersection| -> Result<&ShellIntersection> {
        let mut best: Option<(&ShellIntersection, f64)> = None;
        for cand in &g.intersections {
            let d = cand.point.dist(&target.point);
            if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                best = Some((cand, d));
            }
        }
        match best {
            Some((cand, d)) if d < match_radius => Ok(cand),
            _ => Err(Error::Bifurcation),
        }
    };
    let a = find(&orbit.endpoints.0)?;
    let b = find(&orbit.endpoints.1)?;
    let t_e = g.contour_e.period;
    let t_ep = g.contour_ep.period;
    let base_e = (b.time_e - a.time_e).rem_euclid(t_e);
    let base_ep = (a.time_ep - b.time_ep).rem_euclid(t_ep);
    let snap = |base: f64, period: f64, original: f64| -> f64 {
        base + ((original - base) / period).round() * period
    };
    Ok((snap(base_e, t_e, orbit.t), snap(base_ep, t_ep, orbit.t_prime)))
}

fn jacobian_times_energies_cached(
    orbit: &CompoundOrbit,
    query: &TransitionQuery,
    cache: &mut GeometryCache,
) -> Result<JacobianTE> {
    let h = (1e-4 * query.window.epsilon).max(1e-5);
    let (e0, ep0) = (query.e, query.e_prime);
    let tp = continued_times(orbit, query, cache, e0 + h, ep0)?;
    let tm = continued_times(orbit, query, cache, e0 - h, ep0)?;
    let up = continued_times(orbit, query, cache, e0, ep0 + h)?;
    let um = continued_times(orbit, query, cache, e0, ep0 - h)?;
    let matrix = Matrix2::new(
        (tp.0 - tm.0) / (2.0 * h),
        (up.0 - um.0) / (2.0 * h),
        (tp.1 - tm.1) / (2.0 * h),
        (up.1 - um.1) / (2.0 * h),
    );
    let det = matrix.determinant();
    if !cache.params.with_jacobian_check {
        return Ok(JacobianTE { matrix, det, inverse_det: None });
    }
    // Independent inverse route: Newton-solve for the energies that realise
    // displaced times, then finite-difference the preimages.
    let delta = 1e-4 * (orbit.t.abs() + orbit.t_prime.abs()).max(1.0);
    let solve_for = |cache: &mut GeometryCache, t_target: f64, tp_target: f64| -> Result<(f64, f64)> {
        let mut e = e0;
        let mut ep = ep0;
        let inv = matrix.try_inverse().ok_or(Error::Bifurcation)?;
        for _ in 0..20 {
            let (t_cur, tp_cur) = continued_times(orbit, query, cache, e, ep)?;
            let r = Vector2::new(t_cur - t_target, tp_cur - tp_target);
            if r.norm() < 1e-11 * (1.0 + t_target.abs() + tp_target.abs()) {
                break;
            }
            let step = inv * r;
            e -= step[0];
            ep -= step[1];
        }
        Ok((e, ep))
    };
    let (e_a, ep_a) = solve_for(cache, orbit.t + delta, orbit.t_prime)?;
    let (e_b, ep_b) = solve_for(cache, orbit.t - delta, orbit.t_prime)?;
    let (e_c, ep_c) = solve_for(cache, orbit.t, orbit.t_prime + delta)?;
    let (e_d, ep_d) = solve_for(cache, orbit.t, orbit.t_prime - delta)?;
    let inverse = Matrix2::new(
        (e_a - e_b) / (2.0 * delta),
        (e_c - e_d) / (2.0 * delta),
        (ep_a - ep_b) / (2.0 * delta),
        (ep_c - ep_d) / (2.0 * delta),
    );
    Ok(JacobianTE { matrix, det, inverse_det: Some(inverse.determinant()) })
}

/// ∂(t, t')/∂(E, E') of the orbit by central finite differences over the
/// energies, re-solving the displaced geometry, plus the independently
/// computed determinant of the inverse map for the dual-route check.
pub fn jacobian_times_energies(
    orbit: &CompoundOrbit,
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
) -> Result<JacobianTE> {
    let mut cache = GeometryCache::new(spec.clone(), params.clone());
    jacobian_times_energies_cached(orbit, query, &mut cache)
}

/// Re-solves the full orbit (times, action, monodromy) at displaced energies,
/// keeping the endpoint identity and winding counts.
pub fn continue_orbit(
    orbit: &CompoundOrbit,
    query: &TransitionQuery,
    spec: &SystemSpec,
    params: &OrbitParams,
    e: f64,
    ep: f64,
) -> Result<CompoundOrbit> {
    let mut cache = GeometryCache::new(spec.clone(), params.clone());
    let (t, t_prime) = continued_times(orbit, query, &mut cache, e, ep)?;
    let q = TransitionQuery { e, e_prime: ep, ..query.clone() };
    let g = cache.get(query, e, ep)?;
    let ints = &g.intersections;
    let a = ints
        .iter()
        .min_by(|x, y| x.point.dist(&orbit.endpoints.0.point).total_cmp(&y.point.dist(&orbit.endpoints.0.point)))
        .ok_or(Error::Bifurcation)?;
    let b = ints
        .iter()
        .min_by(|x, y| x.point.dist(&orbit.endpoints.1.point).total_cmp(&y.point.dist(&orbit.endpoints.1.point)))
        .ok_or(Error::Bifurcation)?;
    assemble_orbit(&q, spec, params, &g, a, b, t, t_prime, orbit.winding)
}

fn det_one_minus(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    (DMatrix::identity(d, d) - m).lu().determinant()
}

/// Counts caustics along the continuation path s ↦ (s·t, s·t') from the
/// short-time regime, as sign changes and tangential zeros of
/// det[Id − M'(s·t')·M(s·t)].
pub fn caustic_counter(orbit: &CompoundOrbit, spec: &SystemSpec, params: &OrbitParams) -> Result<CausticReport> {
    if orbit.t == 0.0 && orbit.t_prime == 0.0 {
        return Ok(CausticReport { count: 0, near_endpoint: false });
    }
    let tau = orbit.query.tau;
    let a = &orbit.endpoints.0.point;
    let b = &orbit.endpoints.1.point;
    // ≥ caustic_samples_per_period points per traversed shell period
    let dense = params.caustic_samples_per_period as f64;
    let k = ((orbit.t.abs() + orbit.t_prime.abs()) / (2.0 * std::f64::consts::PI) * dense)
        .ceil()
        .max(dense) as usize;
    let fractions: Vec<f64> = (1..=k).map(|i| i as f64 / k as f64).collect();
    let ms_e = monodromy_checkpoints(a, orbit.t, FlowKind::Intrinsic, spec, &fractions)?;
    let ms_ep = monodromy_checkpoints(b, orbit.t_prime, FlowKind::Driven { tau }, spec, &fractions)?;
    let f: Vec<f64> = ms_e
        .iter()
        .zip(&ms_ep)
        .map(|(me, mep)| det_one_minus(&(mep * me)))
        .collect();
    let scale = f.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale < 1e-10 {
        // degenerate family: determinant vanishes identically along the path
        return Ok(CausticReport { count: 0, near_endpoint: true });
    }
    let f_at = |s: f64| -> Result<f64> {
        let me = tangent_flow(a, s * orbit.t, FlowKind::Intrinsic, spec)?;
        let mep = tangent_flow(b, s * orbit.t_prime, FlowKind::Driven { tau }, spec)?;
        Ok(det_one_minus(&(mep.matrix * me.matrix)))
    };
    let mut count = 0u32;
    for i in 1..k {
        if f[i - 1] * f[i] < 0.0 {
            count += 1;
        }
    }
    // tangential touches: local minima of |f| refined by ternary search
    for i in 1..k - 1 {
        let local_min = f[i].abs() < f[i - 1].abs() && f[i].abs() <= f[i + 1].abs();
        let same_sign = f[i - 1] * f[i] > 0.0 && f[i] * f[i + 1] > 0.0;
        if local_min && same_sign && f[i].abs() < 1e-2 * scale {
            let (mut lo, mut hi) = (fractions[i - 1], fractions[i + 1]);
            for _ in 0..50 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if f_at(m1)?.abs() < f_at(m2)?.abs() {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            if f_at(0.5 * (lo + hi))?.abs() < 1e-8 * scale {
                count += 1;
            }
        }
    }
    let near_endpoint = f[k - 1].abs() < 1e-6 * scale;
    Ok(CausticReport { count, near_endpoint })
}

/// Flat record of one compound orbit for the structured catalogue output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OrbitRecord {
    pub e: f64,
    pub e_prime: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub t: f64,
    pub t_prime: f64,
    pub winding_e: i64,
    pub winding_ep: i64,
    pub action_energy: f64,
    pub action_time: f64,
    pub det_one_minus_m: f64,
    pub jacobian_det: Option<f64>,
    pub caustic_count: Option<u32>,
    pub near_caustic: bool,
    pub endpoint_a: (f64, f64),
    pub endpoint_b: (f64, f64),
}

impl OrbitRecord {
    pub fn from_orbit(o: &CompoundOrbit) -> Self {
        Self {
            e: o.query.e,
            e_prime: o.query.e_prime,
            tau: o.query.tau,
            epsilon: o.query.window.epsilon,
            t: o.t,
            t_prime: o.t_prime,
            winding_e: o.winding.0,
            winding_ep: o.winding.1,
            action_energy: o.action_energy,
            action_time: o.action_time,
            det_one_minus_m: o.det_one_minus_m,
            jacobian_det: o.jacobian_te.map(|j| j.det),
            caustic_count: o.caustic.map(|c| c.count),
            near_caustic: o.near_caustic,
            endpoint_a: (o.endpoints.0.point.q[0], o.endpoints.0.point.p[0]),
            endpoint_b: (o.endpoints.1.point.q[0], o.endpoints.1.point.p[0]),
        }
    }
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

    fn ho_query(tau: f64) -> TransitionQuery {
        TransitionQuery {
            e: 0.5,
            e_prime: 0.5,
            tau,
            window: SmoothingWindow::new(0.1).unwrap(),
        }
    }

    fn cheap_params() -> OrbitParams {
        OrbitParams { with_jacobian: false, with_caustics: false, ..Default::default() }
    }

    #[test]
    fn ho_intersections_at_half_q() {
        let ints = shell_intersections(&ho_query(1.0), &ho_spec(), &cheap_params()).unwrap();
        assert_eq!(ints.len(), 2);
        let s3 = 0.75f64.sqrt();
        for i in &ints {
            assert_relative_eq!(i.point.q[0], 0.5, epsilon = 1e-9);
            assert_relative_eq!(i.point.p[0].abs(), s3, epsilon = 1e-9);
            assert!(!i.tangency_flag);
        }
        assert!(ints.iter().any(|i| i.point.p[0] > 0.0));
        assert!(ints.iter().any(|i| i.point.p[0] < 0.0));
    }

    #[test]
    fn ho_intersection_times_match_circle_angles() {
        let ints = shell_intersections(&ho_query(1.0), &ho_spec(), &cheap_params()).unwrap();
        // clockwise flow from seed (1, 0): x(t) = (cos t, −sin t)
        let upper = ints.iter().find(|i| i.point.p[0] > 0.0).unwrap();
        let lower = ints.iter().find(|i| i.point.p[0] < 0.0).unwrap();
        assert_relative_eq!(upper.time_e, 5.0 * PI / 3.0, epsilon = 1e-7);
        assert_relative_eq!(lower.time_e, PI / 3.0, epsilon = 1e-7);
        assert_relative_eq!(upper.time_ep, 4.0 * PI / 3.0, epsilon = 1e-6);
        assert_relative_eq!(lower.time_ep, 2.0 * PI / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn ho_tangent_shells_flagged() {
        let ints = shell_intersections(&ho_query(2.0), &ho_spec(), &cheap_params()).unwrap();
        assert_eq!(ints.len(), 1, "{ints:?}");
        assert!(ints[0].tangency_flag);
        assert_relative_eq!(ints[0].point.q[0], 1.0, epsilon = 1e-4);
        assert!(ints[0].point.p[0].abs() < 1e-4);
    }

    #[test]
    fn ho_disjoint_shells_empty() {
        let ints = shell_intersections(&ho_query(3.0), &ho_spec(), &cheap_params()).unwrap();
        assert!(ints.is_empty());
    }

    #[test]
    fn ho_segment_arc_times() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = cheap_params();
        let g = build_geometry(&q, &spec, &params).unwrap();
        let cat = segment_times(&g.intersections, &g, 1);
        // base arcs between the two intersections are 2π/3 and 4π/3
        let base: Vec<f64> = cat.on_e.iter().filter(|s| s.winding == 0).map(|s| s.time).collect();
        assert!(base.iter().any(|&t| (t - 2.0 * PI / 3.0).abs() < 1e-7));
        assert!(base.iter().any(|&t| (t - 4.0 * PI / 3.0).abs() < 1e-7));
        // one winding adds a period; backward traversal is j = −1
        assert!(cat.on_e.iter().any(|s| s.winding == 1 && (s.time - (2.0 * PI / 3.0 + 2.0 * PI)).abs() < 1e-7));
        assert!(cat.on_e.iter().any(|s| s.winding == -1 && (s.time + 4.0 * PI / 3.0).abs() < 1e-7));
    }

    #[test]
    fn ho_base_orbit_catalogue() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = OrbitParams { j_max: Some(0), damping_cutoff: 0.0, ..cheap_params() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        // two segment choices per shell and two endpoint orders: 4 base orbits
        // plus their time reversals
        assert_eq!(orbits.len(), 8, "{:?}", orbits.iter().map(|o| (o.t, o.t_prime)).collect::<Vec<_>>());
        let lens = orbits
            .iter()
            .find(|o| (o.t - 2.0 * PI / 3.0).abs() < 1e-7 && (o.t_prime - 2.0 * PI / 3.0).abs() < 1e-7)
            .expect("lens orbit present");
        let lens_area = 2.0 * PI / 3.0 - 0.75f64.sqrt();
        assert_relative_eq!(lens.action_energy, lens_area, epsilon = 1e-10);
        assert_relative_eq!(lens.action_time, lens_area - 0.5 * lens.t - 0.5 * lens.t_prime, epsilon = 1e-8);
        // time reversal: (−t, −t', −S) is present
        for o in &orbits {
            assert!(
                orbits.iter().any(|r| (r.t + o.t).abs() < 1e-7
                    && (r.t_prime + o.t_prime).abs() < 1e-7
                    && (r.action_energy + o.action_energy).abs() < 1e-7),
                "missing reversal of ({}, {})",
                o.t,
                o.t_prime
            );
        }
    }

    #[test]
    fn ho_det_one_minus_m_identity() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = OrbitParams { j_max: Some(1), ..cheap_params() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        assert!(!orbits.is_empty());
        for o in &orbits {
            // both stability factors are rotations, so det[1−M] = 2 − 2cos(t+t')
            let expected = 2.0 - 2.0 * (o.t + o.t_prime).cos();
            assert_relative_eq!(o.det_one_minus_m, expected, epsilon = 1e-7);
            assert!(o.monodromy.symplectic_defect() < 1e-8);
        }
    }

    #[test]
    fn orbit_closure_under_reintegration() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = OrbitParams { j_max: Some(0), ..cheap_params() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        for o in &orbits {
            let mid = flow(&o.endpoints.0.point, o.t, FlowKind::Intrinsic, &spec).unwrap();
            assert!(mid.dist(&o.endpoints.1.point) < 1e-7);
            let back = flow(&mid, o.t_prime, FlowKind::Driven { tau: q.tau }, &spec).unwrap();
            assert!(back.dist(&o.endpoints.0.point) < 1e-7);
        }
    }

    #[test]
    fn det_one_minus_m_rebase_invariant() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = OrbitParams { j_max: Some(0), ..cheap_params() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        for o in orbits.iter().take(4) {
            let m_e = tangent_flow(&o.endpoints.0.point, o.t, FlowKind::Intrinsic, &spec).unwrap();
            let m_ep = tangent_flow(&o.endpoints.1.point, o.t_prime, FlowKind::Driven { tau: q.tau }, &spec).unwrap();
            let from_a = det_one_minus(&(&m_ep.matrix * &m_e.matrix));
            let from_b = det_one_minus(&(&m_e.matrix * &m_ep.matrix));
            assert!((from_a - from_b).abs() < 1e-8);
        }
    }

    #[test]
    fn symplectic_area_full_circle() {
        // τ = 0, E = E': the compound circuit from complementary arcs is the
        // full shell, area 2πE
        let e = 0.5f64;
        let r = (2.0 * e).sqrt();
        let n = 4096;
        let curve: Vec<PhasePoint> = (0..=n)
            .map(|i| {
                // clockwise along the flow: x(t) = (r cos t, −r sin t)
                let th = 2.0 * PI * i as f64 / n as f64;
                PhasePoint::one(r * th.cos(), -r * th.sin())
            })
            .collect();
        let area = symplectic_area(&curve, 1e-9).unwrap();
        assert_relative_eq!(area, 2.0 * PI * e, epsilon = 1e-5);
    }

    #[test]
    fn symplectic_area_degenerate_zero() {
        let a = PhasePoint::one(0.3, 0.4);
        assert_eq!(symplectic_area(&[a.clone(), a], 1e-12).unwrap(), 0.0);
        assert_eq!(symplectic_area(&[PhasePoint::one(1.0, 1.0)], 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn symplectic_area_rejects_open_curve() {
        let curve = vec![PhasePoint::one(0.0, 0.0), PhasePoint::one(1.0, 0.0)];
        assert!(matches!(symplectic_area(&curve, 1e-9), Err(Error::NotClosed { .. })));
    }

    fn lens_orbit(params: &OrbitParams) -> (SystemSpec, TransitionQuery, CompoundOrbit) {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let orbits = compound_orbits(&q, &spec, params).unwrap();
        let lens = orbits
            .into_iter()
            .find(|o| (o.t - 2.0 * PI / 3.0).abs() < 1e-7 && (o.t_prime - 2.0 * PI / 3.0).abs() < 1e-7)
            .expect("lens orbit");
        (spec, q, lens)
    }

    #[test]
    fn jacobian_matches_analytic_circle_formula() {
        let params = OrbitParams { j_max: Some(0), with_caustics: false, ..Default::default() };
        let (_, q, lens) = lens_orbit(&params);
        let jac = lens.jacobian_te.unwrap();
        // t(E, E') = 2 arccos[(2E + τ² − 2E')/(2τ√(2E))] for the short E-arc
        let tau = q.tau;
        let t_of = |e: f64, ep: f64| 2.0 * ((2.0 * e + tau * tau - 2.0 * ep) / (2.0 * tau * (2.0 * e).sqrt())).acos();
        let h = 1e-6;
        let dt_de = (t_of(q.e + h, q.e_prime) - t_of(q.e - h, q.e_prime)) / (2.0 * h);
        let dt_dep = (t_of(q.e, q.e_prime + h) - t_of(q.e, q.e_prime - h)) / (2.0 * h);
        assert_relative_eq!(jac.matrix[(0, 0)], dt_de, max_relative = 1e-4);
        assert_relative_eq!(jac.matrix[(0, 1)], dt_dep, max_relative = 1e-4);
    }

    #[test]
    fn jacobian_inverse_identity() {
        let params = OrbitParams {
            j_max: Some(0),
            with_caustics: false,
            with_jacobian_check: true,
            ..Default::default()
        };
        let (_, _, lens) = lens_orbit(&params);
        let jac = lens.jacobian_te.unwrap();
        let inv = jac.inverse_det.unwrap();
        assert!((jac.det * inv - 1.0).abs() < 1e-6, "{} * {}", jac.det, inv);
    }

    #[test]
    fn jacobian_shell_exchange_symmetry() {
        // E = E' with Λ = p: the displaced shells are congruent, so the two
        // diagonal sensitivities agree in magnitude
        let params = OrbitParams { j_max: Some(0), with_caustics: false, ..Default::default() };
        let (_, _, lens) = lens_orbit(&params);
        let jac = lens.jacobian_te.unwrap();
        assert!((jac.matrix[(0, 0)].abs() - jac.matrix[(1, 1)].abs()).abs() < 1e-6);
    }

    #[test]
    fn action_derivative_is_time() {
        // ∂S(E,E')/∂E = t and ∂S/∂E' = t'
        let params = OrbitParams { j_max: Some(0), with_caustics: false, with_jacobian: false, ..Default::default() };
        let (spec, q, lens) = lens_orbit(&params);
        let h = 1e-5;
        let sp = continue_orbit(&lens, &q, &spec, &params, q.e + h, q.e_prime).unwrap();
        let sm = continue_orbit(&lens, &q, &spec, &params, q.e - h, q.e_prime).unwrap();
        let ds_de = (sp.action_energy - sm.action_energy) / (2.0 * h);
        assert_relative_eq!(ds_de, lens.t, max_relative = 1e-4);
        let up = continue_orbit(&lens, &q, &spec, &params, q.e, q.e_prime + h).unwrap();
        let um = continue_orbit(&lens, &q, &spec, &params, q.e, q.e_prime - h).unwrap();
        let ds_dep = (up.action_energy - um.action_energy) / (2.0 * h);
        assert_relative_eq!(ds_dep, lens.t_prime, max_relative = 1e-4);
    }

    #[test]
    fn caustic_counts_for_ho_paths() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = OrbitParams { j_max: Some(0), damping_cutoff: 0.0, with_jacobian: false, ..Default::default() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        // det[1−M] = 2 − 2cos(t+t'): zero only where t+t' crosses a multiple of 2π
        let lens = orbits
            .iter()
            .find(|o| (o.t - 2.0 * PI / 3.0).abs() < 1e-7 && (o.t_prime - 2.0 * PI / 3.0).abs() < 1e-7)
            .unwrap();
        assert_eq!(lens.caustic.unwrap().count, 0, "t+t' = 4π/3 path crosses no caustic");
        let outer = orbits
            .iter()
            .find(|o| (o.t - 4.0 * PI / 3.0).abs() < 1e-7 && (o.t_prime - 4.0 * PI / 3.0).abs() < 1e-7)
            .unwrap();
        assert_eq!(outer.caustic.unwrap().count, 1, "t+t' = 8π/3 path touches the 2π caustic once");
    }

    #[test]
    fn zero_length_caustic_path() {
        let spec = ho_spec();
        let q = ho_query(1.0);
        let params = cheap_params();
        let g = build_geometry(&q, &spec, &params).unwrap();
        let a = g.intersections[0].clone();
        let orbit = CompoundOrbit {
            query: q,
            endpoints: (a.clone(), a),
            t: 0.0,
            t_prime: 0.0,
            winding: (0, 0),
            action_energy: 0.0,
            action_time: 0.0,
            monodromy: Monodromy { matrix: DMatrix::identity(2, 2), time: 0.0 },
            det_one_minus_m: 0.0,
            jacobian_te: None,
            caustic: None,
            near_caustic: false,
        };
        let report = caustic_counter(&orbit, &spec, &params).unwrap();
        assert_eq!(report.count, 0);
    }

    #[test]
    fn damping_prunes_long_orbits() {
        let spec = ho_spec();
        let q = TransitionQuery { window: SmoothingWindow::new(0.5).unwrap(), ..ho_query(1.0) };
        let params = OrbitParams { j_max: Some(4), damping_cutoff: 1e-6, ..cheap_params() };
        let orbits = compound_orbits(&q, &spec, &params).unwrap();
        for o in &orbits {
            assert!(o.damping(spec.hbar) >= 1e-6);
        }
        // ε/ħ = 0.5: the cutoff time is |t|+|t'| ≤ 2 ln(1e6) ≈ 27.6, so some
        // windings survive but the j = 4 extremes are gone
        assert!(orbits.iter().all(|o| o.t.abs() + o.t_prime.abs() < 28.0));
        assert!(!orbits.is_empty());
    }

    #[test]
    fn orbit_record_roundtrip() {
        let params = OrbitParams { j_max: Some(0), with_caustics: false, ..Default::default() };
        let (_, _, lens) = lens_orbit(&params);
        let rec = OrbitRecord::from_orbit(&lens);
        let json = serde_json::to_string(&rec).unwrap();
        let back: OrbitRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.t, rec.t);
        assert_eq!(back.jacobian_det, rec.jacobian_det);
    }
}
