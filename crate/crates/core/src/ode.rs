//! Adaptive Dormand–Prince 5(4) integration for autonomous systems, with
//! event localisation, plus a fixed-step leapfrog for separable Hamiltonians.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Dormand–Prince coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive embedded Runge–Kutta 5(4) integrator.
#[derive(Debug, Clone, Copy)]
pub struct Rk45 {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub escape_radius: f64,
    pub max_steps: usize,
}

impl Default for Rk45 {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-12, h_max: f64::INFINITY, escape_radius: 1e6, max_steps: 10_000_000 }
    }
}

impl Rk45 {
    /// Integrates y' = f(y) from t0 to t1 (either direction). The observer sees
    /// every accepted step, including the initial and final states; returning
    /// false stops the integration early at the current state.
    pub fn integrate<F>(
        &self,
        f: &F,
        y0: DVector<f64>,
        t0: f64,
        t1: f64,
        mut observer: Option<&mut dyn FnMut(f64, &DVector<f64>) -> bool>,
    ) -> Result<DVector<f64>>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        if !(t0.is_finite() && t1.is_finite()) {
            return Err(Error::NonFinite("integration interval"));
        }
        let mut t = t0;
        let mut y = y0;
        if let Some(obs) = observer.as_deref_mut() {
            if !obs(t, &y) {
                return Ok(y);
            }
        }
        if t0 == t1 {
            return Ok(y);
        }
        let dir = (t1 - t0).signum();
        let span = (t1 - t0).abs();
        let mut k0 = f(&y);
        // initial step from the state/velocity scale, capped by the interval so
        // short solves start with a single-step attempt
        let ynorm = y.amax();
        let fnorm = k0.amax();
        let mut h = (0.05 * (ynorm + self.atol) / (fnorm + 1e-30))
            .max(1e-10)
            .min(span)
            .min(self.h_max);
        let mut steps = 0usize;
        loop {
            steps += 1;
            if steps > self.max_steps {
                return Err(Error::NoConvergence { iters: steps, residual: (t1 - t).abs() });
            }
            let remaining = (t1 - t).abs();
            if h > remaining {
                h = remaining;
            }
            let hs = dir * h;
            let mut k = [k0.clone(), k0.clone(), k0.clone(), k0.clone(), k0.clone(), k0.clone(), k0.clone()];
            for stage in 1..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate().take(stage) {
                    let a = if stage < 6 { A[stage - 1][j] } else { B5[j] };
                    if a != 0.0 {
                        ys.axpy(hs * a, kj, 1.0);
                    }
                }
                k[stage] = f(&ys);
            }
            // 5th order solution (FSAL: stage 6 is f at the candidate point)
            let mut y5 = y.clone();
            for (j, kj) in k.iter().enumerate().take(6) {
                if B5[j] != 0.0 {
                    y5.axpy(hs * B5[j], kj, 1.0);
                }
            }
            let mut err = 0.0f64;
            for i in 0..y.len() {
                let mut e4 = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e4 += (B5[j] - B4[j]) * kj[i];
                }
                let e = hs * e4;
                let sc = self.atol + self.rtol * y[i].abs().max(y5[i].abs());
                err = err.max((e / sc).abs());
            }
            if err <= 1.0 {
                t += hs;
                y = y5;
                k0 = k[6].clone();
                if let Some(obs) = observer.as_deref_mut() {
                    if !obs(t, &y) {
                        return Ok(y);
                    }
                }
                if y.norm() > self.escape_radius {
                    return Err(Error::Escape { t, state: y.as_slice().to_vec() });
                }
                if (t1 - t).abs() <= 1e-14 * span.max(1.0) {
                    return Ok(y);
                }
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * factor).min(self.h_max);
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Escape { t, state: y.as_slice().to_vec() });
            }
        }
    }

    /// Convenience wrapper without an observer.
    pub fn solve<F>(&self, f: &F, y0: DVector<f64>, t0: f64, t1: f64) -> Result<DVector<f64>>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        self.integrate(f, y0, t0, t1, None)
    }

    /// Integrates forward from `y0` until the scalar `g` crosses zero in the
    /// requested direction (+1 upward, -1 downward, 0 either), with the
    /// crossing localised to ~1e-13 relative in time. Crossings before
    /// `t_min` are ignored; gives up at `t_max`.
    pub fn flow_to_event<F, G>(
        &self,
        f: &F,
        y0: DVector<f64>,
        g: &G,
        t_min: f64,
        t_max: f64,
        direction: i8,
    ) -> Result<(f64, DVector<f64>)>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
        G: Fn(&DVector<f64>) -> f64,
    {
        let mut t_prev = 0.0;
        let mut y_prev = y0.clone();
        let mut g_prev = g(&y_prev);
        let mut found: Option<(f64, f64)> = None; // bracket (t_lo, t_hi) relative to y_prev
        {
            let mut observer = |t: f64, y: &DVector<f64>| -> bool {
                let gv = g(y);
                let crossed = match direction {
                    1 => g_prev < 0.0 && gv >= 0.0,
                    -1 => g_prev > 0.0 && gv <= 0.0,
                    _ => g_prev * gv <= 0.0 && g_prev != gv,
                };
                if crossed && t > t_min {
                    found = Some((t_prev, t));
                    return false;
                }
                t_prev = t;
                y_prev = y.clone();
                g_prev = gv;
                true
            };
            // Integration may end (t_max) without an event; that is an error below.
            let _ = self.integrate(f, y0, 0.0, t_max, Some(&mut observer))?;
        }
        let (t_lo, t_hi) = found.ok_or(Error::NoConvergence { iters: 0, residual: g_prev.abs() })?;
        // Bisection on dt from y_prev (taken at t_lo).
        let base = y_prev;
        let eval = |dt: f64| -> Result<(DVector<f64>, f64)> {
            let y = self.solve(f, base.clone(), 0.0, dt)?;
            let gv = g(&y);
            Ok((y, gv))
        };
        let mut lo = 0.0;
        let mut hi = t_hi - t_lo;
        let g_lo = g(&base);
        let mut sign_lo = g_lo.signum();
        if g_lo == 0.0 {
            sign_lo = -(direction as f64);
        }
        let mut mid = 0.5 * (lo + hi);
        let mut y_mid = base.clone();
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let (y, gv) = eval(mid)?;
            y_mid = y;
            if gv == 0.0 || (hi - lo) < 1e-14 * (t_lo + mid).abs().max(1e-3) {
                break;
            }
            if gv.signum() == sign_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((t_lo + mid, y_mid))
    }
}

/// One fixed-step leapfrog (Störmer–Verlet) pass for a separable Hamiltonian.
/// Kept for long-time runs where symplecticity matters more than order.
pub fn leapfrog<FQ, FP>(grad_v: FQ, grad_t: FP, q0: Vec<f64>, p0: Vec<f64>, t: f64, dt: f64) -> (Vec<f64>, Vec<f64>)
where
    FQ: Fn(&[f64]) -> Vec<f64>,
    FP: Fn(&[f64]) -> Vec<f64>,
{
    let n_steps = (t.abs() / dt).ceil().max(1.0) as usize;
    let h = t / n_steps as f64;
    let mut q = q0;
    let mut p = p0;
    for _ in 0..n_steps {
        let gv = grad_v(&q);
        for i in 0..p.len() {
            p[i] -= 0.5 * h * gv[i];
        }
        let gt = grad_t(&p);
        for i in 0..q.len() {
            q[i] += h * gt[i];
        }
        let gv = grad_v(&q);
        for i in 0..p.len() {
            p[i] -= 0.5 * h * gv[i];
        }
    }
    (q, p)
}
