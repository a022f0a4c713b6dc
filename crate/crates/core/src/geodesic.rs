//! Geodesic integration (Dormand–Prince 5(4)), the exponential map, Newton
//! shooting for its inverse, hypersurface crossings and the completeness probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{MetricField, Point, TangentVector};
use crate::small::{self, Mat, MAXD, ZERO_MAT};

type State = [f64; 2 * MAXD];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicOptions {
    pub tol_ode: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        GeodesicOptions { tol_ode: 1e-10, h_min: 1e-12, max_steps: 2_000_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootOptions {
    pub ode: GeodesicOptions,
    pub tol_shoot: f64,
    pub n_max: usize,
    /// Lower bound on |det J| of the shooting Jacobian (conjugate-point monitor).
    pub min_det: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions { ode: GeodesicOptions::default(), tol_shoot: 1e-10, n_max: 50, min_det: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathStatus {
    Completed,
    LeftChart,
    CurvatureBlowup,
    StepUnderflow,
}

#[derive(Clone, Debug)]
pub struct GeodesicSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub initial: (Point, TangentVector),
    pub samples: Vec<GeodesicSample>,
    pub status: PathStatus,
}

impl GeodesicPath {
    pub fn last(&self) -> &GeodesicSample {
        self.samples.last().expect("paths always hold the initial sample")
    }
}

#[derive(Clone, Debug)]
pub struct ShootingResult {
    pub velocity: TangentVector,
    pub residual: f64,
    pub iterations: usize,
}

// Dormand–Prince 5(4) tableau
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

#[inline]
fn rhs(m: &MetricField, y: &State, n: usize) -> Option<State> {
    if !m.contains(&y[..n]) {
        return None;
    }
    let a = m.accel(&y[..n], &y[n..2 * n])?;
    let mut out = [0.0; 2 * MAXD];
    out[..n].copy_from_slice(&y[n..2 * n]);
    out[n..2 * n].copy_from_slice(&a[..n]);
    Some(out)
}

/// One Dormand–Prince step; returns (5th-order state, error estimate).
#[inline]
fn dp_step(m: &MetricField, y: &State, k1: &State, h: f64, n: usize) -> Option<(State, f64, State)> {
    let w = 2 * n;
    let mut k = [[0.0; 2 * MAXD]; 7];
    k[0] = *k1;
    for s in 1..7 {
        let mut ys = *y;
        for i in 0..w {
            let mut acc = 0.0;
            for j in 0..s {
                acc += A[s][j] * k[j][i];
            }
            ys[i] += h * acc;
        }
        k[s] = rhs(m, &ys, n)?;
    }
    let mut y5 = *y;
    let mut err = 0.0f64;
    for i in 0..w {
        let mut s5 = 0.0;
        let mut s4 = 0.0;
        for s in 0..7 {
            s5 += B5[s] * k[s][i];
            s4 += B4[s] * k[s][i];
        }
        y5[i] += h * s5;
        err = err.max((h * (s5 - s4)).abs() / (1.0 + y[i].abs().max(y5[i].abs())));
    }
    // FSAL: stage 7 is evaluated at y5
    Some((y5, err, k[6]))
}

enum FlowEnd {
    Done(State),
    Left(f64),
    Underflow(f64),
}

/// Adaptive integration to `t_end`, calling `each` on every accepted step.
fn drive(
    m: &MetricField,
    x: &[f64],
    v: &[f64],
    t_end: f64,
    opts: &GeodesicOptions,
    mut each: impl FnMut(f64, &State) -> bool,
) -> Result<FlowEnd> {
    let n = m.dim();
    let mut y = [0.0; 2 * MAXD];
    y[..n].copy_from_slice(x);
    y[n..2 * n].copy_from_slice(v);
    if t_end == 0.0 {
        return Ok(FlowEnd::Done(y));
    }
    let mut k1 = rhs(m, &y, n).ok_or_else(|| Error::OutsideDomain(x.to_vec()))?;
    let vnorm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-3);
    // a compact feature is resolved by at least eight steps across its radius
    let h_cap = m.feature_length().map_or(f64::INFINITY, |l| 0.125 * l / vnorm);
    let mut h = (0.05 / vnorm).min(t_end).min(h_cap).max(opts.h_min);
    let mut t = 0.0;
    let mut steps = 0;
    while t < t_end {
        if steps >= opts.max_steps {
            return Ok(FlowEnd::Underflow(t));
        }
        steps += 1;
        let last = t + h >= t_end;
        let hh = if last { t_end - t } else { h };
        match dp_step(m, &y, &k1, hh, n) {
            Some((y5, err, k7)) => {
                let ratio = err / opts.tol_ode;
                if ratio <= 1.0 {
                    t = if last { t_end } else { t + hh };
                    y = y5;
                    let mut xw = [0.0; MAXD];
                    xw[..n].copy_from_slice(&y[..n]);
                    m.wrap(&mut xw[..n]);
                    if xw[..n] != y[..n] {
                        y[..n].copy_from_slice(&xw[..n]);
                        k1 = match rhs(m, &y, n) {
                            Some(k) => k,
                            None => return Ok(FlowEnd::Left(t)),
                        };
                    } else {
                        k1 = k7;
                    }
                    if !each(t, &y) {
                        return Ok(FlowEnd::Left(t));
                    }
                    let fac = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                    if !last {
                        h = (hh * fac).min(h_cap);
                    }
                } else {
                    h = hh * (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9);
                }
            }
            None => {
                // stage left the chart: shrink, and give up at h_min
                h = hh * 0.25;
            }
        }
        if h < opts.h_min && t < t_end {
            // distinguish a chart exit from genuine stiffness
            let probe = dp_step(m, &y, &k1, opts.h_min, n);
            return Ok(if probe.is_none() { FlowEnd::Left(t) } else { FlowEnd::Underflow(t) });
        }
    }
    Ok(FlowEnd::Done(y))
}

/// Endpoint (x, v) at `t_end` without storing samples.
pub fn flow(m: &MetricField, x: &[f64], v: &[f64], t_end: f64, opts: &GeodesicOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.dim();
    match drive(m, x, v, t_end, opts, |_, _| true)? {
        FlowEnd::Done(y) => Ok((y[..n].to_vec(), y[n..2 * n].to_vec())),
        FlowEnd::Left(t) => Err(Error::LeftChart(t)),
        FlowEnd::Underflow(t) => Err(Error::StepUnderflow(t)),
    }
}

/// Fixed-step Dormand–Prince flow. The endpoint is a smooth function of the
/// initial data, which matters wherever the flow itself is differentiated.
pub fn flow_fixed(m: &MetricField, x: &[f64], v: &[f64], t_end: f64, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.dim();
    let mut y = [0.0; 2 * MAXD];
    y[..n].copy_from_slice(x);
    y[n..2 * n].copy_from_slice(v);
    if t_end == 0.0 {
        return Ok((x.to_vec(), v.to_vec()));
    }
    let h = t_end / steps as f64;
    let mut k1 = rhs(m, &y, n).ok_or_else(|| Error::OutsideDomain(x.to_vec()))?;
    for s in 0..steps {
        let (y5, _, k7) = dp_step(m, &y, &k1, h, n).ok_or(Error::LeftChart(s as f64 * h))?;
        y = y5;
        let before = y;
        m.wrap(&mut y[..n]);
        k1 = if before[..n] != y[..n] { rhs(m, &y, n).ok_or(Error::LeftChart(s as f64 * h))? } else { k7 };
    }
    Ok((y[..n].to_vec(), y[n..2 * n].to_vec()))
}

pub fn integrate(m: &MetricField, x: &Point, v: &TangentVector, t_end: f64, opts: &GeodesicOptions) -> Result<GeodesicPath> {
    let n = m.dim();
    if !m.contains(&x.coords) {
        return Err(Error::OutsideDomain(x.coords.clone()));
    }
    let mut samples = vec![GeodesicSample { t: 0.0, x: x.coords.clone(), v: v.components.clone() }];
    let end = drive(m, &x.coords, &v.components, t_end, opts, |t, y| {
        samples.push(GeodesicSample { t, x: y[..n].to_vec(), v: y[n..2 * n].to_vec() });
        true
    })?;
    let status = match end {
        FlowEnd::Done(_) => PathStatus::Completed,
        FlowEnd::Left(_) => PathStatus::LeftChart,
        FlowEnd::Underflow(_) => PathStatus::StepUnderflow,
    };
    Ok(GeodesicPath { initial: (x.clone(), v.clone()), samples, status })
}

pub fn exp_map(m: &MetricField, x: &Point, v: &TangentVector, opts: &GeodesicOptions) -> Result<Point> {
    let (y, _) = flow(m, &x.coords, &v.components, 1.0, opts)?;
    Ok(m.point(y))
}

/// Warm-start information for a shooting solve: a nearby solved pair.
#[derive(Clone, Debug)]
pub struct ShootState {
    pub target: Vec<f64>,
    pub velocity: Vec<f64>,
    pub jac: Mat,
}

fn residual_vec(m: &MetricField, x: &[f64], v: &[f64], y: &[f64], opts: &GeodesicOptions) -> Result<(Vec<f64>, f64)> {
    let (e, _) = flow(m, x, v, 1.0, opts)?;
    let r: Vec<f64> = e.iter().zip(y).map(|(a, b)| a - b).collect();
    let norm = r.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok((r, norm))
}

fn fd_jacobian(m: &MetricField, x: &[f64], v: &[f64], r0: &[f64], y: &[f64], opts: &GeodesicOptions) -> Result<Mat> {
    let n = m.dim();
    let mut jac = ZERO_MAT;
    let mut vp = v.to_vec();
    for k in 0..n {
        let d = 1e-7 * v[k].abs().max(1.0);
        vp[k] = v[k] + d;
        let (rp, _) = residual_vec(m, x, &vp, y, opts)?;
        vp[k] = v[k];
        for i in 0..n {
            jac[i][k] = (rp[i] - r0[i]) / d;
        }
    }
    Ok(jac)
}

/// Damped Newton on `v ↦ exp_x(v) − y` with step halving. The Jacobian is
/// refreshed only when the contraction stalls, so warm-started solves along a
/// grid row usually cost one or two flows.
pub fn log_map_raw(
    m: &MetricField,
    x: &[f64],
    y: &[f64],
    warm: Option<&ShootState>,
    opts: &ShootOptions,
) -> Result<(Vec<f64>, f64, usize, Mat)> {
    let n = m.dim();
    let cold: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    if x == y {
        let mut id = ZERO_MAT;
        for i in 0..n {
            id[i][i] = 1.0;
        }
        return Ok((cold, 0.0, 0, id));
    }
    let mut guess = None;
    if let Some(w) = warm {
        let dy: Vec<f64> = y.iter().zip(&w.target).map(|(a, b)| a - b).collect();
        if let Some(dv) = small::solve(&w.jac, &small::from_slice(&dy), n) {
            guess = Some(((0..n).map(|i| w.velocity[i] + dv[i]).collect::<Vec<_>>(), w.jac));
        }
    }
    let (mut v, mut jac, mut fresh) = match guess {
        Some((v, j)) => (v, j, false),
        None => (cold, ZERO_MAT, true),
    };
    let (mut r, mut res) = residual_vec(m, x, &v, y, &opts.ode)?;
    if fresh {
        jac = fd_jacobian(m, x, &v, &r, y, &opts.ode)?;
    }
    for it in 0..opts.n_max {
        if res <= opts.tol_shoot {
            return Ok((v, res, it, jac));
        }
        let d = small::det(&jac, n);
        let step = if d.abs() >= opts.min_det { small::solve(&jac, &small::from_slice(&r), n) } else { None };
        let Some(step) = step else {
            if !fresh {
                jac = fd_jacobian(m, x, &v, &r, y, &opts.ode)?;
                fresh = true;
                continue;
            }
            return Err(Error::ConjugatePoint(d));
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand: Vec<f64> = (0..n).map(|i| v[i] - alpha * step[i]).collect();
            if let Ok((rc, nc)) = residual_vec(m, x, &cand, y, &opts.ode) {
                if nc < res {
                    accepted = Some((cand, rc, nc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, rc, nc)) => {
                let slow = nc > 1e-2 * res;
                v = cand;
                r = rc;
                res = nc;
                fresh = false;
                if slow && res > opts.tol_shoot {
                    jac = fd_jacobian(m, x, &v, &r, y, &opts.ode)?;
                    fresh = true;
                }
            }
            None if !fresh => {
                jac = fd_jacobian(m, x, &v, &r, y, &opts.ode)?;
                fresh = true;
            }
            None => return Err(Error::NoConvergence { residual: res, iterations: it + 1 }),
        }
    }
    if res <= opts.tol_shoot {
        return Ok((v, res, opts.n_max, jac));
    }
    Err(Error::NoConvergence { residual: res, iterations: opts.n_max })
}

/// Shooting by continuation in the target: `y` is approached along the
/// coordinate segment from `x`, each substep warm-started from the last.
/// The substep count doubles on failure, up to 64.
pub fn log_map_continued(m: &MetricField, x: &[f64], y: &[f64], opts: &ShootOptions) -> Result<(Vec<f64>, f64, usize, Mat)> {
    let mut last = Error::NoConvergence { residual: f64::NAN, iterations: 0 };
    let mut steps = 4;
    while steps <= 64 {
        let mut warm: Option<ShootState> = None;
        let mut total = 0;
        let mut out = None;
        for k in 1..=steps {
            let s = k as f64 / steps as f64;
            let yk: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + s * (b - a)).collect();
            match log_map_raw(m, x, &yk, warm.as_ref(), opts) {
                Ok((v, res, it, jac)) => {
                    total += it;
                    if k == steps {
                        out = Some((v, res, total, jac));
                    } else {
                        warm = Some(ShootState { target: yk, velocity: v, jac });
                    }
                }
                Err(e) => {
                    last = e;
                    break;
                }
            }
        }
        if let Some(r) = out {
            return Ok(r);
        }
        steps *= 2;
    }
    Err(last)
}

pub fn log_map(m: &MetricField, x: &Point, y: &Point, opts: &ShootOptions) -> Result<ShootingResult> {
    for p in [x, y] {
        if !m.contains(&p.coords) {
            return Err(Error::OutsideDomain(p.coords.clone()));
        }
    }
    let (v, residual, iterations, _) = log_map_raw(m, &x.coords, &y.coords, None, opts)
        .or_else(|_| log_map_continued(m, &x.coords, &y.coords, opts))?;
    Ok(ShootingResult { velocity: TangentVector::new(x.clone(), v), residual, iterations })
}

/// A level function whose sign distinguishes the two sides of a hypersurface.
pub trait SideFunction {
    fn side(&self, x: &[f64]) -> Result<f64>;
    /// Σ-parameters of a point on (or within tolerance of) the surface.
    fn locate(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct Crossing {
    pub t0: f64,
    pub u0: Vec<f64>,
    pub point: Vec<f64>,
}

/// First parameter `t₀ > t_skip` at which the geodesic meets the surface,
/// located by a sign change of the side function along accepted steps and
/// refined by bisection (re-integrating from the bracketing sample).
pub fn hit_hypersurface(
    m: &MetricField,
    x: &[f64],
    v: &[f64],
    t_max: f64,
    surface: &dyn SideFunction,
    tol_hit: f64,
    opts: &GeodesicOptions,
) -> Result<Option<Crossing>> {
    let n = m.dim();
    let t_skip = 10.0 * tol_hit;
    let (mut prev_t, mut prev_y) = (0.0, {
        let mut y = [0.0; 2 * MAXD];
        y[..n].copy_from_slice(x);
        y[n..2 * n].copy_from_slice(v);
        y
    });
    let mut prev_s = surface.side(x)?;
    let mut bracket: Option<(f64, State, f64)> = None;
    let mut err: Option<Error> = None;
    let _ = drive(m, x, v, t_max, opts, |t, y| {
        let s = match surface.side(&y[..n]) {
            Ok(s) => s,
            Err(e) => {
                err = Some(e);
                return false;
            }
        };
        if t > t_skip && prev_t >= 0.0 && s * prev_s < 0.0 && (prev_t > t_skip || prev_s.abs() > 1e3 * tol_hit) {
            bracket = Some((prev_t, prev_y, t));
            return false;
        }
        if t > t_skip && s == 0.0 {
            bracket = Some((prev_t, prev_y, t));
            return false;
        }
        prev_t = t;
        prev_y = *y;
        prev_s = s;
        true
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let Some((ta, ya, tb)) = bracket else { return Ok(None) };
    let sa = surface.side(&ya[..n])?;
    let at = |dt: f64| -> Result<State> {
        let (px, pv) = flow(m, &ya[..n], &ya[n..2 * n], dt, opts)?;
        let mut y = [0.0; 2 * MAXD];
        y[..n].copy_from_slice(&px);
        y[n..2 * n].copy_from_slice(&pv);
        Ok(y)
    };
    let (mut lo, mut hi) = (0.0, tb - ta);
    let mut ymid = at(hi)?;
    while hi - lo > tol_hit {
        let mid = 0.5 * (lo + hi);
        ymid = at(mid)?;
        let s = surface.side(&ymid[..n])?;
        if s == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if s * sa > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tc = 0.5 * (lo + hi);
    if hi != lo {
        ymid = at(tc)?;
    }
    let u0 = surface.locate(&ymid[..n])?;
    Ok(Some(Crossing { t0: ta + tc, u0, point: ymid[..n].to_vec() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Completeness {
    CompleteToTMax,
    ScalarSingularity { t_blowup: f64, kretschmann: f64 },
    LeftChart { t_exit: f64 },
    /// Step underflow without a curvature blow-up: no verdict.
    Inconclusive { t_stop: f64 },
}

/// Integrate forward watching the Kretschmann scalar along accepted steps.
pub fn completeness_probe(
    m: &MetricField,
    x: &[f64],
    v: &[f64],
    t_max: f64,
    kappa_max: f64,
    opts: &GeodesicOptions,
) -> Result<Completeness> {
    let n = m.dim();
    let mut blow: Option<(f64, f64)> = None;
    let mut last_ok = 0.0;
    let end = drive(m, x, v, t_max, opts, |t, y| {
        match m.curvature_at(&m.point(y[..n].to_vec())) {
            Ok(c) => {
                if !c.kretschmann.is_finite() || c.kretschmann.abs() > kappa_max {
                    blow = Some((t, c.kretschmann));
                    return false;
                }
                last_ok = t;
                true
            }
            // the curvature stencil leaving the chart near its edge: keep going
            Err(_) => true,
        }
    })?;
    if let Some((t, k)) = blow {
        return Ok(Completeness::ScalarSingularity { t_blowup: t, kretschmann: k });
    }
    Ok(match end {
        FlowEnd::Done(_) => Completeness::CompleteToTMax,
        FlowEnd::Left(t) => Completeness::LeftChart { t_exit: t.max(last_ok) },
        FlowEnd::Underflow(t) => Completeness::Inconclusive { t_stop: t },
    })
}
