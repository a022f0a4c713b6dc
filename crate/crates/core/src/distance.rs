//! The Lorentzian time-separation function, its gradient, the short-distance
//! limit, and closed forms for product metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{self, ShootOptions, ShootState};
use crate::manifold::{CausalCharacter, MetricField, Point, TangentVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Causal {
    Chronological,
    NonChronological,
}

#[derive(Clone, Debug)]
pub struct SeparationValue {
    pub value: f64,
    pub causal: Causal,
    pub velocity: Option<TangentVector>,
}

/// `d` from a connecting velocity: `√(−(v,v))` when future timelike, else 0.
pub fn separation_from_velocity(m: &MetricField, x: &[f64], v: &[f64]) -> f64 {
    match m.causal_character_at(x, v) {
        CausalCharacter::TimelikeFuture => (-m.inner_at(x, v, v)).sqrt(),
        _ => 0.0,
    }
}

/// Table-building entry point: separation plus the shooting state for warm
/// starts on the next, nearby target.
pub fn time_separation_raw(
    m: &MetricField,
    x: &[f64],
    y: &[f64],
    warm: Option<&ShootState>,
    opts: &ShootOptions,
) -> Result<(f64, ShootState)> {
    let (v, _, _, jac) = match geodesic::log_map_raw(m, x, y, warm, opts) {
        Ok(r) => r,
        // a stale warm start can derail Newton; retry cold before failing
        Err(_) if warm.is_some() => geodesic::log_map_raw(m, x, y, None, opts)?,
        Err(e) => return Err(e),
    };
    let d = separation_from_velocity(m, x, &v);
    Ok((d, ShootState { target: y.to_vec(), velocity: v, jac }))
}

pub fn time_separation(m: &MetricField, x: &Point, y: &Point, opts: &ShootOptions) -> Result<SeparationValue> {
    let r = geodesic::log_map(m, x, y, opts)?;
    let value = separation_from_velocity(m, &x.coords, &r.velocity.components);
    Ok(if value > 0.0 {
        SeparationValue { value, causal: Causal::Chronological, velocity: Some(r.velocity) }
    } else {
        SeparationValue { value: 0.0, causal: Causal::NonChronological, velocity: None }
    })
}

#[derive(Clone, Debug)]
pub struct GradientCheck {
    /// `grad d⁺_x(y) = −γ̇(ℓ)/|γ̇(ℓ)|`, a vector at y.
    pub gradient: TangentVector,
    /// `∂d/∂y^k` from a 5-point stencil of `time_separation`.
    pub fd_covector: Vec<f64>,
    /// Largest disagreement between the stencil and the lowered gradient.
    pub disagreement: f64,
    /// Set when the disagreement exceeds 1e-4.
    pub flagged: bool,
}

pub fn grad_d_plus(m: &MetricField, x: &Point, y: &Point, opts: &ShootOptions) -> Result<GradientCheck> {
    let n = m.dim();
    let sep = time_separation(m, x, y, opts)?;
    let v = sep.velocity.ok_or(Error::NonChronological)?;
    let (_, vend) = geodesic::flow(m, &x.coords, &v.components, 1.0, &opts.ode)?;
    let speed = (-m.inner_at(&y.coords, &vend, &vend)).sqrt();
    let grad: Vec<f64> = vend.iter().map(|c| -c / speed).collect();
    let g = m.g_at(&y.coords);
    let lowered: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i][j] * grad[j]).sum()).collect();
    let h = 1e-3;
    let mut fd = vec![0.0; n];
    for k in 0..n {
        let mut acc = 0.0;
        for (off, c) in [(-2.0, 1.0 / 12.0), (-1.0, -2.0 / 3.0), (1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)] {
            let mut yy = y.coords.clone();
            yy[k] += off * h;
            acc += c * time_separation(m, x, &m.point(yy), opts)?.value;
        }
        fd[k] = acc / h;
    }
    let disagreement = fd.iter().zip(&lowered).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
    Ok(GradientCheck { gradient: TangentVector::new(y.clone(), grad), fd_covector: fd, disagreement, flagged: disagreement > 1e-4 })
}

/// `(grad, grad) + 1`, zero for a solution of the eikonal equation.
pub fn eikonal_residual(m: &MetricField, grad: &TangentVector) -> Result<f64> {
    Ok(m.inner(grad, grad)? + 1.0)
}

/// Time separation on `−dt² + ĝ` from the factor distance.
pub fn product_closed_form(dhat: impl Fn(&[f64], &[f64]) -> f64, t1: f64, t2: f64, x1: &[f64], x2: &[f64]) -> f64 {
    let dt = t2 - t1;
    let dh = dhat(x1, x2);
    if dt > dh {
        (dt * dt - dh * dh).sqrt()
    } else {
        0.0
    }
}

/// Distance for `ĝ = scale·δ`.
pub fn euclidean_factor_distance(scale: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |a, b| scale.sqrt() * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Great-circle distance for the round sphere of radius `a` in the
/// stereographic chart used by the `product` catalog metric.
pub fn sphere_factor_distance(a: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
    move |p, q| {
        let embed = |x: &[f64]| {
            let xi: Vec<f64> = x.iter().map(|c| c / (2.0 * a)).collect();
            let s: f64 = xi.iter().map(|c| c * c).sum();
            let mut e: Vec<f64> = xi.iter().map(|c| 2.0 * c / (1.0 + s)).collect();
            e.push((1.0 - s) / (1.0 + s));
            e
        };
        let (e1, e2) = (embed(p), embed(q));
        let diff: f64 = e1.iter().zip(&e2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let sum: f64 = e1.iter().zip(&e2).map(|(u, v)| (u + v) * (u + v)).sum::<f64>().sqrt();
        // half-angle form stays accurate for both tiny and near-antipodal pairs
        2.0 * a * diff.atan2(sum)
    }
}

/// Polynomial extrapolation to `s → 0` through `(s_k, f_k)` (Neville).
pub fn extrapolate_to_zero(s: &[f64], f: &[f64]) -> f64 {
    let mut p = f.to_vec();
    let n = s.len();
    for lvl in 1..n {
        for i in 0..n - lvl {
            let (a, b) = (s[i], s[i + lvl]);
            p[i] = (0.0 - b) / (a - b) * p[i] + (a - 0.0) / (a - b) * p[i + 1];
        }
    }
    p[0]
}

/// Richardson-extrapolated `lim d⁺_x(exp_x(sξ))/s`, an estimate of `|ξ|_g`.
pub fn short_distance_limit(m: &MetricField, x: &Point, xi: &TangentVector, s_list: &[f64], opts: &ShootOptions) -> Result<f64> {
    if m.causal_character(xi) != CausalCharacter::TimelikeFuture {
        return Err(Error::InvalidParam("ξ must be future timelike".into()));
    }
    let mut ratios = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let v: Vec<f64> = xi.components.iter().map(|c| c * s).collect();
        let c = geodesic::exp_map(m, x, &TangentVector::new(x.clone(), v), &opts.ode)?;
        let d = time_separation(m, x, &c, opts)?;
        if d.causal != Causal::Chronological {
            return Err(Error::NonChronological);
        }
        ratios.push(d.value / s);
    }
    Ok(extrapolate_to_zero(s_list, &ratios))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::catalog_metric;
    use serde_json::json;

    fn mink() -> MetricField {
        catalog_metric("minkowski", &json!({"dim": 4})).unwrap()
    }

    #[test]
    fn minkowski_values() {
        let m = mink();
        let o = m.point(vec![0.0; 4]);
        let opts = ShootOptions::default();
        let d = time_separation(&m, &o, &m.point(vec![1.0, 0.6, 0.0, 0.0]), &opts).unwrap();
        assert!((d.value - 0.8).abs() < 1e-12);
        assert_eq!(d.causal, Causal::Chronological);
        let d = time_separation(&m, &o, &m.point(vec![0.5, 1.0, 0.0, 0.0]), &opts).unwrap();
        assert_eq!((d.value, d.causal), (0.0, Causal::NonChronological));
        let d = time_separation(&m, &m.point(vec![1.0, 0.2, 0.0, 0.0]), &o, &opts).unwrap();
        assert_eq!((d.value, d.causal), (0.0, Causal::NonChronological));
    }

    #[test]
    fn gradient_minkowski() {
        let m = mink();
        let opts = ShootOptions::default();
        let r = grad_d_plus(&m, &m.point(vec![0.0; 4]), &m.point(vec![1.0, 0.0, 0.0, 0.0]), &opts).unwrap();
        assert!((r.gradient.components[0] + 1.0).abs() < 1e-12);
        assert!(!r.flagged);
        assert!(eikonal_residual(&m, &r.gradient).unwrap().abs() < 1e-8);
        // analytic covector of √(t² − |z|²) at (1.2, 0.3, −0.4, 0.1)
        let y = [1.2, 0.3, -0.4, 0.1];
        let r = grad_d_plus(&m, &m.point(vec![0.0; 4]), &m.point(y.to_vec()), &opts).unwrap();
        let d = (y[0] * y[0] - y[1] * y[1] - y[2] * y[2] - y[3] * y[3]).sqrt();
        let want = [y[0] / d, -y[1] / d, -y[2] / d, -y[3] / d];
        for k in 0..4 {
            assert!((r.fd_covector[k] - want[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn static_pair_gradient_along_time() {
        let m = catalog_metric("product", &json!({"dim": 3, "factor": {"kind": "sphere", "radius": 1.0}})).unwrap();
        let r = grad_d_plus(&m, &m.point(vec![0.0, 0.2, 0.1]), &m.point(vec![0.8, 0.2, 0.1]), &Default::default()).unwrap();
        assert!((r.gradient.components[0] + 1.0).abs() < 1e-9);
        assert!(r.gradient.components[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn closed_form_basics() {
        let e = euclidean_factor_distance(1.0);
        assert!((product_closed_form(&e, 0.0, 1.0, &[0.0], &[0.6]) - 0.8).abs() < 1e-15);
        assert_eq!(product_closed_form(&e, 0.0, 0.6, &[0.0], &[0.6]), 0.0);
    }

    #[test]
    fn sphere_distance_matches_embedding_angle() {
        let a = 2.0;
        let d = sphere_factor_distance(a);
        // origin to the point at coordinate radius 2a is a quarter great circle
        assert!((d(&[0.0, 0.0], &[2.0 * a, 0.0]) - 0.5 * std::f64::consts::PI * a).abs() < 1e-14);
        assert!((d(&[0.1, 0.0], &[0.1, 0.0])).abs() < 1e-15);
    }

    #[test]
    fn short_distance_flat() {
        let m = mink();
        let x = m.point(vec![0.0; 4]);
        let s = [1e-2, 5e-3, 2.5e-3];
        let opts = ShootOptions::default();
        let v = short_distance_limit(&m, &x, &TangentVector::new(x.clone(), vec![1.0, 0.0, 0.0, 0.0]), &s, &opts).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let v = short_distance_limit(&m, &x, &TangentVector::new(x.clone(), vec![1.0, 0.6, 0.0, 0.0]), &s, &opts).unwrap();
        assert!((v - 0.8).abs() < 1e-9);
    }

    #[test]
    fn neville_is_exact_on_quadratics() {
        let s = [0.4, 0.2, 0.1];
        let f: Vec<f64> = s.iter().map(|x| 3.0 - 2.0 * x + 5.0 * x * x).collect();
        assert!((extrapolate_to_zero(&s, &f) - 3.0).abs() < 1e-12);
    }
}
