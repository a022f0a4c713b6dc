//! Timelike hypersurfaces given by explicit parametrizations, their unit
//! normals, Fermi (semigeodesic) charts, the material-particle cone and the
//! timelike-convexity probe.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{self, GeodesicOptions, SideFunction};
use crate::manifold::{CausalCharacter, MetricField, Point, TangentVector};
use crate::small;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SigmaKind {
    /// `{x^axis = offset}`, parametrized by the remaining coordinates.
    Plane {
        dim: usize,
        #[serde(default = "default_axis")]
        axis: usize,
        #[serde(default)]
        offset: f64,
    },
    /// `ℝ × {|x − c| = radius}` over the spatial coordinates, parametrized by
    /// `(t, θ)` for one spatial sphere angle or `(t, θ, φ)` for two.
    Slab { dim: usize, center: Vec<f64>, radius: f64 },
    /// The worldlines `τ ↦ exp_p(τE(u + c₀ξ))`, `E = (1 − c₀²)^{−1/2}`, over
    /// unit spatial ξ ⟂ u; parameters `(τ, angles of ξ)`.
    Cone {
        p: Vec<f64>,
        u: Vec<f64>,
        c0: f64,
        eps: f64,
        #[serde(default)]
        eps0: Option<f64>,
    },
    /// `x^axis = offset + ½ uᵀQu` over the remaining coordinates u.
    Graph {
        dim: usize,
        #[serde(default = "default_axis")]
        axis: usize,
        #[serde(default)]
        offset: f64,
        quad: Vec<Vec<f64>>,
    },
}

fn default_axis() -> usize {
    1
}

fn default_sign() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSpec {
    #[serde(flatten)]
    pub kind: SigmaKind,
    #[serde(default = "default_sign")]
    pub normal_sign: f64,
    #[serde(default)]
    pub domain: Option<ParamBox>,
}

/// Cone frame data resolved against the metric at the tip.
#[derive(Clone, Debug)]
struct ConeFrame {
    p: Vec<f64>,
    u: Vec<f64>,
    /// g-orthonormal spatial frame orthogonal to u
    e: Vec<Vec<f64>>,
    c0: f64,
    energy: f64,
}

#[derive(Clone, Debug)]
pub struct Hypersurface {
    pub spec: SigmaSpec,
    pub param_domain: ParamBox,
    pub normal_sign: f64,
    metric: MetricField,
    cone: Option<ConeFrame>,
}

/// `E = (1 − c₀²)^{−1/2}` and `|q|_g = c₀E` for the material-particle cone.
pub fn cone_energy(c0: f64) -> (f64, f64) {
    let e = 1.0 / (1.0 - c0 * c0).sqrt();
    (e, c0 * e)
}

fn sphere_point(angles: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    match angles.len() {
        0 => (vec![1.0], vec![]),
        1 => {
            let (s, c) = angles[0].sin_cos();
            (vec![c, s], vec![vec![-s, c]])
        }
        2 => {
            let (st, ct) = angles[0].sin_cos();
            let (sp, cp) = angles[1].sin_cos();
            (vec![st * cp, st * sp, ct], vec![vec![ct * cp, ct * sp, -st], vec![-st * sp, st * cp, 0.0]])
        }
        _ => unreachable!("spheres of dimension > 2 are not parametrized"),
    }
}

fn sphere_angles(dir: &[f64]) -> Vec<f64> {
    match dir.len() {
        1 => vec![],
        2 => vec![dir[1].atan2(dir[0])],
        3 => {
            let r = dir.iter().map(|c| c * c).sum::<f64>().sqrt();
            vec![(dir[2] / r).clamp(-1.0, 1.0).acos(), dir[1].atan2(dir[0])]
        }
        _ => unreachable!(),
    }
}

impl Hypersurface {
    pub fn new(m: &MetricField, spec: SigmaSpec) -> Result<Self> {
        let dim = m.dim();
        let n = dim - 1;
        if spec.normal_sign != 1.0 && spec.normal_sign != -1.0 {
            return Err(Error::InvalidParam("normal_sign must be ±1".into()));
        }
        let mut cone = None;
        let default_domain = match &spec.kind {
            SigmaKind::Plane { dim: d, axis, .. } | SigmaKind::Graph { dim: d, axis, .. } => {
                if *d != dim || *axis >= dim {
                    return Err(Error::InvalidParam("plane/graph dim or axis mismatch".into()));
                }
                if let SigmaKind::Graph { quad, .. } = &spec.kind {
                    if quad.len() != n || quad.iter().any(|r| r.len() != n) {
                        return Err(Error::InvalidParam("graph quad must be n×n".into()));
                    }
                }
                ParamBox { lo: vec![-1.0; n], hi: vec![1.0; n] }
            }
            SigmaKind::Slab { dim: d, center, radius } => {
                if *d != dim || center.len() != dim - 1 || !(*radius > 0.0) || !(3..=4).contains(&dim) {
                    return Err(Error::InvalidParam("slab needs dim 3 or 4, spatial center, radius > 0".into()));
                }
                if dim == 3 {
                    ParamBox { lo: vec![-3.0, -PI], hi: vec![3.0, PI] }
                } else {
                    ParamBox { lo: vec![-3.0, 0.1, -PI], hi: vec![3.0, PI - 0.1, PI] }
                }
            }
            SigmaKind::Cone { p, u, c0, eps, eps0 } => {
                if !(*c0 > 0.0 && *c0 < 1.0) {
                    return Err(Error::InvalidParam(format!("c0 must lie in (0,1), got {c0}")));
                }
                if p.len() != dim || u.len() != dim || !(3..=4).contains(&dim) {
                    return Err(Error::InvalidParam("cone needs dim 3 or 4 and p, u of full length".into()));
                }
                if !m.contains(p) {
                    return Err(Error::OutsideDomain(p.clone()));
                }
                let uu = m.inner_at(p, u, u);
                if (uu + 1.0).abs() > 1e-10 || m.causal_character_at(p, u) != CausalCharacter::TimelikeFuture {
                    return Err(Error::InvalidParam("cone u must be unit future timelike".into()));
                }
                // Gram–Schmidt of the coordinate axes against u
                let mut e: Vec<Vec<f64>> = Vec::new();
                for k in 1..dim {
                    let mut v = vec![0.0; dim];
                    v[k] = 1.0;
                    let a = m.inner_at(p, &v, u);
                    for i in 0..dim {
                        v[i] += a * u[i];
                    }
                    for f in &e {
                        let b = m.inner_at(p, &v, f);
                        for i in 0..dim {
                            v[i] -= b * f[i];
                        }
                    }
                    let nn = m.inner_at(p, &v, &v).sqrt();
                    e.push(v.iter().map(|c| c / nn).collect());
                }
                let (energy, _) = cone_energy(*c0);
                cone = Some(ConeFrame { p: p.clone(), u: u.clone(), e, c0: *c0, energy });
                let lo_t = eps0.unwrap_or(0.05 * eps);
                if dim == 3 {
                    ParamBox { lo: vec![lo_t, -PI], hi: vec![*eps, PI] }
                } else {
                    ParamBox { lo: vec![lo_t, 0.1, -PI], hi: vec![*eps, PI - 0.1, PI] }
                }
            }
        };
        let param_domain = spec.domain.clone().unwrap_or(default_domain);
        if param_domain.lo.len() != n || param_domain.hi.len() != n {
            return Err(Error::InvalidParam(format!("parameter box must have {n} entries")));
        }
        let s = Hypersurface { normal_sign: spec.normal_sign, spec, param_domain, metric: m.clone(), cone };
        // timelike check at the domain center
        let c = s.param_domain.center();
        let h = s.induced_metric(&c)?;
        let (neg, pos) = small::inertia(&h, 1e-12);
        if neg != 1 || pos != n - 1 {
            return Err(Error::Signature(format!("Σ is not timelike at u = {c:?}")));
        }
        Ok(s)
    }

    /// Membership in Σ̄. For the cone the closure reaches down to the tip,
    /// which the parameter box itself excludes.
    pub fn closure_contains(&self, u: &[f64]) -> bool {
        match &self.spec.kind {
            SigmaKind::Cone { .. } => {
                let mut lo = self.param_domain.lo.clone();
                lo[0] = 0.0;
                ParamBox { lo, hi: self.param_domain.hi.clone() }.contains(u)
            }
            _ => self.param_domain.contains(u),
        }
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn ambient_dim(&self) -> usize {
        self.metric.dim()
    }

    pub fn param_dim(&self) -> usize {
        self.metric.dim() - 1
    }

    fn insert_axis(u: &[f64], axis: usize, value: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(u.len() + 1);
        x.extend_from_slice(&u[..axis]);
        x.push(value);
        x.extend_from_slice(&u[axis..]);
        x
    }

    /// The embedding σ(u).
    pub fn embed(&self, u: &[f64]) -> Result<Vec<f64>> {
        let n = self.param_dim();
        if u.len() != n {
            return Err(Error::InvalidParam(format!("expected {n} Σ-parameters")));
        }
        Ok(match &self.spec.kind {
            SigmaKind::Plane { axis, offset, .. } => Self::insert_axis(u, *axis, *offset),
            SigmaKind::Graph { axis, offset, quad, .. } => {
                let q: f64 = (0..n).map(|i| (0..n).map(|j| quad[i][j] * u[i] * u[j]).sum::<f64>()).sum();
                Self::insert_axis(u, *axis, offset + 0.5 * q)
            }
            SigmaKind::Slab { center, radius, .. } => {
                let (dir, _) = sphere_point(&u[1..]);
                let mut x = vec![u[0]];
                x.extend(center.iter().zip(&dir).map(|(c, d)| c + radius * d));
                x
            }
            SigmaKind::Cone { .. } => {
                let cf = self.cone.as_ref().expect("cone frame");
                let v = self.cone_velocity(cf, &u[1..]);
                let v: Vec<f64> = v.iter().map(|c| c * u[0]).collect();
                geodesic::flow_fixed(&self.metric, &cf.p, &v, 1.0, 64)?.0
            }
        })
    }

    fn cone_velocity(&self, cf: &ConeFrame, angles: &[f64]) -> Vec<f64> {
        let (dir, _) = sphere_point(angles);
        let dim = self.ambient_dim();
        (0..dim)
            .map(|i| cf.energy * (cf.u[i] + cf.c0 * dir.iter().zip(&cf.e).map(|(d, e)| d * e[i]).sum::<f64>()))
            .collect()
    }

    /// `∂σ/∂u^i`, analytic except for the cone (4th-order differences of the
    /// fixed-step exponential map).
    pub fn tangents(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.param_dim();
        let dim = self.ambient_dim();
        match &self.spec.kind {
            SigmaKind::Plane { axis, .. } => Ok((0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    Self::insert_axis(&e, *axis, 0.0)
                })
                .collect()),
            SigmaKind::Graph { axis, quad, .. } => Ok((0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    let s: f64 = (0..n).map(|j| 0.5 * (quad[i][j] + quad[j][i]) * u[j]).sum();
                    Self::insert_axis(&e, *axis, s)
                })
                .collect()),
            SigmaKind::Slab { radius, .. } => {
                let (_, d) = sphere_point(&u[1..]);
                let mut out = vec![{
                    let mut t = vec![0.0; dim];
                    t[0] = 1.0;
                    t
                }];
                for di in d {
                    let mut t = vec![0.0];
                    t.extend(di.iter().map(|c| radius * c));
                    out.push(t);
                }
                Ok(out)
            }
            SigmaKind::Cone { .. } => {
                let h = 1e-3;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let mut acc = vec![0.0; dim];
                    for (off, c) in [(-2.0, 1.0 / 12.0), (-1.0, -2.0 / 3.0), (1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)] {
                        let mut uu = u.to_vec();
                        uu[i] += off * h;
                        let x = self.embed(&uu)?;
                        for k in 0..dim {
                            acc[k] += c * x[k];
                        }
                    }
                    out.push(acc.iter().map(|a| a / h).collect());
                }
                Ok(out)
            }
        }
    }

    /// Pullback `σ*g` at u.
    pub fn induced_metric(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.embed(u)?;
        let t = self.tangents(u)?;
        let n = self.param_dim();
        Ok(DMatrix::from_fn(n, n, |i, j| self.metric.inner_at(&x, &t[i], &t[j])))
    }

    /// Unit normal at u: `(ν,ν) = 1`, orthogonal to every tangent, oriented so
    /// that `det[∂σ/∂u | ν] > 0` (for the slab and cone that is the inward
    /// side), times `normal_sign`.
    pub fn normal(&self, u: &[f64]) -> Result<TangentVector> {
        let x = self.embed(u)?;
        let nu = self.normal_at(&x, u)?;
        Ok(TangentVector::new(self.metric.point(x), nu))
    }

    fn normal_at(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let dim = self.ambient_dim();
        let t = self.tangents(u)?;
        // covector annihilating the tangents: signed cofactors
        let tm = DMatrix::from_fn(dim, dim - 1, |r, c| t[c][r]);
        let mut cov = vec![0.0; dim];
        for a in 0..dim {
            let minor = tm.clone().remove_row(a);
            cov[a] = if a % 2 == 0 { 1.0 } else { -1.0 } * minor.determinant();
        }
        let g = self.metric.g_at(x);
        let gi = small::inverse(&g, dim).ok_or_else(|| Error::SingularMetric(x.to_vec()))?;
        let mut nu: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| gi[i][j] * cov[j]).sum()).collect();
        let nn = self.metric.inner_at(x, &nu, &nu);
        if !(nn > 1e-14 * cov.iter().map(|c| c * c).sum::<f64>()) {
            return Err(Error::DegenerateFrame(u.to_vec()));
        }
        let full = DMatrix::from_fn(dim, dim, |r, c| if c < dim - 1 { t[c][r] } else { nu[r] });
        let orient = if full.determinant() > 0.0 { 1.0 } else { -1.0 };
        let scale = orient * self.normal_sign / nn.sqrt();
        for c in nu.iter_mut() {
            *c *= scale;
        }
        Ok(nu)
    }

    /// Push a Σ-direction forward: `Σ_i ξ^i ∂σ/∂u^i`.
    pub fn push_forward(&self, u: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let t = self.tangents(u)?;
        let dim = self.ambient_dim();
        Ok((0..dim).map(|k| t.iter().zip(xi).map(|(ti, a)| ti[k] * a).sum()).collect())
    }

    /// Closed-form level function (positive on the ν side) where one exists.
    fn raw_side(&self, x: &[f64]) -> Option<f64> {
        let n = self.param_dim();
        match &self.spec.kind {
            SigmaKind::Plane { axis, offset, .. } => Some(x[*axis] - offset),
            SigmaKind::Graph { axis, offset, quad, .. } => {
                let u: Vec<f64> = (0..=n).filter(|k| k != axis).map(|k| x[k]).collect();
                let q: f64 = (0..n).map(|i| (0..n).map(|j| quad[i][j] * u[i] * u[j]).sum::<f64>()).sum();
                Some(x[*axis] - offset - 0.5 * q)
            }
            SigmaKind::Slab { center, radius, .. } => {
                let r = x[1..].iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                Some(radius - r)
            }
            SigmaKind::Cone { .. } => {
                // straight generators only make sense for a flat metric
                if self.metric.has_analytic_derivatives() && self.metric_is_flat() {
                    let cf = self.cone.as_ref()?;
                    let dx: Vec<f64> = x.iter().zip(&cf.p).map(|(a, b)| a - b).collect();
                    let a = -self.metric.inner_at(&cf.p, &dx, &cf.u);
                    let s2: f64 = cf.e.iter().map(|e| self.metric.inner_at(&cf.p, &dx, e).powi(2)).sum();
                    Some(cf.c0 * a - s2.sqrt())
                } else {
                    None
                }
            }
        }
    }

    fn metric_is_flat(&self) -> bool {
        matches!(self.metric.name(), "minkowski" | "torus-minkowski")
    }

    fn raw_locate(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.spec.kind {
            SigmaKind::Plane { axis, .. } | SigmaKind::Graph { axis, .. } => {
                Some((0..x.len()).filter(|k| k != axis).map(|k| x[k]).collect())
            }
            SigmaKind::Slab { center, .. } => {
                let dir: Vec<f64> = x[1..].iter().zip(center).map(|(a, c)| a - c).collect();
                let mut u = vec![x[0]];
                u.extend(sphere_angles(&dir));
                Some(u)
            }
            SigmaKind::Cone { .. } => {
                if !self.metric_is_flat() {
                    return None;
                }
                let cf = self.cone.as_ref()?;
                let dx: Vec<f64> = x.iter().zip(&cf.p).map(|(a, b)| a - b).collect();
                let a = -self.metric.inner_at(&cf.p, &dx, &cf.u);
                let dir: Vec<f64> = cf.e.iter().map(|e| self.metric.inner_at(&cf.p, &dx, e)).collect();
                let mut u = vec![a / cf.energy];
                u.extend(sphere_angles(&dir));
                Some(u)
            }
        }
    }
}

/// Side test and projection onto Σ for crossing detection. Falls back to the
/// Fermi r-coordinate when no closed-form level function exists.
pub struct SurfaceProbe<'a> {
    surface: &'a Hypersurface,
    orient: f64,
    chart: Option<FermiChart>,
}

impl<'a> SurfaceProbe<'a> {
    pub fn new(surface: &'a Hypersurface) -> Result<Self> {
        let c = surface.param_domain.center();
        let x = surface.embed(&c)?;
        let nu = surface.normal_at(&x, &c)?;
        let orient = match surface.raw_side(&x) {
            Some(s0) => {
                let xp: Vec<f64> = x.iter().zip(&nu).map(|(a, b)| a + 1e-4 * b).collect();
                if surface.raw_side(&xp).unwrap() - s0 > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            None => 1.0,
        };
        let chart = if surface.raw_side(&x).is_none() {
            Some(FermiChart::new(surface, surface.param_domain.clone(), 0.1)?)
        } else {
            None
        };
        Ok(SurfaceProbe { surface, orient, chart })
    }
}

impl SideFunction for SurfaceProbe<'_> {
    fn side(&self, x: &[f64]) -> Result<f64> {
        match (&self.chart, self.surface.raw_side(x)) {
            (None, Some(s)) => Ok(self.orient * s),
            (Some(ch), _) => Ok(fermi_inverse(ch, x, None)?.1),
            (None, None) => unreachable!(),
        }
    }

    fn locate(&self, x: &[f64]) -> Result<Vec<f64>> {
        match (&self.chart, self.surface.raw_locate(x)) {
            (None, Some(u)) => Ok(u),
            (Some(ch), _) => Ok(fermi_inverse(ch, x, None)?.0),
            (None, None) => unreachable!(),
        }
    }
}

/// Fermi chart `Ψ(u, r) = exp_{σ(u)}(r ν(u))` over a parameter window.
#[derive(Clone, Debug)]
pub struct FermiChart {
    pub surface: Hypersurface,
    pub window: ParamBox,
    pub delta: f64,
    /// fixed step count of the normal geodesics, so Ψ is smooth in (u, r)
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct FermiMetric {
    pub g: DMatrix<f64>,
    pub g_rr_residual: f64,
    pub g_ri_residual: Vec<f64>,
}

impl FermiChart {
    /// Builds the chart, halving δ until the block structure holds at the
    /// window corners and center.
    pub fn new(surface: &Hypersurface, window: ParamBox, delta: f64) -> Result<Self> {
        let mut ch = FermiChart { surface: surface.clone(), window, delta, steps: 16 };
        for _ in 0..12 {
            if ch.block_ok() {
                return Ok(ch);
            }
            ch.delta *= 0.5;
        }
        Err(Error::FermiChart("block residuals never fell below 1e-6".into()))
    }

    fn block_ok(&self) -> bool {
        let n = self.surface.param_dim();
        let mut probes = vec![self.window.center()];
        for mask in 0..(1usize << n) {
            probes.push((0..n).map(|i| if mask >> i & 1 == 1 { self.window.hi[i] } else { self.window.lo[i] }).collect());
        }
        for u in probes {
            for r in [-0.9 * self.delta, 0.9 * self.delta] {
                match metric_in_fermi(self, &u, r) {
                    Ok(f) if f.g_rr_residual.abs() < 1e-6 && f.g_ri_residual.iter().all(|v| v.abs() < 1e-6) => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

pub fn fermi_forward(chart: &FermiChart, u: &[f64], r: f64) -> Result<Vec<f64>> {
    let s = &chart.surface;
    let x = s.embed(u)?;
    if r == 0.0 {
        return Ok(x);
    }
    let nu = s.normal_at(&x, u)?;
    let v: Vec<f64> = nu.iter().map(|c| c * r).collect();
    Ok(geodesic::flow_fixed(s.metric(), &x, &v, 1.0, chart.steps)?.0)
}

/// Newton solve of `Ψ(u, r) = p`, starting from `guess` or the window center.
pub fn fermi_inverse(chart: &FermiChart, p: &[f64], guess: Option<(&[f64], f64)>) -> Result<(Vec<f64>, f64)> {
    let s = &chart.surface;
    let dim = s.ambient_dim();
    let n = s.param_dim();
    let mut z: Vec<f64> = match guess {
        Some((u, r)) => u.iter().copied().chain([r]).collect(),
        None => match s.raw_locate(p) {
            Some(u) => u.into_iter().chain([0.0]).collect(),
            None => chart.window.center().into_iter().chain([0.0]).collect(),
        },
    };
    let eval = |z: &[f64]| -> Result<Vec<f64>> {
        let x = fermi_forward(chart, &z[..n], z[n])?;
        Ok(x.iter().zip(p).map(|(a, b)| a - b).collect())
    };
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut f = eval(&z)?;
    let tol = 1e-12;
    for it in 0..60 {
        if norm(&f) < tol {
            return Ok((z[..n].to_vec(), z[n]));
        }
        let mut jac = small::ZERO_MAT;
        for k in 0..dim {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let (fp, fm) = (eval(&zp)?, eval(&zm)?);
            for i in 0..dim {
                jac[i][k] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let step = small::solve(&jac, &small::from_slice(&f), dim)
            .ok_or_else(|| Error::FermiChart(format!("singular chart Jacobian at {z:?}")))?;
        let mut alpha = 1.0;
        loop {
            let cand: Vec<f64> = (0..dim).map(|i| z[i] - alpha * step[i]).collect();
            if let Ok(fc) = eval(&cand) {
                if norm(&fc) < norm(&f) {
                    z = cand;
                    f = fc;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                if norm(&f) < 1e-10 {
                    return Ok((z[..n].to_vec(), z[n]));
                }
                return Err(Error::NoConvergence { residual: norm(&f), iterations: it });
            }
        }
    }
    Err(Error::NoConvergence { residual: norm(&f), iterations: 60 })
}

/// Pull g back through Ψ with 4th-order differences; returns the tangential
/// block and the Gauss-lemma residuals `g_rr − 1`, `g_ri`.
pub fn metric_in_fermi(chart: &FermiChart, u: &[f64], r: f64) -> Result<FermiMetric> {
    let s = &chart.surface;
    let n = s.param_dim();
    let dim = s.ambient_dim();
    let h = 1e-3;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut acc = vec![0.0; dim];
        for (off, c) in [(-2.0, 1.0 / 12.0), (-1.0, -2.0 / 3.0), (1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)] {
            let mut uu = u.to_vec();
            let mut rr = r;
            if k < n {
                uu[k] += off * h;
            } else {
                rr += off * h;
            }
            let x = fermi_forward(chart, &uu, rr)?;
            for i in 0..dim {
                acc[i] += c * x[i];
            }
        }
        cols.push(acc.iter().map(|a| a / h).collect());
    }
    let x = fermi_forward(chart, u, r)?;
    let m = s.metric();
    let g = DMatrix::from_fn(n, n, |i, j| m.inner_at(&x, &cols[i], &cols[j]));
    let g_rr_residual = m.inner_at(&x, &cols[n], &cols[n]) - 1.0;
    let g_ri_residual = (0..n).map(|i| m.inner_at(&x, &cols[i], &cols[n])).collect();
    Ok(FermiMetric { g, g_rr_residual, g_ri_residual })
}

/// Ground-truth jet `∂ᵣᵏ g_ij(u, 0)`, k = 0..=K (K ≤ 2), by 4th-order
/// differences of `metric_in_fermi` in r with step `dr`.
pub fn fermi_jet_truth(chart: &FermiChart, u: &[f64], k_max: usize, dr: f64) -> Result<Vec<DMatrix<f64>>> {
    if k_max > 2 {
        return Err(Error::Unsupported("ground-truth jets beyond second order".into()));
    }
    let at = |r: f64| -> Result<DMatrix<f64>> {
        let f = metric_in_fermi(chart, u, r)?;
        if f.g_rr_residual.abs() > 1e-6 || f.g_ri_residual.iter().any(|v| v.abs() > 1e-6) {
            return Err(Error::FermiChart(format!("block residuals violated at u = {u:?}, r = {r}")));
        }
        Ok(f.g)
    };
    let g: Vec<DMatrix<f64>> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|o| at(o * dr)).collect::<Result<_>>()?;
    let mut out = vec![g[2].clone()];
    if k_max >= 1 {
        out.push((&g[0] * (1.0 / 12.0) - &g[1] * (2.0 / 3.0) + &g[3] * (2.0 / 3.0) - &g[4] * (1.0 / 12.0)) / dr);
    }
    if k_max >= 2 {
        out.push(
            (&g[0] * (-1.0 / 12.0) + &g[1] * (4.0 / 3.0) - &g[2] * 2.5 + &g[3] * (4.0 / 3.0) - &g[4] * (1.0 / 12.0))
                / (dr * dr),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    pub returns: usize,
    pub fraction: f64,
    pub max_return_t: f64,
    /// (r, success fraction) per tilt
    pub per_r: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub t_max: f64,
    pub working_box: Option<(Vec<f64>, Vec<f64>)>,
    pub ode: GeodesicOptions,
    pub tol_hit: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { t_max: 4.0, working_box: None, ode: GeodesicOptions::default(), tol_hit: 1e-10 }
    }
}

/// Launch `γ̇(0) = dσ(ξ) + rν` from a small grid of (u, ξ) around (u₀, ξ₀) and
/// record whether γ returns to Σ̄ inside the working set.
pub fn convexity_probe(
    s: &Hypersurface,
    u0: &[f64],
    xi0: &[f64],
    r_list: &[f64],
    neighborhood: f64,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let n = s.param_dim();
    let q = s.induced_metric(u0)?;
    let qx: f64 = (0..n).map(|i| (0..n).map(|j| q[(i, j)] * xi0[i] * xi0[j]).sum::<f64>()).sum();
    if !(qx < 0.0) {
        return Err(Error::InvalidParam("ξ₀ must be timelike in the induced metric".into()));
    }
    let probe = SurfaceProbe::new(s)?;
    let m = s.metric();
    let mut us = Vec::new();
    for mask in 0..3usize.pow(n as u32) {
        let mut u = u0.to_vec();
        let mut rem = mask;
        for ui in u.iter_mut() {
            *ui += neighborhood * ((rem % 3) as f64 - 1.0);
            rem /= 3;
        }
        if s.param_domain.contains(&u) {
            us.push(u);
        }
    }
    let mut xis = vec![xi0.to_vec()];
    let xnorm = xi0.iter().map(|c| c * c).sum::<f64>().sqrt();
    for k in 0..n {
        for sgn in [-1.0, 1.0] {
            let mut xi = xi0.to_vec();
            xi[k] += sgn * 0.05 * xnorm;
            let qq: f64 = (0..n).map(|i| (0..n).map(|j| q[(i, j)] * xi[i] * xi[j]).sum::<f64>()).sum();
            if qq < 0.0 {
                xis.push(xi);
            }
        }
    }
    let inside = |x: &[f64]| match &opts.working_box {
        Some((lo, hi)) => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v <= h),
        None => true,
    };
    let (mut trials, mut returns, mut max_t) = (0, 0, 0.0f64);
    let mut per_r = Vec::new();
    for &r in r_list {
        let (mut t_r, mut ok_r) = (0, 0);
        for u in &us {
            let x = s.embed(u)?;
            let nu = s.normal_at(&x, u)?;
            for xi in &xis {
                let push = s.push_forward(u, xi)?;
                let v: Vec<f64> = push.iter().zip(&nu).map(|(a, b)| a + r * b).collect();
                t_r += 1;
                let hit = geodesic::hit_hypersurface(m, &x, &v, opts.t_max, &probe, opts.tol_hit, &opts.ode);
                if let Ok(Some(c)) = hit {
                    // the path up to the return must stay in the working set
                    let path = geodesic::integrate(m, &m.point(x.clone()), &TangentVector::new(m.point(x.clone()), v.clone()), c.t0, &opts.ode)?;
                    let stays = path.samples.iter().all(|smp| inside(&smp.x));
                    if stays && s.closure_contains(&c.u0) {
                        ok_r += 1;
                        max_t = max_t.max(c.t0);
                    }
                }
            }
        }
        trials += t_r;
        returns += ok_r;
        per_r.push((r, ok_r as f64 / t_r.max(1) as f64));
    }
    Ok(ProbeReport { trials, returns, fraction: returns as f64 / trials.max(1) as f64, max_return_t: max_t, per_r })
}

pub fn point_on(s: &Hypersurface, u: &[f64]) -> Result<Point> {
    Ok(s.metric().point(s.embed(u)?))
}

/// The material-particle cone with tip p and observer u.
pub fn cone_sigma(m: &MetricField, p: &[f64], u: &[f64], c0: f64, eps: f64) -> Result<Hypersurface> {
    Hypersurface::new(
        m,
        SigmaSpec {
            kind: SigmaKind::Cone { p: p.to_vec(), u: u.to_vec(), c0, eps, eps0: None },
            normal_sign: 1.0,
            domain: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::catalog_metric;
    use serde_json::json;

    fn spec(v: serde_json::Value) -> SigmaSpec {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn plane_normal_and_fermi() {
        let m = catalog_metric("minkowski", &json!({"dim": 4})).unwrap();
        let s = Hypersurface::new(&m, spec(json!({"kind": "plane", "dim": 4}))).unwrap();
        let nu = s.normal(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(nu.components, vec![0.0, 1.0, 0.0, 0.0]);
        let flipped = Hypersurface::new(&m, spec(json!({"kind": "plane", "dim": 4, "normal_sign": -1.0}))).unwrap();
        assert_eq!(flipped.normal(&[0.0; 3]).unwrap().components, vec![0.0, -1.0, 0.0, 0.0]);
        let ch = FermiChart::new(&s, s.param_domain.clone(), 0.1).unwrap();
        let x = fermi_forward(&ch, &[0.1, 0.2, 0.3], 0.05).unwrap();
        assert!((x[1] - 0.05).abs() < 1e-14 && (x[0] - 0.1).abs() < 1e-14);
        let (u, r) = fermi_inverse(&ch, &[0.3, -0.02, 0.1, 0.4], None).unwrap();
        assert!((r + 0.02).abs() < 1e-12 && (u[0] - 0.3).abs() < 1e-12);
        let fm = metric_in_fermi(&ch, &[0.0, 0.0, 0.0], 0.03).unwrap();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 1.0, 1.0]));
        assert!((fm.g - want).abs().max() < 1e-10);
    }

    #[test]
    fn slab_truth_matches_factor_geometry() {
        // cylinder of radius ρ in the radius-a sphere factor: along the inward
        // normal the circle has g_θθ(r) = a² sin²(α − r/a), α = 2 atan(ρ/2a)
        let (a, rho) = (1.0f64, 0.5f64);
        let m = catalog_metric("product", &json!({"dim": 3, "factor": {"kind": "sphere", "radius": a}})).unwrap();
        let s = Hypersurface::new(&m, spec(json!({"kind": "slab", "dim": 3, "center": [0.0, 0.0], "radius": rho}))).unwrap();
        let ch = FermiChart::new(&s, ParamBox { lo: vec![-0.2, -0.2], hi: vec![0.2, 0.2] }, 0.1).unwrap();
        let jet = fermi_jet_truth(&ch, &[0.0, 0.0], 2, 0.01).unwrap();
        let al = 2.0 * (rho / (2.0 * a)).atan();
        assert!((jet[0][(0, 0)] + 1.0).abs() < 1e-9);
        assert!((jet[0][(1, 1)] - (a * al.sin()).powi(2)).abs() < 1e-9);
        assert!((jet[1][(1, 1)] + a * (2.0 * al).sin()).abs() < 1e-7);
        assert!((jet[2][(1, 1)] - 2.0 * (2.0 * al).cos()).abs() < 1e-5);
        assert!(jet[1][(0, 0)].abs() < 1e-8 && jet[1][(0, 1)].abs() < 1e-8);
    }

    #[test]
    fn cone_generators_and_normal() {
        let m = catalog_metric("minkowski", &json!({"dim": 3})).unwrap();
        let s = cone_sigma(&m, &[0.0; 3], &[1.0, 0.0, 0.0], 0.6, 1.0).unwrap();
        let (e, q) = cone_energy(0.6);
        assert!((e - 1.25).abs() < 1e-15 && (q - 0.75).abs() < 1e-15);
        for u in [[0.3, 0.0], [0.5, 1.2], [0.8, -2.0]] {
            let x = s.embed(&u).unwrap();
            let z = (x[1] * x[1] + x[2] * x[2]).sqrt();
            assert!((z - 0.6 * x[0]).abs() < 1e-12);
            assert!((x[0] * 0.8 - u[0]).abs() < 1e-12);
            let t = s.tangents(&u).unwrap();
            assert!((m.inner_at(&x, &t[0], &t[0]) + 1.0).abs() < 1e-9);
            let nu = s.normal(&u).unwrap();
            // inward, unit, orthogonal; Gram–Schmidt oracle on the explicit κ
            assert!((m.inner_at(&x, &nu.components, &nu.components) - 1.0).abs() < 1e-10);
            for ti in &t {
                assert!(m.inner_at(&x, &nu.components, ti).abs() < 1e-9);
            }
            assert!(nu.components[1] * x[1] + nu.components[2] * x[2] < 0.0);
        }
        assert!(matches!(cone_sigma(&m, &[0.0; 3], &[1.0, 0.0, 0.0], 1.2, 1.0), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn probes_cone_and_plane() {
        let m = catalog_metric("minkowski", &json!({"dim": 3})).unwrap();
        let cone = cone_sigma(&m, &[0.0; 3], &[1.0, 0.0, 0.0], 0.6, 1.0).unwrap();
        let r = convexity_probe(&cone, &[0.6, 0.0], &[-1.0, 0.0], &[0.02, 0.05], 0.02, &Default::default()).unwrap();
        assert_eq!(r.fraction, 1.0, "{r:?}");
        let plane = Hypersurface::new(&m, spec(json!({"kind": "plane", "dim": 3}))).unwrap();
        let r = convexity_probe(&plane, &[0.0, 0.0], &[-1.0, 0.0], &[0.02, 0.05], 0.02, &Default::default()).unwrap();
        assert_eq!(r.fraction, 0.0);
    }
}
