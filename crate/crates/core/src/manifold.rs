//! Charts, metric fields, Christoffel symbols, curvature and the built-in
//! metric catalog.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::small::{self, Mat, Vect, MAXD, ZERO_MAT};

/// Null-cone classification band, relative to the Euclidean norm squared.
pub const TAU_NULL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub chart_id: String,
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(chart_id: &str, coords: Vec<f64>) -> Self {
        Point { chart_id: chart_id.to_string(), coords }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub base: Point,
    pub components: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: Point, components: Vec<f64>) -> Self {
        TangentVector { base, components }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CausalCharacter {
    TimelikeFuture,
    TimelikePast,
    Null,
    Spacelike,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ChartDomain {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        ChartDomain { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v.is_finite() && *v >= *l && *v <= *h)
    }
}

/// A smooth Lorentzian metric on one coordinate chart.
///
/// `dg` fills `out[k][i][j] = ∂_k g_ij` and returns `false` when no analytic
/// derivative is available, in which case callers fall back to differences.
pub trait MetricModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn domain(&self) -> &ChartDomain;
    fn contains(&self, x: &[f64]) -> bool {
        self.domain().contains(x)
    }
    fn g(&self, x: &[f64], out: &mut Mat);
    fn dg(&self, _x: &[f64], _out: &mut [Mat; MAXD]) -> bool {
        false
    }
    fn time_orientation(&self, _x: &[f64]) -> Vect {
        [1.0, 0.0, 0.0, 0.0]
    }
    /// Coordinate identification applied during integration (quotients only).
    fn wrap(&self, _x: &mut [f64]) {}
    /// Smallest coordinate length over which the metric varies, if finite;
    /// integrators must not step across it blindly.
    fn feature_length(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone)]
pub struct MetricField {
    name: String,
    params: Value,
    model: Arc<dyn MetricModel>,
}

impl fmt::Debug for MetricField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MetricField({}, {})", self.name, self.params)
    }
}

pub type Gamma = [[[f64; MAXD]; MAXD]; MAXD];

#[derive(Clone, Debug)]
pub struct CurvatureSample {
    pub point: Point,
    pub dim: usize,
    /// `R^a_{bcd}` flattened as `((a·n + b)·n + c)·n + d`.
    pub riemann: Vec<f64>,
    pub kretschmann: f64,
    pub ricci_max: f64,
}

impl CurvatureSample {
    pub fn r(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let n = self.dim;
        self.riemann[((a * n + b) * n + c) * n + d]
    }
}

impl MetricField {
    pub fn from_model(name: &str, params: Value, model: Arc<dyn MetricModel>) -> Self {
        MetricField { name: name.to_string(), params, model }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &Value {
        &self.params
    }

    pub fn chart_id(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn domain(&self) -> &ChartDomain {
        self.model.domain()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.model.contains(x)
    }

    pub fn wrap(&self, x: &mut [f64]) {
        self.model.wrap(x)
    }

    pub fn feature_length(&self) -> Option<f64> {
        self.model.feature_length()
    }

    pub fn point(&self, coords: Vec<f64>) -> Point {
        Point::new(self.chart_id(), coords)
    }

    pub fn time_orientation_at(&self, x: &[f64]) -> Vect {
        self.model.time_orientation(x)
    }

    pub fn time_orientation(&self, p: &Point) -> TangentVector {
        let t = self.model.time_orientation(&p.coords);
        TangentVector::new(p.clone(), t[..self.dim()].to_vec())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutsideDomain(x.to_vec()))
        }
    }

    #[inline]
    pub fn g_at(&self, x: &[f64]) -> Mat {
        let mut g = ZERO_MAT;
        self.model.g(x, &mut g);
        g
    }

    /// `∂_k g_ij`, analytic when the model provides it, else central
    /// differences with step `ε^{1/3}·max(1,|x_k|)`.
    pub fn dg_at(&self, x: &[f64]) -> [Mat; MAXD] {
        let mut out = [ZERO_MAT; MAXD];
        if self.model.dg(x, &mut out) {
            return out;
        }
        let n = self.dim();
        let eps = f64::EPSILON.cbrt();
        let mut xp = small::from_slice(x);
        for k in 0..n {
            let h = eps * x[k].abs().max(1.0);
            let x0 = xp[k];
            xp[k] = x0 + h;
            let gp = self.g_at(&xp[..n]);
            xp[k] = x0 - h;
            let gm = self.g_at(&xp[..n]);
            xp[k] = x0;
            let step = (x0 + h) - (x0 - h);
            for i in 0..n {
                for j in 0..n {
                    out[k][i][j] = (gp[i][j] - gm[i][j]) / step;
                }
            }
        }
        out
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        let x: Vec<f64> = self.domain().lo.iter().zip(&self.domain().hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let mut out = [ZERO_MAT; MAXD];
        self.model.dg(&x, &mut out)
    }

    pub fn eval(&self, p: &Point) -> Result<DMatrix<f64>> {
        self.check(&p.coords)?;
        Ok(small::to_dmatrix(&self.g_at(&p.coords), self.dim()))
    }

    #[inline]
    pub fn inner_at(&self, x: &[f64], v: &[f64], w: &[f64]) -> f64 {
        small::quad(&self.g_at(x), v, w, self.dim())
    }

    pub fn inner(&self, v: &TangentVector, w: &TangentVector) -> Result<f64> {
        if v.base != w.base {
            return Err(Error::BaseMismatch);
        }
        self.check(&v.base.coords)?;
        Ok(self.inner_at(&v.base.coords, &v.components, &w.components))
    }

    pub fn causal_character_at(&self, x: &[f64], v: &[f64]) -> CausalCharacter {
        let e2: f64 = v.iter().map(|c| c * c).sum();
        if e2 == 0.0 {
            return CausalCharacter::Zero;
        }
        let q = self.inner_at(x, v, v);
        if q.abs() <= TAU_NULL * e2 {
            return CausalCharacter::Null;
        }
        if q > 0.0 {
            return CausalCharacter::Spacelike;
        }
        let t = self.model.time_orientation(x);
        if self.inner_at(x, v, &t[..self.dim()]) < 0.0 {
            CausalCharacter::TimelikeFuture
        } else {
            CausalCharacter::TimelikePast
        }
    }

    pub fn causal_character(&self, v: &TangentVector) -> CausalCharacter {
        self.causal_character_at(&v.base.coords, &v.components)
    }

    /// Geodesic acceleration `−Γ^λ_{μν} v^μ v^ν` without forming Γ.
    #[inline]
    pub fn accel(&self, x: &[f64], v: &[f64]) -> Option<Vect> {
        let n = self.dim();
        let g = self.g_at(x);
        let dg = self.dg_at(x);
        let mut w = [0.0; MAXD];
        for r in 0..n {
            let mut s = 0.0;
            for mu in 0..n {
                let mut row = 0.0;
                for nu in 0..n {
                    row += (dg[mu][r][nu] - 0.5 * dg[r][mu][nu]) * v[nu];
                }
                s += row * v[mu];
            }
            w[r] = -s;
        }
        small::solve(&g, &w, n)
    }

    fn christoffel_raw(&self, x: &[f64]) -> Option<Gamma> {
        let n = self.dim();
        let g = self.g_at(x);
        let gi = small::inverse(&g, n)?;
        let dg = self.dg_at(x);
        let mut lower = [[[0.0; MAXD]; MAXD]; MAXD];
        for r in 0..n {
            for mu in 0..n {
                for nu in 0..n {
                    lower[r][mu][nu] = 0.5 * (dg[mu][r][nu] + dg[nu][r][mu] - dg[r][mu][nu]);
                }
            }
        }
        let mut gam = [[[0.0; MAXD]; MAXD]; MAXD];
        for l in 0..n {
            for mu in 0..n {
                for nu in mu..n {
                    let s: f64 = (0..n).map(|r| gi[l][r] * lower[r][mu][nu]).sum();
                    gam[l][mu][nu] = s;
                    gam[l][nu][mu] = s;
                }
            }
        }
        Some(gam)
    }

    /// `Γ^λ_{μν}` indexed as `[λ][μ][ν]`.
    pub fn christoffel(&self, p: &Point) -> Result<Gamma> {
        self.check(&p.coords)?;
        self.christoffel_raw(&p.coords).ok_or_else(|| Error::SingularMetric(p.coords.clone()))
    }

    /// Riemann tensor from 4th-order differences of Γ, plus Kretschmann and
    /// the largest Ricci component.
    pub fn curvature_at(&self, p: &Point) -> Result<CurvatureSample> {
        let n = self.dim();
        let x = &p.coords;
        self.check(x)?;
        let gam = self.christoffel_raw(x).ok_or_else(|| Error::SingularMetric(x.clone()))?;
        // dgam[s][a][b][c] = ∂_s Γ^a_{bc}
        let mut dgam = [[[[0.0; MAXD]; MAXD]; MAXD]; MAXD];
        let mut xs = small::from_slice(x);
        for s in 0..n {
            let h = 1e-3 * x[s].abs().max(1.0);
            let x0 = xs[s];
            let mut acc = [[[0.0; MAXD]; MAXD]; MAXD];
            for (off, c) in [(-2.0, 1.0 / 12.0), (-1.0, -2.0 / 3.0), (1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)] {
                xs[s] = x0 + off * h;
                if !self.contains(&xs[..n]) {
                    return Err(Error::OutsideDomain(xs[..n].to_vec()));
                }
                let gs = self.christoffel_raw(&xs[..n]).ok_or_else(|| Error::SingularMetric(xs[..n].to_vec()))?;
                for a in 0..n {
                    for b in 0..n {
                        for cc in 0..n {
                            acc[a][b][cc] += c * gs[a][b][cc];
                        }
                    }
                }
            }
            xs[s] = x0;
            for a in 0..n {
                for b in 0..n {
                    for cc in 0..n {
                        dgam[s][a][b][cc] = acc[a][b][cc] / h;
                    }
                }
            }
        }
        let idx = |a: usize, b: usize, c: usize, d: usize| ((a * n + b) * n + c) * n + d;
        let mut riem = vec![0.0; n * n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let mut v = dgam[c][a][d][b] - dgam[d][a][c][b];
                        for e in 0..n {
                            v += gam[a][c][e] * gam[e][d][b] - gam[a][d][e] * gam[e][c][b];
                        }
                        riem[idx(a, b, c, d)] = v;
                    }
                }
            }
        }
        let g = self.g_at(x);
        let gi = small::inverse(&g, n).ok_or_else(|| Error::SingularMetric(x.clone()))?;
        // R_{abcd} and R^{abcd}
        let mut low = vec![0.0; n * n * n * n];
        let mut up = vec![0.0; n * n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        low[idx(a, b, c, d)] = (0..n).map(|e| g[a][e] * riem[idx(e, b, c, d)]).sum();
                    }
                }
            }
        }
        // raise b, c, d one index at a time
        let mut t1 = vec![0.0; n * n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        t1[idx(a, b, c, d)] = (0..n).map(|f| gi[b][f] * riem[idx(a, f, c, d)]).sum();
                    }
                }
            }
        }
        let mut t2 = vec![0.0; n * n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        t2[idx(a, b, c, d)] = (0..n).map(|f| gi[c][f] * t1[idx(a, b, f, d)]).sum();
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        up[idx(a, b, c, d)] = (0..n).map(|f| gi[d][f] * t2[idx(a, b, c, f)]).sum();
                    }
                }
            }
        }
        let kretschmann: f64 = low.iter().zip(&up).map(|(l, u)| l * u).sum();
        let mut ricci_max = 0.0f64;
        for b in 0..n {
            for d in 0..n {
                let ric: f64 = (0..n).map(|a| riem[idx(a, b, a, d)]).sum();
                ricci_max = ricci_max.max(ric.abs());
            }
        }
        Ok(CurvatureSample { point: p.clone(), dim: n, riemann: riem, kretschmann, ricci_max })
    }

    /// Lorentzian signature check: exactly one negative eigenvalue.
    pub fn signature_ok_at(&self, x: &[f64]) -> bool {
        let m = small::to_dmatrix(&self.g_at(x), self.dim());
        let (neg, pos) = small::inertia(&m, 1e-12);
        neg == 1 && pos == self.dim() - 1
    }
}

// ---------------------------------------------------------------------------
// catalog

#[derive(Debug)]
pub struct Minkowski {
    dim: usize,
    domain: ChartDomain,
}

impl Minkowski {
    pub fn new(dim: usize) -> Self {
        Minkowski { dim, domain: ChartDomain::cube(dim, -1e3, 1e3) }
    }
}

impl MetricModel for Minkowski {
    fn dim(&self) -> usize {
        self.dim
    }
    fn domain(&self) -> &ChartDomain {
        &self.domain
    }
    fn g(&self, _x: &[f64], out: &mut Mat) {
        *out = ZERO_MAT;
        out[0][0] = -1.0;
        for i in 1..self.dim {
            out[i][i] = 1.0;
        }
    }
    fn dg(&self, _x: &[f64], out: &mut [Mat; MAXD]) -> bool {
        *out = [ZERO_MAT; MAXD];
        true
    }
}

/// Flat metric on the unit torus: identical local geometry to Minkowski,
/// coordinates wrapped mod 1 during integration.
#[derive(Debug)]
pub struct TorusMinkowski {
    flat: Minkowski,
    domain: ChartDomain,
}

impl TorusMinkowski {
    pub fn new(dim: usize) -> Self {
        TorusMinkowski { flat: Minkowski::new(dim), domain: ChartDomain::cube(dim, 0.0, 1.0) }
    }
}

impl MetricModel for TorusMinkowski {
    fn dim(&self) -> usize {
        self.flat.dim
    }
    fn domain(&self) -> &ChartDomain {
        &self.domain
    }
    fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }
    fn g(&self, x: &[f64], out: &mut Mat) {
        self.flat.g(x, out)
    }
    fn dg(&self, x: &[f64], out: &mut [Mat; MAXD]) -> bool {
        self.flat.dg(x, out)
    }
    fn wrap(&self, x: &mut [f64]) {
        for c in x.iter_mut() {
            if *c < 0.0 || *c >= 1.0 {
                *c -= c.floor();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FactorSpec {
    /// `ĝ = scale·δ`
    Euclidean { scale: f64 },
    /// Round sphere of the given radius in stereographic coordinates.
    Sphere { radius: f64 },
}

/// `g = −dt² + ĝ(x)` on ℝ × N̂.
#[derive(Debug)]
pub struct Product {
    dim: usize,
    factor: FactorSpec,
    domain: ChartDomain,
}

impl Product {
    pub fn new(dim: usize, factor: FactorSpec) -> Self {
        Product { dim, factor, domain: ChartDomain::cube(dim, -1e3, 1e3) }
    }

    /// Conformal factor ψ with ĝ = ψ²δ, and ∂ψ/∂x^k / ψ² multiplier.
    fn psi(&self, x: &[f64]) -> f64 {
        match self.factor {
            FactorSpec::Euclidean { scale } => scale.sqrt(),
            FactorSpec::Sphere { radius } => {
                let q: f64 = x[1..self.dim].iter().map(|c| c * c).sum();
                1.0 / (1.0 + q / (4.0 * radius * radius))
            }
        }
    }
}

impl MetricModel for Product {
    fn dim(&self) -> usize {
        self.dim
    }
    fn domain(&self) -> &ChartDomain {
        &self.domain
    }
    fn g(&self, x: &[f64], out: &mut Mat) {
        *out = ZERO_MAT;
        out[0][0] = -1.0;
        let s = match self.factor {
            FactorSpec::Euclidean { scale } => scale,
            FactorSpec::Sphere { .. } => {
                let p = self.psi(x);
                p * p
            }
        };
        for i in 1..self.dim {
            out[i][i] = s;
        }
    }
    fn dg(&self, x: &[f64], out: &mut [Mat; MAXD]) -> bool {
        *out = [ZERO_MAT; MAXD];
        if let FactorSpec::Sphere { radius } = self.factor {
            let p = self.psi(x);
            for k in 1..self.dim {
                let dp = -p * p * x[k] / (2.0 * radius * radius);
                for i in 1..self.dim {
                    out[k][i][i] = 2.0 * p * dp;
                }
            }
        }
        true
    }
}

/// Schwarzschild in Kruskal–Szekeres coordinates (V, U, θ, φ):
/// `g = (4R³/r)e^{−r/R}(−dV² + dU²) + r²dΩ²`, with `V² − U² = (1 − r/R)e^{r/R}`.
#[derive(Debug)]
pub struct Kruskal {
    radius: f64,
    delta_sing: f64,
    domain: ChartDomain,
}

impl Kruskal {
    /// `extent` bounds |V| and |U|.
    pub fn new(radius: f64, delta_sing: f64, extent: f64) -> Self {
        let domain = ChartDomain {
            lo: vec![-extent, -extent, 1e-3, -1e3],
            hi: vec![extent, extent, std::f64::consts::PI - 1e-3, 1e3],
        };
        Kruskal { radius, delta_sing, domain }
    }

    /// Areal radius for a given `V² − U²` by safeguarded Newton on
    /// `F(ρ) = (1−ρ)e^ρ` (ρ = r/R), which is strictly decreasing on ρ > 0.
    pub fn areal_radius(&self, s: f64) -> f64 {
        kruskal_rho(s) * self.radius
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

pub fn kruskal_rho(s: f64) -> f64 {
    let f = |r: f64| (1.0 - r) * r.exp();
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) > s {
        lo = hi;
        hi *= 2.0;
    }
    let mut r = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fr = f(r) - s;
        if fr > 0.0 {
            lo = r;
        } else {
            hi = r;
        }
        let d = -r * r.exp();
        let mut nr = if d != 0.0 { r - fr / d } else { f64::NAN };
        if !(nr > lo && nr < hi) {
            nr = 0.5 * (lo + hi);
        }
        if (nr - r).abs() <= 1e-15 * r.max(1e-300) {
            return nr;
        }
        r = nr;
    }
    r
}

impl MetricModel for Kruskal {
    fn dim(&self) -> usize {
        4
    }
    fn domain(&self) -> &ChartDomain {
        &self.domain
    }
    fn contains(&self, x: &[f64]) -> bool {
        self.domain.contains(x) && x[0] * x[0] - x[1] * x[1] < 1.0 - self.delta_sing
    }
    fn g(&self, x: &[f64], out: &mut Mat) {
        let rr = self.radius;
        let r = self.areal_radius(x[0] * x[0] - x[1] * x[1]);
        let f = 4.0 * rr * rr * rr / r * (-r / rr).exp();
        let st = x[2].sin();
        *out = ZERO_MAT;
        out[0][0] = -f;
        out[1][1] = f;
        out[2][2] = r * r;
        out[3][3] = r * r * st * st;
    }
    fn dg(&self, x: &[f64], out: &mut [Mat; MAXD]) -> bool {
        let rr = self.radius;
        let r = self.areal_radius(x[0] * x[0] - x[1] * x[1]);
        let e = (-r / rr).exp();
        let fp = 4.0 * rr * rr * rr * e * (-1.0 / (r * r) - 1.0 / (r * rr));
        let dfdr = -(r / (rr * rr)) * (r / rr).exp();
        let r_v = 2.0 * x[0] / dfdr;
        let r_u = -2.0 * x[1] / dfdr;
        let (st, ct) = x[2].sin_cos();
        *out = [ZERO_MAT; MAXD];
        for (k, rk) in [(0usize, r_v), (1usize, r_u)] {
            out[k][0][0] = -fp * rk;
            out[k][1][1] = fp * rk;
            out[k][2][2] = 2.0 * r * rk;
            out[k][3][3] = 2.0 * r * rk * st * st;
        }
        out[2][3][3] = r * r * 2.0 * st * ct;
        true
    }
    fn time_orientation(&self, _x: &[f64]) -> Vect {
        [1.0, 0.0, 0.0, 0.0]
    }
}

/// Base metric plus `A·b(x)·δ_{μν}` with the smooth compactly supported bump
/// `b = exp(1 − 1/(1 − |x−c|²/ρ²))`.
#[derive(Debug)]
pub struct Perturbed {
    base: MetricField,
    amplitude: f64,
    center: Vec<f64>,
    radius: f64,
}

impl Perturbed {
    fn bump(&self, x: &[f64]) -> (f64, Vect) {
        let n = self.base.dim();
        let rho2 = self.radius * self.radius;
        let s: f64 = (0..n).map(|k| (x[k] - self.center[k]).powi(2)).sum::<f64>() / rho2;
        let mut grad = [0.0; MAXD];
        if s >= 1.0 {
            return (0.0, grad);
        }
        let b = (1.0 - 1.0 / (1.0 - s)).exp();
        let f = -b / ((1.0 - s) * (1.0 - s));
        for k in 0..n {
            grad[k] = f * 2.0 * (x[k] - self.center[k]) / rho2;
        }
        (b, grad)
    }
}

impl MetricModel for Perturbed {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn feature_length(&self) -> Option<f64> {
        let own = (self.amplitude != 0.0).then_some(self.radius);
        match (own, self.base.feature_length()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
    fn domain(&self) -> &ChartDomain {
        self.base.domain()
    }
    fn contains(&self, x: &[f64]) -> bool {
        self.base.contains(x)
    }
    fn g(&self, x: &[f64], out: &mut Mat) {
        *out = self.base.g_at(x);
        if self.amplitude == 0.0 {
            return;
        }
        let (b, _) = self.bump(x);
        if b != 0.0 {
            for i in 0..self.dim() {
                out[i][i] += self.amplitude * b;
            }
        }
    }
    fn dg(&self, x: &[f64], out: &mut [Mat; MAXD]) -> bool {
        if !self.base.model.dg(x, out) {
            return false;
        }
        if self.amplitude == 0.0 {
            return true;
        }
        let (b, grad) = self.bump(x);
        if b != 0.0 {
            for k in 0..self.dim() {
                for i in 0..self.dim() {
                    out[k][i][i] += self.amplitude * grad[k];
                }
            }
        }
        true
    }
    fn time_orientation(&self, x: &[f64]) -> Vect {
        self.base.time_orientation_at(x)
    }
    fn wrap(&self, x: &mut [f64]) {
        self.base.wrap(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

fn param<T: serde::de::DeserializeOwned>(params: &Value, key: &str) -> Result<Option<T>> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::InvalidParam(format!("{key}: {e}"))),
    }
}

fn dim_param(params: &Value, default: usize) -> Result<usize> {
    let d = param::<usize>(params, "dim")?.unwrap_or(default);
    if !(2..=MAXD).contains(&d) {
        return Err(Error::InvalidParam(format!("dim must be in 2..={MAXD}, got {d}")));
    }
    Ok(d)
}

/// Build a catalog metric: `minkowski`, `product`, `torus-minkowski`,
/// `schwarzschild-kruskal` or `perturbed`.
pub fn catalog_metric(name: &str, params: &Value) -> Result<MetricField> {
    let params = if params.is_null() { Value::Object(Default::default()) } else { params.clone() };
    let model: Arc<dyn MetricModel> = match name {
        "minkowski" => Arc::new(Minkowski::new(dim_param(&params, 4)?)),
        "torus-minkowski" => Arc::new(TorusMinkowski::new(dim_param(&params, 4)?)),
        "product" => {
            let dim = dim_param(&params, 4)?;
            let factor: FactorSpec = param(&params, "factor")?.unwrap_or(FactorSpec::Euclidean { scale: 1.0 });
            match factor {
                FactorSpec::Euclidean { scale } if !(scale > 0.0) => {
                    return Err(Error::InvalidParam("factor scale must be positive".into()))
                }
                FactorSpec::Sphere { radius } if !(radius > 0.0) => {
                    return Err(Error::InvalidParam("sphere radius must be positive".into()))
                }
                _ => {}
            }
            Arc::new(Product::new(dim, factor))
        }
        "schwarzschild-kruskal" => {
            let r: f64 = param(&params, "R")?.unwrap_or(1.0);
            let delta: f64 = param(&params, "delta_sing")?.unwrap_or(1e-3);
            let extent: f64 = param(&params, "extent")?.unwrap_or(4.0);
            if !(r > 0.0) || !(delta > 0.0 && delta < 1.0) || !(extent > 0.0) {
                return Err(Error::InvalidParam("need R > 0, 0 < delta_sing < 1, extent > 0".into()));
            }
            Arc::new(Kruskal::new(r, delta, extent))
        }
        "perturbed" => {
            let base: MetricSpec = param(&params, "base")?
                .ok_or_else(|| Error::InvalidParam("perturbed needs a base metric".into()))?;
            let base = catalog_metric(&base.name, &base.params)?;
            let amplitude: f64 = param(&params, "amplitude")?.unwrap_or(0.0);
            let radius: f64 = param(&params, "radius")?.unwrap_or(1.0);
            let center: Vec<f64> = param(&params, "center")?.unwrap_or_else(|| vec![0.0; base.dim()]);
            if center.len() != base.dim() || !(radius > 0.0) {
                return Err(Error::InvalidParam("bump center length or radius invalid".into()));
            }
            let p = Perturbed { base, amplitude, center, radius };
            check_bump_signature(&p)?;
            Arc::new(p)
        }
        other => return Err(Error::UnknownMetric(other.to_string())),
    };
    Ok(MetricField::from_model(name, params, model))
}

pub fn metric_from_spec(spec: &MetricSpec) -> Result<MetricField> {
    catalog_metric(&spec.name, &spec.params)
}

fn check_bump_signature(p: &Perturbed) -> Result<()> {
    if p.amplitude == 0.0 {
        return Ok(());
    }
    let n = p.dim();
    let per = 7usize;
    let total = per.pow(n as u32);
    let mut x = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        for k in 0..n {
            let i = rem % per;
            rem /= per;
            x[k] = p.center[k] + p.radius * (2.0 * i as f64 / (per - 1) as f64 - 1.0);
        }
        if !p.contains(&x) {
            continue;
        }
        let mut g = ZERO_MAT;
        p.g(&x, &mut g);
        let (neg, pos) = small::inertia(&small::to_dmatrix(&g, n), 1e-12);
        if neg != 1 || pos != n - 1 {
            return Err(Error::Signature(format!("perturbation breaks signature at {x:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn mink() -> MetricField {
        catalog_metric("minkowski", &json!({"dim": 4})).unwrap()
    }

    #[test]
    fn minkowski_inner_products() {
        let m = mink();
        let p = m.point(vec![0.0; 4]);
        let t = TangentVector::new(p.clone(), vec![1.0, 0.0, 0.0, 0.0]);
        let x = TangentVector::new(p.clone(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.inner(&t, &t).unwrap(), -1.0);
        assert_eq!(m.inner(&t, &x).unwrap(), 0.0);
    }

    #[test]
    fn product_scaled_factor() {
        let m = catalog_metric("product", &json!({"dim": 4, "factor": {"kind": "euclidean", "scale": 4.0}})).unwrap();
        let p = m.point(vec![0.3, 0.1, -0.2, 0.5]);
        let v = TangentVector::new(p, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.inner(&v, &v).unwrap(), 4.0);
    }

    #[test]
    fn base_mismatch_and_domain() {
        let m = mink();
        let a = TangentVector::new(m.point(vec![0.0; 4]), vec![1.0, 0.0, 0.0, 0.0]);
        let b = TangentVector::new(m.point(vec![1.0, 0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(m.inner(&a, &b), Err(Error::BaseMismatch)));
        let far = TangentVector::new(m.point(vec![1e4, 0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(m.inner(&far, &far), Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn causal_classes() {
        let m = mink();
        let p = m.point(vec![0.0; 4]);
        let c = |v: Vec<f64>| m.causal_character(&TangentVector::new(p.clone(), v));
        assert_eq!(c(vec![1.0, 0.0, 0.0, 0.0]), CausalCharacter::TimelikeFuture);
        assert_eq!(c(vec![1.0, 1.0, 0.0, 0.0]), CausalCharacter::Null);
        assert_eq!(c(vec![-2.0, 1.0, 0.0, 0.0]), CausalCharacter::TimelikePast);
        assert_eq!(c(vec![0.0, 1.0, 0.0, 0.0]), CausalCharacter::Spacelike);
        assert_eq!(c(vec![0.0; 4]), CausalCharacter::Zero);
    }

    #[test]
    fn minkowski_christoffel_vanishes() {
        let m = mink();
        let gam = m.christoffel(&m.point(vec![0.2, 0.3, -0.1, 4.0])).unwrap();
        assert!(gam.iter().flatten().flatten().all(|v| *v == 0.0));
    }

    /// diag(−1, (1+x¹)², 1, 1) has no analytic callback, so this exercises
    /// the difference path. By hand at x¹ = 0: ∂₁g₁₁ = 2, so Γ¹₁₁ = 1 and
    /// every other symbol vanishes.
    #[derive(Debug)]
    struct Stretched(ChartDomain);
    impl MetricModel for Stretched {
        fn dim(&self) -> usize {
            4
        }
        fn domain(&self) -> &ChartDomain {
            &self.0
        }
        fn g(&self, x: &[f64], out: &mut Mat) {
            *out = ZERO_MAT;
            out[0][0] = -1.0;
            out[1][1] = (1.0 + x[1]).powi(2);
            out[2][2] = 1.0;
            out[3][3] = 1.0;
        }
    }

    #[test]
    fn christoffel_by_differences() {
        let m = MetricField::from_model("stretched", Value::Null, Arc::new(Stretched(ChartDomain::cube(4, -0.5, 0.5))));
        assert!(!m.has_analytic_derivatives());
        let gam = m.christoffel(&m.point(vec![0.0; 4])).unwrap();
        for l in 0..4 {
            for a in 0..4 {
                for b in 0..4 {
                    let want = if (l, a, b) == (1, 1, 1) { 1.0 } else { 0.0 };
                    assert!((gam[l][a][b] - want).abs() < 1e-8, "Γ^{l}_{a}{b} = {}", gam[l][a][b]);
                    assert!((gam[l][a][b] - gam[l][b][a]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn kruskal_areal_radius() {
        // (1−r)e^r = −1 at U = 1, V = 0; independent bisection oracle
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (1.0 - mid) * mid.exp() > -1.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let m = Kruskal::new(1.0, 1e-3, 4.0);
        let r = m.areal_radius(0.0 - 1.0);
        assert!((r - lo).abs() < 1e-12);
        assert!((r - 1.278).abs() < 1e-3);
    }

    #[test]
    fn kruskal_christoffel_against_half_step_stencil() {
        let m = catalog_metric("schwarzschild-kruskal", &json!({"R": 1.0})).unwrap();
        let x = [0.3, 0.9, 1.1, 0.4];
        let gam = m.christoffel(&m.point(x.to_vec())).unwrap();
        // independent oracle: 6th-order differences of g only
        let n = 4;
        let h = 1e-3;
        let mut dg = [[[0.0; 4]; 4]; 4];
        for k in 0..n {
            let at = |s: f64| {
                let mut y = x;
                y[k] += s * h;
                m.g_at(&y)
            };
            let (p1, m1, p2, m2, p3, m3) = (at(1.0), at(-1.0), at(2.0), at(-2.0), at(3.0), at(-3.0));
            for i in 0..n {
                for j in 0..n {
                    dg[k][i][j] = (45.0 * (p1[i][j] - m1[i][j]) - 9.0 * (p2[i][j] - m2[i][j]) + (p3[i][j] - m3[i][j]))
                        / (60.0 * h);
                }
            }
        }
        let gi = small::to_dmatrix(&m.g_at(&x), 4).try_inverse().unwrap();
        for l in 0..n {
            for a in 0..n {
                for b in 0..n {
                    let want: f64 =
                        (0..n).map(|r| 0.5 * gi[(l, r)] * (dg[a][r][b] + dg[b][r][a] - dg[r][a][b])).sum();
                    assert!((gam[l][a][b] - want).abs() <= 1e-6 * want.abs().max(1e-3), "{l}{a}{b}");
                }
            }
        }
    }

    #[test]
    fn minkowski_is_flat() {
        let m = mink();
        let c = m.curvature_at(&m.point(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(c.kretschmann, 0.0);
    }

    #[test]
    fn riemann_antisymmetry_and_product_identity() {
        // curvature of −dt² + round sphere radius a equals that of the factor:
        // 2-sphere has R_{abcd}R^{abcd} = 4/a⁴ (block identity)
        let a: f64 = 1.3;
        let m = catalog_metric("product", &json!({"dim": 3, "factor": {"kind": "sphere", "radius": a}})).unwrap();
        let c = m.curvature_at(&m.point(vec![0.0, 0.4, -0.3])).unwrap();
        assert!((c.kretschmann - 4.0 / a.powi(4)).abs() < 1e-7);
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        assert!((c.r(i, j, k, l) + c.r(i, j, l, k)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn perturbed_zero_amplitude_bit_identical() {
        let base = json!({"name": "product", "params": {"dim": 3, "factor": {"kind": "sphere", "radius": 1.0}}});
        let p = catalog_metric("perturbed", &json!({"base": base, "amplitude": 0.0, "center": [0.0, 0.1, 0.0], "radius": 0.5}))
            .unwrap();
        let b = catalog_metric("product", &json!({"dim": 3, "factor": {"kind": "sphere", "radius": 1.0}})).unwrap();
        for x in [[0.0, 0.1, 0.0], [0.2, -0.1, 0.3], [5.0, 1.0, 2.0]] {
            let (gp, gb) = (p.g_at(&x), b.g_at(&x));
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(gp[i][j].to_bits(), gb[i][j].to_bits());
                }
            }
        }
    }

    #[test]
    fn perturbed_signature_guard() {
        let base = json!({"name": "minkowski", "params": {"dim": 3}});
        let r = catalog_metric("perturbed", &json!({"base": base, "amplitude": 2.0, "center": [0.0, 0.0, 0.0], "radius": 0.5}));
        assert!(matches!(r, Err(Error::Signature(_))));
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(catalog_metric("kerr", &Value::Null), Err(Error::UnknownMetric(_))));
    }

    #[test]
    fn torus_equals_minkowski_pointwise() {
        let t = catalog_metric("torus-minkowski", &json!({"dim": 4})).unwrap();
        let m = mink();
        assert_eq!(t.g_at(&[0.3, 0.2, 0.9, 0.1]), m.g_at(&[0.3, 0.2, 0.9, 0.1]));
        let mut x = [1.25, -0.25, 0.5, 3.0];
        t.wrap(&mut x);
        assert_eq!(x, [0.25, 0.75, 0.5, 0.0]);
    }
}
