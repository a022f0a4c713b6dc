//! The inverse solver. Everything here reads only the measurement table and
//! its Σ-grid: the tangential metric from short-separation limits, then the
//! normal jet from the eikonal equation for d⁺_y differentiated in r along a
//! family of anchors y whose connecting geodesics leave Σ at small tilt λ.
//!
//! Conventions: lattice index ν ↦ u = origin + h∘ν; derivatives are in
//! Σ-parameter units. `A = ∂ᵣg_ij` and `B = ∂ᵣ²g_ij` are lower-index; the
//! upper-index derivative is `∂ᵣg^{ij} = −ĝ⁻¹Aĝ⁻¹` at r = 0.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{MeasurementTable, TableView};
use crate::small;

pub const C1: [f64; 5] = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
pub const C2: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0];
const OFF: [i64; 5] = [-2, -1, 0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryTolerances {
    /// relative RMS residual allowed in the tangential quadratic-form fit
    pub fit_tol: f64,
    /// hyperbolic angle between anchor gradient and family direction
    pub angle_tol: f64,
    pub rad_tol: f64,
    /// relative residual allowed in a family's λ-extrapolation
    pub ext_tol: f64,
    pub lam_min: f64,
    pub lam_max: f64,
    /// accept an anchor when its stencil error estimate ≤ κ·λ·h⁴
    pub kappa: f64,
}

impl Default for RecoveryTolerances {
    fn default() -> Self {
        RecoveryTolerances {
            fit_tol: 1e-6,
            angle_tol: 0.05,
            rad_tol: 1e-8,
            ext_tol: 1e-3,
            lam_min: 0.02,
            lam_max: 0.3,
            kappa: 62.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JetMode {
    /// one least-squares fit over every accepted anchor
    #[default]
    Pooled,
    /// per-direction anchor families, then a solve across directions
    Families,
}

fn default_reach() -> i64 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryParams {
    pub u0: Vec<f64>,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub mode: JetMode,
    /// family directions ξ (Σ-parameter components); default is a fan
    #[serde(default)]
    pub direction_set: Option<Vec<Vec<f64>>>,
    /// largest |component| of the lattice directions used for ĝ
    #[serde(default = "default_reach")]
    pub dir_reach: i64,
    #[serde(default)]
    pub tol: RecoveryTolerances,
}

impl RecoveryParams {
    pub fn new(u0: Vec<f64>, k: usize) -> Self {
        RecoveryParams { u0, k, mode: JetMode::Pooled, direction_set: None, dir_reach: 2, tol: Default::default() }
    }
}

/// Primitive integer directions with entries in [−reach, reach], first
/// nonzero entry positive, in lexicographic order.
pub fn lattice_directions(n: usize, reach: i64) -> Vec<Vec<i64>> {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    let side = (2 * reach + 1) as usize;
    let mut out = Vec::new();
    for code in 0..side.pow(n as u32) {
        let mut c = code;
        let w: Vec<i64> = (0..n)
            .map(|_| {
                let v = (c % side) as i64 - reach;
                c /= side;
                v
            })
            .collect();
        let first = w.iter().find(|v| **v != 0);
        if first.is_none_or(|f| *f < 0) || w.iter().fold(0, |g, v| gcd(g, *v)) != 1 {
            continue;
        }
        out.push(w);
    }
    out.sort();
    out
}

fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Basis of symmetric forms evaluated on w: `w_i w_j`, doubled off-diagonal.
fn quad_row(w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut r = Vec::with_capacity(sym_len(n));
    for i in 0..n {
        for j in i..n {
            r.push(if i == j { w[i] * w[i] } else { 2.0 * w[i] * w[j] });
        }
    }
    r
}

fn sym_from(sol: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = sol[k];
            m[(j, i)] = sol[k];
            k += 1;
        }
    }
    m
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub struct LstsqFit {
    pub solution: Vec<f64>,
    pub rank: usize,
    pub condition: f64,
    /// RMS residual over RMS right-hand side
    pub rel_residual: f64,
}

pub fn lstsq(rows: &[Vec<f64>], rhs: &[f64]) -> Result<LstsqFit> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.len() < cols || cols == 0 {
        return Err(Error::Underdetermined { have: rows.len(), need: cols.max(1) });
    }
    let a = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    // column equilibration keeps mixed-scale nuisance columns harmless
    let scale: Vec<f64> = (0..cols).map(|j| a.column(j).norm().max(1e-300)).collect();
    let a_s = DMatrix::from_fn(rows.len(), cols, |i, j| a[(i, j)] / scale[j]);
    let b = DVector::from_column_slice(rhs);
    let svd = a_s.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax).count();
    if rank < cols {
        return Err(Error::RankDeficient { rank, needed: cols });
    }
    let x_s = svd.solve(&b, 1e-14 * smax).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let solution: Vec<f64> = (0..cols).map(|j| x_s[j] / scale[j]).collect();
    let res = &a_s * &x_s - &b;
    let bn = b.norm().max(1e-300);
    Ok(LstsqFit { solution, rank, condition: smax / smin, rel_residual: res.norm() / bn })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TangentialSample {
    pub u: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub rel_residual: f64,
    pub condition: f64,
    pub directions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TangentialMetricField {
    pub u0: Vec<f64>,
    pub nodes: Vec<TangentialSample>,
}

/// Tangential derivatives of `d⁺_y` at a node: value, gradient, Hessian.
#[derive(Clone, Debug)]
pub struct DPartials {
    pub d: f64,
    pub p: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// One anchor's Taylor tower at a node.
#[derive(Clone, Debug)]
struct Tower {
    y: Vec<i64>,
    d: f64,
    p: DVector<f64>,
    lam: f64,
    w: DVector<f64>,
    /// ∂ᵣ∂_m d
    d_ir: DVector<f64>,
    /// ∂ᵣ²d once A is known
    d_rr: Option<f64>,
    err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Anchor {
    pub y: Vec<f64>,
    pub lambda: f64,
    pub d: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchorFamily {
    pub u0: Vec<f64>,
    pub xi0: Vec<f64>,
    /// ordered by strictly decreasing λ
    pub anchors: Vec<Anchor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyResult {
    pub xi: Vec<f64>,
    pub order: usize,
    pub anchors: usize,
    pub lambda_ladder: Vec<f64>,
    /// Σ ∂ᵣᵏg_ij ξ^i ξ^j extrapolated to λ → 0
    pub value: Option<f64>,
    pub rel_residual: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub order: usize,
    pub anchors: usize,
    pub rel_residual: f64,
    pub condition: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct JetDiagnostics {
    pub tangential_rel_residual: f64,
    pub tangential_condition: f64,
    pub tangential_directions: usize,
    pub stages: Vec<StageDiagnostics>,
    /// sorted (descending) λ of the anchors used at first order
    pub lambda_ladder: Vec<f64>,
    pub families: Vec<FamilyResult>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JetReport {
    pub u0: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub tangential: Vec<Vec<f64>>,
    pub normal_derivs: Vec<Vec<Vec<f64>>>,
    pub diagnostics: JetDiagnostics,
}

/// Recovery state over one table. Tangential metrics are fitted once per
/// node and cached; nothing here knows the generating metric.
pub struct Recovery<'a> {
    view: TableView<'a>,
    n: usize,
    h: Vec<f64>,
    u0: Vec<i64>,
    dirs: Vec<Vec<i64>>,
    tol: RecoveryTolerances,
    gtan: BTreeMap<Vec<i64>, Result<TangentialSample>>,
    candidates: Vec<Vec<i64>>,
}

fn add(a: &[i64], b: &[i64]) -> Vec<i64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn axis(n: usize, m: usize, o: i64) -> Vec<i64> {
    let mut e = vec![0; n];
    e[m] = o;
    e
}

fn sym_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    g.clone().try_inverse().ok_or_else(|| Error::NonLorentzian(g.iter().copied().collect()))
}

impl<'a> Recovery<'a> {
    pub fn new(table: &'a MeasurementTable, u0: &[f64], dir_reach: i64, tol: RecoveryTolerances) -> Result<Self> {
        let view = table.view()?;
        let grid = &table.sigma_spec.grid;
        let n = grid.dim();
        if u0.len() != n {
            return Err(Error::InvalidParam(format!("u0 needs {n} components")));
        }
        let u0i = grid.index_of(u0)?;
        if view.node(&u0i).is_none() {
            return Err(Error::MissingNode(u0i));
        }
        if table.values.iter().all(|v| *v == 0.0) {
            return Err(Error::NoChronologicalPairs);
        }
        let mut candidates: Vec<Vec<i64>> = view.indices().map(|(k, _)| k.clone()).collect();
        candidates.sort();
        Ok(Recovery {
            h: grid.spacing.clone(),
            view,
            n,
            u0: u0i,
            dirs: lattice_directions(n, dir_reach),
            tol,
            gtan: BTreeMap::new(),
            candidates,
        })
    }

    fn d(&self, a: &[i64], b: &[i64]) -> Option<f64> {
        self.view.d(a, b)
    }

    fn phys(&self, w: &[i64]) -> Vec<f64> {
        w.iter().zip(&self.h).map(|(a, h)| *a as f64 * h).collect()
    }

    /// Quadratic-form fit of ĝ at one node from `(d(u−kw, u+kw)/2k)²`,
    /// k = 1, 2, 3, Richardson-extrapolated to zero separation.
    fn fit_tangential_node(&self, idx: &[i64]) -> Result<TangentialSample> {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for w in &self.dirs {
            let mut f = [0.0; 3];
            let mut ok = true;
            for k in 1..=3i64 {
                let kw: Vec<i64> = w.iter().map(|c| c * k).collect();
                let a: Vec<i64> = idx.iter().zip(&kw).map(|(x, y)| x - y).collect();
                let b = add(idx, &kw);
                let (Some(dab), Some(dba)) = (self.d(&a, &b), self.d(&b, &a)) else {
                    ok = false;
                    break;
                };
                let dd = dab.max(dba);
                if dd <= 0.0 {
                    ok = false;
                    break;
                }
                f[(k - 1) as usize] = dd * dd / (2.0 * k as f64).powi(2);
            }
            if !ok {
                continue;
            }
            rows.push(quad_row(&self.phys(w)));
            rhs.push(-(1.5 * f[0] - 0.6 * f[1] + 0.1 * f[2]));
        }
        let need = sym_len(self.n);
        if rows.len() < need {
            return Err(Error::RankDeficient { rank: rows.len(), needed: need });
        }
        let fit = lstsq(&rows, &rhs)?;
        let g = sym_from(&fit.solution, self.n);
        let (neg, pos) = small::inertia(&g, 1e-12);
        if neg != 1 || pos != self.n - 1 {
            return Err(Error::NonLorentzian(g.iter().copied().collect()));
        }
        if fit.rel_residual > self.tol.fit_tol {
            return Err(Error::FitResidual { residual: fit.rel_residual, tol: self.tol.fit_tol, u: self.view_u(idx) });
        }
        Ok(TangentialSample {
            u: self.view_u(idx),
            g: to_rows(&g),
            rel_residual: fit.rel_residual,
            condition: fit.condition,
            directions: rows.len(),
        })
    }

    fn view_u(&self, idx: &[i64]) -> Vec<f64> {
        self.view.table.sigma_spec.grid.coords(idx)
    }

    /// Fit ĝ at every listed node not yet cached (in parallel).
    fn ensure_gtan(&mut self, nodes: &BTreeSet<Vec<i64>>) {
        let todo: Vec<Vec<i64>> = nodes.iter().filter(|k| !self.gtan.contains_key(*k)).cloned().collect();
        let fitted: Vec<(Vec<i64>, Result<TangentialSample>)> =
            todo.into_par_iter().map(|k| (k.clone(), self.fit_tangential_node(&k))).collect();
        self.gtan.extend(fitted);
    }

    fn gtan_at(&self, idx: &[i64]) -> Result<DMatrix<f64>> {
        match self.gtan.get(idx) {
            Some(Ok(s)) => Ok(DMatrix::from_fn(self.n, self.n, |i, j| s.g[i][j])),
            Some(Err(e)) => Err(clone_err(e)),
            None => Err(Error::MissingNode(idx.to_vec())),
        }
    }

    /// `∂_m ĝ` at a node by the 5-point stencil over cached fits.
    fn dgtan_at(&self, idx: &[i64]) -> Result<Vec<DMatrix<f64>>> {
        (0..self.n)
            .map(|m| {
                let mut acc = DMatrix::zeros(self.n, self.n);
                for (c, o) in C1.iter().zip(OFF) {
                    if *c != 0.0 {
                        acc += self.gtan_at(&add(idx, &axis(self.n, m, o)))? * *c;
                    }
                }
                Ok(acc / self.h[m])
            })
            .collect()
    }

    /// Stencil derivatives of `u ↦ d(σ(y), σ(u))` at node `idx` with lattice
    /// step `step`; `None` if any stencil value is missing or zero.
    fn dders(&self, y: &[i64], idx: &[i64], step: i64) -> Option<DPartials> {
        let n = self.n;
        let val = |off: &[i64]| -> Option<f64> {
            let at: Vec<i64> = idx.iter().zip(off).map(|(a, o)| a + step * o).collect();
            self.d(y, &at).filter(|v| *v > 0.0)
        };
        let d0 = val(&vec![0; n])?;
        let mut p = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for m in 0..n {
            let hm = self.h[m] * step as f64;
            let mut g1 = 0.0;
            let mut g2 = 0.0;
            for (k, o) in OFF.iter().enumerate() {
                let v = if *o == 0 { d0 } else { val(&axis(n, m, *o))? };
                g1 += C1[k] * v;
                g2 += C2[k] * v;
            }
            p[m] = g1 / hm;
            hess[(m, m)] = g2 / (hm * hm);
        }
        for m in 0..n {
            for l in m + 1..n {
                let mut acc = 0.0;
                for (i, a) in OFF.iter().enumerate() {
                    for (j, b) in OFF.iter().enumerate() {
                        if C1[i] == 0.0 || C1[j] == 0.0 {
                            continue;
                        }
                        let mut off = vec![0; n];
                        off[m] = *a;
                        off[l] = *b;
                        acc += C1[i] * C1[j] * val(&off)?;
                    }
                }
                let v = acc / (self.h[m] * self.h[l] * (step * step) as f64);
                hess[(m, l)] = v;
                hess[(l, m)] = v;
            }
        }
        Some(DPartials { d: d0, p, hess })
    }

    fn tower(&self, y: &[i64], idx: &[i64], a: Option<&DMatrix<f64>>) -> Option<Tower> {
        let r1 = self.dders(y, idx, 1)?;
        let r2 = self.dders(y, idx, 2)?;
        let hmax = r1.hess.amax().max(1e-300);
        let pmax = r1.p.amax().max(1e-300);
        let err = ((&r1.hess - &r2.hess).amax() / 15.0 / hmax).max((&r1.p - &r2.p).amax() / 15.0 / pmax);
        let g = self.gtan_at(idx).ok()?;
        let gi = sym_inverse(&g).ok()?;
        let dg = self.dgtan_at(idx).ok()?;
        let p = r1.p;
        let rad = -1.0 - (p.transpose() * &gi * &p)[(0, 0)];
        if rad <= 0.0 {
            return None;
        }
        let lam = rad.sqrt();
        let w = &gi * &p;
        let d_ir = DVector::from_fn(self.n, |m, _| {
            let dgi = -(&gi * &dg[m] * &gi);
            let t1 = (p.transpose() * dgi * &p)[(0, 0)];
            let t2 = 2.0 * w.dot(&r1.hess.column(m));
            -(t1 + t2) / (2.0 * lam)
        });
        let d_rr = a.map(|a| {
            // (∂ᵣg^{ij}) p_i p_j = −wᵀAw
            let t1 = -(w.transpose() * a * &w)[(0, 0)];
            -(t1 + 2.0 * w.dot(&d_ir)) / (2.0 * lam)
        });
        Some(Tower { y: y.to_vec(), d: r1.d, p, lam, w, d_ir, d_rr, err })
    }

    fn hstep(&self) -> f64 {
        self.h.iter().cloned().fold(0.0, f64::max)
    }

    fn accept(&self, t: &Tower) -> bool {
        let h = self.hstep();
        t.lam >= self.tol.lam_min && t.lam <= self.tol.lam_max && t.err <= self.tol.kappa * t.lam * h.powi(4)
    }

    /// All accepted anchor towers at node `idx`, in lattice order.
    fn collect(&self, idx: &[i64]) -> Vec<Tower> {
        self.candidates
            .par_iter()
            .filter(|y| self.d(y, idx).is_some_and(|v| v > 0.0))
            .filter_map(|y| self.tower(y, idx, None))
            .filter(|t| self.accept(t))
            .collect()
    }

    /// Per-anchor first-order datum: `2 w·∂ᵣ∇d − 2λ(1+λ²)/d`, whose leading
    /// part is `wᵀAw`; the flat-space value of ∂ᵣ²d is subtracted so that
    /// the remainder is O(λd).
    fn v1(t: &Tower) -> f64 {
        2.0 * t.w.dot(&t.d_ir) - 2.0 * t.lam * (1.0 + t.lam * t.lam) / t.d
    }

    fn nuisance(t: &Tower) -> Vec<f64> {
        let q = quad_row(t.w.as_slice());
        let mut r: Vec<f64> = q.iter().map(|v| t.lam * t.d * v).collect();
        r.extend(q.iter().map(|v| t.lam * t.lam * t.d * v));
        r
    }

    fn pooled_fit(&self, towers: &[Tower], rhs: &[f64], order: usize) -> Result<(DMatrix<f64>, StageDiagnostics)> {
        let m = sym_len(self.n);
        let need = 3 * m + 1;
        if towers.len() < need {
            return Err(Error::TooFewAnchors { found: towers.len(), needed: need });
        }
        let rows: Vec<Vec<f64>> = towers
            .iter()
            .map(|t| {
                let mut r = quad_row(t.w.as_slice());
                r.extend(Self::nuisance(t));
                r
            })
            .collect();
        let fit = lstsq(&rows, rhs)?;
        let lams = towers.iter().map(|t| t.lam);
        let diag = StageDiagnostics {
            order,
            anchors: towers.len(),
            rel_residual: fit.rel_residual,
            condition: fit.condition,
            lambda_min: lams.clone().fold(f64::INFINITY, f64::min),
            lambda_max: lams.fold(0.0, f64::max),
        };
        Ok((sym_from(&fit.solution[..m], self.n), diag))
    }

    fn first_order_at(&self, idx: &[i64]) -> Result<(DMatrix<f64>, StageDiagnostics, Vec<Tower>)> {
        let towers = self.collect(idx);
        let rhs: Vec<f64> = towers.iter().map(Self::v1).collect();
        let (a, diag) = self.pooled_fit(&towers, &rhs, 1)?;
        Ok((a, diag, towers))
    }

    fn nodes_for(&self, k: usize) -> BTreeSet<Vec<i64>> {
        let n = self.n;
        let mut set = BTreeSet::new();
        set.insert(self.u0.clone());
        let star = |c: &Vec<i64>, s: &mut BTreeSet<Vec<i64>>| {
            for m in 0..n {
                for o in OFF {
                    s.insert(add(c, &axis(n, m, o)));
                }
            }
        };
        if k >= 1 {
            star(&self.u0, &mut set);
        }
        if k >= 2 {
            let first: Vec<Vec<i64>> = set.iter().cloned().collect();
            for c in &first {
                star(c, &mut set);
            }
        }
        set
    }

    pub fn tangential_at_u0(&mut self) -> Result<TangentialSample> {
        let mut s = BTreeSet::new();
        s.insert(self.u0.clone());
        self.ensure_gtan(&s);
        self.gtan[&self.u0].as_ref().map(Clone::clone).map_err(clone_err)
    }

    /// Gradient of `d⁺_y` at u₀ together with its r-component.
    pub fn anchor_gradient(&mut self, y: &[f64]) -> Result<(DPartials, f64)> {
        let yi = self.view.table.sigma_spec.grid.index_of(y)?;
        self.tangential_at_u0()?;
        let parts = self.dders(&yi, &self.u0, 1).ok_or(Error::LightConeStencil)?;
        let g = self.gtan_at(&self.u0)?;
        let lam = eikonal_normal_derivative(&g, parts.p.as_slice(), self.tol.rad_tol)?;
        Ok((parts, lam))
    }

    fn hyperbolic_angle(g: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let ip = |x: &DVector<f64>, y: &DVector<f64>| (x.transpose() * g * y)[(0, 0)];
        let c = -ip(a, b) / (ip(a, a) * ip(b, b)).sqrt();
        c.max(1.0).acosh()
    }

    /// Past-pointing fan in a ĝ-orthonormal frame at u₀: rapidities 0.3, 0.45,
    /// 0.6 toward ±e_k and, for n ≥ 3, the diagonals (e_k ± e_l)/√2.
    pub fn default_fan(g: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let n = g.nrows();
        let ip = |x: &DVector<f64>, y: &DVector<f64>| (x.transpose() * g * y)[(0, 0)];
        let mut frame: Vec<DVector<f64>> = Vec::new();
        for k in 0..n {
            let mut v = DVector::zeros(n);
            v[k] = 1.0;
            for (i, f) in frame.iter().enumerate() {
                let sgn = if i == 0 { -1.0 } else { 1.0 };
                v -= f * (sgn * ip(&v, f));
            }
            let nn = ip(&v, &v).abs().sqrt();
            frame.push(v / nn);
        }
        let mut spatial: Vec<DVector<f64>> = Vec::new();
        for k in 1..n {
            spatial.push(frame[k].clone());
            spatial.push(-frame[k].clone());
        }
        for k in 1..n {
            for l in k + 1..n {
                for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    spatial.push((&frame[k] * a + &frame[l] * b) / 2f64.sqrt());
                }
            }
        }
        let mut out = Vec::new();
        for c in [0.3f64, 0.45, 0.6] {
            for s in &spatial {
                let xi = -(&frame[0] * c.cosh() + s * c.sinh());
                out.push(xi.iter().copied().collect());
            }
        }
        out
    }

    /// Anchors at u₀ whose raised tangential gradient points along ξ₀.
    pub fn build_anchor_family(&mut self, xi0: &[f64]) -> Result<AnchorFamily> {
        self.ensure_gtan(&self.nodes_for(1));
        let g = self.gtan_at(&self.u0)?;
        let xi = DVector::from_column_slice(xi0);
        if (xi.transpose() * &g * &xi)[(0, 0)] >= 0.0 {
            return Err(Error::InvalidParam("ξ₀ must be timelike in the recovered metric".into()));
        }
        let towers = self.collect(&self.u0.clone());
        let fam = self.family_from(&towers, &g, &xi);
        if fam.len() < 3 {
            return Err(Error::TooFewAnchors { found: fam.len(), needed: 3 });
        }
        let grid = &self.view.table.sigma_spec.grid;
        Ok(AnchorFamily {
            u0: self.view_u(&self.u0),
            xi0: xi0.to_vec(),
            anchors: fam
                .iter()
                .map(|(t, ang)| Anchor { y: grid.coords(&t.y), lambda: t.lam, d: t.d, angle: *ang })
                .collect(),
        })
    }

    fn family_from<'t>(&self, towers: &'t [Tower], g: &DMatrix<f64>, xi: &DVector<f64>) -> Vec<(&'t Tower, f64)> {
        let mut fam: Vec<(&Tower, f64)> = towers
            .iter()
            .map(|t| (t, Self::hyperbolic_angle(g, &t.w, xi)))
            .filter(|(t, ang)| *ang < self.tol.angle_tol && t.w.dot(&(g * xi)) < 0.0)
            .collect();
        fam.sort_by(|a, b| b.0.lam.total_cmp(&a.0.lam).then(a.0.y.cmp(&b.0.y)));
        fam.dedup_by(|a, b| a.0.lam == b.0.lam);
        fam
    }

    /// λ → 0 extrapolation of one family's per-anchor values (already divided
    /// by `1+λ²`, i.e. normalized to unit ŵ): affine-quadratic in λd.
    fn family_value(&self, fam: &[(&Tower, f64)], vals: &[f64], xi: &[f64], g: &DMatrix<f64>, order: usize) -> FamilyResult {
        let xv = DVector::from_column_slice(xi);
        let xi2 = -(xv.transpose() * g * &xv)[(0, 0)];
        let ladder: Vec<f64> = fam.iter().map(|(t, _)| t.lam).collect();
        let mut res = FamilyResult {
            xi: xi.to_vec(),
            order,
            anchors: fam.len(),
            lambda_ladder: ladder,
            value: None,
            rel_residual: None,
            note: None,
        };
        if fam.len() < 3 {
            res.note = Some(format!("only {} anchors", fam.len()));
            return res;
        }
        let rows: Vec<Vec<f64>> =
            fam.iter().map(|(t, _)| vec![1.0, t.lam * t.d, t.lam * t.lam * t.d]).collect();
        match lstsq(&rows, vals) {
            Ok(fit) => {
                res.value = Some(fit.solution[0] * xi2);
                res.rel_residual = Some(fit.rel_residual);
                if fit.rel_residual > self.tol.ext_tol {
                    res.note = Some(format!("extrapolation residual {:.2e} above ext_tol", fit.rel_residual));
                }
            }
            Err(e) => res.note = Some(e.to_string()),
        }
        res
    }

    /// The jet at u₀ up to order K ≤ 2.
    pub fn assemble(&mut self, k: usize, mode: JetMode, direction_set: Option<&[Vec<f64>]>) -> Result<JetReport> {
        if k > 2 {
            return Err(Error::Unsupported("normal derivatives beyond second order".into()));
        }
        self.ensure_gtan(&self.nodes_for(k));
        let tan = self.gtan[&self.u0].as_ref().map_err(clone_err)?.clone();
        let g = DMatrix::from_fn(self.n, self.n, |i, j| tan.g[i][j]);
        let m = sym_len(self.n);
        let mut diag = JetDiagnostics {
            tangential_rel_residual: tan.rel_residual,
            tangential_condition: tan.condition,
            tangential_directions: tan.directions,
            ..Default::default()
        };
        let mut normal = Vec::new();
        if k == 0 {
            return Ok(JetReport { u0: tan.u.clone(), k, tangential: tan.g, normal_derivs: normal, diagnostics: diag });
        }
        let fan = match direction_set {
            Some(d) => d.to_vec(),
            None => Self::default_fan(&g),
        };
        if mode == JetMode::Families && fan.len() < m {
            return Err(Error::Underdetermined { have: fan.len(), need: m });
        }
        if direction_set.is_some() {
            // only ĝ-timelike directions carry anchor families; their quadratic
            // rows must still span the symmetric forms
            let rows: Vec<Vec<f64>> = fan
                .iter()
                .filter(|xi| {
                    let xv = DVector::from_column_slice(xi);
                    (xv.transpose() * &g * &xv)[(0, 0)] < 0.0
                })
                .map(|xi| quad_row(xi))
                .collect();
            if rows.len() < m {
                return Err(Error::RankDeficient { rank: rows.len(), needed: m });
            }
            lstsq(&rows, &vec![0.0; rows.len()])?;
        }
        let u0 = self.u0.clone();
        let (a1, d1, towers) = self.first_order_at(&u0)?;
        let mut ladder: Vec<f64> = towers.iter().map(|t| t.lam).collect();
        ladder.sort_by(|a, b| b.total_cmp(a));
        diag.lambda_ladder = ladder;
        diag.stages.push(d1);
        let near = towers.iter().filter(|t| self.view_u(&t.y).iter().zip(&tan.u).all(|(a, b)| (a - b).abs() < 4.0 * self.hstep())).count();
        if near > 0 {
            diag.warnings.push(format!("{near} anchors lie within 4 grid steps of u0"));
        }
        let v1: Vec<f64> = towers.iter().map(Self::v1).collect();
        let fam1: Vec<FamilyResult> = fan
            .iter()
            .map(|xi| {
                let xv = DVector::from_column_slice(xi);
                let fam = self.family_from(&towers, &g, &xv);
                let vals: Vec<f64> = fam
                    .iter()
                    .map(|(t, _)| v1[towers.iter().position(|s| s.y == t.y).unwrap()] / (1.0 + t.lam * t.lam))
                    .collect();
                self.family_value(&fam, &vals, xi, &g, 1)
            })
            .collect();
        let a1 = match mode {
            JetMode::Pooled => a1,
            JetMode::Families => Self::solve_families(&fam1, self.n)?,
        };
        diag.families.extend(fam1);
        normal.push(to_rows(&a1));
        if k >= 2 {
            let (a2, d2, fam2) = self.second_order(&a1, &towers, &g, &fan, mode)?;
            diag.stages.push(d2);
            diag.families.extend(fam2);
            normal.push(to_rows(&a2));
        }
        Ok(JetReport { u0: tan.u.clone(), k, tangential: tan.g, normal_derivs: normal, diagnostics: diag })
    }

    fn solve_families(fams: &[FamilyResult], n: usize) -> Result<DMatrix<f64>> {
        let ok: Vec<&FamilyResult> = fams.iter().filter(|f| f.value.is_some()).collect();
        let m = sym_len(n);
        if ok.len() < m {
            return Err(Error::Underdetermined { have: ok.len(), need: m });
        }
        let rows: Vec<Vec<f64>> = ok.iter().map(|f| quad_row(&f.xi)).collect();
        let rhs: Vec<f64> = ok.iter().map(|f| f.value.unwrap()).collect();
        Ok(sym_from(&lstsq(&rows, &rhs)?.solution, n))
    }

    /// Second r-derivative of the eikonal identity. Needs ∂ᵣ²d at the stencil
    /// neighbours of u₀, hence first-order fits of A there as well.
    fn second_order(
        &self,
        a0: &DMatrix<f64>,
        towers: &[Tower],
        g: &DMatrix<f64>,
        fan: &[Vec<f64>],
        mode: JetMode,
    ) -> Result<(DMatrix<f64>, StageDiagnostics, Vec<FamilyResult>)> {
        let n = self.n;
        let neigh: Vec<Vec<i64>> =
            (0..n).flat_map(|m| OFF.iter().filter(|o| **o != 0).map(move |o| (m, *o))).map(|(m, o)| add(&self.u0, &axis(n, m, o))).collect();
        let a_neigh: Vec<(Vec<i64>, DMatrix<f64>)> = neigh
            .par_iter()
            .map(|nu| self.first_order_at(nu).map(|(a, _, _)| (nu.clone(), a)))
            .collect::<Result<_>>()?;
        let a_at = |nu: &[i64]| -> &DMatrix<f64> {
            if nu == self.u0.as_slice() {
                a0
            } else {
                &a_neigh.iter().find(|(k, _)| k.as_slice() == nu).unwrap().1
            }
        };
        let gi = sym_inverse(g)?;
        let dgi_r = -(&gi * a0 * &gi);
        let rows: Vec<Option<(Tower, f64)>> = towers
            .par_iter()
            .map(|t0| {
                let t0 = self.tower(&t0.y, &self.u0, Some(a0))?;
                let mut d_irr = DVector::zeros(n);
                for m in 0..n {
                    let mut acc = 0.0;
                    for (c, o) in C1.iter().zip(OFF) {
                        if *c == 0.0 {
                            continue;
                        }
                        let nu = add(&self.u0, &axis(n, m, o));
                        acc += c * self.tower(&t0.y, &nu, Some(a_at(&nu)))?.d_rr?;
                    }
                    d_irr[m] = acc / self.h[m];
                }
                let (lam, w, p, d_ir, d_rr) = (t0.lam, &t0.w, &t0.p, &t0.d_ir, t0.d_rr?);
                // flat-space ∂ᵣ³d of √(d² + 2λdr − r²)
                let d3 = 3.0 * lam * (1.0 + lam * lam) / (t0.d * t0.d);
                let rest = 4.0 * (d_ir.transpose() * &dgi_r * p)[(0, 0)]
                    + 2.0 * (d_irr.dot(w) + (d_ir.transpose() * &gi * d_ir)[(0, 0)])
                    + 2.0 * d_rr * d_rr
                    + 2.0 * lam * d3;
                let lead = 2.0 * (w.transpose() * a0 * &gi * a0 * w)[(0, 0)];
                Some((t0, lead + rest))
            })
            .collect();
        let (used, rhs): (Vec<Tower>, Vec<f64>) = rows.into_iter().flatten().unzip();
        let (a2, diag) = self.pooled_fit(&used, &rhs, 2)?;
        let fams: Vec<FamilyResult> = fan
            .iter()
            .map(|xi| {
                let xv = DVector::from_column_slice(xi);
                let fam = self.family_from(&used, g, &xv);
                let vals: Vec<f64> = fam
                    .iter()
                    .map(|(t, _)| rhs[used.iter().position(|s| s.y == t.y).unwrap()] / (1.0 + t.lam * t.lam))
                    .collect();
                self.family_value(&fam, &vals, xi, g, 2)
            })
            .collect();
        let a2 = match mode {
            JetMode::Pooled => a2,
            JetMode::Families => Self::solve_families(&fams, n)?,
        };
        Ok((a2, diag, fams))
    }
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::RankDeficient { rank, needed } => Error::RankDeficient { rank: *rank, needed: *needed },
        Error::NonLorentzian(v) => Error::NonLorentzian(v.clone()),
        Error::FitResidual { residual, tol, u } => Error::FitResidual { residual: *residual, tol: *tol, u: u.clone() },
        Error::MissingNode(v) => Error::MissingNode(v.clone()),
        other => Error::InvalidParam(other.to_string()),
    }
}

/// Tangential metric on the cube window of half-width `half` lattice steps.
/// Nodes whose fit fails are reported as errors.
pub fn recover_tangential(t: &MeasurementTable, u0: &[f64], half: i64, tol: &RecoveryTolerances) -> Result<TangentialMetricField> {
    let mut rec = Recovery::new(t, u0, default_reach(), tol.clone())?;
    let n = rec.n;
    let mut set = BTreeSet::new();
    let side = (2 * half + 1) as usize;
    for code in 0..side.pow(n as u32) {
        let mut c = code;
        let off: Vec<i64> = (0..n)
            .map(|_| {
                let v = (c % side) as i64 - half;
                c /= side;
                v
            })
            .collect();
        set.insert(add(&rec.u0, &off));
    }
    rec.ensure_gtan(&set);
    let nodes = set.iter().map(|k| rec.gtan[k].as_ref().map(Clone::clone).map_err(clone_err)).collect::<Result<_>>()?;
    Ok(TangentialMetricField { u0: u0.to_vec(), nodes })
}

/// Stencil derivatives of `d⁺_y` at u (order 1 or 2; the Hessian is zero for
/// order 1).
pub fn tangential_d_derivatives(t: &MeasurementTable, y: &[f64], u: &[f64], order: usize) -> Result<DPartials> {
    let rec = Recovery::new(t, u, default_reach(), RecoveryTolerances::default())?;
    let grid = &t.sigma_spec.grid;
    let yi = grid.index_of(y)?;
    let ui = grid.index_of(u)?;
    let mut parts = rec.dders(&yi, &ui, 1).ok_or(Error::LightConeStencil)?;
    if order < 2 {
        parts.hess.fill(0.0);
    }
    Ok(parts)
}

/// `∂ᵣd⁺_y = +√(−1 − ĝ^{ij}∂ᵢd ∂ⱼd)`; a radicand within `rad_tol` below 0
/// is clamped to 0.
pub fn eikonal_normal_derivative(g: &DMatrix<f64>, p: &[f64], rad_tol: f64) -> Result<f64> {
    let gi = sym_inverse(g)?;
    let pv = DVector::from_column_slice(p);
    let rad = -1.0 - (pv.transpose() * gi * &pv)[(0, 0)];
    if rad < -rad_tol {
        return Err(Error::NegativeRadicand(rad));
    }
    Ok(rad.max(0.0).sqrt())
}

/// Full pipeline: tangential metric and normal jet at `params.u0`.
pub fn assemble_jet(t: &MeasurementTable, params: &RecoveryParams) -> Result<JetReport> {
    let mut rec = Recovery::new(t, &params.u0, params.dir_reach, params.tol.clone())?;
    rec.assemble(params.k, params.mode, params.direction_set.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_sets() {
        let d = lattice_directions(2, 2);
        assert_eq!(d.len(), 8);
        assert!(d.contains(&vec![1, -2]) && d.contains(&vec![0, 1]) && !d.contains(&vec![2, 2]));
        assert_eq!(lattice_directions(3, 1).len(), 13);
    }

    #[test]
    fn quadratic_form_fit_is_exact() {
        let g = [[-1.0, 0.2], [0.2, 0.5]];
        let dirs = [[1.0, 0.0], [1.0, 1.0], [2.0, 1.0], [1.0, -1.0]];
        let rows: Vec<Vec<f64>> = dirs.iter().map(|w| quad_row(w)).collect();
        let rhs: Vec<f64> = dirs
            .iter()
            .map(|w| (0..2).map(|i| (0..2).map(|j| g[i][j] * w[i] * w[j]).sum::<f64>()).sum())
            .collect();
        let fit = lstsq(&rows, &rhs).unwrap();
        let m = sym_from(&fit.solution, 2);
        assert!((m[(0, 1)] - 0.2).abs() < 1e-12 && (m[(1, 1)] - 0.5).abs() < 1e-12);
        assert!(matches!(lstsq(&rows[..2], &rhs[..2]), Err(Error::Underdetermined { .. })));
    }

    #[test]
    fn eikonal_root() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]));
        // unit future gradient tilted off Σ: p = (−cosh β, sinh β cos θ), λ = sinh β sin θ
        let (b, th) = (0.7f64, 0.4f64);
        let p = [-b.cosh(), b.sinh() * th.cos()];
        let lam = eikonal_normal_derivative(&g, &p, 1e-8).unwrap();
        assert!((lam - b.sinh() * th.sin()).abs() < 1e-14);
        let tangent = [-b.cosh(), b.sinh()];
        assert!(eikonal_normal_derivative(&g, &tangent, 1e-8).unwrap() < 1e-7);
        assert!(matches!(eikonal_normal_derivative(&g, &[-1.0, 0.5], 1e-8), Err(Error::NegativeRadicand(_))));
    }
}
