//! Scenario configs and the forward → recover → verify pipeline around them.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{self, Completeness, GeodesicOptions, ShootOptions};
use crate::hypersurface::{self, FermiChart, Hypersurface, ParamBox, ProbeOptions, ProbeReport, SigmaSpec};
use crate::manifold::{kruskal_rho, metric_from_spec, MetricField, MetricSpec};
use crate::measurement::{build_table, FailurePolicy, GridBlock, GridSpec, MeasurementTable};
use crate::recovery::{self, JetReport, RecoveryParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spacing {
    Uniform(f64),
    PerAxis(Vec<f64>),
}

impl Spacing {
    fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            Spacing::Uniform(h) => vec![*h; n],
            Spacing::PerAxis(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineShape {
    /// full cube of half-width `half` around u₀
    #[default]
    Cube,
    /// only u₀ ± k·w, k = 1..=3, for the tangential-fit lattice directions
    Star,
}

/// A fine lattice around u₀ plus coarse physical blocks (anchor regions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeGrid {
    pub u0: Vec<f64>,
    pub h: Spacing,
    pub half: i64,
    #[serde(default)]
    pub fine: FineShape,
    #[serde(default)]
    pub coarse: Vec<GridBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Composite { composite: CompositeGrid },
    Explicit(GridSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthConfig {
    /// r-step of the ground-truth jet differences
    pub dr: f64,
    /// half-width of the Fermi window around u₀ (Σ-parameter units)
    pub window: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig { dr: 0.01, window: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyThresholds {
    /// relative tolerance per order k = 0, 1, 2
    pub rel: Vec<f64>,
    /// entries with |truth| below this are compared absolutely
    pub floor: f64,
}

impl Default for VerifyThresholds {
    fn default() -> Self {
        VerifyThresholds { rel: vec![1e-3, 5e-2, 2e-1], floor: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub u0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub r_list: Vec<f64>,
    pub neighborhood: f64,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub working_box: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub t_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantsConfig {
    /// sample Kretschmann at V = 0, θ = π/2 for r/R in [r_min, r_max]
    /// (Kruskal metrics only; other metrics sample along the first ray)
    #[serde(default)]
    pub r_range: Option<(f64, f64)>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub rays: Vec<Ray>,
    #[serde(default = "default_kappa")]
    pub kappa_max: f64,
}

fn default_samples() -> usize {
    24
}

fn default_kappa() -> f64 {
    1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub metric: MetricSpec,
    #[serde(default)]
    pub sigma: Option<SigmaSpec>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    /// fine spacings for convergence studies, coarse to fine
    #[serde(default)]
    pub refine: Vec<f64>,
    #[serde(default)]
    pub recovery: Option<RecoveryParams>,
    #[serde(default = "scenario_shoot")]
    pub shoot: ShootOptions,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub verify: VerifyThresholds,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub invariants: Option<InvariantsConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn scenario_shoot() -> ShootOptions {
    ShootOptions { ode: GeodesicOptions { tol_ode: 1e-12, ..Default::default() }, tol_shoot: 1e-12, ..Default::default() }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{what} must be positive, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shoot;
        positive(s.tol_shoot, "tol_shoot")?;
        positive(s.ode.tol_ode, "tol_ode")?;
        positive(s.ode.h_min, "h_min")?;
        positive(s.min_det, "min_det")?;
        positive(self.truth.dr, "truth.dr")?;
        positive(self.truth.window, "truth.window")?;
        positive(self.verify.floor, "verify.floor")?;
        for r in &self.verify.rel {
            positive(*r, "verify.rel")?;
        }
        for h in &self.refine {
            positive(*h, "refine spacing")?;
        }
        if let Some(r) = &self.recovery {
            let t = &r.tol;
            for (v, w) in [
                (t.fit_tol, "fit_tol"),
                (t.angle_tol, "angle_tol"),
                (t.rad_tol, "rad_tol"),
                (t.ext_tol, "ext_tol"),
                (t.lam_min, "lam_min"),
                (t.lam_max, "lam_max"),
                (t.kappa, "kappa"),
            ] {
                positive(v, w)?;
            }
            if r.dir_reach < 1 {
                return Err(Error::InvalidParam("dir_reach must be ≥ 1".into()));
            }
        }
        if self.sigma.is_some() != self.grid.is_some() {
            return Err(Error::InvalidParam("sigma and grid must be given together".into()));
        }
        Ok(())
    }

    pub fn metric(&self) -> Result<MetricField> {
        metric_from_spec(&self.metric)
    }

    pub fn surface(&self, m: &MetricField) -> Result<Hypersurface> {
        let s = self.sigma.clone().ok_or_else(|| Error::InvalidParam("scenario has no sigma".into()))?;
        Hypersurface::new(m, s)
    }

    /// The grid, optionally with the fine spacing replaced by `h`.
    pub fn grid_spec(&self, h: Option<f64>) -> Result<GridSpec> {
        match self.grid.as_ref().ok_or_else(|| Error::InvalidParam("scenario has no grid".into()))? {
            GridConfig::Explicit(g) => {
                let mut g = g.clone();
                if let Some(h) = h {
                    g.spacing = vec![h; g.dim()];
                }
                Ok(g)
            }
            GridConfig::Composite { composite: c } => {
                let n = c.u0.len();
                let spacing = match h {
                    Some(h) => vec![h; n],
                    None => c.h.expand(n),
                };
                let fine = match c.fine {
                    FineShape::Cube => GridSpec::cube_around(&vec![0; n], c.half),
                    FineShape::Star => {
                        let reach = self.recovery.as_ref().map_or(2, |r| r.dir_reach);
                        let mut pts = vec![vec![0; n]];
                        for w in recovery::lattice_directions(n, reach) {
                            for k in 1..=3 {
                                pts.push(w.iter().map(|x| x * k).collect());
                                pts.push(w.iter().map(|x| -x * k).collect());
                            }
                        }
                        GridBlock::Points { indices: pts }
                    }
                };
                let mut blocks = vec![fine];
                blocks.extend(c.coarse.iter().cloned());
                Ok(GridSpec { origin: c.u0.clone(), spacing, blocks })
            }
        }
    }

    pub fn forward(&self, h: Option<f64>, policy: FailurePolicy) -> Result<MeasurementTable> {
        let m = self.metric()?;
        let s = self.surface(&m)?;
        build_table(&m, &s, &self.grid_spec(h)?, &self.shoot, policy)
    }

    pub fn recovery_params(&self) -> Result<&RecoveryParams> {
        self.recovery.as_ref().ok_or_else(|| Error::InvalidParam("scenario has no recovery block".into()))
    }

    pub fn recover(&self, t: &MeasurementTable) -> Result<JetReport> {
        recovery::assemble_jet(t, self.recovery_params()?)
    }

    /// Ground-truth jet `∂ᵣᵏg_ij(u₀)`, k = 0..=K, from the forward metric.
    pub fn truth_jet(&self, k: usize) -> Result<Vec<DMatrix<f64>>> {
        let m = self.metric()?;
        let s = self.surface(&m)?;
        let u0 = &self.recovery_params()?.u0;
        let w = self.truth.window;
        let window = ParamBox { lo: u0.iter().map(|v| v - w).collect(), hi: u0.iter().map(|v| v + w).collect() };
        let chart = FermiChart::new(&s, window, 0.1)?;
        if k == 0 {
            return Ok(vec![s.induced_metric(u0)?]);
        }
        let mut jet = hypersurface::fermi_jet_truth(&chart, u0, k, self.truth.dr)?;
        // the order-0 block straight from the embedding rather than through Ψ
        jet[0] = s.induced_metric(u0)?;
        Ok(jet)
    }

    pub fn probe(&self) -> Result<ProbeReport> {
        let p = self.probe.as_ref().ok_or_else(|| Error::InvalidParam("scenario has no probe block".into()))?;
        let m = self.metric()?;
        let s = self.surface(&m)?;
        let mut opts = ProbeOptions { working_box: p.working_box.clone(), ..Default::default() };
        if let Some(t) = p.t_max {
            opts.t_max = t;
        }
        hypersurface::convexity_probe(&s, &p.u0, &p.xi0, &p.r_list, p.neighborhood, &opts)
    }
}

/// Largest |table − closed form| over the given ordered pairs, for product
/// metrics whose factor distance is known; `None` for other metrics.
pub fn product_spot_check(cfg: &ScenarioConfig, t: &MeasurementTable, pairs: &[(usize, usize)]) -> Result<Option<f64>> {
    use crate::distance::{euclidean_factor_distance, product_closed_form, sphere_factor_distance};
    use crate::manifold::FactorSpec;
    let m = cfg.metric()?;
    if m.name() != "product" {
        return Ok(None);
    }
    let factor: FactorSpec = match m.params().get("factor") {
        Some(f) => serde_json::from_value(f.clone())?,
        None => FactorSpec::Euclidean { scale: 1.0 },
    };
    let dhat: Box<dyn Fn(&[f64], &[f64]) -> f64> = match factor {
        FactorSpec::Euclidean { scale } => Box::new(euclidean_factor_distance(scale)),
        FactorSpec::Sphere { radius } => Box::new(sphere_factor_distance(radius)),
    };
    let s = cfg.surface(&m)?;
    let mut worst = 0.0f64;
    for &(i, j) in pairs {
        let (a, b) = (s.embed(&t.grid[i])?, s.embed(&t.grid[j])?);
        let want = product_closed_form(&dhat, a[0], b[0], &a[1..], &b[1..]);
        worst = worst.max((t.value(i, j) - want).abs());
    }
    Ok(Some(worst))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryError {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub recovered: f64,
    pub truth: f64,
    /// relative error, or absolute error over the order's scale below the floor
    pub error: f64,
    pub relative: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderComparison {
    pub k: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub orders: Vec<OrderComparison>,
    pub entries: Vec<EntryError>,
    pub pass: bool,
}

/// Per-entry comparison of a recovered jet with the truth. Entries with
/// |truth| ≥ floor use relative error; smaller ones use absolute error
/// scaled by max(floor, max|truth| of that order).
pub fn compare_jet(report: &JetReport, truth: &[DMatrix<f64>], th: &VerifyThresholds) -> Result<VerifyReport> {
    let mut mats = vec![&report.tangential];
    mats.extend(report.normal_derivs.iter());
    if truth.len() < mats.len() {
        return Err(Error::InvalidParam("truth jet shorter than the report".into()));
    }
    let mut orders = Vec::new();
    let mut entries = Vec::new();
    for (k, rec) in mats.iter().enumerate() {
        let tr = &truth[k];
        let scale = tr.amax().max(th.floor);
        let tol = *th.rel.get(k).or(th.rel.last()).unwrap_or(&1e-1);
        let mut max_error = 0.0f64;
        for i in 0..tr.nrows() {
            for j in i..tr.ncols() {
                let (r, t) = (rec[i][j], tr[(i, j)]);
                let relative = t.abs() >= th.floor;
                let error = if relative { (r - t).abs() / t.abs() } else { (r - t).abs() / scale };
                max_error = max_error.max(error);
                entries.push(EntryError { k, i, j, recovered: r, truth: t, error, relative });
            }
        }
        orders.push(OrderComparison { k, tolerance: tol, max_error, pass: max_error <= tol });
    }
    let pass = orders.iter().all(|o| o.pass);
    Ok(VerifyReport { orders, entries, pass })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantsReport {
    pub metric: String,
    /// (r, Kretschmann)
    pub samples: Vec<(f64, f64)>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub max_ricci: f64,
    pub max_kretschmann: f64,
    pub rays: Vec<std::result::Result<Completeness, String>>,
}

/// Ordinary least-squares line through (x, y).
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn invariants(cfg: &ScenarioConfig) -> Result<InvariantsReport> {
    let inv = cfg.invariants.clone().ok_or_else(|| Error::InvalidParam("scenario has no invariants block".into()))?;
    let m = cfg.metric()?;
    let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
    if let Some((lo, hi)) = inv.r_range {
        if m.name() != "schwarzschild-kruskal" {
            return Err(Error::InvalidParam("r_range sampling needs the Kruskal metric".into()));
        }
        let rr: f64 = serde_json::from_value(m.params().get("R").cloned().unwrap_or(1.0.into())).unwrap_or(1.0);
        for s in 0..inv.samples {
            let rho = (lo.ln() + (hi.ln() - lo.ln()) * s as f64 / (inv.samples - 1).max(1) as f64).exp();
            // V = 0: U² = (ρ − 1)e^ρ
            let u = ((rho - 1.0) * rho.exp()).sqrt();
            debug_assert!((kruskal_rho(-u * u) - rho).abs() < 1e-9);
            pts.push((rho * rr, vec![0.0, u, std::f64::consts::FRAC_PI_2, 0.0]));
        }
    } else if let Some(r) = inv.rays.first() {
        for s in 0..inv.samples {
            let t = r.t_max * s as f64 / (inv.samples - 1).max(1) as f64;
            let (x, _) = geodesic::flow(&m, &r.x, &r.v, t, &cfg.shoot.ode)?;
            pts.push((t, x));
        }
    }
    let mut samples = Vec::new();
    let mut max_ricci = 0.0f64;
    let mut max_k = 0.0f64;
    for (r, x) in &pts {
        let c = m.curvature_at(&m.point(x.clone()))?;
        max_ricci = max_ricci.max(c.ricci_max);
        max_k = max_k.max(c.kretschmann.abs());
        samples.push((*r, c.kretschmann));
    }
    let (slope, intercept) = if inv.r_range.is_some() && samples.iter().all(|s| s.1 > 0.0) {
        let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
        let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
        let (a, b) = fit_line(&lx, &ly);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let rays = inv
        .rays
        .iter()
        .map(|r| geodesic::completeness_probe(&m, &r.x, &r.v, r.t_max, inv.kappa_max, &cfg.shoot.ode).map_err(|e| e.to_string()))
        .collect();
    Ok(InvariantsReport { metric: m.name().to_string(), samples, slope, intercept, max_ricci, max_kretschmann: max_k, rays })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_grid_and_validation() {
        let cfg = ScenarioConfig::from_json(
            r#"{"name": "t", "metric": {"name": "minkowski", "params": {"dim": 3}},
                "sigma": {"kind": "plane", "dim": 3},
                "grid": {"composite": {"u0": [0.0, 0.0], "h": 0.02, "half": 2,
                          "coarse": [{"kind": "physical", "lo": [-0.24, 0.0], "hi": [-0.12, 0.0], "step": [0.12, 0.12]}]}},
                "recovery": {"u0": [0.0, 0.0]}}"#,
        )
        .unwrap();
        let g = cfg.grid_spec(None).unwrap();
        assert_eq!(g.indices().unwrap().len(), 25 + 2);
        let g4 = cfg.grid_spec(Some(0.04)).unwrap();
        assert!(g4.indices().unwrap().contains(&vec![-6, 0]));
        let bad = r#"{"name": "t", "metric": {"name": "minkowski"}, "shoot": {"ode": {"tol_ode": -1, "h_min": 1e-12, "max_steps": 10}, "tol_shoot": 1e-10, "n_max": 5, "min_det": 1e-6}}"#;
        assert!(matches!(ScenarioConfig::from_json(bad), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn line_fit() {
        let x = [1.0, 2.0, 3.0];
        let y = [-6.0 * 1.0 + 2.0, -6.0 * 2.0 + 2.0, -6.0 * 3.0 + 2.0];
        let (a, b) = fit_line(&x, &y);
        assert!((a + 6.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }
}
