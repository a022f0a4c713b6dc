//! The measurement dataset: sampled time separations on Σ×Σ over a lattice of
//! Σ-parameters, and its on-disk form.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distance;
use crate::error::{Error, Result};
use crate::geodesic::{self, ShootOptions, ShootState};
use crate::hypersurface::{Hypersurface, SigmaSpec};
use crate::manifold::{CausalCharacter, MetricField, MetricSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// A block of lattice nodes. `Lattice` is given in integer indices;
/// `Physical` in Σ-parameter units and must fall on the lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridBlock {
    Lattice {
        lo: Vec<i64>,
        hi: Vec<i64>,
        #[serde(default)]
        stride: Option<Vec<i64>>,
    },
    Physical { lo: Vec<f64>, hi: Vec<f64>, step: Vec<f64> },
    Points { indices: Vec<Vec<i64>> },
}

/// Nodes are `origin + spacing ∘ index` for the union of the blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub blocks: Vec<GridBlock>,
}

fn snap(v: f64, what: &str) -> Result<i64> {
    let r = v.round();
    if (v - r).abs() > 1e-6 {
        return Err(Error::InvalidParam(format!("{what} = {v} is not on the lattice")));
    }
    Ok(r as i64)
}

fn box_nodes(lo: &[i64], hi: &[i64], stride: &[i64], out: &mut BTreeSet<Vec<i64>>) {
    let n = lo.len();
    let mut cur = lo.to_vec();
    loop {
        out.insert(cur.clone());
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            cur[k] += stride[k];
            if cur[k] <= hi[k] {
                break;
            }
            cur[k] = lo[k];
        }
    }
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// Cubic block of half-width `half` (in lattice steps) around index `c`.
    pub fn cube_around(c: &[i64], half: i64) -> GridBlock {
        GridBlock::Lattice { lo: c.iter().map(|v| v - half).collect(), hi: c.iter().map(|v| v + half).collect(), stride: None }
    }

    /// Sorted, deduplicated lattice indices of all nodes.
    pub fn indices(&self) -> Result<Vec<Vec<i64>>> {
        let n = self.dim();
        if self.spacing.len() != n || self.spacing.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidParam("grid spacing must be positive, one per axis".into()));
        }
        let mut set = BTreeSet::new();
        for b in &self.blocks {
            match b {
                GridBlock::Lattice { lo, hi, stride } => {
                    let st = stride.clone().unwrap_or_else(|| vec![1; n]);
                    if lo.len() != n || hi.len() != n || st.len() != n || st.iter().any(|s| *s < 1) {
                        return Err(Error::InvalidParam("lattice block shape mismatch".into()));
                    }
                    box_nodes(lo, hi, &st, &mut set);
                }
                GridBlock::Physical { lo, hi, step } => {
                    if lo.len() != n || hi.len() != n || step.len() != n {
                        return Err(Error::InvalidParam("physical block shape mismatch".into()));
                    }
                    let mut l = vec![0; n];
                    let mut h = vec![0; n];
                    let mut s = vec![0; n];
                    for k in 0..n {
                        l[k] = snap((lo[k] - self.origin[k]) / self.spacing[k], "block lo")?;
                        h[k] = snap((hi[k] - self.origin[k]) / self.spacing[k], "block hi")?;
                        s[k] = snap(step[k] / self.spacing[k], "block step")?.max(1);
                    }
                    box_nodes(&l, &h, &s, &mut set);
                }
                GridBlock::Points { indices } => {
                    for p in indices {
                        if p.len() != n {
                            return Err(Error::InvalidParam("point index length mismatch".into()));
                        }
                        set.insert(p.clone());
                    }
                }
            }
        }
        if set.is_empty() {
            return Err(Error::InvalidParam("empty grid".into()));
        }
        Ok(set.into_iter().collect())
    }

    pub fn coords(&self, idx: &[i64]) -> Vec<f64> {
        idx.iter().enumerate().map(|(k, i)| self.origin[k] + self.spacing[k] * *i as f64).collect()
    }

    pub fn index_of(&self, u: &[f64]) -> Result<Vec<i64>> {
        u.iter().enumerate().map(|(k, v)| snap((v - self.origin[k]) / self.spacing[k], "node")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaDescriptor {
    pub sigma: SigmaSpec,
    pub grid: GridSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Decimal,
    Hex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    /// generating metric; `None` once blinded
    pub metric: Option<MetricSpec>,
    pub blinded: bool,
    pub tolerances: ShootOptions,
    pub version: String,
    #[serde(default)]
    pub encoding: Encoding,
    /// pairs whose shooting failed and were stored as 0 (skip mode only)
    #[serde(default)]
    pub failed_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTable {
    pub schema_version: u32,
    pub sigma_spec: SigmaDescriptor,
    pub grid: Vec<Vec<f64>>,
    /// row-major over ordered pairs: `values[i·N + j] = d(σ(u_i), σ(u_j))`
    pub values: Vec<f64>,
    pub meta: TableMeta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FailurePolicy {
    #[default]
    Abort,
    Skip,
}

/// Fill d for every ordered pair. One shooting per unordered pair: the
/// geodesic from x to y also gives d(y, x) because the time orientation of
/// γ̇ is preserved along γ and (γ̇, γ̇) is constant. Rows run in parallel;
/// inside a row each solve is warm-started from its predecessor, so the
/// result does not depend on the thread count.
pub fn build_table(
    m: &MetricField,
    s: &Hypersurface,
    grid: &GridSpec,
    opts: &ShootOptions,
    policy: FailurePolicy,
) -> Result<MeasurementTable> {
    if grid.dim() != s.param_dim() {
        return Err(Error::InvalidParam("grid and Σ parameter dimensions differ".into()));
    }
    let idx = grid.indices()?;
    let us: Vec<Vec<f64>> = idx.iter().map(|i| grid.coords(i)).collect();
    for u in &us {
        if !s.param_domain.contains(u) {
            return Err(Error::InvalidParam(format!("grid node {u:?} outside the Σ parameter domain")));
        }
    }
    let xs: Vec<Vec<f64>> = us.par_iter().map(|u| s.embed(u)).collect::<Result<_>>()?;
    let n = xs.len();
    let rows: Vec<Result<(Vec<(usize, f64, f64)>, Vec<(usize, usize)>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(n - i);
            let mut failed = Vec::new();
            let mut warm: Option<ShootState> = None;
            for j in i + 1..n {
                match geodesic::log_map_raw(m, &xs[i], &xs[j], warm.as_ref(), opts)
                    .or_else(|e| if warm.is_some() { geodesic::log_map_raw(m, &xs[i], &xs[j], None, opts) } else { Err(e) })
                    .or_else(|_| geodesic::log_map_continued(m, &xs[i], &xs[j], opts))
                {
                    Ok((v, _, _, jac)) => {
                        let speed = distance::separation_from_velocity(m, &xs[i], &v);
                        let back = match m.causal_character_at(&xs[i], &v) {
                            CausalCharacter::TimelikePast => (-m.inner_at(&xs[i], &v, &v)).sqrt(),
                            _ => 0.0,
                        };
                        out.push((j, speed, back));
                        warm = Some(ShootState { target: xs[j].clone(), velocity: v, jac });
                    }
                    Err(e) => match policy {
                        FailurePolicy::Abort => return Err(Error::PairFailure { i, j, source: Box::new(e) }),
                        FailurePolicy::Skip => {
                            failed.push((i, j));
                            out.push((j, 0.0, 0.0));
                            warm = None;
                        }
                    },
                }
            }
            Ok((out, failed))
        })
        .collect();
    let mut values = vec![0.0; n * n];
    let mut failed_pairs = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        let (row, failed) = row?;
        for (j, fwd, back) in row {
            values[i * n + j] = fwd;
            values[j * n + i] = back;
        }
        failed_pairs.extend(failed);
    }
    Ok(MeasurementTable {
        schema_version: SCHEMA_VERSION,
        sigma_spec: SigmaDescriptor { sigma: s.spec.clone(), grid: grid.clone() },
        grid: us,
        values,
        meta: TableMeta {
            metric: Some(MetricSpec { name: m.name().to_string(), params: m.params().clone() }),
            blinded: false,
            tolerances: *opts,
            version: env!("CARGO_PKG_VERSION").to_string(),
            encoding: Encoding::Decimal,
            failed_pairs,
        },
    })
}

impl MeasurementTable {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.len() + j]
    }

    /// Strip the generating metric.
    pub fn blind(&self) -> MeasurementTable {
        let mut t = self.clone();
        t.meta.metric = None;
        t.meta.blinded = true;
        t
    }

    /// Structural checks: zero diagonal, chronology antisymmetry, finite ≥ 0.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if self.values.len() != n * n {
            return Err(Error::Corrupt(format!("{} values for {n} nodes", self.values.len())));
        }
        for i in 0..n {
            if self.value(i, i) != 0.0 {
                return Err(Error::Corrupt(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = self.value(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Corrupt(format!("bad value {v} at ({i},{j})")));
                }
                if v > 0.0 && self.value(j, i) > 0.0 {
                    return Err(Error::Corrupt(format!("both ({i},{j}) and ({j},{i}) chronological")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if self.meta.encoding == Encoding::Hex {
            v["values"] = Value::Array(self.values.iter().map(|x| Value::String(format!("{:016x}", x.to_bits()))).collect());
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn from_json(text: &str) -> Result<MeasurementTable> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        let found = v.get("schema_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch { expected: SCHEMA_VERSION, found });
        }
        let hex = v.pointer("/meta/encoding").and_then(Value::as_str) == Some("hex");
        if hex {
            let vals = v["values"].as_array().ok_or_else(|| Error::Corrupt("values must be an array".into()))?;
            let nums: Result<Vec<Value>> = vals
                .iter()
                .map(|s| {
                    let s = s.as_str().ok_or_else(|| Error::Corrupt("hex value must be a string".into()))?;
                    let bits = u64::from_str_radix(s, 16).map_err(|e| Error::Corrupt(e.to_string()))?;
                    serde_json::Number::from_f64(f64::from_bits(bits))
                        .map(Value::Number)
                        .ok_or_else(|| Error::Corrupt("non-finite value".into()))
                })
                .collect();
            v["values"] = Value::Array(nums?);
        }
        let t: MeasurementTable = serde_json::from_value(v).map_err(|e| Error::Corrupt(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MeasurementTable> {
        MeasurementTable::from_json(&std::fs::read_to_string(path)?)
    }

    /// Index-addressed view for the recovery stage.
    pub fn view(&self) -> Result<TableView<'_>> {
        let g = &self.sigma_spec.grid;
        let mut index = HashMap::with_capacity(self.grid.len());
        for (k, u) in self.grid.iter().enumerate() {
            index.insert(g.index_of(u)?, k);
        }
        Ok(TableView { table: self, index })
    }
}

pub struct TableView<'a> {
    pub table: &'a MeasurementTable,
    index: HashMap<Vec<i64>, usize>,
}

impl TableView<'_> {
    pub fn node(&self, idx: &[i64]) -> Option<usize> {
        self.index.get(idx).copied()
    }

    /// `d(σ(a), σ(b))` by lattice index, `None` if either node is absent.
    pub fn d(&self, a: &[i64], b: &[i64]) -> Option<f64> {
        Some(self.table.value(self.node(a)?, self.node(b)?))
    }

    pub fn spacing(&self) -> &[f64] {
        &self.table.sigma_spec.grid.spacing
    }

    pub fn indices(&self) -> impl Iterator<Item = (&Vec<i64>, &usize)> {
        self.index.iter()
    }
}
