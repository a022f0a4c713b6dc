//! Shared samplers over the metric catalog.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tsep_core::manifold::{catalog_metric, MetricField};

pub struct Sample {
    pub name: &'static str,
    pub m: MetricField,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// proper-time range of the connecting geodesic
    pub tau: (f64, f64),
}

pub fn catalog() -> Vec<Sample> {
    let m = |n: &str, p| catalog_metric(n, &p).unwrap();
    vec![
        Sample { name: "minkowski", m: m("minkowski", json!({"dim": 4})), lo: vec![-1.0; 4], hi: vec![1.0; 4], tau: (0.1, 1.0) },
        Sample { name: "torus-minkowski", m: m("torus-minkowski", json!({"dim": 4})), lo: vec![0.3; 4], hi: vec![0.5; 4], tau: (0.05, 0.2) },
        Sample {
            name: "product/euclidean",
            m: m("product", json!({"dim": 4, "factor": {"kind": "euclidean", "scale": 2.0}})),
            lo: vec![-1.0; 4],
            hi: vec![1.0; 4],
            tau: (0.1, 1.0),
        },
        Sample {
            name: "product/sphere",
            m: m("product", json!({"dim": 4, "factor": {"kind": "sphere", "radius": 1.0}})),
            lo: vec![-0.5; 4],
            hi: vec![0.5; 4],
            tau: (0.1, 0.8),
        },
        Sample {
            name: "schwarzschild-kruskal",
            m: m("schwarzschild-kruskal", json!({"R": 1.0})),
            lo: vec![-0.3, 1.2, 1.0, -1.0],
            hi: vec![0.3, 2.0, 2.0, 1.0],
            tau: (0.1, 0.6),
        },
        Sample {
            name: "perturbed",
            m: m("perturbed", json!({"base": {"name": "minkowski", "params": {"dim": 4}}, "amplitude": 0.1, "center": [0.0, 0.0, 0.0, 0.0], "radius": 0.6})),
            lo: vec![-0.6, -0.3, -0.3, -0.3],
            hi: vec![-0.2, 0.3, 0.3, 0.3],
            tau: (0.2, 0.8),
        },
    ]
}

/// A random point and a future timelike vector of proper length τ, built in
/// the orthonormal frame of the (diagonal) catalog metrics.
pub fn draw(s: &Sample, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let x: Vec<f64> = s.lo.iter().zip(&s.hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
    let g = s.m.g_at(&x);
    let n = x.len();
    let tau = rng.gen_range(s.tau.0..s.tau.1);
    let c: Vec<f64> = (1..n).map(|_| rng.gen_range(-1.0..1.0) * tau).collect();
    let c0 = (tau * tau + c.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let mut v = vec![c0 / (-g[0][0]).sqrt()];
    v.extend(c.iter().enumerate().map(|(k, ck)| ck / g[k + 1][k + 1].sqrt()));
    (x, v, tau)
}

