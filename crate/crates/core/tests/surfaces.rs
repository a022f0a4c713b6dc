use serde_json::json;

use tsep_core::geodesic::{hit_hypersurface, GeodesicOptions};
use tsep_core::hypersurface::{
    cone_sigma, fermi_forward, fermi_inverse, metric_in_fermi, FermiChart, Hypersurface, ParamBox, SurfaceProbe,
};
use tsep_core::manifold::catalog_metric;

fn sphere_slab() -> Hypersurface {
    let m = catalog_metric("product", &json!({"dim": 3, "factor": {"kind": "sphere", "radius": 1.0}})).unwrap();
    Hypersurface::new(&m, serde_json::from_value(json!({"kind": "slab", "dim": 3, "center": [0.0, 0.0], "radius": 0.5})).unwrap())
        .unwrap()
}

fn window(c: &[f64], w: f64) -> ParamBox {
    ParamBox { lo: c.iter().map(|v| v - w).collect(), hi: c.iter().map(|v| v + w).collect() }
}

#[test]
fn fermi_chart_inverts_and_is_gaussian() {
    let s = sphere_slab();
    let chart = FermiChart::new(&s, window(&[0.0, 0.0], 0.3), 0.1).unwrap();
    let alpha = 2.0 * 0.25f64.atan();
    for (u, r) in [([0.0, 0.0], 0.0), ([0.1, -0.2], 0.05), ([-0.2, 0.25], -0.07), ([0.15, 0.1], 0.09)] {
        let p = fermi_forward(&chart, &u, r).unwrap();
        let (ub, rb) = fermi_inverse(&chart, &p, None).unwrap();
        assert!((rb - r).abs() < 1e-8 && ub.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-8), "{u:?} {r}");
        let fm = metric_in_fermi(&chart, &u, r).unwrap();
        assert!((fm.g_rr_residual).abs() < 1e-6 && fm.g_ri_residual.iter().all(|v| v.abs() < 1e-6));
        // parallel circles of the round sphere: g_θθ = sin²(α − r)
        assert!((fm.g[(1, 1)] - (alpha - r).sin().powi(2)).abs() < 1e-6);
        assert!((fm.g[(0, 0)] + 1.0).abs() < 1e-6 && fm.g[(0, 1)].abs() < 1e-6);
    }
}

#[test]
fn induced_metric_is_lorentzian_on_the_slab() {
    let s = sphere_slab();
    for t in [-1.0, 0.0, 0.7] {
        for th in [-3.0, -1.0, 0.0, 2.0] {
            let q = s.induced_metric(&[t, th]).unwrap();
            assert!(q[(0, 0)] < 0.0 && q[(0, 0)] * q[(1, 1)] - q[(0, 1)].powi(2) < 0.0);
        }
    }
}

#[test]
fn spacelike_sigma_is_rejected() {
    let m = catalog_metric("minkowski", &json!({"dim": 3})).unwrap();
    let spec = serde_json::from_value(json!({"kind": "plane", "dim": 3, "axis": 0, "offset": 0.0})).unwrap();
    assert!(Hypersurface::new(&m, spec).is_err());
}

#[test]
fn tilted_cone_geodesic_returns_where_the_line_meets_the_cone() {
    let m = catalog_metric("minkowski", &json!({"dim": 3})).unwrap();
    let s = cone_sigma(&m, &[0.0; 3], &[1.0, 0.0, 0.0], 0.6, 1.0).unwrap();
    let probe = SurfaceProbe::new(&s).unwrap();
    let opts = GeodesicOptions { tol_ode: 1e-12, ..Default::default() };
    for (u, r) in [([0.5, 0.0], 0.05), ([0.6, 1.0], 0.1), ([0.4, -2.0], 0.02)] {
        let x = s.embed(&u).unwrap();
        let nu = s.normal(&u).unwrap().components;
        // tangent: down the generator towards the tip, tilted inward
        let t = s.push_forward(&u, &[-1.0, 0.0]).unwrap();
        let v: Vec<f64> = t.iter().zip(&nu).map(|(a, b)| a + r * b).collect();
        let hit = hit_hypersurface(&m, &x, &v, 10.0, &probe, 1e-10, &opts).unwrap().expect("returns to the cone");
        // straight line x + sv against |z| = c₀·t: a quadratic in s
        let qa = v[1] * v[1] + v[2] * v[2] - 0.36 * v[0] * v[0];
        let qb = 2.0 * (x[1] * v[1] + x[2] * v[2] - 0.36 * x[0] * v[0]);
        let s_root = -qb / qa;
        assert!((hit.t0 - s_root).abs() < 1e-8, "{} vs {s_root}", hit.t0);
    }
}

#[test]
fn outward_geodesic_never_returns_to_a_plane() {
    let m = catalog_metric("minkowski", &json!({"dim": 4})).unwrap();
    let s = Hypersurface::new(&m, serde_json::from_value(json!({"kind": "plane", "dim": 4, "axis": 1, "offset": 0.0})).unwrap()).unwrap();
    let probe = SurfaceProbe::new(&s).unwrap();
    let x = [0.0, -1.0, 0.0, 0.0];
    let towards = hit_hypersurface(&m, &x, &[2.0, 1.0, 0.0, 0.0], 5.0, &probe, 1e-10, &GeodesicOptions::default()).unwrap().unwrap();
    assert!((towards.t0 - 1.0).abs() < 1e-9 && (towards.point[0] - 2.0).abs() < 1e-9);
    let away = hit_hypersurface(&m, &x, &[2.0, -1.0, 0.0, 0.0], 5.0, &probe, 1e-10, &GeodesicOptions::default()).unwrap();
    assert!(away.is_none());
}
