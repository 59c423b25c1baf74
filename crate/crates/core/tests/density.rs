//! Generalized densities: Cauchy formula, shock amplitudes and mass.

use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;

use tunnelshock::characteristics::{time_grid, AField, Fan, FanConfig, InitialData};
use tunnelshock::cli::Scenario;
use tunnelshock::density::{transport_r, GeneralizedDensity};
use tunnelshock::expr::parse;
use tunnelshock::manifold::{slice_index, track_shocks};
use tunnelshock::numerics::linspace;
use tunnelshock::symbol::{Coef, SymbolModel};

fn preset(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.ini"));
    Scenario::from_file(&path).unwrap()
}

fn riemann(u_l: f64, u_r: f64) -> GeneralizedDensity {
    let (a, b) = ((u_l + u_r) / 2.0, (u_l - u_r) / 2.0);
    let init = InitialData::new(
        parse(&format!("{a}*x + {b}*0.05*log(sech(x/0.05))")).unwrap(),
        Some(parse(&format!("{a} - {b}*tanh(x/0.05)")).unwrap()),
    );
    let fan = Fan::hamiltonian(
        Arc::new(SymbolModel::burgers()),
        &init,
        AField::Auto,
        linspace(-4.0 + a.min(0.0), 4.0 + a.max(0.0), 2801),
        time_grid(1.0, 0.01).unwrap(),
        FanConfig::default(),
    )
    .unwrap();
    let fan = Arc::new(fan);
    let shocks = track_shocks(&fan).unwrap();
    let mut gd = transport_r(fan, parse("1").unwrap(), AField::Auto);
    gd.evolve_amplitudes(shocks).unwrap();
    gd
}

#[test]
fn mass_is_conserved_on_presets() {
    for name in ["tanh", "jump", "cosine", "riemann", "merge", "rarefaction"] {
        let gd = preset(name).density().unwrap();
        let m0 = gd.mass(0).unwrap().total();
        let drift = (0..gd.fan.times.len())
            .map(|k| (gd.mass(k).unwrap().total() - m0).abs() / m0)
            .fold(0.0, f64::max);
        assert!(drift <= 1e-5, "{name}: relative drift {drift:.2e}");
    }
}

#[test]
fn amplitudes_grow_under_symmetric_inflow() {
    let gd = preset("tanh").density().unwrap();
    let sh = &gd.shocks[0];
    assert!(sh.path.iter().all(|q| q.e >= 0.0));
    assert!(sh.path.windows(2).all(|w| w[1].e >= w[0].e - 1e-12));
}

#[test]
fn smooth_density_is_positive() {
    for name in ["tanh", "cosine", "jump"] {
        let gd = preset(name).density().unwrap();
        for k in (0..gd.fan.times.len()).step_by(25) {
            for (i, row) in gd.fan.rows.iter().enumerate() {
                if row[k][0].is_finite() {
                    assert!(gd.r_row(i, k).unwrap() >= 0.0, "{name}: negative R");
                }
            }
        }
    }
}

#[test]
fn amplitude_transport_residual_vanishes() {
    // φ = √R solves φ_t + u φ_x + u_x φ / 2 = 0 for P = p²/2 + 0.1 x²
    let m = SymbolModel::new(Coef::Const(0.5), Coef::parse("0.1*x^2").unwrap(), vec![], false).unwrap();
    let init = InitialData::new(parse("x^2/2").unwrap(), Some(parse("x").unwrap()));
    let fan = Fan::hamiltonian(
        Arc::new(m),
        &init,
        AField::Auto,
        linspace(-6.0, 6.0, 2401),
        time_grid(1.0, 0.005).unwrap(),
        FanConfig::default(),
    )
    .unwrap();
    let fan = Arc::new(fan);
    let gd = transport_r(fan.clone(), parse("sech(x)^2").unwrap(), AField::Auto);
    let ht = 0.005;
    let hx = 1e-3;
    let phi_u = |k: usize, x: f64| {
        let curve = slice_index(&fan, k);
        let pt = curve.essential_at(x).unwrap();
        (gd.r_point(&pt).unwrap().sqrt(), pt.p)
    };
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for t in [0.25, 0.5, 0.75] {
        let k = fan.time_index(t).unwrap();
        for x in linspace(-1.0, 1.0, 21) {
            let (phi, u) = phi_u(k, x);
            let phi_t = (phi_u(k + 1, x).0 - phi_u(k - 1, x).0) / (2.0 * ht);
            let (pp, up) = phi_u(k, x + hx);
            let (pm, um) = phi_u(k, x - hx);
            let res = phi_t + u * (pp - pm) / (2.0 * hx) + 0.5 * (up - um) / (2.0 * hx) * phi;
            worst = worst.max(res.abs());
            scale = scale.max(phi);
        }
    }
    assert!(worst <= 1e-4 * scale, "residual {worst:.2e} against max φ {scale:.3}");
}

#[test]
fn amplitude_rate_is_the_outer_flux_deficit() {
    let gd = riemann(1.0, -1.0);
    let sh = &gd.shocks[0];
    let q = sh.path.iter().find(|q| q.t >= 0.5).unwrap();
    let rate = q.r_l * (q.u_l - q.c_rh) - q.r_r * (q.u_r - q.c_rh);
    assert!((rate - 2.0).abs() <= 1e-2, "rate {rate}");
    let h = 0.1;
    let de = (sh.amplitude(q.t + h).unwrap() - sh.amplitude(q.t - h).unwrap()) / (2.0 * h);
    assert!((de - rate).abs() <= 1e-2, "de/dt {de} vs {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn riemann_amplitude_is_the_flux_deficit(u_l in 0.2f64..2.0, gap in 0.5f64..2.0) {
        let u_r = u_l - gap;
        let gd = riemann(u_l, u_r);
        prop_assert!(!gd.shocks.is_empty());
        let sh = &gd.shocks[0];
        let c = sh.speed(1.0).unwrap();
        prop_assert!((c - (u_l + u_r) / 2.0).abs() <= 2e-3, "c = {} for {} / {}", c, u_l, u_r);
        let e = sh.amplitude(1.0).unwrap();
        prop_assert!((e - gap).abs() <= 1e-2 * gap, "e(1) = {} for gap {}", e, gap);
    }
}
