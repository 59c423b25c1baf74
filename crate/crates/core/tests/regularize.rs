//! Smoothed fans and their ε → 0 limit.

use std::path::Path;

use proptest::prelude::*;

use tunnelshock::characteristics::DX;
use tunnelshock::cli::Scenario;
use tunnelshock::manifold::first_singularity;
use tunnelshock::regularize::{
    blended_after_surgery, blended_fan, limit_study, plateau_speed, surgery, surgery_fan, LimitConfig,
    RegularizationParams,
};
use tunnelshock::symbol::SymbolModel;

fn preset(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.ini"));
    Scenario::from_file(&path).unwrap()
}

const SCHEDULE: [f64; 3] = [1e-2, 2.5e-3, 6.25e-4];

proptest! {
    #[test]
    fn plateau_speed_is_the_jump_quotient(p_l in -2.0f64..2.0, dp in 0.1f64..2.0) {
        let p_r = p_l - dp;
        let b = plateau_speed(&SymbolModel::burgers(), (0.0, p_l), (0.0, p_r), 0.0).unwrap();
        prop_assert!((b.c - (p_l + p_r) / 2.0).abs() <= 1e-12);
        let j = plateau_speed(&SymbolModel::pure_jump(1.0, 1.0), (0.0, p_l), (0.0, p_r), 0.0).unwrap();
        prop_assert!((j.c - (p_l.exp() - p_r.exp()) / dp).abs() <= 1e-12 * (1.0 + j.c.abs()));
        // the quotient lies strictly between the one-sided speeds
        prop_assert!(p_r.exp() < j.c && j.c < p_l.exp());
    }
}

#[test]
fn blended_fans_never_cross() {
    let sc = preset("tanh");
    let plain = sc.fan().unwrap();
    for eps in SCHEDULE {
        let reg = blended_fan(&plain, &sc.init(), sc.a_field.clone(), &RegularizationParams::new(eps), 101).unwrap();
        reg.check_order().unwrap();
        let ratio = reg.min_core_j(reg.t_star) / eps;
        assert!((0.5 * (1.0 - 1e-6)..=10.0).contains(&ratio), "eps = {eps}: min J / eps = {ratio}");
    }
}

#[test]
fn rarefaction_limit_is_the_plain_fan() {
    let sc = preset("rarefaction");
    let gd = sc.density().unwrap();
    let cfg = LimitConfig { r_times: vec![0.5, 1.0, 2.0], e_times: vec![1.0, 2.0], ..LimitConfig::default() };
    let rep = limit_study(&gd, &sc.init(), &cfg).unwrap();
    assert_eq!(rep.rows.len(), SCHEDULE.len());
    for r in &rep.rows {
        assert!(r.r_error <= 1e-8, "eps = {}: {:.2e}", r.epsilon, r.r_error);
        assert!(r.e.iter().all(|q| q.1 == 0.0 && q.2 == 0.0));
    }
}

#[test]
fn riemann_plateau_mass_tends_to_two_t() {
    let sc = preset("riemann");
    let gd = sc.density().unwrap();
    let cfg = LimitConfig { r_times: vec![0.5, 1.0], e_times: vec![0.5, 1.0, 1.5], ..LimitConfig::default() };
    let rep = limit_study(&gd, &sc.init(), &cfg).unwrap();
    for t in [0.5, 1.0, 1.5] {
        let errs: Vec<f64> = rep.rows.iter().map(|r| {
            let q = r.e.iter().find(|q| (q.0 - t).abs() < 1e-12).unwrap();
            (q.1 - 2.0 * t).abs()
        }).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "t = {t}: {errs:?}");
        assert!(errs[2] <= 1e-2 * 2.0 * t, "t = {t}: {errs:?}");
    }
}

#[test]
fn surgery_gap_scales_with_beta() {
    let sc = preset("cosine");
    let plain = sc.fan().unwrap();
    let seed = first_singularity(&plain).unwrap();
    for beta in [0.1, 0.05, 0.025] {
        let cut = surgery(&plain, seed, beta, sc.t1, 40).unwrap();
        let ratio = (cut.a2 - cut.a1).abs() / beta;
        assert!((0.1..=10.0).contains(&ratio), "beta = {beta}: ratio {ratio}");
        // the rebuilt fan is regular until the segment collapses
        let n = ((cut.t_cut - cut.t_start) / 0.01).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| cut.t_start + k as f64 * 0.01).collect();
        let fan = surgery_fan(&plain, &cut, sc.a_field.clone(), times).unwrap();
        for row in &fan.rows {
            for (k, y) in row.iter().enumerate().take(n) {
                assert!(y[DX] > 0.0, "beta = {beta}: J = {} at t = {}", y[DX], fan.times[k]);
            }
        }
    }
}

#[test]
fn blending_after_surgery_keeps_j_of_order_epsilon() {
    let sc = preset("cosine");
    let plain = sc.fan().unwrap();
    let seed = first_singularity(&plain).unwrap();
    let mut params = RegularizationParams::new(1e-2);
    params.t1 = sc.t1;
    let cut = surgery(&plain, seed, params.beta, params.t1, 40).unwrap();
    let n = ((sc.t_end - cut.t_start) / 0.01).round() as usize;
    let times: Vec<f64> = (0..=n).map(|k| cut.t_start + k as f64 * 0.01).collect();
    let reg = blended_after_surgery(&plain, &cut, sc.a_field.clone(), &params, times).unwrap();
    reg.check_order().unwrap();
    let ratio = reg.min_core_j(cut.t_cut) / params.epsilon;
    assert!((0.5 * (1.0 - 1e-6)..=10.0).contains(&ratio), "min J / eps = {ratio}");
}
