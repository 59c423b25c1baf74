//! Characteristics, Lagrangian slices and shock tracking on whole fans.

use std::sync::Arc;

use proptest::prelude::*;

use tunnelshock::characteristics::{time_grid, AField, Fan, FanConfig, InitialData, StepControl, P, S, X};
use tunnelshock::expr::parse;
use tunnelshock::manifold::{slice_index, track_shocks};
use tunnelshock::numerics::linspace;
use tunnelshock::oracle::{godunov, GodunovConfig};
use tunnelshock::symbol::{Coef, Jump, SymbolModel};

fn init(s0: &str, p0: &str) -> InitialData {
    InitialData::new(parse(s0).unwrap(), Some(parse(p0).unwrap()))
}

fn fan(model: SymbolModel, init: &InitialData, x0: Vec<f64>, t_end: f64, h_t: f64, control: StepControl) -> Fan {
    let cfg = FanConfig { control, ..FanConfig::default() };
    Fan::hamiltonian(Arc::new(model), init, AField::Auto, x0, time_grid(t_end, h_t).unwrap(), cfg).unwrap()
}

fn cosine() -> SymbolModel {
    SymbolModel::new(Coef::Const(0.5), Coef::parse("0.2*cos(x)").unwrap(), vec![], false).unwrap()
}

fn arb_model() -> impl Strategy<Value = SymbolModel> {
    (0.1f64..1.0, 0usize..3, prop::option::of((0.2f64..1.0, -1.0f64..1.0))).prop_map(|(a, v, jump)| {
        let v = ["0", "0.2*cos(x)", "0.1*x^2"][v];
        let jumps = jump
            .filter(|&(_, nu)| nu.abs() > 0.1)
            .map(|(rate, nu)| vec![Jump { nu, rate: Coef::Const(rate) }])
            .unwrap_or_default();
        SymbolModel::new(Coef::Const(a), Coef::parse(v).unwrap(), jumps, false).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_conserved(model in arb_model(), x0 in -1.5f64..1.5, p0 in -1.0f64..1.0) {
        let data = InitialData::new(parse(&format!("{p0}*x")).unwrap(), None);
        let f = fan(model.clone(), &data, vec![x0 - 0.1, x0, x0 + 0.1], 1.0, 0.01, StepControl::default());
        for row in &f.rows {
            let h0 = model.eval_p(row[0][X], row[0][P], 0.0).unwrap();
            for y in row {
                let h = model.eval_p(y[X], y[P], 0.0).unwrap();
                prop_assert!((h - h0).abs() <= 1e-8 * (1.0 + h0.abs()), "H drifted from {} to {}", h0, h);
            }
        }
    }

    #[test]
    fn initial_states_match_the_data(model in arb_model(), x0 in -2.0f64..2.0) {
        let data = init("log(sech(x))", "-tanh(x)");
        let f = fan(model, &data, vec![x0, x0 + 0.5], 0.1, 0.05, StepControl::default());
        let pt = f.point(0, 0);
        prop_assert_eq!(pt.x, x0);
        prop_assert!((pt.p + x0.tanh()).abs() <= 1e-14);
        prop_assert!((pt.s - (1.0 / x0.cosh()).ln()).abs() <= 1e-14);
        prop_assert_eq!(pt.j, 1.0);
        prop_assert_eq!(pt.a_int, 0.0);
    }
}

#[test]
fn momentum_is_the_action_gradient() {
    // before the first caustic the slice is a graph and p = ∂S/∂x
    let f = fan(cosine(), &init("log(sech(x))", "-tanh(x)"), linspace(-5.0, 5.0, 2001), 0.5, 0.01, StepControl::default());
    let k = f.time_index(0.5).unwrap();
    let curve = slice_index(&f, k);
    assert_eq!(curve.branches.len(), 1);
    let h = 1e-3;
    for x in linspace(-2.0, 2.0, 41) {
        let mid = curve.essential_at(x).unwrap();
        let sp = curve.essential_at(x + h).unwrap().s;
        let sm = curve.essential_at(x - h).unwrap().s;
        let ds = (sp - sm) / (2.0 * h);
        assert!((ds - mid.p).abs() <= 1e-5, "x = {x}: S_x = {ds}, p = {}", mid.p);
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    // V = x would be integrated exactly, so the check needs a curved potential
    let data = init("log(sech(x))", "-tanh(x)");
    let x0 = vec![-1.0, 0.3, 1.2];
    let at_end = |h: f64| fan(cosine(), &data, x0.clone(), 2.0, h, StepControl::Fixed(1)).rows;
    let reference = at_end(0.00625);
    let err = |h: f64| {
        let rows = at_end(h);
        rows.iter()
            .zip(&reference)
            .map(|(a, b)| {
                let (ya, yb) = (a.last().unwrap(), b.last().unwrap());
                [X, P, S].iter().map(|&c| (ya[c] - yb[c]).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };
    let e1 = err(0.2);
    let e2 = err(0.1);
    assert!(e1 / e2 >= 12.0, "errors {e1:.3e} -> {e2:.3e}, factor {:.2}", e1 / e2);
}

#[test]
fn slices_split_into_monotone_branches() {
    let f = fan(SymbolModel::burgers(), &init("log(sech(x))", "-tanh(x)"), linspace(-4.0, 4.0, 2001), 2.0, 0.01, StepControl::default());
    for t in [0.5, 1.5, 2.0] {
        let curve = slice_index(&f, f.time_index(t).unwrap());
        for b in &curve.branches {
            let xs: Vec<f64> = (b.start..=b.end).map(|i| curve.states[i][X]).collect();
            let up = xs.windows(2).all(|w| w[1] > w[0]);
            let down = xs.windows(2).all(|w| w[1] < w[0]);
            assert!(up || down, "branch {b:?} at t = {t} is not monotone");
        }
    }
}

#[test]
fn shock_paths_are_admissible() {
    let cases = [
        ("burgers", SymbolModel::burgers(), linspace(-7.0, 7.0, 2801)),
        ("jump", SymbolModel::pure_jump(1.0, 1.0), linspace(-12.0, 4.0, 3201)),
        ("cosine", cosine(), linspace(-6.0, 6.0, 2401)),
    ];
    for (name, model, x0) in cases {
        let f = fan(model.clone(), &init("log(sech(x))", "-tanh(x)"), x0, 3.0, 0.01, StepControl::default());
        let shocks = track_shocks(&f).unwrap();
        assert!(!shocks.is_empty(), "{name}: no shock");
        for sh in &shocks {
            for q in sh.path.iter().filter(|q| q.transversal) {
                let ul = model.eval_dp_dp(q.x, q.p_l, q.t).unwrap();
                let ur = model.eval_dp_dp(q.x, q.p_r, q.t).unwrap();
                assert!(ul > q.c + 1e-10 && q.c > ur + 1e-10, "{name}: Lax fails at t = {}: {ul} {} {ur}", q.t, q.c);
                assert!((q.c - q.c_rh).abs() <= 1e-3, "{name}: c = {} vs RH {} at t = {}", q.c, q.c_rh, q.t);
                let curve = slice_index(&f, f.time_index(q.t).unwrap());
                let cover = curve.covering(q.x);
                let lo = cover.iter().map(|b| b.s).fold(f64::INFINITY, f64::min);
                let tied = cover.iter().filter(|b| (b.s - lo).abs() <= 1e-6).count();
                assert!(tied >= 2, "{name}: one-sided actions differ at t = {}", q.t);
            }
        }
    }
}

#[test]
fn riemann_shock_speed_matches_finite_volumes() {
    let m = SymbolModel::burgers();
    let f = fan(
        m.clone(),
        &init("x + 0.05*log(sech(x/0.05))", "1 - tanh(x/0.05)"),
        linspace(-3.0, 4.0, 2801),
        1.0,
        0.01,
        StepControl::default(),
    );
    let sh = &track_shocks(&f).unwrap()[0];
    let c = sh.speed(1.0).unwrap();
    assert!((c - 1.0).abs() <= 2e-2, "c = {c}");
    let fv = godunov(&m, &parse("1 - tanh(x/0.05)").unwrap(), 1.0, &GodunovConfig::new(-3.0, 3.0, 2000)).unwrap();
    let x_fv = fv.shocks[0];
    let x_s = sh.position(1.0).unwrap();
    assert!((x_s - x_fv).abs() <= 2e-2, "tracked {x_s}, finite volumes {x_fv}");
}
