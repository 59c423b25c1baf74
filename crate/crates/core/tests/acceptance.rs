//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tunnelshock::characteristics::{time_grid, AField, Fan, FanConfig, InitialData};
use tunnelshock::cli::{self, Scenario};
use tunnelshock::density::{transport_r, GeneralizedDensity};
use tunnelshock::expr::parse;
use tunnelshock::manifold::{first_singularity, slice_index, track_shocks};
use tunnelshock::numerics::linspace;
use tunnelshock::oracle::{hopf_lax, kf_lattice, tunnel_compare, Collar, LatticeConfig};
use tunnelshock::regularize::{limit_study, LimitConfig};
use tunnelshock::symbol::{Coef, SymbolModel};
use tunnelshock::verify::{decay_orders, identity_residual, Bump, DensityCandidate};

type Outcome = Result<(bool, String), String>;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn tanh_init() -> InitialData {
    InitialData::new(parse("log(sech(x))").unwrap(), Some(parse("-tanh(x)").unwrap()))
}

fn density(model: SymbolModel, init: &InitialData, x0: Vec<f64>, t_end: f64, a: AField) -> GeneralizedDensity {
    let fan = Fan::hamiltonian(
        Arc::new(model),
        init,
        a.clone(),
        x0,
        time_grid(t_end, 0.01).unwrap(),
        FanConfig::default(),
    )
    .unwrap();
    let fan = Arc::new(fan);
    let shocks = track_shocks(&fan).unwrap();
    let mut gd = transport_r(fan, parse("1").unwrap(), a);
    gd.evolve_amplitudes(shocks).unwrap();
    gd
}

fn smoothed_riemann() -> GeneralizedDensity {
    let init = InitialData::new(
        parse("0.05*log(sech(x/0.05))").unwrap(),
        Some(parse("-tanh(x/0.05)").unwrap()),
    );
    density(SymbolModel::burgers(), &init, linspace(-3.0, 3.0, 2001), 1.5, AField::Auto)
}

fn focal_point() -> Outcome {
    let fan = Fan::hamiltonian(
        Arc::new(SymbolModel::burgers()),
        &tanh_init(),
        AField::Auto,
        linspace(-4.0, 4.0, 1601),
        time_grid(2.0, 0.01).unwrap(),
        FanConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let s = first_singularity(&fan).map_err(|e| e.to_string())?;
    let ok = (s.t - 1.0).abs() <= 1e-3 && s.x.abs() <= 1e-3;
    Ok((ok, format!("t* = {:.6}, x* = {:.2e}", s.t, s.x)))
}

fn hopf_lax_equivalence() -> Outcome {
    let s0 = parse("log(sech(x))").unwrap();
    let cases = [
        ("burgers", SymbolModel::burgers(), (-8.0, 8.0), (-6.0, 6.0)),
        ("jump", SymbolModel::pure_jump(1.0, 1.0), (-12.0, 4.0), (-10.0, 2.0)),
    ];
    let xs = linspace(-3.0, 3.0, 121);
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, m, (lo, hi), window) in cases {
        let fan = Fan::hamiltonian(
            Arc::new(m.clone()),
            &tanh_init(),
            AField::Auto,
            linspace(lo, hi, 3201),
            time_grid(3.0, 0.01).unwrap(),
            FanConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for t in [0.5, 1.5, 3.0] {
            let k = fan.time_index(t).map_err(|e| e.to_string())?;
            let ess = slice_index(&fan, k).essential(&xs, &fan).map_err(|e| e.to_string())?;
            if !ess.uncovered.is_empty() {
                return Err(format!("{name}: {} uncovered points at t = {t}", ess.uncovered.len()));
            }
            for (&x, s) in xs.iter().zip(ess.action()) {
                let o = hopf_lax(&m, &s0, x, t, (x + window.0, x + window.1)).map_err(|e| e.to_string())?;
                worst = worst.max((o - s).abs());
            }
        }
        ok &= worst <= 1e-3;
        detail.push(format!("{name} sup {worst:.2e}"));
    }
    Ok((ok, detail.join(", ")))
}

fn riemann_amplitude() -> Outcome {
    let gd = smoothed_riemann();
    let s = gd.shocks.first().ok_or("no shock")?;
    let c = s.speed(1.0).ok_or("shock not alive at t = 1")?;
    let e = s.amplitude(1.0).ok_or("no amplitude at t = 1")?;
    let rel = (e - 2.0).abs() / 2.0;
    Ok((c.abs() <= 2e-3 && rel <= 1e-2, format!("c(1) = {c:.2e}, e(1) = {e:.6} (rel {rel:.2e})")))
}

fn kirchhoff_merge() -> Outcome {
    let sc = Scenario::from_file(&scenarios_dir().join("merge.ini")).map_err(|e| e.to_string())?;
    let gd = sc.density().map_err(|e| e.to_string())?;
    let child = gd
        .shocks
        .iter()
        .find(|s| matches!(s.origin, tunnelshock::manifold::ShockOrigin::Merge { .. }))
        .ok_or("no merge")?;
    let tunnelshock::manifold::ShockOrigin::Merge { left, right } = child.origin else {
        unreachable!()
    };
    let e1 = gd.shocks[left].last().e;
    let e2 = gd.shocks[right].last().e;
    let e3 = child.path[0].e;
    let kirchhoff = (e3 - (e1 + e2)).abs() / e3.abs();
    // ė from the recorded amplitudes against [R(u − c)] from the outer states
    let t = child.t_birth + 0.5 * (sc.t_end - child.t_birth);
    let h = 0.05;
    let rate = (child.amplitude(t + h).ok_or("e")? - child.amplitude(t - h).ok_or("e")?) / (2.0 * h);
    let k = gd.fan.time_index(t).map_err(|e| e.to_string())?;
    let q = child.path.iter().find(|q| q.t >= gd.fan.times[k] - 1e-12).ok_or("sample")?;
    let formula = q.r_l * (q.u_l - q.c_rh) - q.r_r * (q.u_r - q.c_rh);
    let rate_err = (rate - formula).abs() / formula.abs();
    Ok((
        kirchhoff <= 1e-3 && rate_err <= 1e-2,
        format!("e1 + e2 = {:.6}, e3 = {e3:.6} (rel {kirchhoff:.1e}); de/dt = {rate:.5} vs {formula:.5} (rel {rate_err:.1e})", e1 + e2),
    ))
}

fn identity_certification() -> Outcome {
    let gd = smoothed_riemann();
    let bump = Bump::new(0.1, 0.8, 0.5, 0.5).map_err(|e| e.to_string())?;
    let good = DensityCandidate::new(&gd);
    let res: Vec<f64> = (5..=7)
        .map(|l| identity_residual(&good, &bump, l))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let orders = decay_orders(&res);
    let scaled = DensityCandidate::scaled(&gd, vec![1.1; gd.shocks.len()]);
    let bad = identity_residual(&scaled, &bump, 7).map_err(|e| e.to_string())?;
    let ratio = bad / res[2];
    Ok((
        orders.iter().all(|&o| o >= 1.8) && ratio >= 10.0,
        format!("residuals {:.2e}, {:.2e}, {:.2e}; orders {:.2}, {:.2}; x1.1 inflation {ratio:.1e}", res[0], res[1], res[2], orders[0], orders[1]),
    ))
}

fn mass_balance() -> Outcome {
    let gd = density(SymbolModel::burgers(), &tanh_init(), linspace(-7.0, 7.0, 2801), 3.0, AField::Zero);
    let m0 = gd.mass(0).map_err(|e| e.to_string())?.total();
    let mut worst: f64 = 0.0;
    for k in 0..gd.fan.times.len() {
        let m = gd.mass(k).map_err(|e| e.to_string())?.total();
        worst = worst.max((m - m0).abs() / m0);
    }
    Ok((worst <= 1e-5, format!("max relative drift {worst:.2e} over {} times", gd.fan.times.len())))
}

fn regularization_limit() -> Outcome {
    let gd = density(SymbolModel::burgers(), &tanh_init(), linspace(-4.0, 4.0, 2001), 3.0, AField::Auto);
    let rep = limit_study(&gd, &tanh_init(), &LimitConfig::default()).map_err(|e| e.to_string())?;
    let r: Vec<String> = rep.rows.iter().map(|r| format!("{:.2e}", r.r_error)).collect();
    let e: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{:.2e}", r.e_error(1.0).unwrap_or(f64::NAN)))
        .collect();
    let ok = rep.r_decreasing() && rep.e_decreasing(1.0) && rep.j_bound() >= 0.25;
    Ok((
        ok,
        format!("sup R error [{}], |e(1) error| [{}], min J/eps {:.3}", r.join(", "), e.join(", "), rep.j_bound()),
    ))
}

fn tunnel_asymptotics() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    let presets = [("0", "1", vec![0.05]), ("0.1*x^2", "sech(x)", vec![0.2, 0.1, 0.05])];
    for (v, phi, hs) in presets {
        let m = SymbolModel::new(Coef::Const(0.5), Coef::parse(v).unwrap(), vec![], false).map_err(|e| e.to_string())?;
        let init = InitialData::new(parse("x^2/2").unwrap(), None);
        let fan = Fan::hamiltonian(
            Arc::new(m.clone()),
            &init,
            AField::Auto,
            linspace(-6.0, 6.0, 1201),
            time_grid(1.0, 0.01).unwrap(),
            FanConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let gd = transport_r(Arc::new(fan), parse(&format!("({phi})^2")).unwrap(), AField::Auto);
        let phi_e = parse(phi).unwrap();
        let runs = hs
            .iter()
            .map(|&h| {
                let u0 = |x: f64| phi_e.eval(x, 0.0).unwrap() * (-x * x / (2.0 * h)).exp();
                kf_lattice(&m, &u0, &LatticeConfig::new(-5.0, 5.0, h / 25.0, h), &[1.0]).map(|mut v| v.remove(0))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let rep = tunnel_compare(&gd, &runs, (-1.0, 1.0), Collar::default()).map_err(|e| e.to_string())?;
        if hs.len() == 1 {
            let rel = rep.rows[0].e_rel;
            ok &= rel <= 1e-3;
            detail.push(format!("gaussian rel {rel:.2e} at h = 0.05"));
        } else {
            ok &= rep.order >= 0.8;
            let es: Vec<String> = rep.rows.iter().map(|r| format!("{:.3e}", r.e_abs)).collect();
            detail.push(format!("quadratic E [{}], order {:.3}", es.join(", "), rep.order));
        }
    }
    Ok((ok, detail.join("; ")))
}

fn jacobian_and_duality() -> Outcome {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ini"))
        .collect();
    entries.sort();
    let mut worst: (f64, String) = (0.0, String::new());
    for p in &entries {
        let sc = Scenario::from_file(p).map_err(|e| e.to_string())?;
        let fan = sc.fan().map_err(|e| e.to_string())?;
        let rep = fan.jacobian_check().map_err(|e| e.to_string())?;
        if rep.max_deviation >= worst.0 {
            worst = (rep.max_deviation, p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    let models = [
        SymbolModel::burgers(),
        SymbolModel::pure_jump(1.0, 1.0),
        SymbolModel::new(Coef::Const(0.5), Coef::parse("0.2*cos(x)").unwrap(), vec![], false).unwrap(),
        SymbolModel::new(
            Coef::Const(0.5),
            Coef::parse("0.1*x^2").unwrap(),
            vec![tunnelshock::symbol::Jump { nu: -1.0, rate: Coef::Const(0.5) }],
            false,
        )
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut duality: f64 = 0.0;
    for i in 0..200 {
        let m = &models[i % models.len()];
        let x = rng.gen_range(-2.0..2.0);
        let p_true: f64 = rng.gen_range(-3.0..3.0);
        let v = m.eval_dp_dp(x, p_true, 0.0).map_err(|e| e.to_string())?;
        let (p, l) = m.legendre(x, v, 0.0).map_err(|e| e.to_string())?;
        let h = m.eval_p(x, p, 0.0).map_err(|e| e.to_string())?;
        duality = duality.max((l + h - v * p).abs() / (1.0 + l.abs())).max((p - p_true).abs());
    }
    Ok((
        worst.0 <= 1e-6 && duality <= 1e-10,
        format!("Jacobian deviation {:.2e} (worst: {}) over {} presets; Legendre residual {duality:.2e}", worst.0, worst.1, entries.len()),
    ))
}

fn determinism() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for (scenario, cmd) in [("tanh", "evolve"), ("riemann", "verify")] {
        let ini = scenarios_dir().join(format!("{scenario}.ini"));
        let mut outputs = Vec::new();
        for threads in ["1", "4"] {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let code = cli::run([
                "tunnelshock",
                "--scenario",
                ini.to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
                "--threads",
                threads,
                cmd,
            ]);
            if code != 0 {
                return Err(format!("{scenario} {cmd} exited with {code}"));
            }
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
                .map_err(|e| e.to_string())?
                .filter_map(|e| e.ok())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
                .collect();
            files.sort();
            outputs.push(files);
        }
        let same = outputs[0] == outputs[1];
        ok &= same;
        detail.push(format!("{scenario} {cmd}: {} files {}", outputs[0].len(), if same { "identical" } else { "differ" }));
    }
    Ok((ok, detail.join("; ")))
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("focal point", focal_point),
        ("Hopf-Lax equivalence", hopf_lax_equivalence),
        ("Riemann amplitude", riemann_amplitude),
        ("Kirchhoff merge", kirchhoff_merge),
        ("integral identity", identity_certification),
        ("mass balance", mass_balance),
        ("regularization limit", regularization_limit),
        ("tunnel asymptotics", tunnel_asymptotics),
        ("Jacobian and duality", jacobian_and_duality),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
