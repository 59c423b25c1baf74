//! Command-line front end: INI scenarios in, CSV tables and a run manifest out.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use ini::Ini;
use thiserror::Error;

use crate::characteristics::{time_grid, AField, Fan, FanConfig, InitialData, AI, DX, P, S, X};
use crate::density::{transport_r, GeneralizedDensity};
use crate::expr::{parse, parse_field, Expression};
use crate::manifold::{singularities, slice_index, track_shocks, ManifoldError, ShockOrigin};
use crate::numerics::linspace;
use crate::oracle::{self, Collar, GodunovConfig, LatticeConfig, OracleError};
use crate::regularize::{self, BlendProfile, LimitConfig};
use crate::symbol::{Coef, Jump, SymbolModel};
use crate::verify::{self, DensityCandidate, SuiteBox};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read scenario {0}")]
    MissingFile(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write output: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingFile(_) => EXIT_NO_INPUT,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn from_oracle(e: OracleError) -> CliError {
    match e {
        OracleError::NotHomogeneous
        | OracleError::Invalid(_)
        | OracleError::Incommensurate { .. }
        | OracleError::Stability { .. } => CliError::Validation(e.to_string()),
        _ => numerical(e),
    }
}

#[derive(Parser, Debug)]
#[command(name = "tunnelshock", version, about = "Tunnel asymptotics and δ-shock solutions in 1D")]
struct Args {
    /// Scenario file (INI).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to TUNNELSHOCK_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized steps; overrides `[verify] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
pub enum Command {
    /// Fan, essential solution and generalized density.
    Evolve,
    /// Caustic times and positions.
    Singularity,
    /// Shock paths, amplitudes and merges.
    Shock,
    /// Integral-identity suite and Hamilton–Jacobi residual.
    Verify,
    /// Independent reference solvers.
    Oracle {
        #[arg(value_enum)]
        kind: OracleKind,
    },
    /// Vanishing-regularization study.
    LimitStudy,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    HopfLax,
    Godunov,
    KfLattice,
    TunnelCompare,
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Evolve => "evolve".into(),
            Command::Singularity => "singularity".into(),
            Command::Shock => "shock".into(),
            Command::Verify => "verify".into(),
            Command::Oracle { kind } => format!(
                "oracle {}",
                kind.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
            ),
            Command::LimitStudy => "limit-study".into(),
        }
    }
}

/// A parsed and validated scenario file.
#[derive(Clone)]
pub struct Scenario {
    pub source: String,
    pub model: SymbolModel,
    pub a_field: AField,
    pub s0: Expression,
    pub p0: Option<Expression>,
    pub rho0: Expression,
    /// `√ρ₀`, explicit when the file gives `phi0`.
    pub phi0: Expression,
    pub x_range: (f64, f64),
    pub x0_range: (f64, f64),
    pub x0_points: usize,
    pub t_end: f64,
    pub h_t: f64,
    pub points: usize,
    pub snapshots: Vec<f64>,
    pub h_list: Vec<f64>,
    pub dx_per_h: f64,
    pub lattice_range: (f64, f64),
    pub epsilons: Vec<f64>,
    pub profile: BlendProfile,
    pub t1: f64,
    pub c_target: f64,
    pub n_core: usize,
    pub bumps: usize,
    pub seed: u64,
    pub godunov_cells: usize,
    pub hopf_lax_half_width: f64,
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[(&str, &[&str])] = &[
    ("symbol", &["A", "V", "jumps", "time_dependent", "a_field"]),
    ("initial", &["S0", "p0", "rho0", "phi0"]),
    ("domain", &["x_min", "x_max", "x0_min", "x0_max", "x0_points", "T", "h_t", "points", "snapshots"]),
    ("tunnel", &["h", "dx_per_h", "lattice_min", "lattice_max"]),
    ("regularization", &["epsilon", "profile", "t1", "c_target", "n_core"]),
    ("verify", &["bumps", "seed"]),
    ("oracle", &["cells", "hopf_lax_half_width"]),
    ("output", &["dir"]),
];

struct Reader<'a> {
    ini: &'a Ini,
}

impl Reader<'_> {
    fn raw(&self, sec: &str, key: &str) -> Option<&str> {
        self.ini.section(Some(sec)).and_then(|p| p.get(key)).map(str::trim)
    }

    fn bad(sec: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::Validation(format!("[{sec}] {key}: {msg}"))
    }

    fn expr(&self, sec: &str, key: &str, field: bool) -> Result<Option<Expression>, CliError> {
        let Some(src) = self.raw(sec, key) else {
            return Ok(None);
        };
        let r = if field { parse_field(src) } else { parse(src) };
        r.map(Some).map_err(|e| Self::bad(sec, key, format!("{e} (offset {})", e.offset())))
    }

    fn coef(&self, sec: &str, key: &str) -> Result<Coef, CliError> {
        Ok(self.expr(sec, key, false)?.map(Coef::from_expr).unwrap_or(Coef::Const(0.0)))
    }

    fn num<T: std::str::FromStr>(&self, sec: &str, key: &str, default: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(sec, key) {
            Some(s) => s.parse::<T>().map_err(|e| Self::bad(sec, key, e)),
            None => default.ok_or_else(|| Self::bad(sec, key, "required")),
        }
    }

    fn list(&self, sec: &str, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        match self.raw(sec, key) {
            Some(s) => s
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Self::bad(sec, key, e)))
                .collect(),
            None => Ok(default),
        }
    }
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| CliError::MissingFile(path.display().to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        for (sec, props) in ini.iter() {
            let Some(sec) = sec else {
                if props.iter().next().is_some() {
                    return Err(CliError::Validation("keys outside a section".into()));
                }
                continue;
            };
            let Some((_, keys)) = KEYS.iter().find(|(s, _)| *s == sec) else {
                return Err(CliError::Validation(format!("unknown section [{sec}]")));
            };
            for (k, _) in props.iter() {
                if !keys.contains(&k) {
                    return Err(CliError::Validation(format!("[{sec}] unknown key `{k}`")));
                }
            }
        }
        let r = Reader { ini: &ini };
        let time_dependent: bool = r.num("symbol", "time_dependent", Some(false))?;
        let mut jumps = Vec::new();
        if let Some(spec) = r.raw("symbol", "jumps") {
            for item in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let (nu, rate) = item
                    .split_once(':')
                    .ok_or_else(|| Reader::bad("symbol", "jumps", "expected `nu:rate; ...`"))?;
                let nu: f64 = nu.trim().parse().map_err(|e| Reader::bad("symbol", "jumps", e))?;
                let rate = Coef::parse(rate.trim()).map_err(|e| {
                    Reader::bad("symbol", "jumps", format!("{e} (offset {})", e.offset()))
                })?;
                jumps.push(Jump { nu, rate });
            }
        }
        let model = SymbolModel::new(r.coef("symbol", "A")?, r.coef("symbol", "V")?, jumps, time_dependent)
            .map_err(|e| Reader::bad("symbol", "A", e))?;
        let a_field = match r.raw("symbol", "a_field") {
            None | Some("auto") => AField::Auto,
            Some("zero") => AField::Zero,
            Some(_) => AField::Field(r.expr("symbol", "a_field", true)?.expect("present")),
        };
        let s0 = r
            .expr("initial", "S0", false)?
            .ok_or_else(|| Reader::bad("initial", "S0", "required"))?;
        let p0 = r.expr("initial", "p0", false)?;
        let (rho0, phi0) = match (r.raw("initial", "rho0"), r.raw("initial", "phi0")) {
            (Some(_), Some(_)) => {
                return Err(Reader::bad("initial", "phi0", "give either rho0 or phi0"))
            }
            (_, Some(src)) => {
                let phi = r.expr("initial", "phi0", false)?.expect("present");
                let rho = parse(&format!("({src})^2")).map_err(|e| Reader::bad("initial", "phi0", e))?;
                (rho, phi)
            }
            (src, None) => {
                let src = src.unwrap_or("1");
                let rho = parse(src).map_err(|e| {
                    Reader::bad("initial", "rho0", format!("{e} (offset {})", e.offset()))
                })?;
                let phi = parse(&format!("({src})^0.5")).map_err(|e| Reader::bad("initial", "rho0", e))?;
                (rho, phi)
            }
        };
        let x_min: f64 = r.num("domain", "x_min", Some(-3.0))?;
        let x_max: f64 = r.num("domain", "x_max", Some(3.0))?;
        let x0_min: f64 = r.num("domain", "x0_min", Some(x_min))?;
        let x0_max: f64 = r.num("domain", "x0_max", Some(x_max))?;
        let t_end: f64 = r.num("domain", "T", None)?;
        let h_t: f64 = r.num("domain", "h_t", Some(0.01))?;
        let sc = Scenario {
            source: text.to_string(),
            model,
            a_field,
            s0,
            p0,
            rho0,
            phi0,
            x_range: (x_min, x_max),
            x0_range: (x0_min, x0_max),
            x0_points: r.num("domain", "x0_points", Some(2001))?,
            t_end,
            h_t,
            points: r.num("domain", "points", Some(121))?,
            snapshots: r.list("domain", "snapshots", vec![t_end])?,
            h_list: r.list("tunnel", "h", Vec::new())?,
            dx_per_h: r.num("tunnel", "dx_per_h", Some(25.0))?,
            lattice_range: (
                r.num("tunnel", "lattice_min", Some(x0_min))?,
                r.num("tunnel", "lattice_max", Some(x0_max))?,
            ),
            epsilons: r.list("regularization", "epsilon", vec![1e-2, 2.5e-3, 6.25e-4])?,
            profile: BlendProfile::parse(r.raw("regularization", "profile").unwrap_or("tanh"))
                .ok_or_else(|| Reader::bad("regularization", "profile", "expected tanh or smoothstep"))?,
            t1: r.num("regularization", "t1", Some(0.3))?,
            c_target: r.num("regularization", "c_target", Some(1.0))?,
            n_core: r.num("regularization", "n_core", Some(101))?,
            bumps: r.num("verify", "bumps", Some(8))?,
            seed: r.num("verify", "seed", Some(1))?,
            godunov_cells: r.num("oracle", "cells", Some(2000))?,
            hopf_lax_half_width: r.num("oracle", "hopf_lax_half_width", Some(6.0))?,
            out_dir: r.raw("output", "dir").map(PathBuf::from),
        };
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !(self.x_range.1 > self.x_range.0) || !(self.x0_range.1 > self.x0_range.0) {
            return bad("[domain] ranges must be nonempty".into());
        }
        if self.x0_points < 8 || self.points < 3 {
            return bad("[domain] too few points".into());
        }
        time_grid(self.t_end, self.h_t).map_err(|e| CliError::Validation(format!("[domain] T/h_t: {e}")))?;
        for &t in &self.snapshots {
            let k = (t / self.h_t).round();
            if !(t > 0.0 && t <= self.t_end + 1e-12) || (k * self.h_t - t).abs() > 1e-9 {
                return bad(format!("[domain] snapshot {t} is not a grid time in (0, T]"));
            }
        }
        if self.h_list.iter().any(|&h| !(h > 0.0)) || !(self.dx_per_h >= 1.0) {
            return bad("[tunnel] h must be positive and dx_per_h ≥ 1".into());
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return bad("[regularization] epsilon values must lie in (0, 1)".into());
        }
        if self.bumps == 0 {
            return bad("[verify] bumps must be at least 1".into());
        }
        Ok(())
    }

    pub fn init(&self) -> InitialData {
        InitialData::new(self.s0.clone(), self.p0.clone())
    }

    pub fn times(&self) -> Vec<f64> {
        time_grid(self.t_end, self.h_t).expect("validated")
    }

    pub fn fan(&self) -> Result<Fan, CliError> {
        Fan::hamiltonian(
            Arc::new(self.model.clone()),
            &self.init(),
            self.a_field.clone(),
            linspace(self.x0_range.0, self.x0_range.1, self.x0_points),
            self.times(),
            FanConfig::default(),
        )
        .map_err(numerical)
    }

    /// Fan, tracked shocks and amplitudes.
    pub fn density(&self) -> Result<GeneralizedDensity, CliError> {
        let fan = Arc::new(self.fan()?);
        let shocks = track_shocks(&fan).map_err(numerical)?;
        let mut gd = transport_r(fan, self.rho0.clone(), self.a_field.clone());
        gd.evolve_amplitudes(shocks).map_err(numerical)?;
        Ok(gd)
    }

    pub fn grid(&self) -> Vec<f64> {
        linspace(self.x_range.0, self.x_range.1, self.points)
    }

    fn snapshot_indices(&self, fan: &Fan) -> Result<Vec<usize>, CliError> {
        self.snapshots
            .iter()
            .map(|&t| fan.time_index(t).map_err(|e| CliError::Validation(e.to_string())))
            .collect()
    }
}

/// A finished table: file name and CSV text.
pub type Table = (String, String);

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

struct Csv {
    name: String,
    text: String,
}

impl Csv {
    fn new(name: &str, header: &[&str]) -> Self {
        Csv {
            name: name.into(),
            text: header.join(",") + "\n",
        }
    }

    fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    fn done(self) -> Table {
        (self.name, self.text)
    }
}

/// Runs one subcommand and returns its tables in a fixed order.
pub fn execute(cmd: Command, sc: &Scenario) -> Result<Vec<Table>, CliError> {
    match cmd {
        Command::Evolve => evolve(sc),
        Command::Singularity => singularity(sc),
        Command::Shock => shock(sc),
        Command::Verify => verify_cmd(sc),
        Command::Oracle { kind } => match kind {
            OracleKind::HopfLax => hopf_lax(sc),
            OracleKind::Godunov => godunov(sc),
            OracleKind::KfLattice => kf_lattice(sc),
            OracleKind::TunnelCompare => tunnel_compare(sc),
        },
        Command::LimitStudy => limit_study(sc),
    }
}

fn evolve(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let gd = sc.density()?;
    let fan = &gd.fan;
    let ks = sc.snapshot_indices(fan)?;
    let xs = sc.grid();
    let mut fan_csv = Csv::new("fan.csv", &["t", "x0", "x", "p", "S", "J", "a_int"]);
    let mut ess_csv = Csv::new("essential.csv", &["t", "x", "S", "u", "branch_id"]);
    let mut den_csv = Csv::new("density.csv", &["t", "x", "R"]);
    let mut mass_csv = Csv::new("masses.csv", &["t", "smooth_mass", "singular_mass", "total"]);
    for &k in &ks {
        let t = fan.times[k];
        for (i, row) in fan.rows.iter().enumerate() {
            let y = row[k];
            fan_csv.row(&[f(t), f(fan.x0[i]), f(y[X]), f(y[P]), f(y[S]), f(y[DX]), f(y[AI])]);
        }
        let ess = slice_index(fan, k).essential(&xs, fan).map_err(numerical)?;
        for (j, x) in xs.iter().enumerate() {
            let (s, r, id) = match &ess.points[j] {
                Some(pt) => (pt.s, gd.r_point(pt).map_err(numerical)?, pt.branch.to_string()),
                None => (f64::NAN, f64::NAN, String::new()),
            };
            ess_csv.row(&[f(t), f(*x), f(s), f(ess.u[j]), id]);
            den_csv.row(&[f(t), f(*x), f(r)]);
        }
        let m = gd.mass(k).map_err(numerical)?;
        mass_csv.row(&[f(t), f(m.smooth), f(m.singular), f(m.total())]);
    }
    let mut out = vec![fan_csv.done(), ess_csv.done(), den_csv.done(), mass_csv.done()];
    out.extend(shock_tables(&gd));
    Ok(out)
}

fn shock_tables(gd: &GeneralizedDensity) -> Vec<Table> {
    let mut path = Csv::new("shocks.csv", &["shock_id", "t", "x_s", "c", "p_l", "p_r", "R_l", "R_r", "e"]);
    let mut amp = Csv::new("amplitudes.csv", &["t", "shock_id", "e"]);
    let mut merges = Csv::new("merges.csv", &["t", "x", "left_id", "right_id", "child_id", "e_left", "e_right", "e_child"]);
    for s in &gd.shocks {
        for q in &s.path {
            path.row(&[
                s.id.to_string(),
                f(q.t),
                f(q.x),
                f(q.c),
                f(q.p_l),
                f(q.p_r),
                f(q.r_l),
                f(q.r_r),
                f(q.e),
            ]);
            amp.row(&[f(q.t), s.id.to_string(), f(q.e)]);
        }
        if let ShockOrigin::Merge { left, right } = s.origin {
            let e_of = |id: usize| gd.shocks.iter().find(|r| r.id == id).map(|r| r.last().e).unwrap_or(f64::NAN);
            merges.row(&[
                f(s.t_birth),
                f(s.x_birth),
                left.to_string(),
                right.to_string(),
                s.id.to_string(),
                f(e_of(left)),
                f(e_of(right)),
                f(s.path[0].e),
            ]);
        }
    }
    vec![path.done(), amp.done(), merges.done()]
}

fn singularity(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let fan = sc.fan()?;
    let mut csv = Csv::new("singularity.csv", &["index", "t_star", "x_star", "x0_star"]);
    match singularities(&fan) {
        Ok(list) => {
            for (i, s) in list.iter().enumerate() {
                csv.row(&[i.to_string(), f(s.t), f(s.x), f(s.x0)]);
            }
        }
        Err(ManifoldError::NoSingularity) => {}
        Err(e) => return Err(numerical(e)),
    }
    Ok(vec![csv.done()])
}

fn shock(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    Ok(shock_tables(&sc.density()?))
}

fn verify_cmd(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let gd = sc.density()?;
    let cand = DensityCandidate::new(&gd);
    let domain = SuiteBox {
        x_lo: sc.x_range.0,
        x_hi: sc.x_range.1,
        t_end: sc.t_end,
    };
    let report = verify::identity_suite(&cand, domain, &verify::merge_points(&gd), sc.bumps, sc.seed)
        .map_err(numerical)?;
    let xs = sc.grid();
    let ts = gd.fan.times.clone();
    let dx = xs[1] - xs[0];
    let grid = verify::action_grid(&gd, &xs, &ts, 5.0 * dx, verify::REGULAR_J).map_err(numerical)?;
    let hj = verify::hj_residual(&sc.model, &xs, &ts, &grid).map_err(numerical)?;
    let mut summary = Csv::new("verify_summary.csv", &["bumps", "max_residual_finest", "certified", "hj_residual"]);
    summary.row(&[
        report.entries.len().to_string(),
        f(report.max_residual(verify::SUITE_LEVELS.len() - 1)),
        u8::from(report.certified(verify::CERTIFY_ORDER, verify::CERTIFY_FLOOR)).to_string(),
        f(hj),
    ]);
    Ok(vec![("identity.csv".into(), report.csv()), summary.done()])
}

fn hopf_lax(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    if !sc.model.is_homogeneous() {
        return Err(from_oracle(OracleError::NotHomogeneous));
    }
    let fan = sc.fan()?;
    let xs = sc.grid();
    let w = sc.hopf_lax_half_width;
    let mut csv = Csv::new("hopf_lax.csv", &["t", "x", "S_hopf_lax", "S_essential", "abs_diff"]);
    for k in sc.snapshot_indices(&fan)? {
        let t = fan.times[k];
        let ess = slice_index(&fan, k).essential(&xs, &fan).map_err(numerical)?;
        let s = ess.action();
        let oracle: Vec<f64> = {
            use rayon::prelude::*;
            xs.par_iter()
                .map(|&x| oracle::hopf_lax(&sc.model, &sc.s0, x, t, (x - w, x + w)))
                .collect::<Result<_, _>>()
                .map_err(from_oracle)?
        };
        for (j, &x) in xs.iter().enumerate() {
            csv.row(&[f(t), f(x), f(oracle[j]), f(s[j]), f((oracle[j] - s[j]).abs())]);
        }
    }
    Ok(vec![csv.done()])
}

fn godunov(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    if !sc.model.is_homogeneous() {
        return Err(from_oracle(OracleError::NotHomogeneous));
    }
    let p0 = match &sc.p0 {
        Some(p) => p.clone(),
        None => {
            return Err(CliError::Validation("[initial] p0 is required by the Godunov oracle".into()))
        }
    };
    let fan = sc.fan()?;
    let cfg = GodunovConfig::new(sc.x_range.0, sc.x_range.1, sc.godunov_cells);
    let mut field = Csv::new("godunov.csv", &["t", "x", "p", "u", "u_characteristics"]);
    let mut fronts = Csv::new("godunov_shocks.csv", &["t", "x_s"]);
    let mut summary = Csv::new("godunov_summary.csv", &["t", "l1_velocity_difference"]);
    for k in sc.snapshot_indices(&fan)? {
        let t = fan.times[k];
        let g = oracle::godunov(&sc.model, &p0, t, &cfg).map_err(from_oracle)?;
        let ess = slice_index(&fan, k).essential(&g.x, &fan).map_err(numerical)?;
        let dx = g.x[1] - g.x[0];
        let mut l1 = 0.0;
        for j in 0..g.x.len() {
            let uc = ess.u[j];
            if uc.is_finite() {
                l1 += (uc - g.u[j]).abs() * dx;
            }
            field.row(&[f(t), f(g.x[j]), f(g.p[j]), f(g.u[j]), f(uc)]);
        }
        for &x in &g.shocks {
            fronts.row(&[f(t), f(x)]);
        }
        summary.row(&[f(t), f(l1)]);
    }
    Ok(vec![field.done(), fronts.done(), summary.done()])
}

fn lattice_runs(sc: &Scenario, times: &[f64]) -> Result<Vec<Vec<oracle::LatticeField>>, CliError> {
    use rayon::prelude::*;
    if sc.h_list.is_empty() {
        return Err(CliError::Validation("[tunnel] h list is required".into()));
    }
    sc.h_list
        .par_iter()
        .map(|&h| {
            let cfg = LatticeConfig::new(sc.lattice_range.0, sc.lattice_range.1, h / sc.dx_per_h, h);
            let u0 = |x: f64| -> f64 {
                let phi = sc.phi0.eval(x, 0.0).unwrap_or(f64::NAN);
                let s = sc.s0.eval(x, 0.0).unwrap_or(f64::NAN);
                phi * (-s / h).exp()
            };
            oracle::kf_lattice(&sc.model, &u0, &cfg, times).map_err(from_oracle)
        })
        .collect()
}

fn kf_lattice(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let runs = lattice_runs(sc, &sc.snapshots)?;
    let mut csv = Csv::new("lattice.csv", &["h", "t", "x", "u", "minus_h_log_u"]);
    for series in &runs {
        for snap in series {
            for (x, (u, s)) in snap.x.iter().zip(snap.u.iter().zip(snap.minus_h_log_u())) {
                csv.row(&[f(snap.h), f(snap.t), f(*x), f(*u), f(s)]);
            }
        }
    }
    Ok(vec![csv.done()])
}

fn tunnel_compare(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let gd = sc.density()?;
    let runs: Vec<_> = lattice_runs(sc, &[sc.t_end])?
        .into_iter()
        .map(|mut s| s.pop().expect("one snapshot"))
        .collect();
    let rep = oracle::tunnel_compare(&gd, &runs, sc.x_range, Collar::default()).map_err(from_oracle)?;
    let mut csv = Csv::new("tunnel.csv", &["h", "E_of_h", "E_relative", "compared", "fitted_order"]);
    for r in &rep.rows {
        csv.row(&[f(r.h), f(r.e_abs), f(r.e_rel), r.compared.to_string(), f(rep.order)]);
    }
    Ok(vec![csv.done()])
}

fn limit_study(sc: &Scenario) -> Result<Vec<Table>, CliError> {
    let gd = sc.density()?;
    let init = sc.init();
    let cfg = LimitConfig {
        schedule: sc.epsilons.clone(),
        r_times: sc.snapshots.clone(),
        e_times: vec![sc.t_end],
        n_core: sc.n_core,
        c_target: sc.c_target,
        profile: sc.profile,
        ..LimitConfig::default()
    };
    let rep = regularize::limit_study(&gd, &init, &cfg).map_err(numerical)?;
    let mut csv = Csv::new("limit.csv", &["epsilon", "beta", "sup_R_error", "e_error_at_T", "minJ_over_eps"]);
    for r in &rep.rows {
        csv.row(&[
            f(r.epsilon),
            f(r.beta),
            f(r.r_error),
            f(r.e_error(sc.t_end).unwrap_or(f64::NAN)),
            f(r.min_j_over_eps),
        ]);
    }
    let mut cut = Csv::new("surgery.csv", &["beta", "t_cut", "a1", "a2", "gap_over_beta"]);
    if let Some(seed) = singularities(&gd.fan).ok().and_then(|s| s.first().copied()) {
        for r in &rep.rows {
            if sc.t1 <= r.beta || seed.t + r.beta > sc.t_end {
                continue;
            }
            let s = regularize::surgery(&gd.fan, seed, r.beta, sc.t1, 40).map_err(numerical)?;
            cut.row(&[f(r.beta), f(s.t_cut), f(s.a1), f(s.a2), f((s.a2 - s.a1).abs() / r.beta)]);
        }
    }
    Ok(vec![csv.done(), cut.done()])
}

fn manifest(cmd: Command, sc: &Scenario, seed: u64, tables: &[Table]) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "tool = tunnelshock {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "subcommand = {}", cmd.name());
    let _ = writeln!(m, "seed = {seed}");
    for (name, text) in tables {
        let _ = writeln!(m, "file = {name} ({} rows)", text.lines().count().saturating_sub(1));
    }
    let _ = writeln!(m, "\n# scenario\n{}", sc.source.trim_end());
    m
}

fn threads_from_env() -> Option<usize> {
    std::env::var("TUNNELSHOCK_THREADS").ok().and_then(|v| v.trim().parse().ok())
}

/// Parses arguments, runs the subcommand and writes its files. Returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_args(args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_args(args: Args) -> Result<(), CliError> {
    let path = args
        .scenario
        .ok_or_else(|| CliError::Usage("--scenario <path> is required".into()))?;
    let mut sc = Scenario::from_file(&path)?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    let out = args
        .out
        .or_else(|| sc.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads.or_else(threads_from_env) {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let tables = pool.install(|| execute(args.command, &sc))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(e.to_string()))?;
    for (name, text) in &tables {
        std::fs::write(out.join(name), text).map_err(|e| CliError::Io(e.to_string()))?;
    }
    std::fs::write(out.join("manifest.txt"), manifest(args.command, &sc, sc.seed, &tables))
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}
