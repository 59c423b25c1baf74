//! Independent ground truth: a brute-force Hopf–Lax minimizer, a Godunov
//! solver for the momentum conservation law and an explicit lattice solver
//! for the Kolmogorov–Feller equation
//! `h u_t = A h² u_xx + V u + Σ λ_k (u(x − hν_k) − u(x))`.

use rayon::prelude::*;
use thiserror::Error;

use crate::density::GeneralizedDensity;
use crate::expr::{EvalError, Expression};
use crate::manifold::slice_at;
use crate::numerics::{fit_slope, linspace};
use crate::symbol::{SymbolError, SymbolModel, MOMENTUM_BOX};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("minimizer at the edge of the search box [{lo}, {hi}]")]
    BoxTooSmall { lo: f64, hi: f64 },
    #[error("symbol depends on x; the oracle needs a homogeneous symbol")]
    NotHomogeneous,
    #[error("time step {dt} exceeds the stability bound {bound}")]
    Stability { dt: f64, bound: f64 },
    #[error("jump shift h·ν = {shift} is not a multiple of the grid step {dx}")]
    Incommensurate { shift: f64, dx: f64 },
    #[error("solution reached the lattice boundary at t = {t}")]
    BoundaryContact { t: f64 },
    #[error("empty comparison set")]
    EmptyComparison,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Upstream(String),
}

/// Points of the coarse Hopf–Lax grid.
pub const HOPF_LAX_POINTS: usize = 2001;

/// `L(v) = sup_p (v p − P(p))`. Outside the range of `∂P/∂p` on the momentum
/// box the supremum sits on the box edge, which also yields the correct
/// one-sided limits (e.g. `L(0) = λ` for a pure jump symbol).
pub fn lagrangian(m: &SymbolModel, v: f64, t: f64) -> Result<f64, SymbolError> {
    match m.legendre(0.0, v, t) {
        Ok((_, l)) => Ok(l),
        Err(SymbolError::NoRoot { .. }) => {
            let (lo, hi) = MOMENTUM_BOX;
            let edge = if m.eval_dp_dp(0.0, lo, t)? > v { lo } else { hi };
            Ok(v * edge - m.eval_p(0.0, edge, t)?)
        }
        Err(e) => Err(e),
    }
}

/// `S(x, t) = min_y S₀(y) + t L((x − y)/t)` on a grid over `y_box`, refined
/// once around the coarse argmin.
pub fn hopf_lax(
    m: &SymbolModel,
    s0: &Expression,
    x: f64,
    t: f64,
    y_box: (f64, f64),
) -> Result<f64, OracleError> {
    if !m.is_homogeneous() {
        return Err(OracleError::NotHomogeneous);
    }
    if !(t > 0.0) || !(y_box.1 > y_box.0) {
        return Err(OracleError::Invalid(format!("t = {t}, box = {y_box:?}")));
    }
    let cost = |y: f64| -> Result<f64, OracleError> {
        Ok(s0.eval(y, 0.0)? + t * lagrangian(m, (x - y) / t, t)?)
    };
    let argmin = |ys: &[f64]| -> Result<(usize, f64), OracleError> {
        let mut best = (0, f64::INFINITY);
        for (i, &y) in ys.iter().enumerate() {
            let c = cost(y)?;
            if c < best.1 {
                best = (i, c);
            }
        }
        Ok(best)
    };
    let ys = linspace(y_box.0, y_box.1, HOPF_LAX_POINTS);
    let (i, _) = argmin(&ys)?;
    if i == 0 || i == ys.len() - 1 {
        return Err(OracleError::BoxTooSmall {
            lo: y_box.0,
            hi: y_box.1,
        });
    }
    let fine = linspace(ys[i - 1], ys[i + 1], HOPF_LAX_POINTS);
    Ok(argmin(&fine)?.1)
}

/// Cell-centred momentum field of the conservation law `p_t + P(p)_x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GodunovField {
    pub t: f64,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    /// Velocity `∂P/∂p(p)`.
    pub u: Vec<f64>,
    /// Shock positions from steepest compressive gradients.
    pub shocks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GodunovConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
    /// Courant number `Δt·max|∂P/∂p|/Δx`, at most 1.
    pub cfl: f64,
}

impl GodunovConfig {
    pub fn new(x_min: f64, x_max: f64, cells: usize) -> Self {
        GodunovConfig {
            x_min,
            x_max,
            cells,
            cfl: 0.5,
        }
    }
}

/// Exact Riemann flux of a convex `P`: minimum over `[p_l, p_r]` when
/// `p_l ≤ p_r`, maximum over `[p_r, p_l]` otherwise.
fn godunov_flux(m: &SymbolModel, sonic: Option<f64>, pl: f64, pr: f64, t: f64) -> Result<f64, SymbolError> {
    let (fl, fr) = (m.eval_p(0.0, pl, t)?, m.eval_p(0.0, pr, t)?);
    if pl <= pr {
        let mut f = fl.min(fr);
        if let Some(s) = sonic {
            if s > pl && s < pr {
                f = f.min(m.eval_p(0.0, s, t)?);
            }
        }
        Ok(f)
    } else {
        Ok(fl.max(fr))
    }
}

pub fn godunov(
    m: &SymbolModel,
    p0: &Expression,
    t_end: f64,
    cfg: &GodunovConfig,
) -> Result<GodunovField, OracleError> {
    if !m.is_homogeneous() {
        return Err(OracleError::NotHomogeneous);
    }
    if cfg.cells < 3 || !(cfg.x_max > cfg.x_min) || !(t_end >= 0.0) {
        return Err(OracleError::Invalid("bad Godunov grid".into()));
    }
    if !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(OracleError::Stability {
            dt: cfg.cfl,
            bound: 1.0,
        });
    }
    let n = cfg.cells;
    let dx = (cfg.x_max - cfg.x_min) / n as f64;
    let x: Vec<f64> = (0..n).map(|i| cfg.x_min + (i as f64 + 0.5) * dx).collect();
    let mut p = x.iter().map(|&xi| p0.eval(xi, 0.0)).collect::<Result<Vec<_>, _>>()?;
    let mut t = 0.0;
    let mut flux = vec![0.0; n + 1];
    while t < t_end {
        let sonic = m.legendre(0.0, 0.0, t).ok().map(|r| r.0);
        let mut speed: f64 = 1e-12;
        for &pi in &p {
            speed = speed.max(m.eval_dp_dp(0.0, pi, t)?.abs());
        }
        let dt = (cfg.cfl * dx / speed).min(t_end - t);
        // transmissive boundaries: ghost cells copy the edge values
        for (k, f) in flux.iter_mut().enumerate() {
            let pl = p[k.saturating_sub(1)];
            let pr = p[k.min(n - 1)];
            *f = godunov_flux(m, sonic, pl, pr, t)?;
        }
        for i in 0..n {
            p[i] -= dt / dx * (flux[i + 1] - flux[i]);
        }
        t += dt;
    }
    let u = p
        .iter()
        .map(|&pi| m.eval_dp_dp(0.0, pi, t_end))
        .collect::<Result<Vec<_>, _>>()?;
    let shocks = steepest_fronts(&x, &u, dx);
    Ok(GodunovField {
        t: t_end,
        x,
        p,
        u,
        shocks,
    })
}

/// Interfaces where the compressive jump `u_i − u_{i+1}` is a local maximum
/// and exceeds a quarter of the field's oscillation.
fn steepest_fronts(x: &[f64], u: &[f64], dx: f64) -> Vec<f64> {
    let osc = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - u.iter().cloned().fold(f64::INFINITY, f64::min);
    let d: Vec<f64> = u.windows(2).map(|w| w[0] - w[1]).collect();
    let mut out = Vec::new();
    for i in 0..d.len() {
        let left = if i > 0 { d[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < d.len() { d[i + 1] } else { f64::NEG_INFINITY };
        if d[i] > 0.25 * osc && d[i] >= left && d[i] > right {
            out.push(x[i] + 0.5 * dx);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
    pub h: f64,
    /// Requested step; `None` takes the stability bound.
    pub dt: Option<f64>,
    /// Edge cells may carry at most this fraction of `max u`.
    pub contact_tol: f64,
}

impl LatticeConfig {
    pub fn new(x_min: f64, x_max: f64, dx: f64, h: f64) -> Self {
        LatticeConfig {
            x_min,
            x_max,
            dx,
            h,
            dt: None,
            contact_tol: 1e-8,
        }
    }
}

/// One lattice snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub t: f64,
    pub h: f64,
    pub dx: f64,
    /// Step used, below `dt_bound`.
    pub dt: f64,
    pub dt_bound: f64,
    /// Grid shift per jump.
    pub reach: Vec<isize>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl LatticeField {
    /// `−h log u`, the lattice estimate of the action.
    pub fn minus_h_log_u(&self) -> Vec<f64> {
        self.u.iter().map(|&u| -self.h * u.ln()).collect()
    }
}

/// Cells at each edge watched for boundary contact.
const EDGE_CELLS: usize = 5;

/// Explicit lattice solution, sampled at `times` (increasing, ≥ 0). The
/// initial field extends frozen beyond the grid.
pub fn kf_lattice(
    m: &SymbolModel,
    u0: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &LatticeConfig,
    times: &[f64],
) -> Result<Vec<LatticeField>, OracleError> {
    let LatticeConfig { x_min, x_max, dx, h, .. } = *cfg;
    if !(dx > 0.0 && h > 0.0 && x_max > x_min) {
        return Err(OracleError::Invalid("lattice needs dx, h > 0 and a nonempty box".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(OracleError::Invalid("snapshot times must increase from 0".into()));
    }
    let n = ((x_max - x_min) / dx).round() as usize + 1;
    let mut reach = Vec::new();
    for j in &m.jumps {
        let shift = h * j.nu / dx;
        let k = shift.round();
        if (shift - k).abs() > 1e-9 * shift.abs().max(1.0) {
            return Err(OracleError::Incommensurate { shift: h * j.nu, dx });
        }
        reach.push(k as isize);
    }
    let pad = reach.iter().map(|r| r.unsigned_abs()).max().unwrap_or(0).max(1);
    let xs: Vec<f64> = (0..n + 2 * pad)
        .map(|i| x_min + (i as f64 - pad as f64) * dx)
        .collect();
    let mut u: Vec<f64> = xs.iter().map(|&x| u0(x)).collect();
    if u.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(OracleError::Invalid("initial field must be finite and non-negative".into()));
    }
    let t_last = times.last().copied().unwrap_or(0.0);
    let dt_bound = stability_bound(m, &xs, &u, h, dx, t_last)?;
    let dt_max = match cfg.dt {
        Some(dt) if dt > dt_bound => return Err(OracleError::Stability { dt, bound: dt_bound }),
        Some(dt) => dt,
        None => dt_bound,
    };
    let interior = pad..pad + n;
    let mut next = u.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let coef = |c: &crate::symbol::Coef, t: f64| -> Result<Vec<f64>, EvalError> {
        xs.iter().map(|&x| c.eval(x, t)).collect()
    };
    let time_dependent = m.time_dependent;
    let (mut a, mut v, mut lam) = (coef(&m.a, 0.0)?, coef(&m.v, 0.0)?, Vec::new());
    for j in &m.jumps {
        lam.push(coef(&j.rate, 0.0)?);
    }
    for &target in times {
        let steps = ((target - t) / dt_max - 1e-9).ceil().max(0.0) as usize;
        let dt = if steps > 0 { (target - t) / steps as f64 } else { 0.0 };
        for _ in 0..steps {
            if time_dependent {
                a = coef(&m.a, t)?;
                v = coef(&m.v, t)?;
                for (l, j) in lam.iter_mut().zip(&m.jumps) {
                    *l = coef(&j.rate, t)?;
                }
            }
            for i in interior.clone() {
                let mut du = a[i] * h / (dx * dx) * (u[i + 1] - 2.0 * u[i] + u[i - 1]);
                for (k, &r) in reach.iter().enumerate() {
                    let src = (i as isize - r) as usize;
                    du += lam[k][i] / h * (u[src] - u[i]);
                }
                next[i] = (u[i] + dt * du) * (v[i] * dt / h).exp();
            }
            std::mem::swap(&mut u, &mut next);
            // frozen extension: padding keeps its initial values in both buffers
            t += dt;
        }
        t = target;
        let field: Vec<f64> = u[interior.clone()].to_vec();
        let peak = field.iter().cloned().fold(0.0, f64::max);
        let edge = field[..EDGE_CELLS.min(n)]
            .iter()
            .chain(&field[n.saturating_sub(EDGE_CELLS)..])
            .cloned()
            .fold(0.0, f64::max);
        if peak > 0.0 && edge > cfg.contact_tol * peak {
            return Err(OracleError::BoundaryContact { t });
        }
        out.push(LatticeField {
            t,
            h,
            dx,
            dt: if dt > 0.0 { dt } else { dt_max },
            dt_bound,
            reach: reach.clone(),
            x: xs[interior.clone()].to_vec(),
            u: field,
        });
    }
    Ok(out)
}

/// `0.4·min(Δx²/(2 max A h), Δx/max|∂P/∂p|, h/max Σλ)`, with coefficients
/// sampled on the grid at the start and end times and momenta taken from
/// the initial field, `p = −h (log u)_x`.
fn stability_bound(
    m: &SymbolModel,
    xs: &[f64],
    u: &[f64],
    h: f64,
    dx: f64,
    t_end: f64,
) -> Result<f64, OracleError> {
    let mut bound = f64::INFINITY;
    let peak = u.iter().cloned().fold(0.0, f64::max);
    for &t in &[0.0, t_end] {
        let mut a_max: f64 = 0.0;
        let mut lam_max: f64 = 0.0;
        let mut speed: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            a_max = a_max.max(m.a.eval(x, t)?);
            let mut lam = 0.0;
            for j in &m.jumps {
                lam += j.rate.eval(x, t)?;
            }
            lam_max = lam_max.max(lam);
            if i > 0 && i + 1 < xs.len() && u[i] > 1e-12 * peak && u[i - 1] > 0.0 && u[i + 1] > 0.0 {
                let p = -h * (u[i + 1].ln() - u[i - 1].ln()) / (2.0 * dx);
                if p.abs() < MOMENTUM_BOX.1 {
                    speed = speed.max(m.eval_dp_dp(x, p, t)?.abs());
                }
            }
        }
        if a_max > 0.0 {
            bound = bound.min(dx * dx / (2.0 * a_max * h));
        }
        if speed > 0.0 {
            bound = bound.min(dx / speed);
        }
        if lam_max > 0.0 {
            bound = bound.min(h / lam_max);
        }
    }
    if !bound.is_finite() {
        // pure potential: the exponential factor is exact for any step
        bound = 1.0;
    }
    Ok(0.4 * bound)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelRow {
    pub h: f64,
    /// `max |u e^{S/h} − √R|`.
    pub e_abs: f64,
    /// `max |u e^{S/h}/√R − 1|`.
    pub e_rel: f64,
    pub compared: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelReport {
    pub t: f64,
    pub rows: Vec<TunnelRow>,
    /// Slope of `log E` against `log h`; NaN for a single row.
    pub order: f64,
}

/// Shock collar for the comparison: `cells·Δx + smear·h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collar {
    pub cells: f64,
    pub smear: f64,
}

impl Default for Collar {
    fn default() -> Self {
        Collar { cells: 5.0, smear: 3.0 }
    }
}

/// Compares lattice snapshots (one per h, all at the same time) with
/// `e^{−S/h}√R` on lattice points in `window` with a single covering branch
/// away from shocks.
pub fn tunnel_compare(
    gd: &GeneralizedDensity,
    runs: &[LatticeField],
    window: (f64, f64),
    collar: Collar,
) -> Result<TunnelReport, OracleError> {
    let t = runs
        .first()
        .ok_or(OracleError::EmptyComparison)?
        .t;
    if runs.iter().any(|r| (r.t - t).abs() > 1e-12) {
        return Err(OracleError::Invalid("snapshots must share one time".into()));
    }
    let curve = slice_at(&gd.fan, t).map_err(|e| OracleError::Upstream(e.to_string()))?;
    let fronts: Vec<f64> = gd.shocks.iter().filter_map(|s| s.position(t)).collect();
    let rows = runs
        .par_iter()
        .map(|run| {
            let width = collar.cells * run.dx + collar.smear * run.h;
            let mut row = TunnelRow {
                h: run.h,
                e_abs: 0.0,
                e_rel: 0.0,
                compared: 0,
            };
            for (&x, &u) in run.x.iter().zip(&run.u) {
                if x < window.0 || x > window.1 || fronts.iter().any(|f| (x - f).abs() <= width) {
                    continue;
                }
                let cover = curve.covering(x);
                if cover.len() != 1 || cover[0].j.abs() < 1e-8 || !(u > 0.0) {
                    continue;
                }
                let pt = &cover[0];
                let sqrt_r = gd
                    .r_point(pt)
                    .map_err(|e| OracleError::Upstream(e.to_string()))?
                    .sqrt();
                let amp = (u.ln() + pt.s / run.h).exp();
                row.e_abs = row.e_abs.max((amp - sqrt_r).abs());
                row.e_rel = row.e_rel.max((amp / sqrt_r - 1.0).abs());
                row.compared += 1;
            }
            if row.compared == 0 {
                return Err(OracleError::EmptyComparison);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let order = if rows.len() > 1 {
        let lh: Vec<f64> = rows.iter().map(|r| r.h.ln()).collect();
        let le: Vec<f64> = rows.iter().map(|r| r.e_abs.ln()).collect();
        fit_slope(&lh, &le)
    } else {
        f64::NAN
    };
    Ok(TunnelReport { t, rows, order })
}
