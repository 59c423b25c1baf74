//! Smooth regularization of δ-shocks. Characteristics entering a shock are
//! blended into a plateau moving with the Rankine–Hugoniot speed, which
//! keeps the Jacobian positive at scale ε. The inhomogeneous case is
//! prepared by a Lagrangian surgery that replaces the folded part of the
//! curve by a vertical segment and pulls it back in time.

use std::sync::Arc;

use thiserror::Error;

use crate::characteristics::{
    advance, AField, Fan, Flow, FlowError, HamiltonFlow, InitialData, State, AI, DP, DX, P, S, X,
};
use crate::density::GeneralizedDensity;
use crate::expr::{EvalError, Expression};
use crate::manifold::{
    first_singularity, left_branch, right_branch, slice_at, slice_index, LagrangianCurve,
    ManifoldError, Singularity,
};
use crate::numerics::{brent, hermite, interval_index, simpson};
use crate::symbol::{SymbolError, SymbolModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegularizeError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid regularization: {0}")]
    Invalid(String),
    #[error("insertion does not focus: K = {0}")]
    NoFocus(f64),
    #[error("no shift A in [0, 100] reaches min J = {target:.3e} (best {best:.3e})")]
    TuningFailed { target: f64, best: f64 },
    #[error("trajectories cross at t = {t} near x0 = {x0}")]
    Crossing { t: f64, x0: f64 },
    #[error("pulled-back curve folds at x = {x}: t1 too large")]
    Irregular { x: f64 },
}

/// Shape of the blending function `B`, increasing from 0 to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendProfile {
    /// `(1 + tanh z) / 2`.
    #[default]
    Tanh,
    /// Quintic smoothstep on `[−1, 1]`, exactly 0 and 1 outside.
    Smoothstep,
}

impl BlendProfile {
    pub fn parse(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "tanh" => Some(BlendProfile::Tanh),
            "smoothstep" => Some(BlendProfile::Smoothstep),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlendProfile::Tanh => "tanh",
            BlendProfile::Smoothstep => "smoothstep",
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        match self {
            BlendProfile::Tanh => 0.5 * (1.0 + z.tanh()),
            BlendProfile::Smoothstep => {
                let s = (0.5 * (z + 1.0)).clamp(0.0, 1.0);
                s * s * s * (10.0 + s * (6.0 * s - 15.0))
            }
        }
    }

    pub fn slope(&self, z: f64) -> f64 {
        match self {
            BlendProfile::Tanh => {
                let th = z.tanh();
                0.5 * (1.0 - th * th)
            }
            BlendProfile::Smoothstep => {
                let s = 0.5 * (z + 1.0);
                if !(0.0..=1.0).contains(&s) {
                    return 0.0;
                }
                15.0 * s * s * (1.0 - s) * (1.0 - s)
            }
        }
    }

    /// Checks the limits and monotonicity on samples.
    pub fn check(&self) -> bool {
        let zs: Vec<f64> = (0..=400).map(|i| -20.0 + 0.1 * i as f64).collect();
        let vs: Vec<f64> = zs.iter().map(|&z| self.value(z)).collect();
        vs[0] < 1e-12 && vs[vs.len() - 1] > 1.0 - 1e-12 && vs.windows(2).all(|w| w[1] >= w[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationParams {
    pub epsilon: f64,
    pub beta: f64,
    /// Blend shift in units of ε; tuned automatically when `None`.
    pub a_shift: Option<f64>,
    /// Target constant: the tuned shift reaches `min J ≥ c_target ε / 2`.
    pub c_target: f64,
    pub profile: BlendProfile,
    /// Pull-back time of the surgery.
    pub t1: f64,
}

impl RegularizationParams {
    /// `β = √ε`, tanh profile, tuned shift.
    pub fn new(epsilon: f64) -> Self {
        RegularizationParams {
            epsilon,
            beta: epsilon.sqrt(),
            a_shift: None,
            c_target: 1.0,
            profile: BlendProfile::Tanh,
            t1: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), RegularizeError> {
        let bad = |m: &str| Err(RegularizeError::Invalid(m.into()));
        if !(self.epsilon > 0.0) || !(self.beta > 0.0) || !(self.t1 > 0.0) || !(self.c_target > 0.0) {
            return bad("epsilon, beta, t1 and c_target must be positive");
        }
        if self.epsilon > self.beta * self.beta * (1.0 + 1e-12) {
            return bad("epsilon must not exceed beta²");
        }
        if !self.profile.check() {
            return bad("blend profile is not monotone from 0 to 1");
        }
        Ok(())
    }
}

/// Rankine–Hugoniot quotient of two states. A degenerate jump falls back
/// to the one-sided velocity and sets `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauSpeed {
    pub c: f64,
    pub degenerate: bool,
}

pub fn plateau_speed(
    model: &SymbolModel,
    (x_l, p_l): (f64, f64),
    (x_r, p_r): (f64, f64),
    t: f64,
) -> Result<PlateauSpeed, SymbolError> {
    let dp = p_r - p_l;
    if dp.abs() <= 1e-12 {
        return Ok(PlateauSpeed {
            c: model.eval_dp_dp(x_l, p_l, t)?,
            degenerate: true,
        });
    }
    Ok(PlateauSpeed {
        c: (model.eval_p(x_r, p_r, t)? - model.eval_p(x_l, p_l, t)?) / dp,
        degenerate: false,
    })
}

/// Replacement data on `(x0* − β, x0* + β)`: the velocity `∂P/∂p(u₁)` is
/// linear in `x0`, `−K(t) x0 + b(t)`, and matches the outside data at both ends.
#[derive(Debug, Clone)]
pub struct Insertion {
    model: Arc<SymbolModel>,
    pub x0_star: f64,
    pub beta: f64,
    pub p_minus: f64,
    pub p_plus: f64,
    /// Time at which the whole insertion reaches one point.
    pub t_focal: f64,
    pub x_focal: f64,
}

pub fn build_insertion(
    model: Arc<SymbolModel>,
    init: &InitialData,
    x0_star: f64,
    beta: f64,
) -> Result<Insertion, RegularizeError> {
    if !model.is_homogeneous() {
        return Err(RegularizeError::Invalid("insertion needs an x-independent symbol".into()));
    }
    let (lo, hi) = (x0_star - beta, x0_star + beta);
    let mut ins = Insertion {
        model,
        x0_star,
        beta,
        p_minus: init.momentum(lo)?,
        p_plus: init.momentum(hi)?,
        t_focal: f64::NAN,
        x_focal: f64::NAN,
    };
    for x in [lo, hi] {
        if ins.model.eval_hess(x, init.momentum(x)?, 0.0)? <= 0.0 {
            return Err(RegularizeError::Invalid("symbol is not convex in p".into()));
        }
    }
    let k0 = ins.k(0.0)?;
    ins.t_focal = if !ins.model.time_dependent {
        if k0 <= 0.0 {
            return Err(RegularizeError::NoFocus(k0));
        }
        1.0 / k0
    } else {
        let cum = |t: f64| -> Option<f64> {
            let mut err = None;
            let v = simpson(
                |s| match ins.k(s) {
                    Ok(k) => k,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                },
                0.0,
                t,
                200,
            );
            err.is_none().then_some(v - 1.0)
        };
        let mut t_hi = 1.0;
        while cum(t_hi).is_some_and(|v| v < 0.0) && t_hi < 1e4 {
            t_hi *= 2.0;
        }
        brent(cum, 0.0, t_hi, 1e-13, 200).ok_or(RegularizeError::NoFocus(k0))?
    };
    ins.x_focal = ins.position(x0_star, ins.t_focal)?;
    Ok(ins)
}

impl Insertion {
    fn end_velocities(&self, t: f64) -> Result<(f64, f64), SymbolError> {
        let m = &self.model;
        Ok((
            m.eval_dp_dp(self.x0_star - self.beta, self.p_minus, t)?,
            m.eval_dp_dp(self.x0_star + self.beta, self.p_plus, t)?,
        ))
    }

    pub fn k(&self, t: f64) -> Result<f64, SymbolError> {
        let (vm, vp) = self.end_velocities(t)?;
        Ok((vm - vp) / (2.0 * self.beta))
    }

    pub fn b(&self, t: f64) -> Result<f64, SymbolError> {
        let (vm, vp) = self.end_velocities(t)?;
        Ok(0.5 * (vm + vp) + self.k(t)? * self.x0_star)
    }

    pub fn velocity(&self, x0: f64, t: f64) -> Result<f64, SymbolError> {
        Ok(-self.k(t)? * x0 + self.b(t)?)
    }

    /// `u₁(x0, t)`: the momentum with the prescribed velocity.
    pub fn momentum(&self, x0: f64, t: f64) -> Result<f64, SymbolError> {
        Ok(self.model.legendre(x0, self.velocity(x0, t)?, t)?.0)
    }

    /// Position of an unblended insertion trajectory.
    pub fn position(&self, x0: f64, t: f64) -> Result<f64, SymbolError> {
        if !self.model.time_dependent {
            return Ok(x0 + t * self.velocity(x0, 0.0)?);
        }
        let mut err = None;
        let v = simpson(
            |s| {
                self.velocity(x0, s).unwrap_or_else(|e| {
                    err = Some(e);
                    0.0
                })
            },
            0.0,
            t,
            400,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(x0 + v),
        }
    }
}

/// How a row of a blended fan is driven.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    /// Insertion trajectory with prescribed velocity `−K x0 + b`.
    Insertion,
    /// Hamiltonian trajectory blended into the plateau around time `tau`
    /// (never when infinite); `dtau = dτ/dx0`.
    Outer { tau: f64, dtau: f64 },
}

/// Knots of the plateau path: before focusing the core's centre
/// trajectory, afterwards the path driven by the Rankine–Hugoniot speed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauPath {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    /// Path slope used for interpolation.
    pub slope: Vec<f64>,
    /// Blend speed `c`.
    pub c: Vec<f64>,
    pub t_focal: f64,
    /// Number of degenerate (equal-momentum) speed evaluations.
    pub degenerate: usize,
}

impl PlateauPath {
    fn pair(&self, t: f64) -> usize {
        interval_index(&self.t, t)
    }

    pub fn x_at(&self, t: f64) -> f64 {
        if self.t.len() == 1 {
            return self.x[0];
        }
        let i = self.pair(t);
        hermite(
            self.t[i],
            self.t[i + 1],
            self.x[i],
            self.x[i + 1],
            self.slope[i],
            self.slope[i + 1],
            t,
        )
    }

    pub fn c_at(&self, t: f64) -> f64 {
        if self.t.len() == 1 {
            return self.c[0];
        }
        let i = self.pair(t);
        let w = ((t - self.t[i]) / (self.t[i + 1] - self.t[i])).clamp(0.0, 1.0);
        self.c[i] + w * (self.c[i + 1] - self.c[i])
    }
}

/// The part of the fan that collapses: core boundary coordinates and the
/// focusing point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Core {
    pub x0_l: f64,
    pub x0_r: f64,
    pub t_focal: f64,
    pub x_focal: f64,
}

/// Characteristic system blended into the plateau speed.
pub struct BlendedFlow {
    model: Arc<SymbolModel>,
    a_field: AField,
    profile: BlendProfile,
    epsilon: f64,
    /// `Aε`: the blend is centred `Aε` before each row's arrival time.
    shift: f64,
    x0: Vec<f64>,
    kinds: Vec<RowKind>,
    insertion: Option<Insertion>,
    t_focal: f64,
    plateau: Arc<PlateauPath>,
}

impl BlendedFlow {
    fn blend(&self, tau: f64, t: f64) -> (f64, f64) {
        if !tau.is_finite() {
            return (0.0, 0.0);
        }
        let z = (t - tau + self.shift) / self.epsilon;
        (self.profile.value(z), self.profile.slope(z))
    }
}

impl Flow for BlendedFlow {
    fn rhs(&self, row: usize, t: f64, y: &State) -> Result<State, FlowError> {
        let c = self.plateau.c_at(t);
        match self.kinds[row] {
            RowKind::Insertion => {
                let ins = self
                    .insertion
                    .as_ref()
                    .ok_or_else(|| FlowError::Invalid("insertion row without insertion".into()))?;
                let (b, _) = self.blend(self.t_focal, t);
                let x0 = self.x0[row];
                let w = ins.velocity(x0, t)?;
                let j = self.model.jet(y[X], y[P], t)?;
                let xdot = (1.0 - b) * w + b * c;
                let a = self.a_field.value(y[X], xdot, t, j.p_xp)?;
                Ok([
                    xdot,
                    0.0,
                    y[P] * xdot - j.p,
                    -(1.0 - b) * ins.k(t)?,
                    0.0,
                    (1.0 - b) * a,
                ])
            }
            RowKind::Outer { tau, dtau } => {
                let (b, db) = self.blend(tau, t);
                let j = self.model.jet(y[X], y[P], t)?;
                let a = self.a_field.value(y[X], j.p_p, t, j.p_xp)?;
                // ∂B/∂x0 through the row's arrival time
                let bx = if db == 0.0 { 0.0 } else { -db * dtau / self.epsilon };
                let xdot = (1.0 - b) * j.p_p + b * c;
                Ok([
                    xdot,
                    -(1.0 - b) * j.p_x,
                    y[P] * xdot - j.p,
                    (1.0 - b) * (j.p_xp * y[DX] + j.p_pp * y[DP]) + bx * (c - j.p_p),
                    -(1.0 - b) * (j.p_xx * y[DX] + j.p_xp * y[DP]) + bx * j.p_x,
                    (1.0 - b) * a,
                ])
            }
        }
    }

    fn model(&self) -> &SymbolModel {
        &self.model
    }
}

/// One-sided states entering the core at `x` on the curve at grid `k`.
fn arrival(
    curve: &LagrangianCurve,
    x: f64,
    hint: (f64, f64),
) -> Result<(crate::manifold::BranchPoint, crate::manifold::BranchPoint), RegularizeError> {
    let t = curve.t;
    let gone = || RegularizeError::Manifold(ManifoldError::BranchExhausted { id: 0, t });
    let lb = left_branch(curve, hint.0).ok_or_else(gone)?;
    let rb = right_branch(curve, hint.1).ok_or_else(gone)?;
    let (l_lo, l_hi) = curve.branch_range(lb);
    let (r_lo, r_hi) = curve.branch_range(rb);
    let l = curve.branch_at(lb, x.clamp(l_lo, l_hi)).ok_or_else(gone)?;
    let r = curve.branch_at(rb, x.clamp(r_lo, r_hi)).ok_or_else(gone)?;
    Ok((l, r))
}

fn boundary_speed(
    plain: &Fan,
    curve: &LagrangianCurve,
    core: &Core,
) -> Result<PlateauSpeed, RegularizeError> {
    let t = curve.t;
    let gone = || RegularizeError::Manifold(ManifoldError::BranchExhausted { id: 0, t });
    // boundary rows of a surgery curve are samples; insertion ends are interpolated
    let state = |x0: f64, left: bool| -> Result<(f64, f64), RegularizeError> {
        if let Some(i) = plain.x0.iter().position(|&v| v == x0) {
            return Ok((curve.states[i][X], curve.states[i][P]));
        }
        let b = if left { left_branch(curve, x0) } else { right_branch(curve, x0) };
        let pt = curve.branch_at_x0(b.ok_or_else(gone)?, x0).ok_or_else(gone)?;
        Ok((pt.x, pt.p))
    };
    let l = state(core.x0_l, true)?;
    let r = state(core.x0_r, false)?;
    Ok(plateau_speed(plain.model(), l, r, t)?)
}

/// Plateau path on the plain fan's grid. `center` holds the position and
/// velocity of the core's centre trajectory at every grid time before
/// focusing; afterwards the path follows the speed of the states arriving
/// from both sides, integrated by Heun's method.
pub fn plateau_path(
    plain: &Fan,
    core: &Core,
    center: &[(f64, f64)],
) -> Result<PlateauPath, RegularizeError> {
    let model = plain.model();
    let mut path = PlateauPath {
        t: Vec::new(),
        x: Vec::new(),
        slope: Vec::new(),
        c: Vec::new(),
        t_focal: core.t_focal,
        degenerate: 0,
    };
    let mut hint = (core.x0_l, core.x0_r);
    let mut focused = false;
    for (k, &t) in plain.times.iter().enumerate() {
        let curve = slice_index(plain, k);
        if t < core.t_focal - 1e-12 {
            let sp = boundary_speed(plain, &curve, core)?;
            path.degenerate += sp.degenerate as usize;
            let (x, v) = center[k];
            path.t.push(t);
            path.x.push(x);
            path.slope.push(v);
            path.c.push(sp.c);
            continue;
        }
        if !focused {
            focused = true;
            let cf = slice_at(plain, core.t_focal)?;
            let sp = boundary_speed(plain, &cf, core)?;
            path.degenerate += sp.degenerate as usize;
            if t > core.t_focal + 1e-12 {
                path.t.push(core.t_focal);
                path.x.push(core.x_focal);
                path.slope.push(sp.c);
                path.c.push(sp.c);
            }
        }
        let n = path.t.len();
        let speed = |x: f64, hint: (f64, f64)| -> Result<(PlateauSpeed, (f64, f64)), RegularizeError> {
            let (l, r) = arrival(&curve, x, hint)?;
            let sp = plateau_speed(model, (x, l.p), (x, r.p), t)?;
            Ok((sp, (l.x0, r.x0)))
        };
        let (x, sp, h) = if n == 0 {
            // focusing exactly on the first grid time
            let (sp, h) = speed(core.x_focal, hint)?;
            (core.x_focal, sp, h)
        } else {
            let (tp, xp, cp) = (path.t[n - 1], path.x[n - 1], path.c[n - 1]);
            let dt = t - tp;
            let (pred, _) = speed(xp + dt * cp, hint)?;
            let x = xp + 0.5 * dt * (cp + pred.c);
            let (sp, h) = speed(x, hint)?;
            (x, sp, h)
        };
        hint = h;
        path.degenerate += sp.degenerate as usize;
        path.t.push(t);
        path.x.push(x);
        path.slope.push(sp.c);
        path.c.push(sp.c);
    }
    Ok(path)
}

/// Arrival time of a plain row at the plateau and `dτ/dx0`; `None` if it
/// does not arrive within the fan's horizon.
fn absorption(
    plain: &Fan,
    path: &PlateauPath,
    core: &Core,
    row: usize,
) -> Result<Option<(f64, f64)>, RegularizeError> {
    let x0 = plain.x0[row];
    let side = if x0 <= core.x0_l {
        1.0
    } else if x0 >= core.x0_r {
        -1.0
    } else {
        return Ok(None);
    };
    let gap = |t: f64| -> Option<f64> {
        let y = plain.state_at(row, t).ok()?;
        Some(side * (y[X] - path.x_at(t)))
    };
    let tf = core.t_focal;
    let mut tau = None;
    match gap(tf) {
        Some(g) if g >= -1e-12 => tau = Some(tf),
        Some(_) => {
            let mut t_prev = tf;
            for k in 0..plain.times.len() {
                let t = plain.times[k];
                if t <= tf {
                    continue;
                }
                let y = plain.rows[row][k];
                if !y[X].is_finite() {
                    break;
                }
                if side * (y[X] - path.x_at(t)) >= 0.0 {
                    tau = Some(brent(gap, t_prev, t, 1e-14, 200).unwrap_or(t));
                    break;
                }
                t_prev = t;
            }
        }
        None => return Ok(None),
    }
    let tau = match tau {
        Some(t) => t,
        None => {
            // arrival after the horizon: extrapolate with the final velocities
            let kl = plain.times.len() - 1;
            let (tl, y) = (plain.times[kl], plain.rows[row][kl]);
            if !y[X].is_finite() {
                return Ok(None);
            }
            let u = plain.model().eval_dp_dp(y[X], y[P], tl)?;
            let closing = side * (u - path.c_at(tl));
            if closing <= 0.0 {
                return Ok(None);
            }
            let dtau = y[DX] / (path.c_at(tl) - u);
            return Ok(Some((tl + side * (path.x_at(tl) - y[X]) / closing, dtau)));
        }
    };
    let y = plain.state_at(row, tau)?;
    let u = plain.model().eval_dp_dp(y[X], y[P], tau)?;
    let rel = path.c_at(tau) - u;
    let dtau = if rel.abs() > 1e-14 { y[DX] / rel } else { 0.0 };
    Ok(Some((tau, dtau)))
}

/// Position slack of the ordering check: absorbed rows end up 1e-8 apart,
/// where the accumulated step-doubling error (local tolerance 1e-8) decides
/// their order. A real fold separates rows by a fraction of the grid step.
pub const ORDER_TOL: f64 = 1e-6;

/// A blended fan with everything needed to analyse it.
pub struct RegularizedFan {
    pub params: RegularizationParams,
    /// Tuned or prescribed shift `A` (the blend is centred `Aε` early).
    pub a_shift: f64,
    pub core: Core,
    pub insertion: Option<Insertion>,
    pub plateau: Arc<PlateauPath>,
    pub fan: Fan,
    pub kinds: Vec<RowKind>,
    /// First caustic of the plain fan.
    pub t_star: f64,
}

struct Assembly {
    model: Arc<SymbolModel>,
    a_field: AField,
    core: Core,
    insertion: Option<Insertion>,
    plateau: Arc<PlateauPath>,
    x0: Vec<f64>,
    initial: Vec<State>,
    kinds: Vec<RowKind>,
}

impl Assembly {
    fn flow(&self, params: &RegularizationParams, a: f64, rows: &[usize]) -> BlendedFlow {
        BlendedFlow {
            model: self.model.clone(),
            a_field: self.a_field.clone(),
            profile: params.profile,
            epsilon: params.epsilon,
            shift: a * params.epsilon,
            x0: rows.iter().map(|&i| self.x0[i]).collect(),
            kinds: rows.iter().map(|&i| self.kinds[i]).collect(),
            insertion: self.insertion.clone(),
            t_focal: self.core.t_focal,
            plateau: self.plateau.clone(),
        }
    }

    fn core_rows(&self) -> Vec<usize> {
        (0..self.x0.len())
            .filter(|&i| self.x0[i] > self.core.x0_l && self.x0[i] < self.core.x0_r)
            .collect()
    }

    /// Minimum Jacobian over sampled core rows at grid times after `t_from`.
    fn min_core_j(
        &self,
        params: &RegularizationParams,
        a: f64,
        plain: &Fan,
        t_from: f64,
    ) -> Result<f64, RegularizeError> {
        let core = self.core_rows();
        let step = (core.len() / 8).max(1);
        let rows: Vec<usize> = core.iter().copied().step_by(step).collect();
        let flow: Arc<dyn Flow> = Arc::new(self.flow(params, a, &rows));
        let x0: Vec<f64> = rows.iter().map(|&i| self.x0[i]).collect();
        let init: Vec<State> = rows.iter().map(|&i| self.initial[i]).collect();
        let fan = Fan::integrate(flow, x0, init, plain.times.clone(), plain.config.clone())?;
        let mut m = f64::INFINITY;
        for row in &fan.rows {
            for (k, y) in row.iter().enumerate() {
                if fan.times[k] >= t_from - 1e-12 && y[DX].is_finite() {
                    m = m.min(y[DX]);
                }
            }
        }
        Ok(m)
    }

    fn finish(
        self,
        params: &RegularizationParams,
        plain: &Fan,
        t_star: f64,
    ) -> Result<RegularizedFan, RegularizeError> {
        let t_from = t_star.max(plain.times[0]);
        let a = match params.a_shift {
            Some(a) => a,
            None => {
                let target = 0.5 * params.c_target * params.epsilon;
                let f = |a: f64| self.min_core_j(params, a, plain, t_from);
                if f(0.0)? >= target {
                    0.0
                } else {
                    let hi_val = f(100.0)?;
                    if hi_val < target {
                        return Err(RegularizeError::TuningFailed {
                            target,
                            best: hi_val,
                        });
                    }
                    let (mut lo, mut hi) = (0.0f64, 100.0f64);
                    while hi - lo > 1e-6 * hi.max(1e-3) {
                        let mid = 0.5 * (lo + hi);
                        if f(mid)? >= target {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    hi
                }
            }
        };
        let rows: Vec<usize> = (0..self.x0.len()).collect();
        let flow: Arc<dyn Flow> = Arc::new(self.flow(params, a, &rows));
        let fan = Fan::integrate(
            flow,
            self.x0.clone(),
            self.initial.clone(),
            plain.times.clone(),
            plain.config.clone(),
        )?;
        let out = RegularizedFan {
            params: params.clone(),
            a_shift: a,
            core: self.core,
            insertion: self.insertion,
            plateau: self.plateau,
            fan,
            kinds: self.kinds,
            t_star,
        };
        out.check_order()?;
        Ok(out)
    }
}

fn outer_rows(
    plain: &Fan,
    core: &Core,
    path: &PlateauPath,
    keep: impl Fn(f64) -> bool,
) -> Result<Vec<(f64, State, RowKind)>, RegularizeError> {
    let mut out = Vec::new();
    for i in 0..plain.len() {
        let x0 = plain.x0[i];
        if !keep(x0) {
            continue;
        }
        let kind = match absorption(plain, path, core, i)? {
            Some((tau, dtau)) => RowKind::Outer { tau, dtau },
            None => RowKind::Outer {
                tau: f64::INFINITY,
                dtau: 0.0,
            },
        };
        out.push((x0, plain.rows[i][0], kind));
    }
    Ok(out)
}

/// Homogeneous construction: the insertion replaces the data near the first
/// caustic, `n_core` insertion rows are added to the plain rows outside it,
/// and rows arriving at the plateau are blended into it.
pub fn blended_fan(
    plain: &Fan,
    init: &InitialData,
    a_field: AField,
    params: &RegularizationParams,
    n_core: usize,
) -> Result<RegularizedFan, RegularizeError> {
    params.validate()?;
    let model = Arc::new(plain.model().clone());
    let seed = first_singularity(plain)?;
    let ins = build_insertion(model.clone(), init, seed.x0, params.beta)?;
    let core = Core {
        x0_l: seed.x0 - params.beta,
        x0_r: seed.x0 + params.beta,
        t_focal: ins.t_focal,
        x_focal: ins.x_focal,
    };
    if core.t_focal > plain.times[plain.times.len() - 1] {
        return Err(RegularizeError::Invalid("insertion focuses after the horizon".into()));
    }
    let center = plain
        .times
        .iter()
        .map(|&t| Ok((ins.position(seed.x0, t)?, ins.velocity(seed.x0, t)?)))
        .collect::<Result<Vec<_>, SymbolError>>()?;
    let path = Arc::new(plateau_path(plain, &core, &center)?);
    let outer = outer_rows(plain, &core, &path, |x0| x0 <= core.x0_l || x0 >= core.x0_r)?;
    let n = n_core.max(2);
    let h = 2.0 * params.beta / n as f64;
    let mut core_rows = Vec::with_capacity(n);
    for j in 0..n {
        let x0 = core.x0_l + (j as f64 + 0.5) * h;
        let p = ins.momentum(x0, 0.0)?;
        let dp = -ins.k(0.0)? / model.eval_hess(x0, p, 0.0)?;
        core_rows.push((x0, [x0, p, init.action(x0)?, 1.0, dp, 0.0], RowKind::Insertion));
    }
    let mut all: Vec<(f64, State, RowKind)> = outer.into_iter().chain(core_rows).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let asm = Assembly {
        model,
        a_field,
        core,
        insertion: Some(ins),
        plateau: path,
        x0: all.iter().map(|r| r.0).collect(),
        initial: all.iter().map(|r| r.1).collect(),
        kinds: all.iter().map(|r| r.2).collect(),
    };
    asm.finish(params, plain, seed.t)
}

impl RegularizedFan {
    /// Blend value of row `i` at time `t`.
    pub fn blend_of(&self, i: usize, t: f64) -> f64 {
        let tau = match self.kinds[i] {
            RowKind::Insertion => self.core.t_focal,
            RowKind::Outer { tau, .. } => tau,
        };
        if !tau.is_finite() {
            return 0.0;
        }
        let eps = self.params.epsilon;
        self.params.profile.value((t - tau + self.a_shift * eps) / eps)
    }

    pub fn is_core(&self, i: usize) -> bool {
        let x0 = self.fan.x0[i];
        x0 > self.core.x0_l && x0 < self.core.x0_r
    }

    /// Fails if `x0 ↦ x(t)` decreases by more than [`ORDER_TOL`] at some
    /// grid time. Rows absorbed into the plateau converge to one position,
    /// so ties up to integration error are not crossings.
    pub fn check_order(&self) -> Result<(), RegularizeError> {
        for k in 0..self.fan.times.len() {
            let mut prev: Option<(f64, f64)> = None;
            for i in 0..self.fan.len() {
                let x = self.fan.rows[i][k][X];
                if !x.is_finite() {
                    continue;
                }
                if let Some((xp, _)) = prev {
                    if x < xp - ORDER_TOL {
                        return Err(RegularizeError::Crossing {
                            t: self.fan.times[k],
                            x0: self.fan.x0[i],
                        });
                    }
                }
                prev = Some((x, self.fan.x0[i]));
            }
        }
        Ok(())
    }

    /// Minimum of `J` over the core rows at grid times `t ≥ t_from`.
    pub fn min_core_j(&self, t_from: f64) -> f64 {
        let mut m = f64::INFINITY;
        for i in (0..self.fan.len()).filter(|&i| self.is_core(i)) {
            for (k, y) in self.fan.rows[i].iter().enumerate() {
                if self.fan.times[k] >= t_from - 1e-12 && y[DX].is_finite() {
                    m = m.min(y[DX]);
                }
            }
        }
        m
    }

    /// Mass inside the plateau at grid index `k`: `∫ ρ₀ B e^{−∫a} dx0`.
    pub fn plateau_mass(&self, rho0: &Expression, k: usize) -> Result<f64, RegularizeError> {
        let fan = &self.fan;
        let t = fan.times[k];
        let eps = self.params.epsilon;
        let shift = self.a_shift * eps;
        let outer: Vec<(f64, f64, f64)> = (0..fan.len())
            .filter_map(|i| match self.kinds[i] {
                RowKind::Outer { tau, dtau } if tau.is_finite() => Some((fan.x0[i], tau, dtau)),
                _ => None,
            })
            .collect();
        let tau_at = |x0: f64| -> f64 {
            if x0 > self.core.x0_l && x0 < self.core.x0_r {
                return self.core.t_focal;
            }
            let left = x0 <= self.core.x0_l;
            let side: Vec<&(f64, f64, f64)> = outer
                .iter()
                .filter(|o| (o.0 <= self.core.x0_l) == left)
                .collect();
            if side.is_empty() {
                return f64::INFINITY;
            }
            let j = side.partition_point(|o| o.0 <= x0);
            if j == 0 || j == side.len() {
                let o = if j == 0 { side[0] } else { side[side.len() - 1] };
                if (x0 - o.0).abs() > 2.0 * (fan.x0[1] - fan.x0[0]).abs() {
                    return f64::INFINITY;
                }
                return o.1 + o.2 * (x0 - o.0);
            }
            let (a, b) = (side[j - 1], side[j]);
            hermite(a.0, b.0, a.1, b.1, a.2, b.2, x0)
        };
        let ai: Vec<f64> = fan.rows.iter().map(|r| r[k][AI]).collect();
        let weight = |x0: f64| -> Result<f64, EvalError> {
            let i = interval_index(&fan.x0, x0);
            let w = ((x0 - fan.x0[i]) / (fan.x0[i + 1] - fan.x0[i])).clamp(0.0, 1.0);
            let a = ai[i] + w * (ai[i + 1] - ai[i]);
            Ok(rho0.eval(x0, 0.0)? * (-a).exp())
        };
        let mut cuts: Vec<f64> = fan.x0.clone();
        cuts.push(self.core.x0_l);
        cuts.push(self.core.x0_r);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let g = 0.5 / 3f64.sqrt();
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let sub = 16;
            let h = (hi - lo) / sub as f64;
            for s in 0..sub {
                let mid = lo + (s as f64 + 0.5) * h;
                for x0 in [mid - g * h, mid + g * h] {
                    let tau = tau_at(x0);
                    if !tau.is_finite() {
                        continue;
                    }
                    let b = self.params.profile.value((t - tau + shift) / eps);
                    if b > 0.0 {
                        total += 0.5 * h * b * weight(x0)?;
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Settings of an ε → 0 study.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitConfig {
    pub schedule: Vec<f64>,
    /// Grid times at which `R_ε` is compared.
    pub r_times: Vec<f64>,
    /// Grid times at which `e_ε` is compared.
    pub e_times: Vec<f64>,
    /// Collar half-width `factor · ε^power` around the plateau and shocks.
    pub collar_factor: f64,
    pub collar_power: f64,
    pub n_core: usize,
    pub c_target: f64,
    pub profile: BlendProfile,
}

impl Default for LimitConfig {
    fn default() -> Self {
        LimitConfig {
            schedule: vec![1e-2, 2.5e-3, 6.25e-4],
            r_times: vec![0.5, 1.5, 2.0, 2.5, 3.0],
            e_times: vec![1.0, 2.0, 3.0],
            collar_factor: 1.0,
            collar_power: 0.75,
            n_core: 101,
            c_target: 1.0,
            profile: BlendProfile::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitRow {
    pub epsilon: f64,
    pub beta: f64,
    pub a_shift: f64,
    pub collar: f64,
    /// `sup |R_ε − R|` over rows outside the collar at the sampled times.
    pub r_error: f64,
    /// `(t, e_ε(t), e(t))` at the sampled times.
    pub e: Vec<(f64, f64, f64)>,
    pub min_j_over_eps: f64,
}

impl LimitRow {
    pub fn e_error(&self, t: f64) -> Option<f64> {
        self.e
            .iter()
            .find(|q| (q.0 - t).abs() <= 1e-12)
            .map(|q| (q.1 - q.2).abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitReport {
    pub rows: Vec<LimitRow>,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

impl LimitReport {
    pub fn r_decreasing(&self) -> bool {
        strictly_decreasing(&self.rows.iter().map(|r| r.r_error).collect::<Vec<_>>())
    }

    pub fn e_decreasing(&self, t: f64) -> bool {
        let v: Option<Vec<f64>> = self.rows.iter().map(|r| r.e_error(t)).collect();
        v.is_some_and(|v| strictly_decreasing(&v))
    }

    /// Smallest `min J / ε` across the schedule.
    pub fn j_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.min_j_over_eps).fold(f64::INFINITY, f64::min)
    }
}

/// Singular mass of the density's shocks alive at `t`.
fn shock_mass(density: &GeneralizedDensity, t: f64) -> f64 {
    density
        .shocks
        .iter()
        .filter(|s| {
            t >= s.t_birth - 1e-12
                && (t < s.t_end() - 1e-12
                    || matches!(s.status, crate::manifold::ShockStatus::Active))
        })
        .filter_map(|s| s.amplitude(t))
        .sum()
}

/// Compares regularized solutions along an ε schedule with the generalized
/// density built on the same plain fan.
pub fn limit_study(
    density: &GeneralizedDensity,
    init: &InitialData,
    cfg: &LimitConfig,
) -> Result<LimitReport, RegularizeError> {
    let plain = density.fan.as_ref();
    if cfg.schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(RegularizeError::Invalid("ε schedule must decrease".into()));
    }
    let has_shock = match first_singularity(plain) {
        Ok(_) => true,
        Err(ManifoldError::NoSingularity) => false,
        Err(e) => return Err(e.into()),
    };
    let mut rows = Vec::new();
    for &eps in &cfg.schedule {
        let mut params = RegularizationParams::new(eps);
        params.c_target = cfg.c_target;
        params.profile = cfg.profile;
        let collar = cfg.collar_factor * eps.powf(cfg.collar_power);
        if !has_shock {
            // nothing focuses: the blended fan is the plain fan
            let r_error = r_error_plain(density, &cfg.r_times)?;
            rows.push(LimitRow {
                epsilon: eps,
                beta: params.beta,
                a_shift: 0.0,
                collar,
                r_error,
                e: cfg.e_times.iter().map(|&t| (t, 0.0, 0.0)).collect(),
                min_j_over_eps: f64::INFINITY,
            });
            continue;
        }
        let reg = blended_fan(plain, init, density.a_field.clone(), &params, cfg.n_core)?;
        let mut r_error: f64 = 0.0;
        for &t in &cfg.r_times {
            let k = plain.time_index(t)?;
            let curve = slice_index(plain, k);
            let xp = reg.plateau.x_at(t);
            let fronts: Vec<f64> = density.shocks.iter().filter_map(|s| s.position(t)).collect();
            for i in 0..reg.fan.len() {
                let y = reg.fan.rows[i][k];
                if !y[X].is_finite() {
                    continue;
                }
                if (y[X] - xp).abs() <= collar || fronts.iter().any(|f| (y[X] - f).abs() <= collar) {
                    continue;
                }
                let Some(r) = density.r_at(&curve, y[X]).map_err(|e| RegularizeError::Invalid(e.to_string()))?
                else {
                    continue;
                };
                let re = density.rho0.eval(reg.fan.x0[i], 0.0)? / y[DX] * (-y[AI]).exp();
                r_error = r_error.max((re - r).abs());
            }
        }
        let mut e = Vec::new();
        for &t in &cfg.e_times {
            let k = plain.time_index(t)?;
            e.push((t, reg.plateau_mass(&density.rho0, k)?, shock_mass(density, t)));
        }
        rows.push(LimitRow {
            epsilon: eps,
            beta: params.beta,
            a_shift: reg.a_shift,
            collar,
            r_error,
            e,
            min_j_over_eps: reg.min_core_j(reg.t_star) / eps,
        });
    }
    Ok(LimitReport { rows })
}

/// Row densities against the interpolated essential density of the same fan.
fn r_error_plain(density: &GeneralizedDensity, times: &[f64]) -> Result<f64, RegularizeError> {
    let fan = density.fan.as_ref();
    let mut err: f64 = 0.0;
    for &t in times {
        let k = fan.time_index(t)?;
        let curve = slice_index(fan, k);
        for i in 0..fan.len() {
            let y = fan.rows[i][k];
            if !y[X].is_finite() {
                continue;
            }
            if let Some(r) = density.r_at(&curve, y[X]).map_err(|e| RegularizeError::Invalid(e.to_string()))? {
                let re = density.r_row(i, k).map_err(|e| RegularizeError::Invalid(e.to_string()))?;
                err = err.max((re - r).abs());
            }
        }
    }
    Ok(err)
}

/// Curve produced by the surgery, parametrized by its own positions.
#[derive(Debug, Clone)]
pub struct SurgeryCurve {
    /// Time of the vertical segment, `t* + β`.
    pub t_cut: f64,
    /// Time of the pulled-back curve, `t_cut − t1`.
    pub t_start: f64,
    /// Equal-action point carrying the vertical segment.
    pub x_cut: f64,
    /// States at `t_cut` before the pull-back (tangents per sample index).
    pub cut_states: Vec<State>,
    /// States at `t_start`, with `δx = 1`.
    pub states: Vec<State>,
    /// Index range of the segment samples (inclusive).
    pub segment: (usize, usize),
    pub a1: f64,
    pub a2: f64,
}

impl SurgeryCurve {
    pub fn x0(&self) -> Vec<f64> {
        self.states.iter().map(|y| y[X]).collect()
    }
}

/// Replaces the folded part of the fan's curve at `t* + β` by a vertical
/// segment at the equal-action point and flows every sample back by `t1`.
pub fn surgery(
    plain: &Fan,
    seed: Singularity,
    beta: f64,
    t1: f64,
    n_segment: usize,
) -> Result<SurgeryCurve, RegularizeError> {
    let model = Arc::new(plain.model().clone());
    if model.time_dependent {
        return Err(RegularizeError::Invalid("surgery needs a time-independent symbol".into()));
    }
    let t_cut = seed.t + beta;
    let t_start = t_cut - t1;
    let curve = slice_at(plain, t_cut)?;
    let gone = || RegularizeError::Manifold(ManifoldError::BranchExhausted { id: 0, t: t_cut });
    let lb = left_branch(&curve, seed.x0).ok_or_else(gone)?;
    let rb = right_branch(&curve, seed.x0).ok_or_else(gone)?;
    if lb == rb {
        return Err(RegularizeError::Invalid("no fold at t* + β".into()));
    }
    let (l_lo, l_hi) = curve.branch_range(lb);
    let (r_lo, r_hi) = curve.branch_range(rb);
    let diff = |x: f64| Some(curve.branch_at(lb, x)?.s - curve.branch_at(rb, x)?.s);
    let (a, b) = (l_lo.max(r_lo), l_hi.min(r_hi));
    let x_cut = brent(diff, a, b, 1e-14, 200).ok_or_else(gone)?;
    let pl = curve.branch_at(lb, x_cut).ok_or_else(gone)?;
    let pr = curve.branch_at(rb, x_cut).ok_or_else(gone)?;
    let mut states: Vec<State> = Vec::new();
    let lbr = curve.branches[lb];
    for i in lbr.start..=lbr.end {
        if curve.x0[i] < pl.x0 {
            states.push(curve.states[i]);
        }
    }
    let n = n_segment.max(2);
    let seg_start = states.len();
    let dir = (pr.p - pl.p).signum();
    let jl = [pl.x, pl.p, pl.s, 0.0, dir, pl.a_int];
    for j in 0..=n {
        let w = j as f64 / n as f64;
        let mut y = jl;
        y[P] = pl.p + w * (pr.p - pl.p);
        y[S] = pl.s + w * (pr.s - pl.s);
        y[AI] = pl.a_int + w * (pr.a_int - pl.a_int);
        states.push(y);
    }
    let seg_end = states.len() - 1;
    let rbr = curve.branches[rb];
    for i in rbr.start..=rbr.end {
        if curve.x0[i] > pr.x0 {
            states.push(curve.states[i]);
        }
    }
    let flow = HamiltonFlow::new(model, AField::Zero);
    let control = plain.config.control;
    let back: Vec<State> = states
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let mut y = *y;
            y[AI] = 0.0;
            advance(&flow, i, t_cut, t_start, &y, control)
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(back.len());
    for (i, y) in back.iter().enumerate() {
        if !(y[DX] > 0.0) {
            return Err(RegularizeError::Irregular { x: y[X] });
        }
        if i > 0 && y[X] <= back[i - 1][X] {
            return Err(RegularizeError::Irregular { x: y[X] });
        }
        let mut z = *y;
        z[DP] /= z[DX];
        z[DX] = 1.0;
        out.push(z);
    }
    Ok(SurgeryCurve {
        t_cut,
        t_start,
        x_cut,
        cut_states: states,
        a1: out[seg_start][X],
        a2: out[seg_end][X],
        states: out,
        segment: (seg_start, seg_end),
    })
}

/// Hamiltonian fan started from the surgery curve at its own time.
pub fn surgery_fan(
    plain: &Fan,
    cut: &SurgeryCurve,
    a_field: AField,
    times: Vec<f64>,
) -> Result<Fan, RegularizeError> {
    let model = Arc::new(plain.model().clone());
    let flow: Arc<dyn Flow> = Arc::new(HamiltonFlow::new(model, a_field));
    Ok(Fan::integrate(flow, cut.x0(), cut.states.clone(), times, plain.config.clone())?)
}

/// Blended construction on the surgery curve: the segment rows collapse at
/// `t_cut` and are blended into the plateau, outer rows join it on arrival.
pub fn blended_after_surgery(
    plain: &Fan,
    cut: &SurgeryCurve,
    a_field: AField,
    params: &RegularizationParams,
    times: Vec<f64>,
) -> Result<RegularizedFan, RegularizeError> {
    params.validate()?;
    let base = surgery_fan(plain, cut, a_field.clone(), times)?;
    let core = Core {
        x0_l: cut.a1,
        x0_r: cut.a2,
        t_focal: cut.t_cut,
        x_focal: cut.x_cut,
    };
    let mid = (cut.segment.0 + cut.segment.1) / 2;
    let center = (0..base.times.len())
        .map(|k| {
            let y = base.rows[mid][k];
            Ok((y[X], base.model().eval_dp_dp(y[X], y[P], base.times[k])?))
        })
        .collect::<Result<Vec<_>, SymbolError>>()?;
    let path = Arc::new(plateau_path(&base, &core, &center)?);
    let mut all = outer_rows(&base, &core, &path, |x0| x0 <= core.x0_l || x0 >= core.x0_r)?;
    for i in cut.segment.0 + 1..cut.segment.1 {
        all.push((
            base.x0[i],
            base.rows[i][0],
            RowKind::Outer {
                tau: core.t_focal,
                dtau: 0.0,
            },
        ));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let asm = Assembly {
        model: Arc::new(plain.model().clone()),
        a_field,
        core,
        insertion: None,
        plateau: path,
        x0: all.iter().map(|r| r.0).collect(),
        initial: all.iter().map(|r| r.1).collect(),
        kinds: all.iter().map(|r| r.2).collect(),
    };
    asm.finish(params, &base, cut.t_cut - params.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{time_grid, FanConfig};
    use crate::expr::parse;
    use crate::numerics::linspace;
    use approx::assert_relative_eq;

    fn burgers() -> Arc<SymbolModel> {
        Arc::new(SymbolModel::burgers())
    }

    fn init(p0: &str) -> InitialData {
        InitialData::new(parse("0").unwrap(), Some(parse(p0).unwrap()))
    }

    #[test]
    fn profiles_are_monotone() {
        for p in [BlendProfile::Tanh, BlendProfile::Smoothstep] {
            assert!(p.check());
            let h = 1e-6;
            for z in [-0.7, 0.0, 0.4] {
                let fd = (p.value(z + h) - p.value(z - h)) / (2.0 * h);
                assert_relative_eq!(p.slope(z), fd, epsilon = 1e-8);
            }
        }
        assert_eq!(BlendProfile::parse("Tanh"), Some(BlendProfile::Tanh));
    }

    #[test]
    fn params_enforce_scale_relation() {
        assert!(RegularizationParams::new(1e-2).validate().is_ok());
        let mut p = RegularizationParams::new(1e-2);
        p.beta = 0.05;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rh_speeds() {
        let b = SymbolModel::burgers();
        let c = |l: f64, r: f64| plateau_speed(&b, (0.0, l), (0.0, r), 0.0).unwrap();
        assert_relative_eq!(c(1.0, -1.0).c, 0.0);
        assert_relative_eq!(c(2.0, 0.0).c, 1.0);
        let d = c(0.5, 0.5);
        assert!(d.degenerate);
        assert_relative_eq!(d.c, 0.5);
        let j = SymbolModel::pure_jump(1.0, 1.0);
        let c = plateau_speed(&j, (0.0, 1.0), (0.0, 0.0), 0.0).unwrap().c;
        assert_relative_eq!(c, std::f64::consts::E - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn insertion_interpolates_endpoints() {
        let ins = build_insertion(burgers(), &init("-tanh(x)"), 0.0, 0.1).unwrap();
        let k = 0.1f64.tanh() / 0.1;
        assert_relative_eq!(ins.k(0.0).unwrap(), k, epsilon = 1e-14);
        assert_relative_eq!(ins.b(0.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ins.momentum(0.05, 0.3).unwrap(), -k * 0.05, epsilon = 1e-12);
        assert_relative_eq!(ins.t_focal, 1.0 / k, epsilon = 1e-14);
        let lin = build_insertion(burgers(), &init("-x"), 0.3, 0.2).unwrap();
        assert_relative_eq!(lin.k(1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(lin.b(1.0).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn jump_insertion_inverts_exponential() {
        let m = Arc::new(SymbolModel::pure_jump(1.0, 1.0));
        let ins = build_insertion(m, &init("-x"), 0.0, 0.5).unwrap();
        let v = ins.velocity(0.2, 0.0).unwrap();
        assert_relative_eq!(ins.momentum(0.2, 0.0).unwrap(), v.ln(), epsilon = 1e-10);
        // velocities from e^{0.5} down to e^{-0.5}; far outside they turn negative
        assert!(ins.momentum(40.0, 0.0).is_err());
    }

    fn tanh_fan(n: usize, t_end: f64) -> Fan {
        let times = time_grid(t_end, 0.01).unwrap();
        Fan::hamiltonian(
            burgers(),
            &init("-tanh(x)"),
            AField::Auto,
            linspace(-4.0, 4.0, n),
            times,
            FanConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn blended_tanh_fan() {
        let plain = tanh_fan(801, 2.0);
        let params = RegularizationParams::new(1e-2);
        let reg = blended_fan(&plain, &init("-tanh(x)"), AField::Auto, &params, 41).unwrap();
        let eps = params.epsilon;
        let m = reg.min_core_j(reg.t_star);
        assert!(m >= 0.5 * eps * (1.0 - 1e-6) && m <= 10.0 * eps, "min J = {m}");
        // far from the insertion and before arrival the rows are plain
        let k = plain.time_index(0.8).unwrap();
        for i in 0..reg.fan.len() {
            if reg.is_core(i) {
                continue;
            }
            let x0 = reg.fan.x0[i];
            let j = plain.x0.iter().position(|&v| v == x0).unwrap();
            assert!((reg.fan.rows[i][k][X] - plain.rows[j][k][X]).abs() < 1e-8);
        }
        // after focusing the insertion moves with the plateau
        let t = 1.5;
        let c = reg.plateau.c_at(t);
        for i in (0..reg.fan.len()).filter(|&i| reg.is_core(i)) {
            let y = reg.fan.state_at(i, t).unwrap();
            let v = reg.fan.flow.velocity(i, t, &y).unwrap();
            assert!((v - c).abs() < 1e-6);
        }
        assert!(reg.plateau.x_at(1.7).abs() < 1e-10);
    }

    #[test]
    fn surgery_round_trip_and_gap() {
        let plain = tanh_fan(801, 1.6);
        let seed = first_singularity(&plain).unwrap();
        let cut = surgery(&plain, seed, 0.1, 0.1, 40).unwrap();
        assert!(cut.a1 < cut.a2);
        let flow = HamiltonFlow::new(burgers(), AField::Zero);
        for i in cut.segment.0..=cut.segment.1 {
            let y = advance(&flow, i, cut.t_start, cut.t_cut, &cut.states[i], plain.config.control).unwrap();
            assert!((y[X] - cut.x_cut).abs() < 1e-6);
            assert!((y[P] - cut.cut_states[i][P]).abs() < 1e-6);
        }
        let ratio = (cut.a2 - cut.a1) / 0.1;
        assert!((0.1..=10.0).contains(&ratio), "ratio {ratio}");
    }
}
