//! Hamiltonian characteristics with action, variational and damping
//! equations, integrated for a whole fan of initial points on one shared
//! time grid.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{EvalError, Expression};
use crate::numerics::lagrange_derivative;
use crate::symbol::{SymbolError, SymbolModel};

pub const X: usize = 0;
pub const P: usize = 1;
pub const S: usize = 2;
pub const DX: usize = 3;
pub const DP: usize = 4;
pub const AI: usize = 5;

/// `[x, p, S, δx, δp, ∫a dt]` along one trajectory.
pub type State = [f64; 6];

/// One integrated row and the time index at which it left the domain, if any.
pub type RowResult = (Vec<State>, Option<usize>);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("local error {err:.3e} above tolerance on [{t0}, {t1}] for row {row}")]
    StepRejected { row: usize, t0: f64, t1: f64, err: f64 },
    #[error("fan too small: {0} trajectories")]
    FanTooSmall(usize),
    #[error("invalid fan: {0}")]
    Invalid(String),
    #[error("time {0} is not on the fan's grid")]
    OffGrid(f64),
}

/// Right-hand side of the extended characteristic system for one row.
pub trait Flow: Send + Sync {
    fn rhs(&self, row: usize, t: f64, y: &State) -> Result<State, FlowError>;

    /// The model whose characteristics (possibly modified) the flow follows.
    fn model(&self) -> &SymbolModel;

    /// Transport velocity `dx/dt` at a state.
    fn velocity(&self, row: usize, t: f64, y: &State) -> Result<f64, FlowError> {
        Ok(self.rhs(row, t, y)?[X])
    }
}

/// Source of the damping coefficient `a` in the continuity equation.
#[derive(Debug, Clone)]
pub enum AField {
    /// `a = −∂²P/∂x∂p` along the trajectory.
    Auto,
    /// `a ≡ 0`.
    Zero,
    /// `a = f(x, u)` with `u = ∂P/∂p`, for singular-coefficient scenarios.
    Field(Expression),
}

impl AField {
    pub fn value(&self, x: f64, u: f64, t: f64, p_xp: f64) -> Result<f64, EvalError> {
        match self {
            AField::Auto => Ok(-p_xp),
            AField::Zero => Ok(0.0),
            AField::Field(f) => f.eval_field(x, t, u),
        }
    }

    /// Value at a shock with speed `c`; zero unless an explicit field is configured.
    pub fn on_stratum(&self, x: f64, c: f64, t: f64) -> Result<f64, EvalError> {
        match self {
            AField::Field(f) => f.eval_field(x, t, c),
            _ => Ok(0.0),
        }
    }
}

pub struct HamiltonFlow {
    pub model: Arc<SymbolModel>,
    pub a_field: AField,
}

impl HamiltonFlow {
    pub fn new(model: Arc<SymbolModel>, a_field: AField) -> Self {
        HamiltonFlow { model, a_field }
    }
}

impl Flow for HamiltonFlow {
    fn rhs(&self, _row: usize, t: f64, y: &State) -> Result<State, FlowError> {
        let j = self.model.jet(y[X], y[P], t)?;
        let a = self.a_field.value(y[X], j.p_p, t, j.p_xp)?;
        Ok([
            j.p_p,
            -j.p_x,
            y[P] * j.p_p - j.p,
            j.p_xp * y[DX] + j.p_pp * y[DP],
            -j.p_xx * y[DX] - j.p_xp * y[DP],
            a,
        ])
    }

    fn model(&self) -> &SymbolModel {
        &self.model
    }

    fn velocity(&self, _row: usize, t: f64, y: &State) -> Result<f64, FlowError> {
        Ok(self.model.eval_dp_dp(y[X], y[P], t)?)
    }
}

/// Initial action and momentum. When `p0` is absent the momentum is the
/// numerical derivative of `s0`.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub s0: Expression,
    pub p0: Option<Expression>,
}

impl InitialData {
    pub fn new(s0: Expression, p0: Option<Expression>) -> Self {
        InitialData { s0, p0 }
    }

    pub fn action(&self, x: f64) -> Result<f64, EvalError> {
        self.s0.eval(x, 0.0)
    }

    pub fn momentum(&self, x: f64) -> Result<f64, EvalError> {
        match &self.p0 {
            Some(p0) => p0.eval(x, 0.0),
            None => five_point(|z| self.s0.eval(z, 0.0), x, 1e-3 * (1.0 + x.abs())),
        }
    }

    /// `dp₀/dx₀`, the initial value of `δp`.
    pub fn momentum_slope(&self, x: f64) -> Result<f64, EvalError> {
        match &self.p0 {
            Some(p0) => five_point(|z| p0.eval(z, 0.0), x, 1e-4 * (1.0 + x.abs())),
            None => {
                let h = 1e-3 * (1.0 + x.abs());
                let f = |z: f64| self.s0.eval(z, 0.0);
                Ok((-f(x + 2.0 * h)? + 16.0 * f(x + h)? - 30.0 * f(x)? + 16.0 * f(x - h)?
                    - f(x - 2.0 * h)?)
                    / (12.0 * h * h))
            }
        }
    }

    pub fn state(&self, x0: f64) -> Result<State, EvalError> {
        Ok([
            x0,
            self.momentum(x0)?,
            self.action(x0)?,
            1.0,
            self.momentum_slope(x0)?,
            0.0,
        ])
    }
}

fn five_point<F>(f: F, x: f64, h: f64) -> Result<f64, EvalError>
where
    F: Fn(f64) -> Result<f64, EvalError>,
{
    Ok((f(x - 2.0 * h)? - 8.0 * f(x - h)? + 8.0 * f(x + h)? - f(x + 2.0 * h)?) / (12.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepControl {
    /// `n` equal RK4 sub-steps per grid interval.
    Fixed(usize),
    /// Step doubling: an interval is halved until the full-step and
    /// two-half-step results agree to `tol`, at most `max_depth` times.
    Doubling { tol: f64, max_depth: u32 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Doubling {
            tol: 1e-8,
            max_depth: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FanConfig {
    pub control: StepControl,
    /// Rows leaving `[lo, hi]` are truncated from the time of exit on.
    pub x_box: (f64, f64),
}

impl Default for FanConfig {
    fn default() -> Self {
        FanConfig {
            control: StepControl::default(),
            x_box: (-1e6, 1e6),
        }
    }
}

pub fn rk4_step(flow: &dyn Flow, row: usize, t: f64, y: &State, h: f64) -> Result<State, FlowError> {
    let add = |a: &State, k: &State, s: f64| -> State {
        let mut o = *a;
        for i in 0..6 {
            o[i] += s * k[i];
        }
        o
    };
    let k1 = flow.rhs(row, t, y)?;
    let k2 = flow.rhs(row, t + 0.5 * h, &add(y, &k1, 0.5 * h))?;
    let k3 = flow.rhs(row, t + 0.5 * h, &add(y, &k2, 0.5 * h))?;
    let k4 = flow.rhs(row, t + h, &add(y, &k3, h))?;
    let mut o = *y;
    for i in 0..6 {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(o)
}

fn local_error(a: &State, b: &State) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs() / (1.0 + v.abs()))
        .fold(0.0, f64::max)
}

/// Advances one row from `t0` to `t1` under the given step control.
pub fn advance(
    flow: &dyn Flow,
    row: usize,
    t0: f64,
    t1: f64,
    y: &State,
    control: StepControl,
) -> Result<State, FlowError> {
    match control {
        StepControl::Fixed(n) => {
            let n = n.max(1);
            let h = (t1 - t0) / n as f64;
            let mut s = *y;
            for i in 0..n {
                s = rk4_step(flow, row, t0 + i as f64 * h, &s, h)?;
            }
            Ok(s)
        }
        StepControl::Doubling { tol, max_depth } => {
            doubling(flow, row, t0, t1, y, tol, max_depth, None)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn doubling(
    flow: &dyn Flow,
    row: usize,
    t0: f64,
    t1: f64,
    y: &State,
    tol: f64,
    depth: u32,
    full: Option<State>,
) -> Result<State, FlowError> {
    let h = t1 - t0;
    let full = match full {
        Some(f) => f,
        None => rk4_step(flow, row, t0, y, h)?,
    };
    let tm = t0 + 0.5 * h;
    let mid = rk4_step(flow, row, t0, y, 0.5 * h)?;
    let two = rk4_step(flow, row, tm, &mid, 0.5 * h)?;
    let err = local_error(&full, &two);
    if err <= tol {
        return Ok(two);
    }
    if depth == 0 {
        return Err(FlowError::StepRejected { row, t0, t1, err });
    }
    let left = doubling(flow, row, t0, tm, y, tol, depth - 1, Some(mid))?;
    doubling(flow, row, tm, t1, &left, tol, depth - 1, None)
}

/// Integrates one row over the time grid. Entries after an exit from the
/// working box are NaN; the exit index is returned alongside.
pub fn integrate_row(
    flow: &dyn Flow,
    row: usize,
    y0: State,
    times: &[f64],
    cfg: &FanConfig,
) -> Result<RowResult, FlowError> {
    let mut out = Vec::with_capacity(times.len());
    out.push(y0);
    let mut y = y0;
    let mut escaped = None;
    for k in 1..times.len() {
        if escaped.is_none() {
            let next = advance(flow, row, times[k - 1], times[k], &y, cfg.control);
            match next {
                Ok(n) if n[X] >= cfg.x_box.0 && n[X] <= cfg.x_box.1 => y = n,
                Ok(_) => escaped = Some(k),
                Err(FlowError::Symbol(SymbolError::Range(_))) => escaped = Some(k),
                Err(e) => return Err(e),
            }
        }
        out.push(if escaped.is_some() { [f64::NAN; 6] } else { y });
    }
    Ok((out, escaped))
}

/// Output record for one point of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x0: f64,
    pub x: f64,
    pub p: f64,
    pub s: f64,
    pub j: f64,
    pub a_int: f64,
}

/// A family of trajectories sharing one time grid.
#[derive(Clone)]
pub struct Fan {
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    /// `rows[i][k]` is the state of trajectory `i` at `times[k]`.
    pub rows: Vec<Vec<State>>,
    pub escaped: Vec<Option<usize>>,
    pub flow: Arc<dyn Flow>,
    pub config: FanConfig,
}

impl std::fmt::Debug for Fan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fan")
            .field("rows", &self.x0.len())
            .field("times", &self.times.len())
            .finish()
    }
}

/// Uniform time grid `0, h, ..., T`; `h` must divide `T` to 1e-12.
pub fn time_grid(t_end: f64, h_t: f64) -> Result<Vec<f64>, FlowError> {
    if !(h_t > 0.0) || !(t_end > 0.0) {
        return Err(FlowError::Invalid("time step and horizon must be positive".into()));
    }
    let n = (t_end / h_t).round();
    if (n * h_t - t_end).abs() > 1e-12 * t_end.max(1.0) {
        return Err(FlowError::Invalid(format!("h_t = {h_t} does not divide T = {t_end}")));
    }
    let n = n as usize;
    Ok((0..=n).map(|k| if k == n { t_end } else { k as f64 * h_t }).collect())
}

impl Fan {
    /// Integrates every row of `initial` through `times` in parallel.
    pub fn integrate(
        flow: Arc<dyn Flow>,
        x0: Vec<f64>,
        initial: Vec<State>,
        times: Vec<f64>,
        config: FanConfig,
    ) -> Result<Fan, FlowError> {
        if x0.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FlowError::Invalid("x0 grid must be strictly increasing".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.is_empty() {
            return Err(FlowError::Invalid("time grid must be strictly increasing".into()));
        }
        let results: Vec<Result<RowResult, FlowError>> = initial
            .par_iter()
            .enumerate()
            .map(|(i, y0)| integrate_row(flow.as_ref(), i, *y0, &times, &config))
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        let mut escaped = Vec::with_capacity(results.len());
        for r in results {
            let (row, esc) = r?;
            rows.push(row);
            escaped.push(esc);
        }
        Ok(Fan {
            x0,
            times,
            rows,
            escaped,
            flow,
            config,
        })
    }

    /// Plain Hamiltonian fan from initial action data.
    pub fn hamiltonian(
        model: Arc<SymbolModel>,
        init: &InitialData,
        a_field: AField,
        x0: Vec<f64>,
        times: Vec<f64>,
        config: FanConfig,
    ) -> Result<Fan, FlowError> {
        let initial = x0
            .iter()
            .map(|&x| init.state(x))
            .collect::<Result<Vec<_>, _>>()?;
        let flow: Arc<dyn Flow> = Arc::new(HamiltonFlow::new(model, a_field));
        Fan::integrate(flow, x0, initial, times, config)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn model(&self) -> &SymbolModel {
        self.flow.model()
    }

    pub fn time_index(&self, t: f64) -> Result<usize, FlowError> {
        let k = self.times.partition_point(|&s| s < t - 1e-12);
        if k < self.times.len() && (self.times[k] - t).abs() <= 1e-12 * t.abs().max(1.0) {
            Ok(k)
        } else {
            Err(FlowError::OffGrid(t))
        }
    }

    pub fn state(&self, row: usize, k: usize) -> &State {
        &self.rows[row][k]
    }

    pub fn point(&self, row: usize, k: usize) -> TrajectoryPoint {
        let y = &self.rows[row][k];
        TrajectoryPoint {
            t: self.times[k],
            x0: self.x0[row],
            x: y[X],
            p: y[P],
            s: y[S],
            j: y[DX],
            a_int: y[AI],
        }
    }

    /// State of `row` at an arbitrary time, re-integrated from the nearest
    /// earlier grid point.
    pub fn state_at(&self, row: usize, t: f64) -> Result<State, FlowError> {
        let k = crate::numerics::interval_index(&self.times, t);
        let y = self.rows[row][k];
        if t == self.times[k] {
            return Ok(y);
        }
        advance(self.flow.as_ref(), row, self.times[k], t, &y, self.config.control)
    }

    /// Compares the variational Jacobian with finite differences of `x`
    /// across neighbouring rows at every grid time.
    pub fn jacobian_check(&self) -> Result<JacobianReport, FlowError> {
        let times: Vec<usize> = (0..self.times.len()).collect();
        self.jacobian_check_at(&times)
    }

    pub fn jacobian_check_at(&self, ks: &[usize]) -> Result<JacobianReport, FlowError> {
        let n = self.len();
        if n < 3 {
            return Err(FlowError::FanTooSmall(n));
        }
        let width = n.min(7);
        let mut report = JacobianReport::default();
        for &k in ks {
            let xs: Vec<f64> = self.rows.iter().map(|r| r[k][X]).collect();
            for i in 0..n {
                let start = i.saturating_sub(width / 2).min(n - width);
                let window = start..start + width;
                if window.clone().any(|j| !xs[j].is_finite()) {
                    continue;
                }
                let fd = lagrange_derivative(&self.x0[window.clone()], &xs[window], self.x0[i]);
                let j = self.rows[i][k][DX];
                let dev = (j - fd).abs() / j.abs().max(1.0);
                report.checked += 1;
                if dev > report.max_deviation {
                    report.max_deviation = dev;
                    report.t = self.times[k];
                    report.x0 = self.x0[i];
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JacobianReport {
    pub max_deviation: f64,
    pub t: f64,
    pub x0: f64,
    pub checked: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::numerics::linspace;
    use crate::symbol::Coef;
    use approx::assert_relative_eq;

    fn burgers_fan(s0: &str, p0: &str, x0: Vec<f64>, t: f64, h: f64) -> Fan {
        let init = InitialData::new(parse(s0).unwrap(), Some(parse(p0).unwrap()));
        Fan::hamiltonian(
            Arc::new(SymbolModel::burgers()),
            &init,
            AField::Auto,
            x0,
            time_grid(t, h).unwrap(),
            FanConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn free_motion() {
        let fan = burgers_fan("-x", "-1", vec![0.0, 1.0, 2.0], 0.5, 0.05);
        let y = fan.rows[1].last().unwrap();
        assert_relative_eq!(y[X], 0.5, epsilon = 1e-12);
        assert_relative_eq!(y[P], -1.0, epsilon = 1e-12);
        // S = S0 + t p^2/2 with S0(1) = -1
        assert_relative_eq!(y[S] - (-1.0), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn linear_potential() {
        let model = SymbolModel::new(Coef::Const(0.5), Coef::parse("x").unwrap(), vec![], false).unwrap();
        let init = InitialData::new(parse("0").unwrap(), None);
        let fan = Fan::hamiltonian(
            Arc::new(model),
            &init,
            AField::Auto,
            vec![-1.0, 0.0, 1.0],
            time_grid(1.0, 0.1).unwrap(),
            FanConfig::default(),
        )
        .unwrap();
        let y = fan.rows[1].last().unwrap();
        assert_relative_eq!(y[P], -1.0, epsilon = 1e-9);
        assert_relative_eq!(y[X], -0.5, epsilon = 1e-9);
    }

    #[test]
    fn focusing_jacobian_is_linear() {
        let fan = burgers_fan("-x^2/2", "-x", linspace(-1.0, 1.0, 21), 0.9, 0.05);
        for (k, &t) in fan.times.iter().enumerate() {
            for row in &fan.rows {
                assert_relative_eq!(row[k][DX], 1.0 - t, epsilon = 1e-12);
            }
        }
        let k = fan.time_index(0.5).unwrap();
        assert!(fan.jacobian_check_at(&[k]).unwrap().max_deviation <= 1e-6);
    }

    #[test]
    fn rarefaction_jacobian() {
        let fan = burgers_fan("x^2/2", "x", linspace(-2.0, 2.0, 41), 1.0, 0.1);
        let k = fan.time_index(1.0).unwrap();
        for row in &fan.rows {
            assert_relative_eq!(row[k][DX], 2.0, epsilon = 1e-12);
        }
        assert!(fan.jacobian_check().unwrap().max_deviation <= 1e-6);
    }

    #[test]
    fn single_row_is_rejected() {
        let fan = burgers_fan("x", "1", vec![0.0], 0.1, 0.1);
        assert_eq!(fan.jacobian_check(), Err(FlowError::FanTooSmall(1)));
    }

    #[test]
    fn escaped_rows_are_truncated() {
        let init = InitialData::new(parse("x^2/2").unwrap(), Some(parse("x").unwrap()));
        let cfg = FanConfig {
            x_box: (-3.05, 3.05),
            ..FanConfig::default()
        };
        let fan = Fan::hamiltonian(
            Arc::new(SymbolModel::burgers()),
            &init,
            AField::Auto,
            vec![0.0, 2.0],
            time_grid(1.0, 0.1).unwrap(),
            cfg,
        )
        .unwrap();
        assert_eq!(fan.escaped[0], None);
        // x = 2 (1 + t) leaves the box between t = 0.5 and t = 0.6
        assert_eq!(fan.escaped[1], Some(6));
        assert!(fan.rows[1][10][X].is_nan());
    }

    #[test]
    fn off_grid_time_is_an_error() {
        let fan = burgers_fan("x", "1", vec![0.0, 1.0, 2.0], 1.0, 0.1);
        assert!(fan.time_index(0.55).is_err());
        assert_eq!(fan.time_index(0.3).unwrap(), 3);
        assert!(time_grid(1.0, 0.3).is_err());
    }

    #[test]
    fn derived_momentum_matches_closed_form() {
        let init = InitialData::new(parse("log(sech(x))").unwrap(), None);
        for &x in &[-1.3, 0.0, 0.4, 2.2] {
            let s: f64 = x;
            assert_relative_eq!(init.momentum(x).unwrap(), -s.tanh(), epsilon = 1e-8);
            let slope = -1.0 / s.cosh().powi(2);
            assert_relative_eq!(init.momentum_slope(x).unwrap(), slope, epsilon = 1e-8);
        }
    }
}
