//! Time slices of a fan as Lagrangian curves: branch decomposition,
//! essential (minimal action) selection, caustic detection and tracking of
//! equal-action shock paths.

use rayon::prelude::*;
use thiserror::Error;

use crate::characteristics::{Fan, FlowError, State, AI, DP, DX, P, S, X};
use crate::numerics::{brent, hermite, hermite_slope, lagrange_local};
use crate::symbol::SymbolError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error("no singularity: J > 0 on the whole fan")]
    NoSingularity,
    #[error("shock {id} ran out of branches at t = {t}")]
    BranchExhausted { id: usize, t: f64 },
    #[error("tangential crossing of shocks {a} and {b} at t = {t}")]
    TangentialCrossing { a: usize, b: usize, t: f64 },
}

/// Index range `[start, end]` (inclusive) of samples forming one
/// single-valued piece of the curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub start: usize,
    pub end: usize,
    /// Sign of the Jacobian on the branch.
    pub sign: i8,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A point where the Jacobian changes sign between two neighbouring samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fold {
    /// Sample index left of the fold.
    pub after: usize,
    pub x0: f64,
    pub x: f64,
}

/// Values interpolated on one branch at a given position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchPoint {
    pub branch: usize,
    pub x0: f64,
    pub x: f64,
    pub p: f64,
    pub s: f64,
    pub j: f64,
    pub a_int: f64,
}

#[derive(Debug, Clone)]
pub struct LagrangianCurve {
    pub t: f64,
    pub x0: Vec<f64>,
    pub states: Vec<State>,
    pub branches: Vec<Branch>,
    pub folds: Vec<Fold>,
}

fn sign_of(j: f64) -> i8 {
    if j > 0.0 {
        1
    } else if j < 0.0 {
        -1
    } else {
        0
    }
}

impl LagrangianCurve {
    pub fn new(t: f64, x0: Vec<f64>, states: Vec<State>) -> Self {
        let mut branches = Vec::new();
        let mut folds = Vec::new();
        let mut open: Option<Branch> = None;
        for i in 0..states.len() {
            let y = &states[i];
            let valid = y.iter().all(|v| v.is_finite());
            let sg = sign_of(y[DX]);
            if let Some(mut b) = open {
                let prev = &states[b.end];
                let monotone = (y[X] - prev[X]) * f64::from(b.sign) > 0.0;
                if valid && sg == b.sign && sg != 0 && monotone {
                    b.end = i;
                    open = Some(b);
                    continue;
                }
                branches.push(b);
                open = None;
                if valid && sg != b.sign && sg != 0 && b.sign != 0 {
                    let (ja, jb) = (prev[DX], y[DX]);
                    let w = ja / (ja - jb);
                    let fx0 = x0[i - 1] + w * (x0[i] - x0[i - 1]);
                    let fx = hermite(
                        x0[i - 1],
                        x0[i],
                        prev[X],
                        y[X],
                        prev[DX],
                        y[DX],
                        fx0,
                    );
                    folds.push(Fold {
                        after: i - 1,
                        x0: fx0,
                        x: fx,
                    });
                }
            }
            if valid {
                open = Some(Branch {
                    start: i,
                    end: i,
                    sign: sg,
                });
            }
        }
        if let Some(b) = open {
            branches.push(b);
        }
        LagrangianCurve {
            t,
            x0,
            states,
            branches,
            folds,
        }
    }

    /// Branches with a positive Jacobian and at least two samples.
    pub fn regular_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.sign > 0 && b.len() >= 2)
    }

    /// `x`-interval covered by a branch.
    pub fn branch_range(&self, b: usize) -> (f64, f64) {
        let br = &self.branches[b];
        let (a, c) = (self.states[br.start][X], self.states[br.end][X]);
        (a.min(c), a.max(c))
    }

    fn eval_at_x0(&self, b: usize, i: usize, x0: f64) -> BranchPoint {
        let (ya, yb) = (&self.states[i], &self.states[i + 1]);
        let (xa, xb) = (self.x0[i], self.x0[i + 1]);
        let h = |k: usize, da: f64, db: f64| hermite(xa, xb, ya[k], yb[k], da, db, x0);
        let x = h(X, ya[DX], yb[DX]);
        let p = h(P, ya[DP], yb[DP]);
        let s = h(S, ya[P] * ya[DX], yb[P] * yb[DX]);
        let br = &self.branches[b];
        let lo = br.start;
        let hi = br.end + 1;
        let xs = &self.x0[lo..hi];
        let js: Vec<f64> = self.states[lo..hi].iter().map(|y| y[DX]).collect();
        let ais: Vec<f64> = self.states[lo..hi].iter().map(|y| y[AI]).collect();
        BranchPoint {
            branch: b,
            x0,
            x,
            p,
            s,
            j: lagrange_local(xs, &js, x0, 4),
            a_int: lagrange_local(xs, &ais, x0, 4),
        }
    }

    /// Interpolates branch `b` at Lagrangian coordinate `x0`.
    pub fn branch_at_x0(&self, b: usize, x0: f64) -> Option<BranchPoint> {
        let br = &self.branches[b];
        if br.len() < 2 || x0 < self.x0[br.start] || x0 > self.x0[br.end] {
            return None;
        }
        let k = self.x0[br.start..=br.end].partition_point(|&v| v <= x0);
        let i = (br.start + k.saturating_sub(1)).min(br.end - 1);
        Some(self.eval_at_x0(b, i, x0))
    }

    /// Interpolates branch `b` at Eulerian position `x`, if covered.
    pub fn branch_at(&self, b: usize, x: f64) -> Option<BranchPoint> {
        let br = &self.branches[b];
        if br.len() < 2 {
            return None;
        }
        let (lo, hi) = self.branch_range(b);
        if x < lo || x > hi {
            return None;
        }
        let seg = &self.states[br.start..=br.end];
        let key = |y: &State| y[X] * f64::from(br.sign);
        let target = x * f64::from(br.sign);
        let k = seg.partition_point(|y| key(y) <= target);
        let i = (br.start + k.saturating_sub(1)).min(br.end - 1);
        let (ya, yb) = (&self.states[i], &self.states[i + 1]);
        let (xa, xb) = (self.x0[i], self.x0[i + 1]);
        let f = |z: f64| Some(hermite(xa, xb, ya[X], yb[X], ya[DX], yb[DX], z) - x);
        let x0 = if x == ya[X] {
            xa
        } else if x == yb[X] {
            xb
        } else {
            brent(f, xa, xb, 1e-15 * (1.0 + xa.abs()), 200)?
        };
        let mut pt = self.eval_at_x0(b, i, x0);
        pt.x = x;
        Some(pt)
    }

    /// All branch points above `x`, in branch order.
    pub fn covering(&self, x: f64) -> Vec<BranchPoint> {
        (0..self.branches.len())
            .filter_map(|b| self.branch_at(b, x))
            .collect()
    }

    /// Minimal-action branch point above `x`.
    pub fn essential_at(&self, x: f64) -> Option<BranchPoint> {
        let mut best: Option<BranchPoint> = None;
        for pt in self.covering(x) {
            best = Some(match best {
                None => pt,
                Some(b) => {
                    let tie = (pt.s - b.s).abs() <= 1e-12 * (1.0 + b.s.abs());
                    if (!tie && pt.s < b.s) || (tie && pt.p.abs() < b.p.abs()) {
                        pt
                    } else {
                        b
                    }
                }
            });
        }
        best
    }

    /// Essential solution on a grid of positions.
    pub fn essential(&self, x_grid: &[f64], fan: &Fan) -> Result<EssentialSolution, ManifoldError> {
        let pts: Vec<Option<BranchPoint>> = x_grid.par_iter().map(|&x| self.essential_at(x)).collect();
        let mut sol = EssentialSolution {
            t: self.t,
            x: x_grid.to_vec(),
            points: pts,
            u: Vec::with_capacity(x_grid.len()),
            uncovered: Vec::new(),
        };
        for (i, pt) in sol.points.iter().enumerate() {
            match pt {
                Some(pt) => sol.u.push(fan.model().eval_dp_dp(pt.x, pt.p, self.t)?),
                None => {
                    sol.u.push(f64::NAN);
                    sol.uncovered.push(i);
                }
            }
        }
        Ok(sol)
    }
}

/// Slice of the fan at grid time `t`.
pub fn slice(fan: &Fan, t: f64) -> Result<LagrangianCurve, ManifoldError> {
    let k = fan.time_index(t)?;
    Ok(slice_index(fan, k))
}

pub fn slice_index(fan: &Fan, k: usize) -> LagrangianCurve {
    let states = fan.rows.iter().map(|r| r[k]).collect();
    LagrangianCurve::new(fan.times[k], fan.x0.clone(), states)
}

/// Slice at an arbitrary time, re-integrating each row from the grid.
pub fn slice_at(fan: &Fan, t: f64) -> Result<LagrangianCurve, ManifoldError> {
    if let Ok(k) = fan.time_index(t) {
        return Ok(slice_index(fan, k));
    }
    let states = (0..fan.len())
        .into_par_iter()
        .map(|i| {
            let k = crate::numerics::interval_index(&fan.times, t);
            if fan.escaped[i].is_some_and(|e| e <= k + 1) {
                Ok([f64::NAN; 6])
            } else {
                fan.state_at(i, t)
            }
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    Ok(LagrangianCurve::new(t, fan.x0.clone(), states))
}

#[derive(Debug, Clone)]
pub struct EssentialSolution {
    pub t: f64,
    pub x: Vec<f64>,
    pub points: Vec<Option<BranchPoint>>,
    /// Velocity `∂P/∂p` at the essential momentum.
    pub u: Vec<f64>,
    pub uncovered: Vec<usize>,
}

impl EssentialSolution {
    pub fn action(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.map_or(f64::NAN, |p| p.s))
            .collect()
    }

    pub fn branch_ids(&self) -> Vec<Option<usize>> {
        self.points.iter().map(|p| p.map(|p| p.branch)).collect()
    }
}

/// First caustic of a fan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Singularity {
    pub t: f64,
    pub x: f64,
    pub x0: f64,
}

/// Time at which each row's Jacobian first vanishes (`+∞` if never).
pub fn zero_times(fan: &Fan) -> Result<Vec<f64>, ManifoldError> {
    (0..fan.len())
        .into_par_iter()
        .map(|i| {
            let row = &fan.rows[i];
            for k in 1..row.len() {
                let (a, b) = (row[k - 1][DX], row[k][DX]);
                if !(a.is_finite() && b.is_finite()) {
                    break;
                }
                if a > 0.0 && b <= 0.0 {
                    if b == 0.0 {
                        return Ok(fan.times[k]);
                    }
                    let y = row[k - 1];
                    let (t0, t1) = (fan.times[k - 1], fan.times[k]);
                    let flow = fan.flow.as_ref();
                    let f = |t: f64| {
                        crate::characteristics::advance(flow, i, t0, t, &y, fan.config.control)
                            .ok()
                            .map(|s| s[DX])
                    };
                    return Ok(brent(f, t0, t1, 1e-13, 200).unwrap_or(t1));
                }
            }
            Ok(f64::INFINITY)
        })
        .collect()
}

/// All local minima of the zero-time profile, i.e. the birth points of
/// every caustic, earliest first.
pub fn singularities(fan: &Fan) -> Result<Vec<Singularity>, ManifoldError> {
    let tz = zero_times(fan)?;
    let n = tz.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if !tz[i].is_finite() {
            i += 1;
            continue;
        }
        // plateaus of equal zero times count once
        let mut j = i;
        while j + 1 < n && tz[j + 1] == tz[i] {
            j += 1;
        }
        let left_ok = i == 0 || tz[i - 1] > tz[i];
        let right_ok = j + 1 == n || tz[j + 1] > tz[i];
        if left_ok && right_ok {
            out.push(refine_singularity(fan, &tz, i, j)?);
        }
        i = j + 1;
    }
    if out.is_empty() {
        return Err(ManifoldError::NoSingularity);
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(out)
}

/// Earliest caustic: `(t*, x*, x0*)`.
pub fn first_singularity(fan: &Fan) -> Result<Singularity, ManifoldError> {
    Ok(singularities(fan)?[0])
}

fn refine_singularity(fan: &Fan, tz: &[f64], i: usize, j: usize) -> Result<Singularity, ManifoldError> {
    let n = tz.len();
    let (mut x0s, mut ts) = (fan.x0[i], tz[i]);
    if i == j && i > 0 && i + 1 < n && tz[i - 1].is_finite() && tz[i + 1].is_finite() {
        let (xa, xb, xc) = (fan.x0[i - 1], fan.x0[i], fan.x0[i + 1]);
        let (ya, yb, yc) = (tz[i - 1], tz[i], tz[i + 1]);
        let d1 = (yb - ya) / (xb - xa);
        let d2 = (yc - yb) / (xc - xb);
        let curv = (d2 - d1) / (xc - xa);
        if curv > 0.0 {
            // vertex of the parabola through the three points
            let v = 0.5 * (xa + xb) - d1 / (2.0 * curv);
            if v > xa && v < xc {
                x0s = v;
                ts = lagrange3(xa, xb, xc, ya, yb, yc, v);
            }
        }
    } else if j > i {
        x0s = 0.5 * (fan.x0[i] + fan.x0[j]);
    }
    let lo = i.saturating_sub(2);
    let hi = (j + 3).min(n);
    let xs: Vec<f64> = fan.x0[lo..hi].to_vec();
    let ys = (lo..hi)
        .map(|r| fan.state_at(r, ts).map(|s| s[X]))
        .collect::<Result<Vec<_>, _>>()?;
    let x = crate::numerics::lagrange(&xs, &ys, x0s);
    Ok(Singularity { t: ts, x, x0: x0s })
}

fn lagrange3(xa: f64, xb: f64, xc: f64, ya: f64, yb: f64, yc: f64, x: f64) -> f64 {
    crate::numerics::lagrange(&[xa, xb, xc], &[ya, yb, yc], x)
}

/// One sample of a shock path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShockSample {
    pub t: f64,
    pub x: f64,
    /// Speed from the numerical time derivative of the path.
    pub c: f64,
    /// Rankine–Hugoniot quotient of the one-sided states.
    pub c_rh: f64,
    pub p_l: f64,
    pub p_r: f64,
    pub u_l: f64,
    pub u_r: f64,
    pub x0_l: f64,
    pub x0_r: f64,
    pub j_l: f64,
    pub j_r: f64,
    pub a_l: f64,
    pub a_r: f64,
    pub s: f64,
    /// False while the equal-action equation has no transversal root and
    /// the shock sits at the fold midpoint.
    pub transversal: bool,
    pub r_l: f64,
    pub r_r: f64,
    pub e: f64,
}

impl ShockSample {
    /// Path slope for interpolation: the Rankine–Hugoniot quotient, exact at
    /// the sample, once the equal-action root is transversal.
    pub fn slope(&self) -> f64 {
        if self.transversal && self.c_rh.is_finite() {
            self.c_rh
        } else {
            self.c
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShockStatus {
    Active,
    Merged { into: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShockOrigin {
    Fold,
    Merge { left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockRecord {
    pub id: usize,
    pub t_birth: f64,
    pub x_birth: f64,
    pub origin: ShockOrigin,
    pub status: ShockStatus,
    pub path: Vec<ShockSample>,
}

impl ShockRecord {
    pub fn last(&self) -> &ShockSample {
        self.path.last().expect("shock path is never empty")
    }

    pub fn t_end(&self) -> f64 {
        self.last().t
    }

    /// Path position at time `t` by cubic Hermite interpolation with the
    /// recorded speeds.
    pub fn position(&self, t: f64) -> Option<f64> {
        self.sample_pair(t).map(|(a, b)| {
            if a.t == b.t {
                a.x
            } else {
                hermite(a.t, b.t, a.x, b.x, a.slope(), b.slope(), t)
            }
        })
    }

    pub fn speed(&self, t: f64) -> Option<f64> {
        self.sample_pair(t).map(|(a, b)| {
            if a.t == b.t {
                a.slope()
            } else {
                hermite_slope(a.t, b.t, a.x, b.x, a.slope(), b.slope(), t)
            }
        })
    }

    /// Amplitude at `t`, interpolated in `s = √(t − t_birth)` where it is smooth.
    pub fn amplitude(&self, t: f64) -> Option<f64> {
        if t < self.t_birth || t > self.t_end() + 1e-12 {
            return None;
        }
        let ss: Vec<f64> = self.path.iter().map(|q| (q.t - self.t_birth).max(0.0).sqrt()).collect();
        let es: Vec<f64> = self.path.iter().map(|q| q.e).collect();
        if ss.len() == 1 {
            return Some(es[0]);
        }
        Some(lagrange_local(&ss, &es, (t - self.t_birth).max(0.0).sqrt(), 4))
    }

    fn sample_pair(&self, t: f64) -> Option<(&ShockSample, &ShockSample)> {
        let n = self.path.len();
        if t < self.path[0].t - 1e-12 || t > self.path[n - 1].t + 1e-12 {
            return None;
        }
        if n == 1 {
            return Some((&self.path[0], &self.path[0]));
        }
        let k = self.path.partition_point(|q| q.t <= t);
        let i = k.saturating_sub(1).min(n - 2);
        Some((&self.path[i], &self.path[i + 1]))
    }
}

/// Branch hints carried from one time step to the next.
#[derive(Debug, Clone, Copy)]
struct Hint {
    x0_l: f64,
    x0_r: f64,
    x: f64,
}

pub(crate) fn left_branch(curve: &LagrangianCurve, x0: f64) -> Option<usize> {
    curve
        .regular_branches()
        .filter(|(_, b)| curve.x0[b.start] <= x0)
        .map(|(i, _)| i)
        .last()
}

pub(crate) fn right_branch(curve: &LagrangianCurve, x0: f64) -> Option<usize> {
    curve
        .regular_branches()
        .find(|(_, b)| curve.x0[b.end] >= x0)
        .map(|(i, _)| i)
}

/// Locates a shock on a curve given the previous one-sided coordinates.
fn locate(
    fan: &Fan,
    curve: &LagrangianCurve,
    hint: Hint,
    id: usize,
) -> Result<ShockSample, ManifoldError> {
    let t = curve.t;
    let exhausted = || ManifoldError::BranchExhausted { id, t };
    let lb = left_branch(curve, hint.x0_l).ok_or_else(exhausted)?;
    let rb = right_branch(curve, hint.x0_r).ok_or_else(exhausted)?;
    let model = fan.model();
    let sample = |l: BranchPoint, r: BranchPoint, x: f64, transversal: bool| -> Result<ShockSample, ManifoldError> {
        let u_l = model.eval_dp_dp(x, l.p, t)?;
        let u_r = model.eval_dp_dp(x, r.p, t)?;
        let dp = l.p - r.p;
        let c_rh = if dp.abs() > 1e-12 {
            (model.eval_p(x, l.p, t)? - model.eval_p(x, r.p, t)?) / dp
        } else {
            0.5 * (u_l + u_r)
        };
        Ok(ShockSample {
            t,
            x,
            c: f64::NAN,
            c_rh,
            p_l: l.p,
            p_r: r.p,
            u_l,
            u_r,
            x0_l: l.x0,
            x0_r: r.x0,
            j_l: l.j,
            j_r: r.j,
            a_l: l.a_int,
            a_r: r.a_int,
            s: 0.5 * (l.s + r.s),
            transversal,
            r_l: f64::NAN,
            r_r: f64::NAN,
            e: f64::NAN,
        })
    };
    if lb == rb {
        // the caustic has not opened at sample resolution yet
        let x0 = 0.5 * (hint.x0_l + hint.x0_r);
        let pt = curve.branch_at_x0(lb, x0).ok_or_else(exhausted)?;
        return sample(pt, pt, pt.x, false);
    }
    let (l_lo, l_hi) = curve.branch_range(lb);
    let (r_lo, r_hi) = curve.branch_range(rb);
    let (a, b) = (r_lo.max(l_lo), l_hi.min(r_hi));
    let diff = |x: f64| -> Option<f64> {
        let l = curve.branch_at(lb, x)?;
        let r = curve.branch_at(rb, x)?;
        Some(l.s - r.s)
    };
    if a < b {
        if let (Some(da), Some(db)) = (diff(a), diff(b)) {
            if da <= 0.0 && db >= 0.0 || da >= 0.0 && db <= 0.0 {
                let tol = 1e-14 * (1.0 + a.abs().max(b.abs()));
                if let Some(x) = brent(diff, a, b, tol, 200) {
                    let l = curve.branch_at(lb, x).ok_or_else(exhausted)?;
                    let r = curve.branch_at(rb, x).ok_or_else(exhausted)?;
                    return sample(l, r, x, true);
                }
            }
        }
    }
    // fold-midpoint projection before the equal-action root is transversal
    let fold_l = curve
        .folds
        .iter()
        .find(|f| f.after == curve.branches[lb].end)
        .map(|f| f.x);
    let fold_r = curve
        .folds
        .iter()
        .find(|f| f.after + 1 == curve.branches[rb].start)
        .map(|f| f.x);
    let x = match (fold_l, fold_r) {
        (Some(p), Some(q)) => 0.5 * (p + q),
        _ => hint.x,
    };
    let l = curve.branch_at(lb, x.clamp(l_lo, l_hi)).ok_or_else(exhausted)?;
    let r = curve.branch_at(rb, x.clamp(r_lo, r_hi)).ok_or_else(exhausted)?;
    sample(l, r, x, false)
}

struct Tracker {
    record: ShockRecord,
    hint: Hint,
}

/// Tracks every shock born from the fan's caustics, resolving merges.
pub fn track_shocks(fan: &Fan) -> Result<Vec<ShockRecord>, ManifoldError> {
    let seeds = match singularities(fan) {
        Ok(s) => s,
        Err(ManifoldError::NoSingularity) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    track_from(fan, &seeds)
}

/// Tracks a single shock seeded at a caustic.
pub fn track_shock(fan: &Fan, seed: Singularity) -> Result<ShockRecord, ManifoldError> {
    Ok(track_from(fan, &[seed])?.remove(0))
}

pub fn track_from(fan: &Fan, seeds: &[Singularity]) -> Result<Vec<ShockRecord>, ManifoldError> {
    let mut done: Vec<ShockRecord> = Vec::new();
    let mut active: Vec<Tracker> = Vec::new();
    let mut pending: Vec<Singularity> = seeds.to_vec();
    pending.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut next_id = 0;
    let mut pending_iter = pending.into_iter().peekable();
    for k in 0..fan.times.len() {
        let t = fan.times[k];
        let curve = slice_index(fan, k);
        while let Some(seed) = pending_iter.next_if(|s| s.t <= t + 1e-12) {
            let hint = Hint {
                x0_l: seed.x0,
                x0_r: seed.x0,
                x: seed.x,
            };
            let mut first = locate(fan, &curve, hint, next_id)?;
            if seed.t < t {
                // birth sample at the caustic itself
                let r = ShockRecord {
                    id: next_id,
                    t_birth: seed.t,
                    x_birth: seed.x,
                    origin: ShockOrigin::Fold,
                    status: ShockStatus::Active,
                    path: vec![birth_state(fan, seed)?, first],
                };
                let hint = hint_of(&first);
                insert_sorted(&mut active, Tracker { record: r, hint });
            } else {
                first.transversal = false;
                let hint = hint_of(&first);
                insert_sorted(&mut active, Tracker {
                    record: ShockRecord {
                        id: next_id,
                        t_birth: seed.t,
                        x_birth: seed.x,
                        origin: ShockOrigin::Fold,
                        status: ShockStatus::Active,
                        path: vec![first],
                    },
                    hint,
                });
            }
            next_id += 1;
        }
        for tr in active.iter_mut() {
            if tr.record.t_end() >= t - 1e-12 {
                continue;
            }
            let s = locate(fan, &curve, tr.hint, tr.record.id)?;
            tr.hint = hint_of(&s);
            tr.record.path.push(s);
        }
        // resolve crossings between neighbours, one at a time
        while let Some(i) = (0..active.len().saturating_sub(1)).find(|&i| {
            let (a, b) = (active[i].record.last(), active[i + 1].record.last());
            a.t == b.t && a.x >= b.x && a.t == t
        }) {
            let child = merge_pair(fan, &mut active, i, k, next_id)?;
            next_id += 1;
            let right = active.remove(i + 1);
            let left = active.remove(i);
            done.push(left.record);
            done.push(right.record);
            active.insert(i, child);
        }
    }
    for tr in active {
        done.push(tr.record);
    }
    for r in done.iter_mut() {
        fill_path_speed(r);
    }
    done.sort_by_key(|r| r.id);
    Ok(done)
}

/// Keeps trackers ordered by position; crossings are detected as order
/// violations between neighbours, so the order is never re-sorted later.
fn insert_sorted(active: &mut Vec<Tracker>, tr: Tracker) {
    let at = active.partition_point(|a| a.hint.x <= tr.hint.x);
    active.insert(at, tr);
}

fn hint_of(s: &ShockSample) -> Hint {
    Hint {
        x0_l: s.x0_l,
        x0_r: s.x0_r,
        x: s.x,
    }
}

fn birth_state(fan: &Fan, seed: Singularity) -> Result<ShockSample, ManifoldError> {
    let model = fan.model();
    // one-sided limits coincide at the caustic: interpolate the row data at x0*
    let i = crate::numerics::interval_index(&fan.x0, seed.x0);
    let lo = i.saturating_sub(1);
    let hi = (i + 3).min(fan.len());
    let states = (lo..hi)
        .map(|r| fan.state_at(r, seed.t))
        .collect::<Result<Vec<_>, _>>()?;
    let xs = &fan.x0[lo..hi];
    let col = |c: usize| -> f64 {
        let v: Vec<f64> = states.iter().map(|s| s[c]).collect();
        crate::numerics::lagrange(xs, &v, seed.x0)
    };
    let p = col(P);
    let u = model.eval_dp_dp(seed.x, p, seed.t)?;
    let a = col(AI);
    Ok(ShockSample {
        t: seed.t,
        x: seed.x,
        c: f64::NAN,
        c_rh: u,
        p_l: p,
        p_r: p,
        u_l: u,
        u_r: u,
        x0_l: seed.x0,
        x0_r: seed.x0,
        j_l: 0.0,
        j_r: 0.0,
        a_l: a,
        a_r: a,
        s: col(S),
        transversal: false,
        r_l: f64::NAN,
        r_r: f64::NAN,
        e: f64::NAN,
    })
}

fn merge_pair(
    fan: &Fan,
    active: &mut [Tracker],
    i: usize,
    k: usize,
    id: usize,
) -> Result<Tracker, ManifoldError> {
    let t0 = fan.times[k - 1];
    let t1 = fan.times[k];
    let (ia, ib) = (active[i].record.id, active[i + 1].record.id);
    let pa = active[i].record.path[active[i].record.path.len() - 2];
    let pb = active[i + 1].record.path[active[i + 1].record.path.len() - 2];
    let prev_a = Hint { x0_l: pa.x0_l, x0_r: pa.x0_r, x: pa.x };
    let prev_b = Hint { x0_l: pb.x0_l, x0_r: pb.x0_r, x: pb.x };
    let gap = |t: f64| -> Option<f64> {
        let curve = slice_at(fan, t).ok()?;
        let a = locate(fan, &curve, prev_a, ia).ok()?;
        let b = locate(fan, &curve, prev_b, ib).ok()?;
        Some(b.x - a.x)
    };
    let g0 = gap(t0).unwrap_or(pb.x - pa.x);
    let g1 = active[i + 1].record.last().x - active[i].record.last().x;
    let tm = if g0 > 0.0 && g1 < 0.0 {
        brent(gap, t0, t1, 1e-13, 200).unwrap_or(t1)
    } else {
        t1
    };
    let rel = (g0 - g1) / (t1 - t0);
    if rel.abs() < 1e-6 {
        return Err(ManifoldError::TangentialCrossing { a: ia, b: ib, t: tm });
    }
    let curve = slice_at(fan, tm)?;
    // slices snap to grid times within roundoff
    let tm = curve.t;
    let sa = locate(fan, &curve, prev_a, ia)?;
    let sb = locate(fan, &curve, prev_b, ib)?;
    // parents end at the merge instant
    for (j, s) in [(i, sa), (i + 1, sb)] {
        let rec = &mut active[j].record;
        rec.path.pop();
        rec.path.push(s);
        rec.status = ShockStatus::Merged { into: id };
    }
    let x_m = 0.5 * (sa.x + sb.x);
    let hint = Hint {
        x0_l: sa.x0_l,
        x0_r: sb.x0_r,
        x: x_m,
    };
    let mut first = locate(fan, &curve, hint, id)?;
    let mut path = vec![first];
    if t1 - tm > 1e-9 * (t1 - t0) {
        let curve1 = slice_index(fan, k);
        first = locate(fan, &curve1, hint_of(&first), id)?;
        path.push(first);
    }
    Ok(Tracker {
        hint: hint_of(&first),
        record: ShockRecord {
            id,
            t_birth: tm,
            x_birth: path[0].x,
            origin: ShockOrigin::Merge { left: ia, right: ib },
            status: ShockStatus::Active,
            path,
        },
    })
}

/// Path speed by finite differences of the recorded positions
/// (three-point formula for non-uniform spacing, one-sided at the ends).
fn fill_path_speed(r: &mut ShockRecord) {
    let n = r.path.len();
    if n == 1 {
        r.path[0].c = r.path[0].c_rh;
        return;
    }
    let ts: Vec<f64> = r.path.iter().map(|q| q.t).collect();
    let xs: Vec<f64> = r.path.iter().map(|q| q.x).collect();
    for i in 0..n {
        let (a, b, c) = if n == 2 {
            (0, 0, 1)
        } else if i == 0 {
            (0, 1, 2)
        } else if i == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (i - 1, i, i + 1)
        };
        let d = if n == 2 {
            (xs[1] - xs[0]) / (ts[1] - ts[0])
        } else {
            crate::numerics::lagrange_derivative(&[ts[a], ts[b], ts[c]], &[xs[a], xs[b], xs[c]], ts[i])
        };
        r.path[i].c = d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{time_grid, AField, FanConfig, InitialData};
    use crate::expr::parse;
    use crate::numerics::linspace;
    use crate::symbol::SymbolModel;
    use std::sync::Arc;

    fn fan(s0: &str, p0: &str, n: usize, t: f64, h: f64) -> Fan {
        let init = InitialData::new(parse(s0).unwrap(), Some(parse(p0).unwrap()));
        Fan::hamiltonian(
            Arc::new(SymbolModel::burgers()),
            &init,
            AField::Auto,
            linspace(-3.0, 3.0, n),
            time_grid(t, h).unwrap(),
            FanConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn branch_counts() {
        let f = fan("x^2/2", "x", 201, 1.0, 0.1);
        for k in 0..f.times.len() {
            assert_eq!(slice_index(&f, k).branches.len(), 1);
        }
        let f = fan("log(sech(x))", "-tanh(x)", 2001, 1.5, 0.05);
        assert_eq!(slice(&f, 0.5).unwrap().branches.len(), 1);
        let c = slice(&f, 1.5).unwrap();
        assert_eq!(c.branches.len(), 3);
        assert_eq!(c.folds.len(), 2);
    }

    #[test]
    fn rarefaction_essential_action() {
        let f = fan("x^2/2", "x", 301, 1.0, 0.05);
        let c = slice(&f, 1.0).unwrap();
        let xs = linspace(-2.0, 2.0, 81);
        let sol = c.essential(&xs, &f).unwrap();
        assert!(sol.uncovered.is_empty());
        for (x, s) in xs.iter().zip(sol.action()) {
            assert!((s - x * x / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_tie_prefers_rule() {
        let f = fan("log(sech(x))", "-tanh(x)", 2001, 2.0, 0.05);
        let c = slice(&f, 2.0).unwrap();
        let pts = c.covering(0.0);
        assert_eq!(pts.len(), 3);
        let e = c.essential_at(0.0).unwrap();
        assert!((pts[0].s - pts[2].s).abs() < 1e-10);
        // both outer branches tie; equal |p| so the smaller index wins
        assert_eq!(e.branch, 0);
        let l = c.essential_at(-1e-6).unwrap().s;
        let r = c.essential_at(1e-6).unwrap().s;
        assert!((l - r).abs() < 1e-9);
    }

    #[test]
    fn first_singularity_presets() {
        let f = fan("log(sech(x))", "-tanh(x)", 601, 2.0, 0.05);
        let s = first_singularity(&f).unwrap();
        assert!((s.t - 1.0).abs() < 1e-6, "{s:?}");
        assert!(s.x.abs() < 1e-6 && s.x0.abs() < 1e-6);
        let f = fan("-x^2/2", "-x", 61, 1.5, 0.05);
        let s = first_singularity(&f).unwrap();
        assert!((s.t - 1.0).abs() < 1e-9 && s.x.abs() < 1e-9);
        let f = fan("x^2/2", "x", 61, 1.5, 0.05);
        assert_eq!(first_singularity(&f), Err(ManifoldError::NoSingularity));
    }

    #[test]
    fn symmetric_shock_is_stationary() {
        let f = fan("log(sech(x))", "-tanh(x)", 1201, 2.5, 0.05);
        let shocks = track_shocks(&f).unwrap();
        assert_eq!(shocks.len(), 1);
        let r = &shocks[0];
        for q in &r.path {
            assert!(q.x.abs() < 1e-9, "{q:?}");
            assert!(q.c.abs() < 1e-8);
            if q.transversal {
                assert!(q.u_l > q.c && q.c > q.u_r);
            }
        }
        assert!(r.path.iter().filter(|q| q.transversal).count() > 20);
    }
}
