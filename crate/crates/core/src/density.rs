//! Generalized δ-shock density: the smooth part transported by the Cauchy
//! formula, shock amplitudes from the one-dimensional jump relation and the
//! Kirchhoff balance at merges.

use std::sync::Arc;

use thiserror::Error;

use crate::characteristics::{AField, Fan, AI, DX};
use crate::expr::{EvalError, Expression};
use crate::manifold::{
    slice_index, BranchPoint, EssentialSolution, LagrangianCurve, ManifoldError, ShockOrigin,
    ShockRecord,
};
use crate::numerics::lagrange;
use crate::symbol::SymbolError;

/// Jacobians below this magnitude away from shocks mean the solution
/// touches a fold.
pub const FOLD_CONTACT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("fold contact at t = {t}, x = {x}: |J| = {j:.3e}")]
    FoldContact { t: f64, x: f64, j: f64 },
    #[error("shock {id} has negative amplitude {e:.3e} at t = {t}")]
    NegativeAmplitude { id: usize, t: f64, e: f64 },
    #[error("merge parents of shock {0} have not been evolved")]
    MissingParent(usize),
    #[error("negative density {0}")]
    NegativeDensity(f64),
}

#[derive(Clone)]
pub struct GeneralizedDensity {
    pub fan: Arc<Fan>,
    pub rho0: Expression,
    pub a_field: AField,
    pub shocks: Vec<ShockRecord>,
}

impl std::fmt::Debug for GeneralizedDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralizedDensity")
            .field("rho0", &self.rho0.source())
            .field("shocks", &self.shocks.len())
            .finish()
    }
}

/// Smooth part only: `R = ρ₀ |J|⁻¹ exp(−∫a dt)`.
pub fn transport_r(fan: Arc<Fan>, rho0: Expression, a_field: AField) -> GeneralizedDensity {
    GeneralizedDensity {
        fan,
        rho0,
        a_field,
        shocks: Vec::new(),
    }
}

/// Mass at one time, split into smooth and singular parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRecord {
    pub t: f64,
    pub smooth: f64,
    pub singular: f64,
}

impl MassRecord {
    pub fn total(&self) -> f64 {
        self.smooth + self.singular
    }
}

impl GeneralizedDensity {
    /// Smooth density carried by row `row` at grid index `k`.
    pub fn r_row(&self, row: usize, k: usize) -> Result<f64, DensityError> {
        let y = &self.fan.rows[row][k];
        let rho = self.rho0.eval(self.fan.x0[row], 0.0)?;
        Ok(rho / y[DX].abs() * (-y[AI]).exp())
    }

    /// Smooth density at an interpolated branch point.
    pub fn r_point(&self, pt: &BranchPoint) -> Result<f64, EvalError> {
        let rho = self.rho0.eval(pt.x0, 0.0)?;
        Ok(rho / pt.j.abs() * (-pt.a_int).exp())
    }

    /// Density at `x` on a curve, from the essential branch.
    pub fn r_at(&self, curve: &LagrangianCurve, x: f64) -> Result<Option<f64>, DensityError> {
        let Some(pt) = curve.essential_at(x) else {
            return Ok(None);
        };
        if pt.j.abs() < FOLD_CONTACT {
            return Err(DensityError::FoldContact { t: curve.t, x, j: pt.j });
        }
        let r = self.r_point(&pt)?;
        if r < 0.0 {
            return Err(DensityError::NegativeDensity(r));
        }
        Ok(Some(r))
    }

    /// Density slice on an x grid; `None` where uncovered.
    pub fn slice(&self, k: usize, xs: &[f64]) -> Result<Vec<Option<f64>>, DensityError> {
        let curve = slice_index(&self.fan, k);
        xs.iter().map(|&x| self.r_at(&curve, x)).collect()
    }

    /// Fills one-sided densities and amplitudes of every shock, parents
    /// before children so that merges can apply the Kirchhoff balance.
    pub fn evolve_amplitudes(&mut self, shocks: Vec<ShockRecord>) -> Result<(), DensityError> {
        self.shocks = shocks;
        self.shocks.sort_by_key(|s| s.id);
        for i in 0..self.shocks.len() {
            let e0 = match self.shocks[i].origin {
                ShockOrigin::Fold => 0.0,
                ShockOrigin::Merge { left, right } => {
                    let find = |id: usize| {
                        self.shocks[..i]
                            .iter()
                            .find(|s| s.id == id)
                            .map(|s| s.last().e)
                            .ok_or(DensityError::MissingParent(self.shocks[i].id))
                    };
                    merge_amplitude(find(left)?, find(right)?)
                }
            };
            let mut rec = self.shocks[i].clone();
            self.evolve_amplitude(&mut rec, e0)?;
            self.shocks[i] = rec;
        }
        Ok(())
    }

    /// Integrates `de/dt = R_l(u_l − c) − R_r(u_r − c) − f(c) e` along a
    /// tracked path in the variable `s = √(t − t_birth)`, in which the
    /// inflow is smooth even though it blows up like `(t − t_birth)^{-1/2}`
    /// at a caustic.
    pub fn evolve_amplitude(&self, rec: &mut ShockRecord, e0: f64) -> Result<(), DensityError> {
        let tb = rec.t_birth;
        let from_fold = matches!(rec.origin, ShockOrigin::Fold);
        for q in rec.path.iter_mut() {
            if q.transversal {
                q.r_l = self.rho0.eval(q.x0_l, 0.0)? / q.j_l.abs() * (-q.a_l).exp();
                q.r_r = self.rho0.eval(q.x0_r, 0.0)? / q.j_r.abs() * (-q.a_r).exp();
            }
        }
        // nodes: the birth instant plus every transversal sample
        let mut nodes: Vec<usize> = vec![0];
        nodes.extend((1..rec.path.len()).filter(|&i| rec.path[i].transversal));
        if !from_fold && rec.path[0].transversal {
            let q = &mut rec.path[0];
            q.r_l = self.rho0.eval(q.x0_l, 0.0)? / q.j_l.abs() * (-q.a_l).exp();
            q.r_r = self.rho0.eval(q.x0_r, 0.0)? / q.j_r.abs() * (-q.a_r).exp();
        }
        let s: Vec<f64> = nodes.iter().map(|&i| (rec.path[i].t - tb).max(0.0).sqrt()).collect();
        let mut g = Vec::with_capacity(nodes.len());
        let mut damp = Vec::with_capacity(nodes.len());
        for (n, &i) in nodes.iter().enumerate() {
            let q = &rec.path[i];
            let c = q.c_rh;
            let f = self.a_field.on_stratum(q.x, c, q.t)?;
            damp.push(2.0 * s[n] * f);
            if n == 0 {
                g.push(0.0);
            } else {
                let flux = q.r_l * (q.u_l - c) - q.r_r * (q.u_r - c);
                g.push(2.0 * s[n] * flux);
            }
        }
        if from_fold && nodes.len() >= 5 {
            // the inflow is singular at the caustic; extrapolate 2sF to s = 0
            g[0] = lagrange(&s[1..5], &g[1..5], 0.0);
        } else if !from_fold {
            let q = &rec.path[0];
            if q.transversal {
                g[0] = 0.0;
            }
        }
        let mut e = vec![e0; nodes.len()];
        for n in 1..nodes.len() {
            let (s0, s1) = (s[n - 1], s[n]);
            let h = s1 - s0;
            if h <= 0.0 {
                e[n] = e[n - 1];
                continue;
            }
            let interp = |v: &[f64], x: f64| local_cubic(&s, v, n - 1, x);
            let rhs = |x: f64, y: f64| interp(&g, x) - interp(&damp, x) * y;
            let sm = s0 + 0.5 * h;
            let k1 = rhs(s0, e[n - 1]);
            let k2 = rhs(sm, e[n - 1] + 0.5 * h * k1);
            let k3 = rhs(sm, e[n - 1] + 0.5 * h * k2);
            let k4 = rhs(s1, e[n - 1] + h * k3);
            e[n] = e[n - 1] + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        for (n, &i) in nodes.iter().enumerate() {
            if e[n] < -1e-10 {
                return Err(DensityError::NegativeAmplitude {
                    id: rec.id,
                    t: rec.path[i].t,
                    e: e[n],
                });
            }
            rec.path[i].e = e[n].max(0.0);
        }
        // non-transversal samples between nodes take interpolated amplitudes
        for i in 0..rec.path.len() {
            if !rec.path[i].e.is_nan() {
                continue;
            }
            let si = (rec.path[i].t - tb).max(0.0).sqrt();
            let k = s.partition_point(|&v| v <= si).saturating_sub(1);
            rec.path[i].e = local_cubic(&s, &e, k.min(s.len().saturating_sub(2)), si).max(0.0);
        }
        Ok(())
    }

    /// Smooth and singular mass at grid index `k`, with the smooth part
    /// integrated in Lagrangian form over the essential part of the fan.
    pub fn mass(&self, k: usize) -> Result<MassRecord, DensityError> {
        let fan = &self.fan;
        let t = fan.times[k];
        let xs = &fan.x0;
        let w: Vec<f64> = (0..fan.len())
            .map(|i| {
                let y = &fan.rows[i][k];
                Ok(self.rho0.eval(xs[i], 0.0)? * (-y[AI]).exp())
            })
            .collect::<Result<_, EvalError>>()?;
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        let mut smooth = integrate_samples(xs, &w, lo, hi);
        let mut singular = 0.0;
        for sh in &self.shocks {
            let Some(q) = sh.path.iter().find(|q| (q.t - t).abs() <= 1e-12) else {
                continue;
            };
            if matches!(sh.status, crate::manifold::ShockStatus::Merged { .. })
                && (sh.t_end() - t).abs() <= 1e-12
            {
                continue;
            }
            singular += q.e;
            // at a fold birth the absorbed set is a single point; the sample
            // only carries the bracketing fold projections
            let birth = matches!(sh.origin, crate::manifold::ShockOrigin::Fold)
                && (q.t - sh.t_birth).abs() <= 1e-12;
            if q.x0_r > q.x0_l && !birth {
                smooth -= integrate_samples(xs, &w, q.x0_l, q.x0_r);
            }
        }
        Ok(MassRecord { t, smooth, singular })
    }

    /// `exp(−S/h) √R` on the regular set; points within `collar` of a
    /// shock are masked.
    pub fn madelung_assemble(
        &self,
        ess: &EssentialSolution,
        h: f64,
        collar: f64,
    ) -> Result<Vec<Option<f64>>, DensityError> {
        let t = ess.t;
        let fronts: Vec<f64> = self.shocks.iter().filter_map(|s| s.position(t)).collect();
        let mut out = Vec::with_capacity(ess.x.len());
        for (x, pt) in ess.x.iter().zip(&ess.points) {
            let masked = fronts.iter().any(|xs| (x - xs).abs() <= collar);
            match pt {
                Some(pt) if !masked => {
                    let r = self.r_point(pt)?;
                    if r < 0.0 {
                        return Err(DensityError::NegativeDensity(r));
                    }
                    out.push(Some((-pt.s / h).exp() * r.sqrt()));
                }
                _ => out.push(None),
            }
        }
        Ok(out)
    }
}

/// Kirchhoff balance at a merge point: `e₃ = e₁ + e₂`.
pub fn merge_amplitude(e1: f64, e2: f64) -> f64 {
    e1 + e2
}

/// Cubic through the four nodes around interval `[i, i+1]`.
fn local_cubic(xs: &[f64], ys: &[f64], i: usize, x: f64) -> f64 {
    let n = xs.len();
    if n == 1 {
        return ys[0];
    }
    let m = n.min(4);
    let start = i.saturating_sub(1).min(n - m);
    lagrange(&xs[start..start + m], &ys[start..start + m], x)
}

/// Integral over `[a, b]` of the piecewise cubic interpolant of samples,
/// two-point Gauss on every sub-interval (exact for the cubic).
pub fn integrate_samples(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let g = 0.5 / 3f64.sqrt();
    let n = xs.len();
    let mut total = 0.0;
    for i in 0..n - 1 {
        let lo = xs[i].max(a);
        let hi = xs[i + 1].min(b);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let len = hi - lo;
        let f = |x: f64| local_cubic(xs, ys, i, x);
        total += 0.5 * len * (f(mid - g * len) + f(mid + g * len));
    }
    total
}
