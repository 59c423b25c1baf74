//! The Kolmogorov–Feller symbol
//! `P(x, p, t) = A(x) p² + V(x) + Σ λ_k(x) (e^{p ν_k} − 1)`
//! with analytic momentum derivatives and finite-difference spatial ones.

use thiserror::Error;

use crate::expr::{EvalError, Expression, Var};

/// Largest admissible `|p ν|` before the exponential is declared out of range.
pub const EXPONENT_GUARD: f64 = 700.0;
/// Default momentum search box for Legendre inversion.
pub const MOMENTUM_BOX: (f64, f64) = (-20.0, 20.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SymbolError {
    #[error("exponent out of range: |p*nu| = {0:.3e} exceeds the guard")]
    Range(f64),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no momentum with dP/dp = {v} inside [{lo}, {hi}] at x = {x}")]
    NoRoot { x: f64, v: f64, lo: f64, hi: f64 },
    #[error("invalid symbol: {0}")]
    Invalid(String),
}

/// A coefficient that is either a literal constant or a parsed expression.
#[derive(Debug, Clone)]
pub enum Coef {
    Const(f64),
    Expr(Expression),
}

impl Coef {
    pub fn from_expr(e: Expression) -> Self {
        if e.is_constant() {
            // constant expressions never touch the variables, so the bindings are irrelevant
            if let Ok(v) = e.eval(0.0, 0.0) {
                return Coef::Const(v);
            }
        }
        Coef::Expr(e)
    }

    pub fn parse(src: &str) -> Result<Self, crate::expr::ParseError> {
        crate::expr::parse(src).map(Coef::from_expr)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coef::Const(_))
    }

    pub fn depends_on_x(&self) -> bool {
        matches!(self, Coef::Expr(e) if e.depends_on(Var::X))
    }

    pub fn depends_on_t(&self) -> bool {
        matches!(self, Coef::Expr(e) if e.depends_on(Var::T))
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        match self {
            Coef::Const(c) => Ok(*c),
            Coef::Expr(e) => e.eval(x, t),
        }
    }

    /// Central first derivative in x, step `1e-6 (1 + |x|)`.
    pub fn dx(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        if !self.depends_on_x() {
            return Ok(0.0);
        }
        let h = 1e-6 * (1.0 + x.abs());
        Ok((self.eval(x + h, t)? - self.eval(x - h, t)?) / (2.0 * h))
    }

    /// Central second derivative in x, step `1e-4 (1 + |x|)`.
    pub fn dxx(&self, x: f64, t: f64) -> Result<f64, EvalError> {
        if !self.depends_on_x() {
            return Ok(0.0);
        }
        let h = 1e-4 * (1.0 + x.abs());
        let c = self.eval(x, t)?;
        Ok((self.eval(x + h, t)? - 2.0 * c + self.eval(x - h, t)?) / (h * h))
    }

    fn source(&self) -> String {
        match self {
            Coef::Const(c) => format!("{c:?}"),
            Coef::Expr(e) => e.source().to_string(),
        }
    }
}

impl From<f64> for Coef {
    fn from(v: f64) -> Self {
        Coef::Const(v)
    }
}

#[derive(Debug, Clone)]
pub struct Jump {
    pub nu: f64,
    pub rate: Coef,
}

/// Values of the symbol and its derivatives at one phase point.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymbolJet {
    pub p: f64,
    pub p_p: f64,
    pub p_x: f64,
    pub p_pp: f64,
    pub p_xp: f64,
    pub p_xx: f64,
}

#[derive(Debug, Clone)]
pub struct SymbolModel {
    pub a: Coef,
    pub v: Coef,
    pub jumps: Vec<Jump>,
    pub time_dependent: bool,
}

impl SymbolModel {
    pub fn new(a: Coef, v: Coef, jumps: Vec<Jump>, time_dependent: bool) -> Result<Self, SymbolError> {
        let m = SymbolModel {
            a,
            v,
            jumps,
            time_dependent,
        };
        m.validate()?;
        Ok(m)
    }

    /// `P = a p² + v`, the workhorse of most presets.
    pub fn quadratic(a: f64, v: f64) -> Self {
        SymbolModel {
            a: Coef::Const(a),
            v: Coef::Const(v),
            jumps: Vec::new(),
            time_dependent: false,
        }
    }

    pub fn burgers() -> Self {
        Self::quadratic(0.5, 0.0)
    }

    pub fn pure_jump(rate: f64, nu: f64) -> Self {
        SymbolModel {
            a: Coef::Const(0.0),
            v: Coef::Const(0.0),
            jumps: vec![Jump {
                nu,
                rate: Coef::Const(rate),
            }],
            time_dependent: false,
        }
    }

    pub fn validate(&self) -> Result<(), SymbolError> {
        let coefs = std::iter::once(&self.a)
            .chain(std::iter::once(&self.v))
            .chain(self.jumps.iter().map(|j| &j.rate));
        for c in coefs {
            if c.depends_on_t() && !self.time_dependent {
                return Err(SymbolError::Invalid(format!(
                    "coefficient `{}` depends on t but the symbol is not marked time dependent",
                    c.source()
                )));
            }
        }
        if let Coef::Const(a) = self.a {
            if a < 0.0 {
                return Err(SymbolError::Invalid(format!("diffusion coefficient {a} < 0")));
            }
        }
        for j in &self.jumps {
            if !j.nu.is_finite() {
                return Err(SymbolError::Invalid("non-finite jump size".into()));
            }
            if let Coef::Const(r) = j.rate {
                if r < 0.0 {
                    return Err(SymbolError::Invalid(format!("jump rate {r} < 0")));
                }
            }
        }
        Ok(())
    }

    /// True when no coefficient depends on x.
    pub fn is_homogeneous(&self) -> bool {
        !self.a.depends_on_x()
            && !self.v.depends_on_x()
            && self.jumps.iter().all(|j| !j.rate.depends_on_x())
    }

    fn expo(nu: f64, p: f64) -> Result<f64, SymbolError> {
        let arg = p * nu;
        if arg.abs() > EXPONENT_GUARD {
            return Err(SymbolError::Range(arg.abs()));
        }
        Ok(arg.exp())
    }

    pub fn eval_p(&self, x: f64, p: f64, t: f64) -> Result<f64, SymbolError> {
        let mut s = self.a.eval(x, t)? * p * p + self.v.eval(x, t)?;
        for j in &self.jumps {
            s += j.rate.eval(x, t)? * (Self::expo(j.nu, p)? - 1.0);
        }
        Ok(s)
    }

    pub fn eval_dp_dp(&self, x: f64, p: f64, t: f64) -> Result<f64, SymbolError> {
        let mut s = 2.0 * self.a.eval(x, t)? * p;
        for j in &self.jumps {
            s += j.rate.eval(x, t)? * j.nu * Self::expo(j.nu, p)?;
        }
        Ok(s)
    }

    pub fn eval_dp_dx(&self, x: f64, p: f64, t: f64) -> Result<f64, SymbolError> {
        let mut s = self.a.dx(x, t)? * p * p + self.v.dx(x, t)?;
        for j in &self.jumps {
            s += j.rate.dx(x, t)? * (Self::expo(j.nu, p)? - 1.0);
        }
        Ok(s)
    }

    pub fn eval_hess(&self, x: f64, p: f64, t: f64) -> Result<f64, SymbolError> {
        let mut s = 2.0 * self.a.eval(x, t)?;
        for j in &self.jumps {
            s += j.rate.eval(x, t)? * j.nu * j.nu * Self::expo(j.nu, p)?;
        }
        Ok(s)
    }

    /// Everything the characteristic system needs in one pass.
    pub fn jet(&self, x: f64, p: f64, t: f64) -> Result<SymbolJet, SymbolError> {
        let a = self.a.eval(x, t)?;
        let a1 = self.a.dx(x, t)?;
        let a2 = self.a.dxx(x, t)?;
        let mut jet = SymbolJet {
            p: a * p * p + self.v.eval(x, t)?,
            p_p: 2.0 * a * p,
            p_x: a1 * p * p + self.v.dx(x, t)?,
            p_pp: 2.0 * a,
            p_xp: 2.0 * a1 * p,
            p_xx: a2 * p * p + self.v.dxx(x, t)?,
        };
        for j in &self.jumps {
            let e = Self::expo(j.nu, p)?;
            let l = j.rate.eval(x, t)?;
            let (l1, l2) = (j.rate.dx(x, t)?, j.rate.dxx(x, t)?);
            jet.p += l * (e - 1.0);
            jet.p_p += l * j.nu * e;
            jet.p_pp += l * j.nu * j.nu * e;
            jet.p_x += l1 * (e - 1.0);
            jet.p_xp += l1 * j.nu * e;
            jet.p_xx += l2 * (e - 1.0);
        }
        Ok(jet)
    }

    /// Solves `dP/dp(x, p, t) = v` for `p` and returns `(p, v p − P)`.
    pub fn legendre(&self, x: f64, v: f64, t: f64) -> Result<(f64, f64), SymbolError> {
        self.legendre_in(x, v, t, MOMENTUM_BOX)
    }

    pub fn legendre_in(
        &self,
        x: f64,
        v: f64,
        t: f64,
        (lo0, hi0): (f64, f64),
    ) -> Result<(f64, f64), SymbolError> {
        let f = |p: f64| self.eval_dp_dp(x, p, t).map(|d| d - v);
        let no_root = || SymbolError::NoRoot { x, v, lo: lo0, hi: hi0 };
        let (flo, fhi) = (f(lo0)?, f(hi0)?);
        if flo > 0.0 || fhi < 0.0 {
            return Err(no_root());
        }
        let (mut lo, mut hi) = (lo0, hi0);
        let mut p = if flo == 0.0 {
            lo
        } else if fhi == 0.0 {
            hi
        } else {
            0.0f64.clamp(lo, hi)
        };
        for _ in 0..200 {
            let r = f(p)?;
            if r == 0.0 {
                break;
            }
            if r < 0.0 {
                lo = p;
            } else {
                hi = p;
            }
            let d = self.eval_hess(x, p, t)?;
            let mut next = if d > 0.0 { p - r / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - p).abs() <= 4.0 * f64::EPSILON * (1.0 + p.abs());
            p = next;
            if done || hi - lo <= 4.0 * f64::EPSILON * (1.0 + p.abs()) {
                break;
            }
        }
        let l = v * p - self.eval_p(x, p, t)?;
        Ok((p, l))
    }
}
