//! Python bindings: scenario loading, the CLI subcommands as in-memory
//! tables, and direct access to singularities, essential actions, densities
//! and shock paths.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use engine::cli::{self, CliError, Command, OracleKind};
use engine::density::GeneralizedDensity;
use engine::manifold::{singularities, slice_index, ManifoldError, ShockOrigin, ShockStatus};

fn to_py(e: CliError) -> PyErr {
    match e {
        CliError::Usage(_) | CliError::MissingFile(_) | CliError::Validation(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn command(name: &str, kind: Option<&str>) -> PyResult<Command> {
    let oracle = |k: &str| match k {
        "hopf-lax" => Ok(OracleKind::HopfLax),
        "godunov" => Ok(OracleKind::Godunov),
        "kf-lattice" => Ok(OracleKind::KfLattice),
        "tunnel-compare" => Ok(OracleKind::TunnelCompare),
        other => Err(PyValueError::new_err(format!("unknown oracle '{other}'"))),
    };
    Ok(match (name, kind) {
        ("evolve", None) => Command::Evolve,
        ("singularity", None) => Command::Singularity,
        ("shock", None) => Command::Shock,
        ("verify", None) => Command::Verify,
        ("limit-study", None) => Command::LimitStudy,
        ("oracle", Some(k)) => Command::Oracle { kind: oracle(k)? },
        ("oracle", None) => return Err(PyValueError::new_err("oracle needs a kind")),
        (other, _) => return Err(PyValueError::new_err(format!("unknown command '{other}'"))),
    })
}

/// A validated scenario. The fan, shocks and amplitudes are computed on
/// first use and kept.
#[pyclass(frozen, module = "tunnelshock")]
struct Scenario {
    inner: cli::Scenario,
    density: OnceLock<GeneralizedDensity>,
}

impl Scenario {
    fn wrap(inner: cli::Scenario) -> Self {
        Scenario { inner, density: OnceLock::new() }
    }

    fn gd(&self, py: Python<'_>) -> PyResult<&GeneralizedDensity> {
        if let Some(gd) = self.density.get() {
            return Ok(gd);
        }
        let gd = py.detach(|| self.inner.density()).map_err(to_py)?;
        Ok(self.density.get_or_init(|| gd))
    }

    fn index(&self, py: Python<'_>, t: f64) -> PyResult<usize> {
        self.gd(py)?.fan.time_index(t).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_file(path: std::path::PathBuf) -> PyResult<Self> {
        cli::Scenario::from_file(&path).map(Self::wrap).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        cli::Scenario::parse(text).map(Self::wrap).map_err(to_py)
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times()
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid()
    }

    /// Runs a subcommand and returns its CSV tables by file name.
    #[pyo3(signature = (name, kind=None))]
    fn run(&self, py: Python<'_>, name: &str, kind: Option<&str>) -> PyResult<BTreeMap<String, String>> {
        let cmd = command(name, kind)?;
        let tables = py.detach(|| cli::execute(cmd, &self.inner)).map_err(to_py)?;
        Ok(tables.into_iter().collect())
    }

    /// Caustics as `(t, x, x0)`, earliest first; empty if the fan never folds.
    fn singularities(&self, py: Python<'_>) -> PyResult<Vec<(f64, f64, f64)>> {
        let fan = &self.gd(py)?.fan;
        match singularities(fan) {
            Ok(s) => Ok(s.into_iter().map(|s| (s.t, s.x, s.x0)).collect()),
            Err(ManifoldError::NoSingularity) => Ok(Vec::new()),
            Err(e) => Err(runtime(e)),
        }
    }

    /// Essential action and velocity at grid time `t`; NaN where uncovered.
    fn essential(&self, py: Python<'_>, t: f64, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let k = self.index(py, t)?;
        let fan = &self.gd(py)?.fan;
        let ess = slice_index(fan, k).essential(&xs, fan).map_err(runtime)?;
        let u = ess.u.iter().zip(&ess.points).map(|(&u, p)| if p.is_some() { u } else { f64::NAN }).collect();
        Ok((ess.action(), u))
    }

    /// Smooth density `R` at grid time `t`; NaN where uncovered.
    fn density(&self, py: Python<'_>, t: f64, xs: Vec<f64>) -> PyResult<Vec<f64>> {
        let k = self.index(py, t)?;
        let r = self.gd(py)?.slice(k, &xs).map_err(runtime)?;
        Ok(r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }

    /// `(smooth, singular)` mass at grid time `t`.
    fn mass(&self, py: Python<'_>, t: f64) -> PyResult<(f64, f64)> {
        let k = self.index(py, t)?;
        let m = self.gd(py)?.mass(k).map_err(runtime)?;
        Ok((m.smooth, m.singular))
    }

    /// One dict per shock with its origin, status and sampled path.
    fn shocks<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
        use pyo3::types::PyDict;
        let gd = self.gd(py)?;
        gd.shocks
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("id", s.id)?;
                d.set_item("t_birth", s.t_birth)?;
                d.set_item("x_birth", s.x_birth)?;
                match s.origin {
                    ShockOrigin::Fold => d.set_item("parents", None::<(usize, usize)>)?,
                    ShockOrigin::Merge { left, right } => d.set_item("parents", (left, right))?,
                }
                match s.status {
                    ShockStatus::Active => d.set_item("merged_into", None::<usize>)?,
                    ShockStatus::Merged { into } => d.set_item("merged_into", into)?,
                }
                d.set_item("t", s.path.iter().map(|q| q.t).collect::<Vec<_>>())?;
                d.set_item("x", s.path.iter().map(|q| q.x).collect::<Vec<_>>())?;
                d.set_item("c", s.path.iter().map(|q| q.c).collect::<Vec<_>>())?;
                d.set_item("e", s.path.iter().map(|q| q.e).collect::<Vec<_>>())?;
                Ok(d)
            })
            .collect()
    }
}

/// Evaluates an expression in `x` and `t`.
#[pyfunction]
#[pyo3(signature = (source, x, t=0.0))]
fn evaluate(source: &str, x: f64, t: f64) -> PyResult<f64> {
    let e = engine::expr::parse(source).map_err(|e| PyValueError::new_err(e.to_string()))?;
    e.eval(x, t).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("tunnelshock".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule]
fn tunnelshock(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
