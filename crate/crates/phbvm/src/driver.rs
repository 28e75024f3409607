//! Multi-step integration, invariant tracking, convergence tables and
//! long-time error-growth studies.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::casimir::{self, CasimirOptions};
use crate::error::{Error, Result};
use crate::poisson::PoissonSystem;
use crate::solve::{self, SolverConfig};
use crate::tableau::{build_tableau, MethodTableau};

/// Integration method family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// s-stage Gauss collocation, identical to PHBVM(s, s).
    Gauss,
    /// Energy-conserving PHBVM(k, s).
    Phbvm,
    /// Energy- and Casimir-conserving EPHBVM(k, s).
    Ephbvm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Gauss => write!(f, "gauss"),
            Method::Phbvm => write!(f, "phbvm"),
            Method::Ephbvm => write!(f, "ephbvm"),
        }
    }
}

/// A fully specified method instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: Method,
    pub k: usize,
    pub s: usize,
}

impl MethodSpec {
    /// Validated constructor; Gauss requires k = s.
    pub fn new(method: Method, k: usize, s: usize) -> Result<Self> {
        if method == Method::Gauss && k != s {
            return Err(Error::InvalidArgument(format!(
                "the Gauss method requires k = s (got k = {k}, s = {s})"
            )));
        }
        if s == 0 || s > k {
            return Err(Error::TableauParams { k, s });
        }
        Ok(Self { method, k, s })
    }

    /// The s-stage Gauss method, PHBVM(s, s).
    pub fn gauss(s: usize) -> Result<Self> {
        Self::new(Method::Gauss, s, s)
    }

    /// Short label, e.g. `gauss-3` or `phbvm-6-3`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Gauss => format!("gauss-{}", self.s),
            _ => format!("{}-{}-{}", self.method, self.k, self.s),
        }
    }

    pub fn build(&self) -> Result<MethodTableau> {
        build_tableau(self.k, self.s)
    }
}

/// Recorded data of one integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Step times t_n = n h, n = 0..=n_steps.
    pub times: Vec<f64>,
    /// Stored states, thinned by `state_stride` (state at step i is kept
    /// when i % stride == 0); the final state is always available in
    /// `final_state`.
    pub states: Vec<DVector<f64>>,
    pub state_stride: usize,
    pub final_state: DVector<f64>,
    /// Per-step energy defect |H(y_n) - H(y_0)|; entry 0 is zero.
    pub h_error: Vec<f64>,
    /// Per-step worst Casimir defect max_l |C_l(y_n) - C_l(y_0)|; all zeros
    /// when the system has no Casimirs.
    pub c_error: Vec<f64>,
    /// Solver iterations per step.
    pub iterations: Vec<usize>,
    pub wall_time: f64,
}

impl Trajectory {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
        }
    }

    pub fn max_h_error(&self) -> f64 {
        self.h_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_c_error(&self) -> f64 {
        self.c_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Apply n_steps one-step maps, recording invariant defects after every
/// step. A non-converged or failed step aborts with its index.
pub fn integrate(
    sys: &dyn PoissonSystem,
    spec: &MethodSpec,
    y0: &DVector<f64>,
    h: f64,
    n_steps: usize,
    cfg: &SolverConfig,
    state_stride: usize,
) -> Result<Trajectory> {
    if state_stride == 0 {
        return Err(Error::InvalidArgument("state stride must be positive".into()));
    }
    if spec.method == Method::Ephbvm && sys.num_casimirs() == 0 {
        return Err(Error::MissingCasimirs);
    }
    let tab = spec.build()?;
    let start = Instant::now();

    let h0 = sys.hamiltonian(y0).map_err(|e| at_step(0, e))?;
    let num_c = sys.num_casimirs();
    let c0: Vec<f64> = (0..num_c)
        .map(|i| sys.casimir(i, y0))
        .collect::<Result<_>>()
        .map_err(|e| at_step(0, e))?;

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut h_error = Vec::with_capacity(n_steps + 1);
    let mut c_error = Vec::with_capacity(n_steps + 1);
    let mut iterations = Vec::with_capacity(n_steps);
    let mut states = Vec::new();
    times.push(0.0);
    h_error.push(0.0);
    c_error.push(0.0);
    states.push(y0.clone());

    let mut y = y0.clone();
    let mut warm_phi: Option<DVector<f64>> = None;
    let casimir_opts = CasimirOptions::default();
    for step_idx in 0..n_steps {
        let phi0 = if cfg.warm_start {
            warm_phi.as_ref()
        } else {
            None
        };
        let (result, phi) = match spec.method {
            Method::Ephbvm => {
                casimir::casimir_step_with_initial(sys, &tab, &y, h, cfg, &casimir_opts, phi0)
                    .map_err(|e| at_step(step_idx, e))?
            }
            _ => solve::step_with_initial(sys, &tab, &y, h, cfg, phi0)
                .map_err(|e| at_step(step_idx, e))?,
        };
        if !result.converged {
            return Err(Error::StepFailed {
                step: step_idx,
                residual: result.residual_norm,
                iterations: result.iterations,
            });
        }
        warm_phi = Some(phi);
        y = result.y1;
        iterations.push(result.iterations);
        times.push((step_idx + 1) as f64 * h);
        let hv = sys.hamiltonian(&y).map_err(|e| at_step(step_idx, e))?;
        h_error.push((hv - h0).abs());
        let mut worst = 0.0f64;
        for (i, &c_ref) in c0.iter().enumerate() {
            let cv = sys.casimir(i, &y).map_err(|e| at_step(step_idx, e))?;
            worst = worst.max((cv - c_ref).abs());
        }
        c_error.push(worst);
        if (step_idx + 1) % state_stride == 0 {
            states.push(y.clone());
        }
    }

    Ok(Trajectory {
        times,
        states,
        state_stride,
        final_state: y,
        h_error,
        c_error,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn at_step(step: usize, source: Error) -> Error {
    match source {
        e @ (Error::StepFailed { .. } | Error::AtStep { .. }) => e,
        other => Error::AtStep {
            step,
            source: Box::new(other),
        },
    }
}

/// Max-norm error of the final state against y0, valid when the trajectory
/// spans an integer number of reference periods (the benchmark solutions
/// are periodic, so y(periods T) = y0).
pub fn periodic_error(
    traj: &Trajectory,
    y0: &DVector<f64>,
    period: f64,
    periods: usize,
) -> Result<f64> {
    let total = traj.times.last().copied().unwrap_or(0.0) - traj.times[0];
    let expected = period * periods as f64;
    if (total - expected).abs() > 1e-6 * expected.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "trajectory spans {total:.12e}, not {periods} reference periods ({expected:.12e})"
        )));
    }
    Ok((&traj.final_state - y0).amax())
}

/// Errors below this scale count as roundoff-saturated; convergence rates
/// are not reported for them.
pub const RATE_SATURATION: f64 = 10.0 * f64::EPSILON;

/// One row of a convergence table.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    /// Steps per period.
    pub n: usize,
    pub e_y: f64,
    pub rate_y: Option<f64>,
    pub e_h: f64,
    pub rate_h: Option<f64>,
    /// Casimir error; absent for systems without Casimirs.
    pub e_c: Option<f64>,
    pub rate_c: Option<f64>,
    pub mean_iterations: f64,
    pub time_sec: f64,
}

fn rate_between(e_prev: f64, e_cur: f64, n_prev: usize, n_cur: usize) -> Option<f64> {
    if e_prev > RATE_SATURATION && e_cur > RATE_SATURATION {
        Some((e_prev / e_cur).ln() / (n_cur as f64 / n_prev as f64).ln())
    } else {
        None
    }
}

/// Run one method over a list of per-period step counts and assemble the
/// convergence table. Cells run in parallel; records are merged in n-order
/// and rates computed between consecutive rows.
pub fn convergence_table(
    sys: &dyn PoissonSystem,
    spec: &MethodSpec,
    y0: &DVector<f64>,
    period: f64,
    n_list: &[usize],
    periods: usize,
    cfg: &SolverConfig,
) -> Result<Vec<ExperimentRecord>> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("empty step-count list".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "step counts must be strictly ascending (duplicates rejected)".into(),
        ));
    }
    if n_list[0] == 0 || periods == 0 {
        return Err(Error::InvalidArgument(
            "step counts and period count must be positive".into(),
        ));
    }
    let with_casimirs = sys.num_casimirs() > 0;

    // (e_y, e_H, e_C, mean iterations, wall time) per cell.
    type Cell = (f64, f64, Option<f64>, f64, f64);
    let cells: Vec<Result<Cell>> = n_list
        .par_iter()
        .map(|&n| {
            let h = period / n as f64;
            let traj = integrate(sys, spec, y0, h, n * periods, cfg, n * periods)?;
            let e_y = periodic_error(&traj, y0, period, periods)?;
            // Invariant errors are worst-case over the run, which is what
            // the reference tables report (the end-of-period defect can be
            // much smaller through cancellation).
            let e_h = traj.max_h_error();
            let e_c = with_casimirs.then(|| traj.max_c_error());
            Ok((e_y, e_h, e_c, traj.mean_iterations(), traj.wall_time))
        })
        .collect();

    let mut records = Vec::with_capacity(n_list.len());
    for (idx, cell) in cells.into_iter().enumerate() {
        let (e_y, e_h, e_c, mean_iterations, time_sec) = cell?;
        let (rate_y, rate_h, rate_c) = if idx == 0 {
            (None, None, None)
        } else {
            let prev: &ExperimentRecord = &records[idx - 1];
            (
                rate_between(prev.e_y, e_y, prev.n, n_list[idx]),
                rate_between(prev.e_h, e_h, prev.n, n_list[idx]),
                match (prev.e_c, e_c) {
                    (Some(a), Some(b)) => rate_between(a, b, prev.n, n_list[idx]),
                    _ => None,
                },
            )
        };
        records.push(ExperimentRecord {
            n: n_list[idx],
            e_y,
            rate_y,
            e_h,
            rate_h,
            e_c,
            rate_c,
            mean_iterations,
            time_sec,
        });
    }
    Ok(records)
}

/// Per-period error series of one method over a long horizon.
#[derive(Debug, Clone)]
pub struct GrowthSeries {
    pub spec: MethodSpec,
    /// Solution error at each period boundary, index p-1 for period p.
    pub e_y: Vec<f64>,
    pub e_h: Vec<f64>,
    pub e_c: Vec<f64>,
    /// Least-squares slope of log e_y against log p over the second half of
    /// the horizon (1 for linear error growth, 2 for quadratic).
    pub slope_e_y: f64,
}

/// Least-squares slope of y against x.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Integrate each method over `periods` periods at h = T / steps_per_period,
/// sampling errors at period boundaries. Requires periods >= 5 so the
/// second-half slope fit has enough points.
pub fn growth_study(
    sys: &dyn PoissonSystem,
    specs: &[MethodSpec],
    y0: &DVector<f64>,
    period: f64,
    steps_per_period: usize,
    periods: usize,
    cfg: &SolverConfig,
) -> Result<Vec<GrowthSeries>> {
    if periods < 5 {
        return Err(Error::InvalidArgument(
            "growth studies need at least 5 periods".into(),
        ));
    }
    if steps_per_period == 0 {
        return Err(Error::InvalidArgument("steps per period must be positive".into()));
    }
    let results: Vec<Result<GrowthSeries>> = specs
        .par_iter()
        .map(|spec| {
            let h = period / steps_per_period as f64;
            let n_total = steps_per_period * periods;
            let traj = integrate(sys, spec, y0, h, n_total, cfg, steps_per_period)?;
            // states are stored every steps_per_period steps, so index p is
            // the boundary of period p.
            let mut e_y = Vec::with_capacity(periods);
            let mut e_h = Vec::with_capacity(periods);
            let mut e_c = Vec::with_capacity(periods);
            for p in 1..=periods {
                e_y.push((&traj.states[p] - y0).amax());
                e_h.push(traj.h_error[p * steps_per_period]);
                e_c.push(traj.c_error[p * steps_per_period]);
            }
            let fit_from = periods / 2;
            let xs: Vec<f64> = (fit_from + 1..=periods).map(|p| (p as f64).ln()).collect();
            let ys: Vec<f64> = (fit_from + 1..=periods)
                .map(|p| e_y[p - 1].max(f64::MIN_POSITIVE).ln())
                .collect();
            Ok(GrowthSeries {
                spec: *spec,
                e_y,
                e_h,
                e_c,
                slope_e_y: fit_slope(&xs, &ys),
            })
        })
        .collect();
    results.into_iter().collect()
}
