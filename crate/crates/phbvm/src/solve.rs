//! One step of the PHBVM(k, s) method.
//!
//! Unknown of the step is the block vector phi = (phi_0, ..., phi_{s-1}) of
//! stage-derivative coefficients; stages and the step map come from
//!
//! ```text
//! Y_l  = y0 + h sum_i (int_0^{c_l} P_i) phi_i,          l = 1..k
//! F(phi) = phi - G(phi),   y1 = y0 + h phi_0,
//! ```
//!
//! where G composes gradient projection, the structure matrix at the stages,
//! and a second projection. G is evaluated node-wise, so the s*m x s*m block
//! matrix of quadratured structure-matrix products is never formed; a
//! debug-only routine materializing its blocks exists for diagnostics
//! ([`rho_hat_blocks`]).
//!
//! Three nonlinear solvers are provided: plain fixed-point iteration on G,
//! a simplified Newton iteration factoring I - h X_s (x) F'(y0) once per
//! step, and the blended iteration, which only factors the m x m matrix
//! Lambda = I - h lambda_s F'(y0).

use nalgebra::{linalg::LU, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::poisson::{jacobian, PoissonSystem};
use crate::tableau::MethodTableau;

/// Nonlinear solver selection for the stage equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    FixedPoint,
    Newton,
    Blended,
}

/// Solver configuration. Iteration stops once the max-norm of F(phi) drops
/// below `tol`, or once the residual stagnates at its roundoff floor (three
/// consecutive iterations without meaningful progress while below
/// 100 eps (1 + |phi|_inf)); stagnation at the floor counts as converged,
/// since no further accuracy is attainable in double precision.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub solver: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    /// Start each step from the previous step's phi instead of zero.
    /// Off by default so iteration counts stay comparable across runs.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Blended,
            tol: 1e-14,
            max_iter: 100,
            fd_step: 1e-7,
            warm_start: false,
        }
    }
}

/// Iteration outcome for one nonlinear solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Result of one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub y1: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Casimir correction parameters; empty for a plain PHBVM step.
    pub alpha: Vec<f64>,
    pub converged: bool,
}

/// Solver working state: block coefficients, the stage values they induce,
/// and the projected-gradient coefficients at those stages.
#[derive(Debug, Clone)]
pub struct StageState {
    /// s blocks of length m.
    pub phi: DVector<f64>,
    /// k stage values Y_l = u(c_l h).
    pub stages: Vec<DVector<f64>>,
    /// s blocks of length m (projections of grad H along the stages).
    pub gamma_hat: DVector<f64>,
}

impl StageState {
    /// Build the consistent stage state for given coefficients.
    pub fn from_phi(
        sys: &dyn PoissonSystem,
        tab: &MethodTableau,
        y0: &DVector<f64>,
        h: f64,
        phi: DVector<f64>,
    ) -> Result<Self> {
        let eval = evaluate(sys, tab, y0, h, &phi)?;
        Ok(Self {
            phi,
            stages: eval.stages,
            gamma_hat: eval.gamma_hat,
        })
    }

    /// Max-norm defect between the stored stages and the affine map of the
    /// stored phi; zero up to roundoff by construction.
    pub fn consistency_defect(&self, tab: &MethodTableau, y0: &DVector<f64>, h: f64) -> f64 {
        let rebuilt = stage_values(tab, y0, h, &self.phi);
        self.stages
            .iter()
            .zip(&rebuilt)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Stage values Y_l = y0 + h sum_i (int_0^{c_l} P_i) phi_i.
pub fn stage_values(
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    phi: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let m = y0.len();
    let mut stages = Vec::with_capacity(tab.k);
    for l in 0..tab.k {
        let mut y = y0.clone();
        for i in 0..tab.s {
            y.axpy(h * tab.p_int[(l, i)], &phi.rows(i * m, m), 1.0);
        }
        stages.push(y);
    }
    stages
}

/// Byproducts of one evaluation of the composed map G.
pub(crate) struct Evaluation {
    pub stages: Vec<DVector<f64>>,
    /// s*m vector of gradient projections; block 0 is gamma_hat_0.
    pub gamma_hat: DVector<f64>,
    /// G(phi), s*m.
    pub g: DVector<f64>,
}

/// Evaluate G(phi) node-wise in O(k s m + k m^2): stages, gradient
/// projection, structure-matrix application, second projection.
pub(crate) fn evaluate(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    phi: &DVector<f64>,
) -> Result<Evaluation> {
    let m = sys.dim();
    let (k, s) = (tab.k, tab.s);
    let weights = tab.rule.weights();

    let stages = stage_values(tab, y0, h, phi);

    let mut grads = Vec::with_capacity(k);
    for y in &stages {
        grads.push(sys.grad_hamiltonian(y)?);
    }

    let mut gamma_hat = DVector::zeros(s * m);
    for l in 0..k {
        for j in 0..s {
            gamma_hat
                .rows_mut(j * m, m)
                .axpy(weights[l] * tab.p[(l, j)], &grads[l], 1.0);
        }
    }

    let mut g = DVector::zeros(s * m);
    let mut projected = DVector::zeros(m);
    for l in 0..k {
        projected.fill(0.0);
        for j in 0..s {
            projected.axpy(tab.p[(l, j)], &gamma_hat.rows(j * m, m), 1.0);
        }
        let v = sys.structure_matrix(&stages[l])? * &projected;
        for i in 0..s {
            g.rows_mut(i * m, m)
                .axpy(weights[l] * tab.p[(l, i)], &v, 1.0);
        }
    }

    Ok(Evaluation {
        stages,
        gamma_hat,
        g,
    })
}

/// Residual F(phi) = phi - G(phi) of the stage equations.
pub fn residual(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    phi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let eval = evaluate(sys, tab, y0, h, phi)?;
    Ok(phi - eval.g)
}

/// Materialized quadrature blocks rho_ij = sum_l b_l P_i(c_l) P_j(c_l) B(Y_l)
/// for given stage values. Diagnostics only; the solvers never form these.
/// Each block satisfies rho_ij = rho_ji = -rho_ij^T.
pub fn rho_hat_blocks(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    stages: &[DVector<f64>],
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let m = sys.dim();
    let (k, s) = (tab.k, tab.s);
    assert_eq!(stages.len(), k, "expected one stage value per node");
    let weights = tab.rule.weights();
    let mut blocks = vec![vec![DMatrix::zeros(m, m); s]; s];
    for l in 0..k {
        let b = sys.structure_matrix(&stages[l])?;
        for (i, row) in blocks.iter_mut().enumerate() {
            for (j, block) in row.iter_mut().enumerate() {
                let w = weights[l] * tab.p[(l, i)] * tab.p[(l, j)];
                *block += w * &b;
            }
        }
    }
    Ok(blocks)
}

/// Stagnation-aware convergence monitor implementing the stopping rule
/// described on [`SolverConfig`].
pub(crate) struct ConvergenceMonitor {
    tol: f64,
    stagnant: usize,
    best: f64,
}

/// Roundoff floor estimate for a residual phi - g built from quantities of
/// the given magnitudes: it cannot be driven meaningfully below machine
/// noise on the scale of its operands.
pub(crate) fn residual_floor_gate(phi_inf: f64, g_inf: f64) -> f64 {
    100.0 * f64::EPSILON * (1.0 + phi_inf.max(g_inf))
}

impl ConvergenceMonitor {
    pub(crate) fn new(tol: f64) -> Self {
        Self {
            tol,
            stagnant: 0,
            best: f64::INFINITY,
        }
    }

    /// Feed the residual of the current iterate together with the roundoff
    /// gate for its scale; true means stop and count as converged. Below the
    /// gate, three consecutive iterations without halving the best residual
    /// seen so far count as convergence at the floor.
    pub(crate) fn converged(&mut self, res: f64, floor_gate: f64) -> bool {
        if res <= self.tol {
            return true;
        }
        if res <= floor_gate && res > 0.5 * self.best {
            self.stagnant += 1;
        } else {
            self.stagnant = 0;
        }
        self.best = self.best.min(res);
        self.stagnant >= 3
    }
}

/// Per-step solver state: factorizations are prepared once per step from
/// F'(y0) and reused across iterations.
pub(crate) enum Sweep {
    FixedPoint,
    Newton { lu: LU<f64, Dyn, Dyn> },
    Blended { lu: LU<f64, Dyn, Dyn> },
}

impl Sweep {
    pub(crate) fn prepare(
        kind: SolverKind,
        sys: &dyn PoissonSystem,
        tab: &MethodTableau,
        y0: &DVector<f64>,
        h: f64,
        fd_step: f64,
    ) -> Result<Self> {
        let m = sys.dim();
        match kind {
            SolverKind::FixedPoint => Ok(Self::FixedPoint),
            SolverKind::Newton => {
                let fp = jacobian(sys, y0, fd_step)?;
                let big = DMatrix::identity(tab.s * m, tab.s * m) - h * tab.x.kronecker(&fp);
                Ok(Self::Newton { lu: big.lu() })
            }
            SolverKind::Blended => {
                let fp = jacobian(sys, y0, fd_step)?;
                let lambda = DMatrix::identity(m, m) - (h * tab.lambda_min) * fp;
                Ok(Self::Blended { lu: lambda.lu() })
            }
        }
    }

    /// Apply one update to phi given the evaluation at the current phi.
    pub(crate) fn apply(
        &self,
        tab: &MethodTableau,
        m: usize,
        phi: &mut DVector<f64>,
        eval: &Evaluation,
        resvec: &DVector<f64>,
    ) -> Result<()> {
        match self {
            Self::FixedPoint => {
                phi.copy_from(&eval.g);
            }
            Self::Newton { lu } => {
                let mut rhs = resvec.clone();
                rhs.neg_mut();
                let delta = lu
                    .solve(&rhs)
                    .ok_or(Error::Singular("simplified Newton iteration matrix"))?;
                *phi += delta;
            }
            Self::Blended { lu } => {
                let s = tab.s;
                let lam = tab.lambda_min;
                let mut eta = resvec.clone();
                eta.neg_mut();
                let mut eta1 = DVector::zeros(s * m);
                for i in 0..s {
                    for j in 0..s {
                        eta1.rows_mut(i * m, m)
                            .axpy(lam * tab.x_inv[(i, j)], &eta.rows(j * m, m), 1.0);
                    }
                }
                for i in 0..s {
                    let diff = DVector::from(eta.rows(i * m, m) - eta1.rows(i * m, m));
                    let inner = lu
                        .solve(&diff)
                        .ok_or(Error::Singular("blended iteration matrix Lambda"))?;
                    let outer = lu
                        .solve(&(DVector::from(eta1.rows(i * m, m)) + inner))
                        .ok_or(Error::Singular("blended iteration matrix Lambda"))?;
                    let mut block = phi.rows_mut(i * m, m);
                    block += outer;
                }
            }
        }
        Ok(())
    }
}

fn solve_impl(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    kind: SolverKind,
    phi0: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, SolveStats)> {
    let m = sys.dim();
    let dim = tab.s * m;
    let mut phi = match phi0 {
        Some(p) => {
            assert_eq!(p.len(), dim, "initial phi has wrong block dimension");
            p.clone()
        }
        None => DVector::zeros(dim),
    };
    let mut monitor = ConvergenceMonitor::new(cfg.tol);
    let sweep = Sweep::prepare(kind, sys, tab, y0, h, cfg.fd_step)?;
    let mut res = f64::INFINITY;
    let mut converged = false;
    let mut iterations = cfg.max_iter;
    for iter in 1..=cfg.max_iter {
        let eval = evaluate(sys, tab, y0, h, &phi)?;
        let resvec = &phi - &eval.g;
        res = resvec.amax();
        let stop = monitor.converged(res, residual_floor_gate(phi.amax(), eval.g.amax()));
        // The final sweep is free (the evaluation is already paid for) and
        // lands the iterate one contraction factor below the tolerance,
        // which the invariant defects of long runs depend on.
        sweep.apply(tab, m, &mut phi, &eval, &resvec)?;
        if stop {
            converged = true;
            iterations = iter;
            break;
        }
    }
    Ok((
        phi,
        SolveStats {
            iterations,
            residual_norm: res,
            converged,
        },
    ))
}

/// Solve the stage equations by fixed-point iteration phi <- G(phi),
/// starting from phi = 0.
pub fn solve_fixed_point(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, SolveStats)> {
    solve_impl(sys, tab, y0, h, cfg, SolverKind::FixedPoint, None)
}

/// Solve the stage equations by the simplified Newton iteration:
/// [I - h X_s (x) F'(y0)] delta = -F(phi), factored once per step.
pub fn solve_newton(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, SolveStats)> {
    solve_impl(sys, tab, y0, h, cfg, SolverKind::Newton, None)
}

/// Solve the stage equations by the blended iteration, which factors only
/// the m x m matrix Lambda = I - h lambda_s F'(y0).
pub fn solve_blended(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, SolveStats)> {
    solve_impl(sys, tab, y0, h, cfg, SolverKind::Blended, None)
}

/// One PHBVM(k, s) step: solve for phi with the configured solver and set
/// y1 = y0 + h phi_0. Non-convergence is reported through the
/// `converged` flag; hard errors (domain violations, singular
/// factorizations) propagate.
pub fn step(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    step_with_initial(sys, tab, y0, h, cfg, None).map(|(result, _)| result)
}

/// Step variant exposing the solved phi (used for warm starting).
pub(crate) fn step_with_initial(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    phi0: Option<&DVector<f64>>,
) -> Result<(StepResult, DVector<f64>)> {
    let (phi, stats) = solve_impl(sys, tab, y0, h, cfg, cfg.solver, phi0)?;
    let m = sys.dim();
    let mut y1 = y0.clone();
    y1.axpy(h, &phi.rows(0, m), 1.0);
    Ok((
        StepResult {
            y1,
            iterations: stats.iterations,
            residual_norm: stats.residual_norm,
            alpha: Vec::new(),
            converged: stats.converged,
        },
        phi,
    ))
}
