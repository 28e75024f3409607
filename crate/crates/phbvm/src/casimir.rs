//! Casimir-conserving EPHBVM(k, s) steps.
//!
//! The enhanced method perturbs the stage polynomial with a constant drift
//! -alpha Btilde gamma_hat_0 along a fixed skew-symmetric matrix Btilde,
//! choosing alpha so the discrete line integral of each Casimir gradient
//! vanishes. The perturbation does not affect energy conservation (Btilde is
//! skew) and alpha = O(h^{2s}) preserves the convergence order. With r
//! Casimirs, alpha is an r-vector determined through the matrix
//! M_hat = [pi_hat_0^T Btilde_1 gamma_hat_0, ..., pi_hat_0^T Btilde_r gamma_hat_0].
//!
//! The solver works in the substituted coefficients psi with
//! psi_0 = phi_0 - alpha Btilde gamma_hat_0 and psi_i = phi_i otherwise.
//! Because the antiderivative of the constant basis polynomial is c, this
//! absorbs the stage perturbation exactly (Y = e (x) y0 + h I_s (x) I psi)
//! and the alpha equation becomes the linear constraint
//! sum_i pi_hat_i^T psi_i = 0, enforced by an oblique projection of every
//! iterate. The lagged alternative (sweep on phi, then refresh alpha)
//! converges slowly once h |F'| is large and can settle on spurious roots.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::poisson::PoissonSystem;
use crate::solve::{evaluate, ConvergenceMonitor, SolverConfig, StepResult, Sweep};
use crate::tableau::MethodTableau;

/// Relative threshold below which the correction denominator counts as
/// degenerate: |pi_hat_0^T Btilde gamma_hat_0| >= 1e-10 |pi_hat_0| |gamma_hat_0|.
const DEGENERACY_FACTOR: f64 = 1e-10;

/// Assembled correction data for one converged EPHBVM step.
#[derive(Debug, Clone)]
pub struct CasimirCorrection {
    /// Skew-symmetric perturbation directions, one per Casimir.
    pub btilde: Vec<DMatrix<f64>>,
    /// Correction parameters.
    pub alpha: Vec<f64>,
    /// Approximate Fourier coefficients of the Casimir gradients along the
    /// stages; s entries of shape m x r.
    pub pi_hat: Vec<DMatrix<f64>>,
    /// r x r denominator matrix (1 x 1 for a single Casimir).
    pub m_hat: DMatrix<f64>,
}

/// Options for [`step_with_casimir_opts`].
#[derive(Debug, Clone, Default)]
pub struct CasimirOptions {
    /// Explicit perturbation directions, one exactly skew-symmetric nonzero
    /// m x m matrix per Casimir. Defaults to elementary pair matrices in
    /// lexicographic order, with a single automatic retry on degeneracy.
    pub btilde: Option<Vec<DMatrix<f64>>>,
    /// Freeze alpha at zero. The step then follows exactly the same
    /// floating-point path as the plain PHBVM step; useful for testing.
    pub force_alpha_zero: bool,
}

/// Number of elementary skew basis matrices in dimension m.
fn pair_count(m: usize) -> usize {
    m * (m - 1) / 2
}

/// The pair_index-th elementary skew-symmetric basis matrix
/// E_pq - E_qp, with (p, q) running through index pairs p < q in
/// lexicographic order: (0,1), (0,2), ..., (0,m-1), (1,2), ...
pub fn default_skew_matrix(m: usize, pair_index: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "no skew-symmetric directions exist in dimension {m}"
        )));
    }
    if pair_index >= pair_count(m) {
        return Err(Error::InvalidArgument(format!(
            "pair index {pair_index} out of range for dimension {m}"
        )));
    }
    let mut idx = pair_index;
    for p in 0..m - 1 {
        let row_len = m - 1 - p;
        if idx < row_len {
            let q = p + 1 + idx;
            let mut b = DMatrix::zeros(m, m);
            b[(p, q)] = 1.0;
            b[(q, p)] = -1.0;
            return Ok(b);
        }
        idx -= row_len;
    }
    unreachable!("pair index validated above");
}

/// Approximate Fourier coefficients of the Casimir gradients:
/// pi_hat_i = sum_l b_l P_i(c_l) grad C(Y_l), one m x r matrix per i < s
/// with columns indexed by Casimir.
pub fn casimir_fourier_coeffs(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    stages: &[DVector<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let m = sys.dim();
    let r = sys.num_casimirs();
    assert!(r > 0, "system has no Casimirs");
    assert_eq!(stages.len(), tab.k, "expected one stage value per node");
    let weights = tab.rule.weights();
    let mut pi = vec![DMatrix::zeros(m, r); tab.s];
    for (l, y) in stages.iter().enumerate() {
        for c in 0..r {
            let grad = sys.grad_casimir(c, y)?;
            for (i, block) in pi.iter_mut().enumerate() {
                block
                    .column_mut(c)
                    .axpy(weights[l] * tab.p[(l, i)], &grad, 1.0);
            }
        }
    }
    Ok(pi)
}

/// Smallest LU pivot magnitude, a cheap proxy for the smallest singular
/// value of a tiny matrix.
fn smallest_pivot(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    let lu = m.clone().lu();
    let u = lu.u();
    (0..u.nrows().min(u.ncols()))
        .map(|i| u[(i, i)].abs())
        .fold(f64::INFINITY, f64::min)
}

/// Denominator data for the alpha equation: the r x r matrix with columns
/// pi_hat_0^T (Btilde_l gamma_hat_0).
fn denominator_matrix(
    pi_hat: &[DMatrix<f64>],
    gamma0: &DVector<f64>,
    btilde: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let r = btilde.len();
    let mut m_hat = DMatrix::zeros(r, r);
    for (l, b) in btilde.iter().enumerate() {
        let dir = b * gamma0;
        let col = pi_hat[0].transpose() * dir;
        m_hat.set_column(l, &col);
    }
    m_hat
}

/// Solve for the correction parameters implied by the current iterate:
/// alpha = M_hat^{-1} sum_i pi_hat_i^T phi_i (a scalar quotient for r = 1).
/// Fails with a degeneracy error when the denominator is numerically zero.
pub fn alpha_update(
    pi_hat: &[DMatrix<f64>],
    phi: &DVector<f64>,
    gamma0: &DVector<f64>,
    btilde: &[DMatrix<f64>],
) -> Result<Vec<f64>> {
    let r = btilde.len();
    let m = gamma0.len();
    let mut numerator = DVector::zeros(r);
    for (i, block) in pi_hat.iter().enumerate() {
        let phi_i = phi.rows(i * m, m);
        for c in 0..r {
            numerator[c] += block.column(c).dot(&phi_i);
        }
    }
    let m_hat = denominator_matrix(pi_hat, gamma0, btilde);
    if r == 1 {
        let den = m_hat[(0, 0)];
        let scale = pi_hat[0].column(0).norm() * gamma0.norm();
        if den.abs() < DEGENERACY_FACTOR * scale {
            return Err(Error::DegenerateCasimirDirection {
                index: 0,
                value: den.abs(),
            });
        }
        return Ok(vec![numerator[0] / den]);
    }
    let det = m_hat.determinant();
    let mut scale = 1.0;
    let mut weakest = (0usize, f64::INFINITY);
    for l in 0..r {
        let norm = m_hat.column(l).norm();
        if norm < weakest.1 {
            weakest = (l, norm);
        }
        scale *= norm;
    }
    if !det.is_finite() || det.abs() < DEGENERACY_FACTOR * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCasimirDirection {
            index: weakest.0,
            value: weakest.1,
        });
    }
    let alpha = m_hat
        .clone()
        .lu()
        .solve(&numerator)
        .ok_or(Error::Singular("Casimir correction matrix"))?;
    Ok(alpha.iter().copied().collect())
}

/// One EPHBVM(k, s) step with default options.
pub fn step_with_casimir(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepResult> {
    step_with_casimir_opts(sys, tab, y0, h, cfg, &CasimirOptions::default())
}

/// One EPHBVM(k, s) step with explicit options.
pub fn step_with_casimir_opts(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    opts: &CasimirOptions,
) -> Result<StepResult> {
    step_with_casimir_detailed(sys, tab, y0, h, cfg, opts).map(|(result, _, _)| result)
}

/// Step variant exposing the assembled correction data and the solved phi.
pub fn step_with_casimir_detailed(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    opts: &CasimirOptions,
) -> Result<(StepResult, CasimirCorrection, DVector<f64>)> {
    run_step(sys, tab, y0, h, cfg, opts, None)
}

/// Step variant with an initial phi guess (used for warm starting).
pub(crate) fn casimir_step_with_initial(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    opts: &CasimirOptions,
    phi0: Option<&DVector<f64>>,
) -> Result<(StepResult, DVector<f64>)> {
    run_step(sys, tab, y0, h, cfg, opts, phi0).map(|(result, _, phi)| (result, phi))
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    opts: &CasimirOptions,
    phi0: Option<&DVector<f64>>,
) -> Result<(StepResult, CasimirCorrection, DVector<f64>)> {
    let r = sys.num_casimirs();
    if r == 0 {
        return Err(Error::MissingCasimirs);
    }
    let m = sys.dim();
    match &opts.btilde {
        Some(custom) => {
            if custom.len() != r {
                return Err(Error::InvalidArgument(format!(
                    "expected {r} perturbation directions, got {}",
                    custom.len()
                )));
            }
            for b in custom {
                if b.nrows() != m || b.ncols() != m {
                    return Err(Error::InvalidArgument(
                        "perturbation direction has wrong dimensions".into(),
                    ));
                }
                if (b + b.transpose()).amax() != 0.0 || b.amax() == 0.0 {
                    return Err(Error::InvalidArgument(
                        "perturbation direction must be exactly skew-symmetric and nonzero".into(),
                    ));
                }
            }
            attempt_step(sys, tab, y0, h, cfg, custom, opts.force_alpha_zero, phi0)
        }
        None => {
            let mut pairs: Vec<usize> = (0..r).collect();
            let btilde: Vec<DMatrix<f64>> = pairs
                .iter()
                .map(|&p| default_skew_matrix(m, p))
                .collect::<Result<_>>()?;
            match attempt_step(sys, tab, y0, h, cfg, &btilde, opts.force_alpha_zero, phi0) {
                Err(Error::DegenerateCasimirDirection { index, value }) => {
                    // One retry with the next unused basis pair for the
                    // failing Casimir.
                    let next = pairs.iter().copied().max().unwrap_or(0) + 1;
                    if next >= pair_count(m) {
                        return Err(Error::DegenerateCasimirDirection { index, value });
                    }
                    pairs[index] = next;
                    let btilde: Vec<DMatrix<f64>> = pairs
                        .iter()
                        .map(|&p| default_skew_matrix(m, p))
                        .collect::<Result<_>>()?;
                    attempt_step(sys, tab, y0, h, cfg, &btilde, opts.force_alpha_zero, phi0)
                }
                other => other,
            }
        }
    }
}

/// Coupled (psi, alpha) iteration. Each evaluation of the plain composed map
/// G is followed by the oblique projection psi_target = G - sum_l alpha_l
/// e_1 (x) (Btilde_l gamma_hat_0) with alpha = M_hat^{-1} pi_hat^T G, which
/// enforces the discrete Casimir condition sum_i pi_hat_i^T psi_i = 0 on
/// every iterate; the configured solver sweep is then applied to the
/// projected residual. At the fixed point, psi_0 = phi_0 - alpha Btilde
/// gamma_hat_0 and y1 = y0 + h psi_0, identical to the unsubstituted form.
#[allow(clippy::too_many_arguments)]
fn attempt_step(
    sys: &dyn PoissonSystem,
    tab: &MethodTableau,
    y0: &DVector<f64>,
    h: f64,
    cfg: &SolverConfig,
    btilde: &[DMatrix<f64>],
    force_alpha_zero: bool,
    phi0: Option<&DVector<f64>>,
) -> Result<(StepResult, CasimirCorrection, DVector<f64>)> {
    let m = sys.dim();
    let r = btilde.len();
    let dim = tab.s * m;
    let mut psi = match phi0 {
        Some(p) => p.clone(),
        None => DVector::zeros(dim),
    };
    let mut monitor = ConvergenceMonitor::new(cfg.tol);
    let sweep = Sweep::prepare(cfg.solver, sys, tab, y0, h, cfg.fd_step)?;

    let mut res = f64::INFINITY;
    let mut alpha = vec![0.0; r];
    let mut diagnostics: Option<(Vec<DMatrix<f64>>, DVector<f64>)> = None;
    let mut converged = false;
    let mut iterations = cfg.max_iter;
    for iter in 1..=cfg.max_iter {
        let mut eval = evaluate(sys, tab, y0, h, &psi)?;
        let gamma0 = DVector::from(eval.gamma_hat.rows(0, m));
        let pi_hat = casimir_fourier_coeffs(sys, tab, &eval.stages)?;
        let g_inf = eval.g.amax();
        let mut floor_gate = crate::solve::residual_floor_gate(psi.amax(), g_inf);
        if force_alpha_zero {
            alpha.iter_mut().for_each(|a| *a = 0.0);
        } else {
            alpha = alpha_update(&pi_hat, &eval.g, &gamma0, btilde)?;
            // Roundoff in alpha is amplified by the conditioning of the
            // denominator matrix and re-enters the residual through the
            // projection; widen the attainable-floor estimate accordingly.
            let m_hat = denominator_matrix(&pi_hat, &gamma0, btilde);
            let den_scale = smallest_pivot(&m_hat).max(f64::MIN_POSITIVE);
            let pi_scale = pi_hat.iter().map(|b| b.amax()).fold(0.0, f64::max);
            let dir_scale = btilde
                .iter()
                .map(|b| (b * &gamma0).amax())
                .fold(0.0, f64::max);
            floor_gate += 100.0 * f64::EPSILON * pi_scale * g_inf * dir_scale / den_scale;
        }
        // Project the update target onto the Casimir-conserving subspace.
        for (l, b) in btilde.iter().enumerate() {
            eval.g.rows_mut(0, m).axpy(-alpha[l], &(b * &gamma0), 1.0);
        }
        let resvec = &psi - &eval.g;
        res = resvec.amax();
        let stop = monitor.converged(res, floor_gate);
        sweep.apply(tab, m, &mut psi, &eval, &resvec)?;
        diagnostics = Some((pi_hat, gamma0));
        if stop {
            converged = true;
            iterations = iter;
            break;
        }
    }

    let (pi_hat, gamma0) = diagnostics.expect("max_iter >= 1");
    let m_hat = denominator_matrix(&pi_hat, &gamma0, btilde);
    let mut y1 = y0.clone();
    y1.axpy(h, &psi.rows(0, m), 1.0);
    let result = StepResult {
        y1,
        iterations,
        residual_norm: res,
        alpha: alpha.clone(),
        converged,
    };
    let correction = CasimirCorrection {
        btilde: btilde.to_vec(),
        alpha,
        pi_hat,
        m_hat,
    };
    Ok((result, correction, psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::preset;
    use crate::solve::{stage_values, step};
    use crate::tableau::build_tableau;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// m = 3 system whose motion never touches the second component of the
    /// gradient: H = (y1^2 + y3^2)/2, C = y1. The default perturbation pair
    /// (0, 1) is exactly degenerate, forcing the retry path.
    struct DriftSystem;

    impl PoissonSystem for DriftSystem {
        fn dim(&self) -> usize {
            3
        }
        fn structure_matrix(&self, _y: &DVector<f64>) -> crate::error::Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0],
            ))
        }
        fn hamiltonian(&self, y: &DVector<f64>) -> crate::error::Result<f64> {
            Ok(0.5 * (y[0] * y[0] + y[2] * y[2]))
        }
        fn grad_hamiltonian(&self, y: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
            Ok(dv(&[y[0], 0.0, y[2]]))
        }
        fn num_casimirs(&self) -> usize {
            1
        }
        fn casimir(&self, _index: usize, y: &DVector<f64>) -> crate::error::Result<f64> {
            Ok(y[0])
        }
        fn grad_casimir(&self, _index: usize, _y: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
            Ok(dv(&[1.0, 0.0, 0.0]))
        }
    }

    /// m = 4 rotation in the first two coordinates with two linear Casimirs
    /// y3 and y4; both are conserved exactly by the plain method already.
    struct TwoCasimirRotation;

    impl PoissonSystem for TwoCasimirRotation {
        fn dim(&self) -> usize {
            4
        }
        fn structure_matrix(&self, _y: &DVector<f64>) -> crate::error::Result<DMatrix<f64>> {
            let mut b = DMatrix::zeros(4, 4);
            b[(0, 1)] = 1.0;
            b[(1, 0)] = -1.0;
            Ok(b)
        }
        fn hamiltonian(&self, y: &DVector<f64>) -> crate::error::Result<f64> {
            Ok(0.5 * y.norm_squared())
        }
        fn grad_hamiltonian(&self, y: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
            Ok(y.clone())
        }
        fn num_casimirs(&self) -> usize {
            2
        }
        fn casimir(&self, index: usize, y: &DVector<f64>) -> crate::error::Result<f64> {
            Ok(y[2 + index])
        }
        fn grad_casimir(&self, index: usize, _y: &DVector<f64>) -> crate::error::Result<DVector<f64>> {
            let mut g = DVector::zeros(4);
            g[2 + index] = 1.0;
            Ok(g)
        }
    }

    #[test]
    fn skew_basis_matrices() {
        let b = default_skew_matrix(2, 0).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let b = default_skew_matrix(3, 0).unwrap();
        assert_eq!(b[(0, 1)], 1.0);
        assert_eq!(b[(1, 0)], -1.0);
        let b = default_skew_matrix(3, 1).unwrap();
        assert_eq!(b[(0, 2)], 1.0);
        let b = default_skew_matrix(3, 2).unwrap();
        assert_eq!(b[(1, 2)], 1.0);
        assert!(default_skew_matrix(1, 0).is_err());
        assert!(default_skew_matrix(3, 3).is_err());
    }

    #[test]
    fn constant_gradient_projects_onto_first_block_only() {
        let p = preset("lv3").unwrap();
        let tab = build_tableau(4, 2).unwrap();
        let stages = vec![p.y0.clone(); tab.k];
        let pi = casimir_fourier_coeffs(p.system.as_ref(), &tab, &stages).unwrap();
        let expect = dv(&[-1.0, -1.0, 1.0]);
        assert!((DVector::from(pi[0].column(0)) - expect).amax() < 1e-14);
        for block in &pi[1..] {
            assert!(block.amax() < 1e-14);
        }
    }

    #[test]
    fn fourier_coeffs_match_interpolation_oracle() {
        // Oracle: interpolate grad C through the stage values by Lagrange
        // basis polynomials on the nodes, then integrate P_i times the
        // interpolant with a fine composite Simpson rule.
        let p = preset("lv3").unwrap();
        let sys = p.system.as_ref();
        let tab = build_tableau(5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stages: Vec<DVector<f64>> = (0..tab.k)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(0.3..3.0)))
            .collect();
        let pi = casimir_fourier_coeffs(sys, &tab, &stages).unwrap();

        let nodes = tab.rule.nodes();
        let grads: Vec<DVector<f64>> = stages
            .iter()
            .map(|y| sys.grad_casimir(0, y).unwrap())
            .collect();
        let lagrange = |c: f64, l: usize| -> f64 {
            let mut v = 1.0;
            for (j, &cj) in nodes.iter().enumerate() {
                if j != l {
                    v *= (c - cj) / (nodes[l] - cj);
                }
            }
            v
        };
        let interp = |c: f64, comp: usize| -> f64 {
            (0..tab.k).map(|l| lagrange(c, l) * grads[l][comp]).sum()
        };
        let n_panels = 4000;
        for i in 0..tab.s {
            for comp in 0..3 {
                let f = |c: f64| crate::legendre::eval_legendre(i, c) * interp(c, comp);
                let h = 1.0 / n_panels as f64;
                let mut acc = f(0.0) + f(1.0);
                for j in 1..n_panels {
                    acc += f(j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
                }
                let oracle = acc * h / 3.0;
                assert!(
                    (pi[i][(comp, 0)] - oracle).abs() < 1e-12,
                    "i={i} comp={comp}: {} vs {oracle}",
                    pi[i][(comp, 0)]
                );
            }
        }
    }

    #[test]
    fn zero_phi_gives_zero_alpha() {
        let p = preset("lv3").unwrap();
        let tab = build_tableau(4, 2).unwrap();
        let stages = stage_values(&tab, &p.y0, 0.1, &DVector::zeros(6));
        let pi = casimir_fourier_coeffs(p.system.as_ref(), &tab, &stages).unwrap();
        let gamma0 = p.system.grad_hamiltonian(&p.y0).unwrap();
        let btilde = vec![default_skew_matrix(3, 0).unwrap()];
        let alpha = alpha_update(&pi, &DVector::zeros(6), &gamma0, &btilde).unwrap();
        assert_eq!(alpha, vec![0.0]);
    }

    #[test]
    fn conserved_casimirs_leave_alpha_at_roundoff() {
        let sys = TwoCasimirRotation;
        let tab = build_tableau(3, 2).unwrap();
        let y0 = dv(&[1.0, 0.0, 1.0, 1.0]);
        let cfg = SolverConfig::default();
        let opts = CasimirOptions {
            btilde: Some(vec![
                {
                    let mut b = DMatrix::zeros(4, 4);
                    b[(2, 3)] = 1.0;
                    b[(3, 2)] = -1.0;
                    b
                },
                {
                    let mut b = DMatrix::zeros(4, 4);
                    b[(0, 2)] = 1.0;
                    b[(2, 0)] = -1.0;
                    b
                },
            ]),
            force_alpha_zero: false,
        };
        let h = 0.2;
        let enhanced = step_with_casimir_opts(&sys, &tab, &y0, h, &cfg, &opts).unwrap();
        assert!(enhanced.converged);
        assert!(enhanced.alpha.iter().all(|a| a.abs() < 1e-13));
        let plain = step(&sys, &tab, &y0, h, &cfg).unwrap();
        assert_eq!(plain.y1, enhanced.y1);
        for c in 0..2 {
            let defect =
                (sys.casimir(c, &enhanced.y1).unwrap() - sys.casimir(c, &y0).unwrap()).abs();
            assert!(defect < 1e-15);
        }
    }

    #[test]
    fn forced_zero_alpha_is_bitwise_plain_step() {
        let p = preset("lv3").unwrap();
        let tab = build_tableau(4, 2).unwrap();
        let h = p.period / 100.0;
        let cfg = SolverConfig::default();
        let plain = step(p.system.as_ref(), &tab, &p.y0, h, &cfg).unwrap();
        let opts = CasimirOptions {
            btilde: None,
            force_alpha_zero: true,
        };
        let forced = step_with_casimir_opts(p.system.as_ref(), &tab, &p.y0, h, &cfg, &opts).unwrap();
        assert_eq!(plain.iterations, forced.iterations);
        for i in 0..3 {
            assert_eq!(plain.y1[i].to_bits(), forced.y1[i].to_bits(), "component {i}");
        }
    }

    #[test]
    fn enhanced_step_conserves_both_invariants() {
        let p = preset("lv3").unwrap();
        let sys = p.system.as_ref();
        let tab = build_tableau(6, 3).unwrap();
        let h = p.period / 50.0;
        let cfg = SolverConfig::default();
        let result = step_with_casimir(sys, &tab, &p.y0, h, &cfg).unwrap();
        assert!(result.converged);
        let dc = (sys.casimir(0, &result.y1).unwrap() - sys.casimir(0, &p.y0).unwrap()).abs();
        let dh = (sys.hamiltonian(&result.y1).unwrap() - sys.hamiltonian(&p.y0).unwrap()).abs();
        assert!(dc < 1e-13, "Casimir defect {dc:e}");
        assert!(dh < 1e-13, "energy defect {dh:e}");
        assert_eq!(result.alpha.len(), 1);
        assert!(result.alpha[0] != 0.0);
    }

    #[test]
    fn degenerate_default_direction_triggers_retry() {
        let sys = DriftSystem;
        let tab = build_tableau(3, 2).unwrap();
        let y0 = dv(&[1.0, 0.5, 2.0]);
        let cfg = SolverConfig::default();
        let (result, correction, _) = step_with_casimir_detailed(
            &sys,
            &tab,
            &y0,
            0.1,
            &cfg,
            &CasimirOptions::default(),
        )
        .unwrap();
        assert!(result.converged);
        // The retry swaps pair (0, 1) for pair (0, 2).
        assert_eq!(correction.btilde[0][(0, 2)], 1.0);
        assert_eq!(correction.btilde[0][(0, 1)], 0.0);
        let defect = (sys.casimir(0, &result.y1).unwrap() - sys.casimir(0, &y0).unwrap()).abs();
        assert!(defect < 1e-14);
    }

    #[test]
    fn rejects_non_skew_custom_directions() {
        let p = preset("lv3").unwrap();
        let tab = build_tableau(4, 2).unwrap();
        let cfg = SolverConfig::default();
        let opts = CasimirOptions {
            btilde: Some(vec![DMatrix::identity(3, 3)]),
            force_alpha_zero: false,
        };
        assert!(matches!(
            step_with_casimir_opts(p.system.as_ref(), &tab, &p.y0, 0.1, &cfg, &opts),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn plain_system_is_rejected() {
        let p = preset("lv2").unwrap();
        let tab = build_tableau(4, 2).unwrap();
        let cfg = SolverConfig::default();
        assert!(matches!(
            step_with_casimir(p.system.as_ref(), &tab, &p.y0, 0.1, &cfg),
            Err(Error::MissingCasimirs)
        ));
    }
}
