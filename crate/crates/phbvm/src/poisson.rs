//! Poisson systems dy/dt = B(y) grad H(y) and the built-in benchmark
//! problems.
//!
//! A system supplies its skew-symmetric structure matrix B(y), the
//! Hamiltonian H and its gradient, and optionally Casimir invariants
//! (functions C with grad C(y)^T B(y) identically zero) and an analytic
//! Jacobian of the vector field f(y) = B(y) grad H(y).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// States with a component at or below this floor are rejected by the
/// logarithmic benchmark Hamiltonians; overshooting solvers fail loudly
/// instead of producing NaN.
pub const DOMAIN_FLOOR: f64 = 1e-12;

/// Default relative step for finite-difference Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-7;

/// A Poisson problem definition. Implementations must be re-entrant; the
/// solvers evaluate them from a single thread but distinct integrations may
/// run concurrently on one shared system.
pub trait PoissonSystem: Send + Sync {
    /// State dimension m.
    fn dim(&self) -> usize;

    /// Skew-symmetric structure matrix B(y).
    fn structure_matrix(&self, y: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Hamiltonian H(y).
    fn hamiltonian(&self, y: &DVector<f64>) -> Result<f64>;

    /// Gradient of the Hamiltonian.
    fn grad_hamiltonian(&self, y: &DVector<f64>) -> Result<DVector<f64>>;

    /// Number of Casimir invariants supplied with the system.
    fn num_casimirs(&self) -> usize {
        0
    }

    /// Value of the index-th Casimir.
    fn casimir(&self, index: usize, y: &DVector<f64>) -> Result<f64> {
        let _ = y;
        panic!("system has no Casimir with index {index}");
    }

    /// Gradient of the index-th Casimir.
    fn grad_casimir(&self, index: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        let _ = y;
        panic!("system has no Casimir with index {index}");
    }

    /// Analytic Jacobian of f(y) = B(y) grad H(y), when available.
    fn analytic_jacobian(&self, y: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        let _ = y;
        None
    }
}

/// The vector field f(y) = B(y) grad H(y).
pub fn vector_field(sys: &dyn PoissonSystem, y: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(sys.structure_matrix(y)? * sys.grad_hamiltonian(y)?)
}

/// Jacobian of the vector field: the analytic one when the system supplies
/// it, otherwise central finite differences with column step
/// fd_step * max(1, |y_i|).
pub fn jacobian(sys: &dyn PoissonSystem, y: &DVector<f64>, fd_step: f64) -> Result<DMatrix<f64>> {
    match sys.analytic_jacobian(y) {
        Some(j) => j,
        None => fd_jacobian(sys, y, fd_step),
    }
}

/// Central finite-difference Jacobian of the vector field.
pub fn fd_jacobian(
    sys: &dyn PoissonSystem,
    y: &DVector<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let m = sys.dim();
    let mut jac = DMatrix::zeros(m, m);
    let mut probe = y.clone();
    for col in 0..m {
        let step = fd_step * y[col].abs().max(1.0);
        probe[col] = y[col] + step;
        let fp = vector_field(sys, &probe)?;
        probe[col] = y[col] - step;
        let fm = vector_field(sys, &probe)?;
        probe[col] = y[col];
        for row in 0..m {
            jac[(row, col)] = (fp[row] - fm[row]) / (2.0 * step);
        }
    }
    Ok(jac)
}

fn guard_positive(y: &DVector<f64>) -> Result<()> {
    for (index, &value) in y.iter().enumerate() {
        if value <= DOMAIN_FLOOR {
            return Err(Error::Domain { index, value });
        }
    }
    Ok(())
}

/// Two-species Lotka-Volterra system with logarithmic Hamiltonian
/// H = a (ln y1 - y1/y1*) + b (ln y2 - y2/y2*).
#[derive(Debug, Clone)]
pub struct LotkaVolterra2 {
    pub a: f64,
    pub b: f64,
    pub y_star: [f64; 2],
}

impl PoissonSystem for LotkaVolterra2 {
    fn dim(&self) -> usize {
        2
    }

    fn structure_matrix(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        guard_positive(y)?;
        let w = y[0] * y[1];
        Ok(DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]))
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> Result<f64> {
        guard_positive(y)?;
        Ok(self.a * (y[0].ln() - y[0] / self.y_star[0])
            + self.b * (y[1].ln() - y[1] / self.y_star[1]))
    }

    fn grad_hamiltonian(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        guard_positive(y)?;
        Ok(DVector::from_column_slice(&[
            self.a * (1.0 / y[0] - 1.0 / self.y_star[0]),
            self.b * (1.0 / y[1] - 1.0 / self.y_star[1]),
        ]))
    }

    fn analytic_jacobian(&self, y: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        if let Err(e) = guard_positive(y) {
            return Some(Err(e));
        }
        // f1 = b y1 (1 - y2/y2*), f2 = -a y2 (1 - y1/y1*)
        let (a, b) = (self.a, self.b);
        let (s1, s2) = (self.y_star[0], self.y_star[1]);
        Some(Ok(DMatrix::from_row_slice(
            2,
            2,
            &[
                b * (1.0 - y[1] / s2),
                -b * y[0] / s2,
                a * y[1] / s1,
                -a * (1.0 - y[0] / s1),
            ],
        )))
    }
}

/// Three-species Lotka-Volterra system with one Casimir
/// C = -ln y1 - ln y2 + ln y3.
#[derive(Debug, Clone)]
pub struct LotkaVolterra3 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub y_star: [f64; 3],
}

impl PoissonSystem for LotkaVolterra3 {
    fn dim(&self) -> usize {
        3
    }

    fn structure_matrix(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        guard_positive(y)?;
        let (p, q, r) = (y[0] * y[1], y[0] * y[2], y[1] * y[2]);
        Ok(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, p, q, -p, 0.0, -r, -q, r, 0.0],
        ))
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> Result<f64> {
        guard_positive(y)?;
        Ok(self.a * (y[0].ln() - y[0] / self.y_star[0])
            + self.b * (y[1].ln() - y[1] / self.y_star[1])
            + self.c * (y[2].ln() - y[2] / self.y_star[2]))
    }

    fn grad_hamiltonian(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        guard_positive(y)?;
        Ok(DVector::from_column_slice(&[
            self.a * (1.0 / y[0] - 1.0 / self.y_star[0]),
            self.b * (1.0 / y[1] - 1.0 / self.y_star[1]),
            self.c * (1.0 / y[2] - 1.0 / self.y_star[2]),
        ]))
    }

    fn num_casimirs(&self) -> usize {
        1
    }

    fn casimir(&self, index: usize, y: &DVector<f64>) -> Result<f64> {
        assert_eq!(index, 0, "system has a single Casimir");
        guard_positive(y)?;
        Ok(-y[0].ln() - y[1].ln() + y[2].ln())
    }

    fn grad_casimir(&self, index: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        assert_eq!(index, 0, "system has a single Casimir");
        guard_positive(y)?;
        Ok(DVector::from_column_slice(&[
            -1.0 / y[0],
            -1.0 / y[1],
            1.0 / y[2],
        ]))
    }

    fn analytic_jacobian(&self, y: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        if let Err(e) = guard_positive(y) {
            return Some(Err(e));
        }
        // f1 =  y1 (b (1 - y2/y2*) + c (1 - y3/y3*))
        // f2 = -y2 (a (1 - y1/y1*) + c (1 - y3/y3*))
        // f3 =  y3 (-a (1 - y1/y1*) + b (1 - y2/y2*))
        let (a, b, c) = (self.a, self.b, self.c);
        let [s1, s2, s3] = self.y_star;
        let u = 1.0 - y[0] / s1;
        let v = 1.0 - y[1] / s2;
        let w = 1.0 - y[2] / s3;
        Some(Ok(DMatrix::from_row_slice(
            3,
            3,
            &[
                b * v + c * w,
                -b * y[0] / s2,
                -c * y[0] / s3,
                a * y[1] / s1,
                -(a * u + c * w),
                c * y[1] / s3,
                a * y[2] / s1,
                -b * y[2] / s2,
                -a * u + b * v,
            ],
        )))
    }
}

/// Planar harmonic oscillator: constant B = [[0, 1], [-1, 0]] and quadratic
/// H = (y1^2 + y2^2)/2.
#[derive(Debug, Clone)]
pub struct Harmonic;

impl PoissonSystem for Harmonic {
    fn dim(&self) -> usize {
        2
    }

    fn structure_matrix(&self, _y: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }

    fn hamiltonian(&self, y: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * (y[0] * y[0] + y[1] * y[1]))
    }

    fn grad_hamiltonian(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y.clone())
    }

    fn analytic_jacobian(&self, y: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(self.structure_matrix(y))
    }
}

/// A named benchmark problem: the system, its initial state, and the
/// reference period of the (periodic) solution.
#[derive(Clone)]
pub struct ProblemPreset {
    pub name: &'static str,
    pub system: Arc<dyn PoissonSystem>,
    pub y0: DVector<f64>,
    pub period: f64,
}

/// Look up a benchmark problem by name: `lv2`, `lv3` or `harmonic`.
pub fn preset(name: &str) -> Result<ProblemPreset> {
    match name {
        "lv2" => Ok(ProblemPreset {
            name: "lv2",
            system: Arc::new(LotkaVolterra2 {
                a: 1.0,
                b: 3.0,
                y_star: [1.0, 1.0],
            }),
            y0: DVector::from_column_slice(&[5.0, 1.0]),
            period: 4.633434168477889,
        }),
        "lv3" => Ok(ProblemPreset {
            name: "lv3",
            system: Arc::new(LotkaVolterra3 {
                a: 1.0,
                b: 2.0,
                c: 3.0,
                y_star: [1.0, 10.0, 50.0],
            }),
            y0: DVector::from_column_slice(&[1.0, 1.0, 1.0]),
            period: 2.143610709155912,
        }),
        "harmonic" => Ok(ProblemPreset {
            name: "harmonic",
            system: Arc::new(Harmonic),
            y0: DVector::from_column_slice(&[1.0, 0.0]),
            period: std::f64::consts::TAU,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}
