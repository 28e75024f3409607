//! Orthonormal shifted Legendre polynomials on [0, 1] and Gauss-Legendre
//! quadrature rules.
//!
//! The basis {P_j} used throughout the crate is orthonormal in L^2(0, 1):
//! deg P_j = j and int_0^1 P_i P_j dx = delta_ij. It relates to the standard
//! Legendre polynomials L_j on [-1, 1] by P_j(c) = sqrt(2j+1) L_j(2c - 1).

use crate::error::{Error, Result};

/// Largest supported node count. The benchmark methods use k <= 6; 32 leaves
/// headroom without needing extended precision in the node solver.
pub const MAX_NODES: usize = 32;

/// Coefficient xi_i = (2 sqrt|4 i^2 - 1|)^{-1} linking Legendre polynomials
/// to their antiderivatives.
pub(crate) fn xi(i: usize) -> f64 {
    let i = i as f64;
    0.5 / (4.0 * i * i - 1.0).abs().sqrt()
}

/// Standard Legendre polynomial L_n and derivative L_n' at t in [-1, 1],
/// by the three-term recurrence.
fn legendre_std_with_deriv(n: usize, t: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, t);
    let (mut d_prev, mut d) = (0.0, 1.0);
    for j in 1..n {
        let jf = j as f64;
        let p_next = ((2.0 * jf + 1.0) * t * p - jf * p_prev) / (jf + 1.0);
        let d_next = ((2.0 * jf + 1.0) * (p + t * d) - jf * d_prev) / (jf + 1.0);
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
    (p, d)
}

/// Value of the orthonormal shifted Legendre polynomial P_j at c.
///
/// The recurrence is stable well beyond j = 64; c may lie outside [0, 1].
pub fn eval_legendre(j: usize, c: f64) -> f64 {
    let (l, _) = legendre_std_with_deriv(j, 2.0 * c - 1.0);
    (2.0 * j as f64 + 1.0).sqrt() * l
}

/// Antiderivative int_0^c P_j(x) dx in closed form.
///
/// For j >= 1 the integral telescopes onto neighbouring polynomials,
/// int_0^c P_j = xi_{j+1} P_{j+1}(c) - xi_j P_{j-1}(c); for j = 0 it is c.
pub fn eval_legendre_antiderivative(j: usize, c: f64) -> f64 {
    if j == 0 {
        c
    } else {
        xi(j + 1) * eval_legendre(j + 1, c) - xi(j) * eval_legendre(j - 1, c)
    }
}

/// Gauss-Legendre quadrature rule on [0, 1].
///
/// Nodes are the k roots of P_k, sorted ascending; the rule is exact for
/// polynomials of degree up to 2k - 1 and the weights sum to one.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Build the k-node Gauss-Legendre rule on [0, 1].
    ///
    /// Roots are located by Newton iteration on the standard interval from
    /// the usual cosine initial guesses, then node/weight pairs are
    /// symmetrized so that c_{k-i+1} = 1 - c_i holds exactly.
    pub fn gauss(k: usize) -> Result<Self> {
        if k == 0 || k > MAX_NODES {
            return Err(Error::NodeCount { k });
        }
        let mut nodes = vec![0.0; k];
        let mut weights = vec![0.0; k];
        let kf = k as f64;
        for i in 0..k {
            // Root i (descending in t, hence ascending in c after the flip).
            let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (kf + 0.5)).cos();
            for _ in 0..60 {
                let (p, dp) = legendre_std_with_deriv(k, t);
                let dt = p / dp;
                t -= dt;
                if p.abs() < 1e-16 || dt.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre_std_with_deriv(k, t);
            let w = 2.0 / ((1.0 - t * t) * dp * dp);
            // Map [-1, 1] -> [0, 1]; cosine guesses enumerate roots in
            // descending t, so store back-to-front for ascending nodes.
            nodes[k - 1 - i] = 0.5 * (1.0 + t);
            weights[k - 1 - i] = 0.5 * w;
        }
        // Enforce the reflection symmetry pairwise; the middle node of an
        // odd rule is exactly 1/2.
        for i in 0..k / 2 {
            let j = k - 1 - i;
            let c = 0.5 * (nodes[i] + (1.0 - nodes[j]));
            nodes[i] = c;
            nodes[j] = 1.0 - c;
            let b = 0.5 * (weights[i] + weights[j]);
            weights[i] = b;
            weights[j] = b;
        }
        if k % 2 == 1 {
            nodes[k / 2] = 0.5;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Quadrature approximation of int_0^1 f.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&c, &b)| b * f(c))
            .sum()
    }
}
