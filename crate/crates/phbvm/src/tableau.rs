//! Per-method discretization data for a (k, s) pair.
//!
//! A method is determined by a k-node Gauss-Legendre rule together with the
//! first s basis polynomials. The tableau packs the basis values and
//! antiderivatives at the nodes, the s x s coupling matrix X_s appearing in
//! the simplified Newton iteration, its inverse, and the minimum-modulus
//! eigenvalue lambda_s driving the blended iteration.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::legendre::{eval_legendre, eval_legendre_antiderivative, xi, QuadratureRule, MAX_NODES};

/// Precomputed matrices for one (k, s) method. Immutable after construction
/// and freely shareable across concurrent integrations.
#[derive(Debug, Clone)]
pub struct MethodTableau {
    pub k: usize,
    pub s: usize,
    pub rule: QuadratureRule,
    /// k x s basis values, entry (l, j) = P_j(c_{l+1}).
    pub p: DMatrix<f64>,
    /// k x s antiderivatives, entry (l, j) = int_0^{c_{l+1}} P_j(x) dx.
    pub p_int: DMatrix<f64>,
    /// s x s coupling matrix X_s, built from the closed form
    /// xi_i = (2 sqrt|4 i^2 - 1|)^{-1} and cross-checked against P^T Omega I.
    pub x: DMatrix<f64>,
    /// Inverse of X_s.
    pub x_inv: DMatrix<f64>,
    /// min |lambda| over the spectrum of X_s.
    pub lambda_min: f64,
}

/// Closed form of X_s: xi_0 in the top-left corner, xi_i on the subdiagonal
/// and -xi_i on the superdiagonal.
fn coupling_matrix(s: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(s, s);
    x[(0, 0)] = xi(0);
    for i in 1..s {
        x[(i, i - 1)] = xi(i);
        x[(i - 1, i)] = -xi(i);
    }
    x
}

/// Assemble the tableau for the method with k quadrature nodes and
/// polynomial degree s. Requires 1 <= s <= k <= 32.
pub fn build_tableau(k: usize, s: usize) -> Result<MethodTableau> {
    if s == 0 || s > k || k > MAX_NODES {
        return Err(Error::TableauParams { k, s });
    }
    let rule = QuadratureRule::gauss(k)?;
    let mut p = DMatrix::zeros(k, s);
    let mut p_int = DMatrix::zeros(k, s);
    for (l, &c) in rule.nodes().iter().enumerate() {
        for j in 0..s {
            p[(l, j)] = eval_legendre(j, c);
            p_int[(l, j)] = eval_legendre_antiderivative(j, c);
        }
    }
    let x = coupling_matrix(s);

    // The quadrature is exact for the integrands defining X_s, so the two
    // constructions must agree to roundoff.
    let mut cross = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for l in 0..k {
                acc += rule.weights()[l] * p[(l, i)] * p_int[(l, j)];
            }
            cross[(i, j)] = acc;
        }
    }
    let defect = (&cross - &x).amax();
    assert!(
        defect < 1e-12,
        "tableau cross-check failed for (k, s) = ({k}, {s}): defect {defect:e}"
    );

    let x_inv = x
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("coupling matrix X_s"))?;
    let lambda_min = min_modulus_eigenvalue(&x)?;

    Ok(MethodTableau {
        k,
        s,
        rule,
        p,
        p_int,
        x,
        x_inv,
        lambda_min,
    })
}

/// Minimum eigenvalue modulus of a square real matrix.
///
/// Eigenvalues come from an unshifted QR iteration after Hessenberg
/// reduction; adequate for the small matrices handled here.
pub fn min_modulus_eigenvalue(x: &DMatrix<f64>) -> Result<f64> {
    let evs = eigenvalues(x)?;
    let min = evs
        .iter()
        .map(|z| z.norm())
        .fold(f64::INFINITY, f64::min);
    let scale = x.amax().max(f64::MIN_POSITIVE);
    if min < 1e-14 * scale {
        return Err(Error::Singular("eigenvalue extraction (matrix singular)"));
    }
    Ok(min)
}

/// Reduce to upper Hessenberg form in place by Householder reflections.
fn hessenberg_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for col in 0..n.saturating_sub(2) {
        // Householder vector annihilating a[col+2.., col].
        let mut v: Vec<f64> = (col + 1..n).map(|r| a[(r, col)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A <- (I - 2vv^T/|v|^2) A
        for c in 0..n {
            let dot: f64 = (0..v.len()).map(|i| v[i] * a[(col + 1 + i, c)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in 0..v.len() {
                a[(col + 1 + i, c)] -= f * v[i];
            }
        }
        // A <- A (I - 2vv^T/|v|^2)
        for r in 0..n {
            let dot: f64 = (0..v.len()).map(|i| v[i] * a[(r, col + 1 + i)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in 0..v.len() {
                a[(r, col + 1 + i)] -= f * v[i];
            }
        }
        for r in col + 2..n {
            a[(r, col)] = 0.0;
        }
    }
}

/// One unshifted QR sweep on the active Hessenberg window [lo, hi].
fn qr_sweep(h: &mut DMatrix<f64>, lo: usize, hi: usize) {
    let mut rotations = Vec::with_capacity(hi - lo);
    for i in lo..hi {
        let (a, b) = (h[(i, i)], h[(i + 1, i)]);
        let r = a.hypot(b);
        let (c, s) = if r == 0.0 { (1.0, 0.0) } else { (a / r, b / r) };
        rotations.push((c, s));
        for col in i..=hi {
            let (x, y) = (h[(i, col)], h[(i + 1, col)]);
            h[(i, col)] = c * x + s * y;
            h[(i + 1, col)] = -s * x + c * y;
        }
    }
    for (i, (c, s)) in rotations.into_iter().enumerate() {
        let i = lo + i;
        let top = (i + 2).min(hi);
        for row in lo..=top {
            let (x, y) = (h[(row, i)], h[(row, i + 1)]);
            h[(row, i)] = c * x + s * y;
            h[(row, i + 1)] = -s * x + c * y;
        }
    }
}

/// Eigenvalues of the trailing 2x2 block [[a, b], [c, d]].
fn block2_eigenvalues(a: f64, b: f64, c: f64, d: f64) -> [Complex<f64>; 2] {
    let mean = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = mean * mean - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        [Complex::new(mean + r, 0.0), Complex::new(mean - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        [Complex::new(mean, r), Complex::new(mean, -r)]
    }
}

/// Full spectrum of a square real matrix by Hessenberg reduction plus
/// unshifted QR with 1x1/2x2 deflation.
fn eigenvalues(x: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let n = x.nrows();
    assert_eq!(n, x.ncols(), "eigenvalues: matrix must be square");
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = x.clone();
    hessenberg_in_place(&mut h);
    let anorm = h.amax().max(f64::MIN_POSITIVE);
    let eps = f64::EPSILON;

    let mut evs = Vec::with_capacity(n);
    let mut hi = n - 1;
    let budget = 200 * n * n + 500;
    let mut sweeps = 0usize;
    loop {
        // Zero negligible subdiagonals.
        for i in 0..hi {
            let thresh = eps * (h[(i, i)].abs() + h[(i + 1, i + 1)].abs()).max(anorm * 1e-3);
            if h[(i + 1, i)].abs() <= thresh {
                h[(i + 1, i)] = 0.0;
            }
        }
        // Deflate trailing 1x1 / 2x2 blocks.
        if hi == 0 {
            evs.push(Complex::new(h[(0, 0)], 0.0));
            break;
        }
        if h[(hi, hi - 1)] == 0.0 {
            evs.push(Complex::new(h[(hi, hi)], 0.0));
            hi -= 1;
            continue;
        }
        if hi == 1 || h[(hi - 1, hi - 2)] == 0.0 {
            let blk = block2_eigenvalues(
                h[(hi - 1, hi - 1)],
                h[(hi - 1, hi)],
                h[(hi, hi - 1)],
                h[(hi, hi)],
            );
            evs.extend_from_slice(&blk);
            if hi == 1 {
                break;
            }
            hi -= 2;
            continue;
        }
        // Start of the unreduced block containing hi.
        let mut lo = hi - 1;
        while lo > 0 && h[(lo, lo - 1)] != 0.0 {
            lo -= 1;
        }
        qr_sweep(&mut h, lo, hi);
        sweeps += 1;
        if sweeps > budget {
            return Err(Error::EigenConvergence { n });
        }
    }
    Ok(evs)
}
