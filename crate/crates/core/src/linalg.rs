//! Small dense kernels for the per-location systems (m×m kriging solves,
//! q×q posterior precisions). Matrices are row-major slices; only the lower
//! triangle is read or written by the Cholesky routines.

use rand::Rng;
use rand_distr::StandardNormal;

/// Relative pivot tolerance for the symmetric positive-definite factorizations.
pub const PIVOT_TOL: f64 = 1e-12;

/// In-place lower Cholesky factor of a row-major `n×n` SPD matrix.
///
/// Fails with the offending pivot index when a pivot drops below
/// `PIVOT_TOL` times the largest diagonal entry.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    debug_assert!(a.len() >= n * n);
    let mut max_diag = 0.0f64;
    for i in 0..n {
        max_diag = max_diag.max(a[i * n + i].abs());
    }
    let floor = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solve `L x = b` in place.
pub fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve `Lᵀ x = b` in place.
pub fn backward_solve_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Draw from `N(P⁻¹ h, P⁻¹)` given the precision `P` (overwritten by its
/// factor) and the canonical mean `h` (overwritten by the draw).
pub fn sample_canonical<R: Rng + ?Sized>(
    precision: &mut [f64],
    h: &mut [f64],
    n: usize,
    rng: &mut R,
) -> Result<(), usize> {
    cholesky_in_place(precision, n)?;
    // mean = L⁻ᵀ L⁻¹ h ; draw = mean + L⁻ᵀ e
    forward_solve(precision, n, h);
    for hi in h.iter_mut().take(n) {
        let e: f64 = rng.sample(StandardNormal);
        *hi += e;
    }
    backward_solve_t(precision, n, h);
    Ok(())
}

/// Mean and covariance of `N(P⁻¹ h, P⁻¹)`; used by tests and diagnostics.
pub fn canonical_moments(precision: &[f64], h: &[f64], n: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut l = precision.to_vec();
    cholesky_in_place(&mut l, n).ok()?;
    let mut mean = h.to_vec();
    forward_solve(&l, n, &mut mean);
    backward_solve_t(&l, n, &mut mean);
    let mut cov = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        forward_solve(&l, n, &mut e);
        backward_solve_t(&l, n, &mut e);
        for r in 0..n {
            cov[r * n + c] = e[r];
        }
    }
    Some((mean, cov))
}
