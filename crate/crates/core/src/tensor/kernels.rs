//! Raw row-major kernels on flat slices. No allocation unless noted.

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// In-place lower Cholesky of a `d×d` block. Reads the lower triangle only and
/// zeroes the strict upper triangle. On failure returns the 1-based leading
/// minor that was not positive.
pub fn cholesky_in_place(a: &mut [f64], d: usize) -> Result<(), usize> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for p in 0..j {
            diag -= a[j * d + p] * a[j * d + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(j + 1);
        }
        let ljj = libm::sqrt(diag);
        a[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= a[i * d + p] * a[j * d + p];
            }
            a[i * d + j] = s / ljj;
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            a[i * d + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L y = b` in place for `b: d×k`.
pub fn solve_lower(l: &[f64], b: &mut [f64], d: usize, k: usize) {
    for i in 0..d {
        for c in 0..k {
            let mut s = b[i * k + c];
            for p in 0..i {
                s -= l[i * d + p] * b[p * k + c];
            }
            b[i * k + c] = s / l[i * d + i];
        }
    }
}

/// Solves `Lᵀ x = b` in place for `b: d×k`.
pub fn solve_lower_transposed(l: &[f64], b: &mut [f64], d: usize, k: usize) {
    for i in (0..d).rev() {
        for c in 0..k {
            let mut s = b[i * k + c];
            for p in (i + 1)..d {
                s -= l[p * d + i] * b[p * k + c];
            }
            b[i * k + c] = s / l[i * d + i];
        }
    }
}

/// Solves `L Lᵀ x = b` in place.
pub fn cholesky_solve(l: &[f64], b: &mut [f64], d: usize, k: usize) {
    solve_lower(l, b, d, k);
    solve_lower_transposed(l, b, d, k);
}

/// Transposes a `r×c` block into `out` (`c×r`).
pub fn transpose_into(a: &[f64], r: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

/// Folds a gradient taken w.r.t. a full matrix into the lower-triangle-read
/// convention: off-diagonal `g_ij + g_ji` below the diagonal, `g_ii` on it,
/// zero above.
pub fn fold_symmetric_to_lower(g: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] += g[j * d + i];
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            g[i * d + j] = 0.0;
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
