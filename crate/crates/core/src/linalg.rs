//! Dense complex linear algebra for small systems.
//!
//! Everything here operates on `Vec<Vec<Complex64>>` row-major matrices.
//! The system sizes in this crate are tiny (one row per emitter), so a
//! straightforward partial-pivot elimination and a shifted-QR
//! eigensolver are both simpler and easier to audit than an external
//! LAPACK binding.

use num_complex::Complex64 as C64;

use crate::error::Error;

pub type Matrix = Vec<Vec<C64>>;

const EPS: f64 = f64::EPSILON;
/// QR sweeps allowed per eigenvalue before giving up.
const MAX_QR_ITERS: usize = 60;

pub fn frobenius_norm(m: &[Vec<C64>]) -> f64 {
    m.iter()
        .flat_map(|row| row.iter())
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn echo_matrix(m: &[Vec<C64>]) -> String {
    let rows: Vec<String> = m
        .iter()
        .map(|row| {
            let cells: Vec<String> = row
                .iter()
                .map(|z| format!("{:+.6e}{:+.6e}i", z.re, z.im))
                .collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join("; "))
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
///
/// Consumes its arguments (they are scratch space). Fails only on an
/// exactly zero pivot; `context` names the system for the error message.
pub fn solve_linear(a: Matrix, b: Vec<C64>, context: &str) -> Result<Vec<C64>, Error> {
    solve_linear_indexed(a, b)
        .map_err(|row| Error::SingularSystem(format!("{context} (row {row})")))
}

/// As [`solve_linear`], reporting the column of the exactly zero pivot.
pub fn solve_linear_indexed(mut a: Matrix, mut b: Vec<C64>) -> Result<Vec<C64>, usize> {
    let n = a.len();
    debug_assert!(a.iter().all(|row| row.len() == n) && b.len() == n);

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r][col]
                    .norm_sqr()
                    .partial_cmp(&a[s][col].norm_sqr())
                    .expect("pivot magnitudes are never NaN")
            })
            .unwrap();
        if a[pivot_row][col] == C64::ZERO {
            return Err(col);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);

        let pivot = a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] / pivot;
            if factor == C64::ZERO {
                continue;
            }
            for k in col..n {
                let upper = a[col][k];
                a[row][k] -= factor * upper;
            }
            let rhs = b[col];
            b[row] -= factor * rhs;
        }
    }

    let mut x = vec![C64::ZERO; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Eigenvalues with matching right eigenvectors, sorted by
/// (real, imaginary) part ascending. Vectors are unit norm with the
/// phase fixed so the largest-magnitude component is real positive.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C64>,
    pub vectors: Vec<Vec<C64>>,
}

/// Full eigendecomposition of a general complex matrix.
///
/// Hessenberg reduction followed by explicitly shifted QR for the
/// eigenvalues, then inverse iteration on the original matrix for the
/// vectors. Repeated eigenvalues get vectors orthogonalized within
/// their cluster so degenerate eigenspaces come out with independent
/// representatives.
pub fn eigendecompose(m: &[Vec<C64>]) -> Result<Eigen, Error> {
    let n = m.len();
    debug_assert!(m.iter().all(|row| row.len() == n));
    match n {
        0 => {
            return Ok(Eigen {
                values: vec![],
                vectors: vec![],
            })
        }
        1 => {
            return Ok(Eigen {
                values: vec![m[0][0]],
                vectors: vec![vec![C64::ONE]],
            })
        }
        _ => {}
    }

    let mut values = if n == 2 {
        let (l1, l2) = eig2(m[0][0], m[0][1], m[1][0], m[1][1]);
        vec![l1, l2]
    } else {
        let mut h = m.to_vec();
        hessenberg_in_place(&mut h);
        qr_eigenvalues(&mut h).map_err(|_| Error::EigenNonConvergence(echo_matrix(m)))?
    };
    values.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());

    let scale = frobenius_norm(m).max(f64::MIN_POSITIVE);
    let mut vectors: Vec<Vec<C64>> = Vec::with_capacity(n);
    for (idx, &lambda) in values.iter().enumerate() {
        // Earlier vectors whose eigenvalue coincides with this one.
        let cluster: Vec<usize> = (0..idx)
            .filter(|&j| (values[j] - lambda).norm() <= 1e-8 * scale)
            .collect();
        let v = inverse_iteration(m, lambda, scale, idx, &cluster, &vectors)
            .ok_or_else(|| Error::EigenNonConvergence(echo_matrix(m)))?;
        vectors.push(v);
    }

    Ok(Eigen { values, vectors })
}

/// Eigenvalues of [[a, b], [c, d]] via the quadratic formula.
fn eig2(a: C64, b: C64, c: C64, d: C64) -> (C64, C64) {
    let mean = 0.5 * (a + d);
    let disc = (0.5 * (a - d)).powi(2) + b * c;
    let root = disc.sqrt();
    (mean - root, mean + root)
}

/// In-place reduction to upper Hessenberg form by Householder reflections.
fn hessenberg_in_place(h: &mut Matrix) {
    let n = h.len();
    for k in 0..n.saturating_sub(2) {
        let norm_x = (k + 1..n).map(|i| h[i][k].norm_sqr()).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            continue;
        }
        let x0 = h[k + 1][k];
        let phase = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            C64::ONE
        };
        let alpha = -phase * norm_x;
        let mut v: Vec<C64> = (k + 1..n).map(|i| h[i][k]).collect();
        v[0] -= alpha;
        let vnorm_sqr = v.iter().map(|z| z.norm_sqr()).sum::<f64>();
        if vnorm_sqr == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm_sqr;

        // Left: H <- (I - beta v v^H) H on rows k+1.., columns k..n.
        for col in k..n {
            let mut w = C64::ZERO;
            for (i, vi) in v.iter().enumerate() {
                w += vi.conj() * h[k + 1 + i][col];
            }
            w *= beta;
            for (i, vi) in v.iter().enumerate() {
                h[k + 1 + i][col] -= w * vi;
            }
        }
        // Right: H <- H (I - beta v v^H) on columns k+1.., all rows.
        for row in 0..n {
            let mut u = C64::ZERO;
            for (i, vi) in v.iter().enumerate() {
                u += h[row][k + 1 + i] * vi;
            }
            u *= beta;
            for (i, vi) in v.iter().enumerate() {
                h[row][k + 1 + i] -= u * vi.conj();
            }
        }
        // Entries below the subdiagonal are zero by construction.
        for i in k + 2..n {
            h[i][k] = C64::ZERO;
        }
    }
}

/// Wilkinson shift: eigenvalue of the trailing 2x2 closest to the corner.
fn wilkinson_shift(a: C64, b: C64, c: C64, d: C64) -> C64 {
    let (l1, l2) = eig2(a, b, c, d);
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

/// Eigenvalues of an upper Hessenberg matrix by explicitly shifted QR
/// with deflation. Destroys `h`.
fn qr_eigenvalues(h: &mut Matrix) -> Result<Vec<C64>, ()> {
    let n = h.len();
    let norm = frobenius_norm(h).max(f64::MIN_POSITIVE);
    let mut values = Vec::with_capacity(n);
    let mut hi = n - 1;
    let mut iters = 0usize;

    loop {
        // Flush negligible subdiagonal entries.
        for i in 0..hi {
            let tol = EPS * (h[i][i].norm() + h[i + 1][i + 1].norm()).max(EPS * norm);
            if h[i + 1][i].norm() <= tol {
                h[i + 1][i] = C64::ZERO;
            }
        }

        // Deflate converged eigenvalues off the bottom.
        while hi > 0 && h[hi][hi - 1] == C64::ZERO {
            values.push(h[hi][hi]);
            hi -= 1;
            iters = 0;
        }
        if hi == 0 {
            values.push(h[0][0]);
            return Ok(values);
        }

        // Active block [lo..=hi].
        let mut lo = hi;
        while lo > 0 && h[lo][lo - 1] != C64::ZERO {
            lo -= 1;
        }

        if hi - lo == 1 {
            let (l1, l2) = eig2(h[lo][lo], h[lo][hi], h[hi][lo], h[hi][hi]);
            values.push(l1);
            values.push(l2);
            if lo == 0 {
                return Ok(values);
            }
            hi = lo - 1;
            iters = 0;
            continue;
        }

        if iters >= MAX_QR_ITERS {
            return Err(());
        }
        let shift = if iters > 0 && iters % 12 == 0 {
            // Exceptional shift to break rare symmetric stalls.
            h[hi][hi] + C64::new(1.5 * h[hi][hi - 1].norm(), 0.5 * h[hi - 1][hi - 2].norm())
        } else {
            wilkinson_shift(h[hi - 1][hi - 1], h[hi - 1][hi], h[hi][hi - 1], h[hi][hi])
        };
        qr_step(h, lo, hi, shift);
        iters += 1;
    }
}

/// One explicit QR step with shift on the Hessenberg block [lo..=hi]:
/// A - sI = QR, A <- RQ + sI, implemented with Givens rotations.
fn qr_step(h: &mut Matrix, lo: usize, hi: usize, shift: C64) {
    for i in lo..=hi {
        h[i][i] -= shift;
    }

    // Forward pass: rotations annihilate the subdiagonal, leaving R.
    let mut rotations: Vec<(C64, C64, f64)> = Vec::with_capacity(hi - lo);
    for i in lo..hi {
        let a = h[i][i];
        let b = h[i + 1][i];
        let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
        if r == 0.0 {
            rotations.push((C64::ONE, C64::ZERO, 1.0));
            continue;
        }
        let ca = a.conj() / r;
        let cb = b.conj() / r;
        // G = [[ca, cb], [-cb^*, ca^*]] is unitary and sends (a, b) to (r, 0).
        for col in i..=hi {
            let top = h[i][col];
            let bottom = h[i + 1][col];
            h[i][col] = ca * top + cb * bottom;
            h[i + 1][col] = -cb.conj() * top + ca.conj() * bottom;
        }
        rotations.push((ca, cb, r));
    }

    // Backward pass: A <- R G_lo^H ... G_{hi-1}^H.
    for (step, &(ca, cb, _)) in rotations.iter().enumerate() {
        let i = lo + step;
        for row in lo..=(i + 1).min(hi) {
            let left = h[row][i];
            let right = h[row][i + 1];
            h[row][i] = left * ca.conj() + right * cb.conj();
            h[row][i + 1] = -left * cb + right * ca;
        }
    }

    for i in lo..=hi {
        h[i][i] += shift;
    }
}

/// Deterministic pseudo-random start vector for inverse iteration.
fn start_vector(n: usize, salt: u64) -> Vec<C64> {
    let mut state = salt
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xD1B5_4A32_D192_ED03);
    let mut next = move || {
        state ^= state >> 30;
        state = state.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94D0_49BB_1331_11EB);
        state ^= state >> 31;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    (0..n).map(|_| C64::new(next(), next())).collect()
}

fn normalize(v: &mut [C64]) -> f64 {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for z in v.iter_mut() {
            *z /= norm;
        }
    }
    norm
}

/// Fix the phase so the largest-magnitude component (lowest index on
/// ties) is real and positive.
fn fix_phase(v: &mut [C64]) {
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        // Strict comparison keeps the lowest index on ties.
        if z.norm_sqr() > v[best].norm_sqr() {
            best = i;
        }
    }
    let pivot = v[best];
    if pivot.norm() > 0.0 {
        let phase = pivot.conj() / pivot.norm();
        for z in v.iter_mut() {
            *z *= phase;
        }
    }
}

fn mat_vec(m: &[Vec<C64>], v: &[C64]) -> Vec<C64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn residual_norm(m: &[Vec<C64>], lambda: C64, v: &[C64]) -> f64 {
    mat_vec(m, v)
        .iter()
        .zip(v)
        .map(|(mv, vi)| (mv - lambda * vi).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Inverse iteration for the eigenvector of `lambda`, projecting out
/// previously found vectors of the same eigenvalue cluster.
fn inverse_iteration(
    m: &[Vec<C64>],
    lambda: C64,
    scale: f64,
    index: usize,
    cluster: &[usize],
    found: &[Vec<C64>],
) -> Option<Vec<C64>> {
    let n = m.len();
    let tol = 1e-8 * (scale + lambda.norm());

    for attempt in 0..6u32 {
        // Jitter escalates only if the shifted solve is exactly singular
        // or the iteration fails to settle.
        let jitter = if attempt == 0 {
            0.0
        } else {
            scale * 1e-13 * 4f64.powi(attempt as i32 - 1)
        };
        let shift = lambda + C64::new(jitter, 0.5 * jitter);
        let mut v = start_vector(n, (index as u64 + 1) * 7 + attempt as u64 * 1013);
        normalize(&mut v);

        let mut ok = false;
        for _ in 0..8 {
            let mut a = m.to_vec();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] -= shift;
            }
            let mut x = match solve_linear(a, v.clone(), "inverse iteration") {
                Ok(x) => x,
                Err(_) => break,
            };
            if normalize(&mut x) == 0.0 {
                break;
            }
            // Keep degenerate eigenvectors independent.
            for &j in cluster {
                let overlap: C64 = found[j].iter().zip(&x).map(|(a, b)| a.conj() * b).sum();
                for (xi, fj) in x.iter_mut().zip(&found[j]) {
                    *xi -= overlap * fj;
                }
            }
            if normalize(&mut x) < 1e-6 && !cluster.is_empty() {
                // Defective cluster; restart from a different vector.
                break;
            }
            v = x;
            if residual_norm(m, lambda, &v) <= tol {
                ok = true;
                break;
            }
        }
        if ok {
            fix_phase(&mut v);
            return Some(v);
        }
    }
    None
}
