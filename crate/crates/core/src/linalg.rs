//! Small dense linear algebra on row-major slices.
//!
//! Everything here works on the tiny matrices that show up per collocation
//! point (state dimension in the single digits), so the routines favour
//! straightforward loops over blocking or allocation reuse.

/// Determinant of the `n x n` row-major matrix `a`.
///
/// Closed form up to `n = 3`, LU with partial pivoting beyond.
pub fn determinant(a: &[f64], n: usize) -> f64 {
    debug_assert!(a.len() >= n * n);
    match n {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => lu_determinant(a, n),
    }
}

/// Determinant via Gaussian elimination with partial pivoting.
pub fn lu_determinant(a: &[f64], n: usize) -> f64 {
    let mut m = a[..n * n].to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for row in col + 1..n {
            let factor = m[row * n + col] / p;
            if factor != 0.0 {
                for k in col + 1..n {
                    m[row * n + k] -= factor * m[col * n + k];
                }
            }
        }
    }
    det
}

/// Top-left `k x k` block of an `n x n` row-major matrix.
pub fn leading_block(a: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        out.extend_from_slice(&a[i * n..i * n + k]);
    }
    out
}

/// Cofactor matrix of `a`: entry `(i, j)` is `d det(a) / d a[i][j]`.
pub fn cofactor_matrix(a: &[f64], n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![a[3], -a[2], -a[1], a[0]],
        _ => {
            let mut out = vec![0.0; n * n];
            let mut minor = Vec::with_capacity((n - 1) * (n - 1));
            for i in 0..n {
                for j in 0..n {
                    minor.clear();
                    for r in (0..n).filter(|&r| r != i) {
                        for c in (0..n).filter(|&c| c != j) {
                            minor.push(a[r * n + c]);
                        }
                    }
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    out[i * n + j] = sign * determinant(&minor, n - 1);
                }
            }
            out
        }
    }
}

/// Eigenvalues of a symmetric 2x2 matrix `[[a, b], [b, c]]`, ascending.
pub fn sym2_eigenvalues(a: f64, b: f64, c: f64) -> [f64; 2] {
    let mean = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    [mean - radius, mean + radius]
}

/// Largest eigenvalue of a symmetric `n x n` matrix.
///
/// Closed form for `n <= 2`, tridiagonalization plus implicit QL otherwise.
pub fn sym_max_eigenvalue(a: &[f64], n: usize) -> f64 {
    match n {
        0 => f64::NEG_INFINITY,
        1 => a[0],
        2 => sym2_eigenvalues(a[0], 0.5 * (a[1] + a[2]), a[3])[1],
        _ => sym_eigenvalues(a, n)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// All eigenvalues of a symmetric matrix via Householder tridiagonalization
/// followed by the implicit QL iteration with Wilkinson-style shifts.
/// Returned in ascending order.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let (mut d, mut e) = tridiagonalize(a, n);
    tridiagonal_ql(&mut d, &mut e);
    d.sort_by(f64::total_cmp);
    d
}

/// Householder reduction of a symmetric matrix to tridiagonal form.
/// Returns the diagonal and the superdiagonal (`e[n - 1] = 0`).
fn tridiagonalize(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a[..n * n].to_vec();
    // symmetrize so callers passing a numerically asymmetric matrix get the
    // eigenvalues of its Hermitian part
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(2) {
        let norm = (k + 1..n).map(|i| m[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = m[(k + 1) * n + k];
        let alpha = if x0 > 0.0 { -norm } else { norm };
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in k + 1..n {
            v[i] = m[i * n + k];
        }
        v[k + 1] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for i in 0..n {
            w[i] = (0..n).map(|j| m[i * n + j] * v[j]).sum();
        }
        let c: f64 = (0..n).map(|i| v[i] * w[i]).sum();
        // A <- (I - 2vv^T) A (I - 2vv^T)
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] += -2.0 * v[i] * w[j] - 2.0 * w[i] * v[j] + 4.0 * c * v[i] * v[j];
            }
        }
    }
    let d = (0..n).map(|i| m[i * n + i]).collect();
    let e = (0..n)
        .map(|i| if i + 1 < n { m[i * n + i + 1] } else { 0.0 })
        .collect();
    (d, e)
}

/// Implicit QL on a symmetric tridiagonal matrix; eigenvalues land in `d`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    if n == 0 {
        return;
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Largest singular value of a `rows x cols` row-major matrix by power
/// iteration on `A^T A`.
///
/// Stops when successive estimates agree to `rel_tol` or after `max_iter`
/// iterations. The start vector is fixed, so results are deterministic.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize, rel_tol: f64, max_iter: usize) -> f64 {
    if rows == 0 || cols == 0 || a.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..cols)
        .map(|j| 1.0 + 0.37 * ((j as f64) * 1.618_033_988_75).sin())
        .collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..cols).map(|j| a[i * cols + j] * v[j]).sum();
        }
        let next_sigma = norm(&u);
        if next_sigma == 0.0 {
            // start vector in the null space; fall back to the row with the
            // largest norm as a new start
            let best = (0..rows)
                .max_by(|&r1, &r2| {
                    norm(&a[r1 * cols..(r1 + 1) * cols])
                        .total_cmp(&norm(&a[r2 * cols..(r2 + 1) * cols]))
                })
                .unwrap_or(0);
            v.copy_from_slice(&a[best * cols..(best + 1) * cols]);
            normalize(&mut v);
            continue;
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| a[i * cols + j] * u[i]).sum();
        }
        normalize(&mut v);
        let converged = (next_sigma - sigma).abs() <= rel_tol * next_sigma;
        sigma = next_sigma;
        if converged {
            break;
        }
    }
    sigma
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cofactor_det(a: &[f64], n: usize) -> f64 {
        if n == 1 {
            return a[0];
        }
        let mut total = 0.0;
        for j in 0..n {
            let mut minor = Vec::new();
            for r in 1..n {
                for c in (0..n).filter(|&c| c != j) {
                    minor.push(a[r * n + c]);
                }
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            total += sign * a[j] * cofactor_det(&minor, n - 1);
        }
        total
    }

    #[test]
    fn determinants_agree_with_cofactor_expansion() {
        let a = [
            2.0, -1.0, 0.5, 3.0, 0.2, //
            1.0, 4.0, -2.0, 0.0, 1.5, //
            0.3, 0.7, 5.0, -1.0, 2.0, //
            -2.0, 1.1, 0.4, 3.0, 0.0, //
            1.0, 0.0, -0.5, 2.5, 1.0,
        ];
        for n in 1..=5 {
            let block = leading_block(&a, 5, n);
            let want = cofactor_det(&block, n);
            let got = determinant(&block, n);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "n={n}");
            let lu = lu_determinant(&block, n);
            assert!((lu - want).abs() <= 1e-12 * want.abs().max(1.0), "n={n}");
        }
    }

    #[test]
    fn singular_matrix_has_zero_determinant() {
        let a = [1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0, 0.0, 1.0, 0.0, 1.0, 5.0, 5.0, 5.0, 5.0];
        assert_eq!(lu_determinant(&a, 4), 0.0);
    }

    #[test]
    fn cofactors_are_determinant_derivatives() {
        let a = [1.0, 0.3, -0.2, 0.3, -2.0, 0.7, -0.2, 0.7, 0.5];
        let cof = cofactor_matrix(&a, 3);
        let h = 1e-6;
        for k in 0..9 {
            let mut p = a;
            let mut m = a;
            p[k] += h;
            m[k] -= h;
            let fd = (determinant(&p, 3) - determinant(&m, 3)) / (2.0 * h);
            assert!((fd - cof[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn ql_matches_closed_form_on_2x2() {
        let a = [1.5, -0.25, -0.25, -3.0];
        let closed = sym2_eigenvalues(1.5, -0.25, -3.0);
        let iter = sym_eigenvalues(&a, 2);
        assert!((closed[0] - iter[0]).abs() < 1e-12);
        assert!((closed[1] - iter[1]).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let a = [3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(sym_eigenvalues(&a, 3), vec![-1.0, 2.0, 3.0]);
        assert_eq!(sym_max_eigenvalue(&a, 3), 3.0);
    }

    #[test]
    fn spectral_norm_of_rank_one() {
        let a = [3.0, 0.0, 0.0, 0.0];
        assert!((spectral_norm(&a, 2, 2, 1e-10, 500) - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&[0.0; 6], 2, 3, 1e-6, 500), 0.0);
    }
}
