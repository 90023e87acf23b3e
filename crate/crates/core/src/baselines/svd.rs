//! Dense SVD: one-sided Jacobi for exact thin decompositions and a
//! randomized range finder for wide inputs where only a few leading
//! components are needed.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// `a ≈ u · diag(s) · vᵀ`, singular values descending. `u` is `m×r` and `v`
/// is `n×r`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

impl Svd {
    /// Column `k` of `v`.
    pub fn right_vector(&self, k: usize) -> Vec<f64> {
        (0..self.cols).map(|i| self.v[i * self.rank + k]).collect()
    }
}

const MAX_SWEEPS: usize = 80;

/// Hestenes rotations over the columns of `a` (`m×n`, needs `n ≤ m` for
/// efficiency but is correct for any shape). Returns the rotated columns
/// (column-major, `n` columns of length `m`) and the accumulated rotation
/// `v` (`n×n` row-major).
fn hestenes(m: usize, n: usize, a: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let eps = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for k in 0..m {
                        a += cp[k] * cp[k];
                        b += cq[k] * cq[k];
                        g += cp[k] * cq[k];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for k in 0..m {
                    let (x, y) = (cp[k], cq[k]);
                    cp[k] = c * x - s * y;
                    cq[k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * x - s * y;
                    v[k * n + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, v)
}

/// Fills the columns of `basis` (`dim×r` row-major) flagged invalid with
/// unit vectors orthogonal to every other column.
fn complete_basis(dim: usize, r: usize, basis: &mut [f64], valid: &[bool]) {
    let mut next_axis = 0;
    for k in 0..r {
        if valid[k] {
            continue;
        }
        loop {
            let mut cand = vec![0.0; dim];
            cand[next_axis % dim] = 1.0;
            next_axis += 1;
            for _ in 0..2 {
                for j in 0..r {
                    if j == k || (!valid[j] && j > k) {
                        continue;
                    }
                    let dot: f64 = (0..dim).map(|i| cand[i] * basis[i * r + j]).sum();
                    for i in 0..dim {
                        cand[i] -= dot * basis[i * r + j];
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..dim {
                    basis[i * r + k] = cand[i] / norm;
                }
                break;
            }
            if next_axis > 2 * dim {
                return;
            }
        }
    }
}

/// Thin SVD by one-sided Jacobi. Works on whichever of `a` or `aᵀ` has
/// fewer columns.
pub fn jacobi_svd(m: usize, n: usize, a: &[f64]) -> Result<Svd> {
    if a.len() != m * n || m == 0 || n == 0 {
        return Err(Error::dim("svd", &[m, n], &[a.len()]));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("svd", "non-finite input"));
    }
    let transposed = n > m;
    let (rows, cols, work) = if transposed {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = a[i * n + j];
            }
        }
        (n, m, t)
    } else {
        (m, n, a.to_vec())
    };
    let (rotated, v) = hestenes(rows, cols, &work);
    let r = cols;
    let norms: Vec<f64> = rotated.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms[order[0]];
    let tiny = smax * 1e-13 * (rows.max(cols) as f64);

    let mut s = Vec::with_capacity(r);
    let mut left = vec![0.0; rows * r];
    let mut right = vec![0.0; cols * r];
    let mut valid = vec![true; r];
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > tiny && sigma > 0.0 {
            for i in 0..rows {
                left[i * r + k] = rotated[j][i] / sigma;
            }
            s.push(sigma);
        } else {
            valid[k] = false;
            s.push(0.0);
        }
        for i in 0..cols {
            right[i * r + k] = v[i * cols + j];
        }
    }
    complete_basis(rows, r, &mut left, &valid);
    let (u, v) = if transposed { (right, left) } else { (left, right) };
    Ok(Svd {
        rows: m,
        cols: n,
        rank: r,
        u,
        s,
        v,
    })
}

fn orthonormalize_columns(rows: usize, cols: usize, q: &mut [f64]) {
    for k in 0..cols {
        for _ in 0..2 {
            for j in 0..k {
                let dot: f64 = (0..rows).map(|i| q[i * cols + k] * q[i * cols + j]).sum();
                for i in 0..rows {
                    q[i * cols + k] -= dot * q[i * cols + j];
                }
            }
        }
        let norm = (0..rows).map(|i| q[i * cols + k].powi(2)).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        for i in 0..rows {
            q[i * cols + k] /= norm;
        }
    }
}

/// `a` (`m×n`) times `b` (`n×l`).
fn mul(m: usize, n: usize, l: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * l];
    for i in 0..m {
        let row = &mut out[i * l..(i + 1) * l];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bk) in row.iter_mut().zip(&b[k * l..(k + 1) * l]) {
                *o += aik * bk;
            }
        }
    }
    out
}

/// `aᵀ` (`n×m`) times `b` (`m×l`).
fn mul_t(m: usize, n: usize, l: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * l];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let brow = &b[i * l..(i + 1) * l];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in out[k * l..(k + 1) * l].iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Leading `k` right singular vectors (`n×k` row-major) and values via a
/// randomized range finder with `power_iters` subspace iterations.
pub fn randomized_top(
    m: usize,
    n: usize,
    a: &[f64],
    k: usize,
    oversample: usize,
    power_iters: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = (k + oversample).min(m).min(n);
    if k == 0 || k > l {
        return Err(Error::Config(format!("cannot extract {k} components from {m}x{n}")));
    }
    let mut r = rng::stream(0, &[tag::SVD, m as u64, n as u64]);
    let omega: Vec<f64> = (0..n * l).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut q = mul(m, n, l, a, &omega);
    orthonormalize_columns(m, l, &mut q);
    for _ in 0..power_iters {
        let mut z = mul_t(m, n, l, a, &q);
        orthonormalize_columns(n, l, &mut z);
        q = mul(m, n, l, a, &z);
        orthonormalize_columns(m, l, &mut q);
    }
    // b = qᵀ a is l×n
    let bt = mul_t(m, l, n, &q, a);
    let svd = jacobi_svd(l, n, &bt)?;
    let mut v = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            v[i * k + j] = svd.v[i * svd.rank + j];
        }
    }
    Ok((v, svd.s[..k].to_vec()))
}
