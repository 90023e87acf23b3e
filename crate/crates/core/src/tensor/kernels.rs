//! Slice-level numeric kernels. Every output row is computed with the same
//! summation order regardless of how many rows are in the call, so batched
//! and per-sample evaluation agree bitwise.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Geometry of a valid, stride-1 convolution over `[batch, h, w, c]` input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
    pub fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds every output position's receptive field into one row of length
/// `kh·kw·c`, ordered `(p, q, channel)`.
pub fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow, q) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![0.0; g.rows() * q];
    let row_stride = g.w * g.c;
    let seg = g.kw * g.c;
    for b in 0..g.batch {
        let img = &x[b * g.h * row_stride..(b + 1) * g.h * row_stride];
        for i in 0..oh {
            for j in 0..ow {
                let r = (b * oh + i) * ow + j;
                let dst = &mut cols[r * q..(r + 1) * q];
                for p in 0..g.kh {
                    let src = (i + p) * row_stride + j * g.c;
                    dst[p * seg..(p + 1) * seg].copy_from_slice(&img[src..src + seg]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input grid.
pub fn col2im_acc(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow, q) = (g.out_h(), g.out_w(), g.patch_len());
    let row_stride = g.w * g.c;
    let seg = g.kw * g.c;
    for b in 0..g.batch {
        let img = &mut dx[b * g.h * row_stride..(b + 1) * g.h * row_stride];
        for i in 0..oh {
            for j in 0..ow {
                let r = (b * oh + i) * ow + j;
                let src = &cols[r * q..(r + 1) * q];
                for p in 0..g.kh {
                    let dst = (i + p) * row_stride + j * g.c;
                    for (d, s) in img[dst..dst + seg]
                        .iter_mut()
                        .zip(&src[p * seg..(p + 1) * seg])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Non-overlapping `s×s` max pooling over `[batch, h, w, c]`. Returns the
/// pooled values and, per output, the flat input index of the winner. Ties
/// go to the first entry in row-major scan of the window.
pub fn maxpool(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / s, w / s);
    let n = batch * oh * ow * c;
    let mut out = vec![0.0; n];
    let mut arg = vec![0usize; n];
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for p in 0..s {
                        for q in 0..s {
                            let idx = ((b * h + i * s + p) * w + j * s + q) * c + ch;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + i) * ow + j) * c + ch;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        mm_acc(&a, &b, &mut out, m, k, n);
        let mut nt = vec![0.0; m * n];
        mm_nt_acc(&a, &transpose(&b, k, n), &mut nt, m, k, n);
        let mut tn = vec![0.0; m * n];
        mm_tn_acc(&transpose(&a, m, k), &b, &mut tn, k, m, n);
        for i in 0..m * n {
            assert!((out[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            h: 4,
            w: 5,
            c: 2,
            kh: 2,
            kw: 3,
        };
        let x: Vec<f64> = (0..2 * 4 * 5 * 2).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.patch_len())
            .map(|i| (i as f64 * 1.3).cos())
            .collect();
        let cols = im2col(&x, g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
