//! Dense loops shared by forward and backward passes.

/// `out += a (m×k) · b (k×n)`
///
/// Four rows of `a` against eight columns of `b` at a time, accumulators in
/// registers. Every output still sums its terms in ascending `p`.
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let out = &mut out[..m * n];
    let a = &a[..m * k];
    let b = &b[..k * n];
    let n8 = n - n % 8;
    let mut i = 0;
    while i + 4 <= m {
        for j in (0..n8).step_by(8) {
            let mut acc = [[0.0f64; 8]; 4];
            for r in 0..4 {
                acc[r].copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + 8]);
            }
            for p in 0..k {
                let bv: &[f64; 8] = b[p * n + j..p * n + j + 8].try_into().unwrap();
                for r in 0..4 {
                    let av = a[(i + r) * k + p];
                    for l in 0..8 {
                        acc[r][l] += av * bv[l];
                    }
                }
            }
            for r in 0..4 {
                out[(i + r) * n + j..(i + r) * n + j + 8].copy_from_slice(&acc[r]);
            }
        }
        i += 4;
    }
    // leftover rows and columns, plain loops in the same order
    for r in 0..m {
        let j0 = if r < i { n8 } else { 0 };
        if j0 == n {
            continue;
        }
        for p in 0..k {
            let av = a[r * k + p];
            let brow = &b[p * n + j0..(p + 1) * n];
            for (o, &bv) in out[r * n + j0..(r + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(&mut out, a, b, m, k, n);
    out
}

/// Dot product with eight interleaved partial sums, so the loop vectorizes
/// while the summation order stays fixed.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = fold8(&acc);
    for (a, b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// `out += a (m×n) · bᵀ` where `b` is `k×n`; result `m×k`.
///
/// Each output is a [`dot`]; two rows of `a` meet two rows of `b` per pass so
/// every load feeds two products.
pub(crate) fn gemm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    let out = &mut out[..m * k];
    let a = &a[..m * n];
    let b = &b[..k * n];
    if n == 0 {
        return;
    }
    let mut i = 0;
    while i + 2 <= m {
        let (a0, a1) = (&a[i * n..(i + 1) * n], &a[(i + 1) * n..(i + 2) * n]);
        let mut p = 0;
        while p + 2 <= k {
            let (b0, b1) = (&b[p * n..(p + 1) * n], &b[(p + 1) * n..(p + 2) * n]);
            let d = dot2x2(a0, a1, b0, b1);
            out[i * k + p] += d[0];
            out[i * k + p + 1] += d[1];
            out[(i + 1) * k + p] += d[2];
            out[(i + 1) * k + p + 1] += d[3];
            p += 2;
        }
        if p < k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(a0, brow);
            out[(i + 1) * k + p] += dot(a1, brow);
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * n..(i + 1) * n];
        for (o, brow) in out[i * k..(i + 1) * k].iter_mut().zip(b.chunks_exact(n)) {
            *o += dot(arow, brow);
        }
    }
}

#[inline]
fn fold8(acc: &[f64; 8]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Four dot products `[a0·b0, a0·b1, a1·b0, a1·b1]`, each summed exactly as
/// [`dot`] would.
#[inline]
fn dot2x2(a0: &[f64], a1: &[f64], b0: &[f64], b1: &[f64]) -> [f64; 4] {
    let n = a0.len();
    let full = n - n % 8;
    let mut acc = [[0.0f64; 8]; 4];
    for j in (0..full).step_by(8) {
        let x0: &[f64; 8] = a0[j..j + 8].try_into().unwrap();
        let x1: &[f64; 8] = a1[j..j + 8].try_into().unwrap();
        let y0: &[f64; 8] = b0[j..j + 8].try_into().unwrap();
        let y1: &[f64; 8] = b1[j..j + 8].try_into().unwrap();
        for l in 0..8 {
            acc[0][l] += x0[l] * y0[l];
            acc[1][l] += x0[l] * y1[l];
            acc[2][l] += x1[l] * y0[l];
            acc[3][l] += x1[l] * y1[l];
        }
    }
    let mut s = [
        fold8(&acc[0]),
        fold8(&acc[1]),
        fold8(&acc[2]),
        fold8(&acc[3]),
    ];
    for j in full..n {
        s[0] += a0[j] * b0[j];
        s[1] += a0[j] * b1[j];
        s[2] += a1[j] * b0[j];
        s[3] += a1[j] * b1[j];
    }
    s
}

/// `out += aᵀ · b` where `a` is `m×k`, `b` is `m×n`; result `k×n`.
///
/// Blocked like [`gemm_acc`]; each output sums over `i` in ascending order.
pub(crate) fn gemm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let out = &mut out[..k * n];
    let a = &a[..m * k];
    let b = &b[..m * n];
    let n8 = n - n % 8;
    let mut p = 0;
    while p + 4 <= k {
        for j in (0..n8).step_by(8) {
            let mut acc = [[0.0f64; 8]; 4];
            for r in 0..4 {
                acc[r].copy_from_slice(&out[(p + r) * n + j..(p + r) * n + j + 8]);
            }
            for i in 0..m {
                let bv: &[f64; 8] = b[i * n + j..i * n + j + 8].try_into().unwrap();
                let av: &[f64; 4] = a[i * k + p..i * k + p + 4].try_into().unwrap();
                for r in 0..4 {
                    for l in 0..8 {
                        acc[r][l] += av[r] * bv[l];
                    }
                }
            }
            for r in 0..4 {
                out[(p + r) * n + j..(p + r) * n + j + 8].copy_from_slice(&acc[r]);
            }
        }
        p += 4;
    }
    for q in 0..k {
        let j0 = if q < p { n8 } else { 0 };
        if j0 == n {
            continue;
        }
        let orow = &mut out[q * n + j0..(q + 1) * n];
        for i in 0..m {
            let av = a[i * k + q];
            for (o, &bv) in orow.iter_mut().zip(&b[i * n + j0..(i + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Lays out `k` shifted copies of a `len×cin` sequence so that a same-padded
/// 1D convolution becomes one matrix product with a `(k·cin)×cout` kernel.
pub(crate) fn im2col(x: &[f64], len: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let width = k * cin;
    let mut cols = vec![0.0; len * width];
    for t in 0..len {
        for j in 0..k {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let s = src as usize;
            cols[t * width + j * cin..t * width + (j + 1) * cin]
                .copy_from_slice(&x[s * cin..(s + 1) * cin]);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the sequence.
pub(crate) fn col2im_acc(dx: &mut [f64], dcols: &[f64], len: usize, cin: usize, k: usize) {
    let pad = k / 2;
    let width = k * cin;
    for t in 0..len {
        for j in 0..k {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let s = src as usize;
            let from = &dcols[t * width + j * cin..t * width + (j + 1) * cin];
            for (d, &g) in dx[s * cin..(s + 1) * cin].iter_mut().zip(from) {
                *d += g;
            }
        }
    }
}
