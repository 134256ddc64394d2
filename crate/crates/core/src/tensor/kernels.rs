//! Plain loops behind the differentiable ops. All kernels accumulate into
//! `out` in a fixed order so results are bit-reproducible.

use super::Real;

/// `out += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // four accumulators let the compiler vectorize without reassociating
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose<F: Real>(a: &[F], r: usize, c: usize, out: &mut [F]) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

/// Unfolds `x[c_in × t]` into `cols[(c_in·k) × t_out]` for a strided,
/// zero-padded 1-D convolution.
pub fn im2col<F: Real>(
    x: &[F],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); c_in * k * t_out];
    for c in 0..c_in {
        let xrow = &x[c * t..(c + 1) * t];
        for kk in 0..k {
            let crow = &mut cols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            for (o, slot) in crow.iter_mut().enumerate() {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    *slot = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im_acc<F: Real>(
    cols: &[F],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    dx: &mut [F],
) {
    for c in 0..c_in {
        for kk in 0..k {
            let crow = &cols[(c * k + kk) * t_out..(c * k + kk + 1) * t_out];
            for (o, &g) in crow.iter().enumerate() {
                let pos = (o * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t {
                    dx[c * t + pos as usize] += g;
                }
            }
        }
    }
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp<F: Real>(xs: impl Iterator<Item = F> + Clone) -> F {
    let m = xs.clone().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    let s: F = xs.map(|x| (x - m).exp()).sum();
    m + s.ln()
}
