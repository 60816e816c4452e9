//! Inner-loop kernels on raw slices. Everything the graph ops lower to.
//!
//! Loop orders are chosen so the innermost loop runs over contiguous slices
//! and auto-vectorizes.

use crate::scalar::Scalar;

/// `C[m,n] += A[m,k] * B[k,n]`
pub fn matmul_nn_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `C[m,n] += A[m,k] * B[n,k]^T`
///
/// Eight independent partial sums per dot product so the reduction
/// vectorizes without reassociating a single float accumulator.
pub fn matmul_nt_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    const LANES: usize = 8;
    let chunks = k / LANES;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = [E::ZERO; LANES];
            for c in 0..chunks {
                let av = &a_row[c * LANES..(c + 1) * LANES];
                let bv = &b_row[c * LANES..(c + 1) * LANES];
                for l in 0..LANES {
                    acc[l] += av[l] * bv[l];
                }
            }
            let mut s = E::ZERO;
            for l in 0..LANES {
                s += acc[l];
            }
            for r in chunks * LANES..k {
                s += a_row[r] * b_row[r];
            }
            *o += s;
        }
    }
}

/// `C[m,n] += A[k,m]^T * B[k,n]`
pub fn matmul_tn_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
}

/// Output spatial extent of a convolution axis, or None if the kernel does
/// not fit the padded input.
pub fn conv_out_len(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds `x[c,h,w]` into `cols[(c*kh*kw), (oh*ow)]` with zero padding: one
/// row per kernel tap, one column per output position. The layout gives
/// every conv matmul (forward and both gradients) a long contiguous inner
/// loop.
#[allow(clippy::too_many_arguments)]
pub fn im2col_2d<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let p = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * p);
    let mut q = 0usize;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &mut cols[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad_h as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in out_row.iter_mut() {
                            *v = E::ZERO;
                        }
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad_w as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            line[ix as usize]
                        };
                    }
                }
                q += 1;
            }
        }
    }
}

/// Scatter-adds column gradients (same `[q, p]` layout) back onto the input.
#[allow(clippy::too_many_arguments)]
pub fn col2im_2d<E: Scalar>(
    dcols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let p = oh * ow;
    let mut q = 0usize;
    for ch in 0..c {
        for dy in 0..kh {
            for dx_k in 0..kw {
                let row = &dcols[q * p..(q + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line_off = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx_k) as isize - pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[line_off + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

/// Unfolds `x[c,t,h,w]` into `cols[(c*kt*kh*kw), (ot*oh*ow)]`, zero padded,
/// stride 1.
#[allow(clippy::too_many_arguments)]
pub fn im2col_3d<E: Scalar>(
    x: &[E],
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad: (usize, usize, usize),
    out: (usize, usize, usize),
    cols: &mut [E],
) {
    let (pt, ph, pw) = pad;
    let (ot, oh, ow) = out;
    let p = ot * oh * ow;
    debug_assert_eq!(cols.len(), c * kt * kh * kw * p);
    let mut q = 0usize;
    for ch in 0..c {
        let volume = &x[ch * t * h * w..(ch + 1) * t * h * w];
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = &mut cols[q * p..(q + 1) * p];
                    for oz in 0..ot {
                        let it = (oz + dt) as isize - pt as isize;
                        for oy in 0..oh {
                            let iy = (oy + dy) as isize - ph as isize;
                            let out_row = &mut row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if it < 0 || it >= t as isize || iy < 0 || iy >= h as isize {
                                for v in out_row.iter_mut() {
                                    *v = E::ZERO;
                                }
                                continue;
                            }
                            let line = &volume[(it as usize * h + iy as usize) * w
                                ..(it as usize * h + iy as usize + 1) * w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                let ix = (ox + dx) as isize - pw as isize;
                                *v = if ix < 0 || ix >= w as isize {
                                    E::ZERO
                                } else {
                                    line[ix as usize]
                                };
                            }
                        }
                    }
                    q += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn col2im_3d<E: Scalar>(
    dcols: &[E],
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad: (usize, usize, usize),
    out: (usize, usize, usize),
    dx: &mut [E],
) {
    let (pt, ph, pw) = pad;
    let (ot, oh, ow) = out;
    let p = ot * oh * ow;
    let mut q = 0usize;
    for ch in 0..c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx_k in 0..kw {
                    let row = &dcols[q * p..(q + 1) * p];
                    for oz in 0..ot {
                        let it = (oz + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line_off = ((ch * t + it as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox + dx_k) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx[line_off + ix as usize] += row[(oz * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                    q += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut out = [0.0f64; 2];
        matmul_nn_acc(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = crate::rng::Rng::new(1);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut nn = vec![0.0; m * n];
        matmul_nn_acc(&a, &b, m, k, n, &mut nn);

        // same product via nt with b transposed
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut nt = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, m, k, n, &mut nt);

        // and via tn with a transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut tn = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, m, k, n, &mut tn);

        for i in 0..m * n {
            assert!((nn[i] - nt[i]).abs() < 1e-12);
            assert!((nn[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_out_len_rejects_oversized_kernel() {
        assert_eq!(conv_out_len(4, 3, 0, 1), Some(2));
        assert_eq!(conv_out_len(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_len(2, 5, 0, 1), None);
        assert_eq!(conv_out_len(4, 3, 0, 2), Some(1));
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_contributions() {
        // For an all-ones dcols, col2im counts how many windows touch each
        // pixel; centre pixels of a 3x3 same conv are hit 9 times.
        let (c, h, w) = (1, 5, 5);
        let (oh, ow) = (5, 5);
        let q = c * 9;
        let dcols = vec![1.0f64; oh * ow * q];
        let mut dx = vec![0.0f64; c * h * w];
        col2im_2d(&dcols, c, h, w, 3, 3, 1, 1, 1, oh, ow, &mut dx);
        assert_eq!(dx[2 * w + 2], 9.0);
        assert_eq!(dx[0], 4.0); // corner
    }
}
