//! Raw compute kernels behind the graph ops: GEMM dispatch, im2col convolution,
//! average pooling. Parallel work is split into a fixed number of chunks with
//! disjoint outputs, and every per-element accumulation runs in a fixed
//! sequential order, so results are bit-identical for any worker count.

use super::Scalar;
use rayon::prelude::*;

/// Number of parallel chunks for batch-style loops. Fixed (not tied to the
/// worker-thread count) so chunk boundaries never change run to run.
pub(crate) const PAR_CHUNKS: usize = 8;

/// Below this m*k*n, GEMMs run as plain scalar loops: mul-then-add in
/// ascending k, the exact accumulation order of the naive-loop reference
/// implementations the tests compare against (vectorized kernels use FMA,
/// which rounds differently).
const SMALL_GEMM: usize = 1 << 14;

#[allow(clippy::too_many_arguments)]
fn gemm_naive<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            let slot = &mut c[i * n + j];
            *slot = if beta == T::zero() { acc } else { *slot * beta + acc };
        }
    }
}

/// C[m,n] = A[m,k] @ B[k,n] + beta * C, all row-major contiguous.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n <= SMALL_GEMM {
        return gemm_naive(m, k, n, a, k, 1, b, n, 1, beta, c);
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] @ B^T where `bt` is the row-major (n, k) matrix.
pub(crate) fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], bt: &[T], beta: T, c: &mut [T]) {
    debug_assert_eq!(bt.len(), n * k);
    if m * k * n <= SMALL_GEMM {
        return gemm_naive(m, k, n, a, k, 1, bt, 1, k, beta, c);
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            bt.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A^T @ B where `at` is the row-major (k, m) matrix.
pub(crate) fn gemm_at<T: Scalar>(m: usize, k: usize, n: usize, at: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert_eq!(at.len(), k * m);
    if m * k * n <= SMALL_GEMM {
        return gemm_naive(m, k, n, at, 1, m, b, n, 1, beta, c);
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            at.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_out_dim(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Lowers one image (C,H,W) into the (OH*OW, C*K*K) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    debug_assert_eq!(cols.len(), oh * ow * ckk);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * ckk;
            for c in 0..c_in {
                let plane = c * h * w;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = row + c * k * k + ki * k;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + k].fill(T::zero());
                        continue;
                    }
                    let src_row = plane + iy as usize * w;
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[dst + kj] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the (C,H,W) image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * ckk;
            for c in 0..c_in {
                let plane = c * h * w;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = row + c * k * k + ki * k;
                    let dst_row = plane + iy as usize * w;
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += cols[src + kj];
                        }
                    }
                }
            }
        }
    }
}

/// y(B,OC,OH,OW) = conv(x(B,C,H,W), w(OC,C,K,K)) + bias, cross-correlation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    let ohw = oh * ow;
    let mut y = vec![T::zero(); batch * oc * ohw];
    let x_sz = c_in * h * w;
    let y_sz = oc * ohw;
    y.par_chunks_mut(y_sz).enumerate().for_each(|(b, y_b)| {
        let mut cols = vec![T::zero(); ohw * ckk];
        im2col(&x[b * x_sz..(b + 1) * x_sz], c_in, h, w, k, stride, pad, &mut cols);
        // y_b (OC, OHW) = weight (OC, CKK) @ cols^T
        gemm_bt(oc, ckk, ohw, weight, &cols, T::zero(), y_b);
        if let Some(bias) = bias {
            for (o, y_plane) in y_b.chunks_mut(ohw).enumerate() {
                let bv = bias[o];
                for v in y_plane {
                    *v += bv;
                }
            }
        }
    });
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

/// Gradients of the convolution w.r.t. input, weight, and bias. The `want_*`
/// flags skip work for inputs that do not require gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
    want_bias: bool,
    dy: &[T],
) -> ConvGrads<T> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    let ohw = oh * ow;
    let x_sz = c_in * h * w;
    let y_sz = oc * ohw;

    let per = batch.div_ceil(PAR_CHUNKS.min(batch));
    let n_chunks = batch.div_ceil(per);

    struct Partial<T> {
        dw: Vec<T>,
        db: Vec<T>,
    }

    let mut dx = vec![T::zero(); batch * x_sz];
    let dx_chunks: Vec<&mut [T]> = dx.chunks_mut(per * x_sz).collect();
    let partials: Vec<Partial<T>> = dx_chunks
        .into_par_iter()
        .enumerate()
        .map(|(ci, dx_chunk)| {
            let b0 = ci * per;
            let bn = dx_chunk.len() / x_sz;
            let mut dw = vec![T::zero(); oc * ckk];
            let mut db = vec![T::zero(); oc];
            let mut cols = vec![T::zero(); ohw * ckk];
            let mut dcols = vec![T::zero(); ohw * ckk];
            for i in 0..bn {
                let b = b0 + i;
                let dy_b = &dy[b * y_sz..(b + 1) * y_sz];
                if want_dw {
                    im2col(&x[b * x_sz..(b + 1) * x_sz], c_in, h, w, k, stride, pad, &mut cols);
                    // dw (OC, CKK) += dy_b (OC, OHW) @ cols (OHW, CKK)
                    gemm(oc, ohw, ckk, dy_b, &cols, T::one(), &mut dw);
                }
                if want_bias {
                    for (o, dy_plane) in dy_b.chunks(ohw).enumerate() {
                        let mut s = T::zero();
                        for &v in dy_plane {
                            s += v;
                        }
                        db[o] += s;
                    }
                }
                if want_dx {
                    // dcols (OHW, CKK) = dy_b^T (OHW, OC) @ weight (OC, CKK)
                    gemm_at(ohw, oc, ckk, dy_b, weight, T::zero(), &mut dcols);
                    col2im_acc(&dcols, c_in, h, w, k, stride, pad, &mut dx_chunk[i * x_sz..(i + 1) * x_sz]);
                }
            }
            Partial { dw, db }
        })
        .collect();

    let mut dw = vec![T::zero(); oc * ckk];
    let mut db = vec![T::zero(); oc];
    debug_assert_eq!(partials.len(), n_chunks);
    for p in partials {
        for (acc, v) in dw.iter_mut().zip(&p.dw) {
            *acc += *v;
        }
        for (acc, v) in db.iter_mut().zip(&p.db) {
            *acc += *v;
        }
    }
    ConvGrads {
        dx,
        dw,
        db: if want_bias { Some(db) } else { None },
    }
}

/// Fixed pairwise-tree sum. Deterministic, and exact for windows of equal
/// values when the length is a power of two (so pooling a constant patch
/// reproduces the constant bit for bit).
fn pairwise_sum<T: Scalar>(vals: &mut [T]) -> T {
    let mut n = vals.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            vals[i] = vals[2 * i] + vals[2 * i + 1];
        }
        if n % 2 == 1 {
            vals[half] = vals[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    vals[0]
}

/// Average pooling with window k and stride s.
#[allow(clippy::too_many_arguments)]
pub(crate) fn avgpool2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> Vec<T> {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut y = vec![T::zero(); batch * c * oh * ow];
    let inv = T::one() / T::from_f64((k * k) as f64);
    let x_plane = h * w;
    let y_plane = oh * ow;
    y.par_chunks_mut(c * y_plane).enumerate().for_each(|(b, y_b)| {
        let mut window = vec![T::zero(); k * k];
        for ci in 0..c {
            let xp = &x[(b * c + ci) * x_plane..(b * c + ci + 1) * x_plane];
            let yp = &mut y_b[ci * y_plane..(ci + 1) * y_plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..k {
                        let row = (oy * s + ky) * w + ox * s;
                        window[ky * k..(ky + 1) * k].copy_from_slice(&xp[row..row + k]);
                    }
                    yp[oy * ow + ox] = pairwise_sum(&mut window) * inv;
                }
            }
        }
    });
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avgpool2d_backward<T: Scalar>(
    dy: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> Vec<T> {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut dx = vec![T::zero(); batch * c * h * w];
    let inv = T::one() / T::from_f64((k * k) as f64);
    let x_plane = h * w;
    let y_plane = oh * ow;
    dx.par_chunks_mut(c * x_plane).enumerate().for_each(|(b, dx_b)| {
        for ci in 0..c {
            let dyp = &dy[(b * c + ci) * y_plane..(b * c + ci + 1) * y_plane];
            let dxp = &mut dx_b[ci * x_plane..(ci + 1) * x_plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyp[oy * ow + ox] * inv;
                    for ky in 0..k {
                        let row = (oy * s + ky) * w + ox * s;
                        for kx in 0..k {
                            dxp[row + kx] += g;
                        }
                    }
                }
            }
        }
    });
    dx
}
