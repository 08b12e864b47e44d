//! Raw slice kernels shared by the tape ops.

use super::scalar::{matmul, Mat};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `(C, H, W)` image into a `(C·k·k, H·W)` patch matrix with
/// zero padding and stride 1.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.k, g.pad as isize);
    let plane = g.plane();
    for c in 0..g.in_ch {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // valid output columns for this horizontal shift
                let x0 = (-dx).clamp(0, w) as usize;
                let x1 = (w - dx).clamp(0, w) as usize;
                for y in 0..h {
                    let sy = y + dy;
                    let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.k, g.pad as isize);
    let plane = g.plane();
    for c in 0..g.in_ch {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).clamp(0, w) as usize;
                let x1 = (w - dx).clamp(0, w) as usize;
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let crow = &src[(y * w) as usize + x0..(y * w) as usize + x1];
                    let s0 = (sy * w) as usize + (x0 as isize + dx) as usize;
                    for (d, v) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(crow) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Output-channel count at or below which the direct kernel beats
/// im2col + GEMM.
const DIRECT_MAX_OUT: usize = 4;

/// Valid output range `[lo, hi)` along an axis of length `len` for a tap
/// offset `d` (source index = output index + d).
#[cfg(test)]
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let len = len as isize;
    ((-d).clamp(0, len) as usize, (len - d).clamp(0, len) as usize)
}

#[cfg(test)]
#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; summation order is fixed, so results are deterministic.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Input-channel count from which per-tap GEMMs on the padded layout beat
/// one im2col GEMM.
const SHIFTED_MIN_IN: usize = 8;

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    if g.out_ch <= DIRECT_MAX_OUT {
        padded_direct_forward(input, weight, bias, g)
    } else if g.in_ch >= SHIFTED_MIN_IN {
        shifted_forward(input, weight, bias, g)
    } else {
        gemm_forward(input, weight, bias, g)
    }
}

#[cfg(test)]
fn direct_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let (h, w, k, pad) = (g.height, g.width, g.k, g.pad as isize);
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let dst = &mut out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane];
            dst.fill(bias[co]);
            for c in 0..g.in_ch {
                let src = &input[(b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x1 <= x0 {
                            continue;
                        }
                        let wv = weight[((co * g.in_ch + c) * k + ky) * k + kx];
                        let sx0 = (x0 as isize + dx) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            axpy(
                                wv,
                                &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                                &mut dst[y * w + x0..y * w + x1],
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// im2col over the whole batch into one `(C·k·k, B·H·W)` matrix, then a
/// single GEMM.
fn gemm_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let rows = g.col_rows();
    let total = g.batch * plane;
    let cols = batch_im2col(input, g);
    let mut tmp = vec![T::zero(); g.out_ch * total];
    matmul(
        Mat::new(weight, g.out_ch, rows),
        Mat::new(&cols, rows, total),
        &mut tmp,
        false,
    );
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    for co in 0..g.out_ch {
        for b in 0..g.batch {
            let src = &tmp[co * total + b * plane..co * total + (b + 1) * plane];
            let dst = &mut out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + bias[co];
            }
        }
    }
    out
}

/// Patch matrix whose column `b·H·W + p` is the receptive field of pixel
/// `p` in sample `b`.
fn batch_im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let in_sz = g.in_ch * plane;
    let rows = g.col_rows();
    let total = g.batch * plane;
    let mut cols = vec![T::zero(); rows * total];
    let mut one = vec![T::zero(); rows * plane];
    for b in 0..g.batch {
        im2col(&input[b * in_sz..(b + 1) * in_sz], g, &mut one);
        for r in 0..rows {
            cols[r * total + b * plane..r * total + (b + 1) * plane]
                .copy_from_slice(&one[r * plane..(r + 1) * plane]);
        }
    }
    cols
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    if g.out_ch <= DIRECT_MAX_OUT {
        padded_direct_backward(input, weight, grad_out, g, need_input)
    } else if g.in_ch >= SHIFTED_MIN_IN {
        shifted_backward(input, weight, grad_out, g, need_input)
    } else {
        gemm_backward(input, weight, grad_out, g, need_input)
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let mut d_b = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for (co, db) in d_b.iter_mut().enumerate() {
            let sl = &grad_out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane];
            *db += sl.iter().copied().sum::<T>();
        }
    }
    d_b
}

#[cfg(test)]
fn direct_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.plane();
    let (h, w, k, pad) = (g.height, g.width, g.k, g.pad as isize);
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_in = need_input.then(|| vec![T::zero(); input.len()]);
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let go = &grad_out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane];
            for c in 0..g.in_ch {
                let src_range = (b * g.in_ch + c) * plane..(b * g.in_ch + c + 1) * plane;
                let src = &input[src_range.clone()];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        if x1 <= x0 {
                            continue;
                        }
                        let widx = ((co * g.in_ch + c) * k + ky) * k + kx;
                        let sx0 = (x0 as isize + dx) as usize;
                        let len = x1 - x0;
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            acc += dot(&go[y * w + x0..y * w + x1], &src[sy * w + sx0..sy * w + sx0 + len]);
                        }
                        d_w[widx] += acc;
                        if let Some(d_in) = d_in.as_mut() {
                            let wv = weight[widx];
                            let dst = &mut d_in[src_range.clone()];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                axpy(wv, &go[y * w + x0..y * w + x1], &mut dst[sy * w + sx0..sy * w + sx0 + len]);
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: d_in,
        weight: d_w,
        bias: bias_grad(grad_out, g),
    }
}

fn gemm_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.plane();
    let in_sz = g.in_ch * plane;
    let rows = g.col_rows();
    let total = g.batch * plane;
    // (C_out, B·H·W) view of the upstream gradient
    let mut go = vec![T::zero(); g.out_ch * total];
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            go[co * total + b * plane..co * total + (b + 1) * plane]
                .copy_from_slice(&grad_out[(b * g.out_ch + co) * plane..(b * g.out_ch + co + 1) * plane]);
        }
    }
    let cols = batch_im2col(input, g);
    let gmat = Mat::new(&go, g.out_ch, total);
    let mut d_w = vec![T::zero(); g.out_ch * rows];
    matmul(gmat, Mat::new(&cols, rows, total).t(), &mut d_w, false);
    drop(cols);
    let d_in = need_input.then(|| {
        let mut d_cols = vec![T::zero(); rows * total];
        matmul(Mat::new(weight, g.out_ch, rows).t(), gmat, &mut d_cols, false);
        let mut d_in = vec![T::zero(); g.batch * in_sz];
        let mut one = vec![T::zero(); rows * plane];
        for b in 0..g.batch {
            for r in 0..rows {
                one[r * plane..(r + 1) * plane]
                    .copy_from_slice(&d_cols[r * total + b * plane..r * total + (b + 1) * plane]);
            }
            col2im(&one, g, &mut d_in[b * in_sz..(b + 1) * in_sz]);
        }
        d_in
    });
    ConvGrads {
        input: d_in,
        weight: d_w,
        bias: bias_grad(grad_out, g),
    }
}

/// Zero-bordered `(C, B, H+2p, W+2p)` layout. Each channel is one row of
/// `n + slack` values, the slack keeping every tap offset in bounds. A tap
/// `(ky, kx)` of the convolution is then a contiguous view starting at
/// `ky·wp + kx`; output pixel `(y, x)` of sample `b` sits at column
/// `b·plane + y·wp + x` and the remaining columns are junk.
#[derive(Debug, Clone, Copy)]
struct Padded {
    wp: usize,
    plane: usize,
    n: usize,
    row: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let wp = g.width + 2 * g.pad;
        let plane = (g.height + 2 * g.pad) * wp;
        let n = g.batch * plane;
        let slack = (g.k - 1) * wp + g.k - 1;
        Padded { wp, plane, n, row: n + slack }
    }

    fn offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    /// Copies a `(B, C, H, W)` tensor into the padded layout.
    fn pad<T: Scalar>(&self, x: &[T], ch: usize, g: &ConvGeom) -> Vec<T> {
        let (h, w, p) = (g.height, g.width, g.pad);
        let mut out = vec![T::zero(); ch * self.row];
        for b in 0..g.batch {
            for c in 0..ch {
                let src = &x[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
                let base = c * self.row + b * self.plane + p * self.wp + p;
                for y in 0..h {
                    out[base + y * self.wp..base + y * self.wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        out
    }

    /// Inverse of [`Padded::pad`] for the interior cells.
    fn crop<T: Scalar>(&self, xp: &[T], ch: usize, g: &ConvGeom) -> Vec<T> {
        let (h, w, p) = (g.height, g.width, g.pad);
        let mut out = vec![T::zero(); g.batch * ch * h * w];
        for b in 0..g.batch {
            for c in 0..ch {
                let dst = &mut out[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
                let base = c * self.row + b * self.plane + p * self.wp + p;
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&xp[base + y * self.wp..base + y * self.wp + w]);
                }
            }
        }
        out
    }

    /// Gathers `(B, C_out, H, W)` outputs from `(C_out, n)` columns.
    fn gather_out<T: Scalar>(&self, ext: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
        let (h, w) = (g.height, g.width);
        let mut out = vec![T::zero(); g.batch * g.out_ch * h * w];
        for b in 0..g.batch {
            for co in 0..g.out_ch {
                let dst = &mut out[(b * g.out_ch + co) * h * w..(b * g.out_ch + co + 1) * h * w];
                let base = co * self.n + b * self.plane;
                for y in 0..h {
                    let src = &ext[base + y * self.wp..base + y * self.wp + w];
                    for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(src) {
                        *d = *s + bias[co];
                    }
                }
            }
        }
        out
    }

    /// Scatters a `(B, C_out, H, W)` gradient into `(C_out, n)` columns with
    /// zeros in the junk columns.
    fn scatter_out<T: Scalar>(&self, grad: &[T], g: &ConvGeom) -> Vec<T> {
        let (h, w) = (g.height, g.width);
        let mut ext = vec![T::zero(); g.out_ch * self.n];
        for b in 0..g.batch {
            for co in 0..g.out_ch {
                let src = &grad[(b * g.out_ch + co) * h * w..(b * g.out_ch + co + 1) * h * w];
                let base = co * self.n + b * self.plane;
                for y in 0..h {
                    ext[base + y * self.wp..base + y * self.wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        ext
    }
}

/// One GEMM per tap: `ext += W[:, :, ky, kx] · xp[:, off..off + n]`.
fn shifted_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let lay = Padded::new(g);
    let xp = lay.pad(input, g.in_ch, g);
    let kk = g.k * g.k;
    let mut ext = vec![T::zero(); g.out_ch * lay.n];
    for ky in 0..g.k {
        for kx in 0..g.k {
            let t = ky * g.k + kx;
            // SAFETY: the weight view is out_ch x in_ch inside `weight`; the
            // input view ends at `off + n <= row`; `ext` is out_ch x n.
            unsafe {
                T::gemm_raw(
                    g.out_ch,
                    g.in_ch,
                    lay.n,
                    T::one(),
                    weight.as_ptr().add(t),
                    (g.in_ch * kk) as isize,
                    kk as isize,
                    xp.as_ptr().add(lay.offset(ky, kx)),
                    lay.row as isize,
                    1,
                    T::one(),
                    ext.as_mut_ptr(),
                    lay.n as isize,
                    1,
                );
            }
        }
    }
    lay.gather_out(&ext, bias, g)
}

fn shifted_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let lay = Padded::new(g);
    let xp = lay.pad(input, g.in_ch, g);
    let go = lay.scatter_out(grad_out, g);
    let kk = g.k * g.k;
    let mut d_w = vec![T::zero(); weight.len()];
    for ky in 0..g.k {
        for kx in 0..g.k {
            // SAFETY: `xp` rows hold `off + n <= row` values; `go` is
            // out_ch x n; the output view strides stay inside `d_w`.
            unsafe {
                T::gemm_raw(
                    g.in_ch,
                    lay.n,
                    g.out_ch,
                    T::one(),
                    xp.as_ptr().add(lay.offset(ky, kx)),
                    lay.row as isize,
                    1,
                    go.as_ptr(),
                    1,
                    lay.n as isize,
                    T::zero(),
                    d_w.as_mut_ptr().add(ky * g.k + kx),
                    kk as isize,
                    (g.in_ch * kk) as isize,
                );
            }
        }
    }
    // the input gradient is a convolution of the output gradient with the
    // flipped, transposed kernel
    let d_in = need_input.then(|| {
        let mut flipped = vec![T::zero(); weight.len()];
        for co in 0..g.out_ch {
            for c in 0..g.in_ch {
                for t in 0..kk {
                    flipped[(c * g.out_ch + co) * kk + kk - 1 - t] = weight[(co * g.in_ch + c) * kk + t];
                }
            }
        }
        let tg = ConvGeom {
            in_ch: g.out_ch,
            out_ch: g.in_ch,
            ..*g
        };
        shifted_forward(grad_out, &flipped, &vec![T::zero(); g.in_ch], &tg)
    });
    ConvGrads {
        input: d_in,
        weight: d_w,
        bias: bias_grad(grad_out, g),
    }
}

/// `dst[q] += Σ_i w[i]·src[q + i]` with the tap loop unrolled.
#[inline]
fn row_corr<T: Scalar, const K: usize>(w: &[T], src: &[T], dst: &mut [T]) {
    let w: &[T; K] = w.try_into().expect("kernel width");
    let src = &src[..dst.len() + K - 1];
    for (q, d) in dst.iter_mut().enumerate() {
        let s: &[T; K] = src[q..q + K].try_into().expect("window");
        let mut acc = T::zero();
        for i in 0..K {
            acc += w[i] * s[i];
        }
        *d += acc;
    }
}

fn row_corr_any<T: Scalar>(w: &[T], src: &[T], dst: &mut [T]) {
    match w.len() {
        1 => row_corr::<T, 1>(w, src, dst),
        3 => row_corr::<T, 3>(w, src, dst),
        5 => row_corr::<T, 5>(w, src, dst),
        7 => row_corr::<T, 7>(w, src, dst),
        9 => row_corr::<T, 9>(w, src, dst),
        k => {
            for (q, d) in dst.iter_mut().enumerate() {
                *d += w.iter().zip(&src[q..q + k]).map(|(a, b)| *a * *b).sum::<T>();
            }
        }
    }
}

/// `out[i] += Σ_q g[q]·x[q + i]` for every tap `i`, eight lanes at a time
/// with a fixed reduction order.
#[inline]
fn row_xcorr<T: Scalar, const K: usize>(g: &[T], x: &[T], out: &mut [T]) {
    let mut acc = [[T::zero(); 8]; K];
    let body = g.len() / 8 * 8;
    for q in (0..body).step_by(8) {
        let gs: &[T; 8] = g[q..q + 8].try_into().expect("chunk");
        for (kx, a) in acc.iter_mut().enumerate() {
            let xs: &[T; 8] = x[q + kx..q + kx + 8].try_into().expect("chunk");
            for i in 0..8 {
                a[i] += gs[i] * xs[i];
            }
        }
    }
    for (kx, (o, a)) in out.iter_mut().zip(&acc).enumerate() {
        let mut tail = T::zero();
        for q in body..g.len() {
            tail += g[q] * x[q + kx];
        }
        *o += ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
    }
}

fn row_xcorr_any<T: Scalar>(g: &[T], x: &[T], out: &mut [T]) {
    match out.len() {
        1 => row_xcorr::<T, 1>(g, x, out),
        3 => row_xcorr::<T, 3>(g, x, out),
        5 => row_xcorr::<T, 5>(g, x, out),
        7 => row_xcorr::<T, 7>(g, x, out),
        9 => row_xcorr::<T, 9>(g, x, out),
        _ => {
            for (kx, o) in out.iter_mut().enumerate() {
                *o += dot(g, &x[kx..kx + g.len()]);
            }
        }
    }
}

/// Few output channels: each kernel row is a 1-D correlation over whole
/// padded rows, so the inner loop runs over `H·wp` contiguous values.
fn padded_direct_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let lay = Padded::new(g);
    let xp = lay.pad(input, g.in_ch, g);
    let k = g.k;
    let span = g.height * lay.wp;
    let mut ext = vec![T::zero(); g.out_ch * lay.n];
    for co in 0..g.out_ch {
        for b in 0..g.batch {
            let d0 = co * lay.n + b * lay.plane;
            let dst = &mut ext[d0..d0 + span];
            for c in 0..g.in_ch {
                for ky in 0..k {
                    let s0 = c * lay.row + b * lay.plane + ky * lay.wp;
                    let w0 = ((co * g.in_ch + c) * k + ky) * k;
                    row_corr_any(&weight[w0..w0 + k], &xp[s0..s0 + span + k - 1], dst);
                }
            }
        }
    }
    lay.gather_out(&ext, bias, g)
}

fn padded_direct_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let lay = Padded::new(g);
    let xp = lay.pad(input, g.in_ch, g);
    let k = g.k;
    let span = g.height * lay.wp;
    let go = lay.scatter_out(grad_out, g);
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_xp = need_input.then(|| vec![T::zero(); g.in_ch * lay.row]);
    // one gradient row with k-1 zeros on both sides
    let mut gop = vec![T::zero(); span + 2 * (k - 1)];
    let mut wr = vec![T::zero(); k];
    for co in 0..g.out_ch {
        for b in 0..g.batch {
            let g0 = co * lay.n + b * lay.plane;
            let grow = &go[g0..g0 + span];
            gop[k - 1..k - 1 + span].copy_from_slice(grow);
            for c in 0..g.in_ch {
                for ky in 0..k {
                    let s0 = c * lay.row + b * lay.plane + ky * lay.wp;
                    let w0 = ((co * g.in_ch + c) * k + ky) * k;
                    row_xcorr_any(grow, &xp[s0..s0 + span + k - 1], &mut d_w[w0..w0 + k]);
                    if let Some(d_xp) = d_xp.as_mut() {
                        for (i, r) in wr.iter_mut().enumerate() {
                            *r = weight[w0 + k - 1 - i];
                        }
                        row_corr_any(&wr, &gop, &mut d_xp[s0..s0 + span + k - 1]);
                    }
                }
            }
        }
    }
    ConvGrads {
        input: d_xp.map(|d| lay.crop(&d, g.in_ch, g)),
        weight: d_w,
        bias: bias_grad(grad_out, g),
    }
}

/// Depth-to-space: `out[b, c, r·h+dy, r·w+dx] = in[b, c·r²+dy·r+dx, h, w]`.
pub(crate) fn pixel_shuffle<T: Scalar>(input: &[T], b: usize, c_in: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); input.len()];
    for bi in 0..b {
        for c in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = c * r * r + dy * r + dx;
                    let src = &input[((bi * c_in + src_c) * h) * w..((bi * c_in + src_c + 1) * h) * w];
                    let dst_base = (bi * c_out + c) * oh * ow;
                    for y in 0..h {
                        let drow = dst_base + (y * r + dy) * ow + dx;
                        for (x, v) in src[y * w..(y + 1) * w].iter().enumerate() {
                            out[drow + x * r] = *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`] (space-to-depth); also its adjoint.
pub(crate) fn pixel_unshuffle<T: Scalar>(input: &[T], b: usize, c_out: usize, oh: usize, ow: usize, r: usize) -> Vec<T> {
    let (h, w) = (oh / r, ow / r);
    let c_in = c_out * r * r;
    let mut out = vec![T::zero(); input.len()];
    for bi in 0..b {
        for c in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = c * r * r + dy * r + dx;
                    let dst = ((bi * c_in + dst_c) * h) * w;
                    let src_base = (bi * c_out + c) * oh * ow;
                    for y in 0..h {
                        let srow = src_base + (y * r + dy) * ow + dx;
                        for x in 0..w {
                            out[dst + y * w + x] = input[srow + x * r];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sum pooling of every `(b, c)` plane over `n x n` blocks.
pub(crate) fn block_sums<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, n: usize) -> Vec<T> {
    let (ch, cw) = (h / n, w / n);
    let mut out = vec![T::zero(); planes * ch * cw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ch * cw..(p + 1) * ch * cw];
        for r in 0..h {
            let drow = &mut dst[(r / n) * cw..(r / n + 1) * cw];
            for (c, v) in src[r * w..(r + 1) * w].iter().enumerate() {
                drow[c / n] += *v;
            }
        }
    }
    out
}

/// Index of the block owning each fine cell, per plane.
#[inline]
pub(crate) fn block_index(p: usize, r: usize, c: usize, h: usize, w: usize, n: usize) -> usize {
    let (ch, cw) = (h / n, w / n);
    p * ch * cw + (r / n) * cw + c / n
}
