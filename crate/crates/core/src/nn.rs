//! Dense and 3D convolution kernels with hand-written backward passes.
//!
//! Activations are channel-major `[channels][d0][d1][d2]` f64 buffers for a
//! single sample. Convolutions lower to GEMM through im2col, processed in
//! slabs of output planes so the column buffer stays bounded even for
//! full-resolution stride-1 layers.

use alloc::vec;
use alloc::vec::Vec;

pub const KERNEL: usize = 3;
pub const KERNEL_VOLUME: usize = KERNEL * KERNEL * KERNEL;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Upper bound on im2col buffer length per slab.
const SLAB_BUDGET: usize = 1 << 20;

/// `C (m x n) = A (m x k) * B (k x n) + beta * C`, with optional transposes
/// of row-major `a` and `b`. `c` may be a column window of a wider matrix
/// with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operand too small");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output too small");
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Like [`gemm`] but the B operand is a column window `[col0, col0 + n)` of a
/// row-major matrix with row stride `ldb` (not transposed).
#[allow(clippy::too_many_arguments)]
fn gemm_b_window(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], ldb: usize, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= (k - 1) * ldb + n && c.len() >= m * n);
    // SAFETY: bounds checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            ldb as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m x n) += A (m x k) * B^T` where A and B are column windows of wider
/// row-major matrices (`lda`, `ldb` row strides) and B is `n x k`.
#[allow(clippy::too_many_arguments)]
fn gemm_nt_windows(m: usize, k: usize, n: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k && b.len() >= (n - 1) * ldb + k && c.len() >= m * n);
    // SAFETY: bounds checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            1,
            ldb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn leaky_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

/// Multiplies `grad` in place by the derivative of leaky ReLU at `pre`.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Output extent of a kernel-3 convolution.
pub fn conv_out_dim(d: usize, stride: usize, pad: usize) -> usize {
    (d + 2 * pad - KERNEL) / stride + 1
}

/// Geometry of a kernel-3 convolution from `in_dims` (the large side for a
/// strided layer) to `out_dims`.
///
/// A transposed convolution is described by the geometry of its adjoint
/// convolution: `cin`/`in_dims` are the transposed layer's *output*.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv(cin: usize, cout: usize, in_dims: [usize; 3], stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            in_dims,
            out_dims: in_dims.map(|d| conv_out_dim(d, stride, pad)),
            stride,
            pad,
        }
    }

    pub fn n_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn n_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the lowered matrix, `cin * 27`.
    pub fn col_rows(&self) -> usize {
        self.cin * KERNEL_VOLUME
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.col_rows()
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Output-plane ranges along axis 0 sized to the slab budget.
    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_plane = self.col_rows() * self.plane();
        let step = (SLAB_BUDGET / per_plane.max(1)).max(1);
        let d0 = self.out_dims[0];
        (0..d0).step_by(step).map(move |s| (s, (s + step).min(d0)))
    }

    /// Input index along `axis` touched by output `o` and kernel tap `k`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.in_dims[axis]).then_some(i as usize)
    }

    /// Lowers output planes `[p0, p1)` into a `(cin*27) x ((p1-p0)*plane)` matrix.
    pub fn im2col(&self, input: &[f64], p0: usize, p1: usize) -> Vec<f64> {
        let [_, d1, d2] = self.in_dims;
        let [_, o1, o2] = self.out_dims;
        let cols = (p1 - p0) * o1 * o2;
        let mut col = vec![0.0; self.col_rows() * cols];
        let n_in = self.n_in();
        for ci in 0..self.cin {
            let chan = &input[ci * n_in..(ci + 1) * n_in];
            for kd in 0..KERNEL {
                for kh in 0..KERNEL {
                    for kw in 0..KERNEL {
                        let row = ci * KERNEL_VOLUME + (kd * KERNEL + kh) * KERNEL + kw;
                        let dst = &mut col[row * cols..(row + 1) * cols];
                        for od in p0..p1 {
                            let Some(id) = self.src(0, od, kd) else { continue };
                            for oh in 0..o1 {
                                let Some(ih) = self.src(1, oh, kh) else { continue };
                                let base = (id * d1 + ih) * d2;
                                let out_base = ((od - p0) * o1 + oh) * o2;
                                for ow in 0..o2 {
                                    if let Some(iw) = self.src(2, ow, kw) {
                                        dst[out_base + ow] = chan[base + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `col` back onto `out`.
    pub fn col2im_add(&self, col: &[f64], p0: usize, p1: usize, out: &mut [f64]) {
        let [_, d1, d2] = self.in_dims;
        let [_, o1, o2] = self.out_dims;
        let cols = (p1 - p0) * o1 * o2;
        let n_in = self.n_in();
        for ci in 0..self.cin {
            let chan = &mut out[ci * n_in..(ci + 1) * n_in];
            for kd in 0..KERNEL {
                for kh in 0..KERNEL {
                    for kw in 0..KERNEL {
                        let row = ci * KERNEL_VOLUME + (kd * KERNEL + kh) * KERNEL + kw;
                        let src = &col[row * cols..(row + 1) * cols];
                        for od in p0..p1 {
                            let Some(id) = self.src(0, od, kd) else { continue };
                            for oh in 0..o1 {
                                let Some(ih) = self.src(1, oh, kh) else { continue };
                                let base = (id * d1 + ih) * d2;
                                let in_base = ((od - p0) * o1 + oh) * o2;
                                for ow in 0..o2 {
                                    if let Some(iw) = self.src(2, ow, kw) {
                                        chan[base + iw] += src[in_base + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Contiguous row pieces of a stride-1 convolution:
    /// `(tap, out_start, in_start, len)`.
    fn stride1_rows(&self) -> Vec<(usize, usize, usize, usize)> {
        debug_assert_eq!(self.stride, 1);
        let [d0, d1, d2] = self.in_dims;
        let [o0, o1, o2] = self.out_dims;
        let valid = |k: usize, o_len: usize, d_len: usize| {
            let lo = self.pad.saturating_sub(k);
            let hi = (d_len + self.pad).saturating_sub(k).min(o_len);
            (lo, hi.max(lo))
        };
        let mut rows = Vec::new();
        for kd in 0..KERNEL {
            let (a0, a1) = valid(kd, o0, d0);
            for kh in 0..KERNEL {
                let (b0, b1) = valid(kh, o1, d1);
                for kw in 0..KERNEL {
                    let (c0, c1) = valid(kw, o2, d2);
                    if c1 == c0 {
                        continue;
                    }
                    let tap = (kd * KERNEL + kh) * KERNEL + kw;
                    for od in a0..a1 {
                        let id = od + kd - self.pad;
                        for oh in b0..b1 {
                            let ih = oh + kh - self.pad;
                            let out_start = (od * o1 + oh) * o2 + c0;
                            let in_start = (id * d1 + ih) * d2 + c0 + kw - self.pad;
                            rows.push((tap, out_start, in_start, c1 - c0));
                        }
                    }
                }
            }
        }
        rows
    }

    fn direct_forward(&self, input: &[f64], weight: &[f64], out: &mut [f64]) {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let rows = self.stride1_rows();
        for co in 0..self.cout {
            let dst = &mut out[co * n_out..(co + 1) * n_out];
            for ci in 0..self.cin {
                let src = &input[ci * n_in..(ci + 1) * n_in];
                let w = &weight[(co * self.cin + ci) * KERNEL_VOLUME..][..KERNEL_VOLUME];
                for &(tap, o, i, len) in &rows {
                    let wv = w[tap];
                    for (d, s) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                        *d += wv * s;
                    }
                }
            }
        }
    }

    fn direct_backward(&self, input: &[f64], weight: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_in: Option<&mut [f64]>) {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let rows = self.stride1_rows();
        for co in 0..self.cout {
            let gy = &grad_out[co * n_out..(co + 1) * n_out];
            for ci in 0..self.cin {
                let src = &input[ci * n_in..(ci + 1) * n_in];
                let gw = &mut grad_w[(co * self.cin + ci) * KERNEL_VOLUME..][..KERNEL_VOLUME];
                for &(tap, o, i, len) in &rows {
                    gw[tap] += gy[o..o + len].iter().zip(&src[i..i + len]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if let Some(gi) = grad_in {
            for co in 0..self.cout {
                let gy = &grad_out[co * n_out..(co + 1) * n_out];
                for ci in 0..self.cin {
                    let dst = &mut gi[ci * n_in..(ci + 1) * n_in];
                    let w = &weight[(co * self.cin + ci) * KERNEL_VOLUME..][..KERNEL_VOLUME];
                    for &(tap, o, i, len) in &rows {
                        let wv = w[tap];
                        for (d, g) in dst[i..i + len].iter_mut().zip(&gy[o..o + len]) {
                            *d += wv * g;
                        }
                    }
                }
            }
        }
    }

    /// Convolution: `input` is `cin x in_dims`, result is `cout x out_dims`.
    pub fn conv_forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let n_out = self.n_out();
        let mut out = vec![0.0; self.cout * n_out];
        let slabs = if self.stride == 1 {
            self.direct_forward(input, weight, &mut out);
            None
        } else {
            Some(self.slabs())
        };
        for (p0, p1) in slabs.into_iter().flatten() {
            let col = self.im2col(input, p0, p1);
            let cols = (p1 - p0) * self.plane();
            let off = p0 * self.plane();
            gemm(self.cout, self.col_rows(), cols, weight, false, &col, false, 0.0, &mut out[off..], n_out);
        }
        for (co, b) in bias.iter().enumerate() {
            out[co * n_out..(co + 1) * n_out].iter_mut().for_each(|x| *x += b);
        }
        out
    }

    /// Backward of [`conv_forward`](Self::conv_forward). Accumulates weight and
    /// bias gradients; returns the input gradient when `need_input`.
    pub fn conv_backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let n_out = self.n_out();
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[co * n_out..(co + 1) * n_out].iter().sum::<f64>();
        }
        let mut grad_in = need_input.then(|| vec![0.0; self.cin * self.n_in()]);
        if self.stride == 1 {
            self.direct_backward(input, weight, grad_out, grad_w, grad_in.as_deref_mut());
            return grad_in;
        }
        for (p0, p1) in self.slabs() {
            let col = self.im2col(input, p0, p1);
            let cols = (p1 - p0) * self.plane();
            let off = p0 * self.plane();
            // dW += dY[:, slab] * col^T
            gemm_nt_windows(self.cout, cols, self.col_rows(), &grad_out[off..], n_out, &col, cols, grad_w);
            if let Some(gi) = grad_in.as_mut() {
                let mut dcol = vec![0.0; self.col_rows() * cols];
                gemm_b_window(self.col_rows(), self.cout, cols, weight, true, &grad_out[off..], n_out, 0.0, &mut dcol);
                self.col2im_add(&dcol, p0, p1, gi);
            }
        }
        grad_in
    }

    /// Transposed convolution: `input` is `cout x out_dims` (the small side),
    /// result is `cin x in_dims`. Weight layout matches [`conv_forward`].
    pub fn tconv_forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let n_in = self.n_in();
        let n_small = self.n_out();
        let mut out = vec![0.0; self.cin * n_in];
        for (p0, p1) in self.slabs() {
            let cols = (p1 - p0) * self.plane();
            let off = p0 * self.plane();
            let mut col = vec![0.0; self.col_rows() * cols];
            gemm_b_window(self.col_rows(), self.cout, cols, weight, true, &input[off..], n_small, 0.0, &mut col);
            self.col2im_add(&col, p0, p1, &mut out);
        }
        for (c, b) in bias.iter().enumerate() {
            out[c * n_in..(c + 1) * n_in].iter_mut().for_each(|x| *x += b);
        }
        out
    }

    /// Backward of [`tconv_forward`](Self::tconv_forward).
    pub fn tconv_backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let n_in = self.n_in();
        let n_small = self.n_out();
        for (c, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[c * n_in..(c + 1) * n_in].iter().sum::<f64>();
        }
        let mut grad_in = need_input.then(|| vec![0.0; self.cout * n_small]);
        for (p0, p1) in self.slabs() {
            let cols = (p1 - p0) * self.plane();
            let off = p0 * self.plane();
            let dcol = self.im2col(grad_out, p0, p1);
            // dW += X[:, slab] * dcol^T
            gemm_nt_windows(self.cout, cols, self.col_rows(), &input[off..], n_small, &dcol, cols, grad_w);
            if let Some(gi) = grad_in.as_mut() {
                let mut block = vec![0.0; self.cout * cols];
                gemm(self.cout, self.col_rows(), cols, weight, false, &dcol, false, 0.0, &mut block, cols);
                for co in 0..self.cout {
                    gi[co * n_small + off..co * n_small + off + cols].copy_from_slice(&block[co * cols..(co + 1) * cols]);
                }
            }
        }
        grad_in
    }
}

/// `y = W x + b` with `W` stored row-major `out x in`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates weight/bias gradients and adds `W^T dy` into `grad_in`.
pub fn linear_backward(x: &[f64], weight: &[f64], grad_out: &[f64], grad_w: &mut [f64], grad_b: &mut [f64], grad_in: Option<&mut [f64]>) {
    let n_in = x.len();
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        for (gw, v) in grad_w[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *gw += g * v;
        }
    }
    if let Some(gi) = grad_in {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, w) in gi.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *d += g * w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [i0, i1, i2] = g.in_dims;
        let [o0, o1, o2] = g.out_dims;
        let mut y = vec![0.0; g.cout * g.n_out()];
        for co in 0..g.cout {
            for a in 0..o0 {
                for bb in 0..o1 {
                    for c in 0..o2 {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let p = [
                                            (a * g.stride + kd) as isize - g.pad as isize,
                                            (bb * g.stride + kh) as isize - g.pad as isize,
                                            (c * g.stride + kw) as isize - g.pad as isize,
                                        ];
                                        if p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= i0 as isize || p[1] >= i1 as isize || p[2] >= i2 as isize {
                                            continue;
                                        }
                                        let xi = ci * g.n_in() + ((p[0] as usize * i1 + p[1] as usize) * i2 + p[2] as usize);
                                        let wi = co * g.col_rows() + ci * 27 + (kd * 3 + kh) * 3 + kw;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        y[co * g.n_out() + (a * o1 + bb) * o2 + c] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(dims, stride, pad) in &[([5, 6, 7], 2, 1), ([4, 4, 4], 1, 1), ([7, 3, 5], 2, 1)] {
            let g = ConvGeom::conv(3, 4, dims, stride, pad);
            let x = randv(g.cin * g.n_in(), &mut rng);
            let w = randv(g.weight_len(), &mut rng);
            let b = randv(g.cout, &mut rng);
            let y = g.conv_forward(&x, &w, &b);
            let r = naive_conv(&g, &x, &w, &b);
            for (p, q) in y.iter().zip(&r) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        // <conv(x), y> = <x, tconv(y)> for bias-free layers
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom::conv(3, 5, [7, 6, 5], 2, 1);
        let w = randv(g.weight_len(), &mut rng);
        let x = randv(g.cin * g.n_in(), &mut rng);
        let y = randv(g.cout * g.n_out(), &mut rng);
        let lhs = dot(&g.conv_forward(&x, &w, &vec![0.0; g.cout]), &y);
        let rhs = dot(&x, &g.tconv_forward(&y, &w, &vec![0.0; g.cin]));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1, 2] {
            conv_backward_fd(ConvGeom::conv(2, 3, [5, 4, 6], stride, 1));
        }
    }

    fn conv_backward_fd(g: ConvGeom) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randv(g.cin * g.n_in(), &mut rng);
        let w = randv(g.weight_len(), &mut rng);
        let b = randv(g.cout, &mut rng);
        let dy = randv(g.cout * g.n_out(), &mut rng);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = g.conv_backward(&x, &w, &dy, &mut gw, &mut gb, true).unwrap();
        let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&g.conv_forward(x, w, b), &dy);
        let h = 1e-6;
        for i in (0..w.len()).step_by(7) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7, "w[{i}]");
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7, "x[{i}]");
        }
        let total: Vec<f64> = (0..g.cout).map(|c| dy[c * g.n_out()..(c + 1) * g.n_out()].iter().sum()).collect();
        for (a, e) in gb.iter().zip(&total) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::conv(3, 2, [6, 5, 4], 2, 1);
        let x = randv(g.cout * g.n_out(), &mut rng);
        let w = randv(g.weight_len(), &mut rng);
        let b = randv(g.cin, &mut rng);
        let dy = randv(g.cin * g.n_in(), &mut rng);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = g.tconv_backward(&x, &w, &dy, &mut gw, &mut gb, true).unwrap();
        let f = |x: &[f64], w: &[f64]| dot(&g.tconv_forward(x, w, &b), &dy);
        let h = 1e-6;
        for i in (0..w.len()).step_by(5) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn slabbing_does_not_change_results() {
        // a layer big enough to need several slabs
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom::conv(40, 2, [40, 40, 40], 2, 1);
        assert!(g.slabs().count() > 1);
        let x = randv(g.cin * g.n_in(), &mut rng);
        let w = randv(g.weight_len(), &mut rng);
        let b = randv(g.cout, &mut rng);
        let y = g.conv_forward(&x, &w, &b);
        let r = naive_conv(&g, &x, &w, &b);
        for (p, q) in y.iter().zip(&r) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_backward_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randv(5, &mut rng);
        let w = randv(15, &mut rng);
        let b = randv(3, &mut rng);
        let dy = randv(3, &mut rng);
        let mut gw = vec![0.0; 15];
        let mut gb = vec![0.0; 3];
        let mut gx = vec![0.0; 5];
        linear_backward(&x, &w, &dy, &mut gw, &mut gb, Some(&mut gx));
        for i in 0..5 {
            let expect: f64 = (0..3).map(|o| dy[o] * w[o * 5 + i]).sum();
            assert!((gx[i] - expect).abs() < 1e-14);
        }
        assert_eq!(gb, dy);
        assert!((gw[7] - dy[1] * x[2]).abs() < 1e-15);
        let y = linear_forward(&x, &w, &b);
        assert!((y[2] - (b[2] + dot(&w[10..15], &x))).abs() < 1e-14);
    }
}
