//! Planar CHW kernels with hand-written adjoints.

use alloc::vec;
use alloc::vec::Vec;

/// Convolution geometry and the offsets of its weights/bias in a flat
/// parameter vector. Kernels are square (`k` = 1 or 3) with "same" padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    /// Unfold `x` into a `(cin·k·k) × (h·w)` matrix of shifted copies.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        let (k, pad) = (self.k, self.k / 2);
        let zeros = |col: &mut Vec<f64>, len: usize| col.extend(core::iter::repeat(0.0).take(len));
        let mut col = Vec::with_capacity(self.cin * k * k * n);
        for i in 0..self.cin {
            let in_p = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let (x_lo, x_hi) = valid(kx, pad, w);
                    let (y_lo, y_hi) = valid(ky, pad, h);
                    zeros(&mut col, y_lo * w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        zeros(&mut col, x_lo);
                        col.extend_from_slice(&in_p[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad]);
                        zeros(&mut col, w - x_hi);
                    }
                    zeros(&mut col, (h - y_hi) * w);
                }
            }
        }
        col
    }

    /// Fold a column-matrix gradient back onto the input, accumulating.
    fn col2im(&self, col: &[f64], h: usize, w: usize, gx: &mut [f64]) {
        let n = h * w;
        let (k, pad) = (self.k, self.k / 2);
        for i in 0..self.cin {
            let g_p = &mut gx[i * n..(i + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((i * k + ky) * k + kx) * n..][..n];
                    let (x_lo, x_hi) = valid(kx, pad, w);
                    let (y_lo, y_hi) = valid(ky, pad, h);
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let dst = &mut g_p[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad];
                        for (a, &b) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        debug_assert_eq!(x.len(), self.cin * n);
        let kk = self.cin * self.k * self.k;
        let weights = &params[self.w_off..self.w_off + self.weight_len()];
        let bias = &params[self.b_off..self.b_off + self.cout];
        let unfolded;
        let col = if self.k == 1 {
            x
        } else {
            unfolded = self.im2col(x, h, w);
            &unfolded
        };
        let mut out = gemm_new(self.cout, kk, n, weights, false, col, false);
        for (o, &b) in bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Accumulate input and/or parameter gradients for upstream `gout`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        gout: &[f64],
        h: usize,
        w: usize,
        gx: Option<&mut [f64]>,
        gparams: Option<&mut [f64]>,
    ) {
        let n = h * w;
        let kk = self.cin * self.k * self.k;
        let weights = &params[self.w_off..self.w_off + self.weight_len()];
        if let Some(gp) = gparams {
            for o in 0..self.cout {
                gp[self.b_off + o] += gout[o * n..(o + 1) * n].iter().sum::<f64>();
            }
            let unfolded;
            let col = if self.k == 1 {
                x
            } else {
                unfolded = self.im2col(x, h, w);
                &unfolded
            };
            let gw = &mut gp[self.w_off..self.w_off + self.weight_len()];
            gemm(self.cout, n, kk, gout, false, col, true, gw);
        }
        if let Some(gx) = gx {
            if self.k == 1 {
                gemm(kk, self.cout, n, weights, true, gout, false, gx);
            } else {
                let gcol = gemm_new(kk, self.cout, n, weights, true, gout, false);
                self.col2im(&gcol, h, w, gx);
            }
        }
    }
}

/// `op(a) · op(b)` into a fresh buffer; see [`gemm`].
#[allow(clippy::too_many_arguments)]
pub fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 the kernel writes every element of the m×n
    // output without reading it, so the buffer is initialized afterwards.
    unsafe {
        raw_gemm(m, k, n, a, a_t, b, b_t, 0.0, c.as_mut_ptr());
        c.set_len(m * n);
    }
    c
}

/// `c += op(a) · op(b)` for row-major `op(a)`: m×k and `op(b)`: k×n, where
/// `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: `c` is uniquely borrowed and large enough.
    unsafe { raw_gemm(m, k, n, a, a_t, b, b_t, 1.0, c.as_mut_ptr()) }
}

#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: *mut f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe matrices inside the asserted lengths; the
    // caller guarantees `c` points at m·n writable elements.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1,
        );
    }
}

// Output indices whose tap `kk` lands inside [0, n).
#[inline]
fn valid(kk: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (n + pad).saturating_sub(kk).min(n);
    (lo, hi)
}

/// 2×2 mean pooling; `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[(2 * y) * w + 2 * xx];
                let b = src[(2 * y) * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize, gx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * src[y * ow + xx];
                dst[(2 * y) * w + 2 * xx] += v;
                dst[(2 * y) * w + 2 * xx + 1] += v;
                dst[(2 * y + 1) * w + 2 * xx] += v;
                dst[(2 * y + 1) * w + 2 * xx + 1] += v;
            }
        }
    }
}

/// Sampling taps along one axis for half-pixel-centered bilinear resizing.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel plane (half-pixel centers, edge clamp).
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`], accumulating into `gx`.
pub fn resize_bilinear_backward(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[y * ow + xx];
                let top = v * (1.0 - fy);
                let bot = v * fy;
                dst[y0 * w + x0] += top * (1.0 - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (1.0 - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// SiLU, `x · σ(x)`. Returns the activation and `σ(x)` for the backward pass.
pub fn silu(pre: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sig: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
    let act = pre.iter().zip(&sig).map(|(x, s)| x * s).collect();
    (act, sig)
}

/// Multiply `g` in place by the SiLU derivative at `pre`.
pub fn silu_backward(pre: &[f64], sig: &[f64], g: &mut [f64]) {
    for ((gv, &x), &s) in g.iter_mut().zip(pre).zip(sig) {
        *gv *= s * (1.0 + x * (1.0 - s));
    }
}
