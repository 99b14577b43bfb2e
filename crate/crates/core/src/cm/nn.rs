//! Minimal dense-layer kernels with explicit backward passes.
//!
//! Activations are single-sample `C × H × W` row-major buffers. Convolutions
//! are 3×3 with zero padding 1 and run as im2col + GEMM. Every kernel is
//! generic over [`Scalar`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `C = alpha * op(A) * op(B) + beta * C` on raw strided buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) memory.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C (m×n) = alpha * op(A) * op(B) + beta * C`, where `op(A)` is
/// `m×k` and `op(B)` is `k×n`; `trans_*` selects the transposed storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Single-sample activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Act<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dx = dy * silu'(x)` with `silu'(x) = s(x) (1 + x (1 − s(x)))`.
pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Output spatial size of a 3×3, pad-1 convolution.
pub fn conv_out_dim(d: usize, stride: usize) -> usize {
    (d + 2 - 3) / stride + 1
}

/// Output columns `[lo, hi)` whose stride-1 tap `kx` reads inside a row of
/// width `w`; the input column is `ox + kx − 1`.
fn valid_span(kx: usize, w: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), (w + 1 - kx).min(w))
}

/// 3×3, pad-1 im2col: returns `(C·9) × (Ho·Wo)` row-major.
pub fn im2col<T: Scalar>(x: &Act<T>, stride: usize) -> Vec<T> {
    let (ho, wo) = (conv_out_dim(x.h, stride), conv_out_dim(x.w, stride));
    let p = ho * wo;
    let mut cols = vec![T::zero(); x.c * 9 * p];
    for ci in 0..x.c {
        let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let (lo, hi) = valid_span(kx, x.w);
                        dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize) -> Act<T> {
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    let p = ho * wo;
    let mut out = Act::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let (lo, hi) = valid_span(kx, w);
                        for (d, &g) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[lo..hi]) {
                            *d += g;
                        }
                        continue;
                    }
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Parameter slice locations of a 3×3 convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    /// Returns the output and the im2col buffer needed by [`Conv::backward`].
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Act<T>) -> (Act<T>, Vec<T>) {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = (conv_out_dim(x.h, self.stride), conv_out_dim(x.w, self.stride));
        let p = ho * wo;
        let cols = im2col(x, self.stride);
        let mut out = Act::zeros(self.cout, ho, wo);
        let bias = &params[self.bias..self.bias + self.cout];
        for (co, &b) in bias.iter().enumerate() {
            out.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = b);
        }
        let wgt = &params[self.weight..self.weight + self.weight_len()];
        gemm(false, false, self.cout, p, self.cin * 9, T::one(), wgt, &cols, T::one(), &mut out.data);
        (out, cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cols: &[T],
        dy: &Act<T>,
        in_h: usize,
        in_w: usize,
        need_input: bool,
    ) -> Option<Act<T>> {
        let p = dy.h * dy.w;
        let k = self.cin * 9;
        {
            let gw = &mut grads[self.weight..self.weight + self.weight_len()];
            gemm(false, true, self.cout, k, p, T::one(), &dy.data, cols, T::one(), gw);
        }
        {
            let gb = &mut grads[self.bias..self.bias + self.cout];
            for (co, g) in gb.iter_mut().enumerate() {
                *g += dy.data[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        if !need_input {
            return None;
        }
        let wgt = &params[self.weight..self.weight + self.weight_len()];
        let mut dcols = vec![T::zero(); k * p];
        gemm(true, false, k, p, self.cout, T::one(), wgt, &dy.data, T::zero(), &mut dcols);
        Some(col2im(&dcols, self.cin, in_h, in_w, self.stride))
    }
}

/// Parameter slice locations of a dense layer `y = W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        let w = &params[self.weight..self.weight + self.din * self.dout];
        let b = &params[self.bias..self.bias + self.dout];
        (0..self.dout)
            .map(|o| {
                w[o * self.din..(o + 1) * self.din]
                    .iter()
                    .zip(x)
                    .map(|(&a, &v)| a * v)
                    .sum::<T>()
                    + b[o]
            })
            .collect()
    }

    pub fn backward<T: Scalar>(&self, params: &[T], grads: &mut [T], x: &[T], dy: &[T]) -> Vec<T> {
        let w = &params[self.weight..self.weight + self.din * self.dout];
        let mut dx = vec![T::zero(); self.din];
        for o in 0..self.dout {
            let g = dy[o];
            grads[self.bias + o] += g;
            let gw = &mut grads[self.weight + o * self.din..self.weight + (o + 1) * self.din];
            for (i, (gwi, &xi)) in gw.iter_mut().zip(x).enumerate() {
                *gwi += g * xi;
                dx[i] += g * w[o * self.din + i];
            }
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out.data[(c * h2 + y) * w2 + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                out.data[(c * h + y / 2) * w + xx / 2] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    out
}
