//! Dense kernels shared by the autodiff graph and the cached decoder.
//!
//! Every loop has a fixed accumulation order, so results are reproducible
//! bit-for-bit on a given platform.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;

const LANES: usize = 16;

/// Dot product with a fixed lane split so the reduction vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[p * m + i], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Normalizes one row to zero mean, unit variance; returns `1/sqrt(var+eps)`.
pub fn normalize_row<T: Real>(x: &[T], out: &mut [T], eps: T) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    let rstd = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Geometry of a strided 3D correlation. 2D convolutions use a unit depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extents are `floor((in + 2·pad − k)/stride) + 1`; `None` if the
    /// kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] > padded || stride[a] == 0 {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(Self { channels, input, kernel, stride, pad, output })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        if i >= 0 && (i as usize) < self.input[axis] {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Unfolds `x[channels × input]` into `cols[(channels·K) × output]`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let [_, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let ov = self.output_volume();
        let iv = self.input_volume();
        for c in 0..self.channels {
            let xc = &x[c * iv..(c + 1) * iv];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        let dst = &mut cols[row * ov..(row + 1) * ov];
                        for z in 0..od {
                            let sz = self.source(0, z, a);
                            for y in 0..oh {
                                let sy = self.source(1, y, b);
                                let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                match (sz, sy) {
                                    (Some(sz), Some(sy)) => {
                                        let src = &xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                        for (x_, o) in out.iter_mut().enumerate() {
                                            *o = match self.source(2, x_, e) {
                                                Some(sx) => src[sx],
                                                None => T::zero(),
                                            };
                                        }
                                    }
                                    _ => out.fill(T::zero()),
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds `cols` back into `x`.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let [_, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let ov = self.output_volume();
        let iv = self.input_volume();
        for c in 0..self.channels {
            let xc = &mut x[c * iv..(c + 1) * iv];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        let src = &cols[row * ov..(row + 1) * ov];
                        for z in 0..od {
                            let Some(sz) = self.source(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(sy) = self.source(1, y, b) else { continue };
                                let dst = &mut xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                let col = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                for (x_, &v) in col.iter().enumerate() {
                                    if let Some(sx) = self.source(2, x_, e) {
                                        dst[sx] = dst[sx] + v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
