//! Plain numeric kernels shared by forward and backward passes.

use crate::error::{AutodiffError, Result};
use crate::float::{gemm, Float};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-sum-exp over the entries selected by `mask`.
pub fn masked_lse<T: Float>(row: &[T], mask: &[bool]) -> T {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum::<T>();
    max + sum.ln()
}

/// Returns the permuted copy of `data` and its shape.
pub fn permute<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    if nd == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    // Innermost output axis is copied in a tight loop.
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; nd];
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(AutodiffError::Config("conv2d stride must be at least 1".into()));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(AutodiffError::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{} (pad {pad})",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if pad >= kh.max(kw) && pad > 0 {
            return Err(AutodiffError::Config(format!(
                "conv2d padding {pad} must be smaller than the kernel extent"
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Fills `cols[patch_len × positions]` from one `[C, H, W]` image.
    pub fn im2col<T: Float>(&self, img: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an image gradient.
    pub fn col2im<T: Float>(&self, cols: &[T], img: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (pl, p) = (g.patch_len(), g.positions());
    let img_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); pl * p];
    for i in 0..g.n {
        g.im2col(&x[i * img_len..(i + 1) * img_len], &mut cols);
        let dst = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        gemm(g.o, pl, p, w, false, &cols, false, T::one(), dst);
    }
    out
}

/// Accumulates input, kernel and bias gradients for a conv2d.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (pl, p) = (g.patch_len(), g.positions());
    let img_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut cols = vec![T::zero(); pl * p];
    let mut dcols = vec![T::zero(); pl * p];
    for i in 0..g.n {
        let dy = &dout[i * out_len..(i + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            g.im2col(&x[i * img_len..(i + 1) * img_len], &mut cols);
            gemm(g.o, p, pl, dy, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(pl, g.o, p, w, true, dy, false, T::zero(), &mut dcols);
            g.col2im(&dcols, &mut dx[i * img_len..(i + 1) * img_len]);
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dy.chunks(p).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }
}
