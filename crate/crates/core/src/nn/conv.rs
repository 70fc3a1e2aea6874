//! 2D cross-correlation via im2col + gemm.

use super::tensor::{matmul, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], weight: [usize; 4], bias: [usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [_, ci, h, w] = input;
        let [co, wci, kh, kw] = weight;
        let err = |detail: String| Error::TensorShape { op: "conv2d", detail };
        if wci != ci {
            return Err(err(format!("input has {ci} channels, weight expects {wci}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(err(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if bias != [1, co, 1, 1] {
            return Err(err(format!("bias shape {bias:?} does not match {co} output channels")));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(err(format!("stride {stride} / padding {padding} invalid for {h}x{w} input")));
        }
        Ok(Self {
            in_channels: ci,
            out_channels: co,
            kernel: kh,
            stride,
            padding,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - p` is in bounds.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding as isize, self.in_w as isize);
        let off = kx as isize - p;
        // ox*s + off >= 0  and  ox*s + off < w
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let hi_excl = if w - off <= 0 { 0 } else { ((w - off) as usize).div_ceil(s) };
        (lo.min(self.out_w), hi_excl.min(self.out_w))
    }
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane_out = g.out_plane();
    for ci in 0..g.in_channels {
        let src = &image[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let dst = &mut dst_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.in_h as isize || lo >= hi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    let ix0 = (lo * s) as isize + kx as isize - p;
                    if s == 1 {
                        let ix0 = ix0 as usize;
                        dst[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src_row[ix0 as usize + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, Ho*Wo]` back into `[C, H, W]` (accumulating).
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane_out = g.out_plane();
    for ci in 0..g.in_channels {
        let dst = &mut image[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &src_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let ix0 = ((lo * s) as isize + kx as isize - p) as usize;
                    if s == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src[lo..hi].iter().enumerate() {
                            dst_row[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Writes the transpose of row-major `src: [rows, cols]` into `dst: [cols, rows]`.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const PANEL: usize = 8;
    let full = rows / PANEL * PANEL;
    for r0 in (0..full).step_by(PANEL) {
        let panel = &src[r0 * cols..(r0 + PANEL) * cols];
        for (c, d) in dst.chunks_exact_mut(rows).enumerate() {
            let d: &mut [T; PANEL] = (&mut d[r0..r0 + PANEL]).try_into().unwrap();
            for (r, v) in d.iter_mut().enumerate() {
                *v = panel[r * cols + c];
            }
        }
    }
    for r in full..rows {
        for (c, d) in dst.chunks_exact_mut(rows).enumerate() {
            d[r] = src[r * cols + c];
        }
    }
}

/// Unfolds a channels-last image `[H, W, C]` into `[Ho*Wo, k*k*C]`.
///
/// Each kernel row of a patch is one contiguous run of `k*C` values, which
/// makes this far cheaper than transposing the output of [`im2col`].
fn im2row_hwc<T: Scalar>(g: &ConvGeometry, hwc: &[T], rows: &mut [T]) {
    let (k, s, p, c) = (g.kernel, g.stride, g.padding, g.in_channels);
    for (pix, dst) in rows.chunks_exact_mut(g.patch_len()).enumerate() {
        let (y0, x0) = ((pix / g.out_w) * s, (pix % g.out_w) * s);
        // Taps inside the image: y0 + ky - p in [0, h), likewise for x.
        let (ky_lo, ky_hi) = (p.saturating_sub(y0), k.min(g.in_h + p - y0));
        let (kx_lo, kx_hi) = (p.saturating_sub(x0), k.min(g.in_w + p - x0));
        if ky_lo > 0 || kx_lo > 0 || ky_hi < k || kx_hi < k {
            dst.iter_mut().for_each(|v| *v = T::zero());
        }
        let run = (kx_hi - kx_lo) * c;
        for ky in ky_lo..ky_hi {
            let src = ((y0 + ky - p) * g.in_w + x0 + kx_lo - p) * c;
            let at = (ky * k + kx_lo) * c;
            dst[at..at + run].copy_from_slice(&hwc[src..src + run]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let batch = x.shape()[0];
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_plane();
    let mut out = Tensor::zeros([batch, g.out_channels, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * out_plane]
    };
    let w = MatRef::new(weight.data(), g.out_channels, g.patch_len());
    for b in 0..batch {
        let image = &x.data()[b * in_plane..(b + 1) * in_plane];
        let dst = &mut out.data_mut()[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        let patches = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols[..]
        };
        matmul(w, MatRef::new(patches, g.patch_len(), out_plane), dst, false);
        for (co, chunk) in dst.chunks_exact_mut(out_plane).enumerate() {
            let bv = bias.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// `(dx, dweight, dbias)`.
type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients `(dx, dweight, dbias)`; `dx` is skipped when `need_input` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let batch = x.shape()[0];
    let in_plane = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_plane();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(bias.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    // Weight gradient in `[co, ky, kx, ci]` order, matching `im2row_hwc`.
    let mut dw_hwc = vec![T::zero(); weight.numel()];
    let mut hwc = vec![T::zero(); in_plane];
    let mut rows = vec![T::zero(); g.patch_len() * out_plane];
    let w = MatRef::new(weight.data(), g.out_channels, g.patch_len());
    let mut dx_path = need_input.then(|| InputGrad::new(&g, weight));
    for b in 0..batch {
        let image = &x.data()[b * in_plane..(b + 1) * in_plane];
        let gy = &grad_out.data()[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        let gy_mat = MatRef::new(gy, g.out_channels, out_plane);
        for (co, chunk) in gy.chunks_exact(out_plane).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        // gemm packs a strided transposed view of long patch rows several
        // times slower than it multiplies an explicit row layout.
        transpose(image, g.in_channels, g.in_h * g.in_w, &mut hwc);
        im2row_hwc(&g, &hwc, &mut rows);
        matmul(gy_mat, MatRef::new(&rows, out_plane, g.patch_len()), &mut dw_hwc, true);
        if let (Some(dx), Some(path)) = (dx.as_mut(), dx_path.as_mut()) {
            let dst = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
            path.run(&g, w, gy, dst);
        }
    }
    let (k, ci) = (g.kernel, g.in_channels);
    for (co, src) in dw_hwc.chunks_exact(g.patch_len()).enumerate() {
        for t in 0..k * k {
            for c in 0..ci {
                dw.data_mut()[(co * ci + c) * k * k + t] = src[t * ci + c];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Input gradient of one image.
enum InputGrad<T> {
    /// `w^T * gy`, directly in input layout.
    Pointwise,
    /// Same-size stride-1 convolution: the input gradient is itself such a
    /// convolution of `gy` with the flipped, channel-transposed kernel.
    Flipped { geometry: ConvGeometry, weight: Vec<T>, cols: Vec<T> },
    /// `w^T * gy` into patch layout, scattered back with [`col2im`].
    Scatter { dcols: Vec<T> },
}

impl<T: Scalar> InputGrad<T> {
    fn new(g: &ConvGeometry, weight: &Tensor<T>) -> Self {
        let k = g.kernel;
        if g.is_pointwise() {
            InputGrad::Pointwise
        } else if g.stride == 1 && 2 * g.padding + 1 == k {
            let geometry = ConvGeometry {
                in_channels: g.out_channels,
                out_channels: g.in_channels,
                in_h: g.out_h,
                in_w: g.out_w,
                out_h: g.in_h,
                out_w: g.in_w,
                ..*g
            };
            let wd = weight.data();
            let mut flipped = vec![T::zero(); wd.len()];
            for co in 0..g.out_channels {
                for ci in 0..g.in_channels {
                    for t in 0..k * k {
                        flipped[(ci * g.out_channels + co) * k * k + t] = wd[(co * g.in_channels + ci) * k * k + (k * k - 1 - t)];
                    }
                }
            }
            let cols = vec![T::zero(); geometry.patch_len() * geometry.out_plane()];
            InputGrad::Flipped { geometry, weight: flipped, cols }
        } else {
            InputGrad::Scatter { dcols: vec![T::zero(); g.patch_len() * g.out_plane()] }
        }
    }

    fn run(&mut self, g: &ConvGeometry, w: MatRef<'_, T>, gy: &[T], dst: &mut [T]) {
        let gy_mat = MatRef::new(gy, g.out_channels, g.out_plane());
        match self {
            InputGrad::Pointwise => matmul(w.t(), gy_mat, dst, false),
            InputGrad::Flipped { geometry, weight, cols } => {
                im2col(geometry, gy, cols);
                let wf = MatRef::new(weight, geometry.out_channels, geometry.patch_len());
                matmul(wf, MatRef::new(cols, geometry.patch_len(), geometry.out_plane()), dst, false);
            }
            InputGrad::Scatter { dcols } => {
                matmul(w.t(), gy_mat, dcols, false);
                col2im(g, dcols, dst);
            }
        }
    }
}
