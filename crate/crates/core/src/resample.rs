//! 2x spatial resampling primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source coordinate and interpolation weights for one output index under
/// pixel-center alignment: output sample `i` reads continuous coordinate
/// `(i + 0.5) / 2 - 0.5`, clamped to `[0, n-1]`.
#[inline]
fn axis_taps(i: usize, n: usize) -> (usize, usize, f64) {
    let coord = (i as f64 + 0.5) / 2.0 - 0.5;
    let coord = coord.clamp(0.0, (n - 1) as f64);
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, coord - lo as f64)
}

/// Bilinear 2x upsampling with pixel-center alignment and edge clamping.
/// Accepts rank-2 (single channel) or rank-3 `C x H x W` input and preserves
/// the input rank.
pub fn bilinear_upsample2x<S: Scalar>(src: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = src.dims_chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let data = src.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = axis_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = axis_taps(ox, w);
                let v00 = plane[y0 * w + x0].to_f64().expect("finite");
                let v01 = plane[y0 * w + x1].to_f64().expect("finite");
                let v10 = plane[y1 * w + x0].to_f64().expect("finite");
                let v11 = plane[y1 * w + x1].to_f64().expect("finite");
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out.push(S::from_f64_c(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    let shape: Vec<usize> = if src.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Tensor::new(shape, out)
}

/// Adjoint of [`bilinear_upsample2x`]: scatters each output-space value back
/// to its source taps with the same weights. Used by analytic gradients.
pub fn bilinear_upsample2x_adjoint<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, oh, ow) = grad_out.dims_chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::invalid(format!(
            "upsample adjoint needs even spatial dims, got {oh}x{ow}"
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let data = grad_out.data();
    let mut acc = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &data[ch * oh * ow..(ch + 1) * oh * ow];
        let out_plane = &mut acc[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = axis_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = axis_taps(ox, w);
                let g = plane[oy * ow + ox].to_f64().expect("finite");
                out_plane[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                out_plane[y0 * w + x1] += g * fx * (1.0 - fy);
                out_plane[y1 * w + x0] += g * (1.0 - fx) * fy;
                out_plane[y1 * w + x1] += g * fx * fy;
            }
        }
    }
    let shape: Vec<usize> = if grad_out.rank() == 2 {
        vec![h, w]
    } else {
        vec![c, h, w]
    };
    Tensor::new(shape, acc.into_iter().map(S::from_f64_c).collect())
}

/// 2x2 average pooling. Requires even spatial dimensions.
pub fn avgpool2x<S: Scalar>(src: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = src.dims_chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "avgpool2x needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = src.data();
    let quarter = S::from_f64_c(0.25);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let s = plane[y * w + x]
                    + plane[y * w + x + 1]
                    + plane[(y + 1) * w + x]
                    + plane[(y + 1) * w + x + 1];
                out.push(s * quarter);
            }
        }
    }
    let shape: Vec<usize> = if src.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Tensor::new(shape, out)
}

/// Adjoint of [`avgpool2x`]: spreads each pooled value uniformly over its
/// 2x2 block (weight 1/4 per cell).
pub fn avgpool2x_adjoint<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, oh, ow) = grad_out.dims_chw()?;
    let (h, w) = (2 * oh, 2 * ow);
    let data = grad_out.data();
    let quarter = S::from_f64_c(0.25);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let plane = &data[ch * oh * ow..(ch + 1) * oh * ow];
        let out_plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = plane[oy * ow + ox] * quarter;
                let (y, x) = (2 * oy, 2 * ox);
                out_plane[y * w + x] = g;
                out_plane[y * w + x + 1] = g;
                out_plane[(y + 1) * w + x] = g;
                out_plane[(y + 1) * w + x + 1] = g;
            }
        }
    }
    let shape: Vec<usize> = if grad_out.rank() == 2 {
        vec![h, w]
    } else {
        vec![c, h, w]
    };
    Tensor::new(shape, out)
}
