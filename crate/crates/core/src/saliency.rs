//! Wavelet-energy saliency maps over latent tensors.
//!
//! A latent `z` of shape `C x H x W` is decomposed by a single-level Haar
//! transform; the channel-mean squared detail energy forms an `H/2 x W/2`
//! energy map, which is bilinearly upsampled back to `H x W` and min-max
//! normalized into `[0, 1]`.

use crate::error::{Error, Result};
use crate::resample::bilinear_upsample2x;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::dwt2;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Normalized per-sample saliency map at full latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<S = f64> {
    /// Rank-2 `H x W` map with values in `[0, 1]`.
    pub map: Tensor<S>,
    /// Shape of the latent the map was derived from.
    pub source_shape: (usize, usize, usize),
    /// Normalization guard added to the min-max denominator.
    pub epsilon: f64,
}

/// Localized high-frequency energy of a latent: the channel mean of
/// `LH^2 + HL^2 + HH^2` from a single-level analysis. Rank-2 `H/2 x W/2`.
pub fn energy_map<S: Scalar>(z: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = z.dims_chw()?;
    let bands = dwt2(z)?;
    let (sh, sw) = (h / 2, w / 2);
    let plane = sh * sw;
    let inv_c = S::from_usize(c)
        .map(|v| S::one() / v)
        .ok_or_else(|| Error::invalid("channel count does not fit the scalar type"))?;
    let mut out = vec![S::zero(); plane];
    for ch in 0..c {
        for i in 0..plane {
            let lh = bands.lh.data()[ch * plane + i];
            let hl = bands.hl.data()[ch * plane + i];
            let hh = bands.hh.data()[ch * plane + i];
            out[i] = out[i] + lh * lh + hl * hl + hh * hh;
        }
    }
    for v in &mut out {
        *v = *v * inv_c;
    }
    Tensor::new(vec![sh, sw], out)
}

fn normalize_with_source<S: Scalar>(
    energy: &Tensor<S>,
    epsilon: f64,
    source_shape: (usize, usize, usize),
) -> Result<SaliencyMap<S>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "normalization epsilon must be > 0, got {epsilon}"
        )));
    }
    energy.dims2()?;
    let up = bilinear_upsample2x(energy)?;
    // Min-max of the upsampled field itself, so the minimum maps to exactly 0
    // and the maximum to (max-min)/(max-min+eps).
    let lo = up.min_val();
    let hi = up.max_val();
    let denom = hi - lo + S::from_f64_c(epsilon);
    let map = up.map(|v| (v - lo) / denom)?;
    Ok(SaliencyMap {
        map,
        source_shape,
        epsilon,
    })
}

/// Upsamples an energy map 2x and min-max normalizes it into `[0, 1]`.
/// A constant energy field normalizes to all zeros: with no detail energy
/// contrast there is no salient region.
pub fn normalize_saliency<S: Scalar>(energy: &Tensor<S>, epsilon: f64) -> Result<SaliencyMap<S>> {
    let (h, w) = energy.dims2()?;
    normalize_with_source(energy, epsilon, (1, 2 * h, 2 * w))
}

/// Full pipeline from a latent tensor: energy map, 2x bilinear upsample,
/// min-max normalization. The output map matches the latent's spatial shape.
pub fn saliency_from_latent<S: Scalar>(z: &Tensor<S>) -> Result<SaliencyMap<S>> {
    saliency_from_latent_eps(z, DEFAULT_EPSILON)
}

pub fn saliency_from_latent_eps<S: Scalar>(z: &Tensor<S>, epsilon: f64) -> Result<SaliencyMap<S>> {
    let (c, h, w) = z.dims_chw()?;
    let energy = energy_map(z)?;
    normalize_with_source(&energy, epsilon, (c, h, w))
}
