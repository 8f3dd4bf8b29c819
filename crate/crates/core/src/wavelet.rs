//! Single- and multi-level 2D orthonormal Haar transform with exact inverse.
//!
//! Analysis uses the orthonormal filter pair `h_low = [1/sqrt(2), 1/sqrt(2)]`,
//! `h_high = [1/sqrt(2), -1/sqrt(2)]`, which reduces to a closed form per
//! 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! `HL` carries the horizontal differencing and `LH` the vertical one; the
//! orientation naming follows the filter application order and is
//! self-consistent with the inverse below. Every consumer in this crate sums
//! the three detail bands, so the labeling convention is observationally
//! irrelevant downstream.
//!
//! Odd spatial dimensions are rejected rather than padded: the block
//! transform on even dimensions is exact, and implicit padding would break
//! the energy-conservation contract. Callers crop or pad explicitly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The four subbands of one analysis level, each `C x H/2 x W/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet<S = f64> {
    pub ll: Tensor<S>,
    pub lh: Tensor<S>,
    pub hl: Tensor<S>,
    pub hh: Tensor<S>,
}

impl<S: Scalar> SubbandSet<S> {
    /// Validates that all four bands share one rank-3 shape.
    pub fn new(ll: Tensor<S>, lh: Tensor<S>, hl: Tensor<S>, hh: Tensor<S>) -> Result<Self> {
        for (name, band) in [("lh", &lh), ("hl", &hl), ("hh", &hh)] {
            if band.shape() != ll.shape() {
                return Err(Error::invalid(format!(
                    "subband {name} shape {:?} differs from ll shape {:?}",
                    band.shape(),
                    ll.shape()
                )));
            }
        }
        ll.dims_chw()?;
        Ok(SubbandSet { ll, lh, hl, hh })
    }

    /// Sum of squared coefficients over all four bands.
    pub fn energy(&self) -> S {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    /// Sum of squared coefficients over the three detail bands.
    pub fn detail_energy(&self) -> S {
        self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

/// Detail bands retained at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands<S = f64> {
    pub lh: Tensor<S>,
    pub hl: Tensor<S>,
    pub hh: Tensor<S>,
}

/// Multi-level decomposition: per-level detail triples, finest first, plus
/// the coarsest approximation band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<S = f64> {
    pub levels: Vec<DetailBands<S>>,
    pub top_ll: Tensor<S>,
}

impl<S: Scalar> WaveletPyramid<S> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Total number of stored coefficients; equals the input element count.
    pub fn coefficient_count(&self) -> usize {
        self.top_ll.len() + self.levels.iter().map(|l| 3 * l.lh.len()).sum::<usize>()
    }

    /// Sum of squared coefficients over the whole pyramid.
    pub fn total_energy(&self) -> S {
        let details = self
            .levels
            .iter()
            .fold(S::zero(), |acc, l| acc + l.lh.sum_sq() + l.hl.sum_sq() + l.hh.sum_sq());
        details + self.top_ll.sum_sq()
    }

    /// Sum of squared detail coefficients across all levels.
    pub fn detail_energy(&self) -> S {
        self.levels
            .iter()
            .fold(S::zero(), |acc, l| acc + l.lh.sum_sq() + l.hl.sum_sq() + l.hh.sum_sq())
    }
}

fn require_even(h: usize, w: usize, what: &str) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "{what} needs even spatial dims, got {h}x{w}; crop or pad explicitly"
        )));
    }
    Ok(())
}

/// Largest legal decomposition depth for an `H x W` extent.
pub fn max_depth(h: usize, w: usize) -> usize {
    (h.trailing_zeros().min(w.trailing_zeros())) as usize
}

/// Single-level orthonormal Haar analysis, applied independently per channel.
/// Accepts rank-2 (single channel) or rank-3 input; subbands are rank-3.
pub fn dwt2<S: Scalar>(src: &Tensor<S>) -> Result<SubbandSet<S>> {
    let (c, h, w) = src.dims_chw()?;
    require_even(h, w, "dwt2")?;
    let (oh, ow) = (h / 2, w / 2);
    let half = S::from_f64_c(0.5);
    let data = src.data();
    let n = c * oh * ow;
    let mut ll = Vec::with_capacity(n);
    let mut lh = Vec::with_capacity(n);
    let mut hl = Vec::with_capacity(n);
    let mut hh = Vec::with_capacity(n);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for by in 0..oh {
            for bx in 0..ow {
                let (y, x) = (2 * by, 2 * bx);
                let a = plane[y * w + x];
                let b = plane[y * w + x + 1];
                let cc = plane[(y + 1) * w + x];
                let d = plane[(y + 1) * w + x + 1];
                ll.push((a + b + cc + d) * half);
                hl.push((a - b + cc - d) * half);
                lh.push((a + b - cc - d) * half);
                hh.push((a - b - cc + d) * half);
            }
        }
    }
    let shape = vec![c, oh, ow];
    SubbandSet::new(
        Tensor::new(shape.clone(), ll)?,
        Tensor::new(shape.clone(), lh)?,
        Tensor::new(shape.clone(), hl)?,
        Tensor::new(shape, hh)?,
    )
}

/// Exact inverse of [`dwt2`]; returns a rank-3 `C x 2H x 2W` tensor.
pub fn idwt2<S: Scalar>(bands: &SubbandSet<S>) -> Result<Tensor<S>> {
    let (c, sh, sw) = bands.ll.dims_chw()?;
    for (name, band) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if band.shape() != bands.ll.shape() {
            return Err(Error::invalid(format!(
                "subband {name} shape {:?} differs from ll shape {:?}",
                band.shape(),
                bands.ll.shape()
            )));
        }
    }
    let (h, w) = (2 * sh, 2 * sw);
    let half = S::from_f64_c(0.5);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * sh * sw;
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for by in 0..sh {
            for bx in 0..sw {
                let i = base + by * sw + bx;
                let ll = bands.ll.data()[i];
                let lh = bands.lh.data()[i];
                let hl = bands.hl.data()[i];
                let hh = bands.hh.data()[i];
                let (y, x) = (2 * by, 2 * bx);
                plane[y * w + x] = (ll + hl + lh + hh) * half;
                plane[y * w + x + 1] = (ll - hl + lh - hh) * half;
                plane[(y + 1) * w + x] = (ll + hl - lh - hh) * half;
                plane[(y + 1) * w + x + 1] = (ll - hl - lh + hh) * half;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn check_depth<S: Scalar>(src: &Tensor<S>, depth: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = src.dims_chw()?;
    if depth == 0 {
        return Err(Error::invalid("decomposition depth must be >= 1"));
    }
    let legal = max_depth(h, w);
    if depth > legal {
        return Err(Error::invalid(format!(
            "depth {depth} not supported for {h}x{w}; maximum legal depth is {legal}"
        )));
    }
    Ok((c, h, w))
}

/// Multi-level analysis: [`dwt2`] applied recursively to successive
/// approximation bands, retaining each level's details.
pub fn dwt2_multi<S: Scalar>(src: &Tensor<S>, depth: usize) -> Result<WaveletPyramid<S>> {
    check_depth(src, depth)?;
    let mut levels = Vec::with_capacity(depth);
    let mut current = src.clone();
    for _ in 0..depth {
        let bands = dwt2(&current)?;
        current = bands.ll;
        levels.push(DetailBands {
            lh: bands.lh,
            hl: bands.hl,
            hh: bands.hh,
        });
    }
    Ok(WaveletPyramid {
        levels,
        top_ll: current,
    })
}

/// Exact inverse of [`dwt2_multi`].
pub fn idwt2_multi<S: Scalar>(pyramid: &WaveletPyramid<S>) -> Result<Tensor<S>> {
    if pyramid.levels.is_empty() {
        return Err(Error::invalid("pyramid has no levels"));
    }
    let mut current = pyramid.top_ll.clone();
    for details in pyramid.levels.iter().rev() {
        let bands = SubbandSet::new(
            current,
            details.lh.clone(),
            details.hl.clone(),
            details.hh.clone(),
        )?;
        current = idwt2(&bands)?;
    }
    Ok(current)
}

/// Full cascade keeping every level's complete subband set (the level's own
/// approximation included). Level `i` of the result is the analysis of the
/// level-`i` approximation, finest first.
pub fn dwt2_cascade<S: Scalar>(src: &Tensor<S>, depth: usize) -> Result<Vec<SubbandSet<S>>> {
    check_depth(src, depth)?;
    let mut out = Vec::with_capacity(depth);
    let mut current = src.clone();
    for _ in 0..depth {
        let bands = dwt2(&current)?;
        current = bands.ll.clone();
        out.push(bands);
    }
    Ok(out)
}
