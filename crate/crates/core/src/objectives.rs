//! Flow-matching losses (plain and wavelet-masked) and the four-term
//! multi-scale autoencoder objective.
//!
//! The primary reduction for every squared-error term is the sum of squares;
//! a mean-per-active-element variant is derivable from the reported element
//! counts for cross-size comparability.

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::dwt2;

/// One flow-matching training sample: interpolant between a clean latent
/// and a noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<S = f64> {
    pub z0: Tensor<S>,
    pub eps: Tensor<S>,
    pub tau: f64,
    pub zt: Tensor<S>,
    /// Optional scalar conditioning value.
    pub cond: Option<f64>,
}

/// Builds the linear interpolant `zt = (1 - tau) * z0 + tau * eps`.
pub fn make_flow_sample<S: Scalar>(
    z0: Tensor<S>,
    eps: Tensor<S>,
    tau: f64,
) -> Result<FlowSample<S>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    let t = S::from_f64_c(tau);
    let one_minus = S::one() - t;
    let zt = z0.zip_map(&eps, |a, b| one_minus * a + t * b)?;
    Ok(FlowSample {
        z0,
        eps,
        tau,
        zt,
        cond: None,
    })
}

/// Loss weights for the four-term autoencoder objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VaeLossWeights {
    /// Scale-consistency weight.
    pub alpha: f64,
    /// KL regularization weight.
    pub beta: f64,
    /// Perceptual-term weight.
    pub lambda_p: f64,
}

impl VaeLossWeights {
    pub fn new(alpha: f64, beta: f64, lambda_p: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("lambda_p", lambda_p)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(VaeLossWeights {
            alpha,
            beta,
            lambda_p,
        })
    }
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        VaeLossWeights {
            alpha: 0.25,
            beta: 0.001,
            lambda_p: 0.05,
        }
    }
}

/// Total loss plus its named unweighted components.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    pub active_element_count: usize,
}

impl LossBreakdown {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }

    /// Sum reduced to a mean over the contributing elements, 0 when none.
    pub fn mean_per_active(&self) -> f64 {
        if self.active_element_count == 0 {
            0.0
        } else {
            self.total / self.active_element_count as f64
        }
    }
}

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Squared L2 norm of the velocity residual `(eps - z0) - v_pred`.
pub fn fm_loss<S: Scalar>(sample: &FlowSample<S>, v_pred: &Tensor<S>) -> Result<LossBreakdown> {
    check_same_shape(&sample.z0, v_pred, "fm_loss v_pred")?;
    let z0 = sample.z0.data();
    let eps = sample.eps.data();
    let v = v_pred.data();
    let mut acc = S::zero();
    for i in 0..v.len() {
        let r = (eps[i] - z0[i]) - v[i];
        acc = acc + r * r;
    }
    let total = acc.to_f64().expect("finite");
    Ok(LossBreakdown {
        total,
        components: vec![("fm", total)],
        active_element_count: v.len(),
    })
}

/// Masked squared L2 norm: positions with mask 0 contribute nothing. The
/// rank-2 spatial mask is broadcast across channels. With an all-ones mask
/// the accumulation order equals [`fm_loss`]'s, so the results are
/// bitwise identical.
pub fn masked_fm_loss<S: Scalar>(
    sample: &FlowSample<S>,
    v_pred: &Tensor<S>,
    mask: &BinaryMask<S>,
) -> Result<LossBreakdown> {
    check_same_shape(&sample.z0, v_pred, "masked_fm_loss v_pred")?;
    let (c, h, w) = v_pred.dims_chw()?;
    let (mh, mw) = mask.mask.dims2()?;
    if (mh, mw) != (h, w) {
        return Err(Error::invalid(format!(
            "mask extent {mh}x{mw} does not match sample extent {h}x{w}"
        )));
    }
    let z0 = sample.z0.data();
    let eps = sample.eps.data();
    let v = v_pred.data();
    let m = mask.mask.data();
    let mut acc = S::zero();
    let mut active = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if m[y * w + x] == S::one() {
                    let i = (ch * h + y) * w + x;
                    let r = (eps[i] - z0[i]) - v[i];
                    acc = acc + r * r;
                    active += 1;
                }
            }
        }
    }
    let total = acc.to_f64().expect("finite");
    Ok(LossBreakdown {
        total,
        components: vec![("masked_fm", total)],
        active_element_count: active,
    })
}

/// Gradient of the masked flow-matching loss with respect to the prediction,
/// sum convention: `-2 * mask * ((eps - z0) - v_pred)`.
pub fn masked_fm_loss_grad<S: Scalar>(
    sample: &FlowSample<S>,
    v_pred: &Tensor<S>,
    mask: &BinaryMask<S>,
) -> Result<Tensor<S>> {
    check_same_shape(&sample.z0, v_pred, "masked_fm_loss_grad v_pred")?;
    let (c, h, w) = v_pred.dims_chw()?;
    let (mh, mw) = mask.mask.dims2()?;
    if (mh, mw) != (h, w) {
        return Err(Error::invalid(format!(
            "mask extent {mh}x{mw} does not match sample extent {h}x{w}"
        )));
    }
    let z0 = sample.z0.data();
    let eps = sample.eps.data();
    let v = v_pred.data();
    let m = mask.mask.data();
    let minus_two = S::from_f64_c(-2.0);
    let mut out = vec![S::zero(); v.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if m[y * w + x] == S::one() {
                    let r = (eps[i] - z0[i]) - v[i];
                    out[i] = minus_two * r;
                }
            }
        }
    }
    Tensor::new(v_pred.shape().to_vec(), out)
}

/// KL divergence of a diagonal Gaussian `N(mu, exp(logvar))` from the
/// standard normal prior: `sum 0.5 * (mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_diag_gaussian<S: Scalar>(mu: &Tensor<S>, logvar: &Tensor<S>) -> Result<S> {
    check_same_shape(mu, logvar, "kl_diag_gaussian")?;
    let half = S::from_f64_c(0.5);
    let mut acc = S::zero();
    for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
        acc = acc + half * (m * m + lv.exp() - S::one() - lv);
    }
    Ok(acc)
}

/// Edge-feature distance standing in for a learned perceptual metric: the
/// mean over spatial positions (and channels) of the summed squared
/// differences of the three level-1 Haar detail bands. Zero iff the detail
/// bands agree; insensitive to constant offsets.
pub fn perceptual_proxy<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    check_same_shape(a, b, "perceptual_proxy")?;
    let ba = dwt2(a)?;
    let bb = dwt2(b)?;
    let n = ba.lh.len();
    let mut acc = S::zero();
    for i in 0..n {
        let dlh = ba.lh.data()[i] - bb.lh.data()[i];
        let dhl = ba.hl.data()[i] - bb.hl.data()[i];
        let dhh = ba.hh.data()[i] - bb.hh.data()[i];
        acc = acc + dlh * dlh + dhl * dhl + dhh * dhh;
    }
    Ok(acc / S::from_usize(n).expect("count fits scalar"))
}

/// Four-term autoencoder objective:
/// `|x_rec - x|^2 + alpha * |x_down_rec - x_down|^2 + beta * KL +
///  lambda_p * proxy(x_rec, x)`.
/// Components are reported unweighted; the total applies the weights.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<S: Scalar>(
    x: &Tensor<S>,
    x_rec: &Tensor<S>,
    x_down_rec: &Tensor<S>,
    x_down: &Tensor<S>,
    mu: &Tensor<S>,
    logvar: &Tensor<S>,
    w: &VaeLossWeights,
) -> Result<LossBreakdown> {
    check_same_shape(x, x_rec, "reconstruction term")?;
    check_same_shape(x_down, x_down_rec, "scale_consistency term")?;
    let recon = x_rec.sub(x)?.sum_sq().to_f64().expect("finite");
    let sc = x_down_rec
        .sub(x_down)?
        .sum_sq()
        .to_f64()
        .expect("finite");
    let kl = kl_diag_gaussian(mu, logvar)?.to_f64().expect("finite");
    let proxy = perceptual_proxy(x_rec, x)?.to_f64().expect("finite");
    let total = recon + w.alpha * sc + w.beta * kl + w.lambda_p * proxy;
    Ok(LossBreakdown {
        total,
        components: vec![
            ("recon", recon),
            ("scale_consistency", sc),
            ("kl", kl),
            ("perceptual", proxy),
        ],
        active_element_count: x.len(),
    })
}
