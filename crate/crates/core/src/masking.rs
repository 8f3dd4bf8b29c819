//! Time-dependent binary supervision masks driven by saliency.
//!
//! For a schedule with `T` total timesteps and lower bound `l`, the mask at
//! discrete step `t` keeps position `(i, j)` when
//! `T * (A(i, j) + l) >= t`, ties inclusive. Every position therefore stays
//! supervised for at least `floor(l * T)` steps, and saturated positions
//! (`A + l >= 1`) for all of them.
//!
//! The threshold is evaluated in `f64` as the single expression
//! `T * (A + l)`, which makes the exhaustive counting identity
//! `sum_t mask_t = min(T, floor(T * (A + l)))` exact.

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Masking schedule: total timestep count and supervision lower bound.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskSchedule {
    pub total_steps: u32,
    pub lower_bound: f64,
}

impl MaskSchedule {
    /// `lower_bound` is accepted on the closed interval `[0, 1]`: 0 disables
    /// the floor (the ablation grid includes it) and 1 saturates the mask
    /// everywhere, which is the degenerate always-on schedule.
    pub fn new(total_steps: u32, lower_bound: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&lower_bound) || !lower_bound.is_finite() {
            return Err(Error::invalid(format!(
                "lower_bound must lie in [0, 1], got {lower_bound}"
            )));
        }
        Ok(MaskSchedule {
            total_steps,
            lower_bound,
        })
    }

    /// Maps continuous flow time `tau` in `[0, 1]` to the discrete step
    /// `ceil(tau * T)`, with `tau = 0` mapping to step 1.
    pub fn step_for_tau(&self, tau: f64) -> Result<u32> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
        }
        let t = (tau * self.total_steps as f64).ceil() as u32;
        Ok(t.clamp(1, self.total_steps))
    }
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule {
            total_steps: 1000,
            lower_bound: 0.3,
        }
    }
}

/// Binary mask for one timestep; entries are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask<S = f64> {
    pub mask: Tensor<S>,
    pub t: u32,
}

impl<S: Scalar> BinaryMask<S> {
    /// All-ones mask over an `H x W` extent; the degenerate unmasked case.
    pub fn ones(h: usize, w: usize, t: u32) -> Result<Self> {
        Ok(BinaryMask {
            mask: Tensor::full(vec![h, w], S::one())?,
            t,
        })
    }

    /// Fraction of active positions.
    pub fn active_fraction(&self) -> f64 {
        self.mask.mean().to_f64().expect("finite")
    }

    pub fn count_ones(&self) -> usize {
        self.mask
            .data()
            .iter()
            .filter(|&&v| v == S::one())
            .count()
    }
}

/// Builds the supervision mask for step `t` in `[1, T]`.
pub fn mask_at<S: Scalar>(
    saliency: &SaliencyMap<S>,
    sched: &MaskSchedule,
    t: u32,
) -> Result<BinaryMask<S>> {
    if t < 1 || t > sched.total_steps {
        return Err(Error::invalid(format!(
            "t = {t} outside the schedule range 1..={}",
            sched.total_steps
        )));
    }
    let t_f = t as f64;
    let total = sched.total_steps as f64;
    let l = sched.lower_bound;
    let mask = saliency.map.map(|a| {
        let threshold = total * (a.to_f64().expect("finite") + l);
        if threshold >= t_f {
            S::one()
        } else {
            S::zero()
        }
    })?;
    Ok(BinaryMask { mask, t })
}

/// Fraction of timesteps each position stays supervised: `min(1, A + l)`.
/// Matches exhaustive counting within `1/T`.
pub fn coverage_fraction<S: Scalar>(
    saliency: &SaliencyMap<S>,
    sched: &MaskSchedule,
) -> Result<Tensor<S>> {
    let l = S::from_f64_c(sched.lower_bound);
    saliency.map.map(|a| (a + l).min(S::one()))
}
