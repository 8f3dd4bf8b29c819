//! Deterministic gradient-descent loops wiring saliency, masking, the
//! objectives and the toy models, plus the synthetic dataset they train on.
//!
//! Everything downstream of a `(seed, config, dataset)` triple is
//! reproducible bit for bit: the parameter initialization, every sampling
//! draw, every logged number.

use crate::error::{Error, Result};
use crate::masking::{coverage_fraction, mask_at, BinaryMask, MaskSchedule};
use crate::models::{
    vae_backward, TinyVae, TinyVaeGrads, VelocityGrads, VelocityNet, DEFAULT_HIDDEN,
    DEFAULT_LATENT_CHANNELS,
};
use crate::objectives::{make_flow_sample, masked_fm_loss, masked_fm_loss_grad, VaeLossWeights};
use crate::rng::{gaussian_sample, Rng};
use crate::saliency::saliency_from_latent;
use crate::tensor::Tensor;

pub const DEFAULT_DATASET_N: usize = 8;
pub const DEFAULT_DATASET_SIZE: usize = 16;
/// Noise/time draws per sample when evaluating the per-region report.
const REPORT_DRAWS: usize = 4;

/// Which latent the supervision saliency is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencySource {
    /// The clean latent of the training sample (default).
    Z0,
    /// The noisy interpolant at the sampled time.
    Zt,
}

/// Loss reduction used for logging and gradient scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Raw sum of squares.
    Sum,
    /// Sum divided by the active element count (default; keeps the default
    /// learning rate stable independently of tensor size).
    Mean,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: MaskSchedule,
    pub masking: bool,
    pub saliency_source: SaliencySource,
    pub reduction: Reduction,
    pub hidden: usize,
    pub latent_channels: usize,
    pub vae_weights: VaeLossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            learning_rate: 1e-2,
            batch_size: 1,
            schedule: MaskSchedule::default(),
            masking: true,
            saliency_source: SaliencySource::Z0,
            reduction: Reduction::Mean,
            hidden: DEFAULT_HIDDEN,
            latent_channels: DEFAULT_LATENT_CHANNELS,
            vae_weights: VaeLossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.hidden == 0 || self.latent_channels == 0 {
            return Err(Error::invalid("model sizes must be >= 1"));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    pub masked_fraction: f64,
}

/// Full training trace plus the final per-region report when the saliency
/// split produced two non-empty regions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub final_report: Option<RegionReport>,
}

impl TrainLog {
    pub fn initial_total(&self) -> f64 {
        self.steps.first().map_or(0.0, |r| r.total)
    }

    pub fn final_total(&self) -> f64 {
        self.steps.last().map_or(0.0, |r| r.total)
    }

    pub fn component_series(&self, name: &str) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|r| {
                r.components
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| *v)
            })
            .collect()
    }

    /// CSV rendering: `step,total,<components...>,masked_fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total");
        if let Some(first) = self.steps.first() {
            for (name, _) in &first.components {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push_str(",masked_fraction\n");
        for r in &self.steps {
            out.push_str(&format!("{},{}", r.step, r.total));
            for (_, v) in &r.components {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.masked_fraction));
        }
        out
    }
}

fn validate_dataset(dataset: &[Tensor]) -> Result<(usize, usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset must be non-empty"));
    }
    let dims = dataset[0].dims_chw()?;
    for (i, t) in dataset.iter().enumerate() {
        if t.dims_chw()? != dims {
            return Err(Error::invalid(format!(
                "dataset sample {i} has shape {:?}, expected {:?}",
                t.shape(),
                dataset[0].shape()
            )));
        }
    }
    if dims.1 % 2 != 0 || dims.2 % 2 != 0 {
        return Err(Error::invalid("dataset spatial dims must be even"));
    }
    Ok(dims)
}

fn reduction_scale(reduction: Reduction, active: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => {
            if active == 0 {
                0.0
            } else {
                1.0 / active as f64
            }
        }
    }
}

/// Flow-matching training: per step, sample a clean latent, noise and a
/// uniform time, build the supervision mask from the configured saliency
/// source, and take one SGD step on the masked objective.
pub fn train_flow(config: &TrainConfig, dataset: &[Tensor]) -> Result<(VelocityNet, TrainLog)> {
    config.validate()?;
    let (c, h, w) = validate_dataset(dataset)?;
    let mut rng = Rng::new(config.seed);
    let mut net = VelocityNet::init(&mut rng, c, config.hidden)?;
    let inv_batch = 1.0 / config.batch_size as f64;
    let mut steps = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut acc: Option<VelocityGrads> = None;
        let mut total = 0.0;
        let mut masked_fraction = 0.0;
        for _ in 0..config.batch_size {
            let idx = rng.next_below(dataset.len());
            let z0 = dataset[idx].clone();
            let eps: Tensor = gaussian_sample(&mut rng, z0.shape().to_vec())?;
            let tau = rng.next_f64();
            let sample = make_flow_sample(z0, eps, tau)?;
            let t = config.schedule.step_for_tau(tau)?;
            let mask = if config.masking {
                let source = match config.saliency_source {
                    SaliencySource::Z0 => &sample.z0,
                    SaliencySource::Zt => &sample.zt,
                };
                let a = saliency_from_latent(source)?;
                mask_at(&a, &config.schedule, t)?
            } else {
                BinaryMask::ones(h, w, t)?
            };
            let v = net.forward(&sample.zt, tau, sample.cond)?;
            let lb = masked_fm_loss(&sample, &v, &mask)?;
            let scale = reduction_scale(config.reduction, lb.active_element_count);
            let upstream =
                masked_fm_loss_grad(&sample, &v, &mask)?.scale(scale * inv_batch)?;
            let (grads, _) = net.backward(&sample.zt, tau, sample.cond, &upstream)?;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.add_assign(&grads),
            }
            total += lb.total * scale * inv_batch;
            masked_fraction += mask.active_fraction() * inv_batch;
        }
        net.sgd_step(acc.as_ref().expect("batch_size >= 1"), config.learning_rate);
        steps.push(StepRecord {
            step,
            total,
            components: vec![("masked_fm", total)],
            masked_fraction,
        });
    }
    let final_report = region_report(&net, dataset, &config.schedule, config.seed).ok();
    Ok((
        net,
        TrainLog {
            steps,
            final_report,
        },
    ))
}

/// Autoencoder training on the four-term objective.
pub fn train_vae(config: &TrainConfig, dataset: &[Tensor]) -> Result<(TinyVae, TrainLog)> {
    config.validate()?;
    let (c, h, w) = validate_dataset(dataset)?;
    let mut rng = Rng::new(config.seed);
    let mut vae = TinyVae::init(&mut rng, c, config.latent_channels)?;
    let latent_shape = vec![config.latent_channels, h / 2, w / 2];
    let inv_batch = 1.0 / config.batch_size as f64;
    let mut steps = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut acc: Option<TinyVaeGrads> = None;
        let mut total = 0.0;
        let mut comps: Vec<(&'static str, f64)> = vec![
            ("recon", 0.0),
            ("scale_consistency", 0.0),
            ("kl", 0.0),
            ("perceptual", 0.0),
        ];
        for _ in 0..config.batch_size {
            let idx = rng.next_below(dataset.len());
            let x = &dataset[idx];
            let eta: Tensor = gaussian_sample(&mut rng, latent_shape.clone())?;
            let (lb, mut grads) = vae_backward(&vae, x, &eta, &config.vae_weights)?;
            let scale = reduction_scale(config.reduction, lb.active_element_count);
            grads.scale_assign(scale * inv_batch);
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.add_assign(&grads),
            }
            total += lb.total * scale * inv_batch;
            for (name, slot) in comps.iter_mut() {
                *slot += lb.component(name).unwrap_or(0.0) * scale * inv_batch;
            }
        }
        vae.sgd_step(acc.as_ref().expect("batch_size >= 1"), config.learning_rate);
        steps.push(StepRecord {
            step,
            total,
            components: comps,
            masked_fraction: 1.0,
        });
    }
    Ok((
        vae,
        TrainLog {
            steps,
            final_report: None,
        },
    ))
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Quadrant holding the high-frequency patch of one synthetic sample,
/// row-major: 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
pub type Quadrant = u8;

/// Desk-scale stand-in for an image corpus: smooth cosine fields with one
/// checkerboard quadrant of known location.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<Tensor>,
    pub quadrants: Vec<Quadrant>,
    pub size: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Row/column bounds of sample `i`'s textured quadrant.
    pub fn patch_bounds(&self, i: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = self.size / 2;
        let q = self.quadrants[i] as usize;
        let r0 = (q / 2) * half;
        let c0 = (q % 2) * half;
        (r0..r0 + half, c0..c0 + half)
    }
}

/// Each sample is a sum of two random low-order cosine modes plus a
/// unit-scale checkerboard patch in a random quadrant. Single channel,
/// `size x size`, `size` even and at least 16.
pub fn make_synthetic_dataset(rng: &mut Rng, n: usize, size: usize) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    if size < 16 || size % 2 != 0 {
        return Err(Error::invalid(format!(
            "sample size must be even and >= 16, got {size}"
        )));
    }
    let mut samples = Vec::with_capacity(n);
    let mut quadrants = Vec::with_capacity(n);
    let half = size / 2;
    for _ in 0..n {
        let mut field = vec![0.0f64; size * size];
        for _ in 0..2 {
            let amp = rng.uniform(0.5, 1.0);
            let kx = (1 + rng.next_below(2)) as f64;
            let ky = (1 + rng.next_below(2)) as f64;
            for y in 0..size {
                let fy = (std::f64::consts::PI * ky * (y as f64 + 0.5) / size as f64).cos();
                for x in 0..size {
                    let fx = (std::f64::consts::PI * kx * (x as f64 + 0.5) / size as f64).cos();
                    field[y * size + x] += amp * fy * fx;
                }
            }
        }
        let q = rng.next_below(4) as Quadrant;
        let amp = rng.uniform(1.0, 2.0);
        let r0 = (q as usize / 2) * half;
        let c0 = (q as usize % 2) * half;
        for y in r0..r0 + half {
            for x in c0..c0 + half {
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                field[y * size + x] += amp * sign;
            }
        }
        samples.push(Tensor::new(vec![1, size, size], field)?);
        quadrants.push(q);
    }
    Ok(SyntheticDataset {
        samples,
        quadrants,
        size,
    })
}

// ---------------------------------------------------------------------------
// Region report
// ---------------------------------------------------------------------------

/// Per-region evaluation of a trained velocity net: mean saliency, mean
/// squared velocity residual, and supervised-step statistics for the
/// high-saliency (`A >= 0.5`) versus low-saliency regions.
///
/// The empirical coverage treats each region as a single aggregate location
/// at its mean saliency and counts supervised steps by an exhaustive sweep
/// over `t = 1..=T`; the predicted counterpart is the closed form
/// `min(1, mean_A + l)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RegionReport {
    pub high_region_fraction: f64,
    pub mean_saliency_high: f64,
    pub mean_saliency_low: f64,
    pub mean_sq_residual_high: f64,
    pub mean_sq_residual_low: f64,
    pub empirical_coverage_high: f64,
    pub empirical_coverage_low: f64,
    pub empirical_step_ratio: f64,
    pub predicted_step_ratio: f64,
}

fn exhaustive_step_count(mean_a: f64, sched: &MaskSchedule) -> u64 {
    let total = sched.total_steps as f64;
    let mut count = 0u64;
    for t in 1..=sched.total_steps {
        if total * (mean_a + sched.lower_bound) >= t as f64 {
            count += 1;
        }
    }
    count
}

pub fn region_report(
    net: &VelocityNet,
    dataset: &[Tensor],
    sched: &MaskSchedule,
    seed: u64,
) -> Result<RegionReport> {
    let (c, h, w) = validate_dataset(dataset)?;
    if c != net.channels() {
        return Err(Error::invalid(format!(
            "dataset has {c} channels but the network expects {}",
            net.channels()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut sal_sum = [0.0f64; 2]; // [low, high]
    let mut sal_count = [0u64; 2];
    let mut res_sum = [0.0f64; 2];
    let mut res_count = [0u64; 2];
    for z0 in dataset {
        let a = saliency_from_latent(z0)?;
        let high: Vec<bool> = a.map.data().iter().map(|&v| v >= 0.5).collect();
        for (i, &av) in a.map.data().iter().enumerate() {
            let r = high[i] as usize;
            sal_sum[r] += av;
            sal_count[r] += 1;
        }
        for _ in 0..REPORT_DRAWS {
            let eps: Tensor = gaussian_sample(&mut rng, z0.shape().to_vec())?;
            let tau = rng.next_f64();
            let sample = make_flow_sample(z0.clone(), eps, tau)?;
            let v = net.forward(&sample.zt, tau, None)?;
            for ch in 0..c {
                for p in 0..h * w {
                    let i = ch * h * w + p;
                    let r = (sample.eps.data()[i] - sample.z0.data()[i]) - v.data()[i];
                    let reg = high[p] as usize;
                    res_sum[reg] += r * r;
                    res_count[reg] += 1;
                }
            }
        }
    }
    if sal_count[0] == 0 || sal_count[1] == 0 {
        return Err(Error::UndefinedMetric(
            "saliency split produced an empty region".into(),
        ));
    }
    let mean_a_low = sal_sum[0] / sal_count[0] as f64;
    let mean_a_high = sal_sum[1] / sal_count[1] as f64;
    let count_high = exhaustive_step_count(mean_a_high, sched);
    let count_low = exhaustive_step_count(mean_a_low, sched);
    if count_low == 0 {
        return Err(Error::UndefinedMetric(
            "low region receives no supervised steps; ratio undefined".into(),
        ));
    }
    let total = sched.total_steps as f64;
    let predicted =
        (mean_a_high + sched.lower_bound).min(1.0) / (mean_a_low + sched.lower_bound).min(1.0);
    Ok(RegionReport {
        high_region_fraction: sal_count[1] as f64 / (sal_count[0] + sal_count[1]) as f64,
        mean_saliency_high: mean_a_high,
        mean_saliency_low: mean_a_low,
        mean_sq_residual_high: res_sum[1] / res_count[1].max(1) as f64,
        mean_sq_residual_low: res_sum[0] / res_count[0].max(1) as f64,
        empirical_coverage_high: count_high as f64 / total,
        empirical_coverage_low: count_low as f64 / total,
        empirical_step_ratio: count_high as f64 / count_low as f64,
        predicted_step_ratio: predicted,
    })
}

/// Per-sample average of [`coverage_fraction`] over a dataset; exposed so
/// callers can audit the schedule against a whole corpus.
pub fn mean_coverage(dataset: &[Tensor], sched: &MaskSchedule) -> Result<f64> {
    validate_dataset(dataset)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for z0 in dataset {
        let a = saliency_from_latent(z0)?;
        let cf = coverage_fraction(&a, sched)?;
        acc += cf.sum();
        count += cf.len();
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// Demo persistence (consumed by the CLI)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoMode {
    Flow,
    Vae,
}

/// Everything needed to reproduce a training demo run, including the
/// synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DemoConfig {
    pub mode: DemoMode,
    pub train: TrainConfig,
    pub dataset_n: usize,
    pub dataset_size: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            mode: DemoMode::Flow,
            train: TrainConfig::default(),
            dataset_n: DEFAULT_DATASET_N,
            dataset_size: DEFAULT_DATASET_SIZE,
        }
    }
}

impl DemoConfig {
    /// The dataset is regenerated from the training seed, so a stored
    /// config fully determines the run.
    pub fn build_dataset(&self) -> Result<SyntheticDataset> {
        let mut rng = Rng::new(self.train.seed);
        make_synthetic_dataset(&mut rng, self.dataset_n, self.dataset_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::saliency_from_latent;

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..TrainConfig::default()
        }
    }

    fn small_dataset(seed: u64) -> SyntheticDataset {
        let mut rng = Rng::new(seed);
        make_synthetic_dataset(&mut rng, 4, 16).unwrap()
    }

    #[test]
    fn dataset_is_deterministic_and_validated() {
        let a = small_dataset(0);
        let b = small_dataset(0);
        assert_eq!(a, b);
        let mut rng = Rng::new(0);
        assert!(make_synthetic_dataset(&mut rng, 0, 16).is_err());
        assert!(make_synthetic_dataset(&mut rng, 2, 15).is_err());
        assert!(make_synthetic_dataset(&mut rng, 2, 8).is_err());
    }

    #[test]
    fn patch_quadrant_has_higher_wavelet_energy() {
        let ds = small_dataset(3);
        for i in 0..ds.len() {
            let e = crate::saliency::energy_map(&ds.samples[i]).unwrap();
            let (rows, cols) = ds.patch_bounds(i);
            let (eh, ew) = e.dims2().unwrap();
            let mut patch = (0.0, 0u32);
            let mut rest = (0.0, 0u32);
            for y in 0..eh {
                for x in 0..ew {
                    let v = e.data()[y * ew + x];
                    // Energy map lives at half resolution.
                    if rows.contains(&(2 * y)) && cols.contains(&(2 * x)) {
                        patch.0 += v;
                        patch.1 += 1;
                    } else {
                        rest.0 += v;
                        rest.1 += 1;
                    }
                }
            }
            assert!(
                patch.0 / patch.1 as f64 > rest.0 / rest.1 as f64,
                "sample {i}"
            );
        }
    }

    #[test]
    fn flow_training_is_deterministic() {
        let ds = small_dataset(1);
        let cfg = small_config(20);
        let (_, log1) = train_flow(&cfg, &ds.samples).unwrap();
        let (_, log2) = train_flow(&cfg, &ds.samples).unwrap();
        assert_eq!(log1, log2);
    }

    #[test]
    fn masking_off_equals_saturated_lower_bound() {
        let ds = small_dataset(2);
        let mut off = small_config(15);
        off.masking = false;
        let mut saturated = small_config(15);
        saturated.schedule = MaskSchedule::new(1000, 1.0).unwrap();
        let (_, log_off) = train_flow(&off, &ds.samples).unwrap();
        let (_, log_sat) = train_flow(&saturated, &ds.samples).unwrap();
        assert_eq!(log_off.steps, log_sat.steps);
        assert!(log_off.steps.iter().all(|r| r.masked_fraction == 1.0));
    }

    #[test]
    fn masked_fraction_is_logged_per_step() {
        let ds = small_dataset(4);
        let cfg = small_config(40);
        let (_, log) = train_flow(&cfg, &ds.samples).unwrap();
        let mut seen_partial = false;
        for r in &log.steps {
            assert!((0.0..=1.0).contains(&r.masked_fraction));
            if r.masked_fraction < 1.0 {
                seen_partial = true;
            }
        }
        assert!(seen_partial, "late timesteps must mask out some positions");
    }

    #[test]
    fn vae_training_is_deterministic_and_term_isolated() {
        let ds = small_dataset(5);
        let cfg = small_config(15);
        let (_, log1) = train_vae(&cfg, &ds.samples).unwrap();
        let (_, log2) = train_vae(&cfg, &ds.samples).unwrap();
        assert_eq!(log1, log2);

        // With all auxiliary weights zero the loss curve equals the pure
        // reconstruction series.
        let mut plain = small_config(15);
        plain.vae_weights = VaeLossWeights::new(0.0, 0.0, 0.0).unwrap();
        let (_, log) = train_vae(&plain, &ds.samples).unwrap();
        for r in &log.steps {
            let recon = r
                .components
                .iter()
                .find(|(n, _)| *n == "recon")
                .unwrap()
                .1;
            assert_eq!(r.total.to_bits(), recon.to_bits());
        }
    }

    #[test]
    fn large_beta_shrinks_latent_means() {
        // lr below the stability bound for the beta = 10^3 regime.
        let ds = small_dataset(6);
        let mut weak = small_config(300);
        weak.learning_rate = 1e-3;
        weak.vae_weights = VaeLossWeights::new(0.25, 0.001, 0.05).unwrap();
        let mut strong = small_config(300);
        strong.learning_rate = 1e-3;
        strong.vae_weights = VaeLossWeights::new(0.25, 1000.0, 0.05).unwrap();
        let (vae_weak, _) = train_vae(&weak, &ds.samples).unwrap();
        let (vae_strong, _) = train_vae(&strong, &ds.samples).unwrap();
        let mean_abs_mu = |vae: &TinyVae| -> f64 {
            let mut acc = 0.0;
            let mut n = 0usize;
            for x in &ds.samples {
                let (mu, _) = vae.encode(x).unwrap();
                acc += mu.data().iter().map(|v| v.abs()).sum::<f64>();
                n += mu.len();
            }
            acc / n as f64
        };
        assert!(mean_abs_mu(&vae_strong) < mean_abs_mu(&vae_weak));
    }

    #[test]
    fn single_step_does_not_increase_single_sample_loss() {
        // Empirical convexity check: lr = 1e-3, one sample, one step.
        let mut failures = 0;
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let net = VelocityNet::init(&mut rng, 1, 4).unwrap();
            let z0: Tensor = gaussian_sample(&mut rng, vec![1, 4, 4]).unwrap();
            let eps: Tensor = gaussian_sample(&mut rng, vec![1, 4, 4]).unwrap();
            let tau = rng.next_f64();
            let sample = make_flow_sample(z0, eps, tau).unwrap();
            let a = saliency_from_latent(&sample.z0).unwrap();
            let sched = MaskSchedule::default();
            let t = sched.step_for_tau(tau).unwrap();
            let mask = mask_at(&a, &sched, t).unwrap();

            let v = net.forward(&sample.zt, tau, None).unwrap();
            let before = masked_fm_loss(&sample, &v, &mask).unwrap();
            let scale = reduction_scale(Reduction::Mean, before.active_element_count);
            let upstream = masked_fm_loss_grad(&sample, &v, &mask)
                .unwrap()
                .scale(scale)
                .unwrap();
            let (grads, _) = net.backward(&sample.zt, tau, None, &upstream).unwrap();
            let mut stepped = net.clone();
            stepped.sgd_step(&grads, 1e-3);
            let v2 = stepped.forward(&sample.zt, tau, None).unwrap();
            let after = masked_fm_loss(&sample, &v2, &mask).unwrap();
            if after.total > before.total + 1e-12 {
                failures += 1;
            }
        }
        assert_eq!(failures, 0, "{failures} of 100 cases increased the loss");
    }

    #[test]
    fn region_report_zero_net_matches_raw_residual() {
        let ds = small_dataset(7);
        let net = VelocityNet::zeros(1, 4).unwrap();
        let sched = MaskSchedule::default();
        let report = region_report(&net, &ds.samples, &sched, 99).unwrap();

        // Recompute the expected mean of |eps - z0|^2 with the same stream.
        let mut rng = Rng::new(99);
        let mut sums = [0.0f64; 2];
        let mut counts = [0u64; 2];
        for z0 in &ds.samples {
            let a = saliency_from_latent(z0).unwrap();
            let high: Vec<bool> = a.map.data().iter().map(|&v| v >= 0.5).collect();
            for _ in 0..REPORT_DRAWS {
                let eps: Tensor = gaussian_sample(&mut rng, z0.shape().to_vec()).unwrap();
                let _tau = rng.next_f64();
                for (i, hi) in high.iter().enumerate() {
                    let r = eps.data()[i] - z0.data()[i];
                    let reg = *hi as usize;
                    sums[reg] += r * r;
                    counts[reg] += 1;
                }
            }
        }
        assert!(
            (report.mean_sq_residual_high - sums[1] / counts[1] as f64).abs() < 1e-12
        );
        assert!(
            (report.mean_sq_residual_low - sums[0] / counts[0] as f64).abs() < 1e-12
        );
    }

    #[test]
    fn region_report_ratio_matches_coverage_algebra() {
        let ds = small_dataset(8);
        let net = VelocityNet::zeros(1, 4).unwrap();
        let sched = MaskSchedule::default();
        let report = region_report(&net, &ds.samples, &sched, 0).unwrap();
        assert!(
            (report.empirical_step_ratio - report.predicted_step_ratio).abs()
                <= 2.0 / sched.total_steps as f64,
            "empirical {} vs predicted {}",
            report.empirical_step_ratio,
            report.predicted_step_ratio
        );
        assert!(report.mean_saliency_high > report.mean_saliency_low);
    }

    #[test]
    fn csv_shape() {
        let ds = small_dataset(9);
        let cfg = small_config(3);
        let (_, log) = train_flow(&cfg, &ds.samples).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,total,masked_fm,masked_fraction");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn rejects_ragged_dataset() {
        let a = Tensor::zeros(vec![1, 16, 16]).unwrap();
        let b = Tensor::zeros(vec![1, 16, 18]).unwrap();
        let cfg = small_config(1);
        assert!(train_flow(&cfg, &[a, b]).is_err());
    }
}
