//! Diffusion machinery: cosine noise schedule, forward noising, the
//! stochastic DDIM-style reverse step, the coarse-to-fine timestep schedule,
//! and multi-hypothesis sampling around any denoiser.

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use crate::numerics::rng::{randn, stream};
use crate::numerics::tensor::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("reverse step needs t' < t, got t={t}, t'={t_prime}")]
    BadStepPair { t: usize, t_prime: usize },
    #[error("iteration count {k} invalid for {t_total} timesteps (need 1 <= K <= T)")]
    InvalidIterationCount { k: usize, t_total: usize },
    #[error("hypothesis count must be at least 1")]
    NoHypotheses,
    #[error("beta[{index}] = {value} outside (0, 1)")]
    InvalidBeta { index: usize, value: f64 },
    #[error("non-finite value in sampled hypotheses")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("denoiser: {0}")]
    Denoiser(String),
}

/// Per-timestep noise tables. `alpha_bar` has T+1 entries with
/// `alpha_bar[0] = 1`, so `alpha_bar[t]` is the product of `1 - beta` up to
/// and including step t.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule: squared-cosine alpha-bar curve with offset 0.008,
    /// betas derived from consecutive ratios and clipped at 0.999. The tables
    /// are rebuilt from the clipped betas so carriage stays self-consistent.
    pub fn cosine(t_total: usize) -> DiffusionSchedule {
        assert!(t_total >= 1, "schedule needs at least one timestep");
        let s = 0.008;
        let f = |t: f64| {
            let x = (t / t_total as f64 + s) / (1.0 + s) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(t_total);
        let mut prev = 1.0;
        for t in 1..=t_total {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev).min(0.999);
            betas.push(beta);
            prev = bar;
        }
        DiffusionSchedule::from_betas(betas).expect("cosine betas are valid")
    }

    /// Build tables from explicit betas in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<DiffusionSchedule, DiffusionError> {
        assert!(!betas.is_empty(), "schedule needs at least one timestep");
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (index, &beta) in betas.iter().enumerate() {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(DiffusionError::InvalidBeta { index, value: beta });
            }
            alpha_bars.push(alpha_bars[index] * (1.0 - beta));
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// beta_t for t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// alpha_bar_t for t in [0, T]; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.t_max(),
            });
        }
        Ok(())
    }
}

/// Forward noising: y_t = sqrt(alpha_bar_t) y_0 + sqrt(1 - alpha_bar_t) eps.
/// The caller supplies the standard-normal draw for determinism.
pub fn q_sample(
    y0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t)?;
    let bar = schedule.alpha_bar(t);
    let signal = y0.scale(bar.sqrt());
    let noise = eps.scale((1.0 - bar).sqrt());
    Ok(signal.add(&noise)?)
}

/// Noise implied by a noisy pose and a clean estimate:
/// eps_t = (y_t - sqrt(alpha_bar_t) y0_hat) / sqrt(1 - alpha_bar_t).
pub fn epsilon_hat(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t)?;
    let bar = schedule.alpha_bar(t);
    let denom = (1.0 - bar).sqrt();
    let centered = y_t.sub(&y0_hat.scale(bar.sqrt()))?;
    Ok(centered.map(|v| v / denom))
}

/// Reverse-step noise scale:
/// sigma_t = sqrt((1 - ab_t') / (1 - ab_t)) * sqrt(1 - ab_t / ab_t').
/// Zero when t' = t; grows with the size of the jump.
pub fn sigma(t: usize, t_prime: usize, schedule: &DiffusionSchedule) -> Result<f64, DiffusionError> {
    schedule.check_step(t)?;
    schedule.check_step(t_prime)?;
    if t_prime > t {
        return Err(DiffusionError::BadStepPair { t, t_prime });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prime);
    let first = ((1.0 - ab_p) / (1.0 - ab_t)).sqrt();
    let second = (1.0 - ab_t / ab_p).sqrt();
    Ok(first * second)
}

/// Which radicand the reverse step uses for the direction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdimForm {
    /// 1 - alpha_bar_t' - sigma^2. Preserves the forward-process marginal
    /// variance; this is the form used everywhere.
    Standard,
    /// 1 + alpha_bar_t - sigma^2. Kept behind this switch for comparison
    /// runs; it does not preserve the forward marginal.
    Alternate,
}

/// One reverse step from t to t' given a clean estimate:
/// y_t' = sqrt(ab_t') y0_hat + eps_t sqrt(radicand) + sigma_t eps_draw.
pub fn ddim_step(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    t_prime: usize,
    eps_draw: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    ddim_step_with(DdimForm::Standard, y_t, y0_hat, t, t_prime, eps_draw, schedule)
}

pub fn ddim_step_with(
    form: DdimForm,
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    t_prime: usize,
    eps_draw: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t)?;
    schedule.check_step(t_prime)?;
    if t_prime >= t {
        return Err(DiffusionError::BadStepPair { t, t_prime });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prime);
    let sig = sigma(t, t_prime, schedule)?;
    let radicand = match form {
        DdimForm::Standard => 1.0 - ab_p - sig * sig,
        DdimForm::Alternate => 1.0 + ab_t - sig * sig,
    };
    #[cfg(debug_assertions)]
    if radicand < -1e-12 {
        eprintln!("ddim_step: clamping negative radicand {radicand:.3e} (form {form:?})");
    }
    let direction_scale = radicand.max(0.0).sqrt();
    let eps_t = epsilon_hat(y_t, y0_hat, t, schedule)?;
    let mean = y0_hat.scale(ab_p.sqrt());
    let direction = eps_t.scale(direction_scale);
    let noise = eps_draw.scale(sig);
    Ok(mean.add(&direction)?.add(&noise)?)
}

/// K coarse-to-fine (t, t') pairs with t_k = round(T (1 - k/K)); the final
/// pair carries t' = 0, meaning "emit the clean estimate".
pub fn iteration_schedule(
    t_total: usize,
    k: usize,
) -> Result<Vec<(usize, usize)>, DiffusionError> {
    if k < 1 || k > t_total {
        return Err(DiffusionError::InvalidIterationCount { k, t_total });
    }
    let ts: Vec<usize> = (0..k)
        .map(|step| (t_total as f64 * (1.0 - step as f64 / k as f64)).round() as usize)
        .collect();
    for w in ts.windows(2) {
        if w[1] >= w[0] {
            return Err(DiffusionError::InvalidIterationCount { k, t_total });
        }
    }
    if *ts.last().unwrap() < 1 {
        return Err(DiffusionError::InvalidIterationCount { k, t_total });
    }
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, if i + 1 < k { ts[i + 1] } else { 0 }))
        .collect())
}

/// Anything that can predict a clean pose from (noisy pose, 2D pose, t).
pub trait Denoise {
    fn denoise(&self, y_t: &Tensor, x: &Tensor, t: &[usize]) -> Result<Tensor, DiffusionError>;
}

/// Test stub that always answers with a fixed pose batch, used to validate
/// sampler identities independently of any trained model.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub target: Tensor,
}

impl Denoise for OracleDenoiser {
    fn denoise(&self, y_t: &Tensor, _x: &Tensor, _t: &[usize]) -> Result<Tensor, DiffusionError> {
        if y_t.shape() != self.target.shape() {
            return Err(DiffusionError::Denoiser(format!(
                "oracle target shape {:?} does not match input {:?}",
                self.target.shape(),
                y_t.shape()
            )));
        }
        Ok(self.target.clone())
    }
}

/// Hypothesis count, refinement iterations, and the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub hypotheses: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Final denoised hypotheses for one input: an H x J x 3 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    poses: Tensor,
}

impl HypothesisSet {
    pub fn new(poses: Tensor) -> Result<HypothesisSet, DiffusionError> {
        if poses.rank() != 3 || poses.shape()[2] != 3 {
            return Err(DiffusionError::Numerics(NumericsError::ShapeMismatch {
                op: "hypothesis_set",
                left: poses.shape().to_vec(),
                right: vec![0, 0, 3],
            }));
        }
        if !poses.is_finite() {
            return Err(DiffusionError::NonFinite);
        }
        Ok(HypothesisSet { poses })
    }

    pub fn count(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn pose(&self, h: usize) -> Tensor {
        self.poses.index_axis0(h).expect("hypothesis index")
    }

    pub fn poses(&self) -> &Tensor {
        &self.poses
    }
}

/// Draw H initial poses from N(0, I) per input, refine each through K
/// denoise/re-noise iterations, and return the H final estimates per input.
///
/// Hypotheses use independent RNG streams derived from (seed, hypothesis
/// index), so results do not depend on evaluation order.
pub fn sample<D: Denoise>(
    model: &D,
    x: &Tensor,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
) -> Result<Vec<HypothesisSet>, DiffusionError> {
    if x.rank() != 3 || x.shape()[2] != 2 {
        return Err(DiffusionError::Numerics(NumericsError::ShapeMismatch {
            op: "sample",
            left: x.shape().to_vec(),
            right: vec![0, 0, 2],
        }));
    }
    if config.hypotheses < 1 {
        return Err(DiffusionError::NoHypotheses);
    }
    let steps = iteration_schedule(schedule.t_max(), config.iterations)?;
    let (batch, joints) = (x.shape()[0], x.shape()[1]);

    let mut per_hypothesis: Vec<Tensor> = Vec::with_capacity(config.hypotheses);
    for h in 0..config.hypotheses {
        let mut rng = stream(config.seed, h as u64);
        let mut y = randn(&[batch, joints, 3], &mut rng);
        for &(t, t_next) in &steps {
            let t_vec = vec![t; batch];
            let y0_hat = model.denoise(&y, x, &t_vec)?;
            if t_next == 0 {
                y = y0_hat;
            } else {
                let eps_draw = randn(&[batch, joints, 3], &mut rng);
                y = ddim_step(&y, &y0_hat, t, t_next, &eps_draw, schedule)?;
            }
        }
        per_hypothesis.push(y);
    }

    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let poses: Vec<Tensor> = per_hypothesis
            .iter()
            .map(|t| t.index_axis0(i))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor> = poses.iter().collect();
        out.push(HypothesisSet::new(Tensor::stack0(&refs)?)?);
    }
    Ok(out)
}
