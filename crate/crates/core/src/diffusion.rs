//! Noise schedule, forward diffusion, the DDIM reverse step and the
//! dual-guidance update.
//!
//! Steps are numbered `1..=T`; `ᾱ_0` is defined as 1 so the final reverse
//! step returns the clean prediction. The guided update adds
//! `λ·g_pose + γ·g_text` to the deterministic DDIM mean, where both
//! gradients are supplied as rasters by the guidance modules.

use crate::error::{Error, Result};
use crate::models::{Conditioning, NoisePredictor};
use crate::raster::Raster;
use crate::rng::{randn_raster, Rng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    eta: f64,
}

/// Offset of the squared-cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
const MAX_COSINE_BETA: f64 = 0.999;

fn check_range(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range [{beta_start}, {beta_end}] must satisfy 0 < start ≤ end < 1"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta {eta} must be ≥ 0")));
    }
    Ok(())
}

fn betas(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Vec<f64> {
    match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| {
                    let b = 1.0 - f(t as f64) / f(t as f64 - 1.0);
                    b.clamp(beta_start, MAX_COSINE_BETA)
                })
                .collect()
        }
    }
}

/// Builds a `steps`-long schedule. Linear betas interpolate the endpoints
/// inclusively; cosine betas follow the squared-cosine `ᾱ` curve, clipped
/// below by `beta_start`.
pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    eta: f64,
) -> Result<NoiseSchedule> {
    check_range(steps, beta_start, beta_end, eta)?;
    NoiseSchedule::from_betas(betas(steps, beta_start, beta_end, kind), eta)
}

/// Schedule of `steps` sampling steps taken evenly from a
/// `train_steps`-long training schedule, the last one at the fully noised end.
pub fn make_strided_schedule(
    steps: usize,
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    eta: f64,
) -> Result<NoiseSchedule> {
    check_range(steps, beta_start, beta_end, eta)?;
    if train_steps < steps {
        return Err(Error::InvalidArgument(format!(
            "train_steps {train_steps} < sampling steps {steps}"
        )));
    }
    let mut train_ab = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for b in betas(train_steps, beta_start, beta_end, kind) {
        acc *= 1.0 - b;
        train_ab.push(acc);
    }
    let mut prev = 1.0;
    let mut beta = Vec::with_capacity(steps);
    for k in 1..=steps {
        let ab = train_ab[k * train_steps / steps - 1];
        beta.push(1.0 - ab / prev);
        prev = ab;
    }
    NoiseSchedule::from_betas(beta, eta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>, eta: f64) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta {eta} must be ≥ 0")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            eta,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::from_betas(self.beta.clone(), eta)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `σ_t = η·√((1−ᾱ_{t−1})/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_{t−1})`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        self.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficient of the noise prediction in the deterministic DDIM mean
    /// (`∂μ/∂ε`).
    pub fn eps_coefficient(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        Ok(-(ab_prev / ab).sqrt() * (1.0 - ab).sqrt() + self.direction_coefficient(t)?)
    }

    fn direction_coefficient(&self, t: usize) -> Result<f64> {
        let sigma = self.sigma(t);
        let rem = 1.0 - self.alpha_bar(t - 1) - sigma * sigma;
        if rem < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "1 − ᾱ_(t−1) − σ_t² = {rem:e} < 0 at step {t} (eta {} too large)",
                self.eta
            )));
        }
        Ok(rem.max(0.0).sqrt())
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(z0: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-latent prediction `(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_z0(z_t: &Raster, eps_pred: &Raster, t: usize, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    z_t.axpby(inv, eps_pred, -(1.0 - ab).sqrt() * inv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub z_prev: Raster,
    pub z_t0: Raster,
}

/// Deterministic part of the reverse step: `(μ_θ, z_{t,0})`.
pub fn ddim_mean(
    z_t: &Raster,
    eps_pred: &Raster,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Raster, Raster)> {
    let z_t0 = predict_z0(z_t, eps_pred, t, sched)?;
    let dir = sched.direction_coefficient(t)?;
    let mean = z_t0.axpby(sched.alpha_bar(t - 1).sqrt(), eps_pred, dir)?;
    Ok((mean, z_t0))
}

fn add_noise(mean: Raster, t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Raster> {
    let sigma = sched.sigma(t);
    if sigma > 0.0 {
        let noise = randn_raster(mean.shape(), rng)?;
        mean.axpby(1.0, &noise, sigma)
    } else {
        Ok(mean)
    }
}

/// One DDIM step. Fresh noise is drawn only when `σ_t > 0`.
pub fn ddim_step(
    z_t: &Raster,
    eps_pred: &Raster,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<StepOutput> {
    z_t.ensure_same_shape(eps_pred)?;
    let (mean, z_t0) = ddim_mean(z_t, eps_pred, t, sched)?;
    Ok(StepOutput {
        z_prev: add_noise(mean, t, sched, rng)?,
        z_t0,
    })
}

/// Pose and text guidance strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub lambda_pose: f64,
    pub gamma_text: f64,
}

impl GuidanceWeights {
    pub fn new(lambda_pose: f64, gamma_text: f64) -> Result<Self> {
        if !(lambda_pose >= 0.0 && lambda_pose.is_finite() && gamma_text >= 0.0 && gamma_text.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance weights ({lambda_pose}, {gamma_text}) must be finite and ≥ 0"
            )));
        }
        Ok(Self {
            lambda_pose,
            gamma_text,
        })
    }

    pub fn off() -> Self {
        Self {
            lambda_pose: 0.0,
            gamma_text: 0.0,
        }
    }
}

/// Guided reverse step from a precomputed noise prediction:
/// `μ + λ·pose_grad + γ·text_grad + σ_t·ε`.
pub fn guided_update(
    z_t: &Raster,
    eps_pred: &Raster,
    t: usize,
    pose_grad: Option<&Raster>,
    text_grad: Option<&Raster>,
    w: GuidanceWeights,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<StepOutput> {
    z_t.ensure_same_shape(eps_pred)?;
    let (mut mean, z_t0) = ddim_mean(z_t, eps_pred, t, sched)?;
    for (grad, weight) in [(pose_grad, w.lambda_pose), (text_grad, w.gamma_text)] {
        if let Some(g) = grad {
            mean.ensure_same_shape(g)?;
            if weight != 0.0 {
                mean = mean.axpby(1.0, g, weight)?;
            }
        }
    }
    Ok(StepOutput {
        z_prev: add_noise(mean, t, sched, rng)?,
        z_t0,
    })
}

/// Queries `predictor` and applies [`guided_update`].
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    z_t: &Raster,
    t: usize,
    cond: &Conditioning,
    predictor: &dyn NoisePredictor,
    pose_grad: Option<&Raster>,
    text_grad: Option<&Raster>,
    w: GuidanceWeights,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let eps = predictor.predict(z_t, t, cond)?;
    guided_update(z_t, &eps, t, pose_grad, text_grad, w, sched, rng)
}

/// Supplies guidance gradients at each reverse step.
pub trait GuidanceSource {
    /// Returns `(pose_grad, text_grad)` for step `t` given the current
    /// latent and the predictor's noise estimate.
    fn gradients(
        &mut self,
        z_t: &Raster,
        t: usize,
        eps_pred: &Raster,
    ) -> Result<(Option<Raster>, Option<Raster>)>;
}

/// No guidance.
pub struct Unguided;

impl GuidanceSource for Unguided {
    fn gradients(&mut self, _: &Raster, _: usize, _: &Raster) -> Result<(Option<Raster>, Option<Raster>)> {
        Ok((None, None))
    }
}

/// Runs the full reverse trajectory from `z_T`, returning the final latent.
/// `on_step` observes `(t, z_t0, z_{t−1})` after every step.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    z_big_t: &Raster,
    cond: &Conditioning,
    predictor: &dyn NoisePredictor,
    guidance: &mut dyn GuidanceSource,
    w: GuidanceWeights,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, &Raster, &Raster),
) -> Result<Raster> {
    let mut z = z_big_t.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = predictor.predict(&z, t, cond)?;
        let (pg, tg) = guidance.gradients(&z, t, &eps)?;
        let out = guided_update(&z, &eps, t, pg.as_ref(), tg.as_ref(), w, sched, rng)?;
        on_step(t, &out.z_t0, &out.z_prev);
        z = out.z_prev;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn sched(eta: f64) -> NoiseSchedule {
        make_schedule(50, 8.5e-4, 0.012, ScheduleKind::Linear, eta).unwrap()
    }

    #[test]
    fn schedule_products() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear, 0.0).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        let s = make_schedule(2, 0.1, 0.2, ScheduleKind::Linear, 0.0).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        let s = sched(1.0);
        assert_eq!(s.alpha_bars().len(), 50);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear, 0.0).is_err());
        assert!(make_schedule(5, 0.2, 0.1, ScheduleKind::Linear, 0.0).is_err());
        assert!(make_schedule(5, 0.0, 0.1, ScheduleKind::Linear, 0.0).is_err());
        assert!(make_schedule(5, 0.1, 1.0, ScheduleKind::Linear, 0.0).is_err());
        assert!(make_schedule(5, 0.1, 0.2, ScheduleKind::Linear, -1.0).is_err());
        assert!(make_strided_schedule(50, 10, 0.1, 0.2, ScheduleKind::Linear, 0.0).is_err());
    }

    #[test]
    fn strided_schedule_matches_training_products() {
        let s = make_strided_schedule(50, 1000, 8.5e-4, 0.012, ScheduleKind::Linear, 0.0).unwrap();
        let train = make_schedule(1000, 8.5e-4, 0.012, ScheduleKind::Linear, 0.0).unwrap();
        for k in 1..=50 {
            assert_abs_diff_eq!(s.alpha_bar(k), train.alpha_bar(20 * k), epsilon = 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = make_schedule(50, 1e-4, 0.02, ScheduleKind::Cosine, 0.5).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for t in 1..=50 {
            assert!(s.eps_coefficient(t).is_ok());
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = make_schedule(1, 1e-13, 1e-13, ScheduleKind::Linear, 0.0).unwrap();
        let z0 = Raster::filled(1, 2, 2, 0.3).unwrap();
        let eps = Raster::filled(1, 2, 2, -1.0).unwrap();
        let out = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        let s = make_schedule(2, 0.1, 0.2, ScheduleKind::Linear, 0.0).unwrap();
        let zero = Raster::zeros(1, 2, 2).unwrap();
        let out = forward_diffuse(&zero, 2, &eps, &s).unwrap();
        assert!(out.data().iter().all(|v| (v + 0.28f64.sqrt()).abs() < 1e-15));

        let one = Raster::filled(1, 1, 1, 1.0).unwrap();
        let zt = forward_diffuse(&one, 2, &one, &s).unwrap();
        assert_abs_diff_eq!(zt.get(0, 0, 0), 1.3777, epsilon = 1e-4);
        let back = predict_z0(&zt, &one, 2, &s).unwrap();
        assert_abs_diff_eq!(back.get(0, 0, 0), 1.0, epsilon = 1e-12);
        assert!(forward_diffuse(&one, 2, &zero, &s).is_err());
        assert!(forward_diffuse(&one, 3, &one, &s).is_err());
    }

    #[test]
    fn predict_z0_zero_eps() {
        let s = sched(0.0);
        let z = Raster::filled(1, 1, 3, 2.0).unwrap();
        let out = predict_z0(&z, &Raster::zeros(1, 1, 3).unwrap(), 10, &s).unwrap();
        assert_abs_diff_eq!(out.get(0, 0, 1), 2.0 / s.alpha_bar(10).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction_walks_the_forward_process() {
        let s = sched(0.0);
        let mut rng = Rng::new(2);
        let z0 = randn_raster((2, 4, 4), &mut rng).unwrap();
        let eps = randn_raster((2, 4, 4), &mut rng).unwrap();
        for t in [1usize, 2, 17, 50] {
            let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let out = ddim_step(&zt, &eps, t, &s, &mut rng).unwrap();
            let expect = if t == 1 {
                z0.clone()
            } else {
                forward_diffuse(&z0, t - 1, &eps, &s).unwrap()
            };
            for (a, b) in out.z_prev.data().iter().zip(expect.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn excessive_eta_is_rejected() {
        let s = sched(20.0);
        let z = Raster::zeros(1, 2, 2).unwrap();
        assert!(ddim_step(&z, &z, 30, &s, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn guided_additivity_and_offsets() {
        let s = sched(0.0);
        let mut rng = Rng::new(9);
        let z = randn_raster((3, 5, 5), &mut rng).unwrap();
        let eps = randn_raster((3, 5, 5), &mut rng).unwrap();
        let pg = Raster::filled(3, 5, 5, 0.1).unwrap();
        let tg = randn_raster((3, 5, 5), &mut rng).unwrap();
        let base = guided_update(&z, &eps, 20, Some(&pg), Some(&tg), GuidanceWeights::off(), &s, &mut Rng::new(0)).unwrap();
        let plain = ddim_step(&z, &eps, 20, &s, &mut Rng::new(0)).unwrap();
        assert_eq!(base, plain);
        let one = guided_update(&z, &eps, 20, Some(&pg), None, GuidanceWeights::new(1.0, 0.0).unwrap(), &s, &mut Rng::new(0)).unwrap();
        for (a, b) in one.z_prev.data().iter().zip(plain.z_prev.data()) {
            assert_abs_diff_eq!(a - b, 0.1, epsilon = 1e-12);
        }
        assert!(GuidanceWeights::new(-1.0, 0.0).is_err());
        assert!(GuidanceWeights::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn stochastic_step_shares_rng_stream() {
        let s = sched(1.0);
        let mut rng = Rng::new(5);
        let z = randn_raster((1, 4, 4), &mut rng).unwrap();
        let eps = randn_raster((1, 4, 4), &mut rng).unwrap();
        let a = ddim_step(&z, &eps, 30, &s, &mut Rng::new(77)).unwrap();
        let b = guided_update(&z, &eps, 30, None, None, GuidanceWeights::off(), &s, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
        let c = ddim_step(&z, &eps, 30, &s, &mut Rng::new(78)).unwrap();
        assert_ne!(a.z_prev, c.z_prev);
    }

    proptest! {
        #[test]
        fn random_schedules_are_valid(
            steps in 1usize..200,
            start in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            eta in 0.0f64..1.0,
            cosine in any::<bool>(),
        ) {
            let end = (start + span).min(0.9);
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = make_schedule(steps, start, end, kind, eta).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            for t in 1..=steps {
                prop_assert!(s.sigma(t) >= 0.0);
                prop_assert!(s.eps_coefficient(t).is_ok());
            }
        }

        #[test]
        fn forward_then_predict_is_identity(seed in any::<u64>(), t in 1usize..=50) {
            let s = sched(0.0);
            let mut rng = Rng::new(seed);
            let z0 = randn_raster((1, 3, 3), &mut rng).unwrap();
            let eps = randn_raster((1, 3, 3), &mut rng).unwrap();
            let back = predict_z0(&forward_diffuse(&z0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
