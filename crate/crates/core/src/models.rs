//! Noise predictors and latent codecs.
//!
//! The Gaussian denoiser is the exact posterior predictor for data drawn from
//! `N(mean, var·I)`. With `s = ᾱ_t·var + 1 − ᾱ_t` it returns
//!
//! ```text
//! ε̂ = √(1−ᾱ_t)·(z_t − √ᾱ_t·mean) / s
//! ```
//!
//! so that the clean prediction is the posterior mean
//! `mean + √ᾱ_t·var·(z_t − √ᾱ_t·mean)/s`.

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::RelativePose;
use crate::raster::Raster;
use std::path::PathBuf;

/// Conditioning passed to a noise predictor.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    pub sat_feat: Option<Raster>,
    pub pose: Option<RelativePose>,
}

pub trait NoisePredictor: Send + Sync {
    fn predict(&self, z_t: &Raster, t: usize, cond: &Conditioning) -> Result<Raster>;

    /// Vector-Jacobian product `(∂ε̂/∂z_t)ᵀ·cot`, when known in closed form.
    fn eps_vjp(&self, _z_t: &Raster, _t: usize, _cond: &Conditioning, _cot: &Raster) -> Option<Result<Raster>> {
        None
    }
}

fn check_step(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", sched.steps())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GaussianScoreDenoiser {
    mean: Raster,
    var: f64,
    sched: NoiseSchedule,
}

pub fn gaussian_score_denoiser(mean: Raster, var: f64, sched: NoiseSchedule) -> Result<GaussianScoreDenoiser> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance {var} must be > 0")));
    }
    Ok(GaussianScoreDenoiser { mean, var, sched })
}

impl GaussianScoreDenoiser {
    pub fn mean(&self) -> &Raster {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    fn denom(&self, t: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        ab * self.var + 1.0 - ab
    }
}

impl NoisePredictor for GaussianScoreDenoiser {
    fn predict(&self, z_t: &Raster, t: usize, _: &Conditioning) -> Result<Raster> {
        check_step(&self.sched, t)?;
        z_t.ensure_same_shape(&self.mean)?;
        let ab = self.sched.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / self.denom(t);
        z_t.axpby(k, &self.mean, -k * ab.sqrt())
    }

    fn eps_vjp(&self, z_t: &Raster, t: usize, _: &Conditioning, cot: &Raster) -> Option<Result<Raster>> {
        Some((|| {
            check_step(&self.sched, t)?;
            z_t.ensure_same_shape(cot)?;
            cot.scale((1.0 - self.sched.alpha_bar(t)).sqrt() / self.denom(t))
        })())
    }
}

/// Predictor whose clean-latent estimate is always `target`.
#[derive(Debug, Clone)]
pub struct WarpOracleDenoiser {
    target: Raster,
    sched: NoiseSchedule,
}

pub fn warp_oracle_denoiser(target: Raster, sched: NoiseSchedule) -> WarpOracleDenoiser {
    WarpOracleDenoiser { target, sched }
}

impl WarpOracleDenoiser {
    pub fn target(&self) -> &Raster {
        &self.target
    }
}

impl NoisePredictor for WarpOracleDenoiser {
    fn predict(&self, z_t: &Raster, t: usize, _: &Conditioning) -> Result<Raster> {
        check_step(&self.sched, t)?;
        z_t.ensure_same_shape(&self.target)?;
        let ab = self.sched.alpha_bar(t);
        if 1.0 - ab <= 0.0 {
            return Err(Error::InvalidArgument(format!("ᾱ_{t} = 1; noise prediction undefined")));
        }
        let inv = 1.0 / (1.0 - ab).sqrt();
        z_t.axpby(inv, &self.target, -ab.sqrt() * inv)
    }

    fn eps_vjp(&self, z_t: &Raster, t: usize, _: &Conditioning, cot: &Raster) -> Option<Result<Raster>> {
        Some((|| {
            check_step(&self.sched, t)?;
            z_t.ensure_same_shape(cot)?;
            cot.scale(1.0 / (1.0 - self.sched.alpha_bar(t)).sqrt())
        })())
    }
}

/// `(∂z_{t,0}/∂z_t)ᵀ·cot` for `z_{t,0} = (z_t − √(1−ᾱ_t)·ε̂(z_t))/√ᾱ_t`.
/// The flag is false when the predictor has no Jacobian and `∂ε̂/∂z_t` was
/// taken as zero.
pub fn clean_prediction_vjp(
    predictor: &dyn NoisePredictor,
    z_t: &Raster,
    t: usize,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    cot: &Raster,
) -> Result<(Raster, bool)> {
    check_step(sched, t)?;
    z_t.ensure_same_shape(cot)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    match predictor.eps_vjp(z_t, t, cond, cot) {
        Some(j) => Ok((cot.axpby(inv, &j?, -(1.0 - ab).sqrt() * inv)?, true)),
        None => Ok((cot.scale(inv)?, false)),
    }
}

/// Reads `eps_{t:03}.cvt` from a directory, one file per step.
#[derive(Debug, Clone)]
pub struct ExternalPredictor {
    dir: PathBuf,
}

impl ExternalPredictor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, t: usize) -> PathBuf {
        self.dir.join(format!("eps_{t:03}.cvt"))
    }
}

impl NoisePredictor for ExternalPredictor {
    fn predict(&self, z_t: &Raster, t: usize, _: &Conditioning) -> Result<Raster> {
        let eps = Raster::read(self.path_for(t))?;
        z_t.ensure_same_shape(&eps)?;
        Ok(eps)
    }
}

pub trait Codec: Send + Sync {
    fn encode(&self, x: &Raster) -> Result<Raster>;
    fn decode(&self, z: &Raster) -> Result<Raster>;
    /// `(∂decode/∂z)ᵀ·cot` for a cotangent shaped like the decoded image.
    fn decode_vjp(&self, cot: &Raster) -> Result<Raster>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, x: &Raster) -> Result<Raster> {
        Ok(x.clone())
    }
    fn decode(&self, z: &Raster) -> Result<Raster> {
        Ok(z.clone())
    }
    fn decode_vjp(&self, cot: &Raster) -> Result<Raster> {
        Ok(cot.clone())
    }
}

/// Encodes by `stride × stride` average pooling and decodes by block
/// replication.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolCodec {
    stride: usize,
}

impl AvgPoolCodec {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("codec stride must be ≥ 1".into()));
        }
        Ok(Self { stride })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn pool(&self, x: &Raster) -> Result<Raster> {
        let s = self.stride;
        let (c, h, w) = x.shape();
        if h % s != 0 || w % s != 0 {
            return Err(Error::InvalidShape(format!("{h}×{w} not divisible by stride {s}")));
        }
        Raster::from_fn(c, h / s, w / s, |ch, y, xx| {
            let mut acc = 0.0;
            for dy in 0..s {
                for dx in 0..s {
                    acc += x.get(ch, y * s + dy, xx * s + dx);
                }
            }
            acc
        })
    }
}

impl Codec for AvgPoolCodec {
    fn encode(&self, x: &Raster) -> Result<Raster> {
        let sum = self.pool(x)?;
        sum.scale(1.0 / (self.stride * self.stride) as f64)
    }

    fn decode(&self, z: &Raster) -> Result<Raster> {
        let s = self.stride;
        let (c, h, w) = z.shape();
        Raster::from_fn(c, h * s, w * s, |ch, y, x| z.get(ch, y / s, x / s))
    }

    fn decode_vjp(&self, cot: &Raster) -> Result<Raster> {
        self.pool(cot)
    }
}
