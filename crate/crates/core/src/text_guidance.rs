//! Patch-embedding text guidance.
//!
//! The clean prediction `z_{t,0}` is decoded, cut into random square
//! patches, and each patch is embedded and compared against a target text
//! vector. The loss is `1 − mean cosine`; its gradient is pulled back through
//! the codec and the clean-latent predictor to `z_t`.

use crate::diffusion::{predict_z0, GuidanceSource, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{clean_prediction_vjp, Codec, Conditioning, NoisePredictor};
use crate::raster::Raster;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const UNIT_TOL: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

/// Unit vector, or the zero vector flagged as degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

impl Embedding {
    fn normalized(v: Vec<f64>) -> Self {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < DEGENERATE_NORM || !n.is_finite() {
            return Self {
                vector: vec![0.0; v.len()],
                degenerate: true,
            };
        }
        Self {
            vector: v.into_iter().map(|x| x / n).collect(),
            degenerate: false,
        }
    }

    pub fn cosine(&self, target: &[f64]) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        self.vector.iter().zip(target).map(|(a, b)| a * b).sum()
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, r: &Raster) -> Result<Embedding>;
    fn embed_text(&self, token: &str) -> Result<Embedding>;
    /// Gradient of `cos(embed_image(r), target)` with respect to `r`.
    fn grad_similarity(&self, _r: &Raster, _target: &[f64]) -> Option<Result<Raster>> {
        None
    }
}

/// `∂cos(p/|p|, t)/∂p = (t − (e·t)·e)/|p|`.
fn cosine_grad_wrt_raw(raw: &[f64], target: &[f64]) -> Vec<f64> {
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < DEGENERATE_NORM {
        return vec![0.0; raw.len()];
    }
    let e: Vec<f64> = raw.iter().map(|x| x / n).collect();
    let et: f64 = e.iter().zip(target).map(|(a, b)| a * b).sum();
    e.iter().zip(target).map(|(ei, ti)| (ti - et * ei) / n).collect()
}

fn check_target(target: &[f64], dim: usize) -> Result<()> {
    if target.len() != dim {
        return Err(Error::InvalidArgument(format!("target has dim {}, expected {dim}", target.len())));
    }
    let n = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!("target norm {n} is not 1")));
    }
    Ok(())
}

/// Normalized per-channel means; text tokens come from a lexicon.
#[derive(Debug, Clone)]
pub struct MeanColorEmbedder {
    channels: usize,
    lexicon: PromptLexicon,
}

impl MeanColorEmbedder {
    pub fn new(lexicon: PromptLexicon) -> Self {
        Self {
            channels: lexicon.dim,
            lexicon,
        }
    }

    pub fn rgb() -> Self {
        Self::new(PromptLexicon::builtin())
    }

    fn means(&self, r: &Raster) -> Result<Vec<f64>> {
        if r.channels() != self.channels {
            return Err(Error::InvalidShape(format!(
                "{} channels, embedder expects {}",
                r.channels(),
                self.channels
            )));
        }
        Ok((0..self.channels).map(|c| r.channel_mean(c)).collect())
    }
}

impl Embedder for MeanColorEmbedder {
    fn dim(&self) -> usize {
        self.channels
    }

    fn embed_image(&self, r: &Raster) -> Result<Embedding> {
        Ok(Embedding::normalized(self.means(r)?))
    }

    fn embed_text(&self, token: &str) -> Result<Embedding> {
        Ok(Embedding {
            vector: self.lexicon.get(token)?.to_vec(),
            degenerate: false,
        })
    }

    fn grad_similarity(&self, r: &Raster, target: &[f64]) -> Option<Result<Raster>> {
        Some((|| {
            check_target(target, self.channels)?;
            let g = cosine_grad_wrt_raw(&self.means(r)?, target);
            let inv = 1.0 / (r.height() * r.width()) as f64;
            Raster::from_fn(r.channels(), r.height(), r.width(), |c, _, _| g[c] * inv)
        })())
    }
}

const POOL: usize = 4;

/// Fixed random projection of a 4×4 grid of cell means per channel.
#[derive(Debug, Clone)]
pub struct SeededLinearEmbedder {
    seed: u64,
    channels: usize,
    dim: usize,
    proj: Vec<f64>,
}

impl SeededLinearEmbedder {
    pub fn new(seed: u64, channels: usize, dim: usize) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(Error::InvalidArgument("embedder needs positive channels and dim".into()));
        }
        let inputs = channels * POOL * POOL;
        let mut rng = Rng::new(seed);
        let proj = (0..dim * inputs).map(|_| rng.normal() / (inputs as f64).sqrt()).collect();
        Ok(Self {
            seed,
            channels,
            dim,
            proj,
        })
    }

    fn check(&self, r: &Raster) -> Result<()> {
        if r.channels() != self.channels || r.height() < POOL || r.width() < POOL {
            return Err(Error::InvalidShape(format!(
                "{:?} unsupported; need {} channels and at least {POOL}×{POOL}",
                r.shape(),
                self.channels
            )));
        }
        Ok(())
    }

    fn cell(n: usize, i: usize) -> usize {
        i * POOL / n
    }

    fn features(&self, r: &Raster) -> Vec<f64> {
        let (c, h, w) = r.shape();
        let mut sums = vec![0.0; c * POOL * POOL];
        let mut counts = [0usize; POOL * POOL];
        for y in 0..h {
            for x in 0..w {
                let k = Self::cell(h, y) * POOL + Self::cell(w, x);
                counts[k] += 1;
                for ch in 0..c {
                    sums[ch * POOL * POOL + k] += r.get(ch, y, x);
                }
            }
        }
        for ch in 0..c {
            for k in 0..POOL * POOL {
                sums[ch * POOL * POOL + k] /= counts[k] as f64;
            }
        }
        sums
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        self.proj.chunks(f.len()).map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum()).collect()
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Embedder for SeededLinearEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, r: &Raster) -> Result<Embedding> {
        self.check(r)?;
        Ok(Embedding::normalized(self.project(&self.features(r))))
    }

    fn embed_text(&self, token: &str) -> Result<Embedding> {
        let mut rng = Rng::new(self.seed ^ fnv1a(token));
        Ok(Embedding::normalized((0..self.dim).map(|_| rng.normal()).collect()))
    }

    fn grad_similarity(&self, r: &Raster, target: &[f64]) -> Option<Result<Raster>> {
        Some((|| {
            self.check(r)?;
            check_target(target, self.dim)?;
            let f = self.features(r);
            let gp = cosine_grad_wrt_raw(&self.project(&f), target);
            let mut gf = vec![0.0; f.len()];
            for (row, g) in self.proj.chunks(f.len()).zip(&gp) {
                for (acc, p) in gf.iter_mut().zip(row) {
                    *acc += g * p;
                }
            }
            let (c, h, w) = r.shape();
            let mut counts = [0usize; POOL * POOL];
            for y in 0..h {
                for x in 0..w {
                    counts[Self::cell(h, y) * POOL + Self::cell(w, x)] += 1;
                }
            }
            Raster::from_fn(c, h, w, |ch, y, x| {
                let k = Self::cell(h, y) * POOL + Self::cell(w, x);
                gf[ch * POOL * POOL + k] / counts[k] as f64
            })
        })())
    }
}

/// Keyword → target vector table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptLexicon {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
}

const BUILTIN_LEXICON: &str = include_str!("../assets/lexicon.json");

impl PromptLexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let lex: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        for (k, v) in &lex.entries {
            check_target(v, lex.dim).map_err(|e| Error::Config(format!("lexicon entry `{k}`: {e}")))?;
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Mean-color lexicon with seasons, times of day and the RGB axes.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn get(&self, keyword: &str) -> Result<&[f64]> {
        self.entries
            .get(keyword)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("keyword `{keyword}` not in lexicon")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub raster: Raster,
}

/// `n_patches` random square crops of side `patch_size`.
pub fn partition_patches(r: &Raster, n_patches: usize, patch_size: usize, rng: &mut Rng) -> Result<Vec<Patch>> {
    if n_patches == 0 || patch_size == 0 {
        return Err(Error::InvalidArgument("need at least one non-empty patch".into()));
    }
    if patch_size > r.height().min(r.width()) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch_size} larger than raster {}×{}",
            r.height(),
            r.width()
        )));
    }
    (0..n_patches)
        .map(|_| {
            let y0 = rng.below(r.height() - patch_size + 1);
            let x0 = rng.below(r.width() - patch_size + 1);
            Ok(Patch {
                y0,
                x0,
                raster: r.crop(y0, x0, patch_size, patch_size)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub n_patches: usize,
    /// Defaults to `min(H, W)` of the decoded image.
    pub patch_size: Option<usize>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            n_patches: 4,
            patch_size: None,
        }
    }
}

impl TextConfig {
    pub fn patch_size_for(&self, r: &Raster) -> usize {
        self.patch_size.unwrap_or_else(|| r.height().min(r.width()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextLoss {
    pub loss: f64,
    pub degenerate_patches: usize,
}

fn loss_over(patches: &[Patch], target: &[f64], emb: &dyn Embedder) -> Result<TextLoss> {
    check_target(target, emb.dim())?;
    let mut sum = 0.0;
    let mut degenerate = 0;
    for p in patches {
        let e = emb.embed_image(&p.raster)?;
        degenerate += e.degenerate as usize;
        sum += e.cosine(target);
    }
    Ok(TextLoss {
        loss: 1.0 - sum / patches.len() as f64,
        degenerate_patches: degenerate,
    })
}

/// `1 − mean_l cos(emb(patch_l), target)`.
pub fn text_loss(
    image: &Raster,
    target: &[f64],
    emb: &dyn Embedder,
    n_patches: usize,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<TextLoss> {
    let patches = partition_patches(image, n_patches, patch_size, rng)?;
    loss_over(&patches, target, emb)
}

/// Text loss as a function of `z_t`, with the same patch draws as
/// [`text_grad`] for an identically seeded `rng`.
#[allow(clippy::too_many_arguments)]
pub fn text_objective(
    z_t: &Raster,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    codec: &dyn Codec,
    target: &[f64],
    emb: &dyn Embedder,
    cfg: &TextConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let eps = predictor.predict(z_t, t, cond)?;
    let img = codec.decode(&predict_z0(z_t, &eps, t, sched)?)?;
    Ok(text_loss(&img, target, emb, cfg.n_patches, cfg.patch_size_for(&img), rng)?.loss)
}

#[derive(Debug, Clone)]
pub struct TextGrad {
    /// `−∇_{z_t} L_text`.
    pub grad: Raster,
    pub loss: f64,
    pub degenerate_patches: usize,
    /// False when the predictor offers no Jacobian and `∂ε̂/∂z_t` was taken
    /// as zero.
    pub exact: bool,
}

/// `−∇_{z_t} L_text` given the predictor output `eps` at `z_t`.
#[allow(clippy::too_many_arguments)]
pub fn text_grad_with_eps(
    z_t: &Raster,
    eps: &Raster,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    codec: &dyn Codec,
    target: &[f64],
    emb: &dyn Embedder,
    cfg: &TextConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TextGrad> {
    let z_t0 = predict_z0(z_t, eps, t, sched)?;
    let img = codec.decode(&z_t0)?;
    let patches = partition_patches(&img, cfg.n_patches, cfg.patch_size_for(&img), rng)?;
    let loss = loss_over(&patches, target, emb)?;

    let (c, h, w) = img.shape();
    let mut d_img = vec![0.0; c * h * w];
    let scale = -1.0 / patches.len() as f64;
    for p in &patches {
        let g = emb
            .grad_similarity(&p.raster, target)
            .ok_or_else(|| Error::Unsupported("embedder has no gradient".into()))??;
        let (_, ph, pw) = g.shape();
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    d_img[(ch * h + p.y0 + y) * w + p.x0 + x] += scale * g.get(ch, y, x);
                }
            }
        }
    }
    let d_z0 = codec.decode_vjp(&Raster::from_vec(c, h, w, d_img)?)?;
    d_z0.ensure_same_shape(z_t)?;

    let (d_zt, exact) = clean_prediction_vjp(predictor, z_t, t, cond, sched, &d_z0)?;
    Ok(TextGrad {
        grad: d_zt.scale(-1.0)?,
        loss: loss.loss,
        degenerate_patches: loss.degenerate_patches,
        exact,
    })
}

/// `−∇_{z_t} L_text` through predictor, codec, patches and embedder.
#[allow(clippy::too_many_arguments)]
pub fn text_grad(
    z_t: &Raster,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    codec: &dyn Codec,
    target: &[f64],
    emb: &dyn Embedder,
    cfg: &TextConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TextGrad> {
    let eps = predictor.predict(z_t, t, cond)?;
    text_grad_with_eps(z_t, &eps, t, predictor, cond, codec, target, emb, cfg, sched, rng)
}

/// `ε̂ = ε + √(1−ᾱ_t)·∇_{z_t}L_text`, the noise-prediction form of the text
/// term. `loss_grad` is the loss gradient (the negation of [`text_grad`]).
pub fn eps_hat(eps: &Raster, z_t: &Raster, t: usize, sched: &NoiseSchedule, loss_grad: &Raster) -> Result<Raster> {
    eps.ensure_same_shape(z_t)?;
    eps.axpby(1.0, loss_grad, (1.0 - sched.alpha_bar(t)).sqrt())
}

/// Text weight for which the additive-mean update equals a DDIM step taken
/// with [`eps_hat`].
pub fn equivalent_gamma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    Ok(-sched.eps_coefficient(t)? * (1.0 - sched.alpha_bar(t)).sqrt())
}

/// Supplies `text_grad` at every step of a sampling run.
pub struct TextGuidance<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub cond: &'a Conditioning,
    pub codec: &'a dyn Codec,
    pub target: Vec<f64>,
    pub emb: &'a dyn Embedder,
    pub cfg: TextConfig,
    pub sched: &'a NoiseSchedule,
    pub rng: Rng,
    pub last_loss: Option<f64>,
}

impl GuidanceSource for TextGuidance<'_> {
    fn gradients(&mut self, z_t: &Raster, t: usize, eps: &Raster) -> Result<(Option<Raster>, Option<Raster>)> {
        let g = text_grad_with_eps(
            z_t,
            eps,
            t,
            self.predictor,
            self.cond,
            self.codec,
            &self.target,
            self.emb,
            &self.cfg,
            self.sched,
            &mut self.rng,
        )?;
        self.last_loss = Some(g.loss);
        Ok((None, Some(g.grad)))
    }
}
