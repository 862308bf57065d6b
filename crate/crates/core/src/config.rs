//! JSON run configuration.
//!
//! Every section and field is optional; missing entries take the defaults
//! documented on each field. Unknown keys are rejected with their dotted
//! path, e.g. `iha.learning_rate`.

use crate::diffusion::{make_schedule, make_strided_schedule, GuidanceWeights, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::gca::{default_heights, GcaOptions, HypothesisPredictor, SeededLinear, ZeroOffsetUniform};
use crate::geometry::{CameraModel, HeightReference, SatMeta};
use crate::metrics::DEFAULT_METRICS;
use crate::models::{AvgPoolCodec, Codec, IdentityCodec};
use crate::pose_align::IhaConfig;
use crate::synthdata::Difficulty;
use crate::text_guidance::{PromptLexicon, TextConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub diffusion: DiffusionSection,
    pub gca: GcaSection,
    pub iha: IhaConfig,
    pub text: TextSection,
    pub model: ModelSection,
    pub eval: EvalSection,
    pub geometry: GeometrySection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Sampling steps `T`. Default 50.
    pub steps: usize,
    /// When set, the sampling schedule strides a training schedule of this
    /// length.
    pub train_steps: Option<usize>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    /// Default 1 (stochastic sampling).
    pub eta: f64,
    /// Pose guidance weight `λ`. Default 0.
    pub lambda_pose: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 50,
            train_steps: None,
            beta_start: 8.5e-4,
            beta_end: 0.012,
            kind: ScheduleKind::Linear,
            eta: 1.0,
            lambda_pose: 0.0,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.train_steps {
            Some(n) => make_strided_schedule(self.steps, n, self.beta_start, self.beta_end, self.kind, self.eta),
            None => make_schedule(self.steps, self.beta_start, self.beta_end, self.kind, self.eta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    ZeroOffsetUniform,
    SeededLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcaSection {
    /// Reference heights in meters; eight planes by default.
    pub heights: Vec<f64>,
    pub offset_clamp: f64,
    pub feature_stride: usize,
    pub height_reference: HeightReference,
    pub predictor: PredictorKind,
    pub predictor_seed: u64,
}

impl Default for GcaSection {
    fn default() -> Self {
        let o = GcaOptions::default();
        Self {
            heights: default_heights(),
            offset_clamp: o.offset_clamp,
            feature_stride: o.feature_stride,
            height_reference: o.height_reference,
            predictor: PredictorKind::default(),
            predictor_seed: 0,
        }
    }
}

impl GcaSection {
    pub fn options(&self) -> GcaOptions {
        GcaOptions {
            offset_clamp: self.offset_clamp,
            feature_stride: self.feature_stride,
            height_reference: self.height_reference,
        }
    }

    pub fn predictor(&self) -> Box<dyn HypothesisPredictor> {
        match self.predictor {
            PredictorKind::ZeroOffsetUniform => Box::new(ZeroOffsetUniform),
            PredictorKind::SeededLinear => Box::new(SeededLinear::new(self.predictor_seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    /// Prompt lexicon file; the built-in lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// Text guidance weight `γ`, used when a prompt is given.
    pub gamma: f64,
    pub n_patches: usize,
    pub patch_size: Option<usize>,
}

impl Default for TextSection {
    fn default() -> Self {
        let t = TextConfig::default();
        Self {
            lexicon: None,
            gamma: 1.0,
            n_patches: t.n_patches,
            patch_size: t.patch_size,
        }
    }
}

impl TextSection {
    pub fn text_config(&self) -> TextConfig {
        TextConfig {
            n_patches: self.n_patches,
            patch_size: self.patch_size,
        }
    }

    pub fn load_lexicon(&self) -> Result<PromptLexicon> {
        match &self.lexicon {
            Some(p) => PromptLexicon::load(p),
            None => Ok(PromptLexicon::builtin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Gaussian,
    WarpOracle,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    AvgPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Data variance of the Gaussian denoiser.
    pub var: f64,
    /// Directory of per-step `eps_{t}.cvt` files for `external`.
    pub dir: Option<PathBuf>,
    pub codec: CodecKind,
    pub codec_stride: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gaussian,
            var: 0.01,
            dir: None,
            codec: CodecKind::Identity,
            codec_stride: 2,
        }
    }
}

impl ModelSection {
    pub fn codec(&self) -> Result<Box<dyn Codec>> {
        Ok(match self.codec {
            CodecKind::Identity => Box::new(IdentityCodec),
            CodecKind::AvgPool => Box::new(AvgPoolCodec::new(self.codec_stride)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    /// Fraction of top rows dropped before scoring. Default 0.5.
    pub sky_crop: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
            sky_crop: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// Ground camera; angles in radians. Default 512×128 panorama, ±45°.
    pub camera: CameraModel,
    pub meters_per_pixel: f64,
    /// Camera height above ground, meters.
    pub cam_height: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            camera: CameraModel::default_panorama(),
            meters_per_pixel: 0.5,
            cam_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub difficulty: Difficulty,
    /// Satellite raster side. Default 256.
    pub sat_size: usize,
    /// Largest distance of a sampled camera from the raster center,
    /// satellite pixels.
    pub pose_radius: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            difficulty: Difficulty::Road,
            sat_size: 256,
            pose_radius: 32.0,
        }
    }
}

impl SynthSection {
    pub fn sat_meta(&self, geometry: &GeometrySection) -> Result<SatMeta> {
        SatMeta::new(geometry.meters_per_pixel, self.sat_size, self.sat_size)
    }
}

impl Config {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            match unknown_field(&msg) {
                Some(field) if path.ends_with(&field) => Error::UnknownConfigKey(path),
                Some(field) if path == "." => Error::UnknownConfigKey(field),
                Some(field) => Error::UnknownConfigKey(format!("{path}.{field}")),
                None => Error::Config(format!("{path}: {msg}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.schedule()?;
        self.iha.validate()?;
        if self.iha.iha_steps > self.diffusion.steps {
            return Err(Error::Config(format!(
                "iha.iha_steps {} exceeds diffusion.steps {}",
                self.iha.iha_steps, self.diffusion.steps
            )));
        }
        GuidanceWeights::new(self.diffusion.lambda_pose, self.text.gamma)?;
        if self.gca.heights.is_empty() {
            return Err(Error::Config("gca.heights must not be empty".into()));
        }
        if self.gca.feature_stride == 0 {
            return Err(Error::Config("gca.feature_stride must be ≥ 1".into()));
        }
        if self.text.n_patches == 0 {
            return Err(Error::Config("text.n_patches must be ≥ 1".into()));
        }
        if !(self.model.var > 0.0 && self.model.var.is_finite()) {
            return Err(Error::Config("model.var must be > 0".into()));
        }
        if self.model.kind == ModelKind::External && self.model.dir.is_none() {
            return Err(Error::Config("model.kind external needs model.dir".into()));
        }
        if !(0.0..1.0).contains(&self.eval.sky_crop) {
            return Err(Error::Config("eval.sky_crop must lie in [0, 1)".into()));
        }
        self.geometry.camera.validate()?;
        if !(self.geometry.cam_height > 0.0) {
            return Err(Error::Config("geometry.cam_height must be > 0".into()));
        }
        self.synth.sat_meta(&self.geometry)?;
        if !(self.synth.pose_radius >= 0.0) {
            return Err(Error::Config("synth.pose_radius must be ≥ 0".into()));
        }
        Ok(())
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}
