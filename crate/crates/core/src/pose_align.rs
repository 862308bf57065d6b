//! Iterative homography adjustment.
//!
//! The clean prediction is warped by the current homography `H`, refined,
//! and projected onto a camera-aligned overhead window under the ground-plane
//! assumption. Satellite features are cropped around each candidate pose and
//! rotated into the same frame. Cosine scores over the candidates feed an
//! InfoNCE loss whose finite-difference gradient drives `H`.
//!
//! `H` is optimized in normalized coordinates (both image axes mapped to
//! `[−1, 1]`) so that a single learning rate suits all eight entries.

use crate::diffusion::{guided_update, GuidanceSource, GuidanceWeights, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_gradient, camera_to_world, homography_grid, in_bounds, overhead_grid, warp, warp_adjoint,
    CameraModel, Homography, RelativePose, SampleGrid, SatMeta,
};
use crate::models::{clean_prediction_vjp, Codec, Conditioning, NoisePredictor};
use crate::raster::Raster;
use crate::rng::Rng;
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePoseSet {
    pub poses: Vec<RelativePose>,
    pub gt_index: usize,
}

impl CandidatePoseSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn gt(&self) -> &RelativePose {
        &self.poses[self.gt_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IhaConfig {
    /// Step size of the preconditioned update, squared latent pixels per
    /// unit loss.
    pub lr: f64,
    /// Number of leading sampling steps that update `H`.
    pub iha_steps: usize,
    pub k: usize,
    pub tau: f64,
    /// Maximum candidate offset per axis, satellite pixels.
    pub perturb_trans: f64,
    /// Maximum candidate yaw offset, radians.
    pub perturb_yaw: f64,
    /// Central-difference step on the normalized entries.
    pub fd_step: f64,
    /// Overhead window side, satellite pixels.
    pub crop: usize,
    /// Largest RMS displacement of the overhead footprint per update,
    /// latent pixels.
    pub max_shift: f64,
    /// Sampling aborts once `cond(H)` exceeds this.
    pub max_condition: f64,
}

impl Default for IhaConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            iha_steps: 40,
            k: 9,
            tau: 0.1,
            perturb_trans: 8.0,
            perturb_yaw: 10f64.to_radians(),
            fd_step: 1e-3,
            crop: 64,
            max_shift: 1.0,
            max_condition: 1e8,
        }
    }
}

impl IhaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("iha.tau must be > 0");
        }
        if self.k < 2 {
            return bad("iha.k must be ≥ 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("iha.lr must be ≥ 0");
        }
        if !(self.fd_step > 0.0) {
            return bad("iha.fd_step must be > 0");
        }
        if !(self.perturb_trans >= 0.0 && self.perturb_yaw >= 0.0) {
            return bad("iha perturbations must be ≥ 0");
        }
        if self.crop == 0 {
            return bad("iha.crop must be positive");
        }
        if !(self.max_shift > 0.0) || !(self.max_condition > 1.0) {
            return bad("iha.max_shift must be > 0 and iha.max_condition > 1");
        }
        Ok(())
    }
}

/// `K − 1` poses drawn uniformly around `gt` plus `gt` itself at a random
/// index.
pub fn sample_candidates(gt: &RelativePose, cfg: &IhaConfig, meta: &SatMeta, rng: &mut Rng) -> Result<CandidatePoseSet> {
    cfg.validate()?;
    let d = cfg.perturb_trans;
    if !(meta.contains(gt.sat_u - d, gt.sat_v - d) && meta.contains(gt.sat_u + d, gt.sat_v + d)) {
        return Err(Error::InvalidArgument(format!(
            "perturbation window ±{d} px around ({}, {}) leaves the satellite raster",
            gt.sat_u, gt.sat_v
        )));
    }
    let gt_index = rng.below(cfg.k);
    let mut poses = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        if i == gt_index {
            poses.push(*gt);
            continue;
        }
        let du = rng.uniform(-d, d);
        let dv = rng.uniform(-d, d);
        let dy = rng.uniform(-cfg.perturb_yaw, cfg.perturb_yaw);
        poses.push(RelativePose::new(gt.sat_u + du, gt.sat_v + dv, gt.yaw + dy, gt.cam_height)?);
    }
    Ok(CandidatePoseSet { poses, gt_index })
}

/// Maps features into the shared space used for scoring.
pub trait FeatureRefiner: Send + Sync {
    fn refine(&self, r: &Raster) -> Result<Raster>;
    /// `(∂refine/∂r)ᵀ·cot`, when available.
    fn vjp(&self, _r: &Raster, _cot: &Raster) -> Option<Result<Raster>> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl FeatureRefiner for IdentityRefiner {
    fn refine(&self, r: &Raster) -> Result<Raster> {
        Ok(r.clone())
    }
    fn vjp(&self, _: &Raster, cot: &Raster) -> Option<Result<Raster>> {
        Some(Ok(cot.clone()))
    }
}

/// Fixed random per-pixel channel mixing without bias.
#[derive(Debug, Clone)]
pub struct SeededLinearRefiner {
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
}

impl SeededLinearRefiner {
    pub fn new(seed: u64, in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument("refiner needs positive channel counts".into()));
        }
        let mut rng = Rng::new(seed);
        let s = 1.0 / (in_channels as f64).sqrt();
        Ok(Self {
            in_channels,
            out_channels,
            weights: (0..in_channels * out_channels).map(|_| rng.normal() * s).collect(),
        })
    }

    fn mix(&self, r: &Raster, rows: usize, cols: usize, w: impl Fn(usize, usize) -> f64) -> Result<Raster> {
        if r.channels() != cols {
            return Err(Error::InvalidShape(format!("refiner expects {cols} channels, got {}", r.channels())));
        }
        Raster::from_fn(rows, r.height(), r.width(), |o, y, x| {
            (0..cols).map(|c| w(o, c) * r.get(c, y, x)).sum()
        })
    }
}

impl FeatureRefiner for SeededLinearRefiner {
    fn refine(&self, r: &Raster) -> Result<Raster> {
        self.mix(r, self.out_channels, self.in_channels, |o, c| self.weights[o * self.in_channels + c])
    }
    fn vjp(&self, _: &Raster, cot: &Raster) -> Option<Result<Raster>> {
        Some(self.mix(cot, self.in_channels, self.out_channels, |c, o| {
            self.weights[o * self.in_channels + c]
        }))
    }
}

/// A cosine similarity; `degenerate` when either side had zero norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine over the cells where both masks are set, across all channels.
pub fn masked_cosine(a: &Raster, a_mask: &[bool], b: &Raster, b_mask: &[bool]) -> Result<Score> {
    let cells = a.height() * a.width();
    if a_mask.len() != cells || b_mask.len() != cells {
        return Err(Error::InvalidShape("mask size differs from raster".into()));
    }
    let w: Vec<f64> = a_mask.iter().zip(b_mask).map(|(x, y)| (*x && *y) as u8 as f64).collect();
    weighted_cosine(a, b, &w)
}

/// `Σ w·a·b / √(Σ w·a² · Σ w·b²)` with one weight per cell.
pub fn weighted_cosine(a: &Raster, b: &Raster, weights: &[f64]) -> Result<Score> {
    a.ensure_same_shape(b)?;
    if weights.len() != a.height() * a.width() {
        return Err(Error::InvalidShape("weight count differs from raster".into()));
    }
    let (ab, aa, bb) = cosine_sums(a, b, weights);
    if aa <= 0.0 || bb <= 0.0 {
        return Ok(Score {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Score {
        value: (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

fn cosine_sums(a: &Raster, b: &Raster, weights: &[f64]) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for c in 0..a.channels() {
        for ((&x, &y), &w) in a.plane(c).iter().zip(b.plane(c)).zip(weights) {
            if w != 0.0 {
                ab += w * x * y;
                aa += w * x * x;
                bb += w * y * y;
            }
        }
    }
    (ab, aa, bb)
}

/// Overhead window in the camera frame: row 0 is farthest ahead, column
/// `crop/2` is straight ahead. Cells map to ground-camera pixels.
pub fn camera_overhead_grid(cam: &CameraModel, cam_height: f64, meta: &SatMeta, crop: usize) -> Result<SampleGrid> {
    let center = RelativePose::new(meta.width as f64 / 2.0, meta.height as f64 / 2.0, 0.0, cam_height)?;
    overhead_grid(cam, &center, meta, crop)
}

/// Satellite window around `pose`, rotated so that up is the camera's
/// forward direction; cells outside the raster are invalid.
pub fn rotated_crop_grid(pose: &RelativePose, meta: &SatMeta, crop: usize) -> SampleGrid {
    let half = (crop / 2) as f64;
    let mpp = meta.meters_per_pixel;
    SampleGrid::from_fn(crop, crop, |i, j| {
        let forward = -(i as f64 - half) * mpp;
        let right = (j as f64 - half) * mpp;
        let (e, n) = camera_to_world(pose.yaw, forward, right);
        let (u, v) = (pose.sat_u + e / mpp, pose.sat_v - n / mpp);
        meta.contains(u, v).then_some([u, v])
    })
}

fn grid_mask(grid: &SampleGrid, src_h: usize, src_w: usize) -> Vec<bool> {
    grid.coords()
        .iter()
        .map(|c| c.is_some_and(|[x, y]| in_bounds(src_w, src_h, x, y)))
        .collect()
}

fn check_crop(meta: &SatMeta, crop: usize) -> Result<()> {
    if crop == 0 || crop > meta.width.min(meta.height) {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} does not fit the {}×{} satellite raster",
            meta.width, meta.height
        )));
    }
    Ok(())
}

/// Scales a grid over camera pixels to a raster of a different size.
fn rescale_grid(grid: &SampleGrid, cam: &CameraModel, h: usize, w: usize) -> SampleGrid {
    if (h, w) == (cam.height(), cam.width()) {
        return grid.clone();
    }
    let (sx, sy) = (w as f64 / cam.width() as f64, h as f64 / cam.height() as f64);
    SampleGrid::from_fn(grid.height(), grid.width(), |i, j| grid.get(i, j).map(|[x, y]| [x * sx, y * sy]))
}

/// Cosine between the overhead projection of `refG(ground_feat)` and the
/// rotated satellite crop of `refS(sat_feat)` at `pose`.
#[allow(clippy::too_many_arguments)]
pub fn alignment_score(
    ground_feat: &Raster,
    sat_feat: &Raster,
    pose: &RelativePose,
    cam: &CameraModel,
    meta: &SatMeta,
    crop: usize,
    ref_g: &dyn FeatureRefiner,
    ref_s: &dyn FeatureRefiner,
) -> Result<Score> {
    check_crop(meta, crop)?;
    let g = ref_g.refine(ground_feat)?;
    let s = ref_s.refine(sat_feat)?;
    let over = rescale_grid(&camera_overhead_grid(cam, pose.cam_height, meta, crop)?, cam, g.height(), g.width());
    let sat_grid = rotated_crop_grid(pose, meta, crop);
    masked_cosine(
        &warp(&g, &over, 0.0),
        &grid_mask(&over, g.height(), g.width()),
        &warp(&s, &sat_grid, 0.0),
        &grid_mask(&sat_grid, s.height(), s.width()),
    )
}

/// `−log softmax(S/τ)[k*]`, computed with max subtraction.
pub fn info_nce(scores: &[f64], k_star: usize, tau: f64) -> Result<f64> {
    if k_star >= scores.len() {
        return Err(Error::InvalidArgument(format!("k* {k_star} out of {} scores", scores.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("alignment score".into()));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = m + scores.iter().map(|s| (s / tau - m).exp()).sum::<f64>().ln();
    Ok((lse - scores[k_star] / tau).max(0.0))
}

/// `∂L/∂S_k = (softmax_k − [k = k*])/τ`.
fn info_nce_grad(scores: &[f64], k_star: usize, tau: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let e: Vec<f64> = scores.iter().map(|s| (s / tau - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter()
        .enumerate()
        .map(|(k, ek)| (ek / z - (k == k_star) as u8 as f64) / tau)
        .collect()
}

/// Everything needed to score a clean prediction against the candidates,
/// with the satellite side precomputed.
pub struct PoseScorer<'a> {
    cam: CameraModel,
    cands: CandidatePoseSet,
    tau: f64,
    ref_g: &'a dyn FeatureRefiner,
    overhead: SampleGrid,
    crops: Vec<(Raster, Vec<bool>)>,
}

impl<'a> PoseScorer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cam: &CameraModel,
        meta: &SatMeta,
        sat_feat: &Raster,
        cands: CandidatePoseSet,
        cfg: &IhaConfig,
        ref_g: &'a dyn FeatureRefiner,
        ref_s: &dyn FeatureRefiner,
    ) -> Result<Self> {
        check_crop(meta, cfg.crop)?;
        if cands.is_empty() {
            return Err(Error::InvalidArgument("no candidates".into()));
        }
        let s = ref_s.refine(sat_feat)?;
        let crops = cands
            .poses
            .iter()
            .map(|p| {
                let g = rotated_crop_grid(p, meta, cfg.crop);
                (warp(&s, &g, 0.0), grid_mask(&g, s.height(), s.width()))
            })
            .collect();
        Ok(Self {
            cam: cam.clone(),
            overhead: camera_overhead_grid(cam, cands.gt().cam_height, meta, cfg.crop)?,
            cands,
            tau: cfg.tau,
            ref_g,
            crops,
        })
    }

    pub fn candidates(&self) -> &CandidatePoseSet {
        &self.cands
    }

    fn forward(&self, z_t0: &Raster, hn: &Homography) -> Result<Forward> {
        let (h, w) = (z_t0.height(), z_t0.width());
        let hgrid = homography_grid(&Homography::from_normalized(hn, h, w)?, h, w)?;
        let warped = warp(z_t0, &hgrid, 0.0);
        let refined = self.ref_g.refine(&warped)?;
        let over = rescale_grid(&self.overhead, &self.cam, h, w);
        let cover = Raster::from_fn(1, h, w, |_, y, x| {
            hgrid.get(y, x).map_or(0.0, |[sx, sy]| edge_ramp(sx, w).0 * edge_ramp(sy, h).0)
        })?;
        let faded = Raster::from_fn(refined.channels(), h, w, |c, y, x| refined.get(c, y, x) * cover.get(0, y, x))?;
        let ground = warp(&faded, &over, 0.0);
        let footprint = grid_mask(&over, h, w);
        Ok(Forward {
            warped,
            hgrid,
            refined,
            over,
            cover,
            footprint,
            ground,
        })
    }

    fn weights_for(&self, fw: &Forward, k: usize) -> Vec<f64> {
        fw.footprint
            .iter()
            .zip(&self.crops[k].1)
            .map(|(&a, &b)| (a && b) as u8 as f64)
            .collect()
    }

    /// Scores of `z_t0 ⊗ grid(H)` against every candidate; `hn` acts on
    /// normalized coordinates. Parts of the footprint that the warped latent
    /// no longer covers count as zero features.
    pub fn scores(&self, z_t0: &Raster, hn: &Homography) -> Result<Vec<Score>> {
        let fw = self.forward(z_t0, hn)?;
        (0..self.crops.len())
            .map(|k| weighted_cosine(&fw.ground, &self.crops[k].0, &self.weights_for(&fw, k)))
            .collect()
    }

    pub fn loss(&self, z_t0: &Raster, hn: &Homography) -> Result<(f64, Vec<f64>)> {
        let s: Vec<f64> = self.scores(z_t0, hn)?.iter().map(|s| s.value).collect();
        Ok((info_nce(&s, self.cands.gt_index, self.tau)?, s))
    }

    /// `∂L/∂(warped latent)` and `∂L/∂(coverage)`.
    fn backward(&self, fw: &Forward) -> Result<(Raster, Raster)> {
        let ground = &fw.ground;
        let weights: Vec<Vec<f64>> = (0..self.crops.len()).map(|k| self.weights_for(fw, k)).collect();
        let scores: Vec<Score> = self
            .crops
            .iter()
            .zip(&weights)
            .map(|((c, _), w)| weighted_cosine(ground, c, w))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        let dl_ds = info_nce_grad(&values, self.cands.gt_index, self.tau);
        let (ch, cells) = (ground.channels(), ground.height() * ground.width());
        let mut d_ground = vec![0.0; ch * cells];
        for (k, (crop, _)) in self.crops.iter().enumerate() {
            if scores[k].degenerate || dl_ds[k] == 0.0 {
                continue;
            }
            let w = &weights[k];
            let (_, aa, bb) = cosine_sums(ground, crop, w);
            let nab = aa.sqrt() * bb.sqrt();
            let s = scores[k].value;
            for c in 0..ch {
                let (pa, pb) = (ground.plane(c), crop.plane(c));
                for i in (0..cells).filter(|&i| w[i] != 0.0) {
                    d_ground[c * cells + i] += dl_ds[k] * w[i] * (pb[i] / nab - s * pa[i] / aa);
                }
            }
        }
        let d_ground = Raster::from_vec(ch, ground.height(), ground.width(), d_ground)?;
        let (h, w) = (fw.refined.height(), fw.refined.width());
        let d_faded = warp_adjoint(&d_ground, &fw.over, h, w);
        let d_refined = Raster::from_fn(ch, h, w, |c, y, x| d_faded.get(c, y, x) * fw.cover.get(0, y, x))?;
        let d_cover = Raster::from_fn(1, h, w, |_, y, x| {
            (0..ch).map(|c| d_faded.get(c, y, x) * fw.refined.get(c, y, x)).sum()
        })?;
        let d_warped = self
            .ref_g
            .vjp(&fw.warped, &d_refined)
            .ok_or_else(|| Error::Unsupported("ground refiner has no gradient".into()))??;
        Ok((d_warped, d_cover))
    }

    /// `∂L/∂z_{t,0}` through the scores, overhead warp, refiner and `H` warp.
    pub fn loss_grad_z0(&self, z_t0: &Raster, hn: &Homography) -> Result<Raster> {
        let fw = self.forward(z_t0, hn)?;
        let (d_warped, _) = self.backward(&fw)?;
        Ok(warp_adjoint(&d_warped, &fw.hgrid, z_t0.height(), z_t0.width()))
    }

    /// Analytic `∂L/∂ĥ` over the eight normalized entries, through the
    /// bilinear sample coordinates and the coverage weights.
    pub fn loss_grad_h(&self, z_t0: &Raster, hn: &Homography) -> Result<[f64; 8]> {
        let fw = self.forward(z_t0, hn)?;
        let (d_warped, d_cover) = self.backward(&fw)?;
        let (h, w) = (z_t0.height(), z_t0.width());
        let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
        let m = hn.rows();
        let mut g = [0.0; 8];
        for y in 0..h {
            for x in 0..w {
                let Some([sx, sy]) = fw.hgrid.get(y, x) else { continue };
                let (xn, yn) = (x as f64 / hw - 1.0, y as f64 / hh - 1.0);
                let wn = m[2][0] * xn + m[2][1] * yn + m[2][2];
                let (xp, yp) = (sx / hw - 1.0, sy / hh - 1.0);
                let ((rx, drx), (ry, dry)) = (edge_ramp(sx, w), edge_ramp(sy, h));
                let dc = d_cover.get(0, y, x);
                let (mut gx, mut gy) = (dc * drx * ry, dc * rx * dry);
                for c in 0..z_t0.channels() {
                    let d = d_warped.get(c, y, x);
                    if d == 0.0 {
                        continue;
                    }
                    let (dx, dy) = bilinear_gradient(z_t0, c, sx, sy);
                    gx += d * dx;
                    gy += d * dy;
                }
                let (ax, ay) = (gx * hw / wn, gy * hh / wn);
                g[0] += ax * xn;
                g[1] += ax * yn;
                g[2] += ax;
                g[3] += ay * xn;
                g[4] += ay * yn;
                g[5] += ay;
                g[6] -= (ax * xp + ay * yp) * xn;
                g[7] -= (ax * xp + ay * yp) * yn;
            }
        }
        Ok(g)
    }
}

impl PoseScorer<'_> {
    /// Mean `JᵀJ` of the pixel displacement of the overhead sample points
    /// with respect to the normalized entries of `hn`.
    pub fn displacement_metric(&self, hn: &Homography, h: usize, w: usize) -> SMatrix<f64, 8, 8> {
        let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
        let m = hn.rows();
        let mut g = SMatrix::<f64, 8, 8>::zeros();
        let mut n = 0usize;
        for [x, y] in rescale_grid(&self.overhead, &self.cam, h, w).coords().iter().flatten() {
            let (xn, yn) = (x / hw - 1.0, y / hh - 1.0);
            let den = m[2][0] * xn + m[2][1] * yn + m[2][2];
            if den.abs() < 1e-9 {
                continue;
            }
            let xp = (m[0][0] * xn + m[0][1] * yn + m[0][2]) / den;
            let yp = (m[1][0] * xn + m[1][1] * yn + m[1][2]) / den;
            let jx = SVector::<f64, 8>::from([xn, yn, 1.0, 0.0, 0.0, 0.0, -xp * xn, -xp * yn]) * (hw / den);
            let jy = SVector::<f64, 8>::from([0.0, 0.0, 0.0, xn, yn, 1.0, -yp * xn, -yp * yn]) * (hh / den);
            g += jx * jx.transpose() + jy * jy.transpose();
            n += 1;
        }
        if n > 0 {
            g /= n as f64;
        }
        g
    }

    /// `lr·G⁻¹·grad` for the displacement metric `G`, shortened so that the
    /// footprint moves by at most `max_shift` pixels RMS.
    pub fn preconditioned_step(
        &self,
        grad: &[f64; 8],
        hn: &Homography,
        h: usize,
        w: usize,
        cfg: &IhaConfig,
    ) -> Result<[f64; 8]> {
        let mut g = self.displacement_metric(hn, h, w);
        let damping = 1e-9 * g.trace().max(1e-12);
        for i in 0..8 {
            g[(i, i)] += damping;
        }
        let grad = SVector::<f64, 8>::from(*grad);
        let dir = g
            .cholesky()
            .ok_or_else(|| Error::Singular("displacement metric".into()))?
            .solve(&grad);
        let mut step = dir * cfg.lr;
        let rms = step.dot(&(g * step)).max(0.0).sqrt();
        if rms > cfg.max_shift {
            step *= cfg.max_shift / rms;
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography update".into()));
        }
        Ok(step.into())
    }
}

struct Forward {
    warped: Raster,
    hgrid: SampleGrid,
    refined: Raster,
    over: SampleGrid,
    cover: Raster,
    footprint: Vec<bool>,
    ground: Raster,
}

/// Weight falling linearly to 0 within one pixel of either border of
/// `[0, n − 1]`, and its derivative.
fn edge_ramp(s: f64, n: usize) -> (f64, f64) {
    let hi = (n - 1) as f64 - s;
    if s <= 0.0 || hi <= 0.0 {
        (0.0, 0.0)
    } else if s < 1.0 && s <= hi {
        (s, 1.0)
    } else if hi < 1.0 {
        (hi, -1.0)
    } else {
        (1.0, 0.0)
    }
}

/// Convenience: InfoNCE loss and raw scores of `z_t0` at identity `H`.
#[allow(clippy::too_many_arguments)]
pub fn pose_loss(
    z_t0: &Raster,
    sat_feat: &Raster,
    cands: &CandidatePoseSet,
    cfg: &IhaConfig,
    cam: &CameraModel,
    meta: &SatMeta,
    ref_g: &dyn FeatureRefiner,
    ref_s: &dyn FeatureRefiner,
) -> Result<(f64, Vec<f64>)> {
    PoseScorer::new(cam, meta, sat_feat, cands.clone(), cfg, ref_g, ref_s)?.loss(z_t0, &Homography::identity())
}

/// Central differences of `loss_fn` over the eight free entries of `h`.
pub fn grad_h(loss_fn: impl Fn(&Homography) -> Result<f64>, h: &Homography, fd_step: f64) -> Result<[f64; 8]> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("fd_step must be > 0".into()));
    }
    let p = h.params();
    let mut g = [0.0; 8];
    for i in 0..8 {
        let mut hi = p;
        hi[i] += fd_step;
        let mut lo = p;
        lo[i] -= fd_step;
        let fp = loss_fn(&Homography::from_params(hi)?)?;
        let fm = loss_fn(&Homography::from_params(lo)?)?;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("loss probe on entry {i}")));
        }
        g[i] = (fp - fm) / (2.0 * fd_step);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Pose loss at the homography in force before this step's update.
    pub loss: Option<f64>,
    /// Pixel-space homography after the step, row-major.
    pub h: [[f64; 3]; 3],
}

#[derive(Debug, Clone)]
pub struct IhaOutput {
    pub image: Raster,
    pub latent: Raster,
    /// Pixel-space homography.
    pub h_final: Homography,
    pub trace: Vec<TraceRecord>,
}

/// Inputs of [`iha_sample`] besides the sampler itself.
pub struct IhaSetup<'a> {
    pub cam: CameraModel,
    pub meta: SatMeta,
    pub sat_feat: &'a Raster,
    pub gt_pose: RelativePose,
    pub ref_g: &'a dyn FeatureRefiner,
    pub ref_s: &'a dyn FeatureRefiner,
}

/// Failure of an adjustment run with the trace collected so far.
#[derive(Debug)]
pub struct IhaAbort {
    pub error: Error,
    pub trace: Vec<TraceRecord>,
}

impl std::fmt::Display for IhaAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} steps", self.error, self.trace.len())
    }
}

impl std::error::Error for IhaAbort {}

fn is_identity(h: &Homography) -> bool {
    *h == Homography::identity()
}

/// Sampling with iterative homography adjustment. Per step: warp `z_t` by
/// `grid(H)`, take the guided DDIM step, update `H` during the first
/// `cfg.iha_steps` steps, and warp `z_{t−1}` by the updated `grid(H)`.
#[allow(clippy::too_many_arguments)]
pub fn iha_sample(
    z_big_t: &Raster,
    cond: &Conditioning,
    setup: &IhaSetup<'_>,
    predictor: &dyn NoisePredictor,
    codec: &dyn Codec,
    sched: &NoiseSchedule,
    cfg: &IhaConfig,
    w: GuidanceWeights,
    mut text: Option<&mut dyn GuidanceSource>,
    rng: &mut Rng,
) -> std::result::Result<IhaOutput, IhaAbort> {
    let mut trace = Vec::new();
    macro_rules! tryit {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(IhaAbort { error, trace }),
            }
        };
    }
    tryit!(cfg.validate());
    if cfg.iha_steps > sched.steps() {
        return Err(IhaAbort {
            error: Error::Config(format!("iha_steps {} exceeds {} sampling steps", cfg.iha_steps, sched.steps())),
            trace,
        });
    }
    let needs_scorer = cfg.lr > 0.0 && cfg.iha_steps > 0 || w.lambda_pose > 0.0;
    let scorer = if needs_scorer {
        let mut cand_rng = rng.child(0x1ba);
        let cands = tryit!(sample_candidates(&setup.gt_pose, cfg, &setup.meta, &mut cand_rng));
        Some(tryit!(PoseScorer::new(
            &setup.cam,
            &setup.meta,
            setup.sat_feat,
            cands,
            cfg,
            setup.ref_g,
            setup.ref_s
        )))
    } else {
        None
    };
    let (lh, lw) = (z_big_t.height(), z_big_t.width());
    let mut hn = Homography::identity();
    let mut h_pix = Homography::identity();
    let mut z = z_big_t.clone();

    for t in (1..=sched.steps()).rev() {
        let step_index = sched.steps() - t;
        let z_w = if is_identity(&h_pix) {
            z
        } else {
            warp(&z, &tryit!(homography_grid(&h_pix, lh, lw)), 0.0)
        };
        let eps = tryit!(predictor.predict(&z_w, t, cond));
        let pose_grad = match (&scorer, w.lambda_pose > 0.0) {
            (Some(sc), true) => {
                let z0 = tryit!(crate::diffusion::predict_z0(&z_w, &eps, t, sched));
                let d = tryit!(sc.loss_grad_z0(&z0, &hn));
                let (dz, _) = tryit!(clean_prediction_vjp(predictor, &z_w, t, cond, sched, &d));
                Some(tryit!(dz.scale(-1.0)))
            }
            _ => None,
        };
        let text_grad = match text.as_deref_mut() {
            Some(src) => tryit!(src.gradients(&z_w, t, &eps)).1,
            None => None,
        };
        let out = tryit!(guided_update(&z_w, &eps, t, pose_grad.as_ref(), text_grad.as_ref(), w, sched, rng));

        let mut loss = None;
        if let (Some(sc), true) = (&scorer, step_index < cfg.iha_steps && cfg.lr > 0.0) {
            let (l, _) = tryit!(sc.loss(&out.z_t0, &hn));
            loss = Some(l);
            let g = tryit!(grad_h(|h| sc.loss(&out.z_t0, h).map(|r| r.0), &hn, cfg.fd_step));
            let step = tryit!(sc.preconditioned_step(&g, &hn, lh, lw, cfg));
            let mut p = hn.params();
            for i in 0..8 {
                p[i] -= step[i];
            }
            hn = tryit!(Homography::from_params(p));
            h_pix = tryit!(Homography::from_normalized(&hn, lh, lw));
            let cond_h = h_pix.condition_number();
            if !(cond_h <= cfg.max_condition) {
                trace.push(TraceRecord {
                    step: t,
                    loss,
                    h: h_pix.rows(),
                });
                return Err(IhaAbort {
                    error: Error::Singular(format!("homography condition number {cond_h:e} at step {t}")),
                    trace,
                });
            }
        }
        trace.push(TraceRecord {
            step: t,
            loss,
            h: h_pix.rows(),
        });
        z = if is_identity(&h_pix) {
            out.z_prev
        } else {
            warp(&out.z_prev, &tryit!(homography_grid(&h_pix, lh, lw)), 0.0)
        };
    }
    let image = tryit!(codec.decode(&z));
    Ok(IhaOutput {
        image,
        latent: z,
        h_final: h_pix,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::randn_raster;
    use approx::assert_abs_diff_eq;

    #[test]
    fn info_nce_examples() {
        assert_abs_diff_eq!(info_nce(&[0.3; 9], 4, 0.1).unwrap(), 9f64.ln(), epsilon = 1e-12);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(info_nce(&[1.0, 0.0, 0.0], 0, 1.0).unwrap(), -(e / (e + 2.0)).ln(), epsilon = 1e-12);
        assert!(info_nce(&[1e6, 0.0], 0, 1.0).unwrap() < 1e-12);
        assert!(info_nce(&[1.0, f64::NAN], 0, 1.0).is_err());
        assert!(info_nce(&[1.0], 1, 1.0).is_err());
    }

    #[test]
    fn info_nce_grad_matches_fd() {
        let s = [0.3, -0.2, 0.8, 0.1];
        let g = info_nce_grad(&s, 1, 0.2);
        for k in 0..4 {
            let mut sp = s;
            sp[k] += 1e-6;
            let mut sm = s;
            sm[k] -= 1e-6;
            let fd = (info_nce(&sp, 1, 0.2).unwrap() - info_nce(&sm, 1, 0.2).unwrap()) / 2e-6;
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn grad_h_oracles() {
        let g = grad_h(|h| Ok((h.params()[2] - 3.0).powi(2)), &Homography::identity(), 1e-4).unwrap();
        assert_abs_diff_eq!(g[2], -6.0, epsilon = 1e-6);
        assert!(g.iter().enumerate().all(|(i, v)| i == 2 || v.abs() < 1e-9));
        let g = grad_h(|_| Ok(1.5), &Homography::identity(), 1e-3).unwrap();
        assert_eq!(g, [0.0; 8]);
        let h = Homography::from_params([1.1, 0.2, 3.0, -0.1, 0.9, 2.0, 1e-3, 2e-3]).unwrap();
        let step = 1e-3;
        let g = grad_h(|h| Ok(h.rows().iter().flatten().map(|v| v * v).sum()), &h, step).unwrap();
        for (gi, pi) in g.iter().zip(h.params()) {
            assert!((gi - 2.0 * pi).abs() <= 10.0 * step);
        }
    }

    #[test]
    fn candidates() {
        let meta = SatMeta::new(0.5, 128, 128).unwrap();
        let gt = RelativePose::new(64.0, 64.0, 0.2, 2.0).unwrap();
        let cfg = IhaConfig::default();
        let a = sample_candidates(&gt, &cfg, &meta, &mut Rng::new(5)).unwrap();
        let b = sample_candidates(&gt, &cfg, &meta, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
        assert_eq!(a.poses.iter().filter(|p| **p == gt).count(), 1);
        assert_eq!(*a.gt(), gt);
        let zero = IhaConfig {
            perturb_trans: 0.0,
            perturb_yaw: 0.0,
            ..cfg
        };
        let c = sample_candidates(&gt, &zero, &meta, &mut Rng::new(1)).unwrap();
        assert!(c.poses.iter().all(|p| *p == gt));
        assert!(sample_candidates(&gt, &IhaConfig { k: 1, ..cfg }, &meta, &mut Rng::new(1)).is_err());
        let edge = RelativePose::new(3.0, 64.0, 0.0, 2.0).unwrap();
        assert!(sample_candidates(&edge, &cfg, &meta, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn cosine_rules() {
        let mut rng = Rng::new(2);
        let a = randn_raster((2, 4, 4), &mut rng).unwrap();
        let b = randn_raster((2, 4, 4), &mut rng).unwrap();
        let m = vec![true; 16];
        let s = masked_cosine(&a, &m, &b, &m).unwrap();
        let n = masked_cosine(&a.scale(-1.0).unwrap(), &m, &b, &m).unwrap();
        assert_eq!(s.value, -n.value);
        assert_abs_diff_eq!(masked_cosine(&a, &m, &a, &m).unwrap().value, 1.0, epsilon = 1e-12);
        let z = masked_cosine(&Raster::zeros(2, 4, 4).unwrap(), &m, &b, &m).unwrap();
        assert!(z.degenerate && z.value == 0.0);
    }

    #[test]
    fn rotated_crop_matches_overhead_at_zero_yaw() {
        let cam = CameraModel::pinhole_square(64, 32, 1.6).unwrap();
        let meta = SatMeta::new(0.5, 96, 96).unwrap();
        let pose = RelativePose::new(40.0, 50.0, 0.0, 2.0).unwrap();
        let g = rotated_crop_grid(&pose, &meta, 16);
        for i in 0..16 {
            for j in 0..16 {
                let [u, v] = g.get(i, j).unwrap();
                assert_abs_diff_eq!(u, 40.0 + j as f64 - 8.0, epsilon = 1e-12);
                assert_abs_diff_eq!(v, 50.0 + i as f64 - 8.0, epsilon = 1e-12);
            }
        }
        let turned = RelativePose::new(40.0, 50.0, std::f64::consts::FRAC_PI_2, 2.0).unwrap();
        // facing east, the top row of the window lies east of the camera
        let [u, v] = rotated_crop_grid(&turned, &meta, 16).get(0, 8).unwrap();
        assert_abs_diff_eq!(u, 48.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 50.0, epsilon = 1e-9);
        assert!(camera_overhead_grid(&cam, 2.0, &meta, 16).unwrap().valid_count() > 0);
    }

    #[test]
    fn refiner_adjoint() {
        let r = SeededLinearRefiner::new(3, 3, 5).unwrap();
        let mut rng = Rng::new(1);
        let x = randn_raster((3, 4, 4), &mut rng).unwrap();
        let c = randn_raster((5, 4, 4), &mut rng).unwrap();
        let lhs = r.refine(&x).unwrap().dot(&c).unwrap();
        let rhs = x.dot(&r.vjp(&x, &c).unwrap().unwrap()).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        assert!(r.refine(&Raster::zeros(2, 4, 4).unwrap()).is_err());
    }

    fn smooth(c: usize, h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = Rng::new(seed);
        let waves: Vec<[f64; 4]> = (0..4 * c)
            .map(|_| [rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0.0, 6.0), rng.uniform(0.1, 0.3)])
            .collect();
        Raster::from_fn(c, h, w, |ch, y, x| {
            0.5 + waves[4 * ch..4 * ch + 4]
                .iter()
                .map(|[a, b, p, m]| m * (a * x as f64 + b * y as f64 + p).sin())
                .sum::<f64>()
        })
        .unwrap()
    }

    fn test_scene() -> (CameraModel, SatMeta, RelativePose) {
        (
            CameraModel::pinhole_square(64, 32, std::f64::consts::FRAC_PI_2).unwrap(),
            SatMeta::new(0.5, 64, 64).unwrap(),
            RelativePose::new(32.0, 32.0, 0.4, 2.0).unwrap(),
        )
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (cam, meta, gt) = test_scene();
        let cfg = IhaConfig {
            crop: 32,
            perturb_trans: 6.0,
            ..IhaConfig::default()
        };
        for seed in 0..5 {
            let sat = smooth(3, 64, 64, seed);
            let z0 = smooth(3, 32, 64, 100 + seed);
            let cands = sample_candidates(&gt, &cfg, &meta, &mut Rng::new(seed)).unwrap();
            let refiner = SeededLinearRefiner::new(seed, 3, 4).unwrap();
            let sc = PoseScorer::new(&cam, &meta, &sat, cands, &cfg, &refiner, &refiner).unwrap();
            let hn = Homography::from_params([1.01, 0.02, 0.013, -0.01, 0.98, 0.021, 0.004, -0.003]).unwrap();
            let fd = grad_h(|h| sc.loss(&z0, h).map(|r| r.0), &hn, 1e-5).unwrap();
            let an = sc.loss_grad_h(&z0, &hn).unwrap();
            let dot: f64 = fd.iter().zip(&an).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64; 8]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dot / (norm(&fd) * norm(&an)) >= 0.99, "seed {seed}: {fd:?} vs {an:?}");

            let dz = sc.loss_grad_z0(&z0, &hn).unwrap();
            let mut rng = Rng::new(seed);
            let dir = randn_raster((3, 32, 64), &mut rng).unwrap();
            let e = 1e-6;
            let lp = sc.loss(&z0.axpby(1.0, &dir, e).unwrap(), &hn).unwrap().0;
            let lm = sc.loss(&z0.axpby(1.0, &dir, -e).unwrap(), &hn).unwrap().0;
            let directional = (lp - lm) / (2.0 * e);
            assert_abs_diff_eq!(dz.dot(&dir).unwrap(), directional, epsilon = 1e-5 * (1.0 + directional.abs()));
        }
    }

    #[test]
    fn preconditioned_step_respects_shift_cap() {
        let (cam, meta, gt) = test_scene();
        let cfg = IhaConfig {
            crop: 32,
            perturb_trans: 6.0,
            lr: 1e6,
            max_shift: 0.5,
            ..IhaConfig::default()
        };
        let sat = smooth(3, 64, 64, 1);
        let cands = sample_candidates(&gt, &cfg, &meta, &mut Rng::new(1)).unwrap();
        let sc = PoseScorer::new(&cam, &meta, &sat, cands, &cfg, &IdentityRefiner, &IdentityRefiner).unwrap();
        let hn = Homography::identity();
        let g = [1.0, -2.0, 0.5, 0.3, 0.0, 1.0, 0.01, -0.02];
        let step = sc.preconditioned_step(&g, &hn, 32, 64, &cfg).unwrap();
        let metric = sc.displacement_metric(&hn, 32, 64);
        let v = SVector::<f64, 8>::from(step);
        assert_abs_diff_eq!(v.dot(&(metric * v)).sqrt(), 0.5, epsilon = 1e-6);
        assert!(v.dot(&SVector::from(g)) > 0.0);
    }

    #[test]
    fn disabled_adjustment_matches_plain_sampler() {
        use crate::diffusion::{make_schedule, sample, ScheduleKind, Unguided};
        use crate::models::{gaussian_score_denoiser, IdentityCodec};
        let (cam, meta, gt) = test_scene();
        let sched = make_schedule(20, 1e-3, 0.02, ScheduleKind::Linear, 0.0).unwrap();
        let mean = smooth(3, 32, 64, 3);
        let pred = gaussian_score_denoiser(mean, 0.5, sched.clone()).unwrap();
        let sat = smooth(3, 64, 64, 4);
        let setup = IhaSetup {
            cam,
            meta,
            sat_feat: &sat,
            gt_pose: gt,
            ref_g: &IdentityRefiner,
            ref_s: &IdentityRefiner,
        };
        let z = randn_raster((3, 32, 64), &mut Rng::new(9)).unwrap();
        let cfg = IhaConfig {
            lr: 0.0,
            iha_steps: 10,
            crop: 32,
            perturb_trans: 6.0,
            ..IhaConfig::default()
        };
        let cond = Conditioning::default();
        let run = || {
            iha_sample(&z, &cond, &setup, &pred, &IdentityCodec, &sched, &cfg, GuidanceWeights::off(), None, &mut Rng::new(2))
                .unwrap()
        };
        let out = run();
        let plain = sample(&z, &cond, &pred, &mut Unguided, GuidanceWeights::off(), &sched, &mut Rng::new(2), |_, _, _| {})
            .unwrap();
        assert_eq!(out.latent, plain);
        assert_eq!(out.h_final, Homography::identity());
        assert_eq!(out.trace.len(), 20);
        assert_eq!(run().latent.data(), out.latent.data());

        let too_long = IhaConfig { iha_steps: 21, ..cfg };
        let err = iha_sample(&z, &cond, &setup, &pred, &IdentityCodec, &sched, &too_long, GuidanceWeights::off(), None, &mut Rng::new(2));
        assert!(matches!(err, Err(IhaAbort { error: Error::Config(_), .. })));
    }

    #[test]
    fn singular_homography_aborts_with_trace() {
        use crate::diffusion::{make_schedule, ScheduleKind};
        use crate::models::{warp_oracle_denoiser, IdentityCodec};
        let (cam, meta, gt) = test_scene();
        let sched = make_schedule(10, 1e-3, 0.02, ScheduleKind::Linear, 0.0).unwrap();
        let sat = smooth(3, 64, 64, 5);
        let target = smooth(3, 32, 64, 6);
        let pred = warp_oracle_denoiser(target, sched.clone());
        let setup = IhaSetup {
            cam,
            meta,
            sat_feat: &sat,
            gt_pose: gt,
            ref_g: &IdentityRefiner,
            ref_s: &IdentityRefiner,
        };
        let cfg = IhaConfig {
            lr: 1e3,
            max_shift: 1e3,
            max_condition: 1.5,
            iha_steps: 10,
            crop: 32,
            perturb_trans: 6.0,
            ..IhaConfig::default()
        };
        let z = randn_raster((3, 32, 64), &mut Rng::new(1)).unwrap();
        let err = iha_sample(&z, &Conditioning::default(), &setup, &pred, &IdentityCodec, &sched, &cfg, GuidanceWeights::off(), None, &mut Rng::new(1))
            .unwrap_err();
        assert!(matches!(err.error, Error::Singular(_)), "{err}");
        assert!(!err.trace.is_empty());
    }
}
