//! Geometric cross-attention over height hypotheses.
//!
//! Each ground pixel is intersected with `N` horizontal planes at
//! camera-relative heights `h_i + Δh_i`. The satellite features sampled at the
//! N hits are blended with softmax weights over the per-plane logits; planes
//! whose hit is invalid get a logit of −∞.

use crate::error::{Error, Result};
use crate::geometry::{bilinear, ray_plane_hit, CameraModel, HeightReference, RelativePose, SatMeta};
use crate::raster::Raster;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Reference heights in meters relative to the camera.
pub fn default_heights() -> Vec<f64> {
    vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightHypothesisSet {
    heights: Vec<f64>,
    offsets: Raster,
    logits: Raster,
}

impl HeightHypothesisSet {
    pub fn new(heights: Vec<f64>, offsets: Raster, logits: Raster) -> Result<Self> {
        if heights.is_empty() {
            return Err(Error::InvalidArgument("at least one height hypothesis required".into()));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("height hypothesis".into()));
        }
        offsets.ensure_same_shape(&logits)?;
        if offsets.channels() != heights.len() {
            return Err(Error::InvalidShape(format!(
                "{} offset planes for {} heights",
                offsets.channels(),
                heights.len()
            )));
        }
        Ok(Self {
            heights,
            offsets,
            logits,
        })
    }

    /// Zero offsets and uniform logits on an `h×w` grid.
    pub fn uniform(heights: Vec<f64>, h: usize, w: usize) -> Result<Self> {
        let n = heights.len().max(1);
        Self::new(heights, Raster::zeros(n, h, w)?, Raster::zeros(n, h, w)?)
    }

    pub fn from_predictor(heights: Vec<f64>, predictor: &dyn HypothesisPredictor, q: &Raster) -> Result<Self> {
        let (offsets, logits) = predictor.predict(q, heights.len())?;
        Self::new(heights, offsets, logits)
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn offsets(&self) -> &Raster {
        &self.offsets
    }

    pub fn logits(&self) -> &Raster {
        &self.logits
    }

    /// Reorders planes; `perm[k]` is the source index of new plane `k`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the planes".into()));
        }
        let (_, h, w) = self.offsets.shape();
        let pick = |r: &Raster| Raster::from_fn(n, h, w, |c, y, x| r.get(perm[c], y, x));
        Self::new(
            perm.iter().map(|&p| self.heights[p]).collect(),
            pick(&self.offsets)?,
            pick(&self.logits)?,
        )
    }

    /// Softmax of the logits over the plane axis.
    pub fn attention(&self) -> Raster {
        let (n, h, w) = self.logits.shape();
        let mut out = self.logits.clone().into_vec();
        for p in 0..h * w {
            let m = (0..n).map(|i| out[i * h * w + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (out[i * h * w + p] - m).exp();
                out[i * h * w + p] = e;
                z += e;
            }
            for i in 0..n {
                out[i * h * w + p] /= z;
            }
        }
        Raster::from_vec(n, h, w, out).expect("softmax is finite")
    }
}

/// Produces per-plane offsets and logits from ground features.
pub trait HypothesisPredictor: Send + Sync {
    fn predict(&self, q: &Raster, n: usize) -> Result<(Raster, Raster)>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOffsetUniform;

impl HypothesisPredictor for ZeroOffsetUniform {
    fn predict(&self, q: &Raster, n: usize) -> Result<(Raster, Raster)> {
        let z = Raster::zeros(n, q.height(), q.width())?;
        Ok((z.clone(), z))
    }
}

/// Fixed random per-pixel linear maps of the `Q` channels.
#[derive(Debug, Clone)]
pub struct SeededLinear {
    seed: u64,
}

impl SeededLinear {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl HypothesisPredictor for SeededLinear {
    fn predict(&self, q: &Raster, n: usize) -> Result<(Raster, Raster)> {
        let c = q.channels();
        let mut rng = Rng::new(self.seed);
        let scale = 1.0 / (c as f64).sqrt();
        let mut weights = |rows: usize| -> Vec<f64> { (0..rows * (c + 1)).map(|_| rng.normal() * scale).collect() };
        let w_off = weights(n);
        let w_log = weights(n);
        let apply = |wts: &[f64]| {
            Raster::from_fn(n, q.height(), q.width(), |i, y, x| {
                let row = &wts[i * (c + 1)..(i + 1) * (c + 1)];
                row[c] + (0..c).map(|k| row[k] * q.get(k, y, x)).sum::<f64>()
            })
        };
        Ok((apply(&w_off)?, apply(&w_log)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcaOptions {
    /// Offsets are clamped to `[−offset_clamp, offset_clamp]` meters.
    pub offset_clamp: f64,
    /// Satellite pixels per feature cell of `V`.
    pub feature_stride: usize,
    pub height_reference: HeightReference,
}

impl Default for GcaOptions {
    fn default() -> Self {
        Self {
            offset_clamp: 1.0,
            feature_stride: 1,
            height_reference: HeightReference::Camera,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub offsets: u64,
    pub projections: u64,
    pub samples: u64,
    pub weights: u64,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.offsets + self.projections + self.samples + self.weights
    }
}

#[derive(Debug, Clone)]
pub struct GcaOutput {
    pub features: Raster,
    /// Fraction of ground pixels with no valid plane.
    pub invalid_fraction: f64,
    pub warning: Option<String>,
    pub ops: OpCounter,
}

/// Blends satellite features `v` over the hypotheses for every cell of `q`.
///
/// `q` may be coarser than the camera; cell `(y, x)` looks along the ray of
/// camera pixel `(x·W_cam/W_q, y·H_cam/H_q)`.
#[allow(clippy::too_many_arguments)]
pub fn gca_aggregate(
    q: &Raster,
    v: &Raster,
    cam: &CameraModel,
    pose: &RelativePose,
    meta: &SatMeta,
    hyp: &HeightHypothesisSet,
    opts: &GcaOptions,
) -> Result<GcaOutput> {
    let (hq, wq) = (q.height(), q.width());
    let (_, oh, ow) = hyp.offsets().shape();
    if (oh, ow) != (hq, wq) {
        return Err(Error::InvalidShape(format!("hypotheses {oh}×{ow} vs Q {hq}×{wq}")));
    }
    let stride = opts.feature_stride;
    if stride == 0 {
        return Err(Error::InvalidArgument("feature stride must be ≥ 1".into()));
    }
    if v.width() != meta.width / stride || v.height() != meta.height / stride {
        return Err(Error::InvalidShape(format!(
            "V is {}×{}, expected {}×{} for stride {stride}",
            v.height(),
            v.width(),
            meta.height / stride,
            meta.width / stride
        )));
    }
    if !(opts.offset_clamp >= 0.0) {
        return Err(Error::InvalidArgument("offset clamp must be ≥ 0".into()));
    }
    let n = hyp.len();
    let channels = v.channels();
    let (sx, sy) = (cam.width() as f64 / wq as f64, cam.height() as f64 / hq as f64);
    let s = stride as f64;
    let mut ops = OpCounter::default();
    let mut out = vec![0.0; channels * hq * wq];
    let mut samples = vec![0.0; n * channels];
    let mut logits = vec![f64::NEG_INFINITY; n];
    let mut invalid = 0usize;

    for y in 0..hq {
        for x in 0..wq {
            let (az, el) = cam.ray_unchecked(x as f64 * sx, y as f64 * sy);
            let mut any = false;
            for i in 0..n {
                let dh = hyp.offsets().get(i, y, x).clamp(-opts.offset_clamp, opts.offset_clamp);
                let h = opts.height_reference.to_camera_relative(hyp.heights()[i], pose.cam_height) + dh;
                ops.offsets += 1;
                let hit = ray_plane_hit(pose, meta, az, el, h).filter(|&(u, vv)| meta.contains(u, vv));
                ops.projections += 1;
                logits[i] = f64::NEG_INFINITY;
                if let Some((u, vv)) = hit {
                    let (fx, fy) = (u / s, vv / s);
                    let mut ok = true;
                    for c in 0..channels {
                        match bilinear(v, c, fx, fy) {
                            Some(val) => samples[i * channels + c] = val,
                            None => ok = false,
                        }
                    }
                    ops.samples += 1;
                    if ok {
                        logits[i] = hyp.logits().get(i, y, x);
                        any = true;
                    }
                }
            }
            if !any {
                invalid += 1;
                continue;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for i in 0..n {
                let a = (logits[i] - m).exp() / z;
                ops.weights += 1;
                if a == 0.0 {
                    continue;
                }
                for c in 0..channels {
                    out[(c * hq + y) * wq + x] += a * samples[i * channels + c];
                }
            }
        }
    }

    let invalid_fraction = invalid as f64 / (hq * wq) as f64;
    let warning = (invalid_fraction > 0.5).then(|| {
        let msg = format!("{:.1}% of ground pixels have no valid height plane", 100.0 * invalid_fraction);
        log::warn!("{msg}");
        msg
    });
    Ok(GcaOutput {
        features: Raster::from_vec(channels, hq, wq, out)?,
        invalid_fraction,
        warning,
        ops,
    })
}

/// `4·N·H·W`.
pub fn gca_flop_estimate(n: usize, h: usize, w: usize) -> Result<u64> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    [n, h, w]
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::DimensionOverflow(format!("4·{n}·{h}·{w}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ground_plane_grid, warp};
    use crate::rng::randn_raster;
    use approx::assert_abs_diff_eq;

    fn setup() -> (CameraModel, RelativePose, SatMeta) {
        let cam = CameraModel::panorama(64, 16, 0.5, -1.2).unwrap();
        let meta = SatMeta::new(0.5, 64, 64).unwrap();
        let pose = RelativePose::new(32.0, 32.0, 0.3, 2.0).unwrap();
        (cam, pose, meta)
    }

    #[test]
    fn heights() {
        let h = default_heights();
        assert_eq!(h, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(h.len(), 8);
        assert!(!h.contains(&0.0));
    }

    #[test]
    fn flop_estimate() {
        assert_eq!(gca_flop_estimate(8, 16, 64).unwrap(), 32768);
        assert_eq!(gca_flop_estimate(1, 1, 1).unwrap(), 4);
        assert!(gca_flop_estimate(0, 1, 1).is_err());
        assert!(gca_flop_estimate(usize::MAX, usize::MAX, 2).is_err());
    }

    #[test]
    fn single_ground_plane_is_the_plane_warp() {
        let (cam, pose, meta) = setup();
        let v = randn_raster((3, 64, 64), &mut Rng::new(1)).unwrap();
        let q = Raster::zeros(1, 16, 64).unwrap();
        let hyp = HeightHypothesisSet::uniform(vec![-2.0], 16, 64).unwrap();
        let out = gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
        let expect = warp(&v, &ground_plane_grid(&cam, &pose, &meta), 0.0);
        for (a, b) in out.features.data().iter().zip(expect.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(out.invalid_fraction > 0.0);
        assert_eq!(out.warning.is_some(), out.invalid_fraction > 0.5);
    }

    #[test]
    fn softmax_weights_examples() {
        let (cam, pose, meta) = setup();
        let v = Raster::from_fn(1, 64, 64, |_, y, x| {
            let d = ((x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2)).sqrt();
            if d < 3.0 { 2.0 } else { 4.0 }
        })
        .unwrap();
        let q = Raster::zeros(1, 16, 64).unwrap();
        let y = 15;
        let x = 10;
        let (az, el) = cam.ray_unchecked(x as f64 * 1.0, y as f64);
        let near = ray_plane_hit(&pose, &meta, az, el, -1.0).unwrap();
        let far = ray_plane_hit(&pose, &meta, az, el, -5.0).unwrap();
        let dist = |p: (f64, f64)| ((p.0 - 32.0).powi(2) + (p.1 - 32.0).powi(2)).sqrt();
        assert!(dist(near) < 2.0 && dist(far) > 4.0, "{near:?} {far:?}");
        let mut logits = Raster::zeros(2, 16, 64).unwrap();
        let hyp = HeightHypothesisSet::new(vec![-1.0, -5.0], Raster::zeros(2, 16, 64).unwrap(), logits.clone()).unwrap();
        let out = gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
        assert_abs_diff_eq!(out.features.get(0, y, x), 3.0, epsilon = 1e-12);
        logits.set(0, y, x, 3f64.ln()).unwrap();
        let hyp = HeightHypothesisSet::new(vec![-1.0, -5.0], Raster::zeros(2, 16, 64).unwrap(), logits).unwrap();
        let out = gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
        assert_abs_diff_eq!(out.features.get(0, y, x), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn op_count_is_four_per_plane_pixel() {
        let (cam, pose, meta) = setup();
        let v = randn_raster((2, 64, 64), &mut Rng::new(2)).unwrap();
        let q = randn_raster((2, 16, 64), &mut Rng::new(3)).unwrap();
        let mut counts = Vec::new();
        for n in [4usize, 8] {
            let heights: Vec<f64> = default_heights().into_iter().take(n).collect();
            let hyp = HeightHypothesisSet::from_predictor(heights, &SeededLinear::new(4), &q).unwrap();
            let out = gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
            assert!(out.ops.total() <= gca_flop_estimate(n, 16, 64).unwrap());
            counts.push(out.ops.offsets + out.ops.projections);
        }
        assert_abs_diff_eq!(counts[1] as f64 / counts[0] as f64, 2.0, epsilon = 0.01);
    }

    #[test]
    fn stride_scales_coordinates() {
        let (cam, pose, meta) = setup();
        let v = Raster::from_fn(1, 64, 64, |_, y, x| (x + 3 * y) as f64 / 256.0).unwrap();
        let v2 = Raster::from_fn(1, 32, 32, |_, y, x| (2 * x + 6 * y) as f64 / 256.0).unwrap();
        let q = Raster::zeros(1, 16, 64).unwrap();
        let hyp = HeightHypothesisSet::uniform(vec![-2.0], 16, 64).unwrap();
        let a = gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
        let opts = GcaOptions {
            feature_stride: 2,
            ..Default::default()
        };
        let b = gca_aggregate(&q, &v2, &cam, &pose, &meta, &hyp, &opts).unwrap();
        let mut compared = 0;
        for y in 0..16 {
            for x in 0..64 {
                let (pa, pb) = (a.features.get(0, y, x), b.features.get(0, y, x));
                if pa > 0.0 && pb > 0.0 && pa < 0.9 {
                    assert_abs_diff_eq!(pa, pb, epsilon = 1e-9);
                    compared += 1;
                }
            }
        }
        assert!(compared > 50);
        assert!(gca_aggregate(&q, &v, &cam, &pose, &meta, &hyp, &opts).is_err());
    }

    #[test]
    fn ground_reference_heights() {
        let (cam, pose, meta) = setup();
        let v = randn_raster((1, 64, 64), &mut Rng::new(5)).unwrap();
        let q = Raster::zeros(1, 16, 64).unwrap();
        let cam_rel = HeightHypothesisSet::uniform(vec![-2.0], 16, 64).unwrap();
        let ground = HeightHypothesisSet::uniform(vec![0.0], 16, 64).unwrap();
        let opts = GcaOptions {
            height_reference: HeightReference::Ground,
            ..Default::default()
        };
        let a = gca_aggregate(&q, &v, &cam, &pose, &meta, &cam_rel, &GcaOptions::default()).unwrap();
        let b = gca_aggregate(&q, &v, &cam, &pose, &meta, &ground, &opts).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn construction_errors() {
        let z = Raster::zeros(2, 4, 4).unwrap();
        assert!(HeightHypothesisSet::new(vec![], z.clone(), z.clone()).is_err());
        assert!(HeightHypothesisSet::new(vec![1.0], z.clone(), z.clone()).is_err());
        let hyp = HeightHypothesisSet::new(vec![1.0, 2.0], z.clone(), z).unwrap();
        assert!(hyp.permuted(&[0, 0]).is_err());
        let att = hyp.attention();
        assert!(att.data().iter().all(|a| (a - 0.5).abs() < 1e-15));
    }
}
