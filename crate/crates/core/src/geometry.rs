//! Camera rays, ground↔satellite projection, homography grids and the
//! bilinear sampling operator.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel `(u, v)` has its sample point at exactly `(u, v)`, with
//!   `u ∈ [0, W)` and `v ∈ [0, H)`.
//! * Satellite rasters are north-up: `+u` points east, `+v` points south.
//! * Yaw is measured clockwise from north; yaw 0 looks toward `−v`.
//! * Heights passed to [`project_ground_to_sat`] are relative to the camera
//!   optical center, so the ground plane sits at `h = −cam_height`.

use crate::error::{Error, Result};
use crate::raster::Raster;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Rays closer to the horizon than this never hit a horizontal plane.
const MIN_ELEVATION: f64 = 1e-6;
/// Homogeneous coordinates with a smaller third component are at infinity.
const MIN_HOMOGENEOUS_W: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraModel {
    /// Equirectangular panorama spanning 360° of azimuth.
    Panorama {
        width: usize,
        height: usize,
        elev_top: f64,
        elev_bottom: f64,
    },
    /// Limited field-of-view pinhole camera looking at the horizon.
    Pinhole {
        width: usize,
        height: usize,
        hfov: f64,
        vfov: f64,
    },
}

impl CameraModel {
    pub fn panorama(width: usize, height: usize, elev_top: f64, elev_bottom: f64) -> Result<Self> {
        let cam = CameraModel::Panorama {
            width,
            height,
            elev_top,
            elev_bottom,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pinhole(width: usize, height: usize, hfov: f64, vfov: f64) -> Result<Self> {
        let cam = CameraModel::Pinhole {
            width,
            height,
            hfov,
            vfov,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// 512×128 panorama spanning ±45° around the horizon.
    pub fn default_panorama() -> Self {
        CameraModel::Panorama {
            width: 512,
            height: 128,
            elev_top: PI / 4.0,
            elev_bottom: -PI / 4.0,
        }
    }

    /// Pinhole with square pixels for the given horizontal field of view.
    pub fn pinhole_square(width: usize, height: usize, hfov: f64) -> Result<Self> {
        let vfov = 2.0 * ((hfov / 2.0).tan() * height as f64 / width as f64).atan();
        Self::pinhole(width, height, hfov, vfov)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width() == 0 || self.height() == 0 {
            return Err(Error::InvalidArgument("camera with zero size".into()));
        }
        match *self {
            CameraModel::Panorama {
                elev_top,
                elev_bottom,
                ..
            } => {
                let in_range = |e: f64| e > -PI / 2.0 && e <= PI / 2.0;
                if !(elev_top > elev_bottom && in_range(elev_top) && in_range(elev_bottom)) {
                    return Err(Error::InvalidArgument(format!(
                        "panorama elevation span [{elev_bottom}, {elev_top}] invalid"
                    )));
                }
            }
            CameraModel::Pinhole { hfov, vfov, .. } => {
                let ok = |f: f64| f > 0.0 && f < PI;
                if !(ok(hfov) && ok(vfov)) {
                    return Err(Error::InvalidArgument(format!(
                        "pinhole fov ({hfov}, {vfov}) outside (0, π)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        match *self {
            CameraModel::Panorama { width, .. } | CameraModel::Pinhole { width, .. } => width,
        }
    }

    pub fn height(&self) -> usize {
        match *self {
            CameraModel::Panorama { height, .. } | CameraModel::Pinhole { height, .. } => height,
        }
    }

    pub fn is_panorama(&self) -> bool {
        matches!(self, CameraModel::Panorama { .. })
    }

    /// Focal lengths and principal point `(fx, fy, cx, cy)` of a pinhole camera.
    pub fn intrinsics(&self) -> Option<(f64, f64, f64, f64)> {
        match *self {
            CameraModel::Pinhole {
                width,
                height,
                hfov,
                vfov,
            } => {
                let (w, h) = (width as f64, height as f64);
                Some((
                    (w / 2.0) / (hfov / 2.0).tan(),
                    (h / 2.0) / (vfov / 2.0).tan(),
                    w / 2.0,
                    h / 2.0,
                ))
            }
            CameraModel::Panorama { .. } => None,
        }
    }

    /// Camera-local `(azimuth, elevation)` of the ray through pixel `(u, v)`.
    ///
    /// Azimuth 0 is forward and grows to the right; elevation is positive
    /// above the horizon.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
            return Err(Error::InvalidArgument(format!(
                "pixel ({u}, {v}) outside {w}×{h}"
            )));
        }
        Ok(self.ray_unchecked(u, v))
    }

    pub(crate) fn ray_unchecked(&self, u: f64, v: f64) -> (f64, f64) {
        match *self {
            CameraModel::Panorama {
                width,
                height,
                elev_top,
                elev_bottom,
            } => (
                2.0 * PI * u / width as f64 - PI,
                elev_top - (v / height as f64) * (elev_top - elev_bottom),
            ),
            CameraModel::Pinhole { .. } => {
                let (fx, fy, cx, cy) = self.intrinsics().unwrap();
                let x = (u - cx) / fx;
                let y = (cy - v) / fy;
                (x.atan(), y.atan2((1.0 + x * x).sqrt()))
            }
        }
    }

    /// Inverse of [`CameraModel::pixel_to_ray`]; `None` outside the image.
    pub fn ray_to_pixel(&self, azimuth: f64, elevation: f64) -> Option<(f64, f64)> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        let (u, v) = match *self {
            CameraModel::Panorama {
                elev_top,
                elev_bottom,
                ..
            } => {
                let u = ((wrap_angle(azimuth) + PI) / (2.0 * PI) * w).rem_euclid(w);
                let v = (elev_top - elevation) / (elev_top - elev_bottom) * h;
                (u, v)
            }
            CameraModel::Pinhole { .. } => {
                let az = wrap_angle(azimuth);
                if az.abs() >= PI / 2.0 - 1e-9 {
                    return None;
                }
                let (fx, fy, cx, cy) = self.intrinsics().unwrap();
                let x = az.tan();
                let y = elevation.tan() * (1.0 + x * x).sqrt();
                (cx + fx * x, cy - fy * y)
            }
        };
        (u >= 0.0 && u < w && v >= 0.0 && v < h).then_some((u, v))
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Ground camera pose expressed in satellite pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub sat_u: f64,
    pub sat_v: f64,
    /// Radians clockwise from north.
    pub yaw: f64,
    /// Meters above the ground plane.
    pub cam_height: f64,
}

impl RelativePose {
    pub fn new(sat_u: f64, sat_v: f64, yaw: f64, cam_height: f64) -> Result<Self> {
        if !(cam_height > 0.0) || !sat_u.is_finite() || !sat_v.is_finite() || !yaw.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pose ({sat_u}, {sat_v}, {yaw}, {cam_height}) invalid"
            )));
        }
        Ok(Self {
            sat_u,
            sat_v,
            yaw: wrap_angle(yaw),
            cam_height,
        })
    }

    /// The same pose moved by `(right, forward)` meters in its own frame.
    pub fn moved(&self, meta: &SatMeta, right_m: f64, forward_m: f64) -> RelativePose {
        let (de, dn) = camera_to_world(self.yaw, forward_m, right_m);
        RelativePose {
            sat_u: self.sat_u + de / meta.meters_per_pixel,
            sat_v: self.sat_v - dn / meta.meters_per_pixel,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatMeta {
    pub meters_per_pixel: f64,
    pub width: usize,
    pub height: usize,
}

impl SatMeta {
    pub fn new(meters_per_pixel: f64, width: usize, height: usize) -> Result<Self> {
        if !(meters_per_pixel > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "satellite meta ({meters_per_pixel}, {width}, {height}) invalid"
            )));
        }
        Ok(Self {
            meters_per_pixel,
            width,
            height,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// World `(east, north)` meters of satellite pixel `(u, v)`, origin at the raster center.
    pub fn pixel_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        let mpp = self.meters_per_pixel;
        (
            (u - self.width as f64 / 2.0) * mpp,
            -(v - self.height as f64 / 2.0) * mpp,
        )
    }

    pub fn world_to_pixel(&self, east: f64, north: f64) -> (f64, f64) {
        let mpp = self.meters_per_pixel;
        (
            east / mpp + self.width as f64 / 2.0,
            -north / mpp + self.height as f64 / 2.0,
        )
    }
}

/// Rotates a camera-frame displacement into world `(east, north)`.
pub fn camera_to_world(yaw: f64, forward: f64, right: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (forward * s + right * c, forward * c - right * s)
}

/// Heights as they are given to the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightReference {
    /// Relative to the camera optical center (ground plane at `−cam_height`).
    #[default]
    Camera,
    /// Relative to the ground plane.
    Ground,
}

impl HeightReference {
    /// Converts `h` into a camera-relative height.
    pub fn to_camera_relative(self, h: f64, cam_height: f64) -> f64 {
        match self {
            HeightReference::Camera => h,
            HeightReference::Ground => h - cam_height,
        }
    }
}

/// Satellite position where a camera ray meets the plane at camera-relative
/// height `h`, without bounds checks.
pub fn ray_plane_hit(
    pose: &RelativePose,
    meta: &SatMeta,
    azimuth: f64,
    elevation: f64,
    h: f64,
) -> Option<(f64, f64)> {
    if elevation.abs() < MIN_ELEVATION || h == 0.0 || h.signum() != elevation.signum() {
        return None;
    }
    let range = h / elevation.tan();
    let (s, c) = (pose.yaw + azimuth).sin_cos();
    let (d_north, d_east) = (range * c, range * s);
    let mpp = meta.meters_per_pixel;
    Some((pose.sat_u + d_east / mpp, pose.sat_v - d_north / mpp))
}

/// Maps ground pixel `(u_g, v_g)` at camera-relative height `h` to satellite
/// pixel coordinates. `Ok(None)` marks an invalid projection.
pub fn project_ground_to_sat(
    cam: &CameraModel,
    pose: &RelativePose,
    meta: &SatMeta,
    u_g: f64,
    v_g: f64,
    h: f64,
) -> Result<Option<(f64, f64)>> {
    let (az, el) = cam.pixel_to_ray(u_g, v_g)?;
    Ok(ray_plane_hit(pose, meta, az, el, h).filter(|&(u, v)| meta.contains(u, v)))
}

/// Ground pixel observing the ground-plane point under satellite position
/// `(u_s, v_s)`; `None` at the camera foot point or outside the camera.
pub fn sat_to_ground(
    cam: &CameraModel,
    pose: &RelativePose,
    meta: &SatMeta,
    u_s: f64,
    v_s: f64,
) -> Option<(f64, f64)> {
    let mpp = meta.meters_per_pixel;
    let d_east = (u_s - pose.sat_u) * mpp;
    let d_north = -(v_s - pose.sat_v) * mpp;
    let range = d_east.hypot(d_north);
    if range < 1e-9 {
        return None;
    }
    let azimuth = wrap_angle(d_east.atan2(d_north) - pose.yaw);
    let elevation = (-pose.cam_height / range).atan();
    cam.ray_to_pixel(azimuth, elevation)
}

/// Per-output-pixel source coordinates plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    height: usize,
    width: usize,
    coords: Vec<Option<[f64; 2]>>,
}

impl SampleGrid {
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> Option<[f64; 2]>,
    ) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Source `[x, y]` for output pixel `(y, x)`.
    pub fn get(&self, y: usize, x: usize) -> Option<[f64; 2]> {
        self.coords[y * self.width + x]
    }

    pub fn coords(&self) -> &[Option<[f64; 2]>] {
        &self.coords
    }

    pub fn valid_count(&self) -> usize {
        self.coords.iter().filter(|c| c.is_some()).count()
    }

    /// Validity mask as a 1-channel raster of 0/1.
    pub fn mask(&self) -> Raster {
        Raster::from_fn(1, self.height, self.width, |_, y, x| {
            self.get(y, x).map_or(0.0, |_| 1.0)
        })
        .expect("grid has positive dims")
    }
}

/// Satellite-aligned `crop×crop` window around the camera, each cell mapped
/// to the ground pixel that sees it under the ground-plane assumption.
///
/// Cell `(i, j)` sits at satellite `(sat_u + j − crop/2, sat_v + i − crop/2)`.
pub fn overhead_grid(
    cam: &CameraModel,
    pose: &RelativePose,
    meta: &SatMeta,
    crop: usize,
) -> Result<SampleGrid> {
    if crop == 0 {
        return Err(Error::InvalidArgument("crop must be positive".into()));
    }
    if crop > meta.width.min(meta.height) {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} exceeds satellite {}×{}",
            meta.width, meta.height
        )));
    }
    let half = (crop / 2) as f64;
    Ok(SampleGrid::from_fn(crop, crop, |i, j| {
        sat_to_ground(
            cam,
            pose,
            meta,
            pose.sat_u + j as f64 - half,
            pose.sat_v + i as f64 - half,
        )
        .map(|(u, v)| [u, v])
    }))
}

/// For every ground pixel, the satellite coordinate of its ground-plane hit.
pub fn ground_plane_grid(cam: &CameraModel, pose: &RelativePose, meta: &SatMeta) -> SampleGrid {
    plane_grid(cam, pose, meta, -pose.cam_height, 1.0)
}

/// For every ground pixel, the satellite coordinate (divided by `stride`) of
/// its hit with the plane at camera-relative height `h`.
pub fn plane_grid(
    cam: &CameraModel,
    pose: &RelativePose,
    meta: &SatMeta,
    h: f64,
    stride: f64,
) -> SampleGrid {
    SampleGrid::from_fn(cam.height(), cam.width(), |v, u| {
        let (az, el) = cam.ray_unchecked(u as f64, v as f64);
        ray_plane_hit(pose, meta, az, el, h)
            .filter(|&(us, vs)| meta.contains(us, vs))
            .map(|(us, vs)| [us / stride, vs / stride])
    })
}

/// Ground-plane reprojection between two poses of the same camera: sampling
/// a render from `from` with this grid approximates a render from `to` on
/// ground pixels.
pub fn reprojection_grid(
    cam: &CameraModel,
    from: &RelativePose,
    to: &RelativePose,
    meta: &SatMeta,
) -> SampleGrid {
    SampleGrid::from_fn(cam.height(), cam.width(), |v, u| {
        let (az, el) = cam.ray_unchecked(u as f64, v as f64);
        let (us, vs) = ray_plane_hit(to, meta, az, el, -to.cam_height)?;
        sat_to_ground(cam, from, meta, us, vs).map(|(x, y)| [x, y])
    })
}

/// 3×3 projective transform on pixel coordinates with unit bottom-right entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Renormalizes so that `m[2][2] = 1`; rejects singular or non-finite matrices.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::Singular(format!("bottom-right entry {s}")));
        }
        let m = m / s;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography entry".into()));
        }
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Singular(format!("determinant {det:e}")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Self { m }
    }

    /// Scaling about the origin.
    pub fn scale(s: f64) -> Result<Self> {
        Self::new(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Builds from the eight free entries in row-major order (`m[2][2] = 1`).
    pub fn from_params(p: [f64; 8]) -> Result<Self> {
        Self::new(Matrix3::new(
            p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0,
        ))
    }

    pub fn params(&self) -> [f64; 8] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.m[(i, j)]))
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Ratio of largest to smallest singular value.
    pub fn condition_number(&self) -> f64 {
        let sv = self.m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Singular("inverse".into()))?;
        Self::new(inv)
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w <= MIN_HOMOGENEOUS_W {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }

    /// Conjugates a homography acting on normalized coordinates
    /// (`[−1, 1]` across the raster) into pixel coordinates.
    pub fn from_normalized(hn: &Homography, height: usize, width: usize) -> Result<Self> {
        let n = normalizer(height, width);
        let n_inv = n.try_inverse().expect("normalizer is invertible");
        Self::new(n_inv * hn.m * n)
    }

    pub fn to_normalized(&self, height: usize, width: usize) -> Result<Self> {
        let n = normalizer(height, width);
        let n_inv = n.try_inverse().expect("normalizer is invertible");
        Self::new(n * self.m * n_inv)
    }

    /// Plane-induced homography of a pinhole camera moving over flat ground.
    ///
    /// The camera moves `lateral_m` to its right and `forward_m` ahead, then
    /// turns by `yaw` (clockwise). The result maps pixels of the moved camera
    /// to pixels of the original one, so `warp(render, homography_grid(H))`
    /// re-renders the ground plane from the new pose.
    pub fn ground_plane_motion(
        cam: &CameraModel,
        cam_height: f64,
        lateral_m: f64,
        forward_m: f64,
        yaw: f64,
    ) -> Result<Self> {
        let (fx, fy, cx, cy) = cam.intrinsics().ok_or_else(|| {
            Error::Unsupported("plane-induced homography needs a pinhole camera".into())
        })?;
        let h = cam_height;
        let (s, c) = yaw.sin_cos();
        let motion = Matrix3::new(
            -h * c,
            lateral_m,
            -h * s,
            0.0,
            -h,
            0.0,
            h * s,
            forward_m,
            -h * c,
        );
        let k = Matrix3::new(fx, 0.0, cx, 0.0, -fy, cy, 0.0, 0.0, 1.0);
        let k_inv = k.try_inverse().expect("intrinsics are invertible");
        Self::new(k * motion * k_inv)
    }
}

fn normalizer(height: usize, width: usize) -> Matrix3<f64> {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    Matrix3::new(1.0 / hw, 0.0, -1.0, 0.0, 1.0 / hh, -1.0, 0.0, 0.0, 1.0)
}

/// Matrix product `a·b`, renormalized.
pub fn homography_apply(a: &Homography, b: &Homography) -> Result<Homography> {
    Homography::new(a.m * b.m)
}

/// Source coordinate `H·(x, y, 1)` for each output pixel of a
/// `height×width` raster; invalid at infinity or outside the source.
pub fn homography_grid(h: &Homography, height: usize, width: usize) -> Result<SampleGrid> {
    if h.determinant().abs() < 1e-12 {
        return Err(Error::Singular("homography grid".into()));
    }
    let (wf, hf) = (width as f64, height as f64);
    Ok(SampleGrid::from_fn(height, width, |y, x| {
        h.apply(x as f64, y as f64)
            .filter(|&(sx, sy)| sx >= 0.0 && sx < wf && sy >= 0.0 && sy < hf)
            .map(|(sx, sy)| [sx, sy])
    }))
}

/// Bilinear weights at `(x, y)`: four `(y, x, weight)` taps, border-clamped.
#[inline]
pub(crate) fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> [(usize, usize, f64); 4] {
    let x0 = (x.floor().max(0.0) as usize).min(width - 1);
    let y0 = (y.floor().max(0.0) as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = (x - x0 as f64).clamp(0.0, 1.0);
    let fy = (y - y0 as f64).clamp(0.0, 1.0);
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}

#[inline]
pub(crate) fn in_bounds(width: usize, height: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64
}

/// Bilinear sample of channel `c`; `None` outside `[0, W)×[0, H)`.
pub fn bilinear(src: &Raster, c: usize, x: f64, y: f64) -> Option<f64> {
    if !in_bounds(src.width(), src.height(), x, y) {
        return None;
    }
    let plane = src.plane(c);
    let w = src.width();
    Some(
        bilinear_taps(w, src.height(), x, y)
            .iter()
            .map(|&(ty, tx, wt)| wt * plane[ty * w + tx])
            .sum(),
    )
}

/// Spatial gradient `(∂/∂x, ∂/∂y)` of the bilinear interpolant of channel `c`.
pub(crate) fn bilinear_gradient(src: &Raster, c: usize, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (src.width(), src.height());
    let plane = src.plane(c);
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64).clamp(0.0, 1.0);
    let fy = (y - y0 as f64).clamp(0.0, 1.0);
    let p = |yy: usize, xx: usize| plane[yy * w + xx];
    let dx = if x1 == x0 {
        0.0
    } else {
        (1.0 - fy) * (p(y0, x1) - p(y0, x0)) + fy * (p(y1, x1) - p(y1, x0))
    };
    let dy = if y1 == y0 {
        0.0
    } else {
        (1.0 - fx) * (p(y1, x0) - p(y0, x0)) + fx * (p(y1, x1) - p(y0, x1))
    };
    (dx, dy)
}

/// Samples `src` at every valid grid coordinate; invalid cells get `fill`.
pub fn warp(src: &Raster, grid: &SampleGrid, fill: f64) -> Raster {
    let (gh, gw) = (grid.height(), grid.width());
    let (w, h) = (src.width(), src.height());
    let mut data = vec![fill; src.channels() * gh * gw];
    for (i, coord) in grid.coords().iter().enumerate() {
        let Some([x, y]) = *coord else { continue };
        if !in_bounds(w, h, x, y) {
            continue;
        }
        let taps = bilinear_taps(w, h, x, y);
        for c in 0..src.channels() {
            let plane = src.plane(c);
            data[c * gh * gw + i] = taps.iter().map(|&(ty, tx, wt)| wt * plane[ty * w + tx]).sum();
        }
    }
    Raster::from_vec(src.channels(), gh, gw, data).expect("warp preserves finiteness")
}

/// Adjoint of [`warp`] with respect to `src` (fill contributes nothing):
/// scatters `cotangent` back through the bilinear weights.
pub fn warp_adjoint(
    cotangent: &Raster,
    grid: &SampleGrid,
    src_height: usize,
    src_width: usize,
) -> Raster {
    let (gh, gw) = (grid.height(), grid.width());
    let channels = cotangent.channels();
    let mut data = vec![0.0; channels * src_height * src_width];
    for (i, coord) in grid.coords().iter().enumerate() {
        let Some([x, y]) = *coord else { continue };
        if !in_bounds(src_width, src_height, x, y) {
            continue;
        }
        let taps = bilinear_taps(src_width, src_height, x, y);
        for c in 0..channels {
            let g = cotangent.data()[c * gh * gw + i];
            for &(ty, tx, wt) in &taps {
                data[(c * src_height + ty) * src_width + tx] += wt * g;
            }
        }
    }
    Raster::from_vec(channels, src_height, src_width, data).expect("adjoint is finite")
}

/// Circular horizontal shift of a panorama by `shift_px` columns
/// (output column `x` reads source column `x + shift_px`), bilinear in the
/// fractional part.
pub fn roll_columns(src: &Raster, shift_px: f64) -> Raster {
    let w = src.width() as f64;
    Raster::from_fn(src.channels(), src.height(), src.width(), |c, y, x| {
        let sx = (x as f64 + shift_px).rem_euclid(w);
        let x0 = sx.floor() as usize % src.width();
        let x1 = (x0 + 1) % src.width();
        let f = sx - sx.floor();
        (1.0 - f) * src.get(c, y, x0) + f * src.get(c, y, x1)
    })
    .expect("roll preserves finiteness")
}

/// Column shift equivalent to turning a panorama camera by `yaw_delta`.
pub fn panorama_yaw_shift(cam: &CameraModel, yaw_delta: f64) -> f64 {
    yaw_delta / (2.0 * PI) * cam.width() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pano() -> CameraModel {
        CameraModel::default_panorama()
    }

    #[test]
    fn panorama_rays() {
        let cam = pano();
        let (a, e) = cam.pixel_to_ray(256.0, 64.0).unwrap();
        assert_abs_diff_eq!(a, 0.0);
        assert_abs_diff_eq!(e, 0.0);
        let (a, e) = cam.pixel_to_ray(0.0, 64.0).unwrap();
        assert_abs_diff_eq!(a, -PI);
        assert_abs_diff_eq!(e, 0.0);
        let (a, e) = cam.pixel_to_ray(256.0, 0.0).unwrap();
        assert_abs_diff_eq!(a, 0.0);
        assert_abs_diff_eq!(e, PI / 4.0);
        assert!(cam.pixel_to_ray(512.0, 0.0).is_err());
        assert!(cam.pixel_to_ray(-0.1, 0.0).is_err());
    }

    #[test]
    fn pinhole_ray_inverse() {
        let cam = CameraModel::pinhole_square(256, 128, PI / 2.0).unwrap();
        for &(u, v) in &[(0.0, 0.0), (128.0, 64.0), (200.5, 100.25), (255.0, 127.0)] {
            let (a, e) = cam.pixel_to_ray(u, v).unwrap();
            let (u2, v2) = cam.ray_to_pixel(a, e).unwrap();
            assert_abs_diff_eq!(u, u2, epsilon = 1e-9);
            assert_abs_diff_eq!(v, v2, epsilon = 1e-9);
        }
        assert!(cam.ray_to_pixel(PI * 0.9, -0.1).is_none());
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::panorama(512, 128, -0.1, 0.1).is_err());
        assert!(CameraModel::pinhole(10, 10, PI, 1.0).is_err());
        assert!(RelativePose::new(1.0, 1.0, 0.0, 0.0).is_err());
        assert!(SatMeta::new(0.0, 10, 10).is_err());
    }

    fn pixel_for(cam: &CameraModel, az: f64, el: f64) -> (f64, f64) {
        cam.ray_to_pixel(az, el).unwrap()
    }

    // The default ±45° span puts elevation −π/4 at v = H, just outside the
    // raster, so the worked examples use a wider panorama.
    fn wide_pano() -> CameraModel {
        CameraModel::panorama(512, 128, PI / 3.0, -PI / 3.0).unwrap()
    }

    #[test]
    fn projection_worked_examples() {
        let cam = wide_pano();
        let pose = RelativePose::new(128.0, 128.0, 0.0, 2.0).unwrap();
        let meta = SatMeta::new(0.5, 256, 256).unwrap();
        let (u, v) = pixel_for(&cam, 0.0, -PI / 4.0);
        let (us, vs) = project_ground_to_sat(&cam, &pose, &meta, u, v, -2.0)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(us, 128.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vs, 124.0, epsilon = 1e-9);
        assert!(project_ground_to_sat(&cam, &pose, &meta, u, v, 3.0)
            .unwrap()
            .is_none());
        let (u, v) = pixel_for(&cam, PI / 2.0, -PI / 4.0);
        let (us, vs) = project_ground_to_sat(&cam, &pose, &meta, u, v, -2.0)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(us, 132.0, epsilon = 1e-9);
        assert_abs_diff_eq!(vs, 128.0, epsilon = 1e-9);
    }

    #[test]
    fn horizon_ray_is_invalid() {
        let cam = pano();
        let pose = RelativePose::new(128.0, 128.0, 0.0, 2.0).unwrap();
        let meta = SatMeta::new(0.5, 256, 256).unwrap();
        assert!(project_ground_to_sat(&cam, &pose, &meta, 10.0, 64.0, -2.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn far_hit_outside_satellite_is_invalid() {
        let cam = pano();
        let pose = RelativePose::new(128.0, 128.0, 0.0, 2.0).unwrap();
        let meta = SatMeta::new(0.5, 256, 256).unwrap();
        // elevation just below the horizon: range ≈ 2 / tan(0.5°) ≈ 229 m ≫ 64 m
        let (u, v) = pixel_for(&cam, 0.0, -0.5f64.to_radians());
        assert!(project_ground_to_sat(&cam, &pose, &meta, u, v, -2.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn overhead_grid_examples() {
        let cam = wide_pano();
        let pose = RelativePose::new(128.0, 128.0, 0.0, 2.0).unwrap();
        let meta = SatMeta::new(0.5, 256, 256).unwrap();
        let grid = overhead_grid(&cam, &pose, &meta, 64).unwrap();
        assert!(grid.get(32, 32).is_none());
        let [u, v] = grid.get(28, 32).unwrap();
        let (az, el) = cam.pixel_to_ray(u, v).unwrap();
        assert_abs_diff_eq!(az, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(el, -PI / 4.0, epsilon = 1e-9);
        assert!(overhead_grid(&cam, &pose, &meta, 0).is_err());
        assert!(overhead_grid(&cam, &pose, &meta, 257).is_err());
    }

    #[test]
    fn homography_grid_examples() {
        let g = homography_grid(&Homography::identity(), 4, 6).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(g.get(y, x), Some([x as f64, y as f64]));
            }
        }
        let g = homography_grid(&Homography::translation(3.0, 0.0), 4, 6).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                if x >= 3 {
                    assert_eq!(g.get(y, x), None);
                } else {
                    assert_eq!(g.get(y, x), Some([x as f64 + 3.0, y as f64]));
                }
            }
        }
        let g = homography_grid(&Homography::scale(2.0).unwrap(), 8, 8).unwrap();
        assert_eq!(g.get(3, 2), Some([4.0, 6.0]));
    }

    #[test]
    fn warp_examples() {
        let src = Raster::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = SampleGrid::from_fn(1, 1, |_, _| Some([0.5, 0.5]));
        assert_abs_diff_eq!(warp(&src, &g, 0.0).get(0, 0, 0), 1.5);
        let id = homography_grid(&Homography::identity(), 2, 2).unwrap();
        assert_eq!(warp(&src, &id, 0.0), src);
        let k = Raster::filled(2, 5, 5, 0.7).unwrap();
        let g = SampleGrid::from_fn(3, 3, |y, x| Some([x as f64 * 1.37, y as f64 * 0.91]));
        assert!(warp(&k, &g, 0.0)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
        let g = SampleGrid::from_fn(1, 2, |_, x| (x == 0).then_some([0.0, 0.0]));
        let out = warp(&src, &g, -9.0);
        assert_eq!(out.data(), &[0.0, -9.0]);
    }

    #[test]
    fn warp_adjoint_is_transpose() {
        let mut rng = crate::rng::Rng::new(4);
        let src = crate::rng::randn_raster((2, 5, 7), &mut rng).unwrap();
        let cot = crate::rng::randn_raster((2, 4, 3), &mut rng).unwrap();
        let g = SampleGrid::from_fn(4, 3, |y, x| {
            (x + y != 2).then_some([x as f64 * 1.9 + 0.3, y as f64 * 1.1 + 0.2])
        });
        let lhs = warp(&src, &g, 0.0).dot(&cot).unwrap();
        let rhs = src.dot(&warp_adjoint(&cot, &g, 5, 7)).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn homography_group_law() {
        let a = Homography::from_rows([[1.2, 0.1, 3.0], [-0.2, 0.9, 1.0], [0.001, 0.002, 1.0]])
            .unwrap();
        let id = homography_apply(&a, &a.inverse().unwrap()).unwrap();
        for (x, y) in id.matrix().iter().zip(Matrix3::<f64>::identity().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let t = homography_apply(&Homography::translation(1.0, 0.0), &Homography::translation(2.0, 0.0))
            .unwrap();
        assert_eq!(t, Homography::translation(3.0, 0.0));
        let s = Homography::scale(2.0).unwrap();
        let tr = Homography::translation(1.0, 0.0);
        assert_ne!(
            homography_apply(&s, &tr).unwrap(),
            homography_apply(&tr, &s).unwrap()
        );
        assert!(Homography::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn normalized_conjugation_roundtrip() {
        let h = Homography::from_params([1.1, 0.05, 0.1, -0.02, 0.95, -0.2, 0.01, 0.0]).unwrap();
        let p = Homography::from_normalized(&h, 64, 128).unwrap();
        let back = p.to_normalized(64, 128).unwrap();
        for (a, b) in h.params().iter().zip(back.params()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        // a unit normalized x-translation is half the raster width in pixels
        let t = Homography::from_normalized(&Homography::translation(1.0, 0.0), 64, 128).unwrap();
        assert_abs_diff_eq!(t.params()[2], 64.0, epsilon = 1e-12);
    }

    #[test]
    fn plane_motion_structure() {
        let cam = CameraModel::pinhole_square(128, 64, PI / 2.0).unwrap();
        let id = Homography::ground_plane_motion(&cam, 2.0, 0.0, 0.0, 0.0).unwrap();
        for (x, y) in id.matrix().iter().zip(Matrix3::<f64>::identity().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        // lateral motion only shifts columns, by an amount proportional to
        // the distance below the horizon
        let lat = Homography::ground_plane_motion(&cam, 2.0, 1.0, 0.0, 0.0).unwrap();
        let (x, y) = lat.apply(64.0, 32.0).unwrap();
        assert_abs_diff_eq!(x, 64.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 32.0, epsilon = 1e-9);
        let (x1, y1) = lat.apply(10.0, 48.0).unwrap();
        let (x2, y2) = lat.apply(10.0, 60.0).unwrap();
        assert_abs_diff_eq!(y1, 48.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y2, 60.0, epsilon = 1e-9);
        assert_abs_diff_eq!((x2 - 10.0) / (x1 - 10.0), 28.0 / 16.0, epsilon = 1e-9);
        assert!(Homography::ground_plane_motion(&pano(), 2.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn roll_matches_yaw_projection() {
        let cam = pano();
        let meta = SatMeta::new(0.5, 256, 256).unwrap();
        let p0 = RelativePose::new(128.0, 128.0, 0.0, 2.0).unwrap();
        let yaw = PI / 8.0;
        let p1 = RelativePose::new(128.0, 128.0, yaw, 2.0).unwrap();
        let shift = panorama_yaw_shift(&cam, yaw);
        for &(u, v) in &[(10.0, 100.0), (300.0, 90.0), (500.0, 127.0)] {
            let a = project_ground_to_sat(&cam, &p1, &meta, u, v, -2.0).unwrap().unwrap();
            let u0 = (u + shift).rem_euclid(512.0);
            let b = project_ground_to_sat(&cam, &p0, &meta, u0, v, -2.0).unwrap().unwrap();
            assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-9);
            assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(PI), -PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), -PI);
    }
}
