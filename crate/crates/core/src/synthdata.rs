//! Procedural paired scenes: a textured ground plane, an optional road and
//! axis-aligned boxes, rendered orthographically from above and by ray
//! casting from a ground camera.

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RelativePose, SatMeta};
use crate::raster::Raster;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Flat,
    Road,
    Boxes,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "road" => Ok(Self::Road),
            "boxes" => Ok(Self::Boxes),
            _ => Err(Error::InvalidArgument(format!("unknown difficulty `{s}`"))),
        }
    }
}

/// One plane wave of the noise overlay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTexture {
    /// Checker square edge in meters.
    pub period_m: f64,
    pub color_a: Rgb,
    pub color_b: Rgb,
    /// Hard-edged squares instead of the smooth sinusoidal checker.
    pub hard_edges: bool,
    /// Band-limited brightness overlay.
    pub noise: Vec<Wave>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    /// Direction of travel, clockwise from north.
    pub heading: f64,
    pub width_m: f64,
    /// Signed distance of the centerline from the world origin.
    pub offset_m: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center_east: f64,
    pub center_north: f64,
    pub size: f64,
    pub height: f64,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub texture: GroundTexture,
    pub road: Option<Road>,
    pub boxes: Vec<BoxSpec>,
    pub sky: Rgb,
}

/// Shading factor for box walls relative to the roof.
const WALL_SHADE: f64 = 0.7;
/// Width in meters of the soft road edge.
const ROAD_EDGE_M: f64 = 0.5;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.texture.period_m > 0.0) {
            return Err(Error::InvalidArgument("checker period must be positive".into()));
        }
        if let Some(r) = &self.road {
            if !(r.width_m > 0.0) {
                return Err(Error::InvalidArgument("road width must be positive".into()));
            }
        }
        if self.boxes.iter().any(|b| !(b.size > 0.0 && b.height > 0.0)) {
            return Err(Error::InvalidArgument("boxes need positive size and height".into()));
        }
        Ok(())
    }

    /// Flat checkerboard with no overlay, road or boxes.
    pub fn checkerboard(period_m: f64, color_a: Rgb, color_b: Rgb, hard_edges: bool) -> Self {
        Self {
            seed: 0,
            texture: GroundTexture {
                period_m,
                color_a,
                color_b,
                hard_edges,
                noise: Vec::new(),
            },
            road: None,
            boxes: Vec::new(),
            sky: [0.55, 0.7, 0.9],
        }
    }

    /// Ground-plane color at world `(east, north)`.
    pub fn ground_color(&self, east: f64, north: f64) -> Rgb {
        let tex = &self.texture;
        let f = std::f64::consts::PI / tex.period_m;
        let mix = if tex.hard_edges {
            let cell = (east / tex.period_m).floor() + (-north / tex.period_m).floor();
            if cell.rem_euclid(2.0) == 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            0.5 + 0.5 * (f * east).sin() * (f * north).sin()
        };
        let shade = 1.0
            + tex
                .noise
                .iter()
                .map(|w| w.amplitude * (w.kx * east + w.ky * north + w.phase).sin())
                .sum::<f64>();
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = ((1.0 - mix) * tex.color_a[k] + mix * tex.color_b[k]) * shade;
        }
        if let Some(r) = &self.road {
            let (s, co) = r.heading.sin_cos();
            // signed distance across the road axis
            let d = (east * co - north * s - r.offset_m).abs();
            let edge = ((r.width_m / 2.0 - d) / ROAD_EDGE_M + 0.5).clamp(0.0, 1.0);
            let a = edge * edge * (3.0 - 2.0 * edge);
            for k in 0..3 {
                c[k] = (1.0 - a) * c[k] + a * r.color[k];
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    fn roof_at(&self, east: f64, north: f64) -> Option<&BoxSpec> {
        self.boxes
            .iter()
            .filter(|b| (east - b.center_east).abs() <= b.size / 2.0 && (north - b.center_north).abs() <= b.size / 2.0)
            .max_by(|a, b| a.height.total_cmp(&b.height))
    }

    /// Color seen along a ray from `origin` (east, north, up) in unit
    /// direction `dir`.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Rgb {
        let mut best = f64::INFINITY;
        let mut color = self.sky;
        if dir[2] < 0.0 && origin[2] > 0.0 {
            let t = -origin[2] / dir[2];
            best = t;
            color = self.ground_color(origin[0] + t * dir[0], origin[1] + t * dir[1]);
        }
        for b in &self.boxes {
            let lo = [b.center_east - b.size / 2.0, b.center_north - b.size / 2.0, 0.0];
            let hi = [b.center_east + b.size / 2.0, b.center_north + b.size / 2.0, b.height];
            if let Some((t, axis)) = slab_entry(origin, dir, lo, hi) {
                if t < best {
                    best = t;
                    color = if axis == 2 { b.color } else { b.color.map(|v| v * WALL_SHADE) };
                }
            }
        }
        color
    }
}

/// Entry distance and entry axis of a ray into an axis-aligned box.
fn slab_entry(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, usize)> {
    let (mut t_in, mut t_out, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t_in {
            t_in = near;
            axis = k;
        }
        t_out = t_out.min(far);
    }
    (t_in <= t_out && t_in > 0.0).then_some((t_in, axis))
}

fn random_color(rng: &mut Rng, lo: f64, hi: f64) -> Rgb {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

/// Deterministic scene for `seed`. `Road` adds a road; `Boxes` adds a road
/// and 3–8 boxes kept at least 8 m from the world origin.
pub fn make_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = Rng::new(seed);
    let period_m = rng.uniform(1.75, 2.5);
    let base = [rng.uniform(0.3, 0.45), rng.uniform(0.45, 0.6), rng.uniform(0.25, 0.35)];
    let alt = [rng.uniform(0.55, 0.7), rng.uniform(0.5, 0.65), rng.uniform(0.35, 0.5)];
    let noise = (0..6)
        .map(|_| {
            let wavelength = rng.uniform(6.0, 20.0);
            let dir = rng.uniform(0.0, TAU);
            Wave {
                kx: TAU / wavelength * dir.sin(),
                ky: TAU / wavelength * dir.cos(),
                phase: rng.uniform(0.0, TAU),
                amplitude: rng.uniform(0.01, 0.04),
            }
        })
        .collect();
    let mut scene = SceneSpec {
        seed,
        texture: GroundTexture {
            period_m,
            color_a: base,
            color_b: alt,
            hard_edges: false,
            noise,
        },
        road: None,
        boxes: Vec::new(),
        sky: [0.55, 0.7, 0.9],
    };
    if difficulty != Difficulty::Flat {
        let g = rng.uniform(0.2, 0.3);
        scene.road = Some(Road {
            heading: rng.uniform(0.0, std::f64::consts::PI),
            width_m: rng.uniform(4.0, 8.0),
            offset_m: rng.uniform(-6.0, 6.0),
            color: [g, g, g + 0.02],
        });
    }
    if difficulty == Difficulty::Boxes {
        let count = 3 + rng.below(6);
        for _ in 0..count {
            let dist = rng.uniform(8.0, 30.0);
            let bearing = rng.uniform(0.0, TAU);
            scene.boxes.push(BoxSpec {
                center_east: dist * bearing.sin(),
                center_north: dist * bearing.cos(),
                size: rng.uniform(2.0, 6.0),
                height: rng.uniform(2.0, 10.0),
                color: random_color(&mut rng, 0.4, 0.9),
            });
        }
    }
    scene
}

/// Top-down orthographic render: roof colors over box footprints, ground
/// texture elsewhere.
pub fn render_satellite(scene: &SceneSpec, meta: &SatMeta) -> Result<Raster> {
    scene.validate()?;
    let mut data = vec![0.0; 3 * meta.width * meta.height];
    let plane = meta.width * meta.height;
    for v in 0..meta.height {
        for u in 0..meta.width {
            let (e, n) = meta.pixel_to_world(u as f64, v as f64);
            let c = scene.roof_at(e, n).map_or_else(|| scene.ground_color(e, n), |b| b.color);
            for k in 0..3 {
                data[k * plane + v * meta.width + u] = c[k];
            }
        }
    }
    Raster::from_vec(3, meta.height, meta.width, data)
}

/// Ray-cast render from a ground camera at `pose`.
pub fn render_ground(scene: &SceneSpec, pose: &RelativePose, cam: &CameraModel, meta: &SatMeta) -> Result<Raster> {
    scene.validate()?;
    if !meta.contains(pose.sat_u, pose.sat_v) {
        return Err(Error::InvalidArgument(format!(
            "pose ({}, {}) outside the satellite raster",
            pose.sat_u, pose.sat_v
        )));
    }
    let (e0, n0) = meta.pixel_to_world(pose.sat_u, pose.sat_v);
    let origin = [e0, n0, pose.cam_height];
    let (w, h) = (cam.width(), cam.height());
    let mut data = vec![0.0; 3 * w * h];
    for v in 0..h {
        for u in 0..w {
            let (az, el) = cam.ray_unchecked(u as f64, v as f64);
            let (s, c) = (pose.yaw + az).sin_cos();
            let dir = [el.cos() * s, el.cos() * c, el.sin()];
            let col = scene.trace(origin, dir);
            for k in 0..3 {
                data[(k * h + v) * w + u] = col[k];
            }
        }
    }
    Raster::from_vec(3, h, w, data)
}
