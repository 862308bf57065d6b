//! Image similarity metrics and per-pair reports.

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::text_guidance::Embedder;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

/// A metric result. Serializes as a number, the string `"inf"`, or
/// `{"value": null, "reason": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Infinite,
    Unavailable(String),
}

impl MetricValue {
    fn from_f64(v: f64) -> Self {
        if v.is_infinite() && v > 0.0 {
            Self::Infinite
        } else if v.is_finite() {
            Self::Value(v)
        } else {
            Self::Unavailable(format!("non-finite result {v}"))
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(*v),
            Self::Infinite => Some(f64::INFINITY),
            Self::Unavailable(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MetricRepr {
    Number(f64),
    Text(String),
    Null { value: Option<f64>, reason: String },
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Value(v) => MetricRepr::Number(*v),
            Self::Infinite => MetricRepr::Text("inf".into()),
            Self::Unavailable(r) => MetricRepr::Null {
                value: None,
                reason: r.clone(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match MetricRepr::deserialize(d)? {
            MetricRepr::Number(v) => Self::Value(v),
            MetricRepr::Text(t) if t == "inf" => Self::Infinite,
            MetricRepr::Text(t) => return Err(serde::de::Error::custom(format!("unexpected metric string `{t}`"))),
            MetricRepr::Null { reason, .. } => Self::Unavailable(reason),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub sky_crop: f64,
    pub sky_crop_rows: usize,
    pub metrics: BTreeMap<String, MetricValue>,
}

/// Drops the top `floor(fraction·H)` rows.
pub fn crop_sky(r: &Raster, fraction: f64) -> Result<Raster> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("sky fraction {fraction} outside [0, 1)")));
    }
    r.rows_from(sky_rows(r.height(), fraction))
}

pub fn sky_rows(height: usize, fraction: f64) -> usize {
    (fraction * height as f64).floor() as usize
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable filter of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region (11×11 Gaussian window, σ = 1.5,
/// L = 1), averaged over channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let aa = filter_valid(&sq(pa, pa), h, w, &k);
        let bb = filter_valid(&sq(pb, pb), h, w, &k);
        let ab = filter_valid(&sq(pa, pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// RMSE on the 0–255 scale and PSNR in dB.
pub fn rmse_psnr(a: &Raster, b: &Raster) -> Result<(f64, MetricValue)> {
    a.ensure_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (255.0 * (x - y)).powi(2)).sum::<f64>() / a.len() as f64;
    let rmse = mse.sqrt();
    Ok((rmse, MetricValue::from_f64(20.0 * (255.0 / rmse).log10())))
}

fn gradient_magnitude(r: &Raster) -> Vec<f64> {
    let (c, h, w) = r.shape();
    let mut out = Vec::with_capacity(c * h.saturating_sub(1) * w.saturating_sub(1));
    for ch in 0..c {
        let p = r.plane(ch);
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let v = p[y * w + x];
                out.push(255.0 * ((p[y * w + x + 1] - v).abs() + (p[(y + 1) * w + x] - v).abs()));
            }
        }
    }
    out
}

/// Sharpness difference `10·log10(255² / mean((g(a) − g(b))²))` with
/// `g = |∂x| + |∂y|` by forward differences on the 255 scale.
pub fn sharpness_diff(a: &Raster, b: &Raster) -> Result<MetricValue> {
    a.ensure_same_shape(b)?;
    if a.height() < 2 || a.width() < 2 {
        return Err(Error::InvalidShape("sharpness needs at least 2×2".into()));
    }
    let (ga, gb) = (gradient_magnitude(a), gradient_magnitude(b));
    let mse = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ga.len() as f64;
    Ok(MetricValue::from_f64(10.0 * (255.0 * 255.0 / mse).log10()))
}

/// `1 − cos(emb(a), emb(b))`; the flag is set when either embedding is
/// degenerate.
pub fn feature_distance(a: &Raster, b: &Raster, emb: &dyn Embedder) -> Result<(f64, bool)> {
    let (ea, eb) = (emb.embed_image(a)?, emb.embed_image(b)?);
    let degenerate = ea.degenerate || eb.degenerate;
    Ok(((1.0 - ea.cosine(&eb.vector)).clamp(0.0, 2.0), degenerate))
}

pub const DEFAULT_METRICS: [&str; 5] = ["ssim", "rmse", "psnr", "sd", "feature"];

/// Evaluates each requested metric on the sky-cropped pair.
pub fn evaluate_pair(
    id: &str,
    generated: &Raster,
    reference: &Raster,
    metrics: &[String],
    sky_crop: f64,
    emb: Option<&dyn Embedder>,
) -> Result<MetricReport> {
    generated.ensure_same_shape(reference)?;
    let a = crop_sky(generated, sky_crop)?;
    let b = crop_sky(reference, sky_crop)?;
    let mut out = BTreeMap::new();
    let mut rmse_psnr_cache: Option<(f64, MetricValue)> = None;
    for m in metrics {
        let v = match m.as_str() {
            "ssim" => match ssim(&a, &b) {
                Ok(v) => MetricValue::Value(v),
                Err(e) => MetricValue::Unavailable(e.to_string()),
            },
            "rmse" | "psnr" => {
                let (r, p) = match &rmse_psnr_cache {
                    Some(c) => c.clone(),
                    None => {
                        let c = rmse_psnr(&a, &b)?;
                        rmse_psnr_cache = Some(c.clone());
                        c
                    }
                };
                if m == "rmse" {
                    MetricValue::Value(r)
                } else {
                    p
                }
            }
            "sd" => sharpness_diff(&a, &b).unwrap_or_else(|e| MetricValue::Unavailable(e.to_string())),
            "feature" => match emb {
                Some(e) => match feature_distance(&a, &b, e)? {
                    (_, true) => MetricValue::Unavailable("degenerate embedding".into()),
                    (d, false) => MetricValue::Value(d),
                },
                None => MetricValue::Unavailable("no embedder configured".into()),
            },
            "fid" | "lpips" | "dino" | "segany" | "depth" | "clip" => {
                MetricValue::Unavailable(format!("{m} requires a pretrained backbone"))
            }
            other => MetricValue::Unavailable(format!("unknown metric `{other}`")),
        };
        out.insert(m.clone(), v);
    }
    Ok(MetricReport {
        id: id.to_string(),
        sky_crop,
        sky_crop_rows: sky_rows(generated.height(), sky_crop),
        metrics: out,
    })
}

/// Mean of each metric over reports where it is finite; metrics finite in
/// none of them become unavailable, all-infinite ones stay infinite.
pub fn aggregate(reports: &[MetricReport]) -> BTreeMap<String, MetricValue> {
    let mut acc: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.metrics {
            let e = acc.entry(k.clone()).or_default();
            match v {
                MetricValue::Value(x) => {
                    e.0 += x;
                    e.1 += 1;
                }
                MetricValue::Infinite => e.2 += 1,
                MetricValue::Unavailable(_) => {}
            }
        }
    }
    acc.into_iter()
        .map(|(k, (sum, n, inf))| {
            let v = if n > 0 {
                MetricValue::Value(sum / n as f64)
            } else if inf > 0 {
                MetricValue::Infinite
            } else {
                MetricValue::Unavailable("no finite values".into())
            };
            (k, v)
        })
        .collect()
}
