//! Built-in oracle suites run by `crossview selfcheck`.

use crate::diffusion::{ddim_step, make_schedule, GuidanceWeights, NoiseSchedule, ScheduleKind};
use crate::error::Result;
use crate::geometry::{project_ground_to_sat, sat_to_ground, CameraModel, Homography, RelativePose, SatMeta};
use crate::models::{gaussian_score_denoiser, warp_oracle_denoiser, Conditioning, IdentityCodec, NoisePredictor};
use crate::pose_align::{grad_h, iha_sample, sample_candidates, IdentityRefiner, IhaConfig, IhaSetup, PoseScorer};
use crate::raster::Raster;
use crate::rng::{randn_raster, Rng};
use crate::synthdata::{make_scene, render_ground, render_satellite, Difficulty};
use crate::text_guidance::{text_grad, text_objective, MeanColorEmbedder, TextConfig};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckOptions {
    /// Relative error injected into the meters-per-pixel constant on the
    /// return leg of the projection round trip. Zero for a clean run.
    pub projection_fault: f64,
    pub seed: u64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            projection_fault: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Soft runtime budget of a full run, seconds.
pub const BUDGET_SECONDS: f64 = 300.0;

type Oracle = fn(&SelfcheckOptions) -> Result<(bool, String)>;

pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<OracleResult> {
    let suites: [(&str, Oracle); 4] = [
        ("projection_roundtrip", projection_roundtrip),
        ("ddim_closed_form", ddim_closed_form),
        ("fd_gradients", fd_gradients),
        ("pose_recovery", pose_recovery),
    ];
    suites
        .iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = f(opts).unwrap_or_else(|e| (false, format!("error: {e}")));
            OracleResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn format_table(results: &[OracleResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        s += &format!(
            "{:<width$}  {}  {:>7.2}s  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    s
}

/// Ground pixel → ground plane → satellite → ground pixel over 1000 random
/// poses and pixels.
fn projection_roundtrip(opts: &SelfcheckOptions) -> Result<(bool, String)> {
    let cam = CameraModel::default_panorama();
    let meta = SatMeta::new(0.5, 256, 256)?;
    let back = SatMeta::new(0.5 * (1.0 + opts.projection_fault), 256, 256)?;
    let mut rng = Rng::new(opts.seed ^ 0x9e0);
    let (mut valid, mut worst) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let pose = RelativePose::new(
            rng.uniform(64.0, 192.0),
            rng.uniform(64.0, 192.0),
            rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
            rng.uniform(1.5, 3.0),
        )?;
        let u = rng.uniform(0.0, cam.width() as f64 - 1.0);
        let v = rng.uniform(0.0, cam.height() as f64 - 1.0);
        let Some((us, vs)) = project_ground_to_sat(&cam, &pose, &meta, u, v, -pose.cam_height)? else {
            continue;
        };
        let Some((ub, vb)) = sat_to_ground(&cam, &pose, &back, us, vs) else {
            continue;
        };
        let mut du = (ub - u).abs();
        du = du.min(cam.width() as f64 - du);
        worst = worst.max(du.hypot(vb - v));
        valid += 1;
    }
    Ok((valid > 0 && worst < 0.5, format!("{valid} valid samples, max displacement {worst:.2e} px")))
}

/// 50-step deterministic Gaussian trajectory against a scalar recursion.
fn ddim_closed_form(opts: &SelfcheckOptions) -> Result<(bool, String)> {
    let (beta_start, beta_end, steps) = (8.5e-4, 0.012, 50usize);
    let sched: NoiseSchedule = make_schedule(steps, beta_start, beta_end, ScheduleKind::Linear, 0.0)?;
    let mut rng = Rng::new(opts.seed ^ 0xdd1);
    let mean = randn_raster((3, 8, 8), &mut rng)?;
    let var = 0.25;
    let pred = gaussian_score_denoiser(mean.clone(), var, sched.clone())?;
    let mut z = randn_raster((3, 8, 8), &mut rng)?;
    let mut scalar: Vec<f64> = z.data().to_vec();
    let mut ab = vec![1.0; steps + 1];
    for t in 1..=steps {
        let beta = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64;
        ab[t] = ab[t - 1] * (1.0 - beta);
    }
    let mut worst = 0.0f64;
    for t in (1..=steps).rev() {
        let eps = pred.predict(&z, t, &Conditioning::default())?;
        z = ddim_step(&z, &eps, t, &sched, &mut rng)?.z_prev;
        for (x, m) in scalar.iter_mut().zip(mean.data()) {
            let s = ab[t] * var + 1.0 - ab[t];
            let e = (1.0 - ab[t]).sqrt() * (*x - ab[t].sqrt() * m) / s;
            let x0 = (*x - (1.0 - ab[t]).sqrt() * e) / ab[t].sqrt();
            *x = ab[t - 1].sqrt() * x0 + (1.0 - ab[t - 1]).sqrt() * e;
        }
        for (a, b) in z.data().iter().zip(&scalar) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-4, format!("max deviation {worst:.2e} over {steps} steps")))
}

/// Homography gradients on quadratic losses and text gradients against
/// central differences.
fn fd_gradients(opts: &SelfcheckOptions) -> Result<(bool, String)> {
    let mut rng = Rng::new(opts.seed ^ 0xfd);
    let mut worst_h = 0.0f64;
    for _ in 0..10 {
        let c: [f64; 8] = std::array::from_fn(|_| rng.uniform(-0.5, 0.5));
        let w: [f64; 8] = std::array::from_fn(|_| rng.uniform(0.5, 2.0));
        let p0: [f64; 8] = std::array::from_fn(|i| rng.uniform(-0.2, 0.2) + [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0][i]);
        let h = Homography::from_params(p0)?;
        let g = grad_h(
            |h| Ok(h.params().iter().zip(&c).zip(&w).map(|((p, c), w)| w * (p - c).powi(2)).sum()),
            &h,
            1e-3,
        )?;
        for i in 0..8 {
            worst_h = worst_h.max((g[i] - 2.0 * w[i] * (p0[i] - c[i])).abs());
        }
    }

    let sched = make_schedule(50, 8.5e-4, 0.012, ScheduleKind::Linear, 0.0)?;
    let shape = (3, 8, 12);
    let mean = randn_raster(shape, &mut rng)?.map(|v| 0.5 + 0.2 * v)?;
    let pred = gaussian_score_denoiser(mean, 0.05, sched.clone())?;
    let z = randn_raster(shape, &mut rng)?;
    let cond = Conditioning::default();
    let emb = MeanColorEmbedder::rgb();
    let target = [1.0, 0.0, 0.0];
    let cfg = TextConfig {
        n_patches: 3,
        patch_size: Some(6),
    };
    let t = 30;
    let g = text_grad(&z, t, &pred, &cond, &IdentityCodec, &target, &emb, &cfg, &sched, &mut Rng::new(5))?;
    let f = |zz: &Raster| text_objective(zz, t, &pred, &cond, &IdentityCodec, &target, &emb, &cfg, &sched, &mut Rng::new(5));
    let step = 1e-5;
    let mut worst_t = 0.0f64;
    for _ in 0..10 {
        let (c, y, x) = (rng.below(shape.0), rng.below(shape.1), rng.below(shape.2));
        let mut zp = z.clone();
        zp.set(c, y, x, z.get(c, y, x) + step)?;
        let mut zm = z.clone();
        zm.set(c, y, x, z.get(c, y, x) - step)?;
        let fd = -(f(&zp)? - f(&zm)?) / (2.0 * step);
        let an = g.grad.get(c, y, x);
        worst_t = worst_t.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
    }
    Ok((
        worst_h <= 1e-6 && worst_t <= 1e-4,
        format!("homography abs err {worst_h:.1e}, text rel err {worst_t:.1e}"),
    ))
}

fn pose_camera() -> Result<(CameraModel, SatMeta)> {
    Ok((CameraModel::pinhole_square(128, 64, std::f64::consts::FRAC_PI_2)?, SatMeta::new(0.5, 128, 128)?))
}

/// Candidate ranking on flat scenes and loss descent of a short adjustment
/// run with a shifted oracle target.
fn pose_recovery(opts: &SelfcheckOptions) -> Result<(bool, String)> {
    let (cam, meta) = pose_camera()?;
    let cfg = IhaConfig::default();
    let trials = 20;
    let mut hits = 0;
    for trial in 0..trials {
        let seed = opts.seed.wrapping_add(trial);
        let scene = make_scene(seed, Difficulty::Flat);
        let sat = render_satellite(&scene, &meta)?;
        let mut rng = Rng::new(seed);
        let gt = RelativePose::new(64.0, 64.0, rng.uniform(-3.1, 3.1), 2.0)?;
        let ground = render_ground(&scene, &gt, &cam, &meta)?;
        let cands = sample_candidates(&gt, &cfg, &meta, &mut rng)?;
        let gi = cands.gt_index;
        let scorer = PoseScorer::new(&cam, &meta, &sat, cands, &cfg, &IdentityRefiner, &IdentityRefiner)?;
        let s = scorer.scores(&ground, &Homography::identity())?;
        let best = (0..s.len()).max_by(|&a, &b| s[a].value.total_cmp(&s[b].value)).unwrap_or(0);
        hits += (best == gi) as usize;
    }
    let rank_ok = hits as f64 >= 0.95 * trials as f64;

    let sched = make_schedule(50, 8.5e-4, 0.012, ScheduleKind::Linear, 0.0)?;
    let runs = 10;
    let mut descending = 0;
    for trial in 0..runs {
        let seed = opts.seed.wrapping_add(trial);
        let scene = make_scene(seed, Difficulty::Road);
        let sat = render_satellite(&scene, &meta)?;
        let mut rng = Rng::new(seed);
        let gt = RelativePose::new(64.0, 64.0, rng.uniform(-3.1, 3.1), 2.0)?;
        let target = render_ground(&scene, &gt.moved(&meta, 3.0, 0.0), &cam, &meta)?;
        let pred = warp_oracle_denoiser(target, sched.clone());
        let setup = IhaSetup {
            cam,
            meta,
            sat_feat: &sat,
            gt_pose: gt,
            ref_g: &IdentityRefiner,
            ref_s: &IdentityRefiner,
        };
        let z = randn_raster((3, 64, 128), &mut rng)?;
        let out = iha_sample(&z, &Conditioning::default(), &setup, &pred, &IdentityCodec, &sched, &cfg, GuidanceWeights::off(), None, &mut rng)
            .map_err(|a| a.error)?;
        let losses: Vec<f64> = out.trace.iter().filter_map(|r| r.loss).collect();
        let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        descending += (down as f64 >= 0.8 * (losses.len() - 1) as f64) as usize;
    }
    Ok((
        rank_ok && descending as f64 >= 0.8 * runs as f64,
        format!("true pose ranked first in {hits}/{trials}, loss descending in {descending}/{runs} runs"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run_selfcheck(&SelfcheckOptions::default());
        assert_eq!(r.len(), 4);
        for o in &r {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert!(format_table(&r).contains("PASS"));
    }

    #[test]
    fn projection_fault_is_detected() {
        let opts = SelfcheckOptions {
            projection_fault: 0.05,
            ..Default::default()
        };
        let (ok, _) = projection_roundtrip(&opts).unwrap();
        assert!(!ok);
    }
}
