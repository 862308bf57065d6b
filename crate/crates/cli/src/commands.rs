use crate::manifest::{io_error, write_json, Record, RunManifest};
use crossview::config::{Config, ModelKind};
use crossview::diffusion::{sample, GuidanceSource, GuidanceWeights, Unguided};
use crossview::gca::{gca_aggregate, HeightHypothesisSet};
use crossview::geometry::{plane_grid, warp, CameraModel, RelativePose, SatMeta};
use crossview::metrics::{aggregate, evaluate_pair, MetricReport, MetricValue};
use crossview::models::{
    gaussian_score_denoiser, warp_oracle_denoiser, AvgPoolCodec, Codec, Conditioning, ExternalPredictor, NoisePredictor,
};
use crossview::pose_align::{iha_sample, IdentityRefiner, IhaSetup, TraceRecord};
use crossview::rng::randn_raster;
use crossview::selfcheck::{format_table, run_selfcheck, SelfcheckOptions, BUDGET_SECONDS};
use crossview::synthdata::{make_scene, render_ground, render_satellite, Difficulty};
use crossview::text_guidance::{text_loss, MeanColorEmbedder, TextGuidance};
use crossview::{Error, Raster, Result, Rng};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Exit status of a command that ran to completion.
pub enum Outcome {
    Ok,
    Partial(String),
    Numeric(String),
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

/// Drops alpha and replicates gray so that inputs are RGB.
fn to_rgb(r: Raster) -> Result<Raster> {
    match r.channels() {
        3 => Ok(r),
        1 | 4 => {
            let gray = r.channels() == 1;
            Raster::from_fn(3, r.height(), r.width(), |c, y, x| r.get(if gray { 0 } else { c }, y, x))
        }
        n => Err(Error::UnsupportedChannels(n)),
    }
}

fn check_pose(pose: &RelativePose, meta: &SatMeta) -> Result<()> {
    if !meta.contains(pose.sat_u, pose.sat_v) {
        return Err(Error::InvalidArgument(format!(
            "pose ({}, {}) outside the {}×{} satellite image",
            pose.sat_u, pose.sat_v, meta.width, meta.height
        )));
    }
    Ok(())
}

pub fn synth(cfg: &Config, out: &Path, count: usize, seed: u64, difficulty: Difficulty, workers: Option<usize>) -> Result<Outcome> {
    create_dir(out)?;
    let cam = cfg.geometry.camera;
    let meta = cfg.synth.sat_meta(&cfg.geometry)?;
    let center = (meta.width as f64 / 2.0, meta.height as f64 / 2.0);
    let records: Vec<Record> = pool(workers)?.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| -> Result<Record> {
                let t0 = Instant::now();
                let item_seed = seed ^ i as u64;
                let scene = make_scene(item_seed, difficulty);
                let mut rng = Rng::new(item_seed).child(7);
                let r = cfg.synth.pose_radius * rng.uniform(0.0, 1.0).sqrt();
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                let yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
                let pose = RelativePose::new(center.0 + r * theta.cos(), center.1 + r * theta.sin(), yaw, cfg.geometry.cam_height)?;
                let id = format!("pair_{i:04}");
                let (sat_name, ground_name) = (format!("{id}_sat.png"), format!("{id}_ground.png"));
                render_satellite(&scene, &meta)?.write(out.join(&sat_name))?;
                render_ground(&scene, &pose, &cam, &meta)?.write(out.join(&ground_name))?;
                Ok(Record {
                    id,
                    sat: Some(sat_name),
                    ground: Some(ground_name),
                    pose: Some(pose),
                    seconds: t0.elapsed().as_secs_f64(),
                    ..Default::default()
                })
            })
            .collect::<Result<Vec<Record>>>()
    })?;
    let mut m = RunManifest::new("synth", seed, cfg);
    m.inputs.insert("difficulty".into(), format!("{difficulty:?}").to_lowercase());
    m.inputs.insert("count".into(), count.to_string());
    m.records = records;
    m.save(&out.join("pairs.json"))?;
    Ok(Outcome::Ok)
}

pub fn project(cfg: &Config, sat_path: &Path, pose: RelativePose, heights: &[f64], out: &Path) -> Result<Outcome> {
    let sat = to_rgb(Raster::read(sat_path)?)?;
    let meta = SatMeta::new(cfg.geometry.meters_per_pixel, sat.width(), sat.height())?;
    check_pose(&pose, &meta)?;
    if heights.is_empty() {
        return Err(Error::Config("no heights to project".into()));
    }
    create_dir(out)?;
    let mut m = RunManifest::new("project", 0, cfg);
    m.inputs.insert("sat".into(), sat_path.display().to_string());
    for (i, &h) in heights.iter().enumerate() {
        let h_cam = cfg.gca.height_reference.to_camera_relative(h, pose.cam_height);
        let grid = plane_grid(&cfg.geometry.camera, &pose, &meta, h_cam, 1.0);
        let name = format!("height_{i:02}.png");
        warp(&sat, &grid, 0.0).write(out.join(&name))?;
        m.records.push(Record {
            id: format!("height_{i:02}"),
            generated: Some(name),
            pose: Some(pose),
            metrics: Some(BTreeMap::from([("height".to_string(), MetricValue::Value(h))])),
            ..Default::default()
        });
    }
    m.save(&out.join("manifest.json"))?;
    Ok(Outcome::Ok)
}

/// Options of `sample` shared by every item.
pub struct SampleOptions {
    pub prompt: Option<String>,
    pub iha: bool,
    pub trace: bool,
}

pub struct Generated {
    pub image: Raster,
    pub h_final: [[f64; 3]; 3],
    pub trace: Vec<TraceRecord>,
    pub text_loss: Option<f64>,
}

/// Clean image the stub predictors steer towards: the satellite image
/// blended over the height planes at `pose`.
pub fn conditioned_view(cfg: &Config, sat: &Raster, pose: &RelativePose, meta: &SatMeta) -> Result<Raster> {
    let cam = cfg.geometry.camera;
    let stride = cfg.gca.feature_stride;
    let v = if stride == 1 { sat.clone() } else { AvgPoolCodec::new(stride)?.encode(sat)? };
    let q = Raster::zeros(1, cam.height(), cam.width())?;
    let hyp = HeightHypothesisSet::from_predictor(cfg.gca.heights.clone(), cfg.gca.predictor().as_ref(), &q)?;
    Ok(gca_aggregate(&q, &v, &cam, pose, meta, &hyp, &cfg.gca.options())?.features)
}

fn predictor(cfg: &Config, mean: Raster, sched: &crossview::diffusion::NoiseSchedule) -> Result<Box<dyn NoisePredictor>> {
    Ok(match cfg.model.kind {
        ModelKind::Gaussian => Box::new(gaussian_score_denoiser(mean, cfg.model.var, sched.clone())?),
        ModelKind::WarpOracle => Box::new(warp_oracle_denoiser(mean, sched.clone())),
        ModelKind::External => {
            let dir = cfg.model.dir.clone().ok_or_else(|| Error::Config("model.dir is required".into()))?;
            Box::new(ExternalPredictor::new(dir))
        }
    })
}

/// Full guided sampler for one satellite image and pose. On failure the
/// trace collected so far is returned with the error.
pub fn generate(
    cfg: &Config,
    sat: &Raster,
    pose: &RelativePose,
    target: Option<Raster>,
    opts: &SampleOptions,
    seed: u64,
) -> std::result::Result<Generated, (Error, Vec<TraceRecord>)> {
    let plain = |e: Error| (e, Vec::new());
    let meta = SatMeta::new(cfg.geometry.meters_per_pixel, sat.width(), sat.height()).map_err(plain)?;
    check_pose(pose, &meta).map_err(plain)?;
    let cam: CameraModel = cfg.geometry.camera;
    let clean = match target {
        Some(t) => t,
        None => conditioned_view(cfg, sat, pose, &meta).map_err(plain)?,
    };
    if (clean.height(), clean.width()) != (cam.height(), cam.width()) {
        return Err(plain(Error::InvalidShape(format!(
            "target is {}×{}, camera is {}×{}",
            clean.height(),
            clean.width(),
            cam.height(),
            cam.width()
        ))));
    }
    let codec = cfg.model.codec().map_err(plain)?;
    let mean = codec.encode(&clean).map_err(plain)?;
    let sched = cfg.diffusion.schedule().map_err(plain)?;
    let pred = predictor(cfg, mean.clone(), &sched).map_err(plain)?;
    let cond = Conditioning {
        sat_feat: Some(sat.clone()),
        pose: Some(*pose),
    };
    let mut rng = Rng::new(seed);
    let z_big_t = randn_raster(mean.shape(), &mut rng.child(1)).map_err(plain)?;

    let lexicon = cfg.text.load_lexicon().map_err(plain)?;
    let emb = MeanColorEmbedder::new(lexicon.clone());
    let target_emb = match &opts.prompt {
        Some(p) => Some(lexicon.get(p).map_err(plain)?.to_vec()),
        None => None,
    };
    let mut text = target_emb.as_ref().map(|t| TextGuidance {
        predictor: pred.as_ref(),
        cond: &cond,
        codec: codec.as_ref(),
        target: t.clone(),
        emb: &emb,
        cfg: cfg.text.text_config(),
        sched: &sched,
        rng: rng.child(2),
        last_loss: None,
    });
    let gamma = if text.is_some() { cfg.text.gamma } else { 0.0 };
    let w = GuidanceWeights::new(cfg.diffusion.lambda_pose, gamma).map_err(plain)?;

    let (image, h_final, trace) = if opts.iha || w.lambda_pose > 0.0 {
        let mut iha_cfg = cfg.iha;
        if !opts.iha {
            iha_cfg.lr = 0.0;
        }
        let setup = IhaSetup {
            cam,
            meta,
            sat_feat: sat,
            gt_pose: *pose,
            ref_g: &IdentityRefiner,
            ref_s: &IdentityRefiner,
        };
        let out = iha_sample(
            &z_big_t,
            &cond,
            &setup,
            pred.as_ref(),
            codec.as_ref(),
            &sched,
            &iha_cfg,
            w,
            text.as_mut().map(|t| t as &mut dyn GuidanceSource),
            &mut rng,
        )
        .map_err(|a| (a.error, a.trace))?;
        (out.image, out.h_final.rows(), out.trace)
    } else {
        let mut trace = Vec::new();
        let identity = crossview::geometry::Homography::identity().rows();
        let guidance: &mut dyn GuidanceSource = match text.as_mut() {
            Some(t) => t,
            None => &mut Unguided,
        };
        let z = sample(&z_big_t, &cond, pred.as_ref(), guidance, w, &sched, &mut rng, |t, _, _| {
            trace.push(TraceRecord {
                step: t,
                loss: None,
                h: identity,
            })
        })
        .map_err(plain)?;
        (codec.decode(&z).map_err(plain)?, identity, trace)
    };
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err((Error::NonFinite("generated image".into()), trace));
    }
    let text_loss = match &target_emb {
        Some(t) => Some(
            text_loss(
                &image,
                t,
                &emb,
                cfg.text.n_patches,
                cfg.text.text_config().patch_size_for(&image),
                &mut rng.child(3),
            )
            .map_err(|e| (e, trace.clone()))?
            .loss,
        ),
        None => None,
    };
    Ok(Generated {
        image,
        h_final,
        trace,
        text_loss,
    })
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    for r in trace {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

/// One sampling job.
pub struct SampleItem {
    pub id: String,
    pub sat: PathBuf,
    pub pose: RelativePose,
    pub target: Option<PathBuf>,
    pub ground: Option<String>,
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Singular(_) | Error::NonFinite(_))
}

fn run_item(cfg: &Config, item: &SampleItem, opts: &SampleOptions, seed: u64, out: &Path) -> (Record, Option<Error>) {
    let t0 = Instant::now();
    let mut rec = Record {
        id: item.id.clone(),
        sat: Some(item.sat.display().to_string()),
        ground: item.ground.clone(),
        pose: Some(item.pose),
        prompt: opts.prompt.clone(),
        ..Default::default()
    };
    let inputs = (|| -> Result<(Raster, Option<Raster>)> {
        let sat = to_rgb(Raster::read(&item.sat)?)?;
        let target = item.target.as_ref().map(|p| Raster::read(p).and_then(to_rgb)).transpose()?;
        Ok((sat, target))
    })();
    let result = match inputs {
        Ok((sat, target)) => generate(cfg, &sat, &item.pose, target, opts, seed),
        Err(e) => Err((e, Vec::new())),
    };
    let (trace, err) = match result {
        Ok(g) => {
            let name = format!("{}.png", item.id);
            match g.image.write(out.join(&name)) {
                Ok(()) => {
                    rec.generated = Some(name);
                    rec.h_final = Some(g.h_final);
                    rec.text_loss = g.text_loss;
                    (g.trace, None)
                }
                Err(e) => (g.trace, Some(e)),
            }
        }
        Err((e, trace)) => (trace, Some(e)),
    };
    if opts.trace {
        let name = format!("{}.trace.jsonl", item.id);
        match write_trace(&out.join(&name), &trace) {
            Ok(()) => rec.trace = Some(name),
            Err(e) => log::error!("{e}"),
        }
    }
    if let Some(e) = &err {
        rec.error = Some(e.to_string());
    }
    rec.seconds = t0.elapsed().as_secs_f64();
    (rec, err)
}

pub fn sample_batch(
    cfg: &Config,
    items: &[SampleItem],
    opts: &SampleOptions,
    seed: u64,
    out: &Path,
    workers: Option<usize>,
    inputs: BTreeMap<String, String>,
) -> Result<Outcome> {
    create_dir(out)?;
    let single = items.len() == 1;
    let results: Vec<(Record, Option<Error>)> = pool(workers)?.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| run_item(cfg, item, opts, if single { seed } else { seed ^ i as u64 }, out))
            .collect()
    });
    let mut m = RunManifest::new("sample", seed, cfg);
    m.inputs = inputs;
    let mut failures = Vec::new();
    let mut numeric = false;
    for (rec, err) in results {
        if let Some(e) = err {
            numeric |= is_numeric(&e);
            failures.push(format!("{}: {e}", rec.id));
        }
        m.records.push(rec);
    }
    m.save(&out.join("manifest.json"))?;
    if failures.is_empty() {
        Ok(Outcome::Ok)
    } else if numeric && single {
        Ok(Outcome::Numeric(failures.join("\n")))
    } else if single {
        Err(Error::InvalidArgument(failures.join("\n")))
    } else {
        Ok(Outcome::Partial(failures.join("\n")))
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    sky_crop: f64,
    metrics: &'a [String],
    reports: &'a [MetricReport],
    aggregate: BTreeMap<String, MetricValue>,
    missing: Vec<String>,
    failed: Vec<String>,
}

fn csv_cell(v: Option<&MetricValue>) -> String {
    match v {
        Some(MetricValue::Value(x)) => format!("{x}"),
        Some(MetricValue::Infinite) => "inf".into(),
        _ => String::new(),
    }
}

pub fn eval(cfg: &Config, pairs: &Path, generated: Option<&Path>, out: &Path) -> Result<Outcome> {
    let manifest = RunManifest::load(pairs)?;
    let base = pairs.parent().unwrap_or(Path::new("."));
    let metrics = &cfg.eval.metrics;
    let sky = cfg.eval.sky_crop;
    let emb = MeanColorEmbedder::rgb();
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    let mut failed = Vec::new();
    for rec in &manifest.records {
        let Some(ground) = &rec.ground else {
            failed.push(format!("{}: no reference image", rec.id));
            continue;
        };
        let ground_path = base.join(ground);
        let gen_path = match (generated, &rec.generated) {
            (Some(dir), _) => dir.join(format!("{}.png", rec.id)),
            (None, Some(g)) => base.join(g),
            (None, None) => {
                missing.push(rec.id.clone());
                continue;
            }
        };
        let mut absent = false;
        for p in [&ground_path, &gen_path] {
            if !p.exists() {
                missing.push(p.display().to_string());
                absent = true;
            }
        }
        if absent {
            continue;
        }
        let pair = Raster::read(&gen_path)
            .and_then(to_rgb)
            .and_then(|g| Ok((g, to_rgb(Raster::read(&ground_path)?)?)))
            .and_then(|(g, r)| evaluate_pair(&rec.id, &g, &r, metrics, sky, Some(&emb)));
        match pair {
            Ok(r) => reports.push(r),
            Err(e) => failed.push(format!("{}: {e}", rec.id)),
        }
    }
    create_dir(out)?;
    let report = EvalReport {
        sky_crop: sky,
        metrics,
        reports: &reports,
        aggregate: aggregate(&reports),
        missing: missing.clone(),
        failed: failed.clone(),
    };
    write_json(&out.join("report.json"), &report)?;
    let mut csv = format!("id,sky_crop,{}\n", metrics.join(","));
    for r in &reports {
        let cells: Vec<String> = metrics.iter().map(|m| csv_cell(r.metrics.get(m))).collect();
        csv += &format!("{},{},{}\n", r.id, r.sky_crop, cells.join(","));
    }
    let cells: Vec<String> = metrics.iter().map(|m| csv_cell(report.aggregate.get(m))).collect();
    csv += &format!("mean,{},{}\n", sky, cells.join(","));
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, csv).map_err(|e| io_error(&csv_path, e))?;
    if missing.is_empty() && failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        let mut lines: Vec<String> = missing.iter().map(|m| format!("missing: {m}")).collect();
        lines.extend(failed.iter().map(|f| format!("failed: {f}")));
        Ok(Outcome::Partial(lines.join("\n")))
    }
}

pub fn selfcheck(opts: &SelfcheckOptions) -> Outcome {
    let results = run_selfcheck(opts);
    print!("{}", format_table(&results));
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    if total > BUDGET_SECONDS {
        log::warn!("selfcheck took {total:.0}s, over the {BUDGET_SECONDS:.0}s budget");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Numeric(format!("failed oracles: {}", failed.join(", ")))
    }
}
