mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use commands::{Outcome, SampleItem, SampleOptions};
use crossview::config::Config;
use crossview::geometry::RelativePose;
use crossview::selfcheck::SelfcheckOptions;
use crossview::synthdata::Difficulty;
use crossview::{Error, Result};
use manifest::RunManifest;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "crossview", version, about = "Satellite-to-street-view synthesis toolkit")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for batch commands; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render paired satellite and street-view scenes.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// flat, road or boxes; defaults to the configured difficulty.
        #[arg(long)]
        difficulty: Option<Difficulty>,
    },
    /// Warp a satellite image into the ground view once per height plane.
    Project {
        #[arg(long)]
        sat: PathBuf,
        /// `u,v,yaw_deg[,cam_height]` in satellite pixels.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        /// Comma-separated heights in meters; defaults to the configured set.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        heights: Option<Vec<f64>>,
    },
    /// Run the guided sampler for one image or every pair of a manifest.
    Sample {
        #[arg(long, required_unless_present = "pairs")]
        sat: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true, required_unless_present = "pairs")]
        pose: Option<String>,
        /// Manifest written by `synth`.
        #[arg(long, conflicts_with_all = ["sat", "pose"])]
        pairs: Option<PathBuf>,
        /// Clean image the oracle predictors steer towards, replacing the
        /// satellite projection.
        #[arg(long, conflicts_with = "pairs")]
        target: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// Enable iterative homography adjustment.
        #[arg(long)]
        iha: bool,
        /// Write per-step JSON lines next to each image.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Score generated images against the references of a manifest.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// Directory holding `<id>.png`; defaults to the manifest's own
        /// generated paths.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long)]
        sky_crop: Option<f64>,
    },
    /// Run the built-in oracle suites.
    Selfcheck {
        #[arg(long, hide = true, default_value_t = 0.0, allow_hyphen_values = true)]
        inject_projection_fault: f64,
    },
}

fn parse_pose(s: &str, cam_height: f64) -> Result<RelativePose> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("pose `{s}`: {e}")))?;
    match parts[..] {
        [u, v, yaw] => RelativePose::new(u, v, yaw.to_radians(), cam_height),
        [u, v, yaw, h] => RelativePose::new(u, v, yaw.to_radians(), h),
        _ => Err(Error::InvalidArgument(format!("pose `{s}` needs u,v,yaw_deg[,cam_height]"))),
    }
}

fn absolute(base: &Path, p: &str) -> PathBuf {
    let joined = base.join(p);
    joined.canonicalize().unwrap_or(joined)
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Synth { count, difficulty } => {
            let difficulty = difficulty.unwrap_or(cfg.synth.difficulty);
            cfg.synth.difficulty = difficulty;
            commands::synth(&cfg, &cli.out, count, cli.seed, difficulty, cli.workers)
        }
        Command::Project { sat, pose, heights } => {
            let pose = parse_pose(&pose, cfg.geometry.cam_height)?;
            let heights = heights.unwrap_or_else(|| cfg.gca.heights.clone());
            commands::project(&cfg, &sat, pose, &heights, &cli.out)
        }
        Command::Sample {
            sat,
            pose,
            pairs,
            target,
            prompt,
            iha,
            trace,
            eta,
        } => {
            if let Some(eta) = eta {
                cfg.diffusion.eta = eta;
            }
            cfg.validate()?;
            let mut inputs = BTreeMap::new();
            let items = match (pairs, sat, pose) {
                (Some(pairs), _, _) => {
                    inputs.insert("pairs".into(), pairs.display().to_string());
                    let m = RunManifest::load(&pairs)?;
                    let base = pairs.parent().unwrap_or(Path::new(".")).to_path_buf();
                    m.records
                        .iter()
                        .map(|r| {
                            let sat = r.sat.as_ref().ok_or_else(|| Error::Config(format!("{}: no sat image", r.id)))?;
                            let pose = r.pose.ok_or_else(|| Error::Config(format!("{}: no pose", r.id)))?;
                            Ok(SampleItem {
                                id: r.id.clone(),
                                sat: absolute(&base, sat),
                                pose,
                                target: None,
                                ground: r.ground.as_ref().map(|g| absolute(&base, g).display().to_string()),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                (None, Some(sat), Some(pose)) => {
                    inputs.insert("sat".into(), sat.display().to_string());
                    vec![SampleItem {
                        id: "sample".into(),
                        pose: parse_pose(&pose, cfg.geometry.cam_height)?,
                        sat,
                        target,
                        ground: None,
                    }]
                }
                _ => return Err(Error::InvalidArgument("sample needs --pairs or --sat with --pose".into())),
            };
            let opts = SampleOptions { prompt, iha, trace };
            commands::sample_batch(&cfg, &items, &opts, cli.seed, &cli.out, cli.workers, inputs)
        }
        Command::Eval {
            pairs,
            generated,
            metrics,
            sky_crop,
        } => {
            if let Some(m) = metrics {
                cfg.eval.metrics = m;
            }
            if let Some(s) = sky_crop {
                cfg.eval.sky_crop = s;
            }
            cfg.validate()?;
            commands::eval(&cfg, &pairs, generated.as_deref(), &cli.out)
        }
        Command::Selfcheck {
            inject_projection_fault,
        } => Ok(commands::selfcheck(&SelfcheckOptions {
            projection_fault: inject_projection_fault,
            seed: cli.seed,
        })),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Singular(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::TruncatedPayload | Error::MalformedHeader(_) | Error::Image(_) => EXIT_PARTIAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Ok(Outcome::Numeric(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
