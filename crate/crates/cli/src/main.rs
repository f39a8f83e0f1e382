use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use registrar::config::PipelineConfig;
use registrar::eval::StageRow;
use registrar::io::{parse_key_values, read_float_grid, write_rgb_png};
use registrar::matching::read_correspondences;
use registrar::pipeline::{self as pl, Inputs, Paths, StagePose};
use registrar::{Error, ErrorClass};

/// Registers an airborne LiDAR point cloud to an optical image.
///
/// Settings come from the built-in defaults, then the `--config` file, then
/// `--set` pairs, then the dedicated flags; later sources win.
#[derive(Parser)]
#[command(name = "registrar", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Extra `KEY=VALUE` settings, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fine-registration objective: mi or ncmi.
    #[arg(long, global = true)]
    objective: Option<String>,
    /// Patch size as WxH pixels.
    #[arg(long, global = true, value_name = "WxH")]
    patch: Option<String>,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Concurrent patch workers.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and a perturbed starting pose.
    Synth {
        /// Scene spec file with bare keys (`buildings = 28`).
        spec: Option<PathBuf>,
    },
    /// Extract building regions from the point cloud.
    ExtractLidar,
    /// Segment the optical image into candidate roofs.
    ExtractImage,
    /// Match LiDAR regions to image segments under the starting pose.
    Match,
    /// Estimate the global pose from matched building centroids.
    Coarse,
    /// Render z- and i-images under one pose.
    Superres {
        /// Pose file; defaults to the coarse result.
        #[arg(long, value_name = "PATH")]
        pose: Option<PathBuf>,
    },
    /// Patch-wise mutual-information refinement of the coarse pose.
    Fine {
        /// Global pose file; defaults to the coarse result.
        #[arg(long, value_name = "PATH")]
        theta: Option<PathBuf>,
    },
    /// Discrepancy tables for the before, coarse and fine stages.
    Eval,
    /// Every stage in sequence, synthesizing a scene when no cloud is set.
    Pipeline,
}

/// Layers defaults, config file, scene spec file (for `synth`) and flags.
fn load_config(common: &Common, spec: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_text(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(p) = spec {
        apply_spec(&mut cfg, p)?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, found `{kv}`")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    flag("seed", common.seed.map(|s| s.to_string()));
    flag("fine.objective", common.objective.clone());
    flag("fine.patch", common.patch.clone());
    flag(
        "paths.out",
        common.out.as_ref().map(|p| p.display().to_string()),
    );
    flag("fine.threads", common.threads.map(|t| t.to_string()));
    for (k, v) in &flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies a bare-key scene spec file as `scene.*` settings.
fn apply_spec(cfg: &mut PipelineConfig, path: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map: BTreeMap<String, (usize, String)> = parse_key_values(&text)?
        .into_iter()
        .map(|(k, v)| (format!("scene.{k}"), v))
        .collect();
    cfg.apply(&map)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(())
}

fn print_report(rows: &[pl::DetectionRow]) {
    println!(
        "{:<18}{:>9}{:>6}{:>6}{:>6}{:>11}{:>9}",
        "stage", "detected", "TP", "FA", "M", "precision", "recall"
    );
    for r in rows {
        match r.scored {
            Some((tp, fa, m)) => println!(
                "{:<18}{:>9}{:>6}{:>6}{:>6}{:>10.2}%{:>8.2}%",
                r.stage,
                r.detected,
                tp,
                fa,
                m,
                r.precision().unwrap_or(0.0),
                r.recall().unwrap_or(0.0)
            ),
            None => println!("{:<18}{:>9}", r.stage, r.detected),
        }
    }
}

fn print_stages(title: &str, rows: &[StageRow]) {
    println!("{title}");
    let before = rows.first().map(|r| r.mean);
    for r in rows {
        let gain = match before {
            Some(b) if b > 0.0 && r.stage != "before" => {
                format!("{:>8.2}%", (b - r.mean) / b * 100.0)
            }
            _ => String::new(),
        };
        println!(
            "  {:<12}{:>8.3} m  std {:>6.3} m{gain}",
            r.stage, r.mean, r.std
        );
    }
}

fn theta_path(paths: &Paths, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| paths.artifact("theta_global.txt"))
}

/// Image positions of the inlier matches saved by `coarse`, if any.
fn inlier_pixels(paths: &Paths) -> Result<Vec<[f64; 2]>> {
    let p = paths.artifact("correspondences.txt");
    if !p.exists() {
        log::warn!(
            "{} not found; per-patch correspondence counts will be zero",
            p.display()
        );
        return Ok(Vec::new());
    }
    let all = read_correspondences::<f64, _>(BufReader::new(File::open(&p)?))?;
    Ok(all
        .iter()
        .filter(|m| m.inlier)
        .map(|m| m.image_px)
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let spec = match &cli.command {
        Command::Synth { spec } => spec.as_deref(),
        _ => None,
    };
    let cfg = load_config(&cli.common, spec)?;
    match cli.command {
        Command::Synth { .. } => {
            let (inputs, files) = pl::cmd_synth(&cfg)?;
            let truth = inputs.truth.as_ref().expect("synthetic scenes carry truth");
            let frame = inputs.image.frame();
            println!("buildings {}", truth.buildings.len());
            println!("trees {}", truth.trees.len());
            println!("points {}", inputs.cloud.len());
            println!("building points {}", truth.building_point_count());
            println!("image {}x{}", frame.cols, frame.rows);
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::ExtractLidar => {
            let paths = Paths::resolve(&cfg);
            let cloud = pl::read_cloud(&paths.cloud)
                .with_context(|| format!("reading {}", paths.cloud.display()))?;
            let regions = pl::extract_lidar(&cloud, &cfg)?;
            std::fs::create_dir_all(&paths.out)?;
            registrar::lidar_extract::write_regions_wkt(
                File::create(paths.artifact("lidar_regions.wkt"))?,
                &regions,
            )?;
            println!("regions {}", regions.len());
        }
        Command::ExtractImage => {
            let paths = Paths::resolve(&cfg);
            let image = registrar::io::read_rgb(&paths.image, cfg.gsd)
                .with_context(|| format!("reading {}", paths.image.display()))?;
            let (_, segments) = pl::extract_image(&image, &cfg)?;
            std::fs::create_dir_all(&paths.out)?;
            registrar::image_extract::write_segment_table(
                File::create(paths.artifact("segments.txt"))?,
                &segments,
            )?;
            println!("segments {}", segments.len());
        }
        Command::Match => {
            let paths = Paths::resolve(&cfg);
            let inputs = pl::load_inputs(&paths, &cfg)?;
            let regions = pl::extract_lidar(&inputs.cloud, &cfg)?;
            let (_, segments) = pl::extract_image(&inputs.image, &cfg)?;
            let m = pl::match_candidates(&regions, &segments, &inputs.hint, &cfg)?;
            let rows = pl::detection_report(
                &regions,
                &segments,
                &m,
                inputs.image.frame(),
                inputs.truth.as_ref(),
            )?;
            registrar::matching::write_correspondences(
                File::create(paths.artifact("correspondences.txt"))?,
                &m.matches,
            )?;
            pl::write_detection_report(File::create(paths.artifact("match_report.csv"))?, &rows)?;
            println!("guide {:.2} {:.2} px", m.guide[0], m.guide[1]);
            print_report(&rows);
        }
        Command::Coarse => {
            let paths = Paths::resolve(&cfg);
            let inputs = pl::load_inputs(&paths, &cfg)?;
            let coarse = pl::run_coarse(&inputs, &cfg)?;
            pl::write_coarse(&paths, &coarse)?;
            print_report(&coarse.report);
            println!(
                "pairs {}  reprojection RMSE {:.4} px",
                coarse.estimate.pairs, coarse.estimate.rmse
            );
            print!("{}", coarse.estimate.pose);
        }
        Command::Superres { pose } => {
            let paths = Paths::resolve(&cfg);
            let inputs = pl::load_inputs(&paths, &cfg)?;
            let pose_file = theta_path(&paths, pose);
            let pose = pl::read_pose(&pose_file)
                .with_context(|| format!("reading {}", pose_file.display()))?;
            let (z, i) = pl::render_pose(&inputs, &pose, &cfg)?;
            pl::write_rasters(&paths, "superres", &pose, &z, &i)?;
            println!(
                "wrote superres_z/superres_i rasters {}x{}",
                z.cols(),
                z.rows()
            );
        }
        Command::Fine { theta } => {
            let paths = Paths::resolve(&cfg);
            let inputs = pl::load_inputs(&paths, &cfg)?;
            let theta_file = theta_path(&paths, theta);
            let theta = pl::read_pose(&theta_file)
                .with_context(|| format!("reading {}", theta_file.display()))?;
            let px = inlier_pixels(&paths)?;
            let fine = pl::run_fine(&inputs, &theta, &px, &cfg)?;
            pl::write_fine(&paths, &fine)?;
            let (z, i) = pl::render_field(&inputs, &fine.field, &theta, &cfg)?;
            pl::write_rasters(&paths, "registered", &theta, &z, &i)?;
            write_rgb_png(
                &paths.artifact("overlay.png"),
                &pl::overlay(&inputs.image, &i)?,
            )?;
            for r in &fine.results {
                println!(
                    "patch {:>3}  {} {:.4} -> {:.4}  ({} evaluations)",
                    r.index, cfg.fine.objective, r.initial_value, r.value, r.evaluations
                );
            }
            if !fine.failed.is_empty() {
                println!("failed patches kept the global pose: {:?}", fine.failed);
            }
        }
        Command::Eval => {
            let paths = Paths::resolve(&cfg);
            let inputs: Inputs = pl::load_inputs(&paths, &cfg)?;
            let truth = inputs
                .truth
                .as_ref()
                .ok_or_else(|| Error::Config("eval needs ground truth (paths.truth)".into()))?;
            let theta = pl::read_pose(&paths.artifact("theta_global.txt"))?;
            let field_path = paths.artifact("pose_field.csv");
            let field = pl::read_pose_field(
                &std::fs::read_to_string(&field_path)
                    .with_context(|| format!("reading {}", field_path.display()))?,
            )?;
            let fine_name = format!("fine_{}", cfg.fine.objective);
            let stages = [
                ("before", StagePose::Global(&inputs.hint)),
                ("coarse", StagePose::Global(&theta)),
                (
                    fine_name.as_str(),
                    StagePose::Field {
                        field: &field,
                        init: &theta,
                    },
                ),
            ];
            let report = pl::evaluate(truth, inputs.image.frame(), &stages)?;
            let grid = paths.artifact("registered_i.grid");
            let ov = if grid.exists() {
                let (_, i) = read_float_grid(BufReader::new(File::open(&grid)?))?;
                Some(pl::overlay(&inputs.image, &i.map(|v| v as f64))?)
            } else {
                log::warn!("{} not found; skipping the overlay", grid.display());
                None
            };
            pl::write_eval(&paths, &report, ov.as_ref())?;
            print_stages("roof-centroid discrepancy", &report.points);
            print_stages("check-pair-line Hausdorff distance", &report.lines);
        }
        Command::Pipeline => {
            let summary = pl::run_pipeline(&cfg)?;
            print_report(&summary.coarse.report);
            println!(
                "coarse reprojection RMSE {:.4} px",
                summary.coarse.estimate.rmse
            );
            let gains = summary
                .fine
                .results
                .iter()
                .filter(|r| r.value >= r.initial_value)
                .count();
            println!(
                "fine: {}/{} patches kept or gained {}",
                gains,
                summary.fine.results.len(),
                cfg.fine.objective
            );
            if let Some(e) = &summary.eval {
                print_stages("roof-centroid discrepancy", &e.points);
                print_stages("check-pair-line Hausdorff distance", &e.lines);
            }
            println!("{} files in {}", summary.files.len(), cfg.out_dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::class);
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Io) => 3,
        Some(ErrorClass::Degenerate) => 4,
        Some(ErrorClass::NonConvergence) => 5,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGISTRAR_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
