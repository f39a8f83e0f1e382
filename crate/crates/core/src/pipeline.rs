//! Stage drivers: coarse registration, fine registration, evaluation, and
//! the on-disk artifacts of each command.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::config::{MatchFilter, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{checkerboard_overlay, mean_std, CheckPointPair, LineSegment2D, StageRow};
use crate::geom::{CameraPose, Frame, POSE_KEYS};
use crate::hull::P2;
use crate::image_extract::{
    mean_shift_segment, refine_segments, rgb_to_lab, write_segment_table, CandidateSegment,
};
use crate::io;
use crate::lidar_extract::{extract_building_regions, write_regions_wkt, BuildingRegion};
use crate::matching::{
    flag_inliers, gtm_filter, image_candidates, initial_match, largest_segment_translation,
    project_regions, ransac_filter, validate_area_direction, write_correspondences, Candidate,
    Correspondence, LidarCandidate,
};
use crate::pose_estimate::{gold_standard, Corr3D2D, Estimate};
use crate::raster::{OpticalImage, Raster, Window};
use crate::simreg::{
    optimize_patch, partition_patches, render_registered, write_patch_report, PatchLayout,
    PatchResult, PoseField,
};
use crate::superres::{super_resolve, Channel};
use crate::synth::{self, roof_label_raster, GroundTruth};

/// Scene data a run works on.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub cloud: PointCloud<f64>,
    pub image: OpticalImage,
    /// Initial camera pose.
    pub hint: CameraPose<f64>,
    pub truth: Option<GroundTruth>,
}

/// File locations, defaulting to the names the `synth` command writes into
/// the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub cloud: PathBuf,
    pub image: PathBuf,
    pub hint: PathBuf,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
}

impl Paths {
    pub fn resolve(cfg: &PipelineConfig) -> Self {
        let out = cfg.out_dir.clone();
        let truth = cfg
            .truth
            .clone()
            .or_else(|| out.join("truth_pose.txt").exists().then(|| out.clone()));
        Paths {
            cloud: cfg.cloud.clone().unwrap_or_else(|| out.join("cloud.txt")),
            image: cfg.image.clone().unwrap_or_else(|| out.join("image.png")),
            hint: cfg
                .pose_hint
                .clone()
                .unwrap_or_else(|| out.join("hint_pose.txt")),
            truth,
            out,
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Reads a cloud in the text format, or the binary one for `.bin` files.
pub fn read_cloud(path: &Path) -> Result<PointCloud<f64>> {
    let f = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "bin") {
        PointCloud::read_binary(f)
    } else {
        PointCloud::read_text(f)
    }
}

pub fn read_pose(path: &Path) -> Result<CameraPose<f64>> {
    std::fs::read_to_string(path)?.parse()
}

pub fn load_inputs(paths: &Paths, cfg: &PipelineConfig) -> Result<Inputs> {
    let cloud = read_cloud(&paths.cloud)?;
    let image = io::read_rgb(&paths.image, cfg.gsd)?;
    let hint = read_pose(&paths.hint)?;
    let truth = match &paths.truth {
        Some(dir) => Some(synth::read_truth(dir, cfg.gsd)?),
        None => None,
    };
    Ok(Inputs {
        cloud,
        image,
        hint,
        truth,
    })
}

/// Generates the configured synthetic scene and writes it, plus the
/// perturbed starting pose, into the output directory.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<(Inputs, Vec<PathBuf>)> {
    let spec = cfg.scene_spec();
    let scene = synth::generate_scene(&spec)?;
    let hint = synth::perturb_pose(
        &scene.truth.pose,
        cfg.perturb_translation,
        cfg.perturb_angle_deg.to_radians(),
        cfg.perturb_seed(),
    );
    let mut files = synth::write_scene(&cfg.out_dir, &scene)?;
    let hint_path = cfg.out_dir.join("hint_pose.txt");
    std::fs::write(&hint_path, hint.to_string())?;
    files.push(hint_path);
    let spec_path = cfg.out_dir.join("scene.txt");
    std::fs::write(&spec_path, spec.to_text())?;
    files.push(spec_path);
    let inputs = Inputs {
        cloud: scene.cloud,
        image: scene.image,
        hint,
        truth: Some(scene.truth),
    };
    Ok((inputs, files))
}

pub fn extract_lidar(
    cloud: &PointCloud<f64>,
    cfg: &PipelineConfig,
) -> Result<Vec<BuildingRegion<f64>>> {
    extract_building_regions(cloud, &cfg.extraction).map_err(|e| e.in_stage("extract-lidar"))
}

/// Mean-shift labels and the refined candidate segments.
pub fn extract_image(
    image: &OpticalImage,
    cfg: &PipelineConfig,
) -> Result<(Raster<u32>, Vec<CandidateSegment<f64>>)> {
    let run = || -> Result<_> {
        let labels = mean_shift_segment(&rgb_to_lab::<f64>(image), &cfg.mean_shift)?;
        let mut segments = refine_segments(&labels, image.gsd, &cfg.refine)?;
        // A segment cut by the frame has a shifted centroid and a truncated
        // area, so it can neither guide nor anchor a match.
        let (rows, cols) = (labels.rows(), labels.cols());
        let mut clipped = BTreeSet::new();
        for c in 0..cols {
            clipped.insert(labels.get(0, c));
            clipped.insert(labels.get(rows - 1, c));
        }
        for r in 0..rows {
            clipped.insert(labels.get(r, 0));
            clipped.insert(labels.get(r, cols - 1));
        }
        let before = segments.len();
        segments.retain(|s| !clipped.contains(&s.id));
        log::debug!(
            "dropped {} segments touching the frame",
            before - segments.len()
        );
        Ok((labels, segments))
    };
    run().map_err(|e| e.in_stage("extract-image"))
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub lidar: Vec<LidarCandidate<f64>>,
    pub image: Vec<Candidate<f64>>,
    /// Translation guide (px); zero when the largest segments are ambiguous.
    pub guide: P2<f64>,
    /// Initial matches with the surviving ones flagged as inliers.
    pub matches: Vec<Correspondence<f64>>,
}

impl MatchOutcome {
    pub fn inliers(&self) -> impl Iterator<Item = &Correspondence<f64>> {
        self.matches.iter().filter(|m| m.inlier)
    }
}

pub fn match_candidates(
    regions: &[BuildingRegion<f64>],
    segments: &[CandidateSegment<f64>],
    hint: &CameraPose<f64>,
    cfg: &PipelineConfig,
) -> Result<MatchOutcome> {
    let run = || -> Result<MatchOutcome> {
        let lidar = project_regions(regions, hint)?;
        let image = image_candidates(segments);
        let lidar_only: Vec<Candidate<f64>> = lidar.iter().map(|l| l.candidate).collect();
        let guide = match largest_segment_translation(&lidar_only, &image, &cfg.matching) {
            Ok(g) => g,
            Err(e @ (Error::AmbiguousLargest | Error::EmptySet)) => {
                log::warn!("no translation guide ({e}); matching without one");
                [0.0, 0.0]
            }
            Err(e) => return Err(e),
        };
        let initial = initial_match(&lidar, &image, guide);
        let filtered = match cfg.filter {
            MatchFilter::Gtm => gtm_filter(&initial, cfg.matching.gtm_k),
            MatchFilter::Ransac => ransac_filter(
                &initial,
                cfg.ransac_threshold,
                cfg.ransac_iterations,
                cfg.ransac_seed(),
            ),
        };
        // Too few matches to filter also means too few to estimate a pose;
        // let the estimator report it.
        let filtered = match filtered {
            Err(Error::TooFewMatches { got, .. }) => {
                log::warn!("only {got} initial matches; nothing to filter");
                Vec::new()
            }
            other => other?,
        };
        let kept = validate_area_direction(&filtered, &lidar_only, &image, &cfg.matching)?;
        log::info!(
            "matching: {} initial, {} after {}, {} after area/direction",
            initial.len(),
            filtered.len(),
            cfg.filter,
            kept.len()
        );
        Ok(MatchOutcome {
            lidar,
            image,
            guide,
            matches: flag_inliers(&initial, &kept),
        })
    };
    run().map_err(|e| e.in_stage("match"))
}

/// Gold Standard pose from the inlier matches: region centroids at their
/// mean elevation against segment centroids.
pub fn estimate_pose(outcome: &MatchOutcome, cfg: &PipelineConfig) -> Result<Estimate<f64>> {
    let z: BTreeMap<usize, f64> = outcome
        .lidar
        .iter()
        .map(|l| (l.candidate.id, l.mean_z))
        .collect();
    let corrs: Vec<Corr3D2D<f64>> = outcome
        .inliers()
        .map(|m| Corr3D2D {
            world: [m.lidar_xy[0], m.lidar_xy[1], z[&m.lidar_id]],
            image: m.image_px,
        })
        .collect();
    gold_standard(&corrs, &cfg.gold_standard).map_err(|e| e.in_stage("coarse"))
}

/// Detection counts for one row of the extraction/matching report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRow {
    pub stage: &'static str,
    pub detected: usize,
    /// `(true positives, false alarms, misses)` against ground truth.
    pub scored: Option<(usize, usize, usize)>,
}

impl DetectionRow {
    pub fn precision(&self) -> Option<f64> {
        self.scored.map(|(tp, fa, _)| {
            if tp + fa == 0 {
                0.0
            } else {
                100.0 * tp as f64 / (tp + fa) as f64
            }
        })
    }

    pub fn recall(&self) -> Option<f64> {
        self.scored.map(|(tp, _, m)| {
            if tp + m == 0 {
                0.0
            } else {
                100.0 * tp as f64 / (tp + m) as f64
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CoarseResult {
    pub regions: Vec<BuildingRegion<f64>>,
    pub labels: Raster<u32>,
    pub segments: Vec<CandidateSegment<f64>>,
    pub matching: MatchOutcome,
    pub estimate: Estimate<f64>,
    pub report: Vec<DetectionRow>,
}

pub fn run_coarse(inputs: &Inputs, cfg: &PipelineConfig) -> Result<CoarseResult> {
    let regions = extract_lidar(&inputs.cloud, cfg)?;
    let (labels, segments) = extract_image(&inputs.image, cfg)?;
    log::info!(
        "{} LiDAR regions, {} image segments",
        regions.len(),
        segments.len()
    );
    let matching = match_candidates(&regions, &segments, &inputs.hint, cfg)?;
    let report = detection_report(
        &regions,
        &segments,
        &matching,
        inputs.image.frame(),
        inputs.truth.as_ref(),
    )?;
    let estimate = estimate_pose(&matching, cfg)?;
    log::info!(
        "coarse pose from {} pairs, reprojection RMSE {:.3} px",
        estimate.pairs,
        estimate.rmse
    );
    Ok(CoarseResult {
        regions,
        labels,
        segments,
        matching,
        estimate,
        report,
    })
}

/// Building (by footprint containment of the region centroid) for each
/// LiDAR region.
fn region_buildings(
    regions: &[BuildingRegion<f64>],
    truth: &GroundTruth,
) -> BTreeMap<usize, usize> {
    regions
        .iter()
        .filter_map(|r| {
            truth
                .buildings
                .iter()
                .find(|b| b.contains(r.centroid[0], r.centroid[1]))
                .map(|b| (r.id, b.id))
        })
        .collect()
}

/// Building seen at each segment's centroid pixel.
fn segment_buildings(
    segments: &[CandidateSegment<f64>],
    roofs: &Raster<u32>,
) -> BTreeMap<usize, usize> {
    segments
        .iter()
        .filter_map(|s| {
            let (c, r) = (s.centroid[0].round(), s.centroid[1].round());
            if c < 0.0 || r < 0.0 || c as usize >= roofs.cols() || r as usize >= roofs.rows() {
                return None;
            }
            let l = roofs.get(r as usize, c as usize);
            (l > 0).then(|| (s.id as usize, l as usize - 1))
        })
        .collect()
}

/// TP/FA/M for an assignment of detections to buildings: each building
/// counts once, duplicates are false alarms.
fn score(
    detected: usize,
    assigned: &BTreeMap<usize, usize>,
    reference: &BTreeSet<usize>,
) -> (usize, usize, usize) {
    let hit: BTreeSet<usize> = assigned
        .values()
        .filter(|b| reference.contains(b))
        .copied()
        .collect();
    let tp = hit.len();
    (tp, detected - tp, reference.len() - tp)
}

/// Extraction and matching counts, scored against `truth` when given.
pub fn detection_report(
    regions: &[BuildingRegion<f64>],
    segments: &[CandidateSegment<f64>],
    matching: &MatchOutcome,
    frame: Frame,
    truth: Option<&GroundTruth>,
) -> Result<Vec<DetectionRow>> {
    let inliers: Vec<&Correspondence<f64>> = matching.inliers().collect();
    let mut rows = vec![
        DetectionRow {
            stage: "lidar_extraction",
            detected: regions.len(),
            scored: None,
        },
        DetectionRow {
            stage: "image_extraction",
            detected: segments.len(),
            scored: None,
        },
        DetectionRow {
            stage: "matching",
            detected: inliers.len(),
            scored: None,
        },
    ];
    let Some(truth) = truth else { return Ok(rows) };
    let roofs = roof_label_raster(truth, frame)?;
    let visible: BTreeSet<usize> = roofs
        .data()
        .iter()
        .filter(|&&l| l > 0)
        .map(|&l| l as usize - 1)
        .collect();
    let all: BTreeSet<usize> = truth.buildings.iter().map(|b| b.id).collect();
    let by_region = region_buildings(regions, truth);
    let by_segment = segment_buildings(segments, &roofs);
    rows[0].scored = Some(score(regions.len(), &by_region, &all));
    rows[1].scored = Some(score(segments.len(), &by_segment, &visible));
    // A pair is correct when both sides see the same building; buildings
    // found on both sides but left unpaired are misses.
    let matchable: BTreeSet<usize> = by_region
        .values()
        .filter(|b| by_segment.values().any(|s| s == *b))
        .copied()
        .collect();
    let mut correct = BTreeMap::new();
    for (k, m) in inliers.iter().enumerate() {
        if let (Some(a), Some(b)) = (by_region.get(&m.lidar_id), by_segment.get(&m.image_id)) {
            if a == b {
                correct.insert(k, *a);
            }
        }
    }
    rows[2].scored = Some(score(inliers.len(), &correct, &matchable));
    Ok(rows)
}

/// `stage,detected,tp,fa,missed,precision_pct,recall_pct`; scoring columns
/// stay empty without ground truth.
pub fn write_detection_report<W: Write>(mut w: W, rows: &[DetectionRow]) -> Result<()> {
    writeln!(w, "stage,detected,tp,fa,missed,precision_pct,recall_pct")?;
    for r in rows {
        match r.scored {
            Some((tp, fa, m)) => writeln!(
                w,
                "{},{},{tp},{fa},{m},{:.2},{:.2}",
                r.stage,
                r.detected,
                r.precision().unwrap(),
                r.recall().unwrap()
            )?,
            None => writeln!(w, "{},{},,,,,", r.stage, r.detected)?,
        }
    }
    Ok(())
}

pub fn write_coarse(paths: &Paths, result: &CoarseResult) -> Result<()> {
    write_regions_wkt(
        create(&paths.artifact("lidar_regions.wkt"))?,
        &result.regions,
    )?;
    write_segment_table(create(&paths.artifact("segments.txt"))?, &result.segments)?;
    write_correspondences(
        create(&paths.artifact("correspondences.txt"))?,
        &result.matching.matches,
    )?;
    write_detection_report(create(&paths.artifact("match_report.csv"))?, &result.report)?;
    result
        .estimate
        .write_report(create(&paths.artifact("theta_global.txt"))?)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FineResult {
    pub layout: PatchLayout,
    pub results: Vec<PatchResult<f64>>,
    /// Patches whose optimization failed and kept the initial pose.
    pub failed: Vec<usize>,
    pub field: PoseField<f64>,
    /// Inlier correspondences falling in each patch.
    pub correspondences: Vec<usize>,
}

/// Patch-wise pose optimization from `theta_global` on `cfg.threads`
/// workers. Results come back in patch order.
pub fn run_fine(
    inputs: &Inputs,
    theta_global: &CameraPose<f64>,
    correspondences: &[P2<f64>],
    cfg: &PipelineConfig,
) -> Result<FineResult> {
    let stage = |e: Error| e.in_stage("fine");
    let grid = partition_patches(
        inputs.image.frame(),
        &inputs.cloud,
        theta_global,
        cfg.patch.0,
        cfg.patch.1,
    )
    .map_err(stage)?;
    let luma = inputs.image.luma();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<PatchResult<f64>>> = pool.install(|| {
        grid.patches
            .par_iter()
            .map(|p| optimize_patch(p, &luma.crop(&p.window), theta_global, &cfg.fine))
            .collect()
    });
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failed = Vec::new();
    for (i, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("patch {i} failed ({e}); keeping the global pose");
                failed.push(i);
                results.push(PatchResult {
                    index: i,
                    theta_star: *theta_global,
                    value: 0.0,
                    initial_value: 0.0,
                    evaluations: 0,
                });
            }
        }
    }
    let layout = grid.layout;
    let mut counts = vec![0usize; layout.len()];
    for p in correspondences {
        let (r, c) = layout.locate(p[0], p[1]);
        counts[layout.index(r, c)] += 1;
    }
    let field = PoseField::new(
        layout,
        results.iter().map(|r| r.theta_star).collect(),
        cfg.idw_radius,
    )
    .map_err(stage)?;
    Ok(FineResult {
        layout,
        results,
        failed,
        field,
        correspondences: counts,
    })
}

/// `# layout` header, then one CSV row of pose parameters per patch.
pub fn write_pose_field<W: Write>(mut w: W, field: &PoseField<f64>) -> Result<()> {
    let l = &field.layout;
    writeln!(
        w,
        "# rows={} cols={} patch_w={} patch_h={} radius={}",
        l.frame.rows, l.frame.cols, l.patch_w, l.patch_h, field.radius
    )?;
    writeln!(w, "patch,{}", POSE_KEYS.join(","))?;
    for (i, p) in field.poses.iter().enumerate() {
        let vals: Vec<String> = p.to_array().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn read_pose_field(text: &str) -> Result<PoseField<f64>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let err = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let fields: BTreeMap<&str, usize> = header
        .trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| {
            v.parse()
                .map(|v| (k, v))
                .map_err(|_| err(1, "bad layout header"))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| err(1, &format!("layout header missing `{k}`")))
    };
    let layout = PatchLayout::new(
        Frame::new(get("rows")?, get("cols")?),
        get("patch_w")?,
        get("patch_h")?,
    )?;
    let mut poses = Vec::new();
    for (n, line) in lines.enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(n + 2, "bad number"))?;
        let a: [f64; 11] = v
            .try_into()
            .map_err(|_| err(n + 2, "expected 11 pose values"))?;
        poses.push(CameraPose::from_array(a));
    }
    PoseField::new(layout, poses, get("radius")?)
}

/// Full-frame z- and i-images under the blended poses.
pub fn render_field(
    inputs: &Inputs,
    field: &PoseField<f64>,
    theta_global: &CameraPose<f64>,
    cfg: &PipelineConfig,
) -> Result<(Raster<f64>, Raster<f64>)> {
    let window = Window::full(inputs.image.frame());
    let z = render_registered(
        &inputs.cloud,
        field,
        theta_global,
        &window,
        Channel::Z,
        &cfg.fine.fista,
    )?;
    let i = render_registered(
        &inputs.cloud,
        field,
        theta_global,
        &window,
        Channel::I,
        &cfg.fine.fista,
    )?;
    Ok((z.raster, i.raster))
}

/// Full-frame z- and i-images under one pose.
pub fn render_pose(
    inputs: &Inputs,
    pose: &CameraPose<f64>,
    cfg: &PipelineConfig,
) -> Result<(Raster<f64>, Raster<f64>)> {
    let window = Window::full(inputs.image.frame());
    let z = super_resolve(&inputs.cloud, pose, &window, Channel::Z, &cfg.fine.fista)?;
    let i = super_resolve(&inputs.cloud, pose, &window, Channel::I, &cfg.fine.fista)?;
    Ok((z.raster, i.raster))
}

/// Writes `<prefix>_z.grid`, `<prefix>_i.grid` and 16-bit PNG previews.
pub fn write_rasters(
    paths: &Paths,
    prefix: &str,
    pose: &CameraPose<f64>,
    z: &Raster<f64>,
    i: &Raster<f64>,
) -> Result<()> {
    let hash = io::fnv1a64(pose.to_string().as_bytes());
    for (name, r) in [("z", z), ("i", i)] {
        io::write_float_grid(
            create(&paths.artifact(&format!("{prefix}_{name}.grid")))?,
            r,
            name,
            hash,
        )?;
        io::write_gray16_png(
            &paths.artifact(&format!("{prefix}_{name}.png")),
            &io::to_gray16(r),
        )?;
    }
    Ok(())
}

pub fn write_fine(paths: &Paths, fine: &FineResult) -> Result<()> {
    write_patch_report(
        create(&paths.artifact("patches.csv"))?,
        &fine.results,
        &fine.correspondences,
    )?;
    write_pose_field(create(&paths.artifact("pose_field.csv"))?, &fine.field)?;
    if !fine.failed.is_empty() {
        let mut w = create(&paths.artifact("failed_patches.txt"))?;
        for i in &fine.failed {
            writeln!(w, "{i}")?;
        }
    }
    Ok(())
}

/// How a stage maps world points into the image.
#[derive(Debug, Clone, Copy)]
pub enum StagePose<'a> {
    Global(&'a CameraPose<f64>),
    Field {
        field: &'a PoseField<f64>,
        init: &'a CameraPose<f64>,
    },
}

impl StagePose<'_> {
    pub fn project(&self, xyz: [f64; 3]) -> Option<P2<f64>> {
        match self {
            StagePose::Global(p) => p.camera_matrix().project(xyz).ok(),
            StagePose::Field { field, init } => field.project(init, xyz).map(|(px, _)| px),
        }
    }
}

/// Buildings whose roof centroid the true camera sees inside the frame.
fn visible_buildings(truth: &GroundTruth, frame: Frame) -> Vec<&synth::BuildingTruth> {
    let p = truth.pose.camera_matrix();
    truth
        .buildings
        .iter()
        .filter(|b| {
            p.project(b.roof_centroid()).is_ok_and(|[x, y]| {
                x >= 0.0 && y >= 0.0 && x <= frame.cols as f64 - 1.0 && y <= frame.rows as f64 - 1.0
            })
        })
        .collect()
}

/// Roof-centroid check points in image-plane meters (pixels times GSD):
/// the true position against the stage's projection.
pub fn check_points(
    truth: &GroundTruth,
    frame: Frame,
    stage: StagePose,
) -> Result<Vec<CheckPointPair<f64>>> {
    let p = truth.pose.camera_matrix();
    let g = truth.gsd;
    visible_buildings(truth, frame)
        .into_iter()
        .map(|b| {
            let t = p.project(b.roof_centroid())?;
            let s = stage
                .project(b.roof_centroid())
                .ok_or(Error::DegenerateProjection)?;
            Ok(CheckPointPair {
                optical: [t[0] * g, t[1] * g],
                lidar: [s[0] * g, s[1] * g],
            })
        })
        .collect()
}

/// Roof-outline check-pair lines in image-plane meters.
pub fn check_lines(
    truth: &GroundTruth,
    frame: Frame,
    stage: StagePose,
) -> Result<Vec<(LineSegment2D<f64>, LineSegment2D<f64>)>> {
    let p = truth.pose.camera_matrix();
    let g = truth.gsd;
    let mut out = Vec::new();
    for b in visible_buildings(truth, frame) {
        for [a, e] in b.roof_edges() {
            let (ta, te) = (p.project(a)?, p.project(e)?);
            let sa = stage.project(a).ok_or(Error::DegenerateProjection)?;
            let se = stage.project(e).ok_or(Error::DegenerateProjection)?;
            out.push((
                LineSegment2D::new([ta[0] * g, ta[1] * g], [te[0] * g, te[1] * g])?,
                LineSegment2D::new([sa[0] * g, sa[1] * g], [se[0] * g, se[1] * g])?,
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Roof-centroid discrepancy per stage (m).
    pub points: Vec<StageRow>,
    /// Hausdorff check-pair-line distance per stage (m).
    pub lines: Vec<StageRow>,
}

pub fn evaluate(
    truth: &GroundTruth,
    frame: Frame,
    stages: &[(&str, StagePose)],
) -> Result<EvalReport> {
    let mut points = Vec::new();
    let mut lines = Vec::new();
    for (name, stage) in stages {
        let cp = check_points(truth, frame, *stage)?;
        let d: Vec<f64> = cp.iter().map(|c| c.distance()).collect();
        let (mean, std) = mean_std(&d).map_err(|e| e.in_stage("eval"))?;
        points.push(StageRow {
            stage: name.to_string(),
            mean,
            std,
        });
        let pairs = check_lines(truth, frame, *stage)?;
        let (mean, std) = crate::eval::pair_line_report(&pairs).map_err(|e| e.in_stage("eval"))?;
        lines.push(StageRow {
            stage: name.to_string(),
            mean,
            std,
        });
    }
    Ok(EvalReport { points, lines })
}

pub fn write_eval(
    paths: &Paths,
    report: &EvalReport,
    overlay: Option<&Raster<[u8; 3]>>,
) -> Result<()> {
    crate::eval::write_stage_table(create(&paths.artifact("discrepancy.csv"))?, &report.points)?;
    crate::eval::write_stage_table(create(&paths.artifact("lines.csv"))?, &report.lines)?;
    if let Some(o) = overlay {
        io::write_rgb_png(&paths.artifact("overlay.png"), o)?;
    }
    Ok(())
}

/// Tile edge of the checkerboard overlay (px).
pub const OVERLAY_TILE: usize = 50;

pub fn overlay(image: &OpticalImage, i_img: &Raster<f64>) -> Result<Raster<[u8; 3]>> {
    checkerboard_overlay(image, i_img, OVERLAY_TILE)
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub coarse: CoarseResult,
    pub fine: FineResult,
    pub eval: Option<EvalReport>,
    pub files: Vec<PathBuf>,
}

/// Synthesizes a scene when no cloud is configured, then runs coarse,
/// fine and evaluation, writing every artifact under `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let inputs = if cfg.cloud.is_none() {
        cmd_synth(cfg)?.0
    } else {
        load_inputs(&Paths::resolve(cfg), cfg)?
    };
    let paths = Paths::resolve(cfg);
    let coarse = run_coarse(&inputs, cfg)?;
    write_coarse(&paths, &coarse)?;
    let theta_global = coarse.estimate.pose;
    let corr_px: Vec<P2<f64>> = coarse.matching.inliers().map(|m| m.image_px).collect();
    let fine = run_fine(&inputs, &theta_global, &corr_px, cfg)?;
    write_fine(&paths, &fine)?;
    let (z, i) = render_field(&inputs, &fine.field, &theta_global, cfg)?;
    write_rasters(&paths, "registered", &theta_global, &z, &i)?;
    let ov = overlay(&inputs.image, &i)?;
    let eval = match &inputs.truth {
        Some(truth) => {
            let fine_name = format!("fine_{}", cfg.fine.objective);
            let stages = [
                ("before", StagePose::Global(&inputs.hint)),
                ("coarse", StagePose::Global(&theta_global)),
                (
                    fine_name.as_str(),
                    StagePose::Field {
                        field: &fine.field,
                        init: &theta_global,
                    },
                ),
            ];
            let report = evaluate(truth, inputs.image.frame(), &stages)?;
            write_eval(&paths, &report, Some(&ov))?;
            Some(report)
        }
        None => {
            io::write_rgb_png(&paths.artifact("overlay.png"), &ov)?;
            None
        }
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&cfg.out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    Ok(PipelineSummary {
        coarse,
        fine,
        eval,
        files,
    })
}
