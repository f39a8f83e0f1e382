//! Pipeline configuration: every stage's parameters in one flat
//! `section.name = value` file.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! explicit overrides (the CLI flags), each applied through [`PipelineConfig::set`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::image_extract::{MeanShiftConfig, RefineConfig};
use crate::io::parse_key_values;
use crate::lidar_extract::ExtractionConfig;
use crate::matching::MatchConfig;
use crate::pose_estimate::GoldStandardConfig;
use crate::simreg::{FineConfig, Objective};
use crate::synth::SceneSpec;

/// Outlier filter applied to the initial matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFilter {
    Gtm,
    Ransac,
}

impl std::str::FromStr for MatchFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gtm" => Ok(MatchFilter::Gtm),
            "ransac" => Ok(MatchFilter::Ransac),
            _ => Err(Error::Config(format!(
                "unknown match filter `{s}` (expected gtm or ransac)"
            ))),
        }
    }
}

impl std::fmt::Display for MatchFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchFilter::Gtm => "gtm",
            MatchFilter::Ransac => "ransac",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Input cloud; a synthetic scene is generated when absent.
    pub cloud: Option<PathBuf>,
    pub image: Option<PathBuf>,
    /// Initial camera pose record (e.g. from image metadata).
    pub pose_hint: Option<PathBuf>,
    /// Directory holding `truth_pose.txt` and `buildings.csv`, for evaluation.
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Ground sample distance of the image (m/px).
    pub gsd: f64,
    pub extraction: ExtractionConfig<f64>,
    pub mean_shift: MeanShiftConfig<f64>,
    pub refine: RefineConfig<f64>,
    pub matching: MatchConfig<f64>,
    pub filter: MatchFilter,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub gold_standard: GoldStandardConfig,
    pub fine: FineConfig<f64>,
    /// Patch size `(width, height)` in pixels.
    pub patch: (usize, usize),
    pub idw_radius: usize,
    pub threads: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    /// Explicit `scene.seed`; otherwise the scene uses `seed`.
    pub scene_seed: Option<u64>,
    /// Synthetic runs: camera center offset applied to the true pose (m).
    pub perturb_translation: f64,
    /// Synthetic runs: rotation offset norm (degrees).
    pub perturb_angle_deg: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cloud: None,
            image: None,
            pose_hint: None,
            truth: None,
            out_dir: PathBuf::from("out"),
            gsd: 0.15,
            extraction: ExtractionConfig::default(),
            mean_shift: MeanShiftConfig::default(),
            refine: RefineConfig::default(),
            matching: MatchConfig::default(),
            filter: MatchFilter::Gtm,
            ransac_threshold: 10.0,
            ransac_iterations: 500,
            gold_standard: GoldStandardConfig::default(),
            fine: FineConfig::default(),
            patch: (500, 550),
            idw_radius: 1,
            threads: 4,
            seed: 7,
            scene: SceneSpec::default(),
            scene_seed: None,
            perturb_translation: 1.5,
            perturb_angle_deg: 0.3,
        }
    }
}

/// Parses `WxH` (also `W,H` or `W H`).
pub fn parse_patch(s: &str) -> Option<(usize, usize)> {
    let mut it = s
        .split(|c: char| c == 'x' || c == 'X' || c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty());
    let w = it.next()?.parse().ok()?;
    let h = it.next()?.parse().ok()?;
    it.next().is_none().then_some((w, h))
}

impl PipelineConfig {
    /// Parses a config file's text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&parse_key_values(text)?)?;
        Ok(cfg)
    }

    /// Applies parsed `key = value` pairs, then validates the result.
    pub fn apply(&mut self, map: &BTreeMap<String, (usize, String)>) -> Result<()> {
        for (key, (line, value)) in map {
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: *line, msg },
                other => other,
            })?;
        }
        self.validate()
    }

    /// Sets one parameter from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("`{key}`: expected {what}, found `{value}`"));
        let f = || value.parse::<f64>().map_err(|_| bad("a number"));
        let u = || {
            value
                .parse::<usize>()
                .map_err(|_| bad("a non-negative integer"))
        };
        let path = || Some(PathBuf::from(value));
        match key {
            "paths.cloud" => self.cloud = path(),
            "paths.image" => self.image = path(),
            "paths.pose_hint" => self.pose_hint = path(),
            "paths.truth" => self.truth = path(),
            "paths.out" => self.out_dir = PathBuf::from(value),
            "image.gsd" => self.gsd = f()?,
            "lidar.relief_factor" => self.extraction.relief_factor = f()?,
            "lidar.grid_resolution" => self.extraction.grid_resolution = f()?,
            "lidar.min_segment_area" => self.extraction.min_segment_area = f()?,
            "lidar.opening_radius" => self.extraction.opening_radius = u()?,
            "segment.spatial_bandwidth" => self.mean_shift.spatial_bandwidth = f()?,
            "segment.range_bandwidth" => self.mean_shift.range_bandwidth = f()?,
            "segment.min_region" => self.mean_shift.min_region = u()?,
            "segment.max_iterations" => self.mean_shift.max_iterations = u()?,
            "segment.min_area" => self.refine.min_area = f()?,
            "segment.max_area" => self.refine.max_area = f()?,
            "segment.mbr_threshold" => self.refine.mbr_threshold = f()?,
            "match.gtm_k" => self.matching.gtm_k = u()?,
            "match.area_tolerance" => self.matching.area_tolerance = f()?,
            "match.direction_tolerance_deg" => {
                self.matching.direction_tolerance = f()?.to_radians()
            }
            "match.dominance" => self.matching.dominance = f()?,
            "match.filter" => self.filter = value.parse()?,
            "match.ransac_threshold" => self.ransac_threshold = f()?,
            "match.ransac_iterations" => self.ransac_iterations = u()?,
            "pose.max_iterations" => self.gold_standard.max_iterations = u()?,
            "pose.min_improvement" => self.gold_standard.min_improvement = f()?,
            "fista.lambda" => self.fine.fista.lambda = f()?,
            "fista.gamma" => self.fine.fista.gamma = f()?,
            "fista.k_max" => self.fine.fista.k_max = u()?,
            "fista.epsilon" => self.fine.fista.epsilon = f()?,
            "fine.objective" => self.fine.objective = value.parse::<Objective>()?,
            "fine.mi_bins" => self.fine.mi_bins = u()?,
            "fine.ncmi_bins" => self.fine.ncmi_bins = u()?,
            "fine.position_step" => self.fine.position_step = f()?,
            "fine.angle_step_deg" => self.fine.angle_step_deg = f()?,
            "fine.max_evaluations" => self.fine.nelder_mead.max_evaluations = u()?,
            "fine.f_tolerance" => self.fine.nelder_mead.f_tolerance = f()?,
            "fine.patch" => self.patch = parse_patch(value).ok_or_else(|| bad("WxH"))?,
            "fine.idw_radius" => self.idw_radius = u()?,
            "fine.threads" => self.threads = u()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "perturb.translation" => self.perturb_translation = f()?,
            "perturb.angle_deg" => self.perturb_angle_deg = f()?,
            _ if key.starts_with("scene.") => {
                let name = &key["scene.".len()..];
                self.scene.set(name, value)?;
                if name == "seed" {
                    self.scene_seed = Some(self.scene.seed);
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gsd > 0.0 && self.gsd.is_finite()) {
            return Err(Error::Config("image.gsd must be positive".into()));
        }
        self.extraction.validate()?;
        self.matching.validate()?;
        self.fine.fista.validate()?;
        if !(self.mean_shift.spatial_bandwidth > 0.0 && self.mean_shift.range_bandwidth > 0.0) {
            return Err(Error::Config("segment bandwidths must be positive".into()));
        }
        if !(self.refine.min_area > 0.0
            && self.refine.max_area > self.refine.min_area
            && self.refine.mbr_threshold > 0.0)
        {
            return Err(Error::Config(
                "segment area bounds must satisfy 0 < min < max".into(),
            ));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(Error::Config("fine.patch must be positive".into()));
        }
        if self.fine.mi_bins < 2 || self.fine.ncmi_bins < 2 {
            return Err(Error::Config("histograms need at least 2 bins".into()));
        }
        if !(self.fine.position_step > 0.0 && self.fine.angle_step_deg > 0.0)
            || self.fine.nelder_mead.max_evaluations == 0
        {
            return Err(Error::Config(
                "fine simplex steps and evaluation budget must be positive".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::Config("fine.threads must be at least 1".into()));
        }
        if !(self.perturb_translation >= 0.0 && self.perturb_angle_deg >= 0.0) {
            return Err(Error::Config("perturbation magnitudes must be >= 0".into()));
        }
        if !(self.ransac_threshold > 0.0) || self.ransac_iterations == 0 {
            return Err(Error::Config(
                "RANSAC threshold and iterations must be positive".into(),
            ));
        }
        self.scene.validate()
    }

    /// Scene spec with the seed resolved.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.scene_seed.unwrap_or(self.seed),
            ..self.scene.clone()
        }
    }

    /// Seed for the synthetic pose perturbation.
    pub fn perturb_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed for RANSAC sampling.
    pub fn ransac_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// Every parameter as a config file that reproduces this one (the scene
    /// palette excepted).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string());
        for (k, v) in [
            ("paths.cloud", p(&self.cloud)),
            ("paths.image", p(&self.image)),
            ("paths.pose_hint", p(&self.pose_hint)),
            ("paths.truth", p(&self.truth)),
        ] {
            if let Some(v) = v {
                kv(k, v);
            }
        }
        kv("paths.out", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("image.gsd", self.gsd.to_string());
        kv(
            "lidar.relief_factor",
            self.extraction.relief_factor.to_string(),
        );
        kv(
            "lidar.grid_resolution",
            self.extraction.grid_resolution.to_string(),
        );
        kv(
            "lidar.min_segment_area",
            self.extraction.min_segment_area.to_string(),
        );
        kv(
            "lidar.opening_radius",
            self.extraction.opening_radius.to_string(),
        );
        kv(
            "segment.spatial_bandwidth",
            self.mean_shift.spatial_bandwidth.to_string(),
        );
        kv(
            "segment.range_bandwidth",
            self.mean_shift.range_bandwidth.to_string(),
        );
        kv("segment.min_region", self.mean_shift.min_region.to_string());
        kv(
            "segment.max_iterations",
            self.mean_shift.max_iterations.to_string(),
        );
        kv("segment.min_area", self.refine.min_area.to_string());
        kv("segment.max_area", self.refine.max_area.to_string());
        kv(
            "segment.mbr_threshold",
            self.refine.mbr_threshold.to_string(),
        );
        kv("match.gtm_k", self.matching.gtm_k.to_string());
        kv(
            "match.area_tolerance",
            self.matching.area_tolerance.to_string(),
        );
        kv(
            "match.direction_tolerance_deg",
            self.matching.direction_tolerance.to_degrees().to_string(),
        );
        kv("match.dominance", self.matching.dominance.to_string());
        kv("match.filter", self.filter.to_string());
        kv("match.ransac_threshold", self.ransac_threshold.to_string());
        kv(
            "match.ransac_iterations",
            self.ransac_iterations.to_string(),
        );
        kv(
            "pose.max_iterations",
            self.gold_standard.max_iterations.to_string(),
        );
        kv(
            "pose.min_improvement",
            self.gold_standard.min_improvement.to_string(),
        );
        kv("fista.lambda", self.fine.fista.lambda.to_string());
        kv("fista.gamma", self.fine.fista.gamma.to_string());
        kv("fista.k_max", self.fine.fista.k_max.to_string());
        kv("fista.epsilon", self.fine.fista.epsilon.to_string());
        kv("fine.objective", self.fine.objective.to_string());
        kv("fine.mi_bins", self.fine.mi_bins.to_string());
        kv("fine.ncmi_bins", self.fine.ncmi_bins.to_string());
        kv("fine.position_step", self.fine.position_step.to_string());
        kv("fine.angle_step_deg", self.fine.angle_step_deg.to_string());
        kv(
            "fine.max_evaluations",
            self.fine.nelder_mead.max_evaluations.to_string(),
        );
        kv(
            "fine.f_tolerance",
            self.fine.nelder_mead.f_tolerance.to_string(),
        );
        kv("fine.patch", format!("{}x{}", self.patch.0, self.patch.1));
        kv("fine.idw_radius", self.idw_radius.to_string());
        kv("fine.threads", self.threads.to_string());
        kv("perturb.translation", self.perturb_translation.to_string());
        kv("perturb.angle_deg", self.perturb_angle_deg.to_string());
        // Without an explicit scene seed the scene follows `seed`.
        for line in self.scene.to_text().lines() {
            if self.scene_seed.is_some() || !line.starts_with("scene.seed") {
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }
}
