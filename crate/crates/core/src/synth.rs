//! Synthetic urban scenes with known camera pose: a block grid of box
//! buildings (flat or gable roofs) between roads, lobed tree canopies, a
//! stratified LiDAR sampling of the surface, and an optical image ray-cast
//! from the true pose.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;

use crate::cloud::{Point, PointClass, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{inverse3, mat_vec, transpose, CameraPose, Frame, Vec3};
use crate::hull::P2;
use crate::io;
use crate::raster::{OpticalImage, Raster};

/// A roof material: image color and laser return intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub rgb: [u8; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub roofs: Vec<Material>,
    pub grass: Material,
    pub road: Material,
    pub tree: Material,
    pub wall: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        let m = |rgb: [u8; 3], intensity: f64| Material { rgb, intensity };
        Palette {
            roofs: vec![
                m([178, 60, 48], 95.0),
                m([214, 214, 208], 170.0),
                m([96, 96, 104], 60.0),
                m([150, 104, 66], 120.0),
                m([64, 92, 150], 80.0),
                m([228, 190, 120], 150.0),
                m([120, 40, 40], 70.0),
                m([40, 40, 44], 35.0),
            ],
            grass: m([96, 150, 70], 200.0),
            road: m([78, 78, 84], 30.0),
            tree: m([38, 84, 36], 110.0),
            wall: [160, 154, 146],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// LiDAR coverage (m), centered on the origin.
    pub extent: [f64; 2],
    /// Area holding the building blocks (m), centered on the origin.
    pub layout_extent: [f64; 2],
    pub building_count: usize,
    /// Range of the longer footprint side (m).
    pub footprint_length: [f64; 2],
    /// Range of the length / width ratio.
    pub aspect: [f64; 2],
    pub height: [f64; 2],
    /// Fraction of buildings with gable roofs.
    pub gable_fraction: f64,
    pub ridge_height: f64,
    /// Maximum footprint rotation away from the block axes (degrees).
    pub max_rotation_deg: f64,
    /// Building 0 sits in the central block and is scaled to fill it.
    pub landmark: bool,
    pub road_width: f64,
    /// Clearance between a building and its block edge (m).
    pub block_margin: f64,
    pub tree_count: usize,
    pub tree_radius: [f64; 2],
    pub tree_height: [f64; 2],
    /// Points per m².
    pub lidar_density: f64,
    pub lidar_noise_z: f64,
    pub gsd: f64,
    /// Image size `(cols, rows)`.
    pub image_size: [usize; 2],
    pub camera_height: f64,
    pub max_tilt_deg: f64,
    pub max_kappa_deg: f64,
    /// Gaussian pixel noise (DN).
    pub image_noise: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: [190.0, 205.0],
            layout_extent: [140.0, 155.0],
            building_count: 28,
            footprint_length: [11.0, 15.0],
            aspect: [1.3, 1.7],
            height: [6.0, 25.0],
            gable_fraction: 0.15,
            ridge_height: 2.5,
            max_rotation_deg: 20.0,
            landmark: true,
            road_width: 6.0,
            block_margin: 4.0,
            tree_count: 6,
            tree_radius: [2.0, 3.5],
            tree_height: [6.0, 10.0],
            lidar_density: 2.0,
            lidar_noise_z: 0.02,
            gsd: 0.15,
            image_size: [1000, 1100],
            camera_height: 500.0,
            max_tilt_deg: 0.5,
            max_kappa_deg: 2.0,
            image_noise: 2.0,
            palette: Palette::default(),
            seed: 7,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let range =
            |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1];
        if !(self.extent.iter().all(|&v| pos(v)) && self.layout_extent.iter().all(|&v| pos(v))) {
            return Err(invalid("extents must be positive"));
        }
        if self.layout_extent[0] > self.extent[0] || self.layout_extent[1] > self.extent[1] {
            return Err(invalid("layout extent exceeds the LiDAR extent"));
        }
        if !(range(self.footprint_length)
            && range(self.aspect)
            && self.aspect[0] >= 1.0
            && range(self.height))
        {
            return Err(invalid(
                "footprint, aspect and height ranges must be positive and ordered",
            ));
        }
        if !(range(self.tree_radius) && range(self.tree_height)) {
            return Err(invalid("tree ranges must be positive and ordered"));
        }
        if !(pos(self.lidar_density) && pos(self.gsd) && pos(self.camera_height)) {
            return Err(invalid("density, GSD and camera height must be positive"));
        }
        if self.image_size[0] < 2 || self.image_size[1] < 2 {
            return Err(invalid("image must be at least 2x2"));
        }
        if !(0.0..=1.0).contains(&self.gable_fraction) {
            return Err(invalid("gable fraction must lie in [0, 1]"));
        }
        let nonneg = [
            self.ridge_height,
            self.max_rotation_deg,
            self.road_width,
            self.block_margin,
            self.lidar_noise_z,
            self.image_noise,
            self.max_kappa_deg,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("negative or non-finite scene parameter"));
        }
        if !(self.max_tilt_deg >= 0.0 && self.max_tilt_deg < 5.0) {
            return Err(invalid("tilt must stay below 5 degrees"));
        }
        if self.ridge_height >= self.height[0] {
            return Err(invalid(
                "ridge height must be below the minimum building height",
            ));
        }
        if self.palette.roofs.is_empty() {
            return Err(invalid("palette needs at least one roof material"));
        }
        if self.building_count > 0 {
            let (gc, gr) = self.block_grid();
            let cell = [
                self.layout_extent[0] / gc as f64,
                self.layout_extent[1] / gr as f64,
            ];
            let room = cell.map(|c| c - 2.0 * self.block_margin);
            let l = self.footprint_length[1];
            if room[0].min(room[1]) < l / self.aspect[0] || room[0].max(room[1]) < l {
                return Err(invalid(format!(
                    "blocks of {:.1} x {:.1} m cannot hold {l} m footprints",
                    cell[0], cell[1]
                )));
            }
        }
        Ok(())
    }

    /// Block grid `(cols, rows)` with at least `building_count` cells.
    fn block_grid(&self) -> (usize, usize) {
        let n = self.building_count.max(1);
        let ratio = self.layout_extent[0] / self.layout_extent[1];
        let cols = ((n as f64 * ratio).sqrt().round() as usize).max(1);
        (cols, n.div_ceil(cols))
    }

    pub fn image_frame(&self) -> Frame {
        Frame::new(self.image_size[1], self.image_size[0])
    }

    /// Reads `scene.*` keys over the defaults; unknown keys are rejected.
    pub fn from_key_values(map: &BTreeMap<String, (usize, String)>) -> Result<Self> {
        let mut s = SceneSpec::default();
        for (key, (line, raw)) in map {
            if let Some(name) = key.strip_prefix("scene.") {
                s.set(name, raw).map_err(|e| match e {
                    Error::Config(msg) => Error::Parse { line: *line, msg },
                    other => other,
                })?;
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Sets one field by its key name (without the `scene.` prefix). The
    /// result is not validated.
    pub fn set(&mut self, name: &str, raw: &str) -> Result<()> {
        let err =
            |what: &str| Error::Config(format!("`scene.{name}`: expected {what}, found `{raw}`"));
        let num = || raw.parse::<f64>().map_err(|_| err("a number"));
        let int = || {
            raw.parse::<usize>()
                .map_err(|_| err("a non-negative integer"))
        };
        let pair = || -> Result<[f64; 2]> {
            let v: Vec<f64> = raw
                .split(|c: char| c == ',' || c == 'x' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err("two numbers"))?;
            <[f64; 2]>::try_from(v).map_err(|_| err("two numbers"))
        };
        match name {
            "extent" => self.extent = pair()?,
            "layout_extent" => self.layout_extent = pair()?,
            "buildings" => self.building_count = int()?,
            "footprint_length" => self.footprint_length = pair()?,
            "aspect" => self.aspect = pair()?,
            "height" => self.height = pair()?,
            "gable_fraction" => self.gable_fraction = num()?,
            "ridge_height" => self.ridge_height = num()?,
            "max_rotation_deg" => self.max_rotation_deg = num()?,
            "landmark" => self.landmark = raw.parse().map_err(|_| err("true or false"))?,
            "road_width" => self.road_width = num()?,
            "block_margin" => self.block_margin = num()?,
            "trees" => self.tree_count = int()?,
            "tree_radius" => self.tree_radius = pair()?,
            "tree_height" => self.tree_height = pair()?,
            "lidar_density" => self.lidar_density = num()?,
            "lidar_noise_z" => self.lidar_noise_z = num()?,
            "gsd" => self.gsd = num()?,
            "image_size" => {
                let p = pair()?;
                if p.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                    return Err(err("two integers"));
                }
                self.image_size = p.map(|v| v as usize);
            }
            "camera_height" => self.camera_height = num()?,
            "max_tilt_deg" => self.max_tilt_deg = num()?,
            "max_kappa_deg" => self.max_kappa_deg = num()?,
            "image_noise" => self.image_noise = num()?,
            "seed" => self.seed = raw.parse().map_err(|_| err("an unsigned integer"))?,
            _ => return Err(Error::Config(format!("unknown scene key `scene.{name}`"))),
        }
        Ok(())
    }

    /// Key-value record of every field except the palette.
    pub fn to_text(&self) -> String {
        let pair = |p: [f64; 2]| format!("{}, {}", p[0], p[1]);
        [
            ("extent", pair(self.extent)),
            ("layout_extent", pair(self.layout_extent)),
            ("buildings", self.building_count.to_string()),
            ("footprint_length", pair(self.footprint_length)),
            ("aspect", pair(self.aspect)),
            ("height", pair(self.height)),
            ("gable_fraction", self.gable_fraction.to_string()),
            ("ridge_height", self.ridge_height.to_string()),
            ("max_rotation_deg", self.max_rotation_deg.to_string()),
            ("landmark", self.landmark.to_string()),
            ("road_width", self.road_width.to_string()),
            ("block_margin", self.block_margin.to_string()),
            ("trees", self.tree_count.to_string()),
            ("tree_radius", pair(self.tree_radius)),
            ("tree_height", pair(self.tree_height)),
            ("lidar_density", self.lidar_density.to_string()),
            ("lidar_noise_z", self.lidar_noise_z.to_string()),
            ("gsd", self.gsd.to_string()),
            (
                "image_size",
                format!("{}x{}", self.image_size[0], self.image_size[1]),
            ),
            ("camera_height", self.camera_height.to_string()),
            ("max_tilt_deg", self.max_tilt_deg.to_string()),
            ("max_kappa_deg", self.max_kappa_deg.to_string()),
            ("image_noise", self.image_noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("scene.{k} = {v}\n"))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingTruth {
    pub id: usize,
    pub center: P2<f64>,
    /// Longer footprint side (m).
    pub length: f64,
    pub width: f64,
    /// Direction of the longer side (radians).
    pub angle: f64,
    /// Eave height; equals `top` for flat roofs.
    pub eave: f64,
    pub top: f64,
    pub gable: bool,
    pub material: usize,
}

impl BuildingTruth {
    fn axes(&self) -> (P2<f64>, P2<f64>) {
        let (s, c) = self.angle.sin_cos();
        ([c, s], [-s, c])
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (e1, e2) = self.axes();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (dx * e1[0] + dy * e1[1], dx * e2[0] + dy * e2[1])
    }

    /// Footprint corners, counterclockwise.
    pub fn corners(&self) -> [P2<f64>; 4] {
        let (e1, e2) = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(a, b)| {
            [
                self.center[0] + a * hl * e1[0] + b * hw * e2[0],
                self.center[1] + a * hl * e1[1] + b * hw * e2[1],
            ]
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    /// Roof elevation above `(x, y)`, `None` outside the footprint.
    pub fn roof_z(&self, x: f64, y: f64) -> Option<f64> {
        let (u, v) = self.local(x, y);
        let hw = self.width / 2.0;
        if u.abs() > self.length / 2.0 || v.abs() > hw {
            return None;
        }
        Some(if self.gable {
            self.eave + (self.top - self.eave) * (1.0 - v.abs() / hw)
        } else {
            self.top
        })
    }

    /// Roof centroid in 3-D: footprint center at roof elevation.
    pub fn roof_centroid(&self) -> Vec3<f64> {
        [self.center[0], self.center[1], self.top]
    }

    /// The four roof outline edges at eave height.
    pub fn roof_edges(&self) -> [[Vec3<f64>; 2]; 4] {
        let c = self.corners().map(|p| [p[0], p[1], self.eave]);
        [[c[0], c[1]], [c[1], c[2]], [c[2], c[3]], [c[3], c[0]]]
    }

    /// Half-spaces `n·X ≤ d` bounding the solid; the first four are walls.
    fn half_spaces(&self) -> Vec<(Vec3<f64>, f64)> {
        let (e1, e2) = self.axes();
        let c1 = self.center[0] * e1[0] + self.center[1] * e1[1];
        let c2 = self.center[0] * e2[0] + self.center[1] * e2[1];
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut h = vec![
            ([e1[0], e1[1], 0.0], c1 + hl),
            ([-e1[0], -e1[1], 0.0], -c1 + hl),
            ([e2[0], e2[1], 0.0], c2 + hw),
            ([-e2[0], -e2[1], 0.0], -c2 + hw),
        ];
        if self.gable {
            let k = (self.top - self.eave) / hw;
            h.push(([k * e2[0], k * e2[1], 1.0], self.top + k * c2));
            h.push(([-k * e2[0], -k * e2[1], 1.0], self.top - k * c2));
        } else {
            h.push(([0.0, 0.0, 1.0], self.top));
        }
        h
    }
}

/// One canopy: a union of spherical lobes.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTruth {
    pub center: P2<f64>,
    pub lobes: Vec<(Vec3<f64>, f64)>,
}

impl TreeTruth {
    pub fn canopy_z(&self, x: f64, y: f64) -> Option<f64> {
        self.lobes
            .iter()
            .filter_map(|(c, r)| {
                let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                (d2 <= r * r).then(|| c[2] + (r * r - d2).sqrt())
            })
            .reduce(f64::max)
    }
}

/// Source of each LiDAR point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointSource {
    Ground,
    Road,
    Building(usize),
    Tree(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub pose: CameraPose<f64>,
    pub gsd: f64,
    pub buildings: Vec<BuildingTruth>,
    pub trees: Vec<TreeTruth>,
    /// One entry per cloud point.
    pub sources: Vec<PointSource>,
}

impl GroundTruth {
    pub fn building(&self, id: usize) -> Option<&BuildingTruth> {
        self.buildings.iter().find(|b| b.id == id)
    }

    pub fn building_point_count(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s, PointSource::Building(_)))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud<f64>,
    pub image: OpticalImage,
    pub truth: GroundTruth,
}

struct World<'a> {
    spec: &'a SceneSpec,
    buildings: Vec<BuildingTruth>,
    trees: Vec<TreeTruth>,
    road_x: Vec<f64>,
    road_y: Vec<f64>,
}

impl World<'_> {
    fn on_road(&self, x: f64, y: f64) -> bool {
        let half = self.spec.road_width / 2.0;
        half > 0.0
            && (self.road_x.iter().any(|r| (x - r).abs() <= half)
                || self.road_y.iter().any(|r| (y - r).abs() <= half))
    }

    /// Topmost surface above `(x, y)`.
    fn surface(&self, x: f64, y: f64) -> (f64, PointSource) {
        let mut best = (
            0.0,
            if self.on_road(x, y) {
                PointSource::Road
            } else {
                PointSource::Ground
            },
        );
        for b in &self.buildings {
            if let Some(z) = b.roof_z(x, y) {
                if z > best.0 {
                    best = (z, PointSource::Building(b.id));
                }
            }
        }
        for (i, t) in self.trees.iter().enumerate() {
            if let Some(z) = t.canopy_z(x, y) {
                if z > best.0 {
                    best = (z, PointSource::Tree(i));
                }
            }
        }
        best
    }

    /// Color seen along the ray `o + t·d`.
    fn trace(&self, o: Vec3<f64>, d: Vec3<f64>) -> [f64; 3] {
        let rgb = |c: [u8; 3]| c.map(f64::from);
        let p = &self.spec.palette;
        let mut best_t = if d[2] < 0.0 {
            -o[2] / d[2]
        } else {
            f64::INFINITY
        };
        let at = |t: f64| [o[0] + t * d[0], o[1] + t * d[1]];
        let g = at(best_t);
        let mut color = rgb(if self.on_road(g[0], g[1]) {
            p.road.rgb
        } else {
            p.grass.rgb
        });
        for b in &self.buildings {
            let (mut t_in, mut t_out, mut face) = (0.0f64, f64::INFINITY, usize::MAX);
            let mut miss = false;
            for (k, (n, d0)) in b.half_spaces().into_iter().enumerate() {
                let nd = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
                let no = n[0] * o[0] + n[1] * o[1] + n[2] * o[2];
                if nd.abs() < 1e-15 {
                    if no > d0 {
                        miss = true;
                        break;
                    }
                    continue;
                }
                let t = (d0 - no) / nd;
                if nd < 0.0 {
                    if t > t_in {
                        t_in = t;
                        face = k;
                    }
                } else {
                    t_out = t_out.min(t);
                }
            }
            if miss || face == usize::MAX || t_in > t_out || t_in >= best_t {
                continue;
            }
            best_t = t_in;
            color = if face < 4 {
                rgb(p.wall)
            } else {
                let base = rgb(p.roofs[b.material].rgb);
                // The second gable plane faces away from the light.
                if face == 5 {
                    base.map(|v| v * 0.96)
                } else {
                    base
                }
            };
        }
        for t in &self.trees {
            for (c, r) in &t.lobes {
                let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
                let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let hb = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
                let disc = hb * hb - a * (oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r);
                if disc < 0.0 {
                    continue;
                }
                let t_hit = (-hb - disc.sqrt()) / a;
                if t_hit > 0.0 && t_hit < best_t {
                    best_t = t_hit;
                    // Lobe shading by surface normal.
                    let z = o[2] + t_hit * d[2];
                    let shade = 0.8 + 0.2 * ((z - c[2]) / r).clamp(0.0, 1.0);
                    color = rgb(p.tree.rgb).map(|v| v * shade);
                }
            }
        }
        color
    }
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<BuildingTruth>, Vec<f64>, Vec<f64>) {
    let (gc, gr) = spec.block_grid();
    let [lw, lh] = spec.layout_extent;
    let cell = [lw / gc as f64, lh / gr as f64];
    let x0 = -lw / 2.0;
    let y0 = -lh / 2.0;
    // Two crossing roads along the central block boundaries; open ground
    // elsewhere stays one large connected area.
    let road_x: Vec<f64> = (gc >= 2)
        .then(|| x0 + (gc / 2) as f64 * cell[0])
        .into_iter()
        .collect();
    let road_y: Vec<f64> = (gr >= 2)
        .then(|| y0 + (gr / 2) as f64 * cell[1])
        .into_iter()
        .collect();
    if spec.building_count == 0 {
        return (Vec::new(), road_x, road_y);
    }
    let mut cells: Vec<(usize, usize)> =
        (0..gr).flat_map(|r| (0..gc).map(move |c| (r, c))).collect();
    let center_of = |(r, c): (usize, usize)| {
        [
            x0 + (c as f64 + 0.5) * cell[0],
            y0 + (r as f64 + 0.5) * cell[1],
        ]
    };
    // The landmark takes the block nearest the origin.
    cells.sort_by(|a, b| {
        let (ca, cb) = (center_of(*a), center_of(*b));
        ca[0]
            .hypot(ca[1])
            .partial_cmp(&cb[0].hypot(cb[1]))
            .unwrap()
            .then(a.cmp(b))
    });
    cells[1..].shuffle(rng);
    let room = cell.map(|c| c - 2.0 * spec.block_margin);
    let mut out = Vec::with_capacity(spec.building_count);
    for (id, &rc) in cells.iter().take(spec.building_count).enumerate() {
        let landmark = spec.landmark && id == 0;
        let (mut length, mut width, mut angle);
        if landmark {
            length = room[0].max(room[1]);
            width = (room[0].min(room[1])).min(length / spec.aspect[0]);
            angle = if room[0] >= room[1] {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            };
        } else {
            length = rng.random_range(spec.footprint_length[0]..=spec.footprint_length[1]);
            width = length / rng.random_range(spec.aspect[0]..=spec.aspect[1]);
            let base = if rng.random_bool(0.5) {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            };
            let r = spec.max_rotation_deg.to_radians();
            angle = base
                + if r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                };
            // Shrink until the rotated footprint fits the block.
            loop {
                let (s, c) = angle.sin_cos();
                let bx = (length * c).abs() + (width * s).abs();
                let by = (length * s).abs() + (width * c).abs();
                if bx <= room[0] && by <= room[1] {
                    break;
                }
                length *= 0.97;
                width *= 0.97;
            }
        }
        angle = angle.rem_euclid(std::f64::consts::PI);
        let top = rng.random_range(spec.height[0]..=spec.height[1]);
        let gable = !landmark && rng.random_bool(spec.gable_fraction);
        let material = rng.random_range(0..spec.palette.roofs.len());
        out.push(BuildingTruth {
            id,
            center: center_of(rc),
            length,
            width,
            angle,
            eave: if gable { top - spec.ridge_height } else { top },
            top,
            gable,
            material,
        });
    }
    (out, road_x, road_y)
}

fn place_trees(spec: &SceneSpec, world: &World, rng: &mut ChaCha8Rng) -> Vec<TreeTruth> {
    let mut trees: Vec<TreeTruth> = Vec::new();
    let [ex, ey] = spec.extent.map(|e| e / 2.0 - spec.tree_radius[1]);
    let mut attempts = 0;
    while trees.len() < spec.tree_count && attempts < 10_000 {
        attempts += 1;
        let c = [rng.random_range(-ex..ex), rng.random_range(-ey..ey)];
        let r = rng.random_range(spec.tree_radius[0]..=spec.tree_radius[1]);
        let clear = r * 1.6 + 1.5;
        let near_building = world.buildings.iter().any(|b| {
            let (u, v) = b.local(c[0], c[1]);
            u.abs() < b.length / 2.0 + clear && v.abs() < b.width / 2.0 + clear
        });
        let near_tree = trees
            .iter()
            .any(|t| (t.center[0] - c[0]).hypot(t.center[1] - c[1]) < 2.0 * clear);
        if near_building || near_tree || world.on_road(c[0], c[1]) {
            continue;
        }
        let h = rng.random_range(spec.tree_height[0]..=spec.tree_height[1]);
        let lobes = (0..3)
            .map(|k| {
                let a = rng.random_range(0.0..std::f64::consts::TAU) + k as f64;
                let off = if k == 0 {
                    0.0
                } else {
                    r * rng.random_range(0.5..0.9)
                };
                let lr = r * if k == 0 {
                    1.0
                } else {
                    rng.random_range(0.5..0.8)
                };
                ([c[0] + off * a.cos(), c[1] + off * a.sin(), h - lr], lr)
            })
            .collect();
        trees.push(TreeTruth { center: c, lobes });
    }
    trees
}

/// The true camera: nadir-looking from `camera_height` above the origin
/// with small random tilt and heading.
fn true_pose(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> CameraPose<f64> {
    let tilt = spec.max_tilt_deg.to_radians();
    let kap = spec.max_kappa_deg.to_radians();
    let mut sym = |m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let alpha = spec.camera_height / spec.gsd;
    CameraPose {
        alpha_x: alpha,
        alpha_y: alpha,
        skew: 0.0,
        p_x: (spec.image_size[0] as f64 - 1.0) / 2.0,
        p_y: (spec.image_size[1] as f64 - 1.0) / 2.0,
        x0: 0.0,
        y0: 0.0,
        z0: spec.camera_height,
        omega: std::f64::consts::PI + sym(tilt),
        phi: sym(tilt),
        kappa: sym(kap),
    }
}

/// Builds a scene; every random draw comes from `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pose = true_pose(spec, &mut rng);
    let (buildings, road_x, road_y) = layout(spec, &mut rng);
    let mut world = World {
        spec,
        buildings,
        trees: Vec::new(),
        road_x,
        road_y,
    };
    world.trees = place_trees(spec, &world, &mut rng);

    // Scan-like sampling: one point per cell of side 1/sqrt(density), jittered
    // within the central 40% of the cell so that gaps never exceed 1.4 cells.
    let step = 1.0 / spec.lidar_density.sqrt();
    let nx = (spec.extent[0] / step).round() as usize;
    let ny = (spec.extent[1] / step).round() as usize;
    let (sx, sy) = (spec.extent[0] / nx as f64, spec.extent[1] / ny as f64);
    let noise = Normal::new(0.0, spec.lidar_noise_z.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut points = Vec::with_capacity(nx * ny);
    let mut sources = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = -spec.extent[0] / 2.0 + (i as f64 + 0.3 + 0.4 * rng.random::<f64>()) * sx;
            let y = spec.extent[1] / 2.0 - (j as f64 + 0.3 + 0.4 * rng.random::<f64>()) * sy;
            let dz = if spec.lidar_noise_z > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let (z, src) = world.surface(x, y);
            let p = &spec.palette;
            let (intensity, class) = match src {
                PointSource::Ground => (p.grass.intensity, PointClass::Ground),
                PointSource::Road => (p.road.intensity, PointClass::Ground),
                PointSource::Building(b) => (
                    p.roofs[world.buildings[b].material].intensity,
                    PointClass::Building,
                ),
                PointSource::Tree(_) => (
                    p.tree.intensity + rng.random_range(-25.0..25.0),
                    PointClass::HighVegetation,
                ),
            };
            points.push(Point {
                x,
                y,
                z: z + dz,
                intensity: intensity.clamp(0.0, 255.0),
                class,
            });
            sources.push(src);
        }
    }

    let frame = spec.image_frame();
    let kinv = inverse3(&pose.calibration()).ok_or(Error::SingularCamera)?;
    let rt = transpose(&pose.rotation());
    let c = pose.center();
    let rows: Vec<Vec<[f64; 3]>> = (0..frame.rows)
        .into_par_iter()
        .map(|r| {
            (0..frame.cols)
                .map(|col| {
                    world.trace(c, mat_vec(&rt, mat_vec(&kinv, [col as f64, r as f64, 1.0])))
                })
                .collect()
        })
        .collect();
    let pix_noise =
        Normal::new(0.0, spec.image_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Vec::with_capacity(frame.len());
    for row in rows {
        for v in row {
            data.push(v.map(|ch| {
                let n = if spec.image_noise > 0.0 {
                    pix_noise.sample(&mut rng)
                } else {
                    0.0
                };
                (ch + n).round().clamp(0.0, 255.0) as u8
            }));
        }
    }
    let image = OpticalImage {
        pixels: Raster::from_vec(frame, data)?,
        gsd: spec.gsd,
    };
    Ok(Scene {
        cloud: PointCloud::new(points),
        image,
        truth: GroundTruth {
            pose,
            gsd: spec.gsd,
            buildings: world.buildings,
            trees: world.trees,
            sources,
        },
    })
}

/// Offsets the camera center by exactly `translation` m in a random
/// horizontal direction and the angles by a random vector of norm `angles`.
pub fn perturb_pose(
    pose: &CameraPose<f64>,
    translation: f64,
    angles: f64,
    seed: u64,
) -> CameraPose<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    CameraPose {
        x0: pose.x0 + translation * heading.cos(),
        y0: pose.y0 + translation * heading.sin(),
        omega: pose.omega + angles * dir[0],
        phi: pose.phi + angles * dir[1],
        kappa: pose.kappa + angles * dir[2],
        ..*pose
    }
}

/// Removes the listed buildings' points, as if they were built after the
/// LiDAR survey.
pub fn temporal_variant(
    scene: &Scene,
    removal_ids: &[usize],
) -> Result<(PointCloud<f64>, GroundTruth)> {
    let ids: BTreeSet<usize> = removal_ids.iter().copied().collect();
    if let Some(&bad) = ids.iter().find(|&&id| scene.truth.building(id).is_none()) {
        return Err(Error::UnknownBuilding(bad));
    }
    let keep: Vec<usize> = (0..scene.cloud.len())
        .filter(
            |&i| !matches!(scene.truth.sources[i], PointSource::Building(b) if ids.contains(&b)),
        )
        .collect();
    let mut truth = scene.truth.clone();
    truth.sources = keep.iter().map(|&i| scene.truth.sources[i]).collect();
    truth.buildings.retain(|b| !ids.contains(&b.id));
    Ok((scene.cloud.select(&keep), truth))
}

/// `id,cx,cy,length,width,angle,eave,top,gable,centroid_x_px,centroid_y_px`.
pub fn write_buildings_csv<W: Write>(mut w: W, truth: &GroundTruth) -> Result<()> {
    let p = truth.pose.camera_matrix();
    writeln!(
        w,
        "id,cx,cy,length,width,angle,eave,top,gable,centroid_x_px,centroid_y_px"
    )?;
    for b in &truth.buildings {
        let px = p.project(b.roof_centroid())?;
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.4},{:.4},{},{:.3},{:.3}",
            b.id,
            b.center[0],
            b.center[1],
            b.length,
            b.width,
            b.angle,
            b.eave,
            b.top,
            u8::from(b.gable),
            px[0],
            px[1]
        )?;
    }
    Ok(())
}

/// `building,edge,ax,ay,az,bx,by,bz` for every roof outline edge.
pub fn write_segments_csv<W: Write>(mut w: W, truth: &GroundTruth) -> Result<()> {
    writeln!(w, "building,edge,ax,ay,az,bx,by,bz")?;
    for b in &truth.buildings {
        for (k, [a, e]) in b.roof_edges().iter().enumerate() {
            writeln!(
                w,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                b.id, k, a[0], a[1], a[2], e[0], e[1], e[2]
            )?;
        }
    }
    Ok(())
}

/// Parses the table written by [`write_buildings_csv`].
pub fn read_buildings_csv(text: &str) -> Result<Vec<BuildingTruth>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: n + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 11 {
            return Err(err("expected 11 fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| err("bad number"));
        out.push(BuildingTruth {
            id: f[0].parse().map_err(|_| err("bad id"))?,
            center: [num(1)?, num(2)?],
            length: num(3)?,
            width: num(4)?,
            angle: num(5)?,
            eave: num(6)?,
            top: num(7)?,
            gable: f[8] == "1",
            material: 0,
        });
    }
    Ok(out)
}

/// Per-pixel id + 1 of the building whose roof is seen there (0 elsewhere),
/// by back-projecting each pixel onto every roof plane under the true pose.
pub fn roof_label_raster(truth: &GroundTruth, frame: Frame) -> Result<Raster<u32>> {
    let pose = &truth.pose;
    let kinv = inverse3(&pose.calibration()).ok_or(Error::SingularCamera)?;
    let rt = transpose(&pose.rotation());
    let c = pose.center();
    let p = pose.camera_matrix();
    let mut out = Raster::filled(frame, 0u32);
    let mut best = Raster::filled(frame, f64::NEG_INFINITY);
    for b in &truth.buildings {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for q in b.corners() {
            let px = p.project([q[0], q[1], b.top])?;
            for k in 0..2 {
                lo[k] = lo[k].min(px[k]);
                hi[k] = hi[k].max(px[k]);
            }
        }
        if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] > frame.cols as f64 || lo[1] > frame.rows as f64 {
            continue;
        }
        let r0 = (lo[1].floor() - 1.0).max(0.0) as usize;
        let r1 = ((hi[1].ceil() + 1.0) as usize).min(frame.rows - 1);
        let c0 = (lo[0].floor() - 1.0).max(0.0) as usize;
        let c1 = ((hi[0].ceil() + 1.0) as usize).min(frame.cols - 1);
        for r in r0..=r1 {
            for col in c0..=c1 {
                let d = mat_vec(&rt, mat_vec(&kinv, [col as f64, r as f64, 1.0]));
                // March down from the ridge to the eave.
                for z in [b.top, 0.5 * (b.top + b.eave), b.eave] {
                    let t = (z - c[2]) / d[2];
                    let (x, y) = (c[0] + t * d[0], c[1] + t * d[1]);
                    if b.roof_z(x, y).is_some_and(|rz| rz >= z - 1e-9) {
                        if z > best.get(r, col) {
                            best.set(r, col, z);
                            out.set(r, col, b.id as u32 + 1);
                        }
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reads the pose and building table written by [`write_scene`]. Per-point
/// sources and trees are not stored and come back empty.
pub fn read_truth(dir: &Path, gsd: f64) -> Result<GroundTruth> {
    let pose: CameraPose<f64> = std::fs::read_to_string(dir.join("truth_pose.txt"))?.parse()?;
    let buildings = read_buildings_csv(&std::fs::read_to_string(dir.join("buildings.csv"))?)?;
    Ok(GroundTruth {
        pose,
        gsd,
        buildings,
        trees: Vec::new(),
        sources: Vec::new(),
    })
}

/// Writes `cloud.txt`, `image.png`, `truth_pose.txt`, `buildings.csv` and
/// `segments.csv` into `dir`; returns the paths.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<std::path::PathBuf> = [
        "cloud.txt",
        "image.png",
        "truth_pose.txt",
        "buildings.csv",
        "segments.csv",
    ]
    .iter()
    .map(|n| dir.join(n))
    .collect();
    scene
        .cloud
        .write_text(std::io::BufWriter::new(std::fs::File::create(&paths[0])?))?;
    io::write_rgb_png(&paths[1], &scene.image.pixels)?;
    std::fs::write(&paths[2], scene.truth.pose.to_string())?;
    write_buildings_csv(
        std::io::BufWriter::new(std::fs::File::create(&paths[3])?),
        &scene.truth,
    )?;
    write_segments_csv(
        std::io::BufWriter::new(std::fs::File::create(&paths[4])?),
        &scene.truth,
    )?;
    Ok(paths)
}
