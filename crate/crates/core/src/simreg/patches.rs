//! Patch tiling of the image and per-patch pose optimization.

use rayon::prelude::*;

use super::mi::{mutual_information, ncmi, HistogramSpec};
use super::nelder_mead;
use super::{FineConfig, Objective};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{CameraPose, Frame};
use crate::raster::{Raster, Window};
use crate::scalar::Scalar;
use crate::superres::{super_resolve, Channel};

/// Pixels by which a patch's cloud selection extends past its window.
pub const CLOUD_MARGIN_PX: f64 = 50.0;

/// Row-major tiling of a frame into equal patches; the last row and column
/// absorb any remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub frame: Frame,
    pub patch_w: usize,
    pub patch_h: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchLayout {
    pub fn new(frame: Frame, patch_w: usize, patch_h: usize) -> Result<Self> {
        if patch_w == 0 || patch_h == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if frame.cols < patch_w || frame.rows < patch_h {
            return Err(Error::FrameTooSmall {
                rows: frame.rows,
                cols: frame.cols,
            });
        }
        Ok(PatchLayout {
            frame,
            patch_w,
            patch_h,
            grid_rows: frame.rows / patch_h,
            grid_cols: frame.cols / patch_w,
        })
    }

    pub fn len(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, grid_row: usize, grid_col: usize) -> usize {
        grid_row * self.grid_cols + grid_col
    }

    pub fn window(&self, grid_row: usize, grid_col: usize) -> Window {
        let row0 = grid_row * self.patch_h;
        let col0 = grid_col * self.patch_w;
        let rows = if grid_row + 1 == self.grid_rows {
            self.frame.rows - row0
        } else {
            self.patch_h
        };
        let cols = if grid_col + 1 == self.grid_cols {
            self.frame.cols - col0
        } else {
            self.patch_w
        };
        Window {
            row0,
            col0,
            rows,
            cols,
        }
    }

    pub fn window_of(&self, index: usize) -> Window {
        self.window(index / self.grid_cols, index % self.grid_cols)
    }

    pub fn center(&self, index: usize) -> [f64; 2] {
        self.window_of(index).center()
    }

    /// Grid cell `(row, col)` holding pixel `(x, y)`; positions outside the
    /// frame map to the nearest border patch.
    pub fn locate(&self, x: f64, y: f64) -> (usize, usize) {
        let cell = |v: f64, size: usize, n: usize| {
            let k = ((v + 0.5) / size as f64).floor();
            if k.is_nan() || k < 0.0 {
                0
            } else {
                (k as usize).min(n - 1)
            }
        };
        (
            cell(y, self.patch_h, self.grid_rows),
            cell(x, self.patch_w, self.grid_cols),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub index: usize,
    pub window: Window,
    /// `(x, y)` pixel center.
    pub center: [f64; 2],
    pub cloud: PointCloud<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub layout: PatchLayout,
    pub patches: Vec<Patch<T>>,
}

/// Tiles the frame and gives each patch the points whose projection under
/// `pose_hint` falls inside it, grown by [`CLOUD_MARGIN_PX`].
pub fn partition_patches<T: Scalar>(
    frame: Frame,
    cloud: &PointCloud<T>,
    pose_hint: &CameraPose<T>,
    patch_w: usize,
    patch_h: usize,
) -> Result<PatchGrid<T>> {
    let layout = PatchLayout::new(frame, patch_w, patch_h)?;
    pose_hint.validate()?;
    let p = pose_hint.camera_matrix();
    let projected: Vec<Option<[f64; 2]>> = cloud
        .points
        .iter()
        .map(|pt| {
            (p.depth(pt.xyz()) > T::zero())
                .then(|| p.project(pt.xyz()).ok())
                .flatten()
                .map(|[x, y]| [x.f64(), y.f64()])
        })
        .collect();
    let patches = (0..layout.len())
        .map(|index| {
            let window = layout.window_of(index);
            let points = cloud
                .points
                .iter()
                .zip(&projected)
                .filter(|(_, q)| q.is_some_and(|[x, y]| window.contains(x, y, CLOUD_MARGIN_PX)))
                .map(|(pt, _)| *pt)
                .collect();
            Patch {
                index,
                window,
                center: window.center(),
                cloud: PointCloud::new(points),
            }
        })
        .collect();
    Ok(PatchGrid { layout, patches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult<T> {
    pub index: usize,
    pub theta_star: CameraPose<T>,
    /// Objective at `theta_star`.
    pub value: f64,
    /// Objective at the initial pose.
    pub initial_value: f64,
    pub evaluations: usize,
}

impl<T> PatchResult<T> {
    /// Relative improvement `value / initial - 1`, in percent.
    pub fn gain_percent(&self) -> f64 {
        super::gain_percent(self.initial_value, self.value)
    }
}

/// Similarity between the optical luma crop and the LiDAR rendering of the
/// patch under `pose`.
pub fn patch_objective<T: Scalar>(
    patch: &Patch<T>,
    luma: &Raster<T>,
    pose: &CameraPose<T>,
    cfg: &FineConfig<T>,
) -> Result<f64> {
    if !luma.frame().eq(&patch.window.frame()) {
        return Err(Error::FrameMismatch);
    }
    let i_img = super_resolve(&patch.cloud, pose, &patch.window, Channel::I, &cfg.fista)?.raster;
    match cfg.objective {
        Objective::Mi => mutual_information(&i_img, luma, &HistogramSpec::new(cfg.mi_bins)?),
        Objective::Ncmi => {
            let z_img =
                super_resolve(&patch.cloud, pose, &patch.window, Channel::Z, &cfg.fista)?.raster;
            ncmi(&i_img, &z_img, luma, &HistogramSpec::new(cfg.ncmi_bins)?)
        }
    }
}

/// Maximizes the patch objective over the six external parameters with the
/// internal ones held at `theta_init`.
pub fn optimize_patch<T: Scalar>(
    patch: &Patch<T>,
    luma: &Raster<T>,
    theta_init: &CameraPose<T>,
    cfg: &FineConfig<T>,
) -> Result<PatchResult<T>> {
    if patch.cloud.is_empty() {
        log::warn!(
            "patch {} has no points; keeping the initial pose",
            patch.index
        );
        return Ok(PatchResult {
            index: patch.index,
            theta_star: *theta_init,
            value: 0.0,
            initial_value: 0.0,
            evaluations: 0,
        });
    }
    let initial_value = patch_objective(patch, luma, theta_init, cfg)?;
    let x0: Vec<f64> = theta_init.external().iter().map(|v| v.f64()).collect();
    let a = cfg.angle_step_deg.to_radians();
    let p = cfg.position_step;
    let pose_at =
        |x: &[f64]| theta_init.with_external([x[0], x[1], x[2], x[3], x[4], x[5]].map(T::c));
    let mut first = true;
    let min = nelder_mead::minimize(
        |x| {
            if std::mem::take(&mut first) {
                return -initial_value;
            }
            patch_objective(patch, luma, &pose_at(x), cfg).map_or(f64::INFINITY, |v| -v)
        },
        &x0,
        &[p, p, p, a, a, a],
        &cfg.nelder_mead,
    );
    let (theta_star, value) = if -min.fx > initial_value {
        (pose_at(&min.x), -min.fx)
    } else {
        (*theta_init, initial_value)
    };
    log::debug!(
        "patch {}: {:.5} -> {:.5} in {} evaluations",
        patch.index,
        initial_value,
        value,
        min.evaluations
    );
    Ok(PatchResult {
        index: patch.index,
        theta_star,
        value,
        initial_value,
        evaluations: min.evaluations,
    })
}

/// Optimizes every patch on a pool of `threads` workers. Results are in
/// patch order regardless of scheduling.
pub fn optimize_all<T: Scalar>(
    grid: &PatchGrid<T>,
    luma: &Raster<T>,
    theta_init: &CameraPose<T>,
    cfg: &FineConfig<T>,
    threads: usize,
) -> Result<Vec<PatchResult<T>>> {
    if !luma.frame().eq(&grid.layout.frame) {
        return Err(Error::FrameMismatch);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        grid.patches
            .par_iter()
            .map(|patch| optimize_patch(patch, &luma.crop(&patch.window), theta_init, cfg))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Point, PointClass};

    #[test]
    fn layout_examples() {
        let l = PatchLayout::new(Frame::new(1650, 1500), 500, 550).unwrap();
        assert_eq!((l.grid_rows, l.grid_cols), (3, 3));
        assert!((0..9).all(|i| l.window_of(i).frame() == Frame::new(550, 500)));
        let l = PatchLayout::new(Frame::new(1650, 1600), 500, 550).unwrap();
        assert_eq!((l.grid_rows, l.grid_cols), (3, 3));
        assert_eq!(l.window(0, 2).cols, 600);
        assert_eq!(l.window(0, 1).cols, 500);
        assert!(matches!(
            PatchLayout::new(Frame::new(500, 499), 500, 550),
            Err(Error::FrameTooSmall { .. })
        ));
        assert_eq!(l.locate(1599.0, 1649.0), (2, 2));
        assert_eq!(l.locate(499.4, 0.0), (0, 0));
        assert_eq!(l.locate(499.6, 0.0), (0, 1));
        assert_eq!(l.locate(-30.0, 5000.0), (2, 0));
    }

    #[test]
    fn tiling_covers_frame_once() {
        let frame = Frame::new(1234, 1777);
        let l = PatchLayout::new(frame, 500, 550).unwrap();
        let mut hits = vec![0u8; frame.len()];
        for i in 0..l.len() {
            let w = l.window_of(i);
            for r in w.row0..w.row0 + w.rows {
                for c in w.col0..w.col0 + w.cols {
                    hits[r * frame.cols + c] += 1;
                    assert_eq!(
                        l.locate(c as f64, r as f64),
                        (i / l.grid_cols, i % l.grid_cols)
                    );
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn patch_clouds_cover_visible_points() {
        let pose = CameraPose {
            alpha_x: 1000.0,
            alpha_y: 1000.0,
            skew: 0.0,
            p_x: 299.5,
            p_y: 199.5,
            x0: 0.0,
            y0: 0.0,
            z0: 100.0,
            omega: std::f64::consts::PI,
            phi: 0.0,
            kappa: 0.0,
        };
        let mut pts = Vec::new();
        for i in 0..80 {
            for j in 0..60 {
                let (x, y) = (i as f64 * 0.5 - 20.0, j as f64 * 0.5 - 15.0);
                pts.push(Point {
                    x,
                    y,
                    z: 0.0,
                    intensity: 1.0,
                    class: PointClass::Ground,
                });
            }
        }
        let cloud = PointCloud::new(pts);
        let grid = partition_patches(Frame::new(400, 600), &cloud, &pose, 200, 200).unwrap();
        assert_eq!(grid.patches.len(), 6);
        let p = pose.camera_matrix();
        for pt in &cloud.points {
            let [x, y] = p.project(pt.xyz()).unwrap();
            let inside = Window::full(Frame::new(400, 600)).contains(x, y, 0.0);
            let covered = grid.patches.iter().any(|pa| pa.cloud.points.contains(pt));
            assert!(!inside || covered);
        }
    }
}
