//! Inverse-distance-weighted blending of per-patch poses.

use super::patches::{PatchLayout, PatchResult};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::CameraPose;
use crate::raster::Window;
use crate::scalar::Scalar;
use crate::superres::{propagate_channel, transfer_with, Channel, FistaConfig, FistaReport};

/// Optimized pose of every patch plus the neighborhood used for blending:
/// the `(2r + 1)²` block of patches around the query's own patch, clipped
/// at the grid border (`r = 1` gives nine neighbors).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseField<T> {
    pub layout: PatchLayout,
    pub poses: Vec<CameraPose<T>>,
    pub radius: usize,
}

impl<T: Scalar> PoseField<T> {
    pub fn new(layout: PatchLayout, poses: Vec<CameraPose<T>>, radius: usize) -> Result<Self> {
        if poses.len() != layout.len() {
            return Err(Error::Config(format!(
                "pose field needs {} poses, got {}",
                layout.len(),
                poses.len()
            )));
        }
        for p in &poses {
            p.validate()?;
        }
        Ok(PoseField {
            layout,
            poses,
            radius,
        })
    }

    pub fn from_results(layout: PatchLayout, results: &[PatchResult<T>]) -> Result<Self> {
        let mut sorted: Vec<&PatchResult<T>> = results.iter().collect();
        sorted.sort_by_key(|r| r.index);
        Self::new(
            layout,
            sorted.into_iter().map(|r| r.theta_star).collect(),
            1,
        )
    }

    /// Nominal neighborhood size `N` before border clipping.
    pub fn neighborhood(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    /// Pose at pixel `p = (x, y)`: the patch pose itself at a patch center,
    /// otherwise the parameter-wise mean weighted by `1 / d²`.
    pub fn idw_pose(&self, p: [f64; 2]) -> CameraPose<T> {
        let l = &self.layout;
        let (gr, gc) = l.locate(p[0], p[1]);
        let own = self.poses[l.index(gr, gc)];
        let rows = gr.saturating_sub(self.radius)..=(gr + self.radius).min(l.grid_rows - 1);
        let mut acc = [0.0f64; 11];
        let mut wsum = 0.0;
        let mut uniform = true;
        for r in rows {
            for c in gc.saturating_sub(self.radius)..=(gc + self.radius).min(l.grid_cols - 1) {
                let i = l.index(r, c);
                let center = l.center(i);
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                if d2 == 0.0 {
                    return self.poses[i];
                }
                uniform &= self.poses[i] == own;
                let w = 1.0 / d2;
                let theta = self.poses[i].unwrap_angles_near(&own).to_array();
                for (a, v) in acc.iter_mut().zip(theta) {
                    *a += w * v.f64();
                }
                wsum += w;
            }
        }
        if uniform {
            return own;
        }
        CameraPose::from_array(acc.map(|a| T::c(a / wsum)))
    }

    /// Image position of a world point: located with `theta_init`, then
    /// projected with the blended pose at that location.
    pub fn project(&self, theta_init: &CameraPose<T>, xyz: [T; 3]) -> Option<([T; 2], T)> {
        let [x, y] = theta_init.camera_matrix().project(xyz).ok()?;
        self.project_from(x.f64(), y.f64(), xyz)
    }

    fn project_from(&self, x: f64, y: f64, xyz: [T; 3]) -> Option<([T; 2], T)> {
        let m = self.idw_pose([x, y]).camera_matrix();
        let d = m.depth(xyz);
        if !(d > T::zero()) {
            return None;
        }
        m.project(xyz).ok().map(|px| (px, d))
    }
}

/// Dense rendering with every point projected under its blended pose.
pub fn render_registered<T: Scalar>(
    cloud: &PointCloud<T>,
    field: &PoseField<T>,
    theta_init: &CameraPose<T>,
    window: &Window,
    channel: Channel,
    cfg: &FistaConfig<T>,
) -> Result<FistaReport<T>> {
    theta_init.validate()?;
    let init = theta_init.camera_matrix();
    let sparse = transfer_with(cloud, window, channel, |pt| {
        let xyz = pt.xyz();
        if !(init.depth(xyz) > T::zero()) {
            return None;
        }
        let [x, y] = init.project(xyz).ok()?;
        field.project_from(x.f64(), y.f64(), xyz)
    })?;
    propagate_channel(&sparse, channel, cfg)
}
