//! Fine registration: per-patch maximization of mutual information (or
//! NCMI) between the optical image and LiDAR renderings, then IDW blending
//! of the patch poses.

pub mod idw;
pub mod mi;
pub mod nelder_mead;
pub mod patches;

use std::io::Write;

pub use idw::{render_registered, PoseField};
pub use mi::{entropy, joint_histogram, mutual_information, ncmi, HistogramSpec, JointPdf};
pub use nelder_mead::NelderMeadConfig;
pub use patches::{
    optimize_all, optimize_patch, partition_patches, patch_objective, Patch, PatchGrid,
    PatchLayout, PatchResult,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::superres::FistaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// MI between the i-image and the optical luma.
    Mi,
    /// NCMI of (i-image, z-image, optical luma).
    Ncmi,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mi" => Ok(Objective::Mi),
            "ncmi" => Ok(Objective::Ncmi),
            _ => Err(Error::Config(format!(
                "unknown objective `{s}` (expected mi or ncmi)"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Mi => "mi",
            Objective::Ncmi => "ncmi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineConfig<T> {
    pub objective: Objective,
    pub mi_bins: usize,
    pub ncmi_bins: usize,
    /// Initial simplex step for the camera center coordinates (m).
    pub position_step: f64,
    /// Initial simplex step for the rotation angles (degrees).
    pub angle_step_deg: f64,
    pub nelder_mead: NelderMeadConfig,
    pub fista: FistaConfig<T>,
}

impl<T: Scalar> Default for FineConfig<T> {
    fn default() -> Self {
        FineConfig {
            objective: Objective::Mi,
            mi_bins: HistogramSpec::MI_BINS,
            ncmi_bins: HistogramSpec::NCMI_BINS,
            position_step: 1.0,
            angle_step_deg: 0.2,
            nelder_mead: NelderMeadConfig::default(),
            fista: FistaConfig::default(),
        }
    }
}

/// `final / initial - 1` in percent.
pub fn gain_percent(initial: f64, value: f64) -> f64 {
    (value / initial - 1.0) * 100.0
}

/// CSV with one row per patch: index, correspondences falling in the patch,
/// objective before and after, and the gain.
pub fn write_patch_report<T: Scalar, W: Write>(
    mut w: W,
    results: &[PatchResult<T>],
    correspondences: &[usize],
) -> Result<()> {
    writeln!(
        w,
        "patch,correspondences,objective_initial,objective_final,gain_pct"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.3}",
            r.index + 1,
            correspondences.get(r.index).copied().unwrap_or(0),
            r.initial_value,
            r.value,
            r.gain_percent()
        )?;
    }
    Ok(())
}
