//! Camera estimation from 3-D/2-D point pairs: normalized DLT followed by
//! Levenberg-Marquardt refinement of the geometric reprojection error.
//!
//! The solve always runs in `f64`; inputs and outputs use the caller's
//! scalar type.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::geom::{decompose_projection, CameraPose, ProjectionMatrix};
use crate::scalar::Scalar;

pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corr3D2D<T> {
    /// World point (m).
    pub world: [T; 3],
    /// Image point `(x, y)` (px).
    pub image: [T; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldStandardConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step improves the RMSE by less than this.
    pub min_improvement: f64,
}

impl Default for GoldStandardConfig {
    fn default() -> Self {
        GoldStandardConfig {
            max_iterations: 100,
            min_improvement: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub pose: CameraPose<T>,
    pub matrix: ProjectionMatrix<T>,
    pub rmse_linear: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub pairs: usize,
}

impl<T: Scalar> Estimate<T> {
    /// `pairs` and `rmse_px` lines, appended after the pose record.
    pub fn write_report<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "{}", self.pose)?;
        writeln!(w, "# pairs = {}", self.pairs)?;
        writeln!(w, "# rmse_px = {:.6}", self.rmse)?;
        Ok(())
    }
}

/// Similarity taking the points' centroid to the origin and their RMS
/// distance from it to `target`.
fn normalizer<const D: usize>(pts: &[[f64; D]], target: f64) -> ([f64; D], f64) {
    let n = pts.len() as f64;
    let mut c = [0.0; D];
    for p in pts {
        for k in 0..D {
            c[k] += p[k] / n;
        }
    }
    let ms = pts
        .iter()
        .map(|p| (0..D).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let s = if ms > 0.0 { target / ms.sqrt() } else { 1.0 };
    (c, s)
}

fn residuals(
    p: &[f64],
    world: &[[f64; 3]],
    image: &[[f64; 2]],
    r: &mut DVector<f64>,
    jac: Option<&mut DMatrix<f64>>,
) -> bool {
    let mut jac = jac;
    for (i, (x, u)) in world.iter().zip(image).enumerate() {
        let xh = [x[0], x[1], x[2], 1.0];
        let dot = |row: usize| (0..4).map(|k| p[row * 4 + k] * xh[k]).sum::<f64>();
        let (a, b, w) = (dot(0), dot(1), dot(2));
        if w.abs() < 1e-12 {
            return false;
        }
        let (px, py) = (a / w, b / w);
        r[2 * i] = px - u[0];
        r[2 * i + 1] = py - u[1];
        if let Some(j) = jac.as_deref_mut() {
            for k in 0..4 {
                j[(2 * i, k)] = xh[k] / w;
                j[(2 * i, 4 + k)] = 0.0;
                j[(2 * i, 8 + k)] = -px * xh[k] / w;
                j[(2 * i + 1, k)] = 0.0;
                j[(2 * i + 1, 4 + k)] = xh[k] / w;
                j[(2 * i + 1, 8 + k)] = -py * xh[k] / w;
            }
        }
    }
    true
}

fn rms(r: &DVector<f64>) -> f64 {
    (r.norm_squared() / (r.len() / 2) as f64).sqrt()
}

/// Estimates the camera from at least six non-coplanar correspondences.
pub fn gold_standard<T: Scalar>(
    corrs: &[Corr3D2D<T>],
    cfg: &GoldStandardConfig,
) -> Result<Estimate<T>> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::TooFewCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    let world: Vec<[f64; 3]> = corrs.iter().map(|c| c.world.map(|v| v.f64())).collect();
    let image: Vec<[f64; 2]> = corrs.iter().map(|c| c.image.map(|v| v.f64())).collect();
    if world
        .iter()
        .flatten()
        .chain(image.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::DegenerateConfiguration(
            "non-finite coordinate".into(),
        ));
    }
    let (cw, sw) = normalizer(&world, 3f64.sqrt());
    let (ci, si) = normalizer(&image, 2f64.sqrt());
    let wn: Vec<[f64; 3]> = world
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] - cw[k]) * sw))
        .collect();
    let inorm: Vec<[f64; 2]> = image
        .iter()
        .map(|p| [0, 1].map(|k| (p[k] - ci[k]) * si))
        .collect();

    // Linear solve: null vector of the 2n x 12 design matrix.
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, u)) in wn.iter().zip(&inorm).enumerate() {
        let xh = [x[0], x[1], x[2], 1.0];
        for k in 0..4 {
            a[(2 * i, 4 + k)] = -xh[k];
            a[(2 * i, 8 + k)] = u[1] * xh[k];
            a[(2 * i + 1, k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -u[0] * xh[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    if !(largest > 0.0) || second / largest < 1e-8 {
        return Err(Error::DegenerateConfiguration(format!(
            "design matrix is rank deficient (singular value ratio {:.3e})",
            if largest > 0.0 { second / largest } else { 0.0 }
        )));
    }
    let mut p: Vec<f64> = v_t.row(order[0]).iter().copied().collect();

    // Geometric refinement in normalized coordinates.
    let mut r = DVector::zeros(2 * n);
    let mut jac = DMatrix::zeros(2 * n, 12);
    if !residuals(&p, &wn, &inorm, &mut r, Some(&mut jac)) {
        return Err(Error::DegenerateConfiguration(
            "a point lies on the principal plane".into(),
        ));
    }
    let rmse_linear_n = rms(&r);
    let mut current = rmse_linear_n;
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut trial_r = DVector::zeros(2 * n);
    while iterations < cfg.max_iterations && current > 0.0 {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        while mu < 1e12 {
            let lhs = &jtj + DMatrix::identity(12, 12) * (mu * (1.0 + jtj.diagonal().max()));
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if residuals(&trial, &wn, &inorm, &mut trial_r, None) && rms(&trial_r) < current {
                let norm = trial.iter().map(|v| v * v).sum::<f64>().sqrt();
                p = trial.iter().map(|v| v / norm).collect();
                mu = (mu / 10.0).max(1e-15);
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
        residuals(&p, &wn, &inorm, &mut r, Some(&mut jac));
        let next = rms(&r);
        let improvement = (current - next) / si;
        current = next;
        if improvement < cfg.min_improvement {
            break;
        }
    }

    // Undo the normalizations: P = Ti^-1 P~ Tw.
    let pn = nalgebra::Matrix3x4::from_row_slice(&p);
    let tw = Matrix4::new(
        sw,
        0.0,
        0.0,
        -sw * cw[0],
        0.0,
        sw,
        0.0,
        -sw * cw[1],
        0.0,
        0.0,
        sw,
        -sw * cw[2],
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let ti_inv = Matrix3::new(1.0 / si, 0.0, ci[0], 0.0, 1.0 / si, ci[1], 0.0, 0.0, 1.0);
    let full = ti_inv * pn * tw;
    let scale = full.fixed_view::<3, 3>(0, 0).norm();
    let rows: [[f64; 4]; 3] =
        std::array::from_fn(|i| std::array::from_fn(|j| full[(i, j)] / scale));
    let matrix64 = ProjectionMatrix(rows);
    let pose64 = decompose_projection(&matrix64)?;
    let pose: CameraPose<T> = pose64.cast();
    let matrix = ProjectionMatrix(rows.map(|r| r.map(T::c)));
    let rmse = reprojection_rmse(
        &pose64,
        &corrs
            .iter()
            .map(|c| Corr3D2D {
                world: c.world.map(|v| v.f64()),
                image: c.image.map(|v| v.f64()),
            })
            .collect::<Vec<_>>(),
    )?;
    Ok(Estimate {
        pose,
        matrix,
        rmse_linear: rmse_linear_n / si,
        rmse,
        iterations,
        pairs: n,
    })
}

/// Root-mean-square reprojection distance (px).
pub fn reprojection_rmse<T: Scalar>(pose: &CameraPose<T>, corrs: &[Corr3D2D<T>]) -> Result<T> {
    if corrs.is_empty() {
        return Ok(T::zero());
    }
    let p = pose.camera_matrix();
    let mut s = T::zero();
    for c in corrs {
        let [x, y] = p.project(c.world)?;
        s += (x - c.image[0]).powi(2) + (y - c.image[1]).powi(2);
    }
    Ok((s / T::from_usize_lossy(corrs.len())).sqrt())
}
