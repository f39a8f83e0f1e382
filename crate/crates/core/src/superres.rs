//! Dense z- and i-images from a sparse point cloud: value transfer into the
//! image grid followed by L1-regularized smooth propagation (FISTA).

use rayon::prelude::*;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{CameraPose, Frame};
use crate::raster::{Raster, Window};
use crate::scalar::Scalar;

/// Which LiDAR attribute is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Elevation (m).
    Z,
    /// Return intensity, `[0, 255]`.
    I,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Z => "z",
            Channel::I => "i",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Channel::Z),
            "i" => Ok(Channel::I),
            _ => Err(Error::Config(format!(
                "unknown channel `{s}` (expected z or i)"
            ))),
        }
    }
}

/// Transferred values and the mask of pixels that received one. Unmasked
/// pixels hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRaster<T> {
    pub values: Raster<T>,
    pub mask: Raster<bool>,
}

impl<T: Scalar> SparseRaster<T> {
    pub fn frame(&self) -> Frame {
        self.values.frame()
    }

    pub fn known_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FistaConfig<T> {
    pub lambda: T,
    pub gamma: T,
    pub k_max: usize,
    /// Stop once the RMS per-pixel change of the iterate drops below this.
    pub epsilon: T,
}

impl<T: Scalar> Default for FistaConfig<T> {
    fn default() -> Self {
        // The gradient of the squared forward differences has Lipschitz
        // bound 16 on a 4-neighbor grid.
        FistaConfig {
            lambda: T::c(1e-3),
            gamma: T::c(1.0 / 16.0),
            k_max: 1000,
            epsilon: T::c(1e-4),
        }
    }
}

impl<T: Scalar> FistaConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero()) {
            return Err(Error::Config("fista lambda must be >= 0".into()));
        }
        if !(self.gamma > T::zero() && self.gamma <= T::c(1.0 / 16.0)) {
            return Err(Error::Config("fista gamma must lie in (0, 1/16]".into()));
        }
        if self.k_max == 0 || !(self.epsilon > T::zero()) {
            return Err(Error::Config(
                "fista k_max and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FistaReport<T> {
    pub raster: Raster<T>,
    pub iterations: usize,
    pub converged: bool,
    /// RMS iterate change per iteration.
    pub history: Vec<T>,
    pub initial_cost: T,
    pub final_cost: T,
}

/// Projects every point with `pose` and writes its value into the pixel it
/// lands on within `window`; when several points share a pixel the one
/// nearest the camera wins.
pub fn transfer_values<T: Scalar>(
    cloud: &PointCloud<T>,
    pose: &CameraPose<T>,
    window: &Window,
    channel: Channel,
) -> Result<SparseRaster<T>> {
    pose.validate()?;
    let p = pose.camera_matrix();
    transfer_with(cloud, window, channel, |pt| {
        let xyz = pt.xyz();
        let d = p.depth(xyz);
        if !(d > T::zero()) {
            return None;
        }
        p.project(xyz).ok().map(|px| (px, d))
    })
}

/// Value transfer with a caller-supplied projection returning the pixel
/// position `(x, y)` in the parent frame and the camera depth of a point.
pub fn transfer_with<T: Scalar>(
    cloud: &PointCloud<T>,
    window: &Window,
    channel: Channel,
    project: impl Fn(&Point<T>) -> Option<([T; 2], T)>,
) -> Result<SparseRaster<T>> {
    let frame = window.frame();
    let mut values = Raster::filled(frame, T::zero());
    let mut mask = Raster::filled(frame, false);
    let mut depth = vec![T::infinity(); frame.len()];
    let (r0, c0) = (
        T::from_usize_lossy(window.row0),
        T::from_usize_lossy(window.col0),
    );
    let (rows, cols) = (
        T::from_usize_lossy(frame.rows),
        T::from_usize_lossy(frame.cols),
    );
    let half = T::c(0.5);
    for pt in &cloud.points {
        let Some(([x, y], d)) = project(pt) else {
            continue;
        };
        let (c, r) = ((x - c0 + half).floor(), (y - r0 + half).floor());
        if !(c >= T::zero() && r >= T::zero() && c < cols && r < rows) {
            continue;
        }
        let (r, c) = (r.to_usize().unwrap(), c.to_usize().unwrap());
        let idx = r * frame.cols + c;
        if d < depth[idx] {
            depth[idx] = d;
            values.set(
                r,
                c,
                if channel == Channel::Z {
                    pt.z
                } else {
                    pt.intensity
                },
            );
            mask.set(r, c, true);
        }
    }
    if !mask.data().iter().any(|&m| m) {
        return Err(Error::NoVisiblePoints);
    }
    Ok(SparseRaster { values, mask })
}

/// Soft thresholding: `sign(x) * max(|x| - alpha, 0)`.
#[inline]
pub fn shrink<T: Scalar>(x: T, alpha: T) -> T {
    let m = x.abs() - alpha;
    if m > T::zero() {
        m * x.signum()
    } else {
        T::zero()
    }
}

/// Gradient of the sum of squared forward differences (replicate boundary)
/// written into `grad`; returns the cost.
fn ssdg_into<T: Scalar>(v: &[T], rows: usize, cols: usize, grad: &mut [T]) -> T {
    let two = T::c(2.0);
    let partial: Vec<T> = grad
        .par_chunks_mut(cols)
        .enumerate()
        .map(|(r, g)| {
            let row = &v[r * cols..(r + 1) * cols];
            let mut cost = T::zero();
            for c in 0..cols {
                let x = row[c];
                let mut acc = T::zero();
                if c + 1 < cols {
                    let d = x - row[c + 1];
                    cost += d * d;
                    acc += d;
                }
                if c > 0 {
                    acc += x - row[c - 1];
                }
                if r + 1 < rows {
                    let d = x - v[(r + 1) * cols + c];
                    cost += d * d;
                    acc += d;
                }
                if r > 0 {
                    acc += x - v[(r - 1) * cols + c];
                }
                g[c] = two * acc;
            }
            cost
        })
        .collect();
    partial.into_iter().sum()
}

/// `‖∇x φ‖² + ‖∇y φ‖²` and its gradient.
pub fn ssdg_value_and_gradient<T: Scalar>(values: &Raster<T>) -> (T, Raster<T>) {
    let mut grad = vec![T::zero(); values.frame().len()];
    let cost = ssdg_into(values.data(), values.rows(), values.cols(), &mut grad);
    (
        cost,
        Raster::from_vec(values.frame(), grad).expect("same frame"),
    )
}

/// One FISTA iteration fused with the SSDG gradient, row-parallel.
struct Step<T> {
    rows: usize,
    cols: usize,
    gamma: T,
    thresh: T,
    beta: T,
}

impl<T: Scalar> Step<T> {
    #[inline(always)]
    fn update(&self, v: T, acc: T, x: &mut T, yn: &mut T, free: T) -> T {
        let z = v - self.gamma * (acc + acc);
        let m = (z.abs() - self.thresh).max(T::zero());
        // Fixed pixels get `free = 0` and keep `v` exactly.
        let xi = free * m.copysign(z) + (T::one() - free) * v;
        let d = xi - *x;
        *x = xi;
        *yn = xi + self.beta * d;
        d * d
    }

    /// Updates `x` and writes the extrapolated point into `y_next`; returns
    /// the squared iterate change summed in row order.
    fn run(&self, y: &[T], x: &mut [T], y_next: &mut [T], free: &[T]) -> T {
        let (rows, cols) = (self.rows, self.cols);
        let partial: Vec<T> = x
            .par_chunks_mut(cols)
            .zip(y_next.par_chunks_mut(cols))
            .enumerate()
            .map(|(r, (xr, yn))| {
                let row = &y[r * cols..(r + 1) * cols];
                let up = if r > 0 {
                    &y[(r - 1) * cols..r * cols]
                } else {
                    row
                };
                let down = if r + 1 < rows {
                    &y[(r + 1) * cols..(r + 2) * cols]
                } else {
                    row
                };
                let fr = &free[r * cols..(r + 1) * cols];
                // Replicate boundary: a missing neighbor equals the pixel.
                let edge = |c: usize| {
                    let v = row[c];
                    let l = if c > 0 { row[c - 1] } else { v };
                    let rr = if c + 1 < cols { row[c + 1] } else { v };
                    (v, (v - l) + (v - rr) + (v - up[c]) + (v - down[c]))
                };
                let mut change = [T::zero(); 4];
                let (v, acc) = edge(0);
                change[0] += self.update(v, acc, &mut xr[0], &mut yn[0], fr[0]);
                if cols > 2 {
                    let n = cols - 2;
                    let (l, m, rt) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
                    let (u, d) = (&up[1..n + 1], &down[1..n + 1]);
                    let (xs, ys, fs) = (&mut xr[1..n + 1], &mut yn[1..n + 1], &fr[1..n + 1]);
                    for j in 0..n {
                        let v = m[j];
                        let acc = (v - l[j]) + (v - rt[j]) + (v - u[j]) + (v - d[j]);
                        change[j & 3] += self.update(v, acc, &mut xs[j], &mut ys[j], fs[j]);
                    }
                }
                if cols > 1 {
                    let c = cols - 1;
                    let (v, acc) = edge(c);
                    change[1] += self.update(v, acc, &mut xr[c], &mut yn[c], fr[c]);
                }
                (change[0] + change[1]) + (change[2] + change[3])
            })
            .collect();
        partial.into_iter().fold(T::zero(), |a, b| a + b)
    }
}

fn objective<T: Scalar>(
    v: &[T],
    rows: usize,
    cols: usize,
    free: &[usize],
    lambda: T,
    scratch: &mut [T],
) -> T {
    let l1: T = free.iter().map(|&i| v[i].abs()).sum();
    ssdg_into(v, rows, cols, scratch) + lambda * l1
}

/// Fills the unmasked pixels by minimizing the squared-gradient energy plus
/// an L1 penalty, keeping masked pixels fixed.
pub fn propagate_fista<T: Scalar>(
    sparse: &SparseRaster<T>,
    cfg: &FistaConfig<T>,
) -> Result<FistaReport<T>> {
    cfg.validate()?;
    let frame = sparse.frame();
    let (rows, cols) = (frame.rows, frame.cols);
    let fixed = sparse.mask.data();
    let spa: Vec<T> = sparse
        .values
        .data()
        .iter()
        .zip(fixed)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect();
    let free: Vec<usize> = (0..spa.len()).filter(|&i| !fixed[i]).collect();
    let mut grad = vec![T::zero(); spa.len()];
    let initial_cost = objective(&spa, rows, cols, &free, cfg.lambda, &mut grad);
    if free.is_empty() {
        return Ok(FistaReport {
            raster: Raster::from_vec(frame, spa)?,
            iterations: 0,
            converged: true,
            history: Vec::new(),
            initial_cost,
            final_cost: initial_cost,
        });
    }
    if free.len() == spa.len() {
        return Err(Error::NoVisiblePoints);
    }

    let thresh = cfg.lambda * cfg.gamma;
    let n_free = T::from_usize_lossy(free.len());
    let is_free: Vec<T> = fixed
        .iter()
        .map(|&m| if m { T::zero() } else { T::one() })
        .collect();
    let mut x = spa.clone();
    let mut y = spa.clone();
    let mut y_next = spa.clone();
    let mut t = T::one();
    let mut history = Vec::new();
    let mut converged = false;
    let mut k = 0;
    while k < cfg.k_max {
        k += 1;
        let t_next = (T::one() + (T::one() + T::c(4.0) * t * t).sqrt()) / T::c(2.0);
        let beta = (t - T::one()) / t_next;
        let step = Step {
            rows,
            cols,
            gamma: cfg.gamma,
            thresh,
            beta,
        };
        let change = step.run(&y, &mut x, &mut y_next, &is_free);
        std::mem::swap(&mut y, &mut y_next);
        t = t_next;
        let rms = (change / n_free).sqrt();
        history.push(rms);
        if rms < cfg.epsilon {
            converged = true;
            break;
        }
    }
    let final_cost = objective(&x, rows, cols, &free, cfg.lambda, &mut grad);
    Ok(FistaReport {
        raster: Raster::from_vec(frame, x)?,
        iterations: k,
        converged,
        history,
        initial_cost,
        final_cost,
    })
}

/// Transfer followed by propagation, rendered into `window` of the image
/// frame. Intensities are propagated on `[0, 1]` and scaled back.
pub fn super_resolve<T: Scalar>(
    cloud: &PointCloud<T>,
    pose: &CameraPose<T>,
    window: &Window,
    channel: Channel,
    cfg: &FistaConfig<T>,
) -> Result<FistaReport<T>> {
    let sparse = transfer_values(cloud, pose, window, channel)?;
    propagate_channel(&sparse, channel, cfg)
}

/// [`propagate_fista`] with the per-channel value scaling applied.
pub fn propagate_channel<T: Scalar>(
    sparse: &SparseRaster<T>,
    channel: Channel,
    cfg: &FistaConfig<T>,
) -> Result<FistaReport<T>> {
    if channel == Channel::Z {
        return propagate_fista(sparse, cfg);
    }
    let scale = T::c(255.0);
    let normalized = SparseRaster {
        values: sparse.values.map(|v| v / scale),
        mask: sparse.mask.clone(),
    };
    let mut report = propagate_fista(&normalized, cfg)?;
    for ((v, &m), &orig) in report
        .raster
        .data_mut()
        .iter_mut()
        .zip(sparse.mask.data())
        .zip(sparse.values.data())
    {
        *v = if m { orig } else { *v * scale };
    }
    Ok(report)
}
