//! Building candidate segments from the optical image: CIE L*a*b*
//! conversion, mean-shift segmentation, and area / MBR-filling refinement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hull::{self, RotatedRect};
use crate::raster::{OpticalImage, Raster};
use crate::scalar::Scalar;

pub type Lab<T> = [T; 3];

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIE L*a*b* for one pixel.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / 0.95047), lab_f(y), lab_f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab<T: Scalar>(image: &OpticalImage) -> Raster<Lab<T>> {
    image.pixels.map(|p| srgb_to_lab(p).map(T::c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig<T> {
    /// Spatial bandwidth (px).
    pub spatial_bandwidth: T,
    /// Range bandwidth (L*a*b* units).
    pub range_bandwidth: T,
    /// Regions with fewer pixels are merged into their closest-colored
    /// neighbor.
    pub min_region: usize,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for MeanShiftConfig<T> {
    fn default() -> Self {
        MeanShiftConfig {
            spatial_bandwidth: T::c(8.0),
            range_bandwidth: T::c(8.0),
            min_region: 50,
            max_iterations: 10,
        }
    }
}

fn dist2<T: Scalar>(a: &Lab<T>, b: &Lab<T>) -> T {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Flat-kernel mean shift in the joint spatial-range domain; returns the
/// color mode each pixel converges to.
fn seek_modes<T: Scalar>(lab: &Raster<Lab<T>>, cfg: &MeanShiftConfig<T>) -> Vec<Lab<T>> {
    let (rows, cols) = (lab.rows() as isize, lab.cols() as isize);
    let hs = cfg.spatial_bandwidth;
    let hs2 = hs * hs;
    let hr2 = cfg.range_bandwidth * cfg.range_bandwidth;
    let win = hs.ceil().to_isize().unwrap_or(1);
    let tol = T::c(0.01);
    (0..lab.frame().len())
        .into_par_iter()
        .map(|idx| {
            let mut y = T::from_usize_lossy(idx / cols as usize);
            let mut x = T::from_usize_lossy(idx % cols as usize);
            let mut color = lab.data()[idx];
            for _ in 0..cfg.max_iterations {
                let (cy, cx) = (y.round().to_isize().unwrap(), x.round().to_isize().unwrap());
                let (mut sx, mut sy, mut sc, mut n) =
                    (T::zero(), T::zero(), [T::zero(); 3], 0usize);
                for r in (cy - win).max(0)..=(cy + win).min(rows - 1) {
                    let dy = T::from_isize(r).unwrap() - y;
                    for c in (cx - win).max(0)..=(cx + win).min(cols - 1) {
                        let dx = T::from_isize(c).unwrap() - x;
                        if dx * dx + dy * dy > hs2 {
                            continue;
                        }
                        let v = lab.get(r as usize, c as usize);
                        if dist2(&v, &color) > hr2 {
                            continue;
                        }
                        sx += T::from_isize(c).unwrap();
                        sy += T::from_isize(r).unwrap();
                        sc[0] += v[0];
                        sc[1] += v[1];
                        sc[2] += v[2];
                        n += 1;
                    }
                }
                if n == 0 {
                    break;
                }
                let k = T::from_usize_lossy(n);
                let (nx, ny) = (sx / k, sy / k);
                let nc = sc.map(|v| v / k);
                let shift = (nx - x) * (nx - x) / hs2
                    + (ny - y) * (ny - y) / hs2
                    + dist2(&nc, &color) / hr2;
                x = nx;
                y = ny;
                color = nc;
                if shift < tol {
                    break;
                }
            }
            color
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Mean-shift segmentation. Labels are `1..=L`, numbered in raster-scan
/// order of each region's first pixel.
pub fn mean_shift_segment<T: Scalar>(
    lab: &Raster<Lab<T>>,
    cfg: &MeanShiftConfig<T>,
) -> Result<Raster<u32>> {
    if !(cfg.spatial_bandwidth > T::zero() && cfg.range_bandwidth > T::zero()) {
        return Err(Error::Config(
            "mean-shift bandwidths must be positive".into(),
        ));
    }
    let modes = seek_modes(lab, cfg);
    let (rows, cols) = (lab.rows(), lab.cols());
    let merge2 = {
        let h = cfg.range_bandwidth / T::c(2.0);
        h * h
    };

    // Group 8-connected pixels whose modes coincide within half the range
    // bandwidth.
    let mut region = vec![usize::MAX; rows * cols];
    let mut count = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if region[start] != usize::MAX {
            continue;
        }
        region[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for (dr, dc) in NEIGHBORS8 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let j = nr as usize * cols + nc as usize;
                if region[j] == usize::MAX && dist2(&modes[i], &modes[j]) <= merge2 {
                    region[j] = count;
                    queue.push_back(j);
                }
            }
        }
        count += 1;
    }

    // Region statistics on the input colors.
    let mut size = vec![0usize; count];
    let mut color_sum = vec![[T::zero(); 3]; count];
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for i in 0..rows * cols {
        let g = region[i];
        size[g] += 1;
        let v = lab.data()[i];
        for k in 0..3 {
            color_sum[g][k] += v[k];
        }
        let (r, c) = (i / cols, i % cols);
        for j in [
            (c + 1 < cols).then(|| i + 1),
            (r + 1 < rows).then(|| i + cols),
        ]
        .into_iter()
        .flatten()
        {
            if region[j] != g {
                adjacency[g].insert(region[j]);
                adjacency[region[j]].insert(g);
            }
        }
    }

    // Absorb small regions, smallest first, into the adjacent region with the
    // closest mean color.
    let mut uf = UnionFind::new(count);
    loop {
        let mut small: Vec<(usize, usize)> = (0..count)
            .filter(|&g| uf.find(g) == g && size[g] < cfg.min_region && !adjacency[g].is_empty())
            .map(|g| (size[g], g))
            .collect();
        if small.is_empty() {
            break;
        }
        small.sort_unstable();
        let mut merged_any = false;
        for (_, g) in small {
            if uf.find(g) != g || size[g] >= cfg.min_region {
                continue;
            }
            let mean = |s: &[T; 3], n: usize| s.map(|v| v / T::from_usize_lossy(n));
            let own = mean(&color_sum[g], size[g]);
            let neighbors: BTreeSet<usize> = adjacency[g]
                .iter()
                .map(|&n| uf.find(n))
                .filter(|&n| n != g)
                .collect();
            let Some(&best) = neighbors.iter().min_by(|&&a, &&b| {
                dist2(&mean(&color_sum[a], size[a]), &own)
                    .partial_cmp(&dist2(&mean(&color_sum[b], size[b]), &own))
                    .unwrap()
                    .then(a.cmp(&b))
            }) else {
                continue;
            };
            uf.parent[g] = best;
            size[best] += size[g];
            for k in 0..3 {
                let add = color_sum[g][k];
                color_sum[best][k] += add;
            }
            let moved = std::mem::take(&mut adjacency[g]);
            adjacency[best].extend(moved);
            adjacency[best].remove(&best);
            adjacency[best].remove(&g);
            merged_any = true;
        }
        if !merged_any {
            break;
        }
        // Drop stale entries so the filter above sees current roots only.
        for g in 0..count {
            if uf.find(g) == g {
                let set: BTreeSet<usize> = adjacency[g]
                    .iter()
                    .map(|&n| uf.find(n))
                    .filter(|&n| n != g)
                    .collect();
                adjacency[g] = set;
            }
        }
    }

    let mut relabel = BTreeMap::new();
    let mut out = Vec::with_capacity(rows * cols);
    for &g in &region {
        let root = uf.find(g);
        let next = relabel.len() as u32 + 1;
        out.push(*relabel.entry(root).or_insert(next));
    }
    Raster::from_vec(lab.frame(), out)
}

/// Percentage of the minimal-area rotated bounding rectangle covered by a
/// set of `(row, col)` pixels, each treated as a unit square.
pub fn mbr_filling<T: Scalar>(pixels: &[(usize, usize)]) -> Result<T> {
    let (_, rect) = pixel_mbr::<T>(pixels)?;
    Ok(T::from_usize_lossy(pixels.len()) / rect.area() * T::c(100.0))
}

fn pixel_mbr<T: Scalar>(pixels: &[(usize, usize)]) -> Result<(Vec<[T; 2]>, RotatedRect<T>)> {
    if pixels.is_empty() {
        return Err(Error::EmptySegment);
    }
    // Per-row column extremes are enough to span the hull of all corners.
    let mut extremes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(r, c) in pixels {
        let e = extremes.entry(r).or_insert((c, c));
        e.0 = e.0.min(c);
        e.1 = e.1.max(c);
    }
    hull_and_rect(&extremes)
}

fn hull_and_rect<T: Scalar>(
    extremes: &BTreeMap<usize, (usize, usize)>,
) -> Result<(Vec<[T; 2]>, RotatedRect<T>)> {
    let half = T::c(0.5);
    let mut corners = Vec::with_capacity(extremes.len() * 4);
    for (&r, &(lo, hi)) in extremes {
        let (r, lo, hi) = (
            T::from_usize_lossy(r),
            T::from_usize_lossy(lo),
            T::from_usize_lossy(hi),
        );
        corners.push([lo - half, r - half]);
        corners.push([lo - half, r + half]);
        corners.push([hi + half, r - half]);
        corners.push([hi + half, r + half]);
    }
    let h = hull::convex_hull(&corners);
    let rect = hull::min_area_rect(&h).ok_or(Error::EmptySegment)?;
    Ok((h, rect))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig<T> {
    /// Minimum segment area (m²).
    pub min_area: T,
    /// Maximum segment area (m²).
    pub max_area: T,
    /// Minimum MBR filling (percent).
    pub mbr_threshold: T,
}

impl<T: Scalar> Default for RefineConfig<T> {
    fn default() -> Self {
        RefineConfig {
            min_area: T::c(20.0),
            max_area: T::c(2000.0),
            mbr_threshold: T::c(50.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSegment<T> {
    /// Label in the segmentation map.
    pub id: u32,
    pub pixel_count: usize,
    /// `(x, y) = (col, row)` (px).
    pub centroid: [T; 2],
    /// Ground area (m²).
    pub area: T,
    pub mbr: RotatedRect<T>,
    pub mbr_filling: T,
    /// Orientation of the MBR's longer side in pixel coordinates, `[0, π)`.
    pub direction: T,
}

/// Keeps segments within the area bounds whose MBR filling reaches the
/// threshold. Output is ordered by label.
pub fn refine_segments<T: Scalar>(
    labels: &Raster<u32>,
    gsd: T,
    cfg: &RefineConfig<T>,
) -> Result<Vec<CandidateSegment<T>>> {
    if !(cfg.min_area > T::zero() && cfg.max_area > cfg.min_area && cfg.mbr_threshold > T::zero()) {
        return Err(Error::Config(
            "refinement thresholds must be positive with min < max".into(),
        ));
    }
    struct Acc {
        count: usize,
        sum_r: f64,
        sum_c: f64,
        extremes: BTreeMap<usize, (usize, usize)>,
    }
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    for r in 0..labels.rows() {
        for c in 0..labels.cols() {
            let l = labels.get(r, c);
            if l == 0 {
                continue;
            }
            let a = acc.entry(l).or_insert_with(|| Acc {
                count: 0,
                sum_r: 0.0,
                sum_c: 0.0,
                extremes: BTreeMap::new(),
            });
            a.count += 1;
            a.sum_r += r as f64;
            a.sum_c += c as f64;
            let e = a.extremes.entry(r).or_insert((c, c));
            e.0 = e.0.min(c);
            e.1 = e.1.max(c);
        }
    }
    let px_area = gsd * gsd;
    let mut out = Vec::new();
    for (id, a) in acc {
        let area = T::from_usize_lossy(a.count) * px_area;
        if area < cfg.min_area || area > cfg.max_area {
            continue;
        }
        let (_, rect) = hull_and_rect::<T>(&a.extremes)?;
        let filling = T::from_usize_lossy(a.count) / rect.area() * T::c(100.0);
        if filling < cfg.mbr_threshold {
            continue;
        }
        let n = a.count as f64;
        out.push(CandidateSegment {
            id,
            pixel_count: a.count,
            centroid: [T::c(a.sum_c / n), T::c(a.sum_r / n)],
            area,
            mbr: rect,
            mbr_filling: filling,
            direction: rect.angle,
        });
    }
    Ok(out)
}

/// Sidecar table: `id cx cy area direction mbr_filling`, one segment per line.
pub fn write_segment_table<T: Scalar, W: Write>(
    mut w: W,
    segments: &[CandidateSegment<T>],
) -> Result<()> {
    writeln!(
        w,
        "# id centroid_x centroid_y area_m2 direction_rad mbr_filling_pct"
    )?;
    for s in segments {
        writeln!(
            w,
            "{} {:.4} {:.4} {:.4} {:.6} {:.3}",
            s.id,
            s.centroid[0].f64(),
            s.centroid[1].f64(),
            s.area.f64(),
            s.direction.f64(),
            s.mbr_filling.f64()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Frame;

    #[test]
    fn lab_reference_points() {
        let w = srgb_to_lab([255, 255, 255]);
        assert!(
            (w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-2 && w[2].abs() < 1e-2,
            "{w:?}"
        );
        assert!(srgb_to_lab([0, 0, 0])[0].abs() < 1e-12);
        let g = srgb_to_lab([119, 119, 119]);
        assert!(
            (49.0..=51.0).contains(&g[0]) && g[1].abs() < 1e-2 && g[2].abs() < 1e-2,
            "{g:?}"
        );
    }

    #[test]
    fn mid_gray_matches_reference_formula() {
        // L* from the CIE definition evaluated directly: Y is the linearized
        // channel value because the luminance row of the sRGB matrix sums to 1.
        let c: f64 = 119.0 / 255.0;
        let y = ((c + 0.055) / 1.055).powf(2.4);
        let l = 116.0 * y.cbrt() - 16.0;
        assert!((srgb_to_lab([119, 119, 119])[0] - l).abs() < 1e-4);
    }

    fn lab_image(frame: Frame, f: impl Fn(usize, usize) -> [f64; 3]) -> Raster<Lab<f64>> {
        Raster::from_fn(frame, f)
    }

    #[test]
    fn constant_image_single_segment() {
        let img = lab_image(Frame::new(20, 30), |_, _| [50.0, 10.0, -5.0]);
        let l = mean_shift_segment(&img, &MeanShiftConfig::default()).unwrap();
        assert!(l.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn two_half_planes() {
        let img = lab_image(Frame::new(24, 40), |_, c| {
            if c < 20 {
                [30.0, 0.0, 0.0]
            } else {
                [80.0, 0.0, 0.0]
            }
        });
        let cfg = MeanShiftConfig {
            range_bandwidth: 10.0,
            ..Default::default()
        };
        let l = mean_shift_segment(&img, &cfg).unwrap();
        assert_eq!(l.data().iter().copied().max(), Some(2));
        assert!((0..24).all(|r| l.get(r, 0) == 1
            && l.get(r, 39) == 2
            && l.get(r, 19) == 1
            && l.get(r, 20) == 2));
    }

    #[test]
    fn deterministic_segmentation() {
        let img = lab_image(Frame::new(30, 30), |r, c| {
            [((r * 7 + c * 13) % 50) as f64, 0.0, (r % 5) as f64]
        });
        let cfg = MeanShiftConfig::default();
        assert_eq!(
            mean_shift_segment(&img, &cfg).unwrap(),
            mean_shift_segment(&img, &cfg).unwrap()
        );
    }

    #[test]
    fn small_regions_absorbed() {
        let img = lab_image(Frame::new(30, 30), |r, c| {
            if (10..13).contains(&r) && (10..13).contains(&c) {
                [90.0, 0.0, 0.0]
            } else {
                [20.0, 0.0, 0.0]
            }
        });
        let l = mean_shift_segment(
            &img,
            &MeanShiftConfig {
                min_region: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(l.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn filling_rectangle_and_l_shape() {
        let rect: Vec<(usize, usize)> = (0..7).flat_map(|r| (0..12).map(move |c| (r, c))).collect();
        assert!((mbr_filling::<f64>(&rect).unwrap() - 100.0).abs() < 1e-9);
        // 2-wide column of height 4 plus a 4x1 foot: 12 of a 6x4 box.
        let mut l: Vec<(usize, usize)> = (0..4).flat_map(|r| (0..2).map(move |c| (r, c))).collect();
        l.extend((2..6).map(|c| (3, c)));
        assert!((mbr_filling::<f64>(&l).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(mbr_filling::<f64>(&[]), Err(Error::EmptySegment)));
    }

    #[test]
    fn filling_separates_blobs_from_roofs() {
        // Plus-shaped crown of overlapping discs vs a rotated rectangle roof.
        let mut blob = Vec::new();
        for r in 0..60usize {
            for c in 0..60usize {
                let inside =
                    |cy: f64, cx: f64, rad: f64| (r as f64 - cy).hypot(c as f64 - cx) <= rad;
                if inside(30.0, 30.0, 8.0)
                    || inside(12.0, 30.0, 7.0)
                    || inside(30.0, 50.0, 6.0)
                    || inside(46.0, 18.0, 7.0)
                {
                    blob.push((r, c));
                }
            }
        }
        let tree: f64 = mbr_filling(&blob).unwrap();
        let (s, co) = 0.4f64.sin_cos();
        let mut roof = Vec::new();
        for r in 0..80usize {
            for c in 0..80usize {
                let (x, y) = (c as f64 - 40.0, r as f64 - 40.0);
                if (x * co + y * s).abs() <= 25.0 && (-x * s + y * co).abs() <= 12.0 {
                    roof.push((r, c));
                }
            }
        }
        let building: f64 = mbr_filling(&roof).unwrap();
        assert!(
            tree < 50.0 && building > 90.0,
            "tree {tree} building {building}"
        );
    }

    #[test]
    fn refine_filters_area_and_filling() {
        let gsd: f64 = 0.15;
        let mut labels = Raster::filled(Frame::new(200, 200), 0u32);
        // ~10 m² square: removed.
        for r in 5..26 {
            for c in 5..26 {
                labels.set(r, c, 1);
            }
        }
        // 100 m² rectangle (40 x 111 px at 0.15 m ≈ 99.9 m²): kept.
        for r in 40..80 {
            for c in 40..151 {
                labels.set(r, c, 2);
            }
        }
        // Thin diagonal line, large but poorly filled.
        for k in 0..190 {
            labels.set(k + 5, k.min(199), 3);
            if k + 6 < 200 {
                labels.set(k + 6, k, 3);
            }
        }
        let segs = refine_segments(&labels, gsd, &RefineConfig::default()).unwrap();
        // Label 3 overwrote parts of the others; only the rectangle survives.
        assert_eq!(segs.len(), 1);
        let s = &segs[0];
        assert_eq!(s.id, 2);
        assert!(s.mbr_filling > 95.0);
        assert!(s.direction.abs() < 1e-9);
        for seg in &segs {
            assert!(seg.area >= 20.0 && seg.area <= 2000.0 && seg.mbr_filling >= 50.0);
        }
        let mut out = Vec::new();
        write_segment_table(&mut out, &segs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 2);
    }
}
