//! Building regions from a classified LiDAR point cloud: ground split by
//! elevation threshold, rasterization, morphological opening, connected
//! component labeling, and per-region hull geometry.

use std::collections::VecDeque;
use std::io::Write;

use crate::cloud::{PointClass, PointCloud};
use crate::error::{Error, Result};
use crate::geom::Frame;
use crate::hull::{self, P2};
use crate::raster::Raster;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig<T> {
    /// Height above mean ground elevation separating ground from objects (m).
    pub relief_factor: T,
    /// Raster cell size (m).
    pub grid_resolution: T,
    /// Components smaller than this footprint (m²) are discarded.
    pub min_segment_area: T,
    /// Half-size of the square structuring element, in cells.
    pub opening_radius: usize,
}

impl<T: Scalar> Default for ExtractionConfig<T> {
    fn default() -> Self {
        ExtractionConfig {
            relief_factor: T::c(2.5),
            grid_resolution: T::one(),
            min_segment_area: T::c(10.0),
            opening_radius: 1,
        }
    }
}

impl<T: Scalar> ExtractionConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.relief_factor > T::zero()
            && self.grid_resolution > T::zero()
            && self.min_segment_area > T::zero()
            && self.opening_radius >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "extraction parameters must be positive".into(),
            ))
        }
    }
}

/// Mapping between grid cells and world coordinates. Row 0 is the
/// northernmost row; cell `(r, c)` spans
/// `x ∈ [x_min + c·res, x_min + (c+1)·res)`, `y ∈ (y_max − (r+1)·res, y_max − r·res]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeo<T> {
    pub x_min: T,
    pub y_max: T,
    pub resolution: T,
}

impl<T: Scalar> GridGeo<T> {
    pub fn cell(&self, x: T, y: T) -> (usize, usize) {
        let c = ((x - self.x_min) / self.resolution).floor().max(T::zero());
        let r = ((self.y_max - y) / self.resolution).floor().max(T::zero());
        (r.to_usize().unwrap_or(0), c.to_usize().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingRegion<T> {
    pub id: usize,
    /// Indices into the cloud passed to [`extract_building_regions`].
    pub members: Vec<usize>,
    /// Counterclockwise convex hull of the members' `(x, y)` (m).
    pub boundary: Vec<P2<T>>,
    pub centroid: P2<T>,
    /// Hull area (m²).
    pub area: T,
    /// Orientation of the minimal bounding rectangle's longer side, `[0, π)`.
    pub direction: T,
    /// Mean member elevation (m).
    pub mean_z: T,
}

/// Splits the cloud at `T_e = H_g + T_rf`, where `H_g` is the mean elevation
/// of ground-classified points. Points strictly above `T_e` are non-ground.
pub fn split_ground<T: Scalar>(
    cloud: &PointCloud<T>,
    cfg: &ExtractionConfig<T>,
) -> Result<(PointCloud<T>, PointCloud<T>)> {
    let (ground, nonground) = split_ground_indices(cloud, cfg)?;
    Ok((cloud.select(&ground), cloud.select(&nonground)))
}

/// Index form of [`split_ground`].
pub fn split_ground_indices<T: Scalar>(
    cloud: &PointCloud<T>,
    cfg: &ExtractionConfig<T>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (sum, n) = cloud
        .points
        .iter()
        .filter(|p| p.class == PointClass::Ground)
        .fold((T::zero(), 0usize), |(s, n), p| (s + p.z, n + 1));
    if n == 0 {
        return Err(Error::NoGroundPoints);
    }
    let threshold = sum / T::from_usize_lossy(n) + cfg.relief_factor;
    let (above, below): (Vec<usize>, Vec<usize>) =
        (0..cloud.len()).partition(|&i| cloud.points[i].z > threshold);
    Ok((below, above))
}

/// Vertically projects points onto a grid. Returns the per-cell maximum
/// elevation (0 for empty cells), the occupancy grid, and the grid geometry.
pub fn rasterize_nonground<T: Scalar>(
    nonground: &PointCloud<T>,
    resolution: T,
) -> Result<(Raster<T>, Raster<bool>, GridGeo<T>)> {
    if !(resolution > T::zero()) {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let (lo, hi) = nonground.bounds().ok_or(Error::EmptyCloud)?;
    let geo = GridGeo {
        x_min: lo[0],
        y_max: hi[1],
        resolution,
    };
    let (last_r, last_c) = geo.cell(hi[0], lo[1]);
    let frame = Frame::new(last_r + 1, last_c + 1);
    let mut elev = Raster::filled(frame, T::zero());
    let mut occ = Raster::filled(frame, false);
    for p in &nonground.points {
        let (r, c) = geo.cell(p.x, p.y);
        if occ.get(r, c) {
            elev.set(r, c, elev.get(r, c).max(p.z));
        } else {
            occ.set(r, c, true);
            elev.set(r, c, p.z);
        }
    }
    Ok((elev, occ, geo))
}

fn sweep(grid: &Raster<bool>, radius: usize, erode: bool) -> Raster<bool> {
    // Separable square structuring element; cells outside the grid count as
    // background.
    let (rows, cols) = (grid.rows(), grid.cols());
    let pass = |src: &Raster<bool>, horizontal: bool| {
        Raster::from_fn(src.frame(), |r, c| {
            let (pos, len) = if horizontal { (c, cols) } else { (r, rows) };
            let lo = pos as isize - radius as isize;
            let hi = pos + radius;
            let mut hit = erode;
            for k in lo..=hi as isize {
                let v = if k < 0 || k as usize >= len {
                    false
                } else if horizontal {
                    src.get(r, k as usize)
                } else {
                    src.get(k as usize, c)
                };
                if erode && !v {
                    hit = false;
                    break;
                }
                if !erode && v {
                    hit = true;
                    break;
                }
            }
            hit
        })
    };
    pass(&pass(grid, true), false)
}

/// Erosion followed by dilation with a `(2·radius+1)²` square.
pub fn morphological_open(grid: &Raster<bool>, radius: usize) -> Raster<bool> {
    let eroded = sweep(grid, radius, true);
    sweep(&eroded, radius, false)
}

/// 8-connected component labeling. Components whose footprint
/// (`cells · resolution²`) is below `min_area` are erased; survivors are
/// numbered `1..=L` in raster-scan order of their first cell.
pub fn label_components<T: Scalar>(grid: &Raster<bool>, min_area: T, resolution: T) -> Raster<u32> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut labels = Raster::filled(grid.frame(), 0u32);
    let mut visited = Raster::filled(grid.frame(), false);
    let cell_area = resolution * resolution;
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !grid.get(r0, c0) || visited.get(r0, c0) {
                continue;
            }
            members.clear();
            visited.set(r0, c0, true);
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                members.push((r, c));
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if grid.get(nr, nc) && !visited.get(nr, nc) {
                            visited.set(nr, nc, true);
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            if T::from_usize_lossy(members.len()) * cell_area >= min_area {
                for &(r, c) in &members {
                    labels.set(r, c, next);
                }
                next += 1;
            }
        }
    }
    labels
}

/// Full LiDAR building extraction.
pub fn extract_building_regions<T: Scalar>(
    cloud: &PointCloud<T>,
    cfg: &ExtractionConfig<T>,
) -> Result<Vec<BuildingRegion<T>>> {
    cfg.validate()?;
    let (_, nonground_idx) = split_ground_indices(cloud, cfg)?;
    if nonground_idx.is_empty() {
        return Ok(Vec::new());
    }
    let nonground = cloud.select(&nonground_idx);
    let (_, occ, geo) = rasterize_nonground(&nonground, cfg.grid_resolution)?;
    let opened = morphological_open(&occ, cfg.opening_radius);
    let labels = label_components(&opened, cfg.min_segment_area, cfg.grid_resolution);
    let count = labels.data().iter().copied().max().unwrap_or(0) as usize;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (k, p) in nonground.points.iter().enumerate() {
        let (r, c) = geo.cell(p.x, p.y);
        let l = labels.get(r, c);
        if l > 0 {
            groups[l as usize - 1].push(nonground_idx[k]);
        }
    }
    let mut regions = Vec::new();
    for members in groups {
        let xy: Vec<P2<T>> = members
            .iter()
            .map(|&i| [cloud.points[i].x, cloud.points[i].y])
            .collect();
        let boundary = hull::convex_hull(&xy);
        let area = hull::polygon_area(&boundary);
        if boundary.len() < 3 || area <= T::zero() {
            continue;
        }
        let rect = hull::min_area_rect(&boundary).expect("nonempty hull");
        let mean_z = members.iter().map(|&i| cloud.points[i].z).sum::<T>()
            / T::from_usize_lossy(members.len());
        regions.push(BuildingRegion {
            id: regions.len(),
            centroid: hull::polygon_centroid(&boundary),
            area,
            direction: rect.angle,
            mean_z,
            boundary,
            members,
        });
    }
    Ok(regions)
}

/// Writes regions as `POLYGON ((x y, ...))` lines, ring closed, prefixed by
/// the region id.
pub fn write_regions_wkt<T: Scalar, W: Write>(
    mut w: W,
    regions: &[BuildingRegion<T>],
) -> Result<()> {
    for r in regions {
        let ring: Vec<String> = r
            .boundary
            .iter()
            .chain(r.boundary.first())
            .map(|p| format!("{} {}", p[0].f64(), p[1].f64()))
            .collect();
        writeln!(w, "{}\tPOLYGON (({}))", r.id, ring.join(", "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64, class: PointClass) -> Point<f64> {
        Point {
            x,
            y,
            z,
            intensity: 100.0,
            class,
        }
    }

    #[test]
    fn threshold_boundary() {
        let cloud = PointCloud::new(vec![
            pt(0.0, 0.0, 10.0, PointClass::Ground),
            pt(1.0, 0.0, 12.4, PointClass::Unclassified),
            pt(2.0, 0.0, 12.6, PointClass::Unclassified),
        ]);
        let (g, ng) = split_ground(&cloud, &ExtractionConfig::default()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(ng.len(), 1);
        assert_eq!(ng.points[0].z, 12.6);
    }

    #[test]
    fn flat_cloud_has_no_nonground() {
        let cloud = PointCloud::new(
            (0..20)
                .map(|i| pt(i as f64, 0.0, 5.0, PointClass::Ground))
                .collect(),
        );
        let (g, ng) = split_ground(&cloud, &ExtractionConfig::default()).unwrap();
        assert!(ng.is_empty());
        assert_eq!(g.len(), 20);
        assert!(
            extract_building_regions(&cloud, &ExtractionConfig::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn no_ground_is_an_error() {
        let cloud = PointCloud::new(vec![pt(0.0, 0.0, 1.0, PointClass::Building)]);
        assert!(matches!(
            split_ground(&cloud, &ExtractionConfig::default()),
            Err(Error::NoGroundPoints)
        ));
    }

    #[test]
    fn rasterize_cells() {
        let one = PointCloud::new(vec![pt(3.2, 4.7, 9.0, PointClass::Building)]);
        let (e, occ, _) = rasterize_nonground(&one, 1.0).unwrap();
        assert_eq!(occ.data().iter().filter(|v| **v).count(), 1);
        assert_eq!(e.data().iter().copied().fold(0.0, f64::max), 9.0);
        let two = PointCloud::new(vec![
            pt(0.2, 0.2, 9.0, PointClass::Building),
            pt(0.7, 0.2, 11.0, PointClass::Building),
        ]);
        let (e, occ, _) = rasterize_nonground(&two, 1.0).unwrap();
        assert_eq!(occ.data().iter().filter(|v| **v).count(), 1);
        assert_eq!(e.get(0, 0), 11.0);
        assert!(matches!(
            rasterize_nonground(&PointCloud::<f64>::default(), 1.0),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn roof_cell_count_matches_binning() {
        // 10 x 20 m roof at 2 pts/m²; independent count of distinct cells.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point<f64>> = (0..400)
            .map(|_| {
                pt(
                    rng.random_range(100.0..110.0),
                    rng.random_range(50.0..70.0),
                    8.0,
                    PointClass::Building,
                )
            })
            .collect();
        let cloud = PointCloud::new(pts.clone());
        let (_, occ, geo) = rasterize_nonground(&cloud, 1.0).unwrap();
        let mut cells: Vec<(i64, i64)> = pts
            .iter()
            .map(|p| {
                (
                    ((geo.y_max - p.y) / 1.0).floor() as i64,
                    ((p.x - geo.x_min) / 1.0).floor() as i64,
                )
            })
            .collect();
        cells.sort();
        cells.dedup();
        let occupied = occ.data().iter().filter(|v| **v).count();
        assert_eq!(occupied, cells.len());
        assert!((170..=231).contains(&occupied), "{occupied}");
    }

    fn brute_open(g: &Raster<bool>, r: usize) -> Raster<bool> {
        let at = |g: &Raster<bool>, y: isize, x: isize| {
            y >= 0
                && x >= 0
                && (y as usize) < g.rows()
                && (x as usize) < g.cols()
                && g.get(y as usize, x as usize)
        };
        let r = r as isize;
        let eroded = Raster::from_fn(g.frame(), |y, x| {
            (-r..=r).all(|dy| (-r..=r).all(|dx| at(g, y as isize + dy, x as isize + dx)))
        });
        Raster::from_fn(g.frame(), |y, x| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| at(&eroded, y as isize + dy, x as isize + dx)))
        })
    }

    #[test]
    fn opening_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for radius in 1..=2 {
            let g = Raster::from_fn(Frame::new(64, 64), |_, _| rng.random_bool(0.7));
            let fast = morphological_open(&g, radius);
            assert_eq!(fast, brute_open(&g, radius));
            // Opening is anti-extensive.
            assert!(fast.data().iter().zip(g.data()).all(|(a, b)| !*a || *b));
        }
    }

    #[test]
    fn opening_removes_specks_keeps_blocks() {
        let mut g = Raster::filled(Frame::new(20, 20), false);
        g.set(2, 2, true);
        for r in 5..15 {
            for c in 6..16 {
                g.set(r, c, true);
            }
        }
        let o = morphological_open(&g, 1);
        assert!(!o.get(2, 2));
        let mut expect = g.clone();
        expect.set(2, 2, false);
        assert_eq!(o, expect);
    }

    fn block(g: &mut Raster<bool>, r0: usize, c0: usize, h: usize, w: usize) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                g.set(r, c, true);
            }
        }
    }

    #[test]
    fn area_threshold_and_connectivity() {
        let mut g = Raster::filled(Frame::new(20, 20), false);
        block(&mut g, 1, 1, 3, 3); // 9 m²: erased
        block(&mut g, 10, 1, 4, 3); // 12 m²: kept
        let l = label_components(&g, 10.0, 1.0);
        assert_eq!(l.get(2, 2), 0);
        assert_eq!(l.get(11, 2), 1);

        let mut d = Raster::filled(Frame::new(20, 20), false);
        block(&mut d, 0, 0, 4, 4);
        block(&mut d, 4, 4, 4, 4); // touches diagonally
        let l = label_components(&d, 0.0, 1.0);
        assert_eq!(l.data().iter().copied().max(), Some(1));
    }

    #[test]
    fn single_box_region_geometry() {
        // 10 x 20 m box rotated by 25°, jittered-grid sampled at 2 pts/m².
        let angle = 25f64.to_radians();
        let (s, c) = angle.sin_cos();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        let step = 1.0 / 2f64.sqrt();
        let mut y = -20.0;
        while y < 20.0 {
            let mut x = -20.0;
            while x < 20.0 {
                let px = x + rng.random_range(0.0..step);
                let py = y + rng.random_range(0.0..step);
                let u = px * c + py * s;
                let v = -px * s + py * c;
                let inside = u.abs() <= 10.0 && v.abs() <= 5.0;
                let class = if inside {
                    PointClass::Building
                } else {
                    PointClass::Ground
                };
                pts.push(pt(
                    px + 50.0,
                    py + 50.0,
                    if inside { 6.0 } else { 0.0 },
                    class,
                ));
                x += step;
            }
            y += step;
        }
        let cloud = PointCloud::new(pts);
        let regions = extract_building_regions(&cloud, &ExtractionConfig::default()).unwrap();
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert!((r.area - 200.0).abs() < 20.0, "area {}", r.area);
        assert!(
            (r.direction - angle).abs() < 2f64.to_radians(),
            "dir {}",
            r.direction.to_degrees()
        );
        for &i in &r.members {
            let p = cloud.points[i];
            assert!(p.z > 2.5);
            assert!(hull::convex_contains(&r.boundary, [p.x, p.y], 1e-9));
        }
        assert!(hull::convex_contains(&r.boundary, r.centroid, 0.0));
        let mut wkt = Vec::new();
        write_regions_wkt(&mut wkt, &regions).unwrap();
        assert!(String::from_utf8(wkt).unwrap().starts_with("0\tPOLYGON (("));
    }
}
