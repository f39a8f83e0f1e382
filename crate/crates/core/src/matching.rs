//! Pairing LiDAR building regions with image segments and rejecting
//! structurally inconsistent pairs.
//!
//! LiDAR regions enter matching through [`project_regions`], which maps
//! centroid, outline area and direction into the image with a pose hint, so
//! every comparison happens in pixel units.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::CameraPose;
use crate::hull::{self, P2};
use crate::image_extract::CandidateSegment;
use crate::lidar_extract::BuildingRegion;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig<T> {
    pub gtm_k: usize,
    /// Maximum relative area difference.
    pub area_tolerance: T,
    /// Maximum direction difference (radians), compared modulo π.
    pub direction_tolerance: T,
    /// Required ratio between the largest and second-largest segment.
    pub dominance: T,
}

impl<T: Scalar> Default for MatchConfig<T> {
    fn default() -> Self {
        MatchConfig {
            gtm_k: 4,
            area_tolerance: T::c(0.15),
            direction_tolerance: T::c(2f64.to_radians()),
            dominance: T::c(1.2),
        }
    }
}

impl<T: Scalar> MatchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.gtm_k == 0 {
            return Err(Error::Config("gtm_k must be at least 1".into()));
        }
        if !(self.area_tolerance > T::zero()
            && self.direction_tolerance > T::zero()
            && self.dominance >= T::one())
        {
            return Err(Error::Config("matching tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// A matchable feature in image pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<T> {
    pub id: usize,
    /// `(x, y)` pixel position.
    pub px: P2<T>,
    /// Area in px².
    pub area: T,
    /// Major-axis orientation in `[0, π)`.
    pub direction: T,
}

/// A LiDAR region together with its image-space footprint under a pose hint.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarCandidate<T> {
    pub candidate: Candidate<T>,
    /// Region centroid in world coordinates (m).
    pub world_xy: P2<T>,
    pub mean_z: T,
}

/// Projects each region's outline at its mean elevation with `hint`.
pub fn project_regions<T: Scalar>(
    regions: &[BuildingRegion<T>],
    hint: &CameraPose<T>,
) -> Result<Vec<LidarCandidate<T>>> {
    hint.validate()?;
    let p = hint.camera_matrix();
    regions
        .iter()
        .map(|r| {
            let outline: Vec<P2<T>> = r
                .boundary
                .iter()
                .map(|b| p.project([b[0], b[1], r.mean_z]))
                .collect::<Result<_>>()?;
            let h = hull::convex_hull(&outline);
            let rect = hull::min_area_rect(&h).ok_or(Error::EmptySegment)?;
            Ok(LidarCandidate {
                candidate: Candidate {
                    id: r.id,
                    px: p.project([r.centroid[0], r.centroid[1], r.mean_z])?,
                    area: hull::polygon_area(&h).abs(),
                    direction: rect.angle,
                },
                world_xy: r.centroid,
                mean_z: r.mean_z,
            })
        })
        .collect()
}

pub fn image_candidates<T: Scalar>(segments: &[CandidateSegment<T>]) -> Vec<Candidate<T>> {
    segments
        .iter()
        .map(|s| Candidate {
            id: s.id as usize,
            px: s.centroid,
            area: T::from_usize_lossy(s.pixel_count),
            direction: s.direction,
        })
        .collect()
}

fn dominant<T: Scalar>(set: &[Candidate<T>], dominance: T) -> Result<&Candidate<T>> {
    let mut sorted: Vec<&Candidate<T>> = set.iter().collect();
    sorted.sort_by(|a, b| b.area.partial_cmp(&a.area).unwrap().then(a.id.cmp(&b.id)));
    match sorted.as_slice() {
        [] => Err(Error::EmptySet),
        [only] => Ok(only),
        [first, second, ..] if first.area >= dominance * second.area => Ok(first),
        _ => Err(Error::AmbiguousLargest),
    }
}

/// Shift (px) taking the largest LiDAR footprint onto the largest image
/// segment. Both must dominate their runner-up by `cfg.dominance`.
pub fn largest_segment_translation<T: Scalar>(
    lidar: &[Candidate<T>],
    image: &[Candidate<T>],
    cfg: &MatchConfig<T>,
) -> Result<P2<T>> {
    let l = dominant(lidar, cfg.dominance)?;
    let i = dominant(image, cfg.dominance)?;
    Ok([i.px[0] - l.px[0], i.px[1] - l.px[1]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T> {
    pub lidar_id: usize,
    pub image_id: usize,
    /// LiDAR region centroid (m).
    pub lidar_xy: P2<T>,
    /// LiDAR centroid in the image after the translation guide (px).
    pub lidar_px: P2<T>,
    pub image_px: P2<T>,
    pub inlier: bool,
}

impl<T: Scalar> Correspondence<T> {
    /// Distance between the guided LiDAR position and the image position.
    pub fn guide_residual(&self) -> T {
        (self.lidar_px[0] - self.image_px[0]).hypot(self.lidar_px[1] - self.image_px[1])
    }
}

/// Greedy one-to-one pairing by increasing distance after shifting the
/// LiDAR positions by `guide`; ties go to the lower ids.
pub fn initial_match<T: Scalar>(
    lidar: &[LidarCandidate<T>],
    image: &[Candidate<T>],
    guide: P2<T>,
) -> Vec<Correspondence<T>> {
    let shifted: Vec<P2<T>> = lidar
        .iter()
        .map(|l| [l.candidate.px[0] + guide[0], l.candidate.px[1] + guide[1]])
        .collect();
    let mut pairs: Vec<(T, usize, usize)> = Vec::with_capacity(lidar.len() * image.len());
    for (a, p) in shifted.iter().enumerate() {
        for (b, q) in image.iter().enumerate() {
            pairs.push(((p[0] - q.px[0]).hypot(p[1] - q.px[1]), a, b));
        }
    }
    pairs.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then(lidar[x.1].candidate.id.cmp(&lidar[y.1].candidate.id))
            .then(image[x.2].id.cmp(&image[y.2].id))
    });
    let mut used_l = vec![false; lidar.len()];
    let mut used_i = vec![false; image.len()];
    let mut out = Vec::new();
    for (_, a, b) in pairs {
        if used_l[a] || used_i[b] {
            continue;
        }
        used_l[a] = true;
        used_i[b] = true;
        out.push(Correspondence {
            lidar_id: lidar[a].candidate.id,
            image_id: image[b].id,
            lidar_xy: lidar[a].world_xy,
            lidar_px: shifted[a],
            image_px: image[b].px,
            inlier: true,
        });
    }
    out.sort_by_key(|c| (c.lidar_id, c.image_id));
    out
}

/// Directed k-nearest-neighbor graph with edges longer than the median of
/// all pairwise distances dropped.
pub fn median_knn_graph<T: Scalar>(pts: &[P2<T>], ids: &[usize], k: usize) -> Vec<Vec<bool>> {
    let n = pts.len();
    let d = |i: usize, j: usize| (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
    let mut all: Vec<T> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            all.push(d(i, j));
        }
    }
    let mut adj = vec![vec![false; n]; n];
    if all.is_empty() {
        return adj;
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = all.len();
    let median = if m % 2 == 1 {
        all[m / 2]
    } else {
        (all[m / 2 - 1] + all[m / 2]) / T::c(2.0)
    };
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            d(i, a)
                .partial_cmp(&d(i, b))
                .unwrap()
                .then(ids[a].cmp(&ids[b]))
        });
        for &j in others.iter().take(k) {
            if d(i, j) <= median {
                adj[i][j] = true;
            }
        }
    }
    adj
}

/// Graph transformation matching: drops the pair whose incoming edges
/// disagree most between the two median k-NN graphs until the graphs
/// coincide. Ties go to the larger guide residual. Output order follows the
/// input.
pub fn gtm_filter<T: Scalar>(
    matches: &[Correspondence<T>],
    k: usize,
) -> Result<Vec<Correspondence<T>>> {
    if k == 0 {
        return Err(Error::Config("gtm_k must be at least 1".into()));
    }
    if matches.len() < k + 1 {
        return Err(Error::TooFewMatches {
            needed: k + 1,
            got: matches.len(),
        });
    }
    let mut keep: Vec<usize> = (0..matches.len()).collect();
    loop {
        let ids: Vec<usize> = keep.iter().map(|&i| matches[i].lidar_id).collect();
        let p: Vec<P2<T>> = keep.iter().map(|&i| matches[i].lidar_px).collect();
        let q: Vec<P2<T>> = keep.iter().map(|&i| matches[i].image_px).collect();
        let ap = median_knn_graph(&p, &ids, k);
        let aq = median_knn_graph(&q, &ids, k);
        let n = keep.len();
        let score: Vec<usize> = (0..n)
            .map(|j| (0..n).filter(|&i| ap[i][j] != aq[i][j]).count())
            .collect();
        let Some(worst) = (0..n).max_by(|&a, &b| {
            let (ma, mb) = (&matches[keep[a]], &matches[keep[b]]);
            score[a]
                .cmp(&score[b])
                .then(
                    ma.guide_residual()
                        .partial_cmp(&mb.guide_residual())
                        .unwrap(),
                )
                .then(mb.lidar_id.cmp(&ma.lidar_id))
        }) else {
            break;
        };
        if score[worst] == 0 {
            break;
        }
        keep.remove(worst);
    }
    Ok(keep.into_iter().map(|i| matches[i]).collect())
}

/// 2-D similarity `q = a·p + b` (or `a·conj(p) + b` when reflected) in
/// complex form.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Similarity {
    a: [f64; 2],
    b: [f64; 2],
    reflect: bool,
}

impl Similarity {
    fn fit(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2], reflect: bool) -> Option<Self> {
        let conj = |v: [f64; 2]| if reflect { [v[0], -v[1]] } else { v };
        let (p1, p2) = (conj(p1), conj(p2));
        let dp = [p2[0] - p1[0], p2[1] - p1[1]];
        let dq = [q2[0] - q1[0], q2[1] - q1[1]];
        let den = dp[0] * dp[0] + dp[1] * dp[1];
        if den < 1e-12 {
            return None;
        }
        let a = [
            (dq[0] * dp[0] + dq[1] * dp[1]) / den,
            (dq[1] * dp[0] - dq[0] * dp[1]) / den,
        ];
        let b = [
            q1[0] - (a[0] * p1[0] - a[1] * p1[1]),
            q1[1] - (a[0] * p1[1] + a[1] * p1[0]),
        ];
        Some(Similarity { a, b, reflect })
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let p = if self.reflect { [p[0], -p[1]] } else { p };
        [
            self.a[0] * p[0] - self.a[1] * p[1] + self.b[0],
            self.a[0] * p[1] + self.a[1] * p[0] + self.b[1],
        ]
    }
}

/// RANSAC over 2-D similarities (reflections allowed). Keeps the pairs
/// within `threshold` px of the model with most inliers; ties go to the
/// earlier iteration.
pub fn ransac_filter<T: Scalar>(
    matches: &[Correspondence<T>],
    threshold: T,
    iterations: usize,
    seed: u64,
) -> Result<Vec<Correspondence<T>>> {
    if matches.len() < 3 {
        return Err(Error::TooFewMatches {
            needed: 3,
            got: matches.len(),
        });
    }
    let p: Vec<[f64; 2]> = matches
        .iter()
        .map(|m| m.lidar_px.map(|v| v.f64()))
        .collect();
    let q: Vec<[f64; 2]> = matches
        .iter()
        .map(|m| m.image_px.map(|v| v.f64()))
        .collect();
    let thr = threshold.f64();
    let inliers = |s: &Similarity| -> Vec<usize> {
        (0..p.len())
            .filter(|&i| {
                let r = s.apply(p[i]);
                (r[0] - q[i][0]).hypot(r[1] - q[i][1]) <= thr
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let i = rng.random_range(0..p.len());
        let mut j = rng.random_range(0..p.len() - 1);
        if j >= i {
            j += 1;
        }
        for reflect in [false, true] {
            if let Some(s) = Similarity::fit(p[i], p[j], q[i], q[j], reflect) {
                let inl = inliers(&s);
                if inl.len() > best.len() {
                    best = inl;
                }
            }
        }
    }
    Ok(best.into_iter().map(|i| matches[i]).collect())
}

fn axis_difference<T: Scalar>(a: T, b: T) -> T {
    let d = hull::axis_angle(a - b);
    d.min(T::PI() - d)
}

/// Keeps pairs whose areas differ by at most `cfg.area_tolerance` relative
/// to the larger one and whose directions differ by at most
/// `cfg.direction_tolerance`.
pub fn validate_area_direction<T: Scalar>(
    matches: &[Correspondence<T>],
    lidar: &[Candidate<T>],
    image: &[Candidate<T>],
    cfg: &MatchConfig<T>,
) -> Result<Vec<Correspondence<T>>> {
    let find = |set: &[Candidate<T>], id: usize| {
        set.iter()
            .find(|c| c.id == id)
            .copied()
            .ok_or(Error::UnknownBuilding(id))
    };
    let mut out = Vec::new();
    for m in matches {
        let (a, b) = (find(lidar, m.lidar_id)?, find(image, m.image_id)?);
        let rel = (a.area - b.area).abs() / a.area.max(b.area);
        if rel <= cfg.area_tolerance
            && axis_difference(a.direction, b.direction) <= cfg.direction_tolerance
        {
            out.push(*m);
        }
    }
    Ok(out)
}

/// Returns `all` with `inlier` set exactly for pairs present in `kept`.
pub fn flag_inliers<T: Scalar>(
    all: &[Correspondence<T>],
    kept: &[Correspondence<T>],
) -> Vec<Correspondence<T>> {
    let set: BTreeSet<(usize, usize)> = kept.iter().map(|c| (c.lidar_id, c.image_id)).collect();
    all.iter()
        .map(|c| Correspondence {
            inlier: set.contains(&(c.lidar_id, c.image_id)),
            ..*c
        })
        .collect()
}

/// `lidar_id image_id lx ly ix iy inlier_flag`, one pair per line.
pub fn write_correspondences<T: Scalar, W: Write>(
    mut w: W,
    matches: &[Correspondence<T>],
) -> Result<()> {
    for m in matches {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            m.lidar_id,
            m.image_id,
            m.lidar_xy[0].f64(),
            m.lidar_xy[1].f64(),
            m.image_px[0].f64(),
            m.image_px[1].f64(),
            u8::from(m.inlier)
        )?;
    }
    Ok(())
}

/// Reads the format of [`write_correspondences`]. The guided LiDAR pixel
/// position is not stored and comes back as NaN.
pub fn read_correspondences<T: Scalar, R: BufRead>(r: R) -> Result<Vec<Correspondence<T>>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(format!("bad integer `{s}`")))
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map(T::c)
                .map_err(|_| err(format!("bad number `{s}`")))
        };
        out.push(Correspondence {
            lidar_id: int(f[0])?,
            image_id: int(f[1])?,
            lidar_xy: [num(f[2])?, num(f[3])?],
            lidar_px: [T::nan(), T::nan()],
            image_px: [num(f[4])?, num(f[5])?],
            inlier: match f[6] {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("bad inlier flag `{other}`"))),
            },
        });
    }
    Ok(out)
}
