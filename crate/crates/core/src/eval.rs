//! Registration quality measures: check-point and check-line discrepancies.
//!
//! All functions are unit-agnostic; callers pass pixels scaled by the GSD
//! when meters are wanted.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::hull::P2;
use crate::raster::{OpticalImage, Raster};
use crate::scalar::Scalar;

/// A point on the optical image and its counterpart in the LiDAR rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckPointPair<T> {
    pub optical: P2<T>,
    pub lidar: P2<T>,
}

impl<T: Scalar> CheckPointPair<T> {
    pub fn distance(&self) -> T {
        dist(self.optical, self.lidar)
    }
}

fn dist<T: Scalar>(a: P2<T>, b: P2<T>) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean and population standard deviation.
pub fn mean_std<T: Scalar>(values: &[T]) -> Result<(T, T)> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = values
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    Ok((mean, var.sqrt()))
}

pub fn centroid_discrepancy<T: Scalar>(pairs: &[CheckPointPair<T>]) -> Result<(T, T)> {
    mean_std(
        &pairs
            .iter()
            .map(CheckPointPair::distance)
            .collect::<Vec<_>>(),
    )
}

/// Reduction of a discrepancy in percent of `before`.
pub fn discrepancy_gain<T: Scalar>(before: T, after: T) -> T {
    (before - after) / before * T::c(100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment2D<T> {
    pub a: P2<T>,
    pub b: P2<T>,
}

impl<T: Scalar> LineSegment2D<T> {
    pub fn new(a: P2<T>, b: P2<T>) -> Result<Self> {
        if a == b {
            return Err(Error::Config("line segment endpoints coincide".into()));
        }
        Ok(LineSegment2D { a, b })
    }

    pub fn length(&self) -> T {
        dist(self.a, self.b)
    }

    /// Parameter of the projection of `p` on the supporting line, `0` at `a`
    /// and `1` at `b`.
    fn param(&self, p: P2<T>) -> T {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        ((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])
    }

    pub fn at(&self, t: T) -> P2<T> {
        [
            self.a[0] + t * (self.b[0] - self.a[0]),
            self.a[1] + t * (self.b[1] - self.a[1]),
        ]
    }

    pub fn distance_to_point(&self, p: P2<T>) -> T {
        let t = self.param(p);
        if t <= T::zero() {
            dist(p, self.a)
        } else if t >= T::one() {
            dist(p, self.b)
        } else {
            dist(p, self.at(t))
        }
    }

    pub fn line_distance_to_point(&self, p: P2<T>) -> T {
        dist(p, self.at(self.param(p)))
    }
}

/// Mean distance from `p`'s endpoints to the line through `q`. Collinear
/// segments score 0 however far apart they are.
pub fn peng_line_distance<T: Scalar>(p: &LineSegment2D<T>, q: &LineSegment2D<T>) -> T {
    (q.line_distance_to_point(p.a) + q.line_distance_to_point(p.b)) / T::c(2.0)
}

/// Hausdorff distance between two segments. The distance to a segment is
/// convex along the other segment, so the extremes sit at endpoints.
pub fn hausdorff_segment_distance<T: Scalar>(p: &LineSegment2D<T>, q: &LineSegment2D<T>) -> T {
    q.distance_to_point(p.a)
        .max(q.distance_to_point(p.b))
        .max(p.distance_to_point(q.a))
        .max(p.distance_to_point(q.b))
}

pub fn pair_line_report<T: Scalar>(
    pairs: &[(LineSegment2D<T>, LineSegment2D<T>)],
) -> Result<(T, T)> {
    mean_std(
        &pairs
            .iter()
            .map(|(p, q)| hausdorff_segment_distance(p, q))
            .collect::<Vec<_>>(),
    )
}

/// Reads `ax ay bx by ax' ay' bx' by'` per line (comma or whitespace
/// separated); `#` starts a comment.
pub fn read_line_pairs<T: Scalar, R: BufRead>(
    r: R,
) -> Result<Vec<(LineSegment2D<T>, LineSegment2D<T>)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let v: Vec<f64> = body
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 numbers, found {}", v.len())));
        }
        let v: Vec<T> = v.into_iter().map(T::c).collect();
        let seg = |i: usize| {
            LineSegment2D::new([v[i], v[i + 1]], [v[i + 2], v[i + 3]])
                .map_err(|e| err(e.to_string()))
        };
        out.push((seg(0)?, seg(4)?));
    }
    Ok(out)
}

/// One row of a discrepancy table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: String,
    pub mean: f64,
    pub std: f64,
}

/// CSV with `stage,mean_m,std_m,gain_pct`; gains are relative to the first
/// row. Std is over pairs.
pub fn write_stage_table<W: Write>(mut w: W, rows: &[StageRow]) -> Result<()> {
    writeln!(w, "stage,mean_m,std_m,gain_pct")?;
    let base = rows.first().map(|r| r.mean);
    for r in rows {
        let gain = match base {
            Some(b) if b > 0.0 => format!("{:.2}", discrepancy_gain(b, r.mean)),
            _ => String::new(),
        };
        writeln!(w, "{},{:.4},{:.4},{}", r.stage, r.mean, r.std, gain)?;
    }
    Ok(())
}

/// Alternating `tile`-pixel squares of the optical image and the min/max
/// stretched intensity rendering.
pub fn checkerboard_overlay<T: Scalar>(
    optical: &OpticalImage,
    i_img: &Raster<T>,
    tile: usize,
) -> Result<Raster<[u8; 3]>> {
    if optical.pixels.frame() != i_img.frame() {
        return Err(Error::FrameMismatch);
    }
    if tile == 0 {
        return Err(Error::Config("overlay tile size must be positive".into()));
    }
    let (lo, hi) = i_img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.f64()), hi.max(v.f64()))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(Raster::from_fn(i_img.frame(), |r, c| {
        if (r / tile + c / tile) % 2 == 0 {
            optical.pixels.get(r, c)
        } else {
            let g = ((i_img.get(r, c).f64() - lo) / span * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8;
            [g; 3]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Frame;
    use proptest::prelude::*;

    fn seg(a: [f64; 2], b: [f64; 2]) -> LineSegment2D<f64> {
        LineSegment2D::new(a, b).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let same = vec![
            CheckPointPair {
                optical: [1.0, 2.0],
                lidar: [1.0, 2.0]
            };
            3
        ];
        assert_eq!(centroid_discrepancy(&same).unwrap(), (0.0, 0.0));
        let ones = vec![
            CheckPointPair {
                optical: [0.0, 0.0],
                lidar: [1.0, 0.0],
            },
            CheckPointPair {
                optical: [5.0, 5.0],
                lidar: [5.0, 4.0],
            },
            CheckPointPair {
                optical: [0.0, 0.0],
                lidar: [0.6, 0.8],
            },
        ];
        let (m, s): (f64, f64) = centroid_discrepancy(&ones).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        assert!(matches!(
            centroid_discrepancy::<f64>(&[]),
            Err(Error::EmptySet)
        ));
    }

    #[test]
    fn gain_examples() {
        assert!((discrepancy_gain(1.08f64, 0.56) - 48.15).abs() < 0.005);
        assert!((discrepancy_gain(1.08f64, 0.40) - 62.96).abs() < 0.005);
        assert_eq!(discrepancy_gain(0.7, 0.7), 0.0);
    }

    #[test]
    fn peng_examples() {
        let p = seg([0.0, 0.0], [10.0, 0.0]);
        assert_eq!(peng_line_distance(&p, &p), 0.0);
        assert_eq!(
            peng_line_distance(&p, &seg([100.0, 0.0], [120.0, 0.0])),
            0.0
        );
        assert!((peng_line_distance(&p, &seg([0.0, 3.0], [10.0, 3.0])) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_examples() {
        let p = seg([0.0, 0.0], [10.0, 0.0]);
        assert_eq!(hausdorff_segment_distance(&p, &p), 0.0);
        // Collinear: |AA'| = 2, |BB'| = 5.
        assert_eq!(
            hausdorff_segment_distance(&p, &seg([2.0, 0.0], [15.0, 0.0])),
            5.0
        );
        let gsd = 0.15;
        let a = seg([0.0, 0.0], [200.0 * gsd, 0.0]);
        let b = seg([0.0, 0.0], [200.0 * gsd, 4.0 * gsd]);
        assert!((hausdorff_segment_distance(&a, &b) - 0.60).abs() < 1e-12);
        // The flaw Peng's measure has and Hausdorff does not.
        for gap in [10.0, 100.0, 1000.0] {
            let far = seg([10.0 + gap, 0.0], [20.0 + gap, 0.0]);
            assert_eq!(peng_line_distance(&p, &far), 0.0);
            assert_eq!(hausdorff_segment_distance(&p, &far), 10.0 + gap);
        }
    }

    #[test]
    fn report_examples() {
        let p = seg([0.0, 0.0], [10.0, 0.0]);
        let pairs = vec![
            (p, seg([0.0, 1.0], [10.0, 1.0])),
            (p, seg([0.0, 3.0], [10.0, 3.0])),
        ];
        assert_eq!(pair_line_report(&pairs).unwrap(), (2.0, 1.0));
        assert_eq!(pair_line_report(&[(p, p), (p, p)]).unwrap(), (0.0, 0.0));
    }

    fn brute(p: &LineSegment2D<f64>, q: &LineSegment2D<f64>) -> f64 {
        let dir = |s: &LineSegment2D<f64>, o: &LineSegment2D<f64>| {
            (0..1000)
                .map(|i| o.distance_to_point(s.at(i as f64 / 999.0)))
                .fold(0.0, f64::max)
        };
        dir(p, q).max(dir(q, p))
    }

    fn arb_seg() -> impl Strategy<Value = LineSegment2D<f64>> {
        (
            -50.0f64..50.0,
            -50.0f64..50.0,
            -50.0f64..50.0,
            -50.0f64..50.0,
        )
            .prop_filter("distinct", |(a, b, c, d)| (a - c).hypot(b - d) > 1e-3)
            .prop_map(|(a, b, c, d)| seg([a, b], [c, d]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn hausdorff_metric_properties(p in arb_seg(), q in arb_seg(), r in arb_seg()) {
            let d = hausdorff_segment_distance(&p, &q);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, hausdorff_segment_distance(&q, &p));
            prop_assert!(d <= hausdorff_segment_distance(&p, &r) + hausdorff_segment_distance(&r, &q) + 1e-9);
            prop_assert!((d - brute(&p, &q)).abs() < 1e-3);
            let flipped = seg(p.b, p.a);
            prop_assert_eq!(hausdorff_segment_distance(&p, &flipped), 0.0);
        }
    }

    #[test]
    fn line_pair_csv() {
        let text = "# ax ay bx by ...\n0,0,10,0, 0,1,10,1\n0 0 10 0 0 3 10 3\n";
        let pairs: Vec<(LineSegment2D<f64>, LineSegment2D<f64>)> =
            read_line_pairs(text.as_bytes()).unwrap();
        assert_eq!(pair_line_report(&pairs).unwrap(), (2.0, 1.0));
        assert!(read_line_pairs::<f64, _>("1 2 3\n".as_bytes()).is_err());
        assert!(read_line_pairs::<f64, _>("0 0 0 0 1 1 2 2\n".as_bytes()).is_err());
    }

    #[test]
    fn stage_table_layout() {
        let rows = vec![
            StageRow {
                stage: "before".into(),
                mean: 1.08,
                std: 0.2,
            },
            StageRow {
                stage: "coarse".into(),
                mean: 0.56,
                std: 0.1,
            },
        ];
        let mut buf = Vec::new();
        write_stage_table(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(2).unwrap(), "coarse,0.5600,0.1000,48.15");
    }

    #[test]
    fn overlay_alternates_tiles() {
        let optical = OpticalImage {
            pixels: Raster::filled(Frame::new(4, 6), [200u8, 10, 10]),
            gsd: 0.15,
        };
        let i_img = Raster::from_fn(Frame::new(4, 6), |_, c| c as f64);
        let o = checkerboard_overlay(&optical, &i_img, 2).unwrap();
        assert_eq!(o.frame(), optical.pixels.frame());
        assert_eq!(o.get(0, 0), [200, 10, 10]);
        assert_eq!(o.get(0, 2), [102, 102, 102]);
        assert_eq!(o.get(2, 2), [200, 10, 10]);
    }
}
