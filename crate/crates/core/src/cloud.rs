//! LiDAR point clouds and their on-disk formats.
//!
//! Text format: one point per line, `x y z intensity class`, with the class
//! as an integer code (see [`PointClass`]). Blank lines and `#` comments are
//! skipped.
//!
//! Binary format: a sequence of little-endian records of four `f64`
//! (x, y, z, intensity) followed by one `u8` class code.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Classification codes carried by each point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PointClass {
    Unclassified = 0,
    Ground = 1,
    LowVegetation = 2,
    MediumVegetation = 3,
    HighVegetation = 4,
    Building = 5,
}

impl PointClass {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use PointClass::*;
        Some(match code {
            0 => Unclassified,
            1 => Ground,
            2 => LowVegetation,
            3 => MediumVegetation,
            4 => HighVegetation,
            5 => Building,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    /// Laser return intensity in `[0, 255]`.
    pub intensity: T,
    pub class: PointClass,
}

impl<T: Scalar> Point<T> {
    pub fn xyz(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(self.intensity >= T::zero() && self.intensity <= T::c(255.0)) {
            return Err(format!("intensity {} outside [0, 255]", self.intensity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Point<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `([min x, min y, min z], [max x, max y, max z])`.
    pub fn bounds(&self) -> Option<([T; 3], [T; 3])> {
        let first = self.points.first()?.xyz();
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            let q = p.xyz();
            (
                [lo[0].min(q[0]), lo[1].min(q[1]), lo[2].min(q[2])],
                [hi[0].max(q[0]), hi[1].max(q[1]), hi[2].max(q[2])],
            )
        }))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            p.check().map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.points {
            writeln!(
                w,
                "{} {} {} {} {}",
                p.x.f64(),
                p.y.f64(),
                p.z.f64(),
                p.intensity.f64(),
                p.class.code()
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("bad number `{s}`")))
            };
            let code: u8 = fields[4]
                .parse()
                .map_err(|_| err(format!("bad class `{}`", fields[4])))?;
            let p = Point {
                x: T::c(num(fields[0])?),
                y: T::c(num(fields[1])?),
                z: T::c(num(fields[2])?),
                intensity: T::c(num(fields[3])?),
                class: PointClass::from_code(code)
                    .ok_or_else(|| err(format!("unknown class code {code}")))?,
            };
            p.check().map_err(err)?;
            points.push(p);
        }
        Ok(PointCloud { points })
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                w.write_all(&v.f64().to_le_bytes())?;
            }
            w.write_all(&[p.class.code()])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        const REC: usize = 33;
        if buf.len() % REC != 0 {
            return Err(Error::Parse {
                line: buf.len() / REC + 1,
                msg: "truncated binary point record".into(),
            });
        }
        let mut points = Vec::with_capacity(buf.len() / REC);
        for (i, rec) in buf.chunks_exact(REC).enumerate() {
            let f = |k: usize| f64::from_le_bytes(rec[k * 8..k * 8 + 8].try_into().unwrap());
            let p = Point {
                x: T::c(f(0)),
                y: T::c(f(1)),
                z: T::c(f(2)),
                intensity: T::c(f(3)),
                class: PointClass::from_code(rec[32]).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("unknown class code {}", rec[32]),
                })?,
            };
            p.check().map_err(|msg| Error::Parse { line: i + 1, msg })?;
            points.push(p);
        }
        Ok(PointCloud { points })
    }
}
