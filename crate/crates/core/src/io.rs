//! File formats shared by the pipeline: flat key-value records, image files
//! and float raster grids.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geom::Frame;
use crate::raster::{OpticalImage, Raster};
use crate::scalar::Scalar;

/// Parses `name = value` lines. `#` starts a comment; blank lines are
/// ignored. Returns each value with its 1-based line number.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `name = value`, found `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if out
            .insert(k.to_string(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_rgb_png(path: &Path, img: &Raster<[u8; 3]>) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.cols() as u32,
        img.rows() as u32,
        img.data().iter().flatten().copied().collect(),
    )
    .expect("buffer size matches frame");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit RGB image (PNG or PPM, chosen by content).
pub fn read_rgb(path: &Path, gsd: f64) -> Result<OpticalImage> {
    let img = image::open(path)?.to_rgb8();
    let frame = Frame::new(img.height() as usize, img.width() as usize);
    let data = img.pixels().map(|p| p.0).collect();
    OpticalImage::new(Raster::from_vec(frame, data)?, gsd)
}

pub fn write_gray16_png(path: &Path, img: &Raster<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.cols() as u32, img.rows() as u32, img.data().to_vec())
            .expect("buffer size matches frame");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_gray16_png(path: &Path) -> Result<Raster<u16>> {
    let img = image::open(path)?.to_luma16();
    let frame = Frame::new(img.height() as usize, img.width() as usize);
    Raster::from_vec(frame, img.into_raw())
}

/// Affinely maps `[min, max]` of a real raster onto `[0, 65535]`.
pub fn to_gray16<T: Scalar>(r: &Raster<T>) -> Raster<u16> {
    let (lo, hi) = r
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    r.map(|v| {
        if span > T::zero() {
            ((v - lo) / span * T::c(65535.0)).round().f64() as u16
        } else {
            0
        }
    })
}

/// Header of a float raster grid file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridHeader {
    pub rows: usize,
    pub cols: usize,
    pub channel: String,
    pub pose_hash: u64,
}

/// Writes a dense raster as a small text header followed by row-major
/// little-endian `f32` samples.
pub fn write_float_grid<T: Scalar, W: Write>(
    mut w: W,
    r: &Raster<T>,
    channel: &str,
    pose_hash: u64,
) -> Result<()> {
    writeln!(w, "rows {}", r.rows())?;
    writeln!(w, "cols {}", r.cols())?;
    writeln!(w, "channel {channel}")?;
    writeln!(w, "pose_hash {pose_hash:016x}")?;
    writeln!(w, "end_header")?;
    for v in r.data() {
        w.write_all(&(v.f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_float_grid<R: BufRead>(mut r: R) -> Result<(GridHeader, Raster<f32>)> {
    let mut fields = BTreeMap::new();
    let mut line = String::new();
    for n in 1.. {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse {
                line: n,
                msg: "missing end_header".into(),
            });
        }
        let l = line.trim();
        if l == "end_header" {
            break;
        }
        let (k, v) = l.split_once(' ').ok_or_else(|| Error::Parse {
            line: n,
            msg: format!("bad header line `{l}`"),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("header missing `{k}`"),
        })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Parse {
            line: 0,
            msg: format!("bad `{k}`"),
        })
    };
    let header = GridHeader {
        rows: num("rows")?,
        cols: num("cols")?,
        channel: get("channel")?,
        pose_hash: u64::from_str_radix(&get("pose_hash")?, 16).map_err(|_| Error::Parse {
            line: 0,
            msg: "bad pose_hash".into(),
        })?,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.rows * header.cols * 4 {
        return Err(Error::Parse {
            line: 0,
            msg: "grid payload size mismatch".into(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let raster = Raster::from_vec(Frame::new(header.rows, header.cols), data)?;
    Ok((header, raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_parse() {
        let m = parse_key_values("# c\nfista.lambda = 0.001\n\n a = b # tail\n").unwrap();
        assert_eq!(m["fista.lambda"], (2, "0.001".to_string()));
        assert_eq!(m["a"].1, "b");
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn float_grid_round_trip() {
        let r = Raster::from_fn(Frame::new(3, 4), |r, c| (r * 4 + c) as f64 * 0.5);
        let mut buf = Vec::new();
        write_float_grid(&mut buf, &r, "z", 0xdead_beef).unwrap();
        let (h, back) = read_float_grid(&buf[..]).unwrap();
        assert_eq!(
            h,
            GridHeader {
                rows: 3,
                cols: 4,
                channel: "z".into(),
                pose_hash: 0xdead_beef
            }
        );
        assert_eq!(back.data()[5], 2.5);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster::from_fn(Frame::new(5, 7), |r, c| [r as u8, c as u8, 200]);
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &rgb).unwrap();
        assert_eq!(read_rgb(&p, 0.15).unwrap().pixels, rgb);
        let g = Raster::from_fn(Frame::new(5, 7), |r, c| (r * 1000 + c) as u16);
        let p = dir.path().join("b.png");
        write_gray16_png(&p, &g).unwrap();
        assert_eq!(read_gray16_png(&p).unwrap(), g);
    }

    #[test]
    fn fnv_known_value() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
