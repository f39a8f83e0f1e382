//! Row-major 2-D grids and the optical image type.

use crate::error::{Error, Result};
use crate::geom::Frame;

/// A dense row-major grid of `T` over a [`Frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    frame: Frame,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(frame: Frame, value: T) -> Self {
        Raster {
            frame,
            data: vec![value; frame.len()],
        }
    }

    pub fn from_vec(frame: Frame, data: Vec<T>) -> Result<Self> {
        if data.len() != frame.len() {
            return Err(Error::FrameMismatch);
        }
        Ok(Raster { frame, data })
    }

    pub fn from_fn(frame: Frame, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(frame.len());
        for r in 0..frame.rows {
            for c in 0..frame.cols {
                data.push(f(r, c));
            }
        }
        Raster { frame, data }
    }

    #[inline]
    pub fn frame(&self) -> Frame {
        self.frame
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.frame.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.frame.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.frame.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        let i = row * self.frame.cols + col;
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            frame: self.frame,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copies the sub-grid covered by `w`.
    pub fn crop(&self, w: &Window) -> Raster<T> {
        assert!(w.row0 + w.rows <= self.rows() && w.col0 + w.cols <= self.cols());
        Raster::from_fn(w.frame(), |r, c| self.get(w.row0 + r, w.col0 + c))
    }

    pub fn same_frame<U>(&self, other: &Raster<U>) -> bool {
        self.frame == other.frame
    }
}

/// A rectangular sub-frame of a larger image, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn full(frame: Frame) -> Self {
        Window {
            row0: 0,
            col0: 0,
            rows: frame.rows,
            cols: frame.cols,
        }
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.rows, self.cols)
    }

    /// Center in `(x, y) = (col, row)` pixel coordinates of the parent frame.
    pub fn center(&self) -> [f64; 2] {
        [
            self.col0 as f64 + (self.cols as f64 - 1.0) / 2.0,
            self.row0 as f64 + (self.rows as f64 - 1.0) / 2.0,
        ]
    }

    /// Whether a parent-frame pixel coordinate `(x, y)` falls inside the
    /// window grown by `margin` pixels on every side.
    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        x >= self.col0 as f64 - 0.5 - margin
            && x < (self.col0 + self.cols) as f64 - 0.5 + margin
            && y >= self.row0 as f64 - 0.5 - margin
            && y < (self.row0 + self.rows) as f64 - 0.5 + margin
    }
}

/// 8-bit RGB optical image with its ground sample distance (m/pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalImage {
    pub pixels: Raster<[u8; 3]>,
    pub gsd: f64,
}

impl OpticalImage {
    pub fn new(pixels: Raster<[u8; 3]>, gsd: f64) -> Result<Self> {
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::Config(format!(
                "ground sample distance must be positive, got {gsd}"
            )));
        }
        Ok(OpticalImage { pixels, gsd })
    }

    pub fn frame(&self) -> Frame {
        self.pixels.frame()
    }

    /// ITU-R BT.601 luma in `[0, 255]`.
    pub fn luma(&self) -> Raster<f64> {
        self.pixels
            .map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_window_geometry() {
        let r = Raster::from_fn(Frame::new(4, 5), |r, c| r * 10 + c);
        let w = Window {
            row0: 1,
            col0: 2,
            rows: 2,
            cols: 3,
        };
        let c = r.crop(&w);
        assert_eq!(c.data(), &[12, 13, 14, 22, 23, 24]);
        assert_eq!(w.center(), [3.0, 1.5]);
        assert!(w.contains(1.6, 0.6, 0.0));
        assert!(!w.contains(1.4, 1.0, 0.0));
        assert!(w.contains(1.4, 1.0, 1.0));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Raster::from_vec(Frame::new(2, 2), vec![0u8; 3]).is_err());
    }
}
