//! Histogram estimates of entropy, mutual information and NCMI.

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Plain binning with each image's own `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramSpec {
    pub bins: usize,
}

impl HistogramSpec {
    pub const MI_BINS: usize = 64;
    pub const NCMI_BINS: usize = 32;

    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!(
                "histogram needs at least 2 bins, got {bins}"
            )));
        }
        Ok(HistogramSpec { bins })
    }
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins: Self::MI_BINS,
        }
    }
}

/// Normalized joint histogram over up to three images, stored with the
/// first image's bin varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPdf {
    pub bins: usize,
    pub dims: usize,
    pub p: Vec<f64>,
}

impl JointPdf {
    /// Marginal over the listed axes (in increasing order).
    pub fn marginal(&self, keep: &[usize]) -> JointPdf {
        let b = self.bins;
        let mut out = vec![0.0; b.pow(keep.len() as u32)];
        for (idx, &v) in self.p.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let mut coords = [0usize; 3];
            let mut rem = idx;
            for d in (0..self.dims).rev() {
                coords[d] = rem % b;
                rem /= b;
            }
            let mut o = 0;
            for &k in keep {
                o = o * b + coords[k];
            }
            out[o] += v;
        }
        JointPdf {
            bins: b,
            dims: keep.len(),
            p: out,
        }
    }
}

fn bin_indices<T: Scalar>(img: &Raster<T>, bins: usize) -> Vec<usize> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (hi - lo).f64();
    let nb = bins as f64;
    img.data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo).f64() / span * nb) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

pub fn joint_histogram<T: Scalar>(images: &[&Raster<T>], spec: &HistogramSpec) -> Result<JointPdf> {
    HistogramSpec::new(spec.bins)?;
    let Some(first) = images.first() else {
        return Err(Error::Config(
            "joint histogram needs at least one image".into(),
        ));
    };
    if images.len() > 3 {
        return Err(Error::Config(
            "joint histogram supports at most three images".into(),
        ));
    }
    if images.iter().any(|im| !im.same_frame(first)) {
        return Err(Error::FrameMismatch);
    }
    let b = spec.bins;
    let idx: Vec<Vec<usize>> = images.iter().map(|im| bin_indices(im, b)).collect();
    let mut counts = vec![0u64; b.pow(images.len() as u32)];
    let n = first.frame().len();
    for i in 0..n {
        let mut o = 0;
        for axis in &idx {
            o = o * b + axis[i];
        }
        counts[o] += 1;
    }
    let total = n as f64;
    Ok(JointPdf {
        bins: b,
        dims: images.len(),
        p: counts.into_iter().map(|c| c as f64 / total).collect(),
    })
}

/// Shannon entropy in bits.
pub fn entropy(pdf: &[f64]) -> Result<f64> {
    let s: f64 = pdf.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(s));
    }
    Ok(-pdf
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>())
}

/// `H(A) + H(B) - H(A, B)` in bits.
pub fn mutual_information<T: Scalar>(
    a: &Raster<T>,
    b: &Raster<T>,
    spec: &HistogramSpec,
) -> Result<f64> {
    let joint = joint_histogram(&[a, b], spec)?;
    let ha = entropy(&joint.marginal(&[0]).p)?;
    let hb = entropy(&joint.marginal(&[1]).p)?;
    Ok(ha + hb - entropy(&joint.p)?)
}

/// `(H(A, B) + H(C)) / H(A, B, C)`, all from one triple histogram.
pub fn ncmi<T: Scalar>(
    a: &Raster<T>,
    b: &Raster<T>,
    c: &Raster<T>,
    spec: &HistogramSpec,
) -> Result<f64> {
    let joint = joint_histogram(&[a, b, c], spec)?;
    let habc = entropy(&joint.p)?;
    if habc <= 0.0 {
        return Err(Error::DegenerateEntropy);
    }
    let hab = entropy(&joint.marginal(&[0, 1]).p)?;
    let hc = entropy(&joint.marginal(&[2]).p)?;
    Ok((hab + hc) / habc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Frame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, frame: Frame) -> Raster<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(frame, |_, _| rng.random::<f64>())
    }

    #[test]
    fn histogram_examples() {
        let c = Raster::filled(Frame::new(5, 5), 2.0f64);
        let h = joint_histogram(&[&c, &c], &HistogramSpec::default()).unwrap();
        assert_eq!(h.p.iter().filter(|&&p| p > 0.0).count(), 1);
        assert_eq!(h.p.iter().sum::<f64>(), 1.0);

        let spec = HistogramSpec::new(2).unwrap();
        let f = Frame::new(100, 100);
        let h = joint_histogram(&[&noise(1, f), &noise(2, f)], &spec).unwrap();
        assert!(h.p.iter().all(|&p| (p - 0.25).abs() < 0.02), "{:?}", h.p);

        let cb = Raster::from_fn(Frame::new(8, 8), |r, c| ((r + c) % 2) as f64);
        let h = joint_histogram(&[&cb, &cb], &spec).unwrap();
        assert_eq!(h.p, vec![0.5, 0.0, 0.0, 0.5]);
        let other = Raster::filled(Frame::new(8, 9), 0.0);
        assert!(matches!(
            joint_histogram(&[&cb, &other], &spec),
            Err(Error::FrameMismatch)
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 2.0).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(entropy(&[0.5, 0.4]), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn mi_examples() {
        let spec = HistogramSpec::new(2).unwrap();
        let half = Raster::from_fn(Frame::new(10, 10), |_, c| if c < 5 { 0.0 } else { 1.0 });
        assert!((mutual_information(&half, &half, &spec).unwrap() - 1.0).abs() < 1e-12);
        let f = Frame::new(100, 100);
        let mi = mutual_information(&noise(3, f), &noise(4, f), &spec).unwrap();
        assert!((0.0..0.02).contains(&mi), "{mi}");
    }

    #[test]
    fn ncmi_examples() {
        let spec = HistogramSpec::new(HistogramSpec::NCMI_BINS).unwrap();
        let a = noise(5, Frame::new(30, 30));
        assert!((ncmi(&a, &a, &a, &spec).unwrap() - 2.0).abs() < 1e-12);
        // C constant on each half, (A, B) constant on each half of the other
        // axis: exactly independent.
        let spec2 = HistogramSpec::new(2).unwrap();
        let ab = Raster::from_fn(Frame::new(4, 4), |r, _| (r / 2) as f64);
        let c = Raster::from_fn(Frame::new(4, 4), |_, c| (c / 2) as f64);
        assert!((ncmi(&ab, &ab, &c, &spec2).unwrap() - 1.0).abs() < 1e-12);
        let k = Raster::filled(Frame::new(3, 3), 1.0);
        assert!(matches!(
            ncmi(&k, &k, &k, &spec),
            Err(Error::DegenerateEntropy)
        ));
    }

    proptest! {
        #[test]
        fn mi_symmetric_nonnegative(seed in any::<u64>(), bins in 2usize..16) {
            let spec = HistogramSpec::new(bins).unwrap();
            let f = Frame::new(12, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Raster::from_fn(f, |_, _| rng.random_range(0..6) as f64);
            let b = Raster::from_fn(f, |r, _| (r % 3) as f64 + rng.random_range(0..2) as f64);
            let ab = mutual_information(&a, &b, &spec).unwrap();
            let ba = mutual_information(&b, &a, &spec).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= -1e-12);
            let h = entropy(&joint_histogram(&[&a], &spec).unwrap().p).unwrap();
            prop_assert!((mutual_information(&a, &a, &spec).unwrap() - h).abs() < 1e-12);
        }
    }
}
