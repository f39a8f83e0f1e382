//! Planar convex hulls, polygon moments and minimal-area bounding rectangles.

use crate::scalar::Scalar;

pub type P2<T> = [T; 2];

#[inline]
fn cross<T: Scalar>(o: P2<T>, a: P2<T>, b: P2<T>) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull in counterclockwise order without repeated or collinear
/// vertices (Andrew's monotone chain).
pub fn convex_hull<T: Scalar>(points: &[P2<T>]) -> Vec<P2<T>> {
    let mut pts: Vec<P2<T>> = points.to_vec();
    pts.sort_by(|a, b| {
        a[0].partial_cmp(&b[0])
            .unwrap()
            .then(a[1].partial_cmp(&b[1]).unwrap())
    });
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<P2<T>> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= T::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= T::zero()
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Signed area (positive for counterclockwise polygons).
pub fn polygon_area<T: Scalar>(poly: &[P2<T>]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / T::c(2.0)
}

/// Area centroid; falls back to the vertex mean for degenerate polygons.
pub fn polygon_centroid<T: Scalar>(poly: &[P2<T>]) -> P2<T> {
    let n = poly.len();
    let area = polygon_area(poly);
    if n < 3 || area.abs() <= T::epsilon() {
        let k = T::from_usize_lossy(n.max(1));
        let sx = poly.iter().map(|p| p[0]).sum::<T>();
        let sy = poly.iter().map(|p| p[1]).sum::<T>();
        return [sx / k, sy / k];
    }
    // Shift to the first vertex for conditioning.
    let o = poly[0];
    let (mut cx, mut cy) = (T::zero(), T::zero());
    for i in 0..n {
        let a = [poly[i][0] - o[0], poly[i][1] - o[1]];
        let b = [poly[(i + 1) % n][0] - o[0], poly[(i + 1) % n][1] - o[1]];
        let f = a[0] * b[1] - b[0] * a[1];
        cx += (a[0] + b[0]) * f;
        cy += (a[1] + b[1]) * f;
    }
    let six_a = T::c(6.0) * area;
    [cx / six_a + o[0], cy / six_a + o[1]]
}

/// Whether `p` lies inside or on a counterclockwise convex polygon.
pub fn convex_contains<T: Scalar>(poly: &[P2<T>], p: P2<T>, tol: T) -> bool {
    let n = poly.len();
    match n {
        0 => false,
        1 => (poly[0][0] - p[0]).hypot(poly[0][1] - p[1]) <= tol,
        _ => (0..n).all(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            len == T::zero() || cross(a, b, p) / len >= -tol
        }),
    }
}

/// Rotated rectangle given by center, half extents and the orientation of
/// its `half_len` axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect<T> {
    pub center: P2<T>,
    /// Half length along `angle`; always `>= half_width`.
    pub half_len: T,
    pub half_width: T,
    /// Orientation of the longer side in `[0, π)`.
    pub angle: T,
}

impl<T: Scalar> RotatedRect<T> {
    pub fn area(&self) -> T {
        T::c(4.0) * self.half_len * self.half_width
    }

    pub fn corners(&self) -> [P2<T>; 4] {
        let (s, c) = self.angle.sin_cos();
        let u = [c * self.half_len, s * self.half_len];
        let v = [-s * self.half_width, c * self.half_width];
        let m = self.center;
        [
            [m[0] - u[0] - v[0], m[1] - u[1] - v[1]],
            [m[0] + u[0] - v[0], m[1] + u[1] - v[1]],
            [m[0] + u[0] + v[0], m[1] + u[1] + v[1]],
            [m[0] - u[0] + v[0], m[1] - u[1] + v[1]],
        ]
    }
}

/// Wraps an undirected axis orientation into `[0, π)`.
pub fn axis_angle<T: Scalar>(a: T) -> T {
    let pi = T::PI();
    let mut r = a % pi;
    if r < T::zero() {
        r += pi;
    }
    if r >= pi {
        r -= pi;
    }
    r
}

/// Minimal-area enclosing rectangle of a convex polygon. One side of the
/// optimum is collinear with a hull edge, so every edge direction is tried.
pub fn min_area_rect<T: Scalar>(hull: &[P2<T>]) -> Option<RotatedRect<T>> {
    if hull.is_empty() {
        return None;
    }
    if hull.len() == 1 {
        return Some(RotatedRect {
            center: hull[0],
            half_len: T::zero(),
            half_width: T::zero(),
            angle: T::zero(),
        });
    }
    let n = hull.len();
    let mut best: Option<(T, RotatedRect<T>)> = None;
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == T::zero() {
            continue;
        }
        let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let v = [-u[1], u[0]];
        let (mut umin, mut umax, mut vmin, mut vmax) = (
            T::infinity(),
            T::neg_infinity(),
            T::infinity(),
            T::neg_infinity(),
        );
        for p in hull {
            let d = [p[0] - a[0], p[1] - a[1]];
            let pu = d[0] * u[0] + d[1] * u[1];
            let pv = d[0] * v[0] + d[1] * v[1];
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_some_and(|(b, _)| area >= *b) {
            continue;
        }
        let two = T::c(2.0);
        let cu = (umin + umax) / two;
        let cv = (vmin + vmax) / two;
        let center = [a[0] + cu * u[0] + cv * v[0], a[1] + cu * u[1] + cv * v[1]];
        let (hu, hv) = ((umax - umin) / two, (vmax - vmin) / two);
        let base = u[1].atan2(u[0]);
        let rect = if hu >= hv {
            RotatedRect {
                center,
                half_len: hu,
                half_width: hv,
                angle: axis_angle(base),
            }
        } else {
            RotatedRect {
                center,
                half_len: hv,
                half_width: hu,
                angle: axis_angle(base + T::FRAC_PI_2()),
            }
        };
        best = Some((area, rect));
    }
    best.map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_hull_area_centroid() {
        let pts = [
            [0.0, 0.0],
            [2.0, 0.0],
            [2.0, 2.0],
            [0.0, 2.0],
            [1.0, 1.0],
            [1.0, 0.0],
        ];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert_eq!(polygon_area(&h), 4.0);
        assert_eq!(polygon_centroid(&h), [1.0, 1.0]);
    }

    #[test]
    fn rotated_rectangle_recovered() {
        let rect = RotatedRect {
            center: [5.0, -3.0],
            half_len: 10.0,
            half_width: 5.0,
            angle: 0.3f64,
        };
        let h = convex_hull(&rect.corners());
        let r = min_area_rect(&h).unwrap();
        assert!((r.area() - 200.0).abs() < 1e-9);
        assert!((r.angle - 0.3).abs() < 1e-12);
        assert!((r.center[0] - 5.0).abs() < 1e-9 && (r.center[1] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn axis_angle_wraps() {
        let pi = std::f64::consts::PI;
        assert!((axis_angle(-0.1) - (pi - 0.1)).abs() < 1e-12);
        assert!((axis_angle(pi + 0.2) - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hull_contains_all_points(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..60)) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let h = convex_hull(&pts);
            prop_assert!(polygon_area(&h) >= 0.0);
            for p in &pts {
                prop_assert!(convex_contains(&h, *p, 1e-9));
            }
            if h.len() >= 3 {
                let r = min_area_rect(&h).unwrap();
                prop_assert!(r.area() + 1e-9 >= polygon_area(&h));
                prop_assert!(r.half_len >= r.half_width);
            }
        }
    }
}
