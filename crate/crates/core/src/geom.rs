//! Finite projective camera: pose parameters, projection matrices and the
//! rotation convention shared by every stage.
//!
//! Pixel coordinates are `(x, y) = (column, row)` with the origin at the
//! center of the top-left pixel.
//!
//! Rotations compose as `R = Rz(kappa) * Ry(phi) * Rx(omega)`, each factor a
//! right-handed, counterclockwise-positive rotation about a fixed world axis.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat3<T> = [[T; 3]; 3];
pub type Vec3<T> = [T; 3];

/// The eleven parameters of a finite projective camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T> {
    pub alpha_x: T,
    pub alpha_y: T,
    pub skew: T,
    pub p_x: T,
    pub p_y: T,
    pub x0: T,
    pub y0: T,
    pub z0: T,
    pub omega: T,
    pub phi: T,
    pub kappa: T,
}

/// Parameter names in storage order; also the keys of the text record.
pub const POSE_KEYS: [&str; 11] = [
    "alpha_x", "alpha_y", "skew", "p_x", "p_y", "x0", "y0", "z0", "omega", "phi", "kappa",
];

impl<T: Scalar> CameraPose<T> {
    pub fn to_array(&self) -> [T; 11] {
        [
            self.alpha_x,
            self.alpha_y,
            self.skew,
            self.p_x,
            self.p_y,
            self.x0,
            self.y0,
            self.z0,
            self.omega,
            self.phi,
            self.kappa,
        ]
    }

    pub fn from_array(a: [T; 11]) -> Self {
        CameraPose {
            alpha_x: a[0],
            alpha_y: a[1],
            skew: a[2],
            p_x: a[3],
            p_y: a[4],
            x0: a[5],
            y0: a[6],
            z0: a[7],
            omega: a[8],
            phi: a[9],
            kappa: a[10],
        }
    }

    /// External parameters `(x0, y0, z0, omega, phi, kappa)`.
    pub fn external(&self) -> [T; 6] {
        [self.x0, self.y0, self.z0, self.omega, self.phi, self.kappa]
    }

    pub fn with_external(&self, e: [T; 6]) -> Self {
        CameraPose {
            x0: e[0],
            y0: e[1],
            z0: e[2],
            omega: e[3],
            phi: e[4],
            kappa: e[5],
            ..*self
        }
    }

    pub fn center(&self) -> Vec3<T> {
        [self.x0, self.y0, self.z0]
    }

    pub fn calibration(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        [
            [self.alpha_x, self.skew, self.p_x],
            [z, self.alpha_y, self.p_y],
            [z, z, o],
        ]
    }

    pub fn rotation(&self) -> Mat3<T> {
        rotation_from_angles(self.omega, self.phi, self.kappa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite parameter".into()));
        }
        if self.alpha_x <= T::zero() || self.alpha_y <= T::zero() {
            return Err(Error::InvalidPose("scale factors must be positive".into()));
        }
        Ok(())
    }

    pub fn camera_matrix(&self) -> ProjectionMatrix<T> {
        build_camera_matrix(self)
    }

    /// Returns a copy whose angles are shifted by multiples of 2π to lie
    /// within π of `reference`'s angles.
    pub fn unwrap_angles_near(&self, reference: &Self) -> Self {
        let two_pi = T::PI() + T::PI();
        let wrap = |a: T, r: T| a - two_pi * ((a - r) / two_pi).round();
        CameraPose {
            omega: wrap(self.omega, reference.omega),
            phi: wrap(self.phi, reference.phi),
            kappa: wrap(self.kappa, reference.kappa),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        CameraPose::from_array(self.to_array().map(|v| U::c(v.f64())))
    }
}

impl<T: Scalar> fmt::Display for CameraPose<T> {
    /// Flat `name = value` record, one parameter per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in POSE_KEYS.iter().zip(self.to_array()) {
            writeln!(f, "{k} = {}", v.f64())?;
        }
        Ok(())
    }
}

impl<T: Scalar> std::str::FromStr for CameraPose<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let map = crate::io::parse_key_values(s)?;
        let mut a = [T::zero(); 11];
        for (slot, key) in a.iter_mut().zip(POSE_KEYS) {
            let (line, raw) = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("pose record is missing `{key}`")))?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line: *line,
                msg: format!("`{key}` is not a number: {raw}"),
            })?;
            *slot = T::c(v);
        }
        let pose = CameraPose::from_array(a);
        pose.validate()?;
        Ok(pose)
    }
}

/// A 3×4 finite projective camera matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix<T>(pub [[T; 4]; 3]);

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn scaled(&self, s: T) -> Self {
        ProjectionMatrix(self.0.map(|r| r.map(|v| v * s)))
    }

    pub fn left_block(&self) -> Mat3<T> {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    /// Homogeneous image of a world point.
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        let row = |r: &[T; 4]| r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + r[3];
        [row(&m[0]), row(&m[1]), row(&m[2])]
    }

    /// Signed depth of a world point along the principal axis, up to the
    /// (positive) scale of the matrix when `det(M) > 0`.
    pub fn depth(&self, p: Vec3<T>) -> T {
        let w = self.apply(p)[2];
        if det3(&self.left_block()) < T::zero() {
            -w
        } else {
            w
        }
    }

    pub fn project(&self, p: Vec3<T>) -> Result<[T; 2]> {
        project_point(self, p)
    }
}

/// Image dimensions: `rows` (n_x) by `cols` (n_y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    pub rows: usize,
    pub cols: usize,
}

impl Frame {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "frame must be at least 1x1");
        Frame { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn det3<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse3<T: Scalar>(m: &Mat3<T>) -> Option<Mat3<T>> {
    let d = det3(m);
    if d == T::zero() || !d.is_finite() {
        return None;
    }
    let c =
        |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|r| r.map(|v| v / d)))
}

/// `R = Rz(kappa) * Ry(phi) * Rx(omega)`.
pub fn rotation_from_angles<T: Scalar>(omega: T, phi: T, kappa: T) -> Mat3<T> {
    let (so, co) = omega.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let (sk, ck) = kappa.sin_cos();
    [
        [ck * cp, ck * sp * so - sk * co, ck * sp * co + sk * so],
        [sk * cp, sk * sp * so + ck * co, sk * sp * co - ck * so],
        [-sp, cp * so, cp * co],
    ]
}

/// Inverse of [`rotation_from_angles`], returning `(omega, phi, kappa)` with
/// `phi` in `[-π/2, π/2]`.
pub fn angles_from_rotation<T: Scalar>(r: &Mat3<T>) -> (T, T, T) {
    let phi = (-r[2][0]).atan2((r[2][1] * r[2][1] + r[2][2] * r[2][2]).sqrt());
    let omega = r[2][1].atan2(r[2][2]);
    let kappa = r[1][0].atan2(r[0][0]);
    (omega, phi, kappa)
}

/// `P = K R [I | -C]`.
pub fn build_camera_matrix<T: Scalar>(pose: &CameraPose<T>) -> ProjectionMatrix<T> {
    let m = mat_mul(&pose.calibration(), &pose.rotation());
    let c = pose.center();
    let t = mat_vec(&m, c);
    ProjectionMatrix([
        [m[0][0], m[0][1], m[0][2], -t[0]],
        [m[1][0], m[1][1], m[1][2], -t[1]],
        [m[2][0], m[2][1], m[2][2], -t[2]],
    ])
}

pub fn project_point<T: Scalar>(p: &ProjectionMatrix<T>, point: Vec3<T>) -> Result<[T; 2]> {
    let h = p.apply(point);
    if h[2].abs() < T::c(1e-12) {
        return Err(Error::DegenerateProjection);
    }
    Ok([h[0] / h[2], h[1] / h[2]])
}

/// RQ factorization of a 3×3 matrix with positive determinant into an upper
/// triangular `K` with positive diagonal and a proper rotation `R`.
fn rq3<T: Scalar>(m: &Mat3<T>) -> Option<(Mat3<T>, Mat3<T>)> {
    let dot = |a: &Vec3<T>, b: &Vec3<T>| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let norm = |a: &Vec3<T>| dot(a, a).sqrt();
    let eps = T::epsilon();

    let k33 = norm(&m[2]);
    if k33 <= eps {
        return None;
    }
    let r3 = m[2].map(|v| v / k33);

    let k23 = dot(&m[1], &r3);
    let u2 = [0, 1, 2].map(|i| m[1][i] - k23 * r3[i]);
    let k22 = norm(&u2);
    if k22 <= eps {
        return None;
    }
    let r2 = u2.map(|v| v / k22);

    let k13 = dot(&m[0], &r3);
    let k12 = dot(&m[0], &r2);
    let u1 = [0, 1, 2].map(|i| m[0][i] - k13 * r3[i] - k12 * r2[i]);
    let k11 = norm(&u1);
    if k11 <= eps {
        return None;
    }
    let r1 = u1.map(|v| v / k11);

    let z = T::zero();
    Some(([[k11, k12, k13], [z, k22, k23], [z, z, k33]], [r1, r2, r3]))
}

/// Recovers the eleven pose parameters from a projection matrix, up to its
/// projective scale and sign.
pub fn decompose_projection<T: Scalar>(p: &ProjectionMatrix<T>) -> Result<CameraPose<T>> {
    let mut p = *p;
    let mut m = p.left_block();
    let d = det3(&m);
    let scale = m.iter().flatten().fold(T::zero(), |a, v| a.max(v.abs()));
    if !d.is_finite() || scale == T::zero() || d.abs() <= T::c(1e-14) * scale * scale * scale {
        return Err(Error::SingularCamera);
    }
    if d < T::zero() {
        p = p.scaled(-T::one());
        m = p.left_block();
    }
    let (k, r) = rq3(&m).ok_or(Error::SingularCamera)?;
    let m_inv = inverse3(&m).ok_or(Error::SingularCamera)?;
    let p4 = [p.0[0][3], p.0[1][3], p.0[2][3]];
    let c = mat_vec(&m_inv, p4).map(|v| -v);
    let k = k.map(|row| row.map(|v| v / k[2][2]));
    let (omega, phi, kappa) = angles_from_rotation(&r);
    Ok(CameraPose {
        alpha_x: k[0][0],
        alpha_y: k[1][1],
        skew: k[0][1],
        p_x: k[0][2],
        p_y: k[1][2],
        x0: c[0],
        y0: c[1],
        z0: c[2],
        omega,
        phi,
        kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_pose() -> CameraPose<f64> {
        CameraPose {
            alpha_x: 1.0,
            alpha_y: 1.0,
            skew: 0.0,
            p_x: 0.0,
            p_y: 0.0,
            x0: 0.0,
            y0: 0.0,
            z0: 0.0,
            omega: 0.0,
            phi: 0.0,
            kappa: 0.0,
        }
    }

    fn sample_pose() -> CameraPose<f64> {
        CameraPose {
            alpha_x: 2000.0,
            alpha_y: 1980.0,
            skew: 1.5,
            p_x: 512.0,
            p_y: 384.0,
            x0: 10.0,
            y0: -20.0,
            z0: 300.0,
            omega: 3.1,
            phi: -0.05,
            kappa: 0.7,
        }
    }

    #[test]
    fn rotation_identity_and_axis() {
        let r = rotation_from_angles(0.0, 0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let r = rotation_from_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let x = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((x[0]).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15 && x[2].abs() < 1e-15);
    }

    #[test]
    fn rotation_orthonormal() {
        let r = rotation_from_angles(0.1f64, -0.2, 0.3);
        let rtr = mat_mul(&transpose(&r), &r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - e).abs() < 1e-12);
            }
        }
        assert!((det3(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_camera() {
        let p = build_camera_matrix(&identity_pose());
        assert_eq!(
            p.0,
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0]
            ]
        );
        let px = project_point(&p, [2.0, 4.0, 2.0]).unwrap();
        assert_eq!(px, [1.0, 2.0]);
    }

    #[test]
    fn pure_translation_depth() {
        let pose = CameraPose {
            z0: -10.0,
            ..identity_pose()
        };
        let h = build_camera_matrix(&pose).apply([0.0, 0.0, 0.0]);
        assert_eq!(h[2], 10.0);
    }

    #[test]
    fn projection_matches_explicit_product() {
        let pose = sample_pose();
        let x = [35.0, 12.0, 8.0];
        // K * (R * (X - C)) computed step by step.
        let r = pose.rotation();
        let d = [x[0] - pose.x0, x[1] - pose.y0, x[2] - pose.z0];
        let cam = mat_vec(&r, d);
        let img = mat_vec(&pose.calibration(), cam);
        let expect = [img[0] / img[2], img[1] / img[2]];
        let got = project_point(&build_camera_matrix(&pose), x).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-9 && (got[1] - expect[1]).abs() < 1e-9);
    }

    #[test]
    fn degenerate_projection() {
        let p = build_camera_matrix(&identity_pose());
        assert!(matches!(
            project_point(&p, [1.0, 1.0, 0.0]),
            Err(Error::DegenerateProjection)
        ));
    }

    #[test]
    fn decompose_canonical_and_scaled() {
        let p = build_camera_matrix(&identity_pose());
        let pose = decompose_projection(&p).unwrap();
        for (a, b) in pose.to_array().iter().zip(identity_pose().to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = build_camera_matrix(&sample_pose());
        let a = decompose_projection(&p).unwrap();
        let b = decompose_projection(&p.scaled(-3.0)).unwrap();
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn decompose_singular() {
        let p = ProjectionMatrix([
            [1.0, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]);
        assert!(matches!(
            decompose_projection(&p),
            Err(Error::SingularCamera)
        ));
    }

    #[test]
    fn pose_text_round_trip() {
        let pose = sample_pose();
        let text = pose.to_string();
        assert!(text.lines().next().unwrap().starts_with("alpha_x = "));
        let back: CameraPose<f64> = text.parse().unwrap();
        assert_eq!(back, pose);
    }

    #[test]
    fn f32_pose_builds() {
        let pose: CameraPose<f32> = sample_pose().cast();
        let px = project_point(&pose.camera_matrix(), [35.0, 12.0, 8.0]).unwrap();
        let px64 = project_point(&sample_pose().camera_matrix(), [35.0, 12.0, 8.0]).unwrap();
        assert!((px[0] as f64 - px64[0]).abs() < 1e-2);
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
        d.min(2.0 * std::f64::consts::PI - d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rotations_are_orthonormal(o in -10.0f64..10.0, p in -10.0f64..10.0, k in -10.0f64..10.0) {
            let r = rotation_from_angles(o, p, k);
            let rtr = mat_mul(&transpose(&r), &r);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[i][j] - e).abs() < 1e-12);
                }
            }
            prop_assert!((det3(&r) - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn decompose_inverts_build(
            ax in 100.0f64..5000.0, ay_ratio in 0.8f64..1.2, s in -5.0f64..5.0,
            px in 0.0f64..2000.0, py in 0.0f64..2000.0,
            x0 in -500.0f64..500.0, y0 in -500.0f64..500.0, z0 in -500.0f64..500.0,
            omega in -3.1f64..3.1, phi in -1.55f64..1.55, kappa in -3.1f64..3.1,
        ) {
            let pose = CameraPose { alpha_x: ax, alpha_y: ax * ay_ratio, skew: s, p_x: px, p_y: py,
                x0, y0, z0, omega, phi, kappa };
            let back = decompose_projection(&build_camera_matrix(&pose)).unwrap();
            let a = pose.to_array();
            let b = back.to_array();
            for i in 0..8 {
                prop_assert!((a[i] - b[i]).abs() <= 1e-9 * a[i].abs().max(1.0), "param {} {} vs {}", i, a[i], b[i]);
            }
            for i in 8..11 {
                prop_assert!(angle_diff(a[i], b[i]) < 1e-9);
            }
        }

        #[test]
        fn projection_scale_invariant(lambda in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
                                      x in -50.0f64..50.0, y in -50.0f64..50.0, z in 0.0f64..30.0) {
            let p = build_camera_matrix(&sample_pose());
            let a = project_point(&p, [x, y, z]).unwrap();
            let b = project_point(&p.scaled(lambda), [x, y, z]).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-7 && (a[1] - b[1]).abs() < 1e-7);
        }
    }
}
