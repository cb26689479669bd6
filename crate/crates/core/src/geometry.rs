//! Pinhole projection with Brown-Conrady distortion, its inverse mapping
//! from pixels to board coordinates, and pose/homography algebra.
//!
//! The camera model is the standard 4-parameter pinhole (`fx`, `fy`, `x0`,
//! `y0`) with radial (`k1`, `k2`) and tangential (`p1`, `p2`) distortion
//! applied in normalized image coordinates. Projection is the composition
//!
//! ```text
//! (xn, yn) = (px/pz, py/pz)
//! (xd, yd) = distort(xn, yn)
//! (x,  y ) = (fx*xd + x0, fy*yd + y0)
//! ```
//!
//! Undistortion is a fixed-point iteration; its derivatives are obtained
//! analytically through the inverse function theorem rather than by
//! differentiating the iteration.

use nalgebra::{Matrix2, Matrix3, Vector3};
use thiserror::Error;

/// Fixed-point undistortion stops when the step is below this tolerance.
pub const UNDISTORT_TOL: f64 = 1e-12;
/// Iteration cap for the fixed-point undistortion.
pub const UNDISTORT_MAX_ITER: usize = 100;
/// Homographies with an estimated condition number above this are rejected.
pub const HOMOGRAPHY_COND_MAX: f64 = 1e12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {z}")]
    NonPositiveDepth { z: f64 },
    #[error("undistortion did not converge: last iterate ({x}, {y}), residual {residual:.3e}")]
    UndistortDiverged { x: f64, y: f64, residual: f64 },
    #[error("distortion Jacobian is singular at ({x}, {y})")]
    SingularDistortionJacobian { x: f64, y: f64 },
    #[error("board homography is near singular (condition estimate {cond:.3e})")]
    SingularHomography { cond: f64 },
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("projection differential vanishes at (u, v) = ({u}, {v})")]
    DegenerateDifferential { u: f64, v: f64 },
}

/// Camera matrix entries plus Brown-Conrady distortion coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub x0: f64,
    pub y0: f64,
    /// Radial distortion coefficients.
    pub k1: f64,
    pub k2: f64,
    /// Tangential distortion coefficients.
    pub p1: f64,
    pub p2: f64,
}

impl CameraIntrinsics {
    /// A distortion-free camera with the given focal lengths and principal point.
    pub fn pinhole(fx: f64, fy: f64, x0: f64, y0: f64) -> Self {
        CameraIntrinsics {
            fx,
            fy,
            x0,
            y0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
        }
    }

    pub fn with_distortion(mut self, k1: f64, k2: f64, p1: f64, p2: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self.p1 = p1;
        self.p2 = p2;
        self
    }

    pub fn is_valid(&self) -> bool {
        let all_finite = [
            self.fx, self.fy, self.x0, self.y0, self.k1, self.k2, self.p1, self.p2,
        ]
        .iter()
        .all(|v| v.is_finite());
        all_finite && self.fx > 0.0 && self.fy > 0.0
    }

    pub fn camera_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.x0, 0.0, self.fy, self.y0, 0.0, 0.0, 1.0)
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    /// Projects a camera-frame point to pixel coordinates (normalize,
    /// distort, convert to pixels).
    pub fn project(&self, p: &Vector3<f64>) -> Result<PixelPoint, GeometryError> {
        let gi = kernel::Intr::from_intrinsics(self);
        let (x, y) = kernel::project(&gi, [p.x, p.y, p.z])?;
        Ok(PixelPoint { x, y })
    }

    /// Applies the Brown-Conrady distortion model to a normalized point.
    pub fn distort(&self, n: NormalizedPoint) -> NormalizedPoint {
        let gi = kernel::Intr::from_intrinsics(self);
        let (x, y) = kernel::distort(&gi, n.xn, n.yn);
        NormalizedPoint { xn: x, yn: y }
    }

    /// Inverts the distortion model by fixed-point iteration: divide out the
    /// radial factor, subtract the tangential term, starting at the distorted
    /// point.
    pub fn undistort(&self, nd: NormalizedPoint) -> Result<NormalizedPoint, GeometryError> {
        let gi = kernel::Intr::from_intrinsics(self);
        let (x, y) = kernel::undistort_f64(&gi, nd.xn, nd.yn)?;
        Ok(NormalizedPoint { xn: x, yn: y })
    }

    /// Jacobian of [`CameraIntrinsics::undistort`], computed as the inverse of
    /// the analytic distortion Jacobian at the undistorted point.
    pub fn undistort_jacobian(&self, nd: NormalizedPoint) -> Result<Matrix2<f64>, GeometryError> {
        let gi = kernel::Intr::from_intrinsics(self);
        let (x, y) = kernel::undistort_f64(&gi, nd.xn, nd.yn)?;
        let j = kernel::distort_jacobian(&gi, x, y);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            return Err(GeometryError::SingularDistortionJacobian { x, y });
        }
        let inv = 1.0 / det;
        Ok(Matrix2::new(
            j[1][1] * inv,
            -j[0][1] * inv,
            -j[1][0] * inv,
            j[0][0] * inv,
        ))
    }

    /// Inverts the pixel conversion (the affine part of the projection).
    pub fn normalize_pixel(&self, px: PixelPoint) -> NormalizedPoint {
        NormalizedPoint {
            xn: (px.x - self.x0) / self.fx,
            yn: (px.y - self.y0) / self.fy,
        }
    }
}

/// Point on the z = 1 normalized image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedPoint {
    pub xn: f64,
    pub yn: f64,
}

/// Continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PixelPoint { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Board pose: unit quaternion (w, x, y, z order) plus translation.
///
/// The quaternion is stored as a free 4-vector and normalized whenever a
/// rotation matrix is derived from it, so optimizers can treat the four
/// components as unconstrained parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoardPose {
    pub q: [f64; 4],
    pub t: Vector3<f64>,
}

impl BoardPose {
    /// Panics if the quaternion has zero norm.
    pub fn new(q: [f64; 4], t: Vector3<f64>) -> Self {
        assert!(
            q.iter().map(|c| c * c).sum::<f64>() > 0.0,
            "BoardPose requires a non-zero quaternion"
        );
        BoardPose { q, t }
    }

    pub fn identity_at(t: Vector3<f64>) -> Self {
        BoardPose {
            q: [1.0, 0.0, 0.0, 0.0],
            t,
        }
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        BoardPose {
            q: quat_from_rotation(r),
            t,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(self.q).expect("BoardPose quaternion must be non-zero")
    }

    /// 3D position of board point (u, v): `[r1 r2 t] * (u, v, 1)`.
    pub fn board_point(&self, u: f64, v: f64) -> Vector3<f64> {
        let r = self.rotation();
        r.column(0) * u + r.column(1) * v + self.t
    }

    /// Homography `H = [r1 r2 t]` from board coordinates to the normalized
    /// image plane. Fails when H is near singular (board seen edge-on
    /// through the projection center).
    pub fn homography(&self) -> Result<Matrix3<f64>, GeometryError> {
        let r = self.rotation();
        let h = Matrix3::from_columns(&[r.column(0).into(), r.column(1).into(), self.t]);
        check_homography_condition(&h)?;
        Ok(h)
    }
}

fn check_homography_condition(h: &Matrix3<f64>) -> Result<(), GeometryError> {
    let det = h.determinant();
    if det.abs() < f64::MIN_POSITIVE {
        return Err(GeometryError::SingularHomography {
            cond: f64::INFINITY,
        });
    }
    let inv = adjugate3(h) / det;
    let cond = norm_inf3(h) * norm_inf3(&inv);
    if !cond.is_finite() || cond > HOMOGRAPHY_COND_MAX {
        return Err(GeometryError::SingularHomography { cond });
    }
    Ok(())
}

fn adjugate3(h: &Matrix3<f64>) -> Matrix3<f64> {
    let m = [
        [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
        [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
        [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
    ];
    let a = kernel::adjugate3(&m);
    Matrix3::new(
        a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
    )
}

fn norm_inf3(m: &Matrix3<f64>) -> f64 {
    (0..3)
        .map(|r| (0..3).map(|c| m[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Rotation matrix of a (not necessarily unit) quaternion in (w, x, y, z)
/// order. The quaternion is normalized internally.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>, GeometryError> {
    let n2: f64 = q.iter().map(|c| c * c).sum();
    if n2 <= 0.0 || !n2.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    let r = kernel::quat_rotation(&[q[0], q[1], q[2], q[3]]);
    Ok(Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    ))
}

/// Quaternion (w, x, y, z) of a proper rotation matrix (Shepperd's method).
pub fn quat_from_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = (q.iter().map(|c| c * c).sum::<f64>()).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Maps a pixel to board coordinates: normalize, undistort, invert the
/// board homography. This is the inverse of `project(board_point(u, v))`.
pub fn pixel_to_board(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    px: PixelPoint,
) -> Result<(f64, f64), GeometryError> {
    let h = pose.homography()?;
    let n = intr.normalize_pixel(px);
    let un = intr.undistort(n)?;
    let w = adjugate3(&h) * Vector3::new(un.xn, un.yn, 1.0);
    Ok((w.x / w.z, w.y / w.z))
}

/// Generic kernels shared by the f64 API and the dual-number render path.
pub(crate) mod kernel {
    use super::GeometryError;
    use crate::dual::{Dual, Real};

    /// Intrinsics with scalar type `R` so derivative seeds can flow through.
    #[derive(Clone, Copy, Debug)]
    pub struct Intr<R> {
        pub fx: R,
        pub fy: R,
        pub x0: R,
        pub y0: R,
        pub k1: R,
        pub k2: R,
        pub p1: R,
        pub p2: R,
    }

    impl Intr<f64> {
        pub fn from_intrinsics(c: &super::CameraIntrinsics) -> Self {
            Intr {
                fx: c.fx,
                fy: c.fy,
                x0: c.x0,
                y0: c.y0,
                k1: c.k1,
                k2: c.k2,
                p1: c.p1,
                p2: c.p2,
            }
        }
    }

    impl<R: Real> Intr<R> {
        pub fn values(&self) -> Intr<f64> {
            Intr {
                fx: self.fx.value(),
                fy: self.fy.value(),
                x0: self.x0.value(),
                y0: self.y0.value(),
                k1: self.k1.value(),
                k2: self.k2.value(),
                p1: self.p1.value(),
                p2: self.p2.value(),
            }
        }
    }

    /// Brown-Conrady distortion of a normalized point.
    #[inline]
    pub fn distort<R: Real>(i: &Intr<R>, xn: R, yn: R) -> (R, R) {
        let r2 = xn * xn + yn * yn;
        let radial = i.k1 * r2 + i.k2 * r2 * r2 + 1.0;
        let xy = xn * yn;
        let xd = xn * radial + i.p1 * xy * 2.0 + i.p2 * (r2 + xn * xn * 2.0);
        let yd = yn * radial + i.p2 * xy * 2.0 + i.p1 * (r2 + yn * yn * 2.0);
        (xd, yd)
    }

    /// Analytic 2x2 Jacobian of `distort` with respect to (xn, yn).
    #[inline]
    pub fn distort_jacobian<R: Real>(i: &Intr<R>, xn: R, yn: R) -> [[R; 2]; 2] {
        let r2 = xn * xn + yn * yn;
        let radial = i.k1 * r2 + i.k2 * r2 * r2 + 1.0;
        // d(radial)/d(r^2) = k1 + 2 k2 r^2
        let dr = i.k1 + i.k2 * r2 * 2.0;
        let xy = xn * yn;
        let dxdx = radial + dr * xn * xn * 2.0 + i.p1 * yn * 2.0 + i.p2 * xn * 6.0;
        let dxdy = dr * xy * 2.0 + i.p1 * xn * 2.0 + i.p2 * yn * 2.0;
        let dydy = radial + dr * yn * yn * 2.0 + i.p2 * xn * 2.0 + i.p1 * yn * 6.0;
        [[dxdx, dxdy], [dxdy, dydy]]
    }

    /// Normalize, distort, convert to pixels.
    #[inline]
    pub fn project<R: Real>(i: &Intr<R>, p: [R; 3]) -> Result<(R, R), GeometryError> {
        let z = p[2].value();
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { z });
        }
        let xn = p[0] / p[2];
        let yn = p[1] / p[2];
        let (xd, yd) = distort(i, xn, yn);
        Ok((i.fx * xd + i.x0, i.fy * yd + i.y0))
    }

    /// 2x3 Jacobian of the projection with respect to the 3D point.
    pub fn project_point_jacobian<R: Real>(i: &Intr<R>, p: [R; 3]) -> [[R; 3]; 2] {
        let inv_z = R::constant(1.0) / p[2];
        let xn = p[0] * inv_z;
        let yn = p[1] * inv_z;
        let d = distort_jacobian(i, xn, yn);
        // rows of d(xn,yn)/dp
        let nx = [inv_z, R::constant(0.0), -xn * inv_z];
        let ny = [R::constant(0.0), inv_z, -yn * inv_z];
        let mut out = [[R::constant(0.0); 3]; 2];
        for c in 0..3 {
            out[0][c] = i.fx * (d[0][0] * nx[c] + d[0][1] * ny[c]);
            out[1][c] = i.fy * (d[1][0] * nx[c] + d[1][1] * ny[c]);
        }
        out
    }

    /// Rotation matrix of a quaternion (w, x, y, z), normalized internally.
    pub fn quat_rotation<R: Real>(q: &[R; 4]) -> [[R; 3]; 3] {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let w = q[0] / n;
        let x = q[1] / n;
        let y = q[2] / n;
        let z = q[3] / n;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let one = R::constant(1.0);
        [
            [one - (yy + zz) * 2.0, (xy - wz) * 2.0, (xz + wy) * 2.0],
            [(xy + wz) * 2.0, one - (xx + zz) * 2.0, (yz - wx) * 2.0],
            [(xz - wy) * 2.0, (yz + wx) * 2.0, one - (xx + yy) * 2.0],
        ]
    }

    #[inline]
    pub fn board_point<R: Real>(rot: &[[R; 3]; 3], t: &[R; 3], u: R, v: R) -> [R; 3] {
        [
            rot[0][0] * u + rot[0][1] * v + t[0],
            rot[1][0] * u + rot[1][1] * v + t[1],
            rot[2][0] * u + rot[2][1] * v + t[2],
        ]
    }

    /// Columns `[r1 r2 t]` of the board-to-normalized-plane homography.
    #[inline]
    pub fn homography<R: Real>(rot: &[[R; 3]; 3], t: &[R; 3]) -> [[R; 3]; 3] {
        [
            [rot[0][0], rot[0][1], t[0]],
            [rot[1][0], rot[1][1], t[1]],
            [rot[2][0], rot[2][1], t[2]],
        ]
    }

    /// Classical adjugate of a 3x3 matrix; `adj(H) = det(H) * H^-1`, so the
    /// determinant cancels in homogeneous coordinates.
    pub fn adjugate3<R: Real>(m: &[[R; 3]; 3]) -> [[R; 3]; 3] {
        let c = |r1: usize, c1: usize, r2: usize, c2: usize| {
            m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
        };
        [
            [c(1, 1, 2, 2), c(0, 2, 2, 1), c(0, 1, 1, 2)],
            [c(1, 2, 2, 0), c(0, 0, 2, 2), c(0, 2, 1, 0)],
            [c(1, 0, 2, 1), c(0, 1, 2, 0), c(0, 0, 1, 1)],
        ]
    }

    #[inline]
    pub fn det3<R: Real>(m: &[[R; 3]; 3]) -> R {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[inline]
    pub fn mat3_mul_vec3<R: Real>(m: &[[R; 3]; 3], v: &[R; 3]) -> [R; 3] {
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Fixed-point undistortion on plain values: divide by the radial factor,
    /// subtract the tangential term, initialized at the distorted point.
    pub fn undistort_f64(i: &Intr<f64>, xd: f64, yd: f64) -> Result<(f64, f64), GeometryError> {
        if i.k1 == 0.0 && i.k2 == 0.0 && i.p1 == 0.0 && i.p2 == 0.0 {
            return Ok((xd, yd));
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..super::UNDISTORT_MAX_ITER {
            let r2 = x * x + y * y;
            let radial = 1.0 + i.k1 * r2 + i.k2 * r2 * r2;
            let tx = 2.0 * i.p1 * x * y + i.p2 * (r2 + 2.0 * x * x);
            let ty = 2.0 * i.p2 * x * y + i.p1 * (r2 + 2.0 * y * y);
            let xn = (xd - tx) / radial;
            let yn = (yd - ty) / radial;
            let step = (xn - x).abs().max((yn - y).abs());
            x = xn;
            y = yn;
            if step < super::UNDISTORT_TOL {
                return Ok((x, y));
            }
        }
        let (rx, ry) = distort(i, x, y);
        let residual = (rx - xd).abs().max((ry - yd).abs());
        Err(GeometryError::UndistortDiverged { x, y, residual })
    }

    /// Scalars that know how to undistort themselves; `f64` iterates, dual
    /// numbers reuse the converged value and propagate derivatives through
    /// the inverse function theorem.
    pub trait RenderScalar: Real {
        fn undistort(i: &Intr<Self>, xd: Self, yd: Self) -> Result<(Self, Self), GeometryError>;
    }

    impl RenderScalar for f64 {
        fn undistort(i: &Intr<f64>, xd: f64, yd: f64) -> Result<(f64, f64), GeometryError> {
            undistort_f64(i, xd, yd)
        }
    }

    impl<const N: usize> RenderScalar for Dual<N> {
        fn undistort(
            i: &Intr<Dual<N>>,
            xd: Dual<N>,
            yd: Dual<N>,
        ) -> Result<(Dual<N>, Dual<N>), GeometryError> {
            let iv = i.values();
            let (x, y) = undistort_f64(&iv, xd.re, yd.re)?;
            // Implicit differentiation of distort(x; d) = nd:
            //   J * dx = d(nd) - d(distort)|_{x fixed}
            let j = distort_jacobian(&iv, x, y);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-14 {
                return Err(GeometryError::SingularDistortionJacobian { x, y });
            }
            let (fx_d, fy_d) = distort(i, Dual::constant(x), Dual::constant(y));
            let inv = 1.0 / det;
            let mut ex = [0.0; N];
            let mut ey = [0.0; N];
            for k in 0..N {
                let bx = xd.eps[k] - fx_d.eps[k];
                let by = yd.eps[k] - fy_d.eps[k];
                ex[k] = (j[1][1] * bx - j[0][1] * by) * inv;
                ey[k] = (j[0][0] * by - j[1][0] * bx) * inv;
            }
            Ok((Dual::new(x, ex), Dual::new(y, ey)))
        }
    }
}
