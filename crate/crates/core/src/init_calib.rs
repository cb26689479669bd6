//! Closed-form initial calibration from planar corner correspondences:
//! normalized DLT homographies, Zhang-style intrinsics from the image of
//! the absolute conic (zero skew), pose extraction from homographies, and
//! nonlinear corner-reprojection refinement.
//!
//! Corner detection itself is out of scope; observations are ingested from
//! files or from the synthetic generator's ground truth.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::dual::{Dual, Real};
use crate::geometry::kernel::{self, Intr};
use crate::geometry::{BoardPose, CameraIntrinsics, GeometryError};
use crate::solver::lm::{run_lm, DenseModel, LmOptions, SolveError, SolveReport};
use crate::solver::DistortionMask;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("need at least {need} corner correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("interest point {point} appears twice in image {image}")]
    DuplicatePoint { image: usize, point: usize },
    #[error("need at least {need} views, got {got}")]
    TooFewViews { need: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("recovered conic is not positive definite (coplanar board orientations?)")]
    NotPositiveDefinite,
    #[error("board pose would lie behind the camera")]
    BehindCamera,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("corner refinement failed: {0}")]
    Refine(#[from] SolveError),
}

/// One detected interest point: its index, board-plane coordinates, and
/// observed pixel position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerPoint {
    pub point_index: usize,
    pub board_uv: (f64, f64),
    pub pixel: (f64, f64),
}

/// All corner observations of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageCorners {
    pub image_id: usize,
    pub points: Vec<CornerPoint>,
}

impl ImageCorners {
    pub fn validate(&self) -> Result<(), InitError> {
        if self.points.len() < 4 {
            return Err(InitError::TooFewPoints {
                need: 4,
                got: self.points.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.points {
            if !seen.insert(p.point_index) {
                return Err(InitError::DuplicatePoint {
                    image: self.image_id,
                    point: p.point_index,
                });
            }
        }
        Ok(())
    }
}

/// Isotropic Hartley normalization: translate the centroid to the origin
/// and scale the mean distance to sqrt(2).
fn normalization(
    points: impl Iterator<Item = (f64, f64)> + Clone,
) -> Result<Matrix3<f64>, InitError> {
    let n = points.clone().count() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in points.clone() {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut dist = 0.0;
    for (x, y) in points {
        dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    }
    dist /= n;
    if dist < 1e-12 {
        return Err(InitError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Normalized DLT homography estimation from `((u, v), (x, y))`
/// correspondences. The result has unit Frobenius norm and `H[2,2] >= 0`.
pub fn estimate_homography(pairs: &[((f64, f64), (f64, f64))]) -> Result<Matrix3<f64>, InitError> {
    if pairs.len() < 4 {
        return Err(InitError::TooFewPoints {
            need: 4,
            got: pairs.len(),
        });
    }
    let t_src = normalization(pairs.iter().map(|p| p.0))?;
    let t_dst = normalization(pairs.iter().map(|p| p.1))?;
    // at least 9 rows (zero-padded) so the thin SVD carries the full right
    // singular basis, including the nullspace vector
    let mut a = DMatrix::zeros((2 * pairs.len()).max(9), 9);
    for (k, &((u, v), (x, y))) in pairs.iter().enumerate() {
        let s = t_src * Vector3::new(u, v, 1.0);
        let d = t_dst * Vector3::new(x, y, 1.0);
        let (u, v) = (s.x, s.y);
        let (x, y) = (d.x, d.y);
        let r = 2 * k;
        a[(r, 0)] = -u;
        a[(r, 1)] = -v;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = x * u;
        a[(r, 7)] = x * v;
        a[(r, 8)] = x;
        a[(r + 1, 3)] = -u;
        a[(r + 1, 4)] = -v;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = y * u;
        a[(r + 1, 7)] = y * v;
        a[(r + 1, 8)] = y;
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[7] <= 1e-12 * sv[0] {
        return Err(InitError::Degenerate(
            "rank-deficient design matrix (collinear points?)".into(),
        ));
    }
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let h = vt.row(8);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let mut h = t_dst
        .try_inverse()
        .ok_or_else(|| InitError::Degenerate("singular normalization".into()))?
        * hn
        * t_src;
    h /= h.norm();
    if h[(2, 2)] < 0.0 {
        h = -h;
    }
    Ok(h)
}

/// Closed-form zero-skew intrinsics from board-to-pixel homographies, via
/// the orthogonality constraints on the image of the absolute conic.
/// Distortion coefficients are initialized to zero.
pub fn zhang_intrinsics(homographies: &[Matrix3<f64>]) -> Result<CameraIntrinsics, InitError> {
    if homographies.len() < 2 {
        return Err(InitError::TooFewViews {
            need: 2,
            got: homographies.len(),
        });
    }
    // B = K^-T K^-1 with zero skew: unknowns (B11, B22, B13, B23, B33)
    let vrow = |h: &Matrix3<f64>, i: usize, j: usize| {
        let hi = h.column(i);
        let hj = h.column(j);
        [
            hi[0] * hj[0],
            hi[1] * hj[1],
            hi[0] * hj[2] + hi[2] * hj[0],
            hi[1] * hj[2] + hi[2] * hj[1],
            hi[2] * hj[2],
        ]
    };
    let mut a = DMatrix::zeros((2 * homographies.len()).max(5), 5);
    for (k, h) in homographies.iter().enumerate() {
        let v01 = vrow(h, 0, 1);
        let v00 = vrow(h, 0, 0);
        let v11 = vrow(h, 1, 1);
        for c in 0..5 {
            a[(2 * k, c)] = v01[c];
            a[(2 * k + 1, c)] = v00[c] - v11[c];
        }
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[3] <= 1e-10 * sv[0] {
        return Err(InitError::Degenerate(
            "conic constraints are rank deficient (coplanar board orientations?)".into(),
        ));
    }
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let b = vt.row(4);
    let (b11, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4]);
    if b11 == 0.0 || b22 == 0.0 {
        return Err(InitError::NotPositiveDefinite);
    }
    let x0 = -b13 / b11;
    let y0 = -b23 / b22;
    let lambda = b33 + x0 * b13 + y0 * b23;
    let fx2 = lambda / b11;
    let fy2 = lambda / b22;
    if !(fx2 > 0.0 && fy2 > 0.0 && fx2.is_finite() && fy2.is_finite()) {
        return Err(InitError::NotPositiveDefinite);
    }
    let intr = CameraIntrinsics::pinhole(fx2.sqrt(), fy2.sqrt(), x0, y0);
    if !intr.is_valid() {
        return Err(InitError::NotPositiveDefinite);
    }
    Ok(intr)
}

/// Extracts the board pose from a board-to-pixel homography `H ~ K [r1 r2 t]`,
/// re-orthogonalizing the rotation by nearest-rotation projection and fixing
/// the sign so the board sits in front of the camera.
pub fn pose_from_homography(
    intr: &CameraIntrinsics,
    h: &Matrix3<f64>,
) -> Result<BoardPose, InitError> {
    let kinv = Matrix3::new(
        1.0 / intr.fx,
        0.0,
        -intr.x0 / intr.fx,
        0.0,
        1.0 / intr.fy,
        -intr.y0 / intr.fy,
        0.0,
        0.0,
        1.0,
    );
    let m = kinv * h;
    let n1 = m.column(0).norm();
    if n1 < 1e-14 {
        return Err(InitError::Degenerate(
            "homography has vanishing first column".into(),
        ));
    }
    let lambda = 1.0 / n1;
    let mut r1: Vector3<f64> = m.column(0) * lambda;
    let mut r2: Vector3<f64> = m.column(1) * lambda;
    let mut t: Vector3<f64> = m.column(2) * lambda;
    if t.z < 0.0 {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    if t.z <= 0.0 {
        return Err(InitError::BehindCamera);
    }
    let r3 = r1.cross(&r2);
    let r0 = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = r0.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u_fixed = *u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * vt;
    }
    Ok(BoardPose::from_rotation(&r, t))
}

fn seeded_intr<const N: usize>(v: &DVector<f64>) -> Intr<Dual<N>> {
    Intr {
        fx: Dual::variable(v[0], 0),
        fy: Dual::variable(v[1], 1),
        x0: Dual::variable(v[2], 2),
        y0: Dual::variable(v[3], 3),
        k1: Dual::variable(v[4], 4),
        k2: Dual::variable(v[5], 5),
        p1: Dual::variable(v[6], 6),
        p2: Dual::variable(v[7], 7),
    }
}

fn plain_intr(v: &DVector<f64>) -> Intr<f64> {
    Intr {
        fx: v[0],
        fy: v[1],
        x0: v[2],
        y0: v[3],
        k1: v[4],
        k2: v[5],
        p1: v[6],
        p2: v[7],
    }
}

fn corner_count(corners: &[ImageCorners]) -> usize {
    corners.iter().map(|c| c.points.len()).sum()
}

/// Nonlinear minimization of the corner reprojection error over intrinsics
/// (subject to the distortion mask) and all board poses. This is both the
/// corner-based baseline calibration and the starting point for the
/// photometric refinement.
pub fn refine_corner_reprojection(
    intr0: &CameraIntrinsics,
    poses0: &[BoardPose],
    corners: &[ImageCorners],
    mask: DistortionMask,
    opts: &LmOptions,
) -> Result<(CameraIntrinsics, Vec<BoardPose>, SolveReport), SolveError> {
    assert_eq!(poses0.len(), corners.len());
    let n_images = poses0.len();
    let dim = 8 + 7 * n_images;
    let rows = 2 * corner_count(corners);

    let mut v0 = DVector::zeros(dim);
    for (k, val) in [
        intr0.fx, intr0.fy, intr0.x0, intr0.y0, intr0.k1, intr0.k2, intr0.p1, intr0.p2,
    ]
    .into_iter()
    .enumerate()
    {
        v0[k] = val;
    }
    for (i, pose) in poses0.iter().enumerate() {
        let o = 8 + 7 * i;
        v0[o] = pose.q[0];
        v0[o + 1] = pose.q[1];
        v0[o + 2] = pose.q[2];
        v0[o + 3] = pose.q[3];
        v0[o + 4] = pose.t.x;
        v0[o + 5] = pose.t.y;
        v0[o + 6] = pose.t.z;
    }

    let residual_fn = |v: &DVector<f64>| -> Result<DVector<f64>, SolveError> {
        let intr = plain_intr(v);
        let mut r = DVector::zeros(rows);
        let mut row = 0;
        for (i, img) in corners.iter().enumerate() {
            let o = 8 + 7 * i;
            let rot = kernel::quat_rotation(&[v[o], v[o + 1], v[o + 2], v[o + 3]]);
            let t = [v[o + 4], v[o + 5], v[o + 6]];
            for c in &img.points {
                let p = kernel::board_point(&rot, &t, c.board_uv.0, c.board_uv.1);
                let (x, y) = kernel::project(&intr, p)?;
                r[row] = x - c.pixel.0;
                r[row + 1] = y - c.pixel.1;
                row += 2;
            }
        }
        Ok(r)
    };

    let jacobian_fn = |v: &DVector<f64>| -> Result<DMatrix<f64>, SolveError> {
        let mut j = DMatrix::zeros(rows, dim);
        let mut row = 0;
        for (i, img) in corners.iter().enumerate() {
            let o = 8 + 7 * i;
            let intr = seeded_intr::<15>(v);
            let q = [
                Dual::<15>::variable(v[o], 8),
                Dual::variable(v[o + 1], 9),
                Dual::variable(v[o + 2], 10),
                Dual::variable(v[o + 3], 11),
            ];
            let t = [
                Dual::variable(v[o + 4], 12),
                Dual::variable(v[o + 5], 13),
                Dual::variable(v[o + 6], 14),
            ];
            let rot = kernel::quat_rotation(&q);
            for c in &img.points {
                let p = kernel::board_point(
                    &rot,
                    &t,
                    Dual::constant(c.board_uv.0),
                    Dual::constant(c.board_uv.1),
                );
                let (x, y) = kernel::project(&intr, p)?;
                for (out, d) in [(row, x), (row + 1, y)] {
                    for k in 0..8 {
                        j[(out, k)] = d.eps[k];
                    }
                    for k in 0..7 {
                        j[(out, o + k)] = d.eps[8 + k];
                    }
                }
                row += 2;
            }
        }
        Ok(j)
    };

    let mut model = DenseModel::new(
        residual_fn,
        jacobian_fn,
        dim,
        mask.frozen_indices().to_vec(),
    );
    let (v, report) = run_lm(&mut model, v0, opts)?;

    let intr = CameraIntrinsics {
        fx: v[0],
        fy: v[1],
        x0: v[2],
        y0: v[3],
        k1: v[4],
        k2: v[5],
        p1: v[6],
        p2: v[7],
    };
    let poses = (0..n_images)
        .map(|i| {
            let o = 8 + 7 * i;
            let q = [v[o], v[o + 1], v[o + 2], v[o + 3]];
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            BoardPose::new(
                [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
                Vector3::new(v[o + 4], v[o + 5], v[o + 6]),
            )
        })
        .collect();
    Ok((intr, poses, report))
}

/// Full corner-based initialization: per-image DLT homographies, Zhang
/// closed-form intrinsics, pose extraction, then corner-reprojection
/// refinement.
pub fn initial_calibration(
    corners: &[ImageCorners],
    mask: DistortionMask,
    opts: &LmOptions,
) -> Result<(CameraIntrinsics, Vec<BoardPose>, SolveReport), InitError> {
    for img in corners {
        img.validate()?;
    }
    let mut homographies = Vec::with_capacity(corners.len());
    for img in corners {
        let pairs: Vec<_> = img.points.iter().map(|c| (c.board_uv, c.pixel)).collect();
        homographies.push(estimate_homography(&pairs)?);
    }
    let intr0 = zhang_intrinsics(&homographies)?;
    let poses0 = homographies
        .iter()
        .map(|h| pose_from_homography(&intr0, h))
        .collect::<Result<Vec<_>, _>>()?;
    let (intr, poses, report) = refine_corner_reprojection(&intr0, &poses0, corners, mask, opts)?;
    Ok((intr, poses, report))
}
