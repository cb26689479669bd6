//! Calibration quality metrics: per-pixel reprojection error against a
//! ground-truth calibration, and the test-set protocol that refits poses
//! with frozen intrinsics and measures corner reprojection.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::dual::{Dual, Real};
use crate::geometry::kernel::{self, Intr};
use crate::geometry::{BoardPose, CameraIntrinsics, PixelPoint};
use crate::init_calib::{estimate_homography, pose_from_homography, ImageCorners, InitError};
use crate::solver::lm::{run_lm, DenseModel, LmOptions, SolveError};

/// Summary of the per-pixel reprojection error over a sampled pixel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerPixelErrorReport {
    /// Root mean square pixel displacement over the sampled pixels.
    pub rms_px: f64,
    pub max_px: f64,
    pub stride: usize,
    /// Pixels that entered the statistic.
    pub pixel_count: usize,
    /// Pixels skipped because the true model could not be inverted there.
    pub skipped: usize,
}

/// Compares two calibrations in image space: every sampled pixel is lifted
/// to a 3D point with the TRUE intrinsics (undistort, unit depth), projected
/// with the ESTIMATED intrinsics, and the pixel displacement is aggregated.
///
/// The statistic reported is the root of the MEAN squared distance; the
/// pixel count is recorded so the plain sum can be recovered.
pub fn per_pixel_reprojection_error(
    true_intr: &CameraIntrinsics,
    est_intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    stride: usize,
) -> PerPixelErrorReport {
    per_pixel_error_with_depth(true_intr, est_intr, width, height, stride, 1.0)
}

pub(crate) fn per_pixel_error_with_depth(
    true_intr: &CameraIntrinsics,
    est_intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    stride: usize,
    depth: f64,
) -> PerPixelErrorReport {
    assert!(stride >= 1, "stride must be at least 1");
    let mut sum_sq = 0.0;
    let mut max_px = 0.0f64;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for y in (0..height).step_by(stride) {
        for x in (0..width).step_by(stride) {
            let px = PixelPoint::new(x as f64, y as f64);
            let n = true_intr.normalize_pixel(px);
            let Ok(un) = true_intr.undistort(n) else {
                skipped += 1;
                continue;
            };
            let q = Vector3::new(un.xn * depth, un.yn * depth, depth);
            let Ok(proj) = est_intr.project(&q) else {
                skipped += 1;
                continue;
            };
            let d2 = (proj.x - px.x).powi(2) + (proj.y - px.y).powi(2);
            sum_sq += d2;
            max_px = max_px.max(d2.sqrt());
            count += 1;
        }
    }
    let rms_px = if count == 0 {
        0.0
    } else {
        (sum_sq / count as f64).sqrt()
    };
    PerPixelErrorReport {
        rms_px,
        max_px,
        stride,
        pixel_count: count,
        skipped,
    }
}

/// Board pose of one image from its corners, with the intrinsics frozen:
/// homography initialization (on undistorted corners) followed by pose-only
/// reprojection refinement with the full distortion model. Returns the pose
/// and the final corner RMS in pixels.
pub fn fit_pose_fixed_intrinsics(
    intr: &CameraIntrinsics,
    corners: &ImageCorners,
) -> Result<(BoardPose, f64), InitError> {
    corners.validate()?;
    let mut pairs = Vec::with_capacity(corners.points.len());
    for c in &corners.points {
        let nd = intr.normalize_pixel(PixelPoint::new(c.pixel.0, c.pixel.1));
        let un = intr.undistort(nd)?;
        // pixel position the corner would have without lens distortion
        let ideal = (intr.fx * un.xn + intr.x0, intr.fy * un.yn + intr.y0);
        pairs.push((c.board_uv, ideal));
    }
    let h = estimate_homography(&pairs)?;
    let pose0 = pose_from_homography(intr, &h)?;
    let (pose, rms) = refine_pose(intr, &pose0, corners)?;
    Ok((pose, rms))
}

fn refine_pose(
    intr: &CameraIntrinsics,
    pose0: &BoardPose,
    corners: &ImageCorners,
) -> Result<(BoardPose, f64), SolveError> {
    let gi = Intr::from_intrinsics(intr);
    let rows = 2 * corners.points.len();
    let mut v0 = DVector::zeros(7);
    for (k, val) in pose0.q.iter().enumerate() {
        v0[k] = *val;
    }
    v0[4] = pose0.t.x;
    v0[5] = pose0.t.y;
    v0[6] = pose0.t.z;

    let residual_fn = |v: &DVector<f64>| -> Result<DVector<f64>, SolveError> {
        let rot = kernel::quat_rotation(&[v[0], v[1], v[2], v[3]]);
        let t = [v[4], v[5], v[6]];
        let mut r = DVector::zeros(rows);
        for (k, c) in corners.points.iter().enumerate() {
            let p = kernel::board_point(&rot, &t, c.board_uv.0, c.board_uv.1);
            let (x, y) = kernel::project(&gi, p)?;
            r[2 * k] = x - c.pixel.0;
            r[2 * k + 1] = y - c.pixel.1;
        }
        Ok(r)
    };
    let jacobian_fn = |v: &DVector<f64>| -> Result<DMatrix<f64>, SolveError> {
        let gi_d = Intr {
            fx: Dual::<7>::constant(intr.fx),
            fy: Dual::constant(intr.fy),
            x0: Dual::constant(intr.x0),
            y0: Dual::constant(intr.y0),
            k1: Dual::constant(intr.k1),
            k2: Dual::constant(intr.k2),
            p1: Dual::constant(intr.p1),
            p2: Dual::constant(intr.p2),
        };
        let q = [
            Dual::<7>::variable(v[0], 0),
            Dual::variable(v[1], 1),
            Dual::variable(v[2], 2),
            Dual::variable(v[3], 3),
        ];
        let t = [
            Dual::variable(v[4], 4),
            Dual::variable(v[5], 5),
            Dual::variable(v[6], 6),
        ];
        let rot = kernel::quat_rotation(&q);
        let mut j = DMatrix::zeros(rows, 7);
        for (k, c) in corners.points.iter().enumerate() {
            let p = kernel::board_point(
                &rot,
                &t,
                Dual::constant(c.board_uv.0),
                Dual::constant(c.board_uv.1),
            );
            let (x, y) = kernel::project(&gi_d, p)?;
            for col in 0..7 {
                j[(2 * k, col)] = x.eps[col];
                j[(2 * k + 1, col)] = y.eps[col];
            }
        }
        Ok(j)
    };

    let mut model = DenseModel::new(residual_fn, jacobian_fn, 7, Vec::new());
    let (v, report) = run_lm(&mut model, v0, &LmOptions::default())?;
    let q = [v[0], v[1], v[2], v[3]];
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let pose = BoardPose::new(
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        Vector3::new(v[4], v[5], v[6]),
    );
    let rms = (report.final_cost / corners.points.len() as f64).sqrt();
    Ok((pose, rms))
}

/// Test-set reprojection: per-image pose fit with frozen intrinsics, then
/// the corner reprojection RMS per image plus its mean and (sample)
/// standard deviation across images.
#[derive(Clone, Debug, PartialEq)]
pub struct TestsetReport {
    pub per_image: Vec<(usize, f64)>,
    pub mean_rms_px: f64,
    pub std_rms_px: f64,
}

pub fn testset_reprojection(
    intr: &CameraIntrinsics,
    test_corners: &[ImageCorners],
) -> Result<TestsetReport, InitError> {
    if test_corners.is_empty() {
        return Err(InitError::TooFewViews { need: 1, got: 0 });
    }
    let mut per_image = Vec::with_capacity(test_corners.len());
    for img in test_corners {
        let (_, rms) = fit_pose_fixed_intrinsics(intr, img)?;
        per_image.push((img.image_id, rms));
    }
    let n = per_image.len() as f64;
    let mean = per_image.iter().map(|(_, r)| r).sum::<f64>() / n;
    let std = if per_image.len() < 2 {
        0.0
    } else {
        (per_image
            .iter()
            .map(|(_, r)| (r - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    };
    Ok(TestsetReport {
        per_image,
        mean_rms_px: mean,
        std_rms_px: std,
    })
}
