//! Parameter packing, photometric residual and Jacobian assembly, and the
//! Levenberg-Marquardt loop that refines the calibration by minimizing
//! pixel-wise squared differences between rendered and captured images.

pub(crate) mod lm;
mod photometric;

pub use lm::{
    assert_cost_trace_non_increasing, levenberg_marquardt, LmOptions, SolveError, SolveReport,
    TerminationReason,
};
pub use photometric::{jacobian, residuals, JacobianBlocks, JacobianRow, ObservationSet};

use nalgebra::DVector;

use crate::geometry::{BoardPose, CameraIntrinsics};
use crate::init_calib::{self, ImageCorners, InitError};
use crate::rendering::{ExcludedPoint, Image};
use crate::texture::BoardSpec;
use thiserror::Error;

pub(crate) const GLOBAL_DIM: usize = 8;
pub(crate) const POSE_DIM: usize = 7;
/// Nonzeros per Jacobian row: global block + one pose block + one sigma.
pub(crate) const ROW_NNZ: usize = GLOBAL_DIM + POSE_DIM + 1;

/// Which distortion coefficients the solvers estimate; the rest stay frozen
/// at their initial values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionMask {
    None,
    K1K2,
    Full,
}

impl DistortionMask {
    /// Indices into the global parameter block that are held fixed.
    pub(crate) fn frozen_indices(&self) -> &'static [usize] {
        match self {
            DistortionMask::None => &[4, 5, 6, 7],
            DistortionMask::K1K2 => &[6, 7],
            DistortionMask::Full => &[],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub lm: LmOptions,
    pub distortion_mask: DistortionMask,
    /// Solve the normal equations by Schur elimination of the sigma and pose
    /// blocks instead of one dense factorization.
    pub use_schur: bool,
    /// Initial per-point blur, in pixels, when the initialization does not
    /// provide one.
    pub sigma_init_px: f64,
    /// Size of the thread pool used for residual and Jacobian evaluation;
    /// `None` uses the global pool.
    pub threads: Option<usize>,
    /// Recorded for provenance; the solver itself is deterministic.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lm: LmOptions::default(),
            distortion_mask: DistortionMask::Full,
            use_schur: true,
            sigma_init_px: 1.0,
            threads: None,
            seed: 0,
        }
    }
}

/// Full state of one calibration: intrinsics, per-image board poses, and
/// per-(image, point) blur levels in pixels.
#[derive(Clone, Debug)]
pub struct CalibrationEstimate {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<BoardPose>,
    /// Row-major by image: `sigmas[i * n_points + j]`.
    pub sigmas: Vec<f64>,
    pub n_points: usize,
}

impl CalibrationEstimate {
    pub fn with_uniform_sigma(
        intrinsics: CameraIntrinsics,
        poses: Vec<BoardPose>,
        n_points: usize,
        sigma_px: f64,
    ) -> Self {
        let n = poses.len() * n_points;
        CalibrationEstimate {
            intrinsics,
            poses,
            sigmas: vec![sigma_px; n],
            n_points,
        }
    }

    pub fn n_images(&self) -> usize {
        self.poses.len()
    }

    pub fn sigma(&self, image: usize, point: usize) -> f64 {
        self.sigmas[image * self.n_points + point]
    }
}

pub(crate) fn param_len(n_images: usize, n_points: usize) -> usize {
    GLOBAL_DIM + POSE_DIM * n_images + n_images * n_points
}

pub(crate) fn pose_offset(i: usize) -> usize {
    GLOBAL_DIM + POSE_DIM * i
}

pub(crate) fn sigma_offset(n_images: usize, n_points: usize, i: usize, j: usize) -> usize {
    GLOBAL_DIM + POSE_DIM * n_images + i * n_points + j
}

/// Flattens an estimate into the optimization vector: the global intrinsics
/// block, one quaternion-plus-translation block per image, then the log of
/// every blur level. Quaternions are stored as-is and re-normalized on
/// [`unpack`].
pub fn pack(est: &CalibrationEstimate) -> DVector<f64> {
    let n_images = est.n_images();
    assert_eq!(est.sigmas.len(), n_images * est.n_points);
    let mut v = DVector::zeros(param_len(n_images, est.n_points));
    let c = &est.intrinsics;
    for (k, val) in [c.fx, c.fy, c.x0, c.y0, c.k1, c.k2, c.p1, c.p2]
        .into_iter()
        .enumerate()
    {
        v[k] = val;
    }
    for (i, pose) in est.poses.iter().enumerate() {
        let o = pose_offset(i);
        v[o] = pose.q[0];
        v[o + 1] = pose.q[1];
        v[o + 2] = pose.q[2];
        v[o + 3] = pose.q[3];
        v[o + 4] = pose.t.x;
        v[o + 5] = pose.t.y;
        v[o + 6] = pose.t.z;
    }
    let base = GLOBAL_DIM + POSE_DIM * n_images;
    for (k, s) in est.sigmas.iter().enumerate() {
        assert!(*s > 0.0, "blur levels must be positive to store their log");
        v[base + k] = s.ln();
    }
    v
}

/// Inverse of [`pack`]; quaternions are normalized, sigmas exponentiated.
pub fn unpack(v: &DVector<f64>, n_images: usize, n_points: usize) -> CalibrationEstimate {
    assert_eq!(v.len(), param_len(n_images, n_points));
    let intrinsics = CameraIntrinsics {
        fx: v[0],
        fy: v[1],
        x0: v[2],
        y0: v[3],
        k1: v[4],
        k2: v[5],
        p1: v[6],
        p2: v[7],
    };
    let mut poses = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let o = pose_offset(i);
        let q = [v[o], v[o + 1], v[o + 2], v[o + 3]];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        poses.push(BoardPose::new(
            [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
            nalgebra::Vector3::new(v[o + 4], v[o + 5], v[o + 6]),
        ));
    }
    let base = GLOBAL_DIM + POSE_DIM * n_images;
    let sigmas = (0..n_images * n_points)
        .map(|k| v[base + k].exp())
        .collect();
    CalibrationEstimate {
        intrinsics,
        poses,
        sigmas,
        n_points,
    }
}

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error("solver failed: {0}")]
    Solve(#[from] SolveError),
    #[error("setup failed: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("invalid calibration inputs: {0}")]
    Config(String),
}

/// Where the photometric refinement starts from.
pub enum CalibrateInit<'a> {
    /// Corner observations, one entry per image in order; runs the
    /// closed-form initializer plus corner-reprojection refinement first.
    Corners(&'a [ImageCorners]),
    /// An explicit starting estimate (poses aligned with the images).
    Estimate(CalibrationEstimate),
}

pub struct CalibrationOutcome {
    /// The corner-based (or provided) starting estimate.
    pub initial: CalibrationEstimate,
    /// The rendering-based refinement result.
    pub refined: CalibrationEstimate,
    pub report: SolveReport,
    /// Interest points without pixels in some image.
    pub excluded: Vec<ExcludedPoint>,
}

/// End-to-end calibration: initialize (from corners if needed), freeze the
/// pixel neighborhoods under the initial calibration, then minimize the
/// photometric objective with Levenberg-Marquardt.
pub fn calibrate(
    images: &[Image],
    init: CalibrateInit<'_>,
    board: &BoardSpec,
    opts: &SolverOptions,
) -> Result<CalibrationOutcome, CalibrateError> {
    if images.is_empty() {
        return Err(CalibrateError::Config(
            "at least one image is required".into(),
        ));
    }
    let run = || -> Result<CalibrationOutcome, CalibrateError> {
        let initial = match init {
            CalibrateInit::Corners(corners) => {
                if corners.len() != images.len() {
                    return Err(CalibrateError::Config(format!(
                        "{} corner sets for {} images",
                        corners.len(),
                        images.len()
                    )));
                }
                let (intr, poses, _) =
                    init_calib::initial_calibration(corners, opts.distortion_mask, &opts.lm)?;
                CalibrationEstimate::with_uniform_sigma(
                    intr,
                    poses,
                    board.point_count(),
                    opts.sigma_init_px,
                )
            }
            CalibrateInit::Estimate(est) => {
                if est.poses.len() != images.len() {
                    return Err(CalibrateError::Config(format!(
                        "{} poses for {} images",
                        est.poses.len(),
                        images.len()
                    )));
                }
                if est.n_points != board.point_count() {
                    return Err(CalibrateError::Config(format!(
                        "estimate covers {} interest points, board has {}",
                        est.n_points,
                        board.point_count()
                    )));
                }
                est
            }
        };

        let (obs, excluded) = ObservationSet::build(images.to_vec(), *board, &initial)?;
        let (v, report) = photometric::solve(&obs, &initial, opts)?;
        let refined = unpack(&v, images.len(), board.point_count());
        Ok(CalibrationOutcome {
            initial,
            refined,
            report,
            excluded,
        })
    };
    match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CalibrateError::Config(e.to_string()))?
            .install(run),
        None => run(),
    }
}
