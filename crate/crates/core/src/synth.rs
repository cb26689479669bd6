//! Synthetic dataset generation: boards rendered through a known camera,
//! degraded with Gaussian blur and sensor noise, with ground-truth poses and
//! interest-point pixel coordinates.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{BoardPose, CameraIntrinsics, GeometryError};
use crate::rendering::{degrade_image, render_board_image, Image};
use crate::texture::BoardSpec;

const POSE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("could not sample an in-frame pose for image {image} after {attempts} attempts")]
    PoseSampling { image: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Configuration of the synthetic generator. Ranges are sampled uniformly;
/// poses are rejected until every interest point projects inside the frame.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub intrinsics: CameraIntrinsics,
    pub board: BoardSpec,
    /// Anti-alias blur baked into the clean rendering, in pixels.
    pub anti_alias_sigma_px: f64,
    /// Gaussian blur applied after rendering, in pixels.
    pub blur_sigma_px: f64,
    /// Additive noise standard deviation, as a fraction of the [0, 1] range.
    pub noise_sigma: f64,
    /// Rendered intensities are mapped affinely into this range before
    /// degradation.
    pub intensity_range: (f64, f64),
    /// Board tilt range in degrees.
    pub tilt_deg: (f64, f64),
    /// Projected board width as a fraction of the image width.
    pub span_frac: (f64, f64),
    /// The board center is aimed at the principal point jittered by up to
    /// this fraction of the frame per axis.
    pub center_jitter_frac: f64,
    /// Interest points must land at least this many pixels inside the frame.
    pub border_px: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Full-HD camera with focal length 1000 and a 17x24-square board
    /// (16x23 interest points).
    fn default() -> Self {
        SyntheticConfig {
            width: 1920,
            height: 1080,
            count: 1,
            intrinsics: CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0),
            board: BoardSpec::checkerboard(16, 23, 1.0, 1.0).expect("valid default board"),
            anti_alias_sigma_px: 0.3,
            blur_sigma_px: 0.0,
            noise_sigma: 0.0,
            intensity_range: (0.1, 0.9),
            tilt_deg: (10.0, 60.0),
            span_frac: (0.25, 0.8),
            center_jitter_frac: 0.25,
            border_px: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.count == 0 {
            return err("count must be at least 1");
        }
        if self.width < 8 || self.height < 8 {
            return err("frame too small");
        }
        if !self.intrinsics.is_valid() {
            return err("invalid intrinsics");
        }
        if !(self.intensity_range.0 < self.intensity_range.1) {
            return err("intensity range must be increasing");
        }
        if !(self.span_frac.0 > 0.0 && self.span_frac.0 <= self.span_frac.1) {
            return err("span fractions must be positive and ordered");
        }
        if !(0.0 <= self.tilt_deg.0 && self.tilt_deg.0 <= self.tilt_deg.1) {
            return err("tilt range must be non-negative and ordered");
        }
        if self.anti_alias_sigma_px < 0.0 || self.blur_sigma_px < 0.0 || self.noise_sigma < 0.0 {
            return err("blur and noise sigmas must be non-negative");
        }
        Ok(())
    }
}

/// One generated dataset: degraded images plus ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub images: Vec<Image>,
    pub poses: Vec<BoardPose>,
    /// Per image: `(point_index, pixel_x, pixel_y)` for every interest point.
    pub corners: Vec<Vec<(usize, f64, f64)>>,
}

/// Renders `config.count` board images with ground-truth poses and corners.
/// Deterministic for a fixed seed; per-image RNG streams are derived from
/// the seed and the image index, so the parallel schedule does not matter.
pub fn generate_synthetic_dataset(
    config: &SyntheticConfig,
) -> Result<SyntheticDataset, DatasetError> {
    config.validate()?;
    let per_image: Result<Vec<_>, DatasetError> = (0..config.count)
        .into_par_iter()
        .map(|i| generate_one(config, i))
        .collect();
    let per_image = per_image?;
    let mut images = Vec::with_capacity(config.count);
    let mut poses = Vec::with_capacity(config.count);
    let mut corners = Vec::with_capacity(config.count);
    for (img, pose, c) in per_image {
        images.push(img);
        poses.push(pose);
        corners.push(c);
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        images,
        poses,
        corners,
    })
}

fn generate_one(
    cfg: &SyntheticConfig,
    index: usize,
) -> Result<(Image, BoardPose, Vec<(usize, f64, f64)>), DatasetError> {
    let pose = sample_pose(cfg, index)?;
    let corners = ground_truth_corners(&cfg.intrinsics, &pose, &cfg.board)?;

    let n = cfg.board.point_count();
    let mut img = render_board_image(
        &cfg.intrinsics,
        &pose,
        &cfg.board,
        cfg.width,
        cfg.height,
        &vec![cfg.anti_alias_sigma_px; n],
    )?;
    img.map_range(cfg.intensity_range.0, cfg.intensity_range.1);
    let img = degrade_image(
        &img,
        cfg.blur_sigma_px,
        cfg.noise_sigma,
        derive_seed(cfg.seed, SeedPurpose::PixelNoise, index as u64),
    );
    Ok((img, pose, corners))
}

/// Projects every interest point with the given calibration.
pub fn ground_truth_corners(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    board: &BoardSpec,
) -> Result<Vec<(usize, f64, f64)>, GeometryError> {
    (0..board.point_count())
        .map(|j| {
            let (u, v) = board.point_uv(j);
            let px = intr.project(&pose.board_point(u, v))?;
            Ok((j, px.x, px.y))
        })
        .collect()
}

fn sample_pose(cfg: &SyntheticConfig, index: usize) -> Result<BoardPose, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream_id(SeedPurpose::Pose, index as u64));
    let intr = &cfg.intrinsics;
    let (ulo, uhi, vlo, vhi) = cfg.board.board_rect();
    let board_w = uhi - ulo;
    let center = Vector3::new((ulo + uhi) / 2.0, (vlo + vhi) / 2.0, 0.0);

    for _ in 0..POSE_ATTEMPTS {
        let span = rng.gen_range(cfg.span_frac.0..=cfg.span_frac.1);
        let z = intr.fx * board_w / (span * cfg.width as f64);
        let tilt = rng.gen_range(cfg.tilt_deg.0..=cfg.tilt_deg.1).to_radians();
        let axis_phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let spin = rng.gen_range(0.0..std::f64::consts::TAU);
        let axis = Unit::new_normalize(Vector3::new(axis_phi.cos(), axis_phi.sin(), 0.0));
        let r = Rotation3::from_axis_angle(&axis, tilt)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), spin);
        let jx = cfg.center_jitter_frac * cfg.width as f64;
        let jy = cfg.center_jitter_frac * cfg.height as f64;
        let target_x = intr.x0 + rng.gen_range(-jx..=jx);
        let target_y = intr.y0 + rng.gen_range(-jy..=jy);
        let ray = Vector3::new(
            (target_x - intr.x0) / intr.fx,
            (target_y - intr.y0) / intr.fy,
            1.0,
        );
        let t = ray * z - r.matrix() * center;
        let pose = BoardPose::from_rotation(r.matrix(), t);
        if pose_in_frame(cfg, &pose) {
            return Ok(pose);
        }
    }
    Err(DatasetError::PoseSampling {
        image: index,
        attempts: POSE_ATTEMPTS,
    })
}

fn pose_in_frame(cfg: &SyntheticConfig, pose: &BoardPose) -> bool {
    let b = cfg.border_px;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    (0..cfg.board.point_count()).all(|j| {
        let (u, v) = cfg.board.point_uv(j);
        let p = pose.board_point(u, v);
        if p.z <= 0.1 {
            return false;
        }
        match cfg.intrinsics.project(&p) {
            Ok(px) => px.x >= b && px.x <= w - 1.0 - b && px.y >= b && px.y <= h - 1.0 - b,
            Err(_) => false,
        }
    })
}

/// Adds i.i.d. Gaussian noise to corner pixel coordinates; used to emulate
/// detector error on ground-truth corners.
pub fn perturb_corners(
    corners: &[Vec<(usize, f64, f64)>],
    sigma_px: f64,
    seed: u64,
) -> Vec<Vec<(usize, f64, f64)>> {
    if sigma_px == 0.0 {
        return corners.to_vec();
    }
    let normal = Normal::new(0.0, sigma_px).expect("valid corner noise sigma");
    corners
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(SeedPurpose::CornerNoise, i as u64));
            pts.iter()
                .map(|&(j, x, y)| (j, x + normal.sample(&mut rng), y + normal.sample(&mut rng)))
                .collect()
        })
        .collect()
}

/// Deterministically picks `n` distinct image indices out of `total`.
pub fn sample_image_subset(total: usize, n: usize, seed: u64) -> Vec<usize> {
    assert!(n <= total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, total, n).into_vec()
}

#[derive(Clone, Copy)]
pub enum SeedPurpose {
    Pose = 1,
    PixelNoise = 2,
    CornerNoise = 3,
    TrialSampling = 4,
}

fn stream_id(purpose: SeedPurpose, index: u64) -> u64 {
    ((purpose as u64) << 32) | index
}

/// Derives an independent sub-seed from a base seed (splitmix64 step).
pub fn derive_seed(seed: u64, purpose: SeedPurpose, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((purpose as u64).wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
