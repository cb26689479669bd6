//! On-disk formats: corner CSV files, dataset manifests, calibration files,
//! report files, and 8/16-bit grayscale PNG and binary PGM images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoardPose, CameraIntrinsics};
use crate::init_calib::{CornerPoint, ImageCorners};
use crate::metrics::{PerPixelErrorReport, TestsetReport};
use crate::rendering::Image;
use crate::solver::{CalibrationEstimate, SolveReport, TerminationReason};
use crate::synth::SyntheticDataset;
use crate::texture::BoardSpec;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// corner CSV

/// Writes corners as CSV with header
/// `image_id,point_index,board_u,board_v,pixel_x,pixel_y`.
pub fn write_corner_csv(path: &Path, corners: &[ImageCorners]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "image_id",
        "point_index",
        "board_u",
        "board_v",
        "pixel_x",
        "pixel_y",
    ])?;
    for img in corners {
        for p in &img.points {
            w.write_record(&[
                img.image_id.to_string(),
                p.point_index.to_string(),
                format!("{:?}", p.board_uv.0),
                format!("{:?}", p.board_uv.1),
                format!("{:?}", p.pixel.0),
                format!("{:?}", p.pixel.1),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a corner CSV; observations are grouped and sorted by image id.
/// A point index appearing twice within one image is rejected.
pub fn read_corner_csv(path: &Path) -> Result<Vec<ImageCorners>, IoError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = r.headers()?.clone();
    let expect = [
        "image_id",
        "point_index",
        "board_u",
        "board_v",
        "pixel_x",
        "pixel_y",
    ];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(IoError::Format(format!(
            "unexpected corner CSV header: {:?}",
            headers
        )));
    }
    let mut by_image: std::collections::BTreeMap<usize, Vec<CornerPoint>> = Default::default();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64, IoError> {
            record[i]
                .parse::<f64>()
                .map_err(|e| IoError::Format(format!("bad number {:?}: {e}", &record[i])))
        };
        let image_id: usize = record[0]
            .parse()
            .map_err(|e| IoError::Format(format!("bad image_id {:?}: {e}", &record[0])))?;
        let point_index: usize = record[1]
            .parse()
            .map_err(|e| IoError::Format(format!("bad point_index {:?}: {e}", &record[1])))?;
        by_image.entry(image_id).or_default().push(CornerPoint {
            point_index,
            board_uv: (field(2)?, field(3)?),
            pixel: (field(4)?, field(5)?),
        });
    }
    let mut out = Vec::with_capacity(by_image.len());
    for (image_id, points) in by_image {
        let mut seen = std::collections::HashSet::new();
        for p in &points {
            if !seen.insert(p.point_index) {
                return Err(IoError::Format(format!(
                    "point {} appears twice in image {}",
                    p.point_index, image_id
                )));
            }
        }
        out.push(ImageCorners { image_id, points });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON documents

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntrinsicsDto {
    pub fx: f64,
    pub fy: f64,
    pub x0: f64,
    pub y0: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl From<&CameraIntrinsics> for IntrinsicsDto {
    fn from(c: &CameraIntrinsics) -> Self {
        IntrinsicsDto {
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

impl From<&IntrinsicsDto> for CameraIntrinsics {
    fn from(d: &IntrinsicsDto) -> Self {
        CameraIntrinsics {
            fx: d.fx,
            fy: d.fy,
            x0: d.x0,
            y0: d.y0,
            k1: d.k1,
            k2: d.k2,
            p1: d.p1,
            p2: d.p2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseDto {
    /// (w, x, y, z) order.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&BoardPose> for PoseDto {
    fn from(p: &BoardPose) -> Self {
        PoseDto {
            quaternion: p.q,
            translation: [p.t.x, p.t.y, p.t.z],
        }
    }
}

impl From<&PoseDto> for BoardPose {
    fn from(d: &PoseDto) -> Self {
        BoardPose::new(
            d.quaternion,
            nalgebra::Vector3::new(d.translation[0], d.translation[1], d.translation[2]),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestCorner {
    pub point: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: usize,
    pub path: String,
    pub pose: PoseDto,
    pub corners: Vec<ManifestCorner>,
}

/// Ground-truth description of a synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub board: BoardSpec,
    pub intrinsics: IntrinsicsDto,
    pub anti_alias_sigma_px: f64,
    pub blur_sigma_px: f64,
    pub noise_sigma: f64,
    pub intensity_range: (f64, f64),
    pub seed: u64,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn from_dataset(ds: &SyntheticDataset, image_paths: &[String]) -> Self {
        let cfg = &ds.config;
        let images = ds
            .poses
            .iter()
            .zip(&ds.corners)
            .zip(image_paths)
            .enumerate()
            .map(|(id, ((pose, corners), path))| ManifestImage {
                id,
                path: path.clone(),
                pose: pose.into(),
                corners: corners
                    .iter()
                    .map(|&(point, x, y)| ManifestCorner { point, x, y })
                    .collect(),
            })
            .collect();
        Manifest {
            width: cfg.width,
            height: cfg.height,
            board: cfg.board,
            intrinsics: (&cfg.intrinsics).into(),
            anti_alias_sigma_px: cfg.anti_alias_sigma_px,
            blur_sigma_px: cfg.blur_sigma_px,
            noise_sigma: cfg.noise_sigma,
            intensity_range: cfg.intensity_range,
            seed: cfg.seed,
            images,
        }
    }

    pub fn corners(&self) -> Vec<ImageCorners> {
        self.images
            .iter()
            .map(|img| ImageCorners {
                image_id: img.id,
                points: img
                    .corners
                    .iter()
                    .map(|c| {
                        let uv = self.board.point_uv(c.point);
                        CornerPoint {
                            point_index: c.point,
                            board_uv: uv,
                            pixel: (c.x, c.y),
                        }
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraMatrixDto {
    pub fx: f64,
    pub fy: f64,
    pub x0: f64,
    pub y0: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionDto {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseEntry {
    pub image_id: usize,
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SigmaEntry {
    pub image_id: usize,
    pub point_index: usize,
    pub sigma_px: f64,
}

/// One calibration estimate in file form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateDto {
    pub camera_matrix: CameraMatrixDto,
    pub distortion: DistortionDto,
    pub poses: Vec<PoseEntry>,
    pub sigmas: Vec<SigmaEntry>,
}

impl EstimateDto {
    pub fn from_estimate(est: &CalibrationEstimate, image_ids: &[usize]) -> Self {
        assert_eq!(image_ids.len(), est.poses.len());
        let c = &est.intrinsics;
        let poses = est
            .poses
            .iter()
            .zip(image_ids)
            .map(|(p, &id)| PoseEntry {
                image_id: id,
                quaternion: p.q,
                translation: [p.t.x, p.t.y, p.t.z],
            })
            .collect();
        let mut sigmas = Vec::with_capacity(est.sigmas.len());
        for (i, &id) in image_ids.iter().enumerate() {
            for j in 0..est.n_points {
                sigmas.push(SigmaEntry {
                    image_id: id,
                    point_index: j,
                    sigma_px: est.sigma(i, j),
                });
            }
        }
        EstimateDto {
            camera_matrix: CameraMatrixDto {
                fx: c.fx,
                fy: c.fy,
                x0: c.x0,
                y0: c.y0,
            },
            distortion: DistortionDto {
                k1: c.k1,
                k2: c.k2,
                p1: c.p1,
                p2: c.p2,
            },
            poses,
            sigmas,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.camera_matrix.fx,
            fy: self.camera_matrix.fy,
            x0: self.camera_matrix.x0,
            y0: self.camera_matrix.y0,
            k1: self.distortion.k1,
            k2: self.distortion.k2,
            p1: self.distortion.p1,
            p2: self.distortion.p2,
        }
    }

    pub fn to_estimate(&self) -> Result<CalibrationEstimate, IoError> {
        if self.poses.is_empty() {
            return Err(IoError::Format("calibration has no poses".into()));
        }
        if self.sigmas.len() % self.poses.len() != 0 {
            return Err(IoError::Format(
                "sigma count is not a multiple of the pose count".into(),
            ));
        }
        let n_points = self.sigmas.len() / self.poses.len();
        let mut sigmas = vec![0.0; self.sigmas.len()];
        for (i, pose) in self.poses.iter().enumerate() {
            for j in 0..n_points {
                let entry = &self.sigmas[i * n_points + j];
                if entry.image_id != pose.image_id || entry.point_index != j {
                    return Err(IoError::Format("sigma entries out of order".into()));
                }
                sigmas[i * n_points + j] = entry.sigma_px;
            }
        }
        Ok(CalibrationEstimate {
            intrinsics: self.intrinsics(),
            poses: self
                .poses
                .iter()
                .map(|p| {
                    BoardPose::new(
                        p.quaternion,
                        nalgebra::Vector3::new(
                            p.translation[0],
                            p.translation[1],
                            p.translation[2],
                        ),
                    )
                })
                .collect(),
            sigmas,
            n_points,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReportDto {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: TerminationReason,
    pub cost_trace: Vec<f64>,
    pub failed_pixel_evals: usize,
    pub high_condition_warning: bool,
}

impl From<&SolveReport> for SolveReportDto {
    fn from(r: &SolveReport) -> Self {
        SolveReportDto {
            iterations: r.iterations,
            initial_cost: r.initial_cost,
            final_cost: r.final_cost,
            termination: r.termination,
            cost_trace: r.cost_trace.clone(),
            failed_pixel_evals: r.failed_pixel_evals,
            high_condition_warning: r.high_condition_warning,
        }
    }
}

/// Calibration file: the corner-based initial estimate, the rendering-based
/// refinement, and the solver report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub initial: EstimateDto,
    pub refined: EstimateDto,
    pub solver_report: SolveReportDto,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerPixelErrorDto {
    pub rms_px: f64,
    pub max_px: f64,
    pub stride: usize,
    pub pixel_count: usize,
    pub skipped: usize,
}

impl From<&PerPixelErrorReport> for PerPixelErrorDto {
    fn from(r: &PerPixelErrorReport) -> Self {
        PerPixelErrorDto {
            rms_px: r.rms_px,
            max_px: r.max_px,
            stride: r.stride,
            pixel_count: r.pixel_count,
            skipped: r.skipped,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestsetReportDto {
    pub per_image: Vec<TestsetImageDto>,
    pub mean_rms_px: f64,
    pub std_rms_px: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestsetImageDto {
    pub image_id: usize,
    pub rms_px: f64,
}

impl From<&TestsetReport> for TestsetReportDto {
    fn from(r: &TestsetReport) -> Self {
        TestsetReportDto {
            per_image: r
                .per_image
                .iter()
                .map(|&(image_id, rms_px)| TestsetImageDto { image_id, rms_px })
                .collect(),
            mean_rms_px: r.mean_rms_px,
            std_rms_px: r.std_rms_px,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

// ---------------------------------------------------------------------------
// images

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Saves a grayscale image; the format comes from the extension (`.png` or
/// `.pgm`, the latter always binary P5). Intensities are clamped to [0, 1]
/// and quantized.
pub fn save_gray_image(path: &Path, img: &Image, depth: BitDepth) -> Result<(), IoError> {
    let (w, h) = (img.width as u32, img.height as u32);
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    match depth {
        BitDepth::Sixteen => {
            let buf: Vec<u16> = img
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            if is_pgm {
                // P5 with maxval 65535: samples are big-endian per the format
                let mut out = BufWriter::new(File::create(path)?);
                write!(out, "P5\n{w} {h}\n65535\n")?;
                for v in &buf {
                    out.write_all(&v.to_be_bytes())?;
                }
                out.flush()?;
            } else {
                let im: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                    image::ImageBuffer::from_vec(w, h, buf)
                        .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
                im.save(path)?;
            }
        }
        BitDepth::Eight => {
            let buf: Vec<u8> = img
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            if is_pgm {
                let mut out = BufWriter::new(File::create(path)?);
                write!(out, "P5\n{w} {h}\n255\n")?;
                out.write_all(&buf)?;
                out.flush()?;
            } else {
                let im: image::ImageBuffer<image::Luma<u8>, Vec<u8>> =
                    image::ImageBuffer::from_vec(w, h, buf)
                        .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
                im.save(path)?;
            }
        }
    }
    Ok(())
}

/// Loads an 8- or 16-bit grayscale PNG or PGM into [0, 1] intensities.
pub fn load_gray_image(path: &Path) -> Result<Image, IoError> {
    let dynamic = image::open(path)?;
    let im = dynamic.into_luma16();
    let (w, h) = im.dimensions();
    let data = im.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Writes a signed difference image: positive values in the red channel,
/// negative in blue, scaled by `gain` and clamped.
pub fn save_signed_difference_png(
    path: &Path,
    diff: &[f64],
    width: usize,
    height: usize,
    gain: f64,
) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(width * height * 3);
    for v in diff {
        let scaled = v * gain;
        let r = (scaled.max(0.0).min(1.0) * 255.0).round() as u8;
        let b = ((-scaled).max(0.0).min(1.0) * 255.0).round() as u8;
        buf.extend_from_slice(&[r, 0, b]);
    }
    let im: image::ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        image::ImageBuffer::from_vec(width as u32, height as u32, buf)
            .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
    im.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// experiment CSV

/// One row of a comparison sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub sigma: f64,
    pub sigma_n: f64,
    pub trial: usize,
    pub seed: u64,
    pub method: String,
    pub e_rms_px: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
