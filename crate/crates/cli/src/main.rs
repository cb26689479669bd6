//! Command-line entry point wiring dataset generation, calibration,
//! evaluation, and debug rendering into reproducible experiment runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use photocal::io::{
    self, BitDepth, CalibrationFile, EstimateDto, Manifest, PerPixelErrorDto, SolveReportDto,
    SweepRow, TestsetReportDto,
};
use photocal::{
    calibrate, degrade_image, generate_synthetic_dataset, per_pixel_reprojection_error,
    perturb_corners, render_board_image, testset_reprojection, BoardSpec, CalibrateError,
    CalibrateInit, CameraIntrinsics, DistortionMask, Image, ImageCorners, LmOptions, SolverOptions,
    SyntheticConfig,
};

#[derive(Parser)]
#[command(
    name = "photocal",
    version,
    about = "Camera calibration by rendering board textures and minimizing photometric error"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic board dataset with ground truth.
    GenSynthetic(GenArgs),
    /// Calibrate a camera from images plus corner observations.
    Calibrate(CalibrateArgs),
    /// Evaluate a calibration against ground truth or test corners.
    Evaluate(EvaluateArgs),
    /// Sweep (n, blur, noise) cells and compare corner-based vs refined
    /// calibrations by per-pixel reprojection error.
    Compare(CompareArgs),
    /// Render the board under a calibration and write the signed difference
    /// against the captured image.
    DebugRender(DebugRenderArgs),
}

// exit codes: 2 config, 3 io, 4 initialization, 5 solver
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Config = 2,
    Io = 3,
    Init = 4,
    Solver = 5,
}

struct CliError {
    stage: Stage,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            stage: Stage::Config,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        let stage = match &e {
            io::IoError::Format(_) => Stage::Config,
            _ => Stage::Io,
        };
        CliError {
            stage,
            message: e.to_string(),
        }
    }
}

impl From<photocal::DatasetError> for CliError {
    fn from(e: photocal::DatasetError) -> Self {
        CliError {
            stage: Stage::Config,
            message: e.to_string(),
        }
    }
}

impl From<CalibrateError> for CliError {
    fn from(e: CalibrateError) -> Self {
        let stage = match &e {
            CalibrateError::Init(_) => Stage::Init,
            CalibrateError::Solve(_) => Stage::Solver,
            CalibrateError::Geometry(_) => Stage::Init,
            CalibrateError::Config(_) => Stage::Config,
        };
        CliError {
            stage,
            message: format!("{e} (stage: {stage:?})"),
        }
    }
}

impl From<photocal::InitError> for CliError {
    fn from(e: photocal::InitError) -> Self {
        CliError {
            stage: Stage::Init,
            message: e.to_string(),
        }
    }
}

impl From<photocal::GeometryError> for CliError {
    fn from(e: photocal::GeometryError) -> Self {
        CliError {
            stage: Stage::Solver,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::DebugRender(args) => cmd_debug_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.stage as u8)
        }
    }
}

fn setup_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DistortionArg {
    None,
    K1k2,
    Full,
}

impl From<DistortionArg> for DistortionMask {
    fn from(d: DistortionArg) -> Self {
        match d {
            DistortionArg::None => DistortionMask::None,
            DistortionArg::K1k2 => DistortionMask::K1K2,
            DistortionArg::Full => DistortionMask::Full,
        }
    }
}

// ---------------------------------------------------------------------------
// gen-synthetic

#[derive(Args)]
struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 1920)]
    width: usize,
    #[arg(long, default_value_t = 1080)]
    height: usize,
    /// Focal length in pixels (fx = fy).
    #[arg(long, default_value_t = 1000.0)]
    focal: f64,
    /// Principal point; defaults to the frame center.
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    k1: f64,
    #[arg(long, default_value_t = 0.0)]
    k2: f64,
    #[arg(long, default_value_t = 0.0)]
    p1: f64,
    #[arg(long, default_value_t = 0.0)]
    p2: f64,
    /// Interest-point grid rows.
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// Interest-point grid columns.
    #[arg(long, default_value_t = 23)]
    cols: usize,
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// Gaussian blur applied to the rendered images, in pixels.
    #[arg(long, default_value_t = 0.0)]
    blur: f64,
    /// Additive Gaussian noise, as a fraction of the [0, 1] range.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Anti-alias blur baked into the clean render, in pixels.
    #[arg(long, default_value_t = 0.3)]
    aa: f64,
    #[arg(long, default_value_t = 0.1)]
    intensity_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    intensity_hi: f64,
    #[arg(long, default_value_t = 10.0)]
    tilt_min: f64,
    #[arg(long, default_value_t = 60.0)]
    tilt_max: f64,
    #[arg(long, default_value_t = 0.25)]
    span_min: f64,
    #[arg(long, default_value_t = 0.8)]
    span_max: f64,
    /// Also write corners_noisy.csv with this much Gaussian pixel noise.
    #[arg(long, default_value_t = 0.0)]
    corner_noise: f64,
    /// Image container: png or pgm.
    #[arg(long, default_value = "png")]
    format: String,
    /// Bits per pixel: 8 or 16. 16 avoids visible quantization.
    #[arg(long, default_value_t = 16)]
    bit_depth: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<()> {
    setup_threads(args.threads)?;
    let board = BoardSpec::checkerboard(args.rows, args.cols, args.spacing, args.margin)
        .map_err(|e| CliError::config(e.to_string()))?;
    let intrinsics = CameraIntrinsics::pinhole(
        args.focal,
        args.focal,
        args.cx.unwrap_or(args.width as f64 / 2.0),
        args.cy.unwrap_or(args.height as f64 / 2.0),
    )
    .with_distortion(args.k1, args.k2, args.p1, args.p2);
    let config = SyntheticConfig {
        width: args.width,
        height: args.height,
        count: args.count,
        intrinsics,
        board,
        anti_alias_sigma_px: args.aa,
        blur_sigma_px: args.blur,
        noise_sigma: args.noise,
        intensity_range: (args.intensity_lo, args.intensity_hi),
        tilt_deg: (args.tilt_min, args.tilt_max),
        span_frac: (args.span_min, args.span_max),
        seed: args.seed,
        ..Default::default()
    };
    let depth = match args.bit_depth {
        8 => BitDepth::Eight,
        16 => BitDepth::Sixteen,
        other => return Err(CliError::config(format!("unsupported bit depth {other}"))),
    };
    let ext = match args.format.as_str() {
        "png" => "png",
        "pgm" => "pgm",
        other => return Err(CliError::config(format!("unsupported format {other}"))),
    };

    let dataset = generate_synthetic_dataset(&config)?;
    std::fs::create_dir_all(&args.output).map_err(io::IoError::from)?;
    let mut paths = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        let name = format!("img_{i:04}.{ext}");
        io::save_gray_image(&args.output.join(&name), img, depth)?;
        paths.push(name);
    }
    let manifest = Manifest::from_dataset(&dataset, &paths);
    io::write_json(&args.output.join("manifest.json"), &manifest)?;
    io::write_corner_csv(&args.output.join("corners.csv"), &manifest.corners())?;

    // ground-truth calibration, handy as a reference or explicit --init;
    // the effective blur combines anti-aliasing with the extra image blur
    let sigma_true = (args.aa.powi(2) + args.blur.powi(2)).sqrt().max(0.05);
    let gt_estimate = photocal::CalibrationEstimate::with_uniform_sigma(
        intrinsics,
        dataset.poses.clone(),
        board.point_count(),
        sigma_true,
    );
    let ids: Vec<usize> = (0..dataset.images.len()).collect();
    let gt_dto = EstimateDto::from_estimate(&gt_estimate, &ids);
    let gt_file = CalibrationFile {
        initial: gt_dto.clone(),
        refined: gt_dto,
        solver_report: SolveReportDto {
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
            termination: photocal::TerminationReason::GradientTolerance,
            cost_trace: vec![0.0],
            failed_pixel_evals: 0,
            high_condition_warning: false,
        },
    };
    io::write_json(&args.output.join("gt_calibration.json"), &gt_file)?;
    if args.corner_noise > 0.0 {
        let noisy = perturb_corners(&dataset.corners, args.corner_noise, args.seed);
        let noisy_manifest = Manifest::from_dataset(
            &photocal::SyntheticDataset {
                corners: noisy,
                ..dataset.clone()
            },
            &paths,
        );
        io::write_corner_csv(
            &args.output.join("corners_noisy.csv"),
            &noisy_manifest.corners(),
        )?;
    }
    println!(
        "wrote {} images, manifest.json and corners.csv to {}",
        dataset.images.len(),
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset manifest; provides the image files and the board geometry.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    /// Comma-separated image files (requires --rows/--cols/--spacing).
    #[arg(long, value_delimiter = ',')]
    images: Vec<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// Corner CSV for the images being calibrated.
    #[arg(long)]
    corners: Option<PathBuf>,
    /// Start from an existing calibration file instead of corners.
    #[arg(long)]
    init: Option<PathBuf>,
    /// When --init is given, start from its initial estimate instead of the
    /// refined one.
    #[arg(long)]
    use_initial: bool,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long, value_enum, default_value_t = DistortionArg::Full)]
    distortion: DistortionArg,
    /// Solve the normal equations densely instead of by Schur elimination.
    #[arg(long)]
    no_schur: bool,
    #[arg(long, default_value_t = 1.0)]
    sigma_init: f64,
    #[arg(long)]
    threads: Option<usize>,
    /// Recorded in the output; calibration itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct LoadedSet {
    images: Vec<Image>,
    image_ids: Vec<usize>,
    board: BoardSpec,
}

/// Loads the images referenced by the corner file (or all images when no
/// corner file restricts the set), sorted by image id.
fn load_images(args: &CalibrateArgs, wanted: Option<&[usize]>) -> Result<LoadedSet> {
    if let Some(manifest_path) = &args.manifest {
        let manifest: Manifest = io::read_json(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        // ascending image id, so entries pair up with id-sorted corner sets
        let mut entries: Vec<_> = manifest
            .images
            .iter()
            .filter(|e| wanted.map_or(true, |w| w.contains(&e.id)))
            .collect();
        entries.sort_by_key(|e| e.id);
        let mut images = Vec::new();
        let mut image_ids = Vec::new();
        for entry in entries {
            images.push(io::load_gray_image(&dir.join(&entry.path))?);
            image_ids.push(entry.id);
        }
        if let Some(w) = wanted {
            if image_ids.len() != w.len() {
                return Err(CliError::config(
                    "corner file references image ids missing from the manifest",
                ));
            }
        }
        Ok(LoadedSet {
            images,
            image_ids,
            board: manifest.board,
        })
    } else {
        if args.images.is_empty() {
            return Err(CliError::config(
                "provide either --manifest or --images (with --rows/--cols/--spacing)",
            ));
        }
        let (Some(rows), Some(cols), Some(spacing)) = (args.rows, args.cols, args.spacing) else {
            return Err(CliError::config(
                "--images requires --rows, --cols and --spacing",
            ));
        };
        let board = BoardSpec::checkerboard(rows, cols, spacing, args.margin)
            .map_err(|e| CliError::config(e.to_string()))?;
        let mut images = Vec::new();
        for p in &args.images {
            images.push(io::load_gray_image(p)?);
        }
        let image_ids = (0..images.len()).collect();
        Ok(LoadedSet {
            images,
            image_ids,
            board,
        })
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let opts = SolverOptions {
        lm: LmOptions {
            max_iterations: args.max_iterations,
            ..Default::default()
        },
        distortion_mask: args.distortion.into(),
        use_schur: !args.no_schur,
        sigma_init_px: args.sigma_init,
        threads: args.threads,
        seed: args.seed,
    };

    let outcome;
    let image_ids;
    if let Some(init_path) = &args.init {
        let file: CalibrationFile = io::read_json(init_path)?;
        let dto = if args.use_initial {
            &file.initial
        } else {
            &file.refined
        };
        let est = dto.to_estimate()?;
        let wanted: Vec<usize> = dto.poses.iter().map(|p| p.image_id).collect();
        let set = load_images(&args, Some(&wanted))?;
        image_ids = set.image_ids.clone();
        // images come back sorted by id; permute the estimate to match
        let mut poses = Vec::with_capacity(image_ids.len());
        let mut sigmas = Vec::with_capacity(est.sigmas.len());
        for id in &image_ids {
            let k = wanted
                .iter()
                .position(|w| w == id)
                .expect("wanted ids come from the estimate");
            poses.push(est.poses[k]);
            sigmas.extend_from_slice(&est.sigmas[k * est.n_points..(k + 1) * est.n_points]);
        }
        let est = photocal::CalibrationEstimate {
            intrinsics: est.intrinsics,
            poses,
            sigmas,
            n_points: est.n_points,
        };
        outcome = calibrate(&set.images, CalibrateInit::Estimate(est), &set.board, &opts)?;
    } else {
        let Some(corner_path) = &args.corners else {
            return Err(CliError::config(
                "either --corners or --init must be provided",
            ));
        };
        let corners = io::read_corner_csv(corner_path)?;
        let wanted: Vec<usize> = corners.iter().map(|c| c.image_id).collect();
        let set = load_images(&args, Some(&wanted))?;
        image_ids = set.image_ids.clone();
        outcome = calibrate(
            &set.images,
            CalibrateInit::Corners(&corners),
            &set.board,
            &opts,
        )?;
    }

    for e in &outcome.excluded {
        eprintln!(
            "warning: interest point {} has no pixels in image {}",
            e.point, image_ids[e.image]
        );
    }
    let file = CalibrationFile {
        initial: EstimateDto::from_estimate(&outcome.initial, &image_ids),
        refined: EstimateDto::from_estimate(&outcome.refined, &image_ids),
        solver_report: SolveReportDto::from(&outcome.report),
    };
    io::write_json(&args.output, &file)?;
    println!(
        "calibrated {} images: cost {:.6e} -> {:.6e} in {} iterations ({:?})",
        image_ids.len(),
        outcome.report.initial_cost,
        outcome.report.final_cost,
        outcome.report.iterations,
        outcome.report.termination
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    PerPixel,
    Testset,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    calibration: PathBuf,
    /// Evaluate the initial (corner-based) estimate instead of the refined one.
    #[arg(long)]
    use_initial: bool,
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// Ground-truth manifest (per-pixel mode).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Test-set corner CSV (testset mode).
    #[arg(long)]
    corners: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Output JSON path; a CSV summary is written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Recorded in the CSV summary for bookkeeping.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

fn summary_csv(path: &Path, n: usize, seed: u64, method: &str, rms: f64, std: f64) -> Result<()> {
    let csv_path = path.with_extension("csv");
    let body = format!("n,seed,method,rms_px,std\n{n},{seed},{method},{rms:?},{std:?}\n");
    std::fs::write(csv_path, body).map_err(io::IoError::from)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    setup_threads(args.threads)?;
    let file: CalibrationFile = io::read_json(&args.calibration)?;
    let dto = if args.use_initial {
        &file.initial
    } else {
        &file.refined
    };
    let method = if args.use_initial { "init" } else { "ours" };
    let intr = dto.intrinsics();
    let n = dto.poses.len();
    match args.mode {
        EvalMode::PerPixel => {
            let Some(manifest_path) = &args.manifest else {
                return Err(CliError::config("per-pixel mode requires --manifest"));
            };
            if args.stride == 0 {
                return Err(CliError::config("stride must be at least 1"));
            }
            let manifest: Manifest = io::read_json(manifest_path)?;
            let truth: CameraIntrinsics = (&manifest.intrinsics).into();
            let report = per_pixel_reprojection_error(
                &truth,
                &intr,
                manifest.width,
                manifest.height,
                args.stride,
            );
            io::write_json(&args.output, &PerPixelErrorDto::from(&report))?;
            summary_csv(&args.output, n, args.seed, method, report.rms_px, 0.0)?;
            println!(
                "per-pixel reprojection error: rms {:.6} px, max {:.6} px over {} samples",
                report.rms_px, report.max_px, report.pixel_count
            );
        }
        EvalMode::Testset => {
            let Some(corner_path) = &args.corners else {
                return Err(CliError::config("testset mode requires --corners"));
            };
            let corners = io::read_corner_csv(corner_path)?;
            let report = testset_reprojection(&intr, &corners)?;
            io::write_json(&args.output, &TestsetReportDto::from(&report))?;
            summary_csv(
                &args.output,
                n,
                args.seed,
                method,
                report.mean_rms_px,
                report.std_rms_px,
            )?;
            println!(
                "testset reprojection: {:.6} +/- {:.6} px over {} images",
                report.mean_rms_px,
                report.std_rms_px,
                report.per_image.len()
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Args)]
struct CompareArgs {
    /// Manifest of a clean dataset (blur and noise are applied per cell).
    #[arg(long)]
    manifest: PathBuf,
    /// Images per trial; comma-separated list sweeps several values.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    n: Vec<usize>,
    /// Image blur sigma in pixels per cell.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    sigma: Vec<f64>,
    /// Pixel noise sigma (fraction of range) per cell.
    #[arg(long = "sigma-n", value_delimiter = ',', default_value = "0.01")]
    sigma_n: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Gaussian noise added to ground-truth corners for the initialization.
    #[arg(long, default_value_t = 0.3)]
    corner_noise: f64,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, value_enum, default_value_t = DistortionArg::None)]
    distortion: DistortionArg,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    use photocal::synth::{derive_seed, sample_image_subset, SeedPurpose};

    setup_threads(args.threads)?;
    if args.trials == 0 {
        return Err(CliError::config("at least one trial is required"));
    }
    let manifest: Manifest = io::read_json(&args.manifest)?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let mut clean_images = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        clean_images.push(io::load_gray_image(&dir.join(&entry.path))?);
    }
    let gt_intr: CameraIntrinsics = (&manifest.intrinsics).into();
    let gt_corners: Vec<Vec<(usize, f64, f64)>> = manifest
        .images
        .iter()
        .map(|img| img.corners.iter().map(|c| (c.point, c.x, c.y)).collect())
        .collect();

    let opts = SolverOptions {
        lm: LmOptions {
            max_iterations: args.max_iterations,
            ..Default::default()
        },
        distortion_mask: args.distortion.into(),
        seed: args.seed,
        ..Default::default()
    };

    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &n in &args.n {
        if n == 0 || n > clean_images.len() {
            return Err(CliError::config(format!(
                "n = {n} is outside the dataset size {}",
                clean_images.len()
            )));
        }
        for &sigma in &args.sigma {
            for &sigma_n in &args.sigma_n {
                for trial in 0..args.trials {
                    let trial_tag = cell * 100_000 + trial as u64;
                    // deterministic image subset for this trial
                    let picked = sample_image_subset(
                        clean_images.len(),
                        n,
                        derive_seed(args.seed, SeedPurpose::TrialSampling, trial_tag),
                    );

                    let images: Vec<Image> = picked
                        .iter()
                        .enumerate()
                        .map(|(k, &idx)| {
                            degrade_image(
                                &clean_images[idx],
                                sigma,
                                sigma_n,
                                derive_seed(
                                    args.seed,
                                    SeedPurpose::PixelNoise,
                                    trial_tag * 1000 + k as u64,
                                ),
                            )
                        })
                        .collect();
                    let subset_corners: Vec<Vec<(usize, f64, f64)>> =
                        picked.iter().map(|&idx| gt_corners[idx].clone()).collect();
                    let noisy = perturb_corners(
                        &subset_corners,
                        args.corner_noise,
                        derive_seed(args.seed, SeedPurpose::CornerNoise, trial_tag),
                    );
                    let corner_obs: Vec<ImageCorners> = noisy
                        .iter()
                        .enumerate()
                        .map(|(k, pts)| ImageCorners {
                            image_id: picked[k],
                            points: pts
                                .iter()
                                .map(|&(j, x, y)| photocal::CornerPoint {
                                    point_index: j,
                                    board_uv: manifest.board.point_uv(j),
                                    pixel: (x, y),
                                })
                                .collect(),
                        })
                        .collect();

                    let mut push = |method: &str, e: f64| {
                        rows.push(SweepRow {
                            n,
                            sigma,
                            sigma_n,
                            trial,
                            seed: args.seed,
                            method: method.to_string(),
                            e_rms_px: e,
                        });
                    };
                    match calibrate(
                        &images,
                        CalibrateInit::Corners(&corner_obs),
                        &manifest.board,
                        &opts,
                    ) {
                        Ok(outcome) => {
                            let eval = |c: &CameraIntrinsics| {
                                per_pixel_reprojection_error(
                                    &gt_intr,
                                    c,
                                    manifest.width,
                                    manifest.height,
                                    args.stride,
                                )
                                .rms_px
                            };
                            push("init", eval(&outcome.initial.intrinsics));
                            push("ours", eval(&outcome.refined.intrinsics));
                        }
                        Err(e) => {
                            eprintln!(
                                "warning: trial {trial} of cell (n={n}, sigma={sigma}, sigma_n={sigma_n}) failed: {e}"
                            );
                            push("init", f64::NAN);
                            push("ours", f64::NAN);
                        }
                    }
                }
                cell += 1;
            }
        }
    }
    io::write_sweep_csv(&args.output, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// debug-render

#[derive(Args)]
struct DebugRenderArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    use_initial: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    image_id: usize,
    /// Intensity gain of the difference visualization.
    #[arg(long, default_value_t = 4.0)]
    gain: f64,
    /// Output directory for the rendered and signed-difference images.
    #[arg(long)]
    output: PathBuf,
    /// Accepted for interface uniformity; rendering is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

fn cmd_debug_render(args: DebugRenderArgs) -> Result<()> {
    let _ = args.seed;
    setup_threads(args.threads)?;
    let file: CalibrationFile = io::read_json(&args.calibration)?;
    let dto = if args.use_initial {
        &file.initial
    } else {
        &file.refined
    };
    let est = dto.to_estimate()?;
    let slot = dto
        .poses
        .iter()
        .position(|p| p.image_id == args.image_id)
        .ok_or_else(|| {
            CliError::config(format!(
                "calibration has no pose for image {}",
                args.image_id
            ))
        })?;

    let manifest: Manifest = io::read_json(&args.manifest)?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let entry = manifest
        .images
        .iter()
        .find(|img| img.id == args.image_id)
        .ok_or_else(|| {
            CliError::config(format!("manifest has no image with id {}", args.image_id))
        })?;
    let observed = io::load_gray_image(&dir.join(&entry.path))?;

    let sigmas: Vec<f64> = (0..est.n_points).map(|j| est.sigma(slot, j)).collect();
    let rendered = render_board_image(
        &est.intrinsics,
        &est.poses[slot],
        &manifest.board,
        observed.width,
        observed.height,
        &sigmas,
    )?;
    let diff: Vec<f64> = observed
        .data
        .iter()
        .zip(&rendered.data)
        .map(|(o, r)| o - r)
        .collect();

    std::fs::create_dir_all(&args.output).map_err(io::IoError::from)?;
    io::save_gray_image(
        &args
            .output
            .join(format!("rendered_{:04}.png", args.image_id)),
        &rendered,
        BitDepth::Sixteen,
    )?;
    io::save_signed_difference_png(
        &args.output.join(format!("diff_{:04}.png", args.image_id)),
        &diff,
        observed.width,
        observed.height,
        args.gain,
    )?;
    let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    println!(
        "max |difference| = {max_abs:.6}; wrote rendered_{0:04}.png and diff_{0:04}.png",
        args.image_id
    );
    Ok(())
}
