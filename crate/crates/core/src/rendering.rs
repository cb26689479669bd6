//! Implicit rendering of board pixels, neighborhood construction, and image
//! degradation (blur and sensor noise).
//!
//! Rendering is inverse: each observed pixel is mapped onto the board plane
//! (normalize, undistort, invert the board homography) and the blurred
//! texture is sampled there. The per-point blur is specified in image
//! pixels and converted to board units with the projection stretch factors,
//! evaluated once per interest point.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{
    kernel::{self, Intr, RenderScalar},
    BoardPose, CameraIntrinsics, GeometryError, PixelPoint, HOMOGRAPHY_COND_MAX,
};
use crate::texture::{self, BlurLevel, BoardSpec};

/// Grayscale image with row-major scalar intensities, nominally in `[0, 1]`.
/// Pixel `(x, y)` samples the continuous image plane at coordinates
/// `(x as f64, y as f64)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Applies `v -> lo + (hi - lo) * v` to every pixel.
    pub fn map_range(&mut self, lo: f64, hi: f64) {
        let scale = hi - lo;
        for v in self.data.iter_mut() {
            *v = lo + scale * *v;
        }
    }
}

/// Pixels around one interest point over which the local rendering model is
/// trusted: their board coordinates under the initial calibration lie within
/// half the point spacing in Manhattan distance.
#[derive(Clone, Debug)]
pub struct PixelNeighborhood {
    pub image: usize,
    pub point: usize,
    /// Board coordinates of the interest point; the stretch factors are
    /// evaluated here for the whole neighborhood.
    pub anchor_uv: (f64, f64),
    /// Integer pixel coordinates, row-major order.
    pub pixels: Vec<(u32, u32)>,
}

/// Interest point that received no pixels (projects outside the image).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExcludedPoint {
    pub image: usize,
    pub point: usize,
}

#[derive(Clone, Debug, Default)]
pub struct NeighborhoodSet {
    pub neighborhoods: Vec<PixelNeighborhood>,
    pub excluded: Vec<ExcludedPoint>,
}

/// Shared pixel-to-board machinery for one (intrinsics, pose) pair, generic
/// over the scalar so the same code produces values and derivatives.
pub(crate) struct BoardProjection<R: RenderScalar> {
    pub intr: Intr<R>,
    pub rot: [[R; 3]; 3],
    pub t: [R; 3],
    adj: [[R; 3]; 3],
}

impl<R: RenderScalar> BoardProjection<R> {
    pub fn new(intr: Intr<R>, q: [R; 4], t: [R; 3]) -> Result<Self, GeometryError> {
        let rot = kernel::quat_rotation(&q);
        let h = kernel::homography(&rot, &t);
        let hv = [
            [h[0][0].value(), h[0][1].value(), h[0][2].value()],
            [h[1][0].value(), h[1][1].value(), h[1][2].value()],
            [h[2][0].value(), h[2][1].value(), h[2][2].value()],
        ];
        let det = kernel::det3(&hv);
        if det.abs() < f64::MIN_POSITIVE {
            return Err(GeometryError::SingularHomography {
                cond: f64::INFINITY,
            });
        }
        let adjv = kernel::adjugate3(&hv);
        let ninf = |m: &[[f64; 3]; 3]| {
            m.iter()
                .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0f64, f64::max)
        };
        let cond = ninf(&hv) * ninf(&adjv) / det.abs();
        if !cond.is_finite() || cond > HOMOGRAPHY_COND_MAX {
            return Err(GeometryError::SingularHomography { cond });
        }
        let adj = kernel::adjugate3(&h);
        Ok(BoardProjection { intr, rot, t, adj })
    }

    /// Inverse projection of a fixed pixel onto the board plane.
    #[inline]
    pub fn pixel_to_uv(&self, x: f64, y: f64) -> Result<(R, R), GeometryError> {
        let xn = (R::constant(x) - self.intr.x0) / self.intr.fx;
        let yn = (R::constant(y) - self.intr.y0) / self.intr.fy;
        let (ux, uy) = R::undistort(&self.intr, xn, yn)?;
        let w = kernel::mat3_mul_vec3(&self.adj, &[ux, uy, R::constant(1.0)]);
        if w[2].value() == 0.0 {
            return Err(GeometryError::SingularHomography {
                cond: f64::INFINITY,
            });
        }
        Ok((w[0] / w[2], w[1] / w[2]))
    }

    /// Stretch factors at board point `(u, v)`.
    pub fn stretch(&self, u: f64, v: f64) -> Result<(R, R), GeometryError> {
        texture::stretch_generic(&self.intr, &self.rot, &self.t, u, v)
    }

    /// Per-pixel render: sample the blurred texture at the pixel's board
    /// coordinates with texture-space blur `(sigma_u, sigma_v)`.
    #[inline]
    pub fn render(
        &self,
        spec: &BoardSpec,
        x: f64,
        y: f64,
        sigma_u: R,
        sigma_v: R,
    ) -> Result<R, GeometryError> {
        let (u, v) = self.pixel_to_uv(x, y)?;
        Ok(texture::tg_with_window(spec, u, v, sigma_u, sigma_v, 1.0))
    }
}

/// Renders the board intensity seen by one pixel: the blurred texture
/// sampled at the pixel's inverse projection, with the image-space blur
/// `sigma` converted to board units at `anchor_uv` (the interest point the
/// pixel's neighborhood belongs to).
pub fn render_pixel(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    spec: &BoardSpec,
    px: PixelPoint,
    sigma: BlurLevel,
    anchor_uv: (f64, f64),
) -> Result<f64, GeometryError> {
    let proj = BoardProjection::<f64>::new(
        Intr::from_intrinsics(intr),
        pose.q,
        [pose.t.x, pose.t.y, pose.t.z],
    )?;
    let (mu, mv) = proj.stretch(anchor_uv.0, anchor_uv.1)?;
    let s = sigma.effective();
    proj.render(spec, px.x, px.y, s / mu, s / mv)
}

/// Builds the pixel neighborhoods of every interest point in one image under
/// the given (initial) calibration: all integer pixels whose board
/// coordinates lie within `spacing / 2` Manhattan distance of the point.
/// Points that receive no pixels are reported in `excluded`.
pub fn build_neighborhoods(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    spec: &BoardSpec,
    width: usize,
    height: usize,
    image_index: usize,
) -> Result<NeighborhoodSet, GeometryError> {
    let proj = BoardProjection::<f64>::new(
        Intr::from_intrinsics(intr),
        pose.q,
        [pose.t.x, pose.t.y, pose.t.z],
    )?;
    let (x0, x1, y0, y1) = scan_bounds(intr, pose, spec, width, height);
    let half = spec.spacing / 2.0;
    let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); spec.point_count()];
    for y in y0..y1 {
        for x in x0..x1 {
            let Ok((u, v)) = proj.pixel_to_uv(x as f64, y as f64) else {
                continue;
            };
            let (j, d) = spec.nearest_point(u, v);
            if d <= half {
                buckets[j].push((x as u32, y as u32));
            }
        }
    }
    let mut set = NeighborhoodSet::default();
    for (j, pixels) in buckets.into_iter().enumerate() {
        if pixels.is_empty() {
            set.excluded.push(ExcludedPoint {
                image: image_index,
                point: j,
            });
        } else {
            set.neighborhoods.push(PixelNeighborhood {
                image: image_index,
                point: j,
                anchor_uv: spec.point_uv(j),
                pixels,
            });
        }
    }
    Ok(set)
}

/// Conservative pixel bounding box of the projected point grid, padded by
/// one projected cell; falls back to the full frame if projection fails.
fn scan_bounds(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    spec: &BoardSpec,
    width: usize,
    height: usize,
) -> (usize, usize, usize, usize) {
    let mut pts = Vec::with_capacity(spec.point_count());
    for j in 0..spec.point_count() {
        let (u, v) = spec.point_uv(j);
        match intr.project(&pose.board_point(u, v)) {
            Ok(p) => pts.push(p),
            Err(_) => return (0, width, 0, height),
        }
    }
    let mut cell = 0.0f64;
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let j = r * spec.cols + c;
            if c + 1 < spec.cols {
                cell = cell.max(pts[j].distance(&pts[j + 1]));
            }
            if r + 1 < spec.rows {
                cell = cell.max(pts[j].distance(&pts[j + spec.cols]));
            }
        }
    }
    let pad = cell + 2.0;
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    (
        ((xmin - pad).floor().max(0.0)) as usize,
        (((xmax + pad).ceil() + 1.0).min(width as f64)) as usize,
        ((ymin - pad).floor().max(0.0)) as usize,
        (((ymax + pad).ceil() + 1.0).min(height as f64)) as usize,
    )
}

/// Full-frame rendering: board pixels get the blurred texture (each with the
/// blur of its nearest interest point), everything else the 0.5 background.
/// Used for synthetic generation and debug output.
pub fn render_board_image(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    spec: &BoardSpec,
    width: usize,
    height: usize,
    sigma_px_per_point: &[f64],
) -> Result<Image, GeometryError> {
    assert_eq!(sigma_px_per_point.len(), spec.point_count());
    let proj = BoardProjection::<f64>::new(
        Intr::from_intrinsics(intr),
        pose.q,
        [pose.t.x, pose.t.y, pose.t.z],
    )?;
    let mut sigmas_uv = Vec::with_capacity(spec.point_count());
    for j in 0..spec.point_count() {
        let (u, v) = spec.point_uv(j);
        let (mu, mv) = proj.stretch(u, v)?;
        let s = BlurLevel(sigma_px_per_point[j]).effective();
        sigmas_uv.push((s / mu, s / mv));
    }
    let (ulo, uhi, vlo, vhi) = spec.board_rect();
    let mut img = Image::filled(width, height, 0.5);
    img.data
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let Ok((u, v)) = proj.pixel_to_uv(x as f64, y as f64) else {
                    continue;
                };
                if u < ulo || u > uhi || v < vlo || v > vhi {
                    continue;
                }
                let (j, _) = spec.nearest_point(u, v);
                let (su, sv) = sigmas_uv[j];
                *out = texture::tg_with_window(spec, u, v, su, sv, 1.0);
            }
        });
    Ok(img)
}

/// Gaussian blur (separable, kernel radius `ceil(4 sigma)`, clamped edges)
/// followed by i.i.d. additive Gaussian noise. Values are not clamped after
/// the noise, matching a linear sensor model. Deterministic for a seed.
pub fn degrade_image(img: &Image, sigma_blur_px: f64, sigma_noise: f64, seed: u64) -> Image {
    let mut out = img.clone();
    if sigma_blur_px > 0.0 {
        let radius = (4.0 * sigma_blur_px).ceil() as i64;
        let mut weights = Vec::with_capacity(2 * radius as usize + 1);
        for i in -radius..=radius {
            weights.push((-(i as f64).powi(2) / (2.0 * sigma_blur_px * sigma_blur_px)).exp());
        }
        let sum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= sum;
        }
        let (w, h) = (img.width as i64, img.height as i64);
        let mut tmp = vec![0.0; img.data.len()];
        // horizontal
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let xs = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += wt * out.data[(y * w + xs) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        // vertical
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let ys = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += wt * tmp[(ys * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = acc;
            }
        }
    }
    if sigma_noise > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_noise).expect("valid noise sigma");
        for v in out.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn frontal_setup() -> (CameraIntrinsics, BoardPose, BoardSpec) {
        let intr = CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0);
        let pose = BoardPose::identity_at(Vector3::new(-3.0, -2.0, 10.0));
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        (intr, pose, spec)
    }

    #[test]
    fn render_pixel_black_cell_center_and_saddle() {
        let (intr, pose, spec) = frontal_setup();
        // cell center (0.5, 0.5) is black
        let px = intr.project(&pose.board_point(0.5, 0.5)).unwrap();
        let c = render_pixel(&intr, &pose, &spec, px, BlurLevel(0.5), (0.0, 0.0)).unwrap();
        assert!(c < 0.01, "black cell center rendered {c}");
        // interest point is a saddle: 0.5 regardless of blur
        let px = intr.project(&pose.board_point(2.0, 3.0)).unwrap();
        for s in [0.1, 1.0, 4.0] {
            let c = render_pixel(&intr, &pose, &spec, px, BlurLevel(s), (2.0, 3.0)).unwrap();
            assert_relative_eq!(c, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn render_pixel_matches_texture_blur_for_frontoparallel_board() {
        let intr = CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0);
        let pose = BoardPose::identity_at(Vector3::new(-2.0, -2.0, 1.0));
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        // board unit spans exactly f/z = 1000 px, so sigma 2 px = 0.002 units
        for (u, v) in [(0.3, 0.4), (1.7, 2.2), (3.01, 0.98)] {
            let px = intr.project(&pose.board_point(u, v)).unwrap();
            let got = render_pixel(&intr, &pose, &spec, px, BlurLevel(2.0), (1.0, 1.0)).unwrap();
            let want = spec.texture_blurred(u, v, 2.0 / 1000.0, 2.0 / 1000.0);
            assert_relative_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn neighborhood_size_matches_projected_cell_area() {
        let (intr, pose, spec) = frontal_setup();
        let set = build_neighborhoods(&intr, &pose, &spec, 1920, 1080, 0).unwrap();
        assert!(set.excluded.is_empty());
        assert_eq!(set.neighborhoods.len(), spec.point_count());
        // at depth 10 with f=1000 a board unit is 100 px; the Manhattan ball
        // of radius 50 px holds 2 * 50^2 = 5000 pixels
        for n in &set.neighborhoods {
            let count = n.pixels.len() as f64;
            assert!(
                (count - 5000.0).abs() < 300.0,
                "point {} has {} pixels",
                n.point,
                count
            );
        }
    }

    #[test]
    fn neighborhoods_are_disjoint_and_in_bounds() {
        let (intr, _, spec) = frontal_setup();
        let pose = BoardPose::new([0.95, 0.2, -0.15, 0.1], Vector3::new(-2.0, -1.0, 8.0));
        let set = build_neighborhoods(&intr, &pose, &spec, 1920, 1080, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for n in &set.neighborhoods {
            assert_eq!(n.image, 3);
            for &(x, y) in &n.pixels {
                assert!((x as usize) < 1920 && (y as usize) < 1080);
                assert!(seen.insert((x, y)), "pixel ({x},{y}) assigned twice");
            }
        }
    }

    #[test]
    fn neighborhood_pixels_map_close_to_their_point() {
        let (intr, _, spec) = frontal_setup();
        let pose = BoardPose::new([0.9, -0.25, 0.2, 0.05], Vector3::new(-2.5, -1.5, 9.0));
        let set = build_neighborhoods(&intr, &pose, &spec, 1920, 1080, 0).unwrap();
        let half = spec.spacing / 2.0;
        for n in set.neighborhoods.iter().step_by(7) {
            let (pu, pv) = spec.point_uv(n.point);
            for &(x, y) in n.pixels.iter().step_by(97) {
                let (u, v) = crate::geometry::pixel_to_board(
                    &intr,
                    &pose,
                    PixelPoint::new(x as f64, y as f64),
                )
                .unwrap();
                assert!((u - pu).abs() + (v - pv).abs() <= half + 1e-9);
            }
        }
    }

    #[test]
    fn neighborhood_assignment_matches_exhaustive_nearest_point() {
        let (intr, pose, spec) = frontal_setup();
        let set = build_neighborhoods(&intr, &pose, &spec, 1920, 1080, 0).unwrap();
        for n in set.neighborhoods.iter().step_by(5) {
            for &(x, y) in n.pixels.iter().step_by(211) {
                let (u, v) = crate::geometry::pixel_to_board(
                    &intr,
                    &pose,
                    PixelPoint::new(x as f64, y as f64),
                )
                .unwrap();
                let mut best = (usize::MAX, f64::INFINITY);
                for j in 0..spec.point_count() {
                    let (pu, pv) = spec.point_uv(j);
                    let d = (u - pu).abs() + (v - pv).abs();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                assert_eq!(n.point, best.0);
            }
        }
    }

    #[test]
    fn board_outside_image_excludes_all_points() {
        let (intr, _, spec) = frontal_setup();
        let pose = BoardPose::identity_at(Vector3::new(80.0, 0.0, 10.0));
        let set = build_neighborhoods(&intr, &pose, &spec, 1920, 1080, 2).unwrap();
        assert!(set.neighborhoods.is_empty());
        assert_eq!(set.excluded.len(), spec.point_count());
        assert!(set.excluded.iter().all(|e| e.image == 2));
    }

    #[test]
    fn degrade_identity_without_blur_and_noise() {
        let (intr, pose, spec) = frontal_setup();
        let img = render_board_image(&intr, &pose, &spec, 320, 240, &vec![0.5; 35]).unwrap();
        assert_eq!(degrade_image(&img, 0.0, 0.0, 1), img);
    }

    #[test]
    fn degrade_noise_statistics_and_determinism() {
        let img = Image::filled(1920, 1080, 0.5);
        let noisy = degrade_image(&img, 0.0, 0.03, 42);
        let n = noisy.data.len() as f64;
        let mean = noisy.data.iter().sum::<f64>() / n;
        let var = noisy.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.029..=0.031).contains(&std), "sample std {std}");
        assert_eq!(noisy, degrade_image(&img, 0.0, 0.03, 42));
        assert_ne!(noisy, degrade_image(&img, 0.0, 0.03, 43));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(64, 48, 0.7);
        let blurred = degrade_image(&img, 1.5, 0.0, 0);
        for v in &blurred.data {
            assert_relative_eq!(*v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_sigma_doubles_edge_transition_width() {
        let intr = CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0);
        let pose = BoardPose::identity_at(Vector3::new(-3.0, -2.0, 10.0));
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        let rise = |sigma: f64| {
            let img =
                render_board_image(&intr, &pose, &spec, 1920, 1080, &vec![sigma; 35]).unwrap();
            // walk along the row through (u, v) = (*, 0.5): vertical edge at u = 1
            let y = intr.project(&pose.board_point(1.0, 0.5)).unwrap().y.round() as usize;
            let x0 = intr.project(&pose.board_point(0.5, 0.5)).unwrap().x;
            let x1 = intr.project(&pose.board_point(1.5, 0.5)).unwrap().x;
            let profile: Vec<f64> = (x0 as usize..x1 as usize).map(|x| img.get(x, y)).collect();
            let lo = 0.1; // 10% and 90% of the 0 -> 1 transition
            let hi = 0.9;
            let first = profile.iter().position(|&v| v > lo).unwrap();
            let last = profile.iter().position(|&v| v > hi).unwrap();
            (last - first) as f64
        };
        let (w1, w2) = (rise(2.0), rise(4.0));
        assert!(
            (w2 / w1 - 2.0).abs() < 0.25,
            "rise widths {w1} and {w2} not in ratio 2"
        );
    }

    #[test]
    fn render_derivatives_match_finite_differences_per_pixel() {
        use crate::dual::{Dual, Real};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        let mut checked = 0;
        while checked < 1000 {
            let intr = CameraIntrinsics::pinhole(
                rng.gen_range(500.0..900.0),
                rng.gen_range(500.0..900.0),
                320.0,
                240.0,
            )
            .with_distortion(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.002..0.002),
                rng.gen_range(-0.002..0.002),
            );
            let angle: f64 = rng.gen_range(0.0..0.6);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
            let q = [c, s * phi.cos(), s * phi.sin(), 0.0];
            let t = [
                rng.gen_range(-0.5..0.5) - 3.0,
                rng.gen_range(-0.5..0.5) - 2.0,
                rng.gen_range(8.0..14.0),
            ];
            let sigma_px: f64 = rng.gen_range(0.3..2.0);
            let anchor_j = rng.gen_range(0..spec.point_count());
            let anchor = spec.point_uv(anchor_j);
            // a pixel near that interest point
            let pose = BoardPose::new(q, Vector3::new(t[0], t[1], t[2]));
            let Ok(center) = intr.project(&pose.board_point(
                anchor.0 + rng.gen_range(-0.4..0.4),
                anchor.1 + rng.gen_range(-0.4..0.4),
            )) else {
                continue;
            };
            let px = (center.x.round(), center.y.round());

            // all 16 parameters seeded: intrinsics, pose, log sigma
            let gi = Intr {
                fx: Dual::<16>::variable(intr.fx, 0),
                fy: Dual::variable(intr.fy, 1),
                x0: Dual::variable(intr.x0, 2),
                y0: Dual::variable(intr.y0, 3),
                k1: Dual::variable(intr.k1, 4),
                k2: Dual::variable(intr.k2, 5),
                p1: Dual::variable(intr.p1, 6),
                p2: Dual::variable(intr.p2, 7),
            };
            let qd = [
                Dual::variable(q[0], 8),
                Dual::variable(q[1], 9),
                Dual::variable(q[2], 10),
                Dual::variable(q[3], 11),
            ];
            let td = [
                Dual::variable(t[0], 12),
                Dual::variable(t[1], 13),
                Dual::variable(t[2], 14),
            ];
            let Ok(proj) = BoardProjection::new(gi, qd, td) else {
                continue;
            };
            let Ok((mu, mv)) = proj.stretch(anchor.0, anchor.1) else {
                continue;
            };
            let sd = Dual::variable(sigma_px.ln(), 15).exp();
            let Ok(val) = proj.render(&spec, px.0, px.1, sd / mu, sd / mv) else {
                continue;
            };

            // finite differences through the plain-f64 path
            let h = 1e-6;
            let eval = |params: &[f64; 16]| -> f64 {
                let gi = Intr {
                    fx: params[0],
                    fy: params[1],
                    x0: params[2],
                    y0: params[3],
                    k1: params[4],
                    k2: params[5],
                    p1: params[6],
                    p2: params[7],
                };
                let proj = BoardProjection::new(
                    gi,
                    [params[8], params[9], params[10], params[11]],
                    [params[12], params[13], params[14]],
                )
                .unwrap();
                let (mu, mv) = proj.stretch(anchor.0, anchor.1).unwrap();
                let s = params[15].exp();
                proj.render(&spec, px.0, px.1, s / mu, s / mv).unwrap()
            };
            let base = [
                intr.fx,
                intr.fy,
                intr.x0,
                intr.y0,
                intr.k1,
                intr.k2,
                intr.p1,
                intr.p2,
                q[0],
                q[1],
                q[2],
                q[3],
                t[0],
                t[1],
                t[2],
                sigma_px.ln(),
            ];
            for k in 0..16 {
                let mut up = base;
                up[k] += h;
                let mut dn = base;
                dn[k] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                let a = val.eps[k];
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-5 * a.abs().max(fd.abs()).max(1e-2),
                    "pixel {checked} param {k}: analytic {a} vs fd {fd}"
                );
            }
            checked += 1;
        }
    }

    /// A binary image turns the squared-difference objective into counting:
    /// minimizing it is the same as maximizing the intensity sum over pixels
    /// the model classifies as white minus the sum over black ones. Check
    /// that the two objectives rank candidate parameter vectors identically.
    #[test]
    fn least_squares_ranks_like_the_signed_sum_on_binary_images() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let intr = CameraIntrinsics::pinhole(600.0, 600.0, 320.0, 240.0);
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        // tilted pose so cell edges land at varied sub-pixel positions
        let pose = BoardPose::new([0.96, 0.15, -0.2, 0.08], Vector3::new(-3.0, -2.0, 8.0));
        let sigma_min = crate::texture::SIGMA_MIN_PX;

        // binary observed image from the true pose
        let sharp =
            render_board_image(&intr, &pose, &spec, 640, 480, &vec![sigma_min; 35]).unwrap();
        let mut binary = sharp.clone();
        for v in binary.data.iter_mut() {
            *v = if *v > 0.5 { 1.0 } else { 0.0 };
        }
        let set = build_neighborhoods(&intr, &pose, &spec, 640, 480, 0).unwrap();

        let objectives = |cand: &BoardPose| -> (f64, f64) {
            let proj = BoardProjection::<f64>::new(
                Intr::from_intrinsics(&intr),
                cand.q,
                [cand.t.x, cand.t.y, cand.t.z],
            )
            .unwrap();
            let mut sq = 0.0;
            let mut signed = 0.0;
            for nb in &set.neighborhoods {
                let (mu, mv) = proj.stretch(nb.anchor_uv.0, nb.anchor_uv.1).unwrap();
                let (su, sv) = (sigma_min / mu, sigma_min / mv);
                for &(x, y) in &nb.pixels {
                    let c = proj.render(&spec, x as f64, y as f64, su, sv).unwrap();
                    let i = binary.get(x as usize, y as usize);
                    sq += (c - i) * (c - i);
                    if c > 0.5 {
                        signed += i;
                    } else {
                        signed -= i;
                    }
                }
            }
            (sq, signed)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut agree = 0;
        for _ in 0..100 {
            // two candidates shifted along a random direction by clearly
            // different amounts (about 0.4 and 1.0 pixels in the image)
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(phi.cos(), phi.sin(), 0.0);
            let mut near = pose;
            near.t += dir * 0.005;
            let mut far = pose;
            far.t += dir * 0.013;
            let (sq_near, signed_near) = objectives(&near);
            let (sq_far, signed_far) = objectives(&far);
            if (sq_near < sq_far) == (signed_near > signed_far) {
                agree += 1;
            }
        }
        assert_eq!(agree, 100, "objectives disagreed on {} trials", 100 - agree);
    }

    #[test]
    fn focal_perturbation_concentrates_residuals_at_edges() {
        let intr = CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0);
        let pose = BoardPose::identity_at(Vector3::new(-3.0, -2.0, 10.0));
        let spec = BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap();
        let sigmas = vec![1.0; 35];
        let truth = render_board_image(&intr, &pose, &spec, 1920, 1080, &sigmas).unwrap();
        let mut perturbed = intr;
        perturbed.fx *= 1.01;
        perturbed.fy *= 1.01;
        let render = render_board_image(&perturbed, &pose, &spec, 1920, 1080, &sigmas).unwrap();

        let proj = BoardProjection::<f64>::new(
            Intr::from_intrinsics(&intr),
            pose.q,
            [pose.t.x, pose.t.y, pose.t.z],
        )
        .unwrap();
        let (ulo, uhi, vlo, vhi) = spec.texture_rect();
        let px_per_unit = 100.0; // f / z
        let mut total = 0.0;
        let mut near_edges = 0.0;
        for y in 0..1080 {
            for x in 0..1920 {
                let r = render.get(x, y) - truth.get(x, y);
                if r == 0.0 {
                    continue;
                }
                let (u, v) = proj.pixel_to_uv(x as f64, y as f64).unwrap();
                if u < ulo || u > uhi || v < vlo || v > vhi {
                    continue;
                }
                let du = (u - u.round()).abs() * px_per_unit;
                let dv = (v - v.round()).abs() * px_per_unit;
                total += r * r;
                if du.min(dv) < 3.0 {
                    near_edges += r * r;
                }
            }
        }
        assert!(
            near_edges > 0.9 * total,
            "only {:.1}% of residual energy near edges",
            100.0 * near_edges / total
        );
    }
}
