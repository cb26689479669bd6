//! Board texture function and its Gaussian-blurred, differentiable version,
//! plus the image-space-to-texture-space blur correction factors.
//!
//! The blurred checkerboard is evaluated analytically. Writing the board as
//!
//! ```text
//! T(u, v) = 1 - (B(u) B(v) + s(u) s(v) w(u) w(v)) / 2
//! ```
//!
//! with `B` the indicator of the textured rectangle, `s` the unit square
//! wave of period `2 * spacing` and `w` the per-axis window, every factor is
//! one-dimensional, so convolving with a separable Gaussian kernel turns
//! each factor into a finite sum of error functions. The result is exact up
//! to the truncation of the transition series, smooth in all arguments, and
//! cheap enough to evaluate per pixel inside the optimizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Real;
use crate::geometry::{kernel, BoardPose, CameraIntrinsics, GeometryError};

/// Lower bound on per-point blur, in pixels.
pub const SIGMA_MIN_PX: f64 = 0.05;

/// Blur standard deviation around one interest point, in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurLevel(pub f64);

impl BlurLevel {
    /// The blur actually used for rendering, floored at [`SIGMA_MIN_PX`].
    pub fn effective(&self) -> f64 {
        self.0.max(SIGMA_MIN_PX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Checkerboard,
}

#[derive(Debug, Error)]
pub enum BoardSpecError {
    #[error("interest point grid must be at least 2x2 (got {rows}x{cols})")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("spacing must be positive and finite (got {0})")]
    BadSpacing(f64),
    #[error("margin must be non-negative and finite (got {0})")]
    BadMargin(f64),
}

/// Calibration board description: a `rows x cols` grid of interest points
/// with the given pitch, surrounded by one extra ring of squares and a white
/// quiet zone of width `margin`.
///
/// Interest point `j` (row-major) sits at board coordinates
/// `(col * spacing, row * spacing)`; each point is a checkerboard saddle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub margin: f64,
    pub texture_kind: TextureKind,
}

impl BoardSpec {
    pub fn checkerboard(
        rows: usize,
        cols: usize,
        spacing: f64,
        margin: f64,
    ) -> Result<Self, BoardSpecError> {
        if rows < 2 || cols < 2 {
            return Err(BoardSpecError::GridTooSmall { rows, cols });
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(BoardSpecError::BadSpacing(spacing));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(BoardSpecError::BadMargin(margin));
        }
        Ok(BoardSpec {
            rows,
            cols,
            spacing,
            margin,
            texture_kind: TextureKind::Checkerboard,
        })
    }

    pub fn point_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Board coordinates of interest point `j` (row-major).
    pub fn point_uv(&self, j: usize) -> (f64, f64) {
        let row = j / self.cols;
        let col = j % self.cols;
        (col as f64 * self.spacing, row as f64 * self.spacing)
    }

    /// Textured area: the interest-point grid plus one ring of squares.
    pub fn texture_rect(&self) -> (f64, f64, f64, f64) {
        let h = self.spacing;
        (-h, self.cols as f64 * h, -h, self.rows as f64 * h)
    }

    /// Physical board area: textured area plus the quiet zone.
    pub fn board_rect(&self) -> (f64, f64, f64, f64) {
        let (ul, uh, vl, vh) = self.texture_rect();
        (
            ul - self.margin,
            uh + self.margin,
            vl - self.margin,
            vh + self.margin,
        )
    }

    /// Index of the interest point nearest to `(u, v)` in Manhattan distance
    /// and that distance. Ties resolve toward the lower index.
    pub fn nearest_point(&self, u: f64, v: f64) -> (usize, f64) {
        let col = nearest_grid_index(u, self.spacing, self.cols);
        let row = nearest_grid_index(v, self.spacing, self.rows);
        let du = (u - col as f64 * self.spacing).abs();
        let dv = (v - row as f64 * self.spacing).abs();
        (row * self.cols + col, du + dv)
    }

    /// Unblurred texture value. 0 or 1 inside the board area, 0.5 exactly on
    /// cell transitions, 1 (white) in the quiet zone and beyond.
    pub fn texture(&self, u: f64, v: f64) -> f64 {
        tg_with_window(self, u, v, 0.0, 0.0, 1.0)
    }

    /// Texture convolved with an axis-aligned Gaussian of standard deviations
    /// `(sigma_u, sigma_v)` in board units. Converges pointwise to
    /// [`BoardSpec::texture`] away from edges as the blur vanishes.
    pub fn texture_blurred(&self, u: f64, v: f64, sigma_u: f64, sigma_v: f64) -> f64 {
        tg_with_window(self, u, v, sigma_u, sigma_v, 1.0)
    }
}

fn nearest_grid_index(x: f64, h: f64, count: usize) -> usize {
    let max = (count - 1) as i64;
    let f = (x / h).floor() as i64;
    let lo = f.clamp(0, max);
    let hi = (f + 1).clamp(0, max);
    let d_lo = (x - lo as f64 * h).abs();
    let d_hi = (x - hi as f64 * h).abs();
    // strict inequality wins, tie goes to the lower index
    if d_hi < d_lo {
        hi as usize
    } else {
        lo as usize
    }
}

/// Norms of the positional differential of the projection at board point
/// `(u, v)`: how many image pixels one board unit spans along each axis.
/// These convert image-space blur to texture-space blur.
pub fn projection_stretch(
    intr: &CameraIntrinsics,
    pose: &BoardPose,
    u: f64,
    v: f64,
) -> Result<(f64, f64), GeometryError> {
    let gi = kernel::Intr::from_intrinsics(intr);
    let r = pose.rotation();
    let rot = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ];
    let t = [pose.t.x, pose.t.y, pose.t.z];
    stretch_generic(&gi, &rot, &t, u, v)
}

/// Generic stretch computation shared with the dual-number render path.
pub(crate) fn stretch_generic<R: Real>(
    intr: &kernel::Intr<R>,
    rot: &[[R; 3]; 3],
    t: &[R; 3],
    u: f64,
    v: f64,
) -> Result<(R, R), GeometryError> {
    let p = kernel::board_point(rot, t, R::constant(u), R::constant(v));
    let z = p[2].value();
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth { z });
    }
    let j = kernel::project_point_jacobian(intr, p);
    let col_norm = |c: usize| {
        let a = j[0][0] * rot[0][c] + j[0][1] * rot[1][c] + j[0][2] * rot[2][c];
        let b = j[1][0] * rot[0][c] + j[1][1] * rot[1][c] + j[1][2] * rot[2][c];
        (a * a + b * b).sqrt()
    };
    let m_u = col_norm(0);
    let m_v = col_norm(1);
    if !(m_u.value() > 1e-12 && m_v.value() > 1e-12) {
        return Err(GeometryError::DegenerateDifferential { u, v });
    }
    Ok((m_u, m_v))
}

/// Blurred texture over generic scalars. `window_scale` widens the truncated
/// transition series; 1.0 is the production setting.
pub(crate) fn tg_with_window<R: Real>(
    spec: &BoardSpec,
    u: R,
    v: R,
    sigma_u: R,
    sigma_v: R,
    window_scale: f64,
) -> R {
    let h = spec.spacing;
    // cells k cover [k*h, (k+1)*h]; one extra ring around the point grid
    let (bu, su) = axis_profile(u, sigma_u, h, -1, spec.cols as i64 - 1, window_scale);
    let (bv, sv) = axis_profile(v, sigma_v, h, -1, spec.rows as i64 - 1, window_scale);
    -(bu * bv + su * sv) * 0.5 + 1.0
}

/// Smoothed box profile `B` and smoothed windowed square wave `S` along one
/// axis. `S` sums Gaussian cell masses with the cell parity sign; truncation
/// keeps cells within `window_scale * (8 sigma / h) + 2` of the coordinate,
/// which bounds the dropped tail mass below 1e-12.
fn axis_profile<R: Real>(
    x: R,
    sigma: R,
    h: f64,
    cell_lo: i64,
    cell_hi: i64,
    window_scale: f64,
) -> (R, R) {
    let x_lo = cell_lo as f64 * h;
    let x_hi = (cell_hi + 1) as f64 * h;
    let sv = sigma.value();
    if sv <= 0.0 {
        return hard_profile(x.value(), h, cell_lo, cell_hi, x_lo, x_hi);
    }
    let inv = R::constant(1.0) / (sigma * std::f64::consts::SQRT_2);
    let b = ((x - x_lo) * inv).erf() * 0.5 - ((x - x_hi) * inv).erf() * 0.5;

    let w = (window_scale * 8.0 * sv / h).ceil() as i64 + 2;
    let c = (x.value() / h).floor() as i64;
    let k0 = (c - w).max(cell_lo);
    let k1 = (c + w).min(cell_hi);
    let mut s = R::constant(0.0);
    if k0 <= k1 {
        let mut e_prev = ((x - k0 as f64 * h) * inv).erf();
        for k in k0..=k1 {
            let e_next = ((x - (k + 1) as f64 * h) * inv).erf();
            let mass = (e_prev - e_next) * 0.5;
            s = if k.rem_euclid(2) == 0 {
                s + mass
            } else {
                s - mass
            };
            e_prev = e_next;
        }
    }
    (b, s)
}

fn hard_profile<R: Real>(
    x: f64,
    h: f64,
    cell_lo: i64,
    cell_hi: i64,
    x_lo: f64,
    x_hi: f64,
) -> (R, R) {
    if x < x_lo || x > x_hi {
        return (R::constant(0.0), R::constant(0.0));
    }
    if x == x_lo || x == x_hi {
        return (R::constant(0.5), R::constant(0.0));
    }
    let cell = (x / h).floor() as i64;
    // exactly on an interior transition
    if x == cell as f64 * h {
        return (R::constant(1.0), R::constant(0.0));
    }
    let cell = cell.clamp(cell_lo, cell_hi);
    let sign = if cell.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    (R::constant(1.0), R::constant(sign))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::conv_oracle_patch;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn board() -> BoardSpec {
        BoardSpec::checkerboard(12, 12, 1.0, 1.0).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(BoardSpec::checkerboard(1, 5, 1.0, 0.0).is_err());
        assert!(BoardSpec::checkerboard(5, 5, 0.0, 0.0).is_err());
        assert!(BoardSpec::checkerboard(5, 5, 1.0, -0.1).is_err());
    }

    #[test]
    fn texture_parity_convention() {
        let b = board();
        assert_eq!(b.texture(0.5, 0.5), 0.0); // cell containing (0.5, 0.5) is black
        assert_eq!(b.texture(1.5, 0.5), 1.0); // adjacent cell flips
        assert_eq!(b.texture(1.0, 0.5), 0.5); // grid line
        assert_eq!(b.texture(0.5, 3.0), 0.5);
        assert_eq!(b.texture(-0.5, -0.5), 0.0); // outer ring: diagonal cells share color
        assert_eq!(b.texture(-3.0, 0.5), 1.0); // quiet zone is white
        assert_eq!(b.texture(50.0, 50.0), 1.0); // far outside as well
    }

    #[test]
    fn interest_points_are_saddles() {
        let b = board();
        // central points: the white quiet zone must stay many sigmas away,
        // otherwise the boundary blend genuinely shifts the value
        for j in [5 * 12 + 5, 5 * 12 + 6, 6 * 12 + 4] {
            let (u, v) = b.point_uv(j);
            assert_eq!(b.texture(u, v), 0.5);
            for sigma in [0.05, 0.3, 0.5] {
                assert_relative_eq!(b.texture_blurred(u, v, sigma, sigma), 0.5, epsilon = 1e-12);
            }
        }
        // corner points are still hard saddles of the unblurred texture
        assert_eq!(b.texture(0.0, 0.0), 0.5);
    }

    #[test]
    fn zero_blur_matches_texture_off_edges() {
        let b = board();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let u = rng.gen_range(-3.0..15.0);
            let v = rng.gen_range(-3.0..15.0);
            // stay away from transitions where the hard value is the 0.5 convention
            let frac = |x: f64| (x - (x / 1.0).round()).abs();
            if frac(u) < 1e-3 || frac(v) < 1e-3 {
                continue;
            }
            assert_eq!(b.texture_blurred(u, v, 0.0, 0.0), b.texture(u, v));
        }
    }

    #[test]
    fn grid_lines_stay_half_for_any_blur() {
        let b = board();
        for sigma in [0.01, 0.2, 0.5] {
            // interior grid lines, off-saddle, far from the board boundary
            assert_relative_eq!(
                b.texture_blurred(5.0, 5.37, sigma, sigma),
                0.5,
                epsilon = 1e-12
            );
            assert_relative_eq!(
                b.texture_blurred(6.61, 6.0, sigma, sigma),
                0.5,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let b = board();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let u = rng.gen_range(-4.0..16.0);
            let v = rng.gen_range(-4.0..16.0);
            let su = rng.gen_range(0.0..1.5);
            let sv = rng.gen_range(0.0..1.5);
            let t = b.texture_blurred(u, v, su, sv);
            assert!((0.0..=1.0).contains(&t), "T_G({u},{v})={t}");
        }
    }

    #[test]
    fn blurred_texture_matches_brute_force_convolution() {
        let b = board();
        let sigma = 0.2;
        let (points, oracle) = conv_oracle_patch(&b, sigma, 64, 512);
        let mut max_err: f64 = 0.0;
        for ((u, v), want) in points.iter().zip(oracle.iter()) {
            let got = b.texture_blurred(*u, *v, sigma, sigma);
            max_err = max_err.max((got - want).abs());
        }
        assert!(max_err < 1e-3, "max abs error {max_err}");
    }

    #[test]
    fn partial_derivatives_match_finite_differences() {
        use crate::dual::Dual;
        let b = board();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let u = rng.gen_range(-1.5..13.0);
            let v = rng.gen_range(-1.5..13.0);
            let su = rng.gen_range(0.02..1.0);
            let sv = rng.gen_range(0.02..1.0);
            let d = tg_with_window(
                &b,
                Dual::<4>::variable(u, 0),
                Dual::<4>::variable(v, 1),
                Dual::<4>::variable(su, 2),
                Dual::<4>::variable(sv, 3),
                1.0,
            );
            let h = 1e-6;
            let fd = [
                (b.texture_blurred(u + h, v, su, sv) - b.texture_blurred(u - h, v, su, sv))
                    / (2.0 * h),
                (b.texture_blurred(u, v + h, su, sv) - b.texture_blurred(u, v - h, su, sv))
                    / (2.0 * h),
                (b.texture_blurred(u, v, su + h, sv) - b.texture_blurred(u, v, su - h, sv))
                    / (2.0 * h),
                (b.texture_blurred(u, v, su, sv + h) - b.texture_blurred(u, v, su, sv - h))
                    / (2.0 * h),
            ];
            for k in 0..4 {
                let err = (d.eps[k] - fd[k]).abs();
                assert!(
                    err <= 1e-6 * d.eps[k].abs().max(fd[k].abs()).max(1e-2),
                    "dT/d{k} = {} vs fd {}",
                    d.eps[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn half_turn_symmetry_about_interest_points() {
        let b = board();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            // interior interest point, samples well away from the border
            let pr = rng.gen_range(3..9) as f64;
            let pc = rng.gen_range(3..9) as f64;
            let du = rng.gen_range(-1.5..1.5);
            let dv = rng.gen_range(-1.5..1.5);
            let s = rng.gen_range(0.01..0.3);
            let a = b.texture_blurred(pc + du, pr + dv, s, s);
            let c = b.texture_blurred(pc - du, pr - dv, s, s);
            assert!((a - c).abs() < 1e-12, "symmetry broke: {a} vs {c}");
        }
    }

    #[test]
    fn truncated_series_agrees_with_wider_window() {
        let b = board();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let u = rng.gen_range(-2.0..14.0);
            let v = rng.gen_range(-2.0..14.0);
            let su = rng.gen_range(0.01..1.0);
            let sv = rng.gen_range(0.01..1.0);
            let narrow = tg_with_window(&b, u, v, su, sv, 1.0);
            let wide = tg_with_window(&b, u, v, su, sv, 2.0);
            assert!((narrow - wide).abs() < 1e-12);
        }
    }

    #[test]
    fn stretch_is_focal_over_depth_for_frontoparallel_board() {
        let intr = CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0);
        let pose = BoardPose::identity_at(Vector3::new(0.0, 0.0, 1.0));
        let (mu, mv) = projection_stretch(&intr, &pose, 0.0, 0.0).unwrap();
        assert_relative_eq!(mu, 1000.0, epsilon = 1e-9);
        assert_relative_eq!(mv, 1000.0, epsilon = 1e-9);

        let pose = BoardPose::identity_at(Vector3::new(0.0, 0.0, 2.0));
        let (mu, mv) = projection_stretch(&intr, &pose, 0.0, 0.0).unwrap();
        assert_relative_eq!(mu, 500.0, epsilon = 1e-9);
        assert_relative_eq!(mv, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn stretch_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let intr = CameraIntrinsics::pinhole(
                rng.gen_range(500.0..1500.0),
                rng.gen_range(500.0..1500.0),
                640.0,
                360.0,
            )
            .with_distortion(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
            );
            let axis =
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize();
            let angle: f64 = rng.gen_range(0.0..0.8);
            let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
            let pose = BoardPose::new(
                [c, s * axis.x, s * axis.y, s * axis.z],
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(2.0..6.0),
                ),
            );
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            let (mu, mv) = projection_stretch(&intr, &pose, u, v).unwrap();
            let h = 1e-6;
            let p = |uu: f64, vv: f64| intr.project(&pose.board_point(uu, vv)).unwrap();
            let (a, b) = (p(u + h, v), p(u - h, v));
            let fd_u =
                (((a.x - b.x) / (2.0 * h)).powi(2) + ((a.y - b.y) / (2.0 * h)).powi(2)).sqrt();
            let (a, b) = (p(u, v + h), p(u, v - h));
            let fd_v =
                (((a.x - b.x) / (2.0 * h)).powi(2) + ((a.y - b.y) / (2.0 * h)).powi(2)).sqrt();
            assert!((mu - fd_u).abs() <= 1e-6 * mu.max(fd_u));
            assert!((mv - fd_v).abs() <= 1e-6 * mv.max(fd_v));
        }
    }

    #[test]
    fn nearest_point_assignment() {
        let b = board();
        assert_eq!(b.nearest_point(0.2, 0.1), (0, 0.2 + 0.1));
        assert_eq!(b.nearest_point(0.9, 2.2).0, 2 * 12 + 1);
        // outside the grid clamps to the border point
        assert_eq!(b.nearest_point(-2.0, -2.0).0, 0);
        // exact tie between columns 0 and 1 resolves to the lower index
        assert_eq!(b.nearest_point(0.5, 0.0).0, 0);
    }
}
