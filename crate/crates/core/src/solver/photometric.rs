//! Photometric residuals, their block-sparse Jacobian, and the normal
//! equation backends (dense and Schur-eliminated).
//!
//! Each residual row depends on the 8 global intrinsics, its image's 7 pose
//! parameters and its own log blur, so rows carry exactly 16 nonzeros.
//! Per-neighborhood 16x16 Gram blocks are accumulated in parallel and
//! reduced in a fixed order, which keeps runs reproducible.

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;

use super::lm::{run_lm, LmModel, SolveError, SolveReport};
use super::{
    param_len, pose_offset, sigma_offset, CalibrationEstimate, SolverOptions, GLOBAL_DIM, POSE_DIM,
    ROW_NNZ,
};
use crate::dual::{Dual, Real};
use crate::geometry::kernel::Intr;
use crate::geometry::GeometryError;
use crate::rendering::{
    build_neighborhoods, BoardProjection, ExcludedPoint, Image, PixelNeighborhood,
};
use crate::texture::{BoardSpec, SIGMA_MIN_PX};

type D16 = Dual<{ ROW_NNZ }>;

/// Captured images plus the frozen pixel neighborhoods they are compared
/// over. Neighborhoods are computed once from the initial calibration and
/// kept fixed, so the residual dimension is stable across iterations.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub images: Vec<Image>,
    pub board: BoardSpec,
    pub neighborhoods: Vec<PixelNeighborhood>,
    total: usize,
}

impl ObservationSet {
    /// Builds neighborhoods for every image under `initial` and bundles them
    /// with the images. Points whose neighborhood is empty are reported.
    pub fn build(
        images: Vec<Image>,
        board: BoardSpec,
        initial: &CalibrationEstimate,
    ) -> Result<(Self, Vec<ExcludedPoint>), GeometryError> {
        assert_eq!(images.len(), initial.poses.len());
        let mut neighborhoods = Vec::new();
        let mut excluded = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let set = build_neighborhoods(
                &initial.intrinsics,
                &initial.poses[i],
                &board,
                img.width,
                img.height,
                i,
            )?;
            neighborhoods.extend(set.neighborhoods);
            excluded.extend(set.excluded);
        }
        Ok((Self::from_parts(images, board, neighborhoods), excluded))
    }

    /// Assembles a set from prebuilt neighborhoods, preserving their order.
    pub fn from_parts(
        images: Vec<Image>,
        board: BoardSpec,
        neighborhoods: Vec<PixelNeighborhood>,
    ) -> Self {
        let total = neighborhoods.iter().map(|nb| nb.pixels.len()).sum();
        ObservationSet {
            images,
            board,
            neighborhoods,
            total,
        }
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_points(&self) -> usize {
        self.board.point_count()
    }

    pub fn residual_count(&self) -> usize {
        self.total
    }

    pub fn param_len(&self) -> usize {
        param_len(self.n_images(), self.n_points())
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<(), SolveError> {
        if v.len() != self.param_len() {
            return Err(SolveError::Dimension {
                got: v.len(),
                expected: self.param_len(),
            });
        }
        Ok(())
    }

    /// Splits a residual-sized buffer into per-neighborhood slices.
    fn chunks<'a>(&self, mut buf: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        let mut out = Vec::with_capacity(self.neighborhoods.len());
        for nb in &self.neighborhoods {
            let (head, tail) = buf.split_at_mut(nb.pixels.len());
            out.push(head);
            buf = tail;
        }
        out
    }
}

fn intr_values(v: &DVector<f64>) -> Intr<f64> {
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

fn intr_seeded(v: &DVector<f64>) -> Intr<D16> {
    Intr {
        fx: D16::variable(v[0], 0),
        fy: D16::variable(v[1], 1),
        x0: D16::variable(v[2], 2),
        y0: D16::variable(v[3], 3),
        k1: D16::variable(v[4], 4),
        k2: D16::variable(v[5], 5),
        p1: D16::variable(v[6], 6),
        p2: D16::variable(v[7], 7),
    }
}

/// Effective blur in pixels from the log parameter, floored at
/// [`SIGMA_MIN_PX`] (with zero derivative below the floor).
fn sigma_from_log<R: Real>(theta: R) -> R {
    let s = theta.exp();
    if s.value() < SIGMA_MIN_PX {
        R::constant(SIGMA_MIN_PX)
    } else {
        s
    }
}

/// Value-only evaluation. Residuals are written into `values`; pixels whose
/// inverse projection fails keep their previous entry (zero on first use)
/// and are counted. Returns (cost, failed evaluations).
fn value_pass(obs: &ObservationSet, v: &DVector<f64>, values: &mut [f64]) -> (f64, usize) {
    let n_images = obs.n_images();
    let n_points = obs.n_points();
    let intr = intr_values(v);
    let projections: Vec<Option<BoardProjection<f64>>> = (0..n_images)
        .map(|i| {
            let o = pose_offset(i);
            BoardProjection::new(
                intr,
                [v[o], v[o + 1], v[o + 2], v[o + 3]],
                [v[o + 4], v[o + 5], v[o + 6]],
            )
            .ok()
        })
        .collect();
    let chunks = obs.chunks(values);
    let parts: Vec<(f64, usize)> = obs
        .neighborhoods
        .par_iter()
        .zip(chunks)
        .map(|(nb, vals)| {
            let mut failed = 0usize;
            let img = &obs.images[nb.image];
            'eval: {
                let Some(proj) = &projections[nb.image] else {
                    failed += nb.pixels.len();
                    break 'eval;
                };
                let theta = v[sigma_offset(n_images, n_points, nb.image, nb.point)];
                let sigma = sigma_from_log(theta);
                let Ok((mu, mv)) = proj.stretch(nb.anchor_uv.0, nb.anchor_uv.1) else {
                    failed += nb.pixels.len();
                    break 'eval;
                };
                let (su, sv) = (sigma / mu, sigma / mv);
                for (k, &(x, y)) in nb.pixels.iter().enumerate() {
                    match proj.render(&obs.board, x as f64, y as f64, su, sv) {
                        Ok(c) => vals[k] = c - img.get(x as usize, y as usize),
                        Err(_) => failed += 1,
                    }
                }
            }
            (vals.iter().map(|r| r * r).sum(), failed)
        })
        .collect();
    let mut cost = 0.0;
    let mut failed = 0;
    for (c, f) in parts {
        cost += c;
        failed += f;
    }
    (cost, failed)
}

/// Per-neighborhood normal-equation contribution.
struct NbBlock {
    a: Box<SMatrix<f64, ROW_NNZ, ROW_NNZ>>,
    b: SVector<f64, ROW_NNZ>,
    cost: f64,
    failed: usize,
}

/// Dual-number evaluation: writes residual values, accumulates per-
/// neighborhood Gram blocks, and optionally materializes the raw rows.
fn dual_pass(
    obs: &ObservationSet,
    v: &DVector<f64>,
    values: &mut [f64],
    want_rows: bool,
) -> (Vec<NbBlock>, Vec<Vec<[f64; ROW_NNZ]>>) {
    let n_images = obs.n_images();
    let n_points = obs.n_points();
    let projections: Vec<Option<BoardProjection<D16>>> = (0..n_images)
        .map(|i| {
            let o = pose_offset(i);
            let intr = intr_seeded(v);
            let q = [
                D16::variable(v[o], 8),
                D16::variable(v[o + 1], 9),
                D16::variable(v[o + 2], 10),
                D16::variable(v[o + 3], 11),
            ];
            let t = [
                D16::variable(v[o + 4], 12),
                D16::variable(v[o + 5], 13),
                D16::variable(v[o + 6], 14),
            ];
            BoardProjection::new(intr, q, t).ok()
        })
        .collect();
    let chunks = obs.chunks(values);
    let out: Vec<(NbBlock, Vec<[f64; ROW_NNZ]>)> = obs
        .neighborhoods
        .par_iter()
        .zip(chunks)
        .map(|(nb, vals)| {
            let mut block = NbBlock {
                a: Box::new(SMatrix::zeros()),
                b: SVector::zeros(),
                cost: 0.0,
                failed: 0,
            };
            let mut rows = if want_rows {
                Vec::with_capacity(nb.pixels.len())
            } else {
                Vec::new()
            };
            let img = &obs.images[nb.image];
            let zeros = [0.0; ROW_NNZ];
            let mut setup: Option<(D16, D16)> = None;
            if let Some(proj) = &projections[nb.image] {
                let theta =
                    D16::variable(v[sigma_offset(n_images, n_points, nb.image, nb.point)], 15);
                let sigma = sigma_from_log(theta);
                if let Ok((mu, mv)) = proj.stretch(nb.anchor_uv.0, nb.anchor_uv.1) {
                    setup = Some((sigma / mu, sigma / mv));
                }
            }
            match setup {
                Some((su, sv)) => {
                    let proj = projections[nb.image].as_ref().unwrap();
                    for (k, &(x, y)) in nb.pixels.iter().enumerate() {
                        match proj.render(&obs.board, x as f64, y as f64, su, sv) {
                            Ok(c) => {
                                let r = c.re - img.get(x as usize, y as usize);
                                vals[k] = r;
                                for i in 0..ROW_NNZ {
                                    let di = c.eps[i];
                                    block.b[i] += di * r;
                                    for j in 0..=i {
                                        block.a[(i, j)] += di * c.eps[j];
                                    }
                                }
                                if want_rows {
                                    rows.push(c.eps);
                                }
                            }
                            Err(_) => {
                                block.failed += 1;
                                if want_rows {
                                    rows.push(zeros);
                                }
                            }
                        }
                    }
                }
                None => {
                    block.failed += nb.pixels.len();
                    if want_rows {
                        rows.resize(nb.pixels.len(), zeros);
                    }
                }
            }
            // mirror the lower triangle
            for i in 0..ROW_NNZ {
                for j in (i + 1)..ROW_NNZ {
                    block.a[(i, j)] = block.a[(j, i)];
                }
            }
            block.cost = vals.iter().map(|r| r * r).sum();
            (block, rows)
        })
        .collect();
    out.into_iter().unzip()
}

/// Photometric residual vector at `v`, ordered by image, then interest
/// point, then row-major pixel. Failed pixel evaluations contribute zero.
pub fn residuals(v: &DVector<f64>, obs: &ObservationSet) -> Result<DVector<f64>, SolveError> {
    obs.check_dim(v)?;
    let mut values = vec![0.0; obs.residual_count()];
    value_pass(obs, v, &mut values);
    Ok(DVector::from_vec(values))
}

/// One Jacobian row: its neighborhood identity and the 16 nonzero entries
/// (global block, pose block of `image`, log sigma of `(image, point)`).
#[derive(Clone, Copy, Debug)]
pub struct JacobianRow {
    pub image: u32,
    pub point: u32,
    pub coeffs: [f64; ROW_NNZ],
}

/// Block-sparse photometric Jacobian, aligned with [`residuals`] row order.
#[derive(Clone, Debug)]
pub struct JacobianBlocks {
    pub n_images: usize,
    pub n_points: usize,
    pub rows: Vec<JacobianRow>,
}

impl JacobianBlocks {
    pub fn param_len(&self) -> usize {
        param_len(self.n_images, self.n_points)
    }

    /// Expands the block rows into a dense matrix (test sizes only).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.param_len());
        for (r, row) in self.rows.iter().enumerate() {
            for k in 0..GLOBAL_DIM {
                m[(r, k)] = row.coeffs[k];
            }
            let o = pose_offset(row.image as usize);
            for k in 0..POSE_DIM {
                m[(r, o + k)] = row.coeffs[GLOBAL_DIM + k];
            }
            let s = sigma_offset(
                self.n_images,
                self.n_points,
                row.image as usize,
                row.point as usize,
            );
            m[(r, s)] = row.coeffs[ROW_NNZ - 1];
        }
        m
    }
}

/// Exact forward-mode Jacobian of the photometric residuals.
pub fn jacobian(v: &DVector<f64>, obs: &ObservationSet) -> Result<JacobianBlocks, SolveError> {
    obs.check_dim(v)?;
    let mut values = vec![0.0; obs.residual_count()];
    let (_, per_nb_rows) = dual_pass(obs, v, &mut values, true);
    let mut rows = Vec::with_capacity(obs.residual_count());
    for (nb, nb_rows) in obs.neighborhoods.iter().zip(per_nb_rows) {
        for coeffs in nb_rows {
            rows.push(JacobianRow {
                image: nb.image as u32,
                point: nb.point as u32,
                coeffs,
            });
        }
    }
    Ok(JacobianBlocks {
        n_images: obs.n_images(),
        n_points: obs.n_points(),
        rows,
    })
}

/// Assembled normal equations in arrow form: a global 8x8 block, per-image
/// 7x7 pose blocks, scalar sigma entries, and their couplings to the global
/// block and (for sigmas) their own pose block.
struct BlockNormal {
    n_images: usize,
    n_points: usize,
    gg: SMatrix<f64, GLOBAL_DIM, GLOBAL_DIM>,
    gp: Vec<SMatrix<f64, GLOBAL_DIM, POSE_DIM>>,
    pp: Vec<SMatrix<f64, POSE_DIM, POSE_DIM>>,
    gs: Vec<SVector<f64, GLOBAL_DIM>>,
    ps: Vec<SVector<f64, POSE_DIM>>,
    ss: Vec<f64>,
    grad: DVector<f64>,
}

impl BlockNormal {
    fn new(n_images: usize, n_points: usize) -> Self {
        BlockNormal {
            n_images,
            n_points,
            gg: SMatrix::zeros(),
            gp: vec![SMatrix::zeros(); n_images],
            pp: vec![SMatrix::zeros(); n_images],
            gs: vec![SVector::zeros(); n_images * n_points],
            ps: vec![SVector::zeros(); n_images * n_points],
            ss: vec![0.0; n_images * n_points],
            grad: DVector::zeros(param_len(n_images, n_points)),
        }
    }

    fn accumulate(&mut self, image: usize, point: usize, block: &NbBlock) {
        let s = image * self.n_points + point;
        let a = &block.a;
        for i in 0..GLOBAL_DIM {
            for j in 0..GLOBAL_DIM {
                self.gg[(i, j)] += a[(i, j)];
            }
            for j in 0..POSE_DIM {
                self.gp[image][(i, j)] += a[(i, GLOBAL_DIM + j)];
            }
            self.gs[s][i] += a[(i, ROW_NNZ - 1)];
        }
        for i in 0..POSE_DIM {
            for j in 0..POSE_DIM {
                self.pp[image][(i, j)] += a[(GLOBAL_DIM + i, GLOBAL_DIM + j)];
            }
            self.ps[s][i] += a[(GLOBAL_DIM + i, ROW_NNZ - 1)];
        }
        self.ss[s] += a[(ROW_NNZ - 1, ROW_NNZ - 1)];
        for i in 0..GLOBAL_DIM {
            self.grad[i] += block.b[i];
        }
        let o = pose_offset(image);
        for i in 0..POSE_DIM {
            self.grad[o + i] += block.b[GLOBAL_DIM + i];
        }
        self.grad[sigma_offset(self.n_images, self.n_points, image, point)] += block.b[ROW_NNZ - 1];
    }

    /// Schur solve: eliminate sigmas, then pose blocks, solve the reduced
    /// 8x8 system, and back-substitute. Frozen global coordinates and
    /// unobserved parameters get a zero step.
    fn solve_schur(&self, lambda: f64, frozen_global: &[bool; GLOBAL_DIM]) -> Option<DVector<f64>> {
        let n_images = self.n_images;
        let n_points = self.n_points;
        let damp = 1.0 + lambda;

        let mut s_gg = self.gg;
        for k in 0..GLOBAL_DIM {
            s_gg[(k, k)] = self.gg[(k, k)] * damp;
        }
        let mut g_g = SVector::<f64, GLOBAL_DIM>::from_fn(|i, _| self.grad[i]);
        let mut gp = self.gp.clone();
        let mut pp = self.pp.clone();
        let mut g_p: Vec<SVector<f64, POSE_DIM>> = (0..n_images)
            .map(|i| SVector::from_fn(|k, _| self.grad[pose_offset(i) + k]))
            .collect();
        for i in 0..n_images {
            for k in 0..POSE_DIM {
                pp[i][(k, k)] = self.pp[i][(k, k)] * damp;
            }
        }

        // eliminate sigma entries
        for s in 0..n_images * n_points {
            let d = self.ss[s];
            if d == 0.0 {
                continue;
            }
            let i = s / n_points;
            let inv = 1.0 / (d * damp);
            let gs = &self.gs[s];
            let ps = &self.ps[s];
            let grad_s = self.grad[GLOBAL_DIM + POSE_DIM * n_images + s];
            s_gg -= gs * gs.transpose() * inv;
            gp[i] -= gs * ps.transpose() * inv;
            pp[i] -= ps * ps.transpose() * inv;
            g_g -= gs * (grad_s * inv);
            g_p[i] -= ps * (grad_s * inv);
        }

        // eliminate pose blocks
        let mut pose_chol: Vec<Option<Cholesky<f64, nalgebra::Const<POSE_DIM>>>> =
            Vec::with_capacity(n_images);
        for i in 0..n_images {
            if (0..POSE_DIM).all(|k| self.pp[i][(k, k)] == 0.0) {
                pose_chol.push(None);
                continue;
            }
            let chol = Cholesky::new(pp[i])?;
            let pinv_gpt = chol.solve(&gp[i].transpose());
            s_gg -= gp[i] * pinv_gpt;
            g_g -= gp[i] * chol.solve(&g_p[i]);
            pose_chol.push(Some(chol));
        }

        // frozen / unobserved global coordinates
        for k in 0..GLOBAL_DIM {
            if frozen_global[k] || self.gg[(k, k)] == 0.0 {
                for j in 0..GLOBAL_DIM {
                    s_gg[(k, j)] = 0.0;
                    s_gg[(j, k)] = 0.0;
                }
                s_gg[(k, k)] = 1.0;
                g_g[k] = 0.0;
            }
        }
        let dg = Cholesky::new(s_gg)?.solve(&(-g_g));

        let mut dv = DVector::zeros(param_len(n_images, n_points));
        for k in 0..GLOBAL_DIM {
            dv[k] = dg[k];
        }
        let mut dp = vec![SVector::<f64, POSE_DIM>::zeros(); n_images];
        for i in 0..n_images {
            if let Some(chol) = &pose_chol[i] {
                dp[i] = chol.solve(&(-g_p[i] - gp[i].transpose() * dg));
                let o = pose_offset(i);
                for k in 0..POSE_DIM {
                    dv[o + k] = dp[i][k];
                }
            }
        }
        for s in 0..n_images * n_points {
            let d = self.ss[s];
            if d == 0.0 {
                continue;
            }
            let i = s / n_points;
            let idx = GLOBAL_DIM + POSE_DIM * n_images + s;
            let num = self.grad[idx] + self.gs[s].dot(&dg) + self.ps[s].dot(&dp[i]);
            dv[idx] = -num / (d * damp);
        }
        Some(dv)
    }

    /// Reference path: materialize the damped normal matrix and factor it
    /// densely. Bit-consistent with the Schur path up to solver roundoff.
    fn solve_dense(&self, lambda: f64, frozen_global: &[bool; GLOBAL_DIM]) -> Option<DVector<f64>> {
        let n = param_len(self.n_images, self.n_points);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..GLOBAL_DIM {
            for j in 0..GLOBAL_DIM {
                m[(i, j)] = self.gg[(i, j)];
            }
        }
        for img in 0..self.n_images {
            let o = pose_offset(img);
            for i in 0..GLOBAL_DIM {
                for j in 0..POSE_DIM {
                    m[(i, o + j)] = self.gp[img][(i, j)];
                    m[(o + j, i)] = self.gp[img][(i, j)];
                }
            }
            for i in 0..POSE_DIM {
                for j in 0..POSE_DIM {
                    m[(o + i, o + j)] = self.pp[img][(i, j)];
                }
            }
        }
        let sig0 = GLOBAL_DIM + POSE_DIM * self.n_images;
        for s in 0..self.n_images * self.n_points {
            let img = s / self.n_points;
            let o = pose_offset(img);
            for i in 0..GLOBAL_DIM {
                m[(i, sig0 + s)] = self.gs[s][i];
                m[(sig0 + s, i)] = self.gs[s][i];
            }
            for i in 0..POSE_DIM {
                m[(o + i, sig0 + s)] = self.ps[s][i];
                m[(sig0 + s, o + i)] = self.ps[s][i];
            }
            m[(sig0 + s, sig0 + s)] = self.ss[s];
        }
        let mut g = self.grad.clone();
        let mut inactive = vec![false; n];
        for (k, f) in frozen_global.iter().enumerate() {
            inactive[k] = *f;
        }
        for k in 0..n {
            if m[(k, k)] == 0.0 {
                inactive[k] = true;
            }
        }
        for k in 0..n {
            if inactive[k] {
                for j in 0..n {
                    m[(k, j)] = 0.0;
                    m[(j, k)] = 0.0;
                }
                m[(k, k)] = 1.0;
                g[k] = 0.0;
            } else {
                m[(k, k)] *= 1.0 + lambda;
            }
        }
        let chol = m.cholesky()?;
        Some(chol.solve(&(-g)))
    }

    /// Condition estimate of the sigma-and-pose-reduced global system, used
    /// to flag degenerate scenes (for example a single board orientation).
    fn global_condition(&self, frozen_global: &[bool; GLOBAL_DIM]) -> f64 {
        // no damping here: damping would floor the smallest singular value
        // and hide the rank deficiency this probe is looking for
        let damp = 1.0;
        let mut s_gg = self.gg;
        let mut gp = self.gp.clone();
        let mut pp = self.pp.clone();
        for k in 0..GLOBAL_DIM {
            s_gg[(k, k)] *= damp;
        }
        for i in 0..self.n_images {
            for k in 0..POSE_DIM {
                pp[i][(k, k)] *= damp;
                if pp[i][(k, k)] == 0.0 {
                    pp[i][(k, k)] = 1.0;
                }
            }
        }
        for s in 0..self.n_images * self.n_points {
            let d = self.ss[s];
            if d == 0.0 {
                continue;
            }
            let i = s / self.n_points;
            let inv = 1.0 / (d * damp);
            s_gg -= self.gs[s] * self.gs[s].transpose() * inv;
            gp[i] -= self.gs[s] * self.ps[s].transpose() * inv;
            pp[i] -= self.ps[s] * self.ps[s].transpose() * inv;
        }
        for i in 0..self.n_images {
            // pseudo-inverse with a relative cutoff: the quaternion scale
            // gauge makes the pose block rank deficient by construction
            let svd = pp[i].svd(true, true);
            let (u, vt, sv) = (
                svd.u.expect("svd with u"),
                svd.v_t.expect("svd with v_t"),
                svd.singular_values,
            );
            let cutoff = 1e-10 * sv.max();
            let mut sinv = SMatrix::<f64, POSE_DIM, POSE_DIM>::zeros();
            for k in 0..POSE_DIM {
                if sv[k] > cutoff {
                    sinv[(k, k)] = 1.0 / sv[k];
                }
            }
            let pinv = vt.transpose() * sinv * u.transpose();
            s_gg -= gp[i] * pinv * gp[i].transpose();
        }
        // active submatrix
        let active: Vec<usize> = (0..GLOBAL_DIM)
            .filter(|&k| !frozen_global[k] && self.gg[(k, k)] != 0.0)
            .collect();
        if active.is_empty() {
            return 1.0;
        }
        let mut sub = DMatrix::zeros(active.len(), active.len());
        for (a, &i) in active.iter().enumerate() {
            for (b, &j) in active.iter().enumerate() {
                sub[(a, b)] = s_gg[(i, j)];
            }
        }
        let sv = sub.svd(false, false).singular_values;
        let (mx, mn) = (sv.max(), sv.min());
        if mn <= 0.0 {
            f64::INFINITY
        } else {
            mx / mn
        }
    }
}

const CONDITION_WARN_THRESHOLD: f64 = 1e10;

struct PhotometricModel<'a> {
    obs: &'a ObservationSet,
    values: Vec<f64>,
    blocks: BlockNormal,
    frozen_global: [bool; GLOBAL_DIM],
    use_schur: bool,
    failed_total: usize,
    condition_warning: bool,
    condition_checked: bool,
}

impl<'a> PhotometricModel<'a> {
    fn new(obs: &'a ObservationSet, opts: &SolverOptions) -> Self {
        let mut frozen_global = [false; GLOBAL_DIM];
        for &k in opts.distortion_mask.frozen_indices() {
            frozen_global[k] = true;
        }
        PhotometricModel {
            obs,
            values: vec![0.0; obs.residual_count()],
            blocks: BlockNormal::new(obs.n_images(), obs.n_points()),
            frozen_global,
            use_schur: opts.use_schur,
            failed_total: 0,
            condition_warning: false,
            condition_checked: false,
        }
    }
}

impl LmModel for PhotometricModel<'_> {
    fn prepare(&mut self, v: &DVector<f64>) -> Result<f64, SolveError> {
        self.obs.check_dim(v)?;
        let (nb_blocks, _) = dual_pass(self.obs, v, &mut self.values, false);
        self.blocks = BlockNormal::new(self.obs.n_images(), self.obs.n_points());
        let mut cost = 0.0;
        for (nb, block) in self.obs.neighborhoods.iter().zip(&nb_blocks) {
            self.blocks.accumulate(nb.image, nb.point, block);
            cost += block.cost;
            self.failed_total += block.failed;
        }
        if !self.condition_checked {
            self.condition_checked = true;
            self.condition_warning =
                self.blocks.global_condition(&self.frozen_global) > CONDITION_WARN_THRESHOLD;
        }
        Ok(cost)
    }

    fn cost(&mut self, v: &DVector<f64>) -> Result<f64, SolveError> {
        self.obs.check_dim(v)?;
        let (cost, failed) = value_pass(self.obs, v, &mut self.values);
        self.failed_total += failed;
        Ok(cost)
    }

    fn gradient_inf_norm(&self) -> f64 {
        let n = self.obs.param_len();
        let mut m = 0.0f64;
        for k in 0..n {
            let frozen = k < GLOBAL_DIM && self.frozen_global[k];
            if !frozen {
                m = m.max(self.blocks.grad[k].abs());
            }
        }
        m
    }

    fn solve_step(&mut self, lambda: f64) -> Option<DVector<f64>> {
        if self.use_schur {
            self.blocks.solve_schur(lambda, &self.frozen_global)
        } else {
            self.blocks.solve_dense(lambda, &self.frozen_global)
        }
    }

    fn diagnostics(&self) -> (usize, bool) {
        (self.failed_total, self.condition_warning)
    }
}

/// Runs the photometric LM refinement from `initial`.
pub(crate) fn solve(
    obs: &ObservationSet,
    initial: &CalibrationEstimate,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, SolveReport), SolveError> {
    let v0 = super::pack(initial);
    let mut model = PhotometricModel::new(obs, opts);
    run_lm(&mut model, v0, &opts.lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::solver::{pack, unpack, DistortionMask};
    use crate::synth::{generate_synthetic_dataset, SyntheticConfig};
    use crate::texture::BoardSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Clean dataset whose images the renderer can reproduce exactly:
    /// unit intensity range, no degradation, known anti-alias blur.
    fn exact_scene(count: usize, seed: u64) -> (SyntheticConfig, crate::synth::SyntheticDataset) {
        let cfg = SyntheticConfig {
            width: 320,
            height: 240,
            count,
            intrinsics: CameraIntrinsics::pinhole(300.0, 300.0, 160.0, 120.0)
                .with_distortion(-0.08, 0.01, 0.0005, -0.0005),
            board: BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap(),
            anti_alias_sigma_px: 0.3,
            intensity_range: (0.0, 1.0),
            seed,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        (cfg, ds)
    }

    fn truth_estimate(
        cfg: &SyntheticConfig,
        ds: &crate::synth::SyntheticDataset,
    ) -> CalibrationEstimate {
        CalibrationEstimate::with_uniform_sigma(
            cfg.intrinsics,
            ds.poses.clone(),
            cfg.board.point_count(),
            cfg.anti_alias_sigma_px,
        )
    }

    #[test]
    fn residuals_vanish_at_ground_truth_on_exact_scene() {
        let (cfg, ds) = exact_scene(2, 21);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, excluded) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        assert!(excluded.is_empty());
        let r = residuals(&pack(&truth), &obs).unwrap();
        assert_eq!(r.len(), obs.residual_count());
        assert!(r.amax() < 1e-6, "max residual {}", r.amax());
    }

    #[test]
    fn focal_perturbation_strictly_increases_cost() {
        let (cfg, ds) = exact_scene(1, 8);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let v = pack(&truth);
        let cost = |v: &DVector<f64>| residuals(v, &obs).unwrap().norm_squared();
        let base = cost(&v);
        let mut vp = v.clone();
        vp[0] *= 1.01;
        assert!(cost(&vp) > base + 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (cfg, ds) = exact_scene(2, 33);
        // evaluate off the optimum so derivatives are non-trivial
        let mut est = truth_estimate(&cfg, &ds);
        est.intrinsics.fx *= 1.002;
        est.intrinsics.k1 += 0.004;
        est.sigmas.iter_mut().for_each(|s| *s = 0.8);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &est).unwrap();
        let v = pack(&est);
        let jac = jacobian(&v, &obs).unwrap();
        let dense = jac.to_dense();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_rows = obs.residual_count();
        for _ in 0..220 {
            let row = rng.gen_range(0..n_rows);
            let col = rng.gen_range(0..obs.param_len());
            let h = 1e-6;
            let mut vp = v.clone();
            vp[col] += h;
            let rp = residuals(&vp, &obs).unwrap()[row];
            vp[col] -= 2.0 * h;
            let rm = residuals(&vp, &obs).unwrap()[row];
            let fd = (rp - rm) / (2.0 * h);
            let a = dense[(row, col)];
            let err = (a - fd).abs();
            assert!(
                err <= 1e-5 * a.abs().max(fd.abs()).max(1e-2),
                "row {row} col {col}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn jacobian_rows_touch_only_their_image_and_sigma() {
        let (cfg, ds) = exact_scene(2, 5);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let jac = jacobian(&pack(&truth), &obs).unwrap();
        let dense = jac.to_dense();
        let n_points = obs.n_points();
        for (r, row) in jac.rows.iter().enumerate().step_by(257) {
            let other = 1 - row.image as usize;
            let o = pose_offset(other);
            for k in 0..POSE_DIM {
                assert_eq!(dense[(r, o + k)], 0.0);
            }
            for j in 0..n_points {
                if j != row.point as usize {
                    let s = sigma_offset(2, n_points, row.image as usize, j);
                    assert_eq!(dense[(r, s)], 0.0);
                }
            }
        }
    }

    #[test]
    fn ground_truth_start_does_not_move() {
        let (cfg, ds) = exact_scene(1, 2);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let opts = SolverOptions::default();
        let (v, report) = solve(&obs, &truth, &opts).unwrap();
        assert_eq!(report.iterations, 0);
        let v0 = pack(&truth);
        assert!((v - v0).amax() < 1e-12);
    }

    #[test]
    fn recovers_from_focal_perturbation_on_one_clean_image() {
        let (cfg, ds) = exact_scene(1, 14);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let mut start = truth.clone();
        start.intrinsics.fx *= 1.01;
        start.intrinsics.fy *= 1.01;
        let opts = SolverOptions::default();
        let (_, report) = solve(&obs, &start, &opts).unwrap();
        crate::solver::assert_cost_trace_non_increasing(&report);
        let below = report
            .cost_trace
            .iter()
            .position(|&c| c < 0.01 * report.initial_cost);
        assert!(
            matches!(below, Some(k) if k <= 25),
            "cost did not reach 1% of {} within 25 iterations: {:?}",
            report.initial_cost,
            report.cost_trace
        );
    }

    #[test]
    fn schur_and_dense_paths_agree() {
        let (cfg, ds) = exact_scene(2, 40);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let mut start = truth.clone();
        start.intrinsics.fx *= 1.005;
        start.intrinsics.x0 += 1.0;
        let mut opts = SolverOptions {
            lm: crate::solver::LmOptions {
                max_iterations: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        opts.use_schur = true;
        let (_, rs) = solve(&obs, &start, &opts).unwrap();
        opts.use_schur = false;
        let (_, rd) = solve(&obs, &start, &opts).unwrap();
        let denom = rs.final_cost.max(1.0);
        assert!(
            (rs.final_cost - rd.final_cost).abs() / denom < 1e-10,
            "schur {} vs dense {}",
            rs.final_cost,
            rd.final_cost
        );
    }

    #[test]
    fn final_cost_is_invariant_to_neighborhood_order() {
        let (cfg, ds) = exact_scene(1, 51);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let mut start = truth.clone();
        start.intrinsics.fx *= 1.004;
        let opts = SolverOptions {
            threads: Some(1),
            lm: crate::solver::LmOptions {
                max_iterations: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, r1) = solve(&obs, &start, &opts).unwrap();

        let mut shuffled = obs.neighborhoods.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let obs2 = ObservationSet::from_parts(ds.images.clone(), cfg.board, shuffled);
        let (_, r2) = solve(&obs2, &start, &opts).unwrap();
        assert!(
            (r1.final_cost - r2.final_cost).abs() <= 1e-12 * r1.final_cost.max(1.0),
            "{} vs {}",
            r1.final_cost,
            r2.final_cost
        );
    }

    #[test]
    fn single_orientation_terminates_with_condition_warning() {
        // one frontoparallel board: focal length and depth trade off freely
        let cfg = SyntheticConfig {
            width: 320,
            height: 240,
            count: 1,
            intrinsics: CameraIntrinsics::pinhole(300.0, 300.0, 160.0, 120.0),
            board: BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap(),
            anti_alias_sigma_px: 0.3,
            intensity_range: (0.0, 1.0),
            tilt_deg: (0.0, 0.0),
            seed: 4,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let truth = CalibrationEstimate::with_uniform_sigma(
            cfg.intrinsics,
            ds.poses.clone(),
            cfg.board.point_count(),
            cfg.anti_alias_sigma_px,
        );
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let mut start = truth.clone();
        start.intrinsics.fx *= 1.01;
        let opts = SolverOptions {
            distortion_mask: DistortionMask::None,
            lm: crate::solver::LmOptions {
                max_iterations: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, report) = solve(&obs, &start, &opts).unwrap();
        assert!(report.high_condition_warning);
        crate::solver::assert_cost_trace_non_increasing(&report);
    }

    #[test]
    fn value_and_dual_passes_produce_identical_residuals() {
        // the accept/reject cost comes from the plain path while the trace
        // cost after acceptance comes from the dual pass; they must agree
        // exactly or the monotone-trace guarantee would be illusory
        let (cfg, ds) = exact_scene(2, 70);
        let mut est = truth_estimate(&cfg, &ds);
        est.intrinsics.fx *= 1.004;
        est.intrinsics.k1 -= 0.003;
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &est).unwrap();
        let v = pack(&est);
        let mut plain = vec![0.0; obs.residual_count()];
        value_pass(&obs, &v, &mut plain);
        let mut dual = vec![0.0; obs.residual_count()];
        dual_pass(&obs, &v, &mut dual, false);
        assert_eq!(plain, dual);
    }

    #[test]
    fn blur_levels_converge_to_the_true_image_blur() {
        // anti-aliasing 0.3 px plus an extra 0.8 px of image blur compose to
        // about 0.854 px; the solver should find it from a 2 px start
        let cfg = SyntheticConfig {
            width: 320,
            height: 240,
            count: 2,
            intrinsics: CameraIntrinsics::pinhole(300.0, 300.0, 160.0, 120.0),
            board: BoardSpec::checkerboard(5, 7, 1.0, 1.0).unwrap(),
            anti_alias_sigma_px: 0.3,
            blur_sigma_px: 0.8,
            intensity_range: (0.0, 1.0),
            tilt_deg: (10.0, 30.0),
            seed: 71,
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let start = CalibrationEstimate::with_uniform_sigma(
            cfg.intrinsics,
            ds.poses.clone(),
            cfg.board.point_count(),
            2.0,
        );
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &start).unwrap();
        let opts = SolverOptions {
            distortion_mask: DistortionMask::None,
            ..Default::default()
        };
        let (v, report) = solve(&obs, &start, &opts).unwrap();
        crate::solver::assert_cost_trace_non_increasing(&report);
        let est = unpack(&v, 2, cfg.board.point_count());
        let expected = (0.3f64.powi(2) + 0.8f64.powi(2)).sqrt();
        let mean_sigma = est.sigmas.iter().sum::<f64>() / est.sigmas.len() as f64;
        assert!(
            (mean_sigma - expected).abs() < 0.1,
            "mean blur {mean_sigma:.3} vs expected {expected:.3}"
        );
    }

    #[test]
    fn unpack_after_solve_keeps_unit_quaternions() {
        let (cfg, ds) = exact_scene(1, 60);
        let truth = truth_estimate(&cfg, &ds);
        let (obs, _) = ObservationSet::build(ds.images.clone(), cfg.board, &truth).unwrap();
        let mut start = truth.clone();
        start.intrinsics.fy *= 1.003;
        let (v, _) = solve(&obs, &start, &SolverOptions::default()).unwrap();
        let est = unpack(&v, 1, cfg.board.point_count());
        let q = est.poses[0].q;
        let n: f64 = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
