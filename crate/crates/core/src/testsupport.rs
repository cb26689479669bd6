//! Brute-force oracles used by the test suites. Deliberately independent of
//! the analytic production paths: the checkerboard is re-derived from cell
//! parity and the blur is a discrete convolution of a supersampled texture.
#![doc(hidden)]

use crate::texture::BoardSpec;

/// Hard checkerboard value from first principles: white outside the textured
/// rectangle, cell parity inside.
pub fn parity_texture(spec: &BoardSpec, u: f64, v: f64) -> f64 {
    let h = spec.spacing;
    let (ulo, uhi) = (-h, spec.cols as f64 * h);
    let (vlo, vhi) = (-h, spec.rows as f64 * h);
    if u < ulo || u > uhi || v < vlo || v > vhi {
        return 1.0;
    }
    let cu = (u / h).floor() as i64;
    let cv = (v / h).floor() as i64;
    if (cu + cv).rem_euclid(2) == 0 {
        0.0
    } else {
        1.0
    }
}

/// Discrete Gaussian convolution of a supersampled checkerboard, evaluated
/// on an `n x n` grid spanning two squares around the board center.
///
/// `ss` is the supersampling rate per board unit. Texture samples sit at
/// supersample cell midpoints, so cell edges never straddle a sample and
/// the only oracle error is the midpoint quadrature of the Gaussian,
/// O((1/(ss*sigma))^2). Returns the sample coordinates and oracle values.
pub fn conv_oracle_patch(
    spec: &BoardSpec,
    sigma: f64,
    n: usize,
    ss: usize,
) -> (Vec<(f64, f64)>, Vec<f64>) {
    let h = spec.spacing;
    let delta = h / ss as f64;
    let radius = (6.0 * sigma / delta).ceil() as i64;

    let mut weights = Vec::with_capacity(2 * radius as usize + 1);
    for j in -radius..=radius {
        let x = j as f64 * delta;
        weights.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let wsum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= wsum;
    }

    // output lattice: n points spanning 2h, on supersample midpoints
    let step = 2 * ss as i64 / n as i64;
    assert!(step >= 1 && (step * n as i64) == 2 * ss as i64);
    let pos = |m: i64| (m as f64 + 0.5) * delta;
    let center_u = (spec.cols as f64 - 1.0) * h / 2.0;
    let center_v = (spec.rows as f64 - 1.0) * h / 2.0;
    let mu0 = (center_u / delta).round() as i64 - step * n as i64 / 2;
    let mv0 = (center_v / delta).round() as i64 - step * n as i64 / 2;

    // pass 1: blur along u, sampled on all supersample rows the second pass needs
    let mv_lo = mv0 - radius;
    let mv_hi = mv0 + step * (n as i64 - 1) + radius;
    let rows = (mv_hi - mv_lo + 1) as usize;
    let mut partial = vec![0.0f64; n * rows];
    for (k, row_chunk) in partial.chunks_mut(rows).enumerate() {
        let mu = mu0 + step * k as i64;
        for (r, out) in row_chunk.iter_mut().enumerate() {
            let v = pos(mv_lo + r as i64);
            let mut acc = 0.0;
            for (j, w) in weights.iter().enumerate() {
                let u = pos(mu - (j as i64 - radius));
                acc += w * parity_texture(spec, u, v);
            }
            *out = acc;
        }
    }

    // pass 2: blur along v at the output points
    let mut points = Vec::with_capacity(n * n);
    let mut values = Vec::with_capacity(n * n);
    for l in 0..n {
        let mv = mv0 + step * l as i64;
        for k in 0..n {
            let row = &partial[k * rows..(k + 1) * rows];
            let mut acc = 0.0;
            for (j, w) in weights.iter().enumerate() {
                let idx = (mv - (j as i64 - radius) - mv_lo) as usize;
                acc += w * row[idx];
            }
            points.push((pos(mu0 + step * k as i64), pos(mv)));
            values.push(acc);
        }
    }
    (points, values)
}
