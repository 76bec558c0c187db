//! Independent reference implementations used by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use corrbench::augment::{sample_transform, warp_grid, AugmentConfig};
use corrbench::grid::FeatureGrid;
use corrbench::losses::{loss_gradient, loss_value, LossConfig, LossInputs, LossKind};
use corrbench::matcher::{Keypoint, KeypointSet};
use corrbench::projection::ProjectionHead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    let data = (0..h * w * d).map(|_| StandardNormal.sample(rng)).map(|v: f64| v as f32).collect();
    FeatureGrid::new(h, w, d, (h * 8) as u32, (w * 8) as u32, data).unwrap()
}

/// `max |analytic - numeric| / max |numeric|` for central differences with
/// step `h` on every weight.
pub fn gradient_error(kind: LossKind, seed: u64, h: f64) -> f64 {
    gradient_error_scaled(kind, seed, h, 1.0)
}

pub fn gradient_error_scaled(kind: LossKind, seed: u64, h: f64, weight_std: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side, d, dp) = (6, 16, 4);
    let a = random_grid(&mut rng, side, side, d);
    let b_pair = random_grid(&mut rng, side, side, d);
    let aux = random_grid(&mut rng, side, side, d);
    let g = sample_transform(rng.random(), &AugmentConfig::default()).unwrap();
    let warped = warp_grid(&a, &g).unwrap();
    let gt: Vec<(usize, usize)> = (0..5).map(|_| (rng.random_range(0..side * side), rng.random_range(0..side * side))).collect();
    let inputs = match kind {
        LossKind::Eq => LossInputs { enc_a: Some(&a), enc_b: Some(&warped), transform: Some(g), ..Default::default() },
        LossKind::Dve => LossInputs { enc_a: Some(&a), enc_b: Some(&warped), aux: Some(&aux), transform: Some(g), ..Default::default() },
        LossKind::Cl => LossInputs { enc_a: Some(&a), ..Default::default() },
        LossKind::Lead | LossKind::Asym => LossInputs { enc_a: Some(&a), enc_b: Some(&b_pair), ..Default::default() },
        LossKind::Supervised => LossInputs { enc_a: Some(&a), enc_b: Some(&b_pair), gt_pairs: &gt, ..Default::default() },
    };
    let config = LossConfig::defaults(kind);
    let weights = (0..d * dp).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); weight_std * z }).collect();
    let head = ProjectionHead::new(d, dp, weights, None).unwrap();
    let (_, analytic) = loss_gradient(&config, &inputs, &head).unwrap();
    let at = |w: &[f64]| loss_value(&config, &inputs, &head.with_weights(w.to_vec()).unwrap()).unwrap();
    let mut w = head.weights().to_vec();
    let mut numeric = vec![0.0; w.len()];
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = at(&w);
        w[i] = orig - h;
        let down = at(&w);
        w[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    err / scale
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching unit eigenvectors.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance (divided by `n - 1`) of row vectors.
pub fn brute_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = (0..d)
        .map(|i| (0..d).map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)).collect())
        .collect();
    (mean, cov)
}

/// Exhaustive argmax: `(row-major cell, similarity)` of the first target
/// cell with the largest dot product.
pub fn brute_argmax(query: &[f64], tgt: &FeatureGrid) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for r in 0..tgt.height() {
        for c in 0..tgt.width() {
            let cell = tgt.cell(r, c);
            let mut s = 0.0;
            for k in 0..query.len() {
                s += query[k] * f64::from(cell[k]);
            }
            if s > best.1 {
                best = (r * tgt.width() + c, s);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub miss: bool,
    pub jitter: bool,
    pub swap: bool,
    pub pck: bool,
    pub dagger: bool,
}

/// Direct transcription of the indicator definitions.
pub fn reference_flags(pred: (f64, f64), points: &[(f64, f64)], target: usize, d: f64) -> Flags {
    let dist = |p: (f64, f64)| ((pred.0 - p.0).powi(2) + (pred.1 - p.1).powi(2)).sqrt();
    let own = dist(points[target]);
    let delta = points.iter().map(|&p| dist(p)).fold(f64::INFINITY, f64::min);
    let tie = (delta - own).abs() <= 1e-9 * delta.max(own).max(1.0);
    Flags {
        miss: delta > d,
        jitter: d < own && own < 2.0 * d,
        swap: !tie && delta < d,
        pck: own <= d,
        dagger: own <= d && tie,
    }
}

pub fn keypoint_set(points: &[(f64, f64)], w: u32, h: u32) -> KeypointSet {
    KeypointSet::new(
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Keypoint { name: format!("k{i}"), x, y, visible: true })
            .collect(),
        w,
        h,
        None,
    )
    .unwrap()
}

pub fn head_columns(head: &ProjectionHead) -> Vec<Vec<f64>> {
    (0..head.out_dim()).map(|j| (0..head.in_dim()).map(|i| head.weight(i, j)).collect()).collect()
}
