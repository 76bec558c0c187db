//! Synthetic spatial transformations relating an image to its augmented
//! twin. Transforms act on normalized `[0, 1]²` coordinates and are applied
//! directly to feature grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

const MIN_DET: f64 = 1e-6;

/// A horizontal flip (`x -> 1 - x`, optional) followed by a 2×3 affine map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub affine: [[f64; 3]; 2],
    #[serde(default)]
    pub flip_h: bool,
}

impl Default for SpatialTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            flip_h: false,
        }
    }

    pub fn new(affine: [[f64; 3]; 2], flip_h: bool) -> Result<Self> {
        let t = Self { affine, flip_h };
        t.validate()?;
        Ok(t)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            affine: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
            flip_h: false,
        }
    }

    /// Rotation by `radians` (counter-clockwise in `(x, y)`) about `center`.
    pub fn rotation_about(radians: f64, center: (f64, f64)) -> Self {
        let (s, c) = radians.sin_cos();
        let (cx, cy) = center;
        Self {
            affine: [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
            ],
            flip_h: false,
        }
    }

    pub fn det(&self) -> f64 {
        let a = &self.affine;
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite transform coefficient"));
        }
        let det = self.det();
        if det.abs() <= MIN_DET {
            return Err(Error::SingularTransform(det));
        }
        Ok(())
    }

    /// The flip folded into the affine part.
    fn as_affine(&self) -> [[f64; 3]; 2] {
        let mut a = self.affine;
        if self.flip_h {
            // A * F with F(x, y) = (1 - x, y)
            for row in &mut a {
                row[2] += row[0];
                row[0] = -row[0];
            }
        }
        a
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        let a = self.as_affine();
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let (i00, i01, i10, i11) = (a[1][1] / det, -a[0][1] / det, -a[1][0] / det, a[0][0] / det);
        let tx = -(i00 * a[0][2] + i01 * a[1][2]);
        let ty = -(i10 * a[0][2] + i11 * a[1][2]);
        Ok(Self {
            affine: [[i00, i01, tx], [i10, i11, ty]],
            flip_h: false,
        })
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &SpatialTransform) -> Self {
        let a = self.as_affine();
        let b = first.as_affine();
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            out[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            out[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            out[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self {
            affine: out,
            flip_h: false,
        }
    }
}

/// Applies the flip, then the affine map. No clamping.
pub fn transform_coords(g: &SpatialTransform, p: (f64, f64)) -> (f64, f64) {
    let (mut x, y) = p;
    if g.flip_h {
        x = 1.0 - x;
    }
    let a = &g.affine;
    (
        a[0][0] * x + a[0][1] * y + a[0][2],
        a[1][0] * x + a[1][1] * y + a[1][2],
    )
}

/// Sampling ranges for [`sample_transform`]. Rotation in degrees; translation
/// in normalized units per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_range: (0.85, 1.15),
            max_translation: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let ok = self.max_rotation_deg.is_finite()
            && self.max_rotation_deg >= 0.0
            && lo > 0.0
            && hi >= lo
            && hi.is_finite()
            && self.max_translation.is_finite()
            && self.max_translation >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation ranges: {self:?}")))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// Draws a rotation/scale/translation about the image center, optionally
/// preceded by a horizontal flip. Deterministic per seed.
pub fn sample_transform(seed: u64, config: &AugmentConfig) -> Result<SpatialTransform> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = uniform(&mut rng, config.max_rotation_deg).to_radians();
    let (lo, hi) = config.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let tx = uniform(&mut rng, config.max_translation);
    let ty = uniform(&mut rng, config.max_translation);
    let flip_h = config.flip_prob > 0.0 && rng.random_bool(config.flip_prob);

    let (s, c) = angle.sin_cos();
    let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
    // x' = M (x - 0.5) + 0.5 + t
    let affine = [
        [a, b, 0.5 + tx - a * 0.5 - b * 0.5],
        [cc, d, 0.5 + ty - cc * 0.5 - d * 0.5],
    ];
    SpatialTransform::new(affine, flip_h)
}

/// Inverse warp: every output cell center `c` takes the bilinear sample of
/// the input at `g⁻¹(c)`, clamped to the edge.
pub fn warp_grid(grid: &FeatureGrid, g: &SpatialTransform) -> Result<FeatureGrid> {
    let inv = g.inverse()?;
    let dim = grid.dim();
    let mut data = Vec::with_capacity(grid.data().len());
    for idx in 0..grid.cells() {
        let (x, y) = transform_coords(&inv, grid.cell_center(idx));
        let v = crate::grid::sample_embedding(grid, x, y, false);
        data.extend(v.into_iter().map(|x| x as f32));
    }
    grid.with_data(dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
        (a.0 - b.0).abs() < tol && (a.1 - b.1).abs() < tol
    }

    #[test]
    fn zero_ranges_give_identity() {
        let g = sample_transform(17, &AugmentConfig::none()).unwrap();
        assert_eq!(g, SpatialTransform::identity());
        assert_eq!(transform_coords(&g, (0.3, 0.9)), (0.3, 0.9));
    }

    #[test]
    fn sampling_is_deterministic_and_invertible() {
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let a = sample_transform(seed, &cfg).unwrap();
            assert_eq!(a, sample_transform(seed, &cfg).unwrap());
            assert!(a.det().abs() > MIN_DET);
        }
        assert_ne!(sample_transform(1, &cfg).unwrap(), sample_transform(2, &cfg).unwrap());
        let bad = AugmentConfig {
            scale_range: (0.0, 1.0),
            ..cfg
        };
        assert!(sample_transform(0, &bad).is_err());
    }

    #[test]
    fn rotation_quarter_turn() {
        let g = SpatialTransform::rotation_about(std::f64::consts::FRAC_PI_2, (0.5, 0.5));
        assert!(close(transform_coords(&g, (0.25, 0.25)), (0.75, 0.25), 1e-12));
    }

    #[test]
    fn inverse_round_trip() {
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let g = sample_transform(seed, &cfg).unwrap();
            assert!(g.flip_h);
            let inv = g.inverse().unwrap();
            for &p in &[(0.1, 0.2), (0.5, 0.5), (0.93, 0.04), (-0.3, 1.4)] {
                let q = transform_coords(&inv, transform_coords(&g, p));
                assert!(close(p, q, 1e-9), "{p:?} -> {q:?}");
            }
        }
        let singular = SpatialTransform {
            affine: [[1.0, 2.0, 0.0], [0.5, 1.0, 0.0]],
            flip_h: false,
        };
        assert!(matches!(singular.inverse(), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = sample_transform(3, &AugmentConfig::default()).unwrap();
        let b = sample_transform(4, &AugmentConfig::default()).unwrap();
        let ab = a.compose(&b);
        let p = (0.31, 0.77);
        assert!(close(
            transform_coords(&ab, p),
            transform_coords(&a, transform_coords(&b, p)),
            1e-12
        ));
    }

    #[test]
    fn warp_examples() {
        let g = FeatureGrid::from_fn(4, 5, 3, 40, 50, |r, c, k| (r * 11 + c * 5 + k) as f32 * 0.1).unwrap();
        let same = warp_grid(&g, &SpatialTransform::identity()).unwrap();
        for (a, b) in same.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let constant = FeatureGrid::new(3, 3, 2, 9, 9, vec![0.25; 18]).unwrap();
        let t = sample_transform(5, &AugmentConfig::default()).unwrap();
        assert!(warp_grid(&constant, &t).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        // shift right by one cell width
        let shifted = warp_grid(&g, &SpatialTransform::translation(1.0 / 5.0, 0.0)).unwrap();
        for r in 0..4 {
            assert_eq!(shifted.cell(r, 0), g.cell(r, 0));
            for c in 1..5 {
                for (a, b) in shifted.cell(r, c).iter().zip(g.cell(r, c - 1)) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_interior() {
        let g = FeatureGrid::from_fn(16, 16, 2, 64, 64, |r, c, k| {
            let (x, y) = (c as f32 / 16.0, r as f32 / 16.0);
            if k == 0 { x + 0.5 * y } else { 0.3 * x * y - 0.2 * y }
        })
        .unwrap();
        let cfg = AugmentConfig {
            max_rotation_deg: 3.0,
            scale_range: (0.97, 1.03),
            max_translation: 0.03,
            flip_prob: 0.0,
        };
        for seed in 0..10 {
            let t = sample_transform(seed, &cfg).unwrap();
            let back = warp_grid(&warp_grid(&g, &t).unwrap(), &t.inverse().unwrap()).unwrap();
            for r in 3..13 {
                for c in 3..13 {
                    for (a, b) in back.cell(r, c).iter().zip(g.cell(r, c)) {
                        assert!((a - b).abs() < 1e-3, "seed {seed} ({r},{c}) {a} vs {b}");
                    }
                }
            }
        }
    }
}
