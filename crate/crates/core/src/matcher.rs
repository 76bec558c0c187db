//! Nearest-neighbour keypoint transfer: a source keypoint is matched to the
//! target cell whose embedding has the largest dot product with it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dense::{self, Matrix};
use crate::error::{Error, Result};
use crate::grid::{bilinear_resize, l2_normalize, sample_embedding, FeatureGrid, NORM_EPS};

/// Axis-aligned object box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_true")]
    pub visible: bool,
}

fn default_true() -> bool {
    true
}

/// Annotated landmarks of one image, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    entries: Vec<Keypoint>,
    image_width: u32,
    image_height: u32,
    bbox: Option<BBox>,
}

impl KeypointSet {
    pub fn new(entries: Vec<Keypoint>, image_width: u32, image_height: u32, bbox: Option<BBox>) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::invalid("keypoint image size must be positive"));
        }
        let mut seen = HashSet::new();
        for kp in &entries {
            if !seen.insert(kp.name.as_str()) {
                return Err(Error::invalid(format!("duplicate keypoint name {:?}", kp.name)));
            }
            if kp.visible {
                let inside = kp.x.is_finite()
                    && kp.y.is_finite()
                    && (0.0..=f64::from(image_width)).contains(&kp.x)
                    && (0.0..=f64::from(image_height)).contains(&kp.y);
                if !inside {
                    return Err(Error::invalid(format!(
                        "visible keypoint {:?} at ({}, {}) outside {image_width}x{image_height} image",
                        kp.name, kp.x, kp.y
                    )));
                }
            }
        }
        if let Some(b) = bbox {
            if !(b.w > 0.0 && b.h > 0.0 && b.x.is_finite() && b.y.is_finite()) {
                return Err(Error::invalid(format!("degenerate bounding box {b:?}")));
            }
        }
        Ok(Self {
            entries,
            image_width,
            image_height,
            bbox,
        })
    }

    pub fn entries(&self) -> &[Keypoint] {
        &self.entries
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    pub fn get(&self, name: &str) -> Option<&Keypoint> {
        self.entries.iter().find(|k| k.name == name)
    }

    pub fn visible(&self) -> impl Iterator<Item = &Keypoint> {
        self.entries.iter().filter(|k| k.visible)
    }

    /// Same points with every coordinate (and the box) multiplied by `s`;
    /// image size rounded up.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|k| Keypoint {
                x: k.x * s,
                y: k.y * s,
                ..k.clone()
            })
            .collect();
        Self::new(
            entries,
            (f64::from(self.image_width) * s).ceil() as u32,
            (f64::from(self.image_height) * s).ceil() as u32,
            self.bbox.map(|b| BBox {
                x: b.x * s,
                y: b.y * s,
                w: b.w * s,
                h: b.h * s,
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub similarity: f64,
    /// Distance to the nearest visible ground-truth keypoint; set during
    /// evaluation.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How a source keypoint's embedding is read off the source grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceSampling {
    /// Bilinear sample of the neighbouring cells, re-normalized.
    #[default]
    Bilinear,
    /// The embedding of the cell containing the point.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub sampling: SourceSampling,
    /// Resize both grids to `n × n` before matching.
    pub upsample: Option<usize>,
    /// Only evaluate keypoints visible in both images. When off, keypoints
    /// visible in the source are all matched.
    pub both_visible: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            sampling: SourceSampling::Bilinear,
            upsample: None,
            both_visible: true,
        }
    }
}

fn source_embedding(src: &FeatureGrid, src_xy: (f64, f64), sampling: SourceSampling) -> Result<Vec<f64>> {
    let (px, py) = src_xy;
    if !px.is_finite() || !py.is_finite() {
        return Err(Error::invalid(format!("non-finite source point ({px}, {py})")));
    }
    let (x, y) = src.pixel_to_normalized(px, py);
    Ok(match sampling {
        SourceSampling::Bilinear => sample_embedding(src, x, y, true),
        SourceSampling::Nearest => {
            let cell = src.cell_containing(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
            let mut v: Vec<f64> = src.cell_at(cell).iter().map(|&c| f64::from(c)).collect();
            let n = dense::norm(&v);
            if n < NORM_EPS {
                v.iter_mut().for_each(|c| *c = 0.0);
            } else {
                v.iter_mut().for_each(|c| *c /= n);
            }
            v
        }
    })
}

/// Index and score of the best target row; ties go to the lowest index.
fn argmax_dot(query: &[f64], tgt: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for v in 0..tgt.rows {
        let s = dense::dot(query, tgt.row(v));
        if s > best.1 {
            best = (v, s);
        }
    }
    best
}

fn check_dims(src: &FeatureGrid, tgt: &FeatureGrid) -> Result<()> {
    if src.dim() != tgt.dim() {
        return Err(Error::DimMismatch {
            what: "matching channels",
            expected: src.dim(),
            actual: tgt.dim(),
        });
    }
    Ok(())
}

/// Transfers one source pixel position to the target image. Returns the
/// winning cell's center in target pixels and its similarity.
pub fn match_point(src: &FeatureGrid, tgt: &FeatureGrid, src_xy: (f64, f64)) -> Result<((f64, f64), f64)> {
    match_point_with(src, tgt, src_xy, SourceSampling::Bilinear)
}

pub fn match_point_with(
    src: &FeatureGrid,
    tgt: &FeatureGrid,
    src_xy: (f64, f64),
    sampling: SourceSampling,
) -> Result<((f64, f64), f64)> {
    check_dims(src, tgt)?;
    let query = source_embedding(src, src_xy, sampling)?;
    let (cell, sim) = argmax_dot(&query, &Matrix::from_grid(tgt));
    let (x, y) = tgt.cell_center(cell);
    Ok((tgt.normalized_to_pixel(x, y), sim))
}

/// Matches every evaluated source keypoint into the target. Grids are
/// ℓ2-normalized (and optionally upsampled) first; predictions keep the
/// source keypoint order.
pub fn match_keypoints(
    src: &FeatureGrid,
    tgt: &FeatureGrid,
    src_kps: &KeypointSet,
    tgt_kps: &KeypointSet,
    options: &MatchOptions,
) -> Result<PredictionSet> {
    check_dims(src, tgt)?;
    let (src, tgt) = match options.upsample {
        Some(n) if n > 0 => (bilinear_resize(src, n, n)?, bilinear_resize(tgt, n, n)?),
        _ => (src.clone(), tgt.clone()),
    };
    let src = l2_normalize(&src)?;
    let tgt = l2_normalize(&tgt)?;
    let tgt_m = Matrix::from_grid(&tgt);
    // keypoints are annotated on the original image; grids may describe a
    // different resolution of it
    let sx = f64::from(src.image_width()) / f64::from(src_kps.image_width());
    let sy = f64::from(src.image_height()) / f64::from(src_kps.image_height());
    let tx = f64::from(tgt_kps.image_width()) / f64::from(tgt.image_width());
    let ty = f64::from(tgt_kps.image_height()) / f64::from(tgt.image_height());

    let mut entries = Vec::new();
    for kp in src_kps.visible() {
        if options.both_visible && !tgt_kps.get(&kp.name).is_some_and(|t| t.visible) {
            continue;
        }
        let query = source_embedding(&src, (kp.x * sx, kp.y * sy), options.sampling)?;
        let (cell, similarity) = argmax_dot(&query, &tgt_m);
        let (cx, cy) = tgt.cell_center(cell);
        let (px, py) = tgt.normalized_to_pixel(cx, cy);
        entries.push(Prediction {
            name: kp.name.clone(),
            x: px * tx,
            y: py * ty,
            similarity,
            delta: None,
        });
    }
    Ok(PredictionSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kps(points: &[(&str, f64, f64, bool)], w: u32, h: u32) -> KeypointSet {
        KeypointSet::new(
            points
                .iter()
                .map(|&(n, x, y, v)| Keypoint {
                    name: n.into(),
                    x,
                    y,
                    visible: v,
                })
                .collect(),
            w,
            h,
            None,
        )
        .unwrap()
    }

    /// 4×4 grid of 16 distinct basis vectors, 32×32 pixel image.
    fn distinct() -> FeatureGrid {
        FeatureGrid::from_fn(4, 4, 16, 32, 32, |r, c, k| f32::from(u8::from(r * 4 + c == k))).unwrap()
    }

    #[test]
    fn planted_match() {
        let src = FeatureGrid::new(1, 1, 3, 8, 8, vec![0.0, 1.0, 0.0]).unwrap();
        let mut data = vec![0.0f32; 9 * 3];
        for cell in data.chunks_mut(3) {
            cell[0] = 1.0;
        }
        data[7 * 3] = 0.0;
        data[7 * 3 + 1] = 1.0;
        let tgt = FeatureGrid::new(3, 3, 3, 30, 30, data).unwrap();
        let ((x, y), sim) = match_point(&src, &tgt, (4.0, 4.0)).unwrap();
        assert_eq!((x, y), (15.0, 25.0));
        assert_eq!(sim, 1.0);
    }

    #[test]
    fn constant_target_ties_to_first_cell() {
        let src = distinct();
        let tgt = FeatureGrid::new(3, 3, 16, 30, 30, vec![0.25; 9 * 16]).unwrap();
        let ((x, y), _) = match_point(&src, &tgt, (17.0, 9.0)).unwrap();
        assert_eq!((x, y), (5.0, 5.0));
    }

    #[test]
    fn errors() {
        let a = distinct();
        let b = FeatureGrid::new(1, 1, 2, 1, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(match_point(&a, &b, (1.0, 1.0)), Err(Error::DimMismatch { .. })));
        assert!(match_point(&a, &a, (f64::NAN, 1.0)).is_err());
        assert!(KeypointSet::new(
            vec![
                Keypoint { name: "a".into(), x: 1.0, y: 1.0, visible: true },
                Keypoint { name: "a".into(), x: 2.0, y: 1.0, visible: true },
            ],
            4,
            4,
            None
        )
        .is_err());
        assert!(KeypointSet::new(
            vec![Keypoint { name: "a".into(), x: 9.0, y: 1.0, visible: true }],
            4,
            4,
            None
        )
        .is_err());
        // invisible points may sit anywhere
        assert!(KeypointSet::new(
            vec![Keypoint { name: "a".into(), x: -9.0, y: 1.0, visible: false }],
            4,
            4,
            None
        )
        .is_ok());
    }

    #[test]
    fn keypoint_filtering_and_self_matching() {
        let g = distinct();
        let src = kps(&[("a", 4.0, 4.0, true), ("b", 20.0, 12.0, true), ("c", 28.0, 28.0, false), ("d", 12.0, 28.0, true)], 32, 32);
        let tgt = kps(&[("a", 4.0, 4.0, true), ("b", 20.0, 12.0, true), ("c", 28.0, 28.0, true), ("d", 12.0, 28.0, false)], 32, 32);
        let preds = match_keypoints(&g, &g, &src, &tgt, &MatchOptions::default()).unwrap();
        let names: Vec<_> = preds.entries.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        for (p, kp) in preds.entries.iter().zip(src.entries()) {
            assert!((p.x - kp.x).abs() <= 8.0 && (p.y - kp.y).abs() <= 8.0);
        }
        let all_hidden = kps(&[("a", 0.0, 0.0, false), ("b", 0.0, 0.0, false)], 32, 32);
        assert!(match_keypoints(&g, &g, &src, &all_hidden, &MatchOptions::default()).unwrap().is_empty());

        let loose = MatchOptions { both_visible: false, ..Default::default() };
        assert_eq!(match_keypoints(&g, &g, &src, &all_hidden, &loose).unwrap().len(), 3);
    }

    #[test]
    fn nearest_sampling_snaps_to_cell() {
        let g = distinct();
        // 9.5 px lies in cell column 1 but bilinear would blend with column 0
        let ((x, y), sim) = match_point_with(&g, &g, (9.5, 4.0), SourceSampling::Nearest).unwrap();
        assert_eq!((x, y), (12.0, 4.0));
        assert_eq!(sim, 1.0);
    }

    #[test]
    fn upsampled_matching_runs() {
        let g = distinct();
        let kp = kps(&[("a", 4.0, 4.0, true)], 32, 32);
        let opts = MatchOptions { upsample: Some(8), ..Default::default() };
        let preds = match_keypoints(&g, &g, &kp, &kp, &opts).unwrap();
        assert_eq!(preds.len(), 1);
        assert!((preds.entries[0].x - 4.0).abs() <= 4.0);
    }
}
