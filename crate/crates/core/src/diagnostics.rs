//! PCK, PCK† and the miss / jitter / swap error taxonomy, plus
//! correct-vs-wrong similarity histograms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::{self, Matrix};
use crate::error::{Error, Result};
use crate::grid::{l2_normalize, sample_embedding, FeatureGrid};
use crate::matcher::{KeypointSet, PredictionSet};

/// Relative tolerance for deciding that δ and the target distance are the
/// same number.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSource {
    /// `α · max(W_b, H_b)` when the target has a box, image size otherwise.
    #[default]
    Bbox,
    /// Always `α · max(W, H)` of the target image.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alpha: f64,
    pub threshold_source: ThresholdSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            threshold_source: ThresholdSource::Bbox,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Pixel threshold `d` for a target image.
    pub fn threshold(&self, gt: &KeypointSet) -> f64 {
        let extent = match (self.threshold_source, gt.bbox()) {
            (ThresholdSource::Bbox, Some(b)) => b.w.max(b.h),
            _ => f64::from(gt.image_width().max(gt.image_height())),
        };
        self.alpha * extent
    }
}

/// Indicator flags. They are computed independently and may
/// overlap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFlags {
    pub miss: bool,
    pub jitter: bool,
    pub swap: bool,
    pub pck_hit: bool,
    pub dagger_hit: bool,
}

/// Mutually exclusive outcome, assigned by priority correct† > swap >
/// jitter > miss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Correct,
    Swap,
    Jitter,
    Miss,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Correct, Category::Swap, Category::Jitter, Category::Miss];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub raw: RawFlags,
    pub category: Category,
    /// Distance to the intended keypoint.
    pub dist: f64,
    /// Distance to the nearest visible keypoint.
    pub delta: f64,
}

fn same_distance(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

pub fn classify_prediction(pred_xy: (f64, f64), gt: &KeypointSet, target_name: &str, d: f64) -> Result<Classification> {
    if d.is_nan() || d <= 0.0 {
        return Err(Error::invalid(format!("threshold must be positive, got {d}")));
    }
    let target = gt.get(target_name).ok_or_else(|| Error::UnknownKeypoint(target_name.to_string()))?;
    let dist_to = |x: f64, y: f64| (pred_xy.0 - x).hypot(pred_xy.1 - y);
    let dist = dist_to(target.x, target.y);
    let delta = gt
        .visible()
        .map(|k| dist_to(k.x, k.y))
        .fold(f64::INFINITY, f64::min)
        // an invisible target still bounds δ
        .min(if target.visible { f64::INFINITY } else { dist });

    let nearest_is_target = same_distance(delta, dist);
    let pck_hit = dist <= d;
    let raw = RawFlags {
        miss: delta > d,
        jitter: d < dist && dist < 2.0 * d,
        swap: !nearest_is_target && delta < d,
        pck_hit,
        dagger_hit: pck_hit && nearest_is_target,
    };
    let category = if raw.dagger_hit {
        Category::Correct
    } else if raw.swap {
        Category::Swap
    } else if raw.jitter {
        Category::Jitter
    } else {
        Category::Miss
    };
    Ok(Classification {
        raw,
        category,
        dist,
        delta,
    })
}

/// Counts over a set of predictions. Rates are `None` when nothing was
/// evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub m: usize,
    pub pck_hits: usize,
    pub dagger_hits: usize,
    pub raw_miss: usize,
    pub raw_jitter: usize,
    pub raw_swap: usize,
    /// Indexed by [`Category`] order.
    pub exclusive: [usize; 4],
}

impl ErrorBreakdown {
    pub fn add(&mut self, c: &Classification) {
        self.m += 1;
        self.pck_hits += usize::from(c.raw.pck_hit);
        self.dagger_hits += usize::from(c.raw.dagger_hit);
        self.raw_miss += usize::from(c.raw.miss);
        self.raw_jitter += usize::from(c.raw.jitter);
        self.raw_swap += usize::from(c.raw.swap);
        self.exclusive[c.category.index()] += 1;
    }

    pub fn merge(&mut self, other: &ErrorBreakdown) {
        self.m += other.m;
        self.pck_hits += other.pck_hits;
        self.dagger_hits += other.dagger_hits;
        self.raw_miss += other.raw_miss;
        self.raw_jitter += other.raw_jitter;
        self.raw_swap += other.raw_swap;
        for (a, b) in self.exclusive.iter_mut().zip(other.exclusive) {
            *a += b;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn rate(&self, n: usize) -> Option<f64> {
        (self.m > 0).then(|| n as f64 / self.m as f64)
    }

    pub fn pck(&self) -> Option<f64> {
        self.rate(self.pck_hits)
    }

    pub fn pck_dagger(&self) -> Option<f64> {
        self.rate(self.dagger_hits)
    }

    pub fn raw_miss_rate(&self) -> Option<f64> {
        self.rate(self.raw_miss)
    }

    pub fn raw_jitter_rate(&self) -> Option<f64> {
        self.rate(self.raw_jitter)
    }

    pub fn raw_swap_rate(&self) -> Option<f64> {
        self.rate(self.raw_swap)
    }

    pub fn exclusive_count(&self, c: Category) -> usize {
        self.exclusive[c.index()]
    }

    pub fn exclusive_rate(&self, c: Category) -> Option<f64> {
        self.rate(self.exclusive[c.index()])
    }
}

/// Per-keypoint record of an evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointOutcome {
    pub name: String,
    pub pred_x: f64,
    pub pred_y: f64,
    pub dist: f64,
    pub delta: f64,
    pub raw: RawFlags,
    pub excl: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub src_id: String,
    pub tgt_id: String,
    pub per_kp: Vec<KeypointOutcome>,
}

/// Classifies every prediction, filling in its `delta`.
pub fn evaluate_predictions(
    preds: &mut PredictionSet,
    gt: &KeypointSet,
    config: &EvalConfig,
) -> Result<(ErrorBreakdown, Vec<KeypointOutcome>)> {
    config.validate()?;
    let d = config.threshold(gt);
    let mut breakdown = ErrorBreakdown::default();
    let mut outcomes = Vec::with_capacity(preds.len());
    for p in &mut preds.entries {
        let c = classify_prediction((p.x, p.y), gt, &p.name, d)?;
        p.delta = Some(c.delta);
        breakdown.add(&c);
        outcomes.push(KeypointOutcome {
            name: p.name.clone(),
            pred_x: p.x,
            pred_y: p.y,
            dist: c.dist,
            delta: c.delta,
            raw: c.raw,
            excl: c.category,
        });
    }
    Ok((breakdown, outcomes))
}

pub fn compute_metrics(preds: &PredictionSet, gt: &KeypointSet, config: &EvalConfig) -> Result<ErrorBreakdown> {
    let mut preds = preds.clone();
    Ok(evaluate_predictions(&mut preds, gt, config)?.0)
}

/// Cosine-similarity histograms over `[-1, 1]`, split by whether the target
/// cell lies within `d` of the true keypoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub correct: Vec<u64>,
    pub wrong: Vec<u64>,
}

impl SimilarityHistogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 1 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        Ok(Self {
            correct: vec![0; bins],
            wrong: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.correct.len()
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = 2.0 / self.bins() as f64;
        (-1.0 + b as f64 * w, -1.0 + (b + 1) as f64 * w)
    }

    fn bin_of(&self, s: f64) -> usize {
        let b = ((s + 1.0) / 2.0 * self.bins() as f64).floor();
        (b.max(0.0) as usize).min(self.bins() - 1)
    }

    pub fn total(&self) -> u64 {
        self.correct.iter().chain(&self.wrong).sum()
    }

    pub fn merge(&mut self, other: &SimilarityHistogram) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::DimMismatch {
                what: "histogram bins",
                expected: self.bins(),
                actual: other.bins(),
            });
        }
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.wrong.iter_mut().zip(&other.wrong) {
            *a += b;
        }
        Ok(())
    }

    /// Shared area of the two normalized histograms, in `[0, 1]`. Zero when
    /// either side is empty.
    pub fn overlap(&self) -> f64 {
        let nc: u64 = self.correct.iter().sum();
        let nw: u64 = self.wrong.iter().sum();
        if nc == 0 || nw == 0 {
            return 0.0;
        }
        self.correct
            .iter()
            .zip(&self.wrong)
            .map(|(&c, &w)| (c as f64 / nc as f64).min(w as f64 / nw as f64))
            .sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        w.write_record(["bin_lo", "bin_hi", "correct_count", "wrong_count"]).map_err(csv_err)?;
        for b in 0..self.bins() {
            let (lo, hi) = self.bin_edges(b);
            w.write_record([lo.to_string(), hi.to_string(), self.correct[b].to_string(), self.wrong[b].to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn similarity_histogram(
    src: &FeatureGrid,
    tgt: &FeatureGrid,
    gt_src: &KeypointSet,
    gt_tgt: &KeypointSet,
    d: f64,
    bins: usize,
) -> Result<SimilarityHistogram> {
    let mut hist = SimilarityHistogram::new(bins)?;
    if src.dim() != tgt.dim() {
        return Err(Error::DimMismatch {
            what: "histogram channels",
            expected: src.dim(),
            actual: tgt.dim(),
        });
    }
    let src = l2_normalize(src)?;
    let tgt_m = Matrix::from_grid(&l2_normalize(tgt)?);
    let sx = f64::from(src.image_width()) / f64::from(gt_src.image_width());
    let sy = f64::from(src.image_height()) / f64::from(gt_src.image_height());
    let tx = f64::from(gt_tgt.image_width()) / f64::from(tgt.image_width());
    let ty = f64::from(gt_tgt.image_height()) / f64::from(tgt.image_height());
    let centers: Vec<(f64, f64)> = (0..tgt.cells())
        .map(|v| {
            let (x, y) = tgt.cell_center(v);
            let (px, py) = tgt.normalized_to_pixel(x, y);
            (px * tx, py * ty)
        })
        .collect();

    for kp in gt_src.visible() {
        let Some(t) = gt_tgt.get(&kp.name).filter(|t| t.visible) else {
            continue;
        };
        let (x, y) = src.pixel_to_normalized(kp.x * sx, kp.y * sy);
        let e = sample_embedding(&src, x, y, true);
        for (v, &(cx, cy)) in centers.iter().enumerate() {
            let s = dense::dot(&e, tgt_m.row(v));
            let b = hist.bin_of(s);
            if (cx - t.x).hypot(cy - t.y) <= d {
                hist.correct[b] += 1;
            } else {
                hist.wrong[b] += 1;
            }
        }
    }
    Ok(hist)
}

/// One line of the aggregate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub alpha: f64,
    pub pck: Option<f64>,
    pub pck_dagger: Option<f64>,
    pub raw_miss: Option<f64>,
    pub raw_jitter: Option<f64>,
    pub raw_swap: Option<f64>,
    pub excl_correct: Option<f64>,
    pub excl_swap: Option<f64>,
    pub excl_jitter: Option<f64>,
    pub excl_miss: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
}

impl AggregateRow {
    pub fn new(method: &str, dataset: &str, alpha: f64, b: &ErrorBreakdown) -> Self {
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            alpha,
            pck: b.pck(),
            pck_dagger: b.pck_dagger(),
            raw_miss: b.raw_miss_rate(),
            raw_jitter: b.raw_jitter_rate(),
            raw_swap: b.raw_swap_rate(),
            excl_correct: b.exclusive_rate(Category::Correct),
            excl_swap: b.exclusive_rate(Category::Swap),
            excl_jitter: b.exclusive_rate(Category::Jitter),
            excl_miss: b.exclusive_rate(Category::Miss),
            m: b.m,
        }
    }
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

pub fn write_results_json(path: impl AsRef<Path>, reports: &[PairReport]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut f, reports).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}
