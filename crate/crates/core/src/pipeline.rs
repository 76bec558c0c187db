//! Dataset-level evaluation: project every grid, match each pair, classify
//! the predictions and pool the counts.

use rayon::prelude::*;

use crate::data_io::{generate_splits, synthesize_images, synthetic_manifest, DatasetManifest, SynthConfig};
use crate::diagnostics::{evaluate_predictions, similarity_histogram, ErrorBreakdown, EvalConfig, PairReport, SimilarityHistogram};
use crate::error::Result;
use crate::grid::{l2_normalize, FeatureGrid};
use crate::matcher::{match_keypoints, KeypointSet, MatchOptions};
use crate::projection::{apply_projection, ProjectionHead};
use crate::trainer::TrainingData;

/// `ρ(Ψ)` for every grid, or the normalized encoder grids when `head` is
/// `None`.
pub fn project_all(head: Option<&ProjectionHead>, grids: &[FeatureGrid]) -> Result<Vec<FeatureGrid>> {
    grids
        .par_iter()
        .map(|g| match head {
            Some(h) => apply_projection(h, g),
            None => l2_normalize(g),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: ErrorBreakdown,
    pub reports: Vec<PairReport>,
}

/// Matches and classifies every `(source, target)` pair. `ids` name the
/// grids in the per-pair reports. Pooled counts are summed in pair order.
pub fn evaluate_pairs(
    grids: &[FeatureGrid],
    keypoints: &[KeypointSet],
    ids: &[String],
    pairs: &[(usize, usize)],
    match_options: &MatchOptions,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    eval.validate()?;
    let per_pair: Vec<(ErrorBreakdown, PairReport)> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let mut preds = match_keypoints(&grids[s], &grids[t], &keypoints[s], &keypoints[t], match_options)?;
            let (b, per_kp) = evaluate_predictions(&mut preds, &keypoints[t], eval)?;
            Ok((
                b,
                PairReport {
                    src_id: ids[s].clone(),
                    tgt_id: ids[t].clone(),
                    per_kp,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut breakdown = ErrorBreakdown::default();
    let mut reports = Vec::with_capacity(per_pair.len());
    for (b, r) in per_pair {
        breakdown.merge(&b);
        reports.push(r);
    }
    Ok(Evaluation { breakdown, reports })
}

/// Correct/wrong similarity histogram pooled over `pairs`, with each
/// target's threshold taken from `eval`.
pub fn pooled_histogram(
    grids: &[FeatureGrid],
    keypoints: &[KeypointSet],
    pairs: &[(usize, usize)],
    eval: &EvalConfig,
    bins: usize,
) -> Result<SimilarityHistogram> {
    eval.validate()?;
    let parts: Vec<SimilarityHistogram> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let d = eval.threshold(&keypoints[t]);
            similarity_histogram(&grids[s], &grids[t], &keypoints[s], &keypoints[t], d, bins)
        })
        .collect::<Result<_>>()?;
    let mut total = SimilarityHistogram::new(bins)?;
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

/// Hold-out protocol on a synthetic dataset: heads are trained on pairs
/// among the first `train_images` images and scored on pairs among the
/// rest.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub grids: Vec<FeatureGrid>,
    pub keypoints: Vec<KeypointSet>,
    pub ids: Vec<String>,
    pub train_images: usize,
    pub test_pairs: Vec<(usize, usize)>,
}

impl SyntheticBenchmark {
    pub fn new(config: &SynthConfig, train_images: usize, test_pairs: usize) -> Result<Self> {
        let images = synthesize_images(config)?;
        if train_images < 2 || images.len() < train_images + 2 {
            return Err(crate::Error::invalid(format!(
                "need at least two training and two test images, got {train_images} of {}",
                images.len()
            )));
        }
        let manifest = synthetic_manifest(config, &images, "");
        let keypoints = (0..images.len()).map(|i| manifest.keypoint_set(i)).collect::<Result<_>>()?;
        let test = DatasetManifest::new("test", manifest.images[train_images..].to_vec(), "");
        let test_pairs = generate_splits(&test, test_pairs, config.seed, false)?
            .resolve(&test)?
            .into_iter()
            .map(|(s, t)| (s + train_images, t + train_images))
            .collect();
        Ok(Self {
            ids: images.iter().map(|i| i.id.clone()).collect(),
            grids: images.into_iter().map(|i| i.grid).collect(),
            keypoints,
            train_images,
            test_pairs,
        })
    }

    /// Training set with `num_pairs` ordered pairs drawn with `seed` from
    /// the training images.
    pub fn training_data(&self, num_pairs: usize, seed: u64) -> Result<TrainingData> {
        let records = self
            .ids
            .iter()
            .take(self.train_images)
            .map(|id| crate::data_io::ImageRecord {
                id: id.clone(),
                feature_path: Default::default(),
                image_width: 1,
                image_height: 1,
                bbox: None,
                class_label: None,
                keypoints: vec![],
            })
            .collect();
        let train = DatasetManifest::new("train", records, "");
        let pairs = generate_splits(&train, num_pairs, seed, false)?.resolve(&train)?;
        Ok(TrainingData {
            grids: self.grids.clone(),
            keypoints: self.keypoints.clone(),
            pairs,
            augmented: Vec::new(),
        })
    }

    /// Pooled metrics and correct/wrong histogram overlap on the test pairs.
    pub fn score(&self, head: Option<&ProjectionHead>, eval: &EvalConfig, bins: usize) -> Result<(ErrorBreakdown, f64)> {
        let projected = project_all(head, &self.grids)?;
        let e = evaluate_pairs(&projected, &self.keypoints, &self.ids, &self.test_pairs, &MatchOptions::default(), eval)?;
        let hist = pooled_histogram(&projected, &self.keypoints, &self.test_pairs, eval, bins)?;
        Ok((e.breakdown, hist.overlap()))
    }
}
