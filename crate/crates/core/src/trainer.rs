//! Adam training of a linear projection head against one of the loss
//! objectives.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_transform, warp_grid, AugmentConfig, SpatialTransform};
use crate::data_io::{DatasetManifest, PairList};
use crate::error::{Error, Result};
use crate::grid::{bilinear_resize, FeatureGrid};
use crate::losses::{loss_gradient, LossConfig, LossInputs, LossKind};
use crate::matcher::KeypointSet;
use crate::projection::{ProjectionHead, DEFAULT_PROJ_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `weights` in place.
pub fn adam_step(state: &mut AdamState, weights: &mut [f64], grad: &[f64]) -> Result<()> {
    if weights.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::DimMismatch {
            what: "optimizer parameters",
            expected: state.m.len(),
            actual: if weights.len() != state.m.len() { weights.len() } else { grad.len() },
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: state.step + 1 });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((w, m), v), &g) in weights.iter_mut().zip(&mut state.m).zip(&mut state.v).zip(grad) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        *w -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}

/// Where the two views of a training item come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// An image and a randomly transformed copy of it.
    Aug,
    /// A single image.
    SameImage,
    /// Listed (source, target) image pairs.
    RealPairs,
}

impl PairSource {
    pub fn default_for(kind: LossKind) -> Self {
        match kind {
            LossKind::Eq | LossKind::Dve => PairSource::Aug,
            LossKind::Cl => PairSource::SameImage,
            LossKind::Lead | LossKind::Asym | LossKind::Supervised => PairSource::RealPairs,
        }
    }
}

impl std::str::FromStr for PairSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aug" => Ok(PairSource::Aug),
            "same_image" => Ok(PairSource::SameImage),
            "real_pairs" => Ok(PairSource::RealPairs),
            _ => Err(Error::invalid(format!("unknown pair source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub proj_dim: usize,
    /// Resize grids to `upsample × upsample` cells first; 0 keeps them.
    pub upsample: usize,
    pub seed: u64,
    pub pair_source: PairSource,
    /// Pairs whose gradients are averaged into one step.
    pub batch_pairs: usize,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            epochs: 50,
            lr: 0.001,
            loss: LossConfig::defaults(kind),
            proj_dim: DEFAULT_PROJ_DIM,
            upsample: 64,
            seed: 0,
            pair_source: PairSource::default_for(kind),
            batch_pairs: 1,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.proj_dim == 0 || self.batch_pairs == 0 {
            return Err(Error::invalid("epochs, proj_dim and batch_pairs must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        let ok = match self.pair_source {
            PairSource::Aug => matches!(self.loss.kind, LossKind::Eq | LossKind::Dve),
            PairSource::SameImage => self.loss.kind == LossKind::Cl,
            PairSource::RealPairs => !matches!(self.loss.kind, LossKind::Eq | LossKind::Dve),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "pair source {:?} cannot feed the {} loss",
                self.pair_source, self.loss.kind
            )));
        }
        Ok(())
    }
}

/// A stored augmented view: `grid` is the features of `base` after
/// `transform`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub base: usize,
    pub grid: FeatureGrid,
    pub transform: SpatialTransform,
}

/// Encoder grids plus whatever the chosen pair source needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub grids: Vec<FeatureGrid>,
    /// One set per grid; needed by the supervised loss.
    pub keypoints: Vec<KeypointSet>,
    /// `(source, target)` indices into `grids`.
    pub pairs: Vec<(usize, usize)>,
    /// When non-empty, `aug` training uses these instead of sampled warps.
    pub augmented: Vec<AugmentedView>,
}

impl TrainingData {
    pub fn from_manifest(manifest: &DatasetManifest, pairs: Option<&PairList>) -> Result<Self> {
        let grids = manifest.read_all_grids()?;
        let keypoints = (0..manifest.images.len())
            .map(|i| manifest.keypoint_set(i))
            .collect::<Result<_>>()?;
        let pairs = match pairs {
            Some(p) => p.resolve(manifest)?,
            None => Vec::new(),
        };
        let augmented = manifest
            .augmented_pairs
            .iter()
            .map(|a| {
                Ok(AugmentedView {
                    base: manifest.index_of(&a.base_id).expect("validated manifest"),
                    grid: crate::data_io::read_features(manifest.resolve(&a.aug_feature_path))?,
                    transform: a.transform,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grids,
            keypoints,
            pairs,
            augmented,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    /// Mean loss of each epoch, measured before each step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Image(usize),
    Stored(usize),
    Pair(usize, usize),
}

fn resize_all(grids: &[FeatureGrid], n: usize) -> Result<Vec<FeatureGrid>> {
    grids
        .iter()
        .map(|g| {
            if n == 0 || (g.height() == n && g.width() == n) {
                Ok(g.clone())
            } else {
                bilinear_resize(g, n, n)
            }
        })
        .collect()
}

/// Cell correspondences of keypoints visible in both images.
pub fn keypoint_cell_pairs(src: &FeatureGrid, tgt: &FeatureGrid, src_kps: &KeypointSet, tgt_kps: &KeypointSet) -> Vec<(usize, usize)> {
    let cell = |g: &FeatureGrid, k: &KeypointSet, x: f64, y: f64| {
        g.cell_containing(
            (x / f64::from(k.image_width())).clamp(0.0, 1.0),
            (y / f64::from(k.image_height())).clamp(0.0, 1.0),
        )
    };
    src_kps
        .visible()
        .filter_map(|s| {
            let t = tgt_kps.get(&s.name).filter(|t| t.visible)?;
            Some((cell(src, src_kps, s.x, s.y), cell(tgt, tgt_kps, t.x, t.y)))
        })
        .collect()
}

/// Optimizes `init` on `data`. Deterministic for a given seed: items are
/// visited in a seeded per-epoch permutation and every random choice
/// (augmentations, auxiliary images) comes from the same stream.
pub fn train_projection(data: &TrainingData, config: &TrainConfig, init: &ProjectionHead) -> Result<TrainOutcome> {
    config.validate()?;
    if data.grids.is_empty() {
        return Err(Error::invalid("training set has no grids"));
    }
    let in_dim = data.grids[0].dim();
    if let Some(g) = data.grids.iter().chain(data.augmented.iter().map(|a| &a.grid)).find(|g| g.dim() != in_dim) {
        return Err(Error::DimMismatch {
            what: "training grid channels",
            expected: in_dim,
            actual: g.dim(),
        });
    }
    if init.in_dim() != in_dim {
        return Err(Error::DimMismatch {
            what: "head input channels",
            expected: in_dim,
            actual: init.in_dim(),
        });
    }
    let kind = config.loss.kind;
    let items: Vec<Item> = match config.pair_source {
        PairSource::Aug if !data.augmented.is_empty() => (0..data.augmented.len()).map(Item::Stored).collect(),
        PairSource::Aug | PairSource::SameImage => (0..data.grids.len()).map(Item::Image).collect(),
        PairSource::RealPairs => data.pairs.iter().map(|&(s, t)| Item::Pair(s, t)).collect(),
    };
    if items.is_empty() {
        return Err(Error::invalid(format!("no training items for pair source {:?}", config.pair_source)));
    }
    if let Some(&(s, t)) = data.pairs.iter().find(|&&(s, t)| s >= data.grids.len() || t >= data.grids.len()) {
        return Err(Error::invalid(format!("pair ({s}, {t}) out of range for {} grids", data.grids.len())));
    }
    if kind == LossKind::Supervised && data.keypoints.len() != data.grids.len() {
        return Err(Error::invalid("supervised training needs one keypoint set per grid"));
    }

    let grids = resize_all(&data.grids, config.upsample)?;
    let stored: Vec<FeatureGrid> = resize_all(&data.augmented.iter().map(|a| a.grid.clone()).collect::<Vec<_>>(), config.upsample)?;
    let mut head = init.clone();
    let mut adam = AdamState::new(head.weights().len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = items;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(config.batch_pairs) {
            let mut grad_sum = vec![0.0; head.weights().len()];
            let mut in_batch = 0usize;
            for &item in batch {
                let Some((loss, grad)) = item_gradient(item, &grids, &stored, data, config, &head, &mut rng)? else {
                    continue;
                };
                total += loss;
                counted += 1;
                in_batch += 1;
                for (s, g) in grad_sum.iter_mut().zip(grad) {
                    *s += g;
                }
            }
            if in_batch == 0 {
                continue;
            }
            grad_sum.iter_mut().for_each(|g| *g /= in_batch as f64);
            adam_step(&mut adam, head.weights_mut(), &grad_sum)?;
            if head.weights().iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFiniteGradient { step: adam.step });
            }
        }
        if counted == 0 {
            return Err(Error::invalid("no training item produced a loss (no shared keypoints?)"));
        }
        let mean = total / counted as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome { head, history })
}

fn item_gradient(
    item: Item,
    grids: &[FeatureGrid],
    stored: &[FeatureGrid],
    data: &TrainingData,
    config: &TrainConfig,
    head: &ProjectionHead,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(f64, Vec<f64>)>> {
    let kind = config.loss.kind;
    let pick_aux = |rng: &mut ChaCha8Rng, not: usize| {
        if grids.len() == 1 {
            0
        } else {
            let j = rng.random_range(0..grids.len() - 1);
            if j >= not { j + 1 } else { j }
        }
    };
    let result = match item {
        Item::Image(i) if kind == LossKind::Cl => {
            let inputs = LossInputs {
                enc_a: Some(&grids[i]),
                ..Default::default()
            };
            loss_gradient(&config.loss, &inputs, head)?
        }
        Item::Image(i) => {
            let g = sample_transform(rng.random(), &config.augment)?;
            let warped = warp_grid(&grids[i], &g)?;
            let aux = (kind == LossKind::Dve).then(|| pick_aux(rng, i));
            let inputs = LossInputs {
                enc_a: Some(&grids[i]),
                enc_b: Some(&warped),
                aux: aux.map(|j| &grids[j]),
                transform: Some(g),
                gt_pairs: &[],
            };
            loss_gradient(&config.loss, &inputs, head)?
        }
        Item::Stored(k) => {
            let view = &data.augmented[k];
            let aux = (kind == LossKind::Dve).then(|| pick_aux(rng, view.base));
            let inputs = LossInputs {
                enc_a: Some(&grids[view.base]),
                enc_b: Some(&stored[k]),
                aux: aux.map(|j| &grids[j]),
                transform: Some(view.transform),
                gt_pairs: &[],
            };
            loss_gradient(&config.loss, &inputs, head)?
        }
        Item::Pair(s, t) => {
            let gt = if kind == LossKind::Supervised {
                let gt = keypoint_cell_pairs(&grids[s], &grids[t], &data.keypoints[s], &data.keypoints[t]);
                if gt.is_empty() {
                    return Ok(None);
                }
                gt
            } else {
                Vec::new()
            };
            let inputs = LossInputs {
                enc_a: Some(&grids[s]),
                enc_b: Some(&grids[t]),
                gt_pairs: &gt,
                ..Default::default()
            };
            loss_gradient(&config.loss, &inputs, head)?
        }
    };
    Ok(Some(result))
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "mean_loss"]).map_err(csv_err)?;
    for (e, l) in history.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
