//! Feature files, dataset manifests, evaluation pair lists and the
//! synthetic dataset generator.
//!
//! Feature files use the `DFT1` layout, all little-endian:
//!
//! ```text
//! b"DFT1" | u32 version = 1 | u32 H | u32 W | u32 D | u32 image_height | u32 image_width
//! H·W·D f32 values, row-major (row, col, channel)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::SpatialTransform;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::matcher::{BBox, Keypoint, KeypointSet};

pub const DFT1_MAGIC: [u8; 4] = *b"DFT1";
pub const DFT1_VERSION: u32 = 1;
const DFT1_HEADER: usize = 4 + 6 * 4;

pub fn encode_features(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(DFT1_HEADER + grid.data().len() * 4);
    out.extend_from_slice(&DFT1_MAGIC);
    for v in [
        DFT1_VERSION,
        grid.height() as u32,
        grid.width() as u32,
        grid.dim() as u32,
        grid.image_height(),
        grid.image_width(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureGrid> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DFT1_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: DFT1_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < DFT1_HEADER {
        return Err(truncated(format!("{} byte header, need {DFT1_HEADER}", bytes.len())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = field(0);
    if version != DFT1_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: DFT1_VERSION,
            found: version,
        });
    }
    let (h, w, d, img_h, img_w) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4), field(5));
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("{}: header size {h}x{w}x{d} overflows", path.display())))?;
    let body = &bytes[DFT1_HEADER..];
    let want = n.saturating_mul(4);
    if body.len() < want {
        return Err(truncated(format!("header declares {n} floats, file holds {}", body.len() / 4)));
    }
    if body.len() > want {
        return Err(Error::invalid(format!(
            "{}: {} trailing bytes after {n} floats",
            path.display(),
            body.len() - want
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureGrid::new(h, w, d, img_h, img_w, data)
}

pub fn write_features(path: impl AsRef<Path>, grid: &FeatureGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: PathBuf,
    pub image_width: u32,
    pub image_height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    pub keypoints: Vec<Keypoint>,
}

/// A precomputed feature grid of an augmented copy of `base_id`, with the
/// transform that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedPair {
    pub base_id: String,
    pub aug_feature_path: PathBuf,
    pub transform: SpatialTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augmented_pairs: Vec<AugmentedPair>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, images: Vec<ImageRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            images,
            augmented_pairs: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    /// Reads and validates a manifest, including the existence of every
    /// referenced feature file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|e| match e {
            Error::InvalidInput(detail) => Error::Manifest {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut class_names: HashMap<Option<&str>, (&str, Vec<&str>)> = HashMap::new();
        for rec in &self.images {
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {:?}", rec.id)));
            }
            let file = self.resolve(&rec.feature_path);
            if !file.is_file() {
                return Err(Error::invalid(format!(
                    "image {:?}: feature file {} does not exist",
                    rec.id,
                    file.display()
                )));
            }
            self.keypoints_of(rec)
                .map_err(|e| Error::invalid(format!("image {:?}: {e}", rec.id)))?;
            let mut names: Vec<&str> = rec.keypoints.iter().map(|k| k.name.as_str()).collect();
            names.sort_unstable();
            let entry = class_names.entry(rec.class_label.as_deref()).or_insert((rec.id.as_str(), names.clone()));
            if entry.1 != names {
                return Err(Error::invalid(format!(
                    "image {:?} has keypoint names {names:?}, but {:?} of the same class has {:?}",
                    rec.id, entry.0, entry.1
                )));
            }
        }
        for aug in &self.augmented_pairs {
            if !ids.contains(aug.base_id.as_str()) {
                return Err(Error::invalid(format!("augmented pair refers to unknown image {:?}", aug.base_id)));
            }
            let file = self.resolve(&aug.aug_feature_path);
            if !file.is_file() {
                return Err(Error::invalid(format!("augmented feature file {} does not exist", file.display())));
            }
            aug.transform.validate()?;
        }
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.id == id)
    }

    fn keypoints_of(&self, rec: &ImageRecord) -> Result<KeypointSet> {
        KeypointSet::new(rec.keypoints.clone(), rec.image_width, rec.image_height, rec.bbox)
    }

    pub fn keypoint_set(&self, index: usize) -> Result<KeypointSet> {
        self.keypoints_of(&self.images[index])
    }

    pub fn read_grid(&self, index: usize) -> Result<FeatureGrid> {
        read_features(self.resolve(&self.images[index].feature_path))
    }

    /// Every image's grid, in manifest order.
    pub fn read_all_grids(&self) -> Result<Vec<FeatureGrid>> {
        (0..self.images.len()).into_par_iter().map(|i| self.read_grid(i)).collect()
    }
}

/// Ordered evaluation pairs by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<(String, String)>,
    /// Seed that produced the list; not stored in the CSV.
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    src_id: String,
    tgt_id: String,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if self.pairs.is_empty() {
            w.write_record(["src_id", "tgt_id"]).map_err(csv_err)?;
        }
        for (s, t) in &self.pairs {
            w.serialize(PairRow {
                src_id: s.clone(),
                tgt_id: t.clone(),
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let pairs = r
            .deserialize::<PairRow>()
            .map(|row| row.map(|r| (r.src_id, r.tgt_id)))
            .collect::<std::result::Result<_, _>>()
            .map_err(csv_err)?;
        Ok(Self { pairs, seed: None })
    }

    /// Manifest indices of every pair; fails on unknown ids or self-pairs.
    pub fn resolve(&self, manifest: &DatasetManifest) -> Result<Vec<(usize, usize)>> {
        let index: HashMap<&str, usize> = manifest.images.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        self.pairs
            .iter()
            .map(|(s, t)| {
                let look = |id: &str| {
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("pair refers to unknown image {id:?}")))
                };
                let (a, b) = (look(s)?, look(t)?);
                if a == b {
                    return Err(Error::invalid(format!("pair ({s}, {t}) pairs an image with itself")));
                }
                Ok((a, b))
            })
            .collect()
    }
}

/// Samples `num_pairs` distinct ordered pairs uniformly without
/// replacement. With `same_class`, pairs stay within one class label;
/// unlabeled images form one group of their own.
pub fn generate_splits(manifest: &DatasetManifest, num_pairs: usize, seed: u64, same_class: bool) -> Result<PairList> {
    if num_pairs == 0 {
        return Err(Error::invalid("num_pairs must be at least 1"));
    }
    let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, rec) in manifest.images.iter().enumerate() {
        let key = if same_class { rec.class_label.as_deref() } else { None };
        groups.entry(key).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.len() * (g.len() - 1)).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::NoEligiblePairs(format!(
            "{} images{}",
            manifest.images.len(),
            if same_class { ", no class with two or more images" } else { "" }
        )));
    }
    let count = if num_pairs > total {
        log::warn!("requested {num_pairs} pairs but only {total} exist; returning all");
        total
    } else {
        num_pairs
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, total, count);
    let pairs = picked
        .into_iter()
        .map(|mut k| {
            let mut g = 0;
            while k >= sizes[g] {
                k -= sizes[g];
                g += 1;
            }
            let members = &groups[g];
            let n = members.len() - 1;
            let (i, j) = (k / n, k % n);
            let j = if j >= i { j + 1 } else { j };
            let id = |x: usize| manifest.images[members[x]].id.clone();
            (id(i), id(j))
        })
        .collect();
    Ok(PairList {
        pairs,
        seed: Some(seed),
    })
}

/// Parameters of the synthetic keypoint dataset.
///
/// Each image gets `num_keypoints` landmarks at random positions. A cell's
/// signal is `w·c_k + (1 - w)·c_bg` with `w = exp(-dist / spatial_sigma)`
/// to the nearest landmark `k`, where the codes `c_*` are orthonormal and
/// shared by all images. The last `nuisance_dims` channels carry Fourier
/// features of the absolute cell position, and every channel gets i.i.d.
/// Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    /// Grid side length in cells.
    pub grid: usize,
    pub dim: usize,
    pub num_keypoints: usize,
    pub noise_sigma: f64,
    pub nuisance_dims: usize,
    /// Decay length of the landmark signal, in cells.
    pub spatial_sigma: f64,
    /// Norm of the positional channels.
    pub nuisance_scale: f64,
    /// Pixels per cell side.
    pub cell_pixels: u32,
    /// Minimum landmark spacing, in cells.
    pub min_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 40,
            grid: 16,
            dim: 32,
            num_keypoints: 5,
            noise_sigma: 0.3,
            nuisance_dims: 16,
            spatial_sigma: 2.0,
            nuisance_scale: 0.3,
            cell_pixels: 8,
            min_separation: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_images == 0 || self.grid == 0 || self.cell_pixels == 0 {
            return bad("num_images, grid and cell_pixels must be positive".into());
        }
        if self.num_keypoints < 2 {
            return bad(format!("need at least 2 keypoints, got {}", self.num_keypoints));
        }
        if self.nuisance_dims >= self.dim {
            return bad(format!("nuisance_dims {} must be below dim {}", self.nuisance_dims, self.dim));
        }
        if self.dim - self.nuisance_dims < self.num_keypoints + 1 {
            return bad(format!(
                "{} signal channels cannot hold {} keypoint codes plus a background code",
                self.dim - self.nuisance_dims,
                self.num_keypoints
            ));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.noise_sigma) || !finite_nonneg(self.nuisance_scale) || !finite_nonneg(self.min_separation) {
            return bad("noise_sigma, nuisance_scale and min_separation must be finite and non-negative".into());
        }
        if !(self.spatial_sigma > 0.0 && self.spatial_sigma.is_finite()) {
            return bad(format!("spatial_sigma must be positive, got {}", self.spatial_sigma));
        }
        Ok(())
    }

    pub fn image_size(&self) -> u32 {
        self.grid as u32 * self.cell_pixels
    }
}

/// A generated image: its grid and exact landmark positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub grid: FeatureGrid,
    pub keypoints: Vec<Keypoint>,
}

pub fn keypoint_name(k: usize) -> String {
    format!("kp{k}")
}

/// Orthonormal columns: `num_keypoints` landmark codes, then the background
/// code, each of length `dim - nuisance_dims`.
fn latent_codes(config: &SynthConfig, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s = config.dim - config.nuisance_dims;
    let raw = DMatrix::from_fn(s, config.num_keypoints + 1, |_, _| StandardNormal.sample(rng));
    raw.qr().q()
}

fn place_keypoints(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let side = config.grid as f64;
    // positions in cell units, kept half a cell inside the border
    let lo = 0.5f64.min(side / 2.0);
    let hi = side - lo;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(config.num_keypoints);
    let mut sep = config.min_separation;
    let mut tries = 0;
    while pts.len() < config.num_keypoints {
        let p = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        if pts.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= sep) {
            pts.push(p);
        }
        tries += 1;
        if tries % 1000 == 0 {
            sep *= 0.8;
        }
    }
    pts
}

fn nuisance(config: &SynthConfig, row: usize, col: usize, out: &mut [f64]) {
    let n = out.len();
    let amp = config.nuisance_scale * (2.0 / n as f64).sqrt();
    let side = config.grid as f64;
    let (y, x) = ((row as f64 + 0.5) / side, (col as f64 + 0.5) / side);
    for (j, v) in out.iter_mut().enumerate() {
        let freq = (j / 4 + 1) as f64 * std::f64::consts::PI;
        let t = if j % 2 == 0 { x } else { y };
        *v = amp * if (j / 2) % 2 == 0 { (freq * t).cos() } else { (freq * t).sin() };
    }
}

/// Generates the synthetic images in memory. Identical configs give
/// bitwise-identical output.
pub fn synthesize_images(config: &SynthConfig) -> Result<Vec<SyntheticImage>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codes = latent_codes(config, &mut rng);
    let k = config.num_keypoints;
    let s = config.dim - config.nuisance_dims;
    let side = config.grid;
    let px = f64::from(config.cell_pixels);
    let image = config.image_size();

    let mut images = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let pts = place_keypoints(config, &mut rng);
        let mut data = Vec::with_capacity(side * side * config.dim);
        let mut cell = vec![0.0f64; config.dim];
        for row in 0..side {
            for col in 0..side {
                let (cx, cy) = (col as f64 + 0.5, row as f64 + 0.5);
                let (nearest, dist) = pts
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (j, (p.0 - cx).hypot(p.1 - cy)))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
                let w = (-dist / config.spatial_sigma).exp();
                for (c, v) in cell[..s].iter_mut().enumerate() {
                    *v = w * codes[(c, nearest)] + (1.0 - w) * codes[(c, k)];
                }
                nuisance(config, row, col, &mut cell[s..]);
                for v in &mut cell {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += config.noise_sigma * e;
                }
                data.extend(cell.iter().map(|&v| v as f32));
            }
        }
        let keypoints = pts
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| Keypoint {
                name: keypoint_name(j),
                x: x * px,
                y: y * px,
                visible: true,
            })
            .collect();
        images.push(SyntheticImage {
            id: format!("synth_{i:04}"),
            grid: FeatureGrid::new(side, side, config.dim, image, image, data)?,
            keypoints,
        });
    }
    Ok(images)
}

/// Builds an in-memory manifest for synthetic images whose feature files
/// live (or will live) under `base_dir/features/`.
pub fn synthetic_manifest(config: &SynthConfig, images: &[SyntheticImage], base_dir: impl Into<PathBuf>) -> DatasetManifest {
    let size = config.image_size();
    let records = images
        .iter()
        .map(|img| ImageRecord {
            id: img.id.clone(),
            feature_path: PathBuf::from("features").join(format!("{}.dft", img.id)),
            image_width: size,
            image_height: size,
            bbox: None,
            class_label: Some("synthetic".into()),
            keypoints: img.keypoints.clone(),
        })
        .collect();
    DatasetManifest::new(format!("synthetic-seed{}", config.seed), records, base_dir)
}

/// Generates the dataset and writes `manifest.json` plus one `DFT1` file
/// per image into `out_dir`. Returns the loaded manifest.
pub fn synthesize_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let images = synthesize_images(config)?;
    let features = out_dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let manifest = synthetic_manifest(config, &images, out_dir);
    for (img, rec) in images.iter().zip(&manifest.images) {
        write_features(manifest.resolve(&rec.feature_path), &img.grid)?;
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    DatasetManifest::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> FeatureGrid {
        FeatureGrid::from_fn(3, 2, 4, 30, 20, |r, c, k| (r * 100 + c * 10 + k) as f32 * 0.37 - 5.0).unwrap()
    }

    #[test]
    fn dft1_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.dft");
        let mut g = grid();
        g = g.with_data(4, g.data().iter().map(|v| v * std::f32::consts::PI).collect()).unwrap();
        write_features(&p, &g).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back, g);
        assert!(back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = encode_features(&g);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_features(&bad, &p), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 4], &p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_features(&bytes[..10], &p), Err(Error::Truncated { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2, &p), Err(Error::VersionMismatch { found: 2, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_features(&long, &p).is_err());
    }

    fn manifest_with(labels: &[Option<&str>]) -> DatasetManifest {
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ImageRecord {
                id: format!("img{i}"),
                feature_path: PathBuf::from(format!("img{i}.dft")),
                image_width: 10,
                image_height: 10,
                bbox: None,
                class_label: l.map(String::from),
                keypoints: vec![],
            })
            .collect();
        DatasetManifest::new("t", images, "")
    }

    #[test]
    fn splits_enumerate_all_pairs() {
        let m = manifest_with(&[None; 4]);
        let p = generate_splits(&m, 12, 3, false).unwrap();
        let set: HashSet<_> = p.pairs.iter().cloned().collect();
        assert_eq!(set.len(), 12);
        assert!(p.pairs.iter().all(|(a, b)| a != b));
        assert_eq!(generate_splits(&m, 50, 3, false).unwrap().len(), 12);
        assert_eq!(p, generate_splits(&m, 12, 3, false).unwrap());
        assert_ne!(generate_splits(&m, 5, 3, false).unwrap(), generate_splits(&m, 5, 4, false).unwrap());
    }

    #[test]
    fn splits_respect_classes() {
        let m = manifest_with(&[Some("a"), Some("b"), Some("a"), Some("b"), Some("b")]);
        let p = generate_splits(&m, 100, 0, true).unwrap();
        assert_eq!(p.len(), 2 + 6);
        let class = |id: &str| m.images[m.index_of(id).unwrap()].class_label.clone();
        assert!(p.pairs.iter().all(|(a, b)| class(a) == class(b)));

        let lonely = manifest_with(&[Some("a"), Some("b")]);
        assert!(matches!(generate_splits(&lonely, 1, 0, true), Err(Error::NoEligiblePairs(_))));
        assert!(generate_splits(&lonely, 1, 0, false).is_ok());
        assert!(generate_splits(&m, 0, 0, false).is_err());
    }

    #[test]
    fn pair_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        let list = generate_splits(&manifest_with(&[None; 5]), 7, 11, false).unwrap();
        list.write_csv(&p).unwrap();
        let back = PairList::read_csv(&p).unwrap();
        assert_eq!(back.pairs, list.pairs);
        PairList::default().write_csv(&p).unwrap();
        assert!(PairList::read_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            num_images: 3,
            grid: 4,
            dim: 8,
            num_keypoints: 2,
            nuisance_dims: 2,
            min_separation: 1.0,
            ..Default::default()
        };
        let m = synthesize_dataset(&config, dir.path()).unwrap();
        assert_eq!(m.images.len(), 3);
        assert_eq!(m.read_grid(1).unwrap().dim(), 8);

        let path = dir.path().join("manifest.json");
        let original = std::fs::read_to_string(&path).unwrap();
        let rewrite = |f: &dyn Fn(&mut serde_json::Value)| {
            let mut v: serde_json::Value = serde_json::from_str(&original).unwrap();
            f(&mut v);
            std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
            DatasetManifest::load(&path)
        };
        assert!(rewrite(&|_| {}).is_ok());
        assert!(matches!(rewrite(&|v| v["images"][1]["id"] = "synth_0000".into()), Err(Error::Manifest { .. })));
        assert!(rewrite(&|v| v["images"][0]["feature_path"] = "missing.dft".into()).is_err());
        assert!(rewrite(&|v| v["images"][0]["keypoints"][0]["x"] = 1e6.into()).is_err());
        assert!(rewrite(&|v| v["images"][0]["keypoints"][0]["name"] = "other".into()).is_err());
        assert!(rewrite(&|v| v["surprise"] = 1.into()).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_validated() {
        let c = SynthConfig {
            num_images: 2,
            ..Default::default()
        };
        let a = synthesize_images(&c).unwrap();
        assert_eq!(a, synthesize_images(&c).unwrap());
        assert_ne!(a, synthesize_images(&SynthConfig { seed: 1, ..c }).unwrap());
        assert_eq!(a[0].keypoints.len(), 5);
        assert_eq!(a[0].grid.image_width(), 128);
        assert!(synthesize_images(&SynthConfig { nuisance_dims: 32, ..c }).is_err());
        assert!(synthesize_images(&SynthConfig { num_keypoints: 1, ..c }).is_err());
        assert!(synthesize_images(&SynthConfig { nuisance_dims: 27, ..c }).is_err());
    }

    #[test]
    fn noise_free_cells_prefer_their_own_code() {
        let c = SynthConfig {
            num_images: 3,
            noise_sigma: 0.0,
            nuisance_dims: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let codes = latent_codes(&c, &mut rng);
        for img in synthesize_images(&c).unwrap() {
            for (j, kp) in img.keypoints.iter().enumerate() {
                let cell = img.grid.cell_containing(kp.x / 128.0, kp.y / 128.0);
                let v = img.grid.cell_at(cell);
                let score = |k: usize| (0..c.dim).map(|i| f64::from(v[i]) * codes[(i, k)]).sum::<f64>();
                let own = score(j);
                assert!((0..c.num_keypoints).filter(|&k| k != j).all(|k| score(k) < own));
            }
        }
    }
}
