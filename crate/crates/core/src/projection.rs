//! Linear projection heads and the unlearned baselines that produce them.
//!
//! A head maps a `D`-dimensional encoder feature to `D'` dimensions by
//! `z = Wᵀ (ψ - μ)` followed by ℓ2 normalization. `μ` is only present for
//! PCA heads, where it is the fit-time sample mean.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Output dimension used when none is given.
pub const DEFAULT_PROJ_DIM: usize = 256;

pub const PRJ1_MAGIC: [u8; 4] = *b"PRJ1";

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    in_dim: usize,
    out_dim: usize,
    /// `in_dim × out_dim`, row-major.
    weights: Vec<f64>,
    mean: Option<Vec<f64>>,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, mean: Option<Vec<f64>>) -> Result<Self> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(Error::invalid(format!(
                "projection needs 1 <= out_dim <= in_dim, got {in_dim} -> {out_dim}"
            )));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimMismatch {
                what: "projection weights",
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite projection weight"));
        }
        if let Some(m) = &mean {
            if m.len() != in_dim {
                return Err(Error::DimMismatch {
                    what: "projection mean",
                    expected: in_dim,
                    actual: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite projection mean"));
            }
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            mean,
        })
    }

    /// `D × D` identity: applying it only normalizes.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self::new(dim, dim, w, None)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.out_dim + j]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Replaces the weights, keeping the shape and mean.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.in_dim, self.out_dim, weights, self.mean.clone())
    }

    /// Pre-normalization output `Wᵀ (v - μ)`.
    pub fn project_vector(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.project_into(v, &mut out);
        out
    }

    fn project_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &x) in v.iter().enumerate() {
            let x = match &self.mean {
                Some(m) => x - m[i],
                None => x,
            };
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }

    /// Centered encoder features `ψ - μ` for every row.
    pub(crate) fn centered(&self, psi: &Matrix) -> Matrix {
        let mut out = psi.clone();
        if let Some(m) = &self.mean {
            for r in 0..out.rows {
                for (v, mu) in out.row_mut(r).iter_mut().zip(m) {
                    *v -= mu;
                }
            }
        }
        out
    }

    /// Un-normalized projection of already centered rows.
    pub(crate) fn project_centered(&self, centered: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(centered.rows, self.out_dim);
        for r in 0..centered.rows {
            let src = centered.row(r);
            let dst = out.row_mut(r);
            for (i, &x) in src.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
                for (o, w) in dst.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
        }
        out
    }
}

/// Per-cell `Wᵀ (ψ - μ)`, then ℓ2 normalization.
pub fn apply_projection(head: &ProjectionHead, grid: &FeatureGrid) -> Result<FeatureGrid> {
    if grid.dim() != head.in_dim {
        return Err(Error::DimMismatch {
            what: "projection input channels",
            expected: head.in_dim,
            actual: grid.dim(),
        });
    }
    let psi = Matrix::from_grid(grid);
    let z = head.project_centered(&head.centered(&psi)).normalized();
    FeatureGrid::from_matrix(grid, &z)
}

/// Glorot-style uniform init in `[-a, a]`, `a = sqrt(6 / (D + D'))`.
pub fn init_random_projection(seed: u64, in_dim: usize, out_dim: usize) -> Result<ProjectionHead> {
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::invalid(format!(
            "projection needs 1 <= out_dim <= in_dim, got {in_dim} -> {out_dim}"
        )));
    }
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    ProjectionHead::new(in_dim, out_dim, w, None)
}

/// A PCA head together with the full (descending) covariance spectrum.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub head: ProjectionHead,
    pub eigenvalues: Vec<f64>,
}

/// Makes the largest-magnitude entry of a vector positive (first one wins
/// on ties).
pub(crate) fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Sample covariance of the rows of `samples` (divided by `N - 1`) and the
/// column means.
pub fn covariance(samples: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = samples.shape();
    let mean: Vec<f64> = (0..d).map(|j| samples.column(j).sum() / n as f64).collect();
    let mut centered = samples.clone();
    for j in 0..d {
        for i in 0..n {
            centered[(i, j)] -= mean[j];
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    (cov, mean)
}

/// Mean-centered PCA: the head's columns are the top `out_dim` covariance
/// eigenvectors, orthonormal, sign-normalized.
pub fn fit_pca(samples: &DMatrix<f64>, out_dim: usize) -> Result<PcaFit> {
    let (n, d) = samples.shape();
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!("PCA needs 1 <= out_dim <= {d}, got {out_dim}")));
    }
    if n < out_dim {
        return Err(Error::invalid(format!(
            "PCA needs at least out_dim = {out_dim} samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite PCA sample"));
    }
    let (cov, mean) = covariance(samples);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut weights = vec![0.0; d * out_dim];
    for (j, &k) in order.iter().take(out_dim).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        canonical_sign(&mut v);
        for i in 0..d {
            weights[i * out_dim + j] = v[i];
        }
    }
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    Ok(PcaFit {
        head: ProjectionHead::new(d, out_dim, weights, Some(mean))?,
        eigenvalues,
    })
}

/// Result of a multiplicative-update NMF fit of `samplesᵀ ≈ B C`.
#[derive(Debug, Clone)]
pub struct NmfFit {
    pub head: ProjectionHead,
    /// `D × D'` non-negative basis.
    pub basis: DMatrix<f64>,
    /// `D' × N` non-negative coefficients.
    pub coefficients: DMatrix<f64>,
    /// Squared Frobenius error after init and after every half-update
    /// (coefficients, then basis), so `2 * iters + 1` entries.
    pub objective: Vec<f64>,
    /// Number of negative sample entries that were clamped to zero.
    pub clamped: usize,
}

fn frobenius_error(x: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (x - b * c).norm_squared()
}

/// Lee–Seung multiplicative updates from a seeded uniform init. The head's
/// weights are the Moore–Penrose pseudo-inverse of the basis, transposed, so
/// projecting a sample gives its least-squares coefficients.
pub fn fit_nmf(samples: &DMatrix<f64>, out_dim: usize, iters: usize, seed: u64) -> Result<NmfFit> {
    let (n, d) = samples.shape();
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!("NMF needs 1 <= out_dim <= {d}, got {out_dim}")));
    }
    if iters == 0 {
        return Err(Error::invalid("NMF needs at least one iteration"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite NMF sample"));
    }
    let mut clamped = 0;
    let x = DMatrix::from_fn(d, n, |i, j| {
        let v = samples[(j, i)];
        if v < 0.0 {
            clamped += 1;
            0.0
        } else {
            v
        }
    });
    if clamped > 0 {
        log::warn!("NMF: clamped {clamped} negative sample entries to zero");
    }
    let mean = x.mean();
    if mean <= 0.0 {
        return Err(Error::invalid("NMF samples are all zero"));
    }

    let scale = (mean / out_dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DMatrix::from_fn(d, out_dim, |_, _| rng.random::<f64>() * scale);
    let mut c = DMatrix::from_fn(out_dim, n, |_, _| rng.random::<f64>() * scale);

    let mut objective = Vec::with_capacity(2 * iters + 1);
    objective.push(frobenius_error(&x, &b, &c));
    for _ in 0..iters {
        let num = b.transpose() * &x;
        let den = b.transpose() * &b * &c;
        c.zip_zip_apply(&num, &den, |h, nu, de| *h *= nu / de.max(f64::MIN_POSITIVE));
        objective.push(frobenius_error(&x, &b, &c));

        let num = &x * c.transpose();
        let den = &b * (&c * c.transpose());
        b.zip_zip_apply(&num, &den, |w, nu, de| *w *= nu / de.max(f64::MIN_POSITIVE));
        objective.push(frobenius_error(&x, &b, &c));
    }

    let pinv = b
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::invalid(format!("NMF pseudo-inverse failed: {e}")))?;
    // pinv is D' × D; the head stores D × D'.
    let weights = row_major(&pinv.transpose());
    Ok(NmfFit {
        head: ProjectionHead::new(d, out_dim, weights, None)?,
        basis: b,
        coefficients: c,
        objective,
        clamped,
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()
}

/// Stacks the cells of `grids` into an `N × D` sample matrix, keeping at most
/// `max_samples` rows chosen by a seeded draw without replacement.
pub fn collect_samples(grids: &[FeatureGrid], max_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let Some(first) = grids.first() else {
        return Err(Error::invalid("no grids to sample from"));
    };
    let d = first.dim();
    let mut index = Vec::new();
    for (g, grid) in grids.iter().enumerate() {
        if grid.dim() != d {
            return Err(Error::DimMismatch {
                what: "sample channels",
                expected: d,
                actual: grid.dim(),
            });
        }
        index.extend((0..grid.cells()).map(|c| (g, c)));
    }
    if index.len() > max_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, index.len(), max_samples).into_vec();
        picked.sort_unstable();
        index = picked.into_iter().map(|i| index[i]).collect();
    }
    Ok(DMatrix::from_fn(index.len(), d, |i, j| {
        let (g, c) = index[i];
        f64::from(grids[g].cell_at(c)[j])
    }))
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("ended while reading {what}"),
            }
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes a head in the `PRJ1` format. Values are stored as `f32`.
pub fn write_head(path: impl AsRef<Path>, head: &ProjectionHead) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(13 + 4 * (head.in_dim * (head.out_dim + 1)));
    buf.extend_from_slice(&PRJ1_MAGIC);
    buf.extend_from_slice(&(head.in_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(head.out_dim as u32).to_le_bytes());
    buf.push(u8::from(head.mean.is_some()));
    if let Some(m) = &head.mean {
        for &v in m {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &v in &head.weights {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_head(path: impl AsRef<Path>) -> Result<ProjectionHead> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, "magic")?;
    if magic != PRJ1_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: PRJ1_MAGIC,
            found: magic,
        });
    }
    let mut header = [0u8; 9];
    read_exact_or(&mut r, &mut header, path, "header")?;
    let in_dim = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let out_dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let has_mean = match header[8] {
        0 => false,
        1 => true,
        other => return Err(Error::invalid(format!("{}: bad mean flag {other}", path.display()))),
    };
    let mut read_f32s = |count: usize, what: &str| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 4];
        read_exact_or(&mut r, &mut bytes, path, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    };
    let mean = if has_mean {
        Some(read_f32s(in_dim, "mean")?)
    } else {
        None
    };
    let weights = read_f32s(in_dim * out_dim, "weights")?;
    ProjectionHead::new(in_dim, out_dim, weights, mean)
}
