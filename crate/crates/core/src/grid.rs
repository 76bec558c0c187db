//! Dense feature grids and the operations that act on them directly:
//! normalization, bilinear resampling, point sampling, and temperature-scaled
//! softmax correlation maps.
//!
//! Coordinates come in two flavours. Cell `(row, col)` is addressed by
//! integer indices; continuous positions use normalized `(x, y)` in `[0, 1]²`
//! where the center of cell `(row, col)` sits at
//! `((col + 0.5) / width, (row + 0.5) / height)`. Pixel positions on the
//! source image map to normalized coordinates by dividing by the image size.

use rayon::prelude::*;

use crate::dense::{self, Matrix};
use crate::error::{check_tau, Error, Result};

/// Norms below this are treated as zero vectors by every normalization.
pub const NORM_EPS: f64 = 1e-12;

/// An `H × W × D` embedding map for one image, stored row-major as
/// `(row, column, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    image_height: u32,
    image_width: u32,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        image_height: u32,
        image_width: u32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {image_width}x{image_height}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| Error::invalid("grid size overflows"))?;
        if data.len() != expected {
            return Err(Error::DimMismatch {
                what: "grid data length",
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            image_height,
            image_width,
            data,
        })
    }

    /// Builds a grid from a per-element closure `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        image_height: u32,
        image_width: u32,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * dim);
        for r in 0..height {
            for c in 0..width {
                for k in 0..dim {
                    data.push(f(r, c, k));
                }
            }
        }
        Self::new(height, width, dim, image_height, image_width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    /// Number of cells, `H × W`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_at(row * self.width + col)
    }

    /// Cell by row-major index.
    pub fn cell_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Normalized `(x, y)` of a cell center.
    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let row = index / self.width;
        let col = index % self.width;
        (
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    /// Cell containing a normalized position (clamped into the grid).
    pub fn cell_containing(&self, x: f64, y: f64) -> usize {
        let col = ((x * self.width as f64).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((y * self.height as f64).floor().max(0.0) as usize).min(self.height - 1);
        row * self.width + col
    }

    pub fn pixel_to_normalized(&self, px: f64, py: f64) -> (f64, f64) {
        (px / self.image_width as f64, py / self.image_height as f64)
    }

    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.image_width as f64, y * self.image_height as f64)
    }

    /// Same geometry, new channel data.
    pub(crate) fn with_data(&self, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            dim,
            self.image_height,
            self.image_width,
            data,
        )
    }

    pub(crate) fn from_matrix(like: &FeatureGrid, m: &Matrix) -> Result<Self> {
        debug_assert_eq!(m.rows, like.cells());
        like.with_data(m.cols, m.data.iter().map(|&v| v as f32).collect())
    }
}

/// Scales every cell vector to unit length. Cells with norm below
/// [`NORM_EPS`] become zero vectors.
pub fn l2_normalize(grid: &FeatureGrid) -> Result<FeatureGrid> {
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in grid"));
    }
    let mut data = Vec::with_capacity(grid.data.len());
    for cell in grid.data.chunks_exact(grid.dim) {
        let n = cell
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if n < NORM_EPS {
            data.extend(std::iter::repeat_n(0.0f32, grid.dim));
        } else {
            data.extend(cell.iter().map(|&v| (f64::from(v) / n) as f32));
        }
    }
    grid.with_data(grid.dim, data)
}

/// Bilinear weights for a normalized coordinate along one axis of length
/// `len`: returns `(i0, i1, w)` with the value `v[i0] + w * (v[i1] - v[i0])`.
#[inline]
fn axis_weights(t: f64, len: usize) -> (usize, usize, f64) {
    let f = (t * len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, f - i0 as f64)
}

fn sample_into(grid: &FeatureGrid, x: f64, y: f64, out: &mut [f64]) {
    let (c0, c1, wx) = axis_weights(x, grid.width);
    let (r0, r1, wy) = axis_weights(y, grid.height);
    let a = grid.cell(r0, c0);
    let b = grid.cell(r0, c1);
    let c = grid.cell(r1, c0);
    let d = grid.cell(r1, c1);
    for k in 0..grid.dim {
        let (a, b, c, d) = (
            f64::from(a[k]),
            f64::from(b[k]),
            f64::from(c[k]),
            f64::from(d[k]),
        );
        let top = a + wx * (b - a);
        let bottom = c + wx * (d - c);
        out[k] = top + wy * (bottom - top);
    }
}

/// Channel-wise bilinear resampling with half-pixel centers and
/// clamp-to-edge. The image size is carried over unchanged.
pub fn bilinear_resize(grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    let mut data = vec![0.0f32; out_h * out_w * grid.dim];
    let mut buf = vec![0.0f64; grid.dim];
    for r in 0..out_h {
        let y = (r as f64 + 0.5) / out_h as f64;
        for c in 0..out_w {
            let x = (c as f64 + 0.5) / out_w as f64;
            sample_into(grid, x, y, &mut buf);
            let base = (r * out_w + c) * grid.dim;
            for (o, &v) in data[base..base + grid.dim].iter_mut().zip(&buf) {
                *o = v as f32;
            }
        }
    }
    FeatureGrid::new(
        out_h,
        out_w,
        grid.dim,
        grid.image_height,
        grid.image_width,
        data,
    )
}

/// Bilinear lookup of the embedding at normalized `(x, y)`; coordinates are
/// clamped into `[0, 1]`. With `renormalize` the result is rescaled to unit
/// length (zero vectors stay zero).
pub fn sample_embedding(grid: &FeatureGrid, x: f64, y: f64, renormalize: bool) -> Vec<f64> {
    let mut out = vec![0.0; grid.dim];
    sample_into(grid, x.clamp(0.0, 1.0), y.clamp(0.0, 1.0), &mut out);
    if renormalize {
        let n = dense::norm(&out);
        if n < NORM_EPS {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Row-stochastic matrix `p(v | u)` between the cells of two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    src_cells: usize,
    tgt_cells: usize,
    temperature: f64,
    rows: Vec<f64>,
}

impl CorrelationMap {
    pub fn src_cells(&self) -> usize {
        self.src_cells
    }

    pub fn tgt_cells(&self) -> usize {
        self.tgt_cells
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.rows[u * self.tgt_cells..(u + 1) * self.tgt_cells]
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.rows[u * self.tgt_cells + v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }
}

/// Softmax over target cells of the dot products between (re-normalized)
/// source and target embeddings, divided by `tau`.
pub fn correlation_map(src: &FeatureGrid, tgt: &FeatureGrid, tau: f64) -> Result<CorrelationMap> {
    check_tau(tau)?;
    if src.dim != tgt.dim {
        return Err(Error::DimMismatch {
            what: "correlation channels",
            expected: src.dim,
            actual: tgt.dim,
        });
    }
    let a = Matrix::from_grid(src).normalized();
    let b = Matrix::from_grid(tgt).normalized();
    let n_t = b.rows;
    let mut rows = vec![0.0; a.rows * n_t];
    rows.par_chunks_mut(n_t).enumerate().for_each(|(u, out)| {
        let mut log_p = vec![0.0; n_t];
        dense::logits_into(a.row(u), &b, tau, out);
        dense::softmax_in_place(out, &mut log_p);
    });
    Ok(CorrelationMap {
        src_cells: a.rows,
        tgt_cells: n_t,
        temperature: tau,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureGrid {
        FeatureGrid::new(h, w, d, 10, 10, data).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(FeatureGrid::new(0, 1, 1, 1, 1, vec![]).is_err());
        assert!(FeatureGrid::new(1, 1, 2, 1, 1, vec![1.0]).is_err());
        assert!(FeatureGrid::new(1, 1, 1, 1, 1, vec![f32::NAN]).is_err());
        assert!(FeatureGrid::new(1, 1, 1, 0, 1, vec![1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = grid(1, 3, 2, vec![3.0, 4.0, 0.0, 0.0, 6.0, 8.0]);
        let n = l2_normalize(&g).unwrap();
        let c0 = n.cell_at(0);
        assert!(((c0[0] as f64).hypot(c0[1] as f64) - 1.0).abs() < 1e-6);
        assert_eq!(n.cell_at(1), &[0.0, 0.0]);
        assert!((n.cell_at(2)[0] - 0.6).abs() < 1e-7);
        assert!((n.cell_at(2)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn resize_examples() {
        let g = grid(1, 2, 1, vec![0.0, 1.0]);
        let r = bilinear_resize(&g, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(r.image_width(), 10);

        let c = grid(2, 3, 2, vec![0.5; 12]);
        let r = bilinear_resize(&c, 7, 5).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));

        let g = FeatureGrid::from_fn(3, 4, 2, 8, 8, |r, c, k| (r * 7 + c * 3 + k) as f32 * 0.37).unwrap();
        assert_eq!(bilinear_resize(&g, 3, 4).unwrap(), g);
        assert!(bilinear_resize(&g, 0, 4).is_err());
    }

    #[test]
    fn sample_examples() {
        let g = grid(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sample_embedding(&g, 0.25, 0.5, false), vec![1.0, 0.0]);
        let mid = sample_embedding(&g, 0.5, 0.5, false);
        assert_eq!(mid, vec![0.5, 0.5]);
        let r = sample_embedding(&g, 0.5, 0.5, true);
        assert!((dense::norm(&r) - 1.0).abs() < 1e-6);
        // clamped outside the unit square
        assert_eq!(sample_embedding(&g, -3.0, 7.0, false), vec![1.0, 0.0]);
    }

    #[test]
    fn correlation_examples() {
        let c = grid(1, 3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let m = correlation_map(&c, &c, 0.3).unwrap();
        assert!(m.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));

        let o = grid(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = correlation_map(&o, &o, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((m.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((m.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((m.get(0, 1) - 0.2689).abs() < 1e-4);
        let m = correlation_map(&o, &o, 0.01).unwrap();
        assert!(m.get(1, 1) > 1.0 - 1e-8);

        assert!(matches!(correlation_map(&o, &o, 0.0), Err(Error::InvalidTemperature(_))));
        let other = grid(1, 1, 3, vec![1.0, 0.0, 0.0]);
        assert!(matches!(correlation_map(&o, &other, 1.0), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn cell_geometry() {
        let g = grid(2, 4, 1, vec![0.0; 8]);
        assert_eq!(g.cell_center(5), (0.375, 0.75));
        assert_eq!(g.cell_containing(0.375, 0.75), 5);
        assert_eq!(g.cell_containing(1.0, 1.0), 7);
        assert_eq!(g.cell_containing(-0.1, 0.0), 0);
    }
}
