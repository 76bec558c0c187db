//! Projection-training objectives and their analytic gradients.
//!
//! All objectives are built from softmax correlation rows
//! `p(v | u) = softmax_v(<a_u, b_v> / tau)` between ℓ2-normalized cell
//! embeddings. Two families:
//!
//! * expected-distance losses (EQ, DVE, CL, supervised): each source row
//!   pays `Σ_v ‖ref_u - v‖ p(v | u)` with distances between normalized cell
//!   centers;
//! * distribution-matching losses (LEAD, ASYM): the correlation rows of the
//!   projected features are pulled towards those of the frozen encoder
//!   features, with a cross-entropy or squared-error penalty and separate
//!   temperatures on the two sides.
//!
//! Gradients are taken with respect to the projection weights by chaining
//! through the penalty, the softmax, the ℓ2 normalization and the linear map.
//! Rows are processed in a fixed number of chunks so the reductions are
//! identical for any thread count.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{transform_coords, SpatialTransform};
use crate::dense::{self, Matrix};
use crate::error::{check_tau, Error, Result};
use crate::grid::FeatureGrid;
use crate::projection::ProjectionHead;

/// Floor applied inside the cross-entropy logarithm.
pub const CE_LOG_FLOOR: f64 = 1e-30;

const ROW_CHUNKS: usize = 16;

/// Per-row gradients tagged with their row index.
type RowGrads = Vec<(usize, Vec<f64>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Eq,
    Dve,
    Cl,
    Lead,
    Asym,
    Supervised,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Eq,
        LossKind::Dve,
        LossKind::Cl,
        LossKind::Lead,
        LossKind::Asym,
        LossKind::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Eq => "eq",
            LossKind::Dve => "dve",
            LossKind::Cl => "cl",
            LossKind::Lead => "lead",
            LossKind::Asym => "asym",
            LossKind::Supervised => "supervised",
        }
    }

    /// Default `tau` (or encoder-side `tau1`).
    pub fn default_tau1(self) -> f64 {
        match self {
            LossKind::Cl => 0.14,
            LossKind::Asym => 0.2,
            _ => 0.05,
        }
    }

    /// Default projected-side temperature; only ASYM uses a different one.
    pub fn default_tau2(self) -> f64 {
        match self {
            LossKind::Asym => 0.4,
            other => other.default_tau1(),
        }
    }

    pub fn default_penalty(self) -> Penalty {
        match self {
            LossKind::Asym => Penalty::Mse,
            _ => Penalty::Ce,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown loss kind {s:?}")))
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Penalty between encoder-side and projected-side correlation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Mse,
    Ce,
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Penalty::Mse),
            "ce" => Ok(Penalty::Ce),
            _ => Err(Error::invalid(format!("unknown penalty {s:?}"))),
        }
    }
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Penalty::Mse => "mse",
            Penalty::Ce => "ce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// `tau` for the single-temperature losses, encoder-side `tau1` for
    /// LEAD/ASYM.
    pub tau1: f64,
    /// Projected-side temperature. LEAD ignores it and uses `tau1` on both
    /// sides.
    pub tau2: f64,
    /// LEAD/ASYM only.
    pub penalty: Penalty,
}

impl LossConfig {
    pub fn defaults(kind: LossKind) -> Self {
        Self {
            kind,
            tau1: kind.default_tau1(),
            tau2: kind.default_tau2(),
            penalty: kind.default_penalty(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau1)?;
        if self.kind == LossKind::Asym {
            check_tau(self.tau2)?;
        }
        Ok(())
    }

    fn projected_tau(&self) -> f64 {
        match self.kind {
            LossKind::Asym => self.tau2,
            _ => self.tau1,
        }
    }
}

/// Encoder-level inputs for one training pair. Roles by kind:
///
/// | kind       | `enc_a` | `enc_b`   | `aux`    | other       |
/// |------------|---------|-----------|----------|-------------|
/// | EQ         | Ψ(x)    | Ψ(x')     |          | `transform` |
/// | DVE        | Ψ(x)    | Ψ(x')     | Ψ(x^α)   | `transform` |
/// | CL         | Ψ(x)    |           |          |             |
/// | LEAD/ASYM  | Ψ(x)    | Ψ(x^α)    |          |             |
/// | supervised | Ψ(x_s)  | Ψ(x_t)    |          | `gt_pairs`  |
#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs<'a> {
    pub enc_a: Option<&'a FeatureGrid>,
    pub enc_b: Option<&'a FeatureGrid>,
    pub aux: Option<&'a FeatureGrid>,
    pub transform: Option<SpatialTransform>,
    /// `(source cell, target cell)` row-major indices.
    pub gt_pairs: &'a [(usize, usize)],
}

// ---------------------------------------------------------------------------
// shared row machinery

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    let size = n.div_ceil(ROW_CHUNKS).max(1);
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

fn centers(grid_h: usize, grid_w: usize) -> Vec<(f64, f64)> {
    (0..grid_h * grid_w)
        .map(|i| {
            (
                ((i % grid_w) as f64 + 0.5) / grid_w as f64,
                ((i / grid_w) as f64 + 0.5) / grid_h as f64,
            )
        })
        .collect()
}

/// Gradients with respect to the normalized embeddings of each role.
struct PairGrads {
    a: Matrix,
    b: Matrix,
}

struct ChunkOut {
    loss: f64,
    /// `(row of a, dL/da_row)`
    da: Vec<(usize, Vec<f64>)>,
    db: Option<Matrix>,
}

/// Backprop of `ds = dL/d(logits)` for one row into `da_u` and `db`.
fn logits_backward(ds: &[f64], a_u: &[f64], b: &Matrix, tau: f64, da_u: &mut [f64], db: &mut Matrix) {
    for (v, &g) in ds.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        dense::axpy(g / tau, b.row(v), da_u);
        dense::axpy(g / tau, a_u, db.row_mut(v));
    }
}

fn assemble(chunks: Vec<ChunkOut>, a_shape: (usize, usize), b_shape: (usize, usize), grad: bool) -> (f64, Option<PairGrads>) {
    let mut loss = 0.0;
    let mut da = grad.then(|| Matrix::zeros(a_shape.0, a_shape.1));
    let mut db = grad.then(|| Matrix::zeros(b_shape.0, b_shape.1));
    for chunk in chunks {
        loss += chunk.loss;
        if let (Some(da), Some(db)) = (da.as_mut(), db.as_mut()) {
            for (u, g) in chunk.da {
                dense::axpy(1.0, &g, da.row_mut(u));
            }
            if let Some(part) = chunk.db {
                db.add_assign(&part);
            }
        }
    }
    (loss, da.zip(db).map(|(a, b)| PairGrads { a, b }))
}

/// `scale · Σ_k Σ_v ‖ref_k - center_v‖ p(v | a_{row_k})` over the listed
/// source rows.
fn expected_distance(
    a: &Matrix,
    b: &Matrix,
    b_centers: &[(f64, f64)],
    sources: &[(usize, (f64, f64))],
    tau: f64,
    scale: f64,
    grad: bool,
) -> (f64, Option<PairGrads>) {
    let n_b = b.rows;
    let chunks: Vec<ChunkOut> = chunk_ranges(sources.len())
        .into_par_iter()
        .map(|range| {
            let mut p = vec![0.0; n_b];
            let mut log_p = vec![0.0; n_b];
            let mut dist = vec![0.0; n_b];
            let mut ds = vec![0.0; n_b];
            let mut out = ChunkOut {
                loss: 0.0,
                da: Vec::new(),
                db: grad.then(|| Matrix::zeros(n_b, b.cols)),
            };
            for &(u, (rx, ry)) in &sources[range] {
                let a_u = a.row(u);
                dense::logits_into(a_u, b, tau, &mut p);
                dense::softmax_in_place(&mut p, &mut log_p);
                let mut row_loss = 0.0;
                for (v, d) in dist.iter_mut().enumerate() {
                    let (cx, cy) = b_centers[v];
                    *d = (rx - cx).hypot(ry - cy);
                    row_loss += *d * p[v];
                }
                out.loss += scale * row_loss;
                if let Some(db) = out.db.as_mut() {
                    // dL/dp_v = scale * dist_v, through the softmax
                    for v in 0..n_b {
                        ds[v] = scale * p[v] * (dist[v] - row_loss);
                    }
                    let mut da_u = vec![0.0; a.cols];
                    logits_backward(&ds, a_u, b, tau, &mut da_u, db);
                    out.da.push((u, da_u));
                }
            }
            out
        })
        .collect();
    assemble(chunks, (a.rows, a.cols), (b.rows, b.cols), grad)
}

/// `scale · Σ_u Σ_v penalty(q(v | u), p(v | u))` with `q` from the encoder
/// pair at `tau_enc` and `p` from the projected pair at `tau_proj`.
#[allow(clippy::too_many_arguments)]
fn distribution_match(
    psi_a: &Matrix,
    psi_b: &Matrix,
    tau_enc: f64,
    a: &Matrix,
    b: &Matrix,
    tau_proj: f64,
    penalty: Penalty,
    scale: f64,
    grad: bool,
) -> (f64, Option<PairGrads>) {
    let n_b = b.rows;
    let ln_floor = CE_LOG_FLOOR.ln();
    let chunks: Vec<ChunkOut> = chunk_ranges(a.rows)
        .into_par_iter()
        .map(|range| {
            let mut q = vec![0.0; n_b];
            let mut log_q = vec![0.0; n_b];
            let mut p = vec![0.0; n_b];
            let mut log_p = vec![0.0; n_b];
            let mut ds = vec![0.0; n_b];
            let mut out = ChunkOut {
                loss: 0.0,
                da: Vec::new(),
                db: grad.then(|| Matrix::zeros(n_b, b.cols)),
            };
            for u in range {
                dense::logits_into(psi_a.row(u), psi_b, tau_enc, &mut q);
                dense::softmax_in_place(&mut q, &mut log_q);
                let a_u = a.row(u);
                dense::logits_into(a_u, b, tau_proj, &mut p);
                dense::softmax_in_place(&mut p, &mut log_p);

                let mut row_loss = 0.0;
                match penalty {
                    Penalty::Mse => {
                        let mut pg = 0.0;
                        for v in 0..n_b {
                            let gap = q[v] - p[v];
                            row_loss += gap * gap;
                            // dL/dp_v = -2 gap
                            ds[v] = -2.0 * gap;
                            pg += p[v] * ds[v];
                        }
                        for v in 0..n_b {
                            ds[v] = scale * p[v] * (ds[v] - pg);
                        }
                    }
                    Penalty::Ce => {
                        let mut q_live = 0.0;
                        for v in 0..n_b {
                            if log_p[v] > ln_floor {
                                row_loss -= q[v] * log_p[v];
                                q_live += q[v];
                            } else {
                                row_loss -= q[v] * ln_floor;
                            }
                        }
                        for v in 0..n_b {
                            let live = if log_p[v] > ln_floor { q[v] } else { 0.0 };
                            ds[v] = scale * (p[v] * q_live - live);
                        }
                    }
                }
                out.loss += scale * row_loss;
                if let Some(db) = out.db.as_mut() {
                    let mut da_u = vec![0.0; a.cols];
                    logits_backward(&ds, a_u, b, tau_proj, &mut da_u, db);
                    out.da.push((u, da_u));
                }
            }
            out
        })
        .collect();
    assemble(chunks, (a.rows, a.cols), (b.rows, b.cols), grad)
}

/// DVE: replace each source embedding by its soft match in the auxiliary
/// image, `â_u = Σ_w c_w p(w | u; a, c)`, then score `â` against `b` with
/// the EQ expected distance.
#[allow(clippy::too_many_arguments)]
fn dve_core(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    b_centers: &[(f64, f64)],
    refs: &[(f64, f64)],
    tau: f64,
    scale: f64,
    grad: bool,
) -> (f64, Option<(Matrix, Matrix, Matrix)>) {
    let n_c = c.rows;
    let d = a.cols;
    // forward: soft-matched source embeddings
    let mut a_hat = Matrix::zeros(a.rows, d);
    a_hat
        .data
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(u, out)| {
            let mut t = vec![0.0; n_c];
            let mut log_t = vec![0.0; n_c];
            dense::logits_into(a.row(u), c, tau, &mut t);
            dense::softmax_in_place(&mut t, &mut log_t);
            for (w, &pw) in t.iter().enumerate() {
                dense::axpy(pw, c.row(w), out);
            }
        });
    let sources: Vec<(usize, (f64, f64))> = refs.iter().copied().enumerate().collect();
    let (loss, grads) = expected_distance(&a_hat, b, b_centers, &sources, tau, scale, grad);
    let Some(PairGrads { a: d_hat, b: db }) = grads else {
        return (loss, None);
    };

    // backward through the soft match
    let chunks: Vec<(RowGrads, Matrix)> = chunk_ranges(a.rows)
        .into_par_iter()
        .map(|range| {
            let mut t = vec![0.0; n_c];
            let mut log_t = vec![0.0; n_c];
            let mut dt = vec![0.0; n_c];
            let mut dc = Matrix::zeros(n_c, d);
            let mut da = Vec::new();
            for u in range {
                let a_u = a.row(u);
                let g_u = d_hat.row(u);
                dense::logits_into(a_u, c, tau, &mut t);
                dense::softmax_in_place(&mut t, &mut log_t);
                let mut tg = 0.0;
                for w in 0..n_c {
                    dt[w] = dense::dot(g_u, c.row(w));
                    tg += t[w] * dt[w];
                }
                for w in 0..n_c {
                    // direct path: â_u depends linearly on c_w
                    dense::axpy(t[w], g_u, dc.row_mut(w));
                    dt[w] = t[w] * (dt[w] - tg);
                }
                let mut da_u = vec![0.0; d];
                logits_backward(&dt, a_u, c, tau, &mut da_u, &mut dc);
                da.push((u, da_u));
            }
            (da, dc)
        })
        .collect();
    let mut da = Matrix::zeros(a.rows, d);
    let mut dc = Matrix::zeros(n_c, d);
    for (rows, part) in chunks {
        for (u, g) in rows {
            dense::axpy(1.0, &g, da.row_mut(u));
        }
        dc.add_assign(&part);
    }
    (loss, Some((da, db, dc)))
}

// ---------------------------------------------------------------------------
// value-only entry points on projected grids

fn same_dim(a: &FeatureGrid, b: &FeatureGrid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            what: "embedding channels",
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

fn normalized(grid: &FeatureGrid) -> Matrix {
    Matrix::from_grid(grid).normalized()
}

fn warped_refs(grid: &FeatureGrid, g: &SpatialTransform) -> Vec<(f64, f64)> {
    centers(grid.height(), grid.width())
        .into_iter()
        .map(|c| transform_coords(g, c))
        .collect()
}

fn pair_scale(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    1.0 / (a.cells() as f64 * b.cells() as f64)
}

/// Equivariance loss: `1/|Ω|² Σ_u Σ_v ‖g u - v‖ p(v | u; Φ, x, x', τ)`.
pub fn loss_eq(phi_x: &FeatureGrid, phi_xp: &FeatureGrid, g: &SpatialTransform, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    same_dim(phi_x, phi_xp)?;
    g.validate()?;
    let sources: Vec<_> = warped_refs(phi_x, g).into_iter().enumerate().collect();
    let b_centers = centers(phi_xp.height(), phi_xp.width());
    let (loss, _) = expected_distance(
        &normalized(phi_x),
        &normalized(phi_xp),
        &b_centers,
        &sources,
        tau,
        pair_scale(phi_x, phi_xp),
        false,
    );
    Ok(loss)
}

/// EQ with each source embedding replaced by its soft match in the
/// auxiliary image.
pub fn loss_dve(
    phi_x: &FeatureGrid,
    phi_xp: &FeatureGrid,
    phi_aux: &FeatureGrid,
    g: &SpatialTransform,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    same_dim(phi_x, phi_xp)?;
    same_dim(phi_x, phi_aux)?;
    g.validate()?;
    let (loss, _) = dve_core(
        &normalized(phi_x),
        &normalized(phi_xp),
        &normalized(phi_aux),
        &centers(phi_xp.height(), phi_xp.width()),
        &warped_refs(phi_x, g),
        tau,
        pair_scale(phi_x, phi_xp),
        false,
    );
    Ok(loss)
}

/// Within-image variant: EQ with `x' = x` and `g` the identity.
pub fn loss_cl(phi_x: &FeatureGrid, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let c = centers(phi_x.height(), phi_x.width());
    let sources: Vec<_> = c.iter().copied().enumerate().collect();
    let a = normalized(phi_x);
    let (loss, _) = expected_distance(&a, &a, &c, &sources, tau, pair_scale(phi_x, phi_x), false);
    Ok(loss)
}

fn check_match_inputs(psi_x: &FeatureGrid, psi_aux: &FeatureGrid, phi_x: &FeatureGrid, phi_aux: &FeatureGrid) -> Result<()> {
    same_dim(psi_x, psi_aux)?;
    same_dim(phi_x, phi_aux)?;
    if psi_x.cells() != phi_x.cells() {
        return Err(Error::DimMismatch {
            what: "source cells (encoder vs projected)",
            expected: psi_x.cells(),
            actual: phi_x.cells(),
        });
    }
    if psi_aux.cells() != phi_aux.cells() {
        return Err(Error::DimMismatch {
            what: "auxiliary cells (encoder vs projected)",
            expected: psi_aux.cells(),
            actual: phi_aux.cells(),
        });
    }
    Ok(())
}

/// Cross-entropy between encoder and projected correlation rows, one
/// temperature for both.
pub fn loss_lead(
    psi_x: &FeatureGrid,
    psi_aux: &FeatureGrid,
    phi_x: &FeatureGrid,
    phi_aux: &FeatureGrid,
    tau: f64,
) -> Result<f64> {
    loss_asym(psi_x, psi_aux, phi_x, phi_aux, tau, tau, Penalty::Ce)
}

/// Asymmetric-temperature correlation matching: `tau1` on the encoder side,
/// `tau2` on the projected side, squared-error or cross-entropy penalty.
pub fn loss_asym(
    psi_x: &FeatureGrid,
    psi_aux: &FeatureGrid,
    phi_x: &FeatureGrid,
    phi_aux: &FeatureGrid,
    tau1: f64,
    tau2: f64,
    penalty: Penalty,
) -> Result<f64> {
    check_tau(tau1)?;
    check_tau(tau2)?;
    check_match_inputs(psi_x, psi_aux, phi_x, phi_aux)?;
    let (loss, _) = distribution_match(
        &normalized(psi_x),
        &normalized(psi_aux),
        tau1,
        &normalized(phi_x),
        &normalized(phi_aux),
        tau2,
        penalty,
        pair_scale(phi_x, phi_aux),
        false,
    );
    Ok(loss)
}

fn check_gt(gt_pairs: &[(usize, usize)], n_s: usize, n_t: usize) -> Result<()> {
    if gt_pairs.is_empty() {
        return Err(Error::invalid("supervised loss needs at least one ground-truth pair"));
    }
    if let Some(&(s, t)) = gt_pairs.iter().find(|&&(s, t)| s >= n_s || t >= n_t) {
        return Err(Error::invalid(format!(
            "ground-truth pair ({s}, {t}) out of range for {n_s} x {n_t} cells"
        )));
    }
    Ok(())
}

fn supervised_sources(tgt: &FeatureGrid, gt_pairs: &[(usize, usize)]) -> Vec<(usize, (f64, f64))> {
    gt_pairs
        .iter()
        .map(|&(s, t)| (s, tgt.cell_center(t)))
        .collect()
}

/// `1/|gt| Σ_{(u, u*)} Σ_v ‖u* - v‖ p(v | u; Φ, x_s, x_t, τ)`.
pub fn loss_supervised(phi_s: &FeatureGrid, phi_t: &FeatureGrid, gt_pairs: &[(usize, usize)], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    same_dim(phi_s, phi_t)?;
    check_gt(gt_pairs, phi_s.cells(), phi_t.cells())?;
    let (loss, _) = expected_distance(
        &normalized(phi_s),
        &normalized(phi_t),
        &centers(phi_t.height(), phi_t.width()),
        &supervised_sources(phi_t, gt_pairs),
        tau,
        1.0 / gt_pairs.len() as f64,
        false,
    );
    Ok(loss)
}

// ---------------------------------------------------------------------------
// gradient with respect to the projection head

/// One encoder grid pushed through the head, with what backprop needs.
struct Projected {
    centered: Matrix,
    phi: Matrix,
    norms: Vec<f64>,
}

impl Projected {
    fn new(head: &ProjectionHead, grid: &FeatureGrid) -> Result<Self> {
        if grid.dim() != head.in_dim() {
            return Err(Error::DimMismatch {
                what: "encoder channels",
                expected: head.in_dim(),
                actual: grid.dim(),
            });
        }
        let centered = head.centered(&Matrix::from_grid(grid));
        let mut phi = head.project_centered(&centered);
        let norms = phi.normalize_rows();
        Ok(Self { centered, phi, norms })
    }

    /// Adds `Σ_i centered_i ⊗ dz_i` into `grad_w` (`D × D'`).
    fn backward(&self, d_phi: &Matrix, grad_w: &mut [f64]) {
        let out = self.phi.cols;
        let mut dz = vec![0.0; out];
        for i in 0..self.phi.rows {
            dense::normalize_backward(self.phi.row(i), self.norms[i], d_phi.row(i), &mut dz);
            if dz.iter().all(|&g| g == 0.0) {
                continue;
            }
            for (k, &x) in self.centered.row(i).iter().enumerate() {
                if x != 0.0 {
                    dense::axpy(x, &dz, &mut grad_w[k * out..(k + 1) * out]);
                }
            }
        }
    }
}

fn require<'a>(g: Option<&'a FeatureGrid>, kind: LossKind, missing: &'static str) -> Result<&'a FeatureGrid> {
    g.ok_or(Error::MissingInput {
        kind: kind.name(),
        missing,
    })
}

fn require_transform(inputs: &LossInputs<'_>, kind: LossKind) -> Result<SpatialTransform> {
    let g = inputs.transform.ok_or(Error::MissingInput {
        kind: kind.name(),
        missing: "a spatial transform",
    })?;
    g.validate()?;
    Ok(g)
}

fn evaluate(config: &LossConfig, inputs: &LossInputs<'_>, head: &ProjectionHead, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    config.validate()?;
    let kind = config.kind;
    let tau = config.tau1;
    let enc_a = require(inputs.enc_a, kind, "enc_a")?;
    let pa = Projected::new(head, enc_a)?;
    let mut grad_w = grad.then(|| vec![0.0; head.in_dim() * head.out_dim()]);

    let loss = match kind {
        LossKind::Eq | LossKind::Supervised => {
            let enc_b = require(inputs.enc_b, kind, "enc_b")?;
            let pb = Projected::new(head, enc_b)?;
            let b_centers = centers(enc_b.height(), enc_b.width());
            let (sources, scale) = if kind == LossKind::Eq {
                let g = require_transform(inputs, kind)?;
                let s: Vec<_> = warped_refs(enc_a, &g).into_iter().enumerate().collect();
                (s, pair_scale(enc_a, enc_b))
            } else {
                check_gt(inputs.gt_pairs, enc_a.cells(), enc_b.cells())?;
                (
                    supervised_sources(enc_b, inputs.gt_pairs),
                    1.0 / inputs.gt_pairs.len() as f64,
                )
            };
            let (loss, g) = expected_distance(&pa.phi, &pb.phi, &b_centers, &sources, tau, scale, grad);
            if let (Some(w), Some(g)) = (grad_w.as_mut(), g) {
                pa.backward(&g.a, w);
                pb.backward(&g.b, w);
            }
            loss
        }
        LossKind::Cl => {
            let c = centers(enc_a.height(), enc_a.width());
            let sources: Vec<_> = c.iter().copied().enumerate().collect();
            let (loss, g) = expected_distance(&pa.phi, &pa.phi, &c, &sources, tau, pair_scale(enc_a, enc_a), grad);
            if let (Some(w), Some(mut g)) = (grad_w.as_mut(), g) {
                g.a.add_assign(&g.b);
                pa.backward(&g.a, w);
            }
            loss
        }
        LossKind::Dve => {
            let enc_b = require(inputs.enc_b, kind, "enc_b")?;
            let aux = require(inputs.aux, kind, "aux")?;
            let g = require_transform(inputs, kind)?;
            let pb = Projected::new(head, enc_b)?;
            let pc = Projected::new(head, aux)?;
            let (loss, grads) = dve_core(
                &pa.phi,
                &pb.phi,
                &pc.phi,
                &centers(enc_b.height(), enc_b.width()),
                &warped_refs(enc_a, &g),
                tau,
                pair_scale(enc_a, enc_b),
                grad,
            );
            if let (Some(w), Some((da, db, dc))) = (grad_w.as_mut(), grads) {
                pa.backward(&da, w);
                pb.backward(&db, w);
                pc.backward(&dc, w);
            }
            loss
        }
        LossKind::Lead | LossKind::Asym => {
            let enc_b = require(inputs.enc_b, kind, "enc_b")?;
            if enc_a.dim() != enc_b.dim() {
                return Err(Error::DimMismatch {
                    what: "encoder channels",
                    expected: enc_a.dim(),
                    actual: enc_b.dim(),
                });
            }
            let pb = Projected::new(head, enc_b)?;
            let (loss, g) = distribution_match(
                &normalized(enc_a),
                &normalized(enc_b),
                tau,
                &pa.phi,
                &pb.phi,
                config.projected_tau(),
                config.penalty,
                pair_scale(enc_a, enc_b),
                grad,
            );
            if let (Some(w), Some(g)) = (grad_w.as_mut(), g) {
                pa.backward(&g.a, w);
                pb.backward(&g.b, w);
            }
            loss
        }
    };
    Ok((loss, grad_w))
}

/// Loss value for the projected inputs `ρ(enc_*)`.
pub fn loss_value(config: &LossConfig, inputs: &LossInputs<'_>, head: &ProjectionHead) -> Result<f64> {
    evaluate(config, inputs, head, false).map(|(l, _)| l)
}

/// Loss value and `∂loss/∂W` (`D × D'`, row-major) for the projected inputs
/// `ρ(enc_*)`.
pub fn loss_gradient(config: &LossConfig, inputs: &LossInputs<'_>, head: &ProjectionHead) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = evaluate(config, inputs, head, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_pair() -> FeatureGrid {
        FeatureGrid::new(1, 2, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn constant(h: usize, w: usize) -> FeatureGrid {
        FeatureGrid::new(h, w, 2, h as u32, w as u32, vec![1.0; h * w * 2]).unwrap()
    }

    /// `n` cells, each a distinct basis vector.
    fn one_hot(h: usize, w: usize) -> FeatureGrid {
        let n = h * w;
        FeatureGrid::from_fn(h, w, n, h as u32, w as u32, |r, c, k| f32::from(u8::from(r * w + c == k))).unwrap()
    }

    #[test]
    fn eq_examples() {
        let id = SpatialTransform::identity();
        let l = loss_eq(&orthonormal_pair(), &orthonormal_pair(), &id, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - 2.0 * 0.5 / (1.0 + e) / 4.0).abs() < 1e-12);
        // the quoted value was derived from the rounded probability 0.2689
        assert!((l - 0.06722).abs() < 2e-5);
        assert!((loss_eq(&constant(1, 2), &constant(1, 2), &id, 0.7).unwrap() - 0.125).abs() < 1e-12);

        // x' is x mirrored; g carries the mirror so every cell still matches
        let x = one_hot(3, 3);
        assert!(loss_eq(&x, &x, &id, 0.005).unwrap() < 1e-12);
        let xp = FeatureGrid::from_fn(3, 3, 9, 3, 3, |r, c, k| f32::from(u8::from(r * 3 + (2 - c) == k))).unwrap();
        let flip = SpatialTransform::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], true).unwrap();
        assert!(loss_eq(&x, &xp, &flip, 0.005).unwrap() < 1e-12);
        // six cells land 2/3 away from their reference
        assert!((loss_eq(&x, &xp, &id, 0.005).unwrap() - 6.0 * (2.0 / 3.0) / 81.0).abs() < 1e-9);
        assert!(loss_eq(&x, &x, &id, 0.0).is_err());
    }

    #[test]
    fn dve_examples() {
        let x = one_hot(2, 3);
        let id = SpatialTransform::identity();
        let eq = loss_eq(&x, &x, &id, 0.02).unwrap();
        let dve = loss_dve(&x, &x, &x, &id, 0.02).unwrap();
        assert!((eq - dve).abs() < 1e-4);
        assert!(dve < 1e-12);

        // a constant auxiliary grid makes every soft match the same vector
        let aux = FeatureGrid::new(2, 3, 6, 2, 3, vec![0.5; 36]).unwrap();
        let c = FeatureGrid::new(2, 3, 6, 2, 3, vec![0.5; 36]).unwrap();
        let dve = loss_dve(&x, &x, &aux, &id, 0.3).unwrap();
        let eq_const = loss_eq(&c, &x, &id, 0.3).unwrap();
        assert!((dve - eq_const).abs() < 1e-12);
    }

    #[test]
    fn cl_examples() {
        assert!(loss_cl(&orthonormal_pair(), 0.01).unwrap() < 1e-3);
        assert!((loss_cl(&constant(1, 2), 0.14).unwrap() - 0.125).abs() < 1e-12);
        assert_eq!(loss_cl(&constant(1, 1), 0.14).unwrap(), 0.0);
    }

    #[test]
    fn lead_examples() {
        let c = constant(1, 2);
        let l = loss_lead(&c, &c, &c, &c, 0.05).unwrap();
        assert!((l - 2.0f64.ln() / 2.0).abs() < 1e-12);
        assert!((l - 0.3466).abs() < 1e-4);

        let x = one_hot(1, 2);
        assert!(loss_lead(&x, &x, &x, &x, 0.001).unwrap() < 1e-12);
    }

    #[test]
    fn asym_examples() {
        let x = orthonormal_pair();
        assert_eq!(loss_asym(&x, &x, &x, &x, 0.3, 0.3, Penalty::Mse).unwrap(), 0.0);
        let lead = loss_lead(&x, &x, &x, &x, 0.05).unwrap();
        let ce = loss_asym(&x, &x, &x, &x, 0.05, 0.05, Penalty::Ce).unwrap();
        assert_eq!(lead, ce);

        let mse = loss_asym(&x, &x, &x, &x, 0.2, 0.4, Penalty::Mse).unwrap();
        let s = |t: f64| 1.0 / (1.0 + (-1.0 / t).exp());
        let gap = s(0.2) - s(0.4);
        assert!((mse - 4.0 * gap * gap / 4.0).abs() < 1e-12);
        assert!((mse - 0.004784).abs() < 1e-6, "{mse}");
    }

    #[test]
    fn supervised_examples() {
        let x = orthonormal_pair();
        let l = loss_supervised(&x, &x, &[(0, 0)], 1.0).unwrap();
        assert!((l - 0.5 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
        // the quoted value was derived from the rounded probability 0.2689
        assert!((l - 0.13445).abs() < 3e-5);
        assert!((loss_supervised(&x, &constant(1, 2), &[(0, 1)], 0.4).unwrap() - 0.25).abs() < 1e-12);
        let h = one_hot(2, 2);
        assert!(loss_supervised(&h, &h, &[(0, 0), (3, 3)], 0.001).unwrap() < 1e-12);
        assert!(loss_supervised(&x, &x, &[], 1.0).is_err());
        assert!(loss_supervised(&x, &x, &[(0, 2)], 1.0).is_err());
    }

    #[test]
    fn missing_inputs_are_reported() {
        let x = one_hot(2, 2);
        let head = ProjectionHead::identity(4).unwrap();
        let inputs = LossInputs {
            enc_a: Some(&x),
            ..Default::default()
        };
        for kind in [LossKind::Eq, LossKind::Dve, LossKind::Lead, LossKind::Asym, LossKind::Supervised] {
            let err = loss_value(&LossConfig::defaults(kind), &inputs, &head).unwrap_err();
            assert!(matches!(err, Error::MissingInput { .. }), "{kind}: {err}");
        }
        assert!(loss_value(&LossConfig::defaults(LossKind::Cl), &inputs, &head).is_ok());
    }

    #[test]
    fn defaults() {
        assert_eq!(LossConfig::defaults(LossKind::Asym).tau1, 0.2);
        assert_eq!(LossConfig::defaults(LossKind::Asym).tau2, 0.4);
        assert_eq!(LossConfig::defaults(LossKind::Asym).penalty, Penalty::Mse);
        assert_eq!(LossConfig::defaults(LossKind::Cl).tau1, 0.14);
        for k in [LossKind::Eq, LossKind::Dve, LossKind::Lead] {
            assert_eq!(LossConfig::defaults(k).tau1, 0.05);
        }
        assert_eq!("ASYM".parse::<LossKind>().unwrap(), LossKind::Asym);
        assert!("nope".parse::<LossKind>().is_err());
    }
}
