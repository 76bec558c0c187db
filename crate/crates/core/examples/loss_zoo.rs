//! Every loss kind on one synthetic pair: value and gradient norm at a
//! random head.

use corrbench::augment::{sample_transform, warp_grid, AugmentConfig};
use corrbench::data_io::{synthesize_images, SynthConfig};
use corrbench::losses::{loss_gradient, LossConfig, LossInputs, LossKind};
use corrbench::projection::init_random_projection;

fn main() -> corrbench::Result<()> {
    let images = synthesize_images(&SynthConfig { num_images: 3, grid: 8, ..SynthConfig::default() })?;
    let (a, b, aux) = (&images[0].grid, &images[1].grid, &images[2].grid);
    let g = sample_transform(1, &AugmentConfig::default())?;
    let warped = warp_grid(a, &g)?;
    let gt: Vec<(usize, usize)> = (0..5)
        .map(|k| {
            let (p, q) = (&images[0].keypoints[k], &images[1].keypoints[k]);
            let cell = |grid: &corrbench::grid::FeatureGrid, x: f64, y: f64| grid.cell_containing(x / f64::from(grid.image_width()), y / f64::from(grid.image_height()));
            (cell(a, p.x, p.y), cell(b, q.x, q.y))
        })
        .collect();
    let head = init_random_projection(0, a.dim(), 8)?;

    for kind in LossKind::ALL {
        let inputs = match kind {
            LossKind::Eq => LossInputs { enc_a: Some(a), enc_b: Some(&warped), transform: Some(g), ..Default::default() },
            LossKind::Dve => LossInputs { enc_a: Some(a), enc_b: Some(&warped), aux: Some(aux), transform: Some(g), ..Default::default() },
            LossKind::Cl => LossInputs { enc_a: Some(a), ..Default::default() },
            LossKind::Lead | LossKind::Asym => LossInputs { enc_a: Some(a), enc_b: Some(b), ..Default::default() },
            LossKind::Supervised => LossInputs { enc_a: Some(a), enc_b: Some(b), gt_pairs: &gt, ..Default::default() },
        };
        let config = LossConfig::defaults(kind);
        let (value, grad) = loss_gradient(&config, &inputs, &head)?;
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:<10} tau1 {:<4} tau2 {:<4} {:<3}  loss {value:.6e}  |grad| {norm:.3e}", kind.name(), config.tau1, config.tau2, config.penalty.to_string());
    }
    Ok(())
}
