//! Sampled spatial transforms: point mapping, inverses and grid warping.

use corrbench::augment::{sample_transform, transform_coords, warp_grid, AugmentConfig};
use corrbench::grid::FeatureGrid;

fn main() -> corrbench::Result<()> {
    let config = AugmentConfig::default();
    for seed in 0..3 {
        let g = sample_transform(seed, &config)?;
        let p = (0.3, 0.6);
        let q = transform_coords(&g, p);
        let back = transform_coords(&g.inverse()?, q);
        println!("seed {seed}: flip {} det {:.3}  {p:?} -> ({:.3}, {:.3}) -> ({:.3}, {:.3})", g.flip_h, g.det(), q.0, q.1, back.0, back.1);
    }

    let grid = FeatureGrid::from_fn(4, 4, 1, 32, 32, |r, c, _| (r * 4 + c) as f32)?;
    let warped = warp_grid(&grid, &sample_transform(7, &config)?)?;
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:5.1}", warped.cell(r, c)[0])).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}
