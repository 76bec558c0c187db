//! Softmax correlation maps between two grids and the effect of temperature.

use corrbench::data_io::{synthesize_images, SynthConfig};
use corrbench::grid::{correlation_map, l2_normalize};

fn main() -> corrbench::Result<()> {
    let images = synthesize_images(&SynthConfig { num_images: 2, grid: 8, ..SynthConfig::default() })?;
    let a = l2_normalize(&images[0].grid)?;
    let b = l2_normalize(&images[1].grid)?;

    for tau in [0.05, 0.2, 1.0] {
        let map = correlation_map(&a, &b, tau)?;
        let row = map.row(0);
        let peak = row.iter().cloned().fold(0.0, f64::max);
        let entropy: f64 = -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        println!("tau {tau:<5} {}x{} map, row 0 sums to {:.6}, peak {peak:.4}, entropy {entropy:.3}", map.src_cells(), map.tgt_cells(), row.iter().sum::<f64>());
    }
    Ok(())
}
