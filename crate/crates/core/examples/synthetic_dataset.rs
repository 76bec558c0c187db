//! Generates a synthetic keypoint dataset on disk and reads it back.

use corrbench::data_io::{synthesize_dataset, DatasetManifest, SynthConfig};

fn main() -> corrbench::Result<()> {
    let dir = std::env::temp_dir().join("corrbench-synthetic");
    let config = SynthConfig { num_images: 6, ..SynthConfig::default() };
    synthesize_dataset(&config, &dir)?;

    let manifest = DatasetManifest::load(dir.join("manifest.json"))?;
    println!("{}: {} images in {}", manifest.name, manifest.images.len(), dir.display());
    let grid = manifest.read_grid(0)?;
    println!("grid {}x{}x{} over a {}x{} image", grid.height(), grid.width(), grid.dim(), grid.image_width(), grid.image_height());
    for kp in manifest.keypoint_set(0)?.entries() {
        println!("  {} at ({:.1}, {:.1})", kp.name, kp.x, kp.y);
    }
    Ok(())
}
