//! Seeded evaluation pairs written to and read back from CSV.

use corrbench::data_io::{generate_splits, synthesize_images, synthetic_manifest, PairList, SynthConfig};

fn main() -> corrbench::Result<()> {
    let config = SynthConfig { num_images: 10, ..SynthConfig::default() };
    let manifest = synthetic_manifest(&config, &synthesize_images(&config)?, "");

    let pairs = generate_splits(&manifest, 8, 42, true)?;
    let again = generate_splits(&manifest, 8, 42, true)?;
    assert_eq!(pairs, again);

    let path = std::env::temp_dir().join("corrbench-pairs.csv");
    pairs.write_csv(&path)?;
    let read = PairList::read_csv(&path)?;
    for (s, t) in &read.pairs {
        println!("{s} -> {t}");
    }
    println!("indices {:?}", read.resolve(&manifest)?);
    Ok(())
}
