//! Round trips a feature grid through the DFT1 format and a head through
//! PRJ1.

use corrbench::data_io::{decode_features, encode_features, read_features, write_features};
use corrbench::grid::FeatureGrid;
use corrbench::projection::{init_random_projection, read_head, write_head};

fn main() -> corrbench::Result<()> {
    let grid = FeatureGrid::from_fn(4, 5, 3, 32, 40, |r, c, k| (r * 100 + c * 10 + k) as f32)?;
    let bytes = encode_features(&grid);
    println!("DFT1: {} bytes, magic {:?}", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap());
    assert_eq!(decode_features(&bytes, "grid.dft".as_ref())?, grid);

    let dir = std::env::temp_dir();
    write_features(dir.join("corrbench-grid.dft"), &grid)?;
    assert_eq!(read_features(dir.join("corrbench-grid.dft"))?, grid);

    match decode_features(&bytes[..bytes.len() - 1], "cut.dft".as_ref()) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => unreachable!(),
    }

    let head = init_random_projection(3, 3, 2)?;
    write_head(dir.join("corrbench-head.prj"), &head)?;
    let back = read_head(dir.join("corrbench-head.prj"))?;
    let err = head.weights().iter().zip(back.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("PRJ1 head {}x{}, stored as f32, max weight deviation {err:.1e}", back.in_dim(), back.out_dim());
    Ok(())
}
