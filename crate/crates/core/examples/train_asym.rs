//! Trains an ASYM projection head on synthetic images and compares it with
//! the random head it started from on held-out pairs.

use corrbench::data_io::SynthConfig;
use corrbench::diagnostics::EvalConfig;
use corrbench::losses::LossKind;
use corrbench::pipeline::SyntheticBenchmark;
use corrbench::projection::init_random_projection;
use corrbench::trainer::{train_projection, TrainConfig};

fn main() -> corrbench::Result<()> {
    let bench = SyntheticBenchmark::new(&SynthConfig::default(), 30, 90)?;
    let data = bench.training_data(60, 0)?;
    let init = init_random_projection(0, 32, 16)?;
    let config = TrainConfig { proj_dim: 16, upsample: 0, ..TrainConfig::new(LossKind::Asym) };

    let outcome = train_projection(&data, &config, &init)?;
    for (epoch, loss) in outcome.history.iter().enumerate().step_by(10) {
        println!("epoch {:>2}  loss {loss:.4e}", epoch + 1);
    }

    let eval = EvalConfig::default();
    for (name, head) in [("random", &init), ("asym", &outcome.head)] {
        let (b, overlap) = bench.score(Some(head), &eval, 40)?;
        println!("{name:<7} PCK@0.1 {:.1}  correct/wrong overlap {overlap:.3}", 100.0 * b.pck().unwrap_or(0.0));
    }
    Ok(())
}
