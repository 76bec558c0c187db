//! Aggregate rows rendered as PCK, taxonomy and cross-dataset tables.

use corrbench::cli::render_tables;
use corrbench::data_io::SynthConfig;
use corrbench::diagnostics::{AggregateRow, EvalConfig};
use corrbench::pipeline::SyntheticBenchmark;
use corrbench::projection::init_random_projection;

fn main() -> corrbench::Result<()> {
    let eval = EvalConfig::default();
    let mut rows = Vec::new();
    for train_seed in [0u64, 1] {
        let head = init_random_projection(train_seed, 32, 16)?;
        for test_seed in [0u64, 1] {
            let bench = SyntheticBenchmark::new(&SynthConfig { seed: test_seed, ..SynthConfig::default() }, 30, 40)?;
            let (b, _) = bench.score(Some(&head), &eval, 20)?;
            rows.push(AggregateRow::new(&format!("random@synth{train_seed}"), &format!("synth{test_seed}"), eval.alpha, &b));
        }
    }
    print!("{}", render_tables(&rows));
    Ok(())
}
