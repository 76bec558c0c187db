//! PCA, NMF, random and identity heads scored on the synthetic benchmark.

use corrbench::data_io::SynthConfig;
use corrbench::diagnostics::EvalConfig;
use corrbench::pipeline::SyntheticBenchmark;
use corrbench::projection::{collect_samples, fit_nmf, fit_pca, init_random_projection};

fn main() -> corrbench::Result<()> {
    let bench = SyntheticBenchmark::new(&SynthConfig::default(), 30, 90)?;
    let samples = collect_samples(&bench.grids[..bench.train_images], 4000, 0)?;
    let pca = fit_pca(&samples, 16)?;
    println!("top PCA eigenvalues {:?}", pca.eigenvalues[..4].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    let nmf = fit_nmf(&samples, 16, 100, 0)?;
    println!("NMF objective {:.3} -> {:.3}, {} negative entries clamped", nmf.objective[0], nmf.objective[nmf.objective.len() - 1], nmf.clamped);

    let eval = EvalConfig::default();
    let heads = [
        ("none", None),
        ("random", Some(init_random_projection(0, 32, 16)?)),
        ("pca", Some(pca.head)),
        ("nmf", Some(nmf.head)),
    ];
    for (name, head) in &heads {
        let (b, overlap) = bench.score(head.as_ref(), &eval, 40)?;
        println!("{name:<7} PCK@0.1 {:.1}  overlap {overlap:.3}", 100.0 * b.pck().unwrap_or(0.0));
    }
    Ok(())
}
