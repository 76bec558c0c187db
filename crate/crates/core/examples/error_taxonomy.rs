//! Classifies hand-placed predictions into correct, swap, jitter and miss.

use corrbench::diagnostics::{classify_prediction, compute_metrics, Category, EvalConfig, ThresholdSource};
use corrbench::matcher::{Keypoint, KeypointSet, Prediction, PredictionSet};

fn main() -> corrbench::Result<()> {
    let kp = |name: &str, x, y| Keypoint { name: name.into(), x, y, visible: true };
    let gt = KeypointSet::new(vec![kp("beak", 50.0, 50.0), kp("eye", 70.0, 50.0), kp("tail", 150.0, 150.0)], 200, 200, None)?;
    let config = EvalConfig { alpha: 0.05, threshold_source: ThresholdSource::Image };
    let d = config.threshold(&gt);
    println!("threshold d = {d}");

    let preds = [("beak", 52.0, 51.0), ("eye", 51.0, 50.0), ("tail", 163.0, 150.0), ("beak", 120.0, 20.0)];
    for (name, x, y) in preds {
        let c = classify_prediction((x, y), &gt, name, d)?;
        println!("{name:<5} at ({x:>5.1}, {y:>5.1})  dist {:>6.2}  delta {:>6.2}  {:?}  raw {:?}", c.dist, c.delta, c.category, c.raw);
    }

    let set = PredictionSet {
        entries: preds[..3].iter().map(|&(n, x, y)| Prediction { name: n.into(), x, y, similarity: 1.0, delta: None }).collect(),
    };
    let b = compute_metrics(&set, &gt, &config)?;
    println!("PCK {:?}  PCK-dagger {:?}", b.pck(), b.pck_dagger());
    for c in Category::ALL {
        println!("  {c:?}: {}", b.exclusive_count(c));
    }
    Ok(())
}
