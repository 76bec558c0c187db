use std::path::Path;
use std::process::Command;

use corrbench::cli::render_tables;
use corrbench::diagnostics::{read_aggregate_csv, AggregateRow};

fn corrbench(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_corrbench"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("CORRBENCH_THREADS")
        .args(args)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn small_dataset(dir: &Path) {
    let code = corrbench(
        dir,
        &["synth", "--out", "data", "--num-images", "8", "--grid", "8", "--dim", "16", "--nuisance-dims", "8", "--num-keypoints", "3"],
    );
    assert_eq!(code, 0);
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn split_is_deterministic_and_reproducible_from_its_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    for out in ["a.csv", "b.csv"] {
        assert_eq!(corrbench(d, &["split", "--manifest", "data/manifest.json", "--num-pairs", "12", "--seed", "4", "--out", out]), 0);
    }
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));
    assert_eq!(read(d, "a.csv").lines().count(), 13);

    std::fs::rename(d.join("a.csv"), d.join("first.csv")).unwrap();
    assert_eq!(corrbench(d, &["split", "--config", "a.csv.config.toml"]), 0);
    assert_eq!(read(d, "first.csv"), read(d, "a.csv"));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    std::fs::write(d.join("run.toml"), "manifest = \"data/manifest.json\"\nnum_pairs = 5\nout = \"p.csv\"\n").unwrap();
    assert_eq!(corrbench(d, &["split", "--config", "run.toml"]), 0);
    assert_eq!(read(d, "p.csv").lines().count(), 6);
    assert_eq!(corrbench(d, &["split", "--config", "run.toml", "--num-pairs", "7"]), 0);
    assert_eq!(read(d, "p.csv").lines().count(), 8);
    let echo = read(d, "p.csv.config.toml");
    assert!(echo.contains("num_pairs = 7"));
    assert!(echo.contains("seed = 0"));
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "num_pairs = 5\nnum_pair = 3\n").unwrap();
    assert_eq!(corrbench(d, &["split", "--config", "bad.toml"]), 1);
    assert_eq!(corrbench(d, &["split", "--bogus"]), 1);
    assert_eq!(corrbench(d, &["split", "--manifest", "m.json"]), 1);
    assert_eq!(corrbench(d, &["train", "--manifest", "m.json", "--out", "r", "--tau1=-1"]), 1);
    assert_eq!(corrbench(d, &["--threads", "0", "report", "--inputs", "x.csv", "--out", "r"]), 1);
    assert_eq!(corrbench(d, &["split", "--manifest", "missing.json", "--out", "p.csv"]), 2);
    assert_eq!(corrbench(d, &["report", "--inputs", "missing.csv", "--out", "r"]), 2);
    assert_eq!(corrbench(d, &["--help"]), 0);
}

#[test]
fn asym_training_echoes_its_default_temperatures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    let args = ["train", "--manifest", "data/manifest.json", "--loss", "asym", "--epochs", "2", "--num-pairs", "4", "--upsample", "0", "--proj-dim", "4"];
    assert_eq!(corrbench(d, &[&args[..], &["--out", "run1"]].concat()), 0);
    let echo = read(d, "run1/config.toml");
    assert!(echo.contains("tau1 = 0.2"), "{echo}");
    assert!(echo.contains("tau2 = 0.4"), "{echo}");
    assert!(echo.contains("penalty = \"mse\""), "{echo}");
    assert_eq!(read(d, "run1/history.csv").lines().count(), 3);

    assert_eq!(corrbench(d, &["train", "--config", "run1/config.toml", "--out", "run2"]), 0);
    assert_eq!(std::fs::read(d.join("run1/head.prj")).unwrap(), std::fs::read(d.join("run2/head.prj")).unwrap());
}

#[test]
fn every_baseline_method_writes_a_head() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    for m in ["pca", "nmf", "random", "none"] {
        assert_eq!(corrbench(d, &["project", "--method", m, "--manifest", "data/manifest.json", "--proj-dim", "4", "--nmf-iters", "20", "--out", m]), 0);
        let head = corrbench::projection::read_head(d.join(m).join("head.prj")).unwrap();
        assert_eq!(head.in_dim(), 16);
        assert_eq!(head.out_dim(), if m == "none" { 16 } else { 4 });
    }
}

fn eval_pck(d: &Path, alpha: &str, out: &str, threads: &str) -> AggregateRow {
    let code = corrbench(
        d,
        &["--threads", threads, "eval", "--manifest", "data/manifest.json", "--pairs", "p.csv", "--alpha", alpha, "--threshold-source", "image", "--out", out],
    );
    assert_eq!(code, 0);
    read_aggregate_csv(d.join(out).join("aggregate.csv")).unwrap().remove(0)
}

#[test]
fn pck_grows_with_alpha_and_results_ignore_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    assert_eq!(corrbench(d, &["split", "--manifest", "data/manifest.json", "--num-pairs", "30", "--out", "p.csv"]), 0);
    let pcks: Vec<f64> = ["0.02", "0.05", "0.1", "0.2", "0.5"]
        .iter()
        .enumerate()
        .map(|(i, a)| eval_pck(d, a, &format!("e{i}"), "2").pck.unwrap())
        .collect();
    assert!(pcks.windows(2).all(|w| w[0] <= w[1]), "{pcks:?}");

    let one = eval_pck(d, "0.1", "t1", "1");
    let four = eval_pck(d, "0.1", "t4", "4");
    assert_eq!(one, four);
    assert_eq!(read(d, "t1/results.json"), read(d, "t4/results.json"));
}

#[test]
fn diagnose_writes_histogram_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    assert_eq!(corrbench(d, &["split", "--manifest", "data/manifest.json", "--num-pairs", "10", "--out", "p.csv"]), 0);
    assert_eq!(corrbench(d, &["diagnose", "--manifest", "data/manifest.json", "--pairs", "p.csv", "--bins", "8", "--out", "dg"]), 0);
    let hist = read(d, "dg/histogram.csv");
    assert_eq!(hist.lines().next().unwrap(), "bin_lo,bin_hi,correct_count,wrong_count");
    assert_eq!(hist.lines().count(), 9);
    assert!(read(d, "dg/diagnosis.txt").contains("overlap"));
}

fn row(method: &str, dataset: &str, pck: f64) -> AggregateRow {
    AggregateRow {
        method: method.into(),
        dataset: dataset.into(),
        alpha: 0.1,
        pck: Some(pck),
        pck_dagger: Some(pck - 0.05),
        raw_miss: Some(0.3),
        raw_jitter: Some(0.125),
        raw_swap: Some(0.1),
        excl_correct: Some(pck - 0.05),
        excl_swap: Some(0.1),
        excl_jitter: Some(0.2),
        excl_miss: Some(0.75 - pck),
        m: 40,
    }
}

#[test]
fn report_tables_match_golden_text() {
    let rows = vec![row("asym@a", "a", 0.5), row("asym@a", "b", 0.25), row("asym@b", "a", 0.375), row("pca", "a", 0.3)];
    let expected = "\
PCK (%)
method     a     b
------------------
asym@a  50.0  25.0
asym@b  37.5     -
pca     30.0     -

Error taxonomy (%)
method  dataset  alpha   PCK  PCK+  miss  jitter  swap  x.correct  x.swap  x.jitter  x.miss   M
-----------------------------------------------------------------------------------------------
asym@a        a    0.1  50.0  45.0  30.0    12.5  10.0       45.0    10.0      20.0    25.0  40
asym@a        b    0.1  25.0  20.0  30.0    12.5  10.0       20.0    10.0      20.0    50.0  40
asym@b        a    0.1  37.5  32.5  30.0    12.5  10.0       32.5    10.0      20.0    37.5  40
pca           a    0.1  30.0  25.0  30.0    12.5  10.0       25.0    10.0      20.0    45.0  40

Cross-dataset PCK (%) for asym: rows train, columns test
train \\ test     a     b
------------------------
a             50.0  25.0
b             37.5     -
";
    assert_eq!(render_tables(&rows), expected);
}

#[test]
fn report_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corrbench::diagnostics::write_aggregate_csv(d.join("agg.csv"), &[row("x", "a", 0.4), row("y", "a", 0.6)]).unwrap();
    for out in ["r1", "r2"] {
        assert_eq!(corrbench(d, &["report", "--inputs", "agg.csv", "--out", out]), 0);
    }
    assert_eq!(read(d, "r1/report.txt"), read(d, "r2/report.txt"));
}

fn tiny_dataset(dir: &Path) {
    use corrbench::data_io::{write_features, DatasetManifest, ImageRecord};
    use corrbench::grid::FeatureGrid;
    use corrbench::matcher::Keypoint;
    let kp = |name: &str, x: f64, y: f64| Keypoint { name: name.into(), x, y, visible: true };
    let grids = [
        FeatureGrid::new(2, 2, 2, 16, 16, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap(),
        FeatureGrid::new(2, 2, 2, 16, 16, vec![0.0, 1.0, 1.0, 0.0, 0.0, -1.0, -1.0, 0.0]).unwrap(),
    ];
    let keypoints = [vec![kp("a", 4.0, 4.0), kp("b", 12.0, 4.0)], vec![kp("a", 13.0, 3.0), kp("b", 4.0, 12.0)]];
    std::fs::create_dir_all(dir.join("tiny")).unwrap();
    let mut images = Vec::new();
    for (i, (g, k)) in grids.iter().zip(keypoints).enumerate() {
        let path = format!("img{i}.dft");
        write_features(dir.join("tiny").join(&path), g).unwrap();
        images.push(ImageRecord {
            id: format!("img{i}"),
            feature_path: path.into(),
            image_width: 16,
            image_height: 16,
            bbox: None,
            class_label: Some("toy".into()),
            keypoints: k,
        });
    }
    DatasetManifest::new("tiny", images, dir.join("tiny")).save(dir.join("tiny/manifest.json")).unwrap();
    std::fs::write(dir.join("tiny/pairs.csv"), "src_id,tgt_id\nimg0,img1\n").unwrap();
}

#[test]
fn eval_output_matches_golden_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_dataset(d);
    let code = corrbench(
        d,
        &["eval", "--manifest", "tiny/manifest.json", "--pairs", "tiny/pairs.csv", "--sampling", "nearest", "--threshold-source", "image", "--alpha", "0.25", "--out", "ev"],
    );
    assert_eq!(code, 0);
    let golden_json = r#"[
  {
    "src_id": "img0",
    "tgt_id": "img1",
    "per_kp": [
      {
        "name": "a",
        "pred_x": 12.0,
        "pred_y": 4.0,
        "dist": 1.4142135623730951,
        "delta": 1.4142135623730951,
        "raw": {
          "miss": false,
          "jitter": false,
          "swap": false,
          "pck_hit": true,
          "dagger_hit": true
        },
        "excl": "correct"
      },
      {
        "name": "b",
        "pred_x": 4.0,
        "pred_y": 4.0,
        "dist": 8.0,
        "delta": 8.0,
        "raw": {
          "miss": true,
          "jitter": false,
          "swap": false,
          "pck_hit": false,
          "dagger_hit": false
        },
        "excl": "miss"
      }
    ]
  }
]
"#;
    let golden_csv = "method,dataset,alpha,pck,pck_dagger,raw_miss,raw_jitter,raw_swap,excl_correct,excl_swap,excl_jitter,excl_miss,M\nnone,tiny,0.25,0.5,0.5,0.5,0.0,0.0,0.5,0.0,0.0,0.5,2\n";
    assert_eq!(read(d, "ev/results.json"), golden_json);
    assert_eq!(read(d, "ev/aggregate.csv"), golden_csv);
}
