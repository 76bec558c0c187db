//! Command-line front end. Every subcommand resolves its settings from
//! built-in defaults, then an optional `--config` TOML file, then flags, and
//! echoes the resolved settings next to its outputs so a run can be repeated
//! from that file alone.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data_io::{generate_splits, synthesize_dataset, DatasetManifest, PairList, SynthConfig};
use crate::diagnostics::{write_aggregate_csv, write_results_json, read_aggregate_csv, AggregateRow, EvalConfig, ThresholdSource};
use crate::losses::{LossConfig, LossKind, Penalty};
use crate::matcher::{MatchOptions, SourceSampling};
use crate::pipeline::{evaluate_pairs, pooled_histogram, project_all};
use crate::projection::{collect_samples, fit_nmf, fit_pca, init_random_projection, read_head, write_head, ProjectionHead, DEFAULT_PROJ_DIM};
use crate::trainer::{train_projection, write_history_csv, PairSource, TrainConfig, TrainingData};

pub const THREADS_ENV: &str = "CORRBENCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corrbench", version, about = "Projection-head training and keypoint-transfer evaluation on dense feature grids")]
struct Cli {
    /// Worker threads (default: CORRBENCH_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample evaluation pairs from a manifest into a CSV file.
    Split(SplitArgs),
    /// Generate a synthetic keypoint dataset.
    Synth(SynthArgs),
    /// Train a projection head with one of the correspondence losses.
    Train(TrainArgs),
    /// Fit a baseline head (pca, nmf, random or none).
    Project(ProjectArgs),
    /// Match keypoints over a pair list and score them.
    Eval(EvalArgs),
    /// Error taxonomy and correct/wrong similarity histograms.
    Diagnose(DiagnoseArgs),
    /// Render aggregate CSV files as text tables.
    Report(ReportArgs),
}

enum Failure {
    Usage(String),
    Data(crate::Error),
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return usage("thread count must be at least 1");
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Split(a) => split(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Project(a) => project(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Report(a) => report(a),
    }
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn echo_config<C: Serialize>(config: &C, path: &Path) -> CliResult<()> {
    let text = toml::to_string(config).map_err(|e| Failure::Usage(format!("cannot serialize config: {e}")))?;
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    Ok(())
}

fn require_path(p: &Path, what: &str) -> CliResult<()> {
    if p.as_os_str().is_empty() {
        return usage(format!("missing {what} (flag or config key)"));
    }
    Ok(())
}

macro_rules! override_with {
    ($cfg:ident, $args:ident; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field { $cfg.$field = v.into(); } )*
    };
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    num_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep pairs within one class label.
    #[arg(long)]
    same_class: Option<bool>,
    /// Output CSV file; the resolved config goes to `<out>.config.toml`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRun {
    pub manifest: PathBuf,
    pub num_pairs: usize,
    pub seed: u64,
    pub same_class: bool,
    pub out: PathBuf,
}

impl Default for SplitRun {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            num_pairs: 100,
            seed: 0,
            same_class: true,
            out: PathBuf::new(),
        }
    }
}

fn split(a: SplitArgs) -> CliResult<()> {
    let mut c: SplitRun = load_config(a.config.as_deref())?;
    override_with!(c, a; manifest, num_pairs, seed, same_class, out);
    require_path(&c.manifest, "--manifest")?;
    require_path(&c.out, "--out")?;
    if c.num_pairs == 0 {
        return usage("--num-pairs must be at least 1");
    }
    let manifest = DatasetManifest::load(&c.manifest)?;
    let pairs = generate_splits(&manifest, c.num_pairs, c.seed, c.same_class)?;
    pairs.write_csv(&c.out)?;
    let mut echo = c.out.clone().into_os_string();
    echo.push(".config.toml");
    echo_config(&c, Path::new(&echo))?;
    log::info!("wrote {} pairs to {}", pairs.len(), c.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_images: Option<usize>,
    /// Grid side length in cells.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    num_keypoints: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    nuisance_dims: Option<usize>,
    #[arg(long)]
    spatial_sigma: Option<f64>,
    #[arg(long)]
    nuisance_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub out: PathBuf,
    pub synth: SynthConfig,
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut c: SynthRun = load_config(a.config.as_deref())?;
    override_with!(c, a; out);
    let s = &mut c.synth;
    override_with!(s, a; seed, num_images, grid, dim, num_keypoints, noise_sigma, nuisance_dims, spatial_sigma, nuisance_scale);
    require_path(&c.out, "--out")?;
    c.synth.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    create_dir(&c.out)?;
    let manifest = synthesize_dataset(&c.synth, &c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    log::info!("wrote {} images to {}", manifest.images.len(), c.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pair list for real-pair losses; sampled from the manifest when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Pairs to sample when no pair list is given.
    #[arg(long)]
    num_pairs: Option<usize>,
    /// Starting head (PRJ1); a seeded random head otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// eq | dve | cl | lead | asym | supervised
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// mse | ce
    #[arg(long)]
    penalty: Option<Penalty>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    proj_dim: Option<usize>,
    /// Cells per side after resizing; 0 keeps the native grid.
    #[arg(long)]
    upsample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// aug | same_image | real_pairs
    #[arg(long)]
    pair_source: Option<PairSource>,
    #[arg(long)]
    batch_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    pub num_pairs: usize,
    pub same_class: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub loss: LossKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Penalty>,
    pub epochs: usize,
    pub lr: f64,
    pub proj_dim: usize,
    pub upsample: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_source: Option<PairSource>,
    pub batch_pairs: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::new(LossKind::Asym);
        Self {
            manifest: PathBuf::new(),
            pairs: None,
            num_pairs: 200,
            same_class: true,
            init: None,
            out: PathBuf::new(),
            loss: LossKind::Asym,
            tau1: None,
            tau2: None,
            penalty: None,
            epochs: t.epochs,
            lr: t.lr,
            proj_dim: t.proj_dim,
            upsample: t.upsample,
            seed: t.seed,
            pair_source: None,
            batch_pairs: t.batch_pairs,
            augment: t.augment,
        }
    }
}

impl TrainRun {
    /// Fills every kind-dependent default so the echo is complete.
    fn resolve(&mut self) {
        let k = self.loss;
        self.tau1.get_or_insert(k.default_tau1());
        self.tau2.get_or_insert(k.default_tau2());
        self.penalty.get_or_insert(k.default_penalty());
        self.pair_source.get_or_insert(PairSource::default_for(k));
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            loss: LossConfig {
                kind: self.loss,
                tau1: self.tau1.unwrap_or(self.loss.default_tau1()),
                tau2: self.tau2.unwrap_or(self.loss.default_tau2()),
                penalty: self.penalty.unwrap_or(self.loss.default_penalty()),
            },
            proj_dim: self.proj_dim,
            upsample: self.upsample,
            seed: self.seed,
            pair_source: self.pair_source.unwrap_or(PairSource::default_for(self.loss)),
            batch_pairs: self.batch_pairs,
            augment: self.augment,
        }
    }
}

fn clamp_proj_dim(requested: usize, in_dim: usize) -> usize {
    if requested > in_dim {
        log::warn!("proj_dim {requested} exceeds the {in_dim} input channels; using {in_dim}");
        in_dim
    } else {
        requested
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut c: TrainRun = load_config(a.config.as_deref())?;
    override_with!(c, a; manifest, num_pairs, out, loss, epochs, lr, proj_dim, upsample, seed, batch_pairs);
    if a.pairs.is_some() {
        c.pairs = a.pairs;
    }
    if a.init.is_some() {
        c.init = a.init;
    }
    if a.tau1.is_some() {
        c.tau1 = a.tau1;
    }
    if a.tau2.is_some() {
        c.tau2 = a.tau2;
    }
    if a.penalty.is_some() {
        c.penalty = a.penalty;
    }
    if a.pair_source.is_some() {
        c.pair_source = a.pair_source;
    }
    c.resolve();
    require_path(&c.manifest, "--manifest")?;
    require_path(&c.out, "--out")?;
    let mut config = c.train_config();
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let manifest = DatasetManifest::load(&c.manifest)?;
    let pairs = match (&c.pairs, config.pair_source) {
        (Some(p), _) => Some(PairList::read_csv(p)?),
        (None, PairSource::RealPairs) => Some(generate_splits(&manifest, c.num_pairs, c.seed, c.same_class)?),
        (None, _) => None,
    };
    let data = TrainingData::from_manifest(&manifest, pairs.as_ref())?;
    let in_dim = data.grids.first().map(|g| g.dim()).unwrap_or(0);
    let init = match &c.init {
        Some(p) => read_head(p)?,
        None => {
            c.proj_dim = clamp_proj_dim(c.proj_dim, in_dim);
            config.proj_dim = c.proj_dim;
            init_random_projection(c.seed, in_dim, c.proj_dim)?
        }
    };
    create_dir(&c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    let outcome = train_projection(&data, &config, &init)?;
    write_head(c.out.join("head.prj"), &outcome.head)?;
    write_history_csv(c.out.join("history.csv"), &outcome.history)?;
    log::info!(
        "trained {} head: loss {:.6e} -> {:.6e}",
        c.loss,
        outcome.history.first().copied().unwrap_or(f64::NAN),
        outcome.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// project

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Pca,
    Nmf,
    Random,
    None,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<BaselineMethod>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cells sampled for fitting.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    nmf_iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectRun {
    pub method: BaselineMethod,
    pub manifest: PathBuf,
    pub proj_dim: usize,
    pub seed: u64,
    pub max_samples: usize,
    pub nmf_iters: usize,
    pub out: PathBuf,
}

impl Default for ProjectRun {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Pca,
            manifest: PathBuf::new(),
            proj_dim: DEFAULT_PROJ_DIM,
            seed: 0,
            max_samples: 20_000,
            nmf_iters: 200,
            out: PathBuf::new(),
        }
    }
}

fn project(a: ProjectArgs) -> CliResult<()> {
    let mut c: ProjectRun = load_config(a.config.as_deref())?;
    override_with!(c, a; method, manifest, proj_dim, seed, max_samples, nmf_iters, out);
    require_path(&c.manifest, "--manifest")?;
    require_path(&c.out, "--out")?;
    if c.proj_dim == 0 || c.max_samples == 0 || c.nmf_iters == 0 {
        return usage("proj_dim, max_samples and nmf_iters must be at least 1");
    }
    let manifest = DatasetManifest::load(&c.manifest)?;
    let grids = manifest.read_all_grids()?;
    let in_dim = grids.first().map(|g| g.dim()).unwrap_or(0);
    c.proj_dim = clamp_proj_dim(c.proj_dim, in_dim);
    let head = match c.method {
        BaselineMethod::None => ProjectionHead::identity(in_dim)?,
        BaselineMethod::Random => init_random_projection(c.seed, in_dim, c.proj_dim)?,
        BaselineMethod::Pca => fit_pca(&collect_samples(&grids, c.max_samples, c.seed)?, c.proj_dim)?.head,
        BaselineMethod::Nmf => {
            let fit = fit_nmf(&collect_samples(&grids, c.max_samples, c.seed)?, c.proj_dim, c.nmf_iters, c.seed)?;
            log::info!("NMF objective {:.6e}", fit.objective.last().copied().unwrap_or(f64::NAN));
            fit.head
        }
    };
    create_dir(&c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    write_head(c.out.join("head.prj"), &head)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / diagnose

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Projection head (PRJ1); the normalized encoder features otherwise.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Method name for the aggregate row.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// bbox | image
    #[arg(long, value_enum)]
    threshold_source: Option<ThresholdArg>,
    /// bilinear | nearest
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    /// Cells per side to resize grids to before matching; 0 keeps them.
    #[arg(long)]
    upsample: Option<usize>,
    /// Only score keypoints visible in both images.
    #[arg(long)]
    both_visible: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Histogram bins over [-1, 1].
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ThresholdArg {
    Bbox,
    Image,
}

impl From<ThresholdArg> for ThresholdSource {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::Bbox => ThresholdSource::Bbox,
            ThresholdArg::Image => ThresholdSource::Image,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SamplingArg {
    Bilinear,
    Nearest,
}

impl From<SamplingArg> for SourceSampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Bilinear => SourceSampling::Bilinear,
            SamplingArg::Nearest => SourceSampling::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub manifest: PathBuf,
    pub pairs: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub alpha: f64,
    pub threshold_source: ThresholdSource,
    pub sampling: SourceSampling,
    pub upsample: usize,
    pub both_visible: bool,
    pub bins: usize,
    pub out: PathBuf,
}

impl Default for EvalRun {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            manifest: PathBuf::new(),
            pairs: PathBuf::new(),
            head: None,
            method: None,
            alpha: e.alpha,
            threshold_source: e.threshold_source,
            sampling: SourceSampling::Bilinear,
            upsample: 0,
            both_visible: true,
            bins: 20,
            out: PathBuf::new(),
        }
    }
}

struct Prepared {
    manifest: DatasetManifest,
    grids: Vec<crate::grid::FeatureGrid>,
    keypoints: Vec<crate::matcher::KeypointSet>,
    ids: Vec<String>,
    pairs: Vec<(usize, usize)>,
    eval: EvalConfig,
    options: MatchOptions,
    method: String,
}

fn resolve_eval(a: EvalArgs, bins: Option<usize>) -> CliResult<EvalRun> {
    let mut c: EvalRun = load_config(a.config.as_deref())?;
    override_with!(c, a; manifest, pairs, alpha, threshold_source, sampling, upsample, both_visible, out);
    if let Some(b) = bins {
        c.bins = b;
    }
    if a.head.is_some() {
        c.head = a.head;
    }
    if a.method.is_some() {
        c.method = a.method;
    }
    c.method.get_or_insert_with(|| match &c.head {
        Some(h) => h.parent().and_then(|p| p.file_name()).unwrap_or(h.as_os_str()).to_string_lossy().into_owned(),
        None => "none".into(),
    });
    require_path(&c.manifest, "--manifest")?;
    require_path(&c.pairs, "--pairs")?;
    require_path(&c.out, "--out")?;
    EvalConfig {
        alpha: c.alpha,
        threshold_source: c.threshold_source,
    }
    .validate()
    .map_err(|e| Failure::Usage(e.to_string()))?;
    if c.bins == 0 {
        return usage("--bins must be at least 1");
    }
    Ok(c)
}

fn prepare(c: &EvalRun) -> CliResult<Prepared> {
    let manifest = DatasetManifest::load(&c.manifest)?;
    let pairs = PairList::read_csv(&c.pairs)?.resolve(&manifest)?;
    let head = c.head.as_ref().map(read_head).transpose()?;
    let grids = project_all(head.as_ref(), &manifest.read_all_grids()?)?;
    let keypoints = (0..manifest.images.len())
        .map(|i| manifest.keypoint_set(i))
        .collect::<crate::Result<_>>()?;
    let ids = manifest.images.iter().map(|r| r.id.clone()).collect();
    Ok(Prepared {
        manifest,
        grids,
        keypoints,
        ids,
        pairs,
        eval: EvalConfig {
            alpha: c.alpha,
            threshold_source: c.threshold_source,
        },
        options: MatchOptions {
            sampling: c.sampling,
            upsample: (c.upsample > 0).then_some(c.upsample),
            both_visible: c.both_visible,
        },
        method: c.method.clone().unwrap_or_default(),
    })
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let c = resolve_eval(a, None)?;
    let p = prepare(&c)?;
    let e = evaluate_pairs(&p.grids, &p.keypoints, &p.ids, &p.pairs, &p.options, &p.eval)?;
    create_dir(&c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    write_results_json(c.out.join("results.json"), &e.reports)?;
    let row = AggregateRow::new(&p.method, &p.manifest.name, c.alpha, &e.breakdown);
    write_aggregate_csv(c.out.join("aggregate.csv"), std::slice::from_ref(&row))?;
    println!("{}", render_tables(&[row]));
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let c = resolve_eval(a.eval, a.bins)?;
    let p = prepare(&c)?;
    let e = evaluate_pairs(&p.grids, &p.keypoints, &p.ids, &p.pairs, &p.options, &p.eval)?;
    let hist = pooled_histogram(&p.grids, &p.keypoints, &p.pairs, &p.eval, c.bins)?;
    create_dir(&c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    hist.write_csv(c.out.join("histogram.csv"))?;
    let row = AggregateRow::new(&p.method, &p.manifest.name, c.alpha, &e.breakdown);
    write_aggregate_csv(c.out.join("aggregate.csv"), std::slice::from_ref(&row))?;
    let mut text = render_tables(&[row]);
    let _ = writeln!(text, "correct/wrong histogram overlap: {:.4}", hist.overlap());
    std::fs::write(c.out.join("diagnosis.txt"), &text).map_err(|e| crate::Error::io(c.out.join("diagnosis.txt"), e))?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Aggregate CSV files.
    #[arg(long, num_args = 1..)]
    inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportRun {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

fn report(a: ReportArgs) -> CliResult<()> {
    let mut c: ReportRun = load_config(a.config.as_deref())?;
    override_with!(c, a; inputs, out);
    if c.inputs.is_empty() {
        return usage("missing --inputs");
    }
    require_path(&c.out, "--out")?;
    let mut rows = Vec::new();
    for p in &c.inputs {
        rows.extend(read_aggregate_csv(p)?);
    }
    create_dir(&c.out)?;
    echo_config(&c, &c.out.join("config.toml"))?;
    let text = render_tables(&rows);
    std::fs::write(c.out.join("report.txt"), &text).map_err(|e| crate::Error::io(c.out.join("report.txt"), e))?;
    print!("{text}");
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).chain([header[j].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// PCK by method and dataset, the error taxonomy per row, and, for methods
/// named `name@train_set`, train-set by test-set PCK grids.
pub fn render_tables(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let lookup = |m: &str, d: &str| rows.iter().rev().find(|r| r.method == m && r.dataset == d);

    let _ = writeln!(out, "PCK (%)");
    let header: Vec<String> = std::iter::once("method".to_string()).chain(datasets.iter().map(|d| d.to_string())).collect();
    let body: Vec<Vec<String>> = methods
        .iter()
        .map(|m| std::iter::once(m.to_string()).chain(datasets.iter().map(|d| pct(lookup(m, d).and_then(|r| r.pck)))).collect())
        .collect();
    out.push_str(&aligned(&header, &body));

    let _ = writeln!(out, "\nError taxonomy (%)");
    let header: Vec<String> = [
        "method", "dataset", "alpha", "PCK", "PCK+", "miss", "jitter", "swap", "x.correct", "x.swap", "x.jitter", "x.miss", "M",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.dataset.clone(),
                format!("{}", r.alpha),
                pct(r.pck),
                pct(r.pck_dagger),
                pct(r.raw_miss),
                pct(r.raw_jitter),
                pct(r.raw_swap),
                pct(r.excl_correct),
                pct(r.excl_swap),
                pct(r.excl_jitter),
                pct(r.excl_miss),
                r.m.to_string(),
            ]
        })
        .collect();
    out.push_str(&aligned(&header, &body));

    let mut cross: BTreeMap<&str, BTreeMap<&str, BTreeMap<&str, Option<f64>>>> = BTreeMap::new();
    for r in rows {
        if let Some((name, trained)) = r.method.split_once('@') {
            cross.entry(name).or_default().entry(trained).or_default().insert(&r.dataset, r.pck);
        }
    }
    for (name, grid) in cross {
        let _ = writeln!(out, "\nCross-dataset PCK (%) for {name}: rows train, columns test");
        let tests: BTreeSet<&str> = grid.values().flat_map(|m| m.keys().copied()).collect();
        let header: Vec<String> = std::iter::once("train \\ test".to_string()).chain(tests.iter().map(|t| t.to_string())).collect();
        let body: Vec<Vec<String>> = grid
            .iter()
            .map(|(train, m)| std::iter::once(train.to_string()).chain(tests.iter().map(|t| pct(m.get(t).copied().flatten()))).collect())
            .collect();
        out.push_str(&aligned(&header, &body));
    }
    out
}
