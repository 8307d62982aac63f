//! The `c2d` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or integrity, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bank::HistoricalMapBank;
use crate::codec;
use crate::contrastive::ContrastiveConfig;
use crate::dataset::{self, ImageRecord, COUNTS_FILE};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::manifest::{checksum_tree, write_atomic, RunManifest, RUN_MANIFEST_FILE, RUN_MANIFEST_VERSION};
use crate::metrics::{evaluate, EvalConfig, EvalItem};
use crate::pseudo::render_pseudo_density;
use crate::synth::{gen_dataset, SceneConfig, Split};
use crate::train::{
    train, BankInit, DensityModel, OptimizerKind, PriorSource, SamplerKind, TrainConfig,
};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const BANK_DIR: &str = "bank";
pub const SNAPSHOT_DIR: &str = "bank_snapshots";
pub const PREDICTED_COUNTS_FILE: &str = "counts.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "c2d", version, about = "Density maps for crowd counting from count-only labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic crowd dataset.
    Synth(SynthArgs),
    /// Train a density model from counts.
    Train(TrainArgs),
    /// Predict density maps and counts for images.
    Predict(PredictArgs),
    /// Compare predicted density maps with ground truth.
    Eval(EvalArgs),
    /// Inspect map bank snapshots.
    Bank(BankArgs),
    /// Re-run a command from its run manifest and compare artifacts.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountRange(pub usize, pub usize);

impl FromStr for CountRange {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
        let a: usize = a.trim().parse().map_err(|e| format!("bad minimum: {e}"))?;
        let b: usize = b.trim().parse().map_err(|e| format!("bad maximum: {e}"))?;
        if a > b {
            return Err(format!("inverted range {a}:{b}"));
        }
        Ok(CountRange(a, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions(pub [f64; 3]);

impl FromStr for SplitFractions {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err("expected TRAIN:VAL:TEST".into());
        }
        let mut f = [0.0f64; 3];
        for (x, p) in f.iter_mut().zip(&parts) {
            *x = p.trim().parse().map_err(|e| format!("bad fraction {p:?}: {e}"))?;
            if !(*x >= 0.0 && x.is_finite()) {
                return Err(format!("fraction {p} must be >= 0"));
            }
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("fractions must sum to 1".into());
        }
        Ok(SplitFractions(f))
    }
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "5:50")]
    #[serde(skip)]
    pub counts: CountRange,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.8:0.1:0.1")]
    #[serde(skip)]
    pub split: SplitFractions,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub background: Option<f32>,
    /// Also write 16-bit PGM previews of every image.
    #[arg(long)]
    pub previews: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn scene_config(&self) -> SceneConfig {
        let d = SceneConfig::default();
        SceneConfig {
            size: self.size,
            count_min: self.counts.0,
            count_max: self.counts.1,
            cluster_count: self.clusters.unwrap_or(d.cluster_count),
            cluster_spread: self.spread.unwrap_or(d.cluster_spread),
            background: self.background.unwrap_or(d.background),
            ..d
        }
    }
}

/// Unset options take the library defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (with `train/`) or a single split directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    #[arg(long, value_enum)]
    pub bank_init: Option<BankInit>,
    /// Directory of `<image>.c2dg` or `<image>.pgm` saliency maps.
    #[arg(long)]
    pub external_saliency: Option<PathBuf>,
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a bank snapshot every E epochs.
    #[arg(long, value_parser = positive_usize)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub render_sigma: Option<f64>,
    #[arg(long)]
    pub prior_blur: Option<f64>,
    #[arg(long)]
    pub density_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub prior_source: Option<PriorSource>,
    #[arg(long)]
    pub no_contrastive: bool,
    #[arg(long)]
    pub contrastive_threshold: Option<f32>,
    #[arg(long)]
    pub contrastive_patch: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    /// Count the positive pair in the InfoNCE denominator.
    #[arg(long)]
    pub positive_in_denominator: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let dc = d.contrastive.clone();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            alpha: self.alpha.unwrap_or(d.alpha),
            tau: self.tau.unwrap_or(d.tau),
            render_sigma: self.render_sigma.unwrap_or(d.render_sigma),
            prior_blur_sigma: self.prior_blur.unwrap_or(d.prior_blur_sigma),
            density_scale: self.density_scale.unwrap_or(d.density_scale),
            contrastive: ContrastiveConfig {
                threshold: self.contrastive_threshold.unwrap_or(dc.threshold),
                patch: self.contrastive_patch.unwrap_or(dc.patch),
                negatives: self.negatives.unwrap_or(dc.negatives),
                max_batches: self.max_pairs.unwrap_or(dc.max_batches),
                include_positive_in_denominator: self.positive_in_denominator
                    || dc.include_positive_in_denominator,
            },
            contrastive_enabled: !self.no_contrastive && d.contrastive_enabled,
            seed: self.seed.unwrap_or(d.seed),
            labeled_fraction: self.labeled_fraction.unwrap_or(d.labeled_fraction),
            bank_init: self.bank_init.unwrap_or(if self.external_saliency.is_some() {
                BankInit::External
            } else {
                d.bank_init
            }),
            external_saliency: self.external_saliency.clone(),
            sampler: self.sampler.unwrap_or(d.sampler),
            prior_source: self.prior_source.unwrap_or(d.prior_source),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Directory holding the checkpoint and input normalization.
    #[arg(long)]
    pub model: PathBuf,
    /// An image file, a directory of images, or a split directory.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of predicted `<name>.c2dg` density maps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth split directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_parser = positive_usize)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub match_radius: Option<f64>,
    /// Peak threshold as a fraction of each map's maximum.
    #[arg(long)]
    pub min_density: Option<f32>,
    #[arg(long)]
    pub nms_radius: Option<usize>,
    /// Kernel width for ground truth rendered from points.
    #[arg(long, default_value_t = 0.5)]
    pub render_sigma: f64,
    /// Write `report.json` here instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        EvalConfig {
            tile: self.tile.or(d.tile),
            match_radius: self.match_radius.unwrap_or(d.match_radius),
            min_density: self.min_density.unwrap_or(d.min_density),
            nms_radius: self.nms_radius.unwrap_or(d.nms_radius),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BankArgs {
    /// A bank directory, or a directory of bank snapshots.
    #[arg(long)]
    pub bank: PathBuf,
    /// Comma-separated entry indices; all entries when omitted.
    #[arg(long, value_delimiter = ',')]
    pub entries: Option<Vec<usize>>,
    /// Export each chosen (entry, snapshot) as PGM into this directory.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Export sampling priors blurred by this sigma instead of raw entries.
    #[arg(long)]
    pub prior_blur: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh output directory for the rerun.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Errors are reported on stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let recorded = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, recorded) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                Error::Param { name, reason } => {
                    eprintln!("error: invalid value for --{}: {reason}", name.replace('_', "-"))
                }
                other => eprintln!("error: {other}"),
            }
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, args: Vec<String>) -> Result<()> {
    let args = absolutize_args(&args)?;
    match cmd {
        Command::Synth(a) => cmd_synth(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Predict(a) => cmd_predict(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Bank(a) => cmd_bank(&a, args),
        Command::Replay(a) => cmd_replay(&a),
    }
}

const PATH_FLAGS: &[&str] = &[
    "--out",
    "--data",
    "--model",
    "--images",
    "--pred",
    "--gt",
    "--bank",
    "--export",
    "--external-saliency",
    "--manifest",
];

/// Makes the values of path-valued flags absolute so a manifest can be
/// replayed from any working directory.
pub fn absolutize_args(args: &[String]) -> Result<Vec<String>> {
    let cwd = std::env::current_dir().map_err(Error::io("."))?;
    let abs = |v: &str| cwd.join(v).to_string_lossy().into_owned();
    let mut out = Vec::with_capacity(args.len());
    let mut next_is_path = false;
    for a in args {
        if next_is_path {
            out.push(abs(a));
            next_is_path = false;
        } else if let Some((flag, v)) = a.split_once('=').filter(|(f, _)| PATH_FLAGS.contains(f)) {
            out.push(format!("{flag}={}", abs(v)));
        } else {
            next_is_path = PATH_FLAGS.contains(&a.as_str());
            out.push(a.clone());
        }
    }
    Ok(out)
}

/// Worker count from `C2D_THREADS`, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var("C2D_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::param("C2D_THREADS", format!("expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn finish(
    command: &str,
    args: Vec<String>,
    config: impl Serialize,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    out: &Path,
    started: Instant,
) -> Result<()> {
    let m = RunManifest {
        format_version: RUN_MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        args,
        config: serde_json::to_value(config).expect("config serializes"),
        seed,
        inputs,
        output_dir: out.to_path_buf(),
        artifacts: checksum_tree(out, &[RUN_MANIFEST_FILE])?,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    m.save_atomic(&out.join(RUN_MANIFEST_FILE))
}

pub fn cmd_synth(a: &SynthArgs, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let cfg = a.scene_config();
    let data = gen_dataset(a.seed, a.n, &cfg, a.split.0)?;
    create_dir(&a.out)?;
    dataset::write_dataset(&a.out, &data, a.previews)?;
    eprintln!(
        "wrote {} scenes to {} ({} train, {} val, {} test)",
        a.n,
        a.out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    #[derive(Serialize)]
    struct Snapshot<'a> {
        scene: &'a SceneConfig,
        n: usize,
        split: [f64; 3],
        previews: bool,
    }
    let snap = Snapshot {
        scene: &cfg,
        n: a.n,
        split: a.split.0,
        previews: a.previews,
    };
    finish("synth", args, snap, Some(a.seed), vec![], &a.out, started)
}

/// The training split of a dataset root, or the directory itself when it
/// already is a split.
fn training_dirs(data: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    let train_dir = dataset::split_dir(data, Split::Train);
    if train_dir.join(COUNTS_FILE).is_file() {
        let val = dataset::split_dir(data, Split::Val);
        Ok((train_dir, val.join(COUNTS_FILE).is_file().then_some(val)))
    } else if data.join(COUNTS_FILE).is_file() {
        Ok((data.to_path_buf(), None))
    } else {
        Err(Error::integrity(data, "no train/counts.csv or counts.csv found"))
    }
}

pub fn cmd_train(a: &TrainArgs, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let cfg = a.config();
    cfg.validate()?;
    let (train_dir, val_dir) = training_dirs(&a.data)?;
    let data = dataset::load_split_dir(&train_dir)?;
    if data.is_empty() {
        return Err(Error::integrity(train_dir.join(COUNTS_FILE), "no training images"));
    }
    let val = match &val_dir {
        Some(d) => dataset::load_split_dir(d)?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let mut log = String::new();
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let trainer = train(cfg.clone(), &data, &val, |t, rec| {
        if let Some(e) = a.snapshot_every {
            if (rec.epoch + 1) % e == 0 {
                let rel = format!("{SNAPSHOT_DIR}/epoch_{:04}", rec.epoch + 1);
                t.bank.save(&a.out.join(&rel))?;
                rec.bank_snapshot = Some(rel);
            }
        }
        eprintln!(
            "epoch {:>3}  map {:.4e}  contrastive {:.4}  train mae {:.3}{}",
            rec.epoch,
            rec.map_loss,
            rec.contrastive_loss,
            rec.train_mae,
            rec.val_mae.map(|v| format!("  val mae {v:.3}")).unwrap_or_default()
        );
        log.push_str(&serde_json::to_string(rec).expect("record serializes"));
        log.push('\n');
        write_atomic(&log_path, log.as_bytes())
    })?;
    if cfg.epochs == 0 {
        write_atomic(&log_path, b"")?;
    }
    trainer.model().save(&a.out)?;
    trainer.bank.save(&a.out.join(BANK_DIR))?;
    let mut inputs = vec![train_dir];
    inputs.extend(val_dir);
    finish("train", args, &cfg, Some(cfg.seed), inputs, &a.out, started)
}

/// Image files to predict on, sorted by name. A `.c2dg` file hides a
/// `.pgm` preview of the same name.
pub fn list_images(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(stem, path.to_path_buf())]);
    }
    let dir = if path.join("images").is_dir() { path.join("images") } else { path.to_path_buf() };
    let mut found = std::collections::BTreeMap::new();
    for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
        let p = entry.map_err(Error::io(&dir))?.path();
        let ext = p.extension().and_then(|e| e.to_str());
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
        match (ext, stem) {
            (Some("c2dg"), Some(s)) => {
                found.insert(s, p);
            }
            (Some("pgm"), Some(s)) => {
                found.entry(s).or_insert(p);
            }
            _ => {}
        }
    }
    if found.is_empty() {
        return Err(Error::integrity(&dir, "no .c2dg or .pgm images"));
    }
    Ok(found.into_iter().collect())
}

pub fn cmd_predict(a: &PredictArgs, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let model = DensityModel::load(&a.model)?;
    let images = list_images(&a.images)?;
    let threads = thread_count()?;
    let preds = par_map(&images, threads, |(_, path)| {
        let img = codec::load_raster(path)?;
        model.predict(&img).map_err(|e| match e {
            Error::Shape { expected, actual } => Error::integrity(path, format!("expected {expected}, got {actual}")),
            other => other,
        })
    })?;
    create_dir(&a.out)?;
    let counts_path = a.out.join(PREDICTED_COUNTS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "count"]).expect("in-memory write");
    for ((name, path), pred) in images.iter().zip(&preds) {
        codec::save_grid(pred, &a.out.join(format!("{name}.c2dg")))?;
        codec::save_pgm16(pred, &a.out.join(format!("{name}.pgm")))?;
        let count = pred.integrate();
        w.write_record([path.to_string_lossy().as_ref(), &format!("{count:.6}")]).expect("in-memory write");
        println!("{name}\t{count:.3}");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_atomic(&counts_path, &bytes)?;
    let inputs = vec![a.model.clone(), a.images.clone()];
    finish("predict", args, a, None, inputs, &a.out, started)
}

fn ground_truth_density(r: &ImageRecord, sigma: f64) -> Result<Grid2D> {
    match (&r.density, &r.points) {
        (Some(d), _) => Ok(d.clone()),
        (None, Some(p)) => render_pseudo_density(p, sigma, r.image.width(), r.image.height()),
        (None, None) => Err(Error::param("gt", format!("{} has neither a density map nor points", r.name))),
    }
}

pub fn cmd_eval(a: &EvalArgs, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let cfg = a.config();
    let gt = dataset::load_split_dir(&a.gt)?;
    let mut pred_names = std::collections::BTreeSet::new();
    for entry in fs::read_dir(&a.pred).map_err(Error::io(&a.pred))? {
        let p = entry.map_err(Error::io(&a.pred))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("c2dg") {
            pred_names.insert(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    let gt_names: std::collections::BTreeSet<String> = gt.iter().map(|r| r.name.clone()).collect();
    let no_pred: Vec<_> = gt_names.difference(&pred_names).cloned().collect();
    let no_gt: Vec<_> = pred_names.difference(&gt_names).cloned().collect();
    if !no_pred.is_empty() || !no_gt.is_empty() {
        let mut reason = String::from("unmatched filenames");
        if !no_pred.is_empty() {
            reason += &format!("; no prediction for: {}", no_pred.join(", "));
        }
        if !no_gt.is_empty() {
            reason += &format!("; no ground truth for: {}", no_gt.join(", "));
        }
        return Err(Error::integrity(&a.pred, reason));
    }

    let threads = thread_count()?;
    let pairs = par_map(&gt, threads, |r| {
        let path = a.pred.join(format!("{}.c2dg", r.name));
        let pred = codec::load_grid(&path)?;
        let den = ground_truth_density(r, a.render_sigma)?;
        pred.check_same_shape(&den).map_err(|e| Error::integrity(&path, e.to_string()))?;
        Ok((pred, den))
    })?;
    let items: Vec<EvalItem> = gt
        .iter()
        .zip(&pairs)
        .map(|(r, (p, d))| EvalItem {
            pred: p,
            gt_density: d,
            gt_count: r.count.0 as f64,
            gt_points: r.points.as_ref(),
        })
        .collect();
    let report = evaluate(&items, &cfg)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    print!("{}", report.to_table());
    match &a.out {
        Some(out) => {
            create_dir(out)?;
            write_atomic(&out.join(REPORT_FILE), json.as_bytes())?;
            let inputs = vec![a.pred.clone(), a.gt.clone()];
            finish("eval", args, a, None, inputs, out, started)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

/// Bank directories under `path`: the path itself if it is a bank, else
/// its bank subdirectories sorted by name.
pub fn bank_snapshots(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let label = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.join(crate::bank::MANIFEST_FILE).is_file() {
        return Ok(vec![(label(path), path.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(Error::io(path))? {
        let p = entry.map_err(Error::io(path))?.path();
        if p.join(crate::bank::MANIFEST_FILE).is_file() {
            out.push((label(&p), p));
        }
    }
    if out.is_empty() {
        return Err(Error::integrity(path, "not a bank directory and holds no bank snapshots"));
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryStats {
    pub mass: f64,
    pub max: f32,
    pub support: usize,
}

pub fn entry_stats(g: &Grid2D) -> EntryStats {
    EntryStats {
        mass: g.integrate(),
        max: if g.is_empty() { 0.0 } else { g.max() },
        support: g.values().iter().filter(|&&x| x > 0.0).count(),
    }
}

pub fn cmd_bank(a: &BankArgs, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let snaps = bank_snapshots(&a.bank)?;
    if let Some(e) = &a.export {
        create_dir(e)?;
    }
    println!("snapshot\tentry\tmass\tmax\tsupport");
    for (label, dir) in &snaps {
        let bank = HistoricalMapBank::load(dir)?;
        let chosen: Vec<usize> = match &a.entries {
            Some(v) => v.clone(),
            None => (0..bank.len()).collect(),
        };
        for &i in &chosen {
            if i >= bank.len() {
                return Err(Error::param(
                    "entries",
                    format!("entry {i} does not exist in {} ({} entries)", dir.display(), bank.len()),
                ));
            }
            let s = entry_stats(bank.entry(i)?);
            println!("{label}\t{i}\t{:.6}\t{:.6}\t{}", s.mass, s.max, s.support);
            if let Some(e) = &a.export {
                let map = match a.prior_blur {
                    Some(sigma) => bank.make_prior(i, sigma)?.map().clone(),
                    None => bank.entry(i)?.clone(),
                };
                codec::save_pgm16(&map, &e.join(format!("entry_{i:06}_{label}.pgm")))?;
            }
        }
    }
    match &a.export {
        Some(e) => finish("bank", args, a, None, vec![a.bank.clone()], e, started),
        None => Ok(()),
    }
}

/// Replaces the `--out` value of recorded arguments.
fn with_out(args: &[String], out: &Path) -> Vec<String> {
    let out = out.to_string_lossy().into_owned();
    let mut v = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            v.push(out.clone());
            skip = false;
        } else if a.starts_with("--out=") {
            v.push(format!("--out={out}"));
        } else {
            skip = a == "--out";
            v.push(a.clone());
        }
    }
    v
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let original = RunManifest::load(&a.manifest)?;
    if original.command == "replay" {
        return Err(Error::integrity(&a.manifest, "cannot replay a replay"));
    }
    let out = std::env::current_dir().map_err(Error::io("."))?.join(&a.out);
    if out == original.output_dir {
        return Err(Error::param("out", "must differ from the recorded output directory"));
    }
    let args = with_out(&original.args, &out);
    let argv = std::iter::once("c2d".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::integrity(&a.manifest, format!("recorded arguments: {e}")))?;
    dispatch(cli.command, args)?;
    let rerun = RunManifest::load(&out.join(RUN_MANIFEST_FILE))?;
    let diff = original.diff_artifacts(&rerun);
    if !diff.is_empty() {
        return Err(Error::integrity(&out, format!("artifacts differ from the recorded run: {}", diff.join(", "))));
    }
    eprintln!("reproduced {} artifacts", rerun.artifacts.len());
    Ok(())
}
