//! Command-line entry point. Exit status 0 on success, 2 on usage or
//! configuration errors, 1 on runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::annotator::annotate_pair;
use crate::config::RunConfig;
use crate::corruption::{build_corrupted_set, robustness_eval};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_report, predict_split, PredictionSource};
use crate::formats::{load_checkpoint, save_checkpoint, save_pseudo_labels};
use crate::manifest::Split;
use crate::pairs::{enumerate_pairs, labeled_pairs, sample_unlabeled_batch, with_labeled_fraction};
use crate::synthetic::generate_dataset;
use crate::trainer::{iterative_train, save_metrics, Ablation, Checkpoint, TrainConfig, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "corrlab", version, about = "Self-training for dense correspondence on synthetic benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the data root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate all and labeled training pairs per class.
    MinePairs {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised warm-up followed by the configured self-training generations.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-label a class-balanced batch of unlabeled pairs with a teacher.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PCK report of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the corrupted test set.
    Corrupt {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on every corruption slice.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corrupted-set manifest (defaults to `<output_root>/corrupted/manifest.json`).
        #[arg(long)]
        corrupted: Option<PathBuf>,
    },
    /// Train once per value of one parameter and tabulate final PCK.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run the four component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Tau,
    Alpha,
    LabeledFraction,
}

impl SweepParam {
    fn as_str(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Alpha => "alpha",
            SweepParam::LabeledFraction => "labeled_fraction",
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::MinePairs { common }
            | Command::Train { common }
            | Command::Annotate { common, .. }
            | Command::Eval { common, .. }
            | Command::Corrupt { common }
            | Command::Robustness { common, .. }
            | Command::Sweep { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(p) = &common.data_root {
        overrides.push(format!("data_root={}", toml_string(p)));
    }
    if let Some(p) = &common.output_root {
        overrides.push(format!("output_root={}", toml_string(p)));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    RunConfig::layered(common.config.as_deref(), &overrides)
}

/// Parses and runs; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    let cfg = resolve_config(cmd.common())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| dispatch(cmd, &cfg))
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Synth { out, .. } => cmd_synth(cfg, out.as_deref().unwrap_or(&cfg.data_root)),
        Command::MinePairs { .. } => cmd_mine_pairs(cfg),
        Command::Train { .. } => cmd_train(cfg),
        Command::Annotate { checkpoint, .. } => cmd_annotate(cfg, checkpoint),
        Command::Eval { checkpoint, .. } => cmd_eval(cfg, checkpoint),
        Command::Corrupt { .. } => cmd_corrupt(cfg),
        Command::Robustness { checkpoint, corrupted, .. } => {
            let default = cfg.output_root.join("corrupted").join("manifest.json");
            cmd_robustness(cfg, checkpoint, corrupted.as_deref().unwrap_or(&default))
        }
        Command::Sweep { param, values, .. } => cmd_sweep(cfg, *param, values.as_deref()),
        Command::Ablate { .. } => cmd_ablate(cfg),
    }
}

fn out_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_root.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.write_snapshot(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

/// Loads the dataset under the data root with the configured labeled
/// fraction applied.
pub fn load_training_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.manifest_path())?;
    with_fraction(&ds, cfg.labeled_fraction, cfg.train.seed)
}

fn with_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if fraction >= 1.0 {
        return Ok(ds.clone());
    }
    ds.with_manifest(with_labeled_fraction(&ds.manifest, fraction, seed)?)
}

fn checkpoint_location(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}

fn load_ck(path: &Path) -> Result<Checkpoint> {
    let (dir, stem) = checkpoint_location(path)?;
    load_checkpoint(&dir, &stem)
}

/// Test-split PCK of a checkpoint at `alpha`.
pub fn test_pck(ck: &Checkpoint, ds: &Dataset, cfg: &RunConfig, alpha: f64) -> Result<f64> {
    Ok(evaluate_report(
        PredictionSource::Model { params: &ck.params, dataset: ds },
        &ds.manifest,
        Split::Test,
        &[alpha],
        cfg.eval.norm,
    )?
    .primary_pck())
}

#[derive(Serialize)]
struct TrainSummary {
    val_series: Vec<f64>,
    test_pck: f64,
    alpha: f64,
    skipped: usize,
    final_params_sha256: String,
}

fn save_training(out: &TrainOutcome, dir: &Path, test: f64, alpha: f64) -> Result<()> {
    for (g, ck) in out.checkpoints.iter().enumerate() {
        save_checkpoint(ck, dir, &format!("gen{g}"))?;
    }
    save_checkpoint(out.final_checkpoint(), dir, "final")?;
    save_metrics(&out.metrics, &dir.join("metrics.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            val_series: out.val_series(),
            test_pck: test,
            alpha,
            skipped: out.skipped,
            final_params_sha256: out.final_checkpoint().params_hash(),
        },
    )
}

fn train_and_score(train: &TrainConfig, ds: &Dataset, cfg: &RunConfig) -> Result<(TrainOutcome, f64)> {
    let out = iterative_train(train, ds)?;
    let pck = test_pck(out.final_checkpoint(), ds, cfg, cfg.eval.alphas[0])?;
    Ok((out, pck))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let gen = generate_dataset(&cfg.synth)?;
    gen.dataset.save(out, "manifest.json")?;
    gen.oracle.save(&out.join("oracle.json"))?;
    cfg.write_snapshot(out)?;
    let hash = gen.dataset.content_hash();
    std::fs::write(out.join("dataset.sha256"), format!("{hash}\n")).map_err(|e| Error::io(out, e))?;
    println!("dataset {} images {} pairs {} sha256 {hash}", out.display(), gen.dataset.images().len(), gen.dataset.manifest.pairs.len());
    Ok(())
}

fn cmd_mine_pairs(cfg: &RunConfig) -> Result<()> {
    let ds = load_training_dataset(cfg)?;
    let m = &ds.manifest;
    let dir = out_dir(cfg, "pairs")?;
    let mut all = Vec::new();
    let path = dir.join("pair_counts.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(["class", "train_images", "pairs", "labeled"]).map_err(err)?;
    for class in m.active_classes() {
        let set = enumerate_pairs(m, class)?;
        let n = m.images.iter().filter(|e| &e.class == class && e.split == Split::Train).count();
        let labeled = set.iter().filter(|p| p.labeled).count();
        w.write_record([class.clone(), n.to_string(), set.len().to_string(), labeled.to_string()]).map_err(err)?;
        all.extend(set.pairs);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    crate::pairs::PairSet { pairs: all.clone() }.save_csv(&dir.join("all_pairs.csv"))?;
    labeled_pairs(m).save_csv(&dir.join("labeled_pairs.csv"))?;
    println!("{} pairs, {} labeled -> {}", all.len(), all.iter().filter(|p| p.labeled).count(), dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_training_dataset(cfg)?;
    let dir = out_dir(cfg, "train")?;
    let (out, pck) = train_and_score(&cfg.train, &ds, cfg)?;
    save_training(&out, &dir, pck, cfg.eval.alphas[0])?;
    println!("val per generation {:?}; test PCK@{} = {pck:.4}", out.val_series(), cfg.eval.alphas[0]);
    Ok(())
}

fn cmd_annotate(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ds = load_training_dataset(cfg)?;
    let teacher = load_ck(checkpoint)?;
    let dir = out_dir(cfg, "labels")?;
    let batch = sample_unlabeled_batch(&ds.manifest, cfg.annotate.unlabeled_per_class, cfg.train.seed, cfg.annotate.iteration)?;
    let labels = batch
        .pairs
        .par_iter()
        .map(|p| {
            let mut l = annotate_pair(&teacher.params, ds.image(&p.src)?, ds.image(&p.tgt)?, cfg.annotate.tau)?;
            l.pair_id = p.id();
            l.teacher_generation = teacher.generation;
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    let index = save_pseudo_labels(&labels, &dir)?;
    let retained: usize = index.records.iter().map(|r| r.retained).sum();
    let cells: usize = index.records.iter().map(|r| r.cells).sum();
    println!("{} labels, {retained}/{cells} cells retained -> {}", labels.len(), dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ds = Dataset::load(&cfg.manifest_path())?;
    let ck = load_ck(checkpoint)?;
    let dir = out_dir(cfg, "eval")?;
    let preds = predict_split(&ck.params, &ds, cfg.eval.split)?;
    preds.save_csv(&dir.join("predictions.csv"))?;
    let report =
        evaluate_report(PredictionSource::Table(&preds), &ds.manifest, cfg.eval.split, &cfg.eval.alphas, cfg.eval.norm)?;
    report.save(&dir, "eval")?;
    for a in &cfg.eval.alphas {
        println!("PCK@{a} = {:.4}", report.overall_pck(*a).unwrap_or(0.0));
    }
    Ok(())
}

fn cmd_corrupt(cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::load(&cfg.manifest_path())?;
    let dir = out_dir(cfg, "corrupted")?;
    let kinds = cfg.corrupt.kinds()?;
    let m = build_corrupted_set(&ds, &dir, cfg.corrupt.seed, &kinds)?;
    println!("{} test images x {} variants -> {}", m.images.len(), kinds.len() * 5, dir.display());
    Ok(())
}

fn cmd_robustness(cfg: &RunConfig, checkpoint: &Path, corrupted: &Path) -> Result<()> {
    let ds = Dataset::load(&cfg.manifest_path())?;
    let ck = load_ck(checkpoint)?;
    let dir = out_dir(cfg, "robustness")?;
    let report = robustness_eval(&ck.params, corrupted, &ds, cfg.eval.alphas[0], cfg.eval.norm)?;
    let path = dir.join("robustness.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report.write_csv(std::io::BufWriter::new(f))?;
    println!("clean {:.4} corrupted avg {:.4} -> {}", report.clean, report.corrupted_avg(), path.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: Option<&[f64]>) -> Result<()> {
    let values: Vec<f64> = match values {
        Some(v) => v.to_vec(),
        None => match param {
            SweepParam::Tau => cfg.sweep.tau.clone(),
            SweepParam::Alpha => cfg.sweep.alpha.clone(),
            SweepParam::LabeledFraction => cfg.sweep.labeled_fraction.clone(),
        },
    };
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let name = param.as_str();
    let dir = out_dir(cfg, &format!("sweep_{name}"))?;
    let base = Dataset::load(&cfg.manifest_path())?;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    match param {
        SweepParam::Alpha => {
            if values.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
                return Err(Error::Config("alpha values must lie in (0, 1]".into()));
            }
            let ds = with_fraction(&base, cfg.labeled_fraction, cfg.train.seed)?;
            let out = iterative_train(&cfg.train, &ds)?;
            let ck = out.final_checkpoint();
            save_checkpoint(ck, &dir, "final")?;
            for &a in &values {
                rows.push((a, ck.val_pck, test_pck(ck, &ds, cfg, a)?));
            }
        }
        SweepParam::Tau | SweepParam::LabeledFraction => {
            for &v in &values {
                let mut train = cfg.train.clone();
                let mut fraction = cfg.labeled_fraction;
                if param == SweepParam::Tau {
                    train.tau = v;
                } else {
                    fraction = v;
                }
                train.validate().map_err(|e| Error::Config(e.to_string()))?;
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::Config(format!("labeled fraction {fraction} outside (0, 1]")));
                }
                let ds = with_fraction(&base, fraction, train.seed)?;
                let (out, pck) = train_and_score(&train, &ds, cfg)?;
                save_checkpoint(out.final_checkpoint(), &dir, &format!("final_{name}_{v}"))?;
                log::info!("{name}={v}: test PCK {pck:.4}");
                rows.push((v, out.final_checkpoint().val_pck, pck));
            }
        }
    }
    let path = dir.join(format!("sweep_{name}.csv"));
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut text = format!("{name},val_pck,test_pck\n");
    for (v, val, test) in &rows {
        text.push_str(&format!("{v},{val},{test}\n"));
    }
    w.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let ds = load_training_dataset(cfg)?;
    let dir = out_dir(cfg, "ablate")?;
    let mut text = String::from("ablation,val_pck,test_pck\n");
    for ab in Ablation::ALL {
        let sub = dir.join(ab.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let (out, pck) = train_and_score(&ab.apply(&cfg.train), &ds, cfg)?;
        save_training(&out, &sub, pck, cfg.eval.alphas[0])?;
        log::info!("{}: test PCK {pck:.4}", ab.as_str());
        text.push_str(&format!("{},{},{pck}\n", ab.as_str(), out.final_checkpoint().val_pck));
    }
    let path = dir.join("ablate.csv");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}
