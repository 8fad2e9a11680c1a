mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avloc::data::{
    apply_split, duration_histogram, generate_synthetic, load_and_validate, load_features, npmi_pairs, overlap_rate,
    repetition_rates, stratified_split, write_histogram_csv, write_npmi_csv, DatasetIndex, PairMode, Subset,
};
use avloc::eval::mean_ap;
use avloc::inference::Predictions;
use avloc::model::Model;
use avloc::numerics::check_all_primitives;
use avloc::training::{end_to_end_grad_check, fit, load_samples, predict_samples};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs: exit 2.
    Usage(String),
    /// The command ran and found a problem: exit 1.
    Failed(String),
}

impl From<avloc::error::Error> for CliError {
    fn from(e: avloc::error::Error) -> Self {
        match e {
            avloc::error::Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "avloc", version, about = "Dense audio-visual event localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for generation, splitting, training and gradient sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Treat predictions for unknown videos as errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Allow replacing existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (annotations and features) to --out.
    Generate,
    /// Assign videos to train/val/test and rewrite the annotation file.
    Split,
    /// Write co-occurrence, overlap and duration tables to --out.
    Stats,
    /// Train a model into the run directory --out.
    Train,
    /// Predict the evaluation subset with a trained checkpoint.
    Infer,
    /// Score predictions against the annotations.
    Eval,
    /// Check annotations and features for consistency.
    Validate,
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Coordinates sampled per parameter of the tiny model; all by default.
        #[arg(long)]
        coords: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.synthetic.seed = seed;
        cfg.split.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.train.threads = threads;
    }
    match &cli.command {
        Command::Generate => generate(cli, &cfg),
        Command::Split => split(&cfg),
        Command::Stats => stats(cli, &cfg),
        Command::Train => train(cli, &cfg),
        Command::Infer => infer(cli, &cfg),
        Command::Eval => evaluate(cli, &cfg),
        Command::Validate => validate(&cfg),
        Command::Gradcheck { coords } => gradcheck(cli, &cfg, *coords),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    cli.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

/// Creates `dir` and refuses to replace any of `files` without --overwrite.
fn prepare_outputs(cli: &Cli, dir: &Path, files: &[&str]) -> Result<(), CliError> {
    if !cli.overwrite {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.join(f).display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))
}

fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_index(cfg: &RunConfig) -> Result<DatasetIndex, CliError> {
    existing(&cfg.paths.annotations, "paths.annotations")?;
    load_and_validate(&cfg.paths.annotations).map_err(|e| CliError::Failed(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn generate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cli)?;
    prepare_outputs(cli, dir, &[avloc::data::ANNOTATION_FILE, "config.json"])?;
    let corpus = generate_synthetic(&cfg.synthetic).map_err(|e| CliError::Usage(e.to_string()))?;
    corpus.write(dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let events: usize = corpus.index.videos.values().map(|v| v.events.len()).sum();
    let distractors: usize = corpus.distractors.values().map(Vec::len).sum();
    println!(
        "wrote {} videos, {events} events, {distractors} distractors to {}",
        corpus.index.len(),
        dir.display()
    );
    Ok(())
}

fn split(cfg: &RunConfig) -> Result<(), CliError> {
    let mut index = load_index(cfg)?;
    let s = &cfg.split;
    let assignment = stratified_split(&index, (s.train, s.val, s.test), s.seed)?;
    apply_split(&mut index, &assignment);
    index.save(&cfg.paths.annotations)?;
    for subset in [Subset::Train, Subset::Val, Subset::Test] {
        println!("{}: {}", subset.as_str(), index.subset(subset).count());
    }
    Ok(())
}

fn stats(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cli)?;
    let files = ["npmi_simultaneous.csv", "npmi_consecutive.csv", "repetition.csv", "overlap.csv", "durations.csv"];
    prepare_outputs(cli, dir, &files)?;
    let index = load_index(cfg)?;
    let gap = cfg.stats.gap_s;

    let sim = npmi_pairs(&index, PairMode::Simultaneous, gap)?;
    write_npmi_csv(&sim, create(&dir.join(files[0]))?)?;
    let cons = npmi_pairs(&index, PairMode::Consecutive, gap)?;
    write_npmi_csv(&cons, create(&dir.join(files[1]))?)?;

    let csv_err = |e: csv::Error| CliError::Failed(e.to_string());
    let mut w = csv::Writer::from_writer(create(&dir.join(files[2]))?);
    w.write_record(["class", "name", "pairs", "instances", "rate"]).map_err(csv_err)?;
    for r in repetition_rates(&index, gap) {
        let name = index.taxonomy.name(r.class).unwrap_or_default();
        w.write_record([r.class.to_string(), name.into(), r.pairs.to_string(), r.instances.to_string(), format!("{:.6}", r.rate)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Failed(e.to_string()))?;

    let mut w = csv::Writer::from_writer(create(&dir.join(files[3]))?);
    w.write_record(["video_id", "events", "overlap_rate"]).map_err(csv_err)?;
    for v in index.videos.values().filter(|v| !v.events.is_empty()) {
        let rate = overlap_rate(v)?;
        w.write_record([v.id.clone(), v.events.len().to_string(), format!("{rate:.6}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Failed(e.to_string()))?;

    write_histogram_csv(&duration_histogram(&index, cfg.stats.bin_s)?, create(&dir.join(files[4]))?)?;
    if let Some(top) = sim.pairs.first() {
        println!("top simultaneous pair: {} + {} (NPMI {:.3})", top.class_a, top.class_b, top.npmi);
    }
    println!("wrote statistics to {}", dir.display());
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cli)?;
    prepare_outputs(cli, dir, &["config.json", "checkpoint.davt", "metrics.jsonl"])?;
    cfg.model.validate()?;
    cfg.train.validate(cfg.model.pyramid_levels)?;
    cfg.decode.validate()?;
    let index = load_index(cfg)?;
    existing(&cfg.paths.features, "paths.features")?;
    let max_len = cfg.model.max_len;
    let train = load_samples(&index, &cfg.paths.features, Subset::Train, max_len)?;
    let val = load_samples(&index, &cfg.paths.features, Subset::Val, max_len)?;
    if train.is_empty() {
        return Err(CliError::Usage("the annotation file has no training videos; run `split` first".into()));
    }
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let _ = std::fs::remove_file(dir.join("metrics.jsonl"));
    let outcome = fit(&cfg.model, &cfg.train, &cfg.decode, &train, &val, Some(dir))?;
    println!(
        "trained {} epochs on {} videos; best epoch {}; checkpoint {}",
        outcome.history.len(),
        train.len(),
        outcome.best_epoch,
        dir.join("checkpoint.davt").display()
    );
    Ok(())
}

fn infer(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cli)?;
    let checkpoint = cfg.paths.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.davt"));
    existing(&checkpoint, "checkpoint")?;
    prepare_outputs(cli, dir, &["predictions.json"])?;
    let model = Model::load(&checkpoint)?;
    cfg.decode.validate()?;
    let index = load_index(cfg)?;
    existing(&cfg.paths.features, "paths.features")?;
    let samples = load_samples(&index, &cfg.paths.features, cfg.eval.subset, model.config.max_len)?;
    let preds = Predictions::from_candidates(predict_samples(&model, &samples, &cfg.decode)?);
    preds.save(&dir.join("predictions.json"))?;
    println!(
        "predicted {} {} videos; {} detections",
        samples.len(),
        cfg.eval.subset.as_str(),
        preds.results.values().map(Vec::len).sum::<usize>()
    );
    Ok(())
}

fn evaluate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cli)?;
    let path = cfg.paths.predictions.clone().unwrap_or_else(|| dir.join("predictions.json"));
    existing(&path, "predictions")?;
    prepare_outputs(cli, dir, &["report.json", "report.csv"])?;
    let index = load_index(cfg)?;
    let preds = Predictions::load(&path)?;
    let report = mean_ap(&preds, &index, Some(cfg.eval.subset), &cfg.eval.thresholds, cli.strict)?;
    report.save(&dir.join("report.json"))?;
    for (t, m) in &report.map {
        println!("mAP@{t}: {m:.4}");
    }
    println!("avg mAP: {:.4}", report.avg_map);
    Ok(())
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let index = load_index(cfg)?;
    existing(&cfg.paths.features, "paths.features")?;
    let mut problems = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for v in index.videos.values() {
        let streams = match load_features(&v.id, &cfg.paths.features) {
            Ok(s) => s,
            Err(e) => {
                problems.push(e.to_string());
                continue;
            }
        };
        let d = (streams.audio_dim(), streams.visual_dim());
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                problems.push(format!("video `{}`: feature dims {d:?} differ from {first:?}", v.id))
            }
            _ => {}
        }
        let covered = streams.offset_s as f64 + streams.len() as f64 * streams.hop_s as f64;
        if (covered - v.duration_s).abs() > streams.hop_s as f64 {
            problems.push(format!(
                "video `{}`: features cover {covered:.3} s but duration_s is {:.3}",
                v.id, v.duration_s
            ));
        }
        if streams.len() > cfg.model.max_len {
            problems.push(format!(
                "video `{}`: {} steps exceed model.max_len {}",
                v.id,
                streams.len(),
                cfg.model.max_len
            ));
        }
    }
    if let Some((a, v)) = dims {
        if (a, v) != (cfg.model.audio_dim, cfg.model.visual_dim) {
            problems.push(format!(
                "feature dims ({a}, {v}) differ from model.audio_dim/visual_dim ({}, {})",
                cfg.model.audio_dim, cfg.model.visual_dim
            ));
        }
    }
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() {
        println!("{} videos, {} classes: ok", index.len(), index.num_classes());
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} problem(s) found", problems.len())))
    }
}

fn gradcheck(cli: &Cli, cfg: &RunConfig, coords: Option<usize>) -> Result<(), CliError> {
    let seed = cfg.train.seed;
    let mut entries = Vec::new();
    for (name, report) in check_all_primitives(GRADCHECK_STEP, seed)? {
        println!("{name:<24} {:.3e}", report.max_rel_error);
        entries.push((name, report));
    }
    let model = end_to_end_grad_check(GRADCHECK_STEP, coords, seed)?;
    println!("{:<24} {:.3e} ({} coordinates)", "end-to-end", model.max_rel_error, model.checked);
    entries.push(("end-to-end".into(), model));
    let worst = entries.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    if let Some(dir) = &cli.out {
        prepare_outputs(cli, dir, &["gradcheck.json"])?;
        let json: serde_json::Map<String, serde_json::Value> = entries
            .iter()
            .map(|(n, r)| (n.clone(), serde_json::to_value(r).expect("report serializes")))
            .collect();
        write_text(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    }
    if worst < GRADCHECK_TOLERANCE {
        println!("max relative error {worst:.3e} < {GRADCHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(CliError::Failed(format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}
