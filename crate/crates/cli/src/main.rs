//! `linerec`: generate synthetic line datasets, train and evaluate
//! recognizers, transcribe images and run the dot-discrimination experiment.
//!
//! Failures print one line `error[E<code>-<kind>]: <message>` to stderr and
//! exit with the code: 2 usage or configuration, 3 data validation (also
//! I/O and checkpoint problems), 4 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use linerec::checkpoint;
use linerec::config::Config;
use linerec::dataset::{load_dataset, prepare_all, prepare_image, Prepared};
use linerec::experiment::{run_dots_experiment, DotsConfig};
use linerec::image::GrayImage;
use linerec::metrics::{EvalReport, Pair};
use linerec::model::{ModelConfig, Recognizer};
use linerec::synth::{generate_dataset, GlyphAtlas, SynthConfig};
use linerec::train::{predict_all, prediction_pairs, train, CheckpointTarget, TrainConfig};
use linerec::Error;

#[derive(Parser, Debug)]
#[command(name = "linerec", version, about = "Printed text-line recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labelled dataset.
    Generate(GenerateArgs),
    /// Train a recognizer on a dataset directory.
    Train(TrainArgs),
    /// Score a model (or a predictions file) against a labelled dataset.
    Eval(EvalArgs),
    /// Transcribe images with a trained model.
    Predict(PredictArgs),
    /// Train a high-resolution backbone and the low-resolution baseline on
    /// the dot-family alphabet and compare per-group accuracy.
    ExperimentDots(ExperimentArgs),
}

#[derive(Args, Debug)]
struct Shared {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads. Computation currently runs on one thread.
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
    /// Override one config value, e.g. `--set model.backbone=hrnet`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    shared: Shared,
    /// Number of lines.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Directory holding an external `atlas.tsv`; the built-in desk atlas
    /// otherwise.
    #[arg(long, value_name = "DIR")]
    atlas: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Validation dataset; the training set is monitored when absent.
    #[arg(long, value_name = "DIR")]
    val: Option<PathBuf>,
    /// Shorthand for `--set model.backbone=...` (unet, hrnet, lowres-baseline).
    #[arg(long)]
    backbone: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Labelled dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(
        long,
        value_name = "PATH",
        required_unless_present = "predictions",
        conflicts_with = "predictions"
    )]
    model: Option<PathBuf>,
    /// Precomputed `path<TAB>prediction` lines instead of a model.
    #[arg(long, value_name = "PATH")]
    predictions: Option<PathBuf>,
    /// Prefix beam search width; greedy decoding when absent.
    #[arg(long, value_name = "N")]
    beam: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// An image file or a directory of PNG images.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "N")]
    beam: Option<usize>,
    /// Reading direction; defaults to the one recorded at training time.
    #[arg(long, value_parser = ["ltr", "rtl"])]
    direction: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    shared: Shared,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (2, "usage"),
            Error::Numeric(_) => (4, "numeric"),
            Error::Checkpoint(_) => (3, "checkpoint"),
            Error::Io { .. } => (3, "io"),
            Error::Data(_) | Error::Dimension(_) | Error::Contract(_) => (3, "data"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "usage",
        message: message.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", e.render());
            let first = e.kind().to_string();
            eprintln!("error[E2-usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExperimentDots(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.replace(['\n', '\r'], " ");
            eprintln!("error[E{}-{}]: {msg}", f.code, f.kind);
            ExitCode::from(f.code)
        }
    }
}

/// File values, then `--set` overrides, then dedicated flags.
fn effective_config(shared: &Shared) -> CliResult<Config> {
    if shared.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let mut cfg = match &shared.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for o in &shared.overrides {
        cfg.apply_override(o)?;
    }
    cfg.set("train", "threads", shared.threads.to_string());
    Ok(cfg)
}

fn require_out(shared: &Shared) -> CliResult<PathBuf> {
    let out = shared
        .out
        .clone()
        .ok_or_else(|| usage("--out DIR is required"))?;
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let cfg = effective_config(&a.shared)?;
    let out = require_out(&a.shared)?;
    let seed = match a.shared.seed {
        Some(s) => s,
        None => cfg.get_or("", "seed", 0u64)?,
    };
    let synth = SynthConfig::from_config(&cfg)?;
    let atlas = match &a.atlas {
        Some(dir) => GlyphAtlas::load(dir)?,
        None => GlyphAtlas::desk(),
    };
    let summary = generate_dataset(a.n, &synth, &atlas, seed, &out)?;
    println!("generated {} lines in {}", summary.samples, out.display());
    if !summary.uncovered.is_empty() {
        let missing: String = summary.uncovered.iter().collect();
        eprintln!("warning: characters never drawn: {missing}");
    }
    Ok(())
}

fn direction_name(rtl: bool) -> &'static str {
    if rtl {
        "rtl"
    } else {
        "ltr"
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = effective_config(&a.shared)?;
    if let Some(b) = &a.backbone {
        cfg.set("model", "backbone", b.clone());
    }
    if let Some(s) = a.shared.seed {
        cfg.set("train", "seed", s.to_string());
    }
    let model_cfg = ModelConfig::from_config(&cfg)?;
    let train_cfg = TrainConfig::from_config(&cfg)?;
    let out = require_out(&a.shared)?;

    let ds = load_dataset(&a.data)?;
    let train_set = prepare_all(&ds, model_cfg.height)?;
    let val_set = match &a.val {
        Some(dir) => {
            let v = load_dataset(dir)?;
            if v.charset != ds.charset {
                return Err(Error::Data(format!(
                    "{}: validation charset differs from the training charset",
                    dir.display()
                ))
                .into());
            }
            Some(prepare_all(&v, model_cfg.height)?)
        }
        None => None,
    };

    let mut echo = cfg.clone();
    model_cfg.write_to(&mut echo);
    train_cfg.write_to(&mut echo);
    echo.set("data", "train", a.data.display().to_string());
    if let Some(v) = &a.val {
        echo.set("data", "val", v.display().to_string());
    }
    echo.set("data", "direction", direction_name(ds.rtl));
    echo.save(&out.join("config.conf"))?;

    let mut model = Recognizer::<f32>::new(model_cfg, ds.charset.classes(), train_cfg.seed)?;
    let best_path = out.join("model.ckpt");
    let target = CheckpointTarget {
        path: best_path.clone(),
        charset: &ds.charset,
        echo: echo.clone(),
    };
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.display().to_string(),
        source: e,
    })?;
    let report = train(
        &mut model,
        &train_set,
        val_set.as_deref(),
        &train_cfg,
        &mut log,
        Some(&target),
    )?;
    let _ = log.flush();

    let mut final_echo = echo;
    train_cfg.write_to(&mut final_echo);
    final_echo.set("train", "iterations", report.iterations.to_string());
    checkpoint::save(&out.join("final.ckpt"), &model, &ds.charset, &final_echo)?;
    if report.best_accuracy.is_none() {
        checkpoint::save(&best_path, &model, &ds.charset, &final_echo)?;
    }
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    match (report.best_accuracy, report.best_iteration) {
        (Some(acc), Some(it)) => println!(
            "trained {} iterations; final loss {last}; best accuracy {acc} at iteration {it}",
            report.iterations
        ),
        _ => println!(
            "trained {} iterations; final loss {last}",
            report.iterations
        ),
    }
    Ok(())
}

fn read_predictions(
    path: &Path,
    data_dir: &Path,
) -> CliResult<std::collections::BTreeMap<PathBuf, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (rel, pred) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{} row {}: expected path<TAB>prediction",
                path.display(),
                n + 1
            ))
        })?;
        out.insert(data_dir.join(rel), pred.to_string());
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let cfg = effective_config(&a.shared)?;
    if a.batch_size == 0 || a.beam == Some(0) {
        return Err(usage("--batch-size and --beam must be at least 1"));
    }
    let ds = load_dataset(&a.data)?;
    let pairs: Vec<Pair> = match (&a.model, &a.predictions) {
        (Some(model_path), _) => {
            let loaded = checkpoint::load::<f32>(model_path, Some(&ds.charset))?;
            let items = prepare_all(&ds, loaded.model.config.height)?;
            prediction_pairs(&loaded.model, &items, &ds.charset, a.batch_size, a.beam)?
        }
        (None, Some(pred_path)) => {
            let preds = read_predictions(pred_path, &a.data)?;
            ds.samples
                .iter()
                .map(|s| {
                    let p = preds.get(&s.path).ok_or_else(|| {
                        Error::Data(format!(
                            "{}: no prediction for {}",
                            pred_path.display(),
                            s.path.display()
                        ))
                    })?;
                    Ok(Pair::new(p.clone(), s.transcript.clone()))
                })
                .collect::<CliResult<_>>()?
        }
        (None, None) => return Err(usage("eval needs --model or --predictions")),
    };
    let report = EvalReport::from_pairs(&pairs)?;
    let table = report.to_tsv();
    println!("accuracy\t{:?}", report.accuracy);
    print!("{table}");
    if a.shared.out.is_some() {
        let out = require_out(&a.shared)?;
        let mut echo = cfg;
        echo.set("eval", "data", a.data.display().to_string());
        if let Some(m) = &a.model {
            echo.set("eval", "model", m.display().to_string());
        }
        if let Some(b) = a.beam {
            echo.set("eval", "beam", b.to_string());
        }
        echo.save(&out.join("config.conf"))?;
        write_file(&out.join("report.tsv"), &table)?;
        let mut preds = String::new();
        for (s, p) in ds.samples.iter().zip(&pairs) {
            let _ = writeln!(preds, "{}\t{}\t{}", s.path.display(), p.pred, p.gt);
        }
        write_file(&out.join("predictions.tsv"), &preds)?;
    }
    Ok(())
}

fn list_images(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::Io {
        path: input.display().to_string(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{} contains no PNG images", input.display())).into());
    }
    Ok(paths)
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let cfg = effective_config(&a.shared)?;
    if a.batch_size == 0 || a.beam == Some(0) {
        return Err(usage("--batch-size and --beam must be at least 1"));
    }
    let loaded = checkpoint::load::<f32>(&a.model, None)?;
    let rtl = match a.direction.as_deref() {
        Some(d) => d == "rtl",
        None => loaded.config.get("data", "direction") == Some("rtl"),
    };
    let height = loaded.model.config.height;
    let paths = list_images(&a.input)?;
    let mut items = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = GrayImage::load_png(p)?;
        let (ink, width) = prepare_image(&img, height, rtl);
        items.push(Prepared {
            ink,
            width,
            height,
            labels: Vec::new(),
            text: String::new(),
        });
    }
    let preds = predict_all(&loaded.model, &items, a.batch_size, a.beam)?;
    let mut lines = String::new();
    for (p, labels) in paths.iter().zip(&preds) {
        let _ = writeln!(lines, "{}\t{}", p.display(), loaded.charset.decode(labels));
    }
    print!("{lines}");
    if a.shared.out.is_some() {
        let out = require_out(&a.shared)?;
        let mut echo = cfg;
        echo.set("predict", "model", a.model.display().to_string());
        echo.set("predict", "direction", direction_name(rtl));
        if let Some(b) = a.beam {
            echo.set("predict", "beam", b.to_string());
        }
        echo.save(&out.join("config.conf"))?;
        write_file(&out.join("predictions.tsv"), &lines)?;
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> CliResult {
    let mut cfg = effective_config(&a.shared)?;
    if let Some(s) = a.shared.seed {
        cfg.set("experiment", "seeds", s.to_string());
    }
    let dots = DotsConfig::from_config(&cfg)?;
    let out = require_out(&a.shared)?;
    let mut echo = cfg;
    dots.write_to(&mut echo);
    echo.save(&out.join("config.conf"))?;
    let report = run_dots_experiment(&dots, &mut |r| {
        println!(
            "{}\tseed {}\tdot {:.4}\tunique {:.4}\tloss {:.4}",
            r.backbone,
            r.seed,
            r.dot_group.accuracy(),
            r.unique_group.accuracy(),
            r.final_loss
        );
    })?;
    write_file(&out.join("report.tsv"), &report.to_text())?;
    let wins = report.high_wins(dots.high);
    let won = wins.iter().filter(|(_, w)| *w).count();
    for (seed, w) in &wins {
        println!(
            "seed {seed}: {} dot accuracy >= lowres-baseline: {w}",
            dots.high
        );
    }
    println!(
        "{} matched or beat the baseline on {won} of {} seeds",
        dots.high,
        wins.len()
    );
    Ok(())
}
