//! Subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use msod_core::gradcheck::{check_end_to_end, registry, run_case, CheckResult};
use msod_core::model::{check_input_size, infer, Model, ModelConfig};
use msod_core::train::{train, History};

use crate::ablate::{self, Preset, TestItem};
use crate::checkpoint;
use crate::config::{help_text, RunConfig};
use crate::dataset;
use crate::error::{Error, Result};
use crate::pnm;
use crate::report;

#[derive(Debug, Parser)]
#[command(
    name = "msod",
    version,
    about = "Multiple salient object detection toolkit"
)]
pub struct Cli {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-object dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the records with enough objects and write their histogram.
    Curate(CurateArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Write one saliency map per `.ppm` image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction maps against ground-truth masks.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every registered op and the full loss.
    Gradcheck(GradcheckArgs),
    /// Train and compare the variants of an ablation preset.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub min_objects: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram path; defaults to `histogram.tsv` next to `--out`.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the untrained parameters here.
    #[arg(long)]
    pub save_init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seeds of the end-to-end check, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub model_seeds: u64,
    /// Input extent of the end-to-end check.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The clap command with the config key listing appended to `--help`.
pub fn command() -> clap::Command {
    Cli::command().after_help(help_text())
}

/// Parses `args` (including the program name).
pub fn parse<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.assign(kv)?;
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    for line in cfg.to_text().lines() {
        eprintln!("config {line}");
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    log_config(&cfg);
    match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out),
        Command::Curate(a) => cmd_curate(a),
        Command::Train(a) => cmd_train(&cfg, a).map(|_| ()),
        Command::Predict {
            checkpoint,
            images,
            out,
        } => cmd_predict(checkpoint, images, out),
        Command::Eval { preds, gts, out } => cmd_eval(preds, gts, out),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
    }
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let index = dataset::write_dataset(out, &cfg.dataset_spec()?)?;
    println!("wrote {} scenes to {}", index.records.len(), out.display());
    Ok(())
}

pub fn cmd_curate(a: &CurateArgs) -> Result<()> {
    let hist = a.histogram.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .unwrap_or(Path::new(""))
            .join(dataset::HISTOGRAM_FILE)
    });
    let c = dataset::curate_file(&a.index, a.min_objects, &a.out, &hist)?;
    for (mask, why) in &c.skipped {
        eprintln!("skipped {mask}: {why}");
    }
    println!(
        "kept {} record(s), skipped {} unreadable",
        c.index.records.len(),
        c.skipped.len()
    );
    Ok(())
}

pub fn model_config(cfg: &RunConfig) -> ModelConfig {
    cfg.model.clone()
}

/// Trains on the index and writes checkpoint, config sidecar and loss log.
pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<History> {
    let records = dataset::load_records(&a.index)?;
    let data: Vec<_> = records.iter().map(|r| r.sample()).collect();
    for r in &records {
        check_input_size(r.image.height, r.image.width)
            .map_err(|e| Error::Config(format!("{}: {e}", r.name)))?;
    }
    let mut model = Model::new(model_config(cfg), cfg.seed)?;
    if let Some(p) = &a.save_init {
        checkpoint::save(p, &model.params, cfg)?;
    }
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let start = Instant::now();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let result = train(&mut model, &data, &train_cfg, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{}\t{}\t{}", r.step, r.loss, r.lr) {
                write_err = Some(e);
            }
        }
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let history = result.map_err(|e| match e {
        msod_core::Error::NonFinite(m) => Error::Runtime(format!("training aborted: {m}")),
        other => other.into(),
    })?;
    checkpoint::save(&a.out, &model.params, cfg)?;
    println!(
        "trained {} steps in {:.1}s; smoothed loss {:.4} -> {:.4}",
        history.records.len(),
        start.elapsed().as_secs_f64(),
        history.initial_smoothed(ablate::LOSS_WINDOW),
        history.final_smoothed(ablate::LOSS_WINDOW)
    );
    Ok(history)
}

/// Predicts every `.ppm` in `images`. Files that cannot be read or have an
/// unsupported size are reported and skipped; any such file makes the
/// command fail after the rest are written.
pub fn cmd_predict(ckpt: &Path, images: &Path, out: &Path) -> Result<()> {
    let (params, cfg) = checkpoint::load(ckpt)?;
    let model = Model::with_params(model_config(&cfg), &params)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = report::list_files(images, "ppm")?;
    let mut failed = 0;
    for (name, path) in &files {
        let res = pnm::read_ppm(path).and_then(|img| {
            check_input_size(img.height, img.width)?;
            let map = infer(&model, &img.to_tensor())?;
            let dst = out.join(Path::new(name).with_extension("pgm"));
            pnm::write_pgm(&dst, &map.to_gray())
        });
        if let Err(e) = res {
            eprintln!("{}: {e}", path.display());
            failed += 1;
        }
    }
    println!(
        "predicted {} of {} image(s)",
        files.len() - failed,
        files.len()
    );
    if failed > 0 {
        return Err(Error::Config(format!(
            "{failed} image(s) could not be predicted"
        )));
    }
    Ok(())
}

pub fn cmd_eval(preds: &Path, gts: &Path, out: &Path) -> Result<()> {
    let r = report::evaluate_dirs(preds, gts)?;
    report::write_reports(&r, out)?;
    print!("{}", report::report_text(&r));
    Ok(())
}

fn check_line(r: &CheckResult) -> String {
    let (input, elem) = r
        .worst
        .as_ref()
        .map(|w| (w.input.as_str(), w.element))
        .unwrap_or(("-", 0));
    format!(
        "{:<26} {:>4} {:>7} {:>11.3e} {:>8} {:<24} {}",
        r.name,
        r.seed,
        r.checked,
        r.max_rel_error(),
        r.reduced_step,
        format!("{input}[{elem}]"),
        if r.passed() { "pass" } else { "FAIL" }
    )
}

pub fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<()> {
    println!(
        "{:<26} {:>4} {:>7} {:>11} {:>8} {:<24} status",
        "check", "seed", "checked", "max rel", "reduced", "worst"
    );
    let mut failures = 0;
    for case in registry() {
        let r = run_case(&case, a.seed)?;
        failures += usize::from(!r.passed());
        println!("{}", check_line(&r));
    }
    let model = ModelConfig {
        widths: ModelConfig::tiny().widths,
        ..model_config(cfg)
    };
    for seed in a.seed..a.seed + a.model_seeds {
        let r = check_end_to_end(&model, a.size, seed)?;
        failures += usize::from(!r.passed());
        println!("{}", check_line(&r));
    }
    if failures > 0 {
        return Err(Error::Runtime(format!(
            "{failures} gradient check(s) failed"
        )));
    }
    println!("all checks passed");
    Ok(())
}

/// Ground truths and tensors of the records of a test index.
pub fn test_items(index: &Path) -> Result<Vec<TestItem>> {
    Ok(dataset::load_records(index)?
        .into_iter()
        .map(|r| TestItem {
            name: r.name.clone(),
            image: r.image.to_tensor(),
            gt: r.mask.to_binary(),
        })
        .collect())
}

pub fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<()> {
    let data: Vec<_> = dataset::load_records(&a.train)?
        .iter()
        .map(|r| r.sample())
        .collect();
    let test = test_items(&a.test)?;
    let variants = ablate::variants(a.preset, &model_config(cfg));
    let mut results = Vec::new();
    for v in &variants {
        for &seed in &a.seeds {
            let start = Instant::now();
            let (r, _) = ablate::run_variant(v, seed, &cfg.train, &data, &test)?;
            eprintln!(
                "{} seed {}: maxF {:.4} MAE {:.4} S {:.4} ({:.0}s)",
                r.label,
                seed,
                r.max_f,
                r.mae,
                r.s,
                start.elapsed().as_secs_f64()
            );
            results.push(r);
        }
    }
    let summary = ablate::summarize(&variants, &results);
    let dirs = ablate::directions(a.preset, &summary);
    let table = ablate::results_table(&results, &summary, &dirs);
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table).map_err(|e| Error::io(p, e))?;
    }
    if results.iter().any(|r| !r.probe_ok) {
        return Err(Error::Runtime(
            "a variant's non-local probe disagrees with its flags".into(),
        ));
    }
    Ok(())
}
