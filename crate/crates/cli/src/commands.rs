use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use zsad_core::cnf::{cnf_csv, cnf_report};
use zsad_core::config::RunConfig;
use zsad_core::data::open_dataset;
use zsad_core::encoder::{AdapterRegistry, FrozenEncoder};
use zsad_core::export::{collect_eval_records, write_prediction};
use zsad_core::metrics::{evaluate_class, finish_report, group_by_class};
use zsad_core::pipeline::{class_words, infer_entry};
use zsad_core::scoring::InferenceEngine;
use zsad_core::synth::{write_dataset, SynthSpec};
use zsad_core::train::{load_checkpoint, save_checkpoint, train, write_atomic};

use crate::{CnfArgs, Cli, Command, EvalArgs, FilterArgs, InferArgs, SynthArgs, TrainArgs};
use crate::{EXIT_RUNTIME, EXIT_USAGE};

/// Bad invocation: a required input was given neither as a flag nor in
/// the config.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<zsad_core::Error>() {
        Some(zsad_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn required(value: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    value.ok_or_else(|| UsageError(format!("missing input: pass {flag} or set \"{key}\" in the config")).into())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        return synth(args);
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.out_dir {
        cfg.output_dir = dir;
    }
    let workers = usize::from(cli.workers);
    match cli.command {
        Command::Train(args) => cmd_train(cfg, args),
        Command::Infer(args) => cmd_infer(cfg, args, workers),
        Command::Eval(args) => cmd_eval(cfg, args, workers),
        Command::Cnf(args) => cmd_cnf(cfg, args),
        Command::Synth(_) => unreachable!(),
    }
}

fn apply_filter(cfg: &mut RunConfig, f: FilterArgs) {
    if f.no_cnf {
        cfg.cnf_enabled = false;
    }
    if let Some(t) = f.generic_term {
        cfg.generic_term = t;
    }
    if let Some(m) = f.cnf_mode {
        cfg.cnf_mode = m.into();
    }
}

/// Validates, creates the output directory and writes the snapshot.
fn prepare(cfg: &RunConfig, command: &str) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    let mut json = cfg.to_json()?.into_bytes();
    json.push(b'\n');
    write_atomic(&cfg.output_dir.join(format!("{command}.config.json")), &json)?;
    Ok(())
}

fn load_encoder(cfg: &RunConfig) -> Result<Box<dyn FrozenEncoder>> {
    Ok(AdapterRegistry::default().load(&cfg.encoder, &cfg.encoder_spec(), cfg.encoder_weights.as_deref())?)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if args.dataset.is_some() {
        cfg.train_root = args.dataset;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let root = required(cfg.train_root.clone(), "--dataset", "train_root")?;
    cfg.validate()?;
    let manifest = open_dataset(&root)?;
    prepare(&cfg, "train")?;

    let header = format!(
        "alpha={} sigma={} n1={} n2={} temperature={} encoder={}",
        cfg.alpha, cfg.sigma, cfg.n1, cfg.n2, cfg.temperature, cfg.encoder
    );
    println!("{header}");
    let encoder = load_encoder(&cfg)?;
    let log_path = cfg.output_dir.join("train.log");
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_file = BufWriter::new(file);
    writeln!(log_file, "# {header}")?;
    let outcome = train(
        &manifest,
        encoder.as_ref(),
        &cfg.train(),
        &cfg.loss(),
        &cfg.scoring(),
        Some(&mut log_file),
    )?;
    log_file.flush()?;
    let ckpt_path = cfg.output_dir.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        info!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, outcome.log.len());
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_infer(mut cfg: RunConfig, args: InferArgs, workers: usize) -> Result<()> {
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    if args.input.is_some() {
        cfg.test_root = args.input;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.n1 {
        cfg.n1 = v;
    }
    if let Some(v) = args.n2 {
        cfg.n2 = v;
    }
    apply_filter(&mut cfg, args.filter);
    cfg.export_raw |= args.raw;
    let ckpt_path = required(cfg.checkpoint.clone(), "--checkpoint", "checkpoint")?;
    let input = required(cfg.test_root.clone(), "--input", "test_root")?;
    cfg.validate()?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let spec = cfg.encoder_spec();
    if ckpt.header.encoder != spec {
        bail!(
            "encoder mismatch: {} was trained with {:?} but the config describes {:?}",
            ckpt_path.display(),
            ckpt.header.encoder,
            spec
        );
    }
    let manifest = open_dataset(&input)?;
    prepare(&cfg, "infer")?;
    let encoder = load_encoder(&cfg)?;
    let engine = InferenceEngine::new(encoder.as_ref(), &ckpt.bank, cfg.cnf(), cfg.scoring())?;
    let words = class_words(&engine, &manifest)?;
    let entries: Vec<_> = manifest.test_entries().collect();
    let out_dir = &cfg.output_dir;
    let sidecars = thread_pool(workers)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let word = words.get(&e.class_name).map(String::as_str);
                let result = infer_entry(&engine, &manifest, e, word)?;
                write_prediction(out_dir, e, &result, cfg.export_raw)
            })
            .collect::<zsad_core::Result<Vec<_>>>()
    })?;

    let mut csv = String::from("image,class,class_word,s_det\n");
    for s in &sidecars {
        csv.push_str(&format!("{},{},{},{}\n", s.image, s.class_name, s.class_word, s.s_det));
    }
    write_text(&out_dir.join("image_scores.csv"), &csv)?;
    println!("wrote {} predictions to {}", sidecars.len(), out_dir.display());
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, args: EvalArgs, workers: usize) -> Result<()> {
    if args.pred_dir.is_some() {
        cfg.predictions_dir = args.pred_dir;
    }
    if args.dataset_root.is_some() {
        cfg.test_root = args.dataset_root;
    }
    if let Some(p) = args.pooling {
        cfg.pixel_pooling = p.into();
    }
    if let Some(v) = args.fpr_limit {
        cfg.fpr_limit = v;
    }
    if let Some(v) = args.num_thresholds {
        cfg.num_thresholds = v;
    }
    let root = required(cfg.test_root.clone(), "--dataset-root", "test_root")?;
    let pred_dir = cfg.predictions_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.validate()?;
    let manifest = open_dataset(&root)?;
    let records = collect_eval_records(&manifest, &pred_dir)?;
    prepare(&cfg, "eval")?;

    let aupro = cfg.aupro();
    let groups = group_by_class(&records);
    let classes = thread_pool(workers)?.install(|| {
        groups
            .par_iter()
            .map(|(class, rs)| evaluate_class(class, rs, &aupro))
            .collect::<zsad_core::Result<Vec<_>>>()
    })?;
    let report = finish_report(classes, &records, &aupro, cfg.pixel_pooling)?;
    let csv = report.to_csv();
    write_text(&cfg.output_dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_cnf(mut cfg: RunConfig, args: CnfArgs) -> Result<()> {
    if args.dataset_root.is_some() {
        cfg.test_root = args.dataset_root;
    }
    apply_filter(&mut cfg, args.filter);
    let root = required(cfg.test_root.clone(), "--dataset-root", "test_root")?;
    cfg.validate()?;
    let manifest = open_dataset(&root)?;
    prepare(&cfg, "cnf")?;
    let encoder = load_encoder(&cfg)?;
    let rows = cnf_report(&manifest, &cfg.cnf(), encoder.as_ref())?;
    let csv = cnf_csv(&rows);
    write_text(&cfg.output_dir.join("cnf.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        image_size: args.image_size,
        patch_size: args.patch_size,
        classes: args.classes.clone(),
        train_good: args.good,
        test_good: args.good,
        test_defect: args.defects,
        seed: args.seed,
    };
    let manifest = write_dataset(&args.root, &spec)?;
    let mut json = manifest.to_json()?.into_bytes();
    json.push(b'\n');
    write_atomic(&args.root.join("manifest.json"), &json)?;
    println!(
        "wrote {} images in {} classes to {}",
        manifest.entries.len(),
        manifest.classes.len(),
        args.root.display()
    );
    Ok(())
}
