//! The `objaoa` command line: synthesize data, train, evaluate, caption and
//! run the self-check suites.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 internal.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use objaoa::data::{join, load_captions, load_features, split_dataset, write_synth, CaptionRecord, Example};
use objaoa::metrics::MetricReport;
use objaoa::model::{init_model, load_checkpoint, save_checkpoint};
use objaoa::training::{evaluate_split, fit_config, generate_captions, prepare, run_two_stage, Stages};
use objaoa::verify::{run_suite, Suite};
use objaoa::{Error, ErrorKind, Result, Vocabulary};

pub mod config;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "objaoa", version, about = "Region-based image captioning with geometric attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a captioner; writes checkpoints, the resolved config and a log.
    Train(TrainArgs),
    /// Score a checkpoint against reference captions.
    Eval(EvalArgs),
    /// Print one caption per image.
    Caption(CaptionArgs),
    /// Run self-check suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub images: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long = "d-feat", default_value_t = 16)]
    pub d_feat: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key=value` file; see `RunConfig`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "no_aoa")]
    pub aoa: bool,
    /// Plain output projection instead of the AoA gate.
    #[arg(long = "no-aoa")]
    pub no_aoa: bool,
    #[arg(long, value_parser = ["xe", "scst", "both"])]
    pub stage: Option<String>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Vocabulary of `--init`; defaults to `vocab.txt` beside it.
    #[arg(long, requires = "init")]
    pub vocab: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: u64,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Machine-readable report; defaults to `eval_report.txt` beside the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: u64,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = ["gradcheck", "invariants", "metrics-oracle", "all"])]
    pub suite: String,
}

pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Internal => 3,
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Caption(a) => cmd_caption(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let (f, c) = write_synth(&a.out, a.images as usize, a.seed, a.d_feat)?;
    writeln!(out, "wrote {} and {}", f.display(), c.display()).map_err(out_err)
}

fn beside(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_vocab_for(ckpt: &Path, explicit: Option<&PathBuf>) -> Result<Vocabulary> {
    let path = explicit.cloned().unwrap_or_else(|| beside(ckpt, "vocab.txt"));
    Vocabulary::load(path)
}

fn caption_records(examples: &[Example]) -> Vec<CaptionRecord> {
    examples
        .iter()
        .map(|e| CaptionRecord {
            id: e.image.id.clone(),
            captions: e.captions.clone(),
        })
        .collect()
}

/// Resolves flags over the config file over defaults.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if a.features.is_some() {
        cfg.features = a.features.clone();
    }
    if a.captions.is_some() {
        cfg.captions = a.captions.clone();
    }
    if a.aoa {
        cfg.model.aoa_enabled = true;
    }
    if a.no_aoa {
        cfg.model.aoa_enabled = false;
    }
    if let Some(s) = &a.stage {
        cfg.stage = Stages::parse(s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))?;
    }
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_train_config(a)?;
    let features = cfg
        .features
        .clone()
        .ok_or_else(|| Error::Config("no features file: pass --features or set features= in the config".into()))?;
    let captions = cfg
        .captions
        .clone()
        .ok_or_else(|| Error::Config("no captions file: pass --captions or set captions= in the config".into()))?;
    cfg.validate()?;

    let examples = join(load_features(&features)?, load_captions(&captions)?)?;
    if examples.is_empty() {
        return Err(Error::Config(format!("{} holds no images", features.display())));
    }
    let (train_ex, dev_ex) = split_dataset(&examples, cfg.split_seed, cfg.dev_count)?;
    let (init, vocab) = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let vocab = load_vocab_for(p, a.vocab.as_ref())?;
            cfg.model = ck.config.clone();
            (ck, vocab)
        }
        None => {
            let vocab = Vocabulary::build(&caption_records(&train_ex), cfg.min_count);
            cfg.model = fit_config(&cfg.model, &vocab, examples[0].image.d_feat());
            (init_model(&cfg.model)?, vocab)
        }
    };
    cfg.validate()?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let write = |name: &str, text: String| {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.txt", cfg.to_text())?;
    vocab.save(a.out.join("vocab.txt"))?;

    let len = cfg.model.max_caption_len;
    let train = prepare(&train_ex, &vocab, len);
    let dev = prepare(&dev_ex, &vocab, len);
    let outcome = run_two_stage(&train, &dev, &vocab, init, &cfg.train, cfg.stage)?;

    let log: String = outcome.log.iter().map(|r| r.to_line() + "\n").collect();
    write("train.log", log)?;
    save_checkpoint(&outcome.best, a.out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, a.out.join("last.ckpt"))?;
    writeln!(
        out,
        "trained {} train / {} dev images; best at step {} ({}):",
        train.len(),
        dev.len(),
        outcome.best.state.step,
        outcome.best.state.stage.as_str()
    )
    .map_err(out_err)?;
    for (k, v) in &outcome.best.scores {
        writeln!(out, "  dev_{k}={v}").map_err(out_err)?;
    }
    Ok(())
}

/// `name=value` per metric, in report order.
pub fn report_text(r: &MetricReport) -> String {
    MetricReport::NAMES
        .iter()
        .zip(r.values())
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Reads back [`report_text`] output.
pub fn parse_report(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Parse {
                line: i + 1,
                message: format!("bad report line {l:?}"),
            };
            let (k, v) = l.split_once('=').ok_or_else(bad)?;
            Ok((k.to_string(), v.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab_for(&a.ckpt, a.vocab.as_ref())?;
    if vocab.len() != ckpt.config.vocab_size {
        return Err(Error::Compatibility(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    let examples = join(load_features(&a.features)?, load_captions(&a.captions)?)?;
    let data = prepare(&examples, &vocab, ckpt.config.max_caption_len);
    let report = evaluate_split(&ckpt, &data, &vocab, a.beam as usize)?;
    writeln!(out, "{:<10} score", "metric").map_err(out_err)?;
    for (k, v) in MetricReport::NAMES.iter().zip(report.values()) {
        writeln!(out, "{k:<10} {v}").map_err(out_err)?;
    }
    let path = a.report.clone().unwrap_or_else(|| beside(&a.ckpt, "eval_report.txt"));
    std::fs::write(&path, report_text(&report)).map_err(|e| Error::io(&path, e))
}

pub fn cmd_caption(a: &CaptionArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab_for(&a.ckpt, a.vocab.as_ref())?;
    let images = load_features(&a.features)?;
    let captions = generate_captions(&ckpt, &images, a.beam as usize)?;
    for (img, toks) in images.iter().zip(&captions) {
        writeln!(out, "{}\t{}", img.id, vocab.decode(toks)).map_err(out_err)?;
    }
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let suite = Suite::parse(&a.suite).ok_or_else(|| Error::Config(format!("unknown suite {:?}", a.suite)))?;
    let checks = run_suite(suite)?;
    for c in &checks {
        writeln!(out, "{}", c.line()).map_err(out_err)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} of {} checks passed", checks.len() - failed, checks.len()).map_err(out_err)?;
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} self-checks failed")));
    }
    Ok(())
}
