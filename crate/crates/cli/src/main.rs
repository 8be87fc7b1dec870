use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tagv_core::certify::model_grad_check;
use tagv_core::corpus::{
    generate_splits, load_corpus, manifest_path, parse_srt, save_corpus, Corpus, GenConfig, Sample, Split,
};
use tagv_core::eval::{dump_attention, evaluate_model, write_predictions, MetricsReport};
use tagv_core::selection::select_subtitle_span;
use tagv_core::trainer::{load_checkpoint, save_checkpoint, train_loop};
use tagv_core::{DecodeMode, TrainConfig};

/// Temporal answering grounding: find the video span that answers a
/// question by predicting a subtitle span.
#[derive(Parser)]
#[command(name = "tagv", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "TAGV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (train/valid/test manifests).
    Gen(GenArgs),
    /// Train a model and write the best checkpoint by validation mIoU.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write a metrics report.
    Eval(EvalArgs),
    /// Write one prediction record per sample.
    Predict(PredictArgs),
    /// Print the subtitle-aligned start and end for an answer span.
    Select(SelectArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Write attention, similarity and highlight matrices for one sample.
    DumpAttn(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Validation samples [default: half of --n].
    #[arg(long)]
    n_valid: Option<usize>,
    /// Test samples [default: half of --n].
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    frames_per_s: Option<f64>,
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    max_duration: Option<f64>,
    #[arg(long)]
    min_cues: Option<usize>,
    #[arg(long)]
    max_cues: Option<usize>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    signature_shift: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory holding train.json and optionally valid.json.
    #[arg(long)]
    corpus: PathBuf,
    /// `key = value` configuration file [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Per-step loss log (tab-separated).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "valid")]
    split: Split,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "joint")]
    decode: DecodeMode,
    /// Count a hit only when IoU is strictly above the threshold.
    #[arg(long)]
    strict: bool,
    /// Also write prediction records into this directory.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split manifest holding the sample(s).
    #[arg(long)]
    sample: PathBuf,
    /// Only this sample [default: every sample in the manifest].
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "joint")]
    decode: DecodeMode,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    srt: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    start: f64,
    #[arg(long, allow_negative_numbers = true)]
    end: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Configuration file [default: the built-in micro configuration].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check 64-bit gradients (tolerance 1e-5) instead of 32-bit (1e-3).
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Split manifest holding the sample.
    #[arg(long)]
    sample: PathBuf,
    /// Sample id [default: the first in the manifest].
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Replace the visual prompt token with zeros.
    #[arg(long)]
    zero_prompt: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Select(a) => select(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::DumpAttn(a) => dump(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn load_split(dir: &Path, split: Split) -> Result<Corpus> {
    let path = manifest_path(dir, split);
    let loaded = load_corpus(&path).with_context(|| format!("loading {}", path.display()))?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded.corpus)
}

fn load_sample(manifest: &Path, id: Option<&str>) -> Result<Sample> {
    let loaded = load_corpus(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let mut samples = loaded.corpus.samples;
    match id {
        Some(id) => match samples.iter().position(|s| s.id == id) {
            Some(i) => Ok(samples.swap_remove(i)),
            None => bail!("no sample `{id}` in {}", manifest.display()),
        },
        None if samples.is_empty() => bail!("{} has no samples", manifest.display()),
        None => Ok(samples.swap_remove(0)),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = GenConfig {
        n_valid: a.n_valid,
        n_test: a.n_test,
        ..GenConfig::default()
    };
    if let Some(v) = a.d_v {
        cfg.d_v = v;
    }
    if let Some(v) = a.frames_per_s {
        cfg.frames_per_s = v;
    }
    if let Some(v) = a.min_duration {
        cfg.duration_min_s = v;
    }
    if let Some(v) = a.max_duration {
        cfg.duration_max_s = v;
    }
    if let Some(v) = a.min_cues {
        cfg.cues_min = v;
    }
    if let Some(v) = a.max_cues {
        cfg.cues_max = v;
    }
    if let Some(v) = a.distractor_rate {
        cfg.distractor_rate = v;
    }
    if let Some(v) = a.signature_shift {
        cfg.signature_shift = v;
    }
    for c in generate_splits(a.n, a.seed, &cfg)? {
        let path = save_corpus(&c, &a.out)?;
        println!("{} {} samples -> {}", c.split, c.len(), path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for (i, kv) in a.overrides.iter().enumerate() {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not KEY=VALUE");
        };
        cfg.set(k.trim(), v.trim(), i + 1)?;
    }
    cfg.validate()?;
    let train = load_split(&a.corpus, Split::Train)?;
    let valid = if manifest_path(&a.corpus, Split::Valid).exists() {
        Some(load_split(&a.corpus, Split::Valid)?)
    } else {
        log::warn!("no validation split; keeping the final parameters");
        None
    };
    let out = train_loop(&train, valid.as_ref(), &cfg)?;
    save_checkpoint(&a.out_ckpt, &out.best)?;
    if let Some(p) = &a.log {
        let mut text = out.log.join("\n");
        text.push('\n');
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    let best = out.epochs.iter().find(|e| e.epoch == out.best_epoch);
    println!(
        "trained {} steps over {} epochs; best epoch {} (valid mIoU {}) -> {}",
        out.log.len(),
        out.epochs.len(),
        out.best_epoch,
        best.and_then(|e| e.valid_miou).map_or("-".into(), |m| format!("{m:.2}")),
        a.out_ckpt.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt, None)?;
    let corpus = load_split(&a.corpus, a.split)?;
    let ev = evaluate_model(&corpus, &ck, a.decode)?;
    let report = if a.strict {
        MetricsReport::from_ious(ev.report.per_sample, true)?
    } else {
        ev.report
    };
    report.save(&a.report)?;
    if let Some(dir) = &a.predictions {
        write_predictions(dir, &ev.predictions)?;
    }
    let r1: Vec<String> = report.r1_at.iter().map(|(k, v)| format!("R@1,IoU={k} {v:.2}")).collect();
    println!("{} samples: mIoU {:.2}, {}", report.n, report.miou, r1.join(", "));
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt, None)?;
    let corpus = match &a.id {
        Some(id) => {
            let s = load_sample(&a.sample, Some(id))?;
            Corpus::new(Split::Test, vec![s])?
        }
        None => load_corpus(&a.sample)?.corpus,
    };
    let ev = evaluate_model(&corpus, &ck, a.decode)?;
    let files = write_predictions(&a.out, &ev.predictions)?;
    println!("{} prediction(s) -> {}", files.len(), a.out.display());
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.srt).with_context(|| format!("reading {}", a.srt.display()))?;
    let parsed = parse_srt(&bytes)?;
    if parsed.reordered {
        log::warn!("{}: cues were out of order and have been sorted", a.srt.display());
    }
    let sel = select_subtitle_span(&parsed.track, a.start, a.end)?;
    println!("{:.3} {:.3}", sel.r_s, sel.r_e);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::micro(),
    };
    let (check, tol) = if a.f64 {
        (model_grad_check::<f64>(&cfg)?, 1e-5)
    } else {
        (model_grad_check::<f32>(&cfg)?, 1e-3)
    };
    let r = &check.report;
    for (name, err) in &r.per_param {
        log::info!("{name}: {err:.3e}");
    }
    let worst = r.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
    println!(
        "max relative error {:.3e}{worst} over {} coordinates (tolerance {tol:e})",
        r.max_rel_err, r.coords_checked
    );
    if !check.dead_groups.is_empty() {
        eprintln!("no gradient reached: {}", check.dead_groups.join(", "));
        return Ok(ExitCode::from(1));
    }
    Ok(if r.max_rel_err < tol {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn dump(a: DumpArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt, None)?;
    let sample = load_sample(&a.sample, a.id.as_deref())?;
    let files = dump_attention(&ck, &sample, &a.out_dir, a.zero_prompt)?;
    println!("{} files -> {}", files.len(), a.out_dir.display());
    Ok(())
}
