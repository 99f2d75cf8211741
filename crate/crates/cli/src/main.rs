//! `scrawl`: train, evaluate and inspect handwritten-line transcription models.
//!
//! Exit status: 0 on success, 1 when a run fails, 2 for invalid usage,
//! configuration or input files.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use scrawl::config::{Preset, RunConfig};
use scrawl::corpus::{load_corpus, preprocess_image, synth_generate, write_corpus, Corpus, CorpusPaths, RawImage, SynthConfig, SPLITS};
use scrawl::decoder::AttentionMechanism;
use scrawl::trainer::{self, checkpoint::Checkpoint, EpochMetrics, Trainer};
use scrawl::viz::{overlay_attention, render_attention_matrix};

const METRICS_HEADER: [&str; 3] = ["epoch", "train_loss", "val_cer"];
const SAMPLE_HEADER: [&str; 4] = ["id", "ref", "hyp", "distance"];

#[derive(Parser)]
#[command(name = "scrawl", version, about = "Attentional encoder-decoder for handwritten text lines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Greedy-decode a corpus split and report the character error rate.
    Evaluate(EvaluateArgs),
    /// Print the transcription of each PGM image, one per line.
    Transcribe(TranscribeArgs),
    /// Export the attention matrix and per-step overlays of one image.
    Visualize(VisualizeArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

/// Configuration sources, applied in order: preset defaults, `--config`,
/// `--set`, then the dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    attention: Option<AttentionMechanism>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.preset.is_none() && self.attention.is_none() && self.seed.is_none() && self.overrides.is_empty()
    }

    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut map = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::parse_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{o}`"))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(p) = self.preset {
            map.insert("preset".into(), p.to_string());
        }
        if let Some(a) = self.attention {
            map.insert("attention".into(), a.to_string());
        }
        if let Some(s) = self.seed {
            map.insert("seed".into(), s.to_string());
        }
        Ok(RunConfig::from_map(&map)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus directory; defaults to `paths.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory; defaults to `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint; its stored configuration is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Decoding threads for validation; defaults to available cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Load the checkpoint into this configuration instead of its own.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for the per-sample CSV; defaults to the checkpoint's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TranscribeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Steps to overlay; defaults to every step.
    #[arg(long = "step")]
    steps: Vec<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    validation: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value = "abcdefghijkl")]
    charset: String,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

/// A failure and the exit status it maps to.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Runtime(e.into())
    }
}

trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn threads(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn load_checkpoint(path: &Path, config: Option<RunConfig>) -> Result<Trainer, Failure> {
    let ck = Checkpoint::load(path).usage()?;
    Ok(Trainer::from_checkpoint_with(&ck, config)?)
}

fn read_corpus(dir: &Path) -> Result<Corpus, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(anyhow!("corpus directory {} does not exist", dir.display())));
    }
    load_corpus(&CorpusPaths::in_dir(dir)).usage()
}

/// Opens `path` for appending rows, writing `header` only when the file is
/// new; an existing file must carry the same header.
fn append_csv(path: &Path, header: &[&str]) -> anyhow::Result<csv::Writer<fs::File>> {
    let existing = path.is_file() && fs::metadata(path)?.len() > 0;
    if existing {
        let mut reader = csv::Reader::from_path(path)?;
        let found: Vec<String> = reader.headers()?.iter().map(String::from).collect();
        if found != header {
            bail!("{} has header {found:?}, expected {header:?}", path.display());
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !existing {
        w.write_record(header)?;
        w.flush()?;
    }
    Ok(w)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut trainer = match &args.checkpoint {
        Some(path) => {
            if !args.config.is_empty() {
                return Err(Failure::Usage(anyhow!("--checkpoint resumes with the stored configuration; drop the config flags")));
            }
            load_checkpoint(path, None)?
        }
        None => Trainer::new(args.config.resolve().usage()?).usage()?,
    };
    let corpus_dir = args.corpus.clone().or_else(|| {
        let c = &trainer.config.corpus_dir;
        (!c.is_empty()).then(|| PathBuf::from(c))
    });
    let corpus_dir = corpus_dir.ok_or_else(|| Failure::Usage(anyhow!("no corpus given (--corpus or paths.corpus)")))?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&trainer.config.out_dir));
    trainer.config.corpus_dir = corpus_dir.display().to_string();
    trainer.config.out_dir = out.display().to_string();
    let corpus = read_corpus(&corpus_dir)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), trainer.config.to_text())?;
    let mut metrics = append_csv(&out.join("metrics.csv"), &METRICS_HEADER)?;
    let report = trainer::train(&mut trainer, &corpus.train, &corpus.validation, Some(&out), threads(args.threads), |m: &EpochMetrics| {
        let row = [m.epoch.to_string(), m.train_loss.to_string(), m.val_cer.to_string()];
        metrics.write_record(&row).map_err(|e| scrawl::Error::Io(e.into()))?;
        Ok(metrics.flush()?)
    })?;
    if let Some(best) = report.best {
        println!("best epoch {} validation CER {:.2}", best.epoch, best.val_cer);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let config = if args.config.is_empty() { None } else { Some(args.config.resolve().usage()?) };
    let trainer = load_checkpoint(&args.checkpoint, config)?;
    let corpus = read_corpus(&args.corpus)?;
    let samples = corpus.split(&args.split).usage()?;
    if samples.is_empty() {
        return Err(Failure::Usage(anyhow!("split `{}` is empty", args.split)));
    }
    let eval = trainer.evaluate(samples, threads(args.threads))?;
    let dir = match args.out {
        Some(d) => d,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("eval-{}.csv", args.split));
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SAMPLE_HEADER)?;
    for ((s, hyp), d) in samples.iter().zip(&eval.hypotheses).zip(&eval.report.distances) {
        w.write_record([s.id.as_str(), s.text.as_str(), hyp.as_str(), &d.to_string()])?;
    }
    w.flush()?;
    println!("CER {:.2}", eval.report.cer);
    Ok(())
}

fn read_line_image(path: &Path) -> Result<scrawl::corpus::ImageLine, Failure> {
    let raw = RawImage::load_pgm(path).usage()?;
    let pre = preprocess_image(&raw).usage()?;
    if pre.blank {
        log::warn!("{} is blank", path.display());
    }
    Ok(pre.line)
}

fn cmd_transcribe(args: TranscribeArgs) -> Result<(), Failure> {
    let lines = args.images.iter().map(|p| read_line_image(p)).collect::<Result<Vec<_>, _>>()?;
    let trainer = load_checkpoint(&args.checkpoint, None)?;
    for line in &lines {
        let (text, _) = trainer.model.transcribe_text(line, trainer.config.train.max_len)?;
        println!("{text}");
    }
    Ok(())
}

fn cmd_visualize(args: VisualizeArgs) -> Result<(), Failure> {
    let line = read_line_image(&args.image)?;
    let trainer = load_checkpoint(&args.checkpoint, None)?;
    let (text, decoded) = trainer.model.transcribe_text(&line, trainer.config.train.max_len)?;
    let trace = &decoded.trace;
    if let Some(&s) = args.steps.iter().find(|&&s| s >= trace.steps()) {
        return Err(Failure::Usage(anyhow!("step {s} outside the {} decoded steps", trace.steps())));
    }
    fs::create_dir_all(&args.out)?;
    render_attention_matrix(trace)?.image.save_pgm(&args.out.join("attention.pgm"))?;
    let steps: Vec<usize> = if args.steps.is_empty() { (0..trace.steps()).collect() } else { args.steps };
    for t in steps {
        overlay_attention(&line, trace, t)?.save_pgm(&args.out.join(format!("overlay-{t:03}.pgm")))?;
    }
    line.pixels.save_pgm(&args.out.join("input.pgm"))?;
    fs::write(args.out.join("transcription.txt"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let counts = [args.train, args.validation, args.test];
    let cfg = SynthConfig {
        seed: args.seed,
        count: counts.iter().sum(),
        charset: args.charset,
        min_len: args.min_len,
        max_len: args.max_len,
        ..SynthConfig::small(args.seed, 0)
    };
    let mut samples = synth_generate(&cfg).usage()?.into_iter();
    let mut corpus = Corpus::default();
    let [train, validation, test] = counts;
    corpus.train = samples.by_ref().take(train).collect();
    corpus.validation = samples.by_ref().take(validation).collect();
    corpus.test = samples.collect();
    debug_assert_eq!(corpus.test.len(), test);
    write_corpus(&args.out, &corpus)?;
    println!("wrote {train}/{validation}/{test} {}/{}/{} lines to {}", SPLITS[0], SPLITS[1], SPLITS[2], args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Transcribe(a) => cmd_transcribe(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
