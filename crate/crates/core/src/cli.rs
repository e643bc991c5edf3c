//! Command-line entry point: encode, decode, stats, train, generate, eval,
//! plot.
//!
//! The config file fixes every hyperparameter; flags and `--set` entries
//! override it. Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::codec::{
    decode, encode_with_stats, read_tokens, write_tokens, CodecConfig, EncodeStats, NoteTuple, Stream, TokenStreams,
    TokenWriter,
};
use crate::config::{Config, ConfigError};
use crate::eval::{
    density_csv, density_stability, density_svg, note_density, parse_density_csv, pitch_csv, pitch_distribution,
};
use crate::fsutil::{write_atomic, AtomicFile};
use crate::midi::{parse_midi, write_midi, MidiScore};
use crate::model::Model;
use crate::sampler::{generate_into, SampleError};
use crate::tensor::Checkpoint;
use crate::train::{TrainError, Trainer};

/// Environment variable holding the log filter (`error` .. `trace`).
pub const LOG_ENV: &str = "MTXL_LOG";

pub const TOKEN_EXT: &str = "jsonl";

#[derive(Debug, Parser)]
#[command(name = "mtxl", version, about = "Tempo-free piano modeling with four coupled Transformer-XL networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MIDI files (a file or a directory) to token files plus a corpus report.
    Encode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token file to MIDI.
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decoding tempo in bpm.
        #[arg(long)]
        tempo: Option<f64>,
    },
    /// Corpus report for token files or directories of them.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a directory of token files (or train/ and valid/ subdirectories).
    Train {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Sample from a checkpoint into a .mid or token file.
    Generate {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of notes to generate after the prime.
        #[arg(long)]
        notes: Option<usize>,
        /// MIDI or token file whose notes start the sequence.
        #[arg(long)]
        prime: Option<PathBuf>,
        /// Decoding tempo in bpm for .mid output.
        #[arg(long)]
        tempo: Option<f64>,
        /// Argmax instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Note-density and pitch-distribution CSVs for MIDI or token files.
    Eval {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Density window in seconds.
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        /// Decoding tempo for token inputs.
        #[arg(long)]
        tempo: Option<f64>,
        /// Seconds over which to compare first- and last-quarter density.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 60)]
        pitch_low: u8,
        #[arg(long, default_value_t = 71)]
        pitch_high: u8,
    },
    /// SVG chart of density CSVs written by `eval`.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            SampleError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print and succeed.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn effective_config(global: &GlobalArgs) -> Result<Config, CliError> {
    let base = match &global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&global.overrides)?;
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
    }
    cfg.codec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.sampler.validate()?;
    if cfg.model.vocab_sizes != cfg.codec.vocab_sizes() {
        return Err(CliError::Usage(format!(
            "model.vocab_sizes {:?} does not match codec.max_ticks {} (expected {:?})",
            cfg.model.vocab_sizes,
            cfg.codec.max_ticks,
            cfg.codec.vocab_sizes()
        )));
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Encode { input, out } => cmd_encode(&input, &out, &cfg.codec).map(|_| ()),
        Command::Decode { input, out, tempo } => cmd_decode(&input, &out, &with_tempo(cfg.codec, tempo)?),
        Command::Stats { inputs, out } => cmd_stats(&inputs, out.as_deref()),
        Command::Train { corpus, out, resume } => cmd_train(&corpus, &out, &cfg, resume),
        Command::Generate {
            checkpoint,
            out,
            notes,
            prime,
            tempo,
            greedy,
        } => {
            let mut cfg = cfg;
            cfg.codec = with_tempo(cfg.codec, tempo)?;
            if let Some(n) = notes {
                cfg.sampler.notes = n;
            }
            cfg.sampler.greedy |= greedy;
            cmd_generate(&checkpoint, &out, prime.as_deref(), &cfg)
        }
        Command::Eval {
            inputs,
            out,
            window,
            tempo,
            horizon,
            pitch_low,
            pitch_high,
        } => cmd_eval(
            &inputs,
            &out,
            &EvalOptions {
                window,
                horizon,
                pitch_low,
                pitch_high,
                codec: with_tempo(cfg.codec, tempo)?,
            },
        ),
        Command::Plot { inputs, out } => cmd_plot(&inputs, &out),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn with_tempo(mut codec: CodecConfig, tempo: Option<f64>) -> Result<CodecConfig, CliError> {
    if let Some(t) = tempo {
        codec.default_tempo = t;
        codec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(codec)
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn is_midi(p: &Path) -> bool {
    has_ext(p, &["mid", "midi"])
}

/// Files under `input` (itself if a file) with one of `exts`, sorted.
fn list_files(input: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(data(input.display()))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_ext(p, exts))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    name.strip_suffix(".tokens.jsonl")
        .or_else(|| name.rsplit_once('.').map(|(s, _)| s))
        .unwrap_or(name)
        .to_string()
}

/// Applies `f` to every item on a small worker pool; results keep input
/// order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}

pub fn read_midi_file(path: &Path) -> Result<MidiScore, CliError> {
    let bytes = fs::read(path).map_err(data(path.display()))?;
    parse_midi(&bytes).map_err(data(path.display()))
}

pub fn read_token_file(path: &Path) -> Result<TokenStreams, CliError> {
    let f = fs::File::open(path).map_err(data(path.display()))?;
    let (_, streams) = read_tokens(BufReader::new(f)).map_err(data(path.display()))?;
    Ok(streams)
}

fn write_token_file(path: &Path, streams: &TokenStreams, codec: &CodecConfig) -> Result<(), CliError> {
    let buf = write_tokens(Vec::new(), streams, codec).map_err(data(path.display()))?;
    write_atomic(path, &buf).map_err(data(path.display()))
}

/// Distinct tokens used per stream, and the largest token per stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Coverage {
    pub distinct: [usize; 4],
    pub vocab_sizes: [usize; 4],
    pub max_token: [u32; 4],
}

fn coverage<'a>(files: impl IntoIterator<Item = &'a TokenStreams>, vocab_sizes: [usize; 4]) -> Coverage {
    let mut seen: [BTreeSet<u32>; 4] = Default::default();
    for f in files {
        for s in Stream::ALL {
            seen[s.index()].extend(f.stream(s).iter().copied());
        }
    }
    Coverage {
        distinct: std::array::from_fn(|s| seen[s].len()),
        vocab_sizes,
        max_token: std::array::from_fn(|s| seen[s].last().copied().unwrap_or(0)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncodeReport {
    pub files: Vec<String>,
    pub skipped: Vec<Skipped>,
    pub stats: EncodeStats,
    pub coverage: Coverage,
    pub warnings: usize,
}

pub fn cmd_encode(input: &Path, out: &Path, codec: &CodecConfig) -> Result<EncodeReport, CliError> {
    let files = list_files(input, &["mid", "midi"])?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no input files in {}", input.display())));
    }
    let results = par_map(&files, |path| -> Result<(TokenStreams, EncodeStats, usize), CliError> {
        let score = read_midi_file(path)?;
        let (streams, stats) = encode_with_stats(&score, codec).map_err(data(path.display()))?;
        let dest = out.join(format!("{}.tokens.{TOKEN_EXT}", stem(path)));
        write_token_file(&dest, &streams, codec)?;
        Ok((streams, stats, score.warnings.len()))
    });
    let mut report = EncodeReport {
        files: Vec::new(),
        skipped: Vec::new(),
        stats: EncodeStats::default(),
        coverage: Coverage::default(),
        warnings: 0,
    };
    let mut encoded = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok((streams, stats, warnings)) => {
                report.files.push(path.display().to_string());
                report.stats.merge(&stats);
                report.warnings += warnings;
                encoded.push(streams);
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                report.skipped.push(Skipped {
                    file: path.display().to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    report.coverage = coverage(&encoded, codec.vocab_sizes());
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&out.join("report.json"), json.as_bytes()).map_err(data(out.display()))?;
    info!(
        "encoded {} of {} files: {} notes, max on2on {} ticks, max on2off {} ticks, clamped {}/{}",
        report.files.len(),
        files.len(),
        report.stats.notes,
        report.stats.max_on2on_ticks,
        report.stats.max_on2off_ticks,
        report.stats.clamped_on2on,
        report.stats.clamped_on2off
    );
    if report.files.is_empty() {
        return Err(CliError::Data(format!("all {} input files failed", files.len())));
    }
    Ok(report)
}

fn cmd_decode(input: &Path, out: &Path, codec: &CodecConfig) -> Result<(), CliError> {
    let streams = read_token_file(input)?;
    let score = decode(&streams, codec);
    let bytes = write_midi(&score).map_err(data(out.display()))?;
    write_atomic(out, &bytes).map_err(data(out.display()))?;
    info!("wrote {} notes to {}", score.notes.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub files: usize,
    pub tuples: usize,
    pub coverage: Coverage,
    /// Tuples whose time fields sit at the clamp ceiling.
    pub at_max_on2on: usize,
    pub at_max_on2off: usize,
}

fn cmd_stats(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut files = Vec::new();
    for i in inputs {
        files.extend(list_files(i, &[TOKEN_EXT])?);
    }
    if files.is_empty() {
        return Err(CliError::Data("no input files".into()));
    }
    let streams = files.iter().map(|f| read_token_file(f)).collect::<Result<Vec<_>, _>>()?;
    let vocab = streams[0].vocab_sizes();
    let ceiling = |s: Stream| (vocab[s.index()] - 1) as u32;
    let count_at = |s: Stream| -> usize {
        streams
            .iter()
            .map(|f| f.stream(s).iter().filter(|&&t| t == ceiling(s)).count())
            .sum()
    };
    let stats = CorpusStats {
        files: files.len(),
        tuples: streams.iter().map(TokenStreams::len).sum(),
        coverage: coverage(&streams, vocab),
        at_max_on2on: count_at(Stream::On2On),
        at_max_on2off: count_at(Stream::On2Off),
    };
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    println!("{json}");
    if let Some(p) = out {
        write_atomic(p, json.as_bytes()).map_err(data(p.display()))?;
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<TokenStreams>, CliError> {
    list_files(dir, &[TOKEN_EXT])?.iter().map(|f| read_token_file(f)).collect()
}

/// Training and validation files. A corpus with a `train/` directory uses
/// it and `valid/`; otherwise the last `valid_fraction` of the sorted files
/// is held out.
pub fn split_corpus(dir: &Path, valid_fraction: f64) -> Result<(Vec<TokenStreams>, Vec<TokenStreams>), CliError> {
    let train_dir = dir.join("train");
    if train_dir.is_dir() {
        let valid_dir = dir.join("valid");
        let valid = if valid_dir.is_dir() { load_corpus(&valid_dir)? } else { Vec::new() };
        return Ok((load_corpus(&train_dir)?, valid));
    }
    let mut all = load_corpus(dir)?;
    let held = ((all.len() as f64 * valid_fraction).round() as usize).min(all.len().saturating_sub(1));
    let valid = all.split_off(all.len() - held);
    Ok((all, valid))
}

fn cmd_train(corpus: &Path, out: &Path, cfg: &Config, resume: bool) -> Result<(), CliError> {
    let (train, valid) = split_corpus(corpus, cfg.train.valid_fraction)?;
    if train.is_empty() {
        return Err(CliError::Data(format!("no token files in {}", corpus.display())));
    }
    info!("{} training files, {} validation files", train.len(), valid.len());
    fs::create_dir_all(out).map_err(data(out.display()))?;
    let mut trainer = if resume {
        let path = out.join("last.ckpt");
        let ck = Checkpoint::<f32>::load(&path).map_err(data(path.display()))?;
        let t = Trainer::resume(&ck, train, Some(cfg.train.steps))?;
        info!("resuming at step {}", t.step_count());
        t
    } else {
        let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
        info!("model has {} parameters", model.params().element_count());
        Trainer::new(model, cfg.train.clone(), train)?
    };
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes()).map_err(data(out.display()))?;
    let summary = trainer.run(out, &valid)?;
    if let Some(last) = summary.last {
        info!(
            "finished {} steps in {:.1} s, final total {:.4}",
            summary.steps_run, summary.seconds, last.total
        );
    }
    Ok(())
}

/// Prime tuples from a MIDI or token file, or a single middle-C quarter.
pub fn load_prime(path: Option<&Path>, codec: &CodecConfig) -> Result<TokenStreams, CliError> {
    let vocab = codec.vocab_sizes();
    let streams = match path {
        None => TokenStreams::from_tuples(&[NoteTuple::new(0, codec.ticks_per_whole / 4, 60, 80)], vocab)
            .map_err(data("default prime"))?,
        Some(p) if is_midi(p) => {
            let score = read_midi_file(p)?;
            encode_with_stats(&score, codec).map_err(data(p.display()))?.0
        }
        Some(p) => read_token_file(p)?,
    };
    if streams.is_empty() {
        return Err(CliError::Data("prime has no notes".into()));
    }
    Ok(streams)
}

fn cmd_generate(checkpoint: &Path, out: &Path, prime: Option<&Path>, cfg: &Config) -> Result<(), CliError> {
    let ck = Checkpoint::<f32>::load(checkpoint).map_err(data(checkpoint.display()))?;
    let model = Model::from_checkpoint(&ck).map_err(data(checkpoint.display()))?;
    if model.config().vocab_sizes != cfg.codec.vocab_sizes() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary {:?} does not match codec {:?}",
            model.config().vocab_sizes,
            cfg.codec.vocab_sizes()
        )));
    }
    let prime = load_prime(prime, &cfg.codec)?;
    let stats = if is_midi(out) {
        let mut all = prime.clone();
        let stats = generate_into(&model, &prime, &cfg.sampler, |t| all.push(t))?;
        let bytes = write_midi(&decode(&all, &cfg.codec)).map_err(data(out.display()))?;
        write_atomic(out, &bytes).map_err(data(out.display()))?;
        stats
    } else {
        let file = AtomicFile::create(out).map_err(data(out.display()))?;
        let mut w = TokenWriter::new(file, &cfg.codec).map_err(data(out.display()))?;
        for t in prime.tuples() {
            w.push(t).map_err(data(out.display()))?;
        }
        let stats = generate_into(&model, &prime, &cfg.sampler, |t| w.push(t))?;
        let file = w.finish().map_err(data(out.display()))?;
        file.commit().map_err(data(out.display()))?;
        stats
    };
    info!(
        "generated {} notes after a {}-note prime in {:.1} s ({:.0} notes/s, peak memory {} values)",
        stats.notes,
        prime.len(),
        stats.seconds,
        stats.notes_per_second(),
        stats.peak_memory_elements
    );
    Ok(())
}

pub struct EvalOptions {
    pub window: f64,
    pub horizon: Option<f64>,
    pub pitch_low: u8,
    pub pitch_high: u8,
    pub codec: CodecConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalEntry {
    pub file: String,
    pub notes: usize,
    pub seconds: f64,
    pub windows: usize,
    pub leading_mean: Option<f64>,
    pub trailing_mean: Option<f64>,
    pub stability_ratio: Option<f64>,
}

/// Reads a MIDI file, or decodes a token file at the codec tempo.
pub fn load_score(path: &Path, codec: &CodecConfig) -> Result<MidiScore, CliError> {
    if is_midi(path) {
        read_midi_file(path)
    } else {
        Ok(decode(&read_token_file(path)?, codec))
    }
}

pub fn cmd_eval(inputs: &[PathBuf], out: &Path, opts: &EvalOptions) -> Result<(), CliError> {
    let mut files = Vec::new();
    for i in inputs {
        files.extend(list_files(i, &["mid", "midi", TOKEN_EXT])?);
    }
    if files.is_empty() {
        return Err(CliError::Data("no input files".into()));
    }
    let scores = par_map(&files, |f| load_score(f, &opts.codec)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::new();
    for (path, score) in files.iter().zip(&scores) {
        let profile = note_density(score, opts.window).map_err(|e| CliError::Usage(e.to_string()))?;
        let dest = out.join(format!("{}.density.csv", stem(path)));
        write_atomic(&dest, density_csv(&profile).as_bytes()).map_err(data(dest.display()))?;
        let stability = match opts.horizon {
            Some(h) => Some(density_stability(&profile, h).map_err(data(path.display()))?),
            None => None,
        };
        if let Some(s) = stability {
            info!(
                "{}: density {:.2} -> {:.2} per window, ratio {:.3}",
                path.display(),
                s.leading_mean,
                s.trailing_mean,
                s.ratio
            );
        }
        entries.push(EvalEntry {
            file: path.display().to_string(),
            notes: score.notes.len(),
            seconds: score.duration(),
            windows: profile.counts.len(),
            leading_mean: stability.map(|s| s.leading_mean),
            trailing_mean: stability.map(|s| s.trailing_mean),
            stability_ratio: stability.map(|s| s.ratio),
        });
    }
    let hist = pitch_distribution(&scores, opts.pitch_low..=opts.pitch_high).map_err(|e| CliError::Usage(e.to_string()))?;
    let dest = out.join("pitch.csv");
    write_atomic(&dest, pitch_csv(&hist).as_bytes()).map_err(data(dest.display()))?;
    let json = serde_json::to_string_pretty(&entries).expect("summary serializes");
    let dest = out.join("summary.json");
    write_atomic(&dest, json.as_bytes()).map_err(data(dest.display()))?;
    info!("evaluated {} files into {}", files.len(), out.display());
    Ok(())
}

fn cmd_plot(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut series = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).map_err(data(p.display()))?;
        let profile = parse_density_csv(&text).map_err(data(p.display()))?;
        let label = stem(p);
        series.push((label.strip_suffix(".density").unwrap_or(&label).to_string(), profile));
    }
    write_atomic(out, density_svg(&series).as_bytes()).map_err(data(out.display()))
}
