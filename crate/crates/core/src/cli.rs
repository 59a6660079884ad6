//! The `cdface` command-line tool.
//!
//! Every command is deterministic given its flags and seeds. Failures print a
//! diagnostic and exit with 1 (contract or argument violation) or 2 (IO,
//! format or configuration problem).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{align_to_motion, check_duration, provider, AudioFeatureSequence, ProviderKind};
use crate::container::{Container, ContainerWriter};
use crate::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusConfig, Split, CLIP_KIND};
use crate::error::{Error, Result};
use crate::geometry::MotionSequence;
use crate::metrics::{self, MetricReport, MESH_UNITS};
use crate::querier::{CdfaceModel, LipSource, Rollout};
use crate::report;
use crate::tensor::Matrix;
use crate::trainer::{self, Checkpoint, RunLog, TrainConfig};

pub const DATA_ROOT_ENV: &str = "CDFACE_DATA_ROOT";
pub const SAMPLE_KIND: &str = "motion-sample";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "cdface", version, about = "Diverse, closure-aware speech-driven facial motion synthesis")]
pub struct Cli {
    /// Default location of the corpus (`<root>/corpus`).
    #[arg(long, env = DATA_ROOT_ENV, default_value = "data", global = true)]
    pub data_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-style corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the lip and upper-face VQ priors.
    TrainPrior(TrainPriorArgs),
    /// Train the code queriers on frozen priors.
    TrainQuery(TrainQueryArgs),
    /// Roll out N^l·N^u samples for one audio track.
    Synthesize(SynthesizeArgs),
    /// Keep one lip track fixed and vary the upper face.
    Control(ControlArgs),
    /// Full metric battery against corpus ground truth.
    Evaluate(EvaluateArgs),
    /// Merge metric tables and emit aperture and loss curves as TSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of speaking styles (subjects).
    #[arg(long, default_value_t = 2)]
    pub styles: usize,
    /// Sentences, each rendered in every style.
    #[arg(long, default_value_t = 20)]
    pub sentences: usize,
    /// Vertex count V.
    #[arg(long, default_value_t = 30)]
    pub vertices: usize,
    /// Motion frame rate.
    #[arg(long, default_value_t = 25.0)]
    pub fps: f64,
    /// Closure threshold in mesh units.
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Frames per clip.
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    /// Output directory [default: <data-root>/corpus].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus directory [default: <data-root>/corpus].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    /// TOML training configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this prior checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainQueryArgs {
    /// TOML training configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Prior checkpoint (kept frozen).
    #[arg(long)]
    pub prior: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this query checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AudioArgs {
    /// Query checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clip container or precomputed feature container.
    #[arg(long)]
    pub audio: PathBuf,
    /// Feature provider [default: chosen from the container kind].
    #[arg(long)]
    pub provider: Option<ProviderKind>,
    /// Style index or subject name; unknown subjects use the fallback style.
    #[arg(long, default_value = "0")]
    pub style: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub audio: AudioArgs,
    /// Lip samples N^l.
    #[arg(long, default_value_t = 1)]
    pub nl: usize,
    /// Upper-face samples per lip sample N^u.
    #[arg(long, default_value_t = 1)]
    pub nu: usize,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[command(flatten)]
    pub audio: AudioArgs,
    /// Lip head index, or a sample directory written by `synthesize`.
    #[arg(long)]
    pub fix_lip_from: String,
    /// Upper-face variants N^u.
    #[arg(long, default_value_t = 2)]
    pub nu: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Query checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Lip samples per clip [default: trained N^l].
    #[arg(long)]
    pub nl: Option<usize>,
    /// Upper samples per lip sample [default: trained N^u].
    #[arg(long)]
    pub nu: Option<usize>,
    /// Worker threads across clips.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `label=dir`; the directory may hold report.json, apertures.tsv and
    /// log.jsonl (any subset). Repeatable.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
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

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&root, a),
        Command::TrainPrior(a) => train_prior(&root, a),
        Command::TrainQuery(a) => train_query(&root, a),
        Command::Synthesize(a) => synthesize(a),
        Command::Control(a) => control(a),
        Command::Evaluate(a) => evaluate(&root, a),
        Command::Report(a) => report_cmd(a),
    }
}

fn corpus_path(root: &Path, arg: &CorpusArg) -> PathBuf {
    arg.corpus.clone().unwrap_or_else(|| root.join("corpus"))
}

fn gen_corpus(root: &Path, a: GenCorpusArgs) -> Result<()> {
    let cfg = CorpusConfig {
        seed: a.seed,
        styles: a.styles,
        sentences: a.sentences,
        vertices: a.vertices,
        fps: a.fps,
        epsilon: a.epsilon,
        frames: a.frames,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    let out = a.out.unwrap_or_else(|| root.join("corpus"));
    save_corpus(&out, &corpus)?;
    println!(
        "wrote {} clips ({} train, {} test) to {}",
        corpus.clips.len(),
        corpus.split(Split::Train).count(),
        corpus.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

fn train_prior(root: &Path, a: TrainPriorArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let corpus = load_corpus(&corpus_path(root, &a.corpus))?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut log = RunLog::to_file(a.out.join(LOG_FILE));
    let ckpt = trainer::train_prior(&config, &corpus, resume.as_ref(), &mut log)?;
    ckpt.save(&a.out)?;
    println!("prior checkpoint {} (prior hash {})", a.out.display(), ckpt.prior_checksum);
    Ok(())
}

fn train_query(root: &Path, a: TrainQueryArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let corpus = load_corpus(&corpus_path(root, &a.corpus))?;
    let priors = Checkpoint::load(&a.prior)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut log = RunLog::to_file(a.out.join(LOG_FILE));
    let ckpt = trainer::train_query(&config, &corpus, &priors, resume.as_ref(), &mut log)?;
    ckpt.save(&a.out)?;
    println!("query checkpoint {} (prior hash {})", a.out.display(), ckpt.prior_checksum);
    Ok(())
}

/// Audio features aligned to the checkpoint's frame rate.
pub fn load_audio(path: &Path, kind: Option<ProviderKind>, fps: f64) -> Result<Matrix> {
    let kind = match kind {
        Some(k) => k,
        None => match Container::read(path)?.kind() {
            CLIP_KIND => ProviderKind::Synthetic,
            _ => ProviderKind::Precomputed,
        },
    };
    let features: AudioFeatureSequence = provider(kind).extract(path)?;
    let frames = (features.duration() * fps).round().max(1.0) as usize;
    check_duration(&features, fps, frames)?;
    align_to_motion(&features, fps, frames)
}

/// Resolves `--style`: an index into the trained style table, or a subject
/// name (unknown names fall back to the configured style).
pub fn resolve_style(model: &CdfaceModel, style: &str) -> Result<usize> {
    let n = model.lip.styles().len();
    match style.parse::<usize>() {
        Ok(i) if i < n => Ok(i),
        Ok(i) => Err(Error::invalid(format!("style {i} outside the {n} trained styles"))),
        Err(_) => model.style_index(Some(style)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleMeta {
    fps: f64,
    style: usize,
    lip: usize,
    upper: usize,
}

/// One synthesized sample: full-face offsets plus the codes behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub motion: MotionSequence,
    pub lip_codes: Matrix,
    pub upper_codes: Matrix,
    pub lip: usize,
    pub upper: usize,
    pub style: usize,
}

pub fn save_sample(dir: &Path, s: &SampleFile) -> Result<()> {
    ContainerWriter::new(SAMPLE_KIND)
        .meta(&SampleMeta {
            fps: s.motion.fps(),
            style: s.style,
            lip: s.lip,
            upper: s.upper,
        })?
        .matrix("offsets", s.motion.offsets())
        .matrix("lip_codes", &s.lip_codes)
        .matrix("upper_codes", &s.upper_codes)
        .write(dir)?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<SampleFile> {
    let c = Container::read(dir)?;
    c.expect_kind(SAMPLE_KIND)?;
    let meta: SampleMeta = c.meta()?;
    Ok(SampleFile {
        motion: MotionSequence::new(c.matrix("offsets")?, meta.fps)?,
        lip_codes: c.matrix("lip_codes")?,
        upper_codes: c.matrix("upper_codes")?,
        lip: meta.lip,
        upper: meta.upper,
        style: meta.style,
    })
}

/// Writes one sample directory per face (`sample_<i>_<j>`) and returns
/// their paths.
pub fn write_rollout(out: &Path, rollout: &Rollout, style: usize) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(rollout.faces.len());
    for (k, face) in rollout.faces.iter().enumerate() {
        let lineage = rollout.upper.lineage[k];
        let parent = rollout
            .lip
            .lineage
            .iter()
            .position(|l| l.lip == lineage.lip)
            .expect("upper samples come from listed lip samples");
        let j = lineage.upper.expect("upper samples carry an upper head");
        let dir = out.join(format!("sample_{}_{}", lineage.lip, j));
        save_sample(
            &dir,
            &SampleFile {
                motion: face.clone(),
                lip_codes: rollout.lip.codes[parent].clone(),
                upper_codes: rollout.upper.codes[k].clone(),
                lip: lineage.lip,
                upper: j,
                style,
            },
        )?;
        paths.push(dir);
    }
    Ok(paths)
}

/// APD, UPD, LPD and MPD of a sample set; a single sample is compared with
/// itself.
pub fn diversity_report(faces: &[MotionSequence], ckpt: &Checkpoint) -> Result<MetricReport> {
    let pairable: Vec<MotionSequence> = if faces.len() == 1 {
        vec![faces[0].clone(), faces[0].clone()]
    } else {
        faces.to_vec()
    };
    let mut r = MetricReport::new(faces.len(), &ckpt.partition);
    r.clip_count = 1;
    r.insert("APD", metrics::apd(&pairable)?, MESH_UNITS);
    r.insert("UPD", metrics::upd(&pairable, &ckpt.partition)?, MESH_UNITS);
    r.insert("LPD", metrics::lpd(&pairable, &ckpt.partition)?, MESH_UNITS);
    r.insert("MPD", metrics::mpd(&pairable)?, MESH_UNITS);
    Ok(r)
}

fn write_report(out: &Path, r: &MetricReport) -> Result<()> {
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    let p = out.join(report::REPORT_JSON);
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let p = out.join(report::REPORT_TSV);
    std::fs::write(&p, r.to_tsv()).map_err(|e| Error::io(&p, e))
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.audio.checkpoint)?;
    let (store, model) = ckpt.model()?;
    let audio = load_audio(&a.audio.audio, a.audio.provider, ckpt.fps)?;
    let style = resolve_style(&model, &a.audio.style)?;
    let rollout = model.rollout(&store, &audio, style, a.nl, a.nu, audio.rows(), ckpt.fps)?;
    let paths = write_rollout(&a.audio.out, &rollout, style)?;
    let r = diversity_report(&rollout.faces, &ckpt)?;
    write_report(&a.audio.out, &r)?;
    println!("wrote {} samples to {}\n{}", paths.len(), a.audio.out.display(), r.to_text());
    Ok(())
}

/// Parses `--fix-lip-from`: a head index or a sample directory.
pub fn lip_source(source: &str) -> Result<LipSource> {
    if let Ok(k) = source.parse::<usize>() {
        return Ok(LipSource::Sample(k));
    }
    Ok(LipSource::Codes(load_sample(Path::new(source))?.lip_codes))
}

fn control(a: ControlArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.audio.checkpoint)?;
    let (store, model) = ckpt.model()?;
    let audio = load_audio(&a.audio.audio, a.audio.provider, ckpt.fps)?;
    let style = resolve_style(&model, &a.audio.style)?;
    let rollout = model.control(&store, &audio, style, lip_source(&a.fix_lip_from)?, a.nu, ckpt.fps)?;
    let r = diversity_report(&rollout.faces, &ckpt)?;
    let lpd = r.get("LPD").expect("inserted above");
    if lpd != 0.0 {
        return Err(Error::Contract(format!("control mode produced LPD = {lpd:e}, expected exactly 0")));
    }
    let paths = write_rollout(&a.audio.out, &rollout, style)?;
    write_report(&a.audio.out, &r)?;
    println!("wrote {} samples sharing one lip track to {}\n{}", paths.len(), a.audio.out.display(), r.to_text());
    Ok(())
}

fn evaluate(root: &Path, a: EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus: Corpus = load_corpus(&corpus_path(root, &a.corpus))?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::invalid(format!("unknown split {other:?} (train or test)"))),
    };
    let nl = a.nl.unwrap_or(ckpt.config.querier.lip_samples);
    let nu = a.nu.unwrap_or(ckpt.config.querier.upper_samples);
    let eval = trainer::evaluate(&ckpt, &corpus, split, nl, nu, a.threads)?;
    report::write_evaluation(&a.out, &eval)?;
    println!("{}", eval.report.to_text());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut metric_runs = Vec::new();
    let mut aperture_runs = Vec::new();
    let mut loss_runs = Vec::new();
    for run in &a.runs {
        let (label, dir) = run
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--run expects label=dir, got {run:?}")))?;
        let dir = Path::new(dir);
        let mut found = false;
        if dir.join(report::REPORT_JSON).exists() {
            metric_runs.push((label.to_string(), report::read_report(dir)?));
            found = true;
        }
        if dir.join(report::APERTURES_TSV).exists() {
            aperture_runs.push((label.to_string(), report::read_apertures(dir)?));
            found = true;
        }
        if dir.join(LOG_FILE).exists() {
            loss_runs.push((label.to_string(), RunLog::read(&dir.join(LOG_FILE))?));
            found = true;
        }
        if !found {
            return Err(Error::config(format!("{} holds no report, aperture table or log", dir.display())));
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outputs = [
        ("metrics.tsv", report::merge_metric_tables(&metric_runs)),
        ("aperture_curves.tsv", report::aperture_table(&aperture_runs)),
        ("loss_curves.tsv", report::loss_curve_table(&loss_runs)),
    ];
    for (name, text) in outputs {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
