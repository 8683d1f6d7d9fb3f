//! Command-line driver: dataset synthesis, training, sampling, evaluation and
//! frame export.
//!
//! Errors are printed as one line, `error kind=<kind> ... msg="<text>"`, and
//! map to exit codes 2 (usage), 3 (training divergence) and 1 (everything
//! else, including I/O failures, which also carry `path=`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use bigraphdiff::data::{generate_synthetic_dataset, read_sequences, write_sequences, SynthSpec};
use bigraphdiff::metrics::{evaluate_all, train_classifier, ClassifierConfig, EvalReport, EvalSuite};
use bigraphdiff::sampler::{stream_rng, train_model, DOMAIN_SAMPLE};
use bigraphdiff::{Checkpoint, Error, LabeledDataset, MotionSequence, Split, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

const OVERRIDE_HELP: &str = "\
Overrides (--set key=value) patch the chosen preset before training:
  training:  T (alias diffusion_steps; also resets beta_start/beta_end), beta_start, beta_end,
             lr, batch_size, epochs, seed, checkpoint_every
  denoiser:  num_layers, num_heads, d_l, text_layers, text_heads, max_len, joints, bigraph,
             graph_len, graph_channels, share_stream_weights, dropout
Presets:
  desk   T=100, 2 layers, 4 heads, d_l=64, lr 1e-3, batch 16, 150 epochs
  paper  T=1000, 8 layers, 8 heads, text encoder 4 layers/4 heads, lr 1e-4, batch 128, 1500 epochs";

#[derive(Debug, Parser)]
#[command(name = "bigraphdiff", version, about = "Two-person skeleton interaction diffusion", after_help = OVERRIDE_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural labeled dataset as JSON lines.
    Synth(SynthArgs),
    /// Train a denoiser on the train split of a dataset.
    #[command(after_help = OVERRIDE_HELP)]
    Train(TrainArgs),
    /// Generate sequences for one class label.
    Sample(SampleArgs),
    /// Score checkpoints or generated sets against a dataset's test split.
    Eval(EvalArgs),
    /// Dump every frame of a sequence file as its own JSON document.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// `default` or a JSON file with the generator settings.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the seed in the settings.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from this checkpoint (same configuration, more epochs).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step loss as CSV [default: <out>.loss.csv].
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    label: String,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Directory receiving `samples.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectories advanced together per model call.
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to sample from, one generated sequence per test sequence;
    /// repeatable for side-by-side variants.
    #[arg(long)]
    ckpt: Vec<PathBuf>,
    /// Already generated sequence file to score; repeatable. Its test
    /// split is used when it has one.
    #[arg(long)]
    generated: Vec<PathBuf>,
    /// Dataset whose train split fits the classifier and whose test split
    /// is the reference.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-class accuracy table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Classifier training epochs.
    #[arg(long, default_value_t = ClassifierConfig::default().epochs)]
    classifier_epochs: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory receiving `seqNNNN_frameNNNN.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io { path: PathBuf, msg: String },
    Diverged { step: u64, checkpoint: PathBuf },
    Core { path: Option<PathBuf>, source: Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Io { .. } | CliError::Core { .. } => 1,
        }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let q = |s: &str| Value::String(s.to_string()).to_string();
        let p = |p: &Path| q(&p.display().to_string());
        match self {
            CliError::Usage(m) => format!("error kind=usage msg={}", q(m)),
            CliError::Io { path, msg } => format!("error kind=io path={} msg={}", p(path), q(msg)),
            CliError::Diverged { step, checkpoint } => {
                format!("error kind=diverged step={step} checkpoint={}", p(checkpoint))
            }
            CliError::Core { path, source } => {
                let at = path.as_deref().map(|x| format!(" path={}", p(x))).unwrap_or_default();
                format!("error kind={}{at} msg={}", kind(source), q(&source.to_string()))
            }
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } | Error::InvalidShape(_) => "shape",
        Error::Contract(_) => "contract",
        Error::Config(_) => "config",
        Error::StepOutOfRange { .. } => "step",
        Error::Vocabulary(_) => "vocabulary",
        Error::Capacity { .. } => "capacity",
        Error::Data(_) | Error::Degenerate(_) => "data",
        Error::Parse { .. } | Error::Schema(_) => "format",
        Error::Numerical(_) => "numerical",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
    }
}

type CliResult<T> = Result<T, CliError>;

/// Attaches `path` to a library error; I/O failures become [`CliError::Io`].
fn at(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(io) => CliError::Io { path: path.to_path_buf(), msg: io.to_string() },
        Error::Config(m) => CliError::Usage(m),
        other => CliError::Core { path: Some(path.to_path_buf()), source: other },
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

fn core(e: Error) -> CliError {
    match e {
        Error::Config(m) => CliError::Usage(m),
        other => CliError::Core { path: None, source: other },
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return 2;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = if a.spec == "default" {
        SynthSpec::default()
    } else {
        let path = Path::new(&a.spec);
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core {
            path: Some(path.to_path_buf()),
            source: Error::Schema(e.to_string()),
        })?
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let d = generate_synthetic_dataset(&spec).map_err(core)?;
    write_sequences(&d, &a.out).map_err(at(&a.out))
}

const DENOISER_KEYS: &[&str] = &[
    "num_layers",
    "num_heads",
    "d_l",
    "text_layers",
    "text_heads",
    "max_len",
    "joints",
    "bigraph",
    "graph_len",
    "graph_channels",
    "share_stream_weights",
    "dropout",
];
const TRAIN_KEYS: &[&str] = &["beta_start", "beta_end", "lr", "batch_size", "epochs", "seed", "checkpoint_every"];

/// Applies `key=value` pairs to `base`. The result is all-or-nothing: any
/// unknown key or unparseable value leaves `base` untouched and names the
/// offending key. `T` is applied first, so explicit beta endpoints win over
/// the defaults it resets.
pub fn parse_overrides(base: &TrainConfig, pairs: &[String]) -> Result<TrainConfig, CliError> {
    let mut parsed: Vec<(&str, &str)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{p}` is not key=value")))?;
        parsed.push((k.trim(), v.trim()));
    }
    let mut cfg = base.clone();
    for &(k, v) in parsed.iter().filter(|(k, _)| matches!(*k, "T" | "diffusion_steps")) {
        let steps: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("override `{k}`: `{v}` is not a step count")))?;
        cfg.set_steps(steps);
    }
    let mut root = serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    for &(k, v) in parsed.iter().filter(|(k, _)| !matches!(*k, "T" | "diffusion_steps")) {
        let slot = if TRAIN_KEYS.contains(&k) {
            &mut root[k]
        } else if DENOISER_KEYS.contains(&k) {
            &mut root["denoiser"][k]
        } else {
            return Err(CliError::Usage(format!("unknown override key `{k}`")));
        };
        let value: Value = serde_json::from_str(v).map_err(|_| CliError::Usage(format!("override `{k}`: cannot parse `{v}`")))?;
        *slot = value;
        serde_json::from_value::<TrainConfig>(root.clone())
            .map_err(|_| CliError::Usage(format!("override `{k}`: `{v}` has the wrong type")))?;
    }
    serde_json::from_value(root).map_err(|e| CliError::Usage(e.to_string()))
}

fn read_dataset(path: &Path) -> CliResult<LabeledDataset> {
    read_sequences(path).map_err(at(path))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let base = TrainConfig::preset(&a.preset).map_err(core)?;
    let cfg = parse_overrides(&base, &a.overrides)?;
    let data = read_dataset(&a.data)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(at(p))?),
        None => None,
    };
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| sibling(&a.out, ".loss.csv"));
    let mut saved = None;
    let result = train_model(&data, &cfg, resume, |c| {
        c.save(&a.out)?;
        c.write_loss_csv(&loss_csv)?;
        saved = Some(c.epoch);
        Ok(())
    });
    match result {
        // The last epoch is always checkpointed; only a resume with nothing
        // left to train reaches here unsaved.
        Ok(c) if saved == Some(c.epoch) => Ok(()),
        Ok(c) => {
            c.save(&a.out).map_err(at(&a.out))?;
            c.write_loss_csv(&loss_csv).map_err(at(&loss_csv))
        }
        Err(Error::Diverged { step, last_good }) => {
            let path = sibling(&a.out, ".last-good");
            last_good.save(&path).map_err(at(&path))?;
            Err(CliError::Diverged { step, checkpoint: path })
        }
        Err(e) => Err(at(&a.out)(e)),
    }
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt).map_err(at(&a.ckpt))?;
    if a.count == 0 || a.frames == 0 {
        return Err(CliError::Usage("--count and --frames must be positive".into()));
    }
    if !ckpt.data.classes.contains(&a.label) {
        return Err(CliError::Usage(format!(
            "label `{}` is not one of {:?}",
            a.label, ckpt.data.classes
        )));
    }
    let labels = vec![a.label.clone(); a.count];
    let mut rng = stream_rng(a.seed, DOMAIN_SAMPLE, 0);
    let seqs = ckpt.sample_sequences(&labels, a.frames, a.batch, &mut rng).map_err(core)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let path = a.out.join("samples.jsonl");
    let n = seqs.len();
    let provenance = json!({ "checkpoint": a.ckpt.display().to_string(), "seed": a.seed });
    let d = LabeledDataset::new(seqs, vec![Split::Test; n], provenance).map_err(core)?;
    write_sequences(&d, &path).map_err(at(&path))
}

/// One generated sequence per reference sequence, same label and length,
/// batched by length.
fn sample_like(ckpt: &Checkpoint, reference: &[&MotionSequence], seed: u64, index: u64) -> CliResult<Vec<MotionSequence>> {
    let mut by_len: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for s in reference {
        by_len.entry(s.len()).or_default().push(s.label.clone());
    }
    let mut rng = stream_rng(seed, DOMAIN_SAMPLE, index);
    let mut out = Vec::with_capacity(reference.len());
    for (frames, labels) in by_len {
        out.extend(ckpt.sample_sequences(&labels, frames, 32, &mut rng).map_err(core)?);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if a.ckpt.is_empty() && a.generated.is_empty() {
        return Err(CliError::Usage("give at least one --ckpt or --generated".into()));
    }
    let data = read_dataset(&a.data)?;
    let reference = data.part(Split::Test);
    if reference.is_empty() {
        return Err(CliError::Core {
            path: Some(a.data.clone()),
            source: Error::Data("dataset has no test split".into()),
        });
    }
    let clf_cfg = ClassifierConfig { epochs: a.classifier_epochs, seed: a.seed, ..ClassifierConfig::default() };
    let clf = train_classifier(&data, &clf_cfg).map_err(at(&a.data))?;

    let mut reports: Vec<EvalReport> = Vec::new();
    for (i, path) in a.ckpt.iter().enumerate() {
        let ckpt = Checkpoint::load(path).map_err(at(path))?;
        let generated = sample_like(&ckpt, &reference, a.seed, i as u64)?;
        let refs: Vec<&MotionSequence> = generated.iter().collect();
        let provenance = json!({
            "checkpoint": path.display().to_string(),
            "epoch": ckpt.epoch,
            "step": ckpt.step,
            "bigraph": ckpt.train.denoiser.bigraph,
            "parameters": ckpt.weights.num_parameters(),
            "sampling_stream": i,
        });
        let name = path.display().to_string();
        reports.push(evaluate_all(&name, &refs, &reference, &clf, a.seed, provenance).map_err(at(path))?);
    }
    for path in &a.generated {
        let g = read_dataset(path)?;
        let test = g.part(Split::Test);
        let set = if test.is_empty() { g.sequences.iter().collect() } else { test };
        let provenance = json!({ "generated": path.display().to_string() });
        let name = path.display().to_string();
        reports.push(evaluate_all(&name, &set, &reference, &clf, a.seed, provenance).map_err(at(path))?);
    }
    let suite = EvalSuite::new(reports);
    let text = suite.to_json().map_err(core)?;
    fs::write(&a.out, text + "\n").map_err(io_at(&a.out))?;
    if let Some(csv) = &a.csv {
        suite.write_accuracy_csv(csv).map_err(at(csv))?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> CliResult<()> {
    let d = read_dataset(&a.input)?;
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    for (i, s) in d.sequences.iter().enumerate() {
        for f in 0..s.len() {
            let persons: Vec<Vec<[f64; 3]>> = (0..2)
                .map(|p| (0..s.joints()).map(|j| [0, 1, 2].map(|c| s.at(f, j, c, p))).collect())
                .collect();
            let doc = json!({
                "sequence": i,
                "frame": f,
                "label": s.label,
                "fps": s.fps,
                "torso_index": s.torso_index,
                "persons": persons,
            });
            let path = a.out.join(format!("seq{i:04}_frame{f:04}.json"));
            fs::write(&path, doc.to_string() + "\n").map_err(io_at(&path))?;
        }
    }
    Ok(())
}
