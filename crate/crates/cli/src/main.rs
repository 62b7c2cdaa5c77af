use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diia::config::{effective_toml, RunConfigFile};
use diia::data::{generate_dataset, read_dataset, read_manifest, read_split, split_path, write_dataset, Instance};
use diia::export::export_from_checkpoint;
use diia::model::Modality;
use diia::training::{
    append_metrics, ensemble_evaluate, evaluate, infer, train, train_mkd, write_metrics, Checkpoint, InferMode,
    MetricsRow, StudentInput, TrainConfig, TrainMode, TrainRun,
};
use diia::verify::{model_grad_checks, SuiteConfig};
use diia::{Error, Result};

#[derive(Parser)]
#[command(name = "diia", version, about = "Audio+text multiple-choice comprehension with inter/intra attention fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test splits and a manifest.
    GenData(GenArgs),
    /// Stage one: multimodal training or a conventional unimodal baseline.
    Train(TrainArgs),
    /// Stage two: train one distillation block against a frozen teacher.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Answer a single instance.
    Infer(InferArgs),
    /// Finite-difference check of every model gradient.
    Gradcheck(GradcheckArgs),
    /// Write inter-modality attention maps and token importance.
    ExportAttention(ExportArgs),
    /// Evaluate the averaged text+audio ensemble.
    EnsembleEval(EnsembleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Text,
    Audio,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => Modality::Passage,
            ModalityArg::Audio => Modality::Audio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InferModeArg {
    Multimodal,
    Text,
    Audio,
}

impl From<InferModeArg> for InferMode {
    fn from(m: InferModeArg) -> Self {
        match m {
            InferModeArg::Multimodal => InferMode::Multimodal,
            InferModeArg::Text => InferMode::Text,
            InferModeArg::Audio => InferMode::Audio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainModeArg {
    Multimodal,
    ConventionalText,
    ConventionalAudio,
}

impl From<TrainModeArg> for TrainMode {
    fn from(m: TrainModeArg) -> Self {
        match m {
            TrainModeArg::Multimodal => TrainMode::Multimodal,
            TrainModeArg::ConventionalText => TrainMode::ConventionalText,
            TrainModeArg::ConventionalAudio => TrainMode::ConventionalAudio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentInputArg {
    Intra,
    Inter,
}

impl From<StudentInputArg> for StudentInput {
    fn from(s: StudentInputArg) -> Self {
        match s {
            StudentInputArg::Intra => StudentInput::Intra,
            StudentInputArg::Inter => StudentInput::Inter,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Optimizer settings shared by both training stages.
#[derive(Args)]
struct Optim {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    student_input: Option<StudentInputArg>,
    /// Per-epoch metrics CSV (replaced if it exists).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl Optim {
    fn file(&self) -> Result<RunConfigFile> {
        match &self.config {
            Some(path) => RunConfigFile::load(path),
            None => Ok(RunConfigFile::default()),
        }
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.student_input {
            cfg.student_input = v.into();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    optim: Optim,
    #[arg(long, value_enum)]
    mode: Option<TrainModeArg>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint file for the best-dev model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    optim: Optim,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    #[arg(long)]
    data_dir: PathBuf,
    /// Teacher checkpoint from multimodal training.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to the mode the checkpoint was trained for.
    #[arg(long, value_enum)]
    mode: Option<InferModeArg>,
    /// Metrics CSV to append the result to.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    id: u64,
    #[arg(long, value_enum)]
    mode: Option<InferModeArg>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates per tensor; all of them when omitted.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    id: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also render SVG heatmaps.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    /// One conventional text and one conventional audio checkpoint, in either order.
    #[arg(long, num_args = 1, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn echo(train: Option<&TrainConfig>, data: Option<&diia::data::GenConfig>) {
    println!("# effective config");
    print!("{}", effective_toml(train, data));
}

fn default_mode(ck: &Checkpoint) -> InferMode {
    match ck.train.mode {
        TrainMode::Multimodal => InferMode::Multimodal,
        TrainMode::ConventionalText | TrainMode::DistillText => InferMode::Text,
        TrainMode::ConventionalAudio | TrainMode::DistillAudio => InferMode::Audio,
    }
}

fn find_instance(instances: Vec<Instance>, id: u64, split: &str) -> Result<Instance> {
    instances
        .into_iter()
        .find(|i| i.id == id)
        .ok_or_else(|| Error::Input(format!("no instance with id {id} in split `{split}`")))
}

fn finish_training(run: &TrainRun, out: &Path, metrics: Option<&Path>) -> Result<()> {
    for row in &run.metrics {
        eprintln!("{}", row.to_csv());
    }
    if let Some(path) = metrics {
        write_metrics(path, &run.metrics)?;
    }
    run.checkpoint.save(out)?;
    println!(
        "saved {} (epoch {}, dev accuracy {:.4})",
        out.display(),
        run.checkpoint.epoch,
        run.checkpoint.dev_accuracy
    );
    Ok(())
}

fn gen_data(args: GenArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let mut cfg = file.gen_config();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    cfg.validate()?;
    echo(None, Some(&cfg));
    let ds = generate_dataset(&cfg)?;
    write_dataset(&args.out, &ds, &cfg)?;
    println!(
        "wrote {} train / {} dev / {} test instances to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = args.optim.file()?.train_config();
    args.optim.apply(&mut cfg);
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if matches!(cfg.mode, TrainMode::DistillText | TrainMode::DistillAudio) {
        return Err(Error::Config(format!("mode `{}` belongs to the distill subcommand", cfg.mode.name())));
    }
    cfg.validate()?;
    let manifest = read_manifest(&args.data_dir)?;
    let dataset = read_dataset(&args.data_dir)?;
    echo(Some(&cfg), None);
    let run = train(&dataset, &cfg, manifest.generator.vocab)?;
    finish_training(&run, &args.out, args.optim.metrics.as_deref())
}

fn distill(args: DistillArgs) -> Result<()> {
    let teacher = Checkpoint::load(&args.checkpoint)?;
    let file = args.optim.file()?;
    // Architecture comes from the teacher unless the file overrides it.
    let mut cfg = TrainConfig {
        d: teacher.train.d,
        heads: teacher.train.heads,
        d_ff: teacher.train.d_ff,
        dropout: teacher.train.dropout,
        max_len: teacher.train.max_len,
        depth: teacher.train.depth,
        ..TrainConfig::default()
    };
    file.train.apply(&mut cfg);
    args.optim.apply(&mut cfg);
    let modality: Modality = args.modality.into();
    cfg.mode = match modality {
        Modality::Passage => TrainMode::DistillText,
        Modality::Audio => TrainMode::DistillAudio,
    };
    cfg.validate()?;
    let dataset = read_dataset(&args.data_dir)?;
    echo(Some(&cfg), None);
    let run = train_mkd(&dataset, &teacher, modality, &cfg)?;
    finish_training(&run, &args.out, args.optim.metrics.as_deref())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mode = args.mode.map_or_else(|| default_mode(&ck), Into::into);
    let instances = read_split(&split_path(&args.data_dir, &args.split))?;
    let report = evaluate(&args.split, &instances, &ck, mode)?;
    println!("{report}");
    if let Some(path) = &args.metrics {
        append_metrics(path, &[report.to_metrics_row(ck.epoch)])?;
    }
    Ok(())
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mode = args.mode.map_or_else(|| default_mode(&ck), Into::into);
    let inst = find_instance(read_split(&split_path(&args.data_dir, &args.split))?, args.id, &args.split)?;
    let (answer, logits) = infer(&inst, &ck, mode)?;
    let scores: Vec<String> = logits.scores.iter().map(f64::to_string).collect();
    println!(
        "id={} mode={} answer={} label={} logits=[{}]",
        inst.id,
        mode.name(),
        answer,
        inst.label,
        scores.join(",")
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = SuiteConfig {
        seed: args.seed.unwrap_or(0),
        tolerance: args.tolerance,
        samples: args.samples.unwrap_or(usize::MAX),
        ..SuiteConfig::default()
    };
    println!(
        "# d={} heads={} frames={} tokens={} seed={} tolerance={:e}",
        cfg.d, cfg.heads, cfg.frames, cfg.tokens, cfg.seed, cfg.tolerance
    );
    let reports = model_grad_checks(&cfg)?;
    let mut failed = Vec::new();
    for (name, report) in &reports {
        println!("## {name}\n{report}");
        if !report.passed() {
            failed.push(format!("{name} (max rel err {:.3e})", report.max_rel_err()));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("failed: {}", failed.join(", "))))
    }
}

fn export(args: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let inst = find_instance(read_split(&split_path(&args.data_dir, &args.split))?, args.id, &args.split)?;
    let exported = export_from_checkpoint(&ck, &inst)?;
    for path in exported.write(&args.out, args.svg)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ensemble(args: EnsembleArgs) -> Result<()> {
    let [first, second] = <[PathBuf; 2]>::try_from(args.checkpoint)
        .map_err(|v| Error::Config(format!("ensemble needs exactly two checkpoints, got {}", v.len())))?;
    let (a, b) = (Checkpoint::load(&first)?, Checkpoint::load(&second)?);
    let (text, audio) = match (a.train.mode, b.train.mode) {
        (TrainMode::ConventionalText, TrainMode::ConventionalAudio) => (a, b),
        (TrainMode::ConventionalAudio, TrainMode::ConventionalText) => (b, a),
        (x, y) => {
            return Err(Error::Config(format!(
                "ensemble needs one conventional-text and one conventional-audio checkpoint, got `{}` and `{}`",
                x.name(),
                y.name()
            )))
        }
    };
    let instances = read_split(&split_path(&args.data_dir, &args.split))?;
    let report = ensemble_evaluate(&args.split, &instances, &text, &audio)?;
    println!("{report}");
    if let Some(path) = &args.metrics {
        let row: MetricsRow = report.to_metrics_row(0);
        append_metrics(path, &[row])?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportAttention(a) => export(a),
        Command::EnsembleEval(a) => ensemble(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
