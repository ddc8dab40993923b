//! The `armmt` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Every subcommand echoes its resolved configuration to stderr before it
//! starts working; results go to stdout or to the `--out` file.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{gen_dataset, load_dataset, save_dataset, Dataset, GeneratorConfig, ModalityMix, SessionExample};
use crate::error::{CheckpointError, DataError, EvalError, ModelError, TrainError};
use crate::eval::{
    evaluate, fusion_weights, mean_auc_by_variant, run_ablation, write_fusion_dump, write_reports,
    AblationConfig, AblationEvent, AucMode, EvalReport,
};
use crate::model::{rerank_order, Armmt, ModelConfig, Variant};
use crate::train::{load_checkpoint, save_checkpoint, train_with, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "armmt", version, about = "Multimodal listwise re-ranking: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session dataset.
    GenData(GenDataArgs),
    /// Train one model variant and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint's conversion AUC.
    Eval(EvalArgs),
    /// Train and evaluate all four variants for each seed.
    Ablate(AblateArgs),
    /// Print one session's candidates re-ordered by predicted conversion.
    Rerank(RerankArgs),
    /// Dump per-candidate fusion weights as CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    /// Width 32, two encoder layers of 6 heads × 32.
    Standard,
    /// Width 32, one encoder layer of 2 heads × 8.
    Compact,
    /// Width 8, for smoke tests.
    Tiny,
}

impl ModelPreset {
    pub fn config(self, ds: &Dataset) -> ModelConfig {
        let vocab = ds.meta.vocab;
        match self {
            ModelPreset::Standard => ModelConfig::standard(vocab),
            ModelPreset::Compact => ModelConfig::compact(vocab),
            ModelPreset::Tiny => ModelConfig::tiny(vocab),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModelPreset::Standard => "standard",
            ModelPreset::Compact => "compact",
            ModelPreset::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    fn select(self, ds: &Dataset) -> &[SessionExample] {
        match self {
            Split::Train => ds.train_sessions(),
            Split::Test => ds.test_sessions(),
            Split::All => &ds.sessions,
        }
    }

    fn offset(self, ds: &Dataset) -> usize {
        match self {
            Split::Test => ds.test_start(),
            Split::Train | Split::All => 0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AucArg {
    Pooled,
    PerSession,
}

impl From<AucArg> for AucMode {
    fn from(a: AucArg) -> Self {
        match a {
            AucArg::Pooled => AucMode::Pooled,
            AucArg::PerSession => AucMode::PerSession,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Purchase-driver weights `image,text,price`, summing to 1.
    #[arg(long, default_value = "0.6,0.25,0.15")]
    pub mix: ModalityMix,
    #[arg(long, default_value_t = 2000)]
    pub catalog_size: usize,
    #[arg(long, default_value_t = crate::data::DEFAULT_MAX_HISTORY)]
    pub max_history: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOptions {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.07)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = ModelPreset::Standard)]
    pub model: ModelPreset,
    /// Average the conversion loss over the list instead of summing.
    #[arg(long)]
    pub main_loss_mean: bool,
}

impl TrainOptions {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            lambda: self.lambda,
            seed,
            main_loss_mean: self.main_loss_mean,
            ..TrainConfig::default()
        }
    }

    fn describe(&self) -> String {
        format!(
            "lr={:?} epochs={} batch={} lambda={:?} adagrad_epsilon={:?} model={} main_loss_mean={}",
            self.lr,
            self.epochs,
            self.batch,
            self.lambda,
            TrainConfig::default().adagrad_epsilon,
            self.model.name(),
            self.main_loss_mean
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub options: TrainOptions,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the `epoch,loss` log to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (one JSON line); stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = AucArg::Pooled)]
    pub auc: AucArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub options: TrainOptions,
    #[arg(long, value_enum, default_value_t = AucArg::Pooled)]
    pub auc: AucArg,
    /// Report file (one JSON line per run).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset file holding the session.
    #[arg(long)]
    pub session_file: PathBuf,
    /// Index of the session within the file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed invocation, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
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

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
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

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

fn echo(err: &mut dyn Write, line: String) -> Result<(), CliError> {
    writeln!(err, "{line}").map_err(|e| CliError::Data(e.to_string()))
}

fn gen_data(a: &GenDataArgs, _out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let cfg = GeneratorConfig {
        sessions: a.sessions,
        catalog_size: a.catalog_size,
        max_history: a.max_history,
        mix: a.mix,
        ..GeneratorConfig::default()
    };
    echo(
        err,
        format!(
            "gen-data: sessions={} seed={} mix={},{},{} catalog_size={} max_history={} out={}",
            cfg.sessions,
            a.seed,
            cfg.mix.image,
            cfg.mix.text,
            cfg.mix.price,
            cfg.catalog_size,
            cfg.max_history,
            a.out.display()
        ),
    )?;
    let ds = gen_dataset(&cfg, a.seed)?;
    save_dataset(&a.out, &ds)?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    echo(
        err,
        format!(
            "train: data={} variant={} seed={} {} out={}",
            a.data.display(),
            a.variant,
            a.seed,
            a.options.describe(),
            a.out.display()
        ),
    )?;
    let tc = a.options.config(a.seed);
    tc.validate()?;
    let ds = load_dataset(&a.data)?;
    let mut model = Armmt::new(a.options.model.config(&ds), a.variant, a.seed)?;
    let mut log = a.log.as_deref().map(create).transpose()?;
    let mut write_failure = None;
    let outcome = train_with(&mut model, ds.train_sessions(), &tc, 0, |e| {
        let line = e.csv();
        let mut result = writeln!(out, "{line}");
        if let Some(f) = log.as_mut() {
            result = result.and_then(|_| writeln!(f, "{line}"));
        }
        if let Err(e) = result {
            write_failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_failure {
        return Err(CliError::Data(e.to_string()));
    }
    if let Some(mut f) = log {
        f.flush().map_err(|e| CliError::Data(e.to_string()))?;
    }
    save_checkpoint(&a.out, &Checkpoint::new(model, Some(tc), outcome.steps))?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    echo(
        err,
        format!(
            "eval: ckpt={} data={} split={} auc={:?} out={}",
            a.ckpt.display(),
            a.data.display(),
            a.split.name(),
            AucMode::from(a.auc),
            a.out.as_deref().map_or("-".into(), |p| p.display().to_string())
        ),
    )?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let sessions = a.split.select(&ds);
    let e = evaluate(&ckpt.model, sessions, a.auc.into())?;
    let report = EvalReport {
        variant: ckpt.model.variant,
        auc: e.auc,
        ctr_auc: e.ctr_auc,
        sessions: e.sessions,
        seed: ckpt.train.map_or(0, |t| t.seed),
        delta_vs_full: None,
        final_train_loss: None,
    };
    writeln!(out, "{}", report.json_line()).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = &a.out {
        write_reports(create(path)?, &[report]).map_err(io_error(path))?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
    echo(
        err,
        format!(
            "ablate: data={} seeds={} {} auc={:?} out={}",
            a.data.display(),
            seeds.join(","),
            a.options.describe(),
            AucMode::from(a.auc),
            a.out.display()
        ),
    )?;
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let ds = load_dataset(&a.data)?;
    let cfg = AblationConfig {
        model: a.options.model.config(&ds),
        train: a.options.config(0),
        seeds: a.seeds.clone(),
        auc_mode: a.auc.into(),
    };
    cfg.train.validate()?;
    let reports = run_ablation(&ds, &cfg, |ev| {
        let line = match ev {
            AblationEvent::Epoch { variant, seed, loss } => format!("{variant} seed={seed} {}", loss.csv()),
            AblationEvent::Finished(r) => r.json_line(),
        };
        let _ = writeln!(err, "{line}");
    })?;
    write_reports(create(&a.out)?, &reports).map_err(io_error(&a.out))?;
    let write = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| CliError::Data(e.to_string()));
    for (variant, auc) in mean_auc_by_variant(&reports) {
        write(out, format!("{variant},{auc:.6}"))?;
    }
    Ok(())
}

fn rerank_cmd(a: &RerankArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    echo(
        err,
        format!(
            "rerank: ckpt={} session_file={} index={}",
            a.ckpt.display(),
            a.session_file.display(),
            a.index
        ),
    )?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.session_file)?;
    let session = ds.sessions.get(a.index).ok_or_else(|| {
        CliError::Data(format!(
            "session index {} out of range ({} sessions)",
            a.index,
            ds.sessions.len()
        ))
    })?;
    let scores = ckpt.model.score(session)?;
    for (rank, i) in rerank_order(&scores).into_iter().enumerate() {
        writeln!(out, "{},{},{}", rank + 1, session.candidates[i].item_id, scores[i])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn inspect_cmd(a: &InspectArgs, _out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    echo(
        err,
        format!(
            "inspect: ckpt={} data={} split={} out={}",
            a.ckpt.display(),
            a.data.display(),
            a.split.name(),
            a.out.display()
        ),
    )?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let rows = fusion_weights(&ckpt.model, a.split.select(&ds), a.split.offset(&ds))?;
    write_fusion_dump(create(&a.out)?, &rows).map_err(io_error(&a.out))?;
    Ok(())
}

/// Runs a parsed command.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, out, err),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Eval(a) => eval_cmd(a, out, err),
        Command::Ablate(a) => ablate_cmd(a, out, err),
        Command::Rerank(a) => rerank_cmd(a, out, err),
        Command::Inspect(a) => inspect_cmd(a, out, err),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}
