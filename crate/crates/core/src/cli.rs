//! The `lmft` command line: settings resolution, run manifests and the six
//! pipeline commands.
//!
//! Settings are resolved as flag > config file > built-in default. Every
//! command writes `<out>.manifest.json` next to its main output; training
//! commands rewrite it atomically after each epoch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::awd_lstm::{AwdLstm, DropoutRates, LMConfig, ModelError};
use crate::classifier::{HeadConfig, Prediction, TextClassifier};
use crate::corpus::{
    filter_frequent_labels, load_classification_dataset, load_classification_dataset_with_labels, load_lm_corpus,
    normalize_text, restrict_labels, split_dataset, CorpusError, LabeledDataset, SplitRatios, TaskKind,
};
use crate::metrics::{self, ConfusionCounts, MetricsError};
use crate::persistence::{write_atomic, Checkpoint, PersistError};
use crate::tokenizer::{train_unigram, TokenizerError, TrainerConfig, UnigramVocab};
use crate::training::{
    clf_train, evaluate_classifier, lm_finetune, lm_pretrain, tokenize_stream, EncodedDataset, RangerConfig, RunLog,
    Stage, TrainError, TrainRunConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 usage or configuration, 3 data/model incompatibility, 4 numerical
    /// fault, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Incompatible(_) => 3,
            Self::Numerical(_) => 4,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Format(_) => Self::Incompatible(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::TokenOutOfRange { .. } => Self::Incompatible(e.to_string()),
            ModelError::Autodiff(_) => Self::Runtime(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerical { .. } => Self::Numerical(e.to_string()),
            TrainError::Compatibility(_) => Self::Incompatible(e.to_string()),
            TrainError::Config(_) | TrainError::Usage(_) => Self::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Incompatible(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Incompatible(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- settings

/// Hyperparameters of one LM training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub clip_norm: f64,
    /// Per-group lr decay below the top group; 1 disables it.
    pub discriminative_factor: f64,
    /// Share of documents held out for validation perplexity.
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Master dropout rate; the five per-site rates are derived from it.
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub discriminative_factor: f64,
    pub head: HeadConfig,
    pub split: SplitRatios,
    /// Multi-label only: labels with fewer training examples are dropped.
    pub min_label_count: usize,
    /// Score the training split after every epoch.
    pub eval_train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub tokenizer: TrainerConfig,
    pub model: ModelSettings,
    pub pretrain: StageSettings,
    pub finetune: StageSettings,
    pub classifier: ClassifierSettings,
    pub optimizer: RangerConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let lm = TrainRunConfig::pretrain();
        let clf = TrainRunConfig::clf_finetune();
        let stage = StageSettings {
            epochs: lm.epochs,
            lr: lm.lr,
            batch_size: lm.batch_size,
            bptt_len: lm.bptt_len,
            clip_norm: lm.clip_norm,
            discriminative_factor: 1.0,
            valid_fraction: 0.05,
        };
        Self {
            seed: 0,
            tokenizer: TrainerConfig::default(),
            model: ModelSettings {
                embedding_dim: 400,
                hidden_dim: 1152,
                n_layers: 3,
                dropout: 0.3,
            },
            finetune: StageSettings {
                discriminative_factor: lm.discriminative_factor,
                valid_fraction: 0.1,
                ..stage.clone()
            },
            pretrain: stage,
            classifier: ClassifierSettings {
                epochs: clf.epochs,
                lr: clf.lr,
                batch_size: clf.batch_size,
                clip_norm: clf.clip_norm,
                discriminative_factor: clf.discriminative_factor,
                head: HeadConfig::default(),
                split: SplitRatios::default(),
                min_label_count: 1,
                eval_train: true,
            },
            optimizer: RangerConfig::default(),
        }
    }
}

impl Settings {
    /// Defaults overlaid with a TOML file. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Value =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let user = serde_json::to_value(user).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut merged = serde_json::to_value(Settings::default()).expect("settings serialize");
        overlay(&mut merged, &user, "")?;
        serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn lm_config(&self, vocab_size: usize, stage: &StageSettings) -> LMConfig {
        LMConfig {
            vocab_size,
            embedding_dim: self.model.embedding_dim,
            hidden_dim: self.model.hidden_dim,
            n_layers: self.model.n_layers,
            dropout: DropoutRates::from_master(self.model.dropout),
            bptt_len: stage.bptt_len,
            batch_size: stage.batch_size,
        }
    }

    pub fn run_config(&self, stage: Stage) -> TrainRunConfig {
        let base = TrainRunConfig {
            seed: self.seed,
            ranger: self.optimizer,
            ..TrainRunConfig::pretrain()
        };
        let from_stage = |s: &StageSettings| TrainRunConfig {
            stage,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            bptt_len: s.bptt_len,
            clip_norm: s.clip_norm,
            discriminative_factor: s.discriminative_factor,
            ..base.clone()
        };
        match stage {
            Stage::Pretrain => from_stage(&self.pretrain),
            Stage::LmFinetune => from_stage(&self.finetune),
            Stage::ClfFinetune => {
                let c = &self.classifier;
                TrainRunConfig {
                    stage,
                    epochs: c.epochs,
                    lr: c.lr,
                    batch_size: c.batch_size,
                    clip_norm: c.clip_norm,
                    discriminative_factor: c.discriminative_factor,
                    eval_train: c.eval_train,
                    ..base
                }
            }
        }
    }
}

fn overlay(base: &mut serde_json::Value, user: &serde_json::Value, at: &str) -> Result<(), CliError> {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => overlay(slot, v, &key)?,
                    None => return Err(CliError::Usage(format!("config: unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (serde_json::Value::Object(_), _) => Err(CliError::Usage(format!("config: `{at}` must be a table"))),
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    /// `running` while epochs are still being written, then `complete`.
    pub status: String,
    pub seed: u64,
    pub settings: serde_json::Value,
    /// Fixed conventions that shape results but have no setting.
    pub conventions: BTreeMap<String, serde_json::Value>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub vocab_hash: Option<String>,
    pub lm_config: Option<LMConfig>,
    pub train_config: Option<TrainRunConfig>,
    pub run: Option<RunLog>,
    pub results: BTreeMap<String, serde_json::Value>,
    /// SHA-256 of every output file.
    pub outputs: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(command: &str, args: &[String], settings: &Settings) -> Self {
        let conventions = [
            ("classification_inputs", serde_json::json!("wrapped in <s> ... </s>")),
            ("label_ids", serde_json::json!("sorted label order; binary positive class is id 1")),
            ("mean_f1", serde_json::json!("macro average over both classes")),
            ("f1_zero_division", serde_json::json!(0.0)),
            ("ndcg_empty_gold", serde_json::json!(0.0)),
            ("multilabel_threshold", serde_json::json!(0.5)),
            ("digits", serde_json::json!("every ASCII digit mapped to 0")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            command: command.into(),
            args: args.to_vec(),
            status: "running".into(),
            seed: settings.seed,
            settings: serde_json::to_value(settings).expect("settings serialize"),
            conventions,
            ..Self::default()
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        text.push(b'\n');
        write_atomic(path, &text).map_err(CliError::from)
    }

    fn record_epochs(&mut self, path: &Path, run: &RunLog) {
        self.run = Some(run.clone());
        if let Err(e) = self.write(path) {
            eprintln!("warning: could not write manifest: {e}");
        }
    }
}

/// Manifest location for a command writing `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- commands

#[derive(Debug, Parser)]
#[command(name = "lmft", version, about = "Subword language-model pretraining, fine-tuning and text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a unigram subword vocabulary.
    TokTrain(TokTrainArgs),
    /// Pretrain the language model on raw text.
    LmPretrain(LmPretrainArgs),
    /// Fine-tune a pretrained language model on target-task text.
    LmFinetune(LmFinetuneArgs),
    /// Train a classifier on top of a fine-tuned language model.
    ClfTrain(ClfTrainArgs),
    /// Score texts with a trained classifier.
    Predict(PredictArgs),
    /// Compute an evaluation metric for a classifier or a predictions file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StageFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TokTrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct LmPretrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[command(flatten)]
    pub stage: StageFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct LmFinetuneArgs {
    /// Line-delimited JSON records with a `text` field, or plain text lines.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checked against the vocabulary stored in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[command(flatten)]
    pub stage: StageFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ClfTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub stage: StageFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["ckpt", "predictions"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output of `predict` (or any records with `labels` and `scores`).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Gold data with `text` and `labels`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    PosF1,
    MeanF1,
    Ndcg(usize),
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pos-f1" => Ok(Self::PosF1),
            "mean-f1" => Ok(Self::MeanF1),
            _ => {
                let k = s
                    .strip_prefix("ndcg@")
                    .ok_or_else(|| format!("unknown metric `{s}` (expected pos-f1, mean-f1 or ndcg@K)"))?;
                match k.parse::<usize>() {
                    Ok(k) if k >= 1 => Ok(Self::Ndcg(k)),
                    _ => Err(format!("`{s}`: K must be a positive integer")),
                }
            }
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PosF1 => f.write_str("pos-f1"),
            Self::MeanF1 => f.write_str("mean-f1"),
            Self::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: CorpusError| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &recorded) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, args: &[String]) -> Result<String, CliError> {
    match command {
        Command::TokTrain(a) => tok_train(a, args),
        Command::LmPretrain(a) => lm_pretrain_cmd(a, args),
        Command::LmFinetune(a) => lm_finetune_cmd(a, args),
        Command::ClfTrain(a) => clf_train_cmd(a, args),
        Command::Predict(a) => predict_cmd(a, args),
        Command::Evaluate(a) => evaluate_cmd(a, args),
    }
}

fn settings(common: &Common) -> Result<Settings, CliError> {
    let mut s = Settings::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn apply_stage(s: &mut StageSettings, flags: &StageFlags, bptt: Option<usize>) {
    if let Some(v) = flags.epochs {
        s.epochs = v;
    }
    if let Some(v) = flags.lr {
        s.lr = v;
    }
    if let Some(v) = flags.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = bptt {
        s.bptt_len = v;
    }
}

fn start(command: &str, args: &[String], settings: &Settings, common: &Common) -> Result<Manifest, CliError> {
    let mut m = Manifest::new(command, args, settings);
    if let Some(c) = &common.config {
        m.input(c)?;
    }
    Ok(m)
}

fn finish(mut m: Manifest, out: &Path, started: Instant) -> Result<(), CliError> {
    m.output(out)?;
    m.status = "complete".into();
    m.timings.insert("total_seconds".into(), started.elapsed().as_secs_f64());
    m.write(&manifest_path(out))
}

fn progress(e: &crate::training::EpochLog, run: &RunLog) {
    eprintln!(
        "epoch {:>3}  train loss {:.4}  valid {} {:.4}  ({:.1}s)",
        e.epoch, e.train_loss, run.metric, e.valid_metric, e.seconds
    );
}

/// Seeded document-level hold-out; at least one item on each side.
pub fn holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CliError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("valid_fraction {fraction} must lie in (0, 1)")));
    }
    if items.len() < 2 {
        return Err(CliError::Usage("need at least two documents to hold one out".into()));
    }
    let n_valid = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len() - 1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (v, t) = order.split_at(n_valid);
    let mut v = v.to_vec();
    let mut t = t.to_vec();
    v.sort_unstable();
    t.sort_unstable();
    Ok((
        t.iter().map(|&i| items[i].clone()).collect(),
        v.iter().map(|&i| items[i].clone()).collect(),
    ))
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
}

/// One text per non-empty line; JSON object lines contribute their `text`.
pub fn read_texts(path: &Path) -> Result<Vec<String>, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let text = if line.trim_start().starts_with('{') {
            serde_json::from_str::<TextRecord>(line)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?
                .text
        } else {
            line.to_string()
        };
        out.push(normalize_text(&text));
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no texts", path.display())));
    }
    Ok(out)
}

fn tok_train(a: TokTrainArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let mut s = settings(&a.common)?;
    if let Some(n) = a.vocab_size {
        s.tokenizer.target_size = n;
    }
    let mut m = start("tok-train", args, &s, &a.common)?;
    for p in &a.corpus {
        m.input(p)?;
    }
    let corpus = load_lm_corpus(&a.corpus)?;
    let outcome = train_unigram(&corpus, &s.tokenizer)?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
        m.results.insert("warning".into(), w.clone().into());
    }
    outcome.vocab.save(&a.out).map_err(|e| io_err(&a.out, e))?;
    m.vocab_hash = Some(outcome.vocab.content_hash());
    m.results.insert("vocab_size".into(), outcome.vocab.len().into());
    m.results.insert("documents".into(), corpus.len().into());
    m.timings.insert("tokenizer_seconds".into(), started.elapsed().as_secs_f64());
    finish(m, &a.out, started)?;
    Ok(format!("tok-train: {} pieces -> {}", outcome.vocab.len(), a.out.display()))
}

fn lm_pretrain_cmd(a: LmPretrainArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let mut s = settings(&a.common)?;
    apply_stage(&mut s.pretrain, &a.stage, a.bptt);
    let mut m = start("lm-pretrain", args, &s, &a.common)?;
    m.input(&a.vocab)?;
    for p in &a.corpus {
        m.input(p)?;
    }
    let vocab = UnigramVocab::load(&a.vocab)?;
    let corpus = load_lm_corpus(&a.corpus)?;
    let (train_docs, valid_docs) = holdout(&corpus.documents, s.pretrain.valid_fraction, s.seed)?;
    let train = tokenize_stream(&vocab, train_docs.iter().map(String::as_str));
    let valid = tokenize_stream(&vocab, valid_docs.iter().map(String::as_str));
    let config = s.lm_config(vocab.len(), &s.pretrain);
    let mut model = AwdLstm::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(s.seed))?;
    let run_cfg = s.run_config(Stage::Pretrain);
    m.vocab_hash = Some(vocab.content_hash());
    m.lm_config = Some(config);
    m.train_config = Some(run_cfg.clone());
    m.results.insert("train_tokens".into(), train.len().into());
    m.results.insert("valid_tokens".into(), valid.len().into());
    let mpath = manifest_path(&a.out);
    let train_started = Instant::now();
    let log = lm_pretrain(&mut model, &train, &valid, &run_cfg, &mut |e, run| {
        progress(e, run);
        m.record_epochs(&mpath, run);
    })?;
    m.timings.insert("train_seconds".into(), train_started.elapsed().as_secs_f64());
    m.run = Some(log.clone());
    let mut ckpt = Checkpoint::from_lm(&model, &vocab, Stage::Pretrain);
    ckpt.meta.extra = m.settings.clone();
    ckpt.save(&a.out)?;
    finish(m, &a.out, started)?;
    let best = log.best().map(|e| e.valid_metric).unwrap_or(f64::NAN);
    Ok(format!(
        "lm-pretrain: valid perplexity {:.3} -> {best:.3} (epoch {}) -> {}",
        log.baseline,
        log.best_epoch,
        a.out.display()
    ))
}

fn lm_finetune_cmd(a: LmFinetuneArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let mut s = settings(&a.common)?;
    apply_stage(&mut s.finetune, &a.stage, a.bptt);
    let mut m = start("lm-finetune", args, &s, &a.common)?;
    m.input(&a.ckpt)?;
    m.input(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = ckpt.vocab()?;
    if let Some(p) = &a.vocab {
        m.input(p)?;
        ckpt.verify_vocab(&UnigramVocab::load(p)?)?;
    }
    let mut model = ckpt.to_lm()?;
    let texts = read_texts(&a.data)?;
    let (train, valid) = holdout(&texts, s.finetune.valid_fraction, s.seed)?;
    let run_cfg = s.run_config(Stage::LmFinetune);
    m.vocab_hash = Some(vocab.content_hash());
    m.lm_config = Some(model.config().clone());
    m.train_config = Some(run_cfg.clone());
    m.results.insert("train_texts".into(), train.len().into());
    m.results.insert("valid_texts".into(), valid.len().into());
    let mpath = manifest_path(&a.out);
    let train_started = Instant::now();
    let log = lm_finetune(&mut model, &vocab, &train, &valid, &run_cfg, &mut |e, run| {
        progress(e, run);
        m.record_epochs(&mpath, run);
    })?;
    m.timings.insert("train_seconds".into(), train_started.elapsed().as_secs_f64());
    m.run = Some(log.clone());
    let mut out = Checkpoint::from_lm(&model, &vocab, Stage::LmFinetune);
    out.meta.extra = m.settings.clone();
    out.save(&a.out)?;
    finish(m, &a.out, started)?;
    let best = log.best().map(|e| e.valid_metric).unwrap_or(f64::NAN);
    Ok(format!(
        "lm-finetune: valid perplexity {:.3} -> {best:.3} (epoch {}) -> {}",
        log.baseline,
        log.best_epoch,
        a.out.display()
    ))
}

fn clf_train_cmd(a: ClfTrainArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let mut s = settings(&a.common)?;
    let c = &mut s.classifier;
    if let Some(v) = a.stage.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.stage.lr {
        c.lr = v;
    }
    if let Some(v) = a.stage.batch_size {
        c.batch_size = v;
    }
    let mut m = start("clf-train", args, &s, &a.common)?;
    m.input(&a.ckpt)?;
    m.input(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = ckpt.vocab()?;
    let lm = ckpt.to_lm()?;
    let ds = load_classification_dataset(&a.data, a.task)?;
    let mut splits = split_dataset(&ds, s.classifier.split, s.seed)?;
    if a.task == TaskKind::Multilabel {
        let filtered = filter_frequent_labels(&splits.train, s.classifier.min_label_count)?;
        if filtered.all_labels_removed {
            return Err(CliError::Usage(format!(
                "no label reaches min_label_count = {} in the training split",
                s.classifier.min_label_count
            )));
        }
        let keep = filtered.dataset.label_vocabulary.clone();
        splits.valid = restrict_labels(&splits.valid, &keep);
        splits.test = restrict_labels(&splits.test, &keep);
        splits.train = filtered.dataset;
    }
    let labels = splits.train.label_vocabulary.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut clf = TextClassifier::new(lm, s.classifier.head, a.task, labels.clone(), &mut rng)?;
    let train = EncodedDataset::new(&clf, &vocab, &splits.train);
    let valid = EncodedDataset::new(&clf, &vocab, &splits.valid);
    let test = EncodedDataset::new(&clf, &vocab, &splits.test);
    let run_cfg = s.run_config(Stage::ClfFinetune);
    m.vocab_hash = Some(vocab.content_hash());
    m.lm_config = Some(clf.lm().config().clone());
    m.train_config = Some(run_cfg.clone());
    m.results.insert("labels".into(), serde_json::json!(labels));
    for (k, n) in [("train", train.len()), ("valid", valid.len()), ("test", test.len())] {
        m.results.insert(format!("{k}_examples"), n.into());
    }
    let mpath = manifest_path(&a.out);
    let train_started = Instant::now();
    let log = clf_train(&mut clf, &train, &valid, &run_cfg, &mut |e, run| {
        progress(e, run);
        m.record_epochs(&mpath, run);
    })?;
    m.timings.insert("train_seconds".into(), train_started.elapsed().as_secs_f64());
    m.run = Some(log.clone());
    let t = evaluate_classifier(&clf, &test, run_cfg.batch_size)?;
    m.results.insert(format!("test_{}", log.metric), t.metric.into());
    m.results.insert("test_accuracy".into(), t.accuracy.into());
    let test_path = with_suffix(&a.out, ".test.jsonl");
    splits.test.save(&test_path).map_err(|e| io_err(&test_path, e))?;
    m.output(&test_path)?;
    let mut out = Checkpoint::from_classifier(&clf, &vocab);
    out.meta.extra = m.settings.clone();
    out.save(&a.out)?;
    finish(m, &a.out, started)?;
    let best = log.best().map(|e| e.valid_metric).unwrap_or(f64::NAN);
    Ok(format!(
        "clf-train: valid {} {best:.4} (epoch {}), test {:.4} -> {}",
        log.metric,
        log.best_epoch,
        t.metric,
        a.out.display()
    ))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Serialize)]
struct PredictionOut<'a> {
    text_id: usize,
    labels: &'a [String],
    #[serde(flatten)]
    prediction: &'a Prediction,
}

/// Records read back by `evaluate`; other fields are ignored.
#[derive(Debug, Deserialize)]
pub struct ScoredRecord {
    pub text_id: Option<usize>,
    pub labels: Vec<String>,
    pub scores: Vec<f64>,
}

fn predict_cmd(a: PredictArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let s = settings(&a.common)?;
    let mut m = start("predict", args, &s, &a.common)?;
    m.input(&a.ckpt)?;
    m.input(&a.input)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = ckpt.vocab()?;
    let clf = ckpt.to_classifier()?;
    let texts = read_texts(&a.input)?;
    let bs = a.batch_size.unwrap_or(s.classifier.batch_size);
    let preds = clf.predict(&vocab, &texts, bs)?;
    let mut body = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let rec = PredictionOut {
            text_id: i,
            labels: clf.labels(),
            prediction: p,
        };
        serde_json::to_writer(&mut body, &rec).expect("prediction serializes");
        body.push(b'\n');
    }
    write_atomic(&a.out, &body)?;
    m.vocab_hash = Some(vocab.content_hash());
    m.results.insert("texts".into(), texts.len().into());
    m.results.insert("task".into(), clf.task_kind().to_string().into());
    finish(m, &a.out, started)?;
    Ok(format!("predict: {} predictions -> {}", preds.len(), a.out.display()))
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredRecord>, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut recs: Vec<ScoredRecord> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoredRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.labels.len() != r.scores.len() {
            return Err(CliError::Usage(format!(
                "{}:{}: {} labels but {} scores",
                path.display(),
                i + 1,
                r.labels.len(),
                r.scores.len()
            )));
        }
        recs.push(r);
    }
    if recs.iter().all(|r| r.text_id.is_some()) {
        recs.sort_by_key(|r| r.text_id);
    }
    Ok(recs)
}

/// Evaluation report written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub value: f64,
    pub examples: usize,
    pub labels: Vec<String>,
    /// Binary metrics: counts with label id 1 as the positive class.
    pub confusion: Option<ConfusionCounts>,
    pub per_class_f1: Option<Vec<f64>>,
}

/// Computes `metric` for per-example `scores` (aligned with `ds`'s label
/// vocabulary) against the gold labels of `ds`.
pub fn score_report(metric: Metric, ds: &LabeledDataset, scores: &[Vec<f64>]) -> Result<Report, CliError> {
    let labels = ds.label_vocabulary.clone();
    let gold: Vec<Vec<usize>> = ds.examples.iter().map(|e| e.labels.clone()).collect();
    if scores.len() != gold.len() {
        return Err(CliError::Incompatible(format!(
            "{} scored examples for {} gold examples",
            scores.len(),
            gold.len()
        )));
    }
    let base = Report {
        metric: metric.to_string(),
        value: 0.0,
        examples: gold.len(),
        labels: labels.clone(),
        confusion: None,
        per_class_f1: None,
    };
    match metric {
        Metric::Ndcg(k) => Ok(Report {
            value: metrics::ndcg_at_k(scores, &gold, k)?,
            ..base
        }),
        Metric::PosF1 | Metric::MeanF1 => {
            if ds.task_kind != TaskKind::Binary || labels.len() != 2 {
                return Err(CliError::Usage(format!("{metric} needs binary data with two labels")));
            }
            let preds: Vec<usize> = scores.iter().map(|s| crate::classifier::argmax(s)).collect();
            let gold: Vec<usize> = gold.iter().map(|g| g[0]).collect();
            let c = metrics::confusion(&preds, &gold, 1)?;
            let per_class = vec![metrics::binary_f1(&preds, &gold, 0)?, metrics::binary_f1(&preds, &gold, 1)?];
            let value = match metric {
                Metric::PosF1 => per_class[1],
                _ => metrics::mean_f1(&preds, &gold)?,
            };
            Ok(Report {
                value,
                confusion: Some(c),
                per_class_f1: Some(per_class),
                ..base
            })
        }
    }
}

fn evaluate_cmd(a: EvaluateArgs, args: &[String]) -> Result<String, CliError> {
    let started = Instant::now();
    let s = settings(&a.common)?;
    let mut m = start("evaluate", args, &s, &a.common)?;
    m.input(&a.data)?;
    let kind_for_metric = match a.metric {
        Metric::Ndcg(_) => TaskKind::Multilabel,
        _ => TaskKind::Binary,
    };
    let (ds, scores) = if let Some(ck) = &a.ckpt {
        m.input(ck)?;
        let ckpt = Checkpoint::load(ck)?;
        let vocab = ckpt.vocab()?;
        let clf = ckpt.to_classifier()?;
        let ds = load_classification_dataset_with_labels(&a.data, clf.task_kind(), clf.labels())
            .map_err(|e| CliError::Incompatible(e.to_string()))?;
        let seqs: Vec<Vec<u32>> = ds.examples.iter().map(|e| clf.tokenize(&vocab, &e.text)).collect();
        let bs = a.batch_size.unwrap_or(s.classifier.batch_size);
        let scores = clf.scores(&seqs, bs)?;
        m.vocab_hash = Some(vocab.content_hash());
        (ds, scores)
    } else {
        let p = a.predictions.as_ref().expect("clap requires a source");
        m.input(p)?;
        let recs = read_scored(p)?;
        let labels = recs
            .first()
            .map(|r| r.labels.clone())
            .ok_or_else(|| CliError::Usage(format!("{}: no predictions", p.display())))?;
        if recs.iter().any(|r| r.labels != labels) {
            return Err(CliError::Incompatible("predictions disagree on the label list".into()));
        }
        let ds = load_classification_dataset_with_labels(&a.data, kind_for_metric, &labels)
            .map_err(|e| CliError::Incompatible(e.to_string()))?;
        (ds, recs.into_iter().map(|r| r.scores).collect())
    };
    let report = score_report(a.metric, &ds, &scores)?;
    let mut body = serde_json::to_vec_pretty(&report).expect("report serializes");
    body.push(b'\n');
    write_atomic(&a.out, &body)?;
    m.results.insert(report.metric.clone(), report.value.into());
    finish(m, &a.out, started)?;
    Ok(format!("{} = {:?}", report.metric, report.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlays_defaults() {
        let s = Settings::from_toml("seed = 7\n[model]\nembedding_dim = 64\n[classifier.head]\nhidden = 20\n").unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.model.embedding_dim, 64);
        assert_eq!(s.model.hidden_dim, 1152);
        assert_eq!(s.classifier.head.hidden, 20);
        assert_eq!(s.classifier.head.dropout, 0.1);
    }

    #[test]
    fn integer_accepted_for_real_setting() {
        let s = Settings::from_toml("[pretrain]\nlr = 1\n").unwrap();
        assert_eq!(s.pretrain.lr, 1.0);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let e = Settings::from_toml("[model]\nembeding_dim = 64\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("model.embeding_dim"), "{e}");
    }

    #[test]
    fn documented_defaults() {
        let s = Settings::default();
        assert_eq!(s.tokenizer.target_size, 32_000);
        assert_eq!((s.pretrain.epochs, s.pretrain.lr, s.pretrain.batch_size), (10, 0.001, 128));
        assert_eq!(s.model.dropout, 0.3);
        assert_eq!((s.classifier.epochs, s.classifier.lr), (5, 0.05));
        assert_eq!(s.finetune.discriminative_factor, 2.6);
        assert_eq!(s.run_config(Stage::ClfFinetune).discriminative_factor, 2.6);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("pos-f1".parse::<Metric>(), Ok(Metric::PosF1));
        assert_eq!("ndcg@5".parse::<Metric>(), Ok(Metric::Ndcg(5)));
        assert!("ndcg@0".parse::<Metric>().is_err());
        assert!("accuracy".parse::<Metric>().is_err());
        assert_eq!(Metric::Ndcg(3).to_string(), "ndcg@3");
    }

    #[test]
    fn holdout_is_seeded_partition() {
        let items: Vec<u32> = (0..40).collect();
        let (t, v) = holdout(&items, 0.1, 3).unwrap();
        assert_eq!(v.len(), 4);
        let mut all: Vec<u32> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(holdout(&items, 0.1, 3).unwrap(), (t, v));
        assert!(holdout(&items, 0.0, 3).is_err());
        assert!(holdout(&items[..1], 0.5, 3).is_err());
    }

    #[test]
    fn usage_exit_code_for_bad_flags() {
        assert_eq!(run(["lmft", "tok-train", "--vocab-size", "x"]), 2);
        assert_eq!(run(["lmft", "evaluate", "--data", "d", "--metric", "ndcg@5", "--out", "r"]), 2);
    }

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(manifest_path(Path::new("out/lm.ckpt")), Path::new("out/lm.ckpt.manifest.json"));
    }
}
