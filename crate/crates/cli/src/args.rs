use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use typedcsip::training::{Cell, Hyperparameters};

/// Typed counterfactual pretraining and its confirmatory analysis pipeline.
///
/// Relative output paths are resolved against $TYPEDCSIP_OUTPUT_ROOT when it
/// is set. Exit status: 0 success, 1 domain error, 2 aborted invariant,
/// 64 usage error.
#[derive(Debug, Parser)]
#[command(name = "typedcsip", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with stratum ground truth.
    GenData(GenDataArgs),
    /// Ingest a corpus and report skips, class counts, strata and cross-split overlap.
    IngestAudit(IngestAuditArgs),
    /// Derive primary and backup seeds from a hex prefix.
    DeriveSeeds(DeriveSeedsArgs),
    /// Train one cell on one seed and write test predictions.
    Train(TrainArgs),
    /// Predict the test split from a fine-tuned checkpoint.
    Predict(PredictArgs),
    /// Per-seed deltas, intervals and the locked decision rule.
    Analyze(AnalyzeArgs),
    /// Seen/Unseen stratified deltas and per-class breakdown.
    Stratify(StratifyArgs),
    /// Seed-matched comparison of two delta series.
    MatchedCompare(MatchedCompareArgs),
    /// Run a staged campaign with retries, substitution and gating.
    Orchestrate(OrchestrateArgs),
    /// Check prediction files against the format and an optional reference.
    ValidatePreds(ValidatePredsArgs),
}

/// Hyperparameters. Every flag overrides the preset explicitly; the
/// defaults are the published values.
#[derive(Debug, Args, Default)]
pub struct HpArgs {
    /// Desk-scale preset: hidden 32, max_len 64, vocabulary 8192, lr 1e-2.
    #[arg(long)]
    pub desk: bool,
    /// Peak learning rate [default: 2e-5; --desk: 1e-2]
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// AdamW beta1 [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// AdamW beta2 [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// AdamW epsilon [default: 1e-8]
    #[arg(long)]
    pub eps: Option<f64>,
    /// Linear warmup share of all steps [default: 0.1]
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    /// Global gradient-norm clip [default: 1.0]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Stage-1 epochs [default: 3]
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    /// Stage-1 batch size [default: 32]
    #[arg(long)]
    pub stage1_batch: Option<usize>,
    /// Stage-2 epochs [default: 5]
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Fine-tuning batch size [default: 16]
    #[arg(long)]
    pub ft_batch: Option<usize>,
    /// Replay batch size for v2 [default: 8]
    #[arg(long)]
    pub replay_batch: Option<usize>,
    /// Weight of the selectivity term [default: 1.0]
    #[arg(long)]
    pub lambda_select: Option<f64>,
    /// Weight of the replayed CSIP loss in v2 [default: 0.5]
    #[arg(long)]
    pub lambda_remain: Option<f64>,
    /// Encoder vocabulary size [default: 21128; --desk: 8192]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Encoder hidden size [default: 768; --desk: 32]
    #[arg(long)]
    pub hidden_size: Option<usize>,
    /// Maximum pair length in tokens [default: 512; --desk: 64]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Dropout probability [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl HpArgs {
    pub fn resolve(&self) -> Hyperparameters {
        let mut hp = if self.desk {
            Hyperparameters::desk()
        } else {
            Hyperparameters::default()
        };
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { hp.$field = v; } )* };
        }
        set!(
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            warmup_ratio,
            clip_norm,
            stage1_epochs,
            stage1_batch,
            stage2_epochs,
            ft_batch,
            replay_batch,
            lambda_select,
            lambda_remain
        );
        let enc = &mut hp.encoder;
        if let Some(v) = self.vocab_size {
            enc.vocab_size = v;
        }
        if let Some(v) = self.hidden_size {
            enc.hidden_size = v;
        }
        if let Some(v) = self.max_len {
            enc.max_len = v;
        }
        if let Some(v) = self.dropout {
            enc.dropout = v;
        }
        hp
    }
}

/// Interval and decision-rule settings.
#[derive(Debug, Args)]
pub struct StatArgs {
    /// Bootstrap rounds
    #[arg(long, default_value_t = 20_000)]
    pub rounds: usize,
    /// Bootstrap RNG seed
    #[arg(long, default_value_t = 4242)]
    pub rng_seed: u64,
    /// Two-sided confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Minimum mean delta in percentage points for C1
    #[arg(long, default_value_t = 0.8)]
    pub min_mean: f64,
    /// Mean delta for the stronger C1' claim
    #[arg(long, default_value_t = 1.0)]
    pub strong_mean: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory for train/val/test.jsonl and ground_truth.json
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// About 2000 records instead of the benchmark's 6928
    #[arg(long)]
    pub desk: bool,
}

#[derive(Debug, Args)]
pub struct IngestAuditArgs {
    /// Directory holding train.jsonl, val.jsonl and test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the audit as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeriveSeedsArgs {
    /// Hexadecimal prefix seeding the generator
    #[arg(long, default_value = "8607bca5")]
    pub hex: String,
    /// Number of primary seeds
    #[arg(long, default_value_t = 18)]
    pub primary: usize,
    /// Number of backup seeds
    #[arg(long, default_value_t = 6)]
    pub backup: usize,
    /// First candidate seed (inclusive)
    #[arg(long, default_value_t = 1)]
    pub pool_start: u64,
    /// Last candidate seed (exclusive)
    #[arg(long, default_value_t = 10_000)]
    pub pool_end: u64,
    /// Seeds that must not be drawn, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub banned: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Pretrain,
    Finetune,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cell to train
    #[arg(long, value_parser = parse_cell)]
    pub cell: Cell,
    /// Which part of the pipeline to run
    #[arg(long, value_enum, default_value_t = TrainStage::Full)]
    pub stage: TrainStage,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Run seed
    #[arg(long)]
    pub seed: u64,
    /// Stage-1 checkpoint for --stage finetune
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone name recorded in prediction headers
    #[arg(long, default_value = "toy")]
    pub backbone: String,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Fine-tuned checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cell the checkpoint belongs to
    #[arg(long, value_parser = parse_cell)]
    pub cell: Cell,
    /// Directory holding test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Output prediction file
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone name recorded in the header
    #[arg(long, default_value = "toy")]
    pub backbone: String,
    #[command(flatten)]
    pub hp: HpArgs,
}

/// Prediction files of one side of a comparison: files or directories of
/// `*.jsonl` files.
#[derive(Debug, Args)]
pub struct PairArgs {
    /// Method prediction files or directories
    #[arg(long, num_args = 1..)]
    pub method: Vec<PathBuf>,
    /// Baseline prediction files or directories
    #[arg(long, num_args = 1..)]
    pub baseline: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Method prediction files or directories
    #[arg(long, num_args = 1.., required_unless_present = "table")]
    pub method: Vec<PathBuf>,
    /// Baseline prediction files or directories
    #[arg(long, num_args = 1.., required_unless_present = "table")]
    pub baseline: Vec<PathBuf>,
    /// CSV of per-seed macro-F1 (seed,method,baseline) instead of prediction files
    #[arg(long, conflicts_with_all = ["method", "baseline"])]
    pub table: Option<PathBuf>,
    /// Method name in the report
    #[arg(long, default_value = "v2")]
    pub method_name: String,
    /// Baseline name in the report
    #[arg(long, default_value = "c2")]
    pub baseline_name: String,
    /// Also print the per-class deltas (prediction files only)
    #[arg(long)]
    pub per_class: bool,
    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub stats: StatArgs,
}

#[derive(Debug, Args)]
pub struct StratifyArgs {
    /// Directory holding train.jsonl and test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Write per-record stratum membership as JSON
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Also write the stratified reports as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub stats: StatArgs,
}

#[derive(Debug, Args)]
pub struct MatchedCompareArgs {
    /// First method's prediction files or directories
    #[arg(long, num_args = 1..)]
    pub a_method: Vec<PathBuf>,
    /// First method's baseline
    #[arg(long, num_args = 1..)]
    pub a_baseline: Vec<PathBuf>,
    /// Second method's prediction files or directories
    #[arg(long, num_args = 1..)]
    pub b_method: Vec<PathBuf>,
    /// Second method's baseline
    #[arg(long, num_args = 1..)]
    pub b_baseline: Vec<PathBuf>,
    /// Name of the first delta series
    #[arg(long, default_value = "v2")]
    pub a_name: String,
    /// Name of the second delta series
    #[arg(long, default_value = "v1")]
    pub b_name: String,
    /// Also write the summary as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub stats: StatArgs,
}

#[derive(Debug, Args)]
pub struct OrchestrateArgs {
    /// Campaign plan (JSON); without it a single-stage plan over c2, v1 and
    /// v2 is built from the flags below
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; must not hold an earlier campaign
    #[arg(long)]
    pub out: PathBuf,
    /// Primary seeds, comma-separated (required without --plan)
    #[arg(long, value_delimiter = ',', required_unless_present = "plan")]
    pub seeds: Vec<u64>,
    /// Backup seeds, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub backups: Vec<u64>,
    /// Backbone name recorded in prediction headers
    #[arg(long, default_value = "toy")]
    pub backbone: String,
    #[command(flatten)]
    pub hp: HpArgs,
}

#[derive(Debug, Args)]
pub struct ValidatePredsArgs {
    /// Prediction files or directories
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Reference file whose gold vector and row count every file must match
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<Cell, String> {
    s.parse().map_err(|e: typedcsip::Error| e.to_string())
}
