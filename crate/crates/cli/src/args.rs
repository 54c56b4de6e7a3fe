use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use intentr::ingest::SplitPart;
use intentr::nn::CellKind;

#[derive(Parser, Debug)]
#[command(name = "intentr", version, about = "Purchase-intent prediction from clickstream sessions")]
pub struct Cli {
    /// File of `key = value` settings; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse raw event files into split, labeled sessions and vocabularies.
    Prepare(PrepareArgs),
    /// Generate a synthetic corpus in the RecSys file format.
    Synth(SynthArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train every cell type x depth x width combination.
    Gridsearch(GridArgs),
    /// Score a prepared split and write the analysis report.
    Evaluate(EvaluateArgs),
    /// Write `session_id,score` predictions.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl From<Part> for SplitPart {
    fn from(p: Part) -> Self {
        match p {
            Part::Train => SplitPart::Train,
            Part::Valid => SplitPart::Valid,
            Part::Test => SplitPart::Test,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
#[command(group(ArgGroup::new("source").required(true).args(["clicks", "retailrocket"])))]
pub struct PrepareArgs {
    /// RecSys clicks file.
    #[arg(long, requires = "buys", value_name = "FILE")]
    pub clicks: Option<PathBuf>,
    /// RecSys buys file.
    #[arg(long, requires = "clicks", value_name = "FILE")]
    pub buys: Option<PathBuf>,
    /// Retail Rocket events file.
    #[arg(long, conflicts_with_all = ["clicks", "buys"], value_name = "FILE")]
    pub retailrocket: Option<PathBuf>,
    /// Retail Rocket session break, minutes of inactivity.
    #[arg(long, default_value_t = 30)]
    pub session_gap_mins: i64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// train/valid/test proportions.
    #[arg(long, default_value = "90/10/0")]
    pub split: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0.055)]
    pub buyer_fraction: f64,
    #[arg(long, default_value_t = 1000)]
    pub items: usize,
    #[arg(long, default_value_t = 40)]
    pub categories: usize,
    /// 0 makes buyers and clickers indistinguishable.
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    /// Plant the signal in each buyer's first click only.
    #[arg(long)]
    pub signal_first_only: bool,
    #[arg(long, default_value_t = 3.0)]
    pub mean_length: f64,
    #[arg(long, default_value_t = 1)]
    pub min_length: usize,
    #[arg(long, default_value_t = 40.0)]
    pub dwell_median_secs: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub catalog_seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// rnn, gru or lstm.
    #[arg(long, default_value = "lstm")]
    pub cell: CellKind,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
}

/// Data, preprocessing, architecture switches and optimizer settings shared
/// by `train` and `gridsearch`.
#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    /// Directory written by `prepare`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Consecutive worse-than-best epochs before stopping.
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    /// Learning-rate factor applied on each worse-than-best epoch.
    #[arg(long, default_value_t = 0.5)]
    pub anneal: f64,
    /// Seconds of dwell per replayed copy of an event.
    #[arg(long, default_value_t = 150.0)]
    pub unroll_threshold: f64,
    #[arg(long)]
    pub no_unroll: bool,
    #[arg(long)]
    pub no_reverse: bool,
    #[arg(long, default_value_t = 500)]
    pub max_len: usize,
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Start each layer from zero state instead of the layer below's final state.
    #[arg(long)]
    pub no_share_state: bool,
    /// Feed upper layers only the layer below's output.
    #[arg(long)]
    pub no_skip: bool,
    /// Share recurrent weights between layers of equal input width.
    #[arg(long)]
    pub tie_layers: bool,
    #[arg(long, default_value_t = 100)]
    pub item_width: usize,
    /// Width of the category, time, price and quantity embeddings.
    #[arg(long, default_value_t = 10)]
    pub field_width: usize,
    /// Add the item price-variance field with this width.
    #[arg(long, value_name = "WIDTH")]
    pub price_variance: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Sort by length within windows of this many batches.
    #[arg(long, value_name = "BATCHES")]
    pub length_buckets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct GridArgs {
    #[arg(long, default_value = "cells=rnn,gru,lstm layers=1,2,3 hidden=64,128,256,512")]
    pub grid: String,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Stop after training this many cells in this run.
    #[arg(long, hide = true)]
    pub max_cells: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Defaults to test, or valid when the test part is empty.
    #[arg(long, value_enum)]
    pub part: Option<Part>,
    /// Another model's `session_id,score` file.
    #[arg(long, value_name = "FILE")]
    pub compare: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub report: Option<PathBuf>,
    /// Sessions at least this long share one bucket.
    #[arg(long, default_value_t = intentr::eval::DEFAULT_LENGTH_CAP)]
    pub length_cap: usize,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
#[command(group(ArgGroup::new("input").required(true).args(["data", "clicks"])))]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Directory written by `prepare`; scores vocabularies checked against the checkpoint.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, requires = "data")]
    pub part: Option<Part>,
    /// Raw RecSys clicks; needs `--vocab-from` for the vocabularies.
    #[arg(long, value_name = "FILE", requires = "vocab_from")]
    pub clicks: Option<PathBuf>,
    /// Prepared directory whose vocabularies the checkpoint was trained with.
    #[arg(long, value_name = "DIR")]
    pub vocab_from: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "lstm")]
    pub cell: CellKind,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb one analytic gradient before checking.
    #[arg(long, hide = true)]
    pub corrupt: bool,
    #[arg(long, value_name = "DIR")]
    pub report: Option<PathBuf>,
}
