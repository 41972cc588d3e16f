//! `ecg-aging`: the pipeline as composable subcommands.
//!
//! Stages talk through files under `--out` only. Typical order:
//! `synth` (or `ingest`), `features`, `split`, `train-gbdt`, `evaluate`,
//! `shap-summary`, `train-refnet`, `saliency`, `aggregate`, `report`.

mod artifact;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ecg-aging", version, about = "Single-lead ECG aging analysis pipeline")]
pub struct Cli {
    /// Output root; every stage writes into `<out>/<subcommand>/`.
    #[arg(long, global = true, env = "ECG_AGING_OUT", default_value = "ecg-aging-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with ground truth.
    Synth(SynthArgs),
    /// Load a cohort manifest (WFDB or CSV records) into the working format.
    Ingest(IngestArgs),
    /// Per-record feature table.
    Features(FeaturesArgs),
    /// Stratified train/validation/test split.
    Split(SplitArgs),
    /// Train the gradient-boosted tree classifier.
    TrainGbdt(TrainGbdtArgs),
    /// Train the convolutional reference network.
    TrainRefnet(TrainRefnetArgs),
    /// Macro-AUC and accuracy with bootstrap intervals.
    Evaluate(EvaluateArgs),
    /// TreeSHAP feature rankings per class.
    ShapSummary(ShapArgs),
    /// Saliency maps of the reference network.
    Saliency(SaliencyArgs),
    /// Beat-aligned group aggregation of saliency maps.
    Aggregate(AggregateArgs),
    /// Plot-ready tables from earlier stages.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Focal,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceArg {
    None,
    Oversample,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum GroupsArg {
    #[value(name = "15")]
    #[serde(rename = "15")]
    Fifteen,
    #[value(name = "4")]
    #[serde(rename = "4")]
    Four,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingArg {
    PerSubject,
    PerBeat,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    pub n_per_group: usize,
    /// Override every group's record duration in seconds.
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// Trend specification CSV; the built-in aging trends otherwise.
    #[arg(long)]
    #[serde(skip)]
    pub trend_spec: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Cohort manifest CSV: record_id,path,format,fs,age.
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGbdtArgs {
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = BalanceArg::Oversample)]
    pub balance: BalanceArg,
    #[arg(long, value_enum, default_value_t = GroupsArg::Fifteen)]
    pub groups: GroupsArg,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_leaves: Option<usize>,
    #[arg(long)]
    pub min_child_weight: Option<f64>,
    /// Early-stopping patience in rounds; 0 disables early stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainRefnetArgs {
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Focal)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = BalanceArg::None)]
    pub balance: BalanceArg,
    #[arg(long, value_enum, default_value_t = GroupsArg::Fifteen)]
    pub groups: GroupsArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate; 1e-5 for focal and 1e-2 for CE otherwise.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub crops_per_record: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// A model written by `train-gbdt` or `train-refnet`.
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    /// Feature table, for tree models.
    #[arg(long)]
    #[serde(skip)]
    pub features: Option<PathBuf>,
    /// Cohort manifest, for the network.
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = ecg_aging::eval::DEFAULT_BOOTSTRAP)]
    pub n_bootstrap: usize,
    /// Custom 15-to-4 group mapping, e.g. "0,0,0,0,1,1,1,2,2,2,3,3,3,3,3".
    #[arg(long)]
    pub group_map: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ShapArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub features: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetArg::Train)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SaliencyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetArg::Train)]
    pub subset: SubsetArg,
    /// Consecutive crops per record, from the start.
    #[arg(long, default_value_t = 8)]
    pub crops_per_record: usize,
    /// Class whose logit is differentiated; the predicted class otherwise.
    #[arg(long)]
    pub target_class: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AggregateArgs {
    /// Attribution maps JSON: a `saliency` artifact or a bare array of maps.
    #[arg(long)]
    #[serde(skip)]
    pub maps: PathBuf,
    /// Cohort manifest providing each record's age group.
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    pub window_pre_ms: f64,
    #[arg(long, default_value_t = 500.0)]
    pub window_post_ms: f64,
    #[arg(long, default_value_t = 8)]
    pub k_top: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::PerSubject)]
    pub weighting: WeightingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub shap: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub aggregate: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
