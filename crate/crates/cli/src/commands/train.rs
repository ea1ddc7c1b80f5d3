use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use yieldxai::data::{read_dataset, split_dataset, Modality, PixelSample, SplitMode};
use yieldxai::encoders::EncoderKind;
use yieldxai::model::ModelConfig;
use yieldxai::training::{self, History, MetricsReport, TrainConfig};

use super::{default_model, split_path, Inputs, Subset, DEFAULT_DATA_DIR, DEFAULT_TRAIN_DIR, MODEL_FILE, SPLIT_FILE};
use crate::config;
use crate::error::CliError;
use crate::report::{num, Run, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Args, Serialize)]
pub struct TrainFlags {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `random`, `loyo:<year>` or `lofo:<farm>`.
    #[arg(long)]
    split: Option<String>,
    /// Temporal encoder: transformer, lstm, alstm or cnn1d.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    cosine_epochs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub split: String,
    pub encoder: String,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub cosine_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: PathBuf::from(DEFAULT_DATA_DIR),
            out: PathBuf::from(DEFAULT_TRAIN_DIR),
            seed: 0,
            split: "random".into(),
            encoder: "transformer".into(),
            hidden: 32,
            layers: 4,
            heads: 1,
            batch_size: 256,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            cosine_epochs: t.cosine_epochs,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_delta: t.min_delta,
        }
    }
}

pub fn parse_split(s: &str) -> Result<SplitMode, CliError> {
    let bad = || CliError::Usage(format!("split '{s}' is not random, loyo:<year> or lofo:<farm>"));
    match s.split_once(':') {
        None if s == "random" => Ok(SplitMode::Random),
        Some(("loyo", year)) => Ok(SplitMode::LeaveOneYearOut { year: year.parse().map_err(|_| bad())? }),
        Some(("lofo", farm)) => Ok(SplitMode::LeaveOneFarmOut { farm: farm.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

fn metrics_rows(reports: &[MetricsReport]) -> Vec<Vec<String>> {
    reports.iter().map(|r| vec![r.level.name().to_string(), num(r.r2), num(r.rmse), num(r.mae)]).collect()
}

fn history_rows(h: &History) -> Vec<Vec<String>> {
    h.epochs.iter().map(|e| vec![e.epoch.to_string(), num(e.lr), num(e.train_loss), num(e.val_loss)]).collect()
}

pub fn train(doc: Option<&toml::Table>, flags: &TrainFlags, seed: Option<u64>) -> Result<(), CliError> {
    let s: TrainSettings = config::resolve(doc, "train", flags, seed)?;
    let mode = parse_split(&s.split)?;
    let kind: EncoderKind = s.encoder.parse()?;
    let dataset = read_dataset(&s.data)?;
    let max_len = |m: Modality| dataset.samples.iter().map(|p| p.steps(m)).max().unwrap_or(0);
    let model_config = ModelConfig::with_temporal(kind, s.hidden, s.layers, s.heads, Some((max_len(Modality::Satellite), max_len(Modality::Weather))))?;
    let split = split_dataset(&dataset.samples, mode, s.seed)?;
    let cfg = TrainConfig {
        batch_size: s.batch_size,
        lr: s.lr,
        weight_decay: s.weight_decay,
        warmup_epochs: s.warmup_epochs,
        cosine_epochs: s.cosine_epochs,
        max_epochs: s.max_epochs,
        patience: s.patience,
        min_delta: s.min_delta,
        seed: s.seed,
        ..TrainConfig::default()
    };
    let outcome = training::train(&model_config, &dataset.samples, &split, &cfg)?;
    log::info!("best epoch {} of {}", outcome.history.best_epoch, outcome.history.epochs.len());

    let mut run = Run::create(&s.out)?;
    outcome.model.save(&run.path(MODEL_FILE))?;
    run.record(MODEL_FILE);
    let split_json = serde_json::to_string_pretty(&split).map_err(|e| CliError::Data(format!("split: {e}")))? + "\n";
    run.text(SPLIT_FILE, &split_json)?;
    run.csv(HISTORY_FILE, &["epoch", "lr", "train_loss", "val_loss"], &history_rows(&outcome.history))?;
    let inputs = Inputs { model: outcome.model, dataset, split };
    let held_out = inputs.subset(Subset::Heldout)?;
    run.csv(METRICS_FILE, &METRICS_HEADER, &metrics_rows(&training::evaluate(&inputs.model, &held_out)?))?;
    run.finish(&config::to_toml("train", &s)?)
}

#[derive(Args, Serialize)]
pub struct EvalFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split file; defaults to the one next to the checkpoint.
    #[arg(long)]
    split: Option<PathBuf>,
    /// train, val, test, heldout or all.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { data: DEFAULT_DATA_DIR.into(), model: default_model(), split: None, subset: Subset::Heldout, out: "runs/eval".into(), seed: 0 }
    }
}

pub fn eval(doc: Option<&toml::Table>, flags: &EvalFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: EvalSettings = config::resolve(doc, "eval", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    let samples: Vec<&PixelSample> = inputs.subset(s.subset)?;
    let reports = training::evaluate(&inputs.model, &samples)?;
    let mut run = Run::create(&s.out)?;
    run.csv(METRICS_FILE, &METRICS_HEADER, &metrics_rows(&reports))?;
    run.finish(&config::to_toml("eval", &s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_strings() {
        assert_eq!(parse_split("random").unwrap(), SplitMode::Random);
        assert_eq!(parse_split("loyo:2020").unwrap(), SplitMode::LeaveOneYearOut { year: 2020 });
        assert_eq!(parse_split("lofo:3").unwrap(), SplitMode::LeaveOneFarmOut { farm: 3 });
        for bad in ["loyo", "loyo:x", "kfold:3", ""] {
            assert!(matches!(parse_split(bad), Err(CliError::Usage(_))));
        }
    }
}
