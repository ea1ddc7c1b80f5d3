use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use yieldxai::analysis::{cart_fit, group_by_farm_year, linear_probe, probe_layers, weather_attr_table, ProbeLayer, DEFAULT_PIXELS_PER_FIELD};
use yieldxai::data::{Modality, PixelSample};
use yieldxai::xai::{layer_entropies, ExplainConfig, Method};

use super::explain::{explain_all, pick};
use super::{default_model, split_path, Inputs, Subset, DEFAULT_DATA_DIR};
use crate::config;
use crate::error::CliError;
use crate::report::{num, Run};

pub const PROBE_HEADER: [&str; 8] = ["layer", "modality", "index", "features", "n_train", "n_test", "train_rmse_t_ha", "test_rmse_t_ha"];
pub const TREES_HEADER: [&str; 10] = ["farm_id", "year", "method", "depth", "pixels", "n_train", "n_test", "train_mse", "test_mse", "test_r2"];
pub const ENTROPY_HEADER: [&str; 6] = ["field_id", "year", "encoder", "layer", "pixels", "entropy"];

#[derive(Args, Serialize)]
pub struct ProbeFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { data: DEFAULT_DATA_DIR.into(), model: default_model(), split: None, subset: Subset::Heldout, out: "runs/probe".into(), seed: 0 }
    }
}

pub fn probe(doc: Option<&toml::Table>, flags: &ProbeFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: ProbeSettings = config::resolve(doc, "probe", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    let samples = inputs.normalize(&inputs.subset(s.subset)?);
    let refs: Vec<&PixelSample> = samples.iter().collect();
    let layers = probe_layers(&inputs.model.config);
    let results: yieldxai::Result<Vec<_>> = layers.par_iter().map(|&l| linear_probe(&inputs.model, &refs, l, s.seed)).collect();
    let rows: Vec<Vec<String>> = results?
        .iter()
        .map(|r| {
            let (kind, modality, index) = match r.layer {
                ProbeLayer::Encoder { modality, layer } => ("encoder", modality.to_string(), layer.to_string()),
                ProbeLayer::Fusion => ("fusion", String::new(), String::new()),
            };
            vec![
                kind.to_string(),
                modality,
                index,
                r.features.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                num(r.train_rmse),
                num(r.test_rmse),
            ]
        })
        .collect();
    let mut run = Run::create(&s.out)?;
    run.csv("probe.csv", &PROBE_HEADER, &rows)?;
    run.finish(&config::to_toml("probe", &s)?)
}

#[derive(Args, Serialize)]
pub struct WeatherTreeFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// ar, ga or svs.
    #[arg(long)]
    method: Option<String>,
    /// 2 or 3.
    #[arg(long)]
    depth: Option<usize>,
    /// Pixels per field-year; 0 picks 200 for ar and ga, 32 for svs.
    #[arg(long)]
    pixels_per_field: Option<usize>,
    #[arg(long)]
    permutations: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherTreeSettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
    pub method: Method,
    pub depth: usize,
    pub pixels_per_field: usize,
    pub permutations: usize,
}

impl Default for WeatherTreeSettings {
    fn default() -> Self {
        Self {
            data: DEFAULT_DATA_DIR.into(),
            model: default_model(),
            split: None,
            subset: Subset::Heldout,
            out: "runs/weather-tree".into(),
            seed: 0,
            method: Method::Ar,
            depth: 2,
            pixels_per_field: 0,
            permutations: ExplainConfig::default().permutations,
        }
    }
}

pub fn weather_tree(doc: Option<&toml::Table>, flags: &WeatherTreeFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: WeatherTreeSettings = config::resolve(doc, "weather-tree", flags, seed)?;
    if !(2..=3).contains(&s.depth) {
        return Err(CliError::Usage(format!("tree depth must be 2 or 3, got {}", s.depth)));
    }
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    if s.pixels_per_field == 0 {
        s.pixels_per_field = if s.method == Method::Svs { 32 } else { DEFAULT_PIXELS_PER_FIELD };
    }
    let cfg = ExplainConfig { permutations: s.permutations, seed: s.seed, ..ExplainConfig::default() };
    let mut run = Run::create(&s.out)?;
    let mut rows = vec![];
    for ((farm, year), group) in group_by_farm_year(&inputs.subset(s.subset)?) {
        let chosen = pick(&group, s.pixels_per_field, s.seed);
        let series = explain_all(&inputs, &inputs.normalize(&chosen), Modality::Weather, s.method, &cfg)?;
        let table = weather_attr_table(&chosen, &series, s.seed)?;
        let tree = cart_fit(&table.train, s.depth)?;
        let (test_mse, test_r2) = if table.test.is_empty() { (f64::NAN, None) } else { (tree.mse(&table.test), tree.r2(&table.test)) };
        let stem = format!("tree_farm{farm}_{year}");
        run.text(&format!("{stem}.txt"), &tree.to_text())?;
        run.text(&format!("{stem}.json"), &(tree.to_json()? + "\n"))?;
        rows.push(vec![
            farm.to_string(),
            year.to_string(),
            s.method.to_string(),
            s.depth.to_string(),
            chosen.len().to_string(),
            table.train.len().to_string(),
            table.test.len().to_string(),
            num(tree.mse(&table.train)),
            num(test_mse),
            num(test_r2.unwrap_or(f64::NAN)),
        ]);
    }
    run.csv("trees.csv", &TREES_HEADER, &rows)?;
    run.finish(&config::to_toml("weather-tree", &s)?)
}

#[derive(Args, Serialize)]
pub struct EntropyFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pixels per field-year; 0 for all.
    #[arg(long)]
    pixels_per_field: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
    pub pixels_per_field: usize,
}

impl Default for EntropySettings {
    fn default() -> Self {
        Self { data: DEFAULT_DATA_DIR.into(), model: default_model(), split: None, subset: Subset::Heldout, out: "runs/entropy".into(), seed: 0, pixels_per_field: 0 }
    }
}

pub fn entropy(doc: Option<&toml::Table>, flags: &EntropyFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: EntropySettings = config::resolve(doc, "entropy", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    let chosen = pick(&inputs.subset(s.subset)?, s.pixels_per_field, s.seed);
    let samples = inputs.normalize(&chosen);
    let refs: Vec<&PixelSample> = samples.iter().collect();
    let predictions = inputs.model.predict_many(&refs)?;
    // (field, year, modality, layer) -> (sum, pixels)
    let mut acc: BTreeMap<(u32, i32, Modality, usize), (f64, usize)> = BTreeMap::new();
    for (p, pred) in refs.iter().zip(&predictions) {
        for m in [Modality::Satellite, Modality::Weather] {
            let Some(record) = pred.attention(m) else { continue };
            for (l, h) in layer_entropies(record)?.into_iter().enumerate() {
                let e = acc.entry((p.field_id, p.year, m, l)).or_default();
                e.0 += h;
                e.1 += 1;
            }
        }
    }
    if acc.is_empty() {
        return Err(CliError::Data("the model has no attention-based temporal encoder".into()));
    }
    let rows: Vec<Vec<String>> = acc
        .iter()
        .map(|(&(f, y, m, l), &(sum, n))| vec![f.to_string(), y.to_string(), m.to_string(), l.to_string(), n.to_string(), num(sum / n as f64)])
        .collect();
    let mut run = Run::create(&s.out)?;
    run.csv("entropy.csv", &ENTROPY_HEADER, &rows)?;
    run.finish(&config::to_toml("entropy", &s)?)
}
