use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use yieldxai::analysis::{sample_per_field, sample_pixels, spearman};
use yieldxai::data::{Modality, PixelSample};
use yieldxai::model::{wma_relevance, ModalityRelevance};
use yieldxai::xai::{self, cosine_similarity, infidelity, max_sensitivity, svs_modality_aggregate, svs_scores, AttributionSeries, ExplainConfig, Method, ModalityGame};

use super::{default_model, split_path, Inputs, Subset, DEFAULT_DATA_DIR};
use crate::config;
use crate::error::CliError;
use crate::report::{num, shares, Run};

pub const ATTRIBUTIONS_HEADER: [&str; 8] = ["pixel_id", "field_id", "year", "method", "modality", "step", "day", "score"];
pub const SIMILARITY_HEADER: [&str; 6] = ["field_id", "year", "pixel_a", "pixel_b", "cosine", "abs_pred_diff_t_ha"];
pub const SIMILARITY_SUMMARY_HEADER: [&str; 4] = ["field_id", "year", "pairs", "spearman"];
pub const MODALITY_HEADER: [&str; 8] = ["pixel_id", "field_id", "year", "method", "satellite", "weather", "soil", "dem"];
pub const MODALITY_SUMMARY_HEADER: [&str; 5] = ["method", "modality", "pixels", "mean_share", "sd_share"];
pub const ROBUSTNESS_HEADER: [&str; 8] = ["pixel_id", "field_id", "year", "method", "modality", "radius", "infidelity", "max_sensitivity"];
pub const ROBUSTNESS_SUMMARY_HEADER: [&str; 5] = ["method", "radius", "pixels", "mean_infidelity", "mean_max_sensitivity"];

/// Pixels of `samples`, `per_field` of each field-year or all of them for 0.
pub fn pick<'a>(samples: &[&'a PixelSample], per_field: usize, seed: u64) -> Vec<&'a PixelSample> {
    if per_field == 0 {
        samples.to_vec()
    } else {
        sample_per_field(samples, per_field, seed)
    }
}

fn or_nan(r: yieldxai::Result<f64>, what: &str) -> f64 {
    r.unwrap_or_else(|e| {
        log::warn!("{what}: {e}");
        f64::NAN
    })
}

#[derive(Args, Serialize)]
pub struct ExplainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to explain.
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
    /// ar, ga or svs.
    #[arg(long)]
    method: Option<String>,
    /// satellite or weather.
    #[arg(long)]
    modality: Option<String>,
    /// Residual mixing in attention rollout.
    #[arg(long)]
    residual: Option<bool>,
    /// Permutations per SVS estimate.
    #[arg(long)]
    permutations: Option<usize>,
    /// Pixels explained per field-year; 0 for all.
    #[arg(long)]
    pixels_per_field: Option<usize>,
    /// Pixels per field-year entering the pairwise similarity report.
    #[arg(long)]
    similarity_pixels: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
    pub method: Method,
    pub modality: Modality,
    pub residual: bool,
    pub permutations: usize,
    pub pixels_per_field: usize,
    pub similarity_pixels: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        let x = ExplainConfig::default();
        Self {
            data: DEFAULT_DATA_DIR.into(),
            model: default_model(),
            split: None,
            subset: Subset::Heldout,
            out: "runs/explain".into(),
            seed: 0,
            method: Method::Ar,
            modality: Modality::Satellite,
            residual: x.residual,
            permutations: x.permutations,
            pixels_per_field: 0,
            similarity_pixels: 32,
        }
    }
}

/// Attributions of `modality` for every sample, in input order.
pub fn explain_all(inputs: &Inputs, samples: &[PixelSample], modality: Modality, method: Method, cfg: &ExplainConfig) -> Result<Vec<AttributionSeries>, CliError> {
    let baseline = inputs.baseline()?;
    let out: yieldxai::Result<Vec<_>> = samples.par_iter().map(|s| xai::explain(&inputs.model, s, modality, method, &baseline, cfg)).collect();
    Ok(out?)
}

fn similarity(series: &[AttributionSeries], yhat: &[f64], per_field: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut groups: BTreeMap<(u32, i32), Vec<usize>> = BTreeMap::new();
    for (i, a) in series.iter().enumerate() {
        groups.entry((a.field_id, a.year)).or_default().push(i);
    }
    let (mut pairs, mut summary) = (vec![], vec![]);
    for ((field, year), mut idx) in groups {
        idx.truncate(per_field);
        let (mut cos, mut diff) = (vec![], vec![]);
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                let c = or_nan(cosine_similarity(&series[i].scores, &series[j].scores), "cosine similarity");
                let d = (yhat[i] - yhat[j]).abs();
                pairs.push(vec![field.to_string(), year.to_string(), series[i].pixel_id.to_string(), series[j].pixel_id.to_string(), num(c), num(d)]);
                cos.push(c);
                diff.push(d);
            }
        }
        let rho = if cos.len() < 2 || cos.iter().any(|c| c.is_nan()) {
            f64::NAN
        } else {
            spearman(&cos, &diff).unwrap_or(f64::NAN)
        };
        summary.push(vec![field.to_string(), year.to_string(), cos.len().to_string(), num(rho)]);
    }
    (pairs, summary)
}

pub fn explain(doc: Option<&toml::Table>, flags: &ExplainFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: ExplainSettings = config::resolve(doc, "explain", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    if !s.modality.is_temporal() {
        return Err(CliError::Usage(format!("explain needs a temporal modality, got {}", s.modality)));
    }
    let chosen = pick(&inputs.subset(s.subset)?, s.pixels_per_field, s.seed);
    let samples = inputs.normalize(&chosen);
    let cfg = ExplainConfig { residual: s.residual, permutations: s.permutations, seed: s.seed };
    let series = explain_all(&inputs, &samples, s.modality, s.method, &cfg)?;
    let refs: Vec<&PixelSample> = samples.iter().collect();
    let yhat = inputs.model.predict_values(&refs)?;

    let mut rows = vec![];
    for a in &series {
        for (t, (day, score)) in a.days.iter().zip(&a.scores).enumerate() {
            rows.push(vec![
                a.pixel_id.to_string(),
                a.field_id.to_string(),
                a.year.to_string(),
                a.method.to_string(),
                a.modality.to_string(),
                t.to_string(),
                day.to_string(),
                num(*score),
            ]);
        }
    }
    let (pairs, summary) = similarity(&series, &yhat, s.similarity_pixels);
    let mut run = Run::create(&s.out)?;
    run.csv("attributions.csv", &ATTRIBUTIONS_HEADER, &rows)?;
    run.csv("similarity.csv", &SIMILARITY_HEADER, &pairs)?;
    run.csv("similarity_summary.csv", &SIMILARITY_SUMMARY_HEADER, &summary)?;
    run.finish(&config::to_toml("explain", &s)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityMethod {
    Wma,
    Svs,
}

#[derive(Args, Serialize)]
pub struct ModalityFlags {
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
    /// wma or svs.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    permutations: Option<usize>,
    /// Pixels per field-year; 0 picks all for wma and 16 for svs.
    #[arg(long)]
    pixels_per_field: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalitySettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
    pub method: ModalityMethod,
    pub permutations: usize,
    pub pixels_per_field: usize,
}

impl Default for ModalitySettings {
    fn default() -> Self {
        Self {
            data: DEFAULT_DATA_DIR.into(),
            model: default_model(),
            split: None,
            subset: Subset::Heldout,
            out: "runs/modality".into(),
            seed: 0,
            method: ModalityMethod::Wma,
            permutations: ExplainConfig::default().permutations,
            pixels_per_field: 0,
        }
    }
}

pub fn modality(doc: Option<&toml::Table>, flags: &ModalityFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: ModalitySettings = config::resolve(doc, "modality", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    if s.pixels_per_field == 0 && s.method == ModalityMethod::Svs {
        s.pixels_per_field = 16;
    }
    let chosen = pick(&inputs.subset(s.subset)?, s.pixels_per_field, s.seed);
    let samples = inputs.normalize(&chosen);
    let (name, relevances): (&str, Vec<yieldxai::Result<ModalityRelevance>>) = match s.method {
        ModalityMethod::Wma => {
            let refs: Vec<&PixelSample> = samples.iter().collect();
            ("wma", inputs.model.predict_many(&refs)?.iter().map(wma_relevance).collect())
        }
        ModalityMethod::Svs => {
            let baseline = inputs.baseline()?;
            let model = &inputs.model;
            let shares = samples
                .par_iter()
                .map(|p| {
                    let scores: [Vec<f64>; 4] = [
                        svs_scores(model, p, Modality::Satellite, &baseline, s.permutations, s.seed)?,
                        svs_scores(model, p, Modality::Weather, &baseline, s.permutations, s.seed)?,
                        svs_scores(model, p, Modality::Soil, &baseline, s.permutations, s.seed)?,
                        svs_scores(model, p, Modality::Dem, &baseline, s.permutations, s.seed)?,
                    ];
                    svs_modality_aggregate(&scores)
                })
                .collect();
            ("svs", shares)
        }
    };
    let mut rows = vec![];
    let mut kept: Vec<[f64; 4]> = vec![];
    for (p, r) in samples.iter().zip(relevances) {
        match r {
            Ok(r) => {
                let mut row = vec![p.pixel_id.to_string(), p.field_id.to_string(), p.year.to_string(), name.to_string()];
                row.extend(shares(&r.shares));
                rows.push(row);
                kept.push(r.shares);
            }
            Err(yieldxai::Error::Degenerate(e)) => log::warn!("pixel {} skipped: {e}", p.pixel_id),
            Err(e) => return Err(e.into()),
        }
    }
    if kept.is_empty() {
        return Err(CliError::Data("no pixel has defined modality shares".into()));
    }
    let n = kept.len() as f64;
    let mut summary = vec![];
    for m in Modality::ALL {
        let mean = kept.iter().map(|v| v[m.index()]).sum::<f64>() / n;
        let sd = (kept.iter().map(|v| (v[m.index()] - mean).powi(2)).sum::<f64>() / n).sqrt();
        summary.push(vec![name.to_string(), m.to_string(), kept.len().to_string(), num(mean), num(sd)]);
    }
    let mut run = Run::create(&s.out)?;
    run.csv("modality.csv", &MODALITY_HEADER, &rows)?;
    run.csv("modality_summary.csv", &MODALITY_SUMMARY_HEADER, &summary)?;
    run.finish(&config::to_toml("modality", &s)?)
}

#[derive(Args, Serialize)]
pub struct RobustnessFlags {
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
    /// satellite or weather.
    #[arg(long)]
    modality: Option<String>,
    /// Comma-separated subset of ar, ga, svs.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Pixels drawn from the subset.
    #[arg(long)]
    pixels: Option<usize>,
    /// Comma-separated perturbation radii, normalized units.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Perturbations per max-sensitivity estimate.
    #[arg(long)]
    draws: Option<usize>,
    /// Random step masks per infidelity estimate.
    #[arg(long)]
    infidelity_draws: Option<usize>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    permutations: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSettings {
    pub data: PathBuf,
    pub model: PathBuf,
    pub split: Option<PathBuf>,
    pub subset: Subset,
    pub out: PathBuf,
    pub seed: u64,
    pub modality: Modality,
    pub methods: Vec<Method>,
    pub pixels: usize,
    pub radii: Vec<f64>,
    pub draws: usize,
    pub infidelity_draws: usize,
    pub mask_prob: f64,
    pub permutations: usize,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        Self {
            data: DEFAULT_DATA_DIR.into(),
            model: default_model(),
            split: None,
            subset: Subset::Heldout,
            out: "runs/robustness".into(),
            seed: 0,
            modality: Modality::Satellite,
            methods: Method::ALL.to_vec(),
            pixels: 20,
            radii: vec![0.01, 0.02, xai::DEFAULT_RADIUS, 0.1],
            draws: xai::DEFAULT_SENSITIVITY_DRAWS,
            infidelity_draws: 256,
            mask_prob: xai::DEFAULT_MASK_PROB,
            permutations: ExplainConfig::default().permutations,
        }
    }
}

pub fn robustness(doc: Option<&toml::Table>, flags: &RobustnessFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut s: RobustnessSettings = config::resolve(doc, "robustness", flags, seed)?;
    let split = split_path(s.split.as_deref(), &s.model);
    let inputs = Inputs::load(&s.model, &s.data, &split)?;
    s.split = Some(split);
    if !s.modality.is_temporal() || s.methods.is_empty() || s.radii.is_empty() {
        return Err(CliError::Usage("robustness needs a temporal modality, at least one method and one radius".into()));
    }
    let chosen = sample_pixels(&inputs.subset(s.subset)?, s.pixels, s.seed);
    let samples = inputs.normalize(&chosen);
    let baseline = inputs.baseline()?;
    let cfg = ExplainConfig { permutations: s.permutations, seed: s.seed, ..ExplainConfig::default() };
    let model = &inputs.model;
    let jobs: Vec<(&PixelSample, Method)> = samples.iter().flat_map(|p| s.methods.iter().map(move |&m| (p, m))).collect();
    let results: yieldxai::Result<Vec<(f64, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(p, method)| {
            let attribute = |x: &PixelSample| xai::explain(model, x, s.modality, method, &baseline, &cfg).map(|a| a.scores);
            let phi = attribute(p)?;
            let game = ModalityGame::new(model, p, s.modality, &baseline)?;
            let inf = infidelity(&game, &phi, s.infidelity_draws, s.mask_prob, s.seed)?;
            let sens = s.radii.iter().map(|&r| max_sensitivity(attribute, p, s.modality, r, s.draws, s.seed)).collect::<yieldxai::Result<Vec<f64>>>()?;
            Ok((inf, sens))
        })
        .collect();
    let results = results?;

    let mut rows = vec![];
    let mut totals: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (&(p, method), (inf, sens)) in jobs.iter().zip(&results) {
        let mi = s.methods.iter().position(|&m| m == method).unwrap();
        for (ri, (&r, &v)) in s.radii.iter().zip(sens).enumerate() {
            rows.push(vec![
                p.pixel_id.to_string(),
                p.field_id.to_string(),
                p.year.to_string(),
                method.to_string(),
                s.modality.to_string(),
                num(r),
                num(*inf),
                num(v),
            ]);
            let t = totals.entry((mi, ri)).or_default();
            t.0 += inf;
            t.1 += v;
        }
    }
    let n = samples.len() as f64;
    let summary: Vec<Vec<String>> = totals
        .iter()
        .map(|(&(mi, ri), &(inf, sens))| vec![s.methods[mi].to_string(), num(s.radii[ri]), samples.len().to_string(), num(inf / n), num(sens / n)])
        .collect();
    let mut run = Run::create(&s.out)?;
    run.csv("robustness.csv", &ROBUSTNESS_HEADER, &rows)?;
    run.csv("robustness_summary.csv", &ROBUSTNESS_SUMMARY_HEADER, &summary)?;
    run.finish(&config::to_toml("robustness", &s)?)
}
