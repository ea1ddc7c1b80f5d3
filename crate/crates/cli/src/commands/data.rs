use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use yieldxai::data::{generate_synthetic, write_dataset, SyntheticSpec, MANIFEST_FILE, SAMPLES_FILE};

use super::DEFAULT_DATA_DIR;
use crate::config;
use crate::error::CliError;
use crate::report::Run;

#[derive(Args, Serialize)]
pub struct GenDataFlags {
    /// Output directory of the dataset.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    farms: Option<usize>,
    #[arg(long)]
    fields_per_farm: Option<usize>,
    #[arg(long)]
    pixels_per_field: Option<usize>,
    /// Comma-separated.
    #[arg(long, value_delimiter = ',')]
    years: Option<Vec<i32>>,
    #[arg(long)]
    t_sa: Option<usize>,
    #[arg(long)]
    t_w: Option<usize>,
    #[arg(long)]
    cloud_probability: Option<f64>,
    /// Standard deviation of the yield noise, t/ha.
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: PathBuf,
    pub seed: u64,
    pub farms: usize,
    pub fields_per_farm: usize,
    pub pixels_per_field: usize,
    pub years: Vec<i32>,
    pub t_sa: usize,
    pub t_w: usize,
    pub max_trim_sa: usize,
    pub max_trim_w: usize,
    pub cloud_probability: f64,
    pub noise_sd: f64,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            out: PathBuf::from(DEFAULT_DATA_DIR),
            seed: spec.seed,
            farms: spec.farms,
            fields_per_farm: spec.fields_per_farm,
            pixels_per_field: spec.pixels_per_field,
            years: spec.years,
            t_sa: spec.t_sa,
            t_w: spec.t_w,
            max_trim_sa: spec.max_trim_sa,
            max_trim_w: spec.max_trim_w,
            cloud_probability: spec.cloud_probability,
            noise_sd: spec.yield_model.noise_sd,
        }
    }
}

impl GenDataSettings {
    pub fn spec(&self) -> SyntheticSpec {
        let base = SyntheticSpec::default();
        SyntheticSpec {
            farms: self.farms,
            fields_per_farm: self.fields_per_farm,
            pixels_per_field: self.pixels_per_field,
            years: self.years.clone(),
            t_sa: self.t_sa,
            t_w: self.t_w,
            max_trim_sa: self.max_trim_sa,
            max_trim_w: self.max_trim_w,
            cloud_probability: self.cloud_probability,
            yield_model: yieldxai::data::YieldModel { noise_sd: self.noise_sd, ..base.yield_model },
            seed: self.seed,
            ..base
        }
    }
}

pub fn gen_data(doc: Option<&toml::Table>, flags: &GenDataFlags, seed: Option<u64>) -> Result<(), CliError> {
    let s: GenDataSettings = config::resolve(doc, "gen-data", flags, seed)?;
    let dataset = generate_synthetic(&s.spec())?;
    write_dataset(&dataset, &s.out)?;
    log::info!("wrote {} samples to {}", dataset.len(), s.out.display());
    let mut run = Run::create(&s.out)?;
    run.record(MANIFEST_FILE);
    run.record(SAMPLES_FILE);
    run.finish(&config::to_toml("gen-data", &s)?)
}
