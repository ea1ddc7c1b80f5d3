//! Pixel samples, normalization, padding, splits, synthetic generation and
//! dataset files.

mod batch;
mod io;
mod norm;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use batch::{pad_batch, Batch, PAD_VALUE};
pub use io::{read_dataset, write_dataset, Manifest, ModalitySchema, DATASET_FORMAT_VERSION, MANIFEST_FILE, SAMPLES_FILE};
pub use norm::{normalize_apply, normalize_fit, ChannelRange, NormStats};
pub use split::{split_dataset, Split, SplitAssignment, SplitMode};
pub use synthetic::{generate_synthetic, peak_greenness, precipitation_in_window, SyntheticSpec, YieldModel};

use crate::error::{Error, Result};

pub const SA_BANDS: usize = 12;
/// Scene classes 0..=11 plus the padding class.
pub const SCL_CLASSES: usize = 13;
pub const SCL_PAD_CLASS: usize = 12;
pub const SA_FEATURES: usize = SA_BANDS + SCL_CLASSES;
pub const W_FEATURES: usize = 4;
pub const SOIL_FEATURES: usize = 24;
pub const DEM_FEATURES: usize = 5;

pub const BAND_NAMES: [&str; SA_BANDS] = ["B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12"];
pub const WEATHER_NAMES: [&str; W_FEATURES] = ["tmin", "tmean", "tmax", "precip"];
pub const SOIL_PROPERTIES: [&str; 8] = ["bdod", "cec", "cfvo", "clay", "nitrogen", "phh2o", "sand", "soc"];
pub const SOIL_DEPTHS: [&str; 3] = ["0-5cm", "5-15cm", "15-30cm"];
pub const DEM_NAMES: [&str; DEM_FEATURES] = ["elevation", "slope", "aspect", "curvature", "twi"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Satellite,
    Weather,
    Soil,
    Dem,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Satellite, Modality::Weather, Modality::Soil, Modality::Dem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Satellite => "satellite",
            Modality::Weather => "weather",
            Modality::Soil => "soil",
            Modality::Dem => "dem",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Modality::Satellite | Modality::Weather)
    }

    pub fn features(self) -> usize {
        match self {
            Modality::Satellite => SA_FEATURES,
            Modality::Weather => W_FEATURES,
            Modality::Soil => SOIL_FEATURES,
            Modality::Dem => DEM_FEATURES,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "satellite" | "sa" => Ok(Modality::Satellite),
            "weather" | "w" => Ok(Modality::Weather),
            "soil" | "so" => Ok(Modality::Soil),
            "dem" => Ok(Modality::Dem),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// One pixel in one year. Sequences are row-major, `steps × features`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSample {
    /// Stable across years for the same location.
    pub pixel_id: u64,
    pub field_id: u32,
    pub farm_id: u32,
    pub year: i32,
    pub crop: String,
    pub sa_days: Vec<u32>,
    pub x_sa: Vec<f64>,
    pub w_days: Vec<u32>,
    pub x_w: Vec<f64>,
    pub x_so: Vec<f64>,
    pub x_dem: Vec<f64>,
    /// Yield, t/ha.
    pub y: f64,
}

impl PixelSample {
    pub fn sa_steps(&self) -> usize {
        self.sa_days.len()
    }

    pub fn w_steps(&self) -> usize {
        self.w_days.len()
    }

    pub fn steps(&self, m: Modality) -> usize {
        match m {
            Modality::Satellite => self.sa_steps(),
            Modality::Weather => self.w_steps(),
            Modality::Soil | Modality::Dem => 1,
        }
    }

    pub fn values(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Satellite => &self.x_sa,
            Modality::Weather => &self.x_w,
            Modality::Soil => &self.x_so,
            Modality::Dem => &self.x_dem,
        }
    }

    pub fn values_mut(&mut self, m: Modality) -> &mut Vec<f64> {
        match m {
            Modality::Satellite => &mut self.x_sa,
            Modality::Weather => &mut self.x_w,
            Modality::Soil => &mut self.x_so,
            Modality::Dem => &mut self.x_dem,
        }
    }

    pub fn days(&self, m: Modality) -> &[u32] {
        match m {
            Modality::Satellite => &self.sa_days,
            Modality::Weather => &self.w_days,
            Modality::Soil | Modality::Dem => &[],
        }
    }

    /// Last weather day, taken as the harvest date.
    pub fn harvest_day(&self) -> Option<u32> {
        self.w_days.last().copied()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("pixel {} year {}: {msg}", self.pixel_id, self.year)));
        if self.x_sa.len() != self.sa_steps() * SA_FEATURES {
            return bad(format!("satellite has {} values for {} steps of {SA_FEATURES}", self.x_sa.len(), self.sa_steps()));
        }
        if self.x_w.len() != self.w_steps() * W_FEATURES {
            return bad(format!("weather has {} values for {} steps of {W_FEATURES}", self.x_w.len(), self.w_steps()));
        }
        if self.x_so.len() != SOIL_FEATURES {
            return bad(format!("soil has {} features, expected {SOIL_FEATURES}", self.x_so.len()));
        }
        if self.x_dem.len() != DEM_FEATURES {
            return bad(format!("dem has {} features, expected {DEM_FEATURES}", self.x_dem.len()));
        }
        if self.sa_days.is_empty() || self.w_days.is_empty() {
            return Err(Error::EmptySequence);
        }
        for days in [&self.sa_days, &self.w_days] {
            if days.windows(2).any(|w| w[1] <= w[0]) {
                return bad("day indices not strictly increasing".into());
            }
        }
        for (t, row) in self.x_sa.chunks(SA_FEATURES).enumerate() {
            let onehot = &row[SA_BANDS..];
            let ones = onehot.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || onehot.iter().any(|&v| v != 0.0 && v != 1.0) {
                return bad(format!("scene class at step {t} is not one-hot"));
            }
        }
        let all = [&self.x_sa, &self.x_w, &self.x_so, &self.x_dem];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return bad("non-finite feature".into());
        }
        if !(self.y.is_finite() && self.y > 0.0) {
            return bad(format!("yield {} must be positive", self.y));
        }
        Ok(())
    }
}

/// Samples plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<PixelSample>,
}

impl Dataset {
    pub fn new(samples: Vec<PixelSample>) -> Self {
        Self { manifest: Manifest::new(), samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, split: &SplitAssignment, which: Split) -> Vec<&PixelSample> {
        self.samples.iter().filter(|s| split.split_of(s) == Some(which)).collect()
    }

    pub fn field_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.field_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Minimal valid sample with `t_sa` satellite and `t_w` weather steps.
    pub fn sample(pixel_id: u64, field_id: u32, year: i32, t_sa: usize, t_w: usize) -> PixelSample {
        let mut x_sa = vec![];
        for t in 0..t_sa {
            for b in 0..SA_BANDS {
                x_sa.push(0.05 + 0.01 * b as f64 + 0.02 * t as f64 + 0.001 * pixel_id as f64);
            }
            let mut onehot = [0.0; SCL_CLASSES];
            onehot[4] = 1.0;
            x_sa.extend_from_slice(&onehot);
        }
        let x_w = (0..t_w).flat_map(|t| [5.0 + t as f64, 10.0 + t as f64, 15.0 + t as f64, (t % 3) as f64]).collect();
        PixelSample {
            pixel_id,
            field_id,
            farm_id: field_id / 4,
            year,
            crop: "corn".into(),
            sa_days: (0..t_sa as u32).map(|t| 100 + 5 * t).collect(),
            x_sa,
            w_days: (0..t_w as u32).map(|t| 100 + t).collect(),
            x_w,
            x_so: (0..SOIL_FEATURES).map(|i| i as f64 + 0.5 * pixel_id as f64).collect(),
            x_dem: (0..DEM_FEATURES).map(|i| 10.0 * i as f64 + pixel_id as f64).collect(),
            y: 8.0 + 0.1 * pixel_id as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::sample;
    use super::*;

    #[test]
    fn fixture_is_valid() {
        sample(1, 0, 2020, 3, 5).validate().unwrap();
    }

    #[test]
    fn width_violations_are_contract_errors() {
        let mut s = sample(1, 0, 2020, 3, 5);
        s.x_so.pop();
        assert!(matches!(s.validate(), Err(Error::Contract(_))));
        let mut s = sample(1, 0, 2020, 3, 5);
        s.x_w.push(0.0);
        assert!(matches!(s.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn scene_class_must_be_one_hot() {
        let mut s = sample(1, 0, 2020, 2, 2);
        s.x_sa[SA_BANDS + 1] = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn days_must_increase_and_yield_be_positive() {
        let mut s = sample(1, 0, 2020, 3, 3);
        s.w_days[2] = s.w_days[1];
        assert!(s.validate().is_err());
        let mut s = sample(1, 0, 2020, 3, 3);
        s.y = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn modality_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
    }
}
