use serde::{Deserialize, Serialize};

use super::{PixelSample, DEM_FEATURES, SA_BANDS, SA_FEATURES, SOIL_FEATURES, W_FEATURES};
use crate::error::{Error, Result};

/// Per-channel minimum and maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ChannelRange {
    fn empty(n: usize) -> Self {
        Self { min: vec![f64::INFINITY; n], max: vec![f64::NEG_INFINITY; n] }
    }

    fn observe(&mut self, row: &[f64]) {
        for (c, &v) in row.iter().take(self.min.len()).enumerate() {
            self.min[c] = self.min[c].min(v);
            self.max[c] = self.max[c].max(v);
        }
    }

    /// Maps `[min, max]` onto `[0, 1]`; constant channels map to 0.
    pub fn scale(&self, c: usize, v: f64) -> f64 {
        let span = self.max[c] - self.min[c];
        if span > 0.0 {
            (v - self.min[c]) / span
        } else {
            0.0
        }
    }

    fn apply(&self, values: &mut [f64], stride: usize) {
        for row in values.chunks_mut(stride) {
            for c in 0..self.min.len() {
                row[c] = self.scale(c, row[c]);
            }
        }
    }
}

/// Min-max statistics of every continuous channel. Scene-class one-hot
/// channels are not included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub satellite: ChannelRange,
    pub weather: ChannelRange,
    pub soil: ChannelRange,
    pub dem: ChannelRange,
}

pub fn normalize_fit<'a>(train: impl IntoIterator<Item = &'a PixelSample>) -> Result<NormStats> {
    let mut stats = NormStats {
        satellite: ChannelRange::empty(SA_BANDS),
        weather: ChannelRange::empty(W_FEATURES),
        soil: ChannelRange::empty(SOIL_FEATURES),
        dem: ChannelRange::empty(DEM_FEATURES),
    };
    let mut n = 0;
    for s in train {
        s.x_sa.chunks(SA_FEATURES).for_each(|r| stats.satellite.observe(r));
        s.x_w.chunks(W_FEATURES).for_each(|r| stats.weather.observe(r));
        stats.soil.observe(&s.x_so);
        stats.dem.observe(&s.x_dem);
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("normalization needs at least one training sample"));
    }
    Ok(stats)
}

pub fn normalize_apply(sample: &PixelSample, stats: &NormStats) -> PixelSample {
    let mut out = sample.clone();
    stats.satellite.apply(&mut out.x_sa, SA_FEATURES);
    stats.weather.apply(&mut out.x_w, W_FEATURES);
    stats.soil.apply(&mut out.x_so, SOIL_FEATURES);
    stats.dem.apply(&mut out.x_dem, DEM_FEATURES);
    out
}
