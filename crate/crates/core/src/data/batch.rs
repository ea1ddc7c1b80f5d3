use super::{Modality, PixelSample, DEM_FEATURES, SA_BANDS, SA_FEATURES, SCL_PAD_CLASS, SOIL_FEATURES, W_FEATURES};
use crate::encoders::SeqBatch;
use crate::error::{Error, Result};
use crate::numgrad::Array;

/// Sentinel written into padded time steps.
pub const PAD_VALUE: f64 = -1.0;

/// Padded model input for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub satellite: SeqBatch,
    /// Weather sequences stored once per distinct series.
    pub weather: SeqBatch,
    /// `[B, 24]`.
    pub soil: Array,
    /// `[B, 5]`.
    pub dem: Array,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Padding flags of batch element `b` for a temporal modality.
    pub fn padding_mask(&self, m: Modality, b: usize) -> Vec<bool> {
        let seq = match m {
            Modality::Satellite => &self.satellite,
            Modality::Weather => &self.weather,
            _ => return vec![],
        };
        let row = seq.index[b];
        let len = seq.lengths[row];
        (0..seq.steps()).map(|t| t >= len).collect()
    }
}

fn pad_modality(samples: &[&PixelSample], m: Modality) -> SeqBatch {
    let f = m.features();
    let steps = samples.iter().map(|s| s.steps(m)).max().unwrap_or(0);
    let mut x = Vec::with_capacity(samples.len() * steps * f);
    let mut days = Vec::with_capacity(samples.len() * steps);
    let mut pad_row = vec![PAD_VALUE; f];
    if m == Modality::Satellite {
        pad_row[SA_BANDS..].iter_mut().for_each(|v| *v = 0.0);
        pad_row[SA_BANDS + SCL_PAD_CLASS] = 1.0;
    }
    for s in samples {
        let t = s.steps(m);
        x.extend_from_slice(s.values(m));
        days.extend(s.days(m).iter().map(|&d| d as f64));
        for _ in t..steps {
            x.extend_from_slice(&pad_row);
            days.push(0.0);
        }
    }
    SeqBatch {
        x: Array::new(vec![samples.len(), steps, f], x).expect("consistent"),
        days,
        lengths: samples.iter().map(|s| s.steps(m)).collect(),
        index: (0..samples.len()).collect(),
    }
}

/// Right-pads every sequence to the batch maximum. Continuous channels of a
/// padded step hold −1 and its scene-class one-hot marks only the pad class.
pub fn pad_batch(samples: &[&PixelSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::contract("cannot pad an empty batch"));
    }
    for s in samples {
        let widths_ok = s.x_sa.len() == s.sa_steps() * SA_FEATURES
            && s.x_w.len() == s.w_steps() * W_FEATURES
            && s.x_so.len() == SOIL_FEATURES
            && s.x_dem.len() == DEM_FEATURES;
        if !widths_ok {
            return Err(Error::contract(format!("pixel {} does not match the 25/4/24/5 schema", s.pixel_id)));
        }
    }
    let b = samples.len();
    Ok(Batch {
        satellite: pad_modality(samples, Modality::Satellite),
        weather: pad_modality(samples, Modality::Weather).deduplicated(),
        soil: Array::new(vec![b, SOIL_FEATURES], samples.iter().flat_map(|s| s.x_so.iter().copied()).collect())?,
        dem: Array::new(vec![b, DEM_FEATURES], samples.iter().flat_map(|s| s.x_dem.iter().copied()).collect())?,
        y: samples.iter().map(|s| s.y).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::sample;
    use super::super::SCL_CLASSES;
    use super::*;

    #[test]
    fn shorter_sequence_is_right_padded() {
        let a = sample(0, 0, 2020, 3, 2);
        let b = sample(1, 0, 2020, 5, 2);
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.satellite.steps(), 5);
        assert_eq!(batch.padding_mask(Modality::Satellite, 0), vec![false, false, false, true, true]);
        assert_eq!(batch.padding_mask(Modality::Satellite, 1), vec![false; 5]);
    }

    #[test]
    fn single_sample_has_no_padding() {
        let a = sample(0, 0, 2020, 4, 6);
        let batch = pad_batch(&[&a]).unwrap();
        assert!(batch.satellite.padded().iter().all(|p| !p));
        assert!(batch.weather.padded().iter().all(|p| !p));
        assert_eq!(batch.satellite.x.data(), a.x_sa.as_slice());
    }

    #[test]
    fn padded_values_are_sentinels() {
        let a = sample(0, 0, 2020, 1, 1);
        let b = sample(1, 0, 2020, 2, 3);
        let batch = pad_batch(&[&a, &b]).unwrap();
        let row = &batch.satellite.x.data()[SA_FEATURES..2 * SA_FEATURES];
        assert!(row[..SA_BANDS].iter().all(|&v| v == -1.0));
        let mut onehot = vec![0.0; SCL_CLASSES];
        onehot[SCL_PAD_CLASS] = 1.0;
        assert_eq!(&row[SA_BANDS..], onehot.as_slice());
        let w = batch.weather.expanded();
        assert!(w.x.data()[W_FEATURES..3 * W_FEATURES].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn identical_weather_is_stored_once() {
        let a = sample(0, 3, 2020, 2, 4);
        let b = sample(1, 3, 2020, 2, 4);
        let batch = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.weather.rows(), 1);
        assert_eq!(batch.weather.index, vec![0, 0]);
        assert_eq!(batch.satellite.rows(), 2);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut a = sample(0, 0, 2020, 2, 2);
        a.x_dem.push(1.0);
        assert!(pad_batch(&[&a]).is_err());
        assert!(pad_batch(&[]).is_err());
    }
}
