use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::Table;
use crate::data::{Modality, PixelSample, W_FEATURES};
use crate::error::{Error, Result};
use crate::xai::AttributionSeries;

pub const WEATHER_TABLE_FEATURES: [&str; 5] = ["min_temp", "mean_temp", "max_temp", "precipitation", "days_before_harvest"];
pub const DAYS_BEFORE_HARVEST: usize = 4;
pub const TABLE_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_PIXELS_PER_FIELD: usize = 200;

/// Step-level weather table of one farm-year, split into train and test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherTable {
    pub farm_id: u32,
    pub year: i32,
    pub train: Table,
    pub test: Table,
}

/// Up to `per_field` pixels of each field-year, drawn without replacement.
pub fn sample_per_field<'a>(samples: &[&'a PixelSample], per_field: usize, seed: u64) -> Vec<&'a PixelSample> {
    let mut groups: BTreeMap<(u32, i32), Vec<&'a PixelSample>> = BTreeMap::new();
    for &s in samples {
        groups.entry((s.field_id, s.year)).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    for (_, mut g) in groups {
        g.sort_by_key(|s| s.pixel_id);
        g.shuffle(&mut rng);
        g.truncate(per_field);
        g.sort_by_key(|s| s.pixel_id);
        out.extend(g);
    }
    out
}

/// Up to `n` pixels drawn without replacement, in pixel order.
pub fn sample_pixels<'a>(samples: &[&'a PixelSample], n: usize, seed: u64) -> Vec<&'a PixelSample> {
    let mut all = samples.to_vec();
    all.sort_by_key(|s| (s.pixel_id, s.year));
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(n);
    all.sort_by_key(|s| (s.pixel_id, s.year));
    all
}

pub fn group_by_farm_year<'a>(samples: &[&'a PixelSample]) -> BTreeMap<(u32, i32), Vec<&'a PixelSample>> {
    let mut groups: BTreeMap<(u32, i32), Vec<&'a PixelSample>> = BTreeMap::new();
    for &s in samples {
        groups.entry((s.farm_id, s.year)).or_default().push(s);
    }
    groups
}

/// One row per weather step: the raw weather values and days before harvest,
/// with the step's attribution as target. Rows are shuffled, then split 80/20.
///
/// `raw[i]` and `series[i]` must describe the same pixel; all pixels must share a farm-year.
pub fn weather_attr_table(raw: &[&PixelSample], series: &[AttributionSeries], seed: u64) -> Result<WeatherTable> {
    let first = raw.first().ok_or_else(|| Error::contract("weather table over no pixels"))?;
    if raw.len() != series.len() {
        return Err(Error::shape(format!("{} pixels with {} attribution series", raw.len(), series.len())));
    }
    let mut rows = vec![];
    let mut targets = vec![];
    for (s, a) in raw.iter().zip(series) {
        if (s.farm_id, s.year) != (first.farm_id, first.year) {
            return Err(Error::contract("weather table mixes farm-years"));
        }
        if a.modality != Modality::Weather || a.pixel_id != s.pixel_id || a.days != s.w_days {
            return Err(Error::contract(format!("attribution series does not match weather of pixel {}", s.pixel_id)));
        }
        let harvest = s.harvest_day().ok_or(Error::EmptySequence)?;
        for ((day, w), &score) in s.w_days.iter().zip(s.x_w.chunks(W_FEATURES)).zip(&a.scores) {
            let mut row = w.to_vec();
            row.push(f64::from(harvest - day));
            rows.push(row);
            targets.push(score);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (rows.len() as f64 * TABLE_TRAIN_FRACTION).round() as usize;
    let all = Table::new(WEATHER_TABLE_FEATURES.iter().map(|s| s.to_string()).collect(), rows, targets)?;
    Ok(WeatherTable { farm_id: first.farm_id, year: first.year, train: all.select(&order[..n_train]), test: all.select(&order[n_train..]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::sample;
    use crate::xai::Method;

    fn series(s: &PixelSample) -> AttributionSeries {
        let scores = (0..s.w_steps()).map(|t| t as f64 * 0.01).collect();
        AttributionSeries::new(Method::Svs, Modality::Weather, s, scores).unwrap()
    }

    #[test]
    fn one_row_per_step() {
        let px = [sample(1, 0, 2020, 2, 5), sample(2, 1, 2020, 2, 7)];
        let refs: Vec<&PixelSample> = px.iter().collect();
        let ser: Vec<AttributionSeries> = px.iter().map(series).collect();
        let t = weather_attr_table(&refs, &ser, 3).unwrap();
        assert_eq!(t.train.len() + t.test.len(), 12);
        assert_eq!(t.train.len(), 10);
        for row in t.train.rows.iter().chain(&t.test.rows) {
            assert!(row[DAYS_BEFORE_HARVEST] >= 0.0);
        }
        assert_eq!(weather_attr_table(&refs, &ser, 3).unwrap(), t);
        assert_ne!(weather_attr_table(&refs, &ser, 4).unwrap(), t);
    }

    #[test]
    fn days_before_harvest_counts_back_from_the_last_weather_day() {
        let px = sample(1, 0, 2020, 2, 3);
        let t = weather_attr_table(&[&px], &[series(&px)], 0).unwrap();
        let mut dbh: Vec<f64> = t.train.rows.iter().chain(&t.test.rows).map(|r| r[DAYS_BEFORE_HARVEST]).collect();
        dbh.sort_by(f64::total_cmp);
        assert_eq!(dbh, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn mismatches_are_rejected() {
        let a = sample(1, 0, 2020, 2, 3);
        let b = sample(2, 0, 2021, 2, 3);
        assert!(weather_attr_table(&[], &[], 0).is_err());
        assert!(weather_attr_table(&[&a, &b], &[series(&a), series(&b)], 0).is_err());
        assert!(weather_attr_table(&[&a], &[series(&b)], 0).is_err());
    }

    #[test]
    fn per_field_sampling() {
        let px: Vec<PixelSample> = (0..10).map(|i| sample(i, (i % 2) as u32, 2020, 1, 1)).collect();
        let refs: Vec<&PixelSample> = px.iter().collect();
        let chosen = sample_per_field(&refs, 3, 1);
        assert_eq!(chosen.len(), 6);
        assert_eq!(chosen.iter().filter(|s| s.field_id == 0).count(), 3);
        assert_eq!(sample_per_field(&refs, 3, 1), chosen);
        assert_eq!(sample_per_field(&refs, 100, 1).len(), 10);
    }

    #[test]
    fn global_sampling_ignores_input_order() {
        let px: Vec<PixelSample> = (0..10).map(|i| sample(i, (i % 2) as u32, 2020, 1, 1)).collect();
        let refs: Vec<&PixelSample> = px.iter().collect();
        let rev: Vec<&PixelSample> = px.iter().rev().collect();
        let chosen = sample_pixels(&refs, 4, 2);
        assert_eq!(chosen.len(), 4);
        assert_eq!(sample_pixels(&rev, 4, 2), chosen);
        assert!(chosen.windows(2).all(|w| w[0].pixel_id < w[1].pixel_id));
    }
}
