//! Synthetic pixel-level yield data with a known generative rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Manifest, PixelSample, SA_BANDS, SA_FEATURES, SCL_CLASSES, SOIL_FEATURES, W_FEATURES};
use crate::error::{Error, Result};

const B04: usize = 3;
const B08: usize = 7;
const SCL_VEGETATION: usize = 4;
const SCL_BARE: usize = 5;
const SCL_CLOUD_MEDIUM: usize = 8;
const SCL_CLOUD_HIGH: usize = 9;

const SOIL_REFLECTANCE: [f64; SA_BANDS] = [0.08, 0.10, 0.13, 0.16, 0.19, 0.21, 0.22, 0.24, 0.25, 0.26, 0.32, 0.30];
const LEAF_REFLECTANCE: [f64; SA_BANDS] = [0.03, 0.04, 0.07, 0.04, 0.10, 0.30, 0.38, 0.42, 0.44, 0.44, 0.22, 0.11];
const SOIL_BASE: [f64; 8] = [140.0, 200.0, 50.0, 250.0, 150.0, 65.0, 350.0, 150.0];

/// Closed-form yield rule:
/// `y = intercept + greenness·peak + precipitation·P + soil·x_so[soil_channel] + ε`,
/// where `peak` is [`peak_greenness`] and `P` is [`precipitation_in_window`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldModel {
    pub intercept: f64,
    pub greenness: f64,
    pub precipitation: f64,
    pub soil: f64,
    pub soil_channel: usize,
    /// Inclusive day-index window for the precipitation sum.
    pub window_start_day: u32,
    pub window_end_day: u32,
    pub noise_sd: f64,
}

impl YieldModel {
    /// Noise-free part of the rule for raw (unnormalized) features.
    pub fn expected(&self, s: &PixelSample) -> f64 {
        self.intercept
            + self.greenness * peak_greenness(s)
            + self.precipitation * precipitation_in_window(s, self.window_start_day, self.window_end_day)
            + self.soil * s.x_so[self.soil_channel]
    }
}

/// Maximum NDVI over clear (vegetation or bare-soil) acquisitions; 0 when none are clear.
pub fn peak_greenness(s: &PixelSample) -> f64 {
    s.x_sa
        .chunks(SA_FEATURES)
        .filter(|row| row[SA_BANDS + SCL_VEGETATION] == 1.0 || row[SA_BANDS + SCL_BARE] == 1.0)
        .map(|row| (row[B08] - row[B04]) / (row[B08] + row[B04]))
        .fold(0.0, f64::max)
}

/// Total precipitation over days `start..=end`.
pub fn precipitation_in_window(s: &PixelSample, start: u32, end: u32) -> f64 {
    s.w_days
        .iter()
        .zip(s.x_w.chunks(W_FEATURES))
        .filter(|(d, _)| (start..=end).contains(*d))
        .map(|(_, row)| row[3])
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub crops: Vec<String>,
    pub farms: usize,
    pub fields_per_farm: usize,
    pub pixels_per_field: usize,
    pub years: Vec<i32>,
    /// Nominal satellite acquisitions per season (5-day spacing).
    pub t_sa: usize,
    /// Nominal weather days per season.
    pub t_w: usize,
    /// Trailing acquisitions/days dropped at random per field-year, at most.
    pub max_trim_sa: usize,
    pub max_trim_w: usize,
    pub season_start_day: u32,
    pub cloud_probability: f64,
    pub yield_model: YieldModel,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            crops: vec!["corn".into()],
            farms: 4,
            fields_per_farm: 4,
            pixels_per_field: 256,
            years: vec![2019, 2020, 2021],
            t_sa: 20,
            t_w: 100,
            max_trim_sa: 2,
            max_trim_w: 4,
            season_start_day: 100,
            cloud_probability: 0.15,
            yield_model: YieldModel {
                intercept: 1.0,
                greenness: 10.0,
                precipitation: 0.001,
                soil: 0.02,
                soil_channel: 21,
                window_start_day: 140,
                window_end_day: 170,
                noise_sd: 0.1,
            },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.crops.len(), self.farms, self.fields_per_farm, self.pixels_per_field, self.years.len(), self.t_sa, self.t_w];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic dataset counts must all be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) || self.yield_model.noise_sd < 0.0 {
            return Err(Error::Config("cloud probability must lie in [0, 1] and noise sd be non-negative".into()));
        }
        if self.yield_model.soil_channel >= SOIL_FEATURES {
            return Err(Error::Config(format!("soil channel {} out of range", self.yield_model.soil_channel)));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth fertility surface over the unit square.
struct Surface {
    offset: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Surface {
    fn new(rng: &mut impl Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.04..0.1),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self { offset: rng.gen_range(-0.4..0.4), waves }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(a, wu, wv, ph)| a * (std::f64::consts::TAU * (wu * u + wv * v) + ph).sin()).sum();
        (0.5 + self.offset + s).clamp(0.0, 1.0)
    }
}

struct Season {
    sa_days: Vec<u32>,
    cloudy: Vec<Option<usize>>,
    w_days: Vec<u32>,
    x_w: Vec<f64>,
    green_up: f64,
    senescence: f64,
    vigor: f64,
}

fn season(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Season {
    let start = spec.season_start_day + rng.gen_range(0..=4);
    let t_sa = spec.t_sa - rng.gen_range(0..=spec.max_trim_sa.min(spec.t_sa - 1));
    let t_w = spec.t_w - rng.gen_range(0..=spec.max_trim_w.min(spec.t_w - 1));
    let sa_days: Vec<u32> = (0..t_sa as u32).map(|t| start + 5 * t).collect();
    let cloudy = (0..t_sa)
        .map(|_| {
            (rng.gen::<f64>() < spec.cloud_probability).then(|| if rng.gen::<bool>() { SCL_CLOUD_MEDIUM } else { SCL_CLOUD_HIGH })
        })
        .collect();
    let w_days: Vec<u32> = (0..t_w as u32).map(|t| start + t).collect();
    let offset = rng.gen_range(-2.0..2.0);
    let daily = Normal::new(0.0, 1.5).unwrap();
    let rain = Exp::new(1.0 / 7.0).unwrap();
    let wet_probability = rng.gen_range(0.15..0.35);
    let mut x_w = Vec::with_capacity(t_w * W_FEATURES);
    let mut anomaly = 0.0;
    for &d in &w_days {
        anomaly = 0.7 * anomaly + daily.sample(rng);
        let tmean = 10.0 + 12.0 * (std::f64::consts::TAU * (d as f64 - 110.0) / 365.0).sin() + offset + anomaly;
        let tmin = tmean - rng.gen_range(3.0..6.0);
        let tmax = tmean + rng.gen_range(4.0..8.0);
        let precip = if rng.gen::<f64>() < wet_probability { rain.sample(rng) } else { 0.0 };
        x_w.extend_from_slice(&[tmin, tmean, tmax, precip]);
    }
    let span = (spec.t_sa as f64 * 5.0).max(10.0);
    Season {
        sa_days,
        cloudy,
        w_days,
        x_w,
        green_up: start as f64 + span * rng.gen_range(0.25..0.35),
        senescence: start as f64 + span * rng.gen_range(0.7..0.8),
        vigor: rng.gen_range(-0.05..0.05),
    }
}

struct Site {
    fertility: f64,
    soil: Vec<f64>,
    dem: Vec<f64>,
}

fn site(fertility: f64, u: f64, v: f64, farm_elevation: f64, rng: &mut ChaCha8Rng) -> Site {
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut soil = Vec::with_capacity(SOIL_FEATURES);
    for (p, base) in SOIL_BASE.iter().enumerate() {
        // Sand and bulk density fall with fertility; the others rise.
        let sign = if p == 0 || p == 6 { -1.0 } else { 1.0 };
        for depth in 0..3 {
            let depth_factor = 1.0 - 0.12 * depth as f64;
            soil.push(base * depth_factor * (1.0 + sign * 0.25 * (fertility - 0.5) + noise.sample(rng)));
        }
    }
    let dem = vec![
        farm_elevation + 12.0 * (u - 0.5) - 8.0 * fertility + noise.sample(rng),
        (2.0 + 3.0 * (1.0 - fertility) + noise.sample(rng)).max(0.0),
        (180.0 + 120.0 * (u - v)).rem_euclid(360.0),
        0.5 * (fertility - 0.5) + noise.sample(rng),
        6.0 + 4.0 * fertility + noise.sample(rng),
    ];
    Site { fertility, soil, dem }
}

fn satellite(season: &Season, site: &Site, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.005).unwrap();
    let amplitude = (0.3 + 0.6 * site.fertility + season.vigor).clamp(0.05, 0.95);
    let mut x = Vec::with_capacity(season.sa_days.len() * SA_FEATURES);
    for (&d, cloud) in season.sa_days.iter().zip(&season.cloudy) {
        let d = d as f64;
        let cover = amplitude * logistic((d - season.green_up) / 5.0) * (1.0 - logistic((d - season.senescence) / 5.0));
        let mut onehot = [0.0; SCL_CLASSES];
        match cloud {
            Some(class) => {
                x.extend_from_slice(&[0.0; SA_BANDS]);
                onehot[*class] = 1.0;
            }
            None => {
                for b in 0..SA_BANDS {
                    let r = (1.0 - cover) * SOIL_REFLECTANCE[b] + cover * LEAF_REFLECTANCE[b] + noise.sample(rng);
                    x.push(r.max(0.001));
                }
                onehot[if cover > 0.3 { SCL_VEGETATION } else { SCL_BARE }] = 1.0;
            }
        }
        x.extend_from_slice(&onehot);
    }
    x
}

/// Generates the dataset described by `spec`. Samples are ordered by year,
/// farm, field, then pixel.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fields = spec.farms * spec.fields_per_farm;
    let side = (spec.pixels_per_field as f64).sqrt().ceil() as usize;
    let pixel_noise = Normal::new(0.0, 0.04).unwrap();

    // Locations are fixed across years.
    let mut sites: Vec<Vec<Site>> = Vec::with_capacity(fields);
    for field in 0..fields {
        let surface = Surface::new(&mut rng);
        let farm_elevation = 250.0 + 40.0 * (field / spec.fields_per_farm) as f64;
        let field_sites = (0..spec.pixels_per_field)
            .map(|p| {
                let (u, v) = ((p % side) as f64 / side as f64, (p / side) as f64 / side as f64);
                let fertility = (surface.at(u, v) + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
                site(fertility, u, v, farm_elevation, &mut rng)
            })
            .collect();
        sites.push(field_sites);
    }

    let ym = &spec.yield_model;
    let noise = Normal::new(0.0, ym.noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut samples = Vec::with_capacity(fields * spec.pixels_per_field * spec.years.len());
    for &year in &spec.years {
        for field in 0..fields {
            let season = season(spec, &mut rng);
            for (p, site) in sites[field].iter().enumerate() {
                let mut s = PixelSample {
                    pixel_id: (field * 100_000 + p) as u64,
                    field_id: field as u32,
                    farm_id: (field / spec.fields_per_farm) as u32,
                    year,
                    crop: spec.crops[field % spec.crops.len()].clone(),
                    sa_days: season.sa_days.clone(),
                    x_sa: satellite(&season, site, &mut rng),
                    w_days: season.w_days.clone(),
                    x_w: season.x_w.clone(),
                    x_so: site.soil.clone(),
                    x_dem: site.dem.clone(),
                    y: 0.0,
                };
                let eps = if ym.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                s.y = ym.expected(&s) + eps;
                samples.push(s);
            }
        }
    }
    let mut manifest = Manifest::new();
    manifest.synthetic = Some(spec.clone());
    Ok(Dataset { manifest, samples })
}
