use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttributionSeries, Method};
use crate::data::{Modality, PixelSample, DEM_FEATURES, SA_FEATURES, SOIL_FEATURES, W_FEATURES};
use crate::error::{Error, Result};
use crate::model::{ModalityRelevance, MultimodalModel, INFERENCE_CHUNK};

pub const DEFAULT_PERMUTATIONS: usize = 64;

/// Largest player count accepted by [`shapley_exact`].
const MAX_EXACT_PLAYERS: usize = 16;

/// Cooperative game over `players()` players.
pub trait Game {
    fn players(&self) -> usize;

    /// Value of each coalition; `true` marks a player taken from the sample.
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>>;
}

/// Per-channel means substituted for masked steps or features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub satellite: Vec<f64>,
    pub weather: Vec<f64>,
    pub soil: Vec<f64>,
    pub dem: Vec<f64>,
}

impl Baseline {
    /// Means over every unpadded step (temporal) or sample (static).
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PixelSample>) -> Result<Self> {
        let widths = [SA_FEATURES, W_FEATURES, SOIL_FEATURES, DEM_FEATURES];
        let mut sums: [Vec<f64>; 4] = widths.map(|w| vec![0.0; w]);
        let mut counts = [0usize; 4];
        for s in samples {
            for m in Modality::ALL {
                for row in s.values(m).chunks(m.features()) {
                    sums[m.index()].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    counts[m.index()] += 1;
                }
            }
        }
        if counts.contains(&0) {
            return Err(Error::contract("baseline needs at least one sample"));
        }
        let [satellite, weather, soil, dem] = std::array::from_fn(|m| sums[m].iter().map(|v| v / counts[m] as f64).collect());
        Ok(Self { satellite, weather, soil, dem })
    }

    pub fn row(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Satellite => &self.satellite,
            Modality::Weather => &self.weather,
            Modality::Soil => &self.soil,
            Modality::Dem => &self.dem,
        }
    }

    /// `sample` with every step and feature of `m` replaced by the baseline.
    pub fn apply(&self, sample: &PixelSample, m: Modality) -> PixelSample {
        let mut out = sample.clone();
        let row = self.row(m);
        for chunk in out.values_mut(m).chunks_mut(m.features()) {
            chunk.copy_from_slice(row);
        }
        out
    }
}

/// Masking game on one modality of one sample: players are time steps for
/// temporal modalities and features for static ones.
///
/// Values are the modality's partial output `w^m·z^m`; the rest of the
/// prediction does not depend on the coalition.
pub struct ModalityGame<'a> {
    pub model: &'a MultimodalModel,
    pub sample: &'a PixelSample,
    pub modality: Modality,
    pub baseline: &'a [f64],
}

impl<'a> ModalityGame<'a> {
    pub fn new(model: &'a MultimodalModel, sample: &'a PixelSample, modality: Modality, baseline: &'a Baseline) -> Result<Self> {
        let row = baseline.row(modality);
        if row.len() != modality.features() {
            return Err(Error::shape(format!("{modality} baseline has {} channels", row.len())));
        }
        Ok(Self { model, sample, modality, baseline: row })
    }

    fn masked(&self, keep: &[bool]) -> Vec<f64> {
        let x = self.sample.values(self.modality);
        if self.modality.is_temporal() {
            let f = self.modality.features();
            x.chunks(f).zip(keep).flat_map(|(row, &k)| if k { row } else { self.baseline }).copied().collect()
        } else {
            x.iter().zip(self.baseline).zip(keep).map(|((&v, &b), &k)| if k { v } else { b }).collect()
        }
    }
}

impl Game for ModalityGame<'_> {
    fn players(&self) -> usize {
        if self.modality.is_temporal() {
            self.sample.steps(self.modality)
        } else {
            self.modality.features()
        }
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
        let n = self.players();
        if let Some(c) = coalitions.iter().find(|c| c.len() != n) {
            return Err(Error::shape(format!("coalition over {} players, game has {n}", c.len())));
        }
        let inputs: Vec<Vec<f64>> = coalitions.iter().map(|c| self.masked(c)).collect();
        let days = self.sample.days(self.modality);
        let pairs: Vec<(&[f64], &[u32])> = inputs.iter().map(|v| (v.as_slice(), days)).collect();
        self.model.modality_partials(self.modality, &pairs)
    }
}

/// Monte-Carlo Shapley values from `m` random permutations.
///
/// Each permutation adds players one at a time, so every player receives one
/// marginal contribution per permutation.
pub fn shapley_sampling(game: &dyn Game, m: usize, seed: u64, stream: u64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::contract("shapley sampling needs at least one permutation"));
    }
    let n = game.players();
    if n == 0 {
        return Ok(vec![]);
    }
    let ends = game.values(&[vec![false; n], vec![true; n]])?;
    let (empty, full) = (ends[0], ends[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let perms: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let mut phi = vec![0.0; n];
    let per_chunk = (INFERENCE_CHUNK / (n - 1).max(1)).max(1);
    for chunk in perms.chunks(per_chunk) {
        let mut coalitions = Vec::with_capacity(chunk.len() * (n - 1));
        for p in chunk {
            let mut c = vec![false; n];
            for &j in &p[..n - 1] {
                c[j] = true;
                coalitions.push(c.clone());
            }
        }
        let vals = game.values(&coalitions)?;
        for (i, p) in chunk.iter().enumerate() {
            let mut prev = empty;
            for (k, &j) in p.iter().enumerate() {
                let cur = if k + 1 == n { full } else { vals[i * (n - 1) + k] };
                phi[j] += cur - prev;
                prev = cur;
            }
        }
    }
    Ok(phi.into_iter().map(|v| v / m as f64).collect())
}

/// Exact Shapley values by enumerating all coalitions.
pub fn shapley_exact(game: &dyn Game) -> Result<Vec<f64>> {
    let n = game.players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::contract(format!("exact shapley values over {n} players (at most {MAX_EXACT_PLAYERS})")));
    }
    let coalitions: Vec<Vec<bool>> = (0..1usize << n).map(|mask| (0..n).map(|i| mask >> i & 1 == 1).collect()).collect();
    let mut v = Vec::with_capacity(coalitions.len());
    for chunk in coalitions.chunks(INFERENCE_CHUNK) {
        v.extend(game.values(chunk)?);
    }
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let weight: Vec<f64> = (0..n).map(|s| fact(s) * fact(n - s - 1) / fact(n)).collect();
    let mut phi = vec![0.0; n];
    for mask in 0..1usize << n {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (v[mask | 1 << i] - v[mask]);
            }
        }
    }
    Ok(phi)
}

/// Sampled Shapley values of every step or feature of `modality`.
///
/// The random stream depends only on `seed` and the modality, so samples
/// sharing a modality's inputs receive identical scores.
pub fn svs_scores(model: &MultimodalModel, sample: &PixelSample, modality: Modality, baseline: &Baseline, m: usize, seed: u64) -> Result<Vec<f64>> {
    let game = ModalityGame::new(model, sample, modality, baseline)?;
    shapley_sampling(&game, m, seed, modality.index() as u64)
}

pub fn svs_attribution(model: &MultimodalModel, sample: &PixelSample, modality: Modality, baseline: &Baseline, m: usize, seed: u64) -> Result<AttributionSeries> {
    if !modality.is_temporal() {
        return Err(Error::contract(format!("{modality} is static; use svs_scores")));
    }
    AttributionSeries::new(Method::Svs, modality, sample, svs_scores(model, sample, modality, baseline, m, seed)?)
}

/// Absolute score mass of each modality, normalized to sum to 1.
pub fn svs_modality_aggregate(scores: &[Vec<f64>; 4]) -> Result<ModalityRelevance> {
    let raw = std::array::from_fn(|m| scores[m].iter().map(|v| v.abs()).sum::<f64>());
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("all shapley scores vanish".into()));
    }
    Ok(ModalityRelevance { raw, shares: raw.map(|r| r / total) })
}
