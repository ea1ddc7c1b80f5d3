use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Game;
use crate::data::{Modality, PixelSample, SA_BANDS};
use crate::error::{Error, Result};
use crate::model::INFERENCE_CHUNK;

pub const DEFAULT_MASK_PROB: f64 = 0.5;
/// In normalized input units.
pub const DEFAULT_RADIUS: f64 = 0.05;
pub const DEFAULT_SENSITIVITY_DRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScores {
    pub infidelity: f64,
    pub max_sensitivity: f64,
    pub radius: f64,
    pub draws: usize,
    pub mask_prob: f64,
}

/// Mean of `(I·φ − (v(all) − v(unmasked)))²` over `n` random step masks `I`.
pub fn infidelity(game: &dyn Game, phi: &[f64], n: usize, mask_prob: f64, seed: u64) -> Result<f64> {
    let players = game.players();
    if phi.len() != players {
        return Err(Error::shape(format!("{} attributions for {players} players", phi.len())));
    }
    if n == 0 || !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::contract("infidelity needs at least one draw and a mask probability in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..n).map(|_| (0..players).map(|_| rng.gen_bool(mask_prob)).collect()).collect();
    let full = game.values(&[vec![true; players]])?[0];
    let mut total = 0.0;
    for chunk in masks.chunks(INFERENCE_CHUNK) {
        let kept: Vec<Vec<bool>> = chunk.iter().map(|m| m.iter().map(|&b| !b).collect()).collect();
        let vals = game.values(&kept)?;
        for (mask, v) in chunk.iter().zip(vals) {
            let attributed: f64 = mask.iter().zip(phi).filter(|(&b, _)| b).map(|(_, p)| p).sum();
            total += (attributed - (full - v)).powi(2);
        }
    }
    Ok(total / n as f64)
}

/// Whether channel `c` of `modality` is continuous (the SCL one-hot is not).
fn continuous(modality: Modality, c: usize) -> bool {
    modality != Modality::Satellite || c < SA_BANDS
}

/// `sample` with `radius·u` added to the continuous channels of `modality`;
/// `u` holds one value in `[−1, 1]` per step and channel.
pub fn perturb_continuous(sample: &PixelSample, modality: Modality, u: &[f64], radius: f64) -> Result<PixelSample> {
    let mut out = sample.clone();
    let f = modality.features();
    let values = out.values_mut(modality);
    if u.len() != values.len() {
        return Err(Error::shape(format!("{} perturbations for {} values", u.len(), values.len())));
    }
    for (i, (x, d)) in values.iter_mut().zip(u).enumerate() {
        if continuous(modality, i % f) {
            *x += radius * d;
        }
    }
    Ok(out)
}

/// Largest ℓ2 change of `attribute` over `n` uniform perturbations with `‖δ‖∞ ≤ radius`.
///
/// Draws depend only on `seed`, so radii evaluated with one seed share directions.
pub fn max_sensitivity(
    mut attribute: impl FnMut(&PixelSample) -> Result<Vec<f64>>,
    sample: &PixelSample,
    modality: Modality,
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if radius < 0.0 || n == 0 {
        return Err(Error::contract("max-sensitivity needs a non-negative radius and at least one draw"));
    }
    let reference = attribute(sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = sample.values(modality).len();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let phi = attribute(&perturb_continuous(sample, modality, &u, radius)?)?;
        if phi.len() != reference.len() {
            return Err(Error::shape("attribution length changed under perturbation"));
        }
        let d = phi.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}
