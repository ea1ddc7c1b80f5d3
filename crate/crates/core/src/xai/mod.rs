//! Attributions over time steps and their evaluation.
//!
//! Every function here expects samples in the model's input space, i.e.
//! already passed through the model's normalization.

mod attention;
mod robustness;
mod scores;
mod svs;

use serde::{Deserialize, Serialize};

pub use attention::{attention_gradients, attention_rollout, generic_attention, layer_entropies, rollout_matrix, temporal_attention, STOCHASTIC_TOL};
pub use robustness::{infidelity, max_sensitivity, perturb_continuous, RobustnessScores, DEFAULT_MASK_PROB, DEFAULT_RADIUS, DEFAULT_SENSITIVITY_DRAWS};
pub use scores::{cosine_similarity, shannon_entropy, ENTROPY_BINS};
pub use svs::{shapley_exact, shapley_sampling, svs_attribution, svs_modality_aggregate, svs_scores, Baseline, Game, ModalityGame, DEFAULT_PERMUTATIONS};

use crate::data::{Modality, PixelSample};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ar,
    Ga,
    Svs,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ar, Method::Ga, Method::Svs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ar => "ar",
            Method::Ga => "ga",
            Method::Svs => "svs",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(Method::Ar),
            "ga" => Ok(Method::Ga),
            "svs" => Ok(Method::Svs),
            _ => Err(Error::Config(format!("unknown attribution method '{s}' (expected ar, ga or svs)"))),
        }
    }
}

/// Scores over the unpadded time steps of one pixel's temporal modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSeries {
    pub method: Method,
    pub modality: Modality,
    pub pixel_id: u64,
    pub field_id: u32,
    pub year: i32,
    pub days: Vec<u32>,
    pub scores: Vec<f64>,
}

impl AttributionSeries {
    pub fn new(method: Method, modality: Modality, sample: &PixelSample, scores: Vec<f64>) -> Result<Self> {
        if !modality.is_temporal() {
            return Err(Error::contract(format!("attribution series are defined for temporal modalities, not {modality}")));
        }
        let days = sample.days(modality).to_vec();
        if scores.len() != days.len() {
            return Err(Error::shape(format!("{} scores for {} steps", scores.len(), days.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite {method} score for pixel {}", sample.pixel_id)));
        }
        Ok(Self { method, modality, pixel_id: sample.pixel_id, field_id: sample.field_id, year: sample.year, days, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Settings shared by [`explain`] calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Residual mixing in attention rollout.
    pub residual: bool,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { residual: true, permutations: DEFAULT_PERMUTATIONS, seed: 0 }
    }
}

/// Attribution of `modality` for one sample with any of the three methods.
///
/// `baseline` is only used by SVS.
pub fn explain(
    model: &MultimodalModel,
    sample: &PixelSample,
    modality: Modality,
    method: Method,
    baseline: &Baseline,
    cfg: &ExplainConfig,
) -> Result<AttributionSeries> {
    match method {
        Method::Ar => {
            require_transformer(model, modality, method)?;
            let p = model.predict(sample)?;
            let record = p.attention(modality).ok_or_else(|| Error::Unsupported(format!("{modality} encoder records no attention")))?;
            let scores = attention_rollout(record, cfg.residual)?;
            AttributionSeries::new(method, modality, sample, scores)
        }
        Method::Ga => generic_attention(model, sample, modality),
        Method::Svs => svs_attribution(model, sample, modality, baseline, cfg.permutations, cfg.seed),
    }
}

pub(crate) fn require_transformer(model: &MultimodalModel, modality: Modality, method: Method) -> Result<()> {
    let kind = model.config.encoder(modality).kind;
    if kind != crate::encoders::EncoderKind::Transformer {
        return Err(Error::Unsupported(format!("{method} needs a transformer {modality} encoder, found {kind:?}")));
    }
    Ok(())
}
