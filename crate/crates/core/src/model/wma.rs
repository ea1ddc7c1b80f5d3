use serde::{Deserialize, Serialize};

use super::Prediction;
use crate::error::{Error, Result};

/// Smallest `|ŷ − b|` for which relevances are defined.
pub const WMA_EPS: f64 = 1e-9;

/// Weight-based modality relevance: `R^m = |ŷ^m / (ŷ − b)|` and its normalized share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRelevance {
    pub raw: [f64; 4],
    pub shares: [f64; 4],
}

pub fn wma_from_partials(partials: [f64; 4], yhat: f64, bias: f64) -> Result<ModalityRelevance> {
    let den = yhat - bias;
    if den.abs() <= WMA_EPS {
        return Err(Error::Degenerate(format!("prediction {yhat} equals the head bias {bias}")));
    }
    let raw = partials.map(|p| (p / den).abs());
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("all modality partials vanish".into()));
    }
    Ok(ModalityRelevance { raw, shares: raw.map(|r| r / total) })
}

pub fn wma_relevance(p: &Prediction) -> Result<ModalityRelevance> {
    wma_from_partials(p.partials, p.yhat, p.bias)
}
