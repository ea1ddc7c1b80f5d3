use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::PixelSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Subfield,
    Field,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Subfield => "subfield",
            Level::Field => "field",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub r2: f64,
    /// t/ha.
    pub rmse: f64,
    /// t/ha.
    pub mae: f64,
    pub n: usize,
}

/// R², RMSE and MAE of `yhat` against `y`.
pub fn regression_metrics(y: &[f64], yhat: &[f64], level: Level) -> Result<MetricsReport> {
    if y.len() != yhat.len() {
        return Err(Error::shape(format!("{} targets, {} predictions", y.len(), yhat.len())));
    }
    if y.len() < 2 {
        return Err(Error::contract("metrics need at least 2 samples"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("R² is undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(MetricsReport { level, r2: 1.0 - ss_res / ss_tot, rmse: (ss_res / n).sqrt(), mae, n: y.len() })
}

/// Per field-year means of targets and predictions, ordered by (field, year).
pub fn field_means(samples: &[&PixelSample], yhat: &[f64]) -> (Vec<(u32, i32)>, Vec<f64>, Vec<f64>) {
    let mut groups: BTreeMap<(u32, i32), (f64, f64, usize)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(yhat) {
        let g = groups.entry((s.field_id, s.year)).or_default();
        g.0 += s.y;
        g.1 += p;
        g.2 += 1;
    }
    let keys = groups.keys().copied().collect();
    let y = groups.values().map(|g| g.0 / g.2 as f64).collect();
    let p = groups.values().map(|g| g.1 / g.2 as f64).collect();
    (keys, y, p)
}

/// Metrics at subfield level, or over field-year averages at field level.
pub fn metrics_for(samples: &[&PixelSample], yhat: &[f64], level: Level) -> Result<MetricsReport> {
    match level {
        Level::Subfield => {
            let y: Vec<f64> = samples.iter().map(|s| s.y).collect();
            regression_metrics(&y, yhat, level)
        }
        Level::Field => {
            let (_, y, p) = field_means(samples, yhat);
            regression_metrics(&y, &p, level)
        }
    }
}

/// Bhattacharyya coefficient `Σ √(p_b q_b)` of two samples binned on a shared
/// equal-width grid over their combined range.
pub fn bhattacharyya_score(target: &[f64], predicted: &[f64], bins: usize) -> Result<f64> {
    if target.is_empty() || predicted.is_empty() || bins == 0 {
        return Err(Error::contract("bhattacharyya needs non-empty samples and at least one bin"));
    }
    let lo = target.iter().chain(predicted).copied().fold(f64::INFINITY, f64::min);
    let hi = target.iter().chain(predicted).copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let b = if hi > lo { (((x - lo) / (hi - lo)) * bins as f64) as usize } else { 0 };
            h[b.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (p, q) = (hist(target), hist(predicted));
    Ok(p.iter().zip(&q).map(|(a, b)| (a * b).sqrt()).sum::<f64>().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [1.0, 2.0, 4.0];
        let m = regression_metrics(&y, &y, Level::Subfield).unwrap();
        assert_eq!((m.r2, m.rmse, m.mae), (1.0, 0.0, 0.0));
    }

    #[test]
    fn mean_prediction_has_zero_r2() {
        let y = [1.0, 2.0, 6.0];
        let m = regression_metrics(&y, &[3.0; 3], Level::Subfield).unwrap();
        assert_eq!(m.r2, 0.0);
    }

    #[test]
    fn hand_worked_pair() {
        let m = regression_metrics(&[1.0, 3.0], &[2.0, 2.0], Level::Subfield).unwrap();
        assert_eq!((m.r2, m.rmse, m.mae), (0.0, 1.0, 1.0));
    }

    #[test]
    fn constant_targets_are_degenerate() {
        assert!(matches!(regression_metrics(&[2.0, 2.0], &[1.0, 3.0], Level::Field), Err(Error::Degenerate(_))));
    }

    #[test]
    fn field_averaging_cancels_mixed_errors() {
        use crate::data::fixtures::sample;
        let mut s: Vec<PixelSample> = (0..4).map(|i| sample(i, (i / 2) as u32, 2020, 1, 1)).collect();
        for (x, y) in s.iter_mut().zip([4.0, 6.0, 9.0, 11.0]) {
            x.y = y;
        }
        let refs: Vec<&PixelSample> = s.iter().collect();
        let yhat = [5.0, 5.0, 10.0, 10.0];
        let sub = metrics_for(&refs, &yhat, Level::Subfield).unwrap();
        let field = metrics_for(&refs, &yhat, Level::Field).unwrap();
        assert_eq!(field.rmse, 0.0);
        assert!(field.rmse <= sub.rmse);
        assert_eq!(field.n, 2);
    }

    #[test]
    fn bhattacharyya_fixtures() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((bhattacharyya_score(&a, &a, 20).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bhattacharyya_score(&[0.0, 0.1], &[10.0, 10.1], 20).unwrap(), 0.0);
        // Two bins: p = (0.5, 0.5), q = (1, 0).
        let bc = bhattacharyya_score(&[0.0, 1.0], &[0.0, 0.0], 2).unwrap();
        assert!((bc - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
