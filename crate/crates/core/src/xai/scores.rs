use crate::error::{Error, Result};

pub const ENTROPY_BINS: usize = 100;

/// Shannon entropy (nats) of scores binned into [`ENTROPY_BINS`] equal-width bins over `[0, 1]`.
///
/// Scores outside `[0, 1]` are clamped.
pub fn shannon_entropy(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("entropy of an empty score vector"));
    }
    let mut counts = [0usize; ENTROPY_BINS];
    let mut clamped = 0;
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Domain(format!("non-finite score {s}")));
        }
        if !(0.0..=1.0).contains(&s) {
            clamped += 1;
        }
        let b = (s.clamp(0.0, 1.0) * ENTROPY_BINS as f64) as usize;
        counts[b.min(ENTROPY_BINS - 1)] += 1;
    }
    if clamped > 0 {
        log::warn!("{clamped} of {} scores outside [0, 1] were clamped", scores.len());
    }
    let n = scores.len() as f64;
    let h = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum::<f64>();
    Ok(h.max(0.0))
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine similarity of lengths {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_values_have_zero_entropy() {
        assert_eq!(shannon_entropy(&[0.3; 7]).unwrap(), 0.0);
    }

    #[test]
    fn four_bins_uniform() {
        let h = shannon_entropy(&[0.005, 0.255, 0.505, 0.755, 0.006, 0.256, 0.506, 0.756]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn edges_land_in_the_end_bins() {
        assert!((shannon_entropy(&[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(shannon_entropy(&[0.995, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(shannon_entropy(&[]).is_err());
    }

    #[test]
    fn cosine_fixtures() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(xs in prop::collection::vec(-0.5f64..1.5, 1..300)) {
            let h = shannon_entropy(&xs).unwrap();
            prop_assert!((0.0..=(ENTROPY_BINS as f64).ln() + 1e-12).contains(&h));
        }

        #[test]
        fn cosine_is_bounded(xs in prop::collection::vec(-10.0f64..10.0, 1..20), ys in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let n = xs.len().min(ys.len());
            if let Ok(c) = cosine_similarity(&xs[..n], &ys[..n]) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
