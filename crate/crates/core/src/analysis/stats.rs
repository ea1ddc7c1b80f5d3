use crate::error::{Error, Result};

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::contract(format!("correlation of lengths {} and {} (need equal, at least 2)", u.len(), v.len())));
    }
    let n = u.len() as f64;
    let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let cov: f64 = u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let su = u.iter().map(|a| (a - mu).powi(2)).sum::<f64>().sqrt();
    let sv = v.iter().map(|b| (b - mv).powi(2)).sum::<f64>().sqrt();
    if su == 0.0 || sv == 0.0 {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    Ok((cov / (su * sv)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::contract(format!("spearman of lengths {} and {} (need equal, at least 2)", u.len(), v.len())));
    }
    pearson(&average_ranks(u), &average_ranks(v))
}
