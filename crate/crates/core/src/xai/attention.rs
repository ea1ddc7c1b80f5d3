use super::{require_transformer, shannon_entropy, AttributionSeries, Method};
use crate::data::{pad_batch, Modality, PixelSample};
use crate::encoders::{AttentionRecord, Ctx};
use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::numgrad::{matmul, Array};

/// Largest tolerated deviation of an attention row sum from 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Column means of a row-stochastic matrix: `S_t = (1/T)·Σ_j A_{j,t}`.
pub fn temporal_attention(a: &Array) -> Result<Vec<f64>> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] || a.is_empty() {
        return Err(Error::shape(format!("temporal attention needs a square matrix, got {:?}", a.shape())));
    }
    let t = a.shape()[0];
    for r in 0..t {
        let sum: f64 = a.row(r).iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::contract(format!("attention row {r} sums to {sum}")));
        }
    }
    let mut s = vec![0.0; t];
    for r in 0..t {
        for (acc, v) in s.iter_mut().zip(a.row(r)) {
            *acc += v;
        }
    }
    Ok(s.into_iter().map(|v| v / t as f64).collect())
}

/// Product `Ã^L·…·Ã^1` of head-averaged attentions over the unpadded tokens.
///
/// With `residual`, each layer is first mixed as `0.5·(A + I)` and its rows renormalized.
pub fn rollout_matrix(record: &AttentionRecord, residual: bool) -> Result<Array> {
    if record.num_layers() == 0 {
        return Err(Error::contract("attention rollout needs at least one layer"));
    }
    let record = record.cropped();
    let mut rollout: Option<Array> = None;
    for l in 0..record.num_layers() {
        let mut a = record.head_mean(l);
        if residual {
            let n = a.shape()[0];
            let d = a.data_mut();
            for r in 0..n {
                let row = &mut d[r * n..(r + 1) * n];
                row.iter_mut().for_each(|v| *v *= 0.5);
                row[r] += 0.5;
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        rollout = Some(match rollout {
            None => a,
            Some(r) => matmul(&a, &r)?,
        });
    }
    Ok(rollout.unwrap())
}

/// Regression-token row of the rollout over the time-step columns.
pub fn attention_rollout(record: &AttentionRecord, residual: bool) -> Result<Vec<f64>> {
    let r = rollout_matrix(record, residual)?;
    Ok(r.row(0)[1..].to_vec())
}

/// Entropy of each layer's temporal attention scores, regression token excluded.
pub fn layer_entropies(record: &AttentionRecord) -> Result<Vec<f64>> {
    let record = record.cropped();
    (0..record.num_layers())
        .map(|l| {
            let s = temporal_attention(&record.head_mean(l))?;
            shannon_entropy(&s[1..])
        })
        .collect()
}

/// Attention values and `∂ŷ/∂A` per layer of one sample's `modality` encoder, each `[H, T+1, T+1]`.
pub fn attention_gradients(model: &MultimodalModel, sample: &PixelSample, modality: Modality) -> Result<(Vec<Array>, Vec<Array>)> {
    require_transformer(model, modality, Method::Ga)?;
    let batch = pad_batch(&[sample])?;
    let mut ctx = Ctx::eval(&model.store);
    let f = model.forward(&mut ctx, &batch)?;
    let attention = f.temporal(modality).map(|e| e.attention.clone()).unwrap_or_default();
    for &a in &attention {
        ctx.g.retain_grad(a);
    }
    ctx.g.backward(f.yhat)?;
    let values = attention.iter().map(|&a| ctx.g.value(a).clone()).collect();
    let grads = attention
        .iter()
        .map(|&a| ctx.g.grad(a).cloned().unwrap_or_else(|| Array::zeros(ctx.g.value(a).shape())))
        .collect();
    Ok((values, grads))
}

/// Gradient-weighted relevance propagation through the attention layers.
pub fn generic_attention(model: &MultimodalModel, sample: &PixelSample, modality: Modality) -> Result<AttributionSeries> {
    let (values, grads) = attention_gradients(model, sample, modality)?;
    let heads = model.config.encoder(modality).heads;
    let n = sample.steps(modality) + 1;
    let mut r = Array::eye(n);
    for (a, g) in values.iter().zip(&grads) {
        let mut cam = Array::zeros(&[n, n]);
        for (ah, gh) in a.data().chunks(n * n).zip(g.data().chunks(n * n)) {
            for (c, (x, y)) in cam.data_mut().iter_mut().zip(ah.iter().zip(gh)) {
                *c += (x * y).max(0.0) / heads as f64;
            }
        }
        let update = matmul(&cam, &r)?;
        r.data_mut().iter_mut().zip(update.data()).for_each(|(x, u)| *x += u);
    }
    AttributionSeries::new(Method::Ga, modality, sample, r.row(0)[1..].to_vec())
}
