use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pad_batch, Modality, PixelSample};
use crate::encoders::{Ctx, EncoderKind};
use crate::error::{Error, Result};
use crate::model::{seq_batch_to, ModelConfig, MultimodalModel, INFERENCE_CHUNK};
use crate::numgrad::gemm;

/// Ridge jitter added to the normal equations.
pub const OLS_RIDGE: f64 = 1e-8;
pub const PROBE_TRAIN_FRACTION: f64 = 0.9;
pub const MIN_PROBE_SAMPLES: usize = 20;

/// Which activation a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeLayer {
    /// Output of `layer` in a temporal encoder; index 0 is the encoder input
    /// for transformers.
    Encoder { modality: Modality, layer: usize },
    /// Concatenated representations entering the regression head.
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: ProbeLayer,
    pub features: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// t/ha.
    pub train_rmse: f64,
    /// t/ha.
    pub test_rmse: f64,
}

/// Least-squares fit `y ≈ b0 + x·b` on row-major `x` (`n × p`), returning `[b0, b…]`.
pub fn ols_fit(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != n * p || y.len() != n {
        return Err(Error::shape(format!("ols with {} values for {n}×{p} and {} targets", x.len(), y.len())));
    }
    let q = p + 1;
    let mut design = Vec::with_capacity(n * q);
    for i in 0..n {
        design.push(1.0);
        design.extend_from_slice(&x[i * p..(i + 1) * p]);
    }
    let mut xtx = vec![0.0; q * q];
    gemm(q, n, q, 1.0, &design, 1, q as isize, &design, q as isize, 1, 0.0, &mut xtx);
    let mut xty = vec![0.0; q];
    for (row, &t) in design.chunks(q).zip(y) {
        xty.iter_mut().zip(row).for_each(|(a, v)| *a += v * t);
    }
    for i in 0..q {
        xtx[i * q + i] += OLS_RIDGE;
    }
    cholesky_solve(&mut xtx, q, &xty)
}

/// Solves `a·x = b` for symmetric positive-definite `a`, overwritten by its factor.
fn cholesky_solve(a: &mut [f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Degenerate("normal equations are not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= a[i * n + k] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= a[k * n + i] * z[k];
        }
        z[i] /= a[i * n + i];
    }
    Ok(z)
}

pub fn ols_predict(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

/// Every layer a probe can read: each temporal encoder's layer outputs, then the fusion.
pub fn probe_layers(config: &ModelConfig) -> Vec<ProbeLayer> {
    let mut out = vec![];
    for modality in [Modality::Satellite, Modality::Weather] {
        let enc = config.encoder(modality);
        let n = if enc.kind == EncoderKind::Transformer { enc.layers + 1 } else { enc.layers };
        out.extend((0..n).map(|layer| ProbeLayer::Encoder { modality, layer }));
    }
    out.push(ProbeLayer::Fusion);
    out
}

/// Flattened activations of `layer` for each sample, all of equal width.
pub fn capture_layer(model: &MultimodalModel, samples: &[&PixelSample], layer: ProbeLayer) -> Result<(Vec<f64>, usize)> {
    let mut out = vec![];
    let mut width = None;
    match layer {
        ProbeLayer::Fusion => {
            for chunk in samples.chunks(INFERENCE_CHUNK) {
                let batch = pad_batch(chunk)?;
                let mut ctx = Ctx::eval(&model.store);
                let f = model.forward(&mut ctx, &batch)?;
                out.extend_from_slice(ctx.g.value(f.fused).data());
            }
            width = Some(4 * model.hidden());
        }
        ProbeLayer::Encoder { modality, layer: l } => {
            if !modality.is_temporal() {
                return Err(Error::Unsupported(format!("probing inside the static {modality} encoder")));
            }
            let steps = samples.iter().map(|s| s.steps(modality)).max().unwrap_or(0);
            let enc = model.encoder(modality);
            for chunk in samples.chunks(INFERENCE_CHUNK) {
                let inputs: Vec<(&[f64], &[u32])> = chunk.iter().map(|s| (s.values(modality), s.days(modality))).collect();
                let batch = seq_batch_to(&inputs, modality.features(), steps)?;
                let mut ctx = Ctx::eval(&model.store);
                let e = enc.encode_sequence(&mut ctx, &batch)?;
                let var = *e.layer_outputs.get(l).ok_or_else(|| {
                    Error::contract(format!("{modality} encoder has {} probe layers, asked for {l}", e.layer_outputs.len()))
                })?;
                let v = ctx.g.value(var);
                let w = v.len() / v.shape()[0];
                width = Some(w);
                for b in 0..chunk.len() {
                    let r = e.row_of[b];
                    out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
        }
    }
    Ok((out, width.unwrap_or(0)))
}

/// Linear probe from `layer` to the model's own prediction, on a seeded 90/10 split.
pub fn linear_probe(model: &MultimodalModel, samples: &[&PixelSample], layer: ProbeLayer, seed: u64) -> Result<ProbeResult> {
    if samples.len() < MIN_PROBE_SAMPLES {
        return Err(Error::contract(format!("linear probe needs at least {MIN_PROBE_SAMPLES} samples, got {}", samples.len())));
    }
    let (x, p) = capture_layer(model, samples, layer)?;
    let target = model.predict_values(samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((samples.len() as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let (train, test) = order.split_at(n_train);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        (idx.iter().flat_map(|&i| x[i * p..(i + 1) * p].iter().copied()).collect(), idx.iter().map(|&i| target[i]).collect())
    };
    let (xtr, ytr) = gather(train);
    let coef = ols_fit(&xtr, train.len(), p, &ytr)?;
    let rmse = |idx: &[usize]| {
        let se: f64 = idx.iter().map(|&i| (ols_predict(&coef, &x[i * p..(i + 1) * p]) - target[i]).powi(2)).sum();
        (se / idx.len() as f64).sqrt()
    };
    Ok(ProbeResult { layer, features: p, n_train: train.len(), n_test: test.len(), train_rmse: rmse(train), test_rmse: rmse(test) })
}
