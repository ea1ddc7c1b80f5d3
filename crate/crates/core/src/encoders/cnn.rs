use rand::Rng;

use super::layers::{uniform, BatchNorm, Ctx, Linear, ParamId, ParamStore};
use super::{step_mask, EncodeOutput, EncoderConfig, SeqBatch};
use crate::error::{Error, Result};
use crate::numgrad::{Array, Var};

pub const CNN_KERNEL: usize = 5;

/// Same-length 1-D convolution with weights `[K·C_in, C_out]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((CNN_KERNEL * cin) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(&[CNN_KERNEL * cin, cout], bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(&[cout], bound, rng)),
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// `x: [B, T, C_in] → [B, T, C_out]`, zero padding at both ends.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.value(x).shape().to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let half = CNN_KERNEL / 2;
        let pad = ctx.g.constant(Array::zeros(&[b, half, c]));
        let padded = ctx.g.concat(&[pad, x, pad], 1)?;
        // Tap k reads the input at offset k − half.
        let taps = (0..CNN_KERNEL).map(|k| ctx.g.slice(padded, 1, k, k + t)).collect::<Result<Vec<_>>>()?;
        let cols = ctx.g.concat(&taps, 2)?;
        let cols = ctx.g.reshape(cols, &[b * t, CNN_KERNEL * c])?;
        let (w, bias) = (ctx.p(self.weight), ctx.p(self.bias));
        let y = ctx.g.matmul(cols, w)?;
        let y = ctx.g.add_bias(y, bias)?;
        ctx.g.reshape(y, &[b, t, self.out_channels])
    }
}

/// Blocks of (conv, batch norm, ReLU, dropout), then flatten and a linear map.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub convs: Vec<Conv1d>,
    pub norms: Vec<BatchNorm>,
    pub out: Linear,
    pub max_len: usize,
}

impl CnnEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let max_len = cfg.max_len.ok_or_else(|| Error::Config("cnn1d encoder requires max_len".into()))?;
        let mut convs = vec![];
        let mut norms = vec![];
        for l in 0..cfg.layers {
            let cin = if l == 0 { cfg.input_dim } else { cfg.hidden };
            convs.push(Conv1d::new(store, &format!("{name}.conv{l}"), cin, cfg.hidden, rng));
            norms.push(BatchNorm::new(store, &format!("{name}.bn{l}"), cfg.hidden));
        }
        let out = Linear::new(store, &format!("{name}.out"), max_len * cfg.hidden, cfg.hidden, rng);
        Ok(Self { cfg: cfg.clone(), name: name.to_string(), convs, norms, out, max_len })
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &SeqBatch) -> Result<EncodeOutput> {
        if batch.steps() > self.max_len {
            return Err(Error::contract(format!("cnn '{}' accepts at most {} steps, got {}", self.name, self.max_len, batch.steps())));
        }
        // Batch norm statistics depend on every element, so work on the expanded batch.
        let batch = batch.expanded();
        let (b, hs) = (batch.rows(), self.cfg.hidden);
        let t = self.max_len;
        let mut padded = vec![true; b * t];
        for (r, &len) in batch.lengths.iter().enumerate() {
            padded[r * t..r * t + len].iter_mut().for_each(|p| *p = false);
        }
        let steps = batch.steps();
        let f = batch.features();
        let mut x = vec![0.0; b * t * f];
        for r in 0..b {
            x[r * t * f..r * t * f + steps * f].copy_from_slice(&batch.x.data()[r * steps * f..(r + 1) * steps * f]);
        }
        let x = ctx.g.constant(Array::new(vec![b, t, f], x)?);
        let in_mask = ctx.g.constant(step_mask(&padded, t, f));
        let mut a = ctx.g.mul(x, in_mask)?;
        let mask = ctx.g.constant(step_mask(&padded, t, hs));
        let included: Vec<bool> = padded.iter().map(|p| !p).collect();
        let mut layer_outputs = vec![];
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let y = conv.forward(ctx, a)?;
            let y = ctx.g.reshape(y, &[b * t, hs])?;
            let y = norm.forward(ctx, y, Some(included.clone()))?;
            let y = ctx.g.relu(y);
            let y = ctx.dropout(y, self.cfg.dropout)?;
            let y = ctx.g.reshape(y, &[b, t, hs])?;
            a = ctx.g.mul(y, mask)?;
            layer_outputs.push(a);
        }
        let flat = ctx.g.reshape(a, &[b, t * hs])?;
        let h = self.out.forward(ctx, flat)?;
        Ok(EncodeOutput { h, attention: vec![], alpha: None, layer_outputs, row_of: (0..b).collect() })
    }
}
