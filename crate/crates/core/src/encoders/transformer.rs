use std::sync::Arc;

use rand::Rng;

use super::layers::{uniform, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use super::{EncodeOutput, EncoderConfig, SeqBatch};
use crate::error::{Error, Result};
use crate::numgrad::{Array, KeyMask, Var};

/// Sinusoidal encoding of day indices, half-split layout:
/// `p[t, j] = sin(n_t / 10000^(2j/d))`, `p[t, j + d/2] = cos(n_t / 10000^(2j/d))`.
pub fn positional_encoding(days: &[f64], d: usize) -> Result<Array> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs even width, got {d}")));
    }
    if let Some(n) = days.iter().find(|&&n| n < 0.0) {
        return Err(Error::contract(format!("negative day index {n}")));
    }
    let half = d / 2;
    let mut out = vec![0.0; days.len() * d];
    for (t, &n) in days.iter().enumerate() {
        for j in 0..half {
            let angle = n / 10000f64.powf(2.0 * j as f64 / d as f64);
            out[t * d + j] = angle.sin();
            out[t * d + j + half] = angle.cos();
        }
    }
    Array::new(vec![days.len(), d], out)
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Pre-norm Transformer encoder with a learnable regression token at position 0.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub embed: Linear,
    pub token: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl TransformerEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden;
        let embed = Linear::new(store, &format!("{name}.embed"), cfg.input_dim, d, rng);
        let token = store.add(format!("{name}.token"), uniform(&[d], 0.02, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                TransformerLayer {
                    norm1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, 2 * d, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), 2 * d, d, rng),
                }
            })
            .collect();
        Self { cfg: cfg.clone(), name: name.to_string(), embed, token, layers }
    }

    fn split_heads(&self, ctx: &mut Ctx, x: Var, rows: usize, t1: usize) -> Result<Var> {
        let (h, d) = (self.cfg.heads, self.cfg.hidden);
        if h == 1 {
            return Ok(x);
        }
        let x = ctx.g.reshape(x, &[rows, t1, h, d / h])?;
        let x = ctx.g.permute(x, &[0, 2, 1, 3])?;
        ctx.g.reshape(x, &[rows * h, t1, d / h])
    }

    fn merge_heads(&self, ctx: &mut Ctx, x: Var, rows: usize, t1: usize) -> Result<Var> {
        let (h, d) = (self.cfg.heads, self.cfg.hidden);
        if h == 1 {
            return Ok(x);
        }
        let x = ctx.g.reshape(x, &[rows, h, t1, d / h])?;
        let x = ctx.g.permute(x, &[0, 2, 1, 3])?;
        ctx.g.reshape(x, &[rows, t1, d])
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &SeqBatch) -> Result<EncodeOutput> {
        let (rows, steps, d, heads) = (batch.rows(), batch.steps(), self.cfg.hidden, self.cfg.heads);
        let t1 = steps + 1;
        let dh = d / heads;

        let x = ctx.g.constant(batch.x.clone());
        let emb = self.embed.forward(ctx, x)?;
        let mut pe = positional_encoding(&batch.days, d)?;
        pe.set_shape(vec![rows, steps, d]);
        let pe = ctx.g.constant(pe);
        let emb = ctx.g.add(emb, pe)?;
        let tok = ctx.p(self.token);
        let tok = ctx.g.broadcast_rows(tok, rows);
        let tok = ctx.g.reshape(tok, &[rows, 1, d])?;
        let mut xs = ctx.g.concat(&[tok, emb], 1)?;

        let padded = batch.padded();
        let mut key_pad = Vec::with_capacity(rows * t1);
        for r in 0..rows {
            key_pad.push(false);
            key_pad.extend_from_slice(&padded[r * steps..(r + 1) * steps]);
        }
        let mask = KeyMask { padded: Arc::new(key_pad), rows_per_entry: heads * t1 };

        let mut attention = vec![];
        let mut layer_outputs = vec![xs];
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.norm1.forward(ctx, xs)?;
            let q = layer.q.forward(ctx, h)?;
            let k = layer.k.forward(ctx, h)?;
            let v = layer.v.forward(ctx, h)?;
            let q = self.split_heads(ctx, q, rows, t1)?;
            let k = self.split_heads(ctx, k, rows, t1)?;
            let v = self.split_heads(ctx, v, rows, t1)?;
            let kt = ctx.g.transpose(k)?;
            let logits = ctx.g.batch_matmul(q, kt)?;
            let logits = ctx.g.scale(logits, 1.0 / (dh as f64).sqrt());
            let attn = ctx.g.softmax(logits, Some(&mask))?;
            let attn = ctx.apply_attention_edit(&self.name, l, attn)?;
            attention.push(attn);
            let mixed = ctx.g.batch_matmul(attn, v)?;
            let mixed = self.merge_heads(ctx, mixed, rows, t1)?;
            let out = layer.o.forward(ctx, mixed)?;
            let out = ctx.dropout(out, self.cfg.dropout)?;
            xs = ctx.g.add(xs, out)?;

            let h = layer.norm2.forward(ctx, xs)?;
            let f = layer.ff1.forward(ctx, h)?;
            let f = ctx.g.relu(f);
            let f = layer.ff2.forward(ctx, f)?;
            let f = ctx.dropout(f, self.cfg.dropout)?;
            xs = ctx.g.add(xs, f)?;
            layer_outputs.push(xs);
        }
        let token_out = ctx.g.slice(xs, 1, 0, 1)?;
        let token_out = ctx.g.reshape(token_out, &[rows, d])?;
        let h = ctx.g.gather(token_out, Arc::new(batch.index.clone()))?;
        Ok(EncodeOutput { h, attention, alpha: None, layer_outputs, row_of: batch.index.clone() })
    }
}
