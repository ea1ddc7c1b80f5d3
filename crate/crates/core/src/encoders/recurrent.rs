use std::sync::Arc;

use rand::Rng;

use super::layers::{uniform, BatchNorm, Ctx, Linear, ParamId, ParamStore};
use super::{step_mask, EncodeOutput, EncoderConfig, SeqBatch};
use crate::error::Result;
use crate::numgrad::{Array, KeyMask, Var};

/// One LSTM layer; gate order in the packed weights is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform(&[input, 4 * hidden], bound, rng)),
            w_hh: store.add(format!("{name}.w_hh"), uniform(&[hidden, 4 * hidden], bound, rng)),
            bias: store.add(format!("{name}.bias"), uniform(&[4 * hidden], bound, rng)),
            hidden,
        }
    }

    /// Runs the layer over `x: [R, T, F]`; padded steps leave the state untouched.
    /// Returns the per-step hidden states `[R, T, h]` and the final hidden state `[R, h]`.
    pub fn run(&self, ctx: &mut Ctx, x: Var, padded: &[bool]) -> Result<(Var, Var)> {
        let shape = ctx.g.value(x).shape().to_vec();
        let (rows, steps, feats) = (shape[0], shape[1], shape[2]);
        let h4 = 4 * self.hidden;
        let (w_ih, w_hh, bias) = (ctx.p(self.w_ih), ctx.p(self.w_hh), ctx.p(self.bias));
        let flat = ctx.g.reshape(x, &[rows * steps, feats])?;
        let pre = ctx.g.matmul(flat, w_ih)?;
        let pre = ctx.g.add_bias(pre, bias)?;
        let pre = ctx.g.reshape(pre, &[rows, steps, h4])?;

        let mut h = ctx.g.constant(Array::zeros(&[rows, self.hidden]));
        let mut c = ctx.g.constant(Array::zeros(&[rows, self.hidden]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = ctx.g.slice(pre, 1, t, t + 1)?;
            let xt = ctx.g.reshape(xt, &[rows, h4])?;
            let rec = ctx.g.matmul(h, w_hh)?;
            let gates = ctx.g.add(xt, rec)?;
            let hs = self.hidden;
            let i = ctx.g.slice(gates, 1, 0, hs)?;
            let f = ctx.g.slice(gates, 1, hs, 2 * hs)?;
            let gg = ctx.g.slice(gates, 1, 2 * hs, 3 * hs)?;
            let o = ctx.g.slice(gates, 1, 3 * hs, 4 * hs)?;
            let (i, f, gg, o) = (ctx.g.sigmoid(i), ctx.g.sigmoid(f), ctx.g.tanh(gg), ctx.g.sigmoid(o));
            let fc = ctx.g.mul(f, c)?;
            let ig = ctx.g.mul(i, gg)?;
            let c_new = ctx.g.add(fc, ig)?;
            let tc = ctx.g.tanh(c_new);
            let h_new = ctx.g.mul(o, tc)?;

            let step_pad: Vec<bool> = (0..rows).map(|r| padded[r * steps + t]).collect();
            if step_pad.iter().any(|&p| p) {
                let keep = Array::new(
                    vec![rows, hs],
                    step_pad.iter().flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, hs)).collect(),
                )?;
                let hold = keep.map(|v| 1.0 - v);
                let (keep, hold) = (ctx.g.constant(keep), ctx.g.constant(hold));
                h = blend(ctx, keep, hold, h_new, h)?;
                c = blend(ctx, keep, hold, c_new, c)?;
            } else {
                h = h_new;
                c = c_new;
            }
            outputs.push(ctx.g.reshape(h, &[rows, 1, hs])?);
        }
        let seq = ctx.g.concat(&outputs, 1)?;
        Ok((seq, h))
    }
}

fn blend(ctx: &mut Ctx, keep: Var, hold: Var, new: Var, old: Var) -> Result<Var> {
    let a = ctx.g.mul(keep, new)?;
    let b = ctx.g.mul(hold, old)?;
    ctx.g.add(a, b)
}

fn build_stack(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Vec<LstmCell> {
    (0..cfg.layers)
        .map(|l| {
            let input = if l == 0 { cfg.input_dim } else { cfg.hidden };
            LstmCell::new(store, &format!("{name}.lstm{l}"), input, cfg.hidden, rng)
        })
        .collect()
}

/// Runs stacked cells with dropout between layers. Padded input steps are
/// zeroed so the sentinel never reaches the gates.
fn run_stack(ctx: &mut Ctx, cells: &[LstmCell], dropout: f64, batch: &SeqBatch) -> Result<(Vec<Var>, Var)> {
    let padded = batch.padded();
    let mask = ctx.g.constant(step_mask(&padded, batch.steps(), batch.features()));
    let x = ctx.g.constant(batch.x.clone());
    let mut input = ctx.g.mul(x, mask)?;
    let mut layer_outputs = vec![];
    let mut last = None;
    for (l, cell) in cells.iter().enumerate() {
        if l > 0 {
            input = ctx.dropout(input, dropout)?;
        }
        let (seq, h) = cell.run(ctx, input, &padded)?;
        layer_outputs.push(seq);
        input = seq;
        last = Some(h);
    }
    Ok((layer_outputs, last.expect("at least one layer")))
}

/// Stacked LSTM; the final unpadded hidden state goes through batch norm and a linear map.
#[derive(Clone, Debug)]
pub struct LstmEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub cells: Vec<LstmCell>,
    pub norm: BatchNorm,
    pub out: Linear,
}

impl LstmEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        Self {
            cfg: cfg.clone(),
            name: name.to_string(),
            cells: build_stack(cfg, store, name, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), cfg.hidden),
            out: Linear::new(store, &format!("{name}.out"), cfg.hidden, cfg.hidden, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &SeqBatch) -> Result<EncodeOutput> {
        let (layer_outputs, last) = run_stack(ctx, &self.cells, self.cfg.dropout, batch)?;
        // Batch statistics must see every batch element, so expand before the norm.
        let last = ctx.g.gather(last, Arc::new(batch.index.clone()))?;
        let z = self.norm.forward(ctx, last, None)?;
        let h = self.out.forward(ctx, z)?;
        Ok(EncodeOutput { h, attention: vec![], alpha: None, layer_outputs, row_of: batch.index.clone() })
    }
}

/// LSTM stack whose step outputs are pooled by a learned-query scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct AlstmEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub cells: Vec<LstmCell>,
    pub query: ParamId,
    pub out: Linear,
}

impl AlstmEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let cells = build_stack(cfg, store, name, rng);
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        Self {
            cfg: cfg.clone(),
            name: name.to_string(),
            cells,
            query: store.add(format!("{name}.query"), uniform(&[cfg.hidden, 1], bound, rng)),
            out: Linear::new(store, &format!("{name}.out"), cfg.hidden, cfg.hidden, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &SeqBatch) -> Result<EncodeOutput> {
        let (layer_outputs, _) = run_stack(ctx, &self.cells, self.cfg.dropout, batch)?;
        let seq = *layer_outputs.last().unwrap();
        let (rows, steps, hs) = (batch.rows(), batch.steps(), self.cfg.hidden);
        let q = ctx.p(self.query);
        let flat = ctx.g.reshape(seq, &[rows * steps, hs])?;
        let scores = ctx.g.matmul(flat, q)?;
        let scores = ctx.g.reshape(scores, &[rows, steps])?;
        let scores = ctx.g.scale(scores, 1.0 / (hs as f64).sqrt());
        let mask = KeyMask { padded: Arc::new(batch.padded()), rows_per_entry: 1 };
        let alpha = ctx.g.softmax(scores, Some(&mask))?;
        let a3 = ctx.g.reshape(alpha, &[rows, 1, steps])?;
        let pooled = ctx.g.batch_matmul(a3, seq)?;
        let pooled = ctx.g.reshape(pooled, &[rows, hs])?;
        let h = self.out.forward(ctx, pooled)?;
        let h = ctx.g.gather(h, Arc::new(batch.index.clone()))?;
        Ok(EncodeOutput { h, attention: vec![], alpha: Some(alpha), layer_outputs, row_of: batch.index.clone() })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{Encoder, EncoderConfig};
    use super::*;
    use crate::numgrad::sigmoid;

    fn build(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&cfg, &mut store, "sat", &mut rng).unwrap();
        (enc, store)
    }

    /// Hand-rolled LSTM step for one sample.
    fn cell_step(x: &[f64], h: &[f64], c: &[f64], w_ih: &Array, w_hh: &Array, b: &Array) -> (Vec<f64>, Vec<f64>) {
        let hs = h.len();
        let mut gates = b.data().to_vec();
        for (k, g) in gates.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *g += xi * w_ih.at(&[i, k]);
            }
            for (i, hi) in h.iter().enumerate() {
                *g += hi * w_hh.at(&[i, k]);
            }
        }
        let mut h2 = vec![0.0; hs];
        let mut c2 = vec![0.0; hs];
        for j in 0..hs {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[hs + j]);
            let g = gates[2 * hs + j].tanh();
            let o = sigmoid(gates[3 * hs + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    fn single_layer_final_state(enc: &Encoder, store: &ParamStore, values: &[f64], days: &[f64]) -> Vec<f64> {
        let Encoder::Lstm(l) = enc else { unreachable!() };
        let batch = SeqBatch::single(values, days, l.cfg.input_dim).unwrap();
        let mut ctx = Ctx::eval(store);
        let x = ctx.g.constant(batch.x.clone());
        let (_, h) = l.cells[0].run(&mut ctx, x, &batch.padded()).unwrap();
        ctx.g.value(h).data().to_vec()
    }

    #[test]
    fn golden_two_step_recurrence() {
        let cfg = EncoderConfig { layers: 1, ..EncoderConfig::lstm(1, 2) };
        let (enc, store) = build(cfg, 11);
        let Encoder::Lstm(l) = &enc else { unreachable!() };
        let cell = &l.cells[0];
        let (w_ih, w_hh, b) = (store.get(cell.w_ih), store.get(cell.w_hh), store.get(cell.bias));
        let (h1, c1) = cell_step(&[0.7], &[0.0, 0.0], &[0.0, 0.0], w_ih, w_hh, b);
        let (h2, _) = cell_step(&[-0.4], &h1, &c1, w_ih, w_hh, b);
        let got = single_layer_final_state(&enc, &store, &[0.7, -0.4], &[0.0, 5.0]);
        for (a, e) in got.iter().zip(&h2) {
            assert!((a - e).abs() < 1e-14, "{got:?} vs {h2:?}");
        }
        // T = 1 is a single cell step.
        let got1 = single_layer_final_state(&enc, &store, &[0.7], &[0.0]);
        assert!(got1.iter().zip(&h1).all(|(a, e)| (a - e).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let (enc, mut store) = build(EncoderConfig::lstm(3, 4), 2);
        let Encoder::Lstm(l) = &enc else { unreachable!() };
        let out_bias = l.out.b;
        for id in store.ids().collect::<Vec<_>>() {
            if id != out_bias && !store.name(id).contains(".bn.") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Array::zeros(&shape);
            }
        }
        let r = enc.encode_one(&store, &[0.1; 9], &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(r.h, store.get(out_bias).data());
    }

    #[test]
    fn padded_tail_is_inert() {
        let (enc, store) = build(EncoderConfig::lstm(2, 4), 5);
        let short = enc.encode_one(&store, &[0.2, 0.4, 0.6, 0.1], &[0.0, 5.0]).unwrap();
        let batch = SeqBatch {
            x: Array::new(vec![1, 4, 2], vec![0.2, 0.4, 0.6, 0.1, -1.0, -1.0, -1.0, -1.0]).unwrap(),
            days: vec![0.0, 5.0, 0.0, 0.0],
            lengths: vec![2],
            index: vec![0],
        };
        let mut ctx = Ctx::eval(&store);
        let out = enc.encode_sequence(&mut ctx, &batch).unwrap();
        assert_eq!(ctx.g.value(out.h).data(), short.h.as_slice());
    }

    #[test]
    fn all_padded_is_an_error() {
        let (enc, store) = build(EncoderConfig::lstm(2, 4), 5);
        let batch = SeqBatch { x: Array::full(&[1, 2, 2], -1.0), days: vec![0.0; 2], lengths: vec![0], index: vec![0] };
        let mut ctx = Ctx::eval(&store);
        assert!(matches!(enc.encode_sequence(&mut ctx, &batch), Err(crate::Error::EmptySequence)));
    }

    #[test]
    fn alstm_weights_are_a_distribution() {
        let (enc, store) = build(EncoderConfig::alstm(3, 4), 8);
        let r = enc.encode_one(&store, &[0.3, 0.1, -0.2, 0.9, 0.5, 0.4, 0.0, 0.2, 0.7], &[0.0, 5.0, 10.0]).unwrap();
        let alpha = r.alpha.unwrap();
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let one = enc.encode_one(&store, &[0.3, 0.1, -0.2], &[0.0]).unwrap();
        assert_eq!(one.alpha.unwrap(), vec![1.0]);
    }

    #[test]
    fn alstm_equal_scores_pool_the_mean() {
        let (enc, mut store) = build(EncoderConfig::alstm(2, 3), 9);
        let Encoder::Alstm(a) = &enc else { unreachable!() };
        *store.get_mut(a.query) = Array::zeros(&[3, 1]);
        let r = enc.encode_one(&store, &[0.3, 0.1, -0.2, 0.9], &[0.0, 5.0]).unwrap();
        assert_eq!(r.alpha.unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn alstm_padded_steps_get_zero_weight() {
        let (enc, store) = build(EncoderConfig::alstm(1, 3), 4);
        let batch = SeqBatch {
            x: Array::new(vec![1, 3, 1], vec![0.5, 0.2, -1.0]).unwrap(),
            days: vec![0.0, 5.0, 0.0],
            lengths: vec![2],
            index: vec![0],
        };
        let mut ctx = Ctx::eval(&store);
        let out = enc.encode_sequence(&mut ctx, &batch).unwrap();
        let alpha = ctx.g.value(out.alpha.unwrap()).data().to_vec();
        assert_eq!(alpha[2], 0.0);
        let short = enc.encode_one(&store, &[0.5, 0.2], &[0.0, 5.0]).unwrap();
        assert_eq!(ctx.g.value(out.h).data(), short.h.as_slice());
    }
}
