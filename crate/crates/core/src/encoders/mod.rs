//! Modality encoders: MLP for static vectors; LSTM, ALSTM, 1-D CNN and
//! Transformer for time series. Every encoder maps its input to a
//! representation of width `hidden`.

mod cnn;
mod layers;
mod mlp;
mod recurrent;
mod transformer;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cnn::{CnnEncoder, CNN_KERNEL};
pub use layers::{apply_bn_updates, AttentionEdit, BatchNorm, BufferId, Ctx, LayerNorm, Linear, ParamId, ParamStore, BN_MOMENTUM};
pub use mlp::MlpEncoder;
pub use recurrent::{AlstmEncoder, LstmCell, LstmEncoder};
pub use transformer::{positional_encoding, TransformerEncoder, TransformerLayer};

use crate::error::{Error, Result};
use crate::numgrad::{Array, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Lstm,
    Alstm,
    Cnn1d,
    Transformer,
}

impl EncoderKind {
    pub fn is_temporal(self) -> bool {
        !matches!(self, EncoderKind::Mlp)
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "lstm" => Ok(Self::Lstm),
            "alstm" => Ok(Self::Alstm),
            "cnn1d" | "cnn" => Ok(Self::Cnn1d),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::Config(format!("unknown encoder kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub dropout: f64,
    /// Fixed padded length; required by the CNN, whose flatten layer is sized by it.
    #[serde(default)]
    pub max_len: Option<usize>,
}

fn default_heads() -> usize {
    1
}

impl EncoderConfig {
    pub fn mlp(input_dim: usize, hidden: usize) -> Self {
        Self { kind: EncoderKind::Mlp, input_dim, hidden, layers: 2, heads: 1, dropout: 0.0, max_len: None }
    }

    /// Pre-norm Transformer with the default dropout of 0.1.
    pub fn transformer(input_dim: usize, hidden: usize, layers: usize, heads: usize) -> Self {
        Self { kind: EncoderKind::Transformer, input_dim, hidden, layers, heads, dropout: 0.1, max_len: None }
    }

    /// Two stacked LSTM layers with dropout 0.3 between them.
    pub fn lstm(input_dim: usize, hidden: usize) -> Self {
        Self { kind: EncoderKind::Lstm, input_dim, hidden, layers: 2, heads: 1, dropout: 0.3, max_len: None }
    }

    pub fn alstm(input_dim: usize, hidden: usize) -> Self {
        Self { kind: EncoderKind::Alstm, ..Self::lstm(input_dim, hidden) }
    }

    pub fn cnn(input_dim: usize, hidden: usize, layers: usize, max_len: usize) -> Self {
        Self { kind: EncoderKind::Cnn1d, input_dim, hidden, layers, heads: 1, dropout: 0.2, max_len: Some(max_len) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.kind {
            EncoderKind::Transformer => {
                if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
                }
                if !self.hidden.is_multiple_of(2) {
                    return Err(Error::Config(format!("positional encoding needs even hidden size, got {}", self.hidden)));
                }
            }
            EncoderKind::Cnn1d => match self.max_len {
                Some(n) if n >= 1 => {}
                _ => return Err(Error::Config("cnn1d encoder requires max_len".into())),
            },
            _ => {}
        }
        Ok(())
    }
}

/// Right-padded batch of sequences for one temporal modality.
///
/// Identical sequences may be stored once: `index[b]` names the stored row
/// for batch element `b`.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    /// `[U, T, F]`, padded steps hold the sentinel values.
    pub x: Array,
    /// Day index of each step, `U·T` entries (0 at padded steps).
    pub days: Vec<f64>,
    /// Unpadded length of each stored row.
    pub lengths: Vec<usize>,
    pub index: Vec<usize>,
}

impl SeqBatch {
    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn batch_size(&self) -> usize {
        self.index.len()
    }

    /// `U·T` flags, true at padded steps.
    pub fn padded(&self) -> Vec<bool> {
        let t = self.steps();
        self.lengths.iter().flat_map(|&len| (0..t).map(move |s| s >= len)).collect()
    }

    pub fn check(&self, features: usize) -> Result<()> {
        if self.x.ndim() != 3 || self.features() != features {
            return Err(Error::shape(format!("sequence batch {:?} for {features} features", self.x.shape())));
        }
        if self.lengths.len() != self.rows() || self.days.len() != self.x.len() / features {
            return Err(Error::shape("sequence batch metadata does not match its data"));
        }
        if self.lengths.contains(&0) {
            return Err(Error::EmptySequence);
        }
        if self.lengths.iter().any(|&l| l > self.steps()) || self.index.iter().any(|&i| i >= self.rows()) {
            return Err(Error::shape("sequence batch lengths or index out of range"));
        }
        Ok(())
    }

    /// Stores each distinct (sequence, days) pair once.
    pub fn deduplicated(&self) -> SeqBatch {
        let (t, f) = (self.steps(), self.features());
        let mut seen: HashMap<(Vec<u64>, Vec<u64>), usize> = HashMap::new();
        let mut keep: Vec<usize> = vec![];
        let mut remap = vec![0; self.rows()];
        for u in 0..self.rows() {
            let key = (
                self.x.data()[u * t * f..(u + 1) * t * f].iter().map(|v| v.to_bits()).collect(),
                self.days[u * t..(u + 1) * t].iter().map(|v| v.to_bits()).collect(),
            );
            let next = keep.len();
            let slot = *seen.entry(key).or_insert(next);
            if slot == next {
                keep.push(u);
            }
            remap[u] = slot;
        }
        if keep.len() == self.rows() {
            return self.clone();
        }
        let mut x = Vec::with_capacity(keep.len() * t * f);
        let mut days = Vec::with_capacity(keep.len() * t);
        for &u in &keep {
            x.extend_from_slice(&self.x.data()[u * t * f..(u + 1) * t * f]);
            days.extend_from_slice(&self.days[u * t..(u + 1) * t]);
        }
        SeqBatch {
            x: Array::new(vec![keep.len(), t, f], x).expect("consistent"),
            days,
            lengths: keep.iter().map(|&u| self.lengths[u]).collect(),
            index: self.index.iter().map(|&i| remap[i]).collect(),
        }
    }

    /// Materializes one row per batch element.
    pub fn expanded(&self) -> SeqBatch {
        let (t, f) = (self.steps(), self.features());
        let mut x = Vec::with_capacity(self.batch_size() * t * f);
        let mut days = Vec::with_capacity(self.batch_size() * t);
        for &u in &self.index {
            x.extend_from_slice(&self.x.data()[u * t * f..(u + 1) * t * f]);
            days.extend_from_slice(&self.days[u * t..(u + 1) * t]);
        }
        SeqBatch {
            x: Array::new(vec![self.batch_size(), t, f], x).expect("consistent"),
            days,
            lengths: self.index.iter().map(|&u| self.lengths[u]).collect(),
            index: (0..self.batch_size()).collect(),
        }
    }

    /// Single unpadded sequence (`steps × features`, row-major).
    pub fn single(values: &[f64], days: &[f64], features: usize) -> Result<SeqBatch> {
        if features == 0 || values.len() != days.len() * features {
            return Err(Error::shape(format!("{} values for {} steps of {features} features", values.len(), days.len())));
        }
        Ok(SeqBatch {
            x: Array::new(vec![1, days.len(), features], values.to_vec())?,
            days: days.to_vec(),
            lengths: vec![days.len()],
            index: vec![0],
        })
    }
}

/// Graph nodes produced by a temporal encoder.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// `[B, hidden]`.
    pub h: Var,
    /// Transformer attention per layer, `[R·H, T+1, T+1]`.
    pub attention: Vec<Var>,
    /// ALSTM step weights, `[R, T]`.
    pub alpha: Option<Var>,
    /// Per-layer activations, leading axis `R`.
    pub layer_outputs: Vec<Var>,
    /// Row of the intermediate tensors (`attention`, `alpha`, `layer_outputs`) for each batch element.
    pub row_of: Vec<usize>,
}

/// Attention matrices of one sequence, per layer and head.
///
/// Position 0 is the regression token; positions `1..=valid_steps` are the
/// unpadded time steps, any further positions are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Array>>,
    pub valid_steps: usize,
}

impl AttentionRecord {
    /// Extracts row `r` from batched attention values `[R·H, T1, T1]`.
    pub fn from_batch(values: &[&Array], row: usize, heads: usize, valid_steps: usize) -> Self {
        let layers = values
            .iter()
            .map(|a| {
                let t1 = a.shape()[1];
                (0..heads)
                    .map(|h| {
                        let k = row * heads + h;
                        Array::new(vec![t1, t1], a.data()[k * t1 * t1..(k + 1) * t1 * t1].to_vec()).unwrap()
                    })
                    .collect()
            })
            .collect();
        Self { layers, valid_steps }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Same record with padded rows and columns removed.
    pub fn cropped(&self) -> AttentionRecord {
        let n = self.valid_steps + 1;
        let layers = self
            .layers
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|a| {
                        let t1 = a.shape()[0];
                        if t1 == n {
                            return a.clone();
                        }
                        let mut d = Vec::with_capacity(n * n);
                        for i in 0..n {
                            d.extend_from_slice(&a.data()[i * t1..i * t1 + n]);
                        }
                        Array::new(vec![n, n], d).unwrap()
                    })
                    .collect()
            })
            .collect();
        AttentionRecord { layers, valid_steps: self.valid_steps }
    }

    /// Head-averaged attention of `layer`.
    pub fn head_mean(&self, layer: usize) -> Array {
        let heads = &self.layers[layer];
        let mut out = Array::zeros(heads[0].shape());
        for h in heads {
            out.add_assign(h);
        }
        out.map(|v| v / heads.len() as f64)
    }
}

/// Output of a single-sequence encoding.
#[derive(Clone, Debug)]
pub struct Representation {
    pub h: Vec<f64>,
    pub attention: Option<AttentionRecord>,
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Mlp(MlpEncoder),
    Lstm(LstmEncoder),
    Alstm(AlstmEncoder),
    Cnn(CnnEncoder),
    Transformer(TransformerEncoder),
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Mlp => Encoder::Mlp(MlpEncoder::new(cfg, store, name, rng)),
            EncoderKind::Lstm => Encoder::Lstm(LstmEncoder::new(cfg, store, name, rng)),
            EncoderKind::Alstm => Encoder::Alstm(AlstmEncoder::new(cfg, store, name, rng)),
            EncoderKind::Cnn1d => Encoder::Cnn(CnnEncoder::new(cfg, store, name, rng)?),
            EncoderKind::Transformer => Encoder::Transformer(TransformerEncoder::new(cfg, store, name, rng)),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            Encoder::Mlp(e) => &e.cfg,
            Encoder::Lstm(e) => &e.cfg,
            Encoder::Alstm(e) => &e.cfg,
            Encoder::Cnn(e) => &e.cfg,
            Encoder::Transformer(e) => &e.cfg,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Encoder::Mlp(e) => &e.name,
            Encoder::Lstm(e) => &e.name,
            Encoder::Alstm(e) => &e.name,
            Encoder::Cnn(e) => &e.name,
            Encoder::Transformer(e) => &e.name,
        }
    }

    /// Static input `[B, F]` to `[B, hidden]`.
    pub fn encode_static(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Encoder::Mlp(e) => e.forward(ctx, x),
            _ => Err(Error::Unsupported(format!("{:?} encoder on a static input", self.config().kind))),
        }
    }

    pub fn encode_sequence(&self, ctx: &mut Ctx, batch: &SeqBatch) -> Result<EncodeOutput> {
        batch.check(self.config().input_dim)?;
        match self {
            Encoder::Mlp(_) => Err(Error::Unsupported("mlp encoder on a sequence".into())),
            Encoder::Lstm(e) => e.forward(ctx, batch),
            Encoder::Alstm(e) => e.forward(ctx, batch),
            Encoder::Cnn(e) => e.forward(ctx, batch),
            Encoder::Transformer(e) => e.forward(ctx, batch),
        }
    }

    /// Eval-mode encoding of one unpadded sequence.
    pub fn encode_one(&self, params: &ParamStore, values: &[f64], days: &[f64]) -> Result<Representation> {
        let batch = SeqBatch::single(values, days, self.config().input_dim)?;
        let mut ctx = Ctx::eval(params);
        let out = self.encode_sequence(&mut ctx, &batch)?;
        let heads = self.config().heads;
        let attention = (!out.attention.is_empty()).then(|| {
            let vals: Vec<&Array> = out.attention.iter().map(|&a| ctx.g.value(a)).collect();
            AttentionRecord::from_batch(&vals, 0, heads, days.len())
        });
        Ok(Representation {
            h: ctx.g.value(out.h).data().to_vec(),
            attention,
            alpha: out.alpha.map(|a| ctx.g.value(a).data().to_vec()),
        })
    }

    /// Eval-mode encoding of one static vector.
    pub fn encode_vector(&self, params: &ParamStore, x: &[f64]) -> Result<Representation> {
        if x.len() != self.config().input_dim {
            return Err(Error::contract(format!("expected {} features, got {}", self.config().input_dim, x.len())));
        }
        let mut ctx = Ctx::eval(params);
        let v = ctx.g.constant(Array::matrix(1, x.len(), x.to_vec())?);
        let h = self.encode_static(&mut ctx, v)?;
        Ok(Representation { h: ctx.g.value(h).data().to_vec(), attention: None, alpha: None })
    }
}

/// `[R·T]` padding flags to a `[R, T, C]` constant holding 0 at padded steps, 1 elsewhere.
pub(crate) fn step_mask(padded: &[bool], steps: usize, channels: usize) -> Array {
    let rows = padded.len() / steps.max(1);
    let data = padded.iter().flat_map(|&p| std::iter::repeat_n(if p { 0.0 } else { 1.0 }, channels)).collect();
    Array::new(vec![rows, steps, channels], data).expect("consistent")
}
