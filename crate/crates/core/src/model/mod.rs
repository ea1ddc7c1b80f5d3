//! The multimodal network: four encoders, concatenation, a linear head.

mod checkpoint;
mod wma;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_EXTENSION, CHECKPOINT_FORMAT_VERSION};
pub use wma::{wma_from_partials, wma_relevance, ModalityRelevance, WMA_EPS};

use crate::data::{pad_batch, Batch, Modality, NormStats, PixelSample, DEM_FEATURES, SA_FEATURES, SOIL_FEATURES, W_FEATURES};
use crate::encoders::{
    AttentionRecord, Ctx, EncodeOutput, Encoder, EncoderConfig, EncoderKind, Linear, ParamId, ParamStore, SeqBatch,
};
use crate::error::{Error, Result};
use crate::numgrad::{Array, Var};

/// Largest number of samples evaluated in one graph during inference.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub satellite: EncoderConfig,
    pub weather: EncoderConfig,
    pub soil: EncoderConfig,
    pub dem: EncoderConfig,
}

impl Default for ModelConfig {
    /// Transformer temporal encoders with hidden size 32, one head and four layers.
    fn default() -> Self {
        Self::with_temporal(EncoderKind::Transformer, 32, 4, 1, None).expect("valid default")
    }
}

impl ModelConfig {
    /// Both temporal modalities use `kind`; `max_len` is required by the CNN.
    pub fn with_temporal(kind: EncoderKind, hidden: usize, layers: usize, heads: usize, max_len: Option<(usize, usize)>) -> Result<Self> {
        let temporal = |f: usize, len: Option<usize>| -> Result<EncoderConfig> {
            Ok(match kind {
                EncoderKind::Transformer => EncoderConfig::transformer(f, hidden, layers, heads),
                EncoderKind::Lstm => EncoderConfig { layers, ..EncoderConfig::lstm(f, hidden) },
                EncoderKind::Alstm => EncoderConfig { layers, ..EncoderConfig::alstm(f, hidden) },
                EncoderKind::Cnn1d => {
                    let len = len.ok_or_else(|| Error::Config("cnn1d encoders need max_len".into()))?;
                    EncoderConfig::cnn(f, hidden, layers, len)
                }
                EncoderKind::Mlp => return Err(Error::Config("mlp cannot encode a time series".into())),
            })
        };
        let cfg = Self {
            hidden,
            satellite: temporal(SA_FEATURES, max_len.map(|m| m.0))?,
            weather: temporal(W_FEATURES, max_len.map(|m| m.1))?,
            soil: EncoderConfig::mlp(SOIL_FEATURES, hidden),
            dem: EncoderConfig::mlp(DEM_FEATURES, hidden),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = [(Modality::Satellite, &self.satellite), (Modality::Weather, &self.weather), (Modality::Soil, &self.soil), (Modality::Dem, &self.dem)];
        for (m, cfg) in expected {
            cfg.validate()?;
            if cfg.hidden != self.hidden {
                return Err(Error::Config(format!("{m} encoder width {} differs from hidden {}", cfg.hidden, self.hidden)));
            }
            if cfg.input_dim != m.features() {
                return Err(Error::Config(format!("{m} encoder expects {} features, schema has {}", cfg.input_dim, m.features())));
            }
            if cfg.kind.is_temporal() != m.is_temporal() {
                return Err(Error::Config(format!("{:?} encoder cannot handle the {m} modality", cfg.kind)));
            }
        }
        Ok(())
    }

    pub fn encoder(&self, m: Modality) -> &EncoderConfig {
        match m {
            Modality::Satellite => &self.satellite,
            Modality::Weather => &self.weather,
            Modality::Soil => &self.soil,
            Modality::Dem => &self.dem,
        }
    }
}

/// Graph nodes of one forward pass.
pub struct ForwardOutput {
    /// `[B, 1]`.
    pub yhat: Var,
    /// Modality representations `[B, d]` in modality order.
    pub z: [Var; 4],
    /// `concat(z)`, `[B, 4d]`.
    pub fused: Var,
    pub satellite: EncodeOutput,
    pub weather: EncodeOutput,
}

impl ForwardOutput {
    pub fn temporal(&self, m: Modality) -> Option<&EncodeOutput> {
        match m {
            Modality::Satellite => Some(&self.satellite),
            Modality::Weather => Some(&self.weather),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub yhat: f64,
    pub bias: f64,
    /// `ŷ^m = w^m · z^m` in modality order.
    pub partials: [f64; 4],
    pub z: [Vec<f64>; 4],
    pub satellite_attention: Option<AttentionRecord>,
    pub weather_attention: Option<AttentionRecord>,
}

impl Prediction {
    pub fn partial(&self, m: Modality) -> f64 {
        self.partials[m.index()]
    }

    pub fn attention(&self, m: Modality) -> Option<&AttentionRecord> {
        match m {
            Modality::Satellite => self.satellite_attention.as_ref(),
            Modality::Weather => self.weather_attention.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub encoders: [Encoder; 4],
    /// Fusion weights `[4d, 1]`, modality blocks in order.
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Normalization fitted on the training split, when known.
    pub norm: Option<NormStats>,
}

impl MultimodalModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = [
            Encoder::new(&config.satellite, &mut store, "satellite", &mut rng)?,
            Encoder::new(&config.weather, &mut store, "weather", &mut rng)?,
            Encoder::new(&config.soil, &mut store, "soil", &mut rng)?,
            Encoder::new(&config.dem, &mut store, "dem", &mut rng)?,
        ];
        let head = Linear::new(&mut store, "head", 4 * config.hidden, 1, &mut rng);
        Ok(Self { config, seed, store, encoders, head_w: head.w, head_b: head.b, norm: None })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        &self.encoders[m.index()]
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn bias(&self) -> f64 {
        self.store.get(self.head_b).data()[0]
    }

    pub fn set_bias(&mut self, b: f64) {
        self.store.get_mut(self.head_b).data_mut()[0] = b;
    }

    /// Fusion weights `w^m` of one modality.
    pub fn head_weights(&self, m: Modality) -> &[f64] {
        let d = self.hidden();
        &self.store.get(self.head_w).data()[m.index() * d..(m.index() + 1) * d]
    }

    pub fn head_weights_mut(&mut self, m: Modality) -> &mut [f64] {
        let d = self.hidden();
        &mut self.store.get_mut(self.head_w).data_mut()[m.index() * d..(m.index() + 1) * d]
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<ForwardOutput> {
        let satellite = self.encoders[0].encode_sequence(ctx, &batch.satellite)?;
        let weather = self.encoders[1].encode_sequence(ctx, &batch.weather)?;
        let soil = ctx.g.constant(batch.soil.clone());
        let soil = self.encoders[2].encode_static(ctx, soil)?;
        let dem = ctx.g.constant(batch.dem.clone());
        let dem = self.encoders[3].encode_static(ctx, dem)?;
        let z = [satellite.h, weather.h, soil, dem];
        let fused = ctx.g.concat(&z, 1)?;
        let (w, b) = (ctx.p(self.head_w), ctx.p(self.head_b));
        let y = ctx.g.matmul(fused, w)?;
        let yhat = ctx.g.add_bias(y, b)?;
        Ok(ForwardOutput { yhat, z, fused, satellite, weather })
    }

    fn check(sample: &PixelSample) -> Result<()> {
        let ok = sample.x_sa.len() == sample.sa_steps() * SA_FEATURES
            && sample.x_w.len() == sample.w_steps() * W_FEATURES
            && sample.x_so.len() == SOIL_FEATURES
            && sample.x_dem.len() == DEM_FEATURES;
        if !ok {
            return Err(Error::contract(format!("pixel {} does not match the 25/4/24/5 schema", sample.pixel_id)));
        }
        if sample.sa_days.is_empty() || sample.w_days.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(())
    }

    fn partials_of(&self, z: &[&Array; 4], row: usize) -> [f64; 4] {
        let d = self.hidden();
        std::array::from_fn(|m| {
            let w = self.head_weights(Modality::ALL[m]);
            z[m].data()[row * d..(row + 1) * d].iter().zip(w).map(|(a, b)| a * b).sum()
        })
    }

    /// Eval-mode predictions with partials and attention records.
    pub fn predict_many(&self, samples: &[&PixelSample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            chunk.iter().try_for_each(|s| Self::check(s))?;
            let batch = pad_batch(chunk)?;
            let mut ctx = Ctx::eval(&self.store);
            let f = self.forward(&mut ctx, &batch)?;
            let g = &ctx.g;
            let z: [&Array; 4] = std::array::from_fn(|m| g.value(f.z[m]));
            let yhat = g.value(f.yhat);
            let record = |m: Modality, b: usize| -> Option<AttentionRecord> {
                let enc = f.temporal(m)?;
                if enc.attention.is_empty() {
                    return None;
                }
                let vals: Vec<&Array> = enc.attention.iter().map(|&a| g.value(a)).collect();
                Some(AttentionRecord::from_batch(&vals, enc.row_of[b], self.config.encoder(m).heads, chunk[b].steps(m)))
            };
            for b in 0..chunk.len() {
                out.push(Prediction {
                    yhat: yhat.data()[b],
                    bias: self.bias(),
                    partials: self.partials_of(&z, b),
                    z: std::array::from_fn(|m| z[m].row(b).to_vec()),
                    satellite_attention: record(Modality::Satellite, b),
                    weather_attention: record(Modality::Weather, b),
                });
            }
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &PixelSample) -> Result<Prediction> {
        Ok(self.predict_many(&[sample])?.remove(0))
    }

    /// Eval-mode `ŷ` for each sample.
    pub fn predict_values(&self, samples: &[&PixelSample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            chunk.iter().try_for_each(|s| Self::check(s))?;
            let batch = pad_batch(chunk)?;
            let mut ctx = Ctx::eval(&self.store);
            let f = self.forward(&mut ctx, &batch)?;
            out.extend_from_slice(ctx.g.value(f.yhat).data());
        }
        Ok(out)
    }

    /// Partial output `w^m · z^m` of modality `m` alone, for each input.
    ///
    /// Temporal inputs are `(values, days)` pairs; static inputs pass an empty day slice.
    pub fn modality_partials(&self, m: Modality, inputs: &[(&[f64], &[u32])]) -> Result<Vec<f64>> {
        let enc = self.encoder(m);
        let f = m.features();
        let w = self.head_weights(m);
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let mut ctx = Ctx::eval(&self.store);
            let z = if m.is_temporal() {
                let batch = seq_batch(chunk, f)?;
                enc.encode_sequence(&mut ctx, &batch)?.h
            } else {
                let data = chunk.iter().flat_map(|(v, _)| v.iter().copied()).collect::<Vec<_>>();
                if data.len() != chunk.len() * f {
                    return Err(Error::contract(format!("{m} inputs must have {f} features")));
                }
                let x = ctx.g.constant(Array::new(vec![chunk.len(), f], data)?);
                enc.encode_static(&mut ctx, x)?
            };
            let z = ctx.g.value(z);
            for row in 0..chunk.len() {
                out.push(z.row(row).iter().zip(w).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }
}

/// Right-padded sequence batch of one temporal modality.
pub(crate) fn seq_batch(inputs: &[(&[f64], &[u32])], features: usize) -> Result<SeqBatch> {
    let steps = inputs.iter().map(|(_, d)| d.len()).max().unwrap_or(0);
    seq_batch_to(inputs, features, steps)
}

/// As [`seq_batch`], padded to `steps` (at least the longest input).
pub(crate) fn seq_batch_to(inputs: &[(&[f64], &[u32])], features: usize, steps: usize) -> Result<SeqBatch> {
    let steps = inputs.iter().map(|(_, d)| d.len()).max().unwrap_or(0).max(steps);
    let mut x = Vec::with_capacity(inputs.len() * steps * features);
    let mut days = Vec::with_capacity(inputs.len() * steps);
    let mut pad_row = vec![crate::data::PAD_VALUE; features];
    if features == SA_FEATURES {
        pad_row[crate::data::SA_BANDS..].iter_mut().for_each(|v| *v = 0.0);
        pad_row[crate::data::SA_BANDS + crate::data::SCL_PAD_CLASS] = 1.0;
    }
    for (v, d) in inputs {
        if v.len() != d.len() * features {
            return Err(Error::contract(format!("{} values for {} steps of {features} features", v.len(), d.len())));
        }
        x.extend_from_slice(v);
        days.extend(d.iter().map(|&n| n as f64));
        for _ in d.len()..steps {
            x.extend_from_slice(&pad_row);
            days.push(0.0);
        }
    }
    Ok(SeqBatch {
        x: Array::new(vec![inputs.len(), steps, features], x)?,
        days,
        lengths: inputs.iter().map(|(_, d)| d.len()).collect(),
        index: (0..inputs.len()).collect(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::data::SyntheticSpec;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig::with_temporal(EncoderKind::Transformer, 8, 2, 2, None).unwrap()
    }

    pub(crate) fn tiny_samples() -> Vec<PixelSample> {
        let spec = SyntheticSpec { farms: 1, fields_per_farm: 2, pixels_per_field: 4, years: vec![2020], t_sa: 6, t_w: 12, ..Default::default() };
        generate_synthetic(&spec).unwrap().samples
    }

    #[test]
    fn zero_weights_predict_the_bias() {
        let mut m = MultimodalModel::new(tiny_config(), 1).unwrap();
        for modality in Modality::ALL {
            m.head_weights_mut(modality).iter_mut().for_each(|w| *w = 0.0);
        }
        m.set_bias(3.5);
        let s = &tiny_samples()[0];
        let p = m.predict(s).unwrap();
        assert_eq!(p.yhat, 3.5);
        assert_eq!(p.partials, [0.0; 4]);
    }

    #[test]
    fn partials_add_up_to_the_prediction() {
        let m = MultimodalModel::new(tiny_config(), 2).unwrap();
        let samples = tiny_samples();
        let refs: Vec<&PixelSample> = samples.iter().collect();
        for p in m.predict_many(&refs).unwrap() {
            let sum: f64 = p.partials.iter().sum::<f64>() + p.bias;
            assert!((sum - p.yhat).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_and_single_predictions_agree() {
        let m = MultimodalModel::new(tiny_config(), 3).unwrap();
        let mut samples = tiny_samples();
        samples[1].sa_days.truncate(3);
        samples[1].x_sa.truncate(3 * SA_FEATURES);
        let refs: Vec<&PixelSample> = samples.iter().collect();
        let batched = m.predict_values(&refs).unwrap();
        for (s, b) in samples.iter().zip(&batched) {
            assert!((m.predict(s).unwrap().yhat - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modality_partials_match_full_prediction() {
        let m = MultimodalModel::new(tiny_config(), 4).unwrap();
        let samples = tiny_samples();
        let p = m.predict(&samples[0]).unwrap();
        for modality in Modality::ALL {
            let s = &samples[0];
            let v = m.modality_partials(modality, &[(s.values(modality), s.days(modality))]).unwrap();
            assert!((v[0] - p.partial(modality)).abs() < 1e-12);
        }
    }

    #[test]
    fn schema_mismatch_is_a_contract_error() {
        let m = MultimodalModel::new(tiny_config(), 5).unwrap();
        let mut s = tiny_samples().remove(0);
        s.x_so.push(0.0);
        assert!(matches!(m.predict(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_records_cover_each_layer() {
        let m = MultimodalModel::new(tiny_config(), 6).unwrap();
        let s = &tiny_samples()[0];
        let p = m.predict(s).unwrap();
        let rec = p.satellite_attention.unwrap();
        assert_eq!(rec.num_layers(), 2);
        assert_eq!(rec.layers[0].len(), 2);
        assert_eq!(rec.valid_steps, s.sa_steps());
    }

    #[test]
    fn encoder_kind_must_suit_the_modality() {
        let mut cfg = tiny_config();
        cfg.soil = EncoderConfig::lstm(SOIL_FEATURES, 8);
        assert!(MultimodalModel::new(cfg, 0).is_err());
    }
}
