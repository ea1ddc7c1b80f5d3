use rand::Rng;

use super::layers::{BatchNorm, Ctx, Linear, ParamStore};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numgrad::Var;

/// `Linear(2d → d) ∘ ReLU ∘ BatchNorm ∘ Linear(F → 2d)`.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub first: Linear,
    pub norm: BatchNorm,
    pub second: Linear,
}

impl MlpEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let wide = 2 * cfg.hidden;
        Self {
            cfg: cfg.clone(),
            name: name.to_string(),
            first: Linear::new(store, &format!("{name}.fc1"), cfg.input_dim, wide, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), wide),
            second: Linear::new(store, &format!("{name}.fc2"), wide, cfg.hidden, rng),
        }
    }

    /// `x` is `[B, F]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::contract(format!("mlp '{}' expects [B, {}], got {:?}", self.name, self.cfg.input_dim, shape)));
        }
        let a = self.first.forward(ctx, x)?;
        let a = self.norm.forward(ctx, a, None)?;
        let a = ctx.g.relu(a);
        self.second.forward(ctx, a)
    }
}
