//! Parameter storage, the forward context, and the basic layers shared by all encoders.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numgrad::{Array, BatchStats, Graph, Var};

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable parameters plus non-trainable buffers, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Array>>,
    buffer_names: Vec<String>,
    buffers: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn arc(&self, id: ParamId) -> Arc<Array> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Array {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Array {
        &mut self.buffers[id.0]
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffer_names[id.0]
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    /// Mutable access to every parameter, for optimizer steps.
    pub fn values_mut(&mut self) -> Vec<&mut Array> {
        self.values.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = &Array> {
        self.values.iter().map(|v| v.as_ref())
    }
}

/// Additive perturbation of one recorded attention matrix, applied after the softmax.
#[derive(Clone, Debug)]
pub struct AttentionEdit {
    pub encoder: String,
    pub layer: usize,
    /// Same shape as the attention node, `[B·H, T+1, T+1]`.
    pub delta: Array,
}

/// One forward (and optionally backward) evaluation.
pub struct Ctx<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub train: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<(BufferId, BufferId, BatchStats)>,
    pub attention_edits: Vec<AttentionEdit>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, train: bool, rng: ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            train,
            rng,
            bn_updates: vec![],
            attention_edits: vec![],
        }
    }

    pub fn eval(params: &'a ParamStore) -> Self {
        use rand::SeedableRng;
        Self::new(params, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.params.arc(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Graph node bound to a parameter, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        self.g.dropout(x, p, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Gradients of every parameter after `g.backward`, `None` when unused.
    pub fn param_grads(&mut self) -> Vec<Option<Array>> {
        let g = &mut self.g;
        self.bound.iter().map(|b| b.and_then(|v| g.take_grad(v))).collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BufferId, BufferId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    fn attention_edit(&self, encoder: &str, layer: usize) -> Option<&Array> {
        self.attention_edits.iter().find(|e| e.encoder == encoder && e.layer == layer).map(|e| &e.delta)
    }

    pub(crate) fn apply_attention_edit(&mut self, encoder: &str, layer: usize, attn: Var) -> Result<Var> {
        match self.attention_edit(encoder, layer).cloned() {
            Some(delta) => {
                let d = self.g.constant(delta);
                self.g.add(attn, d)
            }
            None => Ok(attn),
        }
    }
}

/// Applies collected batch-norm statistics to running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(BufferId, BufferId, BatchStats)]) {
    for (mean_id, var_id, stats) in updates {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, b) in store.buffer_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.buffer_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("consistent")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let b = store.add(format!("{name}.bias"), uniform(&[out_dim], bound, rng));
        Self { w, b, in_dim, out_dim }
    }

    /// Applies to the trailing axis of `x`, any leading shape.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.value(x).shape().to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(format!("linear expects trailing dim {}, got {:?}", self.in_dim, shape)));
        }
        let rows = ctx.g.value(x).len() / self.in_dim;
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let x2 = if shape.len() == 2 { x } else { ctx.g.reshape(x, &[rows, self.in_dim])? };
        let y = ctx.g.matmul(x2, w)?;
        let y = ctx.g.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        if out_shape.len() == 2 {
            Ok(y)
        } else {
            ctx.g.reshape(y, &out_shape)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Array::zeros(&[dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Array::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Array::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Array::full(&[dim], 1.0)),
        }
    }

    /// `x` is `[N, C]`; in training mode only `included` rows feed the statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, included: Option<Vec<bool>>) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm_train(x, g, b, included)?;
            ctx.bn_updates.push((self.running_mean, self.running_var, stats));
            Ok(y)
        } else {
            let mean = ctx.params().buffer(self.running_mean).data().to_vec();
            let var = ctx.params().buffer(self.running_var).data().to_vec();
            ctx.g.batch_norm_eval(x, g, b, &mean, &var)
        }
    }
}
