//! Central-difference gradient checks shared by the test targets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yieldxai::encoders::{Ctx, Encoder, EncoderConfig, ParamStore, SeqBatch};
use yieldxai::numgrad::{Array, Graph, KeyMask, Var};
use yieldxai::Result;

pub const SEEDS: u64 = 100;
pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f64, f64),
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), range: (-1.5, 1.5), build: Box::new(build) }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random(shape: &[usize], range: (f64, f64), rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(range.0..range.1)).collect()).unwrap()
}

/// Every differentiable graph operation, each reduced later by a random projection.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("add_bias", &[&[2, 3, 4], &[4]], |g, x| g.add_bias(x[0], x[1])),
        case("scale", &[&[3, 4]], |g, x| Ok(g.scale(x[0], -2.5))),
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("batch_matmul", &[&[2, 3, 4], &[2, 4, 3]], |g, x| g.batch_matmul(x[0], x[1])),
        case("transpose", &[&[2, 3, 4]], |g, x| g.transpose(x[0])),
        case("permute", &[&[2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1])),
        case("reshape", &[&[2, 3, 4]], |g, x| g.reshape(x[0], &[6, 4])),
        case("concat", &[&[2, 3, 4], &[2, 1, 4]], |g, x| g.concat(&[x[0], x[1]], 1)),
        case("slice", &[&[2, 5, 3]], |g, x| g.slice(x[0], 1, 1, 4)),
        case("gather", &[&[4, 3]], |g, x| g.gather(x[0], Arc::new(vec![2, 0, 2, 3]))),
        case("broadcast_rows", &[&[3, 2]], |g, x| Ok(g.broadcast_rows(x[0], 3))),
        case("exp", &[&[3, 4]], |g, x| Ok(g.exp(x[0]))),
        case("tanh", &[&[3, 4]], |g, x| Ok(g.tanh(x[0]))),
        case("sigmoid", &[&[3, 4]], |g, x| Ok(g.sigmoid(x[0]))),
        case("relu", &[&[3, 4]], |g, x| Ok(g.relu(x[0]))),
        case("softmax", &[&[3, 5]], |g, x| g.softmax(x[0], None)),
        case("masked_softmax", &[&[2, 3, 4]], |g, x| {
            let padded = Arc::new(vec![false, false, false, false, false, false, true, true]);
            g.softmax(x[0], Some(&KeyMask { padded, rows_per_entry: 3 }))
        }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |g, x| g.layer_norm(x[0], x[1], x[2])),
        case("batch_norm_train", &[&[6, 3], &[3], &[3]], |g, x| Ok(g.batch_norm_train(x[0], x[1], x[2], Some(vec![true, true, false, true, true, true]))?.0)),
        case("batch_norm_eval", &[&[4, 3], &[3], &[3]], |g, x| g.batch_norm_eval(x[0], x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.8])),
        case("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[3, 4]], |g, x| Ok(g.mean(x[0]))),
        case("dropout", &[&[3, 4]], |g, x| g.dropout(x[0], 0.3, &mut ChaCha8Rng::seed_from_u64(11))),
    ];
    let mut log = case("log", &[&[3, 4]], |g, x| g.log(x[0]));
    log.range = (0.2, 2.0);
    v.push(log);
    v
}

/// `Σ w ⊙ f(inputs)` and its input gradients.
fn project(case: &OpCase, inputs: &[Array], w: &mut Option<Array>, rng: &mut ChaCha8Rng) -> (f64, Vec<Array>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let shape = g.value(out).shape().to_vec();
    let weights = w.get_or_insert_with(|| random(&shape, (-1.0, 1.0), rng)).clone();
    let wv = g.constant(weights);
    let prod = g.mul(out, wv).unwrap();
    let root = g.sum(prod);
    let value = g.value(root).item().unwrap();
    g.backward(root).unwrap();
    let grads = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(g.value(v).shape()))).collect();
    (value, grads)
}

/// Largest relative error between analytic and central-difference gradients for one seed.
pub fn check_op(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Array> = case.shapes.iter().map(|s| random(s, case.range, &mut rng)).collect();
    let mut w = None;
    let (_, grads) = project(case, &inputs, &mut w, &mut rng);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                project(case, &shifted, &mut w, &mut rng).0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[i].data()[j], numeric));
        }
    }
    worst
}

/// One-layer Transformer encoder with `T = 3` steps and width 4, two rows (one padded).
pub fn transformer_fixture(seed: u64) -> (Encoder, ParamStore, SeqBatch, Array) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { dropout: 0.0, ..EncoderConfig::transformer(2, 4, 1, 2) };
    let enc = Encoder::new(&cfg, &mut store, "enc", &mut rng).unwrap();
    let mut x = random(&[2, 3, 2], (-1.0, 1.0), &mut rng);
    x.data_mut()[10..].iter_mut().for_each(|v| *v = -1.0);
    let days = vec![rng.gen_range(0.0..50.0), rng.gen_range(50.0..100.0), rng.gen_range(100.0..150.0), 10.0, 40.0, 0.0];
    let batch = SeqBatch { x, days, lengths: vec![3, 2], index: vec![0, 1] };
    let w = random(&[2, 4], (-1.0, 1.0), &mut rng);
    (enc, store, batch, w)
}

fn encoder_value(enc: &Encoder, store: &ParamStore, batch: &SeqBatch, w: &Array) -> (f64, Vec<Option<Array>>) {
    let mut ctx = Ctx::eval(store);
    let out = enc.encode_sequence(&mut ctx, batch).unwrap();
    let wv = ctx.g.constant(w.clone());
    let prod = ctx.g.mul(out.h, wv).unwrap();
    let root = ctx.g.sum(prod);
    let value = ctx.g.value(root).item().unwrap();
    ctx.g.backward(root).unwrap();
    (value, ctx.param_grads())
}

/// Largest relative error over every parameter of the Transformer fixture.
pub fn check_transformer(seed: u64) -> f64 {
    let (enc, mut store, batch, w) = transformer_fixture(seed);
    let (_, grads) = encoder_value(&enc, &store, &batch, &w);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (id, grad) in ids.into_iter().zip(grads) {
        let grad = grad.expect("every parameter is used");
        for j in 0..grad.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let up = encoder_value(&enc, &store, &batch, &w).0;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let down = encoder_value(&enc, &store, &batch, &w).0;
            store.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}
