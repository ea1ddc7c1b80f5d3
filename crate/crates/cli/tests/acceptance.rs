//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! console. Exits non-zero if any criterion fails. Criterion numbers given
//! as arguments (`cargo test --test acceptance -- 3 9`) restrict the run.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use yieldxai::analysis::{cart_fit, sample_pixels, weather_attr_table, DAYS_BEFORE_HARVEST};
use yieldxai::data::{generate_synthetic, split_dataset, Dataset, Modality, PixelSample, Split, SplitMode, SyntheticSpec, SA_FEATURES};
use yieldxai::encoders::AttentionRecord;
use yieldxai::model::{wma_relevance, ModelConfig, MultimodalModel};
use yieldxai::numgrad::Array;
use yieldxai::training::{self, normalize_for, TrainConfig};
use yieldxai::xai::{
    self, attention_rollout, cosine_similarity, infidelity, layer_entropies, max_sensitivity, rollout_matrix, shannon_entropy, shapley_exact, shapley_sampling,
    AttributionSeries, Baseline, ExplainConfig, Game, Method, ModalityGame, DEFAULT_RADIUS, DEFAULT_SENSITIVITY_DRAWS,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

/// Trained default model on the default synthetic dataset.
struct Fitted {
    model: MultimodalModel,
    /// Normalized test pixels.
    test: Vec<PixelSample>,
    baseline: Baseline,
    subfield_r2: f64,
    field_r2: f64,
    elapsed: Duration,
}

impl Fitted {
    fn new() -> yieldxai::Result<Self> {
        let start = Instant::now();
        let dataset = generate_synthetic(&SyntheticSpec::default())?;
        let split = split_dataset(&dataset.samples, SplitMode::Random, 0)?;
        let cfg = TrainConfig { batch_size: 256, ..TrainConfig::default() };
        let outcome = training::train(&ModelConfig::default(), &dataset.samples, &split, &cfg)?;
        let elapsed = start.elapsed();
        let model = outcome.model;
        let test_raw = dataset.subset(&split, Split::Test);
        let [subfield, field] = training::evaluate(&model, &test_raw)?;
        let test = normalize_for(&model, &test_raw);
        let train = normalize_for(&model, &dataset.subset(&split, Split::Train));
        let baseline = Baseline::from_samples(&train)?;
        Ok(Self { model, test, baseline, subfield_r2: subfield.r2, field_r2: field.r2, elapsed })
    }

    fn pixels(&self, n: usize, seed: u64) -> Vec<&PixelSample> {
        let refs: Vec<&PixelSample> = self.test.iter().collect();
        sample_pixels(&refs, n, seed)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for case in gradcheck::op_cases() {
        let e = (0..gradcheck::SEEDS).map(|s| gradcheck::check_op(&case, s)).fold(0.0, f64::max);
        check(e < gradcheck::REL_TOL, format!("{} relative error {e:e}", case.name))?;
        worst = worst.max(e);
    }
    let e = (0..gradcheck::SEEDS).map(gradcheck::check_transformer).fold(0.0, f64::max);
    check(e < gradcheck::REL_TOL, format!("transformer relative error {e:e}"))?;
    worst = worst.max(e);
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("max relative error {worst:.2e} over {} seeds in {:.1?}", gradcheck::SEEDS, start.elapsed()))
}

/// `v(S) = Σ_{t∈S} w_t·x_t + Σ_{t∉S} w_t·b_t`.
struct LinearGame {
    w: Vec<f64>,
    x: Vec<f64>,
    b: Vec<f64>,
}

impl LinearGame {
    fn random(t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        Self { w: draw(), x: draw(), b: draw() }
    }

    fn closed_form(&self) -> Vec<f64> {
        (0..self.w.len()).map(|t| self.w[t] * (self.x[t] - self.b[t])).collect()
    }
}

impl Game for LinearGame {
    fn players(&self) -> usize {
        self.w.len()
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> yieldxai::Result<Vec<f64>> {
        Ok(coalitions.iter().map(|c| (0..self.w.len()).map(|t| self.w[t] * if c[t] { self.x[t] } else { self.b[t] }).sum()).collect())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn svs_oracles(fit: &Fitted) -> Outcome {
    let start = Instant::now();
    let mut linear_err: f64 = 0.0;
    for seed in 0..20 {
        let g = LinearGame::random(8, seed);
        let phi = shapley_sampling(&g, 16, seed, 0).map_err(|e| e.to_string())?;
        for (a, b) in phi.iter().zip(g.closed_form()) {
            linear_err = linear_err.max((a - b).abs());
        }
    }
    check(linear_err <= 1e-12, format!("linear surrogate off by {linear_err:e}"))?;

    let (mut worst_eff, mut worst_rel): (f64, f64) = (0.0, 0.0);
    for (seed, p) in fit.pixels(10, 2).into_iter().enumerate() {
        let mut s = p.clone();
        s.sa_days.truncate(5);
        s.x_sa.truncate(5 * SA_FEATURES);
        check(s.sa_steps() == 5, "pixel has fewer than 5 acquisitions")?;
        let game = ModalityGame::new(&fit.model, &s, Modality::Satellite, &fit.baseline).map_err(|e| e.to_string())?;
        let exact = shapley_exact(&game).map_err(|e| e.to_string())?;
        let full = fit.model.predict(&s).map_err(|e| e.to_string())?.yhat;
        let masked = fit.model.predict(&fit.baseline.apply(&s, Modality::Satellite)).map_err(|e| e.to_string())?.yhat;
        worst_eff = worst_eff.max((exact.iter().sum::<f64>() - (full - masked)).abs());
        let sampled = shapley_sampling(&game, 256, seed as u64, 0).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = sampled.iter().zip(&exact).map(|(a, b)| a - b).collect();
        worst_rel = worst_rel.max(l2(&diff) / l2(&exact));
    }
    check(worst_eff <= 1e-9, format!("efficiency gap {worst_eff:e}"))?;
    check(worst_rel <= 0.05, format!("sampled vs exact relative l2 error {worst_rel:.4}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("linear {linear_err:.1e}, efficiency {worst_eff:.1e}, M=256 rel l2 {worst_rel:.4} on 10 pixels"))
}

type Dense = Vec<Vec<f64>>;

fn dense_mul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Dense {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn to_array(m: &Dense) -> Array {
    Array::new(vec![m.len(), m.len()], m.concat()).unwrap()
}

/// Dense product of head-averaged (optionally residual-mixed) layers, last layer leftmost.
fn rollout_oracle(layers: &[Vec<Dense>], residual: bool) -> Dense {
    let n = layers[0][0].len();
    let mut out: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for heads in layers {
        let mut a: Dense = (0..n).map(|i| (0..n).map(|j| heads.iter().map(|h| h[i][j]).sum::<f64>() / heads.len() as f64).collect()).collect();
        if residual {
            for (i, row) in a.iter_mut().enumerate() {
                row.iter_mut().for_each(|v| *v *= 0.5);
                row[i] += 0.5;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        out = dense_mul(&a, &out);
    }
    out
}

fn rollout() -> Outcome {
    let (mut err, mut row_dev): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Vec<Dense>> = (0..3).map(|_| (0..2).map(|_| random_stochastic(4, &mut rng)).collect()).collect();
        let record = AttentionRecord { layers: layers.iter().map(|h| h.iter().map(to_array).collect()).collect(), valid_steps: 3 };
        for residual in [false, true] {
            let got = rollout_matrix(&record, residual).map_err(|e| e.to_string())?;
            let want = rollout_oracle(&layers, residual);
            for (g, w) in got.data().iter().zip(want.concat()) {
                err = err.max((g - w).abs());
            }
            for r in 0..4 {
                row_dev = row_dev.max((got.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(err <= 1e-12, format!("rollout differs from the dense oracle by {err:e}"))?;
    check(row_dev <= 1e-9, format!("rollout row sums deviate by {row_dev:e}"))?;
    let eye = Array::eye(4);
    let identity = AttentionRecord { layers: vec![vec![eye.clone()]; 3], valid_steps: 3 };
    for residual in [false, true] {
        let s = attention_rollout(&identity, residual).map_err(|e| e.to_string())?;
        check(s.iter().all(|&v| v == 0.0), format!("identity attention gives {s:?}"))?;
    }
    Ok(format!("oracle gap {err:.1e}, row-sum deviation {row_dev:.1e}, identity scores all zero"))
}

fn infidelity_optimum() -> Outcome {
    let (mut at_exact, mut min_increase): (f64, f64) = (0.0, f64::INFINITY);
    for seed in 0..20 {
        let g = LinearGame::random(8, 100 + seed);
        let phi = shapley_exact(&g).map_err(|e| e.to_string())?;
        let base = infidelity(&g, &phi, 500, 0.5, seed).map_err(|e| e.to_string())?;
        at_exact = at_exact.max(base);
        for t in 0..8 {
            let mut off = phi.clone();
            off[t] += 0.01;
            let worse = infidelity(&g, &off, 500, 0.5, seed).map_err(|e| e.to_string())?;
            min_increase = min_increase.min(worse - base);
        }
    }
    check(at_exact <= 1e-18, format!("exact attributions score {at_exact:e}"))?;
    check(min_increase > 0.0, format!("a perturbed attribution did not increase infidelity ({min_increase:e})"))?;
    Ok(format!("exact {at_exact:.1e}, smallest increase from a perturbation {min_increase:.2e}"))
}

fn end_to_end(fit: &Fitted) -> Outcome {
    check(fit.subfield_r2 >= 0.80, format!("subfield R2 {:.4}", fit.subfield_r2))?;
    check(fit.field_r2 >= fit.subfield_r2, format!("field R2 {:.4} below subfield R2 {:.4}", fit.field_r2, fit.subfield_r2))?;
    within(fit.elapsed, Duration::from_secs(15 * 60))?;
    Ok(format!("subfield R2 {:.4}, field R2 {:.4}, data and training {:.0?}", fit.subfield_r2, fit.field_r2, fit.elapsed))
}

fn wma(fit: &Fitted) -> Outcome {
    let pixels = fit.pixels(1000, 6);
    check(pixels.len() == 1000, format!("only {} test pixels", pixels.len()))?;
    let (mut sum_gap, mut share_gap): (f64, f64) = (0.0, 0.0);
    let mut degenerate = 0;
    for p in &pixels {
        let pred = fit.model.predict(p).map_err(|e| e.to_string())?;
        sum_gap = sum_gap.max((pred.partials.iter().sum::<f64>() + pred.bias - pred.yhat).abs());
        match wma_relevance(&pred) {
            Ok(r) => share_gap = share_gap.max((r.shares.iter().sum::<f64>() - 1.0).abs()),
            Err(_) => degenerate += 1,
        }
    }
    check(sum_gap <= 1e-9, format!("partials miss the prediction by {sum_gap:e}"))?;
    check(share_gap <= 1e-9, format!("shares miss 1 by {share_gap:e}"))?;
    for m in Modality::ALL {
        let mut zeroed = fit.model.clone();
        zeroed.head_weights_mut(m).fill(0.0);
        for p in pixels.iter().take(50) {
            let r = wma_relevance(&zeroed.predict(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            check(r.shares[m.index()] == 0.0, format!("{m} share {} with zeroed weights", r.shares[m.index()]))?;
        }
    }
    Ok(format!("sum gap {sum_gap:.1e}, share gap {share_gap:.1e}, {degenerate} degenerate of 1000, zeroed modalities get share 0"))
}

fn entropies(fit: &Fitted) -> Outcome {
    let max = 100f64.ln();
    let mut all = vec![];
    let cfg = ExplainConfig { permutations: 16, ..ExplainConfig::default() };
    for p in fit.pixels(20, 7) {
        let pred = fit.model.predict(p).map_err(|e| e.to_string())?;
        for m in [Modality::Satellite, Modality::Weather] {
            let record = pred.attention(m).ok_or("missing attention record")?;
            all.extend(layer_entropies(record).map_err(|e| e.to_string())?);
            for method in Method::ALL {
                let a = xai::explain(&fit.model, p, m, method, &fit.baseline, &cfg).map_err(|e| e.to_string())?;
                all.push(shannon_entropy(&a.scores).map_err(|e| e.to_string())?);
            }
        }
    }
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| (lo.min(h), hi.max(h)));
    check(lo >= 0.0 && hi <= max, format!("entropies span [{lo}, {hi}]"))?;
    let single = shannon_entropy(&[0.42; 9]).map_err(|e| e.to_string())?;
    check(single == 0.0, format!("single-bin fixture gives {single}"))?;
    let four = shannon_entropy(&[0.005, 0.255, 0.505, 0.755, 0.006, 0.256, 0.506, 0.756]).map_err(|e| e.to_string())?;
    check((four - 4f64.ln()).abs() <= 1e-12, format!("4-bin fixture gives {four}"))?;
    Ok(format!("{} entropies in [{lo:.4}, {hi:.4}], fixtures 0 and ln 4", all.len()))
}

fn weather_constancy(fit: &Fitted) -> Outcome {
    let mut fields: BTreeMap<(u32, i32), Vec<&PixelSample>> = BTreeMap::new();
    for p in &fit.test {
        fields.entry((p.field_id, p.year)).or_default().push(p);
    }
    let cfg = ExplainConfig { permutations: 16, ..ExplainConfig::default() };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for pixels in fields.values().take(6) {
        for method in Method::ALL {
            let series: Vec<AttributionSeries> = pixels
                .iter()
                .take(8)
                .map(|p| xai::explain(&fit.model, p, Modality::Weather, method, &fit.baseline, &cfg))
                .collect::<yieldxai::Result<_>>()
                .map_err(|e| e.to_string())?;
            for s in &series[1..] {
                let c = cosine_similarity(&series[0].scores, &s.scores).map_err(|e| e.to_string())?;
                worst = worst.max((1.0 - c).abs());
                checked += 1;
            }
        }
    }
    check(worst <= 1e-9, format!("weather cosine deviates from 1 by {worst:e}"))?;
    Ok(format!("{checked} same-field pairs across ar, ga and svs, max |1 - cos| {worst:.1e}"))
}

fn cart_recovery() -> Outcome {
    let spec = SyntheticSpec { farms: 1, fields_per_farm: 2, pixels_per_field: 10, years: vec![2020], t_w: 260, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let refs: Vec<&PixelSample> = data.samples.iter().collect();
    let series: Vec<AttributionSeries> = refs
        .iter()
        .map(|s| {
            let harvest = s.harvest_day().unwrap();
            let scores = s.w_days.iter().map(|d| if (207..=213).contains(&(harvest - d)) { 0.017 } else { 0.0 }).collect();
            AttributionSeries::new(Method::Svs, Modality::Weather, s, scores)
        })
        .collect::<yieldxai::Result<_>>()
        .map_err(|e| e.to_string())?;
    let table = weather_attr_table(&refs, &series, 0).map_err(|e| e.to_string())?;
    let tree = cart_fit(&table.train, 2).map_err(|e| e.to_string())?;
    let mut splits = tree.root.thresholds();
    splits.sort_by(|a, b| a.1.total_cmp(&b.1));
    check(splits == [(DAYS_BEFORE_HARVEST, 206.5), (DAYS_BEFORE_HARVEST, 213.5)], format!("splits {splits:?}"))?;
    for (row, &y) in table.train.rows.iter().chain(&table.test.rows).zip(table.train.targets.iter().chain(&table.test.targets)) {
        // Leaf means of repeated 0.017 carry summation rounding.
        check((tree.predict(row) - y).abs() <= 1e-15, format!("predicts {} for target {y}", tree.predict(row)))?;
    }
    let mse: Vec<f64> = (1..=3).map(|d| cart_fit(&table.train, d).map(|t| t.mse(&table.train))).collect::<yieldxai::Result<_>>().map_err(|e| e.to_string())?;
    check(mse.windows(2).all(|w| w[1] <= w[0]), format!("train MSE by depth {mse:?}"))?;
    Ok(format!("depth 2 splits days_before_harvest at 206.5 and 213.5 with leaf 0.017, train MSE by depth {mse:?}"))
}

/// Each field keeps a seeded random 50-100% of its pixels; sequences are dropped.
fn uneven_fields(data: &Dataset, seed: u64) -> Vec<PixelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: BTreeMap<u32, f64> = BTreeMap::new();
    data.samples
        .iter()
        .filter(|s| {
            let p = *keep.entry(s.field_id).or_insert_with(|| rng.gen_range(0.5..=1.0));
            rng.gen_bool(p)
        })
        .map(|s| PixelSample { sa_days: vec![], x_sa: vec![], w_days: vec![], x_w: vec![], ..s.clone() })
        .collect()
}

fn splits(data: &Dataset) -> Outcome {
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for seed in 0..200 {
        let samples = uneven_fields(data, seed);
        let total = samples.len() as f64;
        let a = split_dataset(&samples, SplitMode::Random, seed).map_err(|e| e.to_string())?;
        let mut of_field: BTreeMap<u32, Split> = BTreeMap::new();
        let mut counts = [0usize; 3];
        for s in &samples {
            let k = a.split_of(s).ok_or("unassigned pixel")?;
            check(*of_field.entry(s.field_id).or_insert(k) == k, format!("field {} spans splits (seed {seed})", s.field_id))?;
            counts[Split::ALL.iter().position(|&x| x == k).unwrap()] += 1;
        }
        for (k, target) in [0.6, 0.2, 0.2].into_iter().enumerate() {
            let share = counts[k] as f64 / total;
            check((share - target).abs() <= 0.05, format!("{} holds {share:.3} (seed {seed})", Split::ALL[k].name()))?;
            lo[k] = lo[k].min(share);
            hi[k] = hi[k].max(share);
        }
        let years: Vec<i32> = samples.iter().map(|s| s.year).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let year = years[seed as usize % years.len()];
        let a = split_dataset(&samples, SplitMode::LeaveOneYearOut { year }, seed).map_err(|e| e.to_string())?;
        for s in &samples {
            let want = if s.year == year { Split::Val } else { Split::Train };
            check(a.split_of(s) == Some(want), format!("leave-one-year-out {year} misplaces pixel {}", s.pixel_id))?;
        }
        let farm = seed as u32 % 4;
        let a = split_dataset(&samples, SplitMode::LeaveOneFarmOut { farm }, seed).map_err(|e| e.to_string())?;
        for s in &samples {
            let want = if s.farm_id == farm { Split::Val } else { Split::Train };
            check(a.split_of(s) == Some(want), format!("leave-one-farm-out {farm} misplaces pixel {}", s.pixel_id))?;
        }
    }
    let range = |k: usize| format!("{:.3}..{:.3}", lo[k], hi[k]);
    Ok(format!("200 seeds with uneven fields; train {}, val {}, test {}; held-out groups exact", range(0), range(1), range(2)))
}

const BIN: &str = env!("CARGO_BIN_EXE_yieldxai");

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).current_dir(dir).args(args).env_remove("YIELDXAI_THREADS").output().map_err(|e| e.to_string())?;
    check(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    out
}

fn determinism() -> Outcome {
    let data = ["--farms", "2", "--fields-per-farm", "3", "--pixels-per-field", "16", "--years", "2020,2021", "--t-sa", "8", "--t-w", "20"];
    let model = ["--max-epochs", "3", "--hidden", "8", "--layers", "2", "--heads", "2"];
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for dir in &runs {
        let d = dir.path();
        cli(d, &[&["gen-data", "--seed", "11", "--out", "data"][..], &data].concat())?;
        cli(d, &[&["train", "--seed", "11", "--data", "data", "--out", "run"][..], &model].concat())?;
        for method in ["ar", "ga", "svs"] {
            cli(d, &["explain", "--seed", "11", "--data", "data", "--model", "run/model.ymck", "--method", method, "--permutations", "8", "--out", method])?;
        }
    }
    let mut compared = 0;
    for sub in ["data", "run", "ar", "ga", "svs"] {
        let (a, b) = (files(&runs[0].path().join(sub)), files(&runs[1].path().join(sub)));
        check(!a.is_empty() && a == b, format!("{sub} outputs differ"))?;
        compared += a.len();
    }
    Ok(format!("{compared} files byte-identical across two gen-data, train and explain runs"))
}

fn robustness(fit: &Fitted) -> Outcome {
    let cfg = ExplainConfig::default();
    let mut means = vec![];
    for method in [Method::Ar, Method::Ga] {
        let mut total = 0.0;
        let pixels = fit.pixels(20, 12);
        for p in &pixels {
            let attribute = |x: &PixelSample| xai::explain(&fit.model, x, Modality::Satellite, method, &fit.baseline, &cfg).map(|a| a.scores);
            total += max_sensitivity(attribute, p, Modality::Satellite, DEFAULT_RADIUS, DEFAULT_SENSITIVITY_DRAWS, 0).map_err(|e| e.to_string())?;
        }
        means.push(total / pixels.len() as f64);
    }
    let msg = format!("mean max-sensitivity ar {:.4e}, ga {:.4e} over 20 pixels", means[0], means[1]);
    check(means[0] <= means[1], msg.clone())?;
    Ok(msg)
}

static FITTED: OnceLock<Result<Fitted, String>> = OnceLock::new();

fn fit() -> Result<&'static Fitted, String> {
    FITTED.get_or_init(|| Fitted::new().map_err(|e| format!("training failed: {e}"))).as_ref().map_err(Clone::clone)
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradients),
        ("svs oracle equivalence", || svs_oracles(fit()?)),
        ("attention rollout", rollout),
        ("infidelity optimum", infidelity_optimum),
        ("end-to-end synthetic fit", || end_to_end(fit()?)),
        ("wma identity", || wma(fit()?)),
        ("entropy bounds and fixtures", || entropies(fit()?)),
        ("weather-field constancy", || weather_constancy(fit()?)),
        ("cart recovery", cart_recovery),
        ("split invariants", || splits(&generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?)),
        ("determinism", determinism),
        ("robustness ranking", || robustness(fit()?)),
    ];
    // Numeric arguments select criteria; anything else is ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{:.0?}]", i + 1, start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{:.0?}]", i + 1, start.elapsed());
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
