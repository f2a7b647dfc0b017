//! Helpers shared by the integration suites: random inputs, independently
//! written reference implementations, and the finite-difference suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simtrans::backbone::{self, BackboneConfig, PatchGrid};
use simtrans::mfb;
use simtrans::params::{Binder, ParamStore};
use simtrans::sil;
use simtrans::tensor::gradcheck::{self, DEFAULT_STEP};
use simtrans::tensor::{Graph, Tensor, Var};
use simtrans::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const CASES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Reference implementations, written directly from the formulas.
// ---------------------------------------------------------------------------

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Cosine similarity written out term by term.
pub fn naive_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Double-loop contrastive loss over feature rows: positives `1 - sim`,
/// negatives `max(0, alpha + sim - avg_pos) * sim`, anchors without positives
/// use `avg_pos = 0`, total divided by `B²`.
pub fn naive_contrastive(rows: &[Vec<f64>], labels: &[usize], alpha: f64) -> f64 {
    let b = rows.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut pos_sum = 0.0;
        let mut gamma = 0usize;
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                pos_sum += naive_cosine(&rows[i], &rows[j]);
                gamma += 1;
            }
        }
        let avg_pos = if gamma == 0 { 0.0 } else { pos_sum / gamma as f64 };
        for j in 0..b {
            if j == i {
                continue;
            }
            let s = naive_cosine(&rows[i], &rows[j]);
            if labels[j] == labels[i] {
                total += 1.0 - s;
            } else {
                let ind = alpha + s - avg_pos;
                if ind > 0.0 {
                    total += ind * s;
                }
            }
        }
    }
    total / (b * b) as f64
}

/// Multi-head self-attention with one explicit loop per head, for a single
/// image `z` of shape `t × d`.
pub fn naive_msa(z: &[f64], t: usize, d: usize, heads: usize, p: &BTreeMap<&str, Vec<f64>>) -> Vec<f64> {
    let proj = |w: &str, b: &str| -> Vec<f64> {
        let mut y = naive_matmul(z, &p[w], t, d, d);
        for r in 0..t {
            for c in 0..d {
                y[r * d + c] += p[b][c];
            }
        }
        y
    };
    let (q, k, v) = (proj("q.w", "q.b"), proj("k.w", "k.b"), proj("v.w", "v.b"));
    let dh = d / heads;
    let mut ctx = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let zsum: f64 = e.iter().sum();
            for j in 0..t {
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += e[j] / zsum * v[j * d + h * dh + c];
                }
            }
        }
    }
    let mut out = naive_matmul(&ctx, &p["o.w"], t, d, d);
    for r in 0..t {
        for c in 0..d {
            out[r * d + c] += p["o.b"][c];
        }
    }
    out
}

/// Indices whose value is strictly above the mean, recounted from scratch.
pub fn recount_support(a: &[f64]) -> Vec<usize> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    (0..a.len()).filter(|&i| a[i] > mean).collect()
}

// ---------------------------------------------------------------------------
// Finite-difference suites. Each returns the worst relative error over
// `CASES` random shapes and seeds.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl SuiteResult {
    pub fn passes(&self) -> bool {
        self.cases >= CASES && self.worst < GRAD_TOL
    }
}

fn weighted_sum(g: &mut Graph, x: Var, weights: Tensor) -> Result<Var> {
    let w = g.constant(weights);
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn run_suite(name: &'static str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> SuiteResult {
    let mut worst: f64 = 0.0;
    for c in 0..CASES {
        let mut r = rng(seed * 1000 + c as u64);
        let err = case(&mut r).expect("gradient case builds");
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    SuiteResult {
        name,
        cases: CASES,
        worst,
    }
}

pub fn matmul_suite() -> SuiteResult {
    run_suite("matmul", 1, |r| {
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = uniform(r, &[m, k], -1.0, 1.0);
        let b = uniform(r, &[k, n], -1.0, 1.0);
        let w = uniform(r, &[m, n], -1.0, 1.0);
        let res = gradcheck::check(&[a, b], DEFAULT_STEP, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, w.clone())
        })?;
        Ok(res.max_error)
    })
}

pub fn softmax_suite() -> SuiteResult {
    run_suite("softmax", 2, |r| {
        let (rows, cols) = (r.random_range(1..5), r.random_range(2..7));
        let x = uniform(r, &[rows, cols], -3.0, 3.0);
        let w = uniform(r, &[rows, cols], -1.0, 1.0);
        let res = gradcheck::check(&[x], DEFAULT_STEP, |g, v| {
            let y = g.softmax_rows(v[0])?;
            weighted_sum(g, y, w.clone())
        })?;
        Ok(res.max_error)
    })
}

pub fn layer_norm_suite() -> SuiteResult {
    run_suite("layer norm", 3, |r| {
        let (rows, cols) = (r.random_range(1..5), r.random_range(2..8));
        let x = uniform(r, &[rows, cols], -2.0, 2.0);
        let gamma = uniform(r, &[cols], 0.5, 1.5);
        let beta = uniform(r, &[cols], -0.5, 0.5);
        let w = uniform(r, &[rows, cols], -1.0, 1.0);
        let res = gradcheck::check(&[x, gamma, beta], DEFAULT_STEP, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(g, y, w.clone())
        })?;
        Ok(res.max_error)
    })
}

pub fn gelu_suite() -> SuiteResult {
    run_suite("gelu", 4, |r| {
        let (rows, cols) = (r.random_range(1..5), r.random_range(1..7));
        let x = uniform(r, &[rows, cols], -4.0, 4.0);
        let w = uniform(r, &[rows, cols], -1.0, 1.0);
        let res = gradcheck::check(&[x], DEFAULT_STEP, |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, w.clone())
        })?;
        Ok(res.max_error)
    })
}

/// Largest relative error between backward-mode gradients of every
/// parameter in `store` (and of `inputs`) and central differences.
pub fn check_with_params<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &mut Binder<'_>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor], grads: bool| -> Result<(f64, BTreeMap<String, Vec<f64>>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store, grads);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let loss = build(&mut g, &mut binder, &vars)?;
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, BTreeMap::new(), Vec::new()));
        }
        g.backward(loss)?;
        let input_grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, binder.grads(&g), input_grads))
    };
    let (_, param_grads, input_grads) = eval(store, inputs, true)?;
    let h = DEFAULT_STEP;
    let mut worst: f64 = 0.0;
    let mut record = |a: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    };
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let Some(analytic) = param_grads.get(name) else { continue };
        for i in 0..analytic.len() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&work, inputs, false)?.0;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&work, inputs, false)?.0;
            work.get_mut(name)?.data_mut()[i] = orig;
            record(analytic[i], plus, minus);
        }
    }
    let mut moved = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = inputs[k].data()[i];
            moved[k].data_mut()[i] = orig + h;
            let plus = eval(store, &moved, false)?.0;
            moved[k].data_mut()[i] = orig - h;
            let minus = eval(store, &moved, false)?.0;
            moved[k].data_mut()[i] = orig;
            record(analytic[i], plus, minus);
        }
    }
    Ok(worst)
}

/// A small randomized encoder-layer configuration and its parameters.
pub fn small_layer(r: &mut ChaCha8Rng) -> (BackboneConfig, ParamStore) {
    let heads = r.random_range(1..3);
    let width = heads * r.random_range(2..4);
    let side = r.random_range(2..4);
    let cfg = BackboneConfig {
        grid: PatchGrid::new(side * 2, side * 2, 2, 2).unwrap(),
        width,
        heads,
        ffn_width: r.random_range(3..8),
        depth: 1,
        ln_eps: 1e-6,
    };
    let mut store = ParamStore::new();
    backbone::init_backbone(&mut store, &cfg, r);
    // Move away from the tiny default initialization so every path carries
    // a generic, non-degenerate signal.
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    (cfg, store)
}

pub fn attention_layer_suite() -> SuiteResult {
    run_suite("attention layer", 5, |r| {
        let (cfg, store) = small_layer(r);
        let batch = r.random_range(1..3);
        let t = cfg.grid.tokens();
        let z = uniform(r, &[batch * t, cfg.width], -1.0, 1.0);
        let w = uniform(r, &[batch * t, cfg.width], -1.0, 1.0);
        check_with_params(&store, &[z], |g, binder, v| {
            let (out, _) = backbone::encoder_layer(g, binder, &cfg, 1, v[0], batch)?;
            weighted_sum(g, out, w.clone())
        })
    })
}

/// Attention weights `[batch, heads, t, t]` whose cls rows have every patch
/// at least `margin` away from the row mean and a unique maximum, so that
/// finite-difference steps never move the threshold or the reference.
pub fn attention_logits_with_margin(r: &mut ChaCha8Rng, batch: usize, heads: usize, t: usize, margin: f64) -> Tensor {
    loop {
        let logits = uniform(r, &[batch * heads * t, t], -2.0, 2.0);
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let p = g.softmax_rows(x).unwrap();
        let probs = g.value(p).clone().reshaped([batch, heads, t, t]).unwrap();
        let ok = (0..batch).all(|b| {
            let mut a = vec![0.0; t - 1];
            for h in 0..heads {
                let off = ((b * heads + h) * t) * t;
                for i in 0..t - 1 {
                    a[i] += probs.data()[off + 1 + i];
                }
            }
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let mut sorted = a.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            a.iter().all(|v| (v - mean).abs() > margin) && sorted[0] - sorted[1] > margin
        });
        if ok {
            return logits;
        }
    }
}

pub fn gcn_suite() -> SuiteResult {
    run_suite("gcn", 6, |r| {
        let side = r.random_range(2..4);
        let grid = PatchGrid::new(side, side + 1, 1, 1).unwrap();
        let (batch, heads) = (r.random_range(1..3), r.random_range(1..3));
        let t = grid.tokens();
        let width = r.random_range(2..5);
        let hidden = r.random_range(2..5);
        let names = sil::gcn_param_names(1, false);
        let mut store = ParamStore::new();
        store.insert(names.0.clone(), uniform(r, &[sil::NODE_FEATURES, hidden], -1.0, 1.0));
        store.insert(names.1.clone(), uniform(r, &[hidden, width], -1.0, 1.0));
        let logits = attention_logits_with_margin(r, batch, heads, t, 1e-3);
        let w = uniform(r, &[batch, width], -1.0, 1.0);
        check_with_params(&store, &[logits], |g, binder, v| {
            let p = g.softmax_rows(v[0])?;
            let probs = g.reshape(p, &[batch, heads, t, t])?;
            let out = sil::structure_features(g, binder, &names, probs, &grid)?;
            weighted_sum(g, out.features, w.clone())
        })
    })
}

pub fn cross_entropy_suite() -> SuiteResult {
    run_suite("cross entropy", 7, |r| {
        let (b, c) = (r.random_range(1..6), r.random_range(2..6));
        let logits = uniform(r, &[b, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let res = gradcheck::check(&[logits], DEFAULT_STEP, |g, v| {
            let p = g.softmax_rows(v[0])?;
            mfb::cross_entropy(g, p, &labels)
        })?;
        Ok(res.max_error)
    })
}

/// Feature rows whose every negative pair has `|Indicator| > margin` and
/// whose indicator stays on one side of the kink.
pub fn contrastive_point(r: &mut ChaCha8Rng, b: usize, dim: usize, classes: usize, alpha: f64, margin: f64) -> (Tensor, Vec<usize>) {
    loop {
        let x = uniform(r, &[b, dim], -1.0, 1.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..classes)).collect();
        let rows: Vec<Vec<f64>> = (0..b).map(|i| x.row(i).to_vec()).collect();
        let ok = (0..b).all(|i| {
            let pos: Vec<f64> = (0..b)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| naive_cosine(&rows[i], &rows[j]))
                .collect();
            let avg = if pos.is_empty() { 0.0 } else { pos.iter().sum::<f64>() / pos.len() as f64 };
            (0..b)
                .filter(|&j| labels[j] != labels[i])
                .all(|j| (alpha + naive_cosine(&rows[i], &rows[j]) - avg).abs() > margin)
        });
        if ok {
            return (x, labels);
        }
    }
}

pub fn contrastive_suite() -> SuiteResult {
    run_suite("contrastive", 8, |r| {
        let b = r.random_range(2..7);
        let dim = r.random_range(2..6);
        let (x, labels) = contrastive_point(r, b, dim, 3, 0.3, 1e-3);
        let res = gradcheck::check(&[x], DEFAULT_STEP, |g, v| Ok(mfb::contrastive_loss(g, v[0], &labels, 0.3)?.0))?;
        Ok(res.max_error)
    })
}

pub fn all_gradient_suites() -> Vec<SuiteResult> {
    vec![
        matmul_suite(),
        softmax_suite(),
        layer_norm_suite(),
        gelu_suite(),
        attention_layer_suite(),
        gcn_suite(),
        cross_entropy_suite(),
        contrastive_suite(),
    ]
}

/// A model small enough to train for a few dozen steps in a test.
pub fn tiny_config() -> simtrans::config::TrainConfig {
    simtrans::config::TrainConfig {
        total_steps: 24,
        warmup_steps: 4,
        batch_size: 8,
        width: 16,
        heads: 2,
        ffn_width: 32,
        depth: 3,
        gcn_hidden: 8,
        eval_every: 10,
        eval_batch: 16,
        ..Default::default()
    }
}

/// 64 training and 32 test images over 4 classes.
pub fn tiny_dataset() -> simtrans::synth::Dataset {
    simtrans::synth::generate(&simtrans::synth::GenerateOptions {
        seed: 3,
        classes: 4,
        train: 64,
        test: 32,
        ..Default::default()
    })
    .unwrap()
}

/// Embedding, encoder layers, last cls row, linear head, softmax — built
/// directly from the backbone pieces.
pub fn plain_vit(cfg: &simtrans::model::ModelConfig, store: &ParamStore, patches: &Tensor, batch: usize) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let mut binder = Binder::new(store, false);
    let p = g.constant(patches.clone());
    let mut z = backbone::embed(&mut g, &mut binder, &cfg.backbone, p, batch).unwrap();
    for k in 1..=cfg.backbone.depth {
        z = backbone::encoder_layer(&mut g, &mut binder, &cfg.backbone, k, z, batch).unwrap().0;
    }
    let t = cfg.backbone.grid.tokens();
    let cls = g.gather_rows(z, &(0..batch).map(|b| b * t).collect::<Vec<_>>()).unwrap();
    let w = g.constant(store.get("head.w").unwrap().clone());
    let b = g.constant(store.get("head.b").unwrap().clone());
    let logits = g.matmul(cls, w).unwrap();
    let logits = g.add_tiled(logits, b).unwrap();
    let pred = g.softmax_rows(logits).unwrap();
    (g.value(logits).clone(), g.value(pred).clone())
}
