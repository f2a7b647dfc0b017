//! SGD training loop, learning-rate schedule, evaluation and ablations.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::mfb;
use crate::model::{self, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::synth::{Dataset, Split};
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: &str = "step,lr,loss_ce,loss_cl,batch_acc";
pub const EVAL_HEADER: &str = "eval_step,test_acc";

/// Linear warmup from 0 to `lr_init`, then cosine annealing towards 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < warm {
        return cfg.lr_init * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr_init * 0.5 * (1.0 + (PI * progress).cos())
}

/// Classic momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    buffers: &mut ParamStore,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let v = buffers.get_mut(name)?;
        if v.numel() != p.numel() {
            return Err(Error::dim("sgd_step", p.shape(), v.shape()));
        }
        match grads.get(name) {
            Some(g) => {
                if g.len() != p.numel() {
                    return Err(Error::dim("sgd_step", p.shape(), &[g.len()]));
                }
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                    *vi = momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
            None => {
                for (pi, vi) in p.data_mut().iter_mut().zip(v.data_mut()) {
                    *vi *= momentum;
                    *pi -= lr * *vi;
                }
            }
        }
    }
    Ok(())
}

/// Zeroed momentum buffers matching `params`.
pub fn zero_buffers(params: &ParamStore) -> ParamStore {
    let mut buffers = params.clone();
    buffers.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
    buffers
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_cl: f64,
    pub batch_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    /// `(step, test accuracy)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub elapsed: Duration,
}

impl TrainOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.evals.last().map_or(0.0, |e| e.1)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for m in &self.metrics {
            writeln!(out, "{},{},{},{},{}", m.step, m.lr, m.loss_ce, m.loss_cl, m.batch_acc).expect("string write");
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for (step, acc) in &self.evals {
            writeln!(out, "{step},{acc}").expect("string write");
        }
        out
    }
}

/// Sequential minibatches over seeded per-epoch permutations. A final
/// partial batch is dropped and the next epoch starts.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.cursor + batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + batch];
        self.cursor += batch;
        out
    }
}

/// Paths written by [`train`] when given an output directory.
pub struct OutputFiles;

impl OutputFiles {
    pub const CHECKPOINT: &'static str = "model.ckpt";
    pub const METRICS: &'static str = "metrics.csv";
    pub const EVALS: &'static str = "eval.csv";
    pub const CONFIG: &'static str = "config.txt";
}

/// Trains from scratch. With `out_dir`, the checkpoint is written at every
/// evaluation and the CSV logs at the end; on a non-finite loss the run
/// aborts with the step number and the last written checkpoint stays.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let model_cfg = cfg.model(data.classes)?;
    if data.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} images, fewer than one batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    check_image_size(&data.train, cfg)?;
    check_image_size(&data.test, cfg)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(OutputFiles::CONFIG), cfg.to_text())?;
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model::init_params(&model_cfg, &mut rng)?;
    let mut buffers = zero_buffers(&params);
    let train_images: Vec<Tensor> = data.train.samples.iter().map(|s| s.to_tensor()).collect();
    let test_images: Vec<Tensor> = data.test.samples.iter().map(|s| s.to_tensor()).collect();
    let mut sampler = BatchSampler::new(train_images.len());
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    let mut evals = Vec::new();
    let snapshot = |params: &ParamStore, buffers: &ParamStore, rng: &ChaCha8Rng, step: usize| Checkpoint {
        config: cfg.clone(),
        classes: data.classes,
        params: params.clone(),
        momentum: buffers.clone(),
        rng: RngState::capture(rng),
        step: step as u64,
    };

    for step in 0..cfg.total_steps {
        let idx = sampler.next(cfg.batch_size, &mut rng).to_vec();
        let images: Vec<&Tensor> = idx.iter().map(|&i| &train_images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.samples[i].label).collect();

        let mut g = Graph::new();
        let mut binder = Binder::new(&params, true);
        let patches = g.constant(model::patch_batch(&images, &model_cfg.backbone)?);
        let fp = model::forward(&mut g, &mut binder, &model_cfg, patches, images.len(), false)
            .map_err(|e| match e {
                Error::Numeric(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
        let (loss, report) = model::loss(&mut g, &fp, &labels, cfg.loss())?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(loss)?;
        let grads = binder.grads(&g);
        drop(binder);
        let lr = lr_at(step, cfg);
        sgd_step(&mut params, &grads, &mut buffers, lr, cfg.momentum)?;
        metrics.push(StepMetrics {
            step,
            lr,
            loss_ce: report.ce,
            loss_cl: report.cl,
            batch_acc: report.batch_accuracy,
        });
        debug!(
            "step {step} lr {lr:.5} ce {:.4} cl {:.4} acc {:.3} filtered {}",
            report.ce, report.cl, report.batch_accuracy, report.n_filtered_negatives
        );

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let acc = accuracy_on(&params, &model_cfg, &test_images, &data.test.labels(), cfg.eval_batch)?;
            info!("step {done}: test accuracy {acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());
            evals.push((done, acc));
            if let Some(dir) = out_dir {
                snapshot(&params, &buffers, &rng, done).save(&dir.join(OutputFiles::CHECKPOINT))?;
            }
        }
    }

    let out = TrainOutput {
        checkpoint: snapshot(&params, &buffers, &rng, cfg.total_steps),
        metrics,
        evals,
        elapsed: start.elapsed(),
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join(OutputFiles::METRICS), out.metrics_csv())?;
        fs::write(dir.join(OutputFiles::EVALS), out.eval_csv())?;
    }
    Ok(out)
}

fn check_image_size(split: &Split, cfg: &TrainConfig) -> Result<()> {
    match split.image_size() {
        Some((h, w)) if h != cfg.image_size || w != cfg.image_size => Err(Error::Config(format!(
            "images are {h}x{w} but image_size is {}",
            cfg.image_size
        ))),
        _ => Ok(()),
    }
}

/// Top-1 predictions for a list of images.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, images: &[Tensor], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut binder = Binder::new(params, false);
        let patches = g.constant(model::patch_batch(&refs, &cfg.backbone)?);
        let fp = model::forward(&mut g, &mut binder, cfg, patches, refs.len(), false)?;
        let pred = g.value(fp.pred);
        out.extend((0..pred.rows()).map(|r| mfb::argmax(pred.row(r))));
    }
    Ok(out)
}

/// `|correct| / |images|`.
pub fn accuracy_on(
    params: &ParamStore,
    cfg: &ModelConfig,
    images: &[Tensor],
    labels: &[usize],
    batch: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(params, cfg, images, batch)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / images.len() as f64)
}

/// Test accuracy of a checkpoint on a split.
pub fn evaluate(ckpt: &Checkpoint, split: &Split) -> Result<f64> {
    let cfg = ckpt.config.model(ckpt.classes)?;
    let images: Vec<Tensor> = split.samples.iter().map(|s| s.to_tensor()).collect();
    accuracy_on(&ckpt.params, &cfg, &images, &split.labels(), ckpt.config.eval_batch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Final test accuracy per seed.
    pub accuracies: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,mean_acc");
        for s in &self.seeds {
            write!(out, ",seed{s}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:.4}", r.ablation.label(), r.mean()).expect("string write");
            for a in &r.accuracies {
                write!(out, ",{a:.4}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<34} {:>9}\n", "Method", "Acc (%)");
        for r in &self.rows {
            writeln!(out, "{:<34} {:>9.2}", r.ablation.label(), 100.0 * r.mean()).expect("string write");
        }
        out
    }

    /// Row labels from best to worst mean accuracy.
    pub fn observed_ordering(&self) -> Vec<&'static str> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.mean().total_cmp(&a.mean()));
        rows.iter().map(|r| r.ablation.label()).collect()
    }
}

/// Trains `rows` (in the given order) for each seed and collects final test accuracies.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, seeds: &[u64], rows: &[Ablation]) -> Result<AblationTable> {
    let mut out = Vec::with_capacity(rows.len());
    for &ablation in rows {
        let mut accuracies = Vec::with_capacity(seeds.len());
        let mut seconds = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..ablation.apply(base)
            };
            let run = train(&cfg, data, None)?;
            info!("{} seed {seed}: {:.4}", ablation.label(), run.final_accuracy());
            accuracies.push(run.final_accuracy());
            seconds.push(run.elapsed.as_secs_f64());
        }
        out.push(AblationRow {
            ablation,
            accuracies,
            seconds,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows: out,
    })
}
