//! Schedule, optimizer, training loop, checkpoints and evaluation.

mod common;

use std::collections::BTreeMap;
use std::fs;

use common::*;
use simtrans::checkpoint::Checkpoint;
use simtrans::config::{Ablation, TrainConfig};
use simtrans::params::ParamStore;
use simtrans::synth::Split;
use simtrans::tensor::Tensor;
use simtrans::train::{self, OutputFiles, EVAL_HEADER, METRICS_HEADER};
use simtrans::Error;

#[test]
fn learning_rate_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(train::lr_at(0, &cfg), 0.0);
    assert_eq!(train::lr_at(cfg.warmup_steps, &cfg), cfg.lr_init);
    assert!((train::lr_at(cfg.warmup_steps / 2, &cfg) - cfg.lr_init / 2.0).abs() < 1e-15);
    let last = train::lr_at(cfg.total_steps - 1, &cfg);
    assert!((0.0..cfg.lr_init * 1e-4).contains(&last), "{last}");
    let mid = (cfg.warmup_steps + cfg.total_steps) / 2;
    assert!((train::lr_at(mid, &cfg) - cfg.lr_init / 2.0).abs() < cfg.lr_init * 1e-3);
}

#[test]
fn learning_rate_is_monotone_after_warmup() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..cfg.total_steps).map(|s| train::lr_at(s, &cfg)).collect();
    assert!(lrs[..=cfg.warmup_steps].windows(2).all(|w| w[0] <= w[1]));
    assert!(lrs[cfg.warmup_steps..].windows(2).all(|w| w[0] >= w[1]));
}

fn one_param(values: &[f64]) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new([values.len()], values.to_vec()).unwrap());
    p
}

fn grads(values: &[f64]) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([("w".to_string(), values.to_vec())])
}

#[test]
fn zero_momentum_is_vanilla_sgd() {
    let mut p = one_param(&[1.0, -2.0]);
    let mut v = train::zero_buffers(&p);
    train::sgd_step(&mut p, &grads(&[0.5, 0.25]), &mut v, 0.1, 0.0).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    train::sgd_step(&mut p, &grads(&[1.0, 0.0]), &mut v, 0.1, 0.0).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.0 - 0.1 * 0.5 - 0.1, -2.0 - 0.1 * 0.25]);
}

#[test]
fn two_momentum_steps_follow_the_recurrence() {
    let (lr, m) = (0.05, 0.9);
    let (p0, g1, g2) = (0.7, 0.3, -0.2);
    let mut p = one_param(&[p0]);
    let mut v = train::zero_buffers(&p);
    train::sgd_step(&mut p, &grads(&[g1]), &mut v, lr, m).unwrap();
    train::sgd_step(&mut p, &grads(&[g2]), &mut v, lr, m).unwrap();
    let v2 = m * g1 + g2;
    assert!((v.get("w").unwrap().data()[0] - v2).abs() < 1e-15);
    assert!((p.get("w").unwrap().data()[0] - (p0 - lr * g1 - lr * v2)).abs() < 1e-15);
}

#[test]
fn missing_gradients_decay_the_buffers() {
    let mut p = one_param(&[1.0]);
    let mut v = one_param(&[2.0]);
    train::sgd_step(&mut p, &BTreeMap::new(), &mut v, 0.1, 0.5).unwrap();
    assert_eq!(v.get("w").unwrap().data(), &[1.0]);
    assert_eq!(p.get("w").unwrap().data(), &[0.9]);
}

#[test]
fn mismatched_gradient_length_is_rejected() {
    let mut p = one_param(&[1.0, 2.0]);
    let mut v = train::zero_buffers(&p);
    let err = train::sgd_step(&mut p, &grads(&[1.0]), &mut v, 0.1, 0.9).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn single_step_run_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 1,
        warmup_steps: 0,
        ..tiny_config()
    };
    let data = tiny_dataset();
    let out = train::train(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.evals.len(), 1);
    assert_eq!(out.metrics[0].lr, cfg.lr_init);
    let ckpt = Checkpoint::load(&dir.path().join(OutputFiles::CHECKPOINT)).unwrap();
    assert_eq!(ckpt.step, 1);
    assert_eq!(ckpt, out.checkpoint);
    assert_eq!(train::evaluate(&ckpt, &data.test).unwrap(), out.final_accuracy());
    let saved = TrainConfig::load(&dir.path().join(OutputFiles::CONFIG)).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let data = tiny_dataset();
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train::train(&cfg, &data, Some(a.path())).unwrap();
    train::train(&cfg, &data, Some(b.path())).unwrap();
    for file in [OutputFiles::METRICS, OutputFiles::EVALS, OutputFiles::CHECKPOINT] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let other = train::train(&TrainConfig { seed: 1, ..cfg }, &data, None).unwrap();
    let first = fs::read_to_string(a.path().join(OutputFiles::METRICS)).unwrap();
    assert_ne!(other.metrics_csv(), first);
}

#[test]
fn log_formats() {
    let out = train::train(&tiny_config(), &tiny_dataset(), None).unwrap();
    let metrics = out.metrics_csv();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 24);
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step, i);
        assert!(m.loss_ce.is_finite() && m.loss_cl >= 0.0);
        assert!((0.0..=1.0).contains(&m.batch_acc));
    }
    let evals = out.eval_csv();
    let rows: Vec<&str> = evals.lines().collect();
    assert_eq!(rows[0], EVAL_HEADER);
    let steps: Vec<usize> = out.evals.iter().map(|e| e.0).collect();
    assert_eq!(steps, [10, 20, 24]);
}

#[test]
fn disabled_contrastive_logs_zero() {
    let cfg = Ablation::WithSilMfbNoCl.apply(&tiny_config());
    let out = train::train(&cfg, &tiny_dataset(), None).unwrap();
    assert!(out.metrics.iter().all(|m| m.loss_cl == 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact_and_preserves_accuracy() {
    let data = tiny_dataset();
    let out = train::train(&tiny_config(), &data, None).unwrap();
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    for ((n1, t1), (n2, t2)) in out.checkpoint.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    assert_eq!(back.rng.restore(), out.checkpoint.rng.restore());
    assert_eq!(train::evaluate(&back, &data.test).unwrap(), out.final_accuracy());
}

#[test]
fn corrupted_checkpoints_are_format_errors() {
    let out = train::train(&TrainConfig { total_steps: 2, warmup_steps: 1, ..tiny_config() }, &tiny_dataset(), None).unwrap();
    let bytes = out.checkpoint.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
}

#[test]
fn evaluate_matches_a_recount() {
    let data = tiny_dataset();
    let out = train::train(&tiny_config(), &data, None).unwrap();
    let ckpt = &out.checkpoint;
    let cfg = ckpt.config.model(ckpt.classes).unwrap();
    let images: Vec<Tensor> = data.test.samples.iter().map(|s| s.to_tensor()).collect();
    let pred = train::predict(&ckpt.params, &cfg, &images, 5).unwrap();
    let correct = pred.iter().zip(&data.test.samples).filter(|(p, s)| **p == s.label).count();
    assert_eq!(train::evaluate(ckpt, &data.test).unwrap(), correct as f64 / 32.0);
    // Predictions used as labels are all correct.
    assert_eq!(train::accuracy_on(&ckpt.params, &cfg, &images, &pred, 7).unwrap(), 1.0);
    // Batch size does not change predictions.
    assert_eq!(train::predict(&ckpt.params, &cfg, &images, 32).unwrap(), pred);
}

#[test]
fn uniform_head_scores_chance() {
    let data = simtrans::synth::generate(&simtrans::synth::GenerateOptions {
        seed: 3,
        classes: 8,
        train: 16,
        test: 80,
        ..Default::default()
    })
    .unwrap();
    let out = train::train(&TrainConfig { total_steps: 1, warmup_steps: 0, ..tiny_config() }, &data, None).unwrap();
    let mut ckpt = out.checkpoint;
    ckpt.params.zero_prefix("head.");
    let acc = train::evaluate(&ckpt, &data.test).unwrap();
    assert!((acc - 0.125).abs() < 1e-12, "{acc}");
    assert_eq!(train::evaluate(&ckpt, &Split::default()).unwrap(), 0.0);
}

#[test]
fn divergence_aborts_with_the_step() {
    let cfg = TrainConfig {
        lr_init: 1e300,
        warmup_steps: 0,
        ..tiny_config()
    };
    match train::train(&cfg, &tiny_dataset(), None) {
        Err(Error::NonFiniteLoss { step }) => assert!(step > 0 && step < cfg.total_steps),
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn invalid_runs_are_config_errors() {
    let data = tiny_dataset();
    for cfg in [
        TrainConfig { warmup_steps: 24, ..tiny_config() },
        TrainConfig { batch_size: 65, ..tiny_config() },
        TrainConfig { image_size: 32, ..tiny_config() },
        TrainConfig { sil_layer_count: 4, ..tiny_config() },
    ] {
        assert!(matches!(train::train(&cfg, &data, None), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn ablation_table_lists_rows_in_order() {
    let data = tiny_dataset();
    let base = TrainConfig { total_steps: 4, warmup_steps: 1, ..tiny_config() };
    let table = train::run_ablation(&base, &data, &[0, 1], &Ablation::ALL).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.ablation.label()).collect();
    assert_eq!(
        labels,
        ["Baseline", "Baseline + SIL", "Baseline + SIL + MFB_without_CL", "Baseline + SIL + MFB"]
    );
    let csv = table.to_csv();
    assert_eq!(csv.lines().next(), Some("config,mean_acc,seed0,seed1"));
    assert_eq!(csv.lines().count(), 5);
    let mut ordering = table.observed_ordering();
    ordering.sort();
    let mut sorted = labels.clone();
    sorted.sort();
    assert_eq!(ordering, sorted);
    // A row is the mean of its seeds, each of which is an ordinary run.
    let full = table.row(Ablation::Full).unwrap();
    let single = train::train(&TrainConfig { seed: 1, ..Ablation::Full.apply(&base) }, &data, None).unwrap();
    assert_eq!(full.accuracies[1], single.final_accuracy());
    assert!((full.mean() - (full.accuracies[0] + full.accuracies[1]) / 2.0).abs() < 1e-15);
}

#[test]
fn ablation_rows_set_the_component_switches() {
    let base = TrainConfig::default();
    let switches: Vec<_> = Ablation::ALL
        .iter()
        .map(|a| {
            let c = a.apply(&base);
            (c.sil_layer_count, c.mfb_enabled, c.contrastive_enabled)
        })
        .collect();
    assert_eq!(switches, [(0, false, false), (1, false, false), (3, true, false), (3, true, true)]);
}
