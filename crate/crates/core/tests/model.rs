//! Whole-network behaviour, including reduction to the plain backbone.

mod common;

use common::*;
use rand::Rng;
use simtrans::config::TrainConfig;
use simtrans::model::{self, ModelConfig};
use simtrans::params::{Binder, ParamStore};
use simtrans::sil;
use simtrans::tensor::{Graph, Tensor};
use simtrans::Error;

fn setup(sil_layer_count: usize, mfb: bool) -> (ModelConfig, ParamStore, Tensor, usize) {
    let tc = TrainConfig {
        sil_layer_count,
        mfb_enabled: mfb,
        ..tiny_config()
    };
    let cfg = tc.model(5).unwrap();
    let mut r = rng(21);
    let mut store = model::init_params(&cfg, &mut r).unwrap();
    // Move away from the near-zero head so outputs are not trivially close.
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    let images: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[64, 64, 3], 0.0, 1.0)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    (cfg.clone(), store, model::patch_batch(&refs, &cfg.backbone).unwrap(), 3)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn run(cfg: &ModelConfig, store: &ParamStore, patches: &Tensor, batch: usize) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let mut binder = Binder::new(store, false);
    let p = g.constant(patches.clone());
    let fp = model::forward(&mut g, &mut binder, cfg, p, batch, false).unwrap();
    (g.value(fp.logits).clone(), g.value(fp.pred).clone())
}

#[test]
fn disabled_structure_learning_is_the_plain_backbone() {
    let (cfg, store, patches, batch) = setup(0, false);
    assert!(cfg.sil_layers.is_empty());
    let (logits, pred) = run(&cfg, &store, &patches, batch);
    let (l2, p2) = plain_vit(&cfg, &store, &patches, batch);
    assert_eq!(bits(&logits), bits(&l2));
    assert_eq!(bits(&pred), bits(&p2));
}

#[test]
fn zero_graph_weights_leave_outputs_unchanged() {
    for mfb in [false, true] {
        let (cfg, mut store, patches, batch) = setup(3, mfb);
        for &k in &cfg.sil_layers {
            let (w1, w2) = sil::gcn_param_names(k, cfg.share_gcn);
            store.get_mut(&w1).unwrap().data_mut().fill(0.0);
            store.get_mut(&w2).unwrap().data_mut().fill(0.0);
        }
        let plain = ModelConfig {
            sil_layers: vec![],
            ..cfg.clone()
        };
        let (l1, _) = run(&cfg, &store, &patches, batch);
        let (l2, _) = run(&plain, &store, &patches, batch);
        assert_eq!(bits(&l1), bits(&l2), "mfb = {mfb}");
    }
}

#[test]
fn nonzero_graph_weights_change_outputs() {
    let (cfg, store, patches, batch) = setup(3, true);
    let plain = ModelConfig {
        sil_layers: vec![],
        ..cfg.clone()
    };
    let (l1, _) = run(&cfg, &store, &patches, batch);
    let (l2, _) = run(&plain, &store, &patches, batch);
    assert_ne!(bits(&l1), bits(&l2));
}

#[test]
fn images_in_a_batch_are_independent() {
    let (cfg, store, patches, batch) = setup(3, true);
    let (logits, _) = run(&cfg, &store, &patches, batch);
    let n = cfg.backbone.grid.len();
    for b in 0..batch {
        let one = Tensor::new(
            [n, patches.cols()],
            patches.data()[b * n * patches.cols()..(b + 1) * n * patches.cols()].to_vec(),
        )
        .unwrap();
        let (single, _) = run(&cfg, &store, &one, 1);
        for (x, y) in single.data().iter().zip(logits.row(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_level_features_concatenate_last_three_cls_tokens() {
    let (cfg, store, patches, batch) = setup(3, true);
    let mut g = Graph::new();
    let mut binder = Binder::new(&store, false);
    let p = g.constant(patches);
    let fp = model::forward(&mut g, &mut binder, &cfg, p, batch, true).unwrap();
    assert_eq!(g.shape(fp.features), &[batch, 3 * cfg.backbone.width]);
    let d = cfg.backbone.width;
    for b in 0..batch {
        let f = g.value(fp.features).row(b);
        for (j, &layer) in fp.layer_cls.iter().enumerate() {
            assert_eq!(&f[j * d..(j + 1) * d], g.value(layer).row(b));
        }
    }
    assert_eq!(fp.structure.keys().copied().collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(fp.records[&3].len(), batch);
}

#[test]
fn shared_graph_convolution_has_one_weight_pair() {
    let tc = TrainConfig {
        share_gcn: true,
        ..tiny_config()
    };
    let cfg = tc.model(4).unwrap();
    let store = model::init_params(&cfg, &mut rng(0)).unwrap();
    let gcn: Vec<&str> = store.iter().map(|(n, _)| n).filter(|n| n.starts_with("sil")).collect();
    assert_eq!(gcn, ["sil.w1", "sil.w2"]);
}

#[test]
fn invalid_models_are_config_errors() {
    let (cfg, _, _, _) = setup(3, true);
    let bad = [
        ModelConfig { classes: 1, ..cfg.clone() },
        ModelConfig { sil_layers: vec![4], ..cfg.clone() },
        ModelConfig { sil_layers: vec![0], ..cfg.clone() },
        ModelConfig { gcn_hidden: 0, ..cfg.clone() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let shallow = TrainConfig { depth: 2, sil_layer_count: 2, ..tiny_config() };
    assert!(matches!(shallow.model(4), Err(Error::Config(_))));
}

#[test]
fn patch_batch_rejects_wrong_image_size() {
    let (cfg, _, _, _) = setup(0, false);
    let img = Tensor::zeros([32, 32, 3]);
    assert!(matches!(model::patch_batch(&[&img], &cfg.backbone), Err(Error::Dimension { .. })));
}
