//! The full network: backbone, structure modules on selected layers, and the
//! (optionally multi-level) classifier head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::{self, append_patches, AttentionRecord, BackboneConfig};
use crate::error::{Error, Result};
use crate::mfb::{self, LossReport};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::sil::{self, FilteredAttention};
use crate::tensor::{Graph, Tensor, Var};

/// Number of trailing layers whose cls tokens are concatenated.
pub const MULTI_LEVEL_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    /// 1-based layers that carry a structure module.
    pub sil_layers: Vec<usize>,
    /// Concatenate the last three cls tokens instead of using the last one.
    pub mfb: bool,
    pub gcn_hidden: usize,
    /// One graph convolution shared by all structure layers.
    pub share_gcn: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let depth = self.backbone.depth;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if let Some(&k) = self.sil_layers.iter().find(|&&k| k == 0 || k > depth) {
            return Err(Error::Config(format!("structure layer {k} outside 1..={depth}")));
        }
        if !self.sil_layers.is_empty() && self.backbone.grid.len() < 2 {
            return Err(Error::Config("structure learning needs at least 2 patches".into()));
        }
        if self.mfb && depth < MULTI_LEVEL_LAYERS {
            return Err(Error::Config(format!(
                "multi-level features need at least {MULTI_LEVEL_LAYERS} layers, got {depth}"
            )));
        }
        if self.gcn_hidden == 0 {
            return Err(Error::Config("gcn hidden width must be positive".into()));
        }
        Ok(())
    }

    /// The last `count` layers, in increasing order.
    pub fn last_layers(depth: usize, count: usize) -> Vec<usize> {
        (depth + 1 - count.min(depth)..=depth).collect()
    }

    pub fn feature_width(&self) -> usize {
        if self.mfb {
            MULTI_LEVEL_LAYERS * self.backbone.width
        } else {
            self.backbone.width
        }
    }

    fn head_layers(&self) -> Vec<usize> {
        if self.mfb {
            Self::last_layers(self.backbone.depth, MULTI_LEVEL_LAYERS)
        } else {
            vec![self.backbone.depth]
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    backbone::init_backbone(&mut store, &cfg.backbone, rng);
    for &k in &cfg.sil_layers {
        let names = sil::gcn_param_names(k, cfg.share_gcn);
        if !store.contains(&names.0) {
            sil::init_gcn(&mut store, &names, cfg.gcn_hidden, cfg.backbone.width, rng);
        }
    }
    store.insert("head.w", trunc_normal(rng, &[cfg.feature_width(), cfg.classes], 0.02));
    store.insert("head.b", Tensor::zeros([cfg.classes]));
    Ok(store)
}

/// Stacks the patch matrices of `H×W×3` images into `[batch * N, 3P²]`.
pub fn patch_batch(images: &[&Tensor], cfg: &BackboneConfig) -> Result<Tensor> {
    let grid = &cfg.grid;
    let mut out = Vec::with_capacity(images.len() * grid.len() * grid.patch_dim());
    for img in images {
        let expected = [grid.image_h, grid.image_w, 3];
        if img.shape() != expected {
            return Err(Error::dim("patch_batch", img.shape(), &expected));
        }
        append_patches(img.data(), grid, &mut out);
    }
    Tensor::new([images.len() * grid.len(), grid.patch_dim()], out)
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub pred: Var,
    /// Classifier input, `[batch, feature_width]`.
    pub features: Var,
    /// cls rows of every layer after any structure injection, `[batch, width]` each.
    pub layer_cls: Vec<Var>,
    /// Thresholded attention per structure layer, one entry per image.
    pub structure: BTreeMap<usize, Vec<FilteredAttention>>,
    /// Attention weights per structure layer, one record per image. Only
    /// filled when capture was requested.
    pub records: BTreeMap<usize, Vec<AttentionRecord>>,
}

/// Runs the network on a `[batch * N, 3P²]` patch matrix.
pub fn forward(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &ModelConfig,
    patches: Var,
    batch: usize,
    capture: bool,
) -> Result<ForwardPass> {
    let bb = &cfg.backbone;
    let tokens = bb.grid.tokens();
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let mut z = backbone::embed(g, binder, bb, patches, batch)?;
    let mut layer_cls = Vec::with_capacity(bb.depth);
    let mut structure = BTreeMap::new();
    let mut records = BTreeMap::new();
    for k in 1..=bb.depth {
        let (out, probs) = backbone::encoder_layer(g, binder, bb, k, z, batch)?;
        z = out;
        if cfg.sil_layers.contains(&k) {
            if capture {
                let recs = (0..batch)
                    .map(|b| AttentionRecord::from_batch(k, g.value(probs), b))
                    .collect::<Result<Vec<_>>>()?;
                records.insert(k, recs);
            }
            let names = sil::gcn_param_names(k, cfg.share_gcn);
            let s = sil::structure_features(g, binder, &names, probs, &bb.grid)?;
            z = sil::inject(g, z, s.features, batch)?;
            structure.insert(k, s.filtered);
        }
        layer_cls.push(g.gather_rows(z, &cls_rows)?);
    }
    let head_inputs: Vec<Var> = cfg.head_layers().iter().map(|&k| layer_cls[k - 1]).collect();
    let features = mfb::multi_level_features(g, &head_inputs)?;
    let w = binder.bind(g, "head.w")?;
    let b = binder.bind(g, "head.b")?;
    let (logits, pred) = mfb::classify(g, features, w, b)?;
    Ok(ForwardPass {
        logits,
        pred,
        features,
        layer_cls,
        structure,
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub contrastive: bool,
    pub alpha: f64,
}

/// Builds the training objective on top of a forward pass.
pub fn loss(g: &mut Graph, fp: &ForwardPass, labels: &[usize], cfg: LossConfig) -> Result<(Var, LossReport)> {
    let ce = mfb::cross_entropy(g, fp.pred, labels)?;
    let batch_accuracy = mfb::accuracy(g.value(fp.pred), labels);
    let (total, cl, n_filtered_negatives) = if cfg.contrastive {
        let (cl, filtered) = mfb::contrastive_loss(g, fp.features, labels, cfg.alpha)?;
        (mfb::total_loss(g, ce, cl)?, g.value(cl).item(), filtered)
    } else {
        (ce, 0.0, 0)
    };
    let report = LossReport {
        ce: g.value(ce).item(),
        cl,
        total: g.value(total).item(),
        n_filtered_negatives,
        batch_accuracy,
    };
    Ok((total, report))
}
