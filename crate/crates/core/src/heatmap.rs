//! Attention heatmaps of structure-equipped layers.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model;
use crate::params::Binder;
use crate::pgm::GrayImage;
use crate::sil::{self, FilteredAttention};
use crate::tensor::{Graph, Tensor};

/// Gray level of a map whose values are all equal.
pub const FLAT_LEVEL: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layer: usize,
    pub filtered: FilteredAttention,
    /// Head-summed cls attention, one pixel per patch (`n_h × n_w`).
    pub raw: GrayImage,
    /// The thresholded attention on the same scale as `raw`.
    pub thresholded: GrayImage,
}

/// Maps `values` to gray levels with `lo -> 0` and `hi -> 255`; anything
/// above `lo` gets at least level 1. A degenerate range maps everything to
/// [`FLAT_LEVEL`].
fn scale(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                let level = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
                if v > lo {
                    level.max(1)
                } else {
                    level
                }
            } else {
                FLAT_LEVEL
            }
        })
        .collect()
}

/// Renders both maps from thresholded attention on the raw attention's
/// min/max scale: the reference patch is at 255, thresholding only zeroes
/// pixels, and the nonzero thresholded pixels are exactly the patches above
/// the mean. When every patch has the same attention the raw map is flat
/// mid-gray and the thresholded map is black.
pub fn render_maps(layer: usize, fa: FilteredAttention, n_h: usize, n_w: usize) -> Result<AttentionMaps> {
    if fa.a.len() != n_h * n_w {
        return Err(Error::dim("heatmap", &[n_h, n_w], &[fa.a.len()]));
    }
    let lo = fa.a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fa.a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = scale(&fa.a, lo, hi);
    let kept = levels
        .iter()
        .zip(fa.mask())
        .map(|(&p, keep)| if keep { p } else { 0 })
        .collect();
    Ok(AttentionMaps {
        layer,
        raw: GrayImage::new(n_w, n_h, levels)?,
        thresholded: GrayImage::new(n_w, n_h, kept)?,
        filtered: fa,
    })
}

/// Runs `ckpt` on one `H×W×3` image and renders the attention of `layer`,
/// which must carry a structure module.
pub fn attention_maps(ckpt: &Checkpoint, image: &Tensor, layer: usize) -> Result<AttentionMaps> {
    let cfg = ckpt.config.model(ckpt.classes)?;
    if !cfg.sil_layers.contains(&layer) {
        return Err(Error::Config(format!(
            "layer {layer} has no structure module; attention is captured on layers {:?}",
            cfg.sil_layers
        )));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(&ckpt.params, false);
    let patches = g.constant(model::patch_batch(&[image], &cfg.backbone)?);
    let fp = model::forward(&mut g, &mut binder, &cfg, patches, 1, true)?;
    let record = &fp.records[&layer][0];
    let fa = sil::threshold(&sil::aggregate_cls_attention(record)?);
    render_maps(layer, fa, cfg.backbone.grid.n_h, cfg.backbone.grid.n_w)
}
