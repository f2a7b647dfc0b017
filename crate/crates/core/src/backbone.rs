//! Patch tokenization, embedding and the post-norm transformer encoder.
//!
//! Token matrices are laid out as `[batch * tokens, width]` with image `b`
//! occupying rows `b * tokens .. (b + 1) * tokens` and its cls token first.
//! Heads are contiguous slices of the width axis: head `h` owns columns
//! `h * width / heads .. (h + 1) * width / heads`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::tensor::{gemm, softmax_in_place, CustomOp, Graph, Operand, Tensor, Var};

/// Spatial layout of sliding-window patches over an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub stride: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || patch > image_h || patch > image_w {
            return Err(Error::Config(format!(
                "invalid patch grid: image {image_h}x{image_w}, patch {patch}, stride {stride}"
            )));
        }
        Ok(Self {
            image_h,
            image_w,
            patch,
            stride,
            n_h: (image_h - patch) / stride + 1,
            n_w: (image_w - patch) / stride + 1,
        })
    }

    /// Number of patch tokens.
    pub fn len(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens per image, including cls.
    pub fn tokens(&self) -> usize {
        self.len() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// `(row, col)` of a flat patch index.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.n_w, index % self.n_w)
    }
}

/// Splits an `H×W×3` image into the `N×(3P²)` matrix of flattened windows.
/// Row `i * n_w + j` is the window at pixel offset `(i * S, j * S)`, flattened
/// in `(dy, dx, channel)` order.
pub fn split_patches(image: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let expected = [grid.image_h, grid.image_w, 3];
    if image.shape() != expected {
        return Err(Error::dim("split_patches", image.shape(), &expected));
    }
    let mut out = Vec::with_capacity(grid.len() * grid.patch_dim());
    append_patches(image.data(), grid, &mut out);
    Tensor::new([grid.len(), grid.patch_dim()], out)
}

pub(crate) fn append_patches(pixels: &[f64], grid: &PatchGrid, out: &mut Vec<f64>) {
    let row_len = grid.image_w * 3;
    let window = grid.patch * 3;
    for i in 0..grid.n_h {
        for j in 0..grid.n_w {
            let (y0, x0) = (i * grid.stride, j * grid.stride);
            for dy in 0..grid.patch {
                let start = (y0 + dy) * row_len + x0 * 3;
                out.extend_from_slice(&pixels[start..start + window]);
            }
        }
    }
}

/// Shape hyperparameters of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub grid: PatchGrid,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub depth: usize,
    pub ln_eps: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.ffn_width == 0 {
            return Err(Error::Config("depth and ffn width must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

pub(crate) fn layer_param(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

/// Width at which encoder weights use the usual 0.02 standard deviation.
pub const REFERENCE_WIDTH: usize = 768;

/// Standard deviation of encoder-layer weights: 0.02 at [`REFERENCE_WIDTH`],
/// growing as `1/sqrt(width)` below it so a narrow encoder keeps the same
/// per-layer signal gain. Without this, a 64-wide encoder starts with cls
/// features that are nearly identical across images and plain SGD takes
/// thousands of steps to leave that regime.
pub fn layer_init_std(width: usize) -> f64 {
    0.02 * (REFERENCE_WIDTH as f64 / width as f64).sqrt()
}

/// Adds freshly initialized backbone parameters to `store`: truncated normal
/// weights (std 0.02 for the patch projection and position embeddings,
/// [`layer_init_std`] inside the encoder layers), zero biases and cls token,
/// unit layer-norm gains.
pub fn init_backbone<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) {
    let d = cfg.width;
    let std = layer_init_std(d);
    store.insert("embed.proj.w", trunc_normal(rng, &[cfg.grid.patch_dim(), d], 0.02));
    store.insert("embed.proj.b", Tensor::zeros([d]));
    store.insert("embed.cls", Tensor::zeros([d]));
    store.insert("embed.pos", trunc_normal(rng, &[cfg.grid.tokens(), d], 0.02));
    for k in 1..=cfg.depth {
        for proj in ["q", "k", "v", "o"] {
            store.insert(layer_param(k, &format!("{proj}.w")), trunc_normal(rng, &[d, d], std));
            store.insert(layer_param(k, &format!("{proj}.b")), Tensor::zeros([d]));
        }
        store.insert(layer_param(k, "ffn1.w"), trunc_normal(rng, &[d, cfg.ffn_width], std));
        store.insert(layer_param(k, "ffn1.b"), Tensor::zeros([cfg.ffn_width]));
        store.insert(layer_param(k, "ffn2.w"), trunc_normal(rng, &[cfg.ffn_width, d], std));
        store.insert(layer_param(k, "ffn2.b"), Tensor::zeros([d]));
        for ln in ["ln1", "ln2"] {
            store.insert(layer_param(k, &format!("{ln}.gamma")), Tensor::full([d], 1.0));
            store.insert(layer_param(k, &format!("{ln}.beta")), Tensor::zeros([d]));
        }
    }
}

/// `z0 = [cls; F(patch_1); ...; F(patch_N)] + E_p` for every image of the batch.
pub fn embed(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &BackboneConfig,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let n = cfg.grid.len();
    if g.shape(patches) != [batch * n, cfg.grid.patch_dim()] {
        return Err(Error::dim("embed", g.shape(patches), &[batch * n, cfg.grid.patch_dim()]));
    }
    let w = binder.bind(g, "embed.proj.w")?;
    let b = binder.bind(g, "embed.proj.b")?;
    let cls = binder.bind(g, "embed.cls")?;
    let pos = binder.bind(g, "embed.pos")?;
    let projected = g.linear(patches, w, b)?;
    let tokens = assemble_tokens(g, cls, projected, batch)?;
    g.add_tiled(tokens, pos)
}

/// Interleaves one cls row in front of each image's patch rows.
pub fn assemble_tokens(g: &mut Graph, cls: Var, patches: Var, batch: usize) -> Result<Var> {
    let (tc, tp) = (g.value(cls), g.value(patches));
    let d = tc.numel();
    if tp.cols() != d || tp.rows() % batch != 0 {
        return Err(Error::dim("assemble_tokens", tc.shape(), tp.shape()));
    }
    let n = tp.rows() / batch;
    let mut out = Vec::with_capacity(batch * (n + 1) * d);
    for b in 0..batch {
        out.extend_from_slice(tc.data());
        out.extend_from_slice(&tp.data()[b * n * d..(b + 1) * n * d]);
    }
    let value = Tensor::new([batch * (n + 1), d], out)?;
    Ok(g.custom(&[cls, patches], value, Box::new(AssembleTokens { batch, n, d })))
}

#[derive(Debug)]
struct AssembleTokens {
    batch: usize,
    n: usize,
    d: usize,
}

impl CustomOp for AssembleTokens {
    fn name(&self) -> &'static str {
        "assemble_tokens"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, d) = (self.n, self.d);
        let t = n + 1;
        let dcls = needs[0].then(|| {
            let mut acc = vec![0.0; d];
            for b in 0..self.batch {
                acc.iter_mut().zip(&grad[b * t * d..b * t * d + d]).for_each(|(a, g)| *a += g);
            }
            acc
        });
        let dpatch = needs[1].then(|| {
            let mut out = Vec::with_capacity(self.batch * n * d);
            for b in 0..self.batch {
                out.extend_from_slice(&grad[(b * t + 1) * d..(b + 1) * t * d]);
            }
            out
        });
        vec![dcls, dpatch]
    }
}

/// Per-head attention weights `softmax(Q Kᵀ / sqrt(width / heads))` as a
/// `[batch, heads, tokens, tokens]` tensor; rows are queries.
pub fn attention_probs(g: &mut Graph, q: Var, k: Var, batch: usize, heads: usize) -> Result<Var> {
    let (tq, tk) = (g.value(q), g.value(k));
    if tq.shape() != tk.shape() || tq.shape().len() != 2 || tq.rows() % batch != 0 || tq.cols() % heads != 0 {
        return Err(Error::dim("attention_probs", tq.shape(), tk.shape()));
    }
    let geo = HeadLayout::new(batch, heads, tq.rows() / batch, tq.cols());
    let (t, dh, d) = (geo.tokens, geo.head_dim, geo.width);
    let mut out = vec![0.0; batch * heads * t * t];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * t * d + h * dh;
            let block = &mut out[geo.block(b, h)..];
            gemm(
                t,
                dh,
                t,
                Operand::rows(&tq.data()[off..], d),
                Operand::transposed(&tk.data()[off..], d),
                block,
                t,
                false,
            );
            for row in block[..t * t].chunks_mut(t) {
                row.iter_mut().for_each(|v| *v *= geo.scale);
                softmax_in_place(row);
            }
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in attention weights".into()));
    }
    let value = Tensor::new([batch, heads, t, t], out)?;
    Ok(g.custom(&[q, k], value, Box::new(AttentionProbs(geo))))
}

/// Applies per-head attention weights to values and concatenates the heads.
pub fn attention_apply(g: &mut Graph, probs: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
    let (tp, tv) = (g.value(probs), g.value(v));
    let d = tv.cols();
    let t = tv.rows() / batch;
    if tp.shape() != [batch, heads, t, t] || tv.rows() != batch * t || d % heads != 0 {
        return Err(Error::dim("attention_apply", tp.shape(), tv.shape()));
    }
    let geo = HeadLayout::new(batch, heads, t, d);
    let dh = geo.head_dim;
    let mut out = vec![0.0; batch * t * d];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * t * d + h * dh;
            gemm(
                t,
                t,
                dh,
                Operand::rows(&tp.data()[geo.block(b, h)..], t),
                Operand::rows(&tv.data()[off..], d),
                &mut out[off..],
                d,
                false,
            );
        }
    }
    let value = Tensor::new([batch * t, d], out)?;
    Ok(g.custom(&[probs, v], value, Box::new(AttentionApply(geo))))
}

#[derive(Clone, Copy, Debug)]
struct HeadLayout {
    batch: usize,
    heads: usize,
    tokens: usize,
    width: usize,
    head_dim: usize,
    scale: f64,
}

impl HeadLayout {
    fn new(batch: usize, heads: usize, tokens: usize, width: usize) -> Self {
        let head_dim = width / heads;
        Self {
            batch,
            heads,
            tokens,
            width,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    /// Offset of the `(b, h)` attention matrix.
    fn block(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.tokens * self.tokens
    }
}

#[derive(Debug)]
struct AttentionProbs(HeadLayout);

impl CustomOp for AttentionProbs {
    fn name(&self) -> &'static str {
        "attention_probs"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geo = self.0;
        let (t, dh, d) = (geo.tokens, geo.head_dim, geo.width);
        let (q, k) = (inputs[0].data(), inputs[1].data());
        let p = output.data();
        let mut dq = needs[0].then(|| vec![0.0; q.len()]);
        let mut dk = needs[1].then(|| vec![0.0; k.len()]);
        let mut dlogits = vec![0.0; t * t];
        for b in 0..geo.batch {
            for h in 0..geo.heads {
                let base = geo.block(b, h);
                for r in 0..t {
                    let pr = &p[base + r * t..base + (r + 1) * t];
                    let gr = &grad[base + r * t..base + (r + 1) * t];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..t {
                        dlogits[r * t + c] = pr[c] * (gr[c] - dot) * geo.scale;
                    }
                }
                let off = b * t * d + h * dh;
                if let Some(dq) = dq.as_mut() {
                    gemm(t, t, dh, Operand::rows(&dlogits, t), Operand::rows(&k[off..], d), &mut dq[off..], d, false);
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        t,
                        t,
                        dh,
                        Operand::transposed(&dlogits, t),
                        Operand::rows(&q[off..], d),
                        &mut dk[off..],
                        d,
                        false,
                    );
                }
            }
        }
        vec![dq, dk]
    }
}

#[derive(Debug)]
struct AttentionApply(HeadLayout);

impl CustomOp for AttentionApply {
    fn name(&self) -> &'static str {
        "attention_apply"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geo = self.0;
        let (t, dh, d) = (geo.tokens, geo.head_dim, geo.width);
        let (p, v) = (inputs[0].data(), inputs[1].data());
        let mut dp = needs[0].then(|| vec![0.0; p.len()]);
        let mut dv = needs[1].then(|| vec![0.0; v.len()]);
        for b in 0..geo.batch {
            for h in 0..geo.heads {
                let off = b * t * d + h * dh;
                let block = geo.block(b, h);
                if let Some(dp) = dp.as_mut() {
                    gemm(
                        t,
                        dh,
                        t,
                        Operand::rows(&grad[off..], d),
                        Operand::transposed(&v[off..], d),
                        &mut dp[block..],
                        t,
                        false,
                    );
                }
                if let Some(dv) = dv.as_mut() {
                    gemm(
                        t,
                        t,
                        dh,
                        Operand::transposed(&p[block..], t),
                        Operand::rows(&grad[off..], d),
                        &mut dv[off..],
                        d,
                        false,
                    );
                }
            }
        }
        vec![dp, dv]
    }
}

/// Multi-head self-attention: projections, per-head attention and output
/// projection. Returns the output and the attention weights.
pub fn multi_head_attention(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &BackboneConfig,
    layer: usize,
    z: Var,
    batch: usize,
) -> Result<(Var, Var)> {
    let proj = |g: &mut Graph, binder: &mut Binder<'_>, name: &str, x: Var| -> Result<Var> {
        let w = binder.bind(g, &layer_param(layer, &format!("{name}.w")))?;
        let b = binder.bind(g, &layer_param(layer, &format!("{name}.b")))?;
        g.linear(x, w, b)
    };
    let q = proj(g, binder, "q", z)?;
    let k = proj(g, binder, "k", z)?;
    let v = proj(g, binder, "v", z)?;
    let probs = attention_probs(g, q, k, batch, cfg.heads)?;
    let ctx = attention_apply(g, probs, v, batch, cfg.heads)?;
    let out = proj(g, binder, "o", ctx)?;
    Ok((out, probs))
}

/// One encoder layer, `z' = LN(MSA(z) + z)`, `z_next = LN(FFN(z') + z')`.
/// Returns the layer output and the `[batch, heads, tokens, tokens]`
/// attention weights.
pub fn encoder_layer(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    cfg: &BackboneConfig,
    layer: usize,
    z: Var,
    batch: usize,
) -> Result<(Var, Var)> {
    let (attn, probs) = multi_head_attention(g, binder, cfg, layer, z, batch)?;
    let res1 = g.add(attn, z)?;
    let ln = |g: &mut Graph, binder: &mut Binder<'_>, name: &str, x: Var| -> Result<Var> {
        let gamma = binder.bind(g, &layer_param(layer, &format!("{name}.gamma")))?;
        let beta = binder.bind(g, &layer_param(layer, &format!("{name}.beta")))?;
        g.layer_norm(x, gamma, beta, cfg.ln_eps)
    };
    let mid = ln(g, binder, "ln1", res1)?;
    let w1 = binder.bind(g, &layer_param(layer, "ffn1.w"))?;
    let b1 = binder.bind(g, &layer_param(layer, "ffn1.b"))?;
    let w2 = binder.bind(g, &layer_param(layer, "ffn2.w"))?;
    let b2 = binder.bind(g, &layer_param(layer, "ffn2.b"))?;
    let hidden = g.linear(mid, w1, b1)?;
    let hidden = g.gelu(hidden);
    let ffn = g.linear(hidden, w2, b2)?;
    let res2 = g.add(ffn, mid)?;
    let out = ln(g, binder, "ln2", res2)?;
    if !g.value(out).is_finite() {
        return Err(Error::Numeric(format!("non-finite activations after layer {layer}")));
    }
    Ok((out, probs))
}

/// Attention weights of one layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// 1-based layer index.
    pub layer: usize,
    /// One `(N+1)×(N+1)` matrix per head; index 0 is the cls token.
    pub heads: Vec<Tensor>,
}

impl AttentionRecord {
    /// Extracts image `image` from a `[batch, heads, tokens, tokens]` tensor.
    pub fn from_batch(layer: usize, probs: &Tensor, image: usize) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 4 || image >= s[0] || s[2] != s[3] {
            return Err(Error::dim("attention record", s, &[image]));
        }
        let (heads, t) = (s[1], s[2]);
        let heads = (0..heads)
            .map(|h| {
                let off = (image * heads + h) * t * t;
                Tensor::new([t, t], probs.data()[off..off + t * t].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self { layer, heads })
    }

    pub fn tokens(&self) -> usize {
        self.heads.first().map_or(0, Tensor::rows)
    }
}
