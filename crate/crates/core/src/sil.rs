//! Structure information learning.
//!
//! One layer's cls-to-patch attention is summed over heads, thresholded at
//! its mean, and turned into a patch graph: nodes carry polar coordinates
//! relative to the most attended patch, edges are the outer product of the
//! surviving attention. Two graph convolutions produce a feature per node;
//! the reference node's feature is added to the cls token.
//!
//! The threshold mask and the reference index are treated as constants
//! during differentiation. Surviving attention values stay differentiable,
//! both as edge weights and as the fourth node-feature channel.

use std::f64::consts::PI;

use rand::Rng;

use crate::backbone::{AttentionRecord, PatchGrid};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Binder, ParamStore};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Node feature width: `(rho, cos 2πθ, sin 2πθ, A_new)`.
pub const NODE_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FilteredAttention {
    /// Head-summed cls attention per patch.
    pub a: Vec<f64>,
    pub mean: f64,
    /// `a[i]` where `a[i] > mean`, else 0.
    pub a_new: Vec<f64>,
    /// Flat index of the largest `a`, lowest index on ties.
    pub reference: usize,
}

impl FilteredAttention {
    pub fn mask(&self) -> Vec<bool> {
        self.a.iter().map(|&v| v > self.mean).collect()
    }

    pub fn support(&self) -> usize {
        self.a.iter().filter(|&&v| v > self.mean).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureGraph {
    /// `N × 4` node features.
    pub x: Tensor,
    /// `N × N` edge weights, `A_new · A_newᵀ`.
    pub adj: Tensor,
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    /// `4 × hidden`.
    pub w1: Tensor,
    /// `hidden × width`.
    pub w2: Tensor,
}

/// `A[i] = Σ_h Att_h[0, i + 1]`: cls-row attention to each patch, summed over heads.
pub fn aggregate_cls_attention(record: &AttentionRecord) -> Result<Vec<f64>> {
    if record.heads.is_empty() {
        return Err(Error::Config("attention record has no heads".into()));
    }
    let t = record.tokens();
    if t < 3 {
        return Err(Error::Config(format!(
            "structure graph needs at least 2 patches, got {}",
            t.saturating_sub(1)
        )));
    }
    let mut a = vec![0.0; t - 1];
    for head in &record.heads {
        let cls_row = head.row(0);
        a.iter_mut().zip(&cls_row[1..]).for_each(|(acc, v)| *acc += v);
    }
    Ok(a)
}

/// Mean thresholding with a strict `>`, plus the argmax reference patch.
pub fn threshold(a: &[f64]) -> FilteredAttention {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let a_new = a.iter().map(|&v| if v > mean { v } else { 0.0 }).collect();
    let mut reference = 0;
    for (i, &v) in a.iter().enumerate() {
        if v > a[reference] {
            reference = i;
        }
    }
    FilteredAttention {
        a: a.to_vec(),
        mean,
        a_new,
        reference,
    }
}

/// Polar coordinates of every patch relative to `reference`:
/// `rho = sqrt((dx / n_w)² + (dy / n_h)²)` and
/// `theta = (atan2(dy, dx) + π) / 2π` wrapped into `[0, 1)`, where `dx` runs
/// along columns and `dy` along rows. The reference itself gets `(0, 0.5)`.
pub fn polar_coordinates(grid: &PatchGrid, reference: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if reference >= grid.len() {
        return Err(Error::Contract(format!(
            "reference patch {reference} outside grid of {}",
            grid.len()
        )));
    }
    let (y0, x0) = grid.position(reference);
    let mut rho = Vec::with_capacity(grid.len());
    let mut theta = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (y, x) = grid.position(i);
        let dx = x as f64 - x0 as f64;
        let dy = y as f64 - y0 as f64;
        rho.push(((dx / grid.n_w as f64).powi(2) + (dy / grid.n_h as f64).powi(2)).sqrt());
        // atan2(+0, negative) is +π, which lands on 1.0 and wraps to 0.
        theta.push(((dy.atan2(dx) + PI) / (2.0 * PI)).rem_euclid(1.0));
    }
    Ok((rho, theta))
}

fn geometry_features<'a>(rho: &'a [f64], theta: &'a [f64]) -> impl Iterator<Item = [f64; 3]> + 'a {
    rho.iter().zip(theta).map(|(&r, &t)| {
        let angle = 2.0 * PI * t;
        [r, angle.cos(), angle.sin()]
    })
}

pub fn build_graph(fa: &FilteredAttention, rho: &[f64], theta: &[f64]) -> Result<StructureGraph> {
    let n = fa.a_new.len();
    if rho.len() != n || theta.len() != n {
        return Err(Error::dim("build_graph", &[n], &[rho.len(), theta.len()]));
    }
    let mut x = Vec::with_capacity(n * NODE_FEATURES);
    for (geo, &a) in geometry_features(rho, theta).zip(&fa.a_new) {
        x.extend_from_slice(&geo);
        x.push(a);
    }
    let adj = fa
        .a_new
        .iter()
        .flat_map(|&ai| fa.a_new.iter().map(move |&aj| ai * aj))
        .collect();
    Ok(StructureGraph {
        x: Tensor::new([n, NODE_FEATURES], x)?,
        adj: Tensor::new([n, n], adj)?,
        rho: rho.to_vec(),
        theta: theta.to_vec(),
    })
}

/// Row `reference` of `ReLU(Adj · ReLU(Adj · X · W1) · W2)`.
pub fn gcn_structure_feature(graph: &StructureGraph, params: &GcnParams, reference: usize) -> Result<Vec<f64>> {
    let n = graph.adj.rows();
    if reference >= n {
        return Err(Error::Contract(format!("reference {reference} outside {n} nodes")));
    }
    let mut g = Graph::new();
    let adj = g.constant(graph.adj.clone());
    let x = g.constant(graph.x.clone());
    let w1 = g.constant(params.w1.clone());
    let w2 = g.constant(params.w2.clone());
    let xw = g.matmul(x, w1)?;
    let h = g.matmul(adj, xw)?;
    let h = g.relu(h);
    let hw = g.matmul(h, w2)?;
    let s = g.matmul(adj, hw)?;
    let s = g.relu(s);
    Ok(g.value(s).row(reference).to_vec())
}

/// Adds `s` (one row per image) onto each image's cls row.
pub fn inject(g: &mut Graph, z: Var, s: Var, batch: usize) -> Result<Var> {
    let rows = g.value(z).rows();
    if batch == 0 || !rows.is_multiple_of(batch) || g.value(s).rows() != batch {
        return Err(Error::dim("inject", g.shape(z), g.shape(s)));
    }
    let tokens = rows / batch;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    g.scatter_add_rows(z, s, &cls_rows)
}

/// Parameter names of the graph convolution attached to `layer`.
pub fn gcn_param_names(layer: usize, shared: bool) -> (String, String) {
    if shared {
        ("sil.w1".into(), "sil.w2".into())
    } else {
        (format!("sil{layer}.w1"), format!("sil{layer}.w2"))
    }
}

/// Glorot-normal initialization of one graph convolution.
pub fn init_gcn<R: Rng + ?Sized>(store: &mut ParamStore, names: &(String, String), hidden: usize, width: usize, rng: &mut R) {
    let glorot = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(names.0.clone(), trunc_normal(rng, &[NODE_FEATURES, hidden], glorot(NODE_FEATURES, hidden)));
    store.insert(names.1.clone(), trunc_normal(rng, &[hidden, width], glorot(hidden, width)));
}

/// `[batch, heads, T, T]` attention weights to `[batch, N]` head-summed
/// cls-to-patch attention.
pub fn cls_attention(g: &mut Graph, probs: Var) -> Result<Var> {
    let p = g.value(probs);
    let s = p.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] < 3 {
        return Err(Error::Config(format!(
            "cls attention needs [batch, heads, T, T] with at least 2 patches, got {s:?}"
        )));
    }
    let (batch, heads, t) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; batch * (t - 1)];
    for b in 0..batch {
        for h in 0..heads {
            let off = (b * heads + h) * t * t;
            for i in 1..t {
                out[b * (t - 1) + i - 1] += p.data()[off + i];
            }
        }
    }
    let value = Tensor::new([batch, t - 1], out)?;
    Ok(g.custom(&[probs], value, Box::new(ClsAttention { batch, heads, t })))
}

#[derive(Debug)]
struct ClsAttention {
    batch: usize,
    heads: usize,
    t: usize,
}

impl CustomOp for ClsAttention {
    fn name(&self) -> &'static str {
        "cls_attention"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let t = self.t;
        let mut dp = vec![0.0; self.batch * self.heads * t * t];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let off = (b * self.heads + h) * t * t;
                for i in 1..t {
                    dp[off + i] = grad[b * (t - 1) + i - 1];
                }
            }
        }
        vec![Some(dp)]
    }
}

/// Output of the batched structure module for one layer.
#[derive(Debug)]
pub struct StructureOutput {
    /// `[batch, width]` structure features.
    pub features: Var,
    pub filtered: Vec<FilteredAttention>,
}

/// Differentiable structure features for a whole batch from one layer's
/// attention weights.
pub fn structure_features(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    names: &(String, String),
    probs: Var,
    grid: &PatchGrid,
) -> Result<StructureOutput> {
    let a = cls_attention(g, probs)?;
    let (batch, n) = (g.shape(a)[0], g.shape(a)[1]);
    if n != grid.len() {
        return Err(Error::dim("structure_features", &[n], &[grid.len()]));
    }
    let mut mask = Vec::with_capacity(batch * n);
    let mut geometry = Vec::with_capacity(batch * n * 3);
    let mut filtered = Vec::with_capacity(batch);
    let mut reference_rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let fa = threshold(g.value(a).row(b));
        let (rho, theta) = polar_coordinates(grid, fa.reference)?;
        geometry.extend(geometry_features(&rho, &theta).flatten());
        mask.extend(fa.mask().into_iter().map(|m| if m { 1.0 } else { 0.0 }));
        reference_rows.push(b * n + fa.reference);
        filtered.push(fa);
    }
    let mask = g.constant(Tensor::new([batch, n], mask)?);
    let geometry = g.constant(Tensor::new([batch * n, 3], geometry)?);
    let a_new = g.mul(a, mask)?;
    let a_col = g.reshape(a_new, &[batch * n, 1])?;
    let x = g.concat_last_axis(&[geometry, a_col])?;

    let w1 = binder.bind(g, &names.0)?;
    let w2 = binder.bind(g, &names.1)?;
    let (hidden, width) = (g.shape(w1)[1], g.shape(w2)[1]);
    let left = g.reshape(a_new, &[batch, n, 1])?;
    let right = g.reshape(a_new, &[batch, 1, n])?;
    let adj = g.batch_matmul(left, right)?;

    let xw = g.matmul(x, w1)?;
    let xw = g.reshape(xw, &[batch, n, hidden])?;
    let h = g.batch_matmul(adj, xw)?;
    let h = g.relu(h);
    let h = g.reshape(h, &[batch * n, hidden])?;
    let hw = g.matmul(h, w2)?;
    let hw = g.reshape(hw, &[batch, n, width])?;
    let s = g.batch_matmul(adj, hw)?;
    let s = g.relu(s);
    let features = g.gather_rows(s, &reference_rows)?;
    Ok(StructureOutput { features, filtered })
}
