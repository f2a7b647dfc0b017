//! Multi-level feature boosting: concatenated cls features from the last
//! layers, the classification loss, and the hard-negative-filtered
//! contrastive loss.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
    pub n_filtered_negatives: usize,
    pub batch_accuracy: f64,
}

/// Concatenates per-layer cls features (each `[batch, width]`) along the feature axis.
pub fn multi_level_features(g: &mut Graph, cls: &[Var]) -> Result<Var> {
    g.concat_last_axis(cls)
}

/// Linear classifier head. Returns `(logits, pred)` with `pred` the row softmax.
pub fn classify(g: &mut Graph, features: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    if g.shape(w).len() != 2 || g.shape(w)[1] < 2 {
        return Err(Error::Config("classifier needs at least two classes".into()));
    }
    let logits = g.linear(features, w, b)?;
    let pred = g.softmax_rows(logits)?;
    Ok((logits, pred))
}

/// Mean over the batch of `-ln max(pred[y], 1e-12)`.
pub fn cross_entropy(g: &mut Graph, pred: Var, labels: &[usize]) -> Result<Var> {
    let p = g.value(pred);
    let (batch, classes) = (p.rows(), p.cols());
    if labels.len() != batch {
        return Err(Error::dim("cross_entropy", p.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
    }
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.row(i)[y].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / batch as f64;
    Ok(g.custom(
        &[pred],
        Tensor::scalar(loss),
        Box::new(CrossEntropy {
            labels: labels.to_vec(),
        }),
    ))
}

#[derive(Debug)]
struct CrossEntropy {
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let (batch, classes) = (p.rows(), p.cols());
        let mut dp = vec![0.0; p.numel()];
        for (i, &y) in self.labels.iter().enumerate() {
            let py = p.row(i)[y];
            if py > PROB_FLOOR {
                dp[i * classes + y] = -grad[0] / (batch as f64 * py);
            }
        }
        vec![Some(dp)]
    }
}

/// Per-anchor statistics of a similarity matrix.
struct AnchorStats {
    /// Mean similarity to the other same-class rows; 0 when there are none.
    mean_positive: f64,
    positives: usize,
}

fn anchor_stats(sim: &[f64], labels: &[usize], i: usize) -> AnchorStats {
    let b = labels.len();
    let mut sum = 0.0;
    let mut positives = 0;
    for j in 0..b {
        if j != i && labels[j] == labels[i] {
            sum += sim[i * b + j];
            positives += 1;
        }
    }
    AnchorStats {
        mean_positive: if positives == 0 { 0.0 } else { sum / positives as f64 },
        positives,
    }
}

/// Hard-negative gate `max(0, alpha + s_neg - mean_pos)`.
pub fn indicator(alpha: f64, sim_negative: f64, mean_positive: f64) -> f64 {
    (alpha + sim_negative - mean_positive).max(0.0)
}

/// Contrastive loss from a `B × B` cosine-similarity matrix:
///
/// `1/B² Σ_i [ Σ_{j≠i, same} (1 - s_ij) + Σ_{j, other} I_ij · s_ij ]`
///
/// Returns the loss and the number of negative pairs whose gate is zero.
/// Anchors without positives use a mean positive similarity of 0.
pub fn contrastive_from_similarity(sim: &[f64], labels: &[usize], alpha: f64) -> (f64, usize) {
    let b = labels.len();
    let mut total = 0.0;
    let mut filtered = 0;
    for i in 0..b {
        let stats = anchor_stats(sim, labels, i);
        let mut row = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            let s = sim[i * b + j];
            if labels[j] == labels[i] {
                row += 1.0 - s;
            } else {
                let gate = indicator(alpha, s, stats.mean_positive);
                if gate == 0.0 {
                    filtered += 1;
                }
                row += gate * s;
            }
        }
        total += row;
    }
    (total / (b * b) as f64, filtered)
}

/// Contrastive loss over the rows of `features` (cosine similarity), with
/// the count of filtered negatives.
pub fn contrastive_loss(g: &mut Graph, features: Var, labels: &[usize], alpha: f64) -> Result<(Var, usize)> {
    let batch = g.value(features).rows();
    if batch < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {batch}")));
    }
    if labels.len() != batch {
        return Err(Error::dim("contrastive_loss", g.shape(features), &[labels.len()]));
    }
    let unit = g.normalize_rows(features);
    let unit_t = g.transpose(unit)?;
    let sim = g.matmul(unit, unit_t)?;
    let (loss, filtered) = contrastive_from_similarity(g.value(sim).data(), labels, alpha);
    let var = g.custom(
        &[sim],
        Tensor::scalar(loss),
        Box::new(Contrastive {
            labels: labels.to_vec(),
            alpha,
        }),
    );
    Ok((var, filtered))
}

#[derive(Debug)]
struct Contrastive {
    labels: Vec<usize>,
    alpha: f64,
}

impl CustomOp for Contrastive {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let sim = inputs[0].data();
        let labels = &self.labels;
        let b = labels.len();
        let scale = grad[0] / (b * b) as f64;
        let mut ds = vec![0.0; sim.len()];
        for i in 0..b {
            let stats = anchor_stats(sim, labels, i);
            // d(loss)/d(mean_positive), collected over active negatives.
            let mut d_mean = 0.0;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let s = sim[i * b + j];
                if labels[j] == labels[i] {
                    ds[i * b + j] -= scale;
                } else if indicator(self.alpha, s, stats.mean_positive) > 0.0 {
                    ds[i * b + j] += scale * (indicator(self.alpha, s, stats.mean_positive) + s);
                    d_mean -= scale * s;
                }
            }
            if stats.positives > 0 {
                let share = d_mean / stats.positives as f64;
                for j in 0..b {
                    if j != i && labels[j] == labels[i] {
                        ds[i * b + j] += share;
                    }
                }
            }
        }
        vec![Some(ds)]
    }
}

/// `L = L_CE + L_CL`, unweighted.
pub fn total_loss(g: &mut Graph, ce: Var, cl: Var) -> Result<Var> {
    g.add(ce, cl)
}

/// Fraction of rows whose argmax matches the label (ties go to the lowest class).
pub fn accuracy(pred: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(pred.row(*i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
