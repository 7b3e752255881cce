//! Supervised segmentation losses with gradients w.r.t. the logits.

use crate::error::{check_dim, Result, SdcaError};
use crate::maps::{LabelMap, ScoreMap, IGNORE_LABEL};
use crate::numeric::softmax_in_place;

/// Scalar loss and its gradient, laid out like the input logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Per-pixel softmax of a score map (same layout).
pub fn probabilities(scores: &ScoreMap) -> Vec<f64> {
    let mut p = scores.data.clone();
    if scores.channels > 0 {
        for px in p.chunks_exact_mut(scores.channels) {
            softmax_in_place(px);
        }
    }
    p
}

fn check_shapes(scores: &ScoreMap, labels: &LabelMap) -> Result<()> {
    check_dim(scores.num_pixels(), labels.num_pixels())?;
    if !labels.is_valid_for(scores.channels) {
        return Err(SdcaError::DimensionMismatch {
            expected: scores.channels,
            got: labels
                .labels
                .iter()
                .filter(|&&l| l != IGNORE_LABEL)
                .map(|&l| l as usize + 1)
                .max()
                .unwrap_or(0),
        });
    }
    Ok(())
}

/// Mean pixel-wise cross-entropy over non-ignored pixels.
pub fn cross_entropy(scores: &ScoreMap, labels: &LabelMap) -> Result<SegLoss> {
    check_shapes(scores, labels)?;
    let valid = labels.num_valid();
    if valid == 0 {
        return Err(SdcaError::NoValidPixels);
    }
    let k = scores.channels;
    let scale = 1.0 / valid as f64;
    let mut grad = vec![0.0; scores.data.len()];
    let mut total = 0.0;
    for (i, &y) in labels.labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        let g = &mut grad[i * k..(i + 1) * k];
        g.copy_from_slice(scores.pixel(i));
        let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in g.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        let y = y as usize;
        total += z.ln() + m - scores.pixel(i)[y];
        for v in g.iter_mut() {
            *v *= scale / z;
        }
        g[y] -= scale;
    }
    Ok(SegLoss {
        value: total * scale,
        grad,
    })
}

/// Weights of the Lovász extension of the Jaccard loss for ground-truth
/// indicators sorted by decreasing error.
pub fn lovasz_jaccard_weights(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut weights = Vec::with_capacity(gt_sorted.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = 1.0 - inter / union;
        weights.push(jac - prev);
        prev = jac;
    }
    weights
}

/// Per-class Lovász-Softmax terms for the classes present in `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LovaszBreakdown {
    /// `(class, loss)` for each class present among the valid pixels.
    pub per_class: Vec<(usize, f64)>,
    pub loss: SegLoss,
}

/// Lovász-Softmax averaged over the classes present in the ground truth.
pub fn lovasz_softmax(scores: &ScoreMap, labels: &LabelMap) -> Result<SegLoss> {
    Ok(lovasz_softmax_detailed(scores, labels)?.loss)
}

pub fn lovasz_softmax_detailed(scores: &ScoreMap, labels: &LabelMap) -> Result<LovaszBreakdown> {
    check_shapes(scores, labels)?;
    let probs = probabilities(scores);
    let mut res = lovasz_on_probs(&probs, scores.channels, &labels.labels)?;

    // chain rule through the per-pixel softmax
    let k = scores.channels;
    for (gp, p) in res.loss.grad.chunks_exact_mut(k).zip(probs.chunks_exact(k)) {
        let inner: f64 = gp.iter().zip(p).map(|(g, p)| g * p).sum();
        for (g, p) in gp.iter_mut().zip(p) {
            *g = p * (*g - inner);
        }
    }
    Ok(res)
}

/// Lovász-Softmax on probabilities; the gradient is w.r.t. the probabilities.
pub fn lovasz_on_probs(probs: &[f64], k: usize, labels: &[u8]) -> Result<LovaszBreakdown> {
    let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    if valid.is_empty() {
        return Err(SdcaError::NoValidPixels);
    }
    let mut present = vec![false; k];
    for &i in &valid {
        present[labels[i] as usize] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();
    let mut grad = vec![0.0; probs.len()];
    let mut per_class = Vec::with_capacity(n_present);
    let mut errors = Vec::with_capacity(valid.len());
    let mut order: Vec<usize> = Vec::with_capacity(valid.len());
    for c in (0..k).filter(|&c| present[c]) {
        errors.clear();
        for &i in &valid {
            let p = probs[i * k + c];
            errors.push(if labels[i] as usize == c { 1.0 - p } else { p });
        }
        order.clear();
        order.extend(0..valid.len());
        // descending error, ties by pixel index (stable sort keeps index order)
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let gt_sorted: Vec<bool> = order.iter().map(|&r| labels[valid[r]] as usize == c).collect();
        let weights = lovasz_jaccard_weights(&gt_sorted);
        let mut loss_c = 0.0;
        for (rank, &r) in order.iter().enumerate() {
            loss_c += errors[r] * weights[rank];
            let i = valid[r];
            let sign = if labels[i] as usize == c { -1.0 } else { 1.0 };
            grad[i * k + c] += sign * weights[rank] / n_present as f64;
        }
        per_class.push((c, loss_c));
    }
    let value = per_class.iter().map(|(_, l)| l).sum::<f64>() / n_present as f64;
    Ok(LovaszBreakdown {
        per_class,
        loss: SegLoss { value, grad },
    })
}
