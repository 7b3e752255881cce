//! Label masks for the contrastive terms and self-training pseudo labels.

use crate::error::{Result, SdcaError};
use crate::maps::{LabelMap, ScoreMap, IGNORE_LABEL};
use crate::numeric::softmax_in_place;
use crate::seg_loss::{cross_entropy, SegLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    #[default]
    Nearest,
    /// Most frequent non-ignore label in the covered cell, smallest id on ties.
    Majority,
}

/// Shrink a label map to `out_h × out_w`.
///
/// Nearest mode picks source pixel `(⌊r·H/H'⌋, ⌊c·W/W'⌋)`; ignore ids carry
/// over unchanged.
pub fn downsample_labels(labels: &LabelMap, out_h: usize, out_w: usize, mode: DownsampleMode) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(SdcaError::InvalidSize {
            h,
            w,
            target_h: out_h,
            target_w: out_w,
        });
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            let label = match mode {
                DownsampleMode::Nearest => labels.get(r * h / out_h, c * w / out_w),
                DownsampleMode::Majority => {
                    let (r0, r1) = (r * h / out_h, ((r + 1) * h / out_h).max(r * h / out_h + 1));
                    let (c0, c1) = (c * w / out_w, ((c + 1) * w / out_w).max(c * w / out_w + 1));
                    let mut counts = [0usize; 256];
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            counts[labels.get(rr, cc) as usize] += 1;
                        }
                    }
                    let best = (0..IGNORE_LABEL as usize)
                        .filter(|&l| counts[l] > 0)
                        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
                    best.map(|l| l as u8).unwrap_or(IGNORE_LABEL)
                }
            };
            out.push(label);
        }
    }
    LabelMap::from_labels(out_h, out_w, out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    Global(f64),
    PerClass(Vec<f64>),
}

/// Accepted pixels keep their argmax class, rejected ones are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub labels: LabelMap,
    pub threshold: Threshold,
}

impl ConfidenceMask {
    pub fn num_accepted(&self) -> usize {
        self.labels.num_valid()
    }
}

/// Argmax class and its softmax probability for every pixel.
pub fn confidence_map(scores: &ScoreMap) -> Vec<(u8, f64)> {
    let k = scores.channels;
    let mut p = vec![0.0; k];
    scores
        .pixels()
        .map(|px| {
            p.copy_from_slice(px);
            softmax_in_place(&mut p);
            let mut best = 0;
            for c in 1..k {
                if p[c] > p[best] {
                    best = c;
                }
            }
            (best as u8, p[best])
        })
        .collect()
}

/// Keep the argmax where its probability reaches `delta`.
pub fn target_mask(scores: &ScoreMap, delta: f64) -> ConfidenceMask {
    let labels = confidence_map(scores)
        .into_iter()
        .map(|(c, p)| if p >= delta { c } else { IGNORE_LABEL })
        .collect();
    ConfidenceMask {
        labels: LabelMap {
            height: scores.height,
            width: scores.width,
            labels,
        },
        threshold: Threshold::Global(delta),
    }
}

/// Median argmax confidence per predicted class over a whole set of maps.
///
/// Even counts use the mean of the two middle values. Classes that are never
/// the argmax get `+∞`, so they are never pseudo-labeled.
pub fn median_thresholds<'a, I>(maps: I, num_classes: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a ScoreMap>,
{
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for m in maps {
        for (c, p) in confidence_map(m) {
            per_class[c as usize].push(p);
        }
    }
    per_class
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return f64::INFINITY;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect()
}

/// Keep the argmax where its probability reaches that class's threshold.
pub fn pseudo_labels(scores: &ScoreMap, thresholds: &[f64]) -> Result<ConfidenceMask> {
    if thresholds.len() != scores.channels {
        return Err(SdcaError::DimensionMismatch {
            expected: scores.channels,
            got: thresholds.len(),
        });
    }
    let labels = confidence_map(scores)
        .into_iter()
        .map(|(c, p)| if p >= thresholds[c as usize] { c } else { IGNORE_LABEL })
        .collect();
    Ok(ConfidenceMask {
        labels: LabelMap {
            height: scores.height,
            width: scores.width,
            labels,
        },
        threshold: Threshold::PerClass(thresholds.to_vec()),
    })
}

/// Cross-entropy against pseudo labels.
pub fn self_supervised_loss(scores: &ScoreMap, pseudo: &LabelMap) -> Result<SegLoss> {
    cross_entropy(scores, pseudo)
}
