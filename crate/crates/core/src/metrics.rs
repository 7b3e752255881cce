//! Segmentation metrics and feature export.
//!
//! Embedding export layout (little-endian): magic `b"SDCAEMBD"`, version
//! `u32` (1), row count `u64`, dimension `u32`, then per row a `u32` label
//! followed by `D × f64`.

use std::io::Write;

use crate::contrastive::PixelBatch;
use crate::error::{check_dim, Result, SdcaError};
use crate::maps::{LabelMap, IGNORE_LABEL};
use crate::numeric::{dot, norm};

pub const EMBED_MAGIC: &[u8; 8] = b"SDCAEMBD";

/// Denominator floor for the discrimination distance.
pub const PDD_EPSILON: f64 = 1e-6;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth is not ignored.
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        check_dim(truth.num_pixels(), pred.num_pixels())?;
        for (&t, &p) in truth.labels.iter().zip(&pred.labels) {
            if t == IGNORE_LABEL || p == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.k || p >= self.k {
                return Err(SdcaError::DimensionMismatch {
                    expected: self.k,
                    got: t.max(p) + 1,
                });
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Partial matrices combine by addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        check_dim(self.k, other.k)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` where the class has an empty union (absent from both truth and
    /// prediction).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    /// Mean over a subset of classes, skipping empty unions.
    pub fn mean_over(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.per_class.get(c).copied().flatten()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `IoU = TP / (TP + FP + FN)` per class and their mean.
pub fn iou(conf: &ConfusionMatrix) -> IouReport {
    let k = conf.k;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf.get(c, c);
            let row: u64 = (0..k).map(|j| conf.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| conf.get(i, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, miou }
}

/// Classes whose share of the given pixel counts is below `share`
/// (tail classes use 1%).
pub fn tail_classes(pixel_counts: &[u64], share: f64) -> Vec<usize> {
    let total: u64 = pixel_counts.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    pixel_counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| (n as f64) / (total as f64) < share)
        .map(|(c, _)| c)
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Pixel-wise discrimination distance per class.
///
/// For each pixel of class k: `cos(x, μ_k) / max(ε, Σ_{i≠k} max(0, cos(x, μ_i)))`,
/// averaged over the class. Classes without pixels get `None`.
pub fn pdd(features: &PixelBatch, means: &[Option<&[f64]>]) -> Result<Vec<Option<f64>>> {
    let k = means.len();
    if k < 2 {
        return Err(SdcaError::InvalidConfig {
            field: "num_classes".into(),
            reason: "discrimination distance needs at least two classes".into(),
        });
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for i in 0..features.len() {
        let c = features.labels[i];
        if c >= k {
            return Err(SdcaError::DimensionMismatch { expected: k, got: c + 1 });
        }
        let x = features.query(i);
        let own = means[c].ok_or(SdcaError::UninitializedClass(c))?;
        check_dim(own.len(), x.len())?;
        let mut denom = 0.0;
        for (j, m) in means.iter().enumerate() {
            if j == c {
                continue;
            }
            let m = m.ok_or(SdcaError::UninitializedClass(j))?;
            denom += cosine(x, m).max(0.0);
        }
        sums[c] += cosine(x, own) / denom.max(PDD_EPSILON);
        counts[c] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Write `(label, vector)` rows for external embedding visualization.
pub fn export_embeddings<W: Write>(features: &PixelBatch, w: &mut W) -> Result<()> {
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(features.len() as u64).to_le_bytes())?;
    w.write_all(&(features.dim as u32).to_le_bytes())?;
    for i in 0..features.len() {
        w.write_all(&(features.labels[i] as u32).to_le_bytes())?;
        for v in features.query(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::Domain;

    #[test]
    fn iou_examples() {
        // class 0: TP=2, FP=1, FN=0
        let truth = LabelMap::from_labels(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::from_labels(1, 4, vec![0, 0, 0, 1]).unwrap();
        let mut c = ConfusionMatrix::new(2);
        c.accumulate(&truth, &pred).unwrap();
        let r = iou(&c);
        assert!((r.per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].unwrap() - 0.5).abs() < 1e-15);

        let mut c = ConfusionMatrix::new(3);
        c.accumulate(&truth, &truth).unwrap();
        let r = iou(&c);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignored_pixels_are_not_counted() {
        let truth = LabelMap::from_labels(1, 3, vec![0, IGNORE_LABEL, 1]).unwrap();
        let pred = LabelMap::from_labels(1, 3, vec![0, 1, 1]).unwrap();
        let mut c = ConfusionMatrix::new(2);
        c.accumulate(&truth, &pred).unwrap();
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn tail_class_selection() {
        assert_eq!(tail_classes(&[500, 400, 95, 5], 0.01), vec![3]);
        assert_eq!(tail_classes(&[0, 0], 0.01), Vec::<usize>::new());
    }

    #[test]
    fn pdd_examples() {
        let mu1 = vec![1.0, 0.0];
        // cos(μ1, μ2) = 0.5
        let mu2 = vec![0.5, 3f64.sqrt() / 2.0];
        let means = vec![Some(mu1.as_slice()), Some(mu2.as_slice())];
        let batch = PixelBatch::from_vectors(&[mu1.clone(), mu1.clone()], &[0, 0], Domain::Target).unwrap();
        let r = pdd(&batch, &means).unwrap();
        assert!((r[0].unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(r[1], None);

        let ortho = vec![Some(&[1.0, 0.0][..]), Some(&[0.0, 1.0][..])];
        let batch = PixelBatch::from_vectors(&[vec![2.0, 0.0]], &[0], Domain::Target).unwrap();
        let r = pdd(&batch, &ortho).unwrap();
        assert_eq!(r[0].unwrap(), 1.0 / PDD_EPSILON);

        let missing = vec![Some(&[1.0, 0.0][..]), None];
        assert!(matches!(pdd(&batch, &missing), Err(SdcaError::UninitializedClass(1))));
    }

    #[test]
    fn export_layout() {
        let batch = PixelBatch::from_vectors(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[1, 0], Domain::Source).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&batch, &mut buf).unwrap();
        assert_eq!(&buf[..8], EMBED_MAGIC);
        assert_eq!(buf.len(), 8 + 4 + 8 + 4 + 2 * (4 + 16));
        assert_eq!(u32::from_le_bytes(buf[24..28].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(buf[28..36].try_into().unwrap()), 1.0);
    }
}
