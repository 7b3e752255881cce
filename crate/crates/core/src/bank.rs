//! Per-class Gaussian statistics estimated online from labeled source pixels.
//!
//! Every class keeps a pixel count, a mean and a population (divide-by-n)
//! covariance. A new image contributes its own per-class batch statistics,
//! which are folded in with the pairwise merge
//!
//! ```text
//! μ ← (n μ + m μ') / (n + m)
//! Σ ← (n Σ + m Σ') / (n + m) + n m (μ − μ')(μ − μ')ᵀ / (n + m)²
//! ```
//!
//! which reproduces whole-dataset statistics exactly (up to rounding) under
//! the population convention.
//!
//! Checkpoint layout (little-endian):
//!
//! | bytes    | field                                       |
//! |----------|---------------------------------------------|
//! | 8        | magic `b"SDCABANK"`                         |
//! | 4        | version (`u32`, currently 1)                |
//! | 4        | dimension `D` (`u32`)                       |
//! | 4        | classes `K` (`u32`)                         |
//! | 1        | space tag: 0 = feature, 1 = output          |
//! | 1        | covariance mode: 0 = full, 1 = diagonal     |
//! | per class| count `u64`, mean `D × f64`, cov `D² × f64` |

use std::io::{Read, Write};

use log::warn;

use crate::error::{check_dim, Result, SdcaError};
use crate::maps::{read_f64, read_u32, read_u64, LabelMap, VectorMap, IGNORE_LABEL};
use crate::numeric::Mat;

pub const BANK_MAGIC: &[u8; 8] = b"SDCABANK";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    Feature,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Only the diagonal is kept; off-diagonal entries stay zero.
    Diagonal,
}

/// Count, mean and population covariance of one pixel set.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub cov: Mat,
}

/// Two-pass mean and population covariance of a non-empty pixel set.
pub fn batch_stats<'a, I>(pixels: I) -> Result<BatchStats>
where
    I: IntoIterator<Item = &'a [f64]>,
    I::IntoIter: Clone,
{
    let iter = pixels.into_iter();
    let mut it = iter.clone();
    let first = it.next().ok_or(SdcaError::EmptyInput("batch_stats"))?;
    let dim = first.len();
    let mut sum = first.to_vec();
    let mut count = 1u64;
    for p in it {
        check_dim(dim, p.len())?;
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        count += 1;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();

    let mut cov = Mat::zeros(dim);
    let mut dev = vec![0.0; dim];
    for p in iter {
        for ((d, v), m) in dev.iter_mut().zip(p).zip(&mean) {
            *d = v - m;
        }
        cov.add_outer(1.0, &dev, &dev);
    }
    cov.scale(1.0 / count as f64);
    Ok(BatchStats {
        count,
        mean,
        cov: cov.symmetrized(),
    })
}

/// Running statistics of one semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl ClassStats {
    pub fn empty(dim: usize) -> Self {
        ClassStats {
            count: 0,
            mean: vec![0.0; dim],
            cov: Mat::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    /// Statistics of a single point mass (zero covariance).
    pub fn point(mean: Vec<f64>, count: u64) -> Self {
        let d = mean.len();
        ClassStats {
            count,
            mean,
            cov: Mat::zeros(d),
        }
    }
}

/// Fold a batch of `m` pixels with mean `batch_mean` and covariance `batch_cov`
/// into `stats`.
pub fn merge(stats: &ClassStats, m: u64, batch_mean: &[f64], batch_cov: &Mat) -> Result<ClassStats> {
    let d = stats.dim();
    check_dim(d, batch_mean.len())?;
    check_dim(d, batch_cov.dim())?;
    if m == 0 {
        return Err(SdcaError::EmptyInput("merge batch"));
    }
    if stats.count == 0 {
        return Ok(ClassStats {
            count: m,
            mean: batch_mean.to_vec(),
            cov: batch_cov.clone(),
        });
    }
    let n = stats.count as f64;
    let mf = m as f64;
    let total = n + mf;

    let mean: Vec<f64> = stats
        .mean
        .iter()
        .zip(batch_mean)
        .map(|(a, b)| (n * a + mf * b) / total)
        .collect();

    let delta: Vec<f64> = stats.mean.iter().zip(batch_mean).map(|(a, b)| a - b).collect();
    let mut cov = stats.cov.clone();
    cov.scale(n / total);
    cov.add_scaled(mf / total, batch_cov)?;
    cov.add_outer(n * mf / (total * total), &delta, &delta);

    Ok(ClassStats {
        count: stats.count + m,
        mean,
        cov: cov.symmetrized(),
    })
}

/// K per-class Gaussians sharing one dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBank {
    dim: usize,
    space: SpaceTag,
    mode: CovarianceMode,
    classes: Vec<ClassStats>,
}

impl DistributionBank {
    pub fn new(num_classes: usize, dim: usize, space: SpaceTag, mode: CovarianceMode) -> Result<Self> {
        if num_classes < 2 {
            return Err(SdcaError::InvalidConfig {
                field: "num_classes".into(),
                reason: "a bank needs at least two classes".into(),
            });
        }
        if num_classes > IGNORE_LABEL as usize {
            return Err(SdcaError::InvalidConfig {
                field: "num_classes".into(),
                reason: format!("at most {IGNORE_LABEL} classes are addressable"),
            });
        }
        Ok(DistributionBank {
            dim,
            space,
            mode,
            classes: vec![ClassStats::empty(dim); num_classes],
        })
    }

    /// Assemble a bank from explicit per-class statistics.
    pub fn from_classes(classes: Vec<ClassStats>, space: SpaceTag, mode: CovarianceMode) -> Result<Self> {
        let dim = classes.first().map(|c| c.dim()).unwrap_or(0);
        let mut bank = DistributionBank::new(classes.len(), dim, space, mode)?;
        for c in &classes {
            check_dim(dim, c.dim())?;
            check_dim(dim, c.cov.dim())?;
        }
        bank.classes = classes;
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn space(&self) -> SpaceTag {
        self.space
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.classes
    }

    pub fn class(&self, k: usize) -> &ClassStats {
        &self.classes[k]
    }

    pub fn total_count(&self) -> u64 {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn reset(&mut self) {
        for c in &mut self.classes {
            *c = ClassStats::empty(self.dim);
        }
    }

    /// Per-class means, `None` for classes never observed.
    pub fn means(&self) -> Vec<Option<&[f64]>> {
        self.classes
            .iter()
            .map(|c| c.is_initialized().then_some(c.mean.as_slice()))
            .collect()
    }

    /// Merge a batch into class `k`.
    pub fn merge_batch(&mut self, k: usize, batch: &BatchStats) -> Result<()> {
        let mut cov = batch.cov.clone();
        if self.mode == CovarianceMode::Diagonal {
            keep_diagonal(&mut cov);
        }
        let mut merged = merge(&self.classes[k], batch.count, &batch.mean, &cov)?;
        if self.mode == CovarianceMode::Diagonal {
            keep_diagonal(&mut merged.cov);
        }
        self.classes[k] = merged;
        Ok(())
    }

    /// Fold in every labeled pixel of one source map. Classes absent from
    /// `labels` are left untouched.
    pub fn update_with_image(&mut self, map: &VectorMap, labels: &LabelMap) -> Result<()> {
        check_dim(self.dim, map.channels)?;
        check_dim(map.num_pixels(), labels.num_pixels())?;
        let k = self.num_classes();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let l = l as usize;
            if l >= k {
                return Err(SdcaError::DimensionMismatch { expected: k, got: l + 1 });
            }
            members[l].push(i);
        }
        for (class, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let batch = batch_stats(idx.iter().map(|&i| map.pixel(i)))?;
            self.merge_batch(class, &batch)?;
        }
        Ok(())
    }

    /// Reset and recompute every class from a full pass over source data.
    pub fn init_from_dataset<'a, I>(&mut self, source: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a VectorMap, &'a LabelMap)>,
    {
        self.reset();
        for (map, labels) in source {
            self.update_with_image(map, labels)?;
        }
        for (k, c) in self.classes.iter().enumerate() {
            if !c.is_initialized() {
                warn!("class {k} has no source pixels; it stays uninitialized");
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.classes.len() as u32).to_le_bytes())?;
        let tag = match self.space {
            SpaceTag::Feature => 0u8,
            SpaceTag::Output => 1u8,
        };
        let mode = match self.mode {
            CovarianceMode::Full => 0u8,
            CovarianceMode::Diagonal => 1u8,
        };
        w.write_all(&[tag, mode])?;
        for c in &self.classes {
            w.write_all(&c.count.to_le_bytes())?;
            for v in c.mean.iter().chain(c.cov.as_slice()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(SdcaError::Format("bad bank magic".into()));
        }
        let version = read_u32(r)?;
        if version != BANK_VERSION {
            return Err(SdcaError::Format(format!("unsupported bank version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let space = match flags[0] {
            0 => SpaceTag::Feature,
            1 => SpaceTag::Output,
            t => return Err(SdcaError::Format(format!("unknown space tag {t}"))),
        };
        let mode = match flags[1] {
            0 => CovarianceMode::Full,
            1 => CovarianceMode::Diagonal,
            t => return Err(SdcaError::Format(format!("unknown covariance mode {t}"))),
        };
        let mut bank = DistributionBank::new(k, dim, space, mode)?;
        for c in &mut bank.classes {
            c.count = read_u64(r)?;
            for v in &mut c.mean {
                *v = read_f64(r)?;
            }
            for v in c.cov.as_mut_slice() {
                *v = read_f64(r)?;
            }
        }
        Ok(bank)
    }
}

fn keep_diagonal(m: &mut Mat) {
    let d = m.dim();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                m[(i, j)] = 0.0;
            }
        }
    }
}
