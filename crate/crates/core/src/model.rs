//! Tiny per-pixel segmenter and its SGD optimizer.
//!
//! Every pixel looks at a `p × p` patch around itself (zero padded at the
//! borders), passes it through one hidden ReLU layer of width `A` (the
//! feature map) and a linear head of width `K` (the logits). The output
//! keeps the input resolution.
//!
//! All weights live in one flat vector laid out as `[W1 | b1 | W2 | b2]` with
//! `W1: A × P` and `W2: K × A` row-major, `P = p²·C`. Gradients use the same
//! layout.
//!
//! Checkpoint layout (little-endian): magic `b"SDCAMODL"`, version `u32` (1),
//! `u32` patch, channels, hidden, classes, `u32` tensor count, then per
//! tensor `u32` rank followed by its dims, then the flat `f64` payload.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result, SdcaError};
use crate::maps::{read_u32, read_f64, FeatureMap, Image, ScoreMap};
use crate::numeric::SdcaRng;

pub const MODEL_MAGIC: &[u8; 8] = b"SDCAMODL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_params(&self) -> usize {
        let p = self.patch_len();
        self.hidden * p + self.hidden + self.classes * self.hidden + self.classes
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.patch_len();
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        (w1, b1, w2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(SdcaError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.patch == 0 || self.patch % 2 == 0 {
            return bad("patch", "must be odd and positive");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    patches: Vec<f64>,
    pub features: FeatureMap,
    pub scores: ScoreMap,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        Ok(ModelParams {
            shape,
            data: vec![0.0; shape.num_params()],
        })
    }

    /// He-scaled Gaussian weights, zero biases.
    pub fn init(shape: ModelShape, rng: &mut SdcaRng) -> Result<Self> {
        let mut m = Self::zeros(shape)?;
        let (w1_end, b1_end, w2_end) = shape.offsets();
        let s1 = (2.0 / shape.patch_len() as f64).sqrt();
        let s2 = (1.0 / shape.hidden as f64).sqrt();
        for v in &mut m.data[..w1_end] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut m.data[b1_end..w2_end] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn w1(&self) -> &[f64] {
        &self.data[..self.shape.offsets().0]
    }

    pub fn b1(&self) -> &[f64] {
        let (a, b, _) = self.shape.offsets();
        &self.data[a..b]
    }

    pub fn w2(&self) -> &[f64] {
        let (_, b, c) = self.shape.offsets();
        &self.data[b..c]
    }

    pub fn b2(&self) -> &[f64] {
        &self.data[self.shape.offsets().2..]
    }

    fn extract_patches(&self, image: &Image) -> Vec<f64> {
        let (h, w, c) = (image.height, image.width, image.channels);
        let p = self.shape.patch;
        let half = (p / 2) as isize;
        let plen = self.shape.patch_len();
        let mut out = vec![0.0; h * w * plen];
        for r in 0..h {
            for col in 0..w {
                let dst = &mut out[(r * w + col) * plen..][..plen];
                for dr in 0..p {
                    let rr = r as isize + dr as isize - half;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in 0..p {
                        let cc = col as isize + dc as isize - half;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let src = (rr as usize * w + cc as usize) * c;
                        dst[(dr * p + dc) * c..][..c].copy_from_slice(&image.data[src..src + c]);
                    }
                }
            }
        }
        out
    }

    /// Feature map (post-ReLU hidden layer) and logits.
    pub fn forward(&self, image: &Image) -> Result<ForwardCache> {
        check_dim(self.shape.channels, image.channels)?;
        let (a, k, plen) = (self.shape.hidden, self.shape.classes, self.shape.patch_len());
        let n = image.num_pixels();
        let patches = self.extract_patches(image);
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let mut feats = vec![0.0; n * a];
        let mut logits = vec![0.0; n * k];
        for i in 0..n {
            let x = &patches[i * plen..][..plen];
            let f = &mut feats[i * a..][..a];
            for j in 0..a {
                let row = &w1[j * plen..][..plen];
                let z = b1[j] + row.iter().zip(x).map(|(u, v)| u * v).sum::<f64>();
                f[j] = z.max(0.0);
            }
            let o = &mut logits[i * k..][..k];
            for j in 0..k {
                let row = &w2[j * a..][..a];
                o[j] = b2[j] + row.iter().zip(f.iter()).map(|(u, v)| u * v).sum::<f64>();
            }
        }
        Ok(ForwardCache {
            patches,
            features: FeatureMap::from_data(image.height, image.width, a, feats)?,
            scores: ScoreMap::from_data(image.height, image.width, k, logits)?,
        })
    }

    /// Parameter gradient given upstream gradients on the features and the
    /// logits (either may be absent). Accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: Option<&[f64]>,
        grad_scores: Option<&[f64]>,
        grads: &mut [f64],
    ) -> Result<()> {
        let (a, k, plen) = (self.shape.hidden, self.shape.classes, self.shape.patch_len());
        let n = cache.features.num_pixels();
        check_dim(self.len(), grads.len())?;
        if let Some(g) = grad_features {
            check_dim(n * a, g.len())?;
        }
        if let Some(g) = grad_scores {
            check_dim(n * k, g.len())?;
        }
        let (w1_end, b1_end, w2_end) = self.shape.offsets();
        let w2 = self.w2();
        let (gw1, rest) = grads.split_at_mut(w1_end);
        let (gb1, rest) = rest.split_at_mut(b1_end - w1_end);
        let (gw2, gb2) = rest.split_at_mut(w2_end - b1_end);
        let mut df = vec![0.0; a];
        for i in 0..n {
            let f = cache.features.pixel(i);
            match grad_features {
                Some(g) => df.copy_from_slice(&g[i * a..][..a]),
                None => df.fill(0.0),
            }
            if let Some(g) = grad_scores {
                let go = &g[i * k..][..k];
                for j in 0..k {
                    let d = go[j];
                    if d == 0.0 {
                        continue;
                    }
                    gb2[j] += d;
                    let row = &mut gw2[j * a..][..a];
                    let wrow = &w2[j * a..][..a];
                    for h in 0..a {
                        row[h] += d * f[h];
                        df[h] += d * wrow[h];
                    }
                }
            }
            let x = &cache.patches[i * plen..][..plen];
            for h in 0..a {
                // ReLU: zero gradient at and below zero
                if f[h] <= 0.0 || df[h] == 0.0 {
                    continue;
                }
                let d = df[h];
                gb1[h] += d;
                for (g, v) in gw1[h * plen..][..plen].iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = self.shape;
        w.write_all(MODEL_MAGIC)?;
        for v in [MODEL_VERSION, s.patch as u32, s.channels as u32, s.hidden as u32, s.classes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let tensors: [&[usize]; 4] = [&[s.hidden, s.patch_len()], &[s.hidden], &[s.classes, s.hidden], &[s.classes]];
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for dims in tensors {
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(SdcaError::Format("not a model checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(SdcaError::Format(format!("unsupported model version {version}")));
        }
        let shape = ModelShape {
            patch: read_u32(r)? as usize,
            channels: read_u32(r)? as usize,
            hidden: read_u32(r)? as usize,
            classes: read_u32(r)? as usize,
        };
        shape.validate().map_err(|e| SdcaError::Format(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut total = 0usize;
        for _ in 0..count {
            let rank = read_u32(r)? as usize;
            let mut size = 1usize;
            for _ in 0..rank {
                size *= read_u32(r)? as usize;
            }
            total += size;
        }
        if total != shape.num_params() {
            return Err(SdcaError::Format(format!(
                "shape table holds {total} values, expected {}",
                shape.num_params()
            )));
        }
        let data = (0..total).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { shape, data })
    }
}

/// SGD with momentum, weight decay and a polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iter: u64,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, base_lr: f64, max_iter: u64) -> Self {
        OptimizerState {
            base_lr,
            power: 0.9,
            max_iter,
            momentum: 0.9,
            weight_decay: 1e-4,
            iter: 0,
            velocity: vec![0.0; num_params],
        }
    }

    /// `base_lr · (1 − iter/max_iter)^power`, zero from `max_iter` on.
    pub fn lr(&self) -> f64 {
        if self.max_iter == 0 || self.iter >= self.max_iter {
            return 0.0;
        }
        self.base_lr * (1.0 - self.iter as f64 / self.max_iter as f64).powf(self.power)
    }
}

/// `v ← momentum·v + g + wd·θ`, `θ ← θ − lr·v`, then advance the counter.
pub fn sgd_step(opt: &mut OptimizerState, params: &mut ModelParams, grads: &[f64]) -> Result<()> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), opt.velocity.len())?;
    let lr = opt.lr();
    for ((p, v), g) in params.data.iter_mut().zip(opt.velocity.iter_mut()).zip(grads) {
        *v = opt.momentum * *v + g + opt.weight_decay * *p;
        *p -= lr * *v;
    }
    opt.iter += 1;
    Ok(())
}
