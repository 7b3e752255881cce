//! Distribution-aware pixel contrastive loss.
//!
//! Each query `q` is contrasted against Gaussian class distributions instead
//! of sampled pixels. Taking the number of positive and negative samples to
//! infinity, applying Jensen's inequality and the Gaussian moment generating
//! function `E[exp(aᵀx)] = exp(aᵀμ + aᵀΣa / 2)` gives the closed-form bound
//!
//! ```text
//! l_k = q·μ_k / τ + qᵀΣ_k q / (2τ²)
//! L̄   = logsumexp(l) − q·μ⁺ / τ
//! ```
//!
//! whose gradient w.r.t. `q` is `Σ_k p_k (μ_k/τ + Σ_k q/τ²) − μ⁺/τ` with
//! `p = softmax(l)`. Bank statistics are constants here: no gradient flows
//! into the means or covariances.
//!
//! [`mc_expected_loss`] and [`finite_pair_loss`] evaluate the sampled forms
//! directly and serve as independent checks of the bound.

use std::sync::Once;

use log::warn;

use crate::bank::{ClassStats, DistributionBank};
use crate::error::{check_dim, Result, SdcaError};
use crate::maps::{LabelMap, VectorMap, IGNORE_LABEL};
use crate::numeric::{self, dot, log_sum_exp, psd_factor, SdcaRng};

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(SdcaError::InvalidTemperature(tau));
        }
        Ok(Temperature(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Queries `q_i` together with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBatch {
    pub dim: usize,
    /// Flattened `len × dim` query vectors.
    pub queries: Vec<f64>,
    pub labels: Vec<usize>,
    /// Index of each query in the map it was gathered from.
    pub pixel_index: Vec<usize>,
    pub domain: Domain,
}

impl PixelBatch {
    pub fn new(dim: usize, domain: Domain) -> Self {
        PixelBatch {
            dim,
            queries: Vec::new(),
            labels: Vec::new(),
            pixel_index: Vec::new(),
            domain,
        }
    }

    pub fn from_vectors(queries: &[Vec<f64>], labels: &[usize], domain: Domain) -> Result<Self> {
        check_dim(queries.len(), labels.len())?;
        let dim = queries.first().map(|q| q.len()).unwrap_or(0);
        let mut b = PixelBatch::new(dim, domain);
        for (i, (q, &l)) in queries.iter().zip(labels).enumerate() {
            b.push(q, l, i)?;
        }
        Ok(b)
    }

    /// Gather every non-ignored pixel of `map` labeled by `mask`.
    pub fn from_map(map: &VectorMap, mask: &LabelMap, domain: Domain) -> Result<Self> {
        check_dim(map.num_pixels(), mask.num_pixels())?;
        let mut b = PixelBatch::new(map.channels, domain);
        for (i, &l) in mask.labels.iter().enumerate() {
            if l != IGNORE_LABEL {
                b.push(map.pixel(i), l as usize, i)?;
            }
        }
        Ok(b)
    }

    pub fn push(&mut self, q: &[f64], label: usize, pixel: usize) -> Result<()> {
        check_dim(self.dim, q.len())?;
        self.queries.extend_from_slice(q);
        self.labels.push(label);
        self.pixel_index.push(pixel);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean loss over a batch and the gradient of that mean w.r.t. each query.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub dim: usize,
    /// Flattened per-query gradients, same order as the batch.
    pub grads: Vec<f64>,
}

impl LossResult {
    pub fn grad(&self, i: usize) -> &[f64] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.grads.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// InfoNCE on unit-normalized embeddings.
pub fn infonce_reference(z: &[f64], z_pos: &[f64], z_negs: &[Vec<f64>], tau: Temperature) -> Result<f64> {
    if z_negs.is_empty() {
        return Err(SdcaError::EmptyInput("infonce negatives"));
    }
    check_dim(z.len(), z_pos.len())?;
    let z = numeric::normalized(z);
    let t = tau.value();
    let mut logits = Vec::with_capacity(z_negs.len() + 1);
    logits.push(dot(&z, &numeric::normalized(z_pos)) / t);
    for n in z_negs {
        check_dim(z.len(), n.len())?;
        logits.push(dot(&z, &numeric::normalized(n)) / t);
    }
    Ok(log_sum_exp(&logits)? - logits[0])
}

/// Finite-pair loss together with the standard error of its mean over the
/// positive examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinitePairLoss {
    pub value: f64,
    pub std_error: f64,
}

/// Multi-pair contrastive loss with `M` explicit positives and `N` explicit
/// negatives for each other class; negatives of a class enter through their
/// mean exponentiated similarity.
pub fn finite_pair_loss(
    q: &[f64],
    positives: &[Vec<f64>],
    negatives_by_class: &[Vec<Vec<f64>>],
    tau: Temperature,
) -> Result<FinitePairLoss> {
    if positives.is_empty() {
        return Err(SdcaError::EmptyInput("finite_pair_loss positives"));
    }
    if negatives_by_class.is_empty() {
        return Err(SdcaError::EmptyInput("finite_pair_loss negative classes"));
    }
    let t = tau.value();
    let mut logits = Vec::with_capacity(negatives_by_class.len() + 1);
    logits.push(0.0);
    let mut scratch = Vec::new();
    for negs in negatives_by_class {
        if negs.is_empty() {
            return Err(SdcaError::EmptyInput("finite_pair_loss negatives"));
        }
        scratch.clear();
        for n in negs {
            check_dim(q.len(), n.len())?;
            scratch.push(dot(q, n) / t);
        }
        // log of the mean of exp
        logits.push(log_sum_exp(&scratch)? - (negs.len() as f64).ln());
    }

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for p in positives {
        check_dim(q.len(), p.len())?;
        let a = dot(q, p) / t;
        logits[0] = a;
        let term = log_sum_exp(&logits)? - a;
        sum += term;
        sum_sq += term * term;
    }
    let m = positives.len() as f64;
    let value = sum / m;
    let var = if positives.len() > 1 {
        ((sum_sq - m * value * value) / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(FinitePairLoss {
        value,
        std_error: (var / m).sqrt(),
    })
}

/// Monte-Carlo estimate of the expected loss under Gaussian positives and
/// negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Sample `q⁺ ~ N(μ⁺, Σ⁺)` and one `q⁻_j ~ N(μ⁻_j, Σ⁻_j)` per negative class,
/// `n_samples` times, and average the single-positive contrastive loss.
pub fn mc_expected_loss(
    q: &[f64],
    pos: &ClassStats,
    negs: &[&ClassStats],
    tau: Temperature,
    n_samples: usize,
    rng: &mut SdcaRng,
) -> Result<McEstimate> {
    if n_samples < 1000 {
        return Err(SdcaError::InvalidConfig {
            field: "n_samples".into(),
            reason: format!("need at least 1000 samples, got {n_samples}"),
        });
    }
    let d = q.len();
    if d == 0 {
        return Err(SdcaError::EmptyInput("mc_expected_loss query"));
    }
    let mut classes = Vec::with_capacity(negs.len() + 1);
    classes.push(pos);
    classes.extend_from_slice(negs);
    let mut factors = Vec::with_capacity(classes.len());
    for (k, c) in classes.iter().enumerate() {
        if !c.is_initialized() {
            return Err(SdcaError::UninitializedClass(k));
        }
        check_dim(d, c.dim())?;
        factors.push(psd_factor(&c.cov)?);
    }

    let t = tau.value();
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut logits = vec![0.0; classes.len()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        for (k, c) in classes.iter().enumerate() {
            numeric::draw_with_factor(&c.mean, &factors[k], rng, &mut z, &mut x);
            logits[k] = dot(q, &x) / t;
        }
        let term = log_sum_exp(&logits)? - logits[0];
        sum += term;
        sum_sq += term * term;
    }
    let n = n_samples as f64;
    let estimate = sum / n;
    let var = ((sum_sq - n * estimate * estimate) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate,
        std_error: (var / n).sqrt(),
    })
}

/// Closed-form upper bound on the expected loss and its gradient w.r.t. `q`.
pub fn closed_form_bound(
    q: &[f64],
    pos: &ClassStats,
    negs: &[&ClassStats],
    tau: Temperature,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; q.len()];
    let mut scratch = BoundScratch::default();
    let value = bound_into(q, pos, negs, tau, &mut scratch, &mut grad)?;
    Ok((value, grad))
}

#[derive(Default)]
struct BoundScratch {
    logits: Vec<f64>,
    sigma_q: Vec<Vec<f64>>,
}

/// Evaluates the bound, writing `∂L̄/∂q` into `grad`.
fn bound_into(
    q: &[f64],
    pos: &ClassStats,
    negs: &[&ClassStats],
    tau: Temperature,
    scratch: &mut BoundScratch,
    grad: &mut [f64],
) -> Result<f64> {
    let d = q.len();
    let t = tau.value();
    let inv_t = 1.0 / t;
    let inv_t2 = inv_t * inv_t;
    let n_cls = negs.len() + 1;

    scratch.logits.clear();
    scratch.sigma_q.resize_with(n_cls, Vec::new);
    for k in 0..n_cls {
        let c = if k == 0 { pos } else { negs[k - 1] };
        check_dim(d, c.dim())?;
        let sq = &mut scratch.sigma_q[k];
        sq.clear();
        sq.extend((0..d).map(|i| dot(c.cov.row(i), q)));
        let quad = dot(q, sq);
        scratch.logits.push(dot(q, &c.mean) * inv_t + 0.5 * quad * inv_t2);
    }

    let lse = log_sum_exp(&scratch.logits)?;
    let value = lse - dot(q, &pos.mean) * inv_t;

    grad.iter_mut().zip(&pos.mean).for_each(|(g, m)| *g = -m * inv_t);
    for k in 0..n_cls {
        let c = if k == 0 { pos } else { negs[k - 1] };
        let p = (scratch.logits[k] - lse).exp();
        let sq = &scratch.sigma_q[k];
        for i in 0..d {
            grad[i] += p * (c.mean[i] * inv_t + sq[i] * inv_t2);
        }
    }
    Ok(value)
}

/// Options shared by the batch-level losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOptions {
    pub tau: Temperature,
    /// Project queries onto the unit sphere before evaluating the bound.
    pub normalize_queries: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            tau: Temperature::default(),
            normalize_queries: false,
        }
    }
}

static SKIPPED_CLASS_WARNING: Once = Once::new();

/// Mean bound over one batch; the gradients carry the `1/|batch|` factor.
///
/// The positive distribution of a query is its own class; every other
/// initialized class is a negative.
pub fn mean_bound_loss(batch: &PixelBatch, bank: &DistributionBank, opts: ContrastiveOptions) -> Result<LossResult> {
    let d = batch.dim;
    if batch.is_empty() {
        return Ok(LossResult {
            value: 0.0,
            dim: d,
            grads: Vec::new(),
        });
    }
    check_dim(bank.dim(), d)?;
    let k = bank.num_classes();
    let initialized: Vec<bool> = bank.classes().iter().map(|c| c.is_initialized()).collect();
    if initialized.iter().any(|i| !i) {
        SKIPPED_CLASS_WARNING.call_once(|| {
            warn!("uninitialized classes are skipped as contrastive negatives");
        });
    }
    let negatives: Vec<Vec<&ClassStats>> = (0..k)
        .map(|own| {
            (0..k)
                .filter(|&j| j != own && initialized[j])
                .map(|j| bank.class(j))
                .collect()
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut scratch = BoundScratch::default();
    let mut grads = vec![0.0; batch.len() * d];
    let mut total = 0.0;
    let mut unit = vec![0.0; d];
    let mut g_unit = vec![0.0; d];
    for (i, g) in grads.chunks_exact_mut(d).enumerate() {
        let label = batch.labels[i];
        if label >= k {
            return Err(SdcaError::DimensionMismatch { expected: k, got: label + 1 });
        }
        if !initialized[label] {
            return Err(SdcaError::UninitializedClass(label));
        }
        let q = batch.query(i);
        let pos = bank.class(label);
        if opts.normalize_queries {
            let n = numeric::norm(q);
            if n == 0.0 {
                total += bound_into(q, pos, &negatives[label], opts.tau, &mut scratch, g)?;
            } else {
                for (u, v) in unit.iter_mut().zip(q) {
                    *u = v / n;
                }
                total += bound_into(&unit, pos, &negatives[label], opts.tau, &mut scratch, &mut g_unit)?;
                // d(q/|q|)/dq = (I − q̂q̂ᵀ)/|q|
                let proj = dot(&g_unit, &unit);
                for j in 0..d {
                    g[j] = (g_unit[j] - proj * unit[j]) / n;
                }
            }
        } else {
            total += bound_into(q, pos, &negatives[label], opts.tau, &mut scratch, g)?;
        }
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(LossResult {
        value: total * scale,
        dim: d,
        grads,
    })
}

/// Source term plus target term, each averaged over its own batch.
///
/// The returned gradients are the source gradients followed by the target
/// gradients. An empty target batch contributes nothing.
pub fn batch_level_loss(
    source: &PixelBatch,
    target: &PixelBatch,
    bank: &DistributionBank,
    opts: ContrastiveOptions,
) -> Result<LossResult> {
    if source.is_empty() {
        return Err(SdcaError::EmptyInput("source batch"));
    }
    let s = mean_bound_loss(source, bank, opts)?;
    let t = mean_bound_loss(target, bank, opts)?;
    let mut grads = s.grads;
    grads.extend_from_slice(&t.grads);
    Ok(LossResult {
        value: s.value + t.value,
        dim: source.dim,
        grads,
    })
}

/// Split a [`batch_level_loss`] result back into source and target halves.
pub fn split_grads<'a>(result: &'a LossResult, source_len: usize) -> (&'a [f64], &'a [f64]) {
    result.grads.split_at(source_len * result.dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{CovarianceMode, SpaceTag};
    use crate::numeric::{rng_from_seed, Mat};
    use rand::Rng;

    const LOG_1P_EM1: f64 = 0.313_261_687_518_222_8; // ln(1 + e^-1)

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert_eq!(Temperature::default().value(), 0.1);
    }

    #[test]
    fn infonce_examples() {
        let v = infonce_reference(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], tau(1.0)).unwrap();
        assert!((v - LOG_1P_EM1).abs() < 1e-15);
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);

        // z ⟂ everything: uniform logits
        let z = [1.0, 0.0, 0.0, 0.0, 0.0];
        let pos = [0.0, 1.0, 0.0, 0.0, 0.0];
        let negs = vec![
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let v = infonce_reference(&z, &pos, &negs, tau(1.0)).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-14);

        // unnormalized inputs against the naive formula
        let mut rng = rng_from_seed(4);
        for _ in 0..20 {
            let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
            let z = r(4);
            let p = r(4);
            let negs: Vec<Vec<f64>> = (0..3).map(|_| r(4)).collect();
            let t = 0.5;
            let unit = |v: &[f64]| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect::<Vec<_>>()
            };
            let zn = unit(&z);
            let e = |v: &[f64]| (zn.iter().zip(unit(v)).map(|(a, b)| a * b).sum::<f64>() / t).exp();
            let num = e(&p);
            let den = num + negs.iter().map(|n| e(n)).sum::<f64>();
            let naive = -(num / den).ln();
            let v = infonce_reference(&z, &p, &negs, tau(t)).unwrap();
            assert!((v - naive).abs() < 1e-12);
        }
        assert!(infonce_reference(&z, &pos, &[], tau(1.0)).is_err());
    }

    #[test]
    fn finite_pair_examples() {
        let v = finite_pair_loss(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![vec![0.0, 1.0]]], tau(1.0)).unwrap();
        assert!((v.value - LOG_1P_EM1).abs() < 1e-15);

        let q = [0.3, -0.7, 1.1];
        let p = vec![0.5, 0.2, -0.1];
        let n1 = vec![-0.4, 0.9, 0.0];
        let n2 = vec![1.0, 1.0, 1.0];
        let small = finite_pair_loss(&q, &[p.clone()], &[vec![n1.clone()], vec![n2.clone()]], tau(0.3)).unwrap();
        let big = finite_pair_loss(&q, &vec![p; 7], &[vec![n1; 5], vec![n2; 11]], tau(0.3)).unwrap();
        assert!((small.value - big.value).abs() < 1e-13);
        assert!(big.std_error < 1e-12);

        assert!(finite_pair_loss(&q, &[], &[vec![vec![0.0; 3]]], tau(1.0)).is_err());
        assert!(finite_pair_loss(&q, &[vec![0.0; 3]], &[vec![]], tau(1.0)).is_err());
        assert!(finite_pair_loss(&q, &[vec![0.0; 3]], &[], tau(1.0)).is_err());
    }

    #[test]
    fn bound_examples() {
        let pos = ClassStats::point(vec![1.0, 0.0], 10);
        let neg = ClassStats::point(vec![0.0, 1.0], 10);
        let (v, _) = closed_form_bound(&[1.0, 0.0], &pos, &[&neg], tau(1.0)).unwrap();
        assert!((v - LOG_1P_EM1).abs() < 1e-15);

        let pos_i = ClassStats {
            cov: Mat::identity(2),
            ..pos.clone()
        };
        let neg_i = ClassStats {
            cov: Mat::identity(2),
            ..neg.clone()
        };
        let (v, _) = closed_form_bound(&[1.0, 0.0], &pos_i, &[&neg_i], tau(1.0)).unwrap();
        assert!((v - (LOG_1P_EM1 + 0.5)).abs() < 1e-14);

        assert!(closed_form_bound(&[1.0], &pos, &[&neg], tau(1.0)).is_err());
    }

    #[test]
    fn mc_with_point_masses_equals_bound() {
        let pos = ClassStats::point(vec![0.4, -0.2, 0.1], 5);
        let n1 = ClassStats::point(vec![-0.3, 0.5, 0.0], 5);
        let n2 = ClassStats::point(vec![0.0, 0.1, 0.9], 5);
        let q = [0.7, 0.2, -0.5];
        let mc = mc_expected_loss(&q, &pos, &[&n1, &n2], tau(0.2), 2000, &mut rng_from_seed(1)).unwrap();
        let (b, _) = closed_form_bound(&q, &pos, &[&n1, &n2], tau(0.2)).unwrap();
        assert!((mc.estimate - b).abs() < 1e-10);
        assert!(mc.std_error < 1e-10);
    }

    #[test]
    fn mc_is_reproducible_and_validates_inputs() {
        let pos = ClassStats {
            count: 3,
            mean: vec![0.1, 0.2],
            cov: Mat::identity(2),
        };
        let neg = ClassStats {
            count: 3,
            mean: vec![-0.1, 0.3],
            cov: Mat::from_diag(&[0.5, 0.2]),
        };
        let q = [0.3, 0.4];
        let a = mc_expected_loss(&q, &pos, &[&neg], tau(0.5), 5000, &mut rng_from_seed(7)).unwrap();
        let b = mc_expected_loss(&q, &pos, &[&neg], tau(0.5), 5000, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        assert!(mc_expected_loss(&q, &pos, &[&neg], tau(0.5), 10, &mut rng_from_seed(7)).is_err());
        assert!(mc_expected_loss(&[], &pos, &[&neg], tau(0.5), 5000, &mut rng_from_seed(7)).is_err());
        let empty = ClassStats::empty(2);
        assert!(matches!(
            mc_expected_loss(&q, &pos, &[&empty], tau(0.5), 5000, &mut rng_from_seed(7)),
            Err(SdcaError::UninitializedClass(1))
        ));
    }

    #[test]
    fn symmetric_setup_sits_near_log_two() {
        // q equidistant from both means, equal covariances: by symmetry the
        // expected loss is E[log(1 + e^{X})] with X symmetric about zero,
        // which is log 2 only in the zero-variance limit and above it otherwise.
        let cov = Mat::from_diag(&[0.05, 0.05]);
        let pos = ClassStats { count: 4, mean: vec![1.0, 0.0], cov: cov.clone() };
        let neg = ClassStats { count: 4, mean: vec![0.0, 1.0], cov };
        let q = [1.0, 1.0];
        let mc = mc_expected_loss(&q, &pos, &[&neg], tau(1.0), 1_000_000, &mut rng_from_seed(3)).unwrap();
        // X = (q·(x⁻ − x⁺)) ~ N(0, 2·qᵀΣq) = N(0, 0.2); E log(1+e^X) by quadrature
        let s = 0.2f64.sqrt();
        let mut quad = 0.0f64;
        let h = 1e-3;
        let mut x: f64 = -10.0;
        while x <= 10.0 {
            let w = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            quad += w * (1.0 + (s * x).exp()).ln() * h;
            x += h;
        }
        assert!((mc.estimate - quad).abs() < 3.0 * mc.std_error, "{} vs {}", mc.estimate, quad);
        assert!(quad > 2f64.ln());
        let (b, _) = closed_form_bound(&q, &pos, &[&neg], tau(1.0)).unwrap();
        assert!(b >= mc.estimate);
    }

    fn random_stats(rng: &mut SdcaRng, d: usize) -> ClassStats {
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = Mat::zeros(d);
        for v in a.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        ClassStats { count: 10, mean, cov: a.mul_transpose_self() }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_from_seed(21);
        for _ in 0..25 {
            let d = rng.random_range(2..6);
            let k = rng.random_range(2..5);
            let stats: Vec<ClassStats> = (0..k).map(|_| random_stats(&mut rng, d)).collect();
            let negs: Vec<&ClassStats> = stats[1..].iter().collect();
            let t = tau([0.1, 0.5, 1.0][rng.random_range(0..3)]);
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let (_, g) = closed_form_bound(&q, &stats[0], &negs, t).unwrap();
            let h = 1e-5;
            for i in 0..d {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let fp = closed_form_bound(&qp, &stats[0], &negs, t).unwrap().0;
                let fm = closed_form_bound(&qm, &stats[0], &negs, t).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "coord {i}: fd {fd} vs analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn common_covariance_shift_adds_quadratic_term() {
        let mut rng = rng_from_seed(13);
        for _ in 0..20 {
            let d = 3;
            let stats: Vec<ClassStats> = (0..4).map(|_| random_stats(&mut rng, d)).collect();
            let extra = random_stats(&mut rng, d).cov;
            let shifted: Vec<ClassStats> = stats
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    c.cov.add_scaled(1.0, &extra).unwrap();
                    c
                })
                .collect();
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = tau(0.5);
            let a = closed_form_bound(&q, &stats[0], &stats[1..].iter().collect::<Vec<_>>(), t).unwrap().0;
            let b = closed_form_bound(&q, &shifted[0], &shifted[1..].iter().collect::<Vec<_>>(), t).unwrap().0;
            let expect = crate::numeric::quadratic_form(&q, &extra).unwrap() / (2.0 * 0.25);
            assert!((b - a - expect).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn high_temperature_tends_to_log_k() {
        let mut rng = rng_from_seed(17);
        let stats: Vec<ClassStats> = (0..5).map(|_| random_stats(&mut rng, 4)).collect();
        let q = [0.3, -0.2, 0.5, 0.1];
        let negs: Vec<&ClassStats> = stats[1..].iter().collect();
        let v = closed_form_bound(&q, &stats[0], &negs, tau(1e6)).unwrap().0;
        assert!((v - 5f64.ln()).abs() < 1e-5);
    }

    fn toy_bank() -> DistributionBank {
        let c0 = ClassStats { count: 5, mean: vec![1.0, 0.0], cov: Mat::from_diag(&[0.1, 0.2]) };
        let c1 = ClassStats { count: 5, mean: vec![0.0, 1.0], cov: Mat::from_diag(&[0.3, 0.1]) };
        DistributionBank::from_classes(vec![c0, c1], SpaceTag::Feature, CovarianceMode::Full).unwrap()
    }

    #[test]
    fn batch_level_examples() {
        let bank = toy_bank();
        let opts = ContrastiveOptions { tau: tau(0.5), normalize_queries: false };
        let q1 = vec![0.5, 0.2];
        let q2 = vec![-0.1, 0.7];
        let b1 = closed_form_bound(&q1, bank.class(0), &[bank.class(1)], opts.tau).unwrap();
        let b2 = closed_form_bound(&q2, bank.class(1), &[bank.class(0)], opts.tau).unwrap();

        let single = PixelBatch::from_vectors(&[q1.clone()], &[0], Domain::Source).unwrap();
        let empty = PixelBatch::new(2, Domain::Target);
        let r = batch_level_loss(&single, &empty, &bank, opts).unwrap();
        assert!((r.value - b1.0).abs() < 1e-15);
        assert_eq!(r.grad(0), b1.1.as_slice());

        let pair = PixelBatch::from_vectors(&[q1.clone(), q2.clone()], &[0, 1], Domain::Source).unwrap();
        let r = batch_level_loss(&pair, &empty, &bank, opts).unwrap();
        assert!((r.value - 0.5 * (b1.0 + b2.0)).abs() < 1e-15);
        assert!((r.grad(1)[0] - 0.5 * b2.1[0]).abs() < 1e-15);

        let target = PixelBatch::from_vectors(&[q2.clone()], &[1], Domain::Target).unwrap();
        let r = batch_level_loss(&single, &target, &bank, opts).unwrap();
        assert!((r.value - (b1.0 + b2.0)).abs() < 1e-14);
        let (gs, gt) = split_grads(&r, 1);
        assert_eq!(gs, b1.1.as_slice());
        assert_eq!(gt, b2.1.as_slice());

        assert!(batch_level_loss(&empty, &target, &bank, opts).is_err());
    }

    #[test]
    fn uninitialized_classes_are_skipped_as_negatives() {
        let c0 = ClassStats { count: 5, mean: vec![1.0, 0.0], cov: Mat::from_diag(&[0.1, 0.2]) };
        let c1 = ClassStats { count: 5, mean: vec![0.0, 1.0], cov: Mat::from_diag(&[0.3, 0.1]) };
        let bank =
            DistributionBank::from_classes(vec![c0.clone(), c1.clone(), ClassStats::empty(2)], SpaceTag::Feature, CovarianceMode::Full)
                .unwrap();
        let opts = ContrastiveOptions { tau: tau(0.5), normalize_queries: false };
        let q = vec![0.2, 0.3];
        let batch = PixelBatch::from_vectors(&[q.clone()], &[0], Domain::Source).unwrap();
        let r = mean_bound_loss(&batch, &bank, opts).unwrap();
        let b = closed_form_bound(&q, &c0, &[&c1], opts.tau).unwrap();
        assert_eq!(r.value, b.0);

        let bad = PixelBatch::from_vectors(&[q], &[2], Domain::Target).unwrap();
        assert!(matches!(mean_bound_loss(&bad, &bank, opts), Err(SdcaError::UninitializedClass(2))));
    }

    #[test]
    fn normalized_queries_gradient_matches_differences() {
        let bank = toy_bank();
        let opts = ContrastiveOptions { tau: tau(0.3), normalize_queries: true };
        let q = vec![0.8, -0.3];
        let batch = PixelBatch::from_vectors(&[q.clone()], &[1], Domain::Source).unwrap();
        let r = mean_bound_loss(&batch, &bank, opts).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let fp = mean_bound_loss(&PixelBatch::from_vectors(&[qp], &[1], Domain::Source).unwrap(), &bank, opts).unwrap().value;
            let fm = mean_bound_loss(&PixelBatch::from_vectors(&[qm], &[1], Domain::Source).unwrap(), &bank, opts).unwrap().value;
            assert!(((fp - fm) / (2.0 * h) - r.grad(0)[i]).abs() < 1e-7);
        }
    }
}
