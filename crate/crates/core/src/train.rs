//! Warm-up, contrastive adaptation and self-training loops.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::Rng;

use crate::bank::{CovarianceMode, DistributionBank, SpaceTag};
use crate::contrastive::{batch_level_loss, split_grads, ContrastiveOptions, Domain, PixelBatch, Temperature};
use crate::error::{Result, SdcaError};
use crate::maps::{Image, LabelMap};
use crate::metrics::{iou, pdd, ConfusionMatrix, IouReport};
use crate::model::{sgd_step, ForwardCache, ModelParams, OptimizerState};
use crate::pseudo::{downsample_labels, median_thresholds, pseudo_labels, self_supervised_loss, target_mask, DownsampleMode};
use crate::seg_loss::{cross_entropy, lovasz_softmax};
use crate::numeric::{rng_from_seed, SdcaRng};
use crate::synth::{augment_source, AugmentSpec, SceneSample};

/// Ablation rows: each mode adds one term to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    SourceOnly,
    SourceLov,
    FeatOnly,
    MultiLevel,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::SourceOnly, Mode::SourceLov, Mode::FeatOnly, Mode::MultiLevel, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::SourceLov => "source_lov",
            Mode::FeatOnly => "feat_only",
            Mode::MultiLevel => "multi_level",
            Mode::Full => "full",
        }
    }

    pub fn uses_lovasz(self) -> bool {
        self >= Mode::SourceLov
    }

    pub fn uses_feat(self) -> bool {
        self >= Mode::FeatOnly
    }

    pub fn uses_out(self) -> bool {
        self >= Mode::MultiLevel
    }

    pub fn uses_ssl(self) -> bool {
        self == Mode::Full
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = SdcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Mode::SourceOnly),
            "source_lov" | "+lov" | "lov" => Ok(Mode::SourceLov),
            "feat_only" => Ok(Mode::FeatOnly),
            "multi_level" => Ok(Mode::MultiLevel),
            "full" => Ok(Mode::Full),
            _ => Err(SdcaError::InvalidConfig {
                field: "mode".into(),
                reason: format!("unknown mode `{s}`"),
            }),
        }
    }
}

/// Which model the bank initialization pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankInit {
    #[default]
    PostWarmup,
    PreWarmup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub warmup_iters: u64,
    pub adapt_iters: u64,
    pub ssl_iters: u64,
    /// Images per domain per iteration.
    pub batch_size: usize,
    /// Temperature of the feature-level term.
    pub tau: f64,
    /// Temperature of the output-level term; `None` reuses `tau`.
    pub tau_out: Option<f64>,
    pub delta: f64,
    pub lambda_lov: f64,
    pub lambda_feat: f64,
    pub lambda_out: f64,
    pub normalize_queries: bool,
    pub covariance: CovarianceMode,
    pub bank_init: BankInit,
    pub downsample: DownsampleMode,
    /// Learning rate of the warm-up schedule.
    pub base_lr: f64,
    /// Learning rate of the adaptation schedule (restarted after warm-up).
    pub adapt_lr: f64,
    pub ssl_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub augment: AugmentSpec,
    /// Evaluate on the held-out set every this many iterations (0 = never).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Full,
            seed: 0,
            warmup_iters: 500,
            adapt_iters: 1000,
            ssl_iters: 500,
            batch_size: 1,
            tau: 0.1,
            tau_out: None,
            delta: 0.9,
            lambda_lov: 0.75,
            lambda_feat: 1.0,
            lambda_out: 1.0,
            normalize_queries: false,
            covariance: CovarianceMode::Full,
            bank_init: BankInit::PostWarmup,
            downsample: DownsampleMode::Nearest,
            base_lr: 2.5e-4,
            adapt_lr: 2.5e-4,
            ssl_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            augment: AugmentSpec::none(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(SdcaError::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive and finite");
        }
        if let Some(t) = self.tau_out {
            if !(t > 0.0 && t.is_finite()) {
                return bad("tau_out", "must be positive and finite");
            }
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta", "must lie in [0, 1]");
        }
        for (name, v) in [
            ("lambda_lov", self.lambda_lov),
            ("lambda_feat", self.lambda_feat),
            ("lambda_out", self.lambda_out),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be non-negative");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("adapt_lr", self.adapt_lr),
            ("ssl_lr", self.ssl_lr),
            ("weight_decay", self.weight_decay),
            ("power", self.power),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.augment.jitter >= 0.0) || !(0.0..=1.0).contains(&self.augment.blur_prob) {
            return bad("augment", "jitter must be >= 0 and blur probability in [0, 1]");
        }
        Ok(())
    }

    fn contrastive(&self, tau: f64) -> Result<ContrastiveOptions> {
        Ok(ContrastiveOptions {
            tau: Temperature::new(tau)?,
            normalize_queries: self.normalize_queries,
        })
    }

    fn optimizer(&self, num_params: usize, lr: f64, max_iter: u64) -> OptimizerState {
        OptimizerState {
            power: self.power,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..OptimizerState::new(num_params, lr, max_iter)
        }
    }
}

/// Feature-space and output-space statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BankPair {
    pub feature: DistributionBank,
    pub output: DistributionBank,
}

impl BankPair {
    pub fn new(params: &ModelParams, mode: CovarianceMode) -> Result<Self> {
        let s = params.shape;
        Ok(BankPair {
            feature: DistributionBank::new(s.classes, s.hidden, SpaceTag::Feature, mode)?,
            output: DistributionBank::new(s.classes, s.classes, SpaceTag::Output, mode)?,
        })
    }

    /// Full pass over labeled source scenes with the current model.
    pub fn init_from_source(&mut self, params: &ModelParams, source: &[SceneSample]) -> Result<()> {
        let caches = source.iter().map(|s| params.forward(&s.image)).collect::<Result<Vec<_>>>()?;
        self.feature
            .init_from_dataset(caches.iter().zip(source).map(|(c, s)| (&c.features, &s.labels)))?;
        self.output
            .init_from_dataset(caches.iter().zip(source).map(|(c, s)| (&c.scores, &s.labels)))?;
        Ok(())
    }

    pub fn update(&mut self, cache: &ForwardCache, labels: &LabelMap) -> Result<()> {
        self.feature.update_with_image(&cache.features, labels)?;
        self.output.update_with_image(&cache.scores, labels)
    }
}

/// Loss terms of one objective evaluation (unweighted), plus the weighted
/// total and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub ce: f64,
    pub lov: f64,
    pub feat: f64,
    pub out: f64,
    pub grads: Vec<f64>,
}

fn gather(
    caches: &[ForwardCache],
    masks: &[LabelMap],
    pick: impl Fn(&ForwardCache) -> &crate::maps::VectorMap,
    domain: Domain,
) -> Result<PixelBatch> {
    let dim = caches.first().map(|c| pick(c).channels).unwrap_or(0);
    let mut batch = PixelBatch::new(dim, domain);
    let mut offset = 0;
    for (c, m) in caches.iter().zip(masks) {
        let map = pick(c);
        for (i, &l) in m.labels.iter().enumerate() {
            if l != crate::maps::IGNORE_LABEL {
                batch.push(map.pixel(i), l as usize, offset + i)?;
            }
        }
        offset += map.num_pixels();
    }
    Ok(batch)
}

fn scatter(batch: &PixelBatch, grads: &[f64], per_image: &mut [Vec<f64>], pixels_per_image: usize) {
    let d = batch.dim;
    for (j, &p) in batch.pixel_index.iter().enumerate() {
        let (img, px) = (p / pixels_per_image, p % pixels_per_image);
        for (dst, g) in per_image[img][px * d..][..d].iter_mut().zip(&grads[j * d..][..d]) {
            *dst += g;
        }
    }
}

/// Target masks from the current predictions (argmax kept where confident).
pub fn target_masks(caches: &[ForwardCache], delta: f64) -> Vec<LabelMap> {
    caches.iter().map(|c| target_mask(&c.scores, delta).labels).collect()
}

/// Weighted training objective over one source and one target batch.
///
/// `target_masks` must line up with `target`; the masks and both banks are
/// treated as constants.
pub fn objective(
    params: &ModelParams,
    cfg: &TrainConfig,
    banks: &BankPair,
    source: &[(&Image, &LabelMap)],
    target: &[&Image],
    target_masks: &[LabelMap],
) -> Result<Objective> {
    let src_caches = source.iter().map(|(img, _)| params.forward(img)).collect::<Result<Vec<_>>>()?;
    let tgt_caches = target.iter().map(|img| params.forward(img)).collect::<Result<Vec<_>>>()?;
    objective_from_caches(params, cfg, banks, source, &src_caches, &tgt_caches, target_masks)
}

fn objective_from_caches(
    params: &ModelParams,
    cfg: &TrainConfig,
    banks: &BankPair,
    source: &[(&Image, &LabelMap)],
    src_caches: &[ForwardCache],
    tgt_caches: &[ForwardCache],
    target_masks: &[LabelMap],
) -> Result<Objective> {
    if source.is_empty() {
        return Err(SdcaError::EmptyInput("source batch"));
    }
    if target_masks.len() != tgt_caches.len() {
        return Err(SdcaError::DimensionMismatch {
            expected: tgt_caches.len(),
            got: target_masks.len(),
        });
    }
    let mode = cfg.mode;
    let ns = source.len() as f64;
    let mut out = Objective {
        total: 0.0,
        ce: 0.0,
        lov: 0.0,
        feat: 0.0,
        out: 0.0,
        grads: vec![0.0; params.len()],
    };
    let mut g_scores_s: Vec<Vec<f64>> = src_caches.iter().map(|c| vec![0.0; c.scores.data.len()]).collect();
    let mut g_feats_s: Vec<Vec<f64>> = src_caches.iter().map(|c| vec![0.0; c.features.data.len()]).collect();
    let mut g_scores_t: Vec<Vec<f64>> = tgt_caches.iter().map(|c| vec![0.0; c.scores.data.len()]).collect();
    let mut g_feats_t: Vec<Vec<f64>> = tgt_caches.iter().map(|c| vec![0.0; c.features.data.len()]).collect();

    for (i, ((_, labels), cache)) in source.iter().zip(src_caches).enumerate() {
        let ce = cross_entropy(&cache.scores, labels)?;
        out.ce += ce.value / ns;
        for (g, v) in g_scores_s[i].iter_mut().zip(&ce.grad) {
            *g += v / ns;
        }
        if mode.uses_lovasz() && cfg.lambda_lov > 0.0 {
            let lov = lovasz_softmax(&cache.scores, labels)?;
            out.lov += lov.value / ns;
            for (g, v) in g_scores_s[i].iter_mut().zip(&lov.grad) {
                *g += cfg.lambda_lov * v / ns;
            }
        }
    }

    let contrastive = mode.uses_feat() && cfg.lambda_feat > 0.0 || mode.uses_out() && cfg.lambda_out > 0.0;
    if contrastive {
        let src_masks = src_caches
            .iter()
            .zip(source)
            .map(|(c, (_, l))| downsample_labels(l, c.scores.height, c.scores.width, cfg.downsample))
            .collect::<Result<Vec<_>>>()?;
        let npix_s = src_caches[0].scores.num_pixels();
        let npix_t = tgt_caches.first().map(|c| c.scores.num_pixels()).unwrap_or(1);
        if mode.uses_feat() && cfg.lambda_feat > 0.0 {
            let s = gather(src_caches, &src_masks, |c| &c.features, Domain::Source)?;
            let t = gather(tgt_caches, target_masks, |c| &c.features, Domain::Target)?;
            let r = batch_level_loss(&s, &t, &banks.feature, cfg.contrastive(cfg.tau)?)?;
            out.feat = r.value;
            let (gs, gt) = split_grads(&r, s.len());
            let gs: Vec<f64> = gs.iter().map(|v| v * cfg.lambda_feat).collect();
            let gt: Vec<f64> = gt.iter().map(|v| v * cfg.lambda_feat).collect();
            scatter(&s, &gs, &mut g_feats_s, npix_s);
            scatter(&t, &gt, &mut g_feats_t, npix_t);
        }
        if mode.uses_out() && cfg.lambda_out > 0.0 {
            let s = gather(src_caches, &src_masks, |c| &c.scores, Domain::Source)?;
            let t = gather(tgt_caches, target_masks, |c| &c.scores, Domain::Target)?;
            let r = batch_level_loss(&s, &t, &banks.output, cfg.contrastive(cfg.tau_out.unwrap_or(cfg.tau))?)?;
            out.out = r.value;
            let (gs, gt) = split_grads(&r, s.len());
            let gs: Vec<f64> = gs.iter().map(|v| v * cfg.lambda_out).collect();
            let gt: Vec<f64> = gt.iter().map(|v| v * cfg.lambda_out).collect();
            scatter(&s, &gs, &mut g_scores_s, npix_s);
            scatter(&t, &gt, &mut g_scores_t, npix_t);
        }
    }

    out.total = out.ce + cfg.lambda_lov * out.lov + cfg.lambda_feat * out.feat + cfg.lambda_out * out.out;
    for (i, c) in src_caches.iter().enumerate() {
        params.backward(c, Some(&g_feats_s[i]), Some(&g_scores_s[i]), &mut out.grads)?;
    }
    if contrastive {
        for (i, c) in tgt_caches.iter().enumerate() {
            params.backward(c, Some(&g_feats_t[i]), Some(&g_scores_t[i]), &mut out.grads)?;
        }
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub phase: Phase,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub lov: f64,
    pub feat: f64,
    pub out: f64,
    pub ssl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adapt,
    Ssl,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Adapt => "adapt",
            Phase::Ssl => "ssl",
        }
    }
}

/// Periodic held-out evaluation during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    pub phase: Phase,
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub banks: BankPair,
    pub trace: Vec<TraceRow>,
    pub evals: Vec<EvalPoint>,
}

/// Warm-up plus adaptation.
///
/// The random stream (initialization, image sampling, augmentation) does not
/// depend on the mode, so runs that differ only in their loss terms see the
/// same data in the same order.
pub fn train_sdca(
    cfg: &TrainConfig,
    init: ModelParams,
    source: &[SceneSample],
    target: &[SceneSample],
    eval_set: Option<&[SceneSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(SdcaError::EmptyInput("source scenes"));
    }
    if target.is_empty() {
        return Err(SdcaError::EmptyInput("target scenes"));
    }
    let mut rng = rng_from_seed(cfg.seed ^ 0x7472_6169_6e00_0000);
    let mut params = init;
    let mut banks = BankPair::new(&params, cfg.covariance)?;
    let mut trace = Vec::new();
    let mut evals = Vec::new();
    let total_iters = cfg.warmup_iters + cfg.adapt_iters;
    let mut opt = cfg.optimizer(params.len(), cfg.base_lr, cfg.warmup_iters);
    let k = params.shape.classes;

    let warmup_cfg = TrainConfig {
        mode: Mode::SourceOnly,
        ..cfg.clone()
    };
    for it in 0..total_iters {
        let warm = it < cfg.warmup_iters;
        if it == 0 && cfg.bank_init == BankInit::PreWarmup {
            banks.init_from_source(&params, source)?;
        }
        if it == cfg.warmup_iters {
            opt = cfg.optimizer(params.len(), cfg.adapt_lr, cfg.adapt_iters);
            if cfg.bank_init == BankInit::PostWarmup {
                banks.init_from_source(&params, source)?;
                info!("banks initialized after {} warm-up iterations", cfg.warmup_iters);
            }
        }
        let src: Vec<SceneSample> = (0..cfg.batch_size)
            .map(|_| {
                let s = &source[rng.random_range(0..source.len())];
                augment_source(s, cfg.augment, &mut rng)
            })
            .collect();
        let tgt: Vec<&SceneSample> = (0..cfg.batch_size)
            .map(|_| &target[rng.random_range(0..target.len())])
            .collect();
        let pairs: Vec<(&Image, &LabelMap)> = src.iter().map(|s| (&s.image, &s.labels)).collect();
        let src_caches = src.iter().map(|s| params.forward(&s.image)).collect::<Result<Vec<_>>>()?;
        let (obj, phase) = if warm {
            (objective_from_caches(&params, &warmup_cfg, &banks, &pairs, &src_caches, &[], &[])?, Phase::Warmup)
        } else {
            let tgt_caches = tgt.iter().map(|s| params.forward(&s.image)).collect::<Result<Vec<_>>>()?;
            for (c, s) in src_caches.iter().zip(&src) {
                let m = downsample_labels(&s.labels, c.scores.height, c.scores.width, cfg.downsample)?;
                banks.update(c, &m)?;
            }
            let masks = target_masks(&tgt_caches, cfg.delta);
            (
                objective_from_caches(&params, cfg, &banks, &pairs, &src_caches, &tgt_caches, &masks)?,
                Phase::Adapt,
            )
        };
        if !obj.total.is_finite() {
            return Err(SdcaError::Diverged(it));
        }
        trace.push(TraceRow {
            iteration: it,
            phase,
            lr: opt.lr(),
            total: obj.total,
            ce: obj.ce,
            lov: obj.lov,
            feat: obj.feat,
            out: obj.out,
            ssl: 0.0,
        });
        sgd_step(&mut opt, &mut params, &obj.grads)?;
        if it % 100 == 0 {
            debug!("{} iter {it}: loss {:.5}", phase.name(), obj.total);
        }
        if let Some(ev) = eval_set {
            if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
                let r = evaluate(&params, ev, k)?;
                evals.push(EvalPoint {
                    iteration: it + 1,
                    phase,
                    miou: r.iou.miou,
                });
            }
        }
    }
    if cfg.adapt_iters == 0 && cfg.bank_init == BankInit::PostWarmup {
        banks.init_from_source(&params, source)?;
    }
    Ok(TrainOutcome {
        params,
        banks,
        trace,
        evals,
    })
}

/// Pseudo labels for every target scene from one frozen set of per-class
/// median thresholds.
pub fn make_pseudo_labels(params: &ModelParams, target: &[SceneSample]) -> Result<Vec<LabelMap>> {
    let caches = target.iter().map(|s| params.forward(&s.image)).collect::<Result<Vec<_>>>()?;
    let thresholds = median_thresholds(caches.iter().map(|c| &c.scores), params.shape.classes);
    caches
        .iter()
        .map(|c| pseudo_labels(&c.scores, &thresholds).map(|m| m.labels))
        .collect()
}

/// Cross-entropy fine-tuning on pseudo labels generated once up front.
pub fn finetune_ssl(
    cfg: &TrainConfig,
    params: ModelParams,
    target: &[SceneSample],
    first_iteration: u64,
    trace: &mut Vec<TraceRow>,
) -> Result<ModelParams> {
    cfg.validate()?;
    let labels = make_pseudo_labels(&params, target)?;
    let usable: Vec<usize> = (0..target.len()).filter(|&i| labels[i].num_valid() > 0).collect();
    if usable.is_empty() {
        return Err(SdcaError::NoValidPixels);
    }
    let mut rng: SdcaRng = rng_from_seed(cfg.seed ^ 0x7373_6c00_0000_0000);
    let mut params = params;
    let mut opt = cfg.optimizer(params.len(), cfg.ssl_lr, cfg.ssl_iters);
    for it in 0..cfg.ssl_iters {
        let mut grads = vec![0.0; params.len()];
        let mut value = 0.0;
        let nb = cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let i = usable[rng.random_range(0..usable.len())];
            let cache = params.forward(&target[i].image)?;
            let l = self_supervised_loss(&cache.scores, &labels[i])?;
            value += l.value / nb;
            let g: Vec<f64> = l.grad.iter().map(|v| v / nb).collect();
            params.backward(&cache, None, Some(&g), &mut grads)?;
        }
        trace.push(TraceRow {
            iteration: first_iteration + it,
            phase: Phase::Ssl,
            lr: opt.lr(),
            total: value,
            ce: 0.0,
            lov: 0.0,
            feat: 0.0,
            out: 0.0,
            ssl: value,
        });
        sgd_step(&mut opt, &mut params, &grads)?;
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
    pub features: PixelBatch,
}

/// Argmax predictions against ground truth, plus the labeled features.
pub fn evaluate(params: &ModelParams, samples: &[SceneSample], num_classes: usize) -> Result<EvalResult> {
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut features = PixelBatch::new(params.shape.hidden, Domain::Target);
    for (n, s) in samples.iter().enumerate() {
        let c = params.forward(&s.image)?;
        let pred = target_mask(&c.scores, 0.0).labels;
        confusion.accumulate(&s.labels, &pred)?;
        for (i, &l) in s.labels.labels.iter().enumerate() {
            if l != crate::maps::IGNORE_LABEL {
                features.push(c.features.pixel(i), l as usize, n * s.labels.num_pixels() + i)?;
            }
        }
    }
    let iou = iou(&confusion);
    Ok(EvalResult { confusion, iou, features })
}

/// Per-class discrimination distance of held-out features against the
/// feature-space class means.
pub fn feature_pdd(eval: &EvalResult, bank: &DistributionBank) -> Result<Vec<Option<f64>>> {
    pdd(&eval.features, &bank.means())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use crate::synth::{generate, ShiftSpec};

    fn small_setup() -> (ShiftSpec, Vec<SceneSample>, Vec<SceneSample>, ModelParams) {
        let spec = ShiftSpec {
            height: 10,
            width: 10,
            ..ShiftSpec::default()
        };
        let ds = generate(&spec, 1, 6, 4).unwrap();
        let shape = ModelShape {
            patch: 3,
            channels: 3,
            hidden: 6,
            classes: 4,
        };
        let params = ModelParams::init(shape, &mut rng_from_seed(2)).unwrap();
        (spec, ds.source, ds.target, params)
    }

    #[test]
    fn mode_ladder() {
        assert!(!Mode::SourceOnly.uses_lovasz());
        assert!(Mode::SourceLov.uses_lovasz() && !Mode::SourceLov.uses_feat());
        assert!(Mode::FeatOnly.uses_feat() && !Mode::FeatOnly.uses_out());
        assert!(Mode::MultiLevel.uses_out() && !Mode::MultiLevel.uses_ssl());
        assert!(Mode::Full.uses_ssl());
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SdcaError::InvalidConfig { field, .. }) if field == "tau"));
        let bad = TrainConfig {
            delta: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_out: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (_, src, tgt, params) = small_setup();
        let cfg = TrainConfig {
            mode: Mode::MultiLevel,
            tau: 0.5,
            delta: 0.0,
            ..TrainConfig::default()
        };
        let mut banks = BankPair::new(&params, CovarianceMode::Full).unwrap();
        banks.init_from_source(&params, &src).unwrap();
        let pairs = vec![(&src[0].image, &src[0].labels)];
        let timgs = vec![&tgt[0].image];
        let caches: Vec<ForwardCache> = timgs.iter().map(|i| params.forward(i).unwrap()).collect();
        let masks = target_masks(&caches, cfg.delta);
        let obj = objective(&params, &cfg, &banks, &pairs, &timgs, &masks).unwrap();
        assert!(obj.feat > 0.0 && obj.out > 0.0 && obj.lov > 0.0);
        let mut rng = rng_from_seed(3);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..params.len());
            let mut p = params.clone();
            p.data[i] += h;
            let up = objective(&p, &cfg, &banks, &pairs, &timgs, &masks).unwrap().total;
            p.data[i] -= 2.0 * h;
            let down = objective(&p, &cfg, &banks, &pairs, &timgs, &masks).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - obj.grads[i]).abs() / fd.abs().max(obj.grads[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", obj.grads[i]);
        }
    }

    #[test]
    fn warmup_decreases_cross_entropy() {
        let (_, src, tgt, params) = small_setup();
        let cfg = TrainConfig {
            warmup_iters: 100,
            adapt_iters: 0,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let out = train_sdca(&cfg, params, &src, &tgt, None).unwrap();
        assert_eq!(out.trace.len(), 100);
        let first: f64 = out.trace[..10].iter().map(|r| r.ce).sum();
        let last: f64 = out.trace[90..].iter().map(|r| r.ce).sum();
        assert!(last < first);
        assert!(out.banks.feature.classes().iter().all(|c| c.is_initialized()));
    }

    #[test]
    fn training_is_reproducible() {
        let (_, src, tgt, params) = small_setup();
        let cfg = TrainConfig {
            warmup_iters: 10,
            adapt_iters: 10,
            ssl_iters: 5,
            base_lr: 0.01,
            delta: 0.3,
            ..TrainConfig::default()
        };
        let a = train_sdca(&cfg, params.clone(), &src, &tgt, None).unwrap();
        let b = train_sdca(&cfg, params, &src, &tgt, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        let fa = finetune_ssl(&cfg, a.params, &tgt, 20, &mut ta).unwrap();
        let fb = finetune_ssl(&cfg, b.params, &tgt, 20, &mut tb).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ta.len(), 5);
        assert_eq!(ta[0].phase, Phase::Ssl);
    }

    #[test]
    fn source_only_ignores_contrastive_terms() {
        let (_, src, tgt, params) = small_setup();
        let cfg = TrainConfig {
            mode: Mode::SourceOnly,
            ..TrainConfig::default()
        };
        let mut banks = BankPair::new(&params, CovarianceMode::Full).unwrap();
        banks.init_from_source(&params, &src).unwrap();
        let pairs = vec![(&src[0].image, &src[0].labels)];
        let timgs = vec![&tgt[0].image];
        let masks = vec![LabelMap::filled(10, 10, 0)];
        let obj = objective(&params, &cfg, &banks, &pairs, &timgs, &masks).unwrap();
        assert_eq!((obj.lov, obj.feat, obj.out), (0.0, 0.0, 0.0));
        assert_eq!(obj.total, obj.ce);
    }

    #[test]
    fn evaluation_counts_every_labeled_pixel() {
        let (_, src, _, params) = small_setup();
        let r = evaluate(&params, &src, 4).unwrap();
        assert_eq!(r.confusion.total(), 600);
        assert_eq!(r.features.len(), 600);
    }
}
