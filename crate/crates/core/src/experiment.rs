//! Experiment configuration, end-to-end runs, sweeps and artifact output.
//!
//! Config files are flat `key = value` text; `#` starts a comment. Vector
//! values are comma separated, matrices use `;` between rows. Unknown keys
//! are rejected.
//!
//! A run directory contains:
//!
//! - `config.txt`: the fully resolved configuration in the same format
//! - `metrics.csv`: `iteration,split,metric,class,value` (class is `all` for
//!   aggregates)
//! - `train_log.csv`: `iteration,phase,lr,loss_total,loss_ce,loss_lov,loss_feat,loss_out,loss_ssl`
//! - `summary.json`: headline numbers
//! - `model.bin`, `bank_feature.bin`, `bank_output.bin`: checkpoints
//! - `embeddings.bin`: labeled held-out target features

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::bank::{CovarianceMode, DistributionBank, SpaceTag};
use crate::error::{Result, SdcaError};
use crate::metrics::{export_embeddings, tail_classes};
use crate::model::{ModelParams, ModelShape};
use crate::numeric::rng_from_seed;
use crate::pseudo::DownsampleMode;
use crate::synth::{class_pixel_counts, generate, SceneSample, ShiftSpec};
use crate::train::{evaluate, BankInit, feature_pdd, finetune_ssl, train_sdca, EvalResult, Mode, TraceRow, TrainConfig};

/// Environment variable naming the directory under which runs are written
/// when no explicit output directory is given.
pub const OUTPUT_ROOT_ENV: &str = "SDCA_OUTPUT_ROOT";

pub const METRICS_HEADER: &str = "iteration,split,metric,class,value";
pub const TRAIN_LOG_HEADER: &str = "iteration,phase,lr,loss_total,loss_ce,loss_lov,loss_feat,loss_out,loss_ssl";
pub const SWEEP_HEADER: &str = "parameter,value,seed,mode,target_miou,tail_miou,mean_pdd,source_miou";

/// Share of source pixels below which a class counts as a tail class.
pub const TAIL_SHARE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: ShiftSpec,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub patch: usize,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: ShiftSpec::default(),
            n_source: 40,
            n_target: 40,
            n_eval: 20,
            patch: 3,
            hidden: 16,
            train: TrainConfig {
                adapt_iters: 4000,
                batch_size: 4,
                tau: 3.0,
                tau_out: Some(20.0),
                base_lr: 0.05,
                adapt_lr: 0.01,
                ssl_lr: 0.01,
                ..TrainConfig::default()
            },
        }
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_mat(m: &[Vec<f64>]) -> String {
    m.iter().map(|r| fmt_vec(r)).collect::<Vec<_>>().join(";")
}

fn invalid(field: &str, reason: impl Into<String>) -> SdcaError {
    SdcaError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn parse_vec(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_num(key, x)).collect()
}

fn parse_mat(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';').map(|r| parse_vec(key, r)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, format!("expected a boolean, got `{v}`"))),
    }
}

/// Sweepable parameters and their config keys.
pub const SWEEP_PARAMETERS: [&str; 6] = ["delta", "lambda_lov", "lambda_feat", "lambda_out", "tau", "tau_out"];

impl ExperimentConfig {
    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            patch: self.patch,
            channels: self.scene.channels(),
            hidden: self.hidden,
            classes: self.scene.num_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.model_shape().validate()?;
        if self.n_source == 0 {
            return Err(invalid("n_source", "need at least one source scene"));
        }
        if self.n_target == 0 {
            return Err(invalid("n_target", "need at least one target scene"));
        }
        if self.n_eval == 0 {
            return Err(invalid("n_eval", "need at least one held-out scene"));
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "seed" => t.seed = parse_num(key, v)?,
            "mode" => t.mode = v.parse()?,
            "n_source" => self.n_source = parse_num(key, v)?,
            "n_target" => self.n_target = parse_num(key, v)?,
            "n_eval" => self.n_eval = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "height" => s.height = parse_num(key, v)?,
            "width" => s.width = parse_num(key, v)?,
            "class_means" => s.class_means = parse_mat(key, v)?,
            "class_stds" => s.class_stds = parse_mat(key, v)?,
            "class_weights" => s.class_weights = parse_vec(key, v)?,
            "shapes_per_image" => s.shapes_per_image = parse_num(key, v)?,
            "min_shape" => s.min_shape = parse_num(key, v)?,
            "max_shape" => s.max_shape = parse_num(key, v)?,
            "tail_class" => {
                s.tail_class = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "tail_fraction" => s.tail_fraction = parse_num(key, v)?,
            "ignore_margin" => s.ignore_margin = parse_num(key, v)?,
            "target_gain" => s.target_gain = parse_vec(key, v)?,
            "target_bias" => s.target_bias = parse_vec(key, v)?,
            "target_noise" => s.target_noise = parse_num(key, v)?,
            "warmup_iters" => t.warmup_iters = parse_num(key, v)?,
            "adapt_iters" => t.adapt_iters = parse_num(key, v)?,
            "ssl_iters" => t.ssl_iters = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "tau" => t.tau = parse_num(key, v)?,
            "tau_out" => {
                t.tau_out = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "delta" => t.delta = parse_num(key, v)?,
            "lambda_lov" => t.lambda_lov = parse_num(key, v)?,
            "lambda_feat" => t.lambda_feat = parse_num(key, v)?,
            "lambda_out" => t.lambda_out = parse_num(key, v)?,
            "normalize_queries" => t.normalize_queries = parse_bool(key, v)?,
            "covariance" => {
                t.covariance = match v {
                    "full" => CovarianceMode::Full,
                    "diagonal" => CovarianceMode::Diagonal,
                    _ => return Err(invalid(key, format!("expected full or diagonal, got `{v}`"))),
                }
            }
            "bank_init" => {
                t.bank_init = match v {
                    "post_warmup" => BankInit::PostWarmup,
                    "pre_warmup" => BankInit::PreWarmup,
                    _ => return Err(invalid(key, format!("expected post_warmup or pre_warmup, got `{v}`"))),
                }
            }
            "downsample" => {
                t.downsample = match v {
                    "nearest" => DownsampleMode::Nearest,
                    "majority" => DownsampleMode::Majority,
                    _ => return Err(invalid(key, format!("expected nearest or majority, got `{v}`"))),
                }
            }
            "base_lr" => t.base_lr = parse_num(key, v)?,
            "adapt_lr" => t.adapt_lr = parse_num(key, v)?,
            "ssl_lr" => t.ssl_lr = parse_num(key, v)?,
            "momentum" => t.momentum = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "power" => t.power = parse_num(key, v)?,
            "jitter" => t.augment.jitter = parse_num(key, v)?,
            "blur_prob" => t.augment.blur_prob = parse_num(key, v)?,
            "eval_every" => t.eval_every = parse_num(key, v)?,
            other => return Err(SdcaError::UnknownParameter(other.to_string())),
        }
        Ok(())
    }

    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SdcaError::Format(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.scene;
        vec![
            ("seed", t.seed.to_string()),
            ("mode", t.mode.to_string()),
            ("n_source", self.n_source.to_string()),
            ("n_target", self.n_target.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("patch", self.patch.to_string()),
            ("hidden", self.hidden.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("class_means", fmt_mat(&s.class_means)),
            ("class_stds", fmt_mat(&s.class_stds)),
            ("class_weights", fmt_vec(&s.class_weights)),
            ("shapes_per_image", s.shapes_per_image.to_string()),
            ("min_shape", s.min_shape.to_string()),
            ("max_shape", s.max_shape.to_string()),
            ("tail_class", s.tail_class.map_or("none".into(), |c| c.to_string())),
            ("tail_fraction", s.tail_fraction.to_string()),
            ("ignore_margin", s.ignore_margin.to_string()),
            ("target_gain", fmt_vec(&s.target_gain)),
            ("target_bias", fmt_vec(&s.target_bias)),
            ("target_noise", s.target_noise.to_string()),
            ("warmup_iters", t.warmup_iters.to_string()),
            ("adapt_iters", t.adapt_iters.to_string()),
            ("ssl_iters", t.ssl_iters.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("tau", t.tau.to_string()),
            ("tau_out", t.tau_out.map_or("none".into(), |x| x.to_string())),
            ("delta", t.delta.to_string()),
            ("lambda_lov", t.lambda_lov.to_string()),
            ("lambda_feat", t.lambda_feat.to_string()),
            ("lambda_out", t.lambda_out.to_string()),
            ("normalize_queries", t.normalize_queries.to_string()),
            (
                "covariance",
                match t.covariance {
                    CovarianceMode::Full => "full",
                    CovarianceMode::Diagonal => "diagonal",
                }
                .into(),
            ),
            (
                "bank_init",
                match t.bank_init {
                    BankInit::PostWarmup => "post_warmup",
                    BankInit::PreWarmup => "pre_warmup",
                }
                .into(),
            ),
            (
                "downsample",
                match t.downsample {
                    DownsampleMode::Nearest => "nearest",
                    DownsampleMode::Majority => "majority",
                }
                .into(),
            ),
            ("base_lr", t.base_lr.to_string()),
            ("adapt_lr", t.adapt_lr.to_string()),
            ("ssl_lr", t.ssl_lr.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("power", t.power.to_string()),
            ("jitter", t.augment.jitter.to_string()),
            ("blur_prob", t.augment.blur_prob.to_string()),
            ("eval_every", t.eval_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Source scenes, adaptation target scenes and held-out target scenes.
#[derive(Debug, Clone)]
pub struct Splits {
    pub source: Vec<SceneSample>,
    pub target: Vec<SceneSample>,
    pub eval: Vec<SceneSample>,
}

pub fn make_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let mut ds = generate(&cfg.scene, cfg.train.seed, cfg.n_source, cfg.n_target + cfg.n_eval)?;
    let eval = ds.target.split_off(cfg.n_target);
    Ok(Splits {
        source: ds.source,
        target: ds.target,
        eval,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub target_miou: f64,
    pub tail_miou: Option<f64>,
    pub source_miou: f64,
    pub mean_pdd: f64,
    pub tail_classes: Vec<usize>,
    pub target_iou: Vec<Option<f64>>,
    pub pdd: Vec<Option<f64>>,
}

/// Everything a run produces before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub params: ModelParams,
    pub feature_bank: DistributionBank,
    pub output_bank: DistributionBank,
    pub trace: Vec<TraceRow>,
    pub evals: Vec<crate::train::EvalPoint>,
    pub target_eval: EvalResult,
    pub source_eval: EvalResult,
    pub summary: RunSummary,
}

/// Held-out evaluation of a trained model: IoU, tail IoU and the
/// discrimination distance against class means re-estimated on the source
/// scenes with the final model.
pub fn assess(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    splits: &Splits,
) -> Result<(EvalResult, EvalResult, RunSummary)> {
    let k = cfg.scene.num_classes();
    let target_eval = evaluate(params, &splits.eval, k)?;
    let source_eval = evaluate(params, &splits.source, k)?;
    let tails = tail_classes(&class_pixel_counts(&splits.source, k), TAIL_SHARE);
    let mut centers = DistributionBank::new(k, params.shape.hidden, SpaceTag::Feature, CovarianceMode::Diagonal)?;
    let caches = splits.source.iter().map(|s| params.forward(&s.image)).collect::<Result<Vec<_>>>()?;
    centers.init_from_dataset(caches.iter().zip(&splits.source).map(|(c, s)| (&c.features, &s.labels)))?;
    let pdd = feature_pdd(&target_eval, &centers)?;
    let present: Vec<f64> = pdd.iter().flatten().copied().collect();
    let mean_pdd = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let summary = RunSummary {
        mode: cfg.train.mode.to_string(),
        seed: cfg.train.seed,
        target_miou: target_eval.iou.miou,
        tail_miou: target_eval.iou.mean_over(&tails),
        source_miou: source_eval.iou.miou,
        mean_pdd,
        tail_classes: tails,
        target_iou: target_eval.iou.per_class.clone(),
        pdd,
    };
    Ok((target_eval, source_eval, summary))
}

/// Generate data, train in the configured mode and evaluate.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    run_on(cfg, &splits)
}

/// [`run`] on pre-generated scenes.
pub fn run_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut init_rng = rng_from_seed(cfg.train.seed ^ 0x6d6f_6465_6c00_0000);
    let init = ModelParams::init(cfg.model_shape(), &mut init_rng)?;
    info!("training mode {} seed {}", cfg.train.mode, cfg.train.seed);
    let out = train_sdca(&cfg.train, init, &splits.source, &splits.target, Some(&splits.eval))?;
    let mut trace = out.trace;
    let mut params = out.params;
    if cfg.train.mode.uses_ssl() && cfg.train.ssl_iters > 0 {
        let start = trace.len() as u64;
        params = finetune_ssl(&cfg.train, params, &splits.target, start, &mut trace)?;
    }
    let (target_eval, source_eval, summary) = assess(cfg, &params, splits)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        params,
        feature_bank: out.banks.feature,
        output_bank: out.banks.output,
        trace,
        evals: out.evals,
        target_eval,
        source_eval,
        summary,
    })
}

fn metric_rows(iteration: u64, split: &str, eval: &EvalResult, out: &mut String) {
    for (c, v) in eval.iou.per_class.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(out, "{iteration},{split},iou,{c},{v}");
        }
    }
    let _ = writeln!(out, "{iteration},{split},miou,all,{}", eval.iou.miou);
}

/// Long-format metrics table.
pub fn metrics_csv(art: &RunArtifacts) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in &art.evals {
        let _ = writeln!(out, "{},target_{},miou,all,{}", e.iteration, e.phase.name(), e.miou);
    }
    let last = art.trace.len() as u64;
    metric_rows(last, "source", &art.source_eval, &mut out);
    metric_rows(last, "target", &art.target_eval, &mut out);
    if let Some(t) = art.summary.tail_miou {
        let _ = writeln!(out, "{last},target,tail_miou,all,{t}");
    }
    for (c, v) in art.summary.pdd.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(out, "{last},target,pdd,{c},{v}");
        }
    }
    let _ = writeln!(out, "{last},target,mean_pdd,all,{}", art.summary.mean_pdd);
    out
}

pub fn train_log_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.phase.name(),
            r.lr,
            r.total,
            r.ce,
            r.lov,
            r.feat,
            r.out,
            r.ssl
        );
    }
    out
}

fn write_binary(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// Write every run artifact into `dir`.
pub fn write_run(art: &RunArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), art.config.to_text())?;
    fs::write(dir.join("metrics.csv"), metrics_csv(art))?;
    fs::write(dir.join("train_log.csv"), train_log_csv(&art.trace))?;
    let json = serde_json::to_string_pretty(&art.summary).map_err(|e| SdcaError::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    write_binary(&dir.join("model.bin"), |w| art.params.write_to(w))?;
    write_binary(&dir.join("bank_feature.bin"), |w| art.feature_bank.write_to(w))?;
    write_binary(&dir.join("bank_output.bin"), |w| art.output_bank.write_to(w))?;
    write_binary(&dir.join("embeddings.bin"), |w| export_embeddings(&art.target_eval.features, w))?;
    Ok(())
}

/// `explicit`, else `$SDCA_OUTPUT_ROOT/<name>`, else `./runs/<name>`.
pub fn resolve_out_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

/// Summaries of every ablation mode for one seed, sharing one set of scenes.
pub fn run_ablation(cfg: &ExperimentConfig, modes: &[Mode]) -> Result<BTreeMap<Mode, RunSummary>> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    modes
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.train.mode = m;
            run_on(&c, &splits).map(|a| (m, a.summary))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub mode: String,
    pub target_miou: f64,
    pub tail_miou: Option<f64>,
    pub mean_pdd: f64,
    pub source_miou: f64,
}

/// Run the configured mode once per value of one parameter.
pub fn sweep(cfg: &ExperimentConfig, parameter: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    if !SWEEP_PARAMETERS.contains(&parameter) {
        return Err(SdcaError::UnknownParameter(parameter.to_string()));
    }
    if values.is_empty() {
        return Err(SdcaError::EmptyInput("sweep values"));
    }
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set(parameter, &v.to_string())?;
            c.validate()?;
            let s = run_on(&c, &splits)?.summary;
            Ok(SweepRow {
                parameter: parameter.to_string(),
                value: v,
                seed: s.seed,
                mode: s.mode,
                target_miou: s.target_miou,
                tail_miou: s.tail_miou,
                mean_pdd: s.mean_pdd,
                source_miou: s.source_miou,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.parameter,
            r.value,
            r.seed,
            r.mode,
            r.target_miou,
            r.tail_miou.map_or(String::new(), |t| t.to_string()),
            r.mean_pdd,
            r.source_miou
        );
    }
    out
}

/// Evaluate a saved model on scenes, in the run `metrics.csv` layout.
pub fn eval_csv(params: &ModelParams, source: &[SceneSample], target: &[SceneSample]) -> Result<String> {
    let k = params.shape.classes;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    if !source.is_empty() {
        metric_rows(0, "source", &evaluate(params, source, k)?, &mut out);
    }
    if !target.is_empty() {
        let ev = evaluate(params, target, k)?;
        metric_rows(0, "target", &ev, &mut out);
        if !source.is_empty() {
            let tails = tail_classes(&class_pixel_counts(source, k), TAIL_SHARE);
            if let Some(t) = ev.iou.mean_over(&tails) {
                let _ = writeln!(out, "0,target,tail_miou,all,{t}");
            }
        }
    }
    Ok(out)
}
