//! Self-check suite: randomized property checks of the numerical core.
//!
//! Each check draws its own instances from a seeded generator and compares
//! the library against an independent reference computation.

use rand::Rng;
use serde::Serialize;

use crate::bank::{batch_stats, merge, ClassStats};
use crate::contrastive::{closed_form_bound, mc_expected_loss, Temperature};
use crate::error::Result;
use crate::maps::{LabelMap, ScoreMap};
use crate::metrics::{iou, ConfusionMatrix};
use crate::numeric::{rng_from_seed, Mat, SdcaRng};
use crate::pseudo::{confidence_map, median_thresholds, pseudo_labels};
use crate::seg_loss::lovasz_softmax_detailed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    /// Largest violation seen, in the check's own units.
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Instance counts and sample sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertScale {
    pub merge_datasets: usize,
    pub bound_instances: usize,
    pub mc_samples: usize,
    pub gradient_instances: usize,
    pub lovasz_instances: usize,
    pub median_maps: usize,
    pub metric_instances: usize,
}

impl CertScale {
    pub fn full() -> Self {
        CertScale {
            merge_datasets: 50,
            bound_instances: 200,
            mc_samples: 100_000,
            gradient_instances: 50,
            lovasz_instances: 100,
            median_maps: 50,
            metric_instances: 100,
        }
    }

    pub fn quick() -> Self {
        CertScale {
            merge_datasets: 10,
            bound_instances: 20,
            mc_samples: 10_000,
            gradient_instances: 10,
            lovasz_instances: 20,
            median_maps: 10,
            metric_instances: 20,
        }
    }
}

pub fn random_psd(d: usize, rng: &mut SdcaRng, scale: f64) -> Mat {
    let mut a = Mat::zeros(d);
    for v in a.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut s = a.mul_transpose_self();
    s.scale(scale / d as f64);
    s
}

pub fn random_class(d: usize, rng: &mut SdcaRng, cov_scale: f64) -> ClassStats {
    ClassStats {
        count: rng.random_range(10..1000),
        mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        cov: random_psd(d, rng, cov_scale),
    }
}

fn check(name: &str, instances: usize, worst: f64, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        instances,
        worst,
        detail,
    }
}

fn merge_equivalence(n: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=16);
        let len = rng.random_range(2..=2000);
        let points: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let whole = batch_stats(points.iter().map(|p| p.as_slice()))?;
        let mut acc = ClassStats::empty(d);
        let mut start = 0;
        while start < len {
            let end = (start + rng.random_range(1..=200)).min(len);
            let b = batch_stats(points[start..end].iter().map(|p| p.as_slice()))?;
            acc = merge(&acc, b.count, &b.mean, &b.cov)?;
            start = end;
        }
        for (a, b) in acc.mean.iter().zip(&whole.mean) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        for (a, b) in acc.cov.as_slice().iter().zip(whole.cov.as_slice()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        if acc.count != whole.count {
            worst = f64::INFINITY;
        }
    }
    Ok(check("merge_equivalence", n, worst, worst <= 1e-9, "streaming merge vs whole-dataset moments".into()))
}

fn bound_vs_mc(n: usize, samples: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let taus = [0.05, 0.1, 0.5, 1.0];
    let mut worst = f64::NEG_INFINITY;
    let mut degenerate_worst: f64 = 0.0;
    for i in 0..n {
        let d = rng.random_range(2..=6);
        let k = rng.random_range(2..=5);
        let tau = Temperature::new(taus[i % taus.len()])?;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * tau.value().sqrt()).collect();
        let classes: Vec<ClassStats> = (0..k).map(|_| random_class(d, rng, 0.5)).collect();
        let negs: Vec<&ClassStats> = classes[1..].iter().collect();
        let (bound, _) = closed_form_bound(&q, &classes[0], &negs, tau)?;
        let mc = mc_expected_loss(&q, &classes[0], &negs, tau, samples, rng)?;
        // positive slack means the bound holds
        worst = worst.max((mc.estimate - 3.0 * mc.std_error) - bound);

        let points: Vec<ClassStats> = classes.iter().map(|c| ClassStats::point(c.mean.clone(), c.count)).collect();
        let pnegs: Vec<&ClassStats> = points[1..].iter().collect();
        let (b0, _) = closed_form_bound(&q, &points[0], &pnegs, tau)?;
        let m0 = mc_expected_loss(&q, &points[0], &pnegs, tau, 1000, rng)?;
        degenerate_worst = degenerate_worst.max((b0 - m0.estimate).abs());
    }
    let passed = worst <= 0.0 && degenerate_worst < 1e-10;
    Ok(check(
        "bound_vs_monte_carlo",
        n,
        worst.max(0.0) + degenerate_worst,
        passed,
        format!("max (mc - 3se - bound) = {worst:.3e}; zero-covariance gap {degenerate_worst:.3e}"),
    ))
}

fn bound_gradient(n: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=8);
        let k = rng.random_range(2..=5);
        let tau = Temperature::new(rng.random_range(0.2..2.0))?;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let classes: Vec<ClassStats> = (0..k).map(|_| random_class(d, rng, 0.3)).collect();
        let negs: Vec<&ClassStats> = classes[1..].iter().collect();
        let (_, g) = closed_form_bound(&q, &classes[0], &negs, tau)?;
        for j in 0..d {
            let mut qp = q.clone();
            qp[j] += h;
            let mut qm = q.clone();
            qm[j] -= h;
            let fd = (closed_form_bound(&qp, &classes[0], &negs, tau)?.0 - closed_form_bound(&qm, &classes[0], &negs, tau)?.0)
                / (2.0 * h);
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(check("bound_gradient", n, worst, worst < 1e-5, "analytic vs central differences, h = 1e-5".into()))
}

fn random_labels(h: usize, w: usize, k: usize, rng: &mut SdcaRng) -> LabelMap {
    LabelMap {
        height: h,
        width: w,
        labels: (0..h * w).map(|_| rng.random_range(0..k) as u8).collect(),
    }
}

fn one_hot_scores(pred: &LabelMap, k: usize) -> ScoreMap {
    let mut data = vec![0.0; pred.num_pixels() * k];
    for (i, &l) in pred.labels.iter().enumerate() {
        data[i * k + l as usize] = 60.0;
    }
    ScoreMap {
        height: pred.height,
        width: pred.width,
        channels: k,
        data,
    }
}

fn lovasz_vertex(n: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = rng.random_range(2..=5);
        let truth = random_labels(h, w, k, rng);
        let pred = random_labels(h, w, k, rng);
        let r = lovasz_softmax_detailed(&one_hot_scores(&pred, k), &truth)?;
        for &(c, loss) in &r.per_class {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&t, &p) in truth.labels.iter().zip(&pred.labels) {
                let (a, b) = (t as usize == c, p as usize == c);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            let jaccard = inter as f64 / union as f64;
            worst = worst.max((loss - (1.0 - jaccard)).abs());
        }
    }
    Ok(check("lovasz_vertex", n, worst, worst <= 1e-12, "one-hot predictions vs 1 - Jaccard".into()))
}

fn median_selection(n: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let mut mismatches = 0usize;
    for _ in 0..n {
        let k = rng.random_range(2..=5);
        let (h, w) = (rng.random_range(2..=10), rng.random_range(2..=10));
        let data: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scores = ScoreMap {
            height: h,
            width: w,
            channels: k,
            data,
        };
        let thresholds = median_thresholds([&scores], k);
        let mask = pseudo_labels(&scores, &thresholds)?;
        let conf = confidence_map(&scores);
        for c in 0..k {
            let n_k = conf.iter().filter(|(l, _)| *l as usize == c).count();
            let kept = mask.labels.labels.iter().filter(|&&l| l as usize == c).count();
            if kept != n_k.div_ceil(2) {
                mismatches += 1;
            }
        }
    }
    Ok(check(
        "median_selection",
        n,
        mismatches as f64,
        mismatches == 0,
        "exactly ceil(n_k / 2) pixels kept per predicted class".into(),
    ))
}

fn iou_bruteforce(n: usize, rng: &mut SdcaRng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(2..=4);
        let truth = random_labels(8, 8, k, rng);
        let pred = random_labels(8, 8, k, rng);
        let mut conf = ConfusionMatrix::new(k);
        conf.accumulate(&truth, &pred)?;
        let r = iou(&conf);
        for c in 0..k {
            let t: Vec<bool> = truth.labels.iter().map(|&l| l as usize == c).collect();
            let p: Vec<bool> = pred.labels.iter().map(|&l| l as usize == c).collect();
            let inter = t.iter().zip(&p).filter(|(a, b)| **a && **b).count();
            let union = t.iter().zip(&p).filter(|(a, b)| **a || **b).count();
            match (r.per_class[c], union) {
                (None, 0) => {}
                (Some(v), u) if u > 0 => worst = worst.max((v - inter as f64 / u as f64).abs()),
                _ => worst = f64::INFINITY,
            }
        }
    }
    Ok(check("iou_bruteforce", n, worst, worst <= 1e-12, "confusion-matrix IoU vs pixel sets".into()))
}

/// Run every check. The report passes only if every check passes.
pub fn certify(seed: u64, scale: CertScale) -> Result<CertReport> {
    let mut rng = rng_from_seed(seed);
    let checks = vec![
        merge_equivalence(scale.merge_datasets, &mut rng)?,
        bound_vs_mc(scale.bound_instances, scale.mc_samples, &mut rng)?,
        bound_gradient(scale.gradient_instances, &mut rng)?,
        lovasz_vertex(scale.lovasz_instances, &mut rng)?,
        median_selection(scale.median_maps, &mut rng)?,
        iou_bruteforce(scale.metric_instances, &mut rng)?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(CertReport { seed, passed, checks })
}
