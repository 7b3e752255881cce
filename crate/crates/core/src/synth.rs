//! Synthetic source/target segmentation scenes with a controllable shift.
//!
//! A scene starts as a background of class 0, gets a number of random
//! rectangles and ellipses of the other classes painted on top, and finally
//! (optionally) one compact patch of a rare "tail" class whose expected pixel
//! share is set exactly. Pixel colors are drawn from per-class Gaussians.
//! Target scenes use the same generator followed by a global appearance shift
//! `x ↦ gain ⊙ x + bias + noise · N(0, I)`.
//!
//! A dataset directory holds `manifest.txt`, `images/` and `labels/`. Each
//! manifest line is `<name> <source|target> <image path> <label path>`, paths
//! relative to the directory; lines starting with `#` are comments.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::contrastive::Domain;
use crate::error::{Result, SdcaError};
use crate::maps::{Image, LabelMap, IGNORE_LABEL};
use crate::numeric::{rng_from_seed, SdcaRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub labels: LabelMap,
    pub domain: Domain,
}

/// Appearance of the scenes and the shift applied to the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub height: usize,
    pub width: usize,
    /// Per-class color means, `K × C`.
    pub class_means: Vec<Vec<f64>>,
    /// Per-class per-channel standard deviations, `K × C`.
    pub class_stds: Vec<Vec<f64>>,
    /// Relative frequency of each class among painted shapes (index 0, the
    /// background, and the tail class are not drawn as shapes).
    pub class_weights: Vec<f64>,
    pub shapes_per_image: usize,
    /// Shape side length range in pixels.
    pub min_shape: usize,
    pub max_shape: usize,
    /// Class painted as a single compact patch with the given expected pixel share.
    pub tail_class: Option<usize>,
    pub tail_fraction: f64,
    /// Width of the border whose labels are set to the ignore id.
    pub ignore_margin: usize,
    pub target_gain: Vec<f64>,
    pub target_bias: Vec<f64>,
    pub target_noise: f64,
}

impl ShiftSpec {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn channels(&self) -> usize {
        self.class_means.first().map(|m| m.len()).unwrap_or(0)
    }

    /// Same scenes with the target shift removed.
    pub fn without_shift(&self) -> Self {
        let c = self.channels();
        ShiftSpec {
            target_gain: vec![1.0; c],
            target_bias: vec![0.0; c],
            target_noise: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| SdcaError::InvalidConfig {
            field: field.into(),
            reason,
        };
        let k = self.num_classes();
        let c = self.channels();
        if k < 2 {
            return Err(bad("class_means", format!("need at least 2 classes, got {k}")));
        }
        if k > IGNORE_LABEL as usize {
            return Err(bad("class_means", format!("at most {} classes", IGNORE_LABEL)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(bad("height/width", format!("scenes must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        if c == 0 || self.class_means.iter().any(|m| m.len() != c) {
            return Err(bad("class_means", "every class needs the same non-zero channel count".into()));
        }
        if self.class_stds.len() != k || self.class_stds.iter().any(|s| s.len() != c || s.iter().any(|v| *v < 0.0)) {
            return Err(bad("class_stds", "need K x C non-negative entries".into()));
        }
        if self.class_weights.len() != k || self.class_weights.iter().any(|w| *w < 0.0) {
            return Err(bad("class_weights", "need K non-negative entries".into()));
        }
        if self.target_gain.len() != c || self.target_gain.iter().any(|g| *g <= 0.0) {
            return Err(bad("target_gain", "need C positive entries".into()));
        }
        if self.target_bias.len() != c {
            return Err(bad("target_bias", "need C entries".into()));
        }
        if !(self.target_noise >= 0.0) {
            return Err(bad("target_noise", "must be non-negative".into()));
        }
        if self.min_shape == 0 || self.min_shape > self.max_shape {
            return Err(bad("min_shape", "need 0 < min_shape <= max_shape".into()));
        }
        if let Some(t) = self.tail_class {
            if t == 0 || t >= k {
                return Err(bad("tail_class", format!("must be in 1..{k}")));
            }
            if !(0.0..0.5).contains(&self.tail_fraction) {
                return Err(bad("tail_fraction", "must be in [0, 0.5)".into()));
            }
        }
        Ok(())
    }
}

impl Default for ShiftSpec {
    /// Four classes in RGB-like space. Source scenes occupy a plane with
    /// little variation in the third channel; the target shift adds a tint in
    /// that channel, a mild gain change and extra sensor noise.
    fn default() -> Self {
        ShiftSpec {
            height: 24,
            width: 24,
            class_means: vec![
                vec![0.2, 0.2, 0.3],
                vec![0.8, 0.3, 0.3],
                vec![0.3, 0.8, 0.3],
                vec![0.8, 0.8, 0.3],
            ],
            class_stds: vec![vec![0.12, 0.12, 0.05]; 4],
            class_weights: vec![0.0, 1.0, 1.0, 1.0],
            shapes_per_image: 8,
            min_shape: 4,
            max_shape: 10,
            tail_class: None,
            tail_fraction: 0.0,
            ignore_margin: 0,
            target_gain: vec![0.9, 1.1, 1.0],
            target_bias: vec![0.05, -0.05, 0.25],
            target_noise: 0.1,
        }
    }
}

/// Source scenes followed by target scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub source: Vec<SceneSample>,
    pub target: Vec<SceneSample>,
}

/// Per-sample generator seed from the master seed, the domain and the index.
pub fn sample_seed(master: u64, domain: Domain, index: usize) -> u64 {
    // splitmix64 finalizer over a domain-tagged counter
    let tag = match domain {
        Domain::Source => 0x5eed_0000_0000_0001u64,
        Domain::Target => 0x5eed_0000_0000_0002u64,
    };
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn paint_layout(spec: &ShiftSpec, rng: &mut SdcaRng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    let k = spec.num_classes();
    let weights: Vec<f64> = (0..k)
        .map(|c| if c == 0 || Some(c) == spec.tail_class { 0.0 } else { spec.class_weights[c] })
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for _ in 0..spec.shapes_per_image {
            let mut u = rng.random::<f64>() * total;
            let mut class = k - 1;
            for (c, &wt) in weights.iter().enumerate() {
                if u < wt {
                    class = c;
                    break;
                }
                u -= wt;
            }
            let sh = rng.random_range(spec.min_shape..=spec.max_shape).min(h);
            let sw = rng.random_range(spec.min_shape..=spec.max_shape).min(w);
            let r0 = rng.random_range(0..=h - sh);
            let c0 = rng.random_range(0..=w - sw);
            let ellipse = rng.random_bool(0.5);
            let (cy, cx) = (r0 as f64 + sh as f64 / 2.0, c0 as f64 + sw as f64 / 2.0);
            let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
            for r in r0..r0 + sh {
                for c in c0..c0 + sw {
                    let inside = !ellipse || {
                        let dy = (r as f64 + 0.5 - cy) / ry;
                        let dx = (c as f64 + 0.5 - cx) / rx;
                        dy * dy + dx * dx <= 1.0
                    };
                    if inside {
                        labels[r * w + c] = class as u8;
                    }
                }
            }
        }
    }
    if let Some(tail) = spec.tail_class {
        // exact pixel count in expectation: stochastic rounding of f·H·W
        let want = spec.tail_fraction * (h * w) as f64;
        let mut n = want.floor() as usize;
        if rng.random::<f64>() < want - want.floor() {
            n += 1;
        }
        if n > 0 {
            let side = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(side);
            let r0 = rng.random_range(0..=h - rows);
            let c0 = rng.random_range(0..=w - side);
            for i in 0..n {
                labels[(r0 + i / side) * w + c0 + i % side] = tail as u8;
            }
        }
    }
    labels
}

fn render(spec: &ShiftSpec, labels: &[u8], rng: &mut SdcaRng) -> Vec<f64> {
    let c = spec.channels();
    let mut img = Vec::with_capacity(labels.len() * c);
    for &l in labels {
        let (m, s) = (&spec.class_means[l as usize], &spec.class_stds[l as usize]);
        for ch in 0..c {
            let z: f64 = rng.sample(StandardNormal);
            img.push(m[ch] + s[ch] * z);
        }
    }
    img
}

fn apply_margin(spec: &ShiftSpec, labels: &mut [u8]) {
    let (h, w, m) = (spec.height, spec.width, spec.ignore_margin);
    if m == 0 {
        return;
    }
    for r in 0..h {
        for c in 0..w {
            if r < m || c < m || r + m >= h || c + m >= w {
                labels[r * w + c] = IGNORE_LABEL;
            }
        }
    }
}

/// One scene for `(seed, domain, index)`.
pub fn generate_sample(spec: &ShiftSpec, seed: u64, domain: Domain, index: usize) -> Result<SceneSample> {
    let mut rng = rng_from_seed(sample_seed(seed, domain, index));
    let mut labels = paint_layout(spec, &mut rng);
    let mut pixels = render(spec, &labels, &mut rng);
    if domain == Domain::Target {
        let c = spec.channels();
        for px in pixels.chunks_exact_mut(c) {
            for ch in 0..c {
                let z: f64 = if spec.target_noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                px[ch] = spec.target_gain[ch] * px[ch] + spec.target_bias[ch] + spec.target_noise * z;
            }
        }
    }
    apply_margin(spec, &mut labels);
    Ok(SceneSample {
        image: Image::from_data(spec.height, spec.width, spec.channels(), pixels)?,
        labels: LabelMap::from_labels(spec.height, spec.width, labels)?,
        domain,
    })
}

/// `n_source` source scenes and `n_target` target scenes, deterministic in `seed`.
pub fn generate(spec: &ShiftSpec, seed: u64, n_source: usize, n_target: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let source = (0..n_source)
        .map(|i| generate_sample(spec, seed, Domain::Source, i))
        .collect::<Result<Vec<_>>>()?;
    let target = (0..n_target)
        .map(|i| generate_sample(spec, seed, Domain::Target, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { source, target })
}

/// Strength of the source-side photometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    /// Per-channel offset drawn uniformly from `[-jitter, jitter]`.
    pub jitter: f64,
    /// Probability of a 3×3 box blur.
    pub blur_prob: f64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        AugmentSpec {
            jitter: 0.0,
            blur_prob: 0.0,
        }
    }
}

/// Color jitter plus optional box blur; labels are untouched.
pub fn augment_source(sample: &SceneSample, aug: AugmentSpec, rng: &mut SdcaRng) -> SceneSample {
    let mut out = sample.clone();
    let img = &mut out.image;
    let c = img.channels;
    if aug.jitter > 0.0 {
        let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-aug.jitter..=aug.jitter)).collect();
        for px in img.data.chunks_exact_mut(c) {
            for (v, o) in px.iter_mut().zip(&offsets) {
                *v += o;
            }
        }
    }
    if aug.blur_prob > 0.0 && rng.random_bool(aug.blur_prob.min(1.0)) {
        let src = img.clone();
        let (h, w) = (img.height, img.width);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    let mut n = 0.0;
                    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                        for cc in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                            s += src.data[(rr * w + cc) * c + ch];
                            n += 1.0;
                        }
                    }
                    img.data[(r * w + col) * c + ch] = s / n;
                }
            }
        }
    }
    out
}

/// Pixel counts per class over a set of scenes (ignored pixels excluded).
pub fn class_pixel_counts(samples: &[SceneSample], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &l in &s.labels.labels {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

/// Write a dataset directory (`manifest.txt`, `images/`, `labels/`).
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::from("# name domain image labels\n");
    for (i, s) in dataset.source.iter().chain(&dataset.target).enumerate() {
        let idx = if i < dataset.source.len() { i } else { i - dataset.source.len() };
        let name = format!("{}_{:05}", domain_name(s.domain), idx);
        let img_rel = format!("images/{name}.raster");
        let lbl_rel = format!("labels/{name}.raster");
        s.image.write_raster(&mut BufWriter::new(fs::File::create(dir.join(&img_rel))?))?;
        s.labels.write_raster(&mut BufWriter::new(fs::File::create(dir.join(&lbl_rel))?))?;
        manifest.push_str(&format!("{name} {} {img_rel} {lbl_rel}\n", domain_name(s.domain)));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut ds = SyntheticDataset {
        source: Vec::new(),
        target: Vec::new(),
    };
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(SdcaError::Format(format!("bad manifest line `{line}`")));
        }
        let domain = match parts[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            d => return Err(SdcaError::Format(format!("unknown domain `{d}`"))),
        };
        let image = Image::read_raster(&mut BufReader::new(fs::File::open(dir.join(parts[2]))?))?;
        let labels = LabelMap::read_raster(&mut BufReader::new(fs::File::open(dir.join(parts[3]))?))?;
        let sample = SceneSample { image, labels, domain };
        match domain {
            Domain::Source => ds.source.push(sample),
            Domain::Target => ds.target.push(sample),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::default();
        let a = generate(&spec, 7, 3, 2).unwrap();
        let b = generate(&spec, 7, 3, 2).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 8, 3, 2).unwrap();
        assert_ne!(a.source[0].image, c.source[0].image);
    }

    #[test]
    fn labels_cover_configured_classes() {
        let spec = ShiftSpec { ignore_margin: 1, ..ShiftSpec::default() };
        let ds = generate(&spec, 1, 10, 0).unwrap();
        for s in &ds.source {
            assert!(s.labels.is_valid_for(spec.num_classes()));
            assert_eq!(s.labels.get(0, 5), IGNORE_LABEL);
        }
        let counts = class_pixel_counts(&ds.source, 4);
        assert!(counts.iter().all(|&n| n > 0));
    }

    #[test]
    fn zero_shift_matches_source_distribution() {
        let spec = ShiftSpec::default().without_shift();
        // same (seed, index) layout with the domain tag swapped is a different
        // draw, so compare per-class color moments instead
        let ds = generate(&spec, 3, 40, 40).unwrap();
        let moments = |samples: &[SceneSample]| -> Vec<Vec<f64>> {
            (0..4)
                .map(|k| {
                    let mut sum = vec![0.0; 3];
                    let mut n = 0.0;
                    for s in samples {
                        for (i, &l) in s.labels.labels.iter().enumerate() {
                            if l as usize == k {
                                for c in 0..3 {
                                    sum[c] += s.image.pixel(i)[c];
                                }
                                n += 1.0;
                            }
                        }
                    }
                    sum.iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let (ms, mt) = (moments(&ds.source), moments(&ds.target));
        for k in 0..4 {
            for c in 0..3 {
                assert!((ms[k][c] - mt[k][c]).abs() < 0.01, "class {k} channel {c}");
            }
        }
    }

    #[test]
    fn target_shift_is_applied() {
        let spec = ShiftSpec { target_noise: 0.0, ..ShiftSpec::default() };
        let s = generate_sample(&spec, 5, Domain::Source, 0).unwrap();
        let t = generate_sample(&spec.without_shift(), 5, Domain::Target, 0).unwrap();
        let shifted = generate_sample(&spec, 5, Domain::Target, 0).unwrap();
        assert_eq!(t.labels, shifted.labels);
        for (a, b) in t.image.data.chunks(3).zip(shifted.image.data.chunks(3)) {
            for c in 0..3 {
                let want = spec.target_gain[c] * a[c] + spec.target_bias[c];
                assert!((b[c] - want).abs() < 1e-12);
            }
        }
        assert_eq!(s.domain, Domain::Source);
    }

    #[test]
    fn tail_fraction_is_respected() {
        let spec = ShiftSpec {
            height: 32,
            width: 32,
            tail_class: Some(3),
            tail_fraction: 0.008,
            class_weights: vec![0.0, 1.0, 1.0, 0.0],
            ..ShiftSpec::default()
        };
        let ds = generate(&spec, 11, 200, 0).unwrap();
        let counts = class_pixel_counts(&ds.source, 4);
        let share = counts[3] as f64 / counts.iter().sum::<u64>() as f64;
        assert!(share < 0.01);
        assert!((share - 0.008).abs() < 0.005, "share {share}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ShiftSpec { height: 4, ..ShiftSpec::default() };
        assert!(generate(&spec, 0, 1, 1).is_err());
        spec = ShiftSpec { target_gain: vec![1.0, 0.0, 1.0], ..ShiftSpec::default() };
        assert!(generate(&spec, 0, 1, 1).is_err());
        spec = ShiftSpec { class_means: vec![vec![0.0; 3]], ..ShiftSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn augmentation_contract() {
        let spec = ShiftSpec::default();
        let s = generate_sample(&spec, 2, Domain::Source, 0).unwrap();
        let mut rng = rng_from_seed(1);
        assert_eq!(augment_source(&s, AugmentSpec::none(), &mut rng), s);

        let aug = AugmentSpec { jitter: 0.1, blur_prob: 0.0 };
        let a = augment_source(&s, aug, &mut rng_from_seed(4));
        let b = augment_source(&s, aug, &mut rng_from_seed(4));
        assert_eq!(a, b);
        assert_eq!(a.labels, s.labels);
        for (x, y) in a.image.data.iter().zip(&s.image.data) {
            assert!((x - y).abs() <= 0.1 + 1e-15);
        }

        let blurred = augment_source(&s, AugmentSpec { jitter: 0.0, blur_prob: 1.0 }, &mut rng);
        assert_eq!(blurred.labels, s.labels);
        assert_ne!(blurred.image, s.image);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let ds = generate(&ShiftSpec::default(), 4, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("target_00002 target images/target_00002.raster labels/target_00002.raster"));
    }
}
