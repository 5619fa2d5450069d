//! Labeled image datasets: CIFAR binary ingestion, a synthetic generator, and
//! seeded stratified splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: usize = 10;

/// Images `[n, c, h, w]` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn empty(channels: usize, side: usize, num_classes: usize) -> Self {
        Dataset {
            images: Tensor::zeros(&[0, channels, side, side]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, height, width)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let img = self.images.slice_leading(i, i + 1).expect("index in range");
        let (c, h, w) = self.image_shape();
        img.reshape(&[c, h, w]).unwrap()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_leading(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Splits indices so that each class contributes `round(fraction * count)`
    /// examples (at least one when `fraction > 0`) to the first part.
    pub fn stratified_indices(&self, fraction: f64, seed: u64, tag: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
        }
        let mut r = rng::stream(seed, tag, 0);
        let mut taken = Vec::new();
        let mut rest = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut r);
            let mut k = (fraction * idx.len() as f64).round() as usize;
            if fraction > 0.0 && k == 0 && !idx.is_empty() {
                k = 1;
            }
            taken.extend_from_slice(&idx[..k]);
            rest.extend_from_slice(&idx[k..]);
        }
        taken.sort_unstable();
        rest.sort_unstable();
        Ok((taken, rest))
    }

    /// Stratified subset of `size` examples (or all of them if smaller).
    pub fn stratified_subset(&self, size: usize, seed: u64) -> Result<Dataset> {
        if size >= self.len() {
            return Ok(self.clone());
        }
        let (idx, _) = self.stratified_indices(size as f64 / self.len() as f64, seed, "subset")?;
        self.subset(&idx)
    }

    /// Average-pools square images down to `side` (which must divide the
    /// current side).
    pub fn downsample(&self, side: usize) -> Result<Dataset> {
        let (c, h, w) = self.image_shape();
        if side == h && side == w {
            return Ok(self.clone());
        }
        if h != w || side == 0 || h % side != 0 {
            return Err(Error::Config(format!("cannot downsample {h}x{w} to {side}x{side}")));
        }
        let f = h / side;
        let n = self.len();
        let src = self.images.data();
        let mut out = vec![0.0f32; n * c * side * side];
        for plane in 0..n * c {
            for y in 0..side {
                for x in 0..side {
                    let mut s = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += src[plane * h * w + (y * f + dy) * w + x * f + dx] as f64;
                        }
                    }
                    out[plane * side * side + y * side + x] = (s / (f * f) as f64) as f32;
                }
            }
        }
        Dataset::new(
            Tensor::new(vec![n, c, side, side], out)?,
            self.labels.clone(),
            self.num_classes,
        )
    }
}

/// Reads CIFAR-10 binary records (1 label byte + 3072 channel-major bytes).
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes)
}

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            what: "cifar binary",
            offset,
            detail: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - offset as usize
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                what: "cifar binary",
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label {label} > 9"),
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        CIFAR_CLASSES,
    )
}

/// Parameters of the synthetic blob-image generator.
///
/// Every image is a noisy colored background plus Gaussian blobs. Each class
/// owns a fixed template of blobs (jittered per image); in addition every
/// image gets its own randomly placed nuisance blobs that carry no label
/// information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub resolution: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Gaussian blobs per class template.
    pub class_blobs: usize,
    /// Largest per-channel color offset of a template blob.
    pub class_amplitude: f32,
    /// Label-free blobs drawn independently for each image.
    pub nuisance_blobs: usize,
    pub nuisance_amplitude: f32,
    /// Per-sample jitter of template blob centers, as a fraction of the side.
    pub jitter: f32,
    /// Standard deviation of i.i.d. pixel noise.
    pub pixel_noise: f32,
    /// Amplitude of a faint per-image high-frequency grating. Kept below
    /// the attack budget, it tells instances apart without being robust.
    #[serde(default)]
    pub texture_amplitude: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two-class 16x16 set with 500 training and 200 test images.
    pub fn desk() -> Self {
        SyntheticSpec {
            num_classes: 2,
            resolution: 16,
            train_size: 500,
            test_size: 200,
            class_blobs: 3,
            class_amplitude: 0.15,
            nuisance_blobs: 3,
            nuisance_amplitude: 0.4,
            jitter: 0.12,
            pixel_noise: 0.04,
            texture_amplitude: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    color: [f32; 3],
}

impl Blob {
    fn random(r: &mut rng::Rng, amplitude: f32, center: std::ops::Range<f32>) -> Blob {
        let mut c = || r.gen_range(-amplitude..=amplitude);
        let color = [c(), c(), c()];
        Blob {
            cy: r.gen_range(center.clone()),
            cx: r.gen_range(center),
            sigma: r.gen_range(0.08..0.2),
            color,
        }
    }
}

fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<Blob>> {
    (0..spec.num_classes)
        .map(|c| {
            let mut r = rng::stream(spec.seed, "synthetic-template", c as u64);
            (0..spec.class_blobs)
                .map(|_| Blob::random(&mut r, spec.class_amplitude, 0.25..0.75))
                .collect()
        })
        .collect()
}

fn paint(img: &mut [f32], side: usize, b: &Blob, cy: f32, cx: f32, amp: f32) {
    let s = b.sigma * side as f32;
    for y in 0..side {
        for x in 0..side {
            let d2 = (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2);
            let g = (-d2 / (2.0 * s * s)).exp() * amp;
            for ch in 0..3 {
                img[(ch * side + y) * side + x] += g * b.color[ch];
            }
        }
    }
}

/// Adds `amp * sin(2 pi (fy y + fx x) + phase)` with a random orientation,
/// a frequency of 0.3-0.5 cycles per pixel and a random color direction.
fn grating(img: &mut [f32], side: usize, amp: f32, r: &mut rng::Rng) {
    let theta: f32 = r.gen_range(0.0..std::f32::consts::PI);
    let freq: f32 = r.gen_range(0.3..0.5);
    let phase: f32 = r.gen_range(0.0..std::f32::consts::TAU);
    let (fy, fx) = (freq * theta.sin(), freq * theta.cos());
    let mut color = [0f32; 3];
    for c in &mut color {
        *c = r.gen_range(-1.0..=1.0);
    }
    let peak = color.iter().fold(0f32, |m, c| m.max(c.abs())).max(1e-6);
    for y in 0..side {
        for x in 0..side {
            let w = amp * (std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) + phase).sin();
            for ch in 0..3 {
                img[(ch * side + y) * side + x] += w * color[ch] / peak;
            }
        }
    }
}

fn render(spec: &SyntheticSpec, template: &[Blob], r: &mut rng::Rng) -> Vec<f32> {
    let side = spec.resolution;
    let background: f32 = r.gen_range(0.35..0.65);
    let mut img = vec![background; 3 * side * side];
    for b in template {
        let cy = (b.cy + r.gen_range(-spec.jitter..=spec.jitter)) * side as f32;
        let cx = (b.cx + r.gen_range(-spec.jitter..=spec.jitter)) * side as f32;
        let amp: f32 = r.gen_range(0.7..1.3);
        paint(&mut img, side, b, cy, cx, amp);
    }
    for _ in 0..spec.nuisance_blobs {
        let b = Blob::random(r, spec.nuisance_amplitude, 0.0..1.0);
        paint(&mut img, side, &b, b.cy * side as f32, b.cx * side as f32, 1.0);
    }
    if spec.texture_amplitude > 0.0 {
        grating(&mut img, side, spec.texture_amplitude, r);
    }
    for v in &mut img {
        let z: f32 = r.sample(StandardNormal);
        *v = (*v + spec.pixel_noise * z).clamp(0.0, 1.0);
    }
    img
}

fn generate_split(spec: &SyntheticSpec, templates: &[Vec<Blob>], size: usize, tag: &str) -> Result<Dataset> {
    let side = spec.resolution;
    let mut data = Vec::with_capacity(size * 3 * side * side);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % spec.num_classes;
        let mut r = rng::stream(spec.seed, tag, i as u64);
        data.extend(render(spec, &templates[label], &mut r));
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![size, 3, side, side], data)?, labels, spec.num_classes)
}

/// Balanced `(train, test)` sets of class-specific Gaussian blob images.
/// Train and test examples come from disjoint random streams.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.resolution < 4 || spec.class_blobs == 0 {
        return Err(Error::Config("synthetic: need >= 2 classes, >= 4 px, >= 1 blob".into()));
    }
    let templates = class_templates(spec);
    Ok((
        generate_split(spec, &templates, spec.train_size, "synthetic-train")?,
        generate_split(spec, &templates, spec.test_size, "synthetic-test")?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DatasetSource {
    CifarBinary {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

/// What to load and how to cut it down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub resolution: usize,
    /// Stratified cap on the training set; `None` keeps everything.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub split_seed: u64,
}

impl DatasetSpec {
    pub fn desk() -> Self {
        DatasetSpec {
            source: DatasetSource::Synthetic(SyntheticSpec::desk()),
            resolution: 16,
            train_subset: None,
            test_subset: None,
            split_seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.source {
            DatasetSource::CifarBinary { .. } => CIFAR_CLASSES,
            DatasetSource::Synthetic(s) => s.num_classes,
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DatasetSource::Synthetic(s) => {
                if s.resolution != self.resolution {
                    return Err(Error::Config(format!(
                        "synthetic resolution {} != dataset resolution {}",
                        s.resolution, self.resolution
                    )));
                }
                synthetic(s)?
            }
            DatasetSource::CifarBinary {
                train_files,
                test_files,
            } => {
                let load_all = |files: &[PathBuf]| -> Result<Dataset> {
                    let mut parts = Vec::new();
                    for f in files {
                        parts.push(load_cifar_binary(f)?);
                    }
                    concat(&parts, 3, CIFAR_SIDE, CIFAR_CLASSES)
                };
                (
                    load_all(train_files)?.downsample(self.resolution)?,
                    load_all(test_files)?.downsample(self.resolution)?,
                )
            }
        };
        let train = match self.train_subset {
            Some(n) => train.stratified_subset(n, self.split_seed)?,
            None => train,
        };
        let test = match self.test_subset {
            Some(n) => test.stratified_subset(n, self.split_seed ^ 1)?,
            None => test,
        };
        Ok((train, test))
    }
}

fn concat(parts: &[Dataset], channels: usize, side: usize, classes: usize) -> Result<Dataset> {
    if parts.is_empty() {
        return Ok(Dataset::empty(channels, side, classes));
    }
    let imgs: Vec<&Tensor> = parts.iter().map(|d| &d.images).collect();
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(Tensor::stack_leading(&imgs)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_two_records() {
        let mut bytes = Vec::new();
        for (label, fill) in [(3u8, 0u8), (9u8, 255u8)] {
            bytes.push(label);
            for k in 0..3072usize {
                bytes.push(if k == 0 { 51 } else { fill });
            }
        }
        let ds = parse_cifar_binary(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 9]);
        let img0 = ds.image(0);
        assert_eq!(img0.data()[0], 51.0 / 255.0);
        assert_eq!(img0.data()[1], 0.0);
        assert_eq!(ds.image(1).data()[3071], 1.0);
        assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn cifar_empty_and_truncated() {
        assert!(parse_cifar_binary(&[]).unwrap().is_empty());
        let bytes = vec![0u8; CIFAR_RECORD + 10];
        match parse_cifar_binary(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        assert!(parse_cifar_binary(&bad).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let spec = SyntheticSpec {
            train_size: 40,
            test_size: 10,
            ..SyntheticSpec::desk()
        };
        let (a, t) = synthetic(&spec).unwrap();
        let (b, _) = synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20, 20]);
        assert_eq!(t.len(), 10);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.images().slice_leading(0, 1).unwrap(), t.images().slice_leading(0, 1).unwrap());
    }

    #[test]
    fn stratified_split_is_disjoint_and_balanced() {
        let spec = SyntheticSpec {
            num_classes: 3,
            train_size: 60,
            test_size: 3,
            ..SyntheticSpec::desk()
        };
        let (ds, _) = synthetic(&spec).unwrap();
        let (a, b) = ds.stratified_indices(0.1, 5, "split").unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.len() + b.len(), 60);
        assert!(a.iter().all(|i| !b.contains(i)));
        let sub = ds.subset(&a).unwrap();
        assert_eq!(sub.class_counts(), vec![2, 2, 2]);
        assert_eq!(ds.stratified_indices(0.1, 5, "split").unwrap().0, a);
    }

    #[test]
    fn downsample_averages() {
        let img = Tensor::from_slice(&[1, 1, 2, 2], &[0.0, 1.0, 0.5, 0.5]).unwrap();
        let ds = Dataset::new(img, vec![0], 1).unwrap();
        let d = ds.downsample(1).unwrap();
        assert_eq!(d.images().data(), &[0.5]);
    }
}
