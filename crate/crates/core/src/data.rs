//! Dataset catalog, subject-level split, preprocessing and the synthetic
//! slice generator. File IO lives in the std companion crate.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Shape2D, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Mci,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Mci];

    /// Class index used by the network: normal 0, mci 1.
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Mci => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Label> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or(Error::LabelOutOfRange { label: i, classes: 2 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Mci => "mci",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Dataset(format!("unknown label `{s}` (expected normal or mci)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Frontal,
    Sagittal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Frontal, Plane::Sagittal, Plane::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Frontal => "frontal",
            Plane::Sagittal => "sagittal",
            Plane::Axial => "axial",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Plane::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Dataset(format!("unknown plane `{s}` (expected frontal, sagittal or axial)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    pub plane: Plane,
    pub image_path: String,
}

/// Subject counts per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassSummary {
    pub normal: usize,
    pub mci: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    records: Vec<SubjectRecord>,
}

impl DatasetManifest {
    /// Rejects empty subject ids, duplicate (subject, plane) pairs and
    /// subjects carrying two labels.
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut labels: BTreeMap<&str, Label> = BTreeMap::new();
        for r in &records {
            if r.subject_id.trim().is_empty() {
                return Err(Error::Dataset("empty subject id".into()));
            }
            if !seen.insert((r.subject_id.as_str(), r.plane)) {
                return Err(Error::Dataset(format!(
                    "duplicate record for subject `{}`, plane {}",
                    r.subject_id, r.plane
                )));
            }
            if let Some(&l) = labels.get(r.subject_id.as_str()) {
                if l != r.label {
                    return Err(Error::Dataset(format!(
                        "subject `{}` is labelled both {l} and {}",
                        r.subject_id, r.label
                    )));
                }
            }
            labels.insert(&r.subject_id, r.label);
        }
        Ok(DatasetManifest { records })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subjects in first-appearance order with their labels.
    pub fn subjects(&self) -> Vec<(&str, Label)> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| (r.subject_id.as_str(), r.label))
            .collect()
    }

    pub fn class_summary(&self) -> ClassSummary {
        let mut s = ClassSummary::default();
        for (_, label) in self.subjects() {
            match label {
                Label::Normal => s.normal += 1,
                Label::Mci => s.mci += 1,
            }
        }
        s
    }

    /// FNV-1a over the records, for provenance in reports.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for r in &self.records {
            for field in [
                r.subject_id.as_str(),
                r.label.name(),
                r.plane.name(),
                r.image_path.as_str(),
            ] {
                bytes.extend_from_slice(field.as_bytes());
                bytes.push(0x1f);
            }
            bytes.push(b'\n');
        }
        rng::fnv1a(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub seed: u64,
}

impl SplitResult {
    /// Identifies the partition: hash of both manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.train.fingerprint().to_le_bytes());
        bytes.extend_from_slice(&self.test.fingerprint().to_le_bytes());
        rng::fnv1a(&bytes)
    }
}

/// Shuffles each class's subjects with a seeded generator and sends the first
/// `floor(fraction·n_class)` of them, with all their records, to train.
pub fn subject_split(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<SplitResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction {fraction} is outside (0, 1)"
        )));
    }
    let subjects = m.subjects();
    let mut train_ids = BTreeSet::new();
    for label in Label::ALL {
        let mut ids: Vec<&str> = subjects.iter().filter(|(_, l)| *l == label).map(|(s, _)| *s).collect();
        ids.shuffle(&mut rng::rng(rng::derive_seed(seed, label.index() as u64)));
        // the epsilon keeps 0.7·210 from flooring to 146
        let take = libm::floor(fraction * ids.len() as f64 + 1e-9) as usize;
        train_ids.extend(ids[..take].iter().copied());
    }
    let (train, test): (Vec<SubjectRecord>, Vec<SubjectRecord>) = m
        .records
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(r.subject_id.as_str()));
    Ok(SplitResult {
        train: DatasetManifest { records: train },
        test: DatasetManifest { records: test },
        seed,
    })
}

/// Per-channel standardization statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set when a zero standard deviation was replaced by 1.
    pub degenerate: bool,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            degenerate: false,
        }
    }

    /// Population mean and standard deviation over C×H×W images.
    pub fn from_images(images: &[Tensor]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyInput("NormStats::from_images"))?;
        let channels = first.shape()[0];
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for img in images {
            if img.shape()[0] != channels || img.rank() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "NormStats::from_images",
                    left: first.shape().to_vec(),
                    right: img.shape().to_vec(),
                });
            }
            let plane = img.len() / channels;
            for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                count[c] += plane;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; channels];
        for img in images {
            let plane = img.len() / channels;
            for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
                sq[c] += chunk.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        let mut degenerate = false;
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let sd = libm::sqrt(s / n as f64);
                if sd > 0.0 {
                    sd
                } else {
                    degenerate = true;
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std, degenerate })
    }
}

/// Align-corners-false bilinear resampling of a 1×C×H×W image.
pub fn resize_bilinear(img: &Tensor, target: Shape2D) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 {
        return Err(Error::ShapeMismatch {
            op: "resize_bilinear",
            left: vec![1, c, h, w],
            right: img.shape().to_vec(),
        });
    }
    let (th, tw) = (target.height, target.width);
    if (th, tw) == (h, w) {
        return Ok(img.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = taps(th, h);
    let xs = taps(tw, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![1, c, th, tw], out)
}

/// Resize to `size` and replicate a single channel to three; 3×H×W.
pub fn prepare_image(img: &Tensor, size: Shape2D) -> Result<Tensor> {
    let resized = resize_bilinear(img, size)?;
    let (_, c, h, w) = resized.dims4()?;
    match c {
        3 => resized.reshape(&[3, h, w]),
        1 => {
            let plane = resized.into_data();
            let mut data = Vec::with_capacity(3 * plane.len());
            for _ in 0..3 {
                data.extend_from_slice(&plane);
            }
            Tensor::new(vec![3, h, w], data)
        }
        _ => Err(Error::ShapeMismatch {
            op: "prepare_image channels",
            left: vec![1, 3],
            right: vec![c],
        }),
    }
}

/// Per-channel `(x − mean) / std` of a C×H×W image.
pub fn normalize(img: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let c = img.shape()[0];
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            left: vec![stats.mean.len()],
            right: img.shape().to_vec(),
        });
    }
    let plane = img.len() / c;
    let mut out = img.clone();
    for (ch, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
    }
    Ok(out)
}

/// Resize, replicate grayscale to three channels, standardize: 3×H×W.
pub fn to_network_input(img: &Tensor, input_size: Shape2D, stats: &NormStats) -> Result<Tensor> {
    normalize(&prepare_image(img, input_size)?, stats)
}

/// Seeded mini-batch order over `count` samples; the final partial batch is
/// kept.
pub fn batch_indices(count: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::rng(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seeded mini-batches of `samples` (each 1×C×H×W) with their labels.
pub fn batches(
    samples: &[Tensor],
    labels: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    if samples.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "batches",
            left: vec![samples.len()],
            right: vec![labels.len()],
        });
    }
    batch_indices(samples.len(), batch_size, seed)?
        .into_iter()
        .map(|idx| {
            let parts: Vec<&Tensor> = idx.iter().map(|&i| &samples[i]).collect();
            Ok((Tensor::stack(&parts)?, idx.iter().map(|&i| labels[i]).collect()))
        })
        .collect()
}

/// Synthetic slice generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    /// Intensity removed at the centre of each ring.
    pub deficit: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            deficit: 70.0,
            noise: 10.0,
        }
    }
}

/// Subject ids of a balanced synthetic corpus, normal first.
pub fn synth_subjects(n_per_class: usize) -> Vec<(String, Label)> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for label in Label::ALL {
        for i in 0..n_per_class {
            out.push((format!("{label}-{i:04}"), label));
        }
    }
    out
}

/// Relative image path used for a synthetic slice.
pub fn synth_path(subject_id: &str, plane: Plane) -> String {
    format!("images/{subject_id}_{plane}.pgm")
}

/// Manifest of a synthetic corpus: every subject with all three planes.
pub fn synth_manifest(n_per_class: usize) -> DatasetManifest {
    let mut records = Vec::with_capacity(6 * n_per_class);
    for (id, label) in synth_subjects(n_per_class) {
        for plane in Plane::ALL {
            records.push(SubjectRecord {
                image_path: synth_path(&id, plane),
                subject_id: id.clone(),
                label,
                plane,
            });
        }
    }
    DatasetManifest { records }
}

/// One grayscale slice as `size²` bytes. Both classes share a smooth radial
/// gradient with seeded noise; mci slices add two ring-shaped intensity
/// deficits. Each plane stretches and rotates the pattern differently.
pub fn synth_slice(subject_id: &str, label: Label, plane: Plane, seed: u64, p: &SynthParams) -> Vec<u8> {
    let subject_seed = rng::derive_seed(seed, rng::fnv1a(subject_id.as_bytes()));
    let mut subject = rng::rng(subject_seed);
    let brightness: f64 = subject.gen_range(0.92..1.08);
    let jitter = (subject.gen_range(-2.0..2.0), subject.gen_range(-2.0..2.0));
    let ring_shift: f64 = subject.gen_range(-0.04..0.04);
    let mut noise = rng::rng(rng::derive_seed(subject_seed, plane as u64 + 1));
    let (sx, sy, angle) = match plane {
        Plane::Frontal => (1.0, 1.2, 0.0),
        Plane::Sagittal => (1.25, 0.9, 0.35),
        Plane::Axial => (1.0, 1.0, -0.6),
    };
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let half = p.size as f64 / 2.0;
    let centre = (half - 0.5 + jitter.0, half - 0.5 + jitter.1);
    let mut out = Vec::with_capacity(p.size * p.size);
    for y in 0..p.size {
        for x in 0..p.size {
            let dx = (x as f64 - centre.0) / half;
            let dy = (y as f64 - centre.1) / half;
            let u = (cos * dx + sin * dy) / sx;
            let v = (-sin * dx + cos * dy) / sy;
            let r = libm::sqrt(u * u + v * v);
            let mut value = 40.0 + 180.0 * (1.0 - r * r).max(0.0) * brightness;
            if label == Label::Mci {
                for ring in [0.35, 0.65] {
                    let t = (r - ring - ring_shift) / 0.07;
                    value -= p.deficit * libm::exp(-t * t);
                }
            }
            value += noise.gen_range(-p.noise..=p.noise);
            out.push(libm::round(value.clamp(0.0, 255.0)) as u8);
        }
    }
    out
}

/// Grayscale bytes to a 1×1×H×W tensor scaled to [0, 1].
pub fn gray_to_tensor(bytes: &[u8], height: usize, width: usize) -> Result<Tensor> {
    Tensor::new(
        vec![1, 1, height, width],
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Majority vote over a subject's slice predictions; ties go to mci.
pub fn majority_vote(votes: &[Label]) -> Label {
    let mci = votes.iter().filter(|&&l| l == Label::Mci).count();
    if 2 * mci >= votes.len() {
        Label::Mci
    } else {
        Label::Normal
    }
}

impl fmt::Display for ClassSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "normal: {}, mci: {}", self.normal, self.mci)
    }
}
