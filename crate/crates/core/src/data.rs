//! Datasets and task streams: synthetic image families, inversion,
//! binarization, split and cross-domain streams, IDX ingestion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

pub mod idx;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub width: usize,
    pub height: usize,
}

/// `n × d` images in `[0, 1]` with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u32>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u32>>, meta: DatasetMeta) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::Shape(format!("images must be n × d, got {:?}", images.shape())));
        }
        if images.cols() != meta.width * meta.height {
            return Err(Error::Shape(format!(
                "{}: d = {} but geometry is {}×{}",
                meta.name,
                images.cols(),
                meta.width,
                meta.height
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("{}: pixel values outside [0, 1]", meta.name)));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::CountMismatch {
                    images: images.rows(),
                    labels: l.len(),
                });
            }
        }
        Ok(Self { images, labels, meta })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_rows(indices)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(images, labels, self.meta.clone())
    }

    /// First `n` examples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn mean_image(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for row in self.images.data().chunks(d) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.len() as f64);
        m
    }

    pub fn mean_intensity(&self) -> f64 {
        self.images.data().iter().sum::<f64>() / self.images.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bars,
    Blobs,
    Checkers,
    Rings,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Bars, Family::Blobs, Family::Checkers, Family::Rings];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bars => "bars",
            Family::Blobs => "blobs",
            Family::Checkers => "checkers",
            Family::Rings => "rings",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown synthetic family '{s}'")))
    }
}

/// Draws `n` images of a synthetic family.
///
/// - bars: 1–3 distinct full rows or full columns at intensity 1; label
///   `3·orientation + count − 1`.
/// - blobs: one or two Gaussian bumps centred in the middle third; label is
///   the bump count − 1.
/// - checkers: a binary checkerboard with cell size 2–4 and random phase;
///   label is the cell size − 2.
/// - rings: an annulus of radius 2.5–4.5 around a near-central point; label
///   is the radius bucket.
pub fn synth_generate(family: Family, n: usize, width: usize, height: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument("synthetic data needs n, width, height ≥ 1".into()));
    }
    let mut rng = SeedStreams::new(seed).stream(&format!("synth/{}", family.name()));
    let d = width * height;
    let mut data = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    let (w, h) = (width as f64, height as f64);
    for img in data.chunks_mut(d) {
        let label = match family {
            Family::Bars => {
                let vertical = rng.random_bool(0.5);
                let lines = if vertical { width } else { height };
                let count = rng.random_range(1..=3usize).min(lines);
                let picks = rand::seq::index::sample(&mut rng, lines, count);
                for p in picks.iter() {
                    if vertical {
                        (0..height).for_each(|r| img[r * width + p] = 1.0);
                    } else {
                        (0..width).for_each(|c| img[p * width + c] = 1.0);
                    }
                }
                3 * u32::from(vertical) + count as u32 - 1
            }
            Family::Blobs => {
                let count = rng.random_range(1..=2usize);
                for _ in 0..count {
                    let cx = rng.random_range(w / 3.0..2.0 * w / 3.0) - 0.5;
                    let cy = rng.random_range(h / 3.0..2.0 * h / 3.0) - 0.5;
                    let s: f64 = rng.random_range(1.2..2.2);
                    for r in 0..height {
                        for c in 0..width {
                            let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                            let v = &mut img[r * width + c];
                            *v = f64::max(*v, (-d2 / (2.0 * s * s)).exp());
                        }
                    }
                }
                count as u32 - 1
            }
            Family::Checkers => {
                let cell = rng.random_range(2..=4usize);
                let (px, py) = (rng.random_range(0..cell), rng.random_range(0..cell));
                for r in 0..height {
                    for c in 0..width {
                        if ((r + py) / cell + (c + px) / cell) % 2 == 0 {
                            img[r * width + c] = 1.0;
                        }
                    }
                }
                cell as u32 - 2
            }
            Family::Rings => {
                let cx = w / 2.0 - 0.5 + rng.random_range(-1.0..1.0);
                let cy = h / 2.0 - 0.5 + rng.random_range(-1.0..1.0);
                let radius: f64 = rng.random_range(2.5..4.5);
                for r in 0..height {
                    for c in 0..width {
                        let dist = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
                        img[r * width + c] = (-(dist - radius).powi(2) / (2.0 * 0.45 * 0.45)).exp();
                    }
                }
                ((radius - 2.5) / 0.5) as u32
            }
        };
        labels.push(label);
    }
    Dataset::new(
        Tensor::matrix(n, d, data)?,
        Some(labels),
        DatasetMeta {
            name: family.name().to_string(),
            width,
            height,
        },
    )
}

/// Pixel-wise `1 − x`; the name gains a `-inv` suffix.
pub fn inverse_domain(dataset: &Dataset) -> Dataset {
    let data = dataset.images.data().iter().map(|v| 1.0 - v).collect();
    let images = Tensor::new(dataset.images.shape().to_vec(), data).expect("same shape");
    let name = match dataset.meta.name.strip_suffix("-inv") {
        Some(base) => base.to_string(),
        None => format!("{}-inv", dataset.meta.name),
    };
    Dataset {
        images,
        labels: dataset.labels.clone(),
        meta: DatasetMeta {
            name,
            ..dataset.meta.clone()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// `x ≥ 0.5 → 1`
    Threshold,
    /// per-pixel Bernoulli(x)
    Stochastic,
}

pub fn binarize(dataset: &Dataset, mode: Binarize, seed: u64) -> Dataset {
    let data: Vec<f64> = match mode {
        Binarize::Threshold => dataset
            .images
            .data()
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
        Binarize::Stochastic => {
            let mut rng = SeedStreams::new(seed).stream("binarize");
            dataset
                .images
                .data()
                .iter()
                .map(|&v| if rng.random::<f64>() < v { 1.0 } else { 0.0 })
                .collect()
        }
    };
    Dataset {
        images: Tensor::new(dataset.images.shape().to_vec(), data).expect("same shape"),
        labels: dataset.labels.clone(),
        meta: dataset.meta.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Split,
    CrossDomain,
}

/// Ordered tasks with ids `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    pub kind: StreamKind,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, kind: StreamKind) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("a task stream needs at least one task".into()));
        }
        let dim = tasks[0].train.dim();
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "task ids must be consecutive from 1, found {} at position {}",
                    t.task_id,
                    i + 1
                )));
            }
            if t.train.dim() != dim || t.test.dim() != dim {
                return Err(Error::Shape(format!(
                    "task {} has dimension {} but the stream uses {dim}",
                    t.task_id,
                    t.train.dim()
                )));
            }
        }
        Ok(Self { tasks, kind })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn task(&self, id: usize) -> Option<&Task> {
        id.checked_sub(1).and_then(|i| self.tasks.get(i))
    }

    /// Keeps the first `n` tasks.
    pub fn truncated(&self, n: usize) -> Result<TaskStream> {
        TaskStream::new(self.tasks[..n.min(self.len())].to_vec(), self.kind)
    }
}

/// One task per label group, preserving the given train/test split.
pub fn make_split_stream(train: &Dataset, test: &Dataset, groups: &[Vec<u32>]) -> Result<TaskStream> {
    let (Some(train_labels), Some(test_labels)) = (train.labels(), test.labels()) else {
        return Err(Error::InvalidArgument("split streams need labeled data".into()));
    };
    let mut seen = std::collections::BTreeSet::new();
    for g in groups {
        for l in g {
            if !seen.insert(*l) {
                return Err(Error::InvalidArgument(format!("label {l} appears in two groups")));
            }
        }
    }
    for l in train_labels.iter().chain(test_labels) {
        if !seen.contains(l) {
            return Err(Error::InvalidArgument(format!("label {l} is not covered by any group")));
        }
    }
    let pick = |ds: &Dataset, labels: &[u32], g: &[u32]| -> Result<Dataset> {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| g.contains(&labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("label group {g:?} selects no examples")));
        }
        let mut sub = ds.subset(&idx)?;
        sub.meta.name = format!(
            "{}[{}]",
            ds.meta.name,
            g.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
        );
        Ok(sub)
    };
    let tasks = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            Ok(Task {
                task_id: i + 1,
                train: pick(train, train_labels, g)?,
                test: pick(test, test_labels, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(tasks, StreamKind::Split)
}

/// Source of one cross-domain task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainSource {
    Synthetic(Family),
    Idx {
        train_images: String,
        test_images: String,
    },
}

/// A task spec: a source plus an optional pixel inversion.
///
/// Text form: `bars`, `blobs-inv`, or `idx:<train-images>,<test-images>`
/// optionally followed by `-inv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub source: DomainSource,
    pub inverse: bool,
}

impl FromStr for DomainSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, inverse) = match s.strip_suffix("-inv") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let source = if let Some(paths) = body.strip_prefix("idx:") {
            let (a, b) = paths.split_once(',').ok_or_else(|| {
                Error::InvalidArgument(format!("'{s}': idx specs need '<train>,<test>' paths"))
            })?;
            DomainSource::Idx {
                train_images: a.to_string(),
                test_images: b.to_string(),
            }
        } else {
            DomainSource::Synthetic(body.parse()?)
        };
        Ok(Self { source, inverse })
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source {
            DomainSource::Synthetic(fam) => write!(f, "{}", fam.name())?,
            DomainSource::Idx {
                train_images,
                test_images,
            } => write!(f, "idx:{train_images},{test_images}")?,
        }
        if self.inverse {
            write!(f, "-inv")?;
        }
        Ok(())
    }
}

/// Sizes and geometry for generated streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    pub binarize: Option<Binarize>,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            width: 12,
            height: 12,
            binarize: Some(Binarize::Threshold),
        }
    }
}

/// Heterogeneous tasks in the given order. Synthetic tasks draw train and
/// test from one generator call and split it by index, so the two never
/// share a sample.
pub fn make_cross_domain_stream(specs: &[DomainSpec], settings: &StreamSettings, seed: u64) -> Result<TaskStream> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("a cross-domain stream needs at least one spec".into()));
    }
    let seeds = SeedStreams::new(seed);
    let mut tasks = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let task_seed = seeds.child(&format!("task/{}", i + 1)).seed();
        let (mut train, mut test) = match &spec.source {
            DomainSource::Synthetic(family) => {
                let all = synth_generate(
                    *family,
                    settings.n_train + settings.n_test,
                    settings.width,
                    settings.height,
                    task_seed,
                )?;
                let train_idx: Vec<usize> = (0..settings.n_train).collect();
                let test_idx: Vec<usize> = (settings.n_train..all.len()).collect();
                (all.subset(&train_idx)?, all.subset(&test_idx)?)
            }
            DomainSource::Idx {
                train_images,
                test_images,
            } => (
                load_idx(Path::new(train_images), None)?.head(settings.n_train)?,
                load_idx(Path::new(test_images), None)?.head(settings.n_test)?,
            ),
        };
        if spec.inverse {
            train = inverse_domain(&train);
            test = inverse_domain(&test);
        }
        if let Some(mode) = settings.binarize {
            train = binarize(&train, mode, task_seed ^ 1);
            test = binarize(&test, mode, task_seed ^ 2);
        }
        tasks.push(Task {
            task_id: i + 1,
            train,
            test,
        });
    }
    TaskStream::new(tasks, StreamKind::CrossDomain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn bars_contract() {
        let ds = synth_generate(Family::Bars, 300, 12, 12, 4).unwrap();
        for i in 0..ds.len() {
            let img = ds.images().row(i);
            assert!(img.iter().all(|&v| v == 0.0 || v == 1.0));
            let full_rows = (0..12).filter(|r| (0..12).all(|c| img[r * 12 + c] == 1.0)).count();
            let full_cols = (0..12).filter(|c| (0..12).all(|r| img[r * 12 + c] == 1.0)).count();
            let lines = full_rows.max(full_cols);
            assert!((1..=3).contains(&lines), "image {i} has {lines} lines");
            let on = img.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(on, lines * 12);
        }
    }

    #[test]
    fn generation_is_seeded() {
        for f in Family::ALL {
            assert_eq!(
                synth_generate(f, 20, 12, 12, 9).unwrap(),
                synth_generate(f, 20, 12, 12, 9).unwrap()
            );
            assert_ne!(
                synth_generate(f, 20, 12, 12, 9).unwrap(),
                synth_generate(f, 20, 12, 12, 10).unwrap()
            );
        }
    }

    #[test]
    fn families_are_distinct() {
        let means: Vec<Vec<f64>> = Family::ALL
            .iter()
            .map(|&f| synth_generate(f, 2000, 12, 12, 1).unwrap().mean_image())
            .collect();
        let bound = 0.1 * 144f64.sqrt();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let dist = l2(&means[i], &means[j]);
                assert!(dist > bound, "{:?} vs {:?}: {dist}", Family::ALL[i], Family::ALL[j]);
            }
        }
    }

    #[test]
    fn inverse_is_involution() {
        let ds = synth_generate(Family::Blobs, 50, 12, 12, 2).unwrap();
        let inv = inverse_domain(&ds);
        assert_eq!(inv.meta.name, "blobs-inv");
        assert!((inv.mean_intensity() - (1.0 - ds.mean_intensity())).abs() < 1e-12);
        let back = inverse_domain(&inv);
        assert_eq!(back.meta.name, "blobs");
        for (a, b) in back.images().data().iter().zip(ds.images().data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zeros = Dataset::new(
            Tensor::zeros(vec![1, 4]).unwrap(),
            None,
            DatasetMeta { name: "z".into(), width: 2, height: 2 },
        )
        .unwrap();
        assert!(inverse_domain(&zeros).images().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn binarize_modes() {
        let one = |v: f64, n: usize| {
            Dataset::new(
                Tensor::matrix(n, 1, vec![v; n]).unwrap(),
                None,
                DatasetMeta { name: "p".into(), width: 1, height: 1 },
            )
            .unwrap()
        };
        assert_eq!(binarize(&one(0.7, 1), Binarize::Threshold, 0).images().data(), &[1.0]);
        let b = binarize(&synth_generate(Family::Rings, 30, 12, 12, 1).unwrap(), Binarize::Threshold, 0);
        assert_eq!(binarize(&b, Binarize::Threshold, 0), b);
        let s = binarize(&one(0.7, 10_000), Binarize::Stochastic, 5);
        assert!(s.images().data().iter().all(|&v| v == 0.0 || v == 1.0));
        // binomial 99.7% interval half-width: 3·sqrt(0.21 / 1e4) ≈ 0.0137
        assert!((s.mean_intensity() - 0.7).abs() < 0.015);
    }

    #[test]
    fn split_stream_partitions() {
        let all = synth_generate(Family::Bars, 400, 12, 12, 3).unwrap();
        let train = all.head(300).unwrap();
        let test = all.subset(&(300..400).collect::<Vec<_>>()).unwrap();
        let s = make_split_stream(&train, &test, &[vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
        assert_eq!(s.len(), 2);
        let n: usize = s.tasks().iter().map(|t| t.train.len()).sum();
        assert_eq!(n, train.len());
        let l1: Vec<u32> = s.tasks()[0].train.labels().unwrap().to_vec();
        assert!(l1.iter().all(|l| *l < 3));
        assert!(make_split_stream(&train, &test, &[vec![0, 1, 2], vec![2, 3, 4, 5]]).is_err());
        assert!(make_split_stream(&train, &test, &[vec![0, 1, 2]]).is_err());
    }

    #[test]
    fn cross_domain_stream_order_and_disjointness() {
        let specs: Vec<DomainSpec> = ["bars", "blobs", "bars-inv"].iter().map(|s| s.parse().unwrap()).collect();
        let settings = StreamSettings { n_train: 40, n_test: 10, ..Default::default() };
        let s = make_cross_domain_stream(&specs, &settings, 7).unwrap();
        assert_eq!(s.len(), 3);
        let names: Vec<&str> = s.tasks().iter().map(|t| t.train.meta.name.as_str()).collect();
        assert_eq!(names, ["bars", "blobs", "bars-inv"]);
        assert!(s.tasks().iter().all(|t| t.train.dim() == 144));
        assert_eq!(s, make_cross_domain_stream(&specs, &settings, 7).unwrap());
        // train and test are disjoint index ranges of one generator draw
        let raw = synth_generate(Family::Bars, 50, 12, 12, SeedStreams::new(7).child("task/1").seed()).unwrap();
        let raw = binarize(&raw, Binarize::Threshold, 0);
        assert_eq!(s.tasks()[0].train.images().data(), raw.head(40).unwrap().images().data());
        assert_eq!(
            s.tasks()[0].test.images().data(),
            raw.subset(&(40..50).collect::<Vec<_>>()).unwrap().images().data()
        );
        assert_eq!(specs[2].to_string(), "bars-inv");
        assert!("nope".parse::<DomainSpec>().is_err());
    }
}
