//! Labeled sample lists and in-memory training sets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One row of a manifest CSV (`path,subject_id`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Csv(e)
    }
}

/// Dense class indices for subject ids, in sorted id order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMap {
    pub subjects: Vec<String>,
}

impl LabelMap {
    pub fn from_entries(entries: &[ManifestEntry]) -> Self {
        let mut subjects: Vec<String> = entries.iter().map(|e| e.subject_id.clone()).collect();
        subjects.sort();
        subjects.dedup();
        LabelMap { subjects }
    }

    pub fn label(&self, subject: &str) -> Option<usize> {
        self.subjects.binary_search_by(|s| s.as_str().cmp(subject)).ok()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Single-channel images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != height * width) {
            return Err(Error::Shape(format!(
                "image has {} pixels, expected {height}x{width}",
                bad.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::Contract(format!("label {l} >= {n_classes} classes")));
        }
        Ok(Dataset {
            height,
            width,
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            images: idx.iter().map(|i| self.images[*i].clone()).collect(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// `[idx.len(), 1, H, W]` batch.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.height * self.width);
        for i in idx {
            data.extend(self.images[*i].iter().map(|v| T::from_f64_lossy(*v as f64)));
        }
        Tensor::from_vec([idx.len(), 1, self.height, self.width], data).expect("batch shape")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|i| self.labels[*i]).collect()
    }

    /// Sample indices grouped by label.
    pub fn by_label(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            m.entry(*l).or_default().push(i);
        }
        m
    }
}

/// Box-averages `factor × factor` blocks, then scales the result to zero mean
/// and unit variance.
pub fn network_input(pixels: &[f32], h: usize, w: usize, factor: usize) -> Result<Vec<f32>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 || pixels.len() != h * w {
        return Err(Error::Shape(format!(
            "cannot reduce {h}x{w} ({} pixels) by {factor}",
            pixels.len()
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += pixels[y * w + x] as f64;
        }
    }
    let area = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
    Ok(out.iter().map(|v| ((v - mean) * inv) as f32).collect())
}
