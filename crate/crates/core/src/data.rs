//! Labeled datasets: a synthetic blob generator plus IDX and CSV loaders.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major samples, each `sample_shape.iter().product()` long.
    pub inputs: Vec<f64>,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, sample_shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::Parse(format!(
                "{} values do not form {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { inputs, sample_shape, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks the given samples into `[n, ...]`.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.inputs[i * per..][..per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        let t = Tensor::new(shape, data).expect("gathered samples match their shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Index batches in a shuffled order; the last batch may be short.
    pub fn shuffled_batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Sequential batches, for evaluation.
    pub fn batches(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Inference-mode mean cross-entropy and accuracy.
pub fn evaluate(graph: &NetworkGraph, data: &Dataset, batch: usize) -> Result<Evaluation> {
    let (mut loss, mut hits) = (0.0, 0usize);
    for idx in data.batches(batch) {
        let (x, y) = data.gather(&idx);
        let logits = graph.forward_gated(&x, false)?;
        loss += ops::softmax_cross_entropy(&logits, &y)? * y.len() as f64;
        hits += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation { loss: loss / n, accuracy: hits as f64 / n })
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
    /// One sample per line: label first, then the flattened features.
    Csv {
        train: PathBuf,
        val: PathBuf,
        shape: Vec<usize>,
        classes: usize,
    },
}

impl DataSpec {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSpec::Synthetic(_) => {}
            DataSpec::Idx { train_images, train_labels, val_images, val_labels } => {
                for p in [train_images, train_labels, val_images, val_labels] {
                    fix(p);
                }
            }
            DataSpec::Csv { train, val, .. } => {
                fix(train);
                fix(val);
            }
        }
    }

    pub fn load(&self) -> Result<Split> {
        match self {
            DataSpec::Synthetic(s) => s.generate(),
            DataSpec::Idx { train_images, train_labels, val_images, val_labels } => {
                let train = load_idx(train_images, train_labels)?;
                let val = load_idx(val_images, val_labels)?;
                let classes = train.classes.max(val.classes);
                Ok(Split {
                    train: Dataset { classes, ..train },
                    val: Dataset { classes, ..val },
                })
            }
            DataSpec::Csv { train, val, shape, classes } => Ok(Split {
                train: load_csv(train, shape, *classes)?,
                val: load_csv(val, shape, *classes)?,
            }),
        }
    }
}

/// Gaussian blobs: each class has a fixed centre and per-channel colour;
/// samples jitter the centre and add pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    /// Pixel noise standard deviation; larger is harder.
    pub noise: f64,
    /// Blob radius in pixels.
    pub radius: f64,
    /// Maximum centre jitter in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 3,
            size: 8,
            train: 2000,
            val: 500,
            noise: 0.5,
            radius: 1.5,
            jitter: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Split> {
        if self.classes < 2 || self.channels == 0 || self.size == 0 {
            return Err(Error::Config("synthetic data needs >= 2 classes and nonzero channels and size".into()));
        }
        if !(self.noise >= 0.0 && self.radius > 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("synthetic noise, radius and jitter must be nonnegative (radius positive)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.size as f64;
        let protos: Vec<(f64, f64, Vec<f64>)> = (0..self.classes)
            .map(|_| {
                let cy = rng.random_range(0.0..s);
                let cx = rng.random_range(0.0..s);
                let colour = (0..self.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                (cy, cx, colour)
            })
            .collect();
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut make = |n: usize| {
            let per = self.channels * self.size * self.size;
            let mut inputs = Vec::with_capacity(n * per);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let label = rng.random_range(0..self.classes);
                let (cy, cx, colour) = &protos[label];
                let (jy, jx) = if self.jitter > 0.0 {
                    (rng.random_range(-self.jitter..=self.jitter), rng.random_range(-self.jitter..=self.jitter))
                } else {
                    (0.0, 0.0)
                };
                let two_r2 = 2.0 * self.radius * self.radius;
                for c in colour {
                    for y in 0..self.size {
                        for x in 0..self.size {
                            let d2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                            inputs.push(c * (-d2 / two_r2).exp() + noise.sample(&mut rng));
                        }
                    }
                }
                labels.push(label);
            }
            Dataset::new(inputs, vec![self.channels, self.size, self.size], labels, self.classes)
        };
        let train = make(self.train)?;
        let val = make(self.val)?;
        Ok(Split { train, val })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_header(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, usize)> {
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX data is supported"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..][..4].try_into().expect("four bytes")) as usize)
        .collect();
    if bytes.len() != header + dims.iter().product::<usize>() {
        return Err(bad("payload length does not match the header"));
    }
    Ok((dims, header))
}

/// Unsigned-byte IDX images (`[n, h, w]` or `[n, c, h, w]`) scaled to
/// `[0, 1]`, with a matching `[n]` label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read(images)?;
    let (dims, off) = idx_header(&img, images)?;
    let lab = read(labels)?;
    let (ldims, loff) = idx_header(&lab, labels)?;
    if ldims.len() != 1 || dims.is_empty() || ldims[0] != dims[0] {
        return Err(Error::Parse(format!(
            "{} and {} disagree on the sample count",
            images.display(),
            labels.display()
        )));
    }
    let sample_shape = match dims.len() {
        3 => vec![1, dims[1], dims[2]],
        2 => vec![dims[1]],
        _ => dims[1..].to_vec(),
    };
    let labels: Vec<usize> = lab[loff..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(img[off..].iter().map(|&b| b as f64 / 255.0).collect(), sample_shape, labels, classes)
}

pub fn load_csv(path: &Path, shape: &[usize], classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let per: usize = shape.iter().product();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse(format!("{}:{}: {msg}", path.display(), n + 1));
        let mut fields = line.split(',').map(str::trim);
        let label = fields.next().unwrap_or_default();
        let label: usize = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        let start = inputs.len();
        for f in fields {
            inputs.push(f.parse::<f64>().map_err(|_| bad(format!("bad value {f:?}")))?);
        }
        if inputs.len() - start != per {
            return Err(bad(format!("expected {per} values, got {}", inputs.len() - start)));
        }
        labels.push(label);
    }
    Dataset::new(inputs, shape.to_vec(), labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_labelled() {
        let spec = SyntheticSpec { train: 50, val: 20, ..Default::default() };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!(a.train.len(), 50);
        assert_eq!(a.val.inputs.len(), 20 * 3 * 8 * 8);
        assert!(a.train.labels.iter().all(|&l| l < 10));
        let other = SyntheticSpec { seed: 1, ..spec }.generate().unwrap();
        assert_ne!(a.train.inputs, other.train.inputs);
    }

    #[test]
    fn gather_and_batches() {
        let d = Dataset::new((0..12).map(f64::from).collect(), vec![2, 1, 1], vec![0, 1, 0, 1, 1, 0], 2).unwrap();
        let (x, y) = d.gather(&[4, 1]);
        assert_eq!(x.shape(), &[2, 2, 1, 1]);
        assert_eq!(x.data(), &[8.0, 9.0, 2.0, 3.0]);
        assert_eq!(y, vec![1, 1]);
        assert_eq!(d.batches(4), vec![vec![0, 1, 2, 3], vec![4, 5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all: Vec<usize> = d.shuffled_batches(4, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 1];
        std::fs::write(dir.path().join("i"), &img).unwrap();
        std::fs::write(dir.path().join("l"), &lab).unwrap();
        let d = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(d.sample_shape, vec![1, 2, 2]);
        assert_eq!(d.labels, vec![3, 1]);
        assert_eq!(d.classes, 4);
        assert_eq!(d.inputs[1], 1.0);
        assert_eq!(d.inputs[2], 0.2);
        std::fs::write(dir.path().join("l"), &lab[..9]).unwrap();
        assert!(matches!(load_idx(&dir.path().join("i"), &dir.path().join("l")), Err(Error::Parse(_))));
    }

    #[test]
    fn csv_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "# label,x0,x1\n1,0.5,2\n0,-1,3e-1\n").unwrap();
        let d = load_csv(&p, &[2], 2).unwrap();
        assert_eq!(d.inputs, vec![0.5, 2.0, -1.0, 0.3]);
        assert_eq!(d.labels, vec![1, 0]);
        std::fs::write(&p, "1,0.5\n").unwrap();
        assert!(matches!(load_csv(&p, &[2], 2), Err(Error::Parse(_))));
        std::fs::write(&p, "5,0.5,1\n").unwrap();
        assert!(matches!(load_csv(&p, &[2], 2), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(load_csv(&dir.path().join("missing"), &[2], 2), Err(Error::Io { .. })));
    }
}
