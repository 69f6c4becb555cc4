//! Desk-scale synthetic data and the small trainable backbone that feeds the
//! classifier heads.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{DcmError, Result};
use crate::matrix::Matrix;
use crate::noise::{derive_seed, NoiseSpec};
use crate::ops::{
    activation_forward, linear_forward, standardize_forward, Activation,
};
use crate::tape::{GradTape, TapeOp, SLOT_BACKBONE_FC1, SLOT_BACKBONE_FC2};
use crate::Real;

/// Eps guard used by the backbone's output standardization.
pub const STANDARDIZE_EPS: Real = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<Real>,
    pub label_true: usize,
    pub label_observed: usize,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_matrix(&self, indices: &[usize]) -> Matrix<Real> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Matrix::from_vec(indices.len(), self.dim, data).expect("sized above")
    }

    pub fn labels_true(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label_true).collect()
    }

    pub fn labels_observed(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .map(|&i| self.samples[i].label_observed)
            .collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Corrupt the observed labels in place; true labels are retained for
    /// instrumentation. Returns the number of flipped samples.
    pub fn apply_noise(&mut self, spec: &NoiseSpec) -> Result<usize> {
        let labels: Vec<usize> = self.samples.iter().map(|s| s.label_true).collect();
        let (noisy, flipped) = spec.apply(&labels, self.classes)?;
        let mut flips = 0;
        for ((sample, y), f) in self.samples.iter_mut().zip(noisy).zip(flipped) {
            sample.label_observed = y;
            sample.flipped = f;
            flips += f as usize;
        }
        Ok(flips)
    }

    /// CSV export: `feature_0..feature_{d-1}, y_true, y_observed, flipped`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for k in 0..self.dim {
            write!(out, "feature_{k},")?;
        }
        writeln!(out, "y_true,y_observed,flipped")?;
        for s in &self.samples {
            for v in &s.features {
                write!(out, "{v},")?;
            }
            writeln!(
                out,
                "{},{},{}",
                s.label_true,
                s.label_observed,
                s.flipped as u8
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Gaussian class blobs: class means sit at `separation * (unit direction)`
/// with directions drawn orthonormal while the dimension allows and random
/// unit vectors beyond that; samples add isotropic `spread` noise.
pub fn make_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n_per_class < 1 || dim < 1 {
        return Err(DcmError::InvalidParameter(format!(
            "make_blobs needs classes >= 2, n_per_class >= 1, dim >= 1 \
             (got C={classes}, n={n_per_class}, d={dim})"
        )));
    }
    if !(separation > 0.0) || !(spread > 0.0) {
        return Err(DcmError::InvalidParameter(format!(
            "make_blobs needs positive separation and spread, got {separation} and {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<Vec<Real>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v: Vec<Real> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if c < dim {
            // Gram-Schmidt against the earlier means keeps the first
            // min(C, d) directions orthogonal.
            for prev in &means {
                let dot: Real = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                let norm2: Real = prev.iter().map(|a| a * a).sum();
                for (vi, pi) in v.iter_mut().zip(prev.iter()) {
                    *vi -= dot / norm2 * pi;
                }
            }
        }
        let norm: Real = v.iter().map(|a| a * a).sum::<Real>().sqrt();
        if norm < 1e-9 {
            return Err(DcmError::InvalidParameter(
                "degenerate blob direction; try another seed".into(),
            ));
        }
        means.push(v.into_iter().map(|a| a / norm * separation).collect());
    }
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let mut samples = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        for _ in 0..n_per_class {
            let features = means[c]
                .iter()
                .map(|&m| m + normal.sample(&mut rng))
                .collect();
            samples.push(Sample {
                features,
                label_true: c,
                label_observed: c,
                flipped: false,
            });
        }
    }
    Ok(Dataset {
        dim,
        classes,
        samples,
    })
}

/// Stratified train/test split, deterministic per seed.
pub fn split_train_test(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DcmError::InvalidParameter(format!(
            "test fraction must lie strictly inside (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label_true].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < 2 {
            return Err(DcmError::InvalidParameter(format!(
                "class {c} has {} samples; stratified split needs at least 2",
                indices.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, c as u64]));
        indices.shuffle(&mut rng);
        let n_test = ((indices.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.clamp(1, indices.len() - 1);
        test.extend(indices[..n_test].iter().copied());
        train.extend(indices[n_test..].iter().copied());
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        dim: dataset.dim,
        classes: dataset.classes,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((pick(&train), pick(&test)))
}

/// Deterministic shuffled mini-batches: every epoch visits each sample
/// exactly once, with the order fixed by (seed, epoch).
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64]));
        order.shuffle(&mut rng);
        BatchIterator {
            order,
            batch_size: batch_size.max(1),
            cursor: 0,
        }
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

/// Two affine layers with an elementwise activation between them, followed by
/// batch standardization of the output features.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub w1: Matrix<Real>,
    pub b1: Vec<Real>,
    pub w2: Matrix<Real>,
    pub b2: Vec<Real>,
    pub activation: Activation,
}

impl Backbone {
    /// He-style init: each weight matrix ~ N(0, 2 / fan_in), biases zero.
    pub fn init(input_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let sample = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid std");
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized above")
        };
        Backbone {
            w1: sample(hidden_dim, input_dim, rng),
            b1: vec![0.0; hidden_dim],
            w2: sample(feature_dim, hidden_dim, rng),
            b2: vec![0.0; feature_dim],
            activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Forward pass producing standardized features; records every primitive
    /// on the tape when one is supplied.
    pub fn forward(
        &self,
        x: &Matrix<Real>,
        mut tape: Option<&mut GradTape<Real>>,
    ) -> Result<Matrix<Real>> {
        let z1 = linear_forward(x, &self.w1, &self.b1)?;
        if let Some(t) = tape.as_deref_mut() {
            t.record(TapeOp::Linear {
                x: x.clone(),
                weight: self.w1.clone(),
                mask: None,
                slot: SLOT_BACKBONE_FC1,
            });
        }
        let a = activation_forward(&z1, self.activation);
        if let Some(t) = tape.as_deref_mut() {
            t.record(TapeOp::Activation {
                x: z1,
                kind: self.activation,
            });
        }
        let z2 = linear_forward(&a, &self.w2, &self.b2)?;
        if let Some(t) = tape.as_deref_mut() {
            t.record(TapeOp::Linear {
                x: a,
                weight: self.w2.clone(),
                mask: None,
                slot: SLOT_BACKBONE_FC2,
            });
        }
        let (v, inv_std) = standardize_forward(&z2, STANDARDIZE_EPS);
        if let Some(t) = tape {
            t.record(TapeOp::Standardize {
                normalized: v.clone(),
                inv_std,
            });
        }
        Ok(v)
    }
}
