//! Gradient-error measurement and run-metric collection.
//!
//! The gradient error of a batch is the L2 norm of the difference between
//! the designated backbone layer's gradients computed from noisy labels and
//! from clean labels for the same forward pass. Only the noisy gradients are
//! ever applied; the clean backward is observation-only. The convention
//! recorded here is the batch-level norm of the mean-loss gradient
//! difference, summed over a whole epoch into the `grad_err` column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{DcmError, Result};
use crate::matrix::Matrix;
use crate::tape::{TapeGrads, SLOT_BACKBONE_FC2};
use crate::Real;

/// The backbone layer whose gradients the error is measured over: the final
/// affine layer, the one closest to the masked head.
pub const DESIGNATED_LAYER_TAG: &str = "backbone.fc2";

/// Flatten the designated layer's gradients: weight row-major, then bias.
pub fn designated_layer_grads(grads: &TapeGrads<Real>) -> Result<Vec<Real>> {
    let (dw, db) = grads.linear(SLOT_BACKBONE_FC2)?;
    let mut flat = dw.data().to_vec();
    flat.extend_from_slice(db);
    Ok(flat)
}

/// L2 norm of the difference between two flattened gradients.
pub fn gradient_error(clean: &[Real], noisy: &[Real]) -> Result<Real> {
    if clean.len() != noisy.len() {
        return Err(DcmError::LengthMismatch {
            op: "gradient_error",
            expected: clean.len(),
            got: noisy.len(),
        });
    }
    Ok(clean
        .iter()
        .zip(noisy)
        .map(|(&c, &n)| (n - c) * (n - c))
        .sum::<Real>()
        .sqrt())
}

/// Top-1 accuracy; argmax ties resolve to the smallest class index.
pub fn accuracy(logits: &Matrix<Real>, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        correct += (best == y) as usize;
    }
    correct as f64 / labels.len() as f64
}

/// Mean of the final `min(k, len)` values.
pub fn last_k_mean(series: &[f64], k: usize) -> Result<f64> {
    if series.is_empty() {
        return Err(DcmError::InvalidParameter(
            "last_k_mean of an empty series".into(),
        ));
    }
    let tail = &series[series.len().saturating_sub(k.max(1))..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// One gradient-error observation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientErrorRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub layer_tag: &'static str,
    pub epsilon_sum: Real,
}

/// One row of the per-epoch metrics series.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub grad_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub grad_records: Vec<GradientErrorRecord>,
}

impl RunMetrics {
    pub fn test_acc_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_acc).collect()
    }

    pub fn grad_err_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.grad_err).collect()
    }

    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }

    pub fn best_test_acc(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.test_acc)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The reporting convention for tables: mean test accuracy over the last
    /// 10 epochs.
    pub fn last10_test_acc(&self) -> f64 {
        last_k_mean(&self.test_acc_series(), 10).unwrap_or(0.0)
    }
}

/// Identity of a run, repeated on every CSV row.
#[derive(Debug, Clone)]
pub struct RunLabels {
    pub mask_strategy: String,
    pub mask_ratio: f64,
    pub mask_interval: String,
    pub mask_stage: String,
    pub head: String,
    pub seed: u64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,test_acc,grad_err,mask_strategy,mask_ratio,mask_interval,mask_stage,head,seed";

/// Streaming metrics writer: the header goes out on creation, each epoch row
/// is flushed as soon as it is recorded, so an aborted run leaves a valid
/// partial CSV behind.
pub struct MetricsCsvWriter {
    out: BufWriter<File>,
    labels: RunLabels,
}

impl MetricsCsvWriter {
    pub fn create(path: &Path, labels: RunLabels) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(MetricsCsvWriter { out, labels })
    }

    pub fn write_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            rec.epoch,
            fmt_sig6(rec.train_loss),
            fmt_sig6(rec.train_acc),
            fmt_sig6(rec.test_acc),
            fmt_sig6(rec.grad_err),
            self.labels.mask_strategy,
            fmt_sig6(self.labels.mask_ratio),
            self.labels.mask_interval,
            self.labels.mask_stage,
            self.labels.head,
            self.labels.seed,
        )?;
        self.out.flush()?;
        Ok(())
    }
}

/// Format a float with 6 significant digits, fixed notation for moderate
/// exponents and scientific otherwise (printf %g style).
pub fn fmt_sig6(x: f64) -> String {
    fmt_sig(x, 6)
}

fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if exp < -4 || exp >= sig as i32 {
        let formatted = format!("{:.*e}", sig - 1, x);
        match formatted.split_once('e') {
            Some((mant, e)) => {
                let mant = mant.trim_end_matches('0').trim_end_matches('.');
                format!("{mant}e{e}")
            }
            None => formatted,
        }
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}
