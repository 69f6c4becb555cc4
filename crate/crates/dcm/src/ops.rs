//! Layer primitives: affine forward/backward, elementwise activations,
//! fused softmax cross-entropy, MAE on probabilities, and batch
//! standardization. Each backward is the exact adjoint of its forward and is
//! held to the finite-difference oracle in the tests.

use std::str::FromStr;

use crate::error::{DcmError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl FromStr for Activation {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown activation `{other}` (expected relu or silu)"
            ))),
        }
    }
}

fn check_shapes<F: Scalar>(
    op: &'static str,
    left: &Matrix<F>,
    right: &Matrix<F>,
    ok: bool,
) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DcmError::ShapeMismatch {
            op,
            left_rows: left.rows(),
            left_cols: left.cols(),
            right_rows: right.rows(),
            right_cols: right.cols(),
        })
    }
}

/// `out[i][j] = sum_k x[i][k] * w[j][k] + b[j]` for `x: B x d`, `w: C x d`.
pub fn linear_forward<F: Scalar>(x: &Matrix<F>, w: &Matrix<F>, b: &[F]) -> Result<Matrix<F>> {
    check_shapes("linear_forward", x, w, x.cols() == w.cols())?;
    if b.len() != w.rows() {
        return Err(DcmError::LengthMismatch {
            op: "linear_forward bias",
            expected: w.rows(),
            got: b.len(),
        });
    }
    let (batch, classes) = (x.rows(), w.rows());
    let mut out = Matrix::zeros(batch, classes);
    for i in 0..batch {
        let xi = x.row(i);
        for j in 0..classes {
            let wj = w.row(j);
            let mut acc = b[j];
            for (xv, wv) in xi.iter().zip(wj.iter()) {
                acc += *xv * *wv;
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Adjoint of [`linear_forward`]: returns `(dX, dW, db)`.
pub fn linear_backward<F: Scalar>(
    upstream: &Matrix<F>,
    x: &Matrix<F>,
    w: &Matrix<F>,
) -> Result<(Matrix<F>, Matrix<F>, Vec<F>)> {
    check_shapes(
        "linear_backward",
        upstream,
        w,
        upstream.cols() == w.rows() && upstream.rows() == x.rows(),
    )?;
    let (batch, classes, features) = (x.rows(), w.rows(), w.cols());
    let mut dx = Matrix::zeros(batch, features);
    let mut dw = Matrix::zeros(classes, features);
    let mut db = vec![F::zero(); classes];
    for i in 0..batch {
        let xi = x.row(i);
        let ui = upstream.row(i);
        for j in 0..classes {
            let u = ui[j];
            db[j] += u;
            let wj = w.row(j);
            let dxi = dx.row_mut(i);
            for k in 0..features {
                dxi[k] += u * wj[k];
            }
            let dwj = dw.row_mut(j);
            for k in 0..features {
                dwj[k] += u * xi[k];
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu_derivative<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn activation_forward<F: Scalar>(x: &Matrix<F>, kind: Activation) -> Matrix<F> {
    match kind {
        Activation::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
        Activation::Silu => x.map(silu),
    }
}

pub fn activation_backward<F: Scalar>(
    upstream: &Matrix<F>,
    x: &Matrix<F>,
    kind: Activation,
) -> Matrix<F> {
    debug_assert_eq!(upstream.shape(), x.shape());
    let mut out = upstream.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data().iter()) {
        let d = match kind {
            Activation::Relu => {
                if v > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Silu => silu_derivative(v),
        };
        *o *= d;
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax<F: Scalar>(z: &Matrix<F>) -> Matrix<F> {
    let mut p = z.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    p
}

/// Vector-Jacobian product of the softmax: given `p = softmax(z)` and the
/// upstream gradient with respect to `p`, returns the gradient with respect
/// to `z`: `dz_ic = p_ic * (dp_ic - sum_j dp_ij * p_ij)`.
pub fn softmax_vjp<F: Scalar>(p: &Matrix<F>, upstream: &Matrix<F>) -> Matrix<F> {
    debug_assert_eq!(p.shape(), upstream.shape());
    let mut dz = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let pi = p.row(i);
        let ui = upstream.row(i);
        let dot = pi
            .iter()
            .zip(ui.iter())
            .map(|(&pv, &uv)| pv * uv)
            .fold(F::zero(), |a, v| a + v);
        let di = dz.row_mut(i);
        for c in 0..pi.len() {
            di[c] = pi[c] * (ui[c] - dot);
        }
    }
    dz
}

fn validate_one_hot<F: Scalar>(labels: &Matrix<F>) -> Result<()> {
    for i in 0..labels.rows() {
        let mut ones = 0usize;
        for &v in labels.row(i) {
            if v == F::one() {
                ones += 1;
            } else if v != F::zero() {
                return Err(DcmError::InvalidLabels(format!(
                    "row {i} contains {v}, expected 0 or 1"
                )));
            }
        }
        if ones != 1 {
            return Err(DcmError::InvalidLabels(format!(
                "row {i} has {ones} ones, expected exactly 1"
            )));
        }
    }
    Ok(())
}

/// Fused softmax + cross-entropy. Returns the batch-mean loss and the
/// probability matrix. The loss per row is computed as `logsumexp(z) -
/// z_label`, which is shift-invariant and never takes the log of a tiny
/// probability.
pub fn softmax_ce_forward<F: Scalar>(z: &Matrix<F>, labels: &Matrix<F>) -> Result<(F, Matrix<F>)> {
    check_shapes("softmax_ce_forward", z, labels, z.shape() == labels.shape())?;
    z.ensure_finite("softmax_ce_forward logits")?;
    validate_one_hot(labels)?;
    let p = softmax(z);
    let batch = z.rows();
    let mut loss = F::zero();
    for i in 0..batch {
        let zi = z.row(i);
        let max = zi.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = max
            + zi.iter()
                .map(|&v| (v - max).exp())
                .fold(F::zero(), |a, v| a + v)
                .ln();
        let z_label = zi
            .iter()
            .zip(labels.row(i))
            .find(|(_, &y)| y == F::one())
            .map(|(&v, _)| v)
            .expect("validated one-hot row");
        loss += lse - z_label;
    }
    Ok((loss / F::from_usize(batch), p))
}

/// Gradient of the batch-mean cross-entropy with respect to the logits:
/// `(p - y) / B`.
pub fn softmax_ce_backward<F: Scalar>(p: &Matrix<F>, labels: &Matrix<F>) -> Matrix<F> {
    debug_assert_eq!(p.shape(), labels.shape());
    let b = F::from_usize(p.rows());
    let mut g = p.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(labels.data().iter()) {
        *gv = (*gv - yv) / b;
    }
    g
}

/// Mean absolute error on probabilities: batch-mean of `sum_j |p_ij - y_ij|`,
/// with the subgradient `sign(p - y) / B` (sign(0) = 0).
pub fn mae_loss<F: Scalar>(p: &Matrix<F>, labels: &Matrix<F>) -> (F, Matrix<F>) {
    debug_assert_eq!(p.shape(), labels.shape());
    let inv_b = F::one() / F::from_usize(p.rows());
    let mut loss = F::zero();
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for (idx, (&pv, &yv)) in p.data().iter().zip(labels.data().iter()).enumerate() {
        let diff = pv - yv;
        loss += diff.abs();
        grad.data_mut()[idx] = if diff > F::zero() {
            inv_b
        } else if diff < F::zero() {
            -inv_b
        } else {
            F::zero()
        };
    }
    (loss * inv_b, grad)
}

/// One-hot encode class indices into a `B x C` matrix.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Result<Matrix<F>> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(DcmError::InvalidLabels(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        m[(i, y)] = F::one();
    }
    Ok(m)
}

/// Column-wise batch standardization: each column is shifted to zero mean and
/// scaled to unit variance (population convention, divisor B), with an eps
/// guard so constant columns map to zero instead of dividing by zero.
/// Returns the standardized matrix and the per-column `1 / sqrt(var + eps)`
/// needed by the backward pass.
pub fn standardize_forward<F: Scalar>(x: &Matrix<F>, eps: F) -> (Matrix<F>, Vec<F>) {
    let (batch, cols) = x.shape();
    let inv_b = F::one() / F::from_usize(batch);
    let mut out = Matrix::zeros(batch, cols);
    let mut inv_std = vec![F::zero(); cols];
    for k in 0..cols {
        let mut mean = F::zero();
        for i in 0..batch {
            mean += x[(i, k)];
        }
        mean *= inv_b;
        let mut var = F::zero();
        for i in 0..batch {
            let d = x[(i, k)] - mean;
            var += d * d;
        }
        var *= inv_b;
        let s = F::one() / (var + eps).sqrt();
        inv_std[k] = s;
        for i in 0..batch {
            out[(i, k)] = (x[(i, k)] - mean) * s;
        }
    }
    (out, inv_std)
}

/// Adjoint of [`standardize_forward`], the usual batch-norm backward with
/// unit scale and zero shift:
/// `dx = inv_std/B * (B*du - sum_i du - xhat * sum_i (du * xhat))`.
pub fn standardize_backward<F: Scalar>(
    upstream: &Matrix<F>,
    normalized: &Matrix<F>,
    inv_std: &[F],
) -> Matrix<F> {
    debug_assert_eq!(upstream.shape(), normalized.shape());
    let (batch, cols) = upstream.shape();
    let b = F::from_usize(batch);
    let mut dx = Matrix::zeros(batch, cols);
    for k in 0..cols {
        let mut sum_du = F::zero();
        let mut sum_du_xhat = F::zero();
        for i in 0..batch {
            sum_du += upstream[(i, k)];
            sum_du_xhat += upstream[(i, k)] * normalized[(i, k)];
        }
        let scale = inv_std[k] / b;
        for i in 0..batch {
            dx[(i, k)] =
                scale * (b * upstream[(i, k)] - sum_du - normalized[(i, k)] * sum_du_xhat);
        }
    }
    dx
}
