//! Uniform B-spline basis on a clamped interval.
//!
//! The grid places `G + 2k + 1` uniformly spaced knots so that the knot
//! vector extends `k` intervals beyond `[lower, upper]` on each side, giving
//! `G + k` basis functions of degree `k` that form a partition of unity on
//! the interval. Evaluation uses the Cox-de Boor triangular scheme over the
//! single knot span containing `x`; inputs outside the interval are clamped
//! to the boundary first.

use crate::error::{DcmError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid<F: Scalar> {
    lower: F,
    upper: F,
    intervals: usize,
    degree: usize,
    knots: Vec<F>,
}

impl<F: Scalar> SplineGrid<F> {
    pub fn new(lower: F, upper: F, intervals: usize, degree: usize) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(DcmError::InvalidParameter(format!(
                "spline grid needs lower < upper, got [{lower}, {upper}]"
            )));
        }
        if intervals < 1 || degree < 1 {
            return Err(DcmError::InvalidParameter(format!(
                "spline grid needs intervals >= 1 and degree >= 1, got G={intervals}, k={degree}"
            )));
        }
        let h = (upper - lower) / F::from_usize(intervals);
        let knots = (0..=intervals + 2 * degree)
            .map(|i| lower + h * (F::from_usize(i) - F::from_usize(degree)))
            .collect();
        Ok(SplineGrid {
            lower,
            upper,
            intervals,
            degree,
            knots,
        })
    }

    /// The default grid for classifier heads: features are batch-standardized
    /// before the head, so [-2, 2] covers roughly 95% of inputs.
    pub fn default_for_heads() -> Self {
        SplineGrid::new(F::from_f64(-2.0), F::from_f64(2.0), 8, 3)
            .expect("default grid parameters are valid")
    }

    pub fn lower(&self) -> F {
        self.lower
    }

    pub fn upper(&self) -> F {
        self.upper
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[F] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn basis_count(&self) -> usize {
        self.intervals + self.degree
    }

    fn clamp(&self, x: F) -> F {
        x.max(self.lower).min(self.upper)
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` containing the clamped
    /// input, restricted to the interior spans `k ..= G+k-1` so the value
    /// `x = upper` lands in the last interior span.
    fn span(&self, x: F) -> usize {
        let h = (self.upper - self.lower) / F::from_usize(self.intervals);
        let offset = ((x - self.lower) / h).floor().as_f64();
        let idx = if offset < 0.0 { 0 } else { offset as usize };
        (self.degree + idx.min(self.intervals - 1)).min(self.intervals + self.degree - 1)
    }

    /// All nonzero basis functions of degree `deg` on span `s`, written into
    /// `n[0..=deg]` where `n[r] = B_{s-deg+r, deg}(x)`.
    fn span_basis(&self, x: F, s: usize, deg: usize, n: &mut [F]) {
        n[0] = F::one();
        let mut left = vec![F::zero(); deg + 1];
        let mut right = vec![F::zero(); deg + 1];
        for d in 1..=deg {
            left[d] = x - self.knots[s + 1 - d];
            right[d] = self.knots[s + d] - x;
            let mut saved = F::zero();
            for r in 0..d {
                let denom = right[r + 1] + left[d - r];
                let temp = n[r] / denom;
                n[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            n[d] = saved;
        }
    }

    /// Evaluate all `G + k` basis weights at `x` into `out`.
    pub fn basis(&self, x: F, out: &mut [F]) {
        debug_assert_eq!(out.len(), self.basis_count());
        out.fill(F::zero());
        let xc = self.clamp(x);
        let s = self.span(xc);
        let k = self.degree;
        let mut local = vec![F::zero(); k + 1];
        self.span_basis(xc, s, k, &mut local);
        for (r, &v) in local.iter().enumerate() {
            out[s - k + r] = v;
        }
    }

    /// Evaluate basis weights and their derivatives with respect to the raw
    /// (unclamped) input. Outside `[lower, upper]` the clamp makes the basis
    /// constant, so the derivative is zero there.
    pub fn basis_and_deriv(&self, x: F, out: &mut [F], d_out: &mut [F]) {
        debug_assert_eq!(out.len(), self.basis_count());
        debug_assert_eq!(d_out.len(), self.basis_count());
        self.basis(x, out);
        d_out.fill(F::zero());
        if x < self.lower || x > self.upper {
            return;
        }
        let s = self.span(x);
        let k = self.degree;
        let deg_f = F::from_usize(k);
        // Degree k-1 row on the same span: lower[r] = B_{s-k+1+r, k-1}(x).
        let mut lower_deg = vec![F::zero(); k];
        self.span_basis(x, s, k - 1, &mut lower_deg);
        let low = |m: usize| -> F {
            // B_{m, k-1}(x), nonzero only for m in s-k+1 ..= s.
            if m + k >= s + 1 && m <= s {
                lower_deg[m + k - 1 - s]
            } else {
                F::zero()
            }
        };
        for m in s - k..=s {
            let denom_a = self.knots[m + k] - self.knots[m];
            let denom_b = self.knots[m + k + 1] - self.knots[m + 1];
            d_out[m] = deg_f * (low(m) / denom_a - low(m + 1) / denom_b);
        }
    }
}

/// Basis weights at `x` as a fresh vector.
pub fn bspline_basis<F: Scalar>(x: F, grid: &SplineGrid<F>) -> Vec<F> {
    let mut out = vec![F::zero(); grid.basis_count()];
    grid.basis(x, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grid() {
        assert!(SplineGrid::new(1.0, 1.0, 4, 3).is_err());
        assert!(SplineGrid::new(2.0, 1.0, 4, 3).is_err());
        assert!(SplineGrid::new(0.0, 1.0, 0, 3).is_err());
        assert!(SplineGrid::new(0.0, 1.0, 4, 0).is_err());
    }

    #[test]
    fn linear_hats_hand_values() {
        // k=1, G=2 on [0,1]: three hat functions peaked at 0, 0.5, 1.
        let grid = SplineGrid::<f64>::new(0.0, 1.0, 2, 1).unwrap();
        assert_eq!(grid.basis_count(), 3);
        let b = bspline_basis(0.25, &grid);
        assert!((b[0] - 0.5).abs() < 1e-15);
        assert!((b[1] - 0.5).abs() < 1e-15);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn partition_of_unity_at_boundary() {
        let grid = SplineGrid::<f64>::default_for_heads();
        for x in [grid.lower(), grid.upper()] {
            let b = bspline_basis(x, &grid);
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn partition_of_unity_sweep() {
        let grid = SplineGrid::<f64>::default_for_heads();
        for i in 0..1000 {
            let x = grid.lower()
                + (grid.upper() - grid.lower()) * (i as f64 / 999.0);
            let b = bspline_basis(x, &grid);
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "x={x}, sum={sum}");
            assert!(b.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn out_of_range_clamps_to_boundary() {
        let grid = SplineGrid::<f64>::default_for_heads();
        assert_eq!(bspline_basis(-10.0, &grid), bspline_basis(-2.0, &grid));
        assert_eq!(bspline_basis(7.3, &grid), bspline_basis(2.0, &grid));
    }

    #[test]
    fn derivative_matches_central_differences() {
        let grid = SplineGrid::<f64>::default_for_heads();
        let n = grid.basis_count();
        let eps = 1e-6;
        for i in 0..100 {
            // Interior points away from the clamp boundary.
            let x = -1.95 + 3.9 * (i as f64 + 0.5) / 100.0;
            let mut b = vec![0.0; n];
            let mut db = vec![0.0; n];
            grid.basis_and_deriv(x, &mut b, &mut db);
            let plus = bspline_basis(x + eps, &grid);
            let minus = bspline_basis(x - eps, &grid);
            for m in 0..n {
                let numeric = (plus[m] - minus[m]) / (2.0 * eps);
                let denom = 1.0_f64.max(db[m].abs());
                assert!(
                    ((numeric - db[m]) / denom).abs() < 1e-5,
                    "x={x}, m={m}: numeric {numeric} vs analytic {}",
                    db[m]
                );
            }
        }
    }

    #[test]
    fn derivative_zero_outside_range() {
        let grid = SplineGrid::<f64>::default_for_heads();
        let n = grid.basis_count();
        let mut b = vec![0.0; n];
        let mut db = vec![0.0; n];
        grid.basis_and_deriv(5.0, &mut b, &mut db);
        assert!(db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn works_in_f32() {
        let grid = SplineGrid::<f32>::new(-2.0, 2.0, 8, 3).unwrap();
        let b = bspline_basis(0.37_f32, &grid);
        let sum: f32 = b.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}
