//! B-spline bases on uniform knot grids.
//!
//! A [`SplineGrid`] fixes the knot layout shared by every learnable univariate
//! function in a KAN layer. Basis values come from the Cox–de Boor recursion
//! over the full extended knot vector, so inputs outside `[range_min,
//! range_max]` are evaluated on the extension knots rather than clamped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid range: range_min ({min}) must be < range_max ({max})")]
    InvalidRange { min: f64, max: f64 },
    #[error("invalid size: num_intervals must be >= 1")]
    InvalidSize,
    #[error("non-finite input: {0}")]
    NonFiniteInput(f64),
    #[error("derivatives need degree >= 1")]
    UnsupportedDegree,
    #[error("expected {expected} coefficients, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Plain description of a grid; the knot vector is always rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub range_min: f64,
    pub range_max: f64,
    pub num_intervals: usize,
    pub degree: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            range_min: -3.0,
            range_max: 3.0,
            num_intervals: 5,
            degree: 3,
        }
    }
}

/// Uniform knot layout with `degree` extension knots beyond each end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct SplineGrid {
    spec: GridSpec,
    spacing: f64,
    knots: Vec<f64>,
}

impl TryFrom<GridSpec> for SplineGrid {
    type Error = SplineError;

    fn try_from(spec: GridSpec) -> Result<Self, Self::Error> {
        make_grid(spec.range_min, spec.range_max, spec.num_intervals, spec.degree)
    }
}

impl From<SplineGrid> for GridSpec {
    fn from(grid: SplineGrid) -> Self {
        grid.spec
    }
}

pub fn make_grid(
    range_min: f64,
    range_max: f64,
    num_intervals: usize,
    degree: usize,
) -> Result<SplineGrid, SplineError> {
    if !(range_min.is_finite() && range_max.is_finite()) || range_min >= range_max {
        return Err(SplineError::InvalidRange {
            min: range_min,
            max: range_max,
        });
    }
    if num_intervals < 1 {
        return Err(SplineError::InvalidSize);
    }
    let width = range_max - range_min;
    let spacing = width / num_intervals as f64;
    let mut knots = Vec::with_capacity(num_intervals + 2 * degree + 1);
    for m in (1..=degree).rev() {
        knots.push(range_min - m as f64 * spacing);
    }
    // endpoints pinned exactly; interior knots interpolated
    knots.push(range_min);
    for j in 1..num_intervals {
        knots.push(range_min + width * (j as f64 / num_intervals as f64));
    }
    knots.push(range_max);
    for m in 1..=degree {
        knots.push(range_max + m as f64 * spacing);
    }
    Ok(SplineGrid {
        spec: GridSpec {
            range_min,
            range_max,
            num_intervals,
            degree,
        },
        spacing,
        knots,
    })
}

impl SplineGrid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn range_min(&self) -> f64 {
        self.spec.range_min
    }

    pub fn range_max(&self) -> f64 {
        self.spec.range_max
    }

    pub fn num_intervals(&self) -> usize {
        self.spec.num_intervals
    }

    pub fn degree(&self) -> usize {
        self.spec.degree
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.spec.num_intervals + self.spec.degree
    }

    /// Basis values `B_j(x)` for `j in 0..G+k`.
    pub fn basis_values(&self, x: f64) -> Result<Vec<f64>, SplineError> {
        check_finite(x)?;
        let mut values = vec![0.0; self.num_basis()];
        self.fill_basis(x, &mut values, None);
        Ok(values)
    }

    /// Basis derivatives `dB_j/dx`. On a knot this is the right derivative.
    pub fn basis_derivatives(&self, x: f64) -> Result<Vec<f64>, SplineError> {
        check_finite(x)?;
        if self.spec.degree == 0 {
            return Err(SplineError::UnsupportedDegree);
        }
        let mut values = vec![0.0; self.num_basis()];
        let mut derivs = vec![0.0; self.num_basis()];
        self.fill_basis(x, &mut values, Some(&mut derivs));
        Ok(derivs)
    }

    /// Writes basis values (and derivatives, if requested) into the given
    /// slices, both of length `num_basis()`. `x` must be finite. For degree 0
    /// the derivative slice is zero-filled.
    pub(crate) fn fill_basis(&self, x: f64, values: &mut [f64], derivs: Option<&mut [f64]>) {
        let degree = self.spec.degree;
        let knots = &self.knots;
        let num_spans = knots.len() - 1;
        // Degree-0 indicators on half-open spans [t_i, t_{i+1}). For degree 0
        // the right endpoint of the nominal range belongs to the last
        // in-range span so the basis still sums to one there.
        let mut work = vec![0.0; num_spans];
        let last_in_range = degree + self.spec.num_intervals - 1;
        if degree == 0 && x == self.spec.range_max {
            work[last_in_range] = 1.0;
        } else if let Some(span) = locate_span(knots, x) {
            work[span] = 1.0;
        }

        let mut lower: Vec<f64> = Vec::new();
        for d in 1..=degree {
            if d == degree {
                lower.clone_from(&work);
            }
            let count = num_spans - d;
            for i in 0..count {
                let left = {
                    let den = knots[i + d] - knots[i];
                    if den > 0.0 {
                        (x - knots[i]) / den * work[i]
                    } else {
                        0.0
                    }
                };
                let right = {
                    let den = knots[i + d + 1] - knots[i + 1];
                    if den > 0.0 {
                        (knots[i + d + 1] - x) / den * work[i + 1]
                    } else {
                        0.0
                    }
                };
                work[i] = left + right;
            }
            work.truncate(count);
        }
        values.copy_from_slice(&work[..values.len()]);

        if let Some(derivs) = derivs {
            if degree == 0 {
                derivs.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            // dB_{i,k}/dx = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}
            let k = degree as f64;
            for (i, d) in derivs.iter_mut().enumerate() {
                let a = k / (knots[i + degree] - knots[i]);
                let b = k / (knots[i + degree + 1] - knots[i + 1]);
                *d = a * lower[i] - b * lower[i + 1];
            }
        }
    }
}

fn locate_span(knots: &[f64], x: f64) -> Option<usize> {
    let last = *knots.last()?;
    if x < knots[0] || x >= last {
        return None;
    }
    // first knot strictly greater than x, minus one
    let upper = knots.partition_point(|&t| t <= x);
    Some(upper - 1)
}

fn check_finite(x: f64) -> Result<(), SplineError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(SplineError::NonFiniteInput(x))
    }
}

/// Residual base activation `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `base_weight * silu(x) + spline_weight * sum_j coeffs[j] * B_j(x)`.
pub fn evaluate_univariate(
    grid: &SplineGrid,
    base_weight: f64,
    spline_weight: f64,
    coeffs: &[f64],
    x: f64,
) -> Result<f64, SplineError> {
    if coeffs.len() != grid.num_basis() {
        return Err(SplineError::LengthMismatch {
            expected: grid.num_basis(),
            actual: coeffs.len(),
        });
    }
    let basis = grid.basis_values(x)?;
    let spline: f64 = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
    Ok(base_weight * silu(x) + spline_weight * spline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degree_zero_grid() {
        let grid = make_grid(-1.0, 1.0, 2, 0).unwrap();
        assert_eq!(grid.knots(), &[-1.0, 0.0, 1.0]);
        assert_eq!(grid.num_basis(), 2);
        assert_eq!(grid.basis_values(-0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(grid.basis_values(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn cubic_grid_shape() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        assert_eq!(grid.num_basis(), 7);
        assert_eq!(grid.knots().len(), 11);
        assert_eq!(grid.spacing(), 0.5);
        for w in grid.knots().windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() < 1e-15);
        }
        assert_eq!(grid.knots()[0], -2.5);
        assert_eq!(grid.knots()[10], 2.5);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            make_grid(0.0, 0.0, 4, 3),
            Err(SplineError::InvalidRange { .. })
        ));
        assert!(matches!(
            make_grid(1.0, 0.0, 4, 3),
            Err(SplineError::InvalidRange { .. })
        ));
        assert_eq!(make_grid(0.0, 1.0, 0, 3), Err(SplineError::InvalidSize));
    }

    #[test]
    fn cubic_partition_at_zero() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        let v = grid.basis_values(0.0).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().filter(|&&b| b != 0.0).count() <= 4);
    }

    #[test]
    fn linear_hat_functions() {
        // knots [-1, 0, 1, 2, 3] -> hats centred on 0, 1, 2
        let grid = make_grid(0.0, 2.0, 2, 1).unwrap();
        assert_eq!(grid.knots(), &[-1.0, 0.0, 1.0, 2.0, 3.0]);
        let v = grid.basis_values(0.25).unwrap();
        let hat = |c: f64, x: f64| (1.0 - (x - c).abs()).max(0.0);
        let expected = [hat(0.0, 0.25), hat(1.0, 0.25), hat(2.0, 0.25)];
        assert_eq!(expected, [0.75, 0.25, 0.0]);
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn outside_range_uses_extension_knots() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        // inside the extension region the basis is nonzero but not a partition
        let v = grid.basis_values(1.2).unwrap();
        assert!(v.iter().any(|&b| b > 0.0));
        // beyond the last extension knot everything vanishes
        let far = grid.basis_values(10.0).unwrap();
        assert!(far.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        assert!(matches!(
            grid.basis_values(f64::NAN),
            Err(SplineError::NonFiniteInput(_))
        ));
        assert!(grid.basis_derivatives(f64::INFINITY).is_err());
    }

    #[test]
    fn derivative_degree_zero_rejected() {
        let grid = make_grid(-1.0, 1.0, 2, 0).unwrap();
        assert_eq!(
            grid.basis_derivatives(0.3),
            Err(SplineError::UnsupportedDegree)
        );
    }

    #[test]
    fn derivative_matches_central_difference() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        let h = 1e-6;
        let x = 0.3;
        let d = grid.basis_derivatives(x).unwrap();
        let plus = grid.basis_values(x + h).unwrap();
        let minus = grid.basis_values(x - h).unwrap();
        for j in 0..grid.num_basis() {
            let fd = (plus[j] - minus[j]) / (2.0 * h);
            assert!((d[j] - fd).abs() < 1e-6, "j={j}: {} vs {}", d[j], fd);
        }
        assert!(d.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn univariate_cases() {
        let grid = make_grid(-1.0, 1.0, 4, 3).unwrap();
        let ones = vec![1.0; grid.num_basis()];
        for x in [-0.7, 0.0, 0.4, 2.0] {
            assert_eq!(evaluate_univariate(&grid, 0.0, 0.0, &ones, x).unwrap(), 0.0);
        }
        assert_eq!(evaluate_univariate(&grid, 1.0, 0.0, &ones, 0.0).unwrap(), 0.0);
        let v = evaluate_univariate(&grid, 0.0, 1.0, &ones, 0.37).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(matches!(
            evaluate_univariate(&grid, 0.0, 1.0, &ones[..3], 0.0),
            Err(SplineError::LengthMismatch { expected: 7, actual: 3 })
        ));
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for x in [-30.0, -2.0, -0.1, 0.0, 0.5, 4.0, 30.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_serde_rebuilds_knots() {
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        let json = serde_json::to_string(&grid).unwrap();
        let back: SplineGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(grid, back);
        let bad = r#"{"range_min":1.0,"range_max":0.0,"num_intervals":5,"degree":3}"#;
        assert!(serde_json::from_str::<SplineGrid>(bad).is_err());
    }

    proptest! {
        #[test]
        fn local_support(x in -5.0f64..5.0, degree in 0usize..4, g in 1usize..7) {
            let grid = make_grid(-2.0, 2.0, g, degree).unwrap();
            let v = grid.basis_values(x).unwrap();
            prop_assert!(v.iter().filter(|&&b| b != 0.0).count() <= degree + 1);
            prop_assert!(v.iter().all(|&b| b >= 0.0));
        }

        #[test]
        fn partition_of_unity_inside(t in 0.0f64..=1.0, degree in 0usize..4, g in 1usize..7) {
            let grid = make_grid(-3.0, 3.0, g, degree).unwrap();
            let x = -3.0 + 6.0 * t;
            let sum: f64 = grid.basis_values(x).unwrap().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-10);
        }

        #[test]
        fn continuity(x in -2.9f64..2.9, degree in 1usize..4) {
            let grid = make_grid(-3.0, 3.0, 5, degree).unwrap();
            let eps = 1e-9;
            let a = grid.basis_values(x).unwrap();
            let b = grid.basis_values(x + eps).unwrap();
            // |B'| <= 2k/h bounds the jump over eps
            let bound = 2.0 * degree as f64 / grid.spacing() * eps + 1e-15;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= bound);
            }
        }
    }
}
