//! Standardization, a Welch t-test filter and LASSO feature selection.
//!
//! The LASSO objective is `sum_i (y_i - x_i . beta)^2 + lambda * sum_j |beta_j|`
//! with no `1/(2n)` factor, so `lambda` is on the scale of the summed squared
//! residuals.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("need at least {needed} rows, got {actual}")]
    TooFewRows { needed: usize, actual: usize },
    #[error("each group needs at least 2 samples (got {group0} and {group1})")]
    DegenerateGroups { group0: usize, group1: usize },
    #[error("group label {0} is not 0 or 1")]
    BadGroupLabel(usize),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn shape_err(expected: impl ToString, actual: impl ToString) -> SelectionError {
    SelectionError::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Per-column statistics from [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Sample standard deviation; `0` marks a constant column that is only
    /// centered.
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, matrix: ArrayView2<f64>) -> Result<Array2<f64>, SelectionError> {
        if matrix.ncols() != self.mean.len() {
            return Err(shape_err(
                format!("{} columns", self.mean.len()),
                matrix.ncols(),
            ));
        }
        let mut out = matrix.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            if s > 0.0 {
                col.mapv_inplace(|v| (v - m) / s);
            } else {
                col.mapv_inplace(|v| v - m);
            }
        }
        Ok(out)
    }
}

/// Centers every column and scales it to unit sample standard deviation.
pub fn standardize(
    matrix: ArrayView2<f64>,
) -> Result<(Array2<f64>, Standardization), SelectionError> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(SelectionError::TooFewRows { needed: 2, actual: n });
    }
    let mut mean = Vec::with_capacity(matrix.ncols());
    let mut std = Vec::with_capacity(matrix.ncols());
    for col in matrix.axis_iter(Axis(1)) {
        let (m, var) = mean_var(col.iter().copied());
        mean.push(m);
        std.push(var.sqrt());
    }
    let stats = Standardization { mean, std };
    Ok((stats.apply(matrix)?, stats))
}

/// Mean and unbiased variance.
fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Two-sided Welch t-test p-value for each column, comparing rows labeled 0
/// against rows labeled 1.
pub fn welch_p_values(
    matrix: ArrayView2<f64>,
    groups: &[usize],
) -> Result<Vec<f64>, SelectionError> {
    if groups.len() != matrix.nrows() {
        return Err(shape_err(format!("{} labels", matrix.nrows()), groups.len()));
    }
    if let Some(&bad) = groups.iter().find(|&&g| g > 1) {
        return Err(SelectionError::BadGroupLabel(bad));
    }
    let idx0: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == 0).collect();
    let idx1: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == 1).collect();
    if idx0.len() < 2 || idx1.len() < 2 {
        return Err(SelectionError::DegenerateGroups {
            group0: idx0.len(),
            group1: idx1.len(),
        });
    }
    Ok(matrix
        .axis_iter(Axis(1))
        .map(|col| {
            let (m0, v0) = mean_var(idx0.iter().map(|&i| col[i]));
            let (m1, v1) = mean_var(idx1.iter().map(|&i| col[i]));
            welch_p(m0, v0, idx0.len() as f64, m1, v1, idx1.len() as f64)
        })
        .collect())
}

fn welch_p(m0: f64, v0: f64, n0: f64, m1: f64, v1: f64, n1: f64) -> f64 {
    let s0 = v0 / n0;
    let s1 = v1 / n1;
    let se2 = s0 + s1;
    if se2 == 0.0 {
        return if m0 == m1 { 1.0 } else { 0.0 };
    }
    let t = (m0 - m1) / se2.sqrt();
    let df = se2 * se2 / (s0 * s0 / (n0 - 1.0) + s1 * s1 / (n1 - 1.0));
    student_t_two_sided(t, df)
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Keeps columns whose two-sided Welch p-value is below `p_threshold`.
pub fn welch_filter(
    matrix: ArrayView2<f64>,
    groups: &[usize],
    p_threshold: f64,
) -> Result<Vec<usize>, SelectionError> {
    let p = welch_p_values(matrix, groups)?;
    Ok((0..p.len()).filter(|&j| p[j] < p_threshold).collect())
}

/// Welch filter for class labels `0..C`. Two classes are compared directly;
/// with more, each class is tested against the rest and the kept sets are
/// united, in ascending order.
pub fn welch_filter_multiclass(
    matrix: ArrayView2<f64>,
    labels: &[usize],
    p_threshold: f64,
) -> Result<Vec<usize>, SelectionError> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes <= 2 {
        return welch_filter(matrix, labels, p_threshold);
    }
    let mut selected = BTreeSet::new();
    for c in 0..classes {
        let groups: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        selected.extend(welch_filter(matrix, &groups, p_threshold)?);
    }
    Ok(selected.into_iter().collect())
}

/// `ln Gamma(x)` for `x > 0`, Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`, evaluated by the Lentz continued
/// fraction on whichever of `x` and `1 - x` converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoProblem {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub lambda: f64,
}

impl LassoProblem {
    pub fn new(x: Array2<f64>, y: Array1<f64>, lambda: f64) -> Result<Self, SelectionError> {
        if x.nrows() != y.len() {
            return Err(shape_err(format!("{} responses", x.nrows()), y.len()));
        }
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(SelectionError::InvalidParameter(format!("lambda = {lambda}")));
        }
        Ok(LassoProblem { x, y, lambda })
    }

    pub fn objective(&self, beta: ArrayView1<f64>) -> f64 {
        let r = &self.y - &self.x.dot(&beta);
        r.dot(&r) + self.lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Largest violation of the optimality conditions at `beta`.
    pub fn kkt_violation(&self, beta: ArrayView1<f64>) -> f64 {
        let r = &self.y - &self.x.dot(&beta);
        let mut worst: f64 = 0.0;
        for (j, col) in self.x.axis_iter(Axis(1)).enumerate() {
            let g = 2.0 * col.dot(&r);
            let v = if beta[j] == 0.0 {
                (g.abs() - self.lambda).max(0.0)
            } else {
                (g - beta[j].signum() * self.lambda).abs()
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub beta: Array1<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect()
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Cyclic coordinate descent from `beta = 0`, sweeping coordinates in
/// ascending order. Stops once no coefficient moves by `tol` or more in a
/// sweep and the optimality conditions hold within `10 * tol` (or a sweep
/// leaves every coefficient unchanged). `converged` is false if `max_iter`
/// sweeps ran out first.
pub fn lasso_fit(problem: &LassoProblem, options: LassoOptions) -> Result<LassoFit, SelectionError> {
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(SelectionError::InvalidParameter(format!("tol = {}", options.tol)));
    }
    let x = &problem.x;
    let p = x.ncols();
    let half_lambda = problem.lambda / 2.0;
    let col_sq: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
    let mut beta = Array1::zeros(p);
    let mut residual = problem.y.clone();
    let mut objective_trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < options.max_iter {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let old = beta[j];
            let rho = col.dot(&residual) + col_sq[j] * old;
            let new = soft_threshold(rho, half_lambda) / col_sq[j];
            if new != old {
                residual.scaled_add(old - new, &col);
                beta[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        objective_trace.push(
            residual.dot(&residual) + problem.lambda * beta.iter().map(|b: &f64| b.abs()).sum::<f64>(),
        );
        if max_change == 0.0
            || (max_change < options.tol
                && problem.kkt_violation(beta.view()) <= 10.0 * options.tol)
        {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        beta,
        converged,
        sweeps,
        objective_trace,
    })
}

/// Indices with a nonzero fitted coefficient.
pub fn lasso_select(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    options: LassoOptions,
) -> Result<Vec<usize>, SelectionError> {
    let problem = LassoProblem::new(x.to_owned(), y.to_owned(), lambda)?;
    Ok(lasso_fit(&problem, options)?.support())
}

/// One-vs-rest LASSO for class labels: for each class the response is the
/// centered indicator of that class, and the selected set is the union of the
/// per-class supports, in ascending order.
pub fn lasso_select_multiclass(
    x: ArrayView2<f64>,
    labels: &[usize],
    lambda: f64,
    options: LassoOptions,
) -> Result<Vec<usize>, SelectionError> {
    if labels.len() != x.nrows() {
        return Err(shape_err(format!("{} labels", x.nrows()), labels.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let responses = if classes == 2 { 1 } else { classes };
    let mut selected = BTreeSet::new();
    for c in 0..responses {
        let indicator: Array1<f64> =
            labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
        let mean = indicator.mean().unwrap_or(0.0);
        let y = indicator - mean;
        selected.extend(lasso_select(x, y.view(), lambda, options)?);
    }
    Ok(selected.into_iter().collect())
}
