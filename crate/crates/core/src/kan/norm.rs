use super::{shape_err, KanError, Mode};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Per-column batch normalization.
///
/// Train mode normalizes with the batch mean and the population (biased)
/// batch variance. Running statistics follow
/// `running = (1 - momentum) * running + momentum * batch_stat`, where the
/// variance statistic is the unbiased (n - 1) batch variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Batch statistics produced by a train-mode pass, applied separately so the
/// forward pass itself stays pure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Result<Self, KanError> {
        if dim == 0 {
            return Err(KanError::InvalidDimension("batch norm"));
        }
        Ok(BatchNormState {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            epsilon: 1e-5,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn validate(&self) -> Result<(), KanError> {
        let d = self.dim();
        if d == 0 {
            return Err(KanError::InvalidDimension("batch norm"));
        }
        for (name, len) in [
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != d {
                return Err(shape_err(format!("{name} of length {d}"), len));
            }
        }
        if self.running_var.iter().any(|&v| v < 0.0) || (self.epsilon.is_nan() || self.epsilon <= 0.0) {
            return Err(KanError::NonFinite("batch norm statistics"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(KanError::NonFinite("batch norm momentum"));
        }
        Ok(())
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, inputs: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>, KanError> {
        match mode {
            Mode::Eval => self.forward_eval(inputs),
            Mode::Train => {
                let (out, _, update) = self.forward_train(inputs)?;
                self.apply_update(&update);
                Ok(out)
            }
        }
    }

    pub fn forward_eval(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, KanError> {
        self.check_width(inputs)?;
        let mut out = inputs.to_owned();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let inv = 1.0 / (self.running_var[c] + self.epsilon).sqrt();
            let (m, g, b) = (self.running_mean[c], self.gamma[c], self.beta[c]);
            col.mapv_inplace(|x| g * (x - m) * inv + b);
        }
        Ok(out)
    }

    pub fn forward_train(
        &self,
        inputs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, BatchNormCache, RunningUpdate), KanError> {
        self.check_width(inputs)?;
        let (batch, dim) = inputs.dim();
        if batch < 2 {
            return Err(KanError::BatchTooSmall(batch));
        }
        let n = batch as f64;
        let mut normalized = Array2::zeros((batch, dim));
        let mut out = Array2::zeros((batch, dim));
        let mut inv_std = Array1::zeros(dim);
        let mut update = RunningUpdate {
            mean: vec![0.0; dim],
            var: vec![0.0; dim],
        };
        for c in 0..dim {
            let col = inputs.column(c);
            let mean = col.sum() / n;
            let ss: f64 = col.iter().map(|x| (x - mean) * (x - mean)).sum();
            let var = ss / n;
            let inv = 1.0 / (var + self.epsilon).sqrt();
            inv_std[c] = inv;
            for b in 0..batch {
                let xh = (inputs[[b, c]] - mean) * inv;
                normalized[[b, c]] = xh;
                out[[b, c]] = self.gamma[c] * xh + self.beta[c];
            }
            update.mean[c] = mean;
            update.var[c] = ss / (n - 1.0);
        }
        Ok((out, BatchNormCache { normalized, inv_std }, update))
    }

    pub fn apply_update(&mut self, update: &RunningUpdate) {
        let m = self.momentum;
        for c in 0..self.dim() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * update.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * update.var[c];
        }
    }

    /// Backward through a train-mode pass.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(BatchNormGrads, Array2<f64>), KanError> {
        let (batch, dim) = cache.normalized.dim();
        if upstream.dim() != (batch, dim) {
            return Err(shape_err(
                format!("{batch}x{dim}"),
                format!("{:?}", upstream.dim()),
            ));
        }
        let n = batch as f64;
        let mut grads = BatchNormGrads {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        };
        let mut grad_in = Array2::zeros((batch, dim));
        for c in 0..dim {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..batch {
                let g = upstream[[b, c]];
                sum_g += g;
                sum_gx += g * cache.normalized[[b, c]];
            }
            grads.beta[c] = sum_g;
            grads.gamma[c] = sum_gx;
            let scale = self.gamma[c] * cache.inv_std[c] / n;
            for b in 0..batch {
                grad_in[[b, c]] =
                    scale * (n * upstream[[b, c]] - sum_g - cache.normalized[[b, c]] * sum_gx);
            }
        }
        Ok((grads, grad_in))
    }

    fn check_width(&self, inputs: ArrayView2<f64>) -> Result<(), KanError> {
        if inputs.ncols() != self.dim() {
            return Err(shape_err(format!("{} columns", self.dim()), inputs.ncols()));
        }
        Ok(())
    }
}
