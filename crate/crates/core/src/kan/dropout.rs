use super::{KanError, Mode};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inverted-dropout multipliers: `0` for dropped entries, `1/(1-rate)` for
/// kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    scale: Array2<f64>,
}

impl DropoutMask {
    pub fn apply(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        &inputs * &self.scale
    }

    /// The backward pass is the same elementwise product.
    pub fn backward(&self, upstream: ArrayView2<f64>) -> Array2<f64> {
        &upstream * &self.scale
    }

    pub fn kept_fraction(&self) -> f64 {
        let kept = self.scale.iter().filter(|&&s| s != 0.0).count();
        kept as f64 / self.scale.len().max(1) as f64
    }
}

pub fn dropout_mask(
    shape: (usize, usize),
    rate: f64,
    seed: u64,
    mode: Mode,
) -> Result<DropoutMask, KanError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(KanError::InvalidRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(DropoutMask {
            scale: Array2::ones(shape),
        });
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep_scale
        }
    });
    Ok(DropoutMask { scale })
}

pub fn dropout(
    inputs: ArrayView2<f64>,
    rate: f64,
    seed: u64,
    mode: Mode,
) -> Result<Array2<f64>, KanError> {
    Ok(dropout_mask(inputs.dim(), rate, seed, mode)?.apply(inputs))
}
