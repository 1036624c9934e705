use super::loss::cross_entropy_grad;
use super::{mse_loss, softmax_cross_entropy, shape_err, KanError, KanLayer, KanLayerGrads};
use crate::spline::SplineGrid;
use ndarray::{Array2, ArrayView2};

/// A plain stack of dense KAN layers.
#[derive(Debug, Clone, PartialEq)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
}

/// What the network output is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Softmax cross-entropy against class indices.
    Classes(&'a [usize]),
    /// Mean squared error against real targets.
    Values(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<KanLayerGrads>,
}

impl NetworkGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|g| g.slices()).collect()
    }
}

impl KanNetwork {
    /// `widths = [d_in, h_1, ..., d_out]`; layer `i` is seeded with `seed + i`.
    pub fn init(widths: &[usize], grid: &SplineGrid, seed: u64) -> Result<Self, KanError> {
        if widths.len() < 2 {
            return Err(KanError::InvalidDimension("network needs at least two widths"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| KanLayer::init(w[0], w[1], grid.clone(), seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KanNetwork { layers })
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, KanError> {
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            x = layer.forward(x.view())?;
        }
        Ok(x)
    }

    pub fn loss(&self, inputs: ArrayView2<f64>, target: Target) -> Result<f64, KanError> {
        let out = self.forward(inputs)?;
        Ok(score(out.view(), target)?.0)
    }

    /// Loss and exact gradients for every layer parameter.
    pub fn loss_and_gradients(
        &self,
        inputs: ArrayView2<f64>,
        target: Target,
    ) -> Result<(f64, NetworkGrads), KanError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let (y, cache) = layer.forward_cached(x.view())?;
            caches.push(cache);
            x = y;
        }
        let (loss, mut upstream) = score(x.view(), target)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&caches).rev() {
            let (g, g_in) = layer.backward(cache, upstream.view())?;
            grads.push(g);
            upstream = g_in;
        }
        grads.reverse();
        Ok((loss, NetworkGrads { layers: grads }))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }
}

fn score(out: ArrayView2<f64>, target: Target) -> Result<(f64, Array2<f64>), KanError> {
    match target {
        Target::Classes(labels) => {
            let (loss, probs) = softmax_cross_entropy(out, labels)?;
            Ok((loss, cross_entropy_grad(&probs, labels)))
        }
        Target::Values(values) => {
            if values.dim() != out.dim() {
                return Err(shape_err(
                    format!("{:?}", out.dim()),
                    format!("{:?}", values.dim()),
                ));
            }
            mse_loss(out, values)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::{adam_step, AdamState};
    use crate::spline::make_grid;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
    }

    /// Central differences over every parameter of the network.
    fn numeric_gradients(net: &KanNetwork, x: &Array2<f64>, target: Target, h: f64) -> Vec<Vec<f64>> {
        let mut probe = net.clone();
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        let mut out = Vec::new();
        for (t, &len) in shapes.iter().enumerate() {
            let mut g = vec![0.0; len];
            for (j, gj) in g.iter_mut().enumerate() {
                let orig = probe.param_slices()[t][j];
                probe.param_slices_mut()[t][j] = orig + h;
                let up = probe.loss(x.view(), target).unwrap();
                probe.param_slices_mut()[t][j] = orig - h;
                let down = probe.loss(x.view(), target).unwrap();
                probe.param_slices_mut()[t][j] = orig;
                *gj = (up - down) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn two_layer_classifier_gradients_match() {
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        for seed in 0..5 {
            let net = KanNetwork::init(&[3, 7, 2], &grid, seed).unwrap();
            let x = random_inputs(8, 3, seed + 100);
            let labels: Vec<usize> = (0..8).map(|i| (i + seed as usize) % 2).collect();
            let target = Target::Classes(&labels);
            let (_, grads) = net.loss_and_gradients(x.view(), target).unwrap();
            let numeric = numeric_gradients(&net, &x, target, 1e-5);
            for (a, n) in grads.slices().iter().zip(&numeric) {
                for (ga, gn) in a.iter().zip(n) {
                    assert!(rel_err(*ga, *gn) <= 1e-4, "{ga} vs {gn}");
                }
            }
        }
    }

    #[test]
    fn regression_gradients_match() {
        let grid = make_grid(-2.0, 2.0, 4, 2).unwrap();
        let net = KanNetwork::init(&[2, 3, 1], &grid, 4).unwrap();
        let x = random_inputs(6, 2, 1);
        let y = random_inputs(6, 1, 2);
        let target = Target::Values(y.view());
        let (_, grads) = net.loss_and_gradients(x.view(), target).unwrap();
        let numeric = numeric_gradients(&net, &x, target, 1e-5);
        for (a, n) in grads.slices().iter().zip(&numeric) {
            for (ga, gn) in a.iter().zip(n) {
                assert!(rel_err(*ga, *gn) <= 1e-4, "{ga} vs {gn}");
            }
        }
    }

    #[test]
    fn zero_upstream_activations_zero_final_coeff_gradient() {
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        let mut net = KanNetwork::init(&[3, 4, 2], &grid, 3).unwrap();
        for s in net.layers[0].param_slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_inputs(5, 3, 8);
        let labels = [0, 1, 1, 0, 1];
        let (_, grads) = net.loss_and_gradients(x.view(), Target::Classes(&labels)).unwrap();
        // hidden activations are exactly 0; B_j(0) is shared by every sample,
        // so coefficient gradients vanish only where the basis is zero at 0
        let basis_at_zero = grid.basis_values(0.0).unwrap();
        for ((q, p, j), g) in grads.layers[1].coeffs.indexed_iter() {
            if basis_at_zero[j] == 0.0 {
                assert_eq!(*g, 0.0, "({q},{p},{j})");
            }
        }
        // with zero spline and base weights downstream, nothing reaches the
        // final layer's coefficients at all
        for s in net.layers[1].param_slices_mut().into_iter().take(2) {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, grads) = net.loss_and_gradients(x.view(), Target::Classes(&labels)).unwrap();
        assert!(grads.layers[1].coeffs.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_gradients() {
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        let net = KanNetwork::init(&[3, 5, 2], &grid, 6).unwrap();
        let x = random_inputs(4, 3, 3);
        let labels = [0, 1, 0, 1];
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
        let doubled_labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let (l1, g1) = net.loss_and_gradients(x.view(), Target::Classes(&labels)).unwrap();
        let (l2, g2) = net
            .loss_and_gradients(doubled.view(), Target::Classes(&doubled_labels))
            .unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.slices().iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fits_product_function() {
        // 2 -> 2d+1 -> 1 network on f(x1, x2) = x1 * x2 over [-1, 1]^2
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        let mut net = KanNetwork::init(&[2, 5, 1], &grid, 7).unwrap();
        let mut pts = Vec::new();
        for i in 0..11 {
            for j in 0..11 {
                pts.push([-1.0 + 0.2 * i as f64, -1.0 + 0.2 * j as f64]);
            }
        }
        let x = Array2::from_shape_fn((pts.len(), 2), |(r, c)| pts[r][c]);
        let y = Array2::from_shape_fn((pts.len(), 1), |(r, _)| pts[r][0] * pts[r][1]);
        let mut state = AdamState::default();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let (l, grads) = net.loss_and_gradients(x.view(), Target::Values(y.view())).unwrap();
            loss = l;
            let g = grads.slices();
            adam_step(&mut net.param_slices_mut(), &g, &mut state, 0.01, 0.0).unwrap();
        }
        assert!(loss <= 1e-3, "final mse {loss}");
    }

    #[test]
    fn bad_targets() {
        let grid = make_grid(-3.0, 3.0, 5, 3).unwrap();
        let net = KanNetwork::init(&[2, 2], &grid, 0).unwrap();
        let x = array![[0.0, 1.0]];
        assert!(net.loss(x.view(), Target::Classes(&[5])).is_err());
        let y = array![[0.0]];
        assert!(net.loss(x.view(), Target::Values(y.view())).is_err());
        assert!(KanNetwork::init(&[2], &grid, 0).is_err());
    }
}
