use super::{shape_err, KanError};
use crate::spline::{silu, silu_derivative, SplineGrid};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A `d_out x d_in` matrix of learnable univariate functions.
///
/// Function `phi[q][p](x) = base_weights[q,p] * silu(x)
///     + spline_weights[q,p] * sum_j coeffs[q,p,j] * B_j(x)`.
///
/// In dense mode output `q` is `sum_p phi[q][p](x_p)`. In node-wise mode
/// (`d_out == 1`) output `p` is `phi[0][p](x_p)`, one function per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRecord", into = "LayerRecord")]
pub struct KanLayer {
    grid: SplineGrid,
    base_weights: Array2<f64>,
    spline_weights: Array2<f64>,
    coeffs: Array3<f64>,
}

/// Per-sample values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct KanLayerCache {
    basis: Array3<f64>,
    basis_deriv: Array3<f64>,
    silu: Array2<f64>,
    silu_deriv: Array2<f64>,
}

impl KanLayerCache {
    fn flat_basis(&self) -> ArrayView2<'_, f64> {
        let (batch, width, nb) = self.basis.dim();
        self.basis
            .view()
            .into_shape_with_order((batch, width * nb))
            .expect("standard layout")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanLayerGrads {
    pub base_weights: Array2<f64>,
    pub spline_weights: Array2<f64>,
    pub coeffs: Array3<f64>,
}

impl KanLayerGrads {
    pub fn slices(&self) -> [&[f64]; 3] {
        [
            self.base_weights.as_slice().expect("standard layout"),
            self.spline_weights.as_slice().expect("standard layout"),
            self.coeffs.as_slice().expect("standard layout"),
        ]
    }
}

impl KanLayer {
    /// Random initialization: base weights ~ N(0, 1/d_in), unit spline
    /// weights, coefficients ~ N(0, (0.1)^2/d_in).
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        seed: u64,
    ) -> Result<Self, KanError> {
        if in_dim == 0 {
            return Err(KanError::InvalidDimension("in_dim"));
        }
        if out_dim == 0 {
            return Err(KanError::InvalidDimension("out_dim"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let base_dist = Normal::new(0.0, scale).expect("positive scale");
        let coeff_dist = Normal::new(0.0, 0.1 * scale).expect("positive scale");
        let nb = grid.num_basis();
        let base_weights = Array2::from_shape_fn((out_dim, in_dim), |_| base_dist.sample(&mut rng));
        let spline_weights = Array2::ones((out_dim, in_dim));
        let coeffs = Array3::from_shape_fn((out_dim, in_dim, nb), |_| coeff_dist.sample(&mut rng));
        Ok(KanLayer {
            grid,
            base_weights,
            spline_weights,
            coeffs,
        })
    }

    /// Builds a layer from explicit parameters, validating shapes.
    pub fn from_parts(
        grid: SplineGrid,
        base_weights: Array2<f64>,
        spline_weights: Array2<f64>,
        coeffs: Array3<f64>,
    ) -> Result<Self, KanError> {
        let (out_dim, in_dim) = base_weights.dim();
        if out_dim == 0 || in_dim == 0 {
            return Err(KanError::InvalidDimension("layer"));
        }
        if spline_weights.dim() != (out_dim, in_dim) {
            return Err(shape_err(
                format!("{out_dim}x{in_dim}"),
                format!("{:?}", spline_weights.dim()),
            ));
        }
        let nb = grid.num_basis();
        if coeffs.dim() != (out_dim, in_dim, nb) {
            return Err(shape_err(
                format!("{out_dim}x{in_dim}x{nb}"),
                format!("{:?}", coeffs.dim()),
            ));
        }
        let finite = base_weights
            .iter()
            .chain(spline_weights.iter())
            .chain(coeffs.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(KanError::NonFinite("layer parameters"));
        }
        Ok(KanLayer {
            grid,
            base_weights: base_weights.as_standard_layout().into_owned(),
            spline_weights: spline_weights.as_standard_layout().into_owned(),
            coeffs: coeffs.as_standard_layout().into_owned(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base_weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weights.nrows()
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn base_weights(&self) -> &Array2<f64> {
        &self.base_weights
    }

    pub fn spline_weights(&self) -> &Array2<f64> {
        &self.spline_weights
    }

    pub fn coeffs(&self) -> &Array3<f64> {
        &self.coeffs
    }

    pub fn base_weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.base_weights
    }

    pub fn spline_weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.spline_weights
    }

    pub fn coeffs_mut(&mut self) -> &mut Array3<f64> {
        &mut self.coeffs
    }

    /// Parameter tensors as flat row-major slices: base, spline, coeffs.
    pub fn param_slices(&self) -> [&[f64]; 3] {
        [
            self.base_weights.as_slice().expect("standard layout"),
            self.spline_weights.as_slice().expect("standard layout"),
            self.coeffs.as_slice().expect("standard layout"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.base_weights.as_slice_mut().expect("standard layout"),
            self.spline_weights.as_slice_mut().expect("standard layout"),
            self.coeffs.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Dense forward pass without a cache.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, KanError> {
        Ok(self.forward_cached(inputs)?.0)
    }

    pub fn forward_cached(
        &self,
        inputs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, KanLayerCache), KanError> {
        let cache = self.prepare(inputs)?;
        let basis = cache.flat_basis();
        let out = cache.silu.dot(&self.base_weights.t()) + basis.dot(&self.scaled_coeffs().t());
        Ok((out, cache))
    }

    /// `spline_weights[q,p] * coeffs[q,p,j]` as an `out_dim x (in_dim * num_basis)` matrix.
    fn scaled_coeffs(&self) -> Array2<f64> {
        let (out_dim, in_dim) = self.base_weights.dim();
        let nb = self.grid.num_basis();
        let mut scaled = self.coeffs.clone();
        for ((q, p, _), v) in scaled.indexed_iter_mut() {
            *v *= self.spline_weights[[q, p]];
        }
        scaled
            .into_shape_with_order((out_dim, in_dim * nb))
            .expect("standard layout")
    }

    /// Node-wise forward: requires `out_dim == 1`; output has the input's shape.
    pub fn forward_nodewise_cached(
        &self,
        inputs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, KanLayerCache), KanError> {
        if self.out_dim() != 1 {
            return Err(shape_err("node-wise layer with out_dim 1", self.out_dim()));
        }
        let cache = self.prepare(inputs)?;
        let (batch, in_dim) = inputs.dim();
        let out = Array2::from_shape_fn((batch, in_dim), |(b, p)| self.phi_cached(&cache, b, 0, p));
        Ok((out, cache))
    }

    fn prepare(&self, inputs: ArrayView2<f64>) -> Result<KanLayerCache, KanError> {
        let (batch, width) = inputs.dim();
        if width != self.in_dim() {
            return Err(shape_err(
                format!("{} input columns", self.in_dim()),
                width,
            ));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(KanError::NonFinite("layer input"));
        }
        let nb = self.grid.num_basis();
        let mut basis = Array3::zeros((batch, width, nb));
        let mut basis_deriv = Array3::zeros((batch, width, nb));
        let mut silu_vals = Array2::zeros((batch, width));
        let mut silu_der = Array2::zeros((batch, width));
        for b in 0..batch {
            for p in 0..width {
                let x = inputs[[b, p]];
                silu_vals[[b, p]] = silu(x);
                silu_der[[b, p]] = silu_derivative(x);
                let mut vals = basis.slice_mut(ndarray::s![b, p, ..]);
                let mut ders = basis_deriv.slice_mut(ndarray::s![b, p, ..]);
                self.grid.fill_basis(
                    x,
                    vals.as_slice_mut().expect("contiguous"),
                    Some(ders.as_slice_mut().expect("contiguous")),
                );
            }
        }
        Ok(KanLayerCache {
            basis,
            basis_deriv,
            silu: silu_vals,
            silu_deriv: silu_der,
        })
    }

    #[inline]
    fn spline_sum(&self, cache: &KanLayerCache, b: usize, q: usize, p: usize) -> f64 {
        let nb = self.grid.num_basis();
        let mut s = 0.0;
        for j in 0..nb {
            s += self.coeffs[[q, p, j]] * cache.basis[[b, p, j]];
        }
        s
    }

    #[inline]
    fn phi_cached(&self, cache: &KanLayerCache, b: usize, q: usize, p: usize) -> f64 {
        self.base_weights[[q, p]] * cache.silu[[b, p]]
            + self.spline_weights[[q, p]] * self.spline_sum(cache, b, q, p)
    }

    /// Backward for the dense forward. Returns parameter gradients and the
    /// gradient with respect to the inputs.
    pub fn backward(
        &self,
        cache: &KanLayerCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(KanLayerGrads, Array2<f64>), KanError> {
        let (batch, in_dim, _) = cache.basis.dim();
        let out_dim = self.out_dim();
        if upstream.dim() != (batch, out_dim) {
            return Err(shape_err(
                format!("{batch}x{out_dim}"),
                format!("{:?}", upstream.dim()),
            ));
        }
        let nb = self.grid.num_basis();
        let basis = cache.flat_basis();
        let base_grad = upstream.t().dot(&cache.silu);
        let flat_grad = upstream.t().dot(&basis);
        let flat_grad = flat_grad
            .into_shape_with_order((out_dim, in_dim, nb))
            .expect("standard layout");
        let mut grads = self.zero_grads();
        grads.base_weights = base_grad;
        for ((q, p, j), &g) in flat_grad.indexed_iter() {
            grads.coeffs[[q, p, j]] = self.spline_weights[[q, p]] * g;
            grads.spline_weights[[q, p]] += self.coeffs[[q, p, j]] * g;
        }
        let through_base = upstream.dot(&self.base_weights);
        let through_spline = upstream.dot(&self.scaled_coeffs());
        let mut grad_in = through_base * &cache.silu_deriv;
        let deriv = cache.basis_deriv.as_slice().expect("standard layout");
        let spline = through_spline.as_slice().expect("standard layout");
        for (i, g) in grad_in.iter_mut().enumerate() {
            let range = i * nb..(i + 1) * nb;
            *g += deriv[range.clone()]
                .iter()
                .zip(&spline[range])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok((grads, grad_in))
    }

    /// Backward for [`KanLayer::forward_nodewise_cached`].
    pub fn backward_nodewise(
        &self,
        cache: &KanLayerCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(KanLayerGrads, Array2<f64>), KanError> {
        let (batch, in_dim, _) = cache.basis.dim();
        if upstream.dim() != (batch, in_dim) {
            return Err(shape_err(
                format!("{batch}x{in_dim}"),
                format!("{:?}", upstream.dim()),
            ));
        }
        let mut grads = self.zero_grads();
        let mut grad_in = Array2::zeros((batch, in_dim));
        for b in 0..batch {
            for p in 0..in_dim {
                let g = upstream[[b, p]];
                if g != 0.0 {
                    self.accumulate(cache, &mut grads, &mut grad_in, b, 0, p, g);
                }
            }
        }
        Ok((grads, grad_in))
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn accumulate(
        &self,
        cache: &KanLayerCache,
        grads: &mut KanLayerGrads,
        grad_in: &mut Array2<f64>,
        b: usize,
        q: usize,
        p: usize,
        g: f64,
    ) {
        let nb = self.grid.num_basis();
        let ws = self.spline_weights[[q, p]];
        let mut spline = 0.0;
        let mut spline_deriv = 0.0;
        for j in 0..nb {
            let c = self.coeffs[[q, p, j]];
            let basis = cache.basis[[b, p, j]];
            spline += c * basis;
            spline_deriv += c * cache.basis_deriv[[b, p, j]];
            grads.coeffs[[q, p, j]] += g * ws * basis;
        }
        grads.base_weights[[q, p]] += g * cache.silu[[b, p]];
        grads.spline_weights[[q, p]] += g * spline;
        grad_in[[b, p]] +=
            g * (self.base_weights[[q, p]] * cache.silu_deriv[[b, p]] + ws * spline_deriv);
    }

    pub fn zero_grads(&self) -> KanLayerGrads {
        KanLayerGrads {
            base_weights: Array2::zeros(self.base_weights.dim()),
            spline_weights: Array2::zeros(self.spline_weights.dim()),
            coeffs: Array3::zeros(self.coeffs.dim()),
        }
    }

    /// Sum over the output axis of `|base| + |spline| * sum_j |coeff|`, one
    /// value per input column.
    pub fn input_magnitudes(&self) -> Vec<f64> {
        let abs_coeffs = self.coeffs.mapv(f64::abs).sum_axis(Axis(2));
        (0..self.in_dim())
            .map(|p| {
                (0..self.out_dim())
                    .map(|q| {
                        self.base_weights[[q, p]].abs()
                            + self.spline_weights[[q, p]].abs() * abs_coeffs[[q, p]]
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid,
    base_weights: Vec<f64>,
    spline_weights: Vec<f64>,
    coeffs: Vec<f64>,
}

impl TryFrom<LayerRecord> for KanLayer {
    type Error = KanError;

    fn try_from(r: LayerRecord) -> Result<Self, Self::Error> {
        let nb = r.grid.num_basis();
        let base = Array2::from_shape_vec((r.out_dim, r.in_dim), r.base_weights)
            .map_err(|e| shape_err("base_weights out_dim x in_dim", e))?;
        let spline = Array2::from_shape_vec((r.out_dim, r.in_dim), r.spline_weights)
            .map_err(|e| shape_err("spline_weights out_dim x in_dim", e))?;
        let coeffs = Array3::from_shape_vec((r.out_dim, r.in_dim, nb), r.coeffs)
            .map_err(|e| shape_err("coeffs out_dim x in_dim x num_basis", e))?;
        KanLayer::from_parts(r.grid, base, spline, coeffs)
    }
}

impl From<KanLayer> for LayerRecord {
    fn from(layer: KanLayer) -> Self {
        LayerRecord {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            base_weights: layer.base_weights.into_raw_vec_and_offset().0,
            spline_weights: layer.spline_weights.into_raw_vec_and_offset().0,
            coeffs: layer.coeffs.into_raw_vec_and_offset().0,
            grid: layer.grid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{evaluate_univariate, make_grid};
    use ndarray::array;

    fn grid() -> SplineGrid {
        make_grid(-3.0, 3.0, 5, 3).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = KanLayer::init(3, 2, grid(), 11).unwrap();
        let b = KanLayer::init(3, 2, grid(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.coeffs().dim(), (2, 3, 8));
        assert!(a.spline_weights().iter().all(|&w| w == 1.0));
        let c = KanLayer::init(3, 2, grid(), 12).unwrap();
        let x = array![[0.3, -1.0, 2.0]];
        assert_ne!(a.forward(x.view()).unwrap(), c.forward(x.view()).unwrap());
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert_eq!(
            KanLayer::init(0, 2, grid(), 0),
            Err(KanError::InvalidDimension("in_dim"))
        );
        assert!(KanLayer::init(2, 0, grid(), 0).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut layer = KanLayer::init(4, 3, grid(), 1).unwrap();
        for s in layer.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = array![[0.1, 5.0, -2.0, 1.0], [3.0, 0.0, 0.2, -7.0]];
        assert!(layer.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let layer = KanLayer::init(3, 2, grid(), 5).unwrap();
        let x = array![[0.4, -1.2, 2.2], [0.4, -1.2, 2.2]];
        let y = layer.forward(x.view()).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn single_function_reduces_to_univariate() {
        let g = grid();
        let coeffs: Vec<f64> = (0..8).map(|j| 0.1 * j as f64 - 0.3).collect();
        let layer = KanLayer::from_parts(
            g.clone(),
            array![[0.7]],
            array![[1.3]],
            Array3::from_shape_vec((1, 1, 8), coeffs.clone()).unwrap(),
        )
        .unwrap();
        let y = layer.forward(array![[0.5]].view()).unwrap();
        let expected = evaluate_univariate(&g, 0.7, 1.3, &coeffs, 0.5).unwrap();
        assert!((y[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_and_finiteness_checks() {
        let layer = KanLayer::init(3, 2, grid(), 5).unwrap();
        assert!(matches!(
            layer.forward(array![[1.0, 2.0]].view()),
            Err(KanError::ShapeMismatch { .. })
        ));
        assert_eq!(
            layer.forward(array![[1.0, f64::NAN, 0.0]].view()),
            Err(KanError::NonFinite("layer input"))
        );
        assert!(layer.forward_nodewise_cached(array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn nodewise_applies_one_function_per_column() {
        let layer = KanLayer::init(3, 1, grid(), 8).unwrap();
        let x = array![[0.2, -0.4, 1.5]];
        let (y, _) = layer.forward_nodewise_cached(x.view()).unwrap();
        for p in 0..3 {
            let phi = evaluate_univariate(
                layer.grid(),
                layer.base_weights()[[0, p]],
                layer.spline_weights()[[0, p]],
                layer.coeffs().slice(ndarray::s![0, p, ..]).as_slice().unwrap(),
                x[[0, p]],
            )
            .unwrap();
            assert!((y[[0, p]] - phi).abs() < 1e-15);
        }
    }

    #[test]
    fn serde_round_trip_is_bitwise() {
        let layer = KanLayer::init(4, 3, grid(), 99).unwrap();
        let json = serde_json::to_string(&layer).unwrap();
        let back: KanLayer = serde_json::from_str(&json).unwrap();
        assert_eq!(layer, back);
        for (a, b) in layer.param_slices().iter().zip(back.param_slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn serde_rejects_bad_shapes() {
        let layer = KanLayer::init(2, 2, grid(), 1).unwrap();
        let mut value = serde_json::to_value(&layer).unwrap();
        value["coeffs"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<KanLayer>(value).is_err());
    }
}
