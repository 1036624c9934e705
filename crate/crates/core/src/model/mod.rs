//! The graph KAN classifier.
//!
//! Each graph layer averages (or sums) every node's neighborhood, passes each
//! node's aggregate through that node's own univariate function, then applies
//! batch normalization and dropout. The readout is a dense KAN layer whose
//! per-node contributions are mean-pooled over the nodes:
//! `pooled[q] = (1/d) sum_p phi[q][p](h_p)`. Head layers follow, and a final
//! KAN layer produces the class logits.

mod checkpoint;
mod importance;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use importance::{
    feature_importance, format_score, map_importance_to_genes, parse_gene_mapping,
    write_importance_tsv, GeneMapping, ImportanceRow,
};
pub use train::{
    cross_validate, grid_search, train, CvOutcome, FoldOutcome, GridRow, GridSearchOutcome,
    GridSpace, TrainConfig, TrainReport,
};

use crate::data::DataError;
use crate::eval::EvalError;
use crate::graph::{aggregate, aggregate_backward, AggregationMode, Graph, GraphError};
use crate::kan::{
    cross_entropy_grad, dropout_mask, softmax_cross_entropy, BatchNormCache, BatchNormState, DropoutMask, KanError,
    KanLayer, KanLayerCache, Mode, RunningUpdate,
};
use crate::selection::SelectionError;
use crate::spline::{make_grid, GridSpec, SplineGrid};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("graph has {actual} nodes but the model expects {expected} features")]
    GraphSizeMismatch { expected: usize, actual: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    MalformedMapping { line: u64, message: String },
    #[error(transparent)]
    Kan(#[from] KanError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_features: usize,
    pub num_classes: usize,
    pub channels_per_node: usize,
    /// Graph blocks ahead of the readout; zero gives a plain KAN over the features.
    pub graph_layers: usize,
    pub hidden_width: usize,
    pub head_widths: Vec<usize>,
    pub grid: GridSpec,
    pub dropout_rate: f64,
    pub aggregation: AggregationMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_features: 1,
            num_classes: 2,
            channels_per_node: 1,
            graph_layers: 0,
            hidden_width: 3,
            head_widths: Vec::new(),
            grid: GridSpec::default(),
            dropout_rate: 0.1,
            aggregation: AggregationMode::Mean,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Defaults for `d` features and `C` classes, with hidden width `2d + 1`.
    pub fn new(num_features: usize, num_classes: usize) -> Self {
        ModelConfig {
            num_features,
            num_classes,
            hidden_width: 2 * num_features + 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<SplineGrid, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_features == 0 || self.num_classes == 0 {
            return bad("num_features and num_classes must be >= 1".into());
        }
        if self.channels_per_node != 1 {
            return bad(format!(
                "channels_per_node = {}; graph layers carry one scalar per node",
                self.channels_per_node
            ));
        }
        if self.hidden_width == 0 || self.head_widths.contains(&0) {
            return bad("layer widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        let g = self.grid;
        make_grid(g.range_min, g.range_max, g.num_intervals, g.degree)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }
}

/// A KAN layer followed by batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kan: KanLayer,
    pub norm: BatchNormState,
}

impl Block {
    fn init(in_dim: usize, out_dim: usize, norm_dim: usize, grid: &SplineGrid, seed: u64) -> Result<Self, KanError> {
        Ok(Block {
            kan: KanLayer::init(in_dim, out_dim, grid.clone(), seed)?,
            norm: BatchNormState::new(norm_dim)?,
        })
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.kan.param_slices_mut().into_iter().collect();
        out.push(&mut self.norm.gamma);
        out.push(&mut self.norm.beta);
        out
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.kan.param_slices().into_iter().collect();
        out.push(&self.norm.gamma);
        out.push(&self.norm.beta);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct Model {
    config: ModelConfig,
    graph: Graph,
    graph_blocks: Vec<Block>,
    pool: Block,
    head: Vec<Block>,
    output: KanLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelRecord {
    config: ModelConfig,
    graph: Graph,
    graph_blocks: Vec<Block>,
    pool: Block,
    head: Vec<Block>,
    output: KanLayer,
}

impl From<Model> for ModelRecord {
    fn from(m: Model) -> Self {
        ModelRecord {
            config: m.config,
            graph: m.graph,
            graph_blocks: m.graph_blocks,
            pool: m.pool,
            head: m.head,
            output: m.output,
        }
    }
}

impl TryFrom<ModelRecord> for Model {
    type Error = ModelError;

    fn try_from(r: ModelRecord) -> Result<Self, Self::Error> {
        let model = Model {
            config: r.config,
            graph: r.graph,
            graph_blocks: r.graph_blocks,
            pool: r.pool,
            head: r.head,
            output: r.output,
        };
        model.check_structure()?;
        Ok(model)
    }
}

/// Gradients for every trainable tensor, in [`Model::param_slices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(Vec::as_slice).collect()
    }
}

struct BlockCache {
    kan: KanLayerCache,
    norm: BatchNormCache,
    mask: DropoutMask,
}

struct ForwardCache {
    graph: Vec<BlockCache>,
    pool: BlockCache,
    head: Vec<BlockCache>,
    output: KanLayerCache,
}

/// Stateless 64-bit mixer used to derive per-layer seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model {
    /// Deterministic initialization from `config.seed`. The graph must have
    /// one node per feature and carry self-loops.
    pub fn init(config: ModelConfig, graph: Graph) -> Result<Self, ModelError> {
        let grid = config.validate()?;
        let d = config.num_features;
        if graph.num_nodes() != d {
            return Err(ModelError::GraphSizeMismatch {
                expected: d,
                actual: graph.num_nodes(),
            });
        }
        if !graph.self_loops() {
            return Err(GraphError::SelfLoopsMissing.into());
        }
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            mix_seed(config.seed, stream)
        };
        let graph_blocks = (0..config.graph_layers)
            .map(|_| Block::init(d, 1, d, &grid, next_seed()))
            .collect::<Result<Vec<_>, _>>()?;
        let pool = Block::init(d, config.hidden_width, config.hidden_width, &grid, next_seed())?;
        let mut width = config.hidden_width;
        let mut head = Vec::with_capacity(config.head_widths.len());
        for &w in &config.head_widths {
            head.push(Block::init(width, w, w, &grid, next_seed())?);
            width = w;
        }
        let output = KanLayer::init(width, config.num_classes, grid, next_seed())?;
        Ok(Model {
            config,
            graph,
            graph_blocks,
            pool,
            head,
            output,
        })
    }

    /// Assembles a model from explicit parts, validating the shape chain.
    pub fn from_parts(
        config: ModelConfig,
        graph: Graph,
        graph_blocks: Vec<Block>,
        pool: Block,
        head: Vec<Block>,
        output: KanLayer,
    ) -> Result<Self, ModelError> {
        Model::try_from(ModelRecord {
            config,
            graph,
            graph_blocks,
            pool,
            head,
            output,
        })
    }

    fn check_structure(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let cfg = &self.config;
        let d = cfg.num_features;
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.graph.num_nodes() != d {
            return Err(ModelError::GraphSizeMismatch {
                expected: d,
                actual: self.graph.num_nodes(),
            });
        }
        if !self.graph.self_loops() {
            return Err(GraphError::SelfLoopsMissing.into());
        }
        if self.graph_blocks.len() != cfg.graph_layers || self.head.len() != cfg.head_widths.len() {
            return bad("layer count does not match configuration".into());
        }
        let grid_spec = cfg.grid;
        let check = |b: &Block, i: usize, o: usize, n: usize| -> Result<(), ModelError> {
            b.norm.validate()?;
            if b.kan.in_dim() != i || b.kan.out_dim() != o || b.norm.dim() != n {
                return bad(format!(
                    "block shape {}x{} (norm {}) where {i}x{o} (norm {n}) is required",
                    b.kan.in_dim(),
                    b.kan.out_dim(),
                    b.norm.dim()
                ));
            }
            if b.kan.grid().spec() != grid_spec {
                return bad("layer grid differs from configuration".into());
            }
            Ok(())
        };
        for b in &self.graph_blocks {
            check(b, d, 1, d)?;
        }
        check(&self.pool, d, cfg.hidden_width, cfg.hidden_width)?;
        let mut width = cfg.hidden_width;
        for (b, &w) in self.head.iter().zip(&cfg.head_widths) {
            check(b, width, w, w)?;
            width = w;
        }
        if self.output.in_dim() != width || self.output.out_dim() != cfg.num_classes {
            return bad("output layer shape does not match configuration".into());
        }
        if self.output.grid().spec() != grid_spec {
            return bad("layer grid differs from configuration".into());
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn feature_ids(&self) -> &[String] {
        self.graph.node_ids()
    }

    pub fn graph_blocks(&self) -> &[Block] {
        &self.graph_blocks
    }

    pub fn graph_blocks_mut(&mut self) -> &mut [Block] {
        &mut self.graph_blocks
    }

    pub fn pool(&self) -> &Block {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut Block {
        &mut self.pool
    }

    pub fn head(&self) -> &[Block] {
        &self.head
    }

    pub fn output(&self) -> &KanLayer {
        &self.output
    }

    /// The layer that sees the raw features: the first graph layer, or the
    /// pooled readout layer when there are no graph layers.
    pub fn first_layer(&self) -> &KanLayer {
        self.graph_blocks
            .first()
            .map(|b| &b.kan)
            .unwrap_or(&self.pool.kan)
    }

    pub fn first_layer_mut(&mut self) -> &mut KanLayer {
        match self.graph_blocks.first_mut() {
            Some(b) => &mut b.kan,
            None => &mut self.pool.kan,
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.graph_blocks {
            out.extend(b.param_slices());
        }
        out.extend(self.pool.param_slices());
        for b in &self.head {
            out.extend(b.param_slices());
        }
        out.extend(self.output.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.graph_blocks {
            out.extend(b.param_slices_mut());
        }
        out.extend(self.pool.param_slices_mut());
        for b in &mut self.head {
            out.extend(b.param_slices_mut());
        }
        out.extend(self.output.param_slices_mut());
        out
    }

    fn check_inputs(&self, features: ArrayView2<f64>) -> Result<(), ModelError> {
        if features.ncols() != self.config.num_features {
            return Err(KanError::ShapeMismatch {
                expected: format!("{} feature columns", self.config.num_features),
                actual: features.ncols().to_string(),
            }
            .into());
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KanError::NonFinite("model input").into());
        }
        Ok(())
    }

    fn pool_scale(&self) -> f64 {
        1.0 / self.config.num_features as f64
    }

    /// Eval-mode logits: running batch statistics, no dropout.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_inputs(features)?;
        let mode = self.config.aggregation;
        let mut h = features.to_owned();
        for b in &self.graph_blocks {
            let a = aggregate(&self.graph, h.view(), mode)?;
            let z = b.kan.forward_nodewise_cached(a.view())?.0;
            h = b.norm.forward_eval(z.view())?;
        }
        let z = self.pool.kan.forward(h.view())? * self.pool_scale();
        h = self.pool.norm.forward_eval(z.view())?;
        for b in &self.head {
            let z = b.kan.forward(h.view())?;
            h = b.norm.forward_eval(z.view())?;
        }
        Ok(self.output.forward(h.view())?)
    }

    /// Class probabilities. Train mode uses batch statistics and the dropout
    /// masks derived from `dropout_seed`, without touching running statistics.
    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<Array2<f64>, ModelError> {
        let logits = match mode {
            Mode::Eval => self.logits(features)?,
            Mode::Train => self.forward_train(features, dropout_seed)?.0,
        };
        Ok(softmax_rows(logits.view()))
    }

    /// Most probable class per row in eval mode (lowest index on ties).
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(features)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    fn block_train(
        block: &Block,
        z: Array2<f64>,
        rate: f64,
        seed: u64,
        updates: &mut Vec<RunningUpdate>,
    ) -> Result<(Array2<f64>, BatchNormCache, DropoutMask), KanError> {
        let (n, norm_cache, update) = block.norm.forward_train(z.view())?;
        updates.push(update);
        let mask = dropout_mask(n.dim(), rate, seed, Mode::Train)?;
        Ok((mask.apply(n.view()), norm_cache, mask))
    }

    fn forward_train(
        &self,
        features: ArrayView2<f64>,
        dropout_seed: u64,
    ) -> Result<(Array2<f64>, ForwardCache, Vec<RunningUpdate>), ModelError> {
        self.check_inputs(features)?;
        let rate = self.config.dropout_rate;
        let mode = self.config.aggregation;
        let mut updates = Vec::new();
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            mix_seed(dropout_seed, stream)
        };

        let mut h = features.to_owned();
        let mut graph_caches = Vec::with_capacity(self.graph_blocks.len());
        for b in &self.graph_blocks {
            let a = aggregate(&self.graph, h.view(), mode)?;
            let (z, kan) = b.kan.forward_nodewise_cached(a.view())?;
            let (out, norm, mask) = Self::block_train(b, z, rate, next_seed(), &mut updates)?;
            graph_caches.push(BlockCache { kan, norm, mask });
            h = out;
        }
        let (z, kan) = self.pool.kan.forward_cached(h.view())?;
        let z = z * self.pool_scale();
        let (out, norm, mask) = Self::block_train(&self.pool, z, rate, next_seed(), &mut updates)?;
        let pool_cache = BlockCache { kan, norm, mask };
        h = out;
        let mut head_caches = Vec::with_capacity(self.head.len());
        for b in &self.head {
            let (z, kan) = b.kan.forward_cached(h.view())?;
            let (out, norm, mask) = Self::block_train(b, z, rate, next_seed(), &mut updates)?;
            head_caches.push(BlockCache { kan, norm, mask });
            h = out;
        }
        let (logits, output_cache) = self.output.forward_cached(h.view())?;
        Ok((
            logits,
            ForwardCache {
                graph: graph_caches,
                pool: pool_cache,
                head: head_caches,
                output: output_cache,
            },
            updates,
        ))
    }

    /// Mean cross-entropy of a train-mode pass.
    pub fn loss(
        &self,
        features: ArrayView2<f64>,
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<f64, ModelError> {
        let (logits, _, _) = self.forward_train(features, dropout_seed)?;
        Ok(softmax_cross_entropy(logits.view(), labels)?.0)
    }

    /// Train-mode loss, exact gradients for every parameter, and the batch
    /// statistics to fold into the running averages.
    pub fn loss_and_gradients(
        &self,
        features: ArrayView2<f64>,
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<(f64, ModelGrads, Vec<RunningUpdate>), ModelError> {
        let (logits, cache, updates) = self.forward_train(features, dropout_seed)?;
        let (loss, probs) = softmax_cross_entropy(logits.view(), labels)?;
        let mut g = cross_entropy_grad(&probs, labels);

        let mut sections: Vec<Vec<Vec<f64>>> = Vec::new();
        let (out_grads, g_in) = self.output.backward(&cache.output, g.view())?;
        sections.push(out_grads.slices().iter().map(|s| s.to_vec()).collect());
        g = g_in;

        for (b, c) in self.head.iter().zip(&cache.head).rev() {
            let (section, g_in) = block_backward(b, c, g, 1.0, false)?;
            sections.push(section);
            g = g_in;
        }
        let (section, g_in) = block_backward(&self.pool, &cache.pool, g, self.pool_scale(), false)?;
        sections.push(section);
        g = g_in;
        for (b, c) in self.graph_blocks.iter().zip(&cache.graph).rev() {
            let (section, g_in) = block_backward(b, c, g, 1.0, true)?;
            sections.push(section);
            g = aggregate_backward(&self.graph, g_in.view(), self.config.aggregation)?;
        }
        sections.reverse();
        let tensors = sections.into_iter().flatten().collect();
        Ok((loss, ModelGrads { tensors }, updates))
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) -> Result<(), ModelError> {
        let expected = self.graph_blocks.len() + 1 + self.head.len();
        if updates.len() != expected {
            return Err(ModelError::InvalidConfig(format!(
                "{} running updates for {expected} normalized layers",
                updates.len()
            )));
        }
        let norms = self
            .graph_blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.pool))
            .chain(self.head.iter_mut())
            .map(|b| &mut b.norm);
        for (norm, u) in norms.zip(updates) {
            norm.apply_update(u);
        }
        Ok(())
    }
}

/// Backward through dropout, batch norm, the optional `scale` on the KAN
/// output, and the KAN layer itself. Returns the block's gradient tensors in
/// parameter order and the gradient with respect to the block input.
fn block_backward(
    block: &Block,
    cache: &BlockCache,
    upstream: Array2<f64>,
    scale: f64,
    nodewise: bool,
) -> Result<(Vec<Vec<f64>>, Array2<f64>), KanError> {
    let g = cache.mask.backward(upstream.view());
    let (norm_grads, g) = block.norm.backward(&cache.norm, g.view())?;
    let g = if scale == 1.0 { g } else { g * scale };
    let (kan_grads, g_in) = if nodewise {
        block.kan.backward_nodewise(&cache.kan, g.view())?
    } else {
        block.kan.backward(&cache.kan, g.view())?
    };
    let mut section: Vec<Vec<f64>> = kan_grads.slices().iter().map(|s| s.to_vec()).collect();
    section.push(norm_grads.gamma);
    section.push(norm_grads.beta);
    Ok((section, g_in))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests;
