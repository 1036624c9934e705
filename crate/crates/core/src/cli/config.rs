use super::io::open;
use super::{usage, RunArgs};
use anyhow::Context;
use mogkan::data::{encode_labels, integrate, load_labels, load_matrix, OmicsMatrix};
use mogkan::graph::{
    attach_features, build_graph, degree_filter, parse_feature_mapping, parse_interactions,
    AggregationMode, Graph,
};
use mogkan::model::{ModelConfig, TrainConfig};
use mogkan::selection::{lasso_select_multiclass, standardize, welch_filter_multiclass, LassoOptions};
use mogkan::spline::GridSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One JSON document describing a full run. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub selection: SelectionSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub matrices: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    /// One per matrix when more than one matrix is given.
    pub prefixes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub p_threshold: Option<f64>,
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let opts = LassoOptions::default();
        SelectionSection {
            p_threshold: None,
            lambda: None,
            tol: opts.tol,
            max_iter: opts.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub interactions: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub min_score: u16,
    pub min_degree: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            interactions: None,
            mapping: None,
            min_score: 0,
            min_degree: 200,
        }
    }
}

/// Model settings; unset fields take the library defaults for the data's
/// feature and class counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels_per_node: Option<usize>,
    pub graph_layers: Option<usize>,
    pub hidden_width: Option<usize>,
    pub head_widths: Option<Vec<usize>>,
    pub grid: Option<GridSpec>,
    pub dropout_rate: Option<f64>,
    pub aggregation: Option<AggregationMode>,
    pub seed: Option<u64>,
}

impl ModelSection {
    pub fn resolve(&self, num_features: usize, num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(num_features, num_classes);
        if let Some(v) = self.channels_per_node {
            cfg.channels_per_node = v;
        }
        if let Some(v) = self.graph_layers {
            cfg.graph_layers = v;
        }
        if let Some(v) = self.hidden_width {
            cfg.hidden_width = v;
        }
        if let Some(v) = &self.head_widths {
            cfg.head_widths = v.clone();
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        if let Some(v) = self.dropout_rate {
            cfg.dropout_rate = v;
        }
        if let Some(v) = self.aggregation {
            cfg.aggregation = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            folds: 5,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads the config, resolves its relative paths and applies flag
    /// overrides. Malformed JSON and out-of-domain values are usage errors.
    pub fn load(args: &RunArgs) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(&args.config)
            .with_context(|| format!("cannot read {}", args.config.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", args.config.display())))?;
        let base = args.config.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        if let Some(v) = args.folds {
            cfg.train.folds = v;
        }
        if let Some(v) = args.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = args.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = args.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = args.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = args.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = &args.out {
            cfg.output.directory = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.matrices.iter_mut().for_each(fix);
        self.data.labels.iter_mut().for_each(fix);
        self.graph.interactions.iter_mut().for_each(fix);
        self.graph.mapping.iter_mut().for_each(fix);
        fix(&mut self.output.directory);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.matrices.is_empty() {
            return Err(usage("config: data.matrices is empty"));
        }
        if self.data.labels.is_none() {
            return Err(usage("config: data.labels is required"));
        }
        if self.data.matrices.len() > 1 && self.data.prefixes.len() != self.data.matrices.len() {
            return Err(usage(format!(
                "config: {} matrices need {} prefixes, found {}",
                self.data.matrices.len(),
                self.data.matrices.len(),
                self.data.prefixes.len()
            )));
        }
        if let Some(p) = self.selection.p_threshold {
            if !(0.0..=1.0).contains(&p) {
                return Err(usage(format!("config: p_threshold {p} outside [0, 1]")));
            }
        }
        if let Some(l) = self.selection.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(usage(format!("config: lambda {l} must be finite and >= 0")));
            }
        }
        if self.selection.tol.is_nan() || self.selection.tol <= 0.0 {
            return Err(usage("config: selection.tol must be > 0"));
        }
        if self.train.folds < 2 {
            return Err(usage(format!("folds = {}, need at least 2", self.train.folds)));
        }
        self.train
            .train_config()
            .validate()
            .map_err(|e| usage(format!("config: {e}")))?;
        // Shape-independent model checks, with placeholder sizes.
        self.model
            .resolve(1, 2)
            .validate()
            .map_err(|e| usage(format!("config: {e}")))?;
        Ok(())
    }
}

/// Labeled samples after integration and selection, with class names.
pub struct Dataset {
    pub matrix: OmicsMatrix,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let mut matrices = Vec::with_capacity(cfg.data.matrices.len());
    for path in &cfg.data.matrices {
        let m = load_matrix(open(path)?).with_context(|| format!("loading {}", path.display()))?;
        matrices.push(m);
    }
    let matrix = if matrices.len() == 1 {
        matrices.pop().expect("one matrix")
    } else {
        integrate(&matrices, &cfg.data.prefixes)?
    };
    let label_path = cfg.data.labels.as_ref().expect("validated");
    let pairs =
        load_labels(open(label_path)?).with_context(|| format!("loading {}", label_path.display()))?;
    let matrix = matrix.with_labels(&pairs);
    if matrix.num_samples() == 0 {
        anyhow::bail!("no samples left after integration");
    }
    let (classes, labels) = encode_labels(&matrix)?;
    let mut matrix = matrix;
    if let Some(p) = cfg.selection.p_threshold {
        let keep = welch_filter_multiclass(matrix.values.view(), &labels, p)?;
        eprintln!("filter: kept {} of {} features", keep.len(), matrix.num_features());
        matrix = matrix.select_features(&keep);
    }
    if let Some(lambda) = cfg.selection.lambda {
        let opts = LassoOptions {
            tol: cfg.selection.tol,
            max_iter: cfg.selection.max_iter,
        };
        let keep = lasso_features(&matrix, &labels, lambda, opts)?;
        eprintln!("select: kept {} of {} features", keep.len(), matrix.num_features());
        matrix = matrix.select_features(&keep);
    }
    if matrix.num_features() == 0 {
        anyhow::bail!("no features left after selection");
    }
    Ok(Dataset {
        matrix,
        classes,
        labels,
    })
}

/// LASSO on standardized columns with one-vs-rest class responses.
pub fn lasso_features(
    matrix: &OmicsMatrix,
    labels: &[usize],
    lambda: f64,
    options: LassoOptions,
) -> anyhow::Result<Vec<usize>> {
    let (x, _) = standardize(matrix.values.view())?;
    Ok(lasso_select_multiclass(x.view(), labels, lambda, options)?)
}

/// The feature graph: interaction table thresholded and degree-filtered, then
/// attached to the features. Without an interaction table every feature is
/// an isolated node.
pub fn load_graph(cfg: &RunConfig, feature_ids: &[String]) -> anyhow::Result<Graph> {
    let base = match &cfg.graph.interactions {
        Some(path) => {
            let table = parse_interactions(open(path)?)
                .with_context(|| format!("loading {}", path.display()))?;
            let built = build_graph(&table, cfg.graph.min_score);
            degree_filter(&built, cfg.graph.min_degree)?
        }
        None => Graph::new(Vec::new(), Vec::new(), false)?,
    };
    let mapping = match &cfg.graph.mapping {
        Some(path) => Some(
            parse_feature_mapping(open(path)?)
                .with_context(|| format!("loading {}", path.display()))?,
        ),
        None => None,
    };
    let (graph, map) = attach_features(&base, feature_ids, mapping.as_ref())?;
    eprintln!(
        "graph: {} of {} features linked to {} interaction nodes, {} edges",
        map.num_mapped(),
        feature_ids.len(),
        base.num_nodes(),
        graph.cross_edges().count()
    );
    Ok(graph)
}
