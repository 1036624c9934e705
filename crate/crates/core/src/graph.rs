//! Feature-interaction graphs built from STRING-style interaction tables.
//!
//! Ingestion is two-stage: [`parse_interactions`] validates rows, and
//! [`build_graph`] applies the score threshold and deduplicates undirected
//! edges. [`attach_features`] then produces the graph the model runs on: one
//! node per feature, with self-loops so every neighborhood contains its node.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("line {line}: bad score '{value}' (expected an integer in 0..=1000)")]
    BadScore { line: u64, value: String },
    #[error("line {line}: self-pair '{id}'")]
    SelfPair { line: u64, id: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("feature '{feature}' maps to more than one node ({first}, {second})")]
    AmbiguousMapping {
        feature: String,
        first: String,
        second: String,
    },
    #[error("duplicate feature id '{0}'")]
    DuplicateFeature(String),
    #[error("graph must not carry self-loops for this operation")]
    SelfLoopsPresent,
    #[error("aggregation requires a graph with self-loops")]
    SelfLoopsMissing,
    #[error("shape mismatch: expected {expected} columns, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub node_a: String,
    pub node_b: String,
    pub combined_score: u16,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionTable {
    pub rows: Vec<Interaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Sum,
    #[default]
    Mean,
}

/// Undirected graph over string-identified nodes.
///
/// `edges` holds normalized pairs `(u, v)` with `u <= v`, sorted and unique;
/// `u == v` pairs are self-loops and appear only when `self_loops` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct Graph {
    node_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    self_loops: bool,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRecord {
    node_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    self_loops: bool,
}

impl TryFrom<GraphRecord> for Graph {
    type Error = GraphError;

    fn try_from(r: GraphRecord) -> Result<Self, Self::Error> {
        Graph::new(r.node_ids, r.edges, r.self_loops)
    }
}

impl From<Graph> for GraphRecord {
    fn from(g: Graph) -> Self {
        GraphRecord {
            node_ids: g.node_ids,
            edges: g.edges,
            self_loops: g.self_loops,
        }
    }
}

impl Graph {
    /// Validates and normalizes an edge list. With `self_loops` set, a
    /// self-edge is added for every node that lacks one.
    pub fn new(
        node_ids: Vec<String>,
        edges: Vec<(usize, usize)>,
        self_loops: bool,
    ) -> Result<Self, GraphError> {
        let n = node_ids.len();
        let mut seen_ids = HashSet::with_capacity(n);
        for id in &node_ids {
            if !seen_ids.insert(id.as_str()) {
                return Err(GraphError::Invalid(format!("duplicate node id '{id}'")));
            }
        }
        let mut set = HashSet::with_capacity(edges.len() + n);
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(GraphError::Invalid(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b && !self_loops {
                return Err(GraphError::SelfLoopsPresent);
            }
            set.insert((a.min(b), a.max(b)));
        }
        if self_loops {
            set.extend((0..n).map(|v| (v, v)));
        }
        let mut edges: Vec<(usize, usize)> = set.into_iter().collect();
        edges.sort_unstable();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            if a != b {
                neighbors[b].push(a);
            }
        }
        neighbors.iter_mut().for_each(|nb| nb.sort_unstable());
        Ok(Graph {
            node_ids,
            edges,
            self_loops,
            neighbors,
        })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    /// Neighborhood of `v`, including `v` itself when self-loops are set.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Number of distinct neighbors other than the node itself.
    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].iter().filter(|&&u| u != v).count()
    }

    /// Edges between distinct nodes.
    pub fn cross_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|(a, b)| a != b)
    }

    /// Relabels nodes so that old node `perm[i]` becomes new node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        let n = self.num_nodes();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(GraphError::Invalid("not a permutation".into()));
            }
            inverse[old] = new;
        }
        if perm.len() != n {
            return Err(GraphError::Invalid("not a permutation".into()));
        }
        let ids = perm.iter().map(|&old| self.node_ids[old].clone()).collect();
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (inverse[a], inverse[b]))
            .collect();
        Graph::new(ids, edges, self.self_loops)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, GraphError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| GraphError::MissingColumn(name.to_string()))
}

fn tsv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(false)
        .from_reader(reader)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses a tab-separated interaction table with header columns `protein1`,
/// `protein2` and `combined_score` (extra columns are ignored).
pub fn parse_interactions<R: Read>(reader: R) -> Result<InteractionTable, GraphError> {
    let mut rdr = tsv_reader(reader);
    let headers = rdr.headers()?.clone();
    let ia = column_index(&headers, "protein1")?;
    let ib = column_index(&headers, "protein2")?;
    let is = column_index(&headers, "combined_score")?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| GraphError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        let node_a = record[ia].trim().to_string();
        let node_b = record[ib].trim().to_string();
        if node_a.is_empty() || node_b.is_empty() {
            return Err(GraphError::Malformed {
                line,
                message: "empty node id".into(),
            });
        }
        let raw = record[is].trim();
        let combined_score = raw
            .parse::<u16>()
            .ok()
            .filter(|&s| s <= 1000)
            .ok_or_else(|| GraphError::BadScore {
                line,
                value: raw.to_string(),
            })?;
        if node_a == node_b {
            return Err(GraphError::SelfPair { line, id: node_a });
        }
        rows.push(Interaction {
            node_a,
            node_b,
            combined_score,
        });
    }
    Ok(InteractionTable { rows })
}

pub fn write_interactions<W: Write>(table: &InteractionTable, writer: W) -> Result<(), GraphError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(b'\t').from_writer(writer);
    wtr.write_record(["protein1", "protein2", "combined_score"])?;
    for row in &table.rows {
        wtr.write_record([
            row.node_a.as_str(),
            row.node_b.as_str(),
            row.combined_score.to_string().as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Keeps rows with `combined_score >= min_score`; nodes appear in
/// first-appearance order and duplicate undirected pairs collapse.
pub fn build_graph(table: &InteractionTable, min_score: u16) -> Graph {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut node_ids = Vec::new();
    let mut edges = Vec::new();
    for row in table.rows.iter().filter(|r| r.combined_score >= min_score) {
        let mut ends = [0usize; 2];
        for (slot, id) in ends.iter_mut().zip([&row.node_a, &row.node_b]) {
            *slot = *index.entry(id.as_str()).or_insert_with(|| {
                node_ids.push(id.clone());
                node_ids.len() - 1
            });
        }
        edges.push((ends[0], ends[1]));
    }
    Graph::new(node_ids, edges, false).expect("parsed rows form a valid graph")
}

/// Keeps nodes whose degree is at least `min_degree`, then takes the induced
/// subgraph. Applied once; degrees are not recomputed after removal.
pub fn degree_filter(graph: &Graph, min_degree: usize) -> Result<Graph, GraphError> {
    if graph.self_loops {
        return Err(GraphError::SelfLoopsPresent);
    }
    let keep: Vec<usize> = (0..graph.num_nodes())
        .filter(|&v| graph.degree(v) >= min_degree)
        .collect();
    let mut remap = vec![usize::MAX; graph.num_nodes()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let ids = keep.iter().map(|&v| graph.node_ids[v].clone()).collect();
    let edges = graph
        .edges
        .iter()
        .filter(|&&(a, b)| remap[a] != usize::MAX && remap[b] != usize::MAX)
        .map(|&(a, b)| (remap[a], remap[b]))
        .collect();
    Graph::new(ids, edges, false)
}

/// Feature-to-protein table read from a `feature_id\tprotein_id` TSV.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureMapping {
    pub rows: Vec<(String, String)>,
}

pub fn parse_feature_mapping<R: Read>(reader: R) -> Result<FeatureMapping, GraphError> {
    let mut rdr = tsv_reader(reader);
    let headers = rdr.headers()?.clone();
    let fi = column_index(&headers, "feature_id")?;
    let pi = column_index(&headers, "protein_id")?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| GraphError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let feature = record[fi].trim();
        let protein = record[pi].trim();
        if feature.is_empty() || protein.is_empty() {
            return Err(GraphError::Malformed {
                line: record_line(&record),
                message: "empty id".into(),
            });
        }
        rows.push((feature.to_string(), protein.to_string()));
    }
    Ok(FeatureMapping { rows })
}

/// Where each feature landed: `protein[i]` is the source-graph node id the
/// feature was attached to, or `None` if it became an isolated node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureNodeMap {
    pub feature_ids: Vec<String>,
    pub protein: Vec<Option<String>>,
}

impl FeatureNodeMap {
    pub fn num_mapped(&self) -> usize {
        self.protein.iter().filter(|p| p.is_some()).count()
    }
}

/// Builds the model graph: node `i` is feature `i`.
///
/// A mapped feature inherits the adjacency of its protein node; features
/// sharing a protein are joined to each other. Features without a mapping,
/// or mapped to a protein absent from `graph`, become isolated nodes. With
/// `mapping = None`, a feature maps to the node with the same id, if any.
/// The result carries one self-loop per node.
pub fn attach_features(
    graph: &Graph,
    feature_ids: &[String],
    mapping: Option<&FeatureMapping>,
) -> Result<(Graph, FeatureNodeMap), GraphError> {
    if graph.self_loops {
        return Err(GraphError::SelfLoopsPresent);
    }
    let mut seen = HashSet::with_capacity(feature_ids.len());
    for f in feature_ids {
        if !seen.insert(f.as_str()) {
            return Err(GraphError::DuplicateFeature(f.clone()));
        }
    }
    let node_index: HashMap<&str, usize> = graph
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let lookup: HashMap<&str, &str> = match mapping {
        Some(m) => {
            let mut table: HashMap<&str, &str> = HashMap::new();
            for (f, p) in &m.rows {
                if let Some(prev) = table.insert(f.as_str(), p.as_str()) {
                    if prev != p {
                        return Err(GraphError::AmbiguousMapping {
                            feature: f.clone(),
                            first: prev.to_string(),
                            second: p.clone(),
                        });
                    }
                }
            }
            table
        }
        None => feature_ids
            .iter()
            .map(|f| (f.as_str(), f.as_str()))
            .collect(),
    };

    let mut protein = Vec::with_capacity(feature_ids.len());
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, f) in feature_ids.iter().enumerate() {
        let node = lookup
            .get(f.as_str())
            .and_then(|p| node_index.get(p).copied());
        if let Some(node) = node {
            members.entry(node).or_default().push(i);
            protein.push(Some(graph.node_ids[node].clone()));
        } else {
            protein.push(None);
        }
    }

    let mut edges = Vec::new();
    for group in members.values() {
        for (k, &a) in group.iter().enumerate() {
            for &b in &group[k + 1..] {
                edges.push((a, b));
            }
        }
    }
    for (u, v) in graph.cross_edges() {
        if let (Some(fu), Some(fv)) = (members.get(&u), members.get(&v)) {
            for &a in fu {
                for &b in fv {
                    edges.push((a, b));
                }
            }
        }
    }
    let attached = Graph::new(feature_ids.to_vec(), edges, true)?;
    Ok((
        attached,
        FeatureNodeMap {
            feature_ids: feature_ids.to_vec(),
            protein,
        },
    ))
}

/// Neighborhood aggregation: `out[b, v] = sum_{u in N(v)} x[b, u]`, divided
/// by `|N(v)|` in mean mode.
pub fn aggregate(
    graph: &Graph,
    node_values: ArrayView2<f64>,
    mode: AggregationMode,
) -> Result<Array2<f64>, GraphError> {
    check_aggregation(graph, node_values)?;
    let (batch, n) = node_values.dim();
    let mut out = Array2::zeros((batch, n));
    for b in 0..batch {
        let row = node_values.row(b);
        for v in 0..n {
            let nb = &graph.neighbors[v];
            let sum: f64 = nb.iter().map(|&u| row[u]).sum();
            out[[b, v]] = match mode {
                AggregationMode::Sum => sum,
                AggregationMode::Mean => sum / nb.len() as f64,
            };
        }
    }
    Ok(out)
}

/// Adjoint of [`aggregate`]: maps output gradients to input gradients.
pub fn aggregate_backward(
    graph: &Graph,
    upstream: ArrayView2<f64>,
    mode: AggregationMode,
) -> Result<Array2<f64>, GraphError> {
    check_aggregation(graph, upstream)?;
    let (batch, n) = upstream.dim();
    let mut out = Array2::zeros((batch, n));
    for b in 0..batch {
        for v in 0..n {
            let nb = &graph.neighbors[v];
            let g = match mode {
                AggregationMode::Sum => upstream[[b, v]],
                AggregationMode::Mean => upstream[[b, v]] / nb.len() as f64,
            };
            for &u in nb {
                out[[b, u]] += g;
            }
        }
    }
    Ok(out)
}

fn check_aggregation(graph: &Graph, values: ArrayView2<f64>) -> Result<(), GraphError> {
    if !graph.self_loops {
        return Err(GraphError::SelfLoopsMissing);
    }
    if values.ncols() != graph.num_nodes() {
        return Err(GraphError::ShapeMismatch {
            expected: graph.num_nodes(),
            actual: values.ncols(),
        });
    }
    Ok(())
}
